mod output;

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sofa_fl::baselines::run_hypcluster;
use sofa_fl::config::RunConfig;
use sofa_fl::data::load_mnist_dir;
use sofa_fl::orchestrator::{ablation_configs, Federation, RunOutput, SofaRun};

#[derive(Parser)]
#[command(name = "sofa-fl", version, about = "Self-organizing hierarchical federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the hierarchical algorithm.
    Run(Common),
    /// Run HypCluster with K hypothesis models (K = 1 is FedAvg).
    Baseline {
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Run the four data-sharing ablation settings and print a summary table.
    Ablate(Common),
    /// Merge two report.json files into a per-client CSV.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn a run directory's trace.json into loss_curves.csv.
    Plotdata {
        run_dir: PathBuf,
        /// Output CSV; defaults to <run_dir>/loss_curves.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Directory holding train-images-idx3-ubyte[.gz] and train-labels-idx1-ubyte[.gz].
    #[arg(long, default_value = "data/mnist")]
    mnist_dir: PathBuf,
    /// Use the built-in synthetic clustered federation instead of MNIST.
    #[arg(long)]
    synthetic: bool,
    /// Use every MNIST sample instead of the configured stratified subset.
    #[arg(long, conflicts_with = "synthetic")]
    full_mnist: bool,
}

enum CliError {
    Config(String),
    Data(String),
    Invariant(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 3,
            CliError::Data(_) => 4,
            CliError::Invariant(_) => 5,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Invariant(m) => write!(f, "invariant violation: {m}"),
            CliError::Other(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<sofa_fl::Error> for CliError {
    fn from(e: sofa_fl::Error) -> Self {
        match e {
            sofa_fl::Error::Config { .. } => CliError::Config(e.to_string()),
            sofa_fl::Error::Invariant { .. } => CliError::Invariant(e.to_string()),
            sofa_fl::Error::Idx { .. } => CliError::Data(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => match RunConfig::from_path(path) {
            Err(sofa_fl::Error::Io(e)) => return Err(CliError::Config(format!("cannot read {}: {e}", path.display()))),
            other => other?,
        },
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.full_mnist {
        cfg.subset_size = 0;
    }
    if common.synthetic {
        cfg.num_clients = cfg.synthetic_clusters * cfg.synthetic_clients_per_cluster;
    }
    cfg.check()?;
    Ok(cfg)
}

fn load_federation(common: &Common, cfg: &RunConfig) -> Result<Federation> {
    if common.synthetic {
        return Federation::synthetic(cfg).map_err(|e| CliError::Data(e.to_string()));
    }
    let dir = &common.mnist_dir;
    if !dir.is_dir() {
        return Err(CliError::Data(format!(
            "MNIST directory {} not found; pass --mnist-dir <dir> or use --synthetic",
            dir.display()
        )));
    }
    let ds = load_mnist_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    Federation::from_dataset(&ds, cfg).map_err(|e| match e {
        sofa_fl::Error::Config { .. } => e.into(),
        other => CliError::Data(other.to_string()),
    })
}

fn run_with_progress(cfg: &RunConfig, fed: Federation, label: &str) -> Result<RunOutput> {
    let mut run = SofaRun::new(cfg, fed, label)?;
    for _ in 0..cfg.rounds {
        let r = run.step()?;
        eprintln!(
            "[{label}] round {:>3}  client acc {:.4}  total acc {:.4}  clusters {}  edits {}",
            r.round, r.client_mean_accuracy, r.total_mean_accuracy, r.n_clusters, r.shape_edits
        );
    }
    Ok(run.finish()?)
}

fn print_summary(report: &sofa_fl::orchestrator::RunReport) {
    let m = &report.metrics;
    println!("label              {}", report.label);
    println!("mean accuracy      {:.4}", m.mean_accuracy);
    println!("std deviation      {:.4}", m.std_deviation);
    println!("min accuracy       {:.4}", m.min_accuracy);
    println!("accuracy gap       {:.4}", m.accuracy_gap);
    match m.jain_index {
        Some(j) => println!("jain index         {j:.5}"),
        None => println!("jain index         n/a"),
    }
    println!("bottom 10% mean    {:.4}", m.bottom_decile_mean);
    if let Some(t) = report.total_average {
        println!("total average      {t:.4}");
    }
}

fn slug(label: &str) -> String {
    label.replace(' ', "_").replace('.', "")
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run(common) => {
            let cfg = load_config(&common)?;
            let fed = load_federation(&common, &cfg)?;
            let out = run_with_progress(&cfg, fed, "sofa")?;
            output::write_run(&common.out, &out)?;
            print_summary(&out.report);
        }
        Command::Baseline { k, common } => {
            if k == 0 {
                return Err(CliError::Config("--k must be at least 1".into()));
            }
            let cfg = load_config(&common)?;
            let fed = load_federation(&common, &cfg)?;
            let out = run_hypcluster(&cfg, &fed, k)?;
            output::write_baseline(&common.out, &out)?;
            print_summary(&out.report);
        }
        Command::Ablate(common) => {
            let cfg = load_config(&common)?;
            let fed = load_federation(&common, &cfg)?;
            let mut table = csv::Writer::from_writer(Vec::new());
            table
                .write_record(["setting", "client_average", "total_average"])
                .map_err(io::Error::from)?;
            let mut rows = Vec::new();
            for (label, row_cfg) in ablation_configs(&cfg) {
                let out = run_with_progress(&row_cfg, fed.clone(), label)?;
                output::write_run(&common.out.join(slug(label)), &out)?;
                let total = out.report.total_average.unwrap_or(f64::NAN);
                table
                    .write_record([label.to_string(), out.report.client_average.to_string(), total.to_string()])
                    .map_err(io::Error::from)?;
                rows.push((label, out.report.client_average, total));
            }
            let bytes = table.into_inner().map_err(|e| CliError::Other(e.to_string()))?;
            std::fs::create_dir_all(&common.out)?;
            std::fs::write(common.out.join("ablation.csv"), bytes)?;
            println!("{:<40} {:>14} {:>14}", "setting", "client average", "total average");
            for (label, c, t) in rows {
                println!("{label:<40} {c:>14.4} {t:>14.4}");
            }
        }
        Command::Compare { a, b, out } => {
            let ra = output::read_report(&a).map_err(|e| CliError::Data(format!("{}: {e}", a.display())))?;
            let rb = output::read_report(&b).map_err(|e| CliError::Data(format!("{}: {e}", b.display())))?;
            match out {
                Some(path) => output::compare(&ra, &rb, std::fs::File::create(path)?)?,
                None => output::compare(&ra, &rb, io::stdout().lock())?,
            }
        }
        Command::Plotdata { run_dir, out } => {
            let trace_path = run_dir.join("trace.json");
            let trace = output::read_trace(&trace_path)
                .map_err(|e| CliError::Data(format!("{}: {e}", trace_path.display())))?;
            let path = out.unwrap_or_else(|| run_dir.join("loss_curves.csv"));
            output::plotdata(&trace, std::fs::File::create(&path)?)?;
            println!("{}", display(&path));
        }
    }
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
