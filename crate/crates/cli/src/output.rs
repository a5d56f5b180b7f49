//! File outputs: per-round CSVs, JSON reports and traces, and the
//! `compare` / `plotdata` transforms over them.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sofa_fl::baselines::{BaselineOutput, BaselineRound};
use sofa_fl::orchestrator::{RoundRecord, RunOutput, RunReport};

/// Contents of `trace.json`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "algorithm", content = "records", rename_all = "lowercase")]
pub enum Trace {
    Sofa(Vec<RoundRecord>),
    Hypcluster(Vec<BaselineRound>),
}

#[derive(Serialize)]
struct RoundRow {
    round: usize,
    client_mean_accuracy: f64,
    total_mean_accuracy: f64,
    min_client_accuracy: f64,
    objective_total: f64,
    objective_term1: f64,
    objective_term2: f64,
    objective_term3: f64,
    raw_sibling_distance: f64,
    raw_parent_distance: f64,
    mean_loss_increase: Option<f64>,
    shape_edits: usize,
    n_clusters: usize,
    tree_height: usize,
    mean_received: f64,
}

#[derive(Serialize)]
struct NodeRow<'a> {
    round: usize,
    node: usize,
    kind: &'a str,
    parent: Option<usize>,
    depth: usize,
    data_weight: u64,
    train_loss: f64,
    test_loss: f64,
    test_accuracy: f64,
    round_start_loss: Option<f64>,
    pre_aggregation_loss: Option<f64>,
}

#[derive(Serialize)]
struct BaselineRow {
    round: usize,
    client: usize,
    model: usize,
    test_loss: f64,
    test_accuracy: f64,
}

fn json_err(e: serde_json::Error) -> io::Error {
    io::Error::other(e)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(json_err)?;
    w.write_all(b"\n")?;
    w.flush()
}

pub fn write_run(dir: &Path, out: &RunOutput) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), out.config.to_toml_string())?;
    write_json(&dir.join("report.json"), &out.report)?;

    let mut rounds = csv::Writer::from_path(dir.join("rounds.csv"))?;
    for r in &out.records {
        let received: usize = r.sharing.iter().map(|s| s.n_received).sum();
        rounds.serialize(RoundRow {
            round: r.round,
            client_mean_accuracy: r.client_mean_accuracy,
            total_mean_accuracy: r.total_mean_accuracy,
            min_client_accuracy: r.min_client_accuracy,
            objective_total: r.objective.total,
            objective_term1: r.objective.term1,
            objective_term2: r.objective.term2,
            objective_term3: r.objective.term3,
            raw_sibling_distance: r.objective.raw_sibling,
            raw_parent_distance: r.objective.raw_parent,
            mean_loss_increase: r.mean_loss_increase,
            shape_edits: r.shape_edits,
            n_clusters: r.n_clusters,
            tree_height: r.tree_height,
            mean_received: if r.sharing.is_empty() { 0.0 } else { received as f64 / r.sharing.len() as f64 },
        })?;
    }
    rounds.flush()?;

    let mut nodes = csv::Writer::from_path(dir.join("nodes.csv"))?;
    for r in &out.records {
        for n in &r.nodes {
            nodes.serialize(NodeRow {
                round: r.round,
                node: n.node.0,
                kind: match n.kind {
                    sofa_fl::NodeKind::Client => "client",
                    sofa_fl::NodeKind::Cluster => "cluster",
                },
                parent: n.parent.map(|p| p.0),
                depth: n.depth,
                data_weight: n.data_weight,
                train_loss: n.train_loss,
                test_loss: n.test_loss,
                test_accuracy: n.test_accuracy,
                round_start_loss: n.round_start_loss,
                pre_aggregation_loss: n.pre_aggregation_loss,
            })?;
        }
    }
    nodes.flush()?;

    let mut sharing = csv::Writer::from_path(dir.join("sharing.csv"))?;
    for r in &out.records {
        for s in &r.sharing {
            sharing.serialize(s)?;
        }
    }
    sharing.flush()?;

    let mut log = BufWriter::new(File::create(dir.join("shape_log.jsonl"))?);
    for e in &out.shape_log {
        serde_json::to_writer(&mut log, e).map_err(json_err)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;

    for snap in &out.snapshots {
        write_json(&dir.join(format!("tree_round_{}.json", snap.round)), snap)?;
    }
    write_json(&dir.join("dmac_trace.json"), &out.dmac_trace)?;
    write_json(&dir.join("trace.json"), &Trace::Sofa(out.records.clone()))
}

pub fn write_baseline(dir: &Path, out: &BaselineOutput) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), &out.report)?;
    let mut rounds = csv::Writer::from_path(dir.join("rounds.csv"))?;
    for r in &out.records {
        for (c, &m) in r.assignment.iter().enumerate() {
            rounds.serialize(BaselineRow {
                round: r.round,
                client: c,
                model: m,
                test_loss: r.client_test_losses[c],
                test_accuracy: r.client_accuracies[c],
            })?;
        }
    }
    rounds.flush()?;
    write_json(&dir.join("trace.json"), &Trace::Hypcluster(out.records.clone()))
}

pub fn read_report(path: &Path) -> io::Result<RunReport> {
    serde_json::from_slice(&fs::read(path)?).map_err(json_err)
}

/// Side-by-side per-client accuracies of two reports.
pub fn compare<W: Write>(a: &RunReport, b: &RunReport, out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let (la, lb) = if a.label == b.label {
        (format!("{}_a", a.label), format!("{}_b", b.label))
    } else {
        (a.label.clone(), b.label.clone())
    };
    w.write_record(["client", la.as_str(), lb.as_str(), "difference"])?;
    let n = a.clients.len().max(b.clients.len());
    for i in 0..n {
        let va = a.clients.iter().find(|c| c.client == i).map(|c| c.accuracy);
        let vb = b.clients.iter().find(|c| c.client == i).map(|c| c.accuracy);
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let diff = match (va, vb) {
            (Some(x), Some(y)) => (x - y).to_string(),
            _ => String::new(),
        };
        w.write_record([i.to_string(), fmt(va), fmt(vb), diff])?;
    }
    w.flush()
}

#[derive(Serialize)]
struct CurveRow<'a> {
    round: usize,
    node: usize,
    kind: &'a str,
    train_loss: Option<f64>,
    test_loss: f64,
    test_accuracy: f64,
    round_start_loss: Option<f64>,
}

/// Long-format loss curves from a `trace.json`.
pub fn plotdata<W: Write>(trace: &Trace, out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    match trace {
        Trace::Sofa(records) => {
            for r in records {
                for n in &r.nodes {
                    w.serialize(CurveRow {
                        round: r.round,
                        node: n.node.0,
                        kind: if n.kind == sofa_fl::NodeKind::Client { "client" } else { "cluster" },
                        train_loss: Some(n.train_loss),
                        test_loss: n.test_loss,
                        test_accuracy: n.test_accuracy,
                        round_start_loss: n.round_start_loss,
                    })?;
                }
            }
        }
        Trace::Hypcluster(records) => {
            for r in records {
                for (c, (&loss, &acc)) in r.client_test_losses.iter().zip(&r.client_accuracies).enumerate() {
                    w.serialize(CurveRow {
                        round: r.round,
                        node: c,
                        kind: "client",
                        train_loss: None,
                        test_loss: loss,
                        test_accuracy: acc,
                        round_start_loss: None,
                    })?;
                }
            }
        }
    }
    w.flush()
}

pub fn read_trace(path: &Path) -> io::Result<Trace> {
    serde_json::from_slice(&fs::read(path)?).map_err(json_err)
}
