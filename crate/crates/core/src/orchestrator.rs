//! The main loop: warm-up, DMAC, then rounds of local training,
//! hierarchical aggregation, evaluation, restructuring and data sharing.

use serde::{Deserialize, Serialize};

use crate::clustering::{distance, dmac_build_with, DistanceMetric, Dmac, DmacIteration};
use crate::config::RunConfig;
use crate::data::{self, Dataset, Shard};
use crate::error::{Error, Result};
use crate::metrics::{build_report, MetricsReport};
use crate::model::{evaluate, init_params, sgd_epochs, ModelSpec, Proximal};
use crate::params::ParamVector;
use crate::rng;
use crate::shape::{shape_round, ShapeConfig, ShapeEdit};
use crate::sharing::{distribute, gather, summarize, SharingMode, SharingSummary};
use crate::topology::{NodeId, NodeKind, TreeSnapshot, TreeTopology};

/// Data shared by every algorithm in a comparison: one dataset and one
/// shard per client (`shards[i]` belongs to client `i`).
#[derive(Debug, Clone)]
pub struct Federation {
    pub dataset: Dataset,
    pub shards: Vec<Shard>,
    /// Generating population of each client, for synthetic data.
    pub groups: Option<Vec<usize>>,
}

impl Federation {
    /// Stratified subset, Dirichlet label-skew partition, then a per-client
    /// train/test split.
    pub fn from_dataset(data: &Dataset, config: &RunConfig) -> Result<Self> {
        let dataset = if config.subset_size > 0 && config.subset_size < data.len() {
            data::stratified_subset(data, config.subset_size, config.seed)?
        } else {
            data.clone()
        };
        let mut shards = data::dirichlet_partition(&dataset, config.num_clients, config.dirichlet_alpha, config.seed)?;
        data::split_train_test(&mut shards, config.test_fraction, config.seed);
        Ok(Federation { dataset, shards, groups: None })
    }

    pub fn synthetic(config: &RunConfig) -> Result<Self> {
        let syn = data::synthetic_clusters(&config.synthetic(), config.seed)?;
        let mut shards = syn.shards;
        data::split_train_test(&mut shards, config.test_fraction, config.seed);
        Ok(Federation { dataset: syn.dataset, shards, groups: Some(syn.cluster_of) })
    }

    pub fn model_spec(&self, config: &RunConfig) -> Result<ModelSpec> {
        ModelSpec::new(self.dataset.input_dim(), config.hidden_dims.clone(), self.dataset.num_classes())
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    fn check(&self) -> Result<()> {
        for (i, s) in self.shards.iter().enumerate() {
            if s.client != i {
                return Err(Error::InvalidArgument(format!("shard {i} belongs to client {}", s.client)));
            }
            if s.train.is_empty() || s.test.is_empty() {
                return Err(Error::InvalidArgument(format!("client {i} needs both training and test samples")));
            }
        }
        Ok(())
    }
}

/// Seed of client `client`'s local training in `round` (warm-up is round 0).
pub fn train_seed(seed: u64, client: usize, round: usize) -> u64 {
    rng::derive_seed(seed, "train", &[client as u64, round as u64])
}

/// Every client trains from `init` on its owned data; DMAC then clusters
/// the resulting weights. Client `i` is `NodeId(i)` in the returned tree.
pub fn warmup_and_cluster(fed: &Federation, spec: &ModelSpec, init: &ParamVector, config: &RunConfig) -> Result<Dmac> {
    let opts = config.sgd(config.warmup_epochs);
    let trained = config.execution.map(&fed.shards, |s| {
        sgd_epochs(spec, init, &fed.dataset, &s.train_rows(), &opts, train_seed(config.seed, s.client, 0), None)
            .map(|o| o.params)
    });
    let leaves = trained
        .into_iter()
        .zip(&fed.shards)
        .map(|(p, s)| p.map(|p| (p, s.train.len() as u64)))
        .collect::<Result<Vec<_>>>()?;
    let dmac = dmac_build_with(&leaves, &config.dmac(), config.execution)?;
    check_tree(&dmac.tree, 0)?;
    Ok(dmac)
}

/// Recomputes every cluster's params as the data-weighted mean of its children.
pub fn aggregate_up(tree: &mut TreeTopology) {
    tree.refresh_all();
}

fn check_tree(tree: &TreeTopology, round: usize) -> Result<()> {
    let violations = tree.validate();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::Invariant { round, violations: violations.iter().map(|v| v.to_string()).collect() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub total: f64,
    /// Weighted local losses.
    pub term1: f64,
    /// Weighted sibling distances.
    pub term2: f64,
    /// Weighted child-to-parent distances.
    pub term3: f64,
    /// `term2` with every cluster weight set to 1.
    pub raw_sibling: f64,
    /// `term3` with every cluster weight set to 1.
    pub raw_parent: f64,
}

/// Three-term hierarchical objective. Cluster weights are proportional to
/// data weight across all clusters; child weights are proportional within
/// each cluster. `loss(u)` is the training loss of node `u`.
pub fn objective_value(
    tree: &TreeTopology,
    loss: impl Fn(NodeId) -> f64,
    alpha: f64,
    beta: f64,
    metric: DistanceMetric,
) -> ObjectiveTerms {
    let clusters = tree.clusters();
    let total_weight: f64 = clusters.iter().map(|&c| tree.node(c).data_weight as f64).sum();
    let mut t = ObjectiveTerms::default();
    for &j in &clusters {
        let node = tree.node(j);
        let kids = &node.children;
        let w_j = if total_weight > 0.0 { node.data_weight as f64 / total_weight } else { 1.0 / clusters.len() as f64 };
        let mut local = 0.0;
        for &u in kids {
            let w_u = if node.data_weight > 0 {
                tree.node(u).data_weight as f64 / node.data_weight as f64
            } else {
                1.0 / kids.len() as f64
            };
            local += w_u * loss(u);
        }
        t.term1 += w_j * local;
        let mut pairs = 0.0;
        for a in 0..kids.len() {
            for b in a + 1..kids.len() {
                pairs += distance(tree.params(kids[a]), tree.params(kids[b]), metric);
            }
        }
        let sib = pairs / kids.len() as f64;
        t.raw_sibling += sib;
        t.term2 += alpha * sib;
        let par: f64 = kids.iter().map(|&u| distance(tree.params(u), tree.params(j), metric)).sum();
        t.raw_parent += par;
        t.term3 += beta * par;
    }
    t.total = t.term1 + t.term2 + t.term3;
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node: NodeId,
    pub kind: NodeKind,
    pub parent: Option<NodeId>,
    pub depth: usize,
    pub data_weight: u64,
    /// Clients: over owned and received training samples. Clusters: over
    /// the owned training samples of every client below.
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    /// Clients only: loss on this round's training set before local training.
    pub round_start_loss: Option<f64>,
    /// Clusters only: train loss of the previous round's cluster model.
    pub pre_aggregation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub nodes: Vec<NodeRecord>,
    pub objective: ObjectiveTerms,
    pub client_mean_accuracy: f64,
    /// Mean over clients and clusters.
    pub total_mean_accuracy: f64,
    pub min_client_accuracy: f64,
    /// Mean over clients of round-start loss minus the previous round's final train loss.
    pub mean_loss_increase: Option<f64>,
    pub shape_edits: usize,
    pub n_clusters: usize,
    pub tree_height: usize,
    pub sharing: Vec<SharingSummary>,
}

impl RoundRecord {
    pub fn client_accuracies(&self) -> Vec<f64> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Client).map(|n| n.test_accuracy).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeLogEntry {
    pub round: usize,
    #[serde(flatten)]
    pub edit: ShapeEdit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientResult {
    pub client: usize,
    pub accuracy: f64,
    /// Parent node for tree runs, model index for clustered baselines.
    pub group: Option<usize>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub label: String,
    pub seed: u64,
    pub rounds: usize,
    pub metrics: MetricsReport,
    pub client_average: f64,
    /// Mean over clients and clusters; absent for flat baselines.
    pub total_average: Option<f64>,
    pub clients: Vec<ClientResult>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: RunConfig,
    pub records: Vec<RoundRecord>,
    pub report: RunReport,
    pub shape_log: Vec<ShapeLogEntry>,
    pub snapshots: Vec<TreeSnapshot>,
    pub dmac_trace: Vec<DmacIteration>,
    pub shape_config: ShapeConfig,
    /// Final tree, including client and cluster params.
    pub tree: TreeTopology,
}

struct ClientStep {
    params: ParamVector,
    start_loss: Option<f64>,
    train_loss: f64,
    test_loss: f64,
    test_acc: f64,
}

struct ClusterEval {
    train_loss: f64,
    pre_loss: Option<f64>,
    test_loss: f64,
    test_acc: f64,
}

/// A run in progress. [`SofaRun::step`] advances one round;
/// [`SofaRun::federation_mut`] lets scenarios alter data between rounds.
pub struct SofaRun {
    config: RunConfig,
    label: String,
    spec: ModelSpec,
    fed: Federation,
    tree: TreeTopology,
    shape: ShapeConfig,
    round: usize,
    last_train_loss: Vec<f64>,
    records: Vec<RoundRecord>,
    shape_log: Vec<ShapeLogEntry>,
    snapshots: Vec<TreeSnapshot>,
    dmac_trace: Vec<DmacIteration>,
}

impl SofaRun {
    /// Warm-up, DMAC and the round-0 evaluation.
    pub fn new(config: &RunConfig, fed: Federation, label: impl Into<String>) -> Result<Self> {
        config.check()?;
        fed.check()?;
        let spec = fed.model_spec(config)?;
        let init = init_params(&spec, config.seed);
        let Dmac { tree, trace } = warmup_and_cluster(&fed, &spec, &init, config)?;
        let shape = ShapeConfig::calibrated(
            &tree,
            config.shape_epsilon,
            config.shape_tau_merge,
            config.shape_theta_split,
            config.shape_op_order.clone(),
            config.distance_metric,
        );
        shape.check()?;
        let mut run = SofaRun {
            config: config.clone(),
            label: label.into(),
            spec,
            fed,
            tree,
            shape,
            round: 0,
            last_train_loss: Vec::new(),
            records: Vec::new(),
            shape_log: Vec::new(),
            snapshots: Vec::new(),
            dmac_trace: trace,
        };
        let steps: Vec<ClientStep> = run
            .fed
            .shards
            .iter()
            .map(|s| run.eval_client(run.tree.params(NodeId(s.client)).clone(), s, None))
            .collect::<Result<_>>()?;
        run.finish_round(steps, None, 0)?;
        Ok(run)
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn tree(&self) -> &TreeTopology {
        &self.tree
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn shape_log(&self) -> &[ShapeLogEntry] {
        &self.shape_log
    }

    pub fn snapshots(&self) -> &[TreeSnapshot] {
        &self.snapshots
    }

    pub fn shape_config(&self) -> &ShapeConfig {
        &self.shape
    }

    pub fn federation(&self) -> &Federation {
        &self.fed
    }

    pub fn federation_mut(&mut self) -> &mut Federation {
        &mut self.fed
    }

    fn eval_client(&self, params: ParamVector, shard: &Shard, start_loss: Option<f64>) -> Result<ClientStep> {
        let data = &self.fed.dataset;
        let (train, _) = evaluate(&self.spec, &params, data, &shard.training_rows())?;
        let (test, acc) = evaluate(&self.spec, &params, data, &shard.test_rows())?;
        Ok(ClientStep { params, start_loss, train_loss: train.0, test_loss: test.0, test_acc: acc })
    }

    fn train_client(&self, shard: &Shard, round: usize) -> Result<ClientStep> {
        let id = NodeId(shard.client);
        let mut start = self.tree.params(id).clone();
        let parent = self.tree.parent(id);
        if let Some(p) = parent {
            start.mix_toward(self.tree.params(p), self.config.downward_mix);
        }
        let rows = shard.training_rows();
        let (start_loss, _) = evaluate(&self.spec, &start, &self.fed.dataset, &rows)?;
        let prox = match parent {
            Some(p) if self.config.objective_beta > 0.0 => {
                Some(Proximal { beta: self.config.objective_beta, anchor: self.tree.params(p) })
            }
            _ => None,
        };
        let opts = self.config.sgd(self.config.local_epochs);
        let seed = train_seed(self.config.seed, shard.client, round);
        let out = sgd_epochs(&self.spec, &start, &self.fed.dataset, &rows, &opts, seed, prox)?;
        self.eval_client(out.params, shard, Some(start_loss.0))
    }

    /// Advances one round and returns its record.
    pub fn step(&mut self) -> Result<&RoundRecord> {
        let round = self.round + 1;
        let steps = self.config.execution.map(&self.fed.shards, |s| self.train_client(s, round));
        let steps = steps.into_iter().collect::<Result<Vec<_>>>()?;
        let previous: Vec<(NodeId, ParamVector)> =
            self.tree.clusters().into_iter().map(|c| (c, self.tree.params(c).clone())).collect();
        self.finish_round(steps, Some(previous), round)?;
        Ok(self.records.last().expect("record"))
    }

    /// Aggregation, evaluation, restructuring and sharing for `round`.
    fn finish_round(
        &mut self,
        steps: Vec<ClientStep>,
        previous: Option<Vec<(NodeId, ParamVector)>>,
        round: usize,
    ) -> Result<()> {
        for (i, s) in steps.iter().enumerate() {
            self.tree.set_params(NodeId(i), s.params.clone())?;
        }
        aggregate_up(&mut self.tree);

        let clusters = self.tree.clusters();
        let evals = self.config.execution.map(&clusters, |&c| {
            let leaves = self.tree.leaves_under(c);
            let train: Vec<usize> = leaves.iter().flat_map(|l| self.fed.shards[l.0].train_rows()).collect();
            let test: Vec<usize> = leaves.iter().flat_map(|l| self.fed.shards[l.0].test_rows()).collect();
            let data = &self.fed.dataset;
            let (tl, _) = evaluate(&self.spec, self.tree.params(c), data, &train)?;
            let (vl, acc) = evaluate(&self.spec, self.tree.params(c), data, &test)?;
            let pre = match previous.as_ref().and_then(|p| p.iter().find(|(id, _)| *id == c)) {
                Some((_, old)) => Some(evaluate(&self.spec, old, data, &train)?.0 .0),
                None => None,
            };
            Ok(ClusterEval { train_loss: tl.0, pre_loss: pre, test_loss: vl.0, test_acc: acc })
        });
        let evals = evals.into_iter().collect::<Result<Vec<_>>>()?;

        let mut nodes = Vec::with_capacity(steps.len() + clusters.len());
        for (i, s) in steps.iter().enumerate() {
            let id = NodeId(i);
            nodes.push(NodeRecord {
                node: id,
                kind: NodeKind::Client,
                parent: self.tree.parent(id),
                depth: self.tree.depth(id),
                data_weight: self.tree.node(id).data_weight,
                train_loss: s.train_loss,
                test_loss: s.test_loss,
                test_accuracy: s.test_acc,
                round_start_loss: s.start_loss,
                pre_aggregation_loss: None,
            });
        }
        for (&c, e) in clusters.iter().zip(&evals) {
            nodes.push(NodeRecord {
                node: c,
                kind: NodeKind::Cluster,
                parent: self.tree.parent(c),
                depth: self.tree.depth(c),
                data_weight: self.tree.node(c).data_weight,
                train_loss: e.train_loss,
                test_loss: e.test_loss,
                test_accuracy: e.test_acc,
                round_start_loss: None,
                pre_aggregation_loss: e.pre_loss,
            });
        }
        let train_loss_of = |id: NodeId| nodes.iter().find(|n| n.node == id).map_or(0.0, |n| n.train_loss);
        let objective = objective_value(
            &self.tree,
            train_loss_of,
            self.config.objective_alpha,
            self.config.objective_beta,
            self.config.distance_metric,
        );

        let mean_loss_increase = if round > 0 && !self.last_train_loss.is_empty() {
            let inc: f64 = steps
                .iter()
                .zip(&self.last_train_loss)
                .map(|(s, prev)| s.start_loss.unwrap_or(*prev) - prev)
                .sum();
            Some(inc / steps.len() as f64)
        } else {
            None
        };
        self.last_train_loss = steps.iter().map(|s| s.train_loss).collect();

        let mut shape_edits = 0;
        if round > 0 && self.config.shape_every > 0 && round % self.config.shape_every == 0 {
            let edits = shape_round(&mut self.tree, &self.shape, rng::derive_seed(self.config.seed, "shape", &[round as u64]))?;
            shape_edits = edits.len();
            let violations = self.tree.validate();
            if !violations.is_empty() {
                let mut msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                msgs.extend(edits.iter().map(|e| format!("edit {:?} {:?}", e.op, e.nodes)));
                return Err(Error::Invariant { round, violations: msgs });
            }
            self.shape_log.extend(edits.into_iter().map(|edit| ShapeLogEntry { round, edit }));
        }

        let pools = gather(&self.tree, &self.fed.shards, &self.config.sharing(), self.config.seed, round)?;
        distribute(&self.tree, &mut self.fed.shards, &pools)?;
        let sharing = summarize(&self.tree, &self.fed.shards, round);

        let client_acc: Vec<f64> = steps.iter().map(|s| s.test_acc).collect();
        let all_acc: Vec<f64> = nodes.iter().map(|n| n.test_accuracy).collect();
        self.records.push(RoundRecord {
            round,
            client_mean_accuracy: mean(&client_acc),
            total_mean_accuracy: mean(&all_acc),
            min_client_accuracy: client_acc.iter().copied().fold(f64::INFINITY, f64::min),
            nodes,
            objective,
            mean_loss_increase,
            shape_edits,
            n_clusters: self.tree.clusters().len(),
            tree_height: self.tree.height(),
            sharing,
        });
        self.snapshots.push(self.tree.snapshot(round));
        self.round = round;
        Ok(())
    }

    pub fn finish(self) -> Result<RunOutput> {
        let last = self.records.last().expect("round 0 record");
        let accs = last.client_accuracies();
        let clients = last
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Client)
            .map(|n| ClientResult { client: n.node.0, accuracy: n.test_accuracy, group: n.parent.map(|p| p.0) })
            .collect();
        let report = RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            label: self.label,
            seed: self.config.seed,
            rounds: self.round,
            metrics: build_report(&accs)?,
            client_average: last.client_mean_accuracy,
            total_average: Some(last.total_mean_accuracy),
            clients,
        };
        Ok(RunOutput {
            config: self.config,
            records: self.records,
            report,
            shape_log: self.shape_log,
            snapshots: self.snapshots,
            dmac_trace: self.dmac_trace,
            shape_config: self.shape,
            tree: self.tree,
        })
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// The four sharing settings of the ablation table, keyed by row label.
pub fn ablation_configs(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let with = |ratio, mode| RunConfig { sharing_ratio: ratio, sharing_mode: mode, ..base.clone() };
    vec![
        ("without partial data sharing", with(0.0, SharingMode::Off)),
        ("partial data sharing ratio 0.1", with(0.1, SharingMode::Fresh)),
        ("partial data sharing ratio 0.1 fixed", with(0.1, SharingMode::Fixed)),
        ("partial data sharing ratio 0.2 fixed", with(0.2, SharingMode::Fixed)),
    ]
}

/// Runs every configured round.
pub fn run_sofa(config: &RunConfig, fed: Federation, label: &str) -> Result<RunOutput> {
    let mut run = SofaRun::new(config, fed, label)?;
    for _ in 0..config.rounds {
        run.step()?;
    }
    run.finish()
}
