//! Scenario builders and independent oracles shared by the integration
//! tests and the acceptance gate.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sofa_fl::clustering::{pairwise_distance, DistanceMetric};
use sofa_fl::config::RunConfig;
use sofa_fl::data::{sample_from_means, synthetic_clusters, Dataset};
use sofa_fl::model::{forward_loss_grad, init_params, sgd_epochs, ModelSpec};
use sofa_fl::orchestrator::{train_seed, warmup_and_cluster, Federation, SofaRun};
use sofa_fl::rng;
use sofa_fl::shape::{shape_round, ShapeConfig, ShapeOp, DEFAULT_OP_ORDER};
use sofa_fl::{NodeId, ParamVector, TreeTopology};

// ---------------------------------------------------------------- drift

pub const DRIFT_ROUND: usize = 10;
pub const DRIFT_CLIENT: usize = 0;
pub const DRIFT_WINDOW: usize = 5;

/// The zero-config synthetic run (`run --synthetic`) with a given seed.
pub fn drift_config(seed: u64) -> RunConfig {
    let base = RunConfig::default();
    RunConfig {
        seed,
        rounds: DRIFT_ROUND + DRIFT_WINDOW,
        num_clients: base.synthetic_clusters * base.synthetic_clients_per_cluster,
        ..base
    }
}

/// Redraws every owned sample of `client` from population `target`.
pub fn swap_population(fed: &mut Federation, client: usize, means: &[Vec<Vec<f64>>], target: usize, seed: u64) {
    let rows: Vec<usize> = fed.shards[client].owned().map(|s| s.row).collect();
    let mut r = rng::stream(seed, "drift", &[client as u64]);
    let (feats, labels) = sample_from_means(&means[target], rows.len(), &mut r);
    let d = fed.dataset.input_dim();
    for (i, &row) in rows.iter().enumerate() {
        fed.dataset.set_sample(row, &feats[i * d..(i + 1) * d], labels[i]).unwrap();
    }
}

#[derive(Debug)]
pub struct DriftOutcome {
    /// `(round, new parent)` of every graft of the drifted client.
    pub grafts: Vec<(usize, NodeId)>,
    /// Per graft: whether the new parent's subtree holds other clients of
    /// the population the client drifted into.
    pub into_target: Vec<bool>,
    /// Parent of the drifted client after each round from the swap on.
    pub parents: Vec<(usize, Option<NodeId>)>,
}

impl DriftOutcome {
    pub fn relocated_within(&self, window: usize) -> bool {
        self.grafts
            .iter()
            .zip(&self.into_target)
            .any(|(&(r, _), &ok)| ok && (DRIFT_ROUND..=DRIFT_ROUND + window).contains(&r))
    }
}

/// Full run in which, just before round `DRIFT_ROUND`, every sample of
/// `DRIFT_CLIENT` is redrawn from the other population.
pub fn drift_scenario(config: &RunConfig) -> DriftOutcome {
    let fed = Federation::synthetic(config).unwrap();
    let groups = fed.groups.clone().unwrap();
    let means = synthetic_clusters(&config.synthetic(), config.seed).unwrap().means;
    let target = 1 - groups[DRIFT_CLIENT];
    let mut run = SofaRun::new(config, fed, "drift").unwrap();
    let mut parents = Vec::new();
    for round in 1..=config.rounds {
        if round == DRIFT_ROUND {
            swap_population(run.federation_mut(), DRIFT_CLIENT, &means, target, config.seed);
        }
        run.step().unwrap();
        if round >= DRIFT_ROUND {
            parents.push((round, run.tree().parent(NodeId(DRIFT_CLIENT))));
        }
    }
    let grafts: Vec<(usize, NodeId)> = run
        .shape_log()
        .iter()
        .filter(|e| e.edit.op == ShapeOp::Graft && e.edit.nodes[0] == NodeId(DRIFT_CLIENT))
        .map(|e| (e.round, e.edit.nodes[2]))
        .collect();
    let into_target = grafts
        .iter()
        .map(|&(round, parent)| {
            let snap = run.snapshots().iter().find(|s| s.round == round).expect("snapshot");
            snapshot_leaves(snap, parent).into_iter().any(|l| l.0 != DRIFT_CLIENT && groups[l.0] == target)
        })
        .collect();
    DriftOutcome { grafts, into_target, parents }
}

fn snapshot_leaves(snap: &sofa_fl::topology::TreeSnapshot, node: NodeId) -> Vec<NodeId> {
    let mut out = Vec::new();
    let mut stack = vec![node];
    while let Some(id) = stack.pop() {
        let Some(n) = snap.nodes.iter().find(|n| n.id == id) else { continue };
        if n.children.is_empty() {
            out.push(id);
        } else {
            stack.extend(n.children.iter().copied());
        }
    }
    out
}

/// Warm-up tree on clean data; then `DRIFT_CLIENT` gets the other
/// population's data, repeats its warm-up training from the shared init,
/// and one SHAPE round runs. Returns the graft target when the client moved
/// under a cluster holding the other population.
pub fn retrained_drift(config: &RunConfig) -> Option<NodeId> {
    let mut fed = Federation::synthetic(config).unwrap();
    let groups = fed.groups.clone().unwrap();
    let means = synthetic_clusters(&config.synthetic(), config.seed).unwrap().means;
    let target = 1 - groups[DRIFT_CLIENT];
    let spec = fed.model_spec(config).unwrap();
    let init = init_params(&spec, config.seed);
    let mut tree = warmup_and_cluster(&fed, &spec, &init, config).unwrap().tree;
    let shape = ShapeConfig::calibrated(
        &tree,
        config.shape_epsilon,
        config.shape_tau_merge,
        config.shape_theta_split,
        config.shape_op_order.clone(),
        config.distance_metric,
    );

    swap_population(&mut fed, DRIFT_CLIENT, &means, target, config.seed);
    let rows = fed.shards[DRIFT_CLIENT].train_rows();
    let opts = config.sgd(config.warmup_epochs);
    let seed = train_seed(config.seed, DRIFT_CLIENT, 0);
    let retrained = sgd_epochs(&spec, &init, &fed.dataset, &rows, &opts, seed, None).unwrap().params;
    tree.set_params(NodeId(DRIFT_CLIENT), retrained).unwrap();
    tree.refresh_all();

    let edits = shape_round(&mut tree, &shape, rng::derive_seed(config.seed, "shape", &[1])).unwrap();
    assert!(tree.validate().is_empty());
    edits
        .iter()
        .filter(|e| e.op == ShapeOp::Graft && e.nodes[0] == NodeId(DRIFT_CLIENT))
        .map(|e| e.nodes[2])
        .find(|&p| tree.is_live(p) && tree.leaves_under(p).iter().any(|l| l.0 != DRIFT_CLIENT && groups[l.0] == target))
}

// ---------------------------------------------------------------- FedAvg

/// Small synthetic federation: 5 clients, 5 rounds.
pub fn fedavg_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        rounds: 5,
        local_epochs: 2,
        warmup_epochs: 2,
        hidden_dims: vec![8],
        synthetic_clusters: 1,
        synthetic_clients_per_cluster: 5,
        synthetic_samples_per_client: 40,
        num_clients: 5,
        ..RunConfig::default()
    }
}

/// Everything that would separate the tree run from flat averaging is off:
/// one cluster over all clients, clients restart from it each round, no
/// restructuring, no sharing, no proximal term.
pub fn degenerate_sofa(base: &RunConfig) -> RunConfig {
    RunConfig {
        dmac_gamma: f64::INFINITY,
        downward_mix: 1.0,
        shape_every: 0,
        sharing_ratio: 0.0,
        sharing_mode: sofa_fl::sharing::SharingMode::Off,
        objective_beta: 0.0,
        ..base.clone()
    }
}

/// Written out by hand: `sum_k(w_k * x_k)` in client order, then divided by `sum_k(w_k)`.
fn reference_mean(models: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut acc = vec![0.0; models[0].len()];
    for (m, &w) in models.iter().zip(weights) {
        for (a, &v) in acc.iter_mut().zip(m) {
            *a += w * v;
        }
    }
    acc.iter().map(|a| a / total).collect()
}

/// Flat FedAvg: every listed `(round, local_epochs)` trains each client from
/// the current global model with the round's seed, then averages by
/// training-set size. Returns the global model after each round.
pub fn reference_fedavg(
    fed: &Federation,
    spec: &ModelSpec,
    config: &RunConfig,
    start: &ParamVector,
    schedule: &[(usize, usize)],
) -> Vec<Vec<f64>> {
    let weights: Vec<f64> = fed.shards.iter().map(|s| s.train.len() as f64).collect();
    let mut global = start.0.clone();
    let mut out = Vec::new();
    for &(round, epochs) in schedule {
        let opts = config.sgd(epochs);
        let models: Vec<Vec<f64>> = fed
            .shards
            .iter()
            .map(|s| {
                let seed = train_seed(config.seed, s.client, round);
                sgd_epochs(spec, &ParamVector(global.clone()), &fed.dataset, &s.train_rows(), &opts, seed, None)
                    .unwrap()
                    .params
                    .0
            })
            .collect();
        global = reference_mean(&models, &weights);
        out.push(global.clone());
    }
    out
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

// ---------------------------------------------------------------- random trees

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tree over `leaves` clients with `dim`-dimensional params in a few
/// loose blobs. Internal nodes group 2..=4 random top-level nodes at a time,
/// so depth and fan-out vary; cluster params are weighted means.
pub fn random_tree(r: &mut ChaCha8Rng, leaves: usize, dim: usize) -> TreeTopology {
    let mut tree = TreeTopology::new();
    let blobs: Vec<Vec<f64>> = (0..r.random_range(1..=4))
        .map(|_| (0..dim).map(|_| r.random_range(-5.0..5.0)).collect())
        .collect();
    for _ in 0..leaves {
        let b = &blobs[r.random_range(0..blobs.len())];
        let p: Vec<f64> = b.iter().map(|&c| c + r.random_range(-1.0..1.0)).collect();
        tree.add_client(ParamVector(p), r.random_range(1..=50));
    }
    let mut top: Vec<NodeId> = tree.clients();
    while top.len() > 1 {
        top.shuffle(r);
        let k = r.random_range(2..=4).min(top.len());
        let group: Vec<NodeId> = top.drain(..k).collect();
        let id = tree.add_cluster(&group, ParamVector::zeros(dim)).unwrap();
        top.push(id);
    }
    tree.set_root(top[0]).unwrap();
    tree.refresh_all();
    tree
}

/// Random but valid SHAPE settings, scaled to the tree's sibling distances.
pub fn random_shape_config(r: &mut ChaCha8Rng, tree: &TreeTopology) -> ShapeConfig {
    let metric = if r.random_bool(0.8) { DistanceMetric::Euclidean } else { DistanceMetric::Cosine };
    let mut order = DEFAULT_OP_ORDER.to_vec();
    if r.random_bool(0.5) {
        order.shuffle(r);
    }
    let tau = sofa_fl::shape::median_sibling_distance(tree, metric).max(1e-6) * r.random_range(0.1..2.0);
    let theta = tau * r.random_range(0.5..4.0);
    ShapeConfig::calibrated(tree, r.random_range(0.0..0.3), Some(tau), Some(theta), order, metric)
}

/// Moves every client's params a little, as a round of training would.
pub fn jitter_clients(r: &mut ChaCha8Rng, tree: &mut TreeTopology, scale: f64) {
    for c in tree.clients() {
        let p: Vec<f64> = tree.params(c).iter().map(|v| v + r.random_range(-scale..scale)).collect();
        tree.set_params(c, ParamVector(p)).unwrap();
    }
    tree.refresh_all();
}

/// Structural checks after a SHAPE round; returns a description of each failure.
pub fn shape_round_failures(tree: &TreeTopology, clients_before: &[NodeId]) -> Vec<String> {
    let mut out: Vec<String> = tree.validate().iter().map(|v| v.to_string()).collect();
    if tree.clients() != clients_before {
        out.push(format!("client set changed: {:?} -> {:?}", clients_before, tree.clients()));
    }
    for c in tree.clusters() {
        if tree.children(c).len() == 1 {
            out.push(format!("cluster {c} has a single child"));
        }
    }
    out
}

// ---------------------------------------------------------------- DMAC

/// One iteration of the brute-force executor: each merged group as the set
/// of leaves beneath it.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleIteration {
    pub tau: f64,
    pub merged: Vec<BTreeSet<usize>>,
}

struct Item {
    leaves: BTreeSet<usize>,
    point: Vec<f64>,
    weight: f64,
    height: usize,
}

/// Independent executor of the threshold-component rule. Components come
/// from a transitive closure of the `D <= tau * gamma` relation rather than
/// a graph search; items carry their leaf sets instead of node ids.
/// Returns the trace and the number of levels in the finished tree.
pub fn brute_force_dmac(
    points: &[Vec<f64>],
    weights: &[u64],
    gamma: f64,
    metric: DistanceMetric,
) -> (Vec<OracleIteration>, usize) {
    let mut items: Vec<Option<Item>> = points
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (p, &w))| Some(Item { leaves: BTreeSet::from([i]), point: p.clone(), weight: w as f64, height: 1 }))
        .collect();
    let mut trace = Vec::new();
    while items.len() > 1 {
        let n = items.len();
        let pt = |i: usize| &items[i].as_ref().unwrap().point;
        let d: Vec<Vec<f64>> =
            (0..n).map(|i| (0..n).map(|j| pairwise_distance(pt(i), pt(j), metric).unwrap()).collect()).collect();
        let mut tau = f64::INFINITY;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    tau = tau.min(d[i][j]);
                }
            }
        }
        let band = if tau == 0.0 { 0.0 } else { tau * gamma };
        let mut reach: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| i == j || d[i][j] <= band).collect()).collect();
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if reach[i][k] && reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
        let mut seen = vec![false; n];
        let mut next = Vec::new();
        let mut merged = Vec::new();
        for i in 0..n {
            if seen[i] {
                continue;
            }
            let members: Vec<usize> = (0..n).filter(|&j| reach[i][j]).collect();
            for &m in &members {
                seen[m] = true;
            }
            let group: Vec<Item> = members.iter().map(|&m| items[m].take().unwrap()).collect();
            if group.len() == 1 {
                next.extend(group.into_iter().map(Some));
                continue;
            }
            let models: Vec<Vec<f64>> = group.iter().map(|it| it.point.clone()).collect();
            let ws: Vec<f64> = group.iter().map(|it| it.weight).collect();
            let leaves: BTreeSet<usize> = group.iter().flat_map(|it| it.leaves.iter().copied()).collect();
            merged.push(leaves.clone());
            next.push(Some(Item {
                leaves,
                point: reference_mean(&models, &ws),
                weight: ws.iter().sum(),
                height: 1 + group.iter().map(|it| it.height).max().unwrap(),
            }));
        }
        merged.sort();
        trace.push(OracleIteration { tau, merged });
        items = next;
    }
    let height = items[0].as_ref().unwrap().height;
    (trace, height)
}

/// `dmac_build`'s trace in the oracle's vocabulary.
pub fn dmac_trace_as_leaf_sets(dmac: &sofa_fl::clustering::Dmac) -> Vec<OracleIteration> {
    let tree = &dmac.tree;
    dmac.trace
        .iter()
        .map(|it| {
            let mut merged: Vec<BTreeSet<usize>> = it
                .merges
                .iter()
                .map(|(_, id)| tree.leaves_under(*id).into_iter().map(|l| l.0).collect())
                .collect();
            merged.sort();
            OracleIteration { tau: it.tau, merged }
        })
        .collect()
}

/// Traces agree when every iteration merges the same leaf groups and finds
/// the same minimum distance up to rounding.
pub fn traces_match(a: &[OracleIteration], b: &[OracleIteration]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.merged == y.merged && (x.tau - y.tau).abs() <= 1e-9 * x.tau.abs().max(y.tau.abs()).max(1.0)
        })
}

/// Random small DMAC input: 3..=8 points in 1..=4 dimensions, drawn around
/// a few centers so that several pairs can share a band.
pub fn random_dmac_input(r: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<u64>) {
    let n = r.random_range(3..=8);
    let dim = r.random_range(1..=4);
    let centers: Vec<Vec<f64>> = (0..r.random_range(1..=3))
        .map(|_| (0..dim).map(|_| r.random_range(-10.0..10.0)).collect())
        .collect();
    let points = (0..n)
        .map(|_| {
            let c = &centers[r.random_range(0..centers.len())];
            c.iter().map(|&v| v + r.random_range(-2.0..2.0)).collect()
        })
        .collect();
    let weights = (0..n).map(|_| r.random_range(1..=20)).collect();
    (points, weights)
}

// ---------------------------------------------------------------- gradients

/// Random network shape and batch for the finite-difference check.
pub fn random_gradient_instance(r: &mut ChaCha8Rng) -> (ModelSpec, ParamVector, Dataset) {
    let input = r.random_range(1..=6);
    let hidden: Vec<usize> = (0..r.random_range(0..=2)).map(|_| r.random_range(1..=8)).collect();
    let classes = r.random_range(2..=5);
    let spec = ModelSpec::new(input, hidden, classes).unwrap();
    let mut params = init_params(&spec, r.random());
    for v in params.0.iter_mut() {
        *v += r.random_range(-0.1..0.1);
    }
    let n = r.random_range(1..=8);
    let feats: Vec<f64> = (0..n * input).map(|_| r.random_range(0.0..=1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
    let x = ndarray::Array2::from_shape_vec((n, input), feats).unwrap();
    (spec, params, Dataset::new(x, labels, classes).unwrap())
}

pub const GRAD_RTOL: f64 = 1e-4;
pub const GRAD_ATOL: f64 = 1e-6;

/// Largest violation of the tolerance over all coordinates (`<= 0` passes),
/// comparing the analytic gradient with central differences of the loss.
pub fn gradient_check(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> f64 {
    let x = data.features().view();
    let y = data.labels();
    let (_, _, grad) = forward_loss_grad(spec, params, x, y).unwrap();
    let h = 1e-6;
    let mut worst = f64::NEG_INFINITY;
    let mut p = params.0.clone();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = forward_loss_grad(spec, &p, x, y).unwrap().0 .0;
        p[i] = orig - h;
        let down = forward_loss_grad(spec, &p, x, y).unwrap().0 .0;
        p[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (grad[i] - numeric).abs();
        let allowed = (GRAD_RTOL * grad[i].abs().max(numeric.abs())).max(GRAD_ATOL);
        worst = worst.max(err - allowed);
    }
    worst
}
