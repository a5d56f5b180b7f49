//! HypCluster: K shared hypothesis models, each client training the one
//! with the lowest loss on its data. With K = 1 this is FedAvg.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::build_report;
use crate::model::{evaluate, init_params, sgd_epochs, ModelSpec};
use crate::orchestrator::{mean, train_seed, ClientResult, Federation, RunReport, REPORT_SCHEMA_VERSION};
use crate::params::{weighted_mean, ParamVector};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct HypClusterState {
    pub k: usize,
    pub models: Vec<ParamVector>,
    /// Model index per client.
    pub assignment: Vec<usize>,
}

impl HypClusterState {
    /// Model 0 uses the run's shared init; the others get derived seeds.
    pub fn new(spec: &ModelSpec, k: usize, num_clients: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("HypCluster needs k >= 1".into()));
        }
        let models = (0..k)
            .map(|m| {
                let s = if m == 0 { seed } else { rng::derive_seed(seed, "hypcluster-init", &[m as u64]) };
                init_params(spec, s)
            })
            .collect();
        Ok(HypClusterState { k, models, assignment: vec![0; num_clients] })
    }
}

/// Index of the model with the lowest training loss; ties go to the lower index.
pub fn select_model(spec: &ModelSpec, models: &[ParamVector], fed: &Federation, client: usize) -> Result<usize> {
    let rows = fed.shards[client].train_rows();
    let mut best = (0, f64::INFINITY);
    for (m, p) in models.iter().enumerate() {
        let (loss, _) = evaluate(spec, p, &fed.dataset, &rows)?;
        if loss.0 < best.1 {
            best = (m, loss.0);
        }
    }
    Ok(best.0)
}

/// One round: selection, local training, and per-model weighted averaging.
/// Models nobody picked are carried over unchanged.
pub fn hypcluster_round(
    state: &HypClusterState,
    fed: &Federation,
    spec: &ModelSpec,
    config: &RunConfig,
    round: usize,
) -> Result<HypClusterState> {
    let opts = config.sgd(config.local_epochs);
    let results = config.execution.map(&fed.shards, |s| -> Result<(usize, ParamVector)> {
        let m = if state.k == 1 { 0 } else { select_model(spec, &state.models, fed, s.client)? };
        let out = sgd_epochs(
            spec,
            &state.models[m],
            &fed.dataset,
            &s.train_rows(),
            &opts,
            train_seed(config.seed, s.client, round),
            None,
        )?;
        Ok((m, out.params))
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut models = Vec::with_capacity(state.k);
    for m in 0..state.k {
        let members: Vec<(&[f64], f64)> = results
            .iter()
            .zip(&fed.shards)
            .filter(|((a, _), _)| *a == m)
            .map(|((_, p), s)| (p.as_slice(), s.train.len() as f64))
            .collect();
        models.push(if members.is_empty() { state.models[m].clone() } else { weighted_mean(members) });
    }
    Ok(HypClusterState { k: state.k, models, assignment: results.iter().map(|(m, _)| *m).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRound {
    pub round: usize,
    pub assignment: Vec<usize>,
    pub client_accuracies: Vec<f64>,
    pub client_test_losses: Vec<f64>,
    pub client_mean_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct BaselineOutput {
    pub records: Vec<BaselineRound>,
    pub report: RunReport,
    pub state: HypClusterState,
}

pub fn baseline_label(k: usize) -> String {
    format!("hypcluster_k{k}")
}

fn evaluate_clients(state: &HypClusterState, fed: &Federation, spec: &ModelSpec, config: &RunConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let evals = config.execution.map(&fed.shards, |s| {
        evaluate(spec, &state.models[state.assignment[s.client]], &fed.dataset, &s.test_rows())
    });
    let mut accs = Vec::with_capacity(evals.len());
    let mut losses = Vec::with_capacity(evals.len());
    for e in evals {
        let (l, a) = e?;
        accs.push(a);
        losses.push(l.0);
    }
    Ok((accs, losses))
}

/// Runs HypCluster for `config.rounds` rounds with the same data, model and
/// local budget as the tree runs. Each client is scored with the model it
/// trained in the final round, on its own test split.
pub fn run_hypcluster(config: &RunConfig, fed: &Federation, k: usize) -> Result<BaselineOutput> {
    config.check()?;
    let spec = fed.model_spec(config)?;
    let mut state = HypClusterState::new(&spec, k, fed.num_clients(), config.seed)?;
    let mut records = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        state = hypcluster_round(&state, fed, &spec, config, round)?;
        let (accs, losses) = evaluate_clients(&state, fed, &spec, config)?;
        records.push(BaselineRound {
            round,
            assignment: state.assignment.clone(),
            client_mean_accuracy: mean(&accs),
            client_accuracies: accs,
            client_test_losses: losses,
        });
    }
    let accs = match records.last() {
        Some(r) => r.client_accuracies.clone(),
        None => evaluate_clients(&state, fed, &spec, config)?.0,
    };
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        label: baseline_label(k),
        seed: config.seed,
        rounds: config.rounds,
        metrics: build_report(&accs)?,
        client_average: mean(&accs),
        total_average: None,
        clients: accs
            .iter()
            .enumerate()
            .map(|(c, &a)| ClientResult { client: c, accuracy: a, group: Some(state.assignment[c]) })
            .collect(),
    };
    Ok(BaselineOutput { records, report, state })
}
