//! Run configuration: one flat, versioned TOML document. Every field has a
//! default, so an empty file is a valid config.

use serde::{Deserialize, Serialize};

use crate::clustering::{DistanceMetric, DmacConfig};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{LocalStepsMode, SgdOptions};
use crate::shape::{ShapeOp, DEFAULT_OP_ORDER};
use crate::sharing::{SharingConfig, SharingMode};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,

    pub num_clients: usize,
    pub rounds: usize,
    /// Epochs (or minibatch steps, per `local_steps_mode`) of local training per round.
    pub local_epochs: usize,
    pub local_steps_mode: LocalStepsMode,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden_dims: Vec<usize>,

    pub dirichlet_alpha: f64,
    pub test_fraction: f64,
    /// Stratified MNIST subset size; 0 keeps every sample.
    pub subset_size: usize,

    pub sharing_ratio: f64,
    pub sharing_mode: SharingMode,

    pub dmac_gamma: f64,
    pub distance_metric: DistanceMetric,

    pub shape_epsilon: f64,
    /// Defaults to half the median sibling distance of the initial tree.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape_tau_merge: Option<f64>,
    /// Defaults to twice `shape_tau_merge`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape_theta_split: Option<f64>,
    pub shape_op_order: Vec<ShapeOp>,
    /// Restructure every this many rounds; 0 disables restructuring.
    pub shape_every: usize,

    /// Weight of the sibling-similarity term of the objective.
    pub objective_alpha: f64,
    /// Weight of the parent-consistency term; when positive, local training
    /// also gets a proximal pull toward the parent model.
    pub objective_beta: f64,
    /// Blend each client toward its parent before local training:
    /// `x <- (1 - mix) x + mix x_parent`.
    pub downward_mix: f64,

    pub execution: Execution,

    pub synthetic_clusters: usize,
    pub synthetic_clients_per_cluster: usize,
    pub synthetic_samples_per_client: usize,
    pub synthetic_input_dim: usize,
    pub synthetic_num_classes: usize,
    pub synthetic_separation: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let syn = SyntheticSpec::default();
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            num_clients: 20,
            rounds: 20,
            local_epochs: 5,
            local_steps_mode: LocalStepsMode::Epochs,
            warmup_epochs: 5,
            lr: 0.05,
            batch_size: 32,
            hidden_dims: vec![128, 64],
            dirichlet_alpha: 1.0,
            test_fraction: 0.2,
            subset_size: 4000,
            sharing_ratio: 0.1,
            sharing_mode: SharingMode::Fresh,
            dmac_gamma: 1.5,
            distance_metric: DistanceMetric::Euclidean,
            shape_epsilon: 0.05,
            shape_tau_merge: None,
            shape_theta_split: None,
            shape_op_order: DEFAULT_OP_ORDER.to_vec(),
            shape_every: 1,
            objective_alpha: 1.0,
            objective_beta: 0.0,
            downward_mix: 1.0,
            execution: Execution::default(),
            synthetic_clusters: syn.num_clusters,
            synthetic_clients_per_cluster: syn.clients_per_cluster,
            synthetic_samples_per_client: syn.samples_per_client,
            synthetic_input_dim: syn.input_dim,
            synthetic_num_classes: syn.num_classes,
            synthetic_separation: syn.separation,
        }
    }
}

fn bad(field: &str, reason: impl Into<String>) -> Error {
    Error::Config { field: field.into(), reason: reason.into() }
}

/// Best-effort name of the key a TOML error points at.
fn error_field(text: &str, e: &toml::de::Error) -> String {
    if let Some(name) = e.message().split('`').nth(1) {
        return name.to_string();
    }
    e.span()
        .and_then(|span| {
            let line_start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
            let key = text[line_start..].split('=').next()?.trim();
            (!key.is_empty()).then(|| key.to_string())
        })
        .unwrap_or_else(|| "<document>".to_string())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            field: error_field(text, &e),
            reason: e.message().trim().to_string(),
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn check(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(bad("schema_version", format!("expected {SCHEMA_VERSION}, got {}", self.schema_version)));
        }
        if self.num_clients == 0 {
            return Err(bad("num_clients", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", format!("must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(bad("hidden_dims", "layer widths must be at least 1"));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(bad("dirichlet_alpha", format!("must be positive, got {}", self.dirichlet_alpha)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(bad("test_fraction", format!("must be in (0, 1), got {}", self.test_fraction)));
        }
        self.sharing().check()?;
        if !(self.dmac_gamma >= 1.0) {
            return Err(bad("dmac_gamma", format!("must be >= 1, got {}", self.dmac_gamma)));
        }
        if !(self.shape_epsilon >= 0.0) {
            return Err(bad("shape_epsilon", format!("must be >= 0, got {}", self.shape_epsilon)));
        }
        if let Some(t) = self.shape_tau_merge {
            if !(t > 0.0) {
                return Err(bad("shape_tau_merge", format!("must be > 0, got {t}")));
            }
        }
        if let Some(t) = self.shape_theta_split {
            if !(t > 0.0) {
                return Err(bad("shape_theta_split", format!("must be > 0, got {t}")));
            }
        }
        let mut ops = self.shape_op_order.clone();
        ops.sort_by_key(|o| *o as u8);
        ops.dedup();
        if ops.len() != self.shape_op_order.len() {
            return Err(bad("shape_op_order", "operations may appear at most once"));
        }
        if !(self.objective_alpha >= 0.0) {
            return Err(bad("objective_alpha", format!("must be >= 0, got {}", self.objective_alpha)));
        }
        if !(self.objective_beta >= 0.0) {
            return Err(bad("objective_beta", format!("must be >= 0, got {}", self.objective_beta)));
        }
        if !(0.0..=1.0).contains(&self.downward_mix) {
            return Err(bad("downward_mix", format!("must be in [0, 1], got {}", self.downward_mix)));
        }
        if !(self.synthetic_separation > 0.0) {
            return Err(bad("synthetic_separation", "must be positive"));
        }
        if self.synthetic_clusters == 0 || self.synthetic_clients_per_cluster == 0 || self.synthetic_samples_per_client < 2 {
            return Err(bad("synthetic_samples_per_client", "synthetic federation sizes must be positive (at least 2 samples)"));
        }
        if self.synthetic_input_dim == 0 || self.synthetic_num_classes < 2 {
            return Err(bad("synthetic_num_classes", "need input_dim >= 1 and at least 2 classes"));
        }
        Ok(())
    }

    pub fn sharing(&self) -> SharingConfig {
        SharingConfig { ratio: self.sharing_ratio, mode: self.sharing_mode }
    }

    pub fn dmac(&self) -> DmacConfig {
        DmacConfig { gamma: self.dmac_gamma, metric: self.distance_metric }
    }

    pub fn sgd(&self, local_updates: usize) -> SgdOptions {
        SgdOptions { lr: self.lr, batch_size: self.batch_size, local_updates, mode: self.local_steps_mode }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_clusters: self.synthetic_clusters,
            clients_per_cluster: self.synthetic_clients_per_cluster,
            samples_per_client: self.synthetic_samples_per_client,
            input_dim: self.synthetic_input_dim,
            num_classes: self.synthetic_num_classes,
            separation: self.synthetic_separation,
        }
    }
}
