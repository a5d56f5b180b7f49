//! Deterministic simulator for self-organizing hierarchical federated
//! learning: multi-branch agglomerative clustering of clients, per-round
//! topology evolution (graft, prune, merge, split), and partial data sharing
//! along the cluster tree, with HypCluster/FedAvg baselines and fairness
//! metrics.

pub mod baselines;
pub mod clustering;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod params;
pub mod rng;
pub mod shape;
pub mod sharing;
pub mod topology;

pub use error::{Error, Result};
pub use exec::Execution;
pub use params::ParamVector;
pub use topology::{NodeId, NodeKind, TreeTopology};
