use thiserror::Error;

use crate::topology::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown or removed node {0}")]
    UnknownNode(NodeId),
    #[error("cluster must be created with at least one child")]
    EmptyChildren,
    #[error("children of a new cluster must share one parent (node {0} differs)")]
    MixedParents(NodeId),
    #[error("moving {child} under {new_parent} would create a cycle")]
    Cycle { child: NodeId, new_parent: NodeId },
    #[error("node {0} is not a cluster")]
    NotACluster(NodeId),
    #[error("cluster {0} still has children")]
    HasChildren(NodeId),
    #[error("nodes {0} and {1} are not siblings")]
    NotSiblings(NodeId, NodeId),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed IDX file {path}: {reason} (byte offset {offset})")]
    Idx { path: String, offset: usize, reason: String },
    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("tree invariant violated in round {round}: {violations:?}")]
    Invariant { round: usize, violations: Vec<String> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
