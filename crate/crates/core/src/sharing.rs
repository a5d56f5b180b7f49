//! Two-phase partial data sharing over the client tree.
//!
//! Gather walks the tree bottom-up: each client offers a random
//! `ceil(ratio * |train|)` subset of its owned training samples, and each
//! cluster pools its children's offers and passes a `ceil(ratio * |pool|)`
//! subsample upward. Distribute then hands every client the union of its
//! ancestors' pools, minus its own samples. Received sets are replaced each
//! round, never accumulated.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{SampleRef, Shard};
use crate::error::{Error, Result};
use crate::rng;
use crate::topology::{NodeId, TreeTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// New samples are drawn every round.
    #[default]
    Fresh,
    /// The same samples travel every round while the tree is unchanged.
    Fixed,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharingConfig {
    pub ratio: f64,
    pub mode: SharingMode,
}

impl Default for SharingConfig {
    fn default() -> Self {
        SharingConfig { ratio: 0.1, mode: SharingMode::Fresh }
    }
}

impl SharingConfig {
    pub fn off() -> Self {
        SharingConfig { ratio: 0.0, mode: SharingMode::Off }
    }

    pub fn is_active(&self) -> bool {
        self.mode != SharingMode::Off && self.ratio > 0.0
    }

    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config { field: "sharing_ratio".into(), reason: format!("must be in [0, 1], got {}", self.ratio) });
        }
        Ok(())
    }
}

/// Per-cluster pools from one gather phase, each sorted and deduplicated by
/// [`SampleId`](crate::data::SampleId).
pub type SharedPools = BTreeMap<NodeId, Vec<SampleRef>>;

fn share_count(ratio: f64, available: usize) -> usize {
    if available == 0 {
        return 0;
    }
    ((ratio * available as f64).ceil() as usize).clamp(1, available)
}

fn draw(candidates: &[SampleRef], ratio: f64, rng: &mut rng::Rng) -> Vec<SampleRef> {
    let n = share_count(ratio, candidates.len());
    let mut picked: Vec<SampleRef> = index::sample(rng, candidates.len(), n).into_iter().map(|i| candidates[i]).collect();
    picked.sort_by_key(|s| s.id);
    picked
}

fn shard_of(shards: &[Shard], node: NodeId) -> Result<&Shard> {
    shards
        .get(node.0)
        .filter(|s| s.client == node.0)
        .ok_or_else(|| Error::InvalidArgument(format!("no shard for client {node}")))
}

/// Bottom-up collection phase. Clients are matched to shards by index
/// (`shards[i]` belongs to `NodeId(i)`).
pub fn gather(tree: &TreeTopology, shards: &[Shard], config: &SharingConfig, seed: u64, round: usize) -> Result<SharedPools> {
    let mut pools = SharedPools::new();
    if !config.is_active() {
        return Ok(pools);
    }
    let root = tree.root();
    let mut offers: BTreeMap<NodeId, Vec<SampleRef>> = BTreeMap::new();
    for id in tree.postorder() {
        let candidates = if tree.node(id).is_client() {
            shard_of(shards, id)?.train.clone()
        } else {
            let mut pool: Vec<SampleRef> =
                tree.children(id).iter().flat_map(|c| offers.remove(c).unwrap_or_default()).collect();
            pool.sort_by_key(|s| s.id);
            pool.dedup_by_key(|s| s.id);
            pools.insert(id, pool.clone());
            pool
        };
        if Some(id) == root {
            continue;
        }
        let mut rng = match config.mode {
            SharingMode::Fixed => rng::stream(seed, "share", &[id.0 as u64]),
            _ => rng::stream(seed, "share", &[round as u64, id.0 as u64]),
        };
        offers.insert(id, draw(&candidates, config.ratio, &mut rng));
    }
    Ok(pools)
}

/// Top-down phase: replaces every client's received set with the union of
/// its ancestors' pools, dropping its own samples.
pub fn distribute(tree: &TreeTopology, shards: &mut [Shard], pools: &SharedPools) -> Result<()> {
    for id in tree.clients() {
        let mut received: Vec<SampleRef> = Vec::new();
        let mut cur = tree.parent(id);
        while let Some(p) = cur {
            if let Some(pool) = pools.get(&p) {
                received.extend(pool.iter().filter(|s| s.id.origin_client != id.0));
            }
            cur = tree.parent(p);
        }
        received.sort_by_key(|s| s.id);
        received.dedup_by_key(|s| s.id);
        shard_of(shards, id)?;
        shards[id.0].received = received;
    }
    Ok(())
}

/// Received-set composition for one client after distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingSummary {
    pub round: usize,
    pub client: usize,
    pub n_received: usize,
    /// Samples whose origin client has the same parent as this client.
    pub n_same_cluster: usize,
    pub n_cross_cluster: usize,
}

pub fn summarize(tree: &TreeTopology, shards: &[Shard], round: usize) -> Vec<SharingSummary> {
    tree.clients()
        .into_iter()
        .filter_map(|id| {
            let shard = shards.get(id.0)?;
            let parent = tree.parent(id);
            let same = shard
                .received
                .iter()
                .filter(|s| tree.is_live(NodeId(s.id.origin_client)) && tree.parent(NodeId(s.id.origin_client)) == parent)
                .count();
            Some(SharingSummary {
                round,
                client: id.0,
                n_received: shard.received.len(),
                n_same_cluster: same,
                n_cross_cluster: shard.received.len() - same,
            })
        })
        .collect()
}
