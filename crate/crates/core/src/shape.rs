//! Topology evolution: graft, prune, merge and split, plus the per-round
//! driver that applies them in a configured order.
//!
//! Every operation leaves cluster params and data weights consistent along
//! the touched ancestor chains before the next one reads a distance.

use serde::{Deserialize, Serialize};

use crate::clustering::{distance, incoherence, kmeans, DistanceMetric};
use crate::error::{Error, Result};
use crate::params::weighted_mean;
use crate::rng;
use crate::topology::{NodeId, TreeTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeOp {
    Graft,
    Prune,
    Merge,
    Split,
}

impl ShapeOp {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeOp::Graft => "graft",
            ShapeOp::Prune => "prune",
            ShapeOp::Merge => "merge",
            ShapeOp::Split => "split",
        }
    }
}

pub const DEFAULT_OP_ORDER: [ShapeOp; 4] = [ShapeOp::Graft, ShapeOp::Merge, ShapeOp::Split, ShapeOp::Prune];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeConfig {
    /// Graft tolerance: move only if `d_min * (1 + epsilon) < d_pre`.
    pub epsilon: f64,
    /// Sibling clusters closer than this are merged.
    pub tau_merge: f64,
    /// Maximum incoherence of an accepted split group.
    pub theta_split: f64,
    pub op_order: Vec<ShapeOp>,
    pub metric: DistanceMetric,
    pub kmeans_max_iter: usize,
}

impl ShapeConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::Config { field: field.into(), reason });
        if !(self.epsilon >= 0.0) {
            return bad("shape_epsilon", format!("must be >= 0, got {}", self.epsilon));
        }
        if !(self.tau_merge > 0.0) {
            return bad("shape_tau_merge", format!("must be > 0, got {}", self.tau_merge));
        }
        if !(self.theta_split > 0.0) {
            return bad("shape_theta_split", format!("must be > 0, got {}", self.theta_split));
        }
        let mut seen = self.op_order.clone();
        seen.sort_by_key(|o| *o as u8);
        seen.dedup();
        if seen.len() != self.op_order.len() {
            return bad("shape_op_order", "operations may appear at most once".into());
        }
        Ok(())
    }

    /// Thresholds derived from the initial tree: `tau_merge` is half the median
    /// distance between siblings and `theta_split = 2 * tau_merge`. Explicit
    /// values override either.
    pub fn calibrated(
        tree: &TreeTopology,
        epsilon: f64,
        tau_merge: Option<f64>,
        theta_split: Option<f64>,
        op_order: Vec<ShapeOp>,
        metric: DistanceMetric,
    ) -> Self {
        let tau = tau_merge.unwrap_or_else(|| (0.5 * median_sibling_distance(tree, metric)).max(1e-12));
        ShapeConfig {
            epsilon,
            tau_merge: tau,
            theta_split: theta_split.unwrap_or(2.0 * tau),
            op_order,
            metric,
            kmeans_max_iter: 100,
        }
    }
}

/// Median over all sibling pairs in the tree; 0 when there are none.
pub fn median_sibling_distance(tree: &TreeTopology, metric: DistanceMetric) -> f64 {
    let mut ds = Vec::new();
    for c in tree.clusters() {
        let kids = tree.children(c);
        for i in 0..kids.len() {
            for j in i + 1..kids.len() {
                ds.push(distance(tree.params(kids[i]), tree.params(kids[j]), metric));
            }
        }
    }
    if ds.is_empty() {
        return 0.0;
    }
    ds.sort_by(f64::total_cmp);
    let m = ds.len() / 2;
    if ds.len() % 2 == 1 {
        ds[m]
    } else {
        0.5 * (ds[m - 1] + ds[m])
    }
}

/// One structural edit, in the order applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEdit {
    pub op: ShapeOp,
    /// graft: `[child, old_parent, new_parent]`; prune: `[node, child, new_parent_or_none]`;
    /// merge: `[a, b, merged]`; split: `[node, new children...]`.
    pub nodes: Vec<NodeId>,
    /// graft: `[d_pre, d_min]`; merge: `[d(a, b)]`; split: `[node incoherence, group incoherences...]`.
    pub distances: Vec<f64>,
}

fn dist(tree: &TreeTopology, a: NodeId, b: NodeId, metric: DistanceMetric) -> f64 {
    distance(tree.params(a), tree.params(b), metric)
}

/// Removes clusters left without children, walking up from `from`.
fn drop_empty_chain(tree: &mut TreeTopology, from: NodeId) -> Result<Option<NodeId>> {
    let mut cur = from;
    loop {
        let node = tree.node(cur);
        if !node.is_cluster() || !node.children.is_empty() {
            return Ok(Some(cur));
        }
        let parent = node.parent;
        tree.remove_internal(cur)?;
        match parent {
            Some(p) => cur = p,
            None => return Ok(None),
        }
    }
}

/// Re-parents `child` to the closest same-depth cluster when that is
/// closer than the current parent by more than the tolerance.
pub fn graft(tree: &mut TreeTopology, child: NodeId, config: &ShapeConfig) -> Result<Option<ShapeEdit>> {
    let Some(parent) = tree.get(child)?.parent else { return Ok(None) };
    let depth = tree.depth(parent);
    let mut best: Option<(NodeId, f64)> = None;
    for cand in tree.clusters() {
        if cand == parent || tree.in_subtree(cand, child) || tree.depth(cand) != depth {
            continue;
        }
        let d = dist(tree, cand, child, config.metric);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((cand, d));
        }
    }
    let Some((target, d_min)) = best else { return Ok(None) };
    let d_pre = dist(tree, parent, child, config.metric);
    if !(d_min * (1.0 + config.epsilon) < d_pre) {
        return Ok(None);
    }
    tree.reparent(child, target)?;
    if let Some(survivor) = drop_empty_chain(tree, parent)? {
        tree.refresh_upward(survivor);
    }
    tree.refresh_upward(target);
    Ok(Some(ShapeEdit { op: ShapeOp::Graft, nodes: vec![child, parent, target], distances: vec![d_pre, d_min] }))
}

/// Removes a single-child cluster, handing its child to the grandparent
/// (or promoting the child to root).
pub fn prune(tree: &mut TreeTopology, node: NodeId) -> Result<Option<ShapeEdit>> {
    let n = tree.get(node)?;
    if !n.is_cluster() || n.children.len() != 1 {
        return Ok(None);
    }
    let child = n.children[0];
    match n.parent {
        Some(grand) => {
            let pos = tree.children(grand).iter().position(|&c| c == node).expect("linked");
            tree.reparent_at(child, grand, pos)?;
            tree.remove_internal(node)?;
            tree.refresh_upward(grand);
            Ok(Some(ShapeEdit { op: ShapeOp::Prune, nodes: vec![node, child, grand], distances: vec![] }))
        }
        None => {
            tree.detach(child)?;
            tree.remove_internal(node)?;
            tree.set_root(child)?;
            Ok(Some(ShapeEdit { op: ShapeOp::Prune, nodes: vec![node, child], distances: vec![] }))
        }
    }
}

/// Merges two sibling clusters closer than `tau_merge` into a fresh node
/// holding the union of their children.
pub fn merge_siblings(
    tree: &mut TreeTopology,
    a: NodeId,
    b: NodeId,
    config: &ShapeConfig,
) -> Result<Option<ShapeEdit>> {
    let (na, nb) = (tree.get(a)?, tree.get(b)?);
    if a == b || na.parent.is_none() || na.parent != nb.parent {
        return Err(Error::NotSiblings(a, b));
    }
    if !na.is_cluster() {
        return Err(Error::NotACluster(a));
    }
    if !nb.is_cluster() {
        return Err(Error::NotACluster(b));
    }
    let d = dist(tree, a, b, config.metric);
    if !(d < config.tau_merge) {
        return Ok(None);
    }
    let params = weighted_mean([
        (tree.params(a).as_slice(), na.data_weight as f64),
        (tree.params(b).as_slice(), nb.data_weight as f64),
    ]);
    let merged = tree.add_cluster(&[a, b], params)?;
    for src in [a, b] {
        for c in tree.children(src).to_vec() {
            tree.reparent(c, merged)?;
        }
        tree.remove_internal(src)?;
    }
    if let Some(p) = tree.parent(merged) {
        tree.refresh_upward(p);
    }
    Ok(Some(ShapeEdit { op: ShapeOp::Merge, nodes: vec![a, b, merged], distances: vec![d] }))
}

/// Tries `k = 2, 3, ...` K-Means partitions of the node's children and
/// replaces the node with the first partition whose groups all have
/// incoherence within `theta_split`. Singleton groups attach directly to
/// the parent. `k` stops one short of the child count: the all-singleton
/// partition would dissolve the node rather than split it.
pub fn split(tree: &mut TreeTopology, node: NodeId, config: &ShapeConfig, seed: u64) -> Result<Option<ShapeEdit>> {
    let n = tree.get(node)?;
    let Some(parent) = n.parent else { return Ok(None) };
    if !n.is_cluster() || n.children.len() < 2 {
        return Ok(None);
    }
    let kids = n.children.clone();
    let pts: Vec<&[f64]> = kids.iter().map(|&c| tree.params(c).as_slice()).collect();
    let own = incoherence(&pts, config.metric)?;
    for k in 2..kids.len() {
        let km = kmeans(&pts, k, rng::derive_seed(seed, "split", &[node.0 as u64, k as u64]), config.kmeans_max_iter)?;
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &g) in km.assignment.iter().enumerate() {
            groups[g].push(i);
        }
        groups.sort_by_key(|g| g[0]);
        let mut scores = Vec::with_capacity(k);
        for g in &groups {
            let members: Vec<&[f64]> = g.iter().map(|&i| pts[i]).collect();
            scores.push(incoherence(&members, config.metric)?);
        }
        if scores.iter().any(|&s| !(s <= config.theta_split)) {
            continue;
        }
        let mut replacements = Vec::with_capacity(k);
        for g in &groups {
            let members: Vec<NodeId> = g.iter().map(|&i| kids[i]).collect();
            if members.len() == 1 {
                replacements.push(members[0]);
            } else {
                let params = weighted_mean(
                    members.iter().map(|&m| (tree.params(m).as_slice(), tree.node(m).data_weight as f64)),
                );
                replacements.push(tree.add_cluster(&members, params)?);
            }
        }
        let pos = tree.children(parent).iter().position(|&c| c == node).expect("linked");
        for (i, &r) in replacements.iter().enumerate() {
            tree.reparent_at(r, parent, pos + i)?;
        }
        tree.remove_internal(node)?;
        tree.refresh_upward(parent);
        let mut nodes = vec![node];
        nodes.extend(&replacements);
        let mut distances = vec![own];
        distances.extend(scores);
        return Ok(Some(ShapeEdit { op: ShapeOp::Split, nodes, distances }));
    }
    Ok(None)
}

fn graft_pass(tree: &mut TreeTopology, config: &ShapeConfig, log: &mut Vec<ShapeEdit>) -> Result<()> {
    let ids: Vec<NodeId> = tree.live_ids().collect();
    for id in ids {
        if tree.is_live(id) && tree.parent(id).is_some() {
            if let Some(e) = graft(tree, id, config)? {
                log.push(e);
            }
        }
    }
    Ok(())
}

fn merge_pass(tree: &mut TreeTopology, config: &ShapeConfig, log: &mut Vec<ShapeEdit>) -> Result<()> {
    for p in tree.clusters() {
        loop {
            if !tree.is_live(p) {
                break;
            }
            let kids: Vec<NodeId> =
                tree.children(p).iter().copied().filter(|&c| tree.node(c).is_cluster()).collect();
            let mut best: Option<(NodeId, NodeId, f64)> = None;
            for i in 0..kids.len() {
                for j in i + 1..kids.len() {
                    let d = dist(tree, kids[i], kids[j], config.metric);
                    if best.is_none_or(|(_, _, bd)| d < bd) {
                        best = Some((kids[i], kids[j], d));
                    }
                }
            }
            match best {
                Some((a, b, d)) if d < config.tau_merge => {
                    if let Some(e) = merge_siblings(tree, a, b, config)? {
                        log.push(e);
                    }
                }
                _ => break,
            }
        }
    }
    Ok(())
}

fn split_pass(tree: &mut TreeTopology, config: &ShapeConfig, seed: u64, log: &mut Vec<ShapeEdit>) -> Result<()> {
    for c in tree.clusters() {
        if !tree.is_live(c) || tree.parent(c).is_none() || tree.children(c).len() < 3 {
            continue;
        }
        let pts: Vec<&[f64]> = tree.children(c).iter().map(|&k| tree.params(k).as_slice()).collect();
        if incoherence(&pts, config.metric)? > config.theta_split {
            if let Some(e) = split(tree, c, config, seed)? {
                log.push(e);
            }
        }
    }
    Ok(())
}

fn prune_pass(tree: &mut TreeTopology, log: &mut Vec<ShapeEdit>) -> Result<()> {
    loop {
        let mut changed = false;
        for c in tree.clusters() {
            if tree.is_live(c) {
                if let Some(e) = prune(tree, c)? {
                    log.push(e);
                    changed = true;
                }
            }
        }
        if !changed {
            return Ok(());
        }
    }
}

/// Applies one round of restructuring and returns the edits in order.
/// A closing prune pass runs after the configured operations, so no
/// single-child cluster survives the round whatever the order.
pub fn shape_round(tree: &mut TreeTopology, config: &ShapeConfig, seed: u64) -> Result<Vec<ShapeEdit>> {
    let mut log = Vec::new();
    for op in &config.op_order {
        match op {
            ShapeOp::Graft => graft_pass(tree, config, &mut log)?,
            ShapeOp::Merge => merge_pass(tree, config, &mut log)?,
            ShapeOp::Split => split_pass(tree, config, seed, &mut log)?,
            ShapeOp::Prune => prune_pass(tree, &mut log)?,
        }
    }
    prune_pass(tree, &mut log)?;
    tree.refresh_all();
    Ok(log)
}
