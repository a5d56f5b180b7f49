//! Parameter-space distances, K-Means, cluster incoherence and the
//! multi-branch agglomerative tree builder.
//!
//! The builder repeatedly looks at the current top-level nodes, takes the
//! smallest pairwise distance `tau`, links every pair within `tau * gamma`,
//! and merges each connected component of that threshold graph under a new
//! parent. Components rather than sequential pair merges make the result
//! independent of pair iteration order.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::params::{weighted_mean, ParamVector};
use crate::rng;
use crate::topology::{NodeId, TreeTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    /// `1 - cos(a, b)`; zero vectors are at distance 0 from each other and 1 from anything else.
    Cosine,
}

pub fn pairwise_distance(a: &[f64], b: &[f64], metric: DistanceMetric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), got: b.len() });
    }
    Ok(distance(a, b, metric))
}

/// Unchecked distance for equal-length inputs.
pub(crate) fn distance(a: &[f64], b: &[f64], metric: DistanceMetric) -> f64 {
    match metric {
        DistanceMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        DistanceMetric::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 && nb == 0.0 {
                0.0
            } else if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                (1.0 - dot / (na.sqrt() * nb.sqrt())).max(0.0)
            }
        }
    }
}

/// Symmetric distance matrix, rows computed through `exec`.
pub fn distance_matrix(points: &[&[f64]], metric: DistanceMetric, exec: Execution) -> Vec<Vec<f64>> {
    let n = points.len();
    let idx: Vec<usize> = (0..n).collect();
    let upper = exec.map(&idx, |&i| (i + 1..n).map(|j| distance(points[i], points[j], metric)).collect::<Vec<_>>());
    let mut m = vec![vec![0.0; n]; n];
    for (i, row) in upper.into_iter().enumerate() {
        for (off, d) in row.into_iter().enumerate() {
            let j = i + 1 + off;
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    m
}

fn centroid(points: &[&[f64]]) -> Vec<f64> {
    let mut c = vec![0.0; points[0].len()];
    for p in points {
        for (ci, v) in c.iter_mut().zip(p.iter()) {
            *ci += v;
        }
    }
    let n = points.len() as f64;
    c.iter_mut().for_each(|v| *v /= n);
    c
}

/// Mean distance of members to their (unweighted) centroid; 0 for one member.
pub fn incoherence(members: &[&[f64]], metric: DistanceMetric) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::EmptyInput("incoherence of an empty group"));
    }
    if members.len() == 1 {
        return Ok(0.0);
    }
    let c = centroid(members);
    Ok(members.iter().map(|m| distance(m, &c, metric)).sum::<f64>() / members.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
}

/// Lloyd's algorithm with k-means++ seeding. Ties go to the lowest cluster
/// index; an emptied cluster is reseeded with the point farthest from its
/// own centroid (taken from a cluster that keeps at least one member).
pub fn kmeans(points: &[&[f64]], k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > points.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {} points", points.len())));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::LengthMismatch { expected: dim, got: p.len() });
    }
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut rng = rng::stream(seed, "kmeans", &[k as u64, points.len() as u64]);

    // k-means++ seeding
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut best: Vec<f64> = points.iter().map(|p| d2(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = None;
            for (i, &b) in best.iter().enumerate() {
                if b > 0.0 {
                    if target < b {
                        pick = Some(i);
                        break;
                    }
                    target -= b;
                }
            }
            // float slack: fall back to the last positive entry
            pick.unwrap_or_else(|| best.iter().rposition(|&b| b > 0.0).expect("total > 0"))
        } else {
            let free: Vec<usize> = (0..points.len()).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (b, p) in best.iter_mut().zip(points) {
            *b = b.min(d2(p, points[next]));
        }
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].to_vec()).collect();
    let mut assignment = vec![usize::MAX; points.len()];
    let mut iterations = 0;
    while iterations < max_iter.max(1) {
        iterations += 1;
        let mut next: Vec<usize> = points
            .iter()
            .map(|p| {
                let mut bi = 0;
                let mut bd = f64::INFINITY;
                for (ci, c) in centroids.iter().enumerate() {
                    let d = d2(p, c);
                    if d < bd {
                        bd = d;
                        bi = ci;
                    }
                }
                bi
            })
            .collect();
        // reseed empty clusters
        loop {
            let mut counts = vec![0usize; k];
            next.iter().for_each(|&a| counts[a] += 1);
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            let far = (0..points.len())
                .filter(|&i| counts[next[i]] > 1)
                .max_by(|&a, &b| {
                    d2(points[a], &centroids[next[a]])
                        .total_cmp(&d2(points[b], &centroids[next[b]]))
                        .then(b.cmp(&a))
                })
                .expect("k <= n leaves a donor cluster");
            next[far] = empty;
            centroids[empty] = points[far].to_vec();
        }
        let converged = next == assignment;
        assignment = next;
        for (ci, c) in centroids.iter_mut().enumerate() {
            let members: Vec<&[f64]> =
                points.iter().zip(&assignment).filter(|(_, &a)| a == ci).map(|(p, _)| *p).collect();
            *c = centroid(&members);
        }
        if converged {
            break;
        }
    }
    Ok(KMeansResult { assignment, centroids, iterations })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmacConfig {
    /// Merge-band multiplier; must be at least 1.
    pub gamma: f64,
    pub metric: DistanceMetric,
}

impl Default for DmacConfig {
    fn default() -> Self {
        DmacConfig { gamma: 1.5, metric: DistanceMetric::Euclidean }
    }
}

/// One pass of the builder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmacIteration {
    pub top_level: Vec<NodeId>,
    pub tau: f64,
    pub band: f64,
    /// Each merged component (members in top-level order) and the node created for it.
    pub merges: Vec<(Vec<NodeId>, NodeId)>,
}

#[derive(Debug, Clone)]
pub struct Dmac {
    pub tree: TreeTopology,
    pub trace: Vec<DmacIteration>,
}

/// Threshold-graph components over `top`, in order of first member.
pub(crate) fn band_components(dist: &[Vec<f64>], band: f64) -> Vec<Vec<usize>> {
    let n = dist.len();
    let mut comp = vec![usize::MAX; n];
    let mut out: Vec<Vec<usize>> = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut members = vec![start];
        comp[start] = id;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if comp[j] == usize::MAX && i != j && dist[i][j] <= band {
                    comp[j] = id;
                    members.push(j);
                    stack.push(j);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// Builds the cluster tree over `leaves`; leaf `i` becomes client `NodeId(i)`.
pub fn dmac_build(leaves: &[(ParamVector, u64)], config: &DmacConfig) -> Result<Dmac> {
    dmac_build_with(leaves, config, Execution::default())
}

pub fn dmac_build_with(leaves: &[(ParamVector, u64)], config: &DmacConfig, exec: Execution) -> Result<Dmac> {
    if leaves.is_empty() {
        return Err(Error::EmptyInput("no leaves to cluster"));
    }
    if !(config.gamma >= 1.0) {
        return Err(Error::Config { field: "dmac_gamma".into(), reason: format!("must be >= 1, got {}", config.gamma) });
    }
    let len = leaves[0].0.len();
    let mut tree = TreeTopology::new();
    for (p, w) in leaves {
        if p.len() != len {
            return Err(Error::LengthMismatch { expected: len, got: p.len() });
        }
        tree.add_client(p.clone(), *w);
    }
    let mut top: Vec<NodeId> = tree.clients();
    let mut trace = Vec::new();
    while top.len() > 1 {
        let pts: Vec<&[f64]> = top.iter().map(|&id| tree.params(id).as_slice()).collect();
        let dist = distance_matrix(&pts, config.metric, exec);
        let mut tau = f64::INFINITY;
        for i in 0..top.len() {
            for j in i + 1..top.len() {
                tau = tau.min(dist[i][j]);
            }
        }
        let band = if tau == 0.0 { 0.0 } else { tau * config.gamma };
        let comps = band_components(&dist, band);
        let mut next = Vec::new();
        let mut created = Vec::new();
        let mut merges = Vec::new();
        for comp in &comps {
            if comp.len() == 1 {
                next.push(top[comp[0]]);
                continue;
            }
            let members: Vec<NodeId> = comp.iter().map(|&i| top[i]).collect();
            let params = weighted_mean(
                members.iter().map(|&m| (tree.params(m).as_slice(), tree.node(m).data_weight as f64)),
            );
            let id = tree.add_cluster(&members, params)?;
            created.push(id);
            merges.push((members, id));
        }
        debug_assert!(!merges.is_empty(), "the closest pair always merges");
        trace.push(DmacIteration { top_level: top.clone(), tau, band, merges });
        next.extend(created);
        top = next;
    }
    tree.set_root(top[0])?;
    Ok(Dmac { tree, trace })
}
