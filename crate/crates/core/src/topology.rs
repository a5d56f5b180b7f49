//! Arena-backed rooted tree of clients (leaves) and cluster aggregators.
//!
//! Nodes live in a `Vec<Option<TreeNode>>`; removing a node leaves a
//! tombstone so a [`NodeId`] is never reused within a run. Children are kept
//! in insertion order and every traversal follows that order.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{weighted_mean, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Client,
    Cluster,
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub params: ParamVector,
    /// Training samples in this subtree.
    pub data_weight: u64,
}

impl TreeNode {
    pub fn is_client(&self) -> bool {
        self.kind == NodeKind::Client
    }

    pub fn is_cluster(&self) -> bool {
        self.kind == NodeKind::Cluster
    }
}

/// One broken invariant found by [`TreeTopology::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub node: Option<NodeId>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(id) => write!(f, "{id}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TreeTopology {
    nodes: Vec<Option<TreeNode>>,
    root: Option<NodeId>,
}

impl TreeTopology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn root(&self) -> Option<NodeId> {
        self.root
    }

    pub fn set_root(&mut self, id: NodeId) -> Result<()> {
        let node = self.get(id)?;
        if node.parent.is_some() {
            return Err(Error::InvalidArgument(format!("{id} has a parent and cannot be root")));
        }
        self.root = Some(id);
        Ok(())
    }

    /// Number of slots ever allocated, tombstones included.
    pub fn capacity(&self) -> usize {
        self.nodes.len()
    }

    pub fn get(&self, id: NodeId) -> Result<&TreeNode> {
        self.nodes
            .get(id.0)
            .and_then(Option::as_ref)
            .ok_or(Error::UnknownNode(id))
    }

    fn get_mut(&mut self, id: NodeId) -> Result<&mut TreeNode> {
        self.nodes
            .get_mut(id.0)
            .and_then(Option::as_mut)
            .ok_or(Error::UnknownNode(id))
    }

    /// Panicking accessor for ids the caller knows are live.
    pub fn node(&self, id: NodeId) -> &TreeNode {
        self.get(id).unwrap_or_else(|_| panic!("{id} is not live"))
    }

    pub fn is_live(&self, id: NodeId) -> bool {
        self.get(id).is_ok()
    }

    pub fn params(&self, id: NodeId) -> &ParamVector {
        &self.node(id).params
    }

    pub fn set_params(&mut self, id: NodeId, params: ParamVector) -> Result<()> {
        self.get_mut(id)?.params = params;
        Ok(())
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.node(id).children
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.node(id).parent
    }

    /// Live node ids in ascending order.
    pub fn live_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().flatten().map(|n| n.id)
    }

    pub fn clients(&self) -> Vec<NodeId> {
        self.nodes.iter().flatten().filter(|n| n.is_client()).map(|n| n.id).collect()
    }

    pub fn clusters(&self) -> Vec<NodeId> {
        self.nodes.iter().flatten().filter(|n| n.is_cluster()).map(|n| n.id).collect()
    }

    pub fn live_count(&self) -> usize {
        self.nodes.iter().flatten().count()
    }

    /// Adds a parentless client leaf.
    pub fn add_client(&mut self, params: ParamVector, data_weight: u64) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Some(TreeNode {
            id,
            kind: NodeKind::Client,
            parent: None,
            children: Vec::new(),
            params,
            data_weight,
        }));
        if self.root.is_none() {
            self.root = Some(id);
        }
        id
    }

    /// Creates a cluster over `children`. If the children share a parent the
    /// new node takes their place under it; if one of them was the root the
    /// new node becomes root.
    pub fn add_cluster(&mut self, children: &[NodeId], params: ParamVector) -> Result<NodeId> {
        if children.is_empty() {
            return Err(Error::EmptyChildren);
        }
        let mut seen = HashSet::new();
        let shared_parent = self.get(children[0])?.parent;
        for &c in children {
            let node = self.get(c)?;
            if node.parent != shared_parent {
                return Err(Error::MixedParents(c));
            }
            if !seen.insert(c) {
                return Err(Error::InvalidArgument(format!("duplicate child {c}")));
            }
        }
        let id = NodeId(self.nodes.len());
        let mut weight = 0;
        for &c in children {
            weight += self.node(c).data_weight;
        }
        if let Some(p) = shared_parent {
            self.get_mut(p)?.children.retain(|x| !seen.contains(x));
        }
        for &c in children {
            self.get_mut(c)?.parent = Some(id);
        }
        self.nodes.push(Some(TreeNode {
            id,
            kind: NodeKind::Cluster,
            parent: shared_parent,
            children: children.to_vec(),
            params,
            data_weight: weight,
        }));
        if let Some(p) = shared_parent {
            self.get_mut(p)?.children.push(id);
        }
        if self.root.is_none_or(|r| seen.contains(&r)) {
            self.root = Some(id);
        }
        Ok(id)
    }

    /// True when `node` lies in the subtree rooted at `ancestor` (inclusive).
    pub fn in_subtree(&self, node: NodeId, ancestor: NodeId) -> bool {
        let mut cur = Some(node);
        while let Some(c) = cur {
            if c == ancestor {
                return true;
            }
            cur = self.get(c).ok().and_then(|n| n.parent);
        }
        false
    }

    /// Moves `child` under `new_parent`, fixing data weights on both ancestor chains.
    pub fn reparent(&mut self, child: NodeId, new_parent: NodeId) -> Result<()> {
        self.get(child)?;
        let target = self.get(new_parent)?;
        if !target.is_cluster() {
            return Err(Error::NotACluster(new_parent));
        }
        if self.in_subtree(new_parent, child) {
            return Err(Error::Cycle { child, new_parent });
        }
        let old_parent = self.node(child).parent;
        if old_parent == Some(new_parent) {
            return Ok(());
        }
        let weight = self.node(child).data_weight;
        if let Some(p) = old_parent {
            self.get_mut(p)?.children.retain(|&x| x != child);
            self.adjust_weights(Some(p), |w| w - weight);
        } else if self.root == Some(child) {
            self.root = None;
        }
        self.get_mut(child)?.parent = Some(new_parent);
        self.get_mut(new_parent)?.children.push(child);
        self.adjust_weights(Some(new_parent), |w| w + weight);
        if self.root.is_none() {
            self.root = Some(self.top_of(new_parent));
        }
        Ok(())
    }

    /// Moves `child` into `new_parent`'s children at `position`, keeping order.
    pub(crate) fn reparent_at(&mut self, child: NodeId, new_parent: NodeId, position: usize) -> Result<()> {
        self.reparent(child, new_parent)?;
        let kids = &mut self.get_mut(new_parent)?.children;
        let last = kids.pop().expect("child was just pushed");
        let position = position.min(kids.len());
        kids.insert(position, last);
        Ok(())
    }

    /// Detaches a node (with its subtree) from its parent, leaving it parentless.
    pub(crate) fn detach(&mut self, node: NodeId) -> Result<()> {
        let weight = self.get(node)?.data_weight;
        if let Some(p) = self.node(node).parent {
            self.get_mut(p)?.children.retain(|&x| x != node);
            self.adjust_weights(Some(p), |w| w - weight);
            self.get_mut(node)?.parent = None;
        }
        Ok(())
    }

    fn top_of(&self, mut id: NodeId) -> NodeId {
        while let Some(p) = self.node(id).parent {
            id = p;
        }
        id
    }

    fn adjust_weights(&mut self, mut cur: Option<NodeId>, f: impl Fn(u64) -> u64) {
        while let Some(id) = cur {
            let node = self.get_mut(id).expect("ancestor chain is live");
            node.data_weight = f(node.data_weight);
            cur = node.parent;
        }
    }

    /// Tombstones a childless cluster.
    pub fn remove_internal(&mut self, node: NodeId) -> Result<()> {
        let n = self.get(node)?;
        if !n.is_cluster() {
            return Err(Error::NotACluster(node));
        }
        if !n.children.is_empty() {
            return Err(Error::HasChildren(node));
        }
        if let Some(p) = n.parent {
            self.get_mut(p)?.children.retain(|&x| x != node);
        }
        if self.root == Some(node) {
            self.root = None;
        }
        self.nodes[node.0] = None;
        Ok(())
    }

    /// Tree depth of a node; the root has depth 0.
    pub fn depth(&self, id: NodeId) -> usize {
        let mut d = 0;
        let mut cur = self.node(id).parent;
        while let Some(p) = cur {
            d += 1;
            cur = self.node(p).parent;
        }
        d
    }

    /// Number of levels from the root to the deepest leaf (a lone leaf has height 1).
    pub fn height(&self) -> usize {
        fn go(t: &TreeTopology, id: NodeId) -> usize {
            1 + t.children(id).iter().map(|&c| go(t, c)).max().unwrap_or(0)
        }
        self.root.map_or(0, |r| go(self, r))
    }

    /// Pre-order node ids starting from the root.
    pub fn preorder(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        if let Some(r) = self.root {
            let mut stack = vec![r];
            while let Some(id) = stack.pop() {
                out.push(id);
                stack.extend(self.children(id).iter().rev());
            }
        }
        out
    }

    /// Post-order node ids (children before parents).
    pub fn postorder(&self) -> Vec<NodeId> {
        fn go(t: &TreeTopology, id: NodeId, out: &mut Vec<NodeId>) {
            for &c in t.children(id) {
                go(t, c, out);
            }
            out.push(id);
        }
        let mut out = Vec::new();
        if let Some(r) = self.root {
            go(self, r, &mut out);
        }
        out
    }

    /// Clients in the subtree of `id`, in traversal order.
    pub fn leaves_under(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            let node = self.node(n);
            if node.is_client() {
                out.push(n);
            } else {
                stack.extend(node.children.iter().rev());
            }
        }
        out
    }

    /// Recomputes weight and params of one cluster from its children.
    pub fn refresh_node(&mut self, id: NodeId) {
        let node = self.node(id);
        if !node.is_cluster() || node.children.is_empty() {
            return;
        }
        let weight: u64 = node.children.iter().map(|&c| self.node(c).data_weight).sum();
        let params = weighted_mean(
            node.children
                .iter()
                .map(|&c| (self.node(c).params.as_slice(), self.node(c).data_weight as f64)),
        );
        let node = self.get_mut(id).expect("live");
        node.data_weight = weight;
        node.params = params;
    }

    /// Recomputes `id` and every ancestor up to the root.
    pub fn refresh_upward(&mut self, id: NodeId) {
        let mut cur = Some(id);
        while let Some(c) = cur {
            if !self.is_live(c) {
                break;
            }
            self.refresh_node(c);
            cur = self.node(c).parent;
        }
    }

    /// Bottom-up recomputation of every cluster's weight and params.
    pub fn refresh_all(&mut self) {
        for id in self.postorder() {
            self.refresh_node(id);
        }
    }

    /// Checks every structural invariant and reports what is broken.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut v = |node: Option<NodeId>, message: String| out.push(Violation { node, message });
        let live: Vec<&TreeNode> = self.nodes.iter().flatten().collect();
        if live.is_empty() {
            if self.root.is_some() {
                v(None, "root set on an empty tree".into());
            }
            return out;
        }
        let Some(root) = self.root else {
            v(None, "no root".into());
            return out;
        };
        match self.get(root) {
            Err(_) => v(Some(root), "root is not live".into()),
            Ok(r) if r.parent.is_some() => v(Some(root), "root has a parent".into()),
            _ => {}
        }
        let mut listed_by: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for node in &live {
            for &c in &node.children {
                listed_by.entry(c).or_default().push(node.id);
            }
        }
        let param_len = live[0].params.len();
        for node in &live {
            let id = node.id;
            if node.params.len() != param_len {
                v(Some(id), format!("params length {} != {}", node.params.len(), param_len));
            }
            if node.parent.is_none() && id != root {
                v(Some(id), "non-root node has no parent".into());
            }
            if let Some(p) = node.parent {
                if !self.is_live(p) {
                    v(Some(id), format!("parent {p} is not live"));
                }
            }
            let listers = listed_by.get(&id).map(Vec::as_slice).unwrap_or(&[]);
            let expected: &[NodeId] = node.parent.as_slice();
            if listers != expected {
                v(
                    Some(id),
                    format!("parent link {:?} but listed as child by {:?}", node.parent, listers),
                );
            }
            for &c in &node.children {
                if !self.is_live(c) {
                    v(Some(id), format!("child {c} is not live"));
                }
            }
            match node.kind {
                NodeKind::Client if !node.children.is_empty() => {
                    v(Some(id), "client has children".into())
                }
                NodeKind::Cluster if node.children.is_empty() => {
                    v(Some(id), "cluster has no children".into())
                }
                NodeKind::Cluster => {
                    let sum: u64 = node
                        .children
                        .iter()
                        .filter_map(|&c| self.get(c).ok())
                        .map(|c| c.data_weight)
                        .sum();
                    if sum != node.data_weight {
                        v(Some(id), format!("data_weight {} != children sum {sum}", node.data_weight));
                    }
                }
                _ => {}
            }
        }
        // reachability and acyclicity: walk from the root, never revisiting
        if self.get(root).is_ok() {
            let mut visited = HashSet::new();
            let mut stack = vec![root];
            while let Some(id) = stack.pop() {
                if !visited.insert(id) {
                    v(Some(id), "reached twice (cycle or shared child)".into());
                    continue;
                }
                if let Ok(n) = self.get(id) {
                    stack.extend(n.children.iter().copied());
                }
            }
            for node in &live {
                if !visited.contains(&node.id) {
                    v(Some(node.id), "not reachable from root".into());
                }
            }
        }
        out
    }

    /// Test hook for corrupting links.
    #[doc(hidden)]
    pub fn raw_node_mut(&mut self, id: NodeId) -> Option<&mut TreeNode> {
        self.nodes.get_mut(id.0).and_then(Option::as_mut)
    }

    pub fn snapshot(&self, round: usize) -> TreeSnapshot {
        TreeSnapshot {
            round,
            root: self.root,
            nodes: self
                .nodes
                .iter()
                .flatten()
                .map(|n| SnapshotNode {
                    id: n.id,
                    kind: n.kind,
                    parent: n.parent,
                    children: n.children.clone(),
                    data_weight: n.data_weight,
                })
                .collect(),
        }
    }
}

/// Per-round JSON export of the tree shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSnapshot {
    pub round: usize,
    pub root: Option<NodeId>,
    pub nodes: Vec<SnapshotNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub data_weight: u64,
}
