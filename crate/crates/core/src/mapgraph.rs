//! The topological map: places, transition weights and the image corpus.
//!
//! Edge weights are stored symmetric and un-normalized. The HMM consumes
//! the row-normalized view built by [`MapGraph::transition_matrix`], so the
//! stored graph stays undirected even when node degrees differ.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ImageId(pub u64);

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("cannot merge node {0} into itself")]
    SelfMerge(NodeId),
    #[error("duplicate image (video {video}, frame {frame})")]
    DuplicateImage { video: u32, frame: u32 },
    #[error("image {0} already in corpus")]
    DuplicateImageId(ImageId),
    #[error("{records} records for {nodes} nodes")]
    LengthMismatch { records: usize, nodes: usize },
    #[error("audit failed: {0}")]
    Audit(String),
}

/// Un-normalized Gaussian weight `exp(-gap^2 / delta^2)`.
pub fn gaussian_weight(gap: usize, delta: f64) -> f64 {
    let g = gap as f64;
    (-(g * g) / (delta * delta)).exp()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MapGraph {
    adj: BTreeMap<NodeId, BTreeMap<NodeId, f64>>,
}

impl MapGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A chain of `frames` places whose edges link frames at most `window`
    /// steps apart, self-transitions included.
    pub fn init_chain(frames: usize, window: usize, delta: f64) -> Result<Self, GraphError> {
        let mut g = Self::new();
        g.append_chain(frames, window, delta)?;
        Ok(g)
    }

    /// Appends a chain after the current highest id and returns the new ids.
    pub fn append_chain(&mut self, frames: usize, window: usize, delta: f64) -> Result<Vec<NodeId>, GraphError> {
        if frames == 0 {
            return Err(GraphError::InvalidParam("chain needs at least one frame".into()));
        }
        if window == 0 {
            return Err(GraphError::InvalidParam("window must be >= 1".into()));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(GraphError::InvalidParam(format!("delta {delta} must be positive")));
        }
        let base = self.max_id().map_or(0, |n| n.0);
        let ids: Vec<NodeId> = (1..=frames as u32).map(|i| NodeId(base + i)).collect();
        for &id in &ids {
            self.add_node(id);
        }
        for i in 0..frames {
            for j in i..frames.min(i + window + 1) {
                self.set_edge(ids[i], ids[j], gaussian_weight(j - i, delta));
            }
        }
        Ok(ids)
    }

    pub fn add_node(&mut self, id: NodeId) {
        self.adj.entry(id).or_default();
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.adj.contains_key(&id)
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.adj.keys().copied()
    }

    pub fn max_id(&self) -> Option<NodeId> {
        self.adj.keys().next_back().copied()
    }

    /// Sets both directions of `<a, b>`; both nodes must exist.
    pub fn set_edge(&mut self, a: NodeId, b: NodeId, weight: f64) {
        debug_assert!(self.contains(a) && self.contains(b));
        self.adj.get_mut(&a).expect("edge endpoint").insert(b, weight);
        self.adj.get_mut(&b).expect("edge endpoint").insert(a, weight);
    }

    pub fn remove_edge(&mut self, a: NodeId, b: NodeId) {
        if let Some(row) = self.adj.get_mut(&a) {
            row.remove(&b);
        }
        if let Some(row) = self.adj.get_mut(&b) {
            row.remove(&a);
        }
    }

    pub fn weight(&self, a: NodeId, b: NodeId) -> Option<f64> {
        self.adj.get(&a).and_then(|row| row.get(&b).copied())
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        self.weight(a, b).is_some()
    }

    /// Neighbours of `id` with their stored weights, `id` itself included
    /// when it has a self-loop.
    pub fn neighbors(&self, id: NodeId) -> impl Iterator<Item = (NodeId, f64)> + '_ {
        self.adj
            .get(&id)
            .into_iter()
            .flat_map(|row| row.iter().map(|(k, w)| (*k, *w)))
    }

    pub fn degree(&self, id: NodeId) -> usize {
        self.adj.get(&id).map_or(0, |row| row.len())
    }

    /// Removes a node and every edge touching it.
    pub fn remove_node(&mut self, id: NodeId) -> bool {
        let Some(row) = self.adj.remove(&id) else {
            return false;
        };
        for other in row.keys() {
            if let Some(r) = self.adj.get_mut(other) {
                r.remove(&id);
            }
        }
        true
    }

    /// Undirected edge count, self-loops counted once.
    pub fn edge_count(&self) -> usize {
        self.adj
            .iter()
            .map(|(k, row)| row.keys().filter(|n| *n >= k).count())
            .sum()
    }

    /// `r`: the largest number of non-zeros in any row of the transition matrix.
    pub fn max_row_nonzeros(&self) -> usize {
        self.adj.values().map(|r| r.len()).max().unwrap_or(0)
    }

    /// Sum of the stored weights incident to `id`.
    pub fn row_sum(&self, id: NodeId) -> f64 {
        self.neighbors(id).map(|(_, w)| w).sum()
    }

    /// Row-normalized transition matrix over the current nodes in id order.
    pub fn transition_matrix(&self) -> TransitionMatrix {
        let ids: Vec<NodeId> = self.adj.keys().copied().collect();
        let mut row_ptr = Vec::with_capacity(ids.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in self.adj.values() {
            let total: f64 = row.values().sum();
            for (col, w) in row {
                let j = ids.binary_search(col).expect("edge target is a node");
                cols.push(j);
                vals.push(w / total);
            }
            row_ptr.push(cols.len());
        }
        TransitionMatrix {
            ids,
            row_ptr,
            cols,
            vals,
        }
    }

    /// Number of connected components (BFS).
    pub fn component_count(&self) -> usize {
        let mut seen = HashSet::new();
        let mut count = 0;
        for &start in self.adj.keys() {
            if !seen.insert(start) {
                continue;
            }
            count += 1;
            let mut queue = VecDeque::from([start]);
            while let Some(n) = queue.pop_front() {
                for (m, _) in self.neighbors(n) {
                    if seen.insert(m) {
                        queue.push_back(m);
                    }
                }
            }
        }
        count
    }

    /// Hop distance between two nodes, if connected.
    pub fn hops(&self, from: NodeId, to: NodeId) -> Option<usize> {
        if !self.contains(from) || !self.contains(to) {
            return None;
        }
        let mut dist = BTreeMap::from([(from, 0usize)]);
        let mut queue = VecDeque::from([from]);
        while let Some(n) = queue.pop_front() {
            let d = dist[&n];
            if n == to {
                return Some(d);
            }
            for (m, _) in self.neighbors(n) {
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(m) {
                    e.insert(d + 1);
                    queue.push_back(m);
                }
            }
        }
        None
    }

    /// Symmetry, finite positive weights and a non-empty row per node.
    pub fn audit(&self) -> Result<(), GraphError> {
        for (&a, row) in &self.adj {
            if row.is_empty() {
                return Err(GraphError::Audit(format!("node {a} has no transitions")));
            }
            for (&b, &w) in row {
                if !(w > 0.0 && w.is_finite()) {
                    return Err(GraphError::Audit(format!("edge <{a},{b}> has weight {w}")));
                }
                match self.weight(b, a) {
                    Some(back) if back == w => {}
                    other => {
                        return Err(GraphError::Audit(format!(
                            "edge <{a},{b}> = {w} but <{b},{a}> = {other:?}"
                        )))
                    }
                }
            }
        }
        let tm = self.transition_matrix();
        for i in 0..tm.len() {
            let s: f64 = tm.row(i).map(|(_, v)| v).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(GraphError::Audit(format!("row {} sums to {s}", tm.ids[i])));
            }
        }
        Ok(())
    }

    /// Graphviz rendering: one node per line, then the weighted edge list.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("graph map {\n");
        for id in self.adj.keys() {
            out.push_str(&format!("  {id};\n"));
        }
        for (a, row) in &self.adj {
            for (b, w) in row.range(*a..) {
                out.push_str(&format!("  {a} -- {b} [weight={w:.6}];\n"));
            }
        }
        out.push_str("}\n");
        out
    }
}

/// Compressed-row transition matrix `E`; rows sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub ids: Vec<NodeId>,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl TransitionMatrix {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn max_row_nonzeros(&self) -> usize {
        self.row_ptr.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }
}

/// One ingested image. `(video, frame)` is unique within a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub video: u32,
    pub frame: u32,
    pub timestamp: Option<f64>,
    /// Opaque location label (e.g. a geotag or ground-truth place); passed
    /// through untouched.
    pub label: Option<u64>,
}

/// Images observed at each place, with the inverse image -> place lookup.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    forward: BTreeMap<NodeId, BTreeSet<ImageId>>,
    inverse: BTreeMap<ImageId, NodeId>,
    records: BTreeMap<ImageId, ImageRecord>,
    #[serde(skip)]
    keys: HashSet<(u32, u32)>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `records[i]` under `nodes[i]`. All-or-nothing.
    pub fn add_images(&mut self, records: &[ImageRecord], nodes: &[NodeId]) -> Result<(), GraphError> {
        if records.len() != nodes.len() {
            return Err(GraphError::LengthMismatch {
                records: records.len(),
                nodes: nodes.len(),
            });
        }
        let mut batch_keys = HashSet::new();
        let mut batch_ids = HashSet::new();
        for r in records {
            if self.keys.contains(&(r.video, r.frame)) || !batch_keys.insert((r.video, r.frame)) {
                return Err(GraphError::DuplicateImage {
                    video: r.video,
                    frame: r.frame,
                });
            }
            if self.records.contains_key(&r.id) || !batch_ids.insert(r.id) {
                return Err(GraphError::DuplicateImageId(r.id));
            }
        }
        for (r, &n) in records.iter().zip(nodes) {
            self.keys.insert((r.video, r.frame));
            self.forward.entry(n).or_default().insert(r.id);
            self.inverse.insert(r.id, n);
            self.records.insert(r.id, r.clone());
        }
        Ok(())
    }

    /// Rebuilds the `(video, frame)` index after deserialization.
    pub fn reindex(&mut self) {
        self.keys = self.records.values().map(|r| (r.video, r.frame)).collect();
    }

    pub fn node_of(&self, image: ImageId) -> Option<NodeId> {
        self.inverse.get(&image).copied()
    }

    pub fn images_of(&self, node: NodeId) -> impl Iterator<Item = ImageId> + '_ {
        self.forward.get(&node).into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn image_count_of(&self, node: NodeId) -> usize {
        self.forward.get(&node).map_or(0, |s| s.len())
    }

    pub fn record(&self, image: ImageId) -> Option<&ImageRecord> {
        self.records.get(&image)
    }

    pub fn records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.values()
    }

    /// Most frequent label among the node's images, smallest on ties.
    pub fn majority_label(&self, node: NodeId) -> Option<u64> {
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for img in self.images_of(node) {
            if let Some(label) = self.record(img).and_then(|r| r.label) {
                *counts.entry(label).or_default() += 1;
            }
        }
        // max_by keeps the last maximum, so iterate labels in reverse.
        counts.into_iter().rev().max_by_key(|&(_, c)| c).map(|(l, _)| l)
    }

    pub fn image_count(&self) -> usize {
        self.inverse.len()
    }

    pub fn cells(&self) -> impl Iterator<Item = (NodeId, &BTreeSet<ImageId>)> {
        self.forward.iter().map(|(k, v)| (*k, v))
    }

    /// Moves every image of `from` into `to`.
    pub fn move_cell(&mut self, from: NodeId, to: NodeId) {
        if from == to {
            return;
        }
        if let Some(images) = self.forward.remove(&from) {
            for &i in &images {
                self.inverse.insert(i, to);
            }
            self.forward.entry(to).or_default().extend(images);
        }
    }

    fn renumber(&mut self, map: &BTreeMap<NodeId, NodeId>) {
        let forward = std::mem::take(&mut self.forward);
        for (old, images) in forward {
            let new = map.get(&old).copied().unwrap_or(old);
            for &i in &images {
                self.inverse.insert(i, new);
            }
            self.forward.entry(new).or_default().extend(images);
        }
    }

    /// Forward and inverse maps agree and every image has a record.
    pub fn audit(&self) -> Result<(), GraphError> {
        let mut seen = 0;
        for (&n, images) in &self.forward {
            for i in images {
                seen += 1;
                if self.inverse.get(i) != Some(&n) {
                    return Err(GraphError::Audit(format!(
                        "image {i} listed under {n} but inverse says {:?}",
                        self.inverse.get(i)
                    )));
                }
            }
        }
        if seen != self.inverse.len() {
            return Err(GraphError::Audit(format!(
                "forward holds {seen} images, inverse {}",
                self.inverse.len()
            )));
        }
        if self.records.len() != self.inverse.len() || self.inverse.keys().any(|i| !self.records.contains_key(i)) {
            return Err(GraphError::Audit("image records out of sync with corpus".into()));
        }
        Ok(())
    }
}

/// Graph plus corpus: everything the filter needs besides the index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlaceMap {
    pub graph: MapGraph,
    pub corpus: Corpus,
}

impl PlaceMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    /// Folds `absorb` into `keep`: edges `<absorb, k3>` move to `<keep, k3>`
    /// unless `keep` already has that edge (then the existing weight stays),
    /// corpora are united and `absorb` disappears.
    pub fn merge_nodes(&mut self, keep: NodeId, absorb: NodeId) -> Result<(), GraphError> {
        if keep == absorb {
            return Err(GraphError::SelfMerge(keep));
        }
        for n in [keep, absorb] {
            if !self.graph.contains(n) {
                return Err(GraphError::UnknownNode(n));
            }
        }
        let moved: Vec<(NodeId, f64)> = self.graph.neighbors(absorb).collect();
        for (k3, w) in moved {
            let target = if k3 == absorb { keep } else { k3 };
            if target == keep && k3 == keep {
                continue;
            }
            if !self.graph.has_edge(keep, target) {
                self.graph.set_edge(keep, target, w);
            }
        }
        self.graph.remove_node(absorb);
        self.corpus.move_cell(absorb, keep);
        Ok(())
    }

    /// Deletes a node; its images must already have been moved elsewhere.
    pub fn remove_place(&mut self, id: NodeId) -> Result<(), GraphError> {
        if self.corpus.image_count_of(id) > 0 {
            return Err(GraphError::Audit(format!("node {id} still holds images")));
        }
        if !self.graph.remove_node(id) {
            return Err(GraphError::UnknownNode(id));
        }
        Ok(())
    }

    /// Renumbers nodes densely to `1..=K`, preserving order.
    pub fn compact(&mut self) -> BTreeMap<NodeId, NodeId> {
        let map: BTreeMap<NodeId, NodeId> = self
            .graph
            .nodes()
            .enumerate()
            .map(|(i, old)| (old, NodeId(i as u32 + 1)))
            .collect();
        if map.iter().all(|(a, b)| a == b) {
            return map;
        }
        let old = std::mem::take(&mut self.graph.adj);
        for (id, row) in old {
            let new_row = row.into_iter().map(|(k, w)| (map[&k], w)).collect();
            self.graph.adj.insert(map[&id], new_row);
        }
        self.corpus.renumber(&map);
        map
    }

    pub fn reindex(&mut self) {
        self.corpus.reindex();
    }

    /// Full structural audit: graph symmetry and stochastic rows, corpus
    /// bijection, and corpus cells only on live nodes.
    pub fn audit(&self) -> Result<(), GraphError> {
        self.graph.audit()?;
        self.corpus.audit()?;
        for (n, _) in self.corpus.cells() {
            if !self.graph.contains(n) {
                return Err(GraphError::Audit(format!("corpus cell for missing node {n}")));
            }
        }
        Ok(())
    }
}
