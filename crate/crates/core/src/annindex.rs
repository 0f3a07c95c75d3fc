//! Priority-search hierarchical k-means tree.
//!
//! Internal nodes hold up to `K` centroids, leaves hold descriptor slots.
//! Search descends greedily to the nearest leaf and then backtracks
//! best-first over unexplored branches, keyed by distance to their
//! centroid, until `checks` leaves have been scanned. New descriptors are
//! routed greedily without rebuilding; an overflowing leaf is split by a
//! local k-means and its centroids are frozen from then on.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kmeans::{kmeans, KMeansConfig};
use crate::mapgraph::ImageId;
use crate::vecmath::{nearest, sq_dist};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IndexError {
    #[error("empty input")]
    EmptyInput,
    #[error("descriptor {0} already indexed")]
    DuplicateId(ImageId),
    #[error("dimension mismatch: tree holds {expected}-d descriptors, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub branching: usize,
    pub leaf_capacity: usize,
    pub max_depth: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            branching: 16,
            leaf_capacity: 64,
            max_depth: 64,
            kmeans_iters: 15,
            seed: 0,
        }
    }
}

impl TreeParams {
    fn validate(&self) -> Result<(), IndexError> {
        if self.branching < 2 {
            return Err(IndexError::InvalidParam("branching must be >= 2".into()));
        }
        if self.leaf_capacity < 1 {
            return Err(IndexError::InvalidParam("leaf capacity must be >= 1".into()));
        }
        Ok(())
    }
}

/// Up to `L` `(id, distance)` pairs, ascending by distance then id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborList {
    pub entries: Vec<(ImageId, f64)>,
}

impl NeighborList {
    pub fn ids(&self) -> Vec<ImageId> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Internal {
        centroids: Vec<Vec<f64>>,
        children: Vec<usize>,
        depth: usize,
    },
    Leaf {
        slots: Vec<usize>,
        depth: usize,
    },
}

/// Counters reported by [`KMeansTree::insert`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InsertStats {
    /// Nodes inspected while routing, the target leaf included.
    pub nodes_visited: usize,
    pub split: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SearchStats {
    pub leaves_visited: usize,
    pub points_checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansTree {
    params: TreeParams,
    dim: usize,
    nodes: Vec<Node>,
    ids: Vec<ImageId>,
    /// Flat `ids.len() * dim` descriptor store.
    points: Vec<f64>,
    #[serde(skip)]
    slot_of: HashMap<ImageId, usize>,
}

#[derive(Clone, Copy, PartialEq)]
struct Cand(f64, usize);

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Result entry ordered by (distance, id) so a max-heap evicts the worst.
#[derive(Clone, Copy, PartialEq)]
struct Hit(f64, ImageId);

impl Eq for Hit {}

impl PartialOrd for Hit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Hit {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl KMeansTree {
    /// An empty tree (a single empty leaf) for `dim`-dimensional descriptors.
    pub fn empty(dim: usize, params: TreeParams) -> Result<Self, IndexError> {
        params.validate()?;
        Ok(Self {
            params,
            dim,
            nodes: vec![Node::Leaf {
                slots: vec![],
                depth: 0,
            }],
            ids: vec![],
            points: vec![],
            slot_of: HashMap::new(),
        })
    }

    /// Recursively partitions `descriptors` until every node fits in a leaf.
    pub fn build<D: AsRef<[f64]>>(descriptors: &[(ImageId, D)], params: TreeParams) -> Result<Self, IndexError> {
        let first = descriptors.first().ok_or(IndexError::EmptyInput)?;
        let mut tree = Self::empty(first.1.as_ref().len(), params)?;
        for (id, d) in descriptors {
            tree.push_point(*id, d.as_ref())?;
        }
        let all: Vec<usize> = (0..tree.ids.len()).collect();
        tree.nodes.clear();
        tree.build_node(all, 0);
        Ok(tree)
    }

    fn build_node(&mut self, slots: Vec<usize>, depth: usize) -> usize {
        let index = self.nodes.len();
        self.nodes.push(Node::Leaf { slots: vec![], depth });
        match self.partition(&slots, depth, index) {
            None => {
                self.nodes[index] = Node::Leaf { slots, depth };
            }
            Some((centroids, groups)) => {
                let mut children = Vec::with_capacity(groups.len());
                for g in groups {
                    children.push(self.build_node(g, depth + 1));
                }
                self.nodes[index] = Node::Internal {
                    centroids,
                    children,
                    depth,
                };
            }
        }
        index
    }

    /// Splits `slots` with k-means if they overflow a leaf. Each returned
    /// centroid is the mean of the slots routed to its group.
    #[allow(clippy::type_complexity)]
    fn partition(&self, slots: &[usize], depth: usize, salt: usize) -> Option<(Vec<Vec<f64>>, Vec<Vec<usize>>)> {
        if slots.len() <= self.params.leaf_capacity || depth >= self.params.max_depth {
            return None;
        }
        let pts: Vec<&[f64]> = slots.iter().map(|&s| self.point(s)).collect();
        let cfg = KMeansConfig {
            k: self.params.branching,
            max_iters: self.params.kmeans_iters,
            tol: 1e-9,
            seed: mix(self.params.seed, salt as u64),
        };
        let clustering = kmeans(&pts, &cfg);
        let mut groups = vec![Vec::new(); clustering.centroids.len()];
        for (&s, &a) in slots.iter().zip(&clustering.assignment) {
            groups[a].push(s);
        }
        groups.retain(|g| !g.is_empty());
        if groups.len() < 2 {
            return None;
        }
        let centroids = groups
            .iter()
            .map(|g| {
                let mut m = vec![0.0; self.dim];
                for &s in g {
                    for (a, x) in m.iter_mut().zip(self.point(s)) {
                        *a += x;
                    }
                }
                let n = g.len() as f64;
                m.iter_mut().for_each(|a| *a /= n);
                m
            })
            .collect();
        Some((centroids, groups))
    }

    fn push_point(&mut self, id: ImageId, d: &[f64]) -> Result<usize, IndexError> {
        if d.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: d.len(),
            });
        }
        if self.slot_of.contains_key(&id) {
            return Err(IndexError::DuplicateId(id));
        }
        let slot = self.ids.len();
        self.ids.push(id);
        self.points.extend_from_slice(d);
        self.slot_of.insert(id, slot);
        Ok(slot)
    }

    #[inline]
    fn point(&self, slot: usize) -> &[f64] {
        &self.points[slot * self.dim..(slot + 1) * self.dim]
    }

    /// Rebuilds the id lookup after deserialization.
    pub fn reindex(&mut self) {
        self.slot_of = self.ids.iter().enumerate().map(|(s, &id)| (id, s)).collect();
    }

    pub fn params(&self) -> &TreeParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: ImageId) -> bool {
        self.slot_of.contains_key(&id)
    }

    pub fn descriptor(&self, id: ImageId) -> Option<&[f64]> {
        self.slot_of.get(&id).map(|&s| self.point(s))
    }

    pub fn ids(&self) -> &[ImageId] {
        &self.ids
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of levels, leaves included.
    pub fn depth(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n {
                Node::Internal { depth, .. } | Node::Leaf { depth, .. } => depth + 1,
            })
            .max()
            .unwrap_or(0)
    }

    /// Ids grouped by leaf, in node order.
    pub fn leaves(&self) -> Vec<Vec<ImageId>> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf { slots, .. } => Some(slots.iter().map(|&s| self.ids[s]).collect()),
                Node::Internal { .. } => None,
            })
            .collect()
    }

    pub fn search(&self, query: &[f64], count: usize, checks: usize) -> NeighborList {
        self.search_with_stats(query, count, checks).0
    }

    /// Greedy descent plus best-first backtracking over at most `checks`
    /// leaves (at least one leaf is always scanned).
    pub fn search_with_stats(&self, query: &[f64], count: usize, checks: usize) -> (NeighborList, SearchStats) {
        let mut stats = SearchStats::default();
        if self.ids.is_empty() || count == 0 || query.len() != self.dim {
            return (NeighborList::default(), stats);
        }
        let checks = checks.max(1);
        let mut branches: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        let mut hits: BinaryHeap<Hit> = BinaryHeap::with_capacity(count + 1);

        let mut next = Some(0usize);
        while let Some(start) = next {
            let mut node = start;
            loop {
                match &self.nodes[node] {
                    Node::Internal {
                        centroids, children, ..
                    } => {
                        let (best, _) = nearest(query, centroids);
                        for (i, c) in centroids.iter().enumerate() {
                            if i != best {
                                branches.push(Reverse(Cand(sq_dist(query, c), children[i])));
                            }
                        }
                        node = children[best];
                    }
                    Node::Leaf { slots, .. } => {
                        stats.leaves_visited += 1;
                        stats.points_checked += slots.len();
                        for &s in slots {
                            let h = Hit(sq_dist(query, self.point(s)), self.ids[s]);
                            if hits.len() < count {
                                hits.push(h);
                            } else if h < *hits.peek().expect("non-empty") {
                                hits.pop();
                                hits.push(h);
                            }
                        }
                        break;
                    }
                }
            }
            next = if stats.leaves_visited < checks {
                branches.pop().map(|Reverse(Cand(_, n))| n)
            } else {
                None
            };
        }

        let mut entries: Vec<(ImageId, f64)> = hits.into_iter().map(|Hit(d, id)| (id, d.sqrt())).collect();
        entries.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        (NeighborList { entries }, stats)
    }

    /// Routes `descriptor` to its nearest leaf without touching any
    /// centroid; splits the leaf if it now exceeds capacity.
    pub fn insert(&mut self, id: ImageId, descriptor: &[f64]) -> Result<InsertStats, IndexError> {
        let slot = self.push_point(id, descriptor)?;
        let mut stats = InsertStats::default();
        let mut node = 0;
        loop {
            stats.nodes_visited += 1;
            match &self.nodes[node] {
                Node::Internal {
                    centroids, children, ..
                } => {
                    node = children[nearest(descriptor, centroids).0];
                }
                Node::Leaf { .. } => break,
            }
        }
        let Node::Leaf { slots, depth } = &mut self.nodes[node] else {
            unreachable!("routing ends at a leaf")
        };
        slots.push(slot);
        let depth = *depth;
        let members = slots.clone();
        if let Some((centroids, groups)) = self.partition(&members, depth, node ^ (self.ids.len() << 20)) {
            let mut children = Vec::with_capacity(groups.len());
            for g in groups {
                children.push(self.nodes.len());
                self.nodes.push(Node::Leaf {
                    slots: g,
                    depth: depth + 1,
                });
            }
            self.nodes[node] = Node::Internal {
                centroids,
                children,
                depth,
            };
            stats.split = true;
        }
        Ok(stats)
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(i: u64) -> ImageId {
        ImageId(i)
    }

    #[test]
    fn single_descriptor_tree() {
        let tree = KMeansTree::build(&[(id(7), vec![1.0, 0.0])], TreeParams::default()).unwrap();
        assert_eq!(tree.leaf_count(), 1);
        assert_eq!(tree.depth(), 1);
        let hits = tree.search(&[1.0, 0.0], 10, 1);
        assert_eq!(hits.entries, vec![(id(7), 0.0)]);
    }

    #[test]
    fn empty_build_fails() {
        let none: Vec<(ImageId, Vec<f64>)> = vec![];
        assert_eq!(
            KMeansTree::build(&none, TreeParams::default()).unwrap_err(),
            IndexError::EmptyInput
        );
    }

    #[test]
    fn identical_descriptors_stay_searchable() {
        let data: Vec<(ImageId, Vec<f64>)> = (0..300).map(|i| (id(i), vec![0.6, 0.8])).collect();
        let params = TreeParams {
            leaf_capacity: 4,
            ..TreeParams::default()
        };
        let tree = KMeansTree::build(&data, params).unwrap();
        assert!(tree.depth() <= params.max_depth + 1);
        let hits = tree.search(&[0.6, 0.8], 5, usize::MAX);
        assert_eq!(hits.ids(), (0..5).map(id).collect::<Vec<_>>());
    }

    #[test]
    fn duplicate_insert_rejected() {
        let mut tree = KMeansTree::empty(2, TreeParams::default()).unwrap();
        tree.insert(id(1), &[1.0, 0.0]).unwrap();
        assert_eq!(
            tree.insert(id(1), &[0.0, 1.0]).unwrap_err(),
            IndexError::DuplicateId(id(1))
        );
        assert_eq!(tree.len(), 1);
    }

    #[test]
    fn insert_then_exact_search() {
        let data: Vec<(ImageId, Vec<f64>)> = (0..100)
            .map(|i| (id(i), vec![(i as f64).sin(), (i as f64).cos()]))
            .collect();
        let mut tree = KMeansTree::build(
            &data,
            TreeParams {
                leaf_capacity: 8,
                ..Default::default()
            },
        )
        .unwrap();
        tree.insert(id(1000), &[0.3, -0.2]).unwrap();
        let hits = tree.search(&[0.3, -0.2], 1, usize::MAX);
        assert_eq!(hits.entries, vec![(id(1000), 0.0)]);
    }

    #[test]
    fn dimension_checked() {
        let mut tree = KMeansTree::empty(3, TreeParams::default()).unwrap();
        assert!(matches!(
            tree.insert(id(0), &[1.0]),
            Err(IndexError::DimensionMismatch { .. })
        ));
        assert!(tree.search(&[1.0], 3, 1).is_empty());
    }
}
