//! Map update after a query traversal: append the query as a new chain,
//! cull query frames that were recognised, combine old places that a single
//! frame matched together, then index the new descriptors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annindex::{IndexError, KMeansTree};
use crate::embedding::GlobalDescriptor;
use crate::hmmfilter::Localization;
use crate::mapgraph::{GraphError, ImageRecord, NodeId, PlaceMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompressionError {
    #[error("inconsistent belief history: {0}")]
    InconsistentBeliefHistory(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateMode {
    /// Append, cull and combine.
    Compress,
    /// Append only; the map grows by every query frame.
    AppendOnly,
}

/// `M(t)`: the pre-existing places whose belief reached `gamma` at frame `t`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSets(pub Vec<Vec<NodeId>>);

impl MatchSets {
    pub fn from_localization(loc: &Localization, gamma: f64) -> Self {
        Self(
            loc.beliefs
                .iter()
                .map(|b| {
                    b.probs
                        .iter()
                        .zip(&loc.ids)
                        .filter(|(p, _)| **p >= gamma)
                        .map(|(_, id)| *id)
                        .collect()
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Appends the query as a chain (same weights as map initialization) and
/// files `records[t]` under the new node `K + t`.
pub fn append_query(
    map: &mut PlaceMap,
    records: &[ImageRecord],
    window: usize,
    delta: f64,
) -> Result<Vec<NodeId>, CompressionError> {
    let nodes = map.graph.append_chain(records.len(), window, delta)?;
    if let Err(e) = map.corpus.add_images(records, &nodes) {
        for &n in &nodes {
            map.graph.remove_node(n);
        }
        return Err(e.into());
    }
    Ok(nodes)
}

/// For every frame with a non-empty match set, re-creates each edge of the
/// frame's node at every matched place (existing edges win), hands the
/// frame's image to the lowest matched place and deletes the frame's node.
/// Returns the number of culled frames.
pub fn cull(map: &mut PlaceMap, query_nodes: &[NodeId], sets: &MatchSets) -> Result<usize, CompressionError> {
    if sets.len() != query_nodes.len() {
        return Err(CompressionError::InconsistentBeliefHistory(format!(
            "{} match sets for {} query frames",
            sets.len(),
            query_nodes.len()
        )));
    }
    let query: BTreeSet<NodeId> = query_nodes.iter().copied().collect();
    for (t, set) in sets.0.iter().enumerate() {
        if !map.graph.contains(query_nodes[t]) {
            return Err(CompressionError::InconsistentBeliefHistory(format!(
                "query node {} missing",
                query_nodes[t]
            )));
        }
        if let Some(bad) = set.iter().find(|k| query.contains(k) || !map.graph.contains(**k)) {
            return Err(CompressionError::InconsistentBeliefHistory(format!(
                "frame {t} matched {bad}, which is not a pre-existing place"
            )));
        }
    }

    let mut culled = 0;
    for (&qn, set) in query_nodes.iter().zip(&sets.0) {
        let Some(&owner) = set.iter().min() else { continue };
        let edges: Vec<(NodeId, f64)> = map.graph.neighbors(qn).filter(|(k, _)| *k != qn).collect();
        for &k1 in set {
            for &(k2, w) in &edges {
                if !map.graph.has_edge(k1, k2) {
                    map.graph.set_edge(k1, k2, w);
                }
            }
        }
        map.corpus.move_cell(qn, owner);
        map.remove_place(qn)?;
        culled += 1;
    }
    Ok(culled)
}

fn find(parent: &mut BTreeMap<NodeId, NodeId>, mut k: NodeId) -> NodeId {
    let mut path = vec![];
    while let Some(&p) = parent.get(&k) {
        if p == k {
            break;
        }
        path.push(k);
        k = p;
    }
    for n in path {
        parent.insert(n, k);
    }
    k
}

/// Merges every place of `M(t)` into the lowest one unless the two are
/// already adjacent. Match sets are frozen before any merge; ids absorbed
/// earlier resolve to their surviving place through a union-find. Leftover
/// places without edges or images are dropped and ids are compacted.
/// Returns the number of merges.
pub fn combine(map: &mut PlaceMap, sets: &MatchSets) -> usize {
    let mut parent: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    let mut merges = 0;
    for set in &sets.0 {
        if set.len() < 2 {
            continue;
        }
        let mut reps: Vec<NodeId> = set.iter().map(|&k| find(&mut parent, k)).collect();
        reps.sort_unstable();
        reps.dedup();
        let Some((&k1, rest)) = reps.split_first() else {
            continue;
        };
        for &k2 in rest {
            if map.graph.has_edge(k1, k2) {
                continue;
            }
            if map.merge_nodes(k1, k2).is_ok() {
                parent.insert(k2, k1);
                merges += 1;
            }
        }
    }
    let leftovers: Vec<NodeId> = map
        .graph
        .nodes()
        .filter(|&n| map.graph.degree(n) == 0 && map.corpus.image_count_of(n) == 0)
        .collect();
    for n in leftovers {
        map.graph.remove_node(n);
    }
    map.compact();
    merges
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub frames: usize,
    pub culled: usize,
    pub merged: usize,
    pub new_places: usize,
    pub nodes_before: usize,
    pub final_nodes: usize,
    pub elapsed_ms: f64,
}

impl fmt::Display for UpdateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "frames={} culled={} merged={} new_places={} nodes_before={} final_nodes={} elapsed_ms={:.3}",
            self.frames,
            self.culled,
            self.merged,
            self.new_places,
            self.nodes_before,
            self.final_nodes,
            self.elapsed_ms
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateParams {
    pub window: usize,
    pub delta: f64,
    pub gamma: f64,
}

/// append -> cull -> combine -> compact -> index. `loc` must come from
/// filtering `frames` against the current map.
pub fn update_map(
    map: &mut PlaceMap,
    tree: &mut KMeansTree,
    frames: &[(ImageRecord, GlobalDescriptor)],
    loc: &Localization,
    params: &UpdateParams,
    mode: UpdateMode,
) -> Result<UpdateReport, CompressionError> {
    let start = Instant::now();
    let nodes_before = map.node_count();
    if mode == UpdateMode::Compress {
        if loc.beliefs.len() != frames.len() {
            return Err(CompressionError::InconsistentBeliefHistory(format!(
                "{} beliefs for {} frames",
                loc.beliefs.len(),
                frames.len()
            )));
        }
        if !loc.ids.iter().copied().eq(map.graph.nodes()) {
            return Err(CompressionError::InconsistentBeliefHistory(
                "beliefs were computed against a different map".into(),
            ));
        }
    }
    for (r, d) in frames {
        if tree.contains(r.id) {
            return Err(IndexError::DuplicateId(r.id).into());
        }
        if d.dim() != tree.dim() {
            return Err(IndexError::DimensionMismatch {
                expected: tree.dim(),
                got: d.dim(),
            }
            .into());
        }
    }

    let records: Vec<ImageRecord> = frames.iter().map(|(r, _)| r.clone()).collect();
    let query_nodes = append_query(map, &records, params.window, params.delta)?;
    let (culled, merged) = match mode {
        UpdateMode::Compress => {
            let sets = MatchSets::from_localization(loc, params.gamma);
            let culled = cull(map, &query_nodes, &sets)?;
            (culled, combine(map, &sets))
        }
        UpdateMode::AppendOnly => (0, 0),
    };
    map.compact();
    for (r, d) in frames {
        tree.insert(r.id, d.as_slice())?;
    }
    Ok(UpdateReport {
        frames: frames.len(),
        culled,
        merged,
        new_places: frames.len() - culled,
        nodes_before,
        final_nodes: map.node_count(),
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapgraph::{ImageId, MapGraph};

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    fn rec(id: u64, video: u32, frame: u32) -> ImageRecord {
        ImageRecord {
            id: ImageId(id),
            video,
            frame,
            timestamp: None,
            label: None,
        }
    }

    fn chain_map(len: u32) -> PlaceMap {
        let mut m = PlaceMap::new();
        m.graph = MapGraph::init_chain(len as usize, 1, 1.0).unwrap();
        let recs: Vec<_> = (0..len).map(|i| rec(i as u64, 0, i)).collect();
        let nodes: Vec<_> = (1..=len).map(n).collect();
        m.corpus.add_images(&recs, &nodes).unwrap();
        m
    }

    fn query_records(first_id: u64, count: u32, video: u32) -> Vec<ImageRecord> {
        (0..count).map(|i| rec(first_id + i as u64, video, i)).collect()
    }

    #[test]
    fn append_on_empty_equals_init_chain() {
        let mut m = PlaceMap::new();
        let nodes = append_query(&mut m, &query_records(0, 4, 0), 2, 1.0).unwrap();
        assert_eq!(nodes, (1..=4).map(n).collect::<Vec<_>>());
        assert_eq!(m.graph, MapGraph::init_chain(4, 2, 1.0).unwrap());
    }

    #[test]
    fn append_adds_disconnected_chain() {
        let mut m = chain_map(5);
        let nodes = append_query(&mut m, &query_records(100, 3, 1), 1, 1.0).unwrap();
        assert_eq!(nodes, vec![n(6), n(7), n(8)]);
        for k in 1..=5 {
            for q in &nodes {
                assert!(!m.graph.has_edge(n(k), *q));
            }
        }
        assert_eq!(m.graph.component_count(), 2);
        m.compact();
        assert_eq!(m.node_count(), 8);
        m.audit().unwrap();
    }

    #[test]
    fn no_match_culls_nothing() {
        let mut m = chain_map(5);
        let q = append_query(&mut m, &query_records(100, 3, 1), 1, 1.0).unwrap();
        let sets = MatchSets(vec![vec![]; 3]);
        assert_eq!(cull(&mut m, &q, &sets).unwrap(), 0);
        assert_eq!(m.node_count(), 8);
    }

    #[test]
    fn replay_culls_back_to_old_size() {
        let mut m = chain_map(5);
        let q = append_query(&mut m, &query_records(100, 5, 1), 1, 1.0).unwrap();
        let sets = MatchSets((1..=5).map(|k| vec![n(k)]).collect());
        assert_eq!(cull(&mut m, &q, &sets).unwrap(), 5);
        assert_eq!(m.node_count(), 5);
        for k in 1..=5 {
            assert_eq!(m.corpus.image_count_of(n(k)), 2);
        }
        m.audit().unwrap();
    }

    #[test]
    fn frame_matching_two_places_links_both() {
        // Old map: 1-2-3-4-5 and 6-7-8 (two disjoint sub-graphs).
        let mut m = chain_map(5);
        m.graph.append_chain(3, 1, 1.0).unwrap();
        m.corpus
            .add_images(&[rec(50, 9, 0), rec(51, 9, 1), rec(52, 9, 2)], &[n(6), n(7), n(8)])
            .unwrap();
        // Query Q1 Q2 Q3 -> nodes 9, 10, 11; Q2 matches {3, 7}.
        let q = append_query(&mut m, &query_records(100, 3, 1), 1, 1.0).unwrap();
        let sets = MatchSets(vec![vec![], vec![n(3), n(7)], vec![]]);
        assert_eq!(cull(&mut m, &q, &sets).unwrap(), 1);
        assert!(!m.graph.contains(n(10)));
        for old in [n(3), n(7)] {
            assert!(m.graph.has_edge(old, n(9)));
            assert!(m.graph.has_edge(old, n(11)));
        }
        assert_eq!(m.corpus.node_of(ImageId(101)), Some(n(3)));
        assert_eq!(m.graph.component_count(), 1);
        m.audit().unwrap();

        let merged = combine(&mut m, &sets);
        assert_eq!(merged, 1);
        assert_eq!(m.node_count(), 9);
        m.audit().unwrap();
    }

    #[test]
    fn cull_rejects_bad_history() {
        let mut m = chain_map(3);
        let q = append_query(&mut m, &query_records(100, 2, 1), 1, 1.0).unwrap();
        let short = MatchSets(vec![vec![]]);
        assert!(matches!(
            cull(&mut m, &q, &short),
            Err(CompressionError::InconsistentBeliefHistory(_))
        ));
        let self_ref = MatchSets(vec![vec![q[1]], vec![]]);
        assert!(matches!(
            cull(&mut m, &q, &self_ref),
            Err(CompressionError::InconsistentBeliefHistory(_))
        ));
    }

    #[test]
    fn singleton_sets_do_not_merge() {
        let mut m = chain_map(6);
        let before = m.clone();
        assert_eq!(combine(&mut m, &MatchSets(vec![vec![n(2)], vec![n(3)]])), 0);
        assert_eq!(m, before);
    }

    #[test]
    fn adjacent_co_matches_are_skipped() {
        let mut m = chain_map(6);
        m.graph.set_edge(n(2), n(5), 0.1);
        assert_eq!(combine(&mut m, &MatchSets(vec![vec![n(2), n(5)]])), 0);
        assert_eq!(m.node_count(), 6);
    }

    #[test]
    fn chained_merges_resolve_through_union_find() {
        let mut m = chain_map(3);
        m.graph.append_chain(3, 1, 1.0).unwrap();
        m.graph.append_chain(3, 1, 1.0).unwrap();
        let recs: Vec<_> = (3..9).map(|i| rec(i, 0, i as u32)).collect();
        m.corpus.add_images(&recs, &(4..=9).map(n).collect::<Vec<_>>()).unwrap();
        // 4 absorbed into 1 first, then {4, 7} must resolve to {1, 7}.
        let sets = MatchSets(vec![vec![n(1), n(4)], vec![n(4), n(7)]]);
        assert_eq!(combine(&mut m, &sets), 2);
        assert_eq!(m.node_count(), 7);
        assert_eq!(m.graph.component_count(), 1);
        assert_eq!(m.corpus.image_count(), 9);
        m.audit().unwrap();
    }
}
