//! Recursive Bayes filtering over the places of the map.
//!
//! `p_t = eta * O_t * E^T * p_{t-1}`, evaluated by walking only the
//! non-zeros of the sparse transition matrix, so one step costs `O(rK)`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::annindex::KMeansTree;
use crate::embedding::GlobalDescriptor;
use crate::mapgraph::{Corpus, MapGraph, NodeId, TransitionMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("the index holds no descriptors")]
    EmptyTree,
    #[error("the map has no places")]
    EmptyMap,
    #[error("empty query sequence")]
    EmptyQuery,
    #[error("belief has {belief} entries, transition matrix {matrix}")]
    DimensionMismatch { belief: usize, matrix: usize },
    #[error("belief vanished before normalization")]
    DegenerateBelief,
    #[error("belief history of {frames} x {places} exceeds {limit} values")]
    HistoryTooLarge { frames: usize, places: usize, limit: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// Parameters of the observation model and the MaxAP decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterParams {
    pub beta: f64,
    pub sigma: f64,
    pub gamma: f64,
    /// Neighbours retrieved per query frame.
    pub neighbors: usize,
    /// Leaves scanned per retrieval.
    pub checks: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            beta: 2.5,
            sigma: 0.3,
            gamma: 0.3,
            neighbors: 10,
            checks: 64,
        }
    }
}

/// Probability mass over places at step `t`, aligned with the `ids` of the
/// transition matrix it was computed against.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub t: usize,
    pub probs: Vec<f64>,
}

impl Belief {
    /// Uniform belief `p_0` over `places` places.
    pub fn initial(places: usize) -> Result<Self, FilterError> {
        if places == 0 {
            return Err(FilterError::EmptyMap);
        }
        Ok(Self {
            t: 0,
            probs: vec![1.0 / places as f64; places],
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `P(Q_t | s_t = k)`: a floor everywhere plus sparse raised entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationLikelihood {
    pub floor: f64,
    pub overrides: BTreeMap<NodeId, f64>,
}

impl ObservationLikelihood {
    pub fn uniform(floor: f64) -> Self {
        Self {
            floor,
            overrides: BTreeMap::new(),
        }
    }

    pub fn get(&self, node: NodeId) -> f64 {
        self.overrides.get(&node).copied().unwrap_or(self.floor)
    }

    /// Raises `node` to `value` if that is larger than its current value.
    pub fn raise(&mut self, node: NodeId, value: f64) {
        if value > self.get(node) {
            self.overrides.insert(node, value);
        }
    }

    /// Dense vector aligned with `ids`.
    pub fn dense(&self, ids: &[NodeId]) -> Vec<f64> {
        let mut out = vec![self.floor; ids.len()];
        for (node, &v) in &self.overrides {
            if let Ok(i) = ids.binary_search(node) {
                out[i] = v;
            }
        }
        out
    }
}

/// Floor `e^{-beta/sigma}`, then for every retrieved neighbour image `I`
/// at distance `d` its place is raised to `max(current, e^{-d/sigma})`.
pub fn observation_likelihood(
    query: &GlobalDescriptor,
    tree: &KMeansTree,
    corpus: &Corpus,
    params: &FilterParams,
) -> Result<ObservationLikelihood, FilterError> {
    if tree.is_empty() {
        return Err(FilterError::EmptyTree);
    }
    if !(params.beta > 0.0 && params.sigma > 0.0) {
        return Err(FilterError::InvalidParam("beta and sigma must be positive".into()));
    }
    let mut obs = ObservationLikelihood::uniform((-params.beta / params.sigma).exp());
    let hits = tree.search(query.as_slice(), params.neighbors.max(1), params.checks);
    for (image, d) in hits.entries {
        if let Some(node) = corpus.node_of(image) {
            obs.raise(node, (-d / params.sigma).exp());
        }
    }
    Ok(obs)
}

/// One filtering step against a row-normalized transition matrix.
pub fn propagate(
    prior: &Belief,
    matrix: &TransitionMatrix,
    obs: &ObservationLikelihood,
) -> Result<Belief, FilterError> {
    if prior.len() != matrix.len() {
        return Err(FilterError::DimensionMismatch {
            belief: prior.len(),
            matrix: matrix.len(),
        });
    }
    let mut next = vec![0.0; matrix.len()];
    for (i, &p) in prior.probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (j, e) in matrix.row(i) {
            next[j] += e * p;
        }
    }
    let likelihood = obs.dense(&matrix.ids);
    let mut total = 0.0;
    for (b, l) in next.iter_mut().zip(&likelihood) {
        *b *= l;
        total += *b;
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(FilterError::DegenerateBelief);
    }
    for b in &mut next {
        *b /= total;
    }
    Ok(Belief {
        t: prior.t + 1,
        probs: next,
    })
}

/// The MaxAP estimate of one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaceMatch {
    pub node: NodeId,
    pub belief: f64,
    pub accepted: bool,
}

/// Highest-belief place (ties to the lowest id), accepted iff `>= gamma`.
pub fn max_ap(belief: &Belief, ids: &[NodeId], gamma: f64) -> PlaceMatch {
    let mut best = 0;
    for (i, &p) in belief.probs.iter().enumerate() {
        if p > belief.probs[best] {
            best = i;
        }
    }
    let value = belief.probs[best];
    PlaceMatch {
        node: ids[best],
        belief: value,
        accepted: value >= gamma,
    }
}

/// Upper bound on `frames * places` kept as belief history (1 GiB of f64).
pub const MAX_HISTORY_VALUES: usize = 1 << 27;

#[derive(Debug, Clone)]
pub struct Localization {
    /// Node ids the beliefs are indexed by.
    pub ids: Vec<NodeId>,
    pub matches: Vec<PlaceMatch>,
    pub beliefs: Vec<Belief>,
}

/// Filters a whole query sequence from the uniform prior, keeping every
/// posterior for the map update that follows.
pub fn localize_sequence(
    queries: &[GlobalDescriptor],
    graph: &MapGraph,
    corpus: &Corpus,
    tree: &KMeansTree,
    params: &FilterParams,
) -> Result<Localization, FilterError> {
    if queries.is_empty() {
        return Err(FilterError::EmptyQuery);
    }
    if graph.is_empty() {
        return Err(FilterError::EmptyMap);
    }
    let matrix = graph.transition_matrix();
    let places = matrix.len();
    if queries.len().saturating_mul(places) > MAX_HISTORY_VALUES {
        return Err(FilterError::HistoryTooLarge {
            frames: queries.len(),
            places,
            limit: MAX_HISTORY_VALUES,
        });
    }
    let mut belief = Belief::initial(places)?;
    let mut matches = Vec::with_capacity(queries.len());
    let mut beliefs = Vec::with_capacity(queries.len());
    for q in queries {
        let obs = observation_likelihood(q, tree, corpus, params)?;
        belief = propagate(&belief, &matrix, &obs)?;
        matches.push(max_ap(&belief, &matrix.ids, params.gamma));
        beliefs.push(belief.clone());
    }
    Ok(Localization {
        ids: matrix.ids,
        matches,
        beliefs,
    })
}
