//! Synthetic road worlds with ground truth.
//!
//! Each place has a latent unit descriptor. A traversal emits, per frame,
//! `normalize(latent + condition offset + noise)`, where each condition
//! has its own offset per place. When `condition_dims > 0` latents live in
//! the leading coordinates and offsets in the trailing ones, so a blended
//! condition is equidistant from the two it blends.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbedError, GlobalDescriptor, LocalFeatureSet};
use crate::hmmfilter::PlaceMatch;
use crate::mapgraph::NodeId;
use crate::vecmath::{normalize_in_place, sq_dist};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("could not place {placed}/{wanted} latents with separation {separation}")]
    SeparationInfeasible {
        placed: usize,
        wanted: usize,
        separation: f64,
    },
    #[error("invalid route: {0}")]
    InvalidRoute(String),
    #[error("{matches} matches for {truth} ground-truth frames")]
    LengthMismatch { matches: usize, truth: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Topology {
    Chain,
    Loop,
    /// Row-major grid with `cols` columns; `places` must be a multiple.
    Grid {
        cols: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub places: usize,
    pub topology: Topology,
    /// Descriptor dimension.
    pub dim: usize,
    /// Trailing coordinates reserved for condition offsets.
    pub condition_dims: usize,
    /// Minimum pairwise distance between latents.
    pub separation: f64,
    pub seed: u64,
}

impl WorldConfig {
    pub fn new(places: usize, topology: Topology, seed: u64) -> Self {
        Self {
            places,
            topology,
            dim: 64,
            condition_dims: 16,
            separation: 0.5,
            seed,
        }
    }
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self::new(100, Topology::Chain, 0)
    }
}

const MAX_DRAWS_PER_PLACE: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub adjacency: Vec<Vec<usize>>,
    pub latents: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Builds a deterministic world; latents are rejection-sampled on the unit
/// sphere of the place subspace until they are `separation` apart.
pub fn generate_world(config: WorldConfig) -> Result<SyntheticWorld, SimError> {
    let n = config.places;
    if n < 2 {
        return Err(SimError::InvalidParam("a world needs at least two places".into()));
    }
    if config.condition_dims >= config.dim {
        return Err(SimError::InvalidParam(
            "condition_dims must leave room for place latents".into(),
        ));
    }
    let mut adjacency = vec![Vec::new(); n];
    let mut link = |a: usize, b: usize| {
        adjacency[a].push(b);
        adjacency[b].push(a);
    };
    match config.topology {
        Topology::Chain => (1..n).for_each(|i| link(i - 1, i)),
        Topology::Loop => {
            if n < 3 {
                return Err(SimError::InvalidParam("a loop needs at least three places".into()));
            }
            (0..n).for_each(|i| link(i, (i + 1) % n));
        }
        Topology::Grid { cols } => {
            if cols == 0 || !n.is_multiple_of(cols) {
                return Err(SimError::InvalidParam(format!("{n} places do not fill rows of {cols}")));
            }
            for i in 0..n {
                if (i + 1) % cols != 0 {
                    link(i, i + 1);
                }
                if i + cols < n {
                    link(i, i + cols);
                }
            }
        }
    }
    for row in &mut adjacency {
        row.sort_unstable();
    }

    let place_dims = config.dim - config.condition_dims;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sep2 = config.separation * config.separation;
    let mut latents: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut accepted = None;
        for _ in 0..MAX_DRAWS_PER_PLACE {
            let mut v = gaussian_vec(&mut rng, place_dims);
            normalize_in_place(&mut v);
            v.resize(config.dim, 0.0);
            if latents.iter().all(|l| sq_dist(l, &v) >= sep2) {
                accepted = Some(v);
                break;
            }
        }
        match accepted {
            Some(v) => latents.push(v),
            None => {
                return Err(SimError::SeparationInfeasible {
                    placed: latents.len(),
                    wanted: n,
                    separation: config.separation,
                })
            }
        }
    }
    Ok(SyntheticWorld {
        config,
        adjacency,
        latents,
    })
}

impl SyntheticWorld {
    pub fn places(&self) -> usize {
        self.latents.len()
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn are_adjacent(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    /// Hop distances from `from` to every place (`usize::MAX` if unreachable).
    pub fn hops_from(&self, from: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.places()];
        dist[from] = 0;
        let mut queue = VecDeque::from([from]);
        while let Some(p) = queue.pop_front() {
            for &q in &self.adjacency[p] {
                if dist[q] == usize::MAX {
                    dist[q] = dist[p] + 1;
                    queue.push_back(q);
                }
            }
        }
        dist
    }

    /// `len` consecutive places starting at `start`, wrapping on loops.
    pub fn span(&self, start: usize, len: usize) -> Result<Vec<usize>, SimError> {
        let n = self.places();
        let route: Vec<usize> = match self.config.topology {
            Topology::Loop => (0..len).map(|i| (start + i) % n).collect(),
            Topology::Chain => (start..start + len).collect(),
            Topology::Grid { cols } => {
                // Boustrophedon sweep so consecutive cells stay adjacent.
                let order: Vec<usize> = (0..n / cols)
                    .flat_map(|r| {
                        let row: Vec<usize> = (0..cols).map(|c| r * cols + c).collect();
                        if r % 2 == 0 {
                            row
                        } else {
                            row.into_iter().rev().collect()
                        }
                    })
                    .collect();
                (start..start + len)
                    .map(|i| order.get(i).copied().unwrap_or(usize::MAX))
                    .collect()
            }
        };
        self.validate_route(&route)?;
        Ok(route)
    }

    /// Random walk of `len` places from `start` that never stays in place.
    pub fn random_walk(&self, start: usize, len: usize, seed: u64) -> Result<Vec<usize>, SimError> {
        if start >= self.places() {
            return Err(SimError::InvalidRoute(format!("start place {start} out of range")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut route = Vec::with_capacity(len);
        let mut at = start;
        for i in 0..len {
            if i > 0 {
                let next = &self.adjacency[at];
                at = next[rng.random_range(0..next.len())];
            }
            route.push(at);
        }
        Ok(route)
    }

    pub fn validate_route(&self, route: &[usize]) -> Result<(), SimError> {
        if route.is_empty() {
            return Err(SimError::InvalidRoute("empty route".into()));
        }
        if let Some(&bad) = route.iter().find(|&&p| p >= self.places()) {
            return Err(SimError::InvalidRoute(format!("place {bad} out of range")));
        }
        for w in route.windows(2) {
            if w[0] != w[1] && !self.are_adjacent(w[0], w[1]) {
                return Err(SimError::InvalidRoute(format!(
                    "{} and {} are not adjacent",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    /// A condition that shifts every place by its own offset of norm
    /// `magnitude`, drawn in the condition subspace (or the full space when
    /// none is reserved).
    pub fn condition(&self, id: u32, magnitude: f64, noise: f64, seed: u64) -> Condition {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cdims = self.config.condition_dims;
        let base = if cdims > 0 { self.dim() - cdims } else { 0 };
        let offsets = (0..self.places())
            .map(|_| {
                let mut dir = gaussian_vec(&mut rng, self.dim() - base);
                normalize_in_place(&mut dir);
                let mut offset = vec![0.0; self.dim()];
                for (o, d) in offset[base..].iter_mut().zip(&dir) {
                    *o = d * magnitude;
                }
                offset
            })
            .collect();
        Condition { id, offsets, noise }
    }
}

/// Appearance condition: an additive per-place offset plus isotropic
/// emission noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub id: u32,
    /// `offsets[p]` shifts every observation of place `p`.
    pub offsets: Vec<Vec<f64>>,
    /// Per-coordinate standard deviation of the emission noise.
    pub noise: f64,
}

impl Condition {
    /// No offset.
    pub fn clear(id: u32, world: &SyntheticWorld, noise: f64) -> Self {
        Self {
            id,
            offsets: vec![vec![0.0; world.dim()]; world.places()],
            noise,
        }
    }

    /// Per-place midpoint of two conditions. Offsets of equal norm make the
    /// blend equidistant from both.
    pub fn blend(id: u32, a: &Condition, b: &Condition, noise: f64) -> Self {
        Self {
            id,
            offsets: a
                .offsets
                .iter()
                .zip(&b.offsets)
                .map(|(x, y)| x.iter().zip(y).map(|(p, q)| 0.5 * (p + q)).collect())
                .collect(),
            noise,
        }
    }

    /// Same condition with a small extra offset per place; for "near a
    /// mapped condition" queries.
    pub fn perturbed(&self, id: u32, magnitude: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offsets = self
            .offsets
            .iter()
            .map(|o| {
                let mut dir = gaussian_vec(&mut rng, o.len());
                normalize_in_place(&mut dir);
                o.iter().zip(&dir).map(|(x, d)| x + magnitude * d).collect()
            })
            .collect();
        Self {
            id,
            offsets,
            noise: self.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Traversal {
    pub places: Vec<usize>,
    pub descriptors: Vec<GlobalDescriptor>,
    pub condition: u32,
    pub noise: f64,
}

impl Traversal {
    pub fn len(&self) -> usize {
        self.places.len()
    }

    pub fn is_empty(&self) -> bool {
        self.places.is_empty()
    }
}

pub fn generate_traversal(
    world: &SyntheticWorld,
    route: &[usize],
    condition: &Condition,
    seed: u64,
) -> Result<Traversal, SimError> {
    world.validate_route(route)?;
    if condition.offsets.len() != world.places() || condition.offsets.iter().any(|o| o.len() != world.dim()) {
        return Err(SimError::InvalidParam(
            "condition offsets do not match the world's places and dimension".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut descriptors = Vec::with_capacity(route.len());
    for &p in route {
        let v: Vec<f64> = world.latents[p]
            .iter()
            .zip(&condition.offsets[p])
            .map(|(l, o)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                l + o + condition.noise * z
            })
            .collect();
        descriptors.push(GlobalDescriptor::new(v)?);
    }
    Ok(Traversal {
        places: route.to_vec(),
        descriptors,
        condition: condition.id,
        noise: condition.noise,
    })
}

/// Local-feature emission: each place shows `features_per_image` words
/// drawn from a shared vocabulary of `vocabulary` prototypes in
/// `feature_dim` dimensions, and frames jitter them by `noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureModel {
    pub prototypes: Vec<Vec<f64>>,
    pub place_words: Vec<Vec<usize>>,
}

impl LocalFeatureModel {
    pub fn new(
        world: &SyntheticWorld,
        vocabulary: usize,
        feature_dim: usize,
        features_per_image: usize,
        seed: u64,
    ) -> Result<Self, SimError> {
        if vocabulary == 0 || feature_dim == 0 || features_per_image == 0 {
            return Err(SimError::InvalidParam(
                "local-feature model sizes must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prototypes = (0..vocabulary).map(|_| gaussian_vec(&mut rng, feature_dim)).collect();
        let place_words = (0..world.places())
            .map(|_| {
                (0..features_per_image)
                    .map(|_| rng.random_range(0..vocabulary))
                    .collect()
            })
            .collect();
        Ok(Self {
            prototypes,
            place_words,
        })
    }

    pub fn emit(&self, route: &[usize], noise: f64, seed: u64) -> Result<Vec<LocalFeatureSet>, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        route
            .iter()
            .map(|&p| {
                let words = self
                    .place_words
                    .get(p)
                    .ok_or_else(|| SimError::InvalidRoute(format!("place {p} out of range")))?;
                let feats = words
                    .iter()
                    .map(|&w| {
                        self.prototypes[w]
                            .iter()
                            .map(|x| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                x + noise * z
                            })
                            .collect()
                    })
                    .collect();
                Ok(LocalFeatureSet::new(feats)?)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameEval {
    pub truth: usize,
    pub estimate: Option<usize>,
    pub accepted: bool,
    /// Hops between estimate and truth, if the estimate maps to a place.
    pub hops: Option<usize>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Fraction of accepted frames within `tolerance` hops; 1.0 when no
    /// frame was accepted (see `support`).
    pub accuracy: f64,
    pub acceptance_rate: f64,
    /// Accepted frames the accuracy is computed over.
    pub support: usize,
    /// Mean hop error over accepted frames.
    pub mean_lag: f64,
    pub frames: Vec<FrameEval>,
}

/// Scores MaxAP decisions against ground truth. `node_truth` maps a map
/// node to the world place it represents.
pub fn evaluate(
    matches: &[PlaceMatch],
    truth: &[usize],
    node_truth: impl Fn(NodeId) -> Option<usize>,
    world: &SyntheticWorld,
    tolerance: usize,
) -> Result<EvalReport, SimError> {
    if matches.len() != truth.len() {
        return Err(SimError::LengthMismatch {
            matches: matches.len(),
            truth: truth.len(),
        });
    }
    let mut frames = Vec::with_capacity(matches.len());
    let (mut accepted, mut correct, mut hop_sum) = (0usize, 0usize, 0usize);
    for (m, &t) in matches.iter().zip(truth) {
        let estimate = node_truth(m.node);
        let hops = estimate.and_then(|e| {
            let d = world.hops_from(t)[e];
            (d != usize::MAX).then_some(d)
        });
        let ok = m.accepted && hops.is_some_and(|h| h <= tolerance);
        if m.accepted {
            accepted += 1;
            hop_sum += hops.unwrap_or(world.places());
        }
        if ok {
            correct += 1;
        }
        frames.push(FrameEval {
            truth: t,
            estimate,
            accepted: m.accepted,
            hops,
            correct: ok,
        });
    }
    let n = matches.len().max(1) as f64;
    Ok(EvalReport {
        accuracy: if accepted == 0 {
            1.0
        } else {
            correct as f64 / accepted as f64
        },
        acceptance_rate: accepted as f64 / n,
        support: accepted,
        mean_lag: if accepted == 0 {
            0.0
        } else {
            hop_sum as f64 / accepted as f64
        },
        frames,
    })
}

/// How a scenario condition is derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub id: u32,
    /// Norm of the per-place offset; 0 is a clear condition.
    #[serde(default)]
    pub magnitude: f64,
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    /// Ids of two earlier conditions to average instead of drawing offsets.
    #[serde(default)]
    pub blend: Option<[u32; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum RouteSpec {
    Span { start: usize, len: usize },
    Walk { start: usize, len: usize, seed: u64 },
    Places { places: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraversalSpec {
    pub name: String,
    pub condition: u32,
    pub route: RouteSpec,
    #[serde(default)]
    pub seed: u64,
}

/// Settings for emitting local-feature sets instead of global descriptors.
/// Local features ignore the traversal's condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalSpec {
    pub vocabulary: usize,
    pub feature_dim: usize,
    pub features_per_image: usize,
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

/// A world, its conditions and the traversals to record over it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub world: WorldConfig,
    pub conditions: Vec<ConditionSpec>,
    pub traversals: Vec<TraversalSpec>,
    #[serde(default)]
    pub local: Option<LocalSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Recording {
    Global(Vec<GlobalDescriptor>),
    Local(Vec<LocalFeatureSet>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTraversal {
    pub name: String,
    pub places: Vec<usize>,
    pub recording: Recording,
}

impl Scenario {
    pub fn build_world(&self) -> Result<SyntheticWorld, SimError> {
        generate_world(self.world.clone())
    }

    pub fn conditions(&self, world: &SyntheticWorld) -> Result<Vec<Condition>, SimError> {
        let mut built: Vec<Condition> = Vec::with_capacity(self.conditions.len());
        for spec in &self.conditions {
            if built.iter().any(|c| c.id == spec.id) {
                return Err(SimError::InvalidParam(format!("condition {} defined twice", spec.id)));
            }
            let c = match spec.blend {
                Some([a, b]) => {
                    let find = |id: u32| {
                        built
                            .iter()
                            .find(|c| c.id == id)
                            .ok_or_else(|| SimError::InvalidParam(format!("blend refers to undefined condition {id}")))
                    };
                    Condition::blend(spec.id, find(a)?, find(b)?, spec.noise)
                }
                None if spec.magnitude == 0.0 => Condition::clear(spec.id, world, spec.noise),
                None => world.condition(spec.id, spec.magnitude, spec.noise, spec.seed),
            };
            built.push(c);
        }
        Ok(built)
    }

    /// Generates every traversal in file order.
    pub fn run(&self) -> Result<(SyntheticWorld, Vec<NamedTraversal>), SimError> {
        let world = self.build_world()?;
        let conditions = self.conditions(&world)?;
        let local = self
            .local
            .map(|l| {
                LocalFeatureModel::new(&world, l.vocabulary, l.feature_dim, l.features_per_image, l.seed)
                    .map(|m| (m, l))
            })
            .transpose()?;
        let mut out = Vec::with_capacity(self.traversals.len());
        for t in &self.traversals {
            let places = match &t.route {
                RouteSpec::Span { start, len } => world.span(*start, *len)?,
                RouteSpec::Walk { start, len, seed } => world.random_walk(*start, *len, *seed)?,
                RouteSpec::Places { places } => {
                    world.validate_route(places)?;
                    places.clone()
                }
            };
            let recording = match &local {
                Some((model, spec)) => Recording::Local(model.emit(&places, spec.noise, t.seed)?),
                None => {
                    let cond = conditions.iter().find(|c| c.id == t.condition).ok_or_else(|| {
                        SimError::InvalidParam(format!("traversal {} uses undefined condition {}", t.name, t.condition))
                    })?;
                    Recording::Global(generate_traversal(&world, &places, cond, t.seed)?.descriptors)
                }
            };
            out.push(NamedTraversal {
                name: t.name.clone(),
                places,
                recording,
            });
        }
        Ok((world, out))
    }
}
