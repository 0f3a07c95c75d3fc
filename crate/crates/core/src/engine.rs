//! The init / query / ingest loop over a map, its index and (optionally)
//! the embedding model that turns local features into descriptors.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::annindex::{KMeansTree, TreeParams};
use crate::compression::{update_map, UpdateMode, UpdateParams, UpdateReport};
use crate::embedding::{EmbeddingModel, GlobalDescriptor, LocalFeatureSet};
use crate::error::{Error, Result};
use crate::hmmfilter::{localize_sequence, FilterParams, Localization};
use crate::mapgraph::{GraphError, ImageId, ImageRecord, MapGraph, PlaceMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineParams {
    /// Temporal window `W` of the chain edges.
    pub window: usize,
    pub delta: f64,
    pub beta: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub alpha: f64,
    /// Target descriptor dimension `D'` after rotation.
    pub target_dim: usize,
    /// Neighbours `L` retrieved per frame.
    pub neighbors: usize,
    pub branching: usize,
    pub checks: usize,
    pub leaf_capacity: usize,
    pub codebook_size: usize,
    pub seed: u64,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            window: 5,
            delta: 2.5,
            beta: 2.5,
            sigma: 0.3,
            gamma: 0.3,
            alpha: 0.5,
            target_dim: 4096,
            neighbors: 10,
            branching: 16,
            checks: 64,
            leaf_capacity: 64,
            codebook_size: 64,
            seed: 0,
        }
    }
}

impl EngineParams {
    pub fn validate(&self) -> Result<()> {
        let positive_ints = [
            ("window", self.window),
            ("target_dim", self.target_dim),
            ("neighbors", self.neighbors),
            ("checks", self.checks),
            ("leaf_capacity", self.leaf_capacity),
            ("codebook_size", self.codebook_size),
        ];
        for (name, v) in positive_ints {
            if v == 0 {
                return Err(Error::InvalidParam(format!("{name} must be positive")));
            }
        }
        if self.branching < 2 {
            return Err(Error::InvalidParam("branching must be >= 2".into()));
        }
        for (name, v) in [
            ("delta", self.delta),
            ("beta", self.beta),
            ("sigma", self.sigma),
            ("alpha", self.alpha),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParam(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidParam("gamma must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn filter(&self) -> FilterParams {
        FilterParams {
            beta: self.beta,
            sigma: self.sigma,
            gamma: self.gamma,
            neighbors: self.neighbors,
            checks: self.checks,
        }
    }

    pub fn update(&self) -> UpdateParams {
        UpdateParams {
            window: self.window,
            delta: self.delta,
            gamma: self.gamma,
        }
    }

    pub fn tree(&self) -> TreeParams {
        TreeParams {
            branching: self.branching,
            leaf_capacity: self.leaf_capacity,
            seed: self.seed,
            ..TreeParams::default()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub timestamp: Option<f64>,
    pub label: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub descriptor: GlobalDescriptor,
    pub meta: FrameMeta,
}

impl Frame {
    pub fn new(descriptor: GlobalDescriptor) -> Self {
        Self {
            descriptor,
            meta: FrameMeta::default(),
        }
    }

    pub fn labelled(descriptor: GlobalDescriptor, label: u64) -> Self {
        Self {
            descriptor,
            meta: FrameMeta {
                timestamp: None,
                label: Some(label),
            },
        }
    }
}

/// Structural counts surfaced by `stats`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineStats {
    pub places: usize,
    pub edges: usize,
    pub max_row_nonzeros: usize,
    pub images: usize,
    pub components: usize,
    pub tree_depth: usize,
    pub tree_leaves: usize,
    pub dim: usize,
    pub videos: u32,
}

impl fmt::Display for EngineStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "places={}", self.places)?;
        writeln!(f, "edges={}", self.edges)?;
        writeln!(f, "max_row_nonzeros={}", self.max_row_nonzeros)?;
        writeln!(f, "images={}", self.images)?;
        writeln!(f, "components={}", self.components)?;
        writeln!(f, "tree_depth={}", self.tree_depth)?;
        writeln!(f, "tree_leaves={}", self.tree_leaves)?;
        writeln!(f, "dim={}", self.dim)?;
        write!(f, "videos={}", self.videos)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Engine {
    pub(crate) params: EngineParams,
    pub(crate) map: PlaceMap,
    pub(crate) tree: KMeansTree,
    pub(crate) embedding: Option<EmbeddingModel>,
    pub(crate) next_image: u64,
    pub(crate) next_video: u32,
    pub(crate) history: Vec<UpdateReport>,
}

impl Engine {
    /// Builds the chain map of the first traversal and indexes its frames.
    pub fn init(frames: &[Frame], params: EngineParams) -> Result<Self> {
        params.validate()?;
        if frames.is_empty() {
            return Err(Error::InvalidParam("initialization needs at least one frame".into()));
        }
        let dim = frames[0].descriptor.dim();
        if let Some(f) = frames.iter().find(|f| f.descriptor.dim() != dim) {
            return Err(Error::InvalidParam(format!(
                "descriptor dimension {} differs from {dim}",
                f.descriptor.dim()
            )));
        }
        let records = records_for(frames, 0, 0);
        let mut map = PlaceMap::new();
        map.graph = MapGraph::init_chain(frames.len(), params.window, params.delta)?;
        let nodes: Vec<_> = map.graph.nodes().collect();
        map.corpus.add_images(&records, &nodes)?;
        let pairs: Vec<(ImageId, &[f64])> = records
            .iter()
            .zip(frames)
            .map(|(r, f)| (r.id, f.descriptor.as_slice()))
            .collect();
        let tree = KMeansTree::build(&pairs, params.tree())?;
        Ok(Self {
            params,
            map,
            tree,
            embedding: None,
            next_image: frames.len() as u64,
            next_video: 1,
            history: Vec::new(),
        })
    }

    /// Trains the embedding on the first traversal's local features, then
    /// initializes from the resulting descriptors.
    pub fn init_from_local(sets: &[LocalFeatureSet], params: EngineParams) -> Result<Self> {
        Self::init_from_local_with(sets, &[], params)
    }

    /// As [`Engine::init_from_local`], with `meta[i]` attached to frame `i`
    /// (frames past the end of `meta` get none).
    pub fn init_from_local_with(sets: &[LocalFeatureSet], meta: &[FrameMeta], params: EngineParams) -> Result<Self> {
        params.validate()?;
        if meta.len() > sets.len() {
            return Err(Error::InvalidParam(format!(
                "{} metadata entries for {} frames",
                meta.len(),
                sets.len()
            )));
        }
        let model = EmbeddingModel::fit(sets, params.codebook_size, params.target_dim, params.alpha, params.seed)?;
        let frames = sets
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(Frame {
                    descriptor: model.embed(s)?,
                    meta: meta.get(i).copied().unwrap_or_default(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut engine = Self::init(&frames, params)?;
        engine.embedding = Some(model);
        Ok(engine)
    }

    pub fn embed(&self, sets: &[LocalFeatureSet]) -> Result<Vec<GlobalDescriptor>> {
        let model = self
            .embedding
            .as_ref()
            .ok_or_else(|| Error::InvalidParam("map was initialized without an embedding model".into()))?;
        sets.iter().map(|s| Ok(model.embed(s)?)).collect()
    }

    /// Read-only localization of a sequence against the current map.
    pub fn query(&self, descriptors: &[GlobalDescriptor]) -> Result<Localization> {
        self.check_dims(descriptors.iter())?;
        Ok(localize_sequence(
            descriptors,
            &self.map.graph,
            &self.map.corpus,
            &self.tree,
            &self.params.filter(),
        )?)
    }

    /// Localizes a new traversal, then folds it into the map.
    pub fn ingest(&mut self, frames: &[Frame], mode: UpdateMode) -> Result<(Localization, UpdateReport)> {
        let descriptors: Vec<GlobalDescriptor> = frames.iter().map(|f| f.descriptor.clone()).collect();
        let loc = self.query(&descriptors)?;
        let report = self.apply(frames, &loc, mode)?;
        Ok((loc, report))
    }

    /// Folds a traversal into the map given its localization against the
    /// current map (as returned by [`Engine::query`]).
    pub fn apply(&mut self, frames: &[Frame], loc: &Localization, mode: UpdateMode) -> Result<UpdateReport> {
        self.check_dims(frames.iter().map(|f| &f.descriptor))?;
        let descriptors = frames.iter().map(|f| f.descriptor.clone());
        let records = records_for(frames, self.next_image, self.next_video);
        let pairs: Vec<(ImageRecord, GlobalDescriptor)> = records.into_iter().zip(descriptors).collect();
        let report = update_map(&mut self.map, &mut self.tree, &pairs, loc, &self.params.update(), mode)?;
        self.next_image += frames.len() as u64;
        self.next_video += 1;
        self.history.push(report.clone());
        Ok(report)
    }

    fn check_dims<'a>(&self, mut descriptors: impl Iterator<Item = &'a GlobalDescriptor>) -> Result<()> {
        let dim = self.tree.dim();
        match descriptors.find(|d| d.dim() != dim) {
            Some(d) => Err(Error::InvalidParam(format!(
                "descriptor dimension {} differs from map dimension {dim}",
                d.dim()
            ))),
            None => Ok(()),
        }
    }

    /// Graph and corpus audits plus corpus/index agreement.
    pub fn audit(&self) -> std::result::Result<(), GraphError> {
        self.map.audit()?;
        if self.tree.len() != self.map.corpus.image_count() {
            return Err(GraphError::Audit(format!(
                "index holds {} images, corpus {}",
                self.tree.len(),
                self.map.corpus.image_count()
            )));
        }
        if let Some(r) = self.map.corpus.records().find(|r| !self.tree.contains(r.id)) {
            return Err(GraphError::Audit(format!("image {} missing from the index", r.id)));
        }
        if let Some(r) = self.map.corpus.records().find(|r| r.id.0 >= self.next_image) {
            return Err(GraphError::Audit(format!("image {} beyond the id counter", r.id)));
        }
        Ok(())
    }

    pub fn stats(&self) -> EngineStats {
        EngineStats {
            places: self.map.node_count(),
            edges: self.map.graph.edge_count(),
            max_row_nonzeros: self.map.graph.max_row_nonzeros(),
            images: self.map.corpus.image_count(),
            components: self.map.graph.component_count(),
            tree_depth: self.tree.depth(),
            tree_leaves: self.tree.leaf_count(),
            dim: self.tree.dim(),
            videos: self.next_video,
        }
    }

    pub fn params(&self) -> &EngineParams {
        &self.params
    }

    pub fn map(&self) -> &PlaceMap {
        &self.map
    }

    pub fn tree(&self) -> &KMeansTree {
        &self.tree
    }

    pub fn embedding(&self) -> Option<&EmbeddingModel> {
        self.embedding.as_ref()
    }

    pub fn history(&self) -> &[UpdateReport] {
        &self.history
    }

    /// Id the next ingested video will receive; video 0 built the map.
    pub fn next_video(&self) -> u32 {
        self.next_video
    }
}

fn records_for(frames: &[Frame], first_id: u64, video: u32) -> Vec<ImageRecord> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| ImageRecord {
            id: ImageId(first_id + i as u64),
            video,
            frame: i as u32,
            timestamp: f.meta.timestamp,
            label: f.meta.label,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate_traversal, generate_world, Condition, Topology, WorldConfig};

    fn frames(world_places: usize, seed: u64) -> (Vec<Frame>, Vec<Frame>) {
        let world = generate_world(WorldConfig::new(world_places, Topology::Chain, seed)).unwrap();
        let route = world.span(0, world_places).unwrap();
        let cond = Condition::clear(0, &world, 0.01);
        let a = generate_traversal(&world, &route, &cond, 1).unwrap();
        let b = generate_traversal(&world, &route, &cond, 2).unwrap();
        let wrap = |t: crate::simulator::Traversal| t.descriptors.into_iter().map(Frame::new).collect();
        (wrap(a), wrap(b))
    }

    #[test]
    fn params_validation() {
        EngineParams::default().validate().unwrap();
        let bad = EngineParams {
            gamma: 1.5,
            ..EngineParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = EngineParams {
            window: 0,
            ..EngineParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = EngineParams {
            sigma: 0.0,
            ..EngineParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_single_frame_is_self_loop() {
        let (a, _) = frames(3, 1);
        let e = Engine::init(&a[..1], EngineParams::default()).unwrap();
        assert_eq!(e.map().node_count(), 1);
        assert_eq!(e.map().graph.edge_count(), 1);
        assert_eq!(e.stats().max_row_nonzeros, 1);
        e.audit().unwrap();
        assert!(Engine::init(&[], EngineParams::default()).is_err());
    }

    #[test]
    fn replay_ingest_culls_and_keeps_size() {
        let (a, b) = frames(60, 3);
        let mut e = Engine::init(&a, EngineParams::default()).unwrap();
        let (loc, report) = e.ingest(&b, UpdateMode::Compress).unwrap();
        assert_eq!(loc.matches.len(), 60);
        assert!(report.culled >= 50, "{report}");
        assert!(e.map().node_count() <= 66, "{report}");
        e.audit().unwrap();
        assert_eq!(e.map().corpus.image_count(), 120);
        assert_eq!(e.history().len(), 1);
    }

    #[test]
    fn append_only_grows_by_every_frame() {
        let (a, b) = frames(20, 4);
        let mut e = Engine::init(&a, EngineParams::default()).unwrap();
        let (_, report) = e.ingest(&b, UpdateMode::AppendOnly).unwrap();
        assert_eq!(report.new_places, 20);
        assert_eq!(e.map().node_count(), 40);
        e.audit().unwrap();
    }

    #[test]
    fn query_does_not_mutate() {
        let (a, b) = frames(15, 5);
        let e = Engine::init(&a, EngineParams::default()).unwrap();
        let before = e.clone();
        let d: Vec<_> = b.iter().map(|f| f.descriptor.clone()).collect();
        e.query(&d).unwrap();
        assert_eq!(e, before);
        assert!(e.query(&[]).is_err());
    }
}
