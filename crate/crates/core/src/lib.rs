//! Sequential place recognition against a self-compressing topological map.
//!
//! A stream of image descriptors is localized with a discrete Bayes filter
//! (an HMM whose states are the places of the map). After each traversal
//! the map absorbs the new frames: frames recognised as known places are
//! culled into those places, places that a single frame matched together
//! are combined, and only genuinely new places survive as new nodes. The
//! transition matrix therefore tracks the size of the road network rather
//! than the size of the image collection.
//!
//! Module map:
//!
//! * [`embedding`] - VLAD aggregation, PCA rotation and power-law normalization.
//! * [`annindex`] - priority-search hierarchical k-means tree.
//! * [`mapgraph`] - places, transition weights and the image corpus.
//! * [`hmmfilter`] - belief propagation and MaxAP decisions.
//! * [`compression`] - append / cull / combine map update.
//! * [`simulator`] - synthetic road worlds with ground truth.
//! * [`engine`] and [`bundle`] - the init / ingest / query loop and its persistence.
//! * [`descfile`] - the binary descriptor container shared with external tools.

pub mod annindex;
pub mod bundle;
pub mod compression;
pub mod descfile;
pub mod embedding;
pub mod engine;
pub mod hmmfilter;
pub mod kmeans;
pub mod mapgraph;
pub mod simulator;
pub mod vecmath;

mod error;

pub use annindex::{KMeansTree, NeighborList, TreeParams};
pub use compression::{UpdateMode, UpdateReport};
pub use embedding::{Codebook, GlobalDescriptor, LocalFeatureSet, RotationModel};
pub use engine::{Engine, EngineParams, Frame, FrameMeta};
pub use error::{Error, Result};
pub use hmmfilter::{Belief, ObservationLikelihood, PlaceMatch};
pub use mapgraph::{Corpus, ImageId, ImageRecord, MapGraph, NodeId, PlaceMap};
