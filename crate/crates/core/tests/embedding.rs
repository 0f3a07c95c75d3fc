mod common;

use placemap::embedding::{build_codebook, fit_rotation, EmbeddingModel, LocalFeatureSet};
use placemap::engine::{Engine, EngineParams};
use placemap::kmeans::{kmeans, KMeansConfig};
use placemap::simulator::{generate_world, LocalFeatureModel, Topology, WorldConfig};
use placemap::vecmath::{dist, sq_dist};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const MEANS: [[f64; 2]; 4] = [[0.0, 0.0], [20.0, 0.0], [0.0, 20.0], [20.0, 20.0]];
const SIGMA: f64 = 1.0;

fn four_gaussians() -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = Normal::new(0.0, SIGMA).unwrap();
    (0..1000)
        .map(|i| {
            let m = MEANS[i % 4];
            vec![m[0] + noise.sample(&mut rng), m[1] + noise.sample(&mut rng)]
        })
        .collect()
}

/// Best of 50 independently seeded runs by inertia.
fn best_of_restarts(points: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    (0..50)
        .map(|s| kmeans(points, &KMeansConfig::new(k, 1000 + s)))
        .min_by(|a, b| a.inertia(points).total_cmp(&b.inertia(points)))
        .unwrap()
        .centroids
}

#[test]
fn codebook_recovers_gaussian_means() {
    let points = four_gaussians();
    let codebook = build_codebook(&points, 4, 9).unwrap();
    let oracle = best_of_restarts(&points, 4);
    let mut used = [false; 4];
    for c in codebook.centroids() {
        let (i, d) = MEANS
            .iter()
            .enumerate()
            .map(|(i, m)| (i, dist(c, m)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert!(d <= 3.0 * SIGMA, "centroid {c:?} is {d} from its mean");
        assert!(!used[i], "two centroids on one mean");
        used[i] = true;
        // The single seeded run agrees with the restart oracle.
        let nearest_oracle = oracle.iter().map(|o| sq_dist(c, o)).fold(f64::INFINITY, f64::min);
        assert!(nearest_oracle < 1e-6);
    }
}

#[test]
fn rotation_is_deterministic_and_orthonormal() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let vectors: Vec<Vec<f64>> = (0..40)
        .map(|_| (0..12).map(|j| noise.sample(&mut rng) * (j + 1) as f64).collect())
        .collect();
    let a = fit_rotation(&vectors, 8).unwrap();
    let b = fit_rotation(&vectors, 8).unwrap();
    assert_eq!(a, b);
    let dirs = a.directions();
    for i in 0..dirs.len() {
        for j in 0..dirs.len() {
            let d: f64 = dirs[i].iter().zip(&dirs[j]).map(|(x, y)| x * y).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((d - want).abs() < 1e-9);
        }
    }
    assert!(a.variances().windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn embedding_model_is_deterministic() {
    let w = generate_world(WorldConfig::new(30, Topology::Chain, 2)).unwrap();
    let model = LocalFeatureModel::new(&w, 40, 8, 25, 3).unwrap();
    let route = w.span(0, 30).unwrap();
    let sets = model.emit(&route, 0.05, 4).unwrap();
    let a = EmbeddingModel::fit(&sets, 16, 4096, 0.5, 7).unwrap();
    let b = EmbeddingModel::fit(&sets, 16, 4096, 0.5, 7).unwrap();
    assert_eq!(a, b);
    // D' clamps to the number of training images here.
    assert_eq!(a.output_dim(), 30);
    for s in &sets {
        let g = a.embed(s).unwrap();
        let n: f64 = g.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
}

#[test]
fn local_feature_pipeline_localizes_replay() {
    let w = generate_world(WorldConfig::new(60, Topology::Chain, 5)).unwrap();
    let model = LocalFeatureModel::new(&w, 64, 8, 30, 6).unwrap();
    let route = w.span(0, 60).unwrap();
    let first = model.emit(&route, 0.05, 7).unwrap();
    let replay = model.emit(&route, 0.05, 8).unwrap();
    let params = EngineParams {
        codebook_size: 32,
        ..EngineParams::default()
    };
    let engine = Engine::init_from_local(&first, params).unwrap();
    let descriptors = engine.embed(&replay).unwrap();
    let loc = engine.query(&descriptors).unwrap();
    let accepted: Vec<_> = loc.matches.iter().enumerate().filter(|(_, m)| m.accepted).collect();
    assert!(accepted.len() >= 50, "only {} accepted", accepted.len());
    let close = accepted
        .iter()
        .filter(|(t, m)| (m.node.0 as i64 - 1 - *t as i64).abs() <= 1)
        .count();
    assert!(
        close as f64 >= 0.95 * accepted.len() as f64,
        "{close}/{}",
        accepted.len()
    );
}

#[test]
fn embed_without_model_is_an_error() {
    let w = generate_world(WorldConfig::new(5, Topology::Chain, 1)).unwrap();
    let t = placemap::simulator::generate_traversal(
        &w,
        &w.span(0, 5).unwrap(),
        &placemap::simulator::Condition::clear(0, &w, 0.0),
        1,
    )
    .unwrap();
    let frames: Vec<_> = t.descriptors.into_iter().map(placemap::engine::Frame::new).collect();
    let engine = Engine::init(&frames, EngineParams::default()).unwrap();
    let set = LocalFeatureSet::new(vec![vec![0.0; 3]]).unwrap();
    assert!(engine.embed(&[set]).is_err());
}
