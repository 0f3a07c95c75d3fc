//! Independent oracles shared by the integration tests and the acceptance
//! suite. Nothing here calls the code paths it is used to check.

#![allow(dead_code)]

use std::collections::BTreeMap;

use placemap::engine::{Engine, Frame};
use placemap::hmmfilter::ObservationLikelihood;
use placemap::mapgraph::{MapGraph, NodeId};
use placemap::simulator::{
    generate_traversal, generate_world, Condition, SyntheticWorld, Topology, Traversal, WorldConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Random symmetric graph on `k` nodes: every node has a self-loop and
/// each off-diagonal pair is linked with probability `density`.
pub fn random_graph(k: usize, density: f64, rng: &mut ChaCha8Rng) -> MapGraph {
    let mut g = MapGraph::new();
    for i in 1..=k as u32 {
        g.add_node(NodeId(i));
        g.set_edge(NodeId(i), NodeId(i), rng.random_range(0.05..=1.0));
    }
    for i in 1..=k as u32 {
        for j in i + 1..=k as u32 {
            if rng.random_bool(density) {
                g.set_edge(NodeId(i), NodeId(j), rng.random_range(0.01..=1.0));
            }
        }
    }
    g
}

/// Dense `E` from the graph weights, rows normalized by hand.
pub fn dense_transition(g: &MapGraph, ids: &[NodeId]) -> Vec<Vec<f64>> {
    ids.iter()
        .map(|&a| {
            let row: Vec<f64> = ids.iter().map(|&b| g.weight(a, b).unwrap_or(0.0)).collect();
            let s: f64 = row.iter().sum();
            row.into_iter().map(|w| w / s).collect()
        })
        .collect()
}

/// `normalize(O * E^T * p)` by full matrix product.
pub fn dense_propagate(e: &[Vec<f64>], p: &[f64], obs: &[f64]) -> Vec<f64> {
    let k = p.len();
    let mut out = vec![0.0; k];
    for j in 0..k {
        let mut acc = 0.0;
        for i in 0..k {
            acc += e[i][j] * p[i];
        }
        out[j] = obs[j] * acc;
    }
    let s: f64 = out.iter().sum();
    out.iter().map(|x| x / s).collect()
}

pub fn random_observation(ids: &[NodeId], beta: f64, sigma: f64, rng: &mut ChaCha8Rng) -> ObservationLikelihood {
    let mut obs = ObservationLikelihood::uniform((-beta / sigma).exp());
    for _ in 0..rng.random_range(0..=10) {
        let n = ids[rng.random_range(0..ids.len())];
        let d: f64 = rng.random_range(0.0..2.0);
        obs.raise(n, (-d / sigma).exp());
    }
    obs
}

/// Exhaustive k nearest neighbours, ascending by (distance, id).
pub fn brute_knn(points: &[(u64, Vec<f64>)], q: &[f64], k: usize) -> Vec<(u64, f64)> {
    let mut all: Vec<(u64, f64)> = points
        .iter()
        .map(|(id, p)| {
            let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            (*id, d2.sqrt())
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

pub fn random_unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Ground-truth place of every node: the most frequent label among its
/// images, smallest label on ties.
pub fn node_places(engine: &Engine) -> BTreeMap<NodeId, usize> {
    let corpus = &engine.map().corpus;
    let mut out = BTreeMap::new();
    for node in engine.map().graph.nodes() {
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for img in corpus.images_of(node) {
            if let Some(label) = corpus.record(img).and_then(|r| r.label) {
                *counts.entry(label).or_default() += 1;
            }
        }
        let best = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)));
        if let Some((&label, _)) = best {
            out.insert(node, label as usize);
        }
    }
    out
}

/// Structural audit written independently of `MapGraph::audit`: symmetric
/// positive weights, row-stochastic CSR view, every image under exactly one
/// existing node, and exactly `expected_images` images in corpus and index.
pub fn independent_audit(engine: &Engine, expected_images: usize) -> Result<(), String> {
    let g = &engine.map().graph;
    let ids: Vec<NodeId> = g.nodes().collect();
    for &a in &ids {
        let mut any = false;
        for (b, w) in g.neighbors(a) {
            any = true;
            if !(w > 0.0 && w.is_finite()) {
                return Err(format!("weight {w} on {a}-{b}"));
            }
            if g.weight(b, a) != Some(w) {
                return Err(format!("asymmetric edge {a}-{b}"));
            }
        }
        if !any {
            return Err(format!("node {a} has an empty row"));
        }
    }
    let m = g.transition_matrix();
    for i in 0..m.len() {
        let s: f64 = m.row(i).map(|(_, v)| v).sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(format!("row {i} sums to {s}"));
        }
    }
    let corpus = &engine.map().corpus;
    let mut seen = 0usize;
    for &n in &ids {
        for img in corpus.images_of(n) {
            seen += 1;
            if corpus.node_of(img) != Some(n) {
                return Err(format!("image {img} inverse lookup disagrees"));
            }
            if !engine.tree().contains(img) {
                return Err(format!("image {img} missing from the index"));
            }
        }
    }
    if seen != expected_images || corpus.image_count() != expected_images || engine.tree().len() != expected_images {
        return Err(format!(
            "expected {expected_images} images; nodes hold {seen}, corpus {}, index {}",
            corpus.image_count(),
            engine.tree().len()
        ));
    }
    Ok(())
}

/// Frames labelled with the place they were generated at.
pub fn labelled(t: &Traversal) -> Vec<Frame> {
    t.descriptors
        .iter()
        .zip(&t.places)
        .map(|(d, &p)| Frame::labelled(d.clone(), p as u64))
        .collect()
}

pub fn world(places: usize, topology: Topology, seed: u64) -> SyntheticWorld {
    generate_world(WorldConfig::new(places, topology, seed)).expect("world")
}

pub fn traversal(w: &SyntheticWorld, route: &[usize], cond: &Condition, seed: u64) -> Vec<Frame> {
    labelled(&generate_traversal(w, route, cond, seed).expect("traversal"))
}

pub fn descriptors(frames: &[Frame]) -> Vec<placemap::embedding::GlobalDescriptor> {
    frames.iter().map(|f| f.descriptor.clone()).collect()
}
