//! Global image descriptors: VLAD aggregation of local features, followed by
//! PCA rotation, signed power-law normalization and L2 normalization.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kmeans::{count_distinct, kmeans, KMeansConfig};
use crate::vecmath::{dot, nearest, norm, normalize_in_place};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("empty input")]
    EmptyInput,
    #[error("codebook of size {requested} needs that many distinct samples, got {distinct}")]
    TooFewDistinctSamples { requested: usize, distinct: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("rotation needs at least {needed} vectors, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("vector is zero after projection")]
    ZeroVector,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// The local features (e.g. dense SIFT) of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFeatureSet {
    dim: usize,
    features: Vec<Vec<f64>>,
}

impl LocalFeatureSet {
    pub fn new(features: Vec<Vec<f64>>) -> Result<Self, EmbedError> {
        let first = features.first().ok_or(EmbedError::EmptyInput)?;
        let dim = first.len();
        if dim == 0 {
            return Err(EmbedError::InvalidParam("feature dimension must be positive".into()));
        }
        if let Some(bad) = features.iter().find(|f| f.len() != dim) {
            return Err(EmbedError::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        Ok(Self { dim, features })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }
}

/// Visual vocabulary: `M` centroids in the local-feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    dim: usize,
    centroids: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn new(centroids: Vec<Vec<f64>>) -> Result<Self, EmbedError> {
        let first = centroids.first().ok_or(EmbedError::EmptyInput)?;
        let dim = first.len();
        if let Some(bad) = centroids.iter().find(|c| c.len() != dim) {
            return Err(EmbedError::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        let distinct = count_distinct(&centroids);
        if distinct != centroids.len() {
            return Err(EmbedError::InvalidParam("codebook centroids must be distinct".into()));
        }
        Ok(Self { dim, centroids })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn size(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    /// Length of a VLAD vector built on this codebook (`M * d`).
    pub fn vlad_dim(&self) -> usize {
        self.dim * self.centroids.len()
    }
}

/// Trains a codebook with Lloyd's k-means (shift < 1e-6 or 100 iterations).
pub fn build_codebook(samples: &[Vec<f64>], size: usize, seed: u64) -> Result<Codebook, EmbedError> {
    if samples.is_empty() {
        return Err(EmbedError::EmptyInput);
    }
    if size == 0 {
        return Err(EmbedError::InvalidParam("codebook size must be positive".into()));
    }
    let dim = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
        return Err(EmbedError::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    let distinct = count_distinct(samples);
    if distinct < size {
        return Err(EmbedError::TooFewDistinctSamples {
            requested: size,
            distinct,
        });
    }
    let clustering = kmeans(samples, &KMeansConfig::new(size, seed));
    Codebook::new(clustering.centroids)
}

/// Sum-aggregated VLAD: block `m` holds the summed residuals of the features
/// whose nearest centroid is `b_m` (ties to the lowest index).
pub fn vlad_embed(features: &LocalFeatureSet, codebook: &Codebook) -> Result<Vec<f64>, EmbedError> {
    if features.dim() != codebook.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: codebook.dim(),
            got: features.dim(),
        });
    }
    let d = codebook.dim();
    let mut out = vec![0.0; codebook.vlad_dim()];
    for x in features.features() {
        let (m, _) = nearest(x, codebook.centroids());
        let centroid = &codebook.centroids()[m];
        let block = &mut out[m * d..(m + 1) * d];
        for ((o, xi), bi) in block.iter_mut().zip(x).zip(centroid) {
            *o += xi - bi;
        }
    }
    Ok(out)
}

/// PCA rotation from the raw VLAD space (`D`) to `D'` dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationModel {
    input_dim: usize,
    mean: Vec<f64>,
    /// `D'` rows, each a unit principal direction of length `D`.
    directions: Vec<Vec<f64>>,
    /// Sample variance along each direction, descending.
    variances: Vec<f64>,
}

impl RotationModel {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.directions.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn directions(&self) -> &[Vec<f64>] {
        &self.directions
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Centers and projects `raw` onto the principal directions.
    pub fn project(&self, raw: &[f64]) -> Result<Vec<f64>, EmbedError> {
        if raw.len() != self.input_dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.input_dim,
                got: raw.len(),
            });
        }
        let centered: Vec<f64> = raw.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok(self.directions.iter().map(|dir| dot(dir, &centered)).collect())
    }

    /// Identity rotation (zero mean, axis directions); handy for tests and
    /// for descriptors that are already in their final space.
    pub fn identity(dim: usize) -> Self {
        let directions = (0..dim)
            .map(|i| {
                let mut e = vec![0.0; dim];
                e[i] = 1.0;
                e
            })
            .collect();
        Self {
            input_dim: dim,
            mean: vec![0.0; dim],
            directions,
            variances: vec![0.0; dim],
        }
    }
}

/// Fits the top-`target_dim` principal directions of the mean-centered input.
///
/// Small `D` goes through the `D x D` covariance; when there are fewer
/// vectors than dimensions the `n x n` Gram matrix is decomposed instead and
/// the zero-variance remainder of the basis is completed by Gram-Schmidt.
pub fn fit_rotation(vectors: &[Vec<f64>], target_dim: usize) -> Result<RotationModel, EmbedError> {
    let n = vectors.len();
    if n == 0 {
        return Err(EmbedError::InsufficientData {
            needed: target_dim.max(1),
            got: 0,
        });
    }
    let dim = vectors[0].len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
        return Err(EmbedError::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    if target_dim == 0 || target_dim > dim {
        return Err(EmbedError::InvalidParam(format!(
            "target dimension {target_dim} must lie in 1..={dim}"
        )));
    }
    if n < target_dim {
        return Err(EmbedError::InsufficientData {
            needed: target_dim,
            got: n,
        });
    }

    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, dim, |i, j| vectors[i][j] - mean[j]);
    let scale = if n > 1 { 1.0 / (n - 1) as f64 } else { 1.0 };

    let mut pairs: Vec<(f64, Vec<f64>)> = if dim <= n {
        let cov = centered.transpose() * &centered * scale;
        let eig = SymmetricEigen::new(cov);
        (0..dim)
            .map(|i| {
                (
                    eig.eigenvalues[i].max(0.0),
                    eig.eigenvectors.column(i).iter().copied().collect(),
                )
            })
            .collect()
    } else {
        let gram = &centered * centered.transpose();
        let eig = SymmetricEigen::new(gram);
        let top = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        (0..n)
            .filter_map(|i| {
                let lambda = eig.eigenvalues[i];
                if lambda <= top * 1e-12 || lambda <= 0.0 {
                    return None;
                }
                let u = eig.eigenvectors.column(i);
                let v = centered.transpose() * u / lambda.sqrt();
                Some((lambda * scale, v.iter().copied().collect()))
            })
            .collect()
    };
    // Stable order: descending variance, original index on ties.
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[b].0.total_cmp(&pairs[a].0).then(a.cmp(&b)));
    let sorted: Vec<(f64, Vec<f64>)> = order.into_iter().map(|i| std::mem::take(&mut pairs[i])).collect();

    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(target_dim);
    let mut variances = Vec::with_capacity(target_dim);
    for (var, v) in sorted {
        if directions.len() == target_dim {
            break;
        }
        if let Some(u) = orthonormalize_against(&v, &directions) {
            directions.push(u);
            variances.push(var);
        }
    }
    // Complete the basis with axis vectors; these carry no sample variance.
    let mut axis = 0;
    while directions.len() < target_dim && axis < dim {
        let mut e = vec![0.0; dim];
        e[axis] = 1.0;
        axis += 1;
        if let Some(u) = orthonormalize_against(&e, &directions) {
            directions.push(u);
            variances.push(0.0);
        }
    }
    for d in &mut directions {
        canonical_sign(d);
    }

    Ok(RotationModel {
        input_dim: dim,
        mean,
        directions,
        variances,
    })
}

/// Two passes of modified Gram-Schmidt; `None` if `v` is (numerically) in
/// the span of `basis`.
fn orthonormalize_against(v: &[f64], basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    let start = norm(v);
    if start == 0.0 {
        return None;
    }
    let mut u = v.to_vec();
    for _ in 0..2 {
        for b in basis {
            let c = dot(&u, b);
            for (x, y) in u.iter_mut().zip(b) {
                *x -= c * y;
            }
        }
    }
    if norm(&u) < start * 1e-8 {
        return None;
    }
    normalize_in_place(&mut u);
    Some(u)
}

/// Flips `v` so that its largest-magnitude entry is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// A unit-norm global image descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalDescriptor(Vec<f64>);

impl GlobalDescriptor {
    /// L2-normalizes `values`.
    pub fn new(mut values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        if !values.iter().all(|x| x.is_finite()) {
            return Err(EmbedError::InvalidParam("descriptor has non-finite entries".into()));
        }
        if normalize_in_place(&mut values) == 0.0 {
            return Err(EmbedError::ZeroVector);
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for GlobalDescriptor {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Signed power law `|v|^alpha * sign(v)`, elementwise.
pub fn power_law(values: &mut [f64], alpha: f64) {
    for v in values.iter_mut() {
        *v = v.abs().powf(alpha).copysign(*v);
    }
}

/// Rotation, power-law normalization and final L2 normalization.
pub fn normalize(raw: &[f64], rotation: &RotationModel, alpha: f64) -> Result<GlobalDescriptor, EmbedError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(EmbedError::InvalidParam(format!("alpha {alpha} outside (0, 1]")));
    }
    let mut projected = rotation.project(raw)?;
    if projected.iter().all(|&x| x == 0.0) {
        return Err(EmbedError::ZeroVector);
    }
    power_law(&mut projected, alpha);
    GlobalDescriptor::new(projected)
}

/// Codebook + rotation + exponent: the full local-features-to-descriptor map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub codebook: Codebook,
    pub rotation: RotationModel,
    pub alpha: f64,
}

/// Upper bound on local features fed to codebook training.
const MAX_CODEBOOK_SAMPLES: usize = 100_000;

impl EmbeddingModel {
    /// Trains codebook and rotation on one traversal's feature sets. The
    /// output dimension is clamped to `min(target_dim, M * d, images)`; the
    /// codebook size is clamped to the number of distinct features.
    pub fn fit(
        sets: &[LocalFeatureSet],
        codebook_size: usize,
        target_dim: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self, EmbedError> {
        if sets.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        let total: usize = sets.iter().map(|s| s.len()).sum();
        let stride = total.div_ceil(MAX_CODEBOOK_SAMPLES).max(1);
        let samples: Vec<Vec<f64>> = sets
            .iter()
            .flat_map(|s| s.features().iter())
            .step_by(stride)
            .cloned()
            .collect();
        let size = codebook_size.min(count_distinct(&samples));
        let codebook = build_codebook(&samples, size, seed)?;
        let raws = sets
            .iter()
            .map(|s| vlad_embed(s, &codebook))
            .collect::<Result<Vec<_>, _>>()?;
        let out_dim = target_dim.min(codebook.vlad_dim()).min(raws.len()).max(1);
        let rotation = fit_rotation(&raws, out_dim)?;
        Ok(Self {
            codebook,
            rotation,
            alpha,
        })
    }

    pub fn embed(&self, features: &LocalFeatureSet) -> Result<GlobalDescriptor, EmbedError> {
        let raw = vlad_embed(features, &self.codebook)?;
        normalize(&raw, &self.rotation, self.alpha)
    }

    pub fn output_dim(&self) -> usize {
        self.rotation.output_dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn set(features: &[&[f64]]) -> LocalFeatureSet {
        LocalFeatureSet::new(features.iter().map(|f| f.to_vec()).collect()).unwrap()
    }

    /// Exact 2-means by enumerating every bipartition.
    fn exhaustive_two_means(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1..(1u32 << n) - 1 {
            let mut groups = [vec![], vec![]];
            for (i, p) in points.iter().enumerate() {
                groups[((mask >> i) & 1) as usize].push(p.clone());
            }
            let means: Vec<Vec<f64>> = groups
                .iter()
                .map(|g| {
                    let mut m = vec![0.0; 2];
                    for p in g {
                        m[0] += p[0] / g.len() as f64;
                        m[1] += p[1] / g.len() as f64;
                    }
                    m
                })
                .collect();
            let sse: f64 = groups
                .iter()
                .zip(&means)
                .flat_map(|(g, m)| g.iter().map(move |p| (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)))
                .sum();
            if sse < best.0 {
                best = (sse, means);
            }
        }
        best.1
    }

    #[test]
    fn codebook_two_clusters_matches_exhaustive_oracle() {
        let samples = vec![vec![0.0, 0.0], vec![0.0, 0.1], vec![10.0, 10.0], vec![10.0, 10.1]];
        let mut oracle = exhaustive_two_means(&samples);
        oracle.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_abs_diff_eq!(oracle[0][1], 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(oracle[1][1], 10.05, epsilon = 1e-12);

        let cb = build_codebook(&samples, 2, 7).unwrap();
        let mut got = cb.centroids().to_vec();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (g, o) in got.iter().zip(&oracle) {
            assert_abs_diff_eq!(g[0], o[0], epsilon = 1e-9);
            assert_abs_diff_eq!(g[1], o[1], epsilon = 1e-9);
        }
    }

    #[test]
    fn codebook_single_point() {
        let samples = vec![vec![3.0, -1.0]; 5];
        let cb = build_codebook(&samples, 1, 0).unwrap();
        assert_eq!(cb.centroids(), &[vec![3.0, -1.0]]);
    }

    #[test]
    fn codebook_errors() {
        assert_eq!(build_codebook(&[], 2, 0), Err(EmbedError::EmptyInput));
        let samples = vec![vec![1.0], vec![1.0], vec![2.0]];
        assert_eq!(
            build_codebook(&samples, 3, 0),
            Err(EmbedError::TooFewDistinctSamples {
                requested: 3,
                distinct: 2
            })
        );
    }

    #[test]
    fn codebook_is_deterministic() {
        let samples: Vec<Vec<f64>> = (0..300)
            .map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos()])
            .collect();
        assert_eq!(
            build_codebook(&samples, 8, 5).unwrap(),
            build_codebook(&samples, 8, 5).unwrap()
        );
    }

    #[test]
    fn vlad_zero_residual() {
        let cb = Codebook::new(vec![vec![1.0, 2.0], vec![5.0, 5.0]]).unwrap();
        let v = vlad_embed(&set(&[&[1.0, 2.0]]), &cb).unwrap();
        assert_eq!(v, vec![0.0; 4]);
    }

    #[test]
    fn vlad_hand_sum() {
        let cb = Codebook::new(vec![vec![0.0, 0.0], vec![10.0, 0.0]]).unwrap();
        let v = vlad_embed(&set(&[&[1.0, 0.0], &[3.0, 0.0]]), &cb).unwrap();
        assert_eq!(v, vec![4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn vlad_single_block_identity() {
        let cb = Codebook::new(vec![vec![0.5, -1.0, 2.0]]).unwrap();
        let feats = set(&[&[1.0, 2.0, 3.0], &[-4.0, 0.5, 0.0], &[0.0, 0.0, 7.0]]);
        let v = vlad_embed(&feats, &cb).unwrap();
        for j in 0..3 {
            let sum: f64 = feats.features().iter().map(|f| f[j]).sum();
            assert_abs_diff_eq!(v[j], sum - 3.0 * cb.centroids()[0][j], epsilon = 1e-12);
        }
    }

    #[test]
    fn vlad_dimension_mismatch() {
        let cb = Codebook::new(vec![vec![0.0, 0.0]]).unwrap();
        assert_eq!(
            vlad_embed(&set(&[&[1.0, 2.0, 3.0]]), &cb),
            Err(EmbedError::DimensionMismatch { expected: 2, got: 3 })
        );
    }

    #[test]
    fn rotation_line_direction() {
        let vectors: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, i as f64]).collect();
        let rot = fit_rotation(&vectors, 1).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert_abs_diff_eq!(rot.directions()[0][0].abs(), h, epsilon = 1e-9);
        assert_abs_diff_eq!(rot.directions()[0][1].abs(), h, epsilon = 1e-9);
        assert_eq!(rot.directions()[0][0].signum(), rot.directions()[0][1].signum());
    }

    #[test]
    fn rotation_axis_aligned_ellipsoid_is_signed_permutation() {
        // Zero-mean samples with variances 1 (x), 9 (y), 4 (z).
        let mut vectors = vec![];
        for s in [-1.0, 1.0] {
            vectors.push(vec![s, 0.0, 0.0]);
            vectors.push(vec![0.0, 3.0 * s, 0.0]);
            vectors.push(vec![0.0, 0.0, 2.0 * s]);
        }
        // Eigen-decomposition oracle: the covariance is diagonal, so the
        // principal directions are the axes ordered y, z, x.
        let rot = fit_rotation(&vectors, 3).unwrap();
        let expect = [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        for (dir, e) in rot.directions().iter().zip(expect) {
            for (a, b) in dir.iter().zip(e) {
                assert_abs_diff_eq!(a.abs(), b, epsilon = 1e-9);
            }
        }
    }

    fn assert_orthonormal(rot: &RotationModel) {
        for (i, a) in rot.directions().iter().enumerate() {
            for (j, b) in rot.directions().iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(dot(a, b), expect, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn rotation_isotropic_is_orthonormal() {
        let vectors = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let rot = fit_rotation(&vectors, 2).unwrap();
        assert_orthonormal(&rot);
    }

    #[test]
    fn rotation_wide_data_uses_gram_path() {
        // 6 samples in 40 dimensions.
        let vectors: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..40).map(|j| ((i * 7 + j * 3) as f64 * 0.31).sin()).collect())
            .collect();
        let rot = fit_rotation(&vectors, 6).unwrap();
        assert_eq!(rot.output_dim(), 6);
        assert_orthonormal(&rot);
        for w in rot.variances().windows(2) {
            assert!(w[0] >= w[1]);
        }
        // Projected sample variance matches the recorded variances.
        let proj: Vec<Vec<f64>> = vectors.iter().map(|v| rot.project(v).unwrap()).collect();
        for c in 0..6 {
            let var: f64 = proj.iter().map(|p| p[c] * p[c]).sum::<f64>() / 5.0;
            assert_abs_diff_eq!(var, rot.variances()[c], epsilon = 1e-8);
        }
    }

    #[test]
    fn rotation_errors() {
        let vectors = vec![vec![1.0, 2.0]];
        assert!(matches!(
            fit_rotation(&vectors, 2),
            Err(EmbedError::InsufficientData { .. })
        ));
        assert!(matches!(fit_rotation(&[], 1), Err(EmbedError::InsufficientData { .. })));
        assert!(matches!(fit_rotation(&vectors, 3), Err(EmbedError::InvalidParam(_))));
    }

    #[test]
    fn normalize_single_spike() {
        let rot = RotationModel::identity(4);
        let g = normalize(&[4.0, 0.0, 0.0, 0.0], &rot, 0.5).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_sign_preserved() {
        let rot = RotationModel::identity(2);
        let g = normalize(&[1.0, -1.0], &rot, 0.5).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert_abs_diff_eq!(g.as_slice()[0], h, epsilon = 1e-15);
        assert_abs_diff_eq!(g.as_slice()[1], -h, epsilon = 1e-15);
    }

    #[test]
    fn normalize_alpha_one_is_plain_l2() {
        let rot = RotationModel::identity(3);
        let g = normalize(&[3.0, -4.0, 0.0], &rot, 1.0).unwrap();
        assert_abs_diff_eq!(g.as_slice()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(g.as_slice()[1], -0.8, epsilon = 1e-15);
    }

    #[test]
    fn normalize_errors() {
        let rot = RotationModel::identity(2);
        assert_eq!(normalize(&[0.0, 0.0], &rot, 0.5), Err(EmbedError::ZeroVector));
        assert!(matches!(
            normalize(&[1.0, 0.0], &rot, 0.0),
            Err(EmbedError::InvalidParam(_))
        ));
        assert!(matches!(
            normalize(&[1.0, 0.0, 0.0], &rot, 0.5),
            Err(EmbedError::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn vlad_blocks_match_bruteforce_assignment(
            feats in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..100),
            cents in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..6),
        ) {
            prop_assume!(count_distinct(&cents) == cents.len());
            let cb = Codebook::new(cents.clone()).unwrap();
            let v = vlad_embed(&LocalFeatureSet::new(feats.clone()).unwrap(), &cb).unwrap();
            let mut expect = vec![0.0; cents.len() * 3];
            for f in &feats {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (m, c) in cents.iter().enumerate() {
                    let d: f64 = f.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best_d { best_d = d; best = m; }
                }
                for j in 0..3 { expect[best * 3 + j] += f[j] - cents[best][j]; }
            }
            prop_assert_eq!(v, expect);
        }

        #[test]
        fn normalize_is_unit_and_sign_monotone(
            raw in prop::collection::vec(-100.0f64..100.0, 1..16),
            alpha in 0.05f64..=1.0,
        ) {
            prop_assume!(raw.iter().any(|&x| x != 0.0));
            let rot = RotationModel::identity(raw.len());
            let g = normalize(&raw, &rot, alpha).unwrap();
            prop_assert!((norm(g.as_slice()) - 1.0).abs() <= 1e-9);
            for (o, r) in g.as_slice().iter().zip(&raw) {
                prop_assert!(*r == 0.0 || o.signum() == r.signum());
            }
            let mut powered = raw.clone();
            power_law(&mut powered, alpha);
            for i in 0..raw.len() {
                for j in 0..raw.len() {
                    if raw[i].abs() < raw[j].abs() {
                        prop_assert!(powered[i].abs() <= powered[j].abs());
                    }
                }
            }
        }
    }
}
