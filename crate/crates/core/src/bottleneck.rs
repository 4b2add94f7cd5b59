//! Speaker normalization followed by K-means quantization.
//!
//! The quantizer is fitted once, before any network training, and stays
//! frozen afterwards.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;

pub const NORMALIZE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    /// Population variance.
    pub variance: Vec<f64>,
    pub n_frames: usize,
}

impl NormalizationStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Exact population mean and variance over every frame of `features`.
pub fn fit_stats<'a, I>(features: I) -> Result<NormalizationStats>
where
    I: IntoIterator<Item = &'a FeatureSequence>,
    I::IntoIter: Clone,
{
    let iter = features.into_iter();
    let mut dim = None;
    let mut n = 0usize;
    let mut sum: Vec<f64> = Vec::new();
    let mut lo: Vec<f32> = Vec::new();
    let mut hi: Vec<f32> = Vec::new();
    for f in iter.clone() {
        let d = *dim.get_or_insert_with(|| {
            sum = vec![0.0; f.dim()];
            lo = vec![f32::INFINITY; f.dim()];
            hi = vec![f32::NEG_INFINITY; f.dim()];
            f.dim()
        });
        if f.dim() != d {
            return Err(Error::validation(format!("feature width {} differs from {d}", f.dim())));
        }
        for row in f.vectors.outer_iter() {
            for (j, &v) in row.iter().enumerate() {
                sum[j] += v as f64;
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        n += f.n_frames();
    }
    if n == 0 {
        return Err(Error::validation("cannot fit normalization statistics on zero frames"));
    }
    let mut mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    // Pin constant dimensions to their exact value so they normalize to 0.
    for j in 0..mean.len() {
        if lo[j] == hi[j] {
            mean[j] = lo[j] as f64;
        }
    }
    let mut sq = vec![0.0f64; mean.len()];
    for f in iter {
        for row in f.vectors.outer_iter() {
            for (j, &v) in row.iter().enumerate() {
                let d = v as f64 - mean[j];
                sq[j] += d * d;
            }
        }
    }
    let variance = sq.iter().map(|s| s / n as f64).collect();
    Ok(NormalizationStats {
        mean,
        variance,
        n_frames: n,
    })
}

/// `(f - mean) / sqrt(variance + 1e-8)`, per dimension.
pub fn normalize(f: &FeatureSequence, stats: &NormalizationStats) -> Result<FeatureSequence> {
    if f.dim() != stats.dim() {
        return Err(Error::validation(format!(
            "features are {}-d but normalization stats are {}-d",
            f.dim(),
            stats.dim()
        )));
    }
    let inv_std: Vec<f64> = stats.variance.iter().map(|v| 1.0 / (v + NORMALIZE_EPS).sqrt()).collect();
    let mut out = f.vectors.clone();
    for mut row in out.outer_iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = ((*v as f64 - stats.mean[j]) * inv_std[j]) as f32;
        }
    }
    Ok(f.with_vectors(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BottleneckConfig {
    /// Number of K-means centroids.
    pub k: usize,
    pub max_iterations: usize,
    /// Stop when inertia improves by less than this fraction.
    pub tolerance: f64,
    pub seed: u64,
    /// Utterances drawn from the training manifest for fitting stats and
    /// codebook.
    pub fit_subset_utterances: usize,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self {
            k: 100,
            max_iterations: 100,
            tolerance: 1e-6,
            seed: 0,
            fit_subset_utterances: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub n_training_frames: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub converged: bool,
    pub seed: u64,
    /// Whether the codebook was fitted on normalized features.
    pub fitted_on_normalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `[K x dim]`
    pub centroids: Array2<f32>,
    pub fit_metadata: FitMetadata,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Index of the centroid nearest to `frame`; ties go to the lowest index.
    pub fn nearest(&self, frame: ArrayView1<f32>) -> usize {
        nearest_centroid(frame, &self.centroids).0
    }
}

fn sq_dist(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn nearest_centroid(frame: ArrayView1<f32>, centroids: &Array2<f32>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.outer_iter().enumerate() {
        let d = sq_dist(frame, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// K-means with k-means++ seeding.
pub fn fit_codebook(features: &[FeatureSequence], cfg: &BottleneckConfig) -> Result<Codebook> {
    let k = cfg.k;
    if k == 0 {
        return Err(Error::validation("codebook size K must be at least 1"));
    }
    let views: Vec<_> = features.iter().map(|f| f.vectors.view()).collect();
    if views.is_empty() {
        return Err(Error::validation("no features to fit a codebook on"));
    }
    let data = ndarray::concatenate(Axis(0), &views)
        .map_err(|e| Error::validation(format!("feature widths differ: {e}")))?;
    let n = data.nrows();
    if n < k {
        return Err(Error::validation(format!("need at least K={k} frames to fit the codebook, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = kmeans_plus_plus(&data, k, &mut rng)?;

    let mut prev_inertia = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut inertia;
    loop {
        let assignment: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest_centroid(data.row(i), &centroids))
            .collect();
        inertia = assignment.iter().map(|a| a.1).sum::<f64>();
        if prev_inertia.is_finite() && prev_inertia - inertia <= cfg.tolerance * prev_inertia {
            converged = true;
            break;
        }
        if iterations == cfg.max_iterations {
            break;
        }
        prev_inertia = inertia;
        iterations += 1;
        centroids = update_centroids(&data, &assignment, k);
    }
    let distinct = (0..k).all(|a| (a + 1..k).all(|b| centroids.row(a) != centroids.row(b)));
    if !distinct {
        return Err(Error::validation("K-means produced duplicate centroids; the data has too few distinct frames"));
    }
    Ok(Codebook {
        centroids,
        fit_metadata: FitMetadata {
            n_training_frames: n,
            iterations,
            inertia,
            converged,
            seed: cfg.seed,
            fitted_on_normalized: false,
        },
    })
}

fn kmeans_plus_plus(data: &Array2<f32>, k: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f32>> {
    let n = data.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            return Err(Error::validation(format!(
                "only {} distinct frames available for K={k}",
                chosen.len()
            )));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            acc += d;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let next = pick.expect("positive total implies a positive weight");
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), data.row(next)));
        }
    }
    let mut centroids = Array2::<f32>::zeros((k, data.ncols()));
    for (r, &i) in chosen.iter().enumerate() {
        centroids.row_mut(r).assign(&data.row(i));
    }
    Ok(centroids)
}

fn update_centroids(data: &Array2<f32>, assignment: &[(usize, f64)], k: usize) -> Array2<f32> {
    let dim = data.ncols();
    let mut sums = Array2::<f64>::zeros((k, dim));
    let mut counts = vec![0usize; k];
    for (i, &(c, _)) in assignment.iter().enumerate() {
        counts[c] += 1;
        let mut row = sums.row_mut(c);
        for (s, &v) in row.iter_mut().zip(data.row(i)) {
            *s += v as f64;
        }
    }
    let mut out = Array2::<f32>::zeros((k, dim));
    // Empty clusters are reseeded with the worst-fit points.
    let mut by_cost: Vec<usize> = (0..assignment.len()).collect();
    by_cost.sort_by(|&a, &b| assignment[b].1.total_cmp(&assignment[a].1).then(a.cmp(&b)));
    let mut reseed = by_cost.into_iter();
    for c in 0..k {
        if counts[c] == 0 {
            let i = reseed.next().unwrap_or(0);
            out.row_mut(c).assign(&data.row(i));
        } else {
            let inv = 1.0 / counts[c] as f64;
            for (o, &s) in out.row_mut(c).iter_mut().zip(sums.row(c)) {
                *o = (s * inv) as f32;
            }
        }
    }
    out
}

/// Replace every frame with its nearest centroid (Euclidean, ties to the
/// lowest index).
pub fn quantize(f: &FeatureSequence, cb: &Codebook) -> Result<FeatureSequence> {
    quantize_with_indices(f, cb).map(|(q, _)| q)
}

pub fn quantize_with_indices(f: &FeatureSequence, cb: &Codebook) -> Result<(FeatureSequence, Vec<usize>)> {
    if f.dim() != cb.dim() {
        return Err(Error::validation(format!(
            "features are {}-d but the codebook is {}-d",
            f.dim(),
            cb.dim()
        )));
    }
    let indices: Vec<usize> = f.vectors.outer_iter().map(|row| cb.nearest(row)).collect();
    let mut out = Array2::<f32>::zeros(f.vectors.raw_dim());
    for (t, &k) in indices.iter().enumerate() {
        out.row_mut(t).assign(&cb.centroids.row(k));
    }
    Ok((f.with_vectors(out), indices))
}

/// The frozen Q block: normalization stats plus codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    pub stats: NormalizationStats,
    pub codebook: Codebook,
}

#[derive(Serialize, Deserialize)]
struct CodebookFile {
    centroids: Vec<Vec<f32>>,
    fit_metadata: FitMetadata,
}

impl Quantizer {
    /// Normalize with `stats` (or the quantizer's own when `None`), then
    /// quantize.
    pub fn apply(&self, f: &FeatureSequence, stats: Option<&NormalizationStats>) -> Result<FeatureSequence> {
        let normed = normalize(f, stats.unwrap_or(&self.stats))?;
        quantize(&normed, &self.codebook)
    }

    pub const STATS_FILE: &'static str = "stats.json";
    pub const CODEBOOK_FILE: &'static str = "codebook.json";

    pub fn exists_in(dir: &Path) -> bool {
        dir.join(Self::STATS_FILE).is_file() && dir.join(Self::CODEBOOK_FILE).is_file()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::checkpoint::write_json_atomic(&dir.join(Self::STATS_FILE), &self.stats)?;
        let file = CodebookFile {
            centroids: self.codebook.centroids.outer_iter().map(|r| r.to_vec()).collect(),
            fit_metadata: self.codebook.fit_metadata.clone(),
        };
        crate::checkpoint::write_json_atomic(&dir.join(Self::CODEBOOK_FILE), &file)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let stats: NormalizationStats = crate::checkpoint::read_json(&dir.join(Self::STATS_FILE))?;
        let file: CodebookFile = crate::checkpoint::read_json(&dir.join(Self::CODEBOOK_FILE))?;
        let k = file.centroids.len();
        let dim = file.centroids.first().map_or(0, Vec::len);
        if k == 0 || file.centroids.iter().any(|r| r.len() != dim) {
            return Err(Error::validation("codebook file has ragged or empty centroids"));
        }
        if dim != stats.dim() {
            return Err(Error::validation("codebook and stats dimensions differ"));
        }
        let flat: Vec<f32> = file.centroids.into_iter().flatten().collect();
        let centroids = Array2::from_shape_vec((k, dim), flat).map_err(|e| Error::validation(e.to_string()))?;
        Ok(Self {
            stats,
            codebook: Codebook {
                centroids,
                fit_metadata: file.fit_metadata,
            },
        })
    }
}

/// Fit stats on `features`, then a codebook on the normalized features.
pub fn fit_quantizer(features: &[FeatureSequence], cfg: &BottleneckConfig) -> Result<Quantizer> {
    let stats = fit_stats(features)?;
    let normed = features
        .iter()
        .map(|f| normalize(f, &stats))
        .collect::<Result<Vec<_>>>()?;
    let mut codebook = fit_codebook(&normed, cfg)?;
    codebook.fit_metadata.fitted_on_normalized = true;
    Ok(Quantizer { stats, codebook })
}

/// Mean of one dimension across frames; handy in tests and reports.
pub fn column_mean(a: &Array2<f32>) -> Array1<f64> {
    let n = a.nrows() as f64;
    a.map(|&v| v as f64).sum_axis(Axis(0)) / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn seq(a: Array2<f32>) -> FeatureSequence {
        FeatureSequence::new(a, "t").unwrap()
    }

    fn random_frames(n: usize, d: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-3.0f32..5.0))
    }

    #[test]
    fn constant_frames_have_zero_variance() {
        let v = [1.5f32, -2.0, 0.1];
        let a = Array2::from_shape_fn((7, 3), |(_, j)| v[j]);
        let s = fit_stats([&seq(a)]).unwrap();
        assert_eq!(s.mean, vec![1.5, -2.0, 0.1f32 as f64]);
        assert_eq!(s.variance, vec![0.0; 3]);
        assert_eq!(s.n_frames, 7);
    }

    #[test]
    fn symmetric_pair() {
        let s = fit_stats([&seq(array![[1.0f32, -3.0], [-1.0, 3.0]])]).unwrap();
        assert_eq!(s.mean, vec![0.0, 0.0]);
        assert_eq!(s.variance, vec![1.0, 9.0]);
    }

    #[test]
    fn matches_two_pass_oracle() {
        let a = random_frames(1000, 6, 11);
        let s = fit_stats([&seq(a.clone())]).unwrap();
        for j in 0..6 {
            let col: Vec<f64> = a.column(j).iter().map(|&v| v as f64).collect();
            let mean = col.iter().sum::<f64>() / 1000.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1000.0;
            assert!((s.mean[j] - mean).abs() < 1e-10);
            assert!((s.variance[j] - var).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_input_is_rejected() {
        let none: Vec<FeatureSequence> = vec![];
        assert!(fit_stats(&none).is_err());
    }

    #[test]
    fn normalize_hand_example() {
        let stats = NormalizationStats {
            mean: vec![1.0],
            variance: vec![4.0],
            n_frames: 1,
        };
        let out = normalize(&seq(array![[3.0f32]]), &stats).unwrap();
        assert!((out.vectors[[0, 0]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn separated_clusters() {
        let mut a = Array2::<f32>::zeros((100, 2));
        for i in 50..100 {
            a.row_mut(i).fill(10.0);
        }
        let cb = fit_codebook(
            &[seq(a)],
            &BottleneckConfig {
                k: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let mut rows: Vec<Vec<f32>> = cb.centroids.outer_iter().map(|r| r.to_vec()).collect();
        rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (got, want) in rows.iter().zip([[0.0f32, 0.0], [10.0, 10.0]]) {
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-6);
            }
        }
        assert_eq!(cb.fit_metadata.inertia, 0.0);
    }

    #[test]
    fn too_few_frames_for_k() {
        let err = fit_codebook(
            &[seq(random_frames(5, 2, 1))],
            &BottleneckConfig {
                k: 6,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn beats_random_centroids() {
        let a = random_frames(1000, 8, 3);
        let cfg = BottleneckConfig {
            k: 16,
            seed: 5,
            ..Default::default()
        };
        let cb = fit_codebook(&[seq(a.clone())], &cfg).unwrap();
        // baseline: 16 random data points as centroids
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let picks: Vec<usize> = rand::seq::index::sample(&mut rng, 1000, 16).into_vec();
        let base_inertia: f64 = a
            .outer_iter()
            .map(|x| {
                picks
                    .iter()
                    .map(|&p| {
                        x.iter()
                            .zip(a.row(p))
                            .map(|(u, v)| (*u as f64 - *v as f64).powi(2))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        assert!(cb.fit_metadata.inertia <= base_inertia);
    }

    #[test]
    fn quantize_toy_and_fixed_point() {
        let cb = Codebook {
            centroids: array![[0.0f32, 0.0], [1.0, 1.0]],
            fit_metadata: FitMetadata {
                n_training_frames: 0,
                iterations: 0,
                inertia: 0.0,
                converged: true,
                seed: 0,
                fitted_on_normalized: false,
            },
        };
        let q = quantize(&seq(array![[0.2f32, 0.1], [1.0, 1.0], [0.5, 0.5]]), &cb).unwrap();
        assert_eq!(q.vectors, array![[0.0f32, 0.0], [1.0, 1.0], [0.0, 0.0]]);
        let wrong = quantize(&seq(array![[0.2f32, 0.1, 0.0]]), &cb).unwrap_err();
        assert!(matches!(wrong, Error::Validation(_)));
    }

    #[test]
    fn quantizer_round_trips_through_disk() {
        let frames = seq(random_frames(200, 4, 8));
        let q = fit_quantizer(
            std::slice::from_ref(&frames),
            &BottleneckConfig {
                k: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(q.codebook.fit_metadata.fitted_on_normalized);
        let dir = tempfile::tempdir().unwrap();
        q.save(dir.path()).unwrap();
        assert!(Quantizer::exists_in(dir.path()));
        assert_eq!(Quantizer::load(dir.path()).unwrap(), q);
    }
}
