//! Evaluation metrics: Fréchet gesture distance, diversity, beat alignment
//! and semantically weighted gesture recall.

mod extractor;

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use extractor::{ExtractorConfig, FeatureExtractor};

use crate::error::{Error, Result};
use crate::gesture_data::{angular_speed, geodesic_distance, FlatGesture, GestureSequence};

pub const DEFAULT_BEAT_SIGMA: f64 = 0.1;
pub const DEFAULT_SRGR_DELTA: f64 = 0.1;
pub const DEFAULT_BEAT_SMOOTHING: usize = 5;

const SYMMETRY_TOL: f64 = 1e-6;
const EIGEN_CLAMP: f64 = -1e-8;

fn check_symmetric(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::arg(format!("{name} is not square")));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > SYMMETRY_TOL {
        return Err(Error::arg(format!("{name} is not symmetric (max deviation {asym:e})")));
    }
    Ok(())
}

fn clamped(value: f64) -> f64 {
    if value < EIGEN_CLAMP {
        log::warn!("covariance product has eigenvalue {value:e}; clamping to 0");
    }
    value.max(0.0)
}

/// Principal square root of a symmetric positive semidefinite matrix.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| clamped(v).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ1−μ2‖² + tr(Σ1 + Σ2 − 2 (Σ1 Σ2)^{1/2})`.
///
/// The trace of `(Σ1 Σ2)^{1/2}` is computed as the sum of square roots of the
/// eigenvalues of the symmetric matrix `Σ1^{1/2} Σ2 Σ1^{1/2}`, which shares
/// its spectrum with `Σ1 Σ2`.
pub fn frechet_distance(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> Result<f64> {
    check_symmetric("cov1", cov1)?;
    check_symmetric("cov2", cov2)?;
    let d = mu1.len();
    if mu2.len() != d || cov1.nrows() != d || cov2.nrows() != d {
        return Err(Error::shape(format!("dimension {d}"), format!("{} / {} / {}", mu2.len(), cov1.nrows(), cov2.nrows())));
    }
    let s1 = psd_sqrt(cov1);
    let mut inner = &s1 * cov2 * &s1;
    inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&v| clamped(v).sqrt()).sum();
    let diff = mu1 - mu2;
    Ok(diff.dot(&diff) + cov1.trace() + cov2.trace() - 2.0 * tr_sqrt)
}

/// Sample mean and unbiased covariance of feature rows.
pub fn moments(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::arg("moments need at least two samples"));
    }
    let d = features[0].len();
    let data = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = data.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| data[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_from_features(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    let (m1, c1) = moments(real)?;
    let (m2, c2) = moments(generated)?;
    frechet_distance(&m1, &c1, &m2, &c2)
}

/// FGD between two gesture sets under a frozen feature extractor.
pub fn fgd(real: &[FlatGesture], generated: &[FlatGesture], extractor: &FeatureExtractor) -> Result<f64> {
    let need = extractor.config.feature_dim + 1;
    let fr = extractor.features_of_set(real)?;
    let fg = extractor.features_of_set(generated)?;
    if fr.len() < need || fg.len() < need {
        return Err(Error::arg(format!(
            "FGD needs at least {need} windows per set, got {} real and {} generated",
            fr.len(),
            fg.len()
        )));
    }
    frechet_from_features(&fr, &fg)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean distance over `num_pairs` uniformly drawn pairs of distinct samples.
pub fn diversity_from_features(features: &[Vec<f64>], num_pairs: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = features.len();
    if n < 2 {
        return Err(Error::arg("diversity needs at least two samples"));
    }
    if num_pairs == 0 {
        return Err(Error::arg("num_pairs must be at least 1"));
    }
    let total: f64 = (0..num_pairs)
        .map(|_| {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            euclid(&features[i], &features[j])
        })
        .sum();
    Ok(total / num_pairs as f64)
}

pub fn diversity(generated: &[FlatGesture], extractor: &FeatureExtractor, num_pairs: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    diversity_from_features(&extractor.features_of_set(generated)?, num_pairs, rng)
}

/// Moving average with a centered window truncated at the edges.
pub fn smooth(x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Gesture beats: strict local minima of the smoothed mean joint angular
/// speed, in seconds. Speed sample `i` covers frames `i−1..i`, so its time
/// stamp is `(i − 0.5) / fps`.
pub fn extract_gesture_beats(seq: &GestureSequence, smoothing_window: usize) -> Result<Vec<f64>> {
    let f = seq.frames();
    if f < 3 {
        return Err(Error::arg(format!("beat extraction needs at least 3 frames, got {f}")));
    }
    let j = seq.joints();
    let mut mean = vec![0.0; f];
    for joint in 0..j {
        for (m, s) in mean.iter_mut().zip(angular_speed(seq, joint)) {
            *m += s / j as f64;
        }
    }
    let v = smooth(&mean, smoothing_window.max(1));
    Ok((1..f - 1)
        .filter(|&i| v[i - 1] > v[i] && v[i] < v[i + 1])
        .map(|i| (i as f64 - 0.5) / seq.fps())
        .collect())
}

/// Mean Gaussian-kernel score of each gesture beat against its nearest audio beat.
pub fn beat_align(audio_beats: &[f64], gesture_beats: &[f64], sigma: f64) -> Result<f64> {
    if audio_beats.is_empty() {
        return Err(Error::arg("audio beats are empty"));
    }
    if sigma <= 0.0 {
        return Err(Error::arg(format!("sigma must be positive, got {sigma}")));
    }
    if gesture_beats.is_empty() {
        return Ok(0.0);
    }
    let mut audio_beats = audio_beats.to_vec();
    audio_beats.sort_by(f64::total_cmp);
    let total: f64 = gesture_beats
        .iter()
        .map(|&g| {
            // The nearest audio beat neighbours the insertion point.
            let k = audio_beats.partition_point(|&a| a < g);
            let mut best = f64::INFINITY;
            for idx in [k.wrapping_sub(1), k] {
                if let Some(&a) = audio_beats.get(idx) {
                    best = best.min((g - a).abs());
                }
            }
            (-best * best / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / gesture_beats.len() as f64)
}

/// Weighted fraction of (frame, joint) rotations within `delta` radians of
/// ground truth. `weights` is frame-major with one entry per joint.
pub fn srgr(generated: &GestureSequence, truth: &GestureSequence, weights: &[f64], delta: f64) -> Result<f64> {
    if generated.frames() != truth.frames() || generated.joints() != truth.joints() {
        return Err(Error::shape(
            format!("{} x {}", truth.frames(), truth.joints()),
            format!("{} x {}", generated.frames(), generated.joints()),
        ));
    }
    if weights.len() != truth.rotations().len() {
        return Err(Error::shape(format!("{} weights", truth.rotations().len()), weights.len()));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::arg("weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::arg("weights must not all be zero"));
    }
    let hit: f64 = generated
        .rotations()
        .iter()
        .zip(truth.rotations())
        .zip(weights)
        .filter(|((g, t), _)| geodesic_distance(g, t) < delta)
        .map(|(_, w)| w)
        .sum();
    Ok(hit / total)
}

/// One row of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub label: String,
    pub fgd: f64,
    pub diversity: f64,
    pub srgr: f64,
    pub beat_align: f64,
}

pub const METRIC_COLUMNS: &str = "fgd,diversity,srgr,beat_align";

impl MetricRow {
    pub fn csv_values(&self) -> String {
        format!("{},{},{},{}", self.fgd, self.diversity, self.srgr, self.beat_align)
    }
}

/// Rows of metric values sharing one feature extractor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub extractor_checksum: String,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("label,{METRIC_COLUMNS},extractor_checksum\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.label, r.csv_values(), self.extractor_checksum);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<16} {:>12} {:>12} {:>8} {:>10}\n", "label", "FGD", "Diversity", "SRGR", "BeatAlign");
        for r in &self.rows {
            let _ = writeln!(out, "{:<16} {:>12.4} {:>12.4} {:>8.4} {:>10.4}", r.label, r.fgd, r.diversity, r.srgr, r.beat_align);
        }
        let _ = writeln!(out, "extractor {}", self.extractor_checksum);
        out
    }
}

/// Settings for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub diversity_pairs: usize,
    pub beat_sigma: f64,
    pub beat_smoothing: usize,
    pub srgr_delta: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            diversity_pairs: 1000,
            beat_sigma: DEFAULT_BEAT_SIGMA,
            beat_smoothing: DEFAULT_BEAT_SMOOTHING,
            srgr_delta: DEFAULT_SRGR_DELTA,
            seed: 0,
        }
    }
}

/// All four metrics for generated sequences paired with ground truth.
///
/// `audio_beats[i]` belongs to `truth[i]`; generated sequences are projected
/// onto rotations before the kinematic metrics. SRGR uses uniform weights.
pub fn evaluate(
    label: &str,
    truth: &[GestureSequence],
    generated: &[GestureSequence],
    audio_beats: &[Vec<f64>],
    extractor: &FeatureExtractor,
    cfg: &EvalConfig,
) -> Result<MetricRow> {
    use rand::SeedableRng;
    if truth.len() != generated.len() || truth.len() != audio_beats.len() {
        return Err(Error::arg("truth, generated and audio beat sets must have equal length"));
    }
    let flat = |s: &[GestureSequence]| -> Vec<FlatGesture> { s.iter().map(GestureSequence::to_flat).collect() };
    let fgd_value = fgd(&flat(truth), &flat(generated), extractor)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let div = diversity(&flat(generated), extractor, cfg.diversity_pairs, &mut rng)?;
    let mut align = 0.0;
    let mut recall = 0.0;
    for ((gt, gen), beats) in truth.iter().zip(generated).zip(audio_beats) {
        let gen = gen.project_to_rotations();
        align += beat_align(beats, &extract_gesture_beats(&gen, cfg.beat_smoothing)?, cfg.beat_sigma)?;
        let weights = vec![1.0; gt.rotations().len()];
        recall += srgr(&gen, gt, &weights, cfg.srgr_delta)?;
    }
    let n = truth.len() as f64;
    Ok(MetricRow { label: label.to_string(), fgd: fgd_value, diversity: div, srgr: recall / n, beat_align: align / n })
}
