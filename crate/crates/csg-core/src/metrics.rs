//! Control-precision and fidelity metrics.
//!
//! `sim` scores how well a predicted chord stream tracks a target stream
//! under the best single global key shift. The Fréchet distance compares
//! Gaussian statistics of pluggable symbolic feature extractors, standing in
//! for audio-embedding distances.

use crate::chord::{transpose_token, FrameSequence, NO_CHORD};
use crate::io::KvMap;
use crate::linalg;
use crate::train::EmissionRule;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("frame count mismatch: predicted {predicted} vs target {target}")]
    LengthMismatch { predicted: usize, target: usize },
    #[error("frame rate mismatch: predicted {predicted} Hz vs target {target} Hz")]
    RateMismatch { predicted: f64, target: f64 },
    #[error("feature dimension mismatch: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },
    #[error("covariance not symmetric: max |S_ij - S_ji| = {0}")]
    NotSymmetric(f64),
    #[error("covariance not PSD: eigenvalue {0} below tolerance")]
    NotPsd(f64),
    #[error("feature_stats needs at least one sequence")]
    NoSequences,
}

/// Key-shift similarity report.
#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub best_shift: u8,
    pub sim: f64,
    pub per_shift_accuracy: [f64; 12],
}

impl SimReport {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("sim", format!("{:.6}", self.sim));
        kv.set("best_shift", self.best_shift);
        for (k, acc) in self.per_shift_accuracy.iter().enumerate() {
            kv.set(&format!("shift_{k}"), format!("{acc:.6}"));
        }
        kv
    }
}

/// Fraction of frames whose chord matches the target under the best global
/// transposition of the predicted stream.
///
/// Frames where both streams mark no-chord drop out of the denominator;
/// one-sided no-chord counts as a miss here, so silence cannot inflate the
/// score. If every frame drops out the score is vacuously 1.
pub fn sim(predicted: &FrameSequence, target: &FrameSequence) -> Result<SimReport, MetricsError> {
    if predicted.len() != target.len() {
        return Err(MetricsError::LengthMismatch {
            predicted: predicted.len(),
            target: target.len(),
        });
    }
    if predicted.frame_rate_hz != target.frame_rate_hz {
        return Err(MetricsError::RateMismatch {
            predicted: predicted.frame_rate_hz,
            target: target.frame_rate_hz,
        });
    }
    let mut per_shift_accuracy = [0.0f64; 12];
    for (k, acc) in per_shift_accuracy.iter_mut().enumerate() {
        let mut matches = 0usize;
        let mut denom = 0usize;
        for (&p, &t) in predicted.tokens.iter().zip(&target.tokens) {
            if p == NO_CHORD && t == NO_CHORD {
                continue;
            }
            denom += 1;
            if transpose_token(p, k as i32) == t {
                matches += 1;
            }
        }
        *acc = if denom == 0 {
            1.0
        } else {
            matches as f64 / denom as f64
        };
    }
    let mut best_shift = 0u8;
    for k in 1..12 {
        if per_shift_accuracy[k] > per_shift_accuracy[best_shift as usize] {
            best_shift = k as u8;
        }
    }
    Ok(SimReport {
        best_shift,
        sim: per_shift_accuracy[best_shift as usize],
        per_shift_accuracy,
    })
}

/// Recovers the chord stream a generated song-token sequence encodes by
/// scoring every chord candidate (plus no-chord) against the emission rule
/// over a sliding window, the windowed form of a majority filter.
///
/// Score ties keep the previous frame's decision when it is among the
/// leaders (a chord playing only shared triad tones inside the window stays
/// locked to the running chord) and otherwise fall to the lowest candidate
/// id.
pub fn extract_chords_from_tokens(
    song_tokens: &[u16],
    rule: &EmissionRule,
    window: usize,
    frame_rate_hz: f64,
) -> FrameSequence {
    let n = song_tokens.len();
    let half = window.max(1) / 2;
    let mut out: Vec<u16> = Vec::with_capacity(n);
    for t in 0..n {
        let lo = t.saturating_sub(half);
        let hi = (t + half).min(n.saturating_sub(1));
        let mut best = NO_CHORD;
        let mut best_score = -1i32;
        for candidate in 0..=NO_CHORD {
            let mut score = 0i32;
            for &s in &song_tokens[lo..=hi] {
                if rule.emission_matches(s, candidate) {
                    score += 1;
                }
            }
            if score > best_score {
                best_score = score;
                best = candidate;
            } else if score == best_score {
                if let Some(&prev) = out.last() {
                    if candidate == prev {
                        best = candidate;
                    }
                }
            }
        }
        out.push(best);
    }
    FrameSequence::new(out, frame_rate_hz)
}

/// Gaussian summary of a feature cloud: mean and unbiased covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`, symmetric.
    pub cov: Vec<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-sequence symbolic feature extractors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureExtractor {
    /// Normalized token histogram; feature dimension is the vocabulary.
    TokenHistogram,
    /// Normalized counts of adjacent token pairs; dimension is vocab^2.
    BigramCounts,
}

impl FeatureExtractor {
    pub fn dim(self, vocab: usize) -> usize {
        match self {
            FeatureExtractor::TokenHistogram => vocab,
            FeatureExtractor::BigramCounts => vocab * vocab,
        }
    }

    pub fn features(self, tokens: &[u16], vocab: usize) -> Vec<f64> {
        let mut f = vec![0.0; self.dim(vocab)];
        match self {
            FeatureExtractor::TokenHistogram => {
                if tokens.is_empty() {
                    return f;
                }
                let w = 1.0 / tokens.len() as f64;
                for &t in tokens {
                    f[(t as usize).min(vocab - 1)] += w;
                }
            }
            FeatureExtractor::BigramCounts => {
                if tokens.len() < 2 {
                    return f;
                }
                let w = 1.0 / (tokens.len() - 1) as f64;
                for pair in tokens.windows(2) {
                    let a = (pair[0] as usize).min(vocab - 1);
                    let b = (pair[1] as usize).min(vocab - 1);
                    f[a * vocab + b] += w;
                }
            }
        }
        f
    }
}

/// Aggregates per-sequence features into mean and unbiased covariance.
pub fn feature_stats(
    sequences: &[Vec<u16>],
    extractor: FeatureExtractor,
    vocab: usize,
) -> Result<FeatureStats, MetricsError> {
    if sequences.is_empty() {
        return Err(MetricsError::NoSequences);
    }
    let dim = extractor.dim(vocab);
    let n = sequences.len();
    let feats: Vec<Vec<f64>> = sequences
        .iter()
        .map(|s| extractor.features(s, vocab))
        .collect();
    let mut mean = vec![0.0; dim];
    for f in &feats {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; dim * dim];
    if n > 1 {
        let norm = 1.0 / (n as f64 - 1.0);
        for f in &feats {
            for i in 0..dim {
                let di = f[i] - mean[i];
                for j in i..dim {
                    cov[i * dim + j] += di * (f[j] - mean[j]) * norm;
                }
            }
        }
        for i in 0..dim {
            for j in 0..i {
                cov[i * dim + j] = cov[j * dim + i];
            }
        }
    }
    Ok(FeatureStats { mean, cov })
}

const PSD_TOL: f64 = -1e-8;
const SYM_TOL: f64 = 1e-9;

/// Fréchet distance between two Gaussian summaries:
/// `|m1 - m2|^2 + tr(S1 + S2 - 2 sqrt(S1 S2))`, with the matrix square root
/// taken through the symmetrized product `sqrt(S2) S1 sqrt(S2)`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64, MetricsError> {
    let n = a.dim();
    if b.dim() != n {
        return Err(MetricsError::DimMismatch { a: n, b: b.dim() });
    }
    for stats in [a, b] {
        let asym = linalg::max_asymmetry(&stats.cov, n);
        if asym > SYM_TOL {
            return Err(MetricsError::NotSymmetric(asym));
        }
        let min_eig = linalg::min_eigenvalue(&stats.cov, n);
        if min_eig < PSD_TOL {
            return Err(MetricsError::NotPsd(min_eig));
        }
    }

    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let trace = |m: &[f64]| (0..n).map(|i| m[i * n + i]).sum::<f64>();

    let sqrt_b = linalg::sqrtm_psd(&b.cov, n);
    let inner = linalg::matmul_sq(&sqrt_b, &linalg::matmul_sq(&a.cov, &sqrt_b, n), n);
    // symmetrize before the eigensolve; the product drifts at roundoff level
    let mut sym = inner.clone();
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = 0.5 * (inner[i * n + j] + inner[j * n + i]);
        }
    }
    let (eigs, _) = linalg::sym_eig(&sym, n);
    let trace_sqrt: f64 = eigs.iter().map(|&e| e.max(0.0).sqrt()).sum();

    let d = mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * trace_sqrt;
    Ok(d.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chord::transpose;

    fn seq(tokens: &[u16]) -> FrameSequence {
        FrameSequence::new(tokens.to_vec(), 50.0)
    }

    #[test]
    fn sim_identity_is_one() {
        let x = seq(&[0, 4, 37, 20, NO_CHORD]);
        let r = sim(&x, &x).unwrap();
        assert_eq!(r.sim, 1.0);
        assert_eq!(r.best_shift, 0);
    }

    #[test]
    fn sim_finds_global_shift() {
        let x = seq(&[0, 4, 37, 20]);
        let shifted = transpose(&x, 5);
        let r = sim(&shifted, &x).unwrap();
        assert_eq!(r.sim, 1.0);
        assert_eq!(r.best_shift, 7, "+5 then +7 is a full octave");
    }

    #[test]
    fn sim_hand_derived_example() {
        // predicted [C:maj, C:maj, A:min, G:maj], target [D:maj, D:maj,
        // B:min, G:maj]: shift 2 fixes the first three, misses the last
        let predicted = seq(&[0, 0, 37, 28]);
        let target = seq(&[8, 8, 45, 28]);
        let r = sim(&predicted, &target).unwrap();
        assert_eq!(r.best_shift, 2);
        assert!((r.sim - 0.75).abs() < 1e-12);
        assert_eq!(r.sim, r.per_shift_accuracy[2]);
    }

    #[test]
    fn sim_no_chord_denominator_rules() {
        // both no-chord: excluded; one-sided: a miss
        let predicted = seq(&[NO_CHORD, NO_CHORD, 0, 0]);
        let target = seq(&[NO_CHORD, 0, NO_CHORD, 0]);
        let r = sim(&predicted, &target).unwrap();
        // frame 0 excluded; frames 1, 2 miss; frame 3 hits at shift 0
        assert!((r.per_shift_accuracy[0] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.sim, r.per_shift_accuracy[r.best_shift as usize]);
    }

    #[test]
    fn sim_all_silence_is_vacuous_match() {
        let x = seq(&[NO_CHORD; 4]);
        let r = sim(&x, &x).unwrap();
        assert_eq!(r.sim, 1.0);
        assert_eq!(r.best_shift, 0);
    }

    #[test]
    fn sim_rejects_length_mismatch() {
        let a = seq(&[0, 0]);
        let b = seq(&[0]);
        assert!(matches!(
            sim(&a, &b),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn sim_invariant_under_predicted_transposition() {
        let mut rng_tokens = [0u16; 64];
        let mut state = 12345u64;
        for t in rng_tokens.iter_mut() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            *t = ((state >> 33) % 49) as u16;
        }
        let p = seq(&rng_tokens);
        let mut target_tokens = rng_tokens;
        target_tokens.rotate_left(3);
        let t = seq(&target_tokens);
        let base = sim(&p, &t).unwrap().sim;
        for k in 0..12 {
            let r = sim(&transpose(&p, k), &t).unwrap();
            assert!((r.sim - base).abs() < 1e-12);
        }
    }

    #[test]
    fn frechet_identical_stats_is_zero() {
        let s = FeatureStats {
            mean: vec![0.3, -0.2, 1.1],
            cov: vec![
                1.0, 0.2, 0.0, //
                0.2, 0.8, 0.1, //
                0.0, 0.1, 0.5,
            ],
        };
        let d = frechet_distance(&s, &s).unwrap();
        assert!(d.abs() <= 1e-8, "{d}");
    }

    #[test]
    fn frechet_analytic_one_dimensional() {
        let a = FeatureStats {
            mean: vec![0.0],
            cov: vec![1.0],
        };
        let b = FeatureStats {
            mean: vec![1.0],
            cov: vec![1.0],
        };
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() <= 1e-8, "{d}");
    }

    #[test]
    fn frechet_rejects_asymmetric_covariance() {
        let a = FeatureStats {
            mean: vec![0.0, 0.0],
            cov: vec![1.0, 0.5, -0.5, 1.0],
        };
        assert!(matches!(
            frechet_distance(&a, &a),
            Err(MetricsError::NotSymmetric(_))
        ));
    }

    #[test]
    fn frechet_rejects_indefinite_covariance() {
        let a = FeatureStats {
            mean: vec![0.0, 0.0],
            cov: vec![1.0, 2.0, 2.0, 1.0], // eigenvalues 3 and -1
        };
        let b = FeatureStats {
            mean: vec![0.0, 0.0],
            cov: vec![1.0, 0.0, 0.0, 1.0],
        };
        assert!(matches!(
            frechet_distance(&a, &b),
            Err(MetricsError::NotPsd(_))
        ));
    }

    #[test]
    fn histogram_features_normalize() {
        let f = FeatureExtractor::TokenHistogram.features(&[0, 0, 1, 3], 4);
        assert_eq!(f, vec![0.5, 0.25, 0.0, 0.25]);
        let g = FeatureExtractor::BigramCounts.features(&[0, 1, 0, 1], 2);
        // pairs: (0,1) (1,0) (0,1)
        assert_eq!(g, vec![0.0, 2.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn feature_stats_single_sequence_has_zero_cov() {
        let s = feature_stats(&[vec![0, 1, 2, 3]], FeatureExtractor::TokenHistogram, 4).unwrap();
        assert!(s.cov.iter().all(|&v| v == 0.0));
    }
}
