//! Python bindings: the chord codec, similarity and Fréchet metrics, the
//! synthetic dataset generator, and train/generate round trips, exposed as
//! the `csg` extension module.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use csg_core::chord::{self, FrameSequence};
use csg_core::fusion::FusionMode;
use csg_core::metrics::{self, FeatureExtractor, FeatureStats};
use csg_core::model::{self, ModelConfig, ModelState, Sampler};
use csg_core::train::{self, SynthSpec, TrainConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Parses a chord label such as `C:maj` into its token id (48 for `N`).
#[pyfunction]
fn parse_chord_label(label: &str) -> PyResult<u16> {
    Ok(chord::parse_chord_label(label).map_err(value_err)?.token())
}

/// Renders a token id back into its label.
#[pyfunction]
fn chord_label(token: u16) -> PyResult<String> {
    if token == chord::NO_CHORD {
        return Ok("N".into());
    }
    Ok(chord::ChordToken::from_token_id(token)
        .map_err(value_err)?
        .to_string())
}

/// Expands scale degrees (`"6451"`) into diatonic triad token ids.
#[pyfunction]
#[pyo3(signature = (key_root, mode, digits))]
fn parse_progression(key_root: u8, mode: &str, digits: &str) -> PyResult<Vec<u16>> {
    let mode = match mode {
        "major" => chord::Mode::Major,
        "minor" => chord::Mode::Minor,
        other => return Err(value_err(format!("unknown mode {other:?}"))),
    };
    Ok(chord::parse_progression(key_root, mode, digits)
        .map_err(value_err)?
        .into_iter()
        .map(|c| c.token_id())
        .collect())
}

/// Quantizes `(start, end, label)` intervals into a frame-token list.
#[pyfunction]
#[pyo3(signature = (intervals, frame_rate_hz=50.0, total_duration=None))]
fn quantize(
    intervals: Vec<(f64, f64, String)>,
    frame_rate_hz: f64,
    total_duration: Option<f64>,
) -> PyResult<Vec<u16>> {
    let entries = intervals
        .into_iter()
        .map(|(start, end, label)| {
            Ok(chord::ChordInterval {
                start,
                end,
                label: chord::parse_chord_label(&label).map_err(value_err)?,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let list = chord::ChordIntervalList::new(entries).map_err(value_err)?;
    let duration = total_duration.unwrap_or_else(|| list.total_end());
    Ok(chord::quantize(&list, frame_rate_hz, duration)
        .map_err(value_err)?
        .tokens)
}

/// Shifts chord roots by `semitones`, leaving no-chord frames alone.
#[pyfunction]
fn transpose(tokens: Vec<u16>, semitones: i32) -> Vec<u16> {
    tokens
        .into_iter()
        .map(|t| chord::transpose_token(t, semitones))
        .collect()
}

/// Key-shift similarity; returns `(sim, best_shift, per_shift_accuracy)`.
#[pyfunction]
#[pyo3(signature = (predicted, target, frame_rate_hz=50.0))]
fn sim(
    predicted: Vec<u16>,
    target: Vec<u16>,
    frame_rate_hz: f64,
) -> PyResult<(f64, u8, Vec<f64>)> {
    let p = FrameSequence::new(predicted, frame_rate_hz);
    let t = FrameSequence::new(target, frame_rate_hz);
    let report = metrics::sim(&p, &t).map_err(value_err)?;
    Ok((
        report.sim,
        report.best_shift,
        report.per_shift_accuracy.to_vec(),
    ))
}

/// Fréchet distance between Gaussian feature summaries of two corpora of
/// token sequences, using a normalized token histogram per sequence.
#[pyfunction]
#[pyo3(signature = (a, b, vocab, bigrams=false))]
fn frechet_distance(
    a: Vec<Vec<u16>>,
    b: Vec<Vec<u16>>,
    vocab: usize,
    bigrams: bool,
) -> PyResult<f64> {
    let extractor = if bigrams {
        FeatureExtractor::BigramCounts
    } else {
        FeatureExtractor::TokenHistogram
    };
    let sa = metrics::feature_stats(&a, extractor, vocab).map_err(value_err)?;
    let sb = metrics::feature_stats(&b, extractor, vocab).map_err(value_err)?;
    metrics::frechet_distance(&sa, &sb).map_err(value_err)
}

/// Fréchet distance from explicit `(mean, covariance)` pairs, covariance in
/// row-major order.
#[pyfunction]
fn frechet_from_stats(
    mean_a: Vec<f64>,
    cov_a: Vec<f64>,
    mean_b: Vec<f64>,
    cov_b: Vec<f64>,
) -> PyResult<f64> {
    let a = FeatureStats {
        mean: mean_a,
        cov: cov_a,
    };
    let b = FeatureStats {
        mean: mean_b,
        cov: cov_b,
    };
    metrics::frechet_distance(&a, &b).map_err(value_err)
}

fn parse_mode(mode: &str) -> PyResult<FusionMode> {
    mode.parse::<FusionMode>().map_err(value_err)
}

/// `(step, loss, sim)` rows; sim is -1 before the first evaluation.
type CurveTriples = Vec<(usize, f64, f64)>;

/// A trained model handle.
#[pyclass]
struct Model {
    state: ModelState<f32>,
    rule: train::EmissionRule,
}

#[pymethods]
impl Model {
    /// Dimensions and mode summary.
    fn describe(&self) -> String {
        format!(
            "dim={} heads={} gpt_layers={} fusion={} params={}",
            self.state.config.dim,
            self.state.config.heads,
            self.state.config.gpt_layers,
            self.state.config.fusion_mode,
            self.state.param_count(),
        )
    }

    /// Autoregressive generation; returns `(vocal_tokens, song_tokens)`.
    #[pyo3(signature = (chords, lyrics, sampler="greedy", seed=0))]
    fn generate(
        &self,
        chords: Vec<u16>,
        lyrics: Vec<u16>,
        sampler: &str,
        seed: u64,
    ) -> PyResult<(Vec<u16>, Vec<u16>)> {
        let sampler = match sampler {
            "greedy" => Sampler::Greedy,
            s if s.starts_with("top-k:") => Sampler::TopK(
                s[6..]
                    .parse()
                    .map_err(|_| value_err(format!("bad sampler {s:?}")))?,
            ),
            s if s.starts_with("temp:") => Sampler::Temperature(
                s[5..]
                    .parse()
                    .map_err(|_| value_err(format!("bad sampler {s:?}")))?,
            ),
            other => return Err(value_err(format!("unknown sampler {other:?}"))),
        };
        model::generate(&self.state, &chords, &lyrics, sampler, seed).map_err(value_err)
    }

    /// Recovers the chord stream encoded in generated song tokens.
    #[pyo3(signature = (song_tokens, window=5))]
    fn extract_chords(&self, song_tokens: Vec<u16>, window: usize) -> Vec<u16> {
        metrics::extract_chords_from_tokens(&song_tokens, &self.rule, window, 50.0).tokens
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save_checkpoint(&self.state, path).map_err(|e| PyIOError::new_err(e.to_string()))
    }
}

/// Loads a checkpoint written by `save` or the `csg train` command.
#[pyfunction]
fn load_model(path: &str) -> PyResult<Model> {
    let state = model::load_checkpoint::<f32>(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let rule = train::EmissionRule {
        lyric_vocab: state.config.lyric_vocab as u16,
        vocal_vocab: state.config.vocal_vocab as u16,
        song_vocab: state.config.song_vocab as u16,
        ..train::EmissionRule::default()
    };
    Ok(Model { state, rule })
}

/// Trains a model on the synthetic task and returns it with its curve.
///
/// `overrides` accepts the same flat keys as the CLI config file, e.g.
/// `{"dim": "32", "steps": "200", "fusion_mode": "concat"}`.
#[pyfunction]
#[pyo3(signature = (overrides=None))]
fn train_model(
    overrides: Option<std::collections::HashMap<String, String>>,
) -> PyResult<(Model, CurveTriples)> {
    let mut kv = csg_core::io::KvMap::new();
    if let Some(map) = overrides {
        // HashMap order is arbitrary; sort for a deterministic config echo
        let mut items: Vec<_> = map.into_iter().collect();
        items.sort();
        for (k, v) in items {
            kv.set_str(&k, &v);
        }
    }
    let model_cfg = ModelConfig::from_kv(&kv).map_err(value_err)?;
    let train_cfg = TrainConfig::from_kv(&kv).map_err(value_err)?;
    let spec = SynthSpec::from_kv(&kv).map_err(value_err)?;
    let (train_ds, eval_ds) = train::generate_dataset(&spec).map_err(value_err)?;
    let outcome =
        train::train::<f32>(&model_cfg, &train_cfg, &train_ds, &eval_ds).map_err(value_err)?;
    let curve = outcome
        .curve
        .iter()
        .map(|p| (p.step, p.loss, p.eval_sim.unwrap_or(-1.0)))
        .collect();
    Ok((
        Model {
            state: outcome.state,
            rule: train_ds.spec.rule.clone(),
        },
        curve,
    ))
}

/// Generates the synthetic dataset; returns per-example dicts of token
/// streams.
#[pyfunction]
#[pyo3(signature = (overrides=None))]
fn synth_dataset(
    py: Python<'_>,
    overrides: Option<std::collections::HashMap<String, String>>,
) -> PyResult<(Py<PyAny>, Py<PyAny>)> {
    use pyo3::types::{PyDict, PyList};
    let mut kv = csg_core::io::KvMap::new();
    if let Some(map) = overrides {
        let mut items: Vec<_> = map.into_iter().collect();
        items.sort();
        for (k, v) in items {
            kv.set_str(&k, &v);
        }
    }
    let spec = SynthSpec::from_kv(&kv).map_err(value_err)?;
    let (train_ds, eval_ds) = train::generate_dataset(&spec).map_err(value_err)?;
    let to_py = |ds: &train::Dataset| -> PyResult<Py<PyAny>> {
        let list = PyList::empty(py);
        for ex in &ds.examples {
            let d = PyDict::new(py);
            d.set_item("chord_clean", ex.chord_clean.clone())?;
            d.set_item("chord_noisy", ex.chord_noisy.clone())?;
            d.set_item("lyric", ex.lyric_tokens.clone())?;
            d.set_item("vocal", ex.vocal_tokens.clone())?;
            d.set_item("song", ex.song_tokens.clone())?;
            list.append(d)?;
        }
        Ok(list.into_any().unbind())
    };
    Ok((to_py(&train_ds)?, to_py(&eval_ds)?))
}

/// Checks that a fusion-mode string is understood (dws, concat, xattn,
/// none).
#[pyfunction]
fn fusion_modes() -> Vec<String> {
    FusionMode::ALL.iter().map(|m| m.to_string()).collect()
}

#[pymodule]
fn csg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parse_chord_label, m)?)?;
    m.add_function(wrap_pyfunction!(chord_label, m)?)?;
    m.add_function(wrap_pyfunction!(parse_progression, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(transpose, m)?)?;
    m.add_function(wrap_pyfunction!(sim, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_from_stats, m)?)?;
    m.add_function(wrap_pyfunction!(load_model, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(fusion_modes, m)?)?;
    m.add_class::<Model>()?;
    m.add("NO_CHORD", chord::NO_CHORD)?;
    let _ = parse_mode;
    Ok(())
}
