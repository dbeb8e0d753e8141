//! Synthetic training harness: toy-song dataset generation with
//! controllable chord-label noise, Adam with linear warm-up, and the
//! fusion-mode ablation runner.
//!
//! The synthetic task is built so chord control is measurable: song tokens
//! arpeggiate the active chord (root plus a quality-dependent interval
//! cycling with the frame index), with a lyric/style band on top, and vocal
//! tokens follow the lyrics. Chord identity is recoverable from song tokens
//! alone, which is what the evaluation-side extractor does. Training inputs
//! can corrupt a fraction of chord frames; targets always come from the
//! clean schedule, and evaluation always scores against clean chords.

use crate::chord::{parse_progression, FrameSequence, Mode, CHORD_TOKENS, NO_CHORD};
use crate::fusion::FusionMode;
use crate::io::{self, KvMap};
use crate::metrics::{
    extract_chords_from_tokens, feature_stats, frechet_distance, sim, FeatureExtractor,
    MetricsError, SimReport,
};
use crate::model::{
    forward_with_history, generate, ModelConfig, ModelError, ModelState, Sampler, SongBatch,
};
use crate::tensor::{Element, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (lr {lr:.3e}, grad norm {grad_norm:.3e})")]
    NonFiniteLoss { step: usize, lr: f64, grad_norm: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("invalid synth spec: {0}")]
    Spec(String),
    #[error("dataset {path}: {message}")]
    Dataset { path: String, message: String },
    #[error("dataset has no examples")]
    EmptyDataset,
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, TrainError>;

// ── emission rule ───────────────────────────────────────────────────

/// Arpeggio interval per quality: root, third, fifth.
const ARPEGGIO: [[u16; 3]; 4] = [
    [0, 4, 7], // major
    [0, 3, 7], // minor
    [0, 4, 8], // augmented
    [0, 3, 6], // diminished
];

/// First song token of the no-chord band.
const NO_CHORD_BAND: u16 = 24;

/// Deterministic mapping from (chord, lyric, style) to song tokens and from
/// (lyric, style) to vocal tokens.
///
/// The song token plays one tone of the active chord's triad, the lyric
/// token choosing which of root/third/fifth sounds this frame. Lyrics are
/// drawn fresh per frame, so the chord stream is consulted on every frame
/// rather than only at chord changes, and the played tone occupies
/// `song % 12` in the band below 24 while no-chord frames emit in 24..32.
/// Chord identity is therefore recoverable from song tokens alone through
/// triad-membership scoring, no lyrics required.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionRule {
    pub lyric_vocab: u16,
    pub vocal_vocab: u16,
    pub song_vocab: u16,
    /// Markov persistence of the styling bits.
    pub style_stay_prob: f64,
}

impl Default for EmissionRule {
    fn default() -> Self {
        EmissionRule {
            lyric_vocab: 32,
            vocal_vocab: 32,
            song_vocab: 32,
            style_stay_prob: 0.9,
        }
    }
}

impl EmissionRule {
    pub fn validate(&self) -> Result<()> {
        if self.song_vocab < 32 {
            return Err(TrainError::Spec(format!(
                "song_vocab must be >= 32 to hold the emission bands, got {}",
                self.song_vocab
            )));
        }
        if self.vocal_vocab < 2 || self.lyric_vocab < 2 {
            return Err(TrainError::Spec(
                "lyric_vocab and vocal_vocab must be >= 2".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.style_stay_prob) {
            return Err(TrainError::Spec(format!(
                "style_stay_prob {} outside [0, 1]",
                self.style_stay_prob
            )));
        }
        Ok(())
    }

    /// Pitch class `chord` sounds when the lyric selects arpeggio step
    /// `lyric % 3`.
    pub fn arpeggio_pitch(&self, chord: u16, lyric: u16) -> u16 {
        let root = chord / 4;
        let quality = (chord % 4) as usize;
        (root + ARPEGGIO[quality][(lyric % 3) as usize]) % 12
    }

    /// All pitch classes `chord` can sound, over the three arpeggio steps.
    pub fn tone_set(&self, chord: u16) -> [u16; 3] {
        let root = chord / 4;
        let quality = (chord % 4) as usize;
        [
            (root + ARPEGGIO[quality][0]) % 12,
            (root + ARPEGGIO[quality][1]) % 12,
            (root + ARPEGGIO[quality][2]) % 12,
        ]
    }

    pub fn song_token(&self, chord: u16, lyric: u16, style: u16) -> u16 {
        if chord == NO_CHORD {
            NO_CHORD_BAND + (lyric + 5 * style) % 8
        } else {
            let band = (lyric + style) % 2;
            self.arpeggio_pitch(chord, lyric) + 12 * band
        }
    }

    pub fn vocal_token(&self, lyric: u16, style: u16) -> u16 {
        (2 * lyric + style) % self.vocal_vocab
    }

    /// Whether a song token is consistent with `candidate` (a chord token or
    /// 48 for no-chord), marginalizing the lyric and style bits.
    pub fn emission_matches(&self, song_token: u16, candidate: u16) -> bool {
        if candidate == NO_CHORD {
            song_token >= NO_CHORD_BAND
        } else {
            song_token < NO_CHORD_BAND && self.tone_set(candidate).contains(&(song_token % 12))
        }
    }

    fn to_kv(&self, kv: &mut KvMap) {
        kv.set("lyric_vocab", self.lyric_vocab);
        kv.set("vocal_vocab", self.vocal_vocab);
        kv.set("song_vocab", self.song_vocab);
        kv.set("style_stay_prob", self.style_stay_prob);
    }

    fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = EmissionRule::default();
        Ok(EmissionRule {
            lyric_vocab: kv.get_or("lyric_vocab", d.lyric_vocab).map_err(TrainError::Spec)?,
            vocal_vocab: kv.get_or("vocal_vocab", d.vocal_vocab).map_err(TrainError::Spec)?,
            song_vocab: kv.get_or("song_vocab", d.song_vocab).map_err(TrainError::Spec)?,
            style_stay_prob: kv
                .get_or("style_stay_prob", d.style_stay_prob)
                .map_err(TrainError::Spec)?,
        })
    }
}

// ── synthetic dataset ───────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_eval: usize,
    pub frames_per_example: usize,
    pub frame_rate_hz: f64,
    /// Chord segment length range, in frames.
    pub segment_min: usize,
    pub segment_max: usize,
    /// Lyric segment length range, in frames.
    pub lyric_segment_min: usize,
    pub lyric_segment_max: usize,
    /// Probability that a chord segment is silent.
    pub no_chord_prob: f64,
    /// Fraction of training chord frames replaced by a wrong token.
    pub noise_rate: f64,
    /// Fraction of previous-frame vocal/song input tokens randomized per
    /// training pass. Targets stay clean; this keeps the model from leaning
    /// on its own history for chord identity, which would compound errors
    /// during autoregressive generation.
    pub history_noise_rate: f64,
    pub seed: u64,
    pub rule: EmissionRule,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_train: 512,
            n_eval: 32,
            frames_per_example: 256,
            frame_rate_hz: 50.0,
            segment_min: 40,
            segment_max: 80,
            lyric_segment_min: 1,
            lyric_segment_max: 1,
            no_chord_prob: 0.08,
            noise_rate: 0.0,
            history_noise_rate: 0.4,
            seed: 0,
            rule: EmissionRule::default(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.rule.validate()?;
        if self.frames_per_example == 0 {
            return Err(TrainError::Spec("frames_per_example must be positive".into()));
        }
        if self.segment_min == 0 || self.segment_min > self.segment_max {
            return Err(TrainError::Spec(format!(
                "bad chord segment range {}..={}",
                self.segment_min, self.segment_max
            )));
        }
        if self.lyric_segment_min == 0 || self.lyric_segment_min > self.lyric_segment_max {
            return Err(TrainError::Spec(format!(
                "bad lyric segment range {}..={}",
                self.lyric_segment_min, self.lyric_segment_max
            )));
        }
        for (name, p) in [
            ("no_chord_prob", self.no_chord_prob),
            ("noise_rate", self.noise_rate),
            ("history_noise_rate", self.history_noise_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TrainError::Spec(format!("{name} {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("n_train", self.n_train);
        kv.set("n_eval", self.n_eval);
        kv.set("frames_per_example", self.frames_per_example);
        kv.set("frame_rate_hz", self.frame_rate_hz);
        kv.set("segment_min", self.segment_min);
        kv.set("segment_max", self.segment_max);
        kv.set("lyric_segment_min", self.lyric_segment_min);
        kv.set("lyric_segment_max", self.lyric_segment_max);
        kv.set("no_chord_prob", self.no_chord_prob);
        kv.set("noise_rate", self.noise_rate);
        kv.set("history_noise_rate", self.history_noise_rate);
        kv.set("synth_seed", self.seed);
        self.rule.to_kv(&mut kv);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = SynthSpec::default();
        let spec = SynthSpec {
            n_train: kv.get_or("n_train", d.n_train).map_err(TrainError::Spec)?,
            n_eval: kv.get_or("n_eval", d.n_eval).map_err(TrainError::Spec)?,
            frames_per_example: kv
                .get_or("frames_per_example", d.frames_per_example)
                .map_err(TrainError::Spec)?,
            frame_rate_hz: kv
                .get_or("frame_rate_hz", d.frame_rate_hz)
                .map_err(TrainError::Spec)?,
            segment_min: kv
                .get_or("segment_min", d.segment_min)
                .map_err(TrainError::Spec)?,
            segment_max: kv
                .get_or("segment_max", d.segment_max)
                .map_err(TrainError::Spec)?,
            lyric_segment_min: kv
                .get_or("lyric_segment_min", d.lyric_segment_min)
                .map_err(TrainError::Spec)?,
            lyric_segment_max: kv
                .get_or("lyric_segment_max", d.lyric_segment_max)
                .map_err(TrainError::Spec)?,
            no_chord_prob: kv
                .get_or("no_chord_prob", d.no_chord_prob)
                .map_err(TrainError::Spec)?,
            noise_rate: kv
                .get_or("noise_rate", d.noise_rate)
                .map_err(TrainError::Spec)?,
            history_noise_rate: kv
                .get_or("history_noise_rate", d.history_noise_rate)
                .map_err(TrainError::Spec)?,
            seed: kv.get_or("synth_seed", d.seed).map_err(TrainError::Spec)?,
            rule: EmissionRule::from_kv(kv)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthExample {
    pub chord_clean: Vec<u16>,
    pub chord_noisy: Vec<u16>,
    pub lyric_tokens: Vec<u16>,
    pub vocal_tokens: Vec<u16>,
    pub song_tokens: Vec<u16>,
}

impl SynthExample {
    /// Assembles the training view; `noisy` selects which chord stream the
    /// model sees. Targets always come from the clean schedule.
    pub fn batch(&self, noisy: bool) -> SongBatch {
        SongBatch {
            chord_tokens: if noisy {
                self.chord_noisy.clone()
            } else {
                self.chord_clean.clone()
            },
            lyric_tokens: self.lyric_tokens.clone(),
            vocal_tokens: self.vocal_tokens.clone(),
            song_tokens: self.song_tokens.clone(),
        }
    }

    pub fn clean_chords(&self, frame_rate_hz: f64) -> FrameSequence {
        FrameSequence::new(self.chord_clean.clone(), frame_rate_hz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    fn stream_tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub split: Split,
    pub examples: Vec<SynthExample>,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 avalanche over the combined words
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn corrupt_history(tokens: &[u16], vocab: u16, rate: f64, rng: &mut ChaCha8Rng) -> Vec<u16> {
    if rate <= 0.0 {
        return tokens.to_vec();
    }
    tokens
        .iter()
        .map(|&t| {
            if rng.random_bool(rate) {
                rng.random_range(0..vocab)
            } else {
                t
            }
        })
        .collect()
}

fn markov_chain(rng: &mut ChaCha8Rng, stay_prob: f64, frames: usize) -> Vec<u16> {
    let mut chain = Vec::with_capacity(frames);
    let mut state: u16 = rng.random_bool(0.5) as u16;
    for _ in 0..frames {
        chain.push(state);
        if !rng.random_bool(stay_prob) {
            state ^= 1;
        }
    }
    chain
}

fn synth_example(spec: &SynthSpec, split: Split, index: usize) -> SynthExample {
    let mut rng =
        ChaCha8Rng::seed_from_u64(mix(mix(spec.seed, split.stream_tag()), index as u64 + 1));
    let frames = spec.frames_per_example;

    // chord schedule: random diatonic progressions over random keys, each
    // chord held for a random segment length, with occasional silence
    let mut chords: Vec<u16> = Vec::with_capacity(frames);
    'outer: loop {
        let key = rng.random_range(0..12u8);
        let mode = if rng.random_bool(0.5) {
            Mode::Major
        } else {
            Mode::Minor
        };
        let n_digits = rng.random_range(3..=5usize);
        let digits: String = (0..n_digits)
            .map(|_| char::from(b'1' + rng.random_range(0..7u8)))
            .collect();
        let progression =
            parse_progression(key, mode, &digits).expect("generated digits are valid degrees");
        for chord in progression {
            let seg = rng.random_range(spec.segment_min..=spec.segment_max);
            let token = if rng.random_bool(spec.no_chord_prob) {
                NO_CHORD
            } else {
                chord.token_id()
            };
            for _ in 0..seg {
                chords.push(token);
                if chords.len() == frames {
                    break 'outer;
                }
            }
        }
    }

    let mut lyrics: Vec<u16> = Vec::with_capacity(frames);
    while lyrics.len() < frames {
        let seg = rng.random_range(spec.lyric_segment_min..=spec.lyric_segment_max);
        let token = rng.random_range(0..spec.rule.lyric_vocab);
        for _ in 0..seg {
            lyrics.push(token);
            if lyrics.len() == frames {
                break;
            }
        }
    }

    let song_style = markov_chain(&mut rng, spec.rule.style_stay_prob, frames);
    let vocal_style = markov_chain(&mut rng, spec.rule.style_stay_prob, frames);

    let song_tokens: Vec<u16> = (0..frames)
        .map(|t| spec.rule.song_token(chords[t], lyrics[t], song_style[t]))
        .collect();
    let vocal_tokens: Vec<u16> = (0..frames)
        .map(|t| spec.rule.vocal_token(lyrics[t], vocal_style[t]))
        .collect();

    // Corruption arrives in short bursts (mean length 4 frames), the way
    // automatic chord extractors fail, with the marginal corrupted fraction
    // equal to noise_rate. Replacement tokens are uniform over the wrong
    // chords, drawn fresh per frame.
    const BURST_STAY: f64 = 0.75;
    let enter_prob = if spec.noise_rate >= 1.0 {
        1.0
    } else {
        (spec.noise_rate * (1.0 - BURST_STAY) / (1.0 - spec.noise_rate)).min(1.0)
    };
    let mut in_burst = false;
    let chord_noisy: Vec<u16> = chords
        .iter()
        .map(|&c| {
            in_burst = if spec.noise_rate >= 1.0 {
                true
            } else if in_burst {
                rng.random_bool(BURST_STAY)
            } else {
                spec.noise_rate > 0.0 && rng.random_bool(enter_prob)
            };
            if in_burst {
                if c == NO_CHORD {
                    rng.random_range(0..CHORD_TOKENS)
                } else {
                    let r = rng.random_range(0..CHORD_TOKENS - 1);
                    if r >= c {
                        r + 1
                    } else {
                        r
                    }
                }
            } else {
                c
            }
        })
        .collect();

    SynthExample {
        chord_clean: chords,
        chord_noisy,
        lyric_tokens: lyrics,
        vocal_tokens,
        song_tokens,
    }
}

/// Generates train and eval splits. A pure function of the spec: the same
/// spec yields byte-identical datasets.
pub fn generate_dataset(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let make = |split: Split, n: usize| Dataset {
        spec: spec.clone(),
        split,
        examples: (0..n).map(|i| synth_example(spec, split, i)).collect(),
    };
    Ok((
        make(Split::Train, spec.n_train),
        make(Split::Eval, spec.n_eval),
    ))
}

impl Dataset {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("format = csg-dataset-v1\n");
        out.push_str(&format!("split = {}\n", self.split.as_str()));
        out.push_str(&self.spec.to_kv().to_string());
        out.push_str(&format!("n_examples = {}\n", self.examples.len()));
        for (i, ex) in self.examples.iter().enumerate() {
            out.push('\n');
            out.push_str(&format!("example = {i}\n"));
            for (key, tokens) in [
                ("chord_clean", &ex.chord_clean),
                ("chord_noisy", &ex.chord_noisy),
                ("lyric", &ex.lyric_tokens),
                ("vocal", &ex.vocal_tokens),
                ("song", &ex.song_tokens),
            ] {
                let joined: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
                out.push_str(&format!("{key} = {}\n", joined.join(" ")));
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        io::atomic_write_str(path, &self.to_text()).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Dataset::from_text(&text).map_err(|message| TrainError::Dataset {
            path: path.display().to_string(),
            message,
        })
    }

    pub fn from_text(text: &str) -> std::result::Result<Dataset, String> {
        let header_end = text.find("\nexample =").unwrap_or(text.len());
        let header = KvMap::parse(&text[..header_end])?;
        if header.get_str("format") != Some("csg-dataset-v1") {
            return Err("missing or unknown format marker".into());
        }
        let split = match header.get_str("split") {
            Some("train") => Split::Train,
            Some("eval") => Split::Eval,
            other => return Err(format!("bad split {other:?}")),
        };
        let spec = SynthSpec::from_kv(&header).map_err(|e| e.to_string())?;
        let n: usize = header.get_or("n_examples", 0)?;

        let mut examples = Vec::with_capacity(n);
        let mut current: Option<SynthExample> = None;
        let parse_tokens = |v: &str| -> std::result::Result<Vec<u16>, String> {
            v.split_whitespace()
                .map(|t| t.parse::<u16>().map_err(|e| format!("bad token {t:?}: {e}")))
                .collect()
        };
        for line in text[header_end..].lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "example" => {
                    if let Some(ex) = current.take() {
                        examples.push(ex);
                    }
                    current = Some(SynthExample {
                        chord_clean: Vec::new(),
                        chord_noisy: Vec::new(),
                        lyric_tokens: Vec::new(),
                        vocal_tokens: Vec::new(),
                        song_tokens: Vec::new(),
                    });
                }
                "chord_clean" | "chord_noisy" | "lyric" | "vocal" | "song" => {
                    let ex = current.as_mut().ok_or("token line before any example")?;
                    let tokens = parse_tokens(value)?;
                    match key {
                        "chord_clean" => ex.chord_clean = tokens,
                        "chord_noisy" => ex.chord_noisy = tokens,
                        "lyric" => ex.lyric_tokens = tokens,
                        "vocal" => ex.vocal_tokens = tokens,
                        _ => ex.song_tokens = tokens,
                    }
                }
                _ => {}
            }
        }
        if let Some(ex) = current.take() {
            examples.push(ex);
        }
        if examples.len() != n {
            return Err(format!("expected {n} examples, found {}", examples.len()));
        }
        Ok(Dataset {
            spec,
            split,
            examples,
        })
    }
}

// ── trainer ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_target: f64,
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Eval examples scored per evaluation.
    pub eval_examples: usize,
    pub seed: u64,
    /// Worker threads for per-example forward/backward passes within a
    /// step; 0 picks the available parallelism. Gradients reduce in example
    /// order, so results are bitwise independent of this value.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            lr_target: 2e-3,
            warmup_steps: 500,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 500,
            eval_examples: 8,
            seed: 0,
            workers: 0,
        }
    }
}

impl TrainConfig {
    /// Linear warm-up to the target rate, constant afterwards.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr_target;
        }
        self.lr_target * (step as f64 / self.warmup_steps as f64).min(1.0)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("steps", self.steps);
        kv.set("batch_size", self.batch_size);
        kv.set("lr_target", self.lr_target);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("adam_beta1", self.adam_beta1);
        kv.set("adam_beta2", self.adam_beta2);
        kv.set("adam_eps", self.adam_eps);
        kv.set("eval_every", self.eval_every);
        kv.set("eval_examples", self.eval_examples);
        kv.set("train_seed", self.seed);
        kv.set("workers", self.workers);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            steps: kv.get_or("steps", d.steps).map_err(TrainError::Spec)?,
            batch_size: kv
                .get_or("batch_size", d.batch_size)
                .map_err(TrainError::Spec)?,
            lr_target: kv
                .get_or("lr_target", d.lr_target)
                .map_err(TrainError::Spec)?,
            warmup_steps: kv
                .get_or("warmup_steps", d.warmup_steps)
                .map_err(TrainError::Spec)?,
            adam_beta1: kv
                .get_or("adam_beta1", d.adam_beta1)
                .map_err(TrainError::Spec)?,
            adam_beta2: kv
                .get_or("adam_beta2", d.adam_beta2)
                .map_err(TrainError::Spec)?,
            adam_eps: kv
                .get_or("adam_eps", d.adam_eps)
                .map_err(TrainError::Spec)?,
            eval_every: kv
                .get_or("eval_every", d.eval_every)
                .map_err(TrainError::Spec)?,
            eval_examples: kv
                .get_or("eval_examples", d.eval_examples)
                .map_err(TrainError::Spec)?,
            seed: kv.get_or("train_seed", d.seed).map_err(TrainError::Spec)?,
            workers: kv.get_or("workers", d.workers).map_err(TrainError::Spec)?,
        })
    }

    fn effective_workers(&self, jobs: usize) -> usize {
        let w = if self.workers == 0 {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        } else {
            self.workers
        };
        w.max(1).min(jobs.max(1))
    }
}

/// Runs `jobs` closures over `workers` threads into an index-addressed
/// result vector, so reduction order downstream stays deterministic.
fn run_indexed<T: Send>(
    jobs: usize,
    workers: usize,
    f: impl Fn(usize) -> T + Sync,
) -> Vec<T> {
    if workers <= 1 || jobs <= 1 {
        return (0..jobs).map(f).collect();
    }
    let slots: Vec<std::sync::Mutex<Option<T>>> =
        (0..jobs).map(|_| std::sync::Mutex::new(None)).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= jobs {
                    break;
                }
                let r = f(i);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("worker filled every slot"))
        .collect()
}

struct Adam<E: Element> {
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    t: usize,
}

impl<E: Element> Adam<E> {
    fn new(sizes: &[usize]) -> Self {
        Adam {
            m: sizes.iter().map(|&n| vec![E::ZERO; n]).collect(),
            v: sizes.iter().map(|&n| vec![E::ZERO; n]).collect(),
            t: 0,
        }
    }

    fn step(
        &mut self,
        params: &mut [&mut crate::tensor::Tensor<E>],
        grads: &[Option<Vec<E>>],
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let b1 = E::from_f64(cfg.adam_beta1);
        let b2 = E::from_f64(cfg.adam_beta2);
        let one_m_b1 = E::from_f64(1.0 - cfg.adam_beta1);
        let one_m_b2 = E::from_f64(1.0 - cfg.adam_beta2);
        let eps = E::from_f64(cfg.adam_eps);
        let bias1 = E::from_f64(1.0 / (1.0 - cfg.adam_beta1.powi(self.t as i32)));
        let bias2 = E::from_f64(1.0 / (1.0 - cfg.adam_beta2.powi(self.t as i32)));
        let lr_e = E::from_f64(lr);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + one_m_b1 * gv;
                *vv = b2 * *vv + one_m_b2 * gv * gv;
                let m_hat = *mv * bias1;
                let v_hat = *vv * bias2;
                *pv -= lr_e * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// One point of the training curve. `eval_sim` is present on steps where
/// evaluation ran.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub eval_sim: Option<f64>,
}

/// Plot data: `step<TAB>loss<TAB>sim` triples, sim carrying the most recent
/// evaluation (-1 before the first one).
pub fn curve_to_tsv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step\tloss\tsim\n");
    let mut last_sim = -1.0;
    for p in curve {
        if let Some(s) = p.eval_sim {
            last_sim = s;
        }
        out.push_str(&format!("{}\t{:.6}\t{:.6}\n", p.step, p.loss, last_sim));
    }
    out
}

/// Final evaluation bundle.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mean_sim: f64,
    pub per_shift_accuracy: [f64; 12],
    pub frechet: f64,
    pub final_loss: f64,
    pub reports: Vec<SimReport>,
}

impl EvalReport {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("mean_sim", format!("{:.6}", self.mean_sim));
        kv.set("frechet", format!("{:.6}", self.frechet));
        kv.set("final_loss", format!("{:.6}", self.final_loss));
        for (k, acc) in self.per_shift_accuracy.iter().enumerate() {
            kv.set(&format!("shift_{k}"), format!("{acc:.6}"));
        }
        kv
    }
}

pub struct TrainOutcome<E: Element> {
    pub state: ModelState<E>,
    pub curve: Vec<CurvePoint>,
    pub final_eval: EvalReport,
}

/// Majority-filter window for chord extraction during evaluation.
pub const EXTRACT_WINDOW: usize = 5;

/// Mean SIM, mean per-shift accuracies, per-example reports, and the
/// generated song-token streams.
pub type EvalSimOutput = (f64, [f64; 12], Vec<SimReport>, Vec<Vec<u16>>);

/// Scores the model on eval examples: greedy generation, chord extraction
/// from the generated song tokens, similarity against the clean schedule.
///
/// Generation conditions on the chord stream the model would receive in
/// deployment: the corrupted one when the spec carries extractor noise, the
/// clean one otherwise. Scoring is always against the clean schedule.
pub fn evaluate_sim<E: Element>(
    state: &ModelState<E>,
    eval: &Dataset,
    n_examples: usize,
) -> Result<EvalSimOutput> {
    if eval.examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n = n_examples.min(eval.examples.len()).max(1);
    let rate = eval.spec.frame_rate_hz;
    let workers = std::thread::available_parallelism()
        .map(|v| v.get())
        .unwrap_or(1)
        .min(n);
    let noisy_inputs = eval.spec.noise_rate > 0.0;
    let results = run_indexed(n, workers, |i| {
        let ex = &eval.examples[i];
        let chord_inputs = if noisy_inputs {
            &ex.chord_noisy
        } else {
            &ex.chord_clean
        };
        let generated = generate(state, chord_inputs, &ex.lyric_tokens, Sampler::Greedy, 0)?;
        let extracted =
            extract_chords_from_tokens(&generated.1, &eval.spec.rule, EXTRACT_WINDOW, rate);
        let report = sim(&extracted, &ex.clean_chords(rate))?;
        Ok::<_, TrainError>((report, generated.1))
    });
    let mut reports = Vec::with_capacity(n);
    let mut generated_songs = Vec::with_capacity(n);
    let mut mean = 0.0;
    let mut shifts = [0.0f64; 12];
    for result in results {
        let (report, song) = result?;
        mean += report.sim / n as f64;
        for (t, s) in shifts.iter_mut().zip(report.per_shift_accuracy.iter()) {
            *t += s / n as f64;
        }
        reports.push(report);
        generated_songs.push(song);
    }
    Ok((mean, shifts, reports, generated_songs))
}

/// Teacher-forced training with Adam and linear warm-up. Fully reproducible
/// given the config seeds; the loss curve and final parameters are bitwise
/// identical across runs.
pub fn train<E: Element>(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
) -> Result<TrainOutcome<E>> {
    if train_data.examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let rule = &train_data.spec.rule;
    if rule.lyric_vocab as usize > model_config.lyric_vocab
        || rule.vocal_vocab as usize > model_config.vocal_vocab
        || rule.song_vocab as usize > model_config.song_vocab
        || model_config.chord_vocab < (NO_CHORD as usize + 1)
    {
        return Err(TrainError::Spec(format!(
            "dataset vocabularies (lyric {}, vocal {}, song {}, chords 49) exceed the model's \
             (lyric {}, vocal {}, song {}, chord {})",
            rule.lyric_vocab,
            rule.vocal_vocab,
            rule.song_vocab,
            model_config.lyric_vocab,
            model_config.vocal_vocab,
            model_config.song_vocab,
            model_config.chord_vocab,
        )));
    }
    let mut state = ModelState::<E>::init(model_config.clone(), train_config.seed)?;
    let noisy_inputs = train_data.spec.noise_rate > 0.0;

    let sizes: Vec<usize> = state.named_params().iter().map(|(_, t)| t.numel()).collect();
    let n_params = sizes.len();
    let mut adam = Adam::<E>::new(&sizes);
    let mut curve = Vec::with_capacity(train_config.steps);

    let workers = train_config.effective_workers(train_config.batch_size);

    for step in 0..train_config.steps {
        let lr = train_config.lr_at(step);

        // per-example passes run on worker threads over a read-only
        // parameter snapshot; gradients reduce in example order below, so
        // the result is bitwise identical for any worker count
        let state_ref = &state;
        let history_noise = train_data.spec.history_noise_rate;
        let results = run_indexed(train_config.batch_size, workers, |i| {
            let ex_idx = (step * train_config.batch_size + i) % train_data.examples.len();
            let example = &train_data.examples[ex_idx];
            let batch = example.batch(noisy_inputs);
            let tape_seed = mix(mix(train_config.seed, step as u64), 0x8000_0000 | i as u64);
            let mut history_rng = ChaCha8Rng::seed_from_u64(mix(tape_seed, 0x5EED));
            let vocal_history = corrupt_history(
                &batch.vocal_tokens,
                model_config.vocal_vocab as u16,
                history_noise,
                &mut history_rng,
            );
            let song_history = corrupt_history(
                &batch.song_tokens,
                model_config.song_vocab as u16,
                history_noise,
                &mut history_rng,
            );
            let mut tape = Tape::<E>::with_mode(true, tape_seed);
            let vars = state_ref.stage(&mut tape, true);
            let out = forward_with_history(
                &mut tape,
                &batch,
                &vocal_history,
                &song_history,
                &vars,
                model_config,
            )?;
            let loss = tape.data(out.loss)[0].to_f64();
            tape.backward(out.loss)?;
            let mut grads: Vec<Option<Vec<E>>> = Vec::with_capacity(n_params);
            vars.for_each(&mut |_, &v| grads.push(tape.grad(v).map(|g| g.to_vec())));
            Ok::<_, TrainError>((loss, grads))
        });

        let mut grad_acc: Vec<Option<Vec<E>>> = vec![None; n_params];
        let mut step_loss = 0.0f64;
        let inv_batch = E::from_f64(1.0 / train_config.batch_size as f64);
        for result in results {
            let (loss, grads) = result?;
            step_loss += loss / train_config.batch_size as f64;
            for (acc, g) in grad_acc.iter_mut().zip(grads) {
                let Some(g) = g else { continue };
                match acc {
                    Some(a) => {
                        for (av, gv) in a.iter_mut().zip(g) {
                            *av += gv * inv_batch;
                        }
                    }
                    slot => {
                        let mut g = g;
                        for gv in g.iter_mut() {
                            *gv *= inv_batch;
                        }
                        *slot = Some(g);
                    }
                }
            }
        }

        if !step_loss.is_finite() {
            let grad_norm = grad_acc
                .iter()
                .flatten()
                .flat_map(|g| g.iter())
                .map(|v| v.to_f64() * v.to_f64())
                .sum::<f64>()
                .sqrt();
            return Err(TrainError::NonFiniteLoss {
                step,
                lr,
                grad_norm,
            });
        }

        let mut params: Vec<&mut crate::tensor::Tensor<E>> = Vec::with_capacity(n_params);
        state.params.for_each_mut(&mut |_, t| params.push(t));
        adam.step(&mut params, &grad_acc, lr, train_config);

        // the final step's evaluation happens once, below
        let want_eval = train_config.eval_every > 0
            && (step + 1) % train_config.eval_every == 0
            && step + 1 != train_config.steps;
        let eval_sim = if want_eval {
            let (mean, _, _, _) = evaluate_sim(&state, eval_data, train_config.eval_examples)?;
            Some(mean)
        } else {
            None
        };
        curve.push(CurvePoint {
            step,
            loss: step_loss,
            eval_sim,
        });
    }

    // final evaluation with fidelity statistics over generated song tokens
    let (mean_sim, per_shift, reports, generated) =
        evaluate_sim(&state, eval_data, train_config.eval_examples)?;
    if let Some(last) = curve.last_mut() {
        last.eval_sim = Some(mean_sim);
    }
    let vocab = model_config.song_vocab;
    let reference: Vec<Vec<u16>> = eval_data
        .examples
        .iter()
        .take(generated.len())
        .map(|e| e.song_tokens.clone())
        .collect();
    let frechet = if generated.len() > 1 {
        let a = feature_stats(&generated, FeatureExtractor::TokenHistogram, vocab)?;
        let b = feature_stats(&reference, FeatureExtractor::TokenHistogram, vocab)?;
        frechet_distance(&a, &b)?
    } else {
        0.0
    };
    let final_loss = curve.last().map(|p| p.loss).unwrap_or(f64::NAN);
    Ok(TrainOutcome {
        state,
        curve,
        final_eval: EvalReport {
            mean_sim,
            per_shift_accuracy: per_shift,
            frechet,
            final_loss,
            reports,
        },
    })
}

// ── ablation ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: FusionMode,
    pub seed: u64,
    pub sim: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub mode: FusionMode,
    pub mean_sim: f64,
    pub std_sim: f64,
    pub mean_loss: f64,
}

pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub curves: Vec<(FusionMode, u64, Vec<CurvePoint>)>,
}

/// Trains every (mode, seed) combination under identical budgets. The same
/// seed yields the same dataset and init stream across modes, so the
/// comparison is paired. `threads` caps worker parallelism; results are
/// ordered and bitwise deterministic regardless of it.
pub fn run_ablation<E: Element>(
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    base_synth: &SynthSpec,
    modes: &[FusionMode],
    seeds: &[u64],
    threads: usize,
) -> Result<AblationOutcome> {
    let tasks: Vec<(FusionMode, u64)> = modes
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let n_tasks = tasks.len();
    let threads = threads.max(1).min(n_tasks.max(1));

    let results: Vec<Result<(AblationRow, Vec<CurvePoint>)>> =
        run_indexed(n_tasks, threads, |i| {
            let (mode, seed) = tasks[i];
            let mut model_cfg = base_model.clone();
            model_cfg.fusion_mode = mode;
            let mut train_cfg = base_train.clone();
            train_cfg.seed = seed;
            if threads > 1 {
                // outer parallelism already covers the cores
                train_cfg.workers = 1;
            }
            let mut synth = base_synth.clone();
            synth.seed = seed;
            let (train_ds, eval_ds) = generate_dataset(&synth)?;
            let outcome = train::<E>(&model_cfg, &train_cfg, &train_ds, &eval_ds)?;
            Ok((
                AblationRow {
                    mode,
                    seed,
                    sim: outcome.final_eval.mean_sim,
                    final_loss: outcome.final_eval.final_loss,
                },
                outcome.curve,
            ))
        });

    let mut rows = Vec::with_capacity(n_tasks);
    let mut curves = Vec::with_capacity(n_tasks);
    for ((mode, seed), result) in tasks.into_iter().zip(results) {
        let (row, curve) = result?;
        rows.push(row);
        curves.push((mode, seed, curve));
    }
    Ok(AblationOutcome { rows, curves })
}

pub fn summarize(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut out = Vec::new();
    for mode in FusionMode::ALL {
        let sims: Vec<f64> = rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.sim)
            .collect();
        if sims.is_empty() {
            continue;
        }
        let n = sims.len() as f64;
        let mean = sims.iter().sum::<f64>() / n;
        let var = sims.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
            / (n - 1.0).max(1.0);
        let mean_loss = rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.final_loss)
            .sum::<f64>()
            / n;
        out.push(AblationSummary {
            mode,
            mean_sim: mean,
            std_sim: var.sqrt(),
            mean_loss,
        });
    }
    out
}

/// Machine-readable per-run table: mode, seed, sim, final_loss.
pub fn ablation_table_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from("mode\tseed\tsim\tfinal_loss\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\n",
            r.mode, r.seed, r.sim, r.final_loss
        ));
    }
    out
}

pub fn ablation_summary_tsv(summaries: &[AblationSummary]) -> String {
    let mut out = String::from("mode\tmean_sim\tstd_sim\tmean_loss\n");
    for s in summaries {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\n",
            s.mode, s.mean_sim, s.std_sim, s.mean_loss
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_train: 4,
            n_eval: 2,
            frames_per_example: 128,
            segment_min: 20,
            segment_max: 40,
            no_chord_prob: 0.1,
            noise_rate: 0.0,
            seed: 7,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn dataset_is_pure_function_of_spec() {
        let spec = small_spec();
        let (a_train, a_eval) = generate_dataset(&spec).unwrap();
        let (b_train, b_eval) = generate_dataset(&spec).unwrap();
        assert_eq!(a_train.to_text(), b_train.to_text());
        assert_eq!(a_eval.to_text(), b_eval.to_text());
        // splits differ
        assert_ne!(a_train.examples[0], a_eval.examples[0]);
    }

    #[test]
    fn zero_noise_keeps_streams_identical() {
        let (train_ds, _) = generate_dataset(&small_spec()).unwrap();
        for ex in &train_ds.examples {
            assert_eq!(ex.chord_clean, ex.chord_noisy);
        }
    }

    #[test]
    fn full_noise_corrupts_every_frame() {
        let spec = SynthSpec {
            noise_rate: 1.0,
            ..small_spec()
        };
        let (train_ds, _) = generate_dataset(&spec).unwrap();
        for ex in &train_ds.examples {
            for (&c, &n) in ex.chord_clean.iter().zip(&ex.chord_noisy) {
                assert_ne!(c, n, "corruption must exclude the true token");
                assert!(n < CHORD_TOKENS);
            }
        }
    }

    #[test]
    fn noise_rate_concentrates_at_one_third() {
        let spec = SynthSpec {
            n_train: 400,
            noise_rate: 0.33,
            ..small_spec()
        };
        let (train_ds, _) = generate_dataset(&spec).unwrap();
        let mut total = 0usize;
        let mut corrupted = 0usize;
        for ex in &train_ds.examples {
            for (&c, &n) in ex.chord_clean.iter().zip(&ex.chord_noisy) {
                total += 1;
                if c != n {
                    corrupted += 1;
                }
            }
        }
        assert!(total >= 10_000, "need enough frames for concentration");
        let frac = corrupted as f64 / total as f64;
        assert!((frac - 0.33).abs() < 0.02, "corrupted fraction {frac}");
    }

    #[test]
    fn emission_rule_is_invertible_from_song_tokens() {
        // full-length examples at the default segment range; the residual
        // is the smoothing lag around chord changes
        let spec = SynthSpec {
            n_train: 1,
            n_eval: 8,
            seed: 11,
            ..SynthSpec::default()
        };
        let (_, eval_ds) = generate_dataset(&spec).unwrap();
        let mut mean = 0.0;
        for ex in &eval_ds.examples {
            let extracted = extract_chords_from_tokens(
                &ex.song_tokens,
                &spec.rule,
                EXTRACT_WINDOW,
                spec.frame_rate_hz,
            );
            let target = ex.clean_chords(spec.frame_rate_hz);
            let report = sim(&extracted, &target).unwrap();
            assert_eq!(report.best_shift, 0);
            mean += report.sim / eval_ds.examples.len() as f64;
        }
        assert!(
            mean > 0.92,
            "extraction should recover the clean schedule, got {mean}"
        );
    }

    #[test]
    fn dataset_text_round_trip() {
        let spec = small_spec();
        let (train_ds, _) = generate_dataset(&spec).unwrap();
        let text = train_ds.to_text();
        let back = Dataset::from_text(&text).unwrap();
        assert_eq!(back, train_ds);
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig {
            lr_target: 8e-5,
            warmup_steps: 32_000,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.0);
        assert_eq!(cfg.lr_at(32_000), 8e-5);
        assert_eq!(cfg.lr_at(64_000), 8e-5);
        // monotone non-decreasing and capped
        let mut last = -1.0;
        for s in (0..70_000).step_by(1000) {
            let lr = cfg.lr_at(s);
            assert!(lr >= last);
            assert!(lr <= 8e-5);
            last = lr;
        }
    }

    #[test]
    fn markov_chain_is_binary_and_persistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chain = markov_chain(&mut rng, 0.95, 2000);
        assert!(chain.iter().all(|&s| s <= 1));
        let switches = chain.windows(2).filter(|w| w[0] != w[1]).count();
        let rate = switches as f64 / 1999.0;
        assert!((rate - 0.05).abs() < 0.02, "switch rate {rate}");
    }
}
