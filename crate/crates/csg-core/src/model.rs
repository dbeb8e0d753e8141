//! End-to-end network: embedding tables, fusion, decoder trunk, dual heads.
//!
//! Frame `t` of the lyric-audio stream combines the lyric embedding at `t`
//! with the vocal and song embeddings of frame `t - 1` (learned
//! begin-of-sequence vectors at frame 0), which is what makes teacher-forced
//! training autoregressive. The chord stream is visible in full to the
//! fusion stage; causality only constrains the lyric-audio side.

use crate::fusion::{self, Block, FusionConfig, FusionMode, FusionParams};
use crate::io;
use crate::tensor::{Element, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("batch: {0}")]
    Batch(String),
    #[error("sequence of {frames} frames exceeds max_frames {max}")]
    Capacity { frames: usize, max: usize },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Hyperparameters of the full network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub chord_vocab: usize,
    pub lyric_vocab: usize,
    pub vocal_vocab: usize,
    pub song_vocab: usize,
    pub max_frames: usize,
    pub chord_path_layers: usize,
    pub audio_path_layers: usize,
    pub gpt_layers: usize,
    pub mlp_ratio: usize,
    pub fusion_mode: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            heads: 4,
            dropout: 0.1,
            chord_vocab: 49,
            lyric_vocab: 32,
            vocal_vocab: 32,
            song_vocab: 32,
            max_frames: 512,
            chord_path_layers: 2,
            audio_path_layers: 2,
            gpt_layers: 2,
            mlp_ratio: 2,
            fusion_mode: FusionMode::Dws,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        for (name, v) in [
            ("chord_vocab", self.chord_vocab),
            ("lyric_vocab", self.lyric_vocab),
            ("vocal_vocab", self.vocal_vocab),
            ("song_vocab", self.song_vocab),
        ] {
            if v < 2 {
                return Err(ModelError::Config(format!("{name} must be >= 2, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.max_frames == 0 || self.mlp_ratio == 0 {
            return Err(ModelError::Config(
                "max_frames and mlp_ratio must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            dim: self.dim,
            chord_path_layers: self.chord_path_layers,
            audio_path_layers: self.audio_path_layers,
            heads: self.heads,
            dropout: self.dropout,
            mlp_ratio: self.mlp_ratio,
            mode: self.fusion_mode,
        }
    }

    pub fn to_kv(&self) -> io::KvMap {
        let mut kv = io::KvMap::new();
        kv.set("dim", self.dim);
        kv.set("heads", self.heads);
        kv.set("dropout", self.dropout);
        kv.set("chord_vocab", self.chord_vocab);
        kv.set("lyric_vocab", self.lyric_vocab);
        kv.set("vocal_vocab", self.vocal_vocab);
        kv.set("song_vocab", self.song_vocab);
        kv.set("max_frames", self.max_frames);
        kv.set("chord_path_layers", self.chord_path_layers);
        kv.set("audio_path_layers", self.audio_path_layers);
        kv.set("gpt_layers", self.gpt_layers);
        kv.set("mlp_ratio", self.mlp_ratio);
        kv.set("fusion_mode", self.fusion_mode);
        kv
    }

    pub fn from_kv(kv: &io::KvMap) -> Result<Self> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            dim: kv.get_or("dim", d.dim).map_err(ModelError::Config)?,
            heads: kv.get_or("heads", d.heads).map_err(ModelError::Config)?,
            dropout: kv
                .get_or("dropout", d.dropout)
                .map_err(ModelError::Config)?,
            chord_vocab: kv
                .get_or("chord_vocab", d.chord_vocab)
                .map_err(ModelError::Config)?,
            lyric_vocab: kv
                .get_or("lyric_vocab", d.lyric_vocab)
                .map_err(ModelError::Config)?,
            vocal_vocab: kv
                .get_or("vocal_vocab", d.vocal_vocab)
                .map_err(ModelError::Config)?,
            song_vocab: kv
                .get_or("song_vocab", d.song_vocab)
                .map_err(ModelError::Config)?,
            max_frames: kv
                .get_or("max_frames", d.max_frames)
                .map_err(ModelError::Config)?,
            chord_path_layers: kv
                .get_or("chord_path_layers", d.chord_path_layers)
                .map_err(ModelError::Config)?,
            audio_path_layers: kv
                .get_or("audio_path_layers", d.audio_path_layers)
                .map_err(ModelError::Config)?,
            gpt_layers: kv
                .get_or("gpt_layers", d.gpt_layers)
                .map_err(ModelError::Config)?,
            mlp_ratio: kv
                .get_or("mlp_ratio", d.mlp_ratio)
                .map_err(ModelError::Config)?,
            fusion_mode: kv
                .get_or("fusion_mode", d.fusion_mode)
                .map_err(ModelError::Config)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every learnable tensor, payload-generic like the fusion containers.
#[derive(Debug, Clone)]
pub struct CsgParams<P> {
    pub chord_table: P,
    pub lyric_table: P,
    pub vocal_table: P,
    pub song_table: P,
    pub pos_table: P,
    pub bos_vocal: P,
    pub bos_song: P,
    pub fusion: FusionParams<P>,
    pub gpt_blocks: Vec<Block<P>>,
    pub final_ln_gain: P,
    pub final_ln_bias: P,
    pub vocal_head: P,
    pub song_head: P,
}

impl<P> CsgParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> CsgParams<Q> {
        CsgParams {
            chord_table: f(&self.chord_table),
            lyric_table: f(&self.lyric_table),
            vocal_table: f(&self.vocal_table),
            song_table: f(&self.song_table),
            pos_table: f(&self.pos_table),
            bos_vocal: f(&self.bos_vocal),
            bos_song: f(&self.bos_song),
            fusion: self.fusion.map(f),
            gpt_blocks: self.gpt_blocks.iter().map(|b| b.map(f)).collect(),
            final_ln_gain: f(&self.final_ln_gain),
            final_ln_bias: f(&self.final_ln_bias),
            vocal_head: f(&self.vocal_head),
            song_head: f(&self.song_head),
        }
    }

    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a P)) {
        f("chord_table".into(), &self.chord_table);
        f("lyric_table".into(), &self.lyric_table);
        f("vocal_table".into(), &self.vocal_table);
        f("song_table".into(), &self.song_table);
        f("pos_table".into(), &self.pos_table);
        f("bos_vocal".into(), &self.bos_vocal);
        f("bos_song".into(), &self.bos_song);
        self.fusion.for_each("fusion", f);
        for (i, b) in self.gpt_blocks.iter().enumerate() {
            b.for_each(&format!("gpt_block{i}"), f);
        }
        f("final_ln_gain".into(), &self.final_ln_gain);
        f("final_ln_bias".into(), &self.final_ln_bias);
        f("vocal_head".into(), &self.vocal_head);
        f("song_head".into(), &self.song_head);
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut P)) {
        f("chord_table".into(), &mut self.chord_table);
        f("lyric_table".into(), &mut self.lyric_table);
        f("vocal_table".into(), &mut self.vocal_table);
        f("song_table".into(), &mut self.song_table);
        f("pos_table".into(), &mut self.pos_table);
        f("bos_vocal".into(), &mut self.bos_vocal);
        f("bos_song".into(), &mut self.bos_song);
        self.fusion.for_each_mut("fusion", f);
        for (i, b) in self.gpt_blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("gpt_block{i}"), f);
        }
        f("final_ln_gain".into(), &mut self.final_ln_gain);
        f("final_ln_bias".into(), &mut self.final_ln_bias);
        f("vocal_head".into(), &mut self.vocal_head);
        f("song_head".into(), &mut self.song_head);
    }
}

/// Model configuration plus its parameters.
#[derive(Debug, Clone)]
pub struct ModelState<E: Element> {
    pub config: ModelConfig,
    pub params: CsgParams<Tensor<E>>,
}

impl<E: Element> ModelState<E> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let std = 0.02;
        let table = |v: usize, rng: &mut ChaCha8Rng| Tensor::randn(vec![v, d], std, rng);
        let params = CsgParams {
            chord_table: table(config.chord_vocab, &mut rng),
            lyric_table: table(config.lyric_vocab, &mut rng),
            vocal_table: table(config.vocal_vocab, &mut rng),
            song_table: table(config.song_vocab, &mut rng),
            pos_table: table(config.max_frames, &mut rng),
            bos_vocal: Tensor::randn(vec![1, d], std, &mut rng),
            bos_song: Tensor::randn(vec![1, d], std, &mut rng),
            fusion: FusionParams::init(&config.fusion(), &mut rng),
            gpt_blocks: (0..config.gpt_layers)
                .map(|_| Block::init(d, config.heads, config.mlp_ratio, &mut rng))
                .collect(),
            final_ln_gain: Tensor::full(vec![d], E::ONE),
            final_ln_bias: Tensor::zeros(vec![d]),
            vocal_head: Tensor::randn(vec![d, config.vocal_vocab], std, &mut rng),
            song_head: Tensor::randn(vec![d, config.song_vocab], std, &mut rng),
        };
        Ok(ModelState { config, params })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = Vec::new();
        self.params.for_each(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every parameter on a tape. Training wants gradients;
    /// generation does not.
    pub fn stage(&self, tape: &mut Tape<E>, requires_grad: bool) -> CsgParams<Var> {
        self.params.map(&mut |t| tape.leaf(t, requires_grad))
    }
}

/// One training example: frame-aligned token streams.
#[derive(Debug, Clone, PartialEq)]
pub struct SongBatch {
    pub chord_tokens: Vec<u16>,
    pub lyric_tokens: Vec<u16>,
    pub vocal_tokens: Vec<u16>,
    pub song_tokens: Vec<u16>,
}

impl SongBatch {
    pub fn frames(&self) -> usize {
        self.chord_tokens.len()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let f = self.chord_tokens.len();
        if f == 0 {
            return Err(ModelError::Batch("empty batch".into()));
        }
        if self.lyric_tokens.len() != f
            || self.vocal_tokens.len() != f
            || self.song_tokens.len() != f
        {
            return Err(ModelError::Batch(format!(
                "stream lengths differ: chord {} lyric {} vocal {} song {}",
                f,
                self.lyric_tokens.len(),
                self.vocal_tokens.len(),
                self.song_tokens.len()
            )));
        }
        if f > config.max_frames {
            return Err(ModelError::Capacity {
                frames: f,
                max: config.max_frames,
            });
        }
        Ok(())
    }
}

fn ids(tokens: &[u16]) -> Vec<u32> {
    tokens.iter().map(|&t| t as u32).collect()
}

/// Embeds and combines the input token streams into the two sequences the
/// fusion stage consumes.
///
/// The chord side is `chord_table[c_t] + pos_t`. The lyric-audio side at
/// frame `t` is `lyric_table[l_t] + vocal_table[v_{t-1}] + song_table[s_{t-1}]
/// + pos_t`, with learned begin-of-sequence vectors standing in at frame 0.
pub fn combine_inputs<E: Element>(
    tape: &mut Tape<E>,
    batch: &SongBatch,
    vars: &CsgParams<Var>,
) -> Result<(Var, Var)> {
    combine_inputs_with_history(tape, batch, &batch.vocal_tokens, &batch.song_tokens, vars)
}

/// `combine_inputs` with explicit previous-frame streams, so the training
/// harness can feed corrupted history while targets stay clean.
pub fn combine_inputs_with_history<E: Element>(
    tape: &mut Tape<E>,
    batch: &SongBatch,
    vocal_history: &[u16],
    song_history: &[u16],
    vars: &CsgParams<Var>,
) -> Result<(Var, Var)> {
    let frames = batch.frames();
    let pos_ids: Vec<u32> = (0..frames as u32).collect();
    let pos = tape.embedding(vars.pos_table, &pos_ids)?;

    let chord = tape.embedding(vars.chord_table, &ids(&batch.chord_tokens))?;
    let chord_emb = tape.add(chord, pos)?;

    let lyric = tape.embedding(vars.lyric_table, &ids(&batch.lyric_tokens))?;
    let shifted = |tape: &mut Tape<E>, table: Var, bos: Var, tokens: &[u16]| -> Result<Var> {
        if tokens.len() == 1 {
            return Ok(bos);
        }
        let prev = tape.embedding(table, &ids(&tokens[..tokens.len() - 1]))?;
        Ok(tape.concat_rows(&[bos, prev])?)
    };
    let vocal_prev = shifted(tape, vars.vocal_table, vars.bos_vocal, vocal_history)?;
    let song_prev = shifted(tape, vars.song_table, vars.bos_song, song_history)?;

    let la = tape.add(lyric, vocal_prev)?;
    let la = tape.add(la, song_prev)?;
    let la = tape.add(la, pos)?;
    Ok((chord_emb, la))
}

pub struct ForwardOutput {
    pub vocal_logits: Var,
    pub song_logits: Var,
    pub loss: Var,
}

/// Teacher-forced pass: fused inputs through the causal decoder trunk into
/// both heads; loss is the equal-weight sum of the two mean cross-entropies.
pub fn forward_teacher_forced<E: Element>(
    tape: &mut Tape<E>,
    batch: &SongBatch,
    vars: &CsgParams<Var>,
    config: &ModelConfig,
) -> Result<ForwardOutput> {
    forward_with_history(tape, batch, &batch.vocal_tokens, &batch.song_tokens, vars, config)
}

/// Teacher-forced pass over possibly perturbed previous-frame streams; the
/// cross-entropy targets always come from the batch itself.
pub fn forward_with_history<E: Element>(
    tape: &mut Tape<E>,
    batch: &SongBatch,
    vocal_history: &[u16],
    song_history: &[u16],
    vars: &CsgParams<Var>,
    config: &ModelConfig,
) -> Result<ForwardOutput> {
    batch.validate(config)?;
    let (chord_emb, la) =
        combine_inputs_with_history(tape, batch, vocal_history, song_history, vars)?;
    let fused = fusion::fuse_sequences(tape, &config.fusion(), chord_emb, la, &vars.fusion)?;
    let h = fusion::encode_path(tape, fused, &vars.gpt_blocks, true, config.dropout)?;
    let h = tape.layer_norm(h, vars.final_ln_gain, vars.final_ln_bias)?;
    let vocal_logits = tape.matmul(h, vars.vocal_head)?;
    let song_logits = tape.matmul(h, vars.song_head)?;
    let vocal_loss = tape.cross_entropy(vocal_logits, &ids(&batch.vocal_tokens))?;
    let song_loss = tape.cross_entropy(song_logits, &ids(&batch.song_tokens))?;
    let loss = tape.add(vocal_loss, song_loss)?;
    Ok(ForwardOutput {
        vocal_logits,
        song_logits,
        loss,
    })
}

/// Decoding strategy for generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    /// Highest logit, lowest token id on ties.
    Greedy,
    /// Sample among the `k` highest-probability tokens, renormalized.
    TopK(usize),
    /// Sample the full softmax at the given temperature.
    Temperature(f64),
}

impl Sampler {
    fn pick(self, logits: &[f64], rng: &mut ChaCha8Rng) -> u16 {
        match self {
            Sampler::Greedy => argmax(logits) as u16,
            Sampler::TopK(k) => {
                let k = k.max(1).min(logits.len());
                let mut order: Vec<usize> = (0..logits.len()).collect();
                // stable sort keeps the lowest id first among equal logits
                order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
                order.truncate(k);
                let probs = softmax_f64(&order.iter().map(|&i| logits[i]).collect::<Vec<_>>());
                order[sample_categorical(&probs, rng)] as u16
            }
            Sampler::Temperature(tau) => {
                let tau = tau.max(1e-6);
                let scaled: Vec<f64> = logits.iter().map(|&l| l / tau).collect();
                let probs = softmax_f64(&scaled);
                sample_categorical(&probs, rng) as u16
            }
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn softmax_f64(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rand::Rng::random(rng);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Autoregressive generation: frame `t` conditions on the full chord
/// sequence, lyric frames `0..=t`, and previously generated vocal/song
/// frames. The loop recomputes the growing prefix each step; only the chord
/// encoding, which never depends on generated frames, is computed once.
pub fn generate<E: Element>(
    state: &ModelState<E>,
    chord_tokens: &[u16],
    lyric_tokens: &[u16],
    sampler: Sampler,
    seed: u64,
) -> Result<(Vec<u16>, Vec<u16>)> {
    let frames = chord_tokens.len();
    if frames == 0 || lyric_tokens.len() != frames {
        return Err(ModelError::Batch(format!(
            "chord stream ({} frames) and lyric stream ({} frames) must be equal and non-empty",
            frames,
            lyric_tokens.len()
        )));
    }
    if frames > state.config.max_frames {
        return Err(ModelError::Capacity {
            frames,
            max: state.config.max_frames,
        });
    }
    let cfg = &state.config;
    let fusion_cfg = cfg.fusion();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // chord encoding is independent of the autoregressive state
    let chord_enc: Option<Tensor<E>> = if matches!(
        cfg.fusion_mode,
        FusionMode::Dws | FusionMode::Xattn
    ) {
        let mut tape = Tape::new();
        let vars = state.stage(&mut tape, false);
        let pos_ids: Vec<u32> = (0..frames as u32).collect();
        let pos = tape.embedding(vars.pos_table, &pos_ids)?;
        let chord = tape.embedding(vars.chord_table, &ids(chord_tokens))?;
        let chord_emb = tape.add(chord, pos)?;
        let enc = fusion::encode_chord_only(&mut tape, chord_emb, &vars.fusion, &fusion_cfg)?;
        Some(tape.value(enc))
    } else {
        None
    };

    let mut vocal_out: Vec<u16> = Vec::with_capacity(frames);
    let mut song_out: Vec<u16> = Vec::with_capacity(frames);

    for t in 0..frames {
        let mut tape = Tape::new();
        let vars = state.stage(&mut tape, false);
        let prefix = t + 1;

        let batch = SongBatch {
            chord_tokens: chord_tokens[..prefix].to_vec(),
            lyric_tokens: lyric_tokens[..prefix].to_vec(),
            // generated history; the current frame's slot is a placeholder
            // that only feeds frames beyond the prefix, which do not exist
            vocal_tokens: padded(&vocal_out, prefix),
            song_tokens: padded(&song_out, prefix),
        };

        let (chord_emb, la) = combine_inputs(&mut tape, &batch, &vars)?;
        let fused = match (&chord_enc, cfg.fusion_mode) {
            (Some(enc), _) => {
                let enc_var = tape.constant(enc);
                fusion::fuse_with_chord_encoding(&mut tape, &fusion_cfg, enc_var, la, &vars.fusion)?
            }
            (None, _) => {
                fusion::fuse_sequences(&mut tape, &fusion_cfg, chord_emb, la, &vars.fusion)?
            }
        };
        let h = fusion::encode_path(&mut tape, fused, &vars.gpt_blocks, true, cfg.dropout)?;
        let h = tape.layer_norm(h, vars.final_ln_gain, vars.final_ln_bias)?;
        let vocal_logits = tape.matmul(h, vars.vocal_head)?;
        let song_logits = tape.matmul(h, vars.song_head)?;

        let vl = row_f64(tape.data(vocal_logits), t, cfg.vocal_vocab);
        let sl = row_f64(tape.data(song_logits), t, cfg.song_vocab);
        vocal_out.push(sampler.pick(&vl, &mut rng));
        song_out.push(sampler.pick(&sl, &mut rng));
    }
    Ok((vocal_out, song_out))
}

fn padded(generated: &[u16], len: usize) -> Vec<u16> {
    let mut v = generated.to_vec();
    v.resize(len, 0);
    v
}

fn row_f64<E: Element>(data: &[E], row: usize, cols: usize) -> Vec<f64> {
    data[row * cols..(row + 1) * cols]
        .iter()
        .map(|v| v.to_f64())
        .collect()
}

// ── checkpoints ─────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 8] = b"CSGCKPT\x01";

/// Binary checkpoint: magic, dtype tag, config text, then named parameter
/// arrays as raw little-endian bytes. Round-trips are bit-exact.
pub fn save_checkpoint<E: Element>(state: &ModelState<E>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.push(E::DTYPE.tag());
    let config_text = state.config.to_kv().to_string();
    buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());

    let named = state.named_params();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            match E::DTYPE {
                crate::tensor::Dtype::F32 => {
                    buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes())
                }
                crate::tensor::Dtype::F64 => buf.extend_from_slice(&v.to_f64().to_le_bytes()),
            }
        }
    }
    io::atomic_write(path, &buf).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_checkpoint<E: Element>(path: impl AsRef<Path>) -> Result<ModelState<E>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let err = |message: String| ModelError::Checkpoint {
        path: path.display().to_string(),
        message,
    };
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > bytes.len() {
            return Err(err("truncated file".into()));
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };

    if take(&mut cur, 8)? != CKPT_MAGIC {
        return Err(err("bad magic; not a checkpoint".into()));
    }
    let dtype_tag = take(&mut cur, 1)?[0];
    if dtype_tag != E::DTYPE.tag() {
        return Err(err(format!(
            "dtype tag {dtype_tag} does not match requested element type"
        )));
    }
    let cfg_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let cfg_text = std::str::from_utf8(take(&mut cur, cfg_len)?)
        .map_err(|e| err(format!("config block not utf-8: {e}")))?;
    let kv = io::KvMap::parse(cfg_text).map_err(|e| err(format!("config block: {e}")))?;
    let config = ModelConfig::from_kv(&kv)?;

    let n_params = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let mut loaded: HashMap<String, Tensor<E>> = HashMap::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut cur, name_len)?)
            .map_err(|e| err(format!("parameter name not utf-8: {e}")))?
            .to_string();
        let ndim = take(&mut cur, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let width = match E::DTYPE {
            crate::tensor::Dtype::F32 => 4,
            crate::tensor::Dtype::F64 => 8,
        };
        let raw = take(&mut cur, numel * width)?;
        let data: Vec<E> = raw
            .chunks_exact(width)
            .map(|c| match E::DTYPE {
                crate::tensor::Dtype::F32 => {
                    E::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64)
                }
                crate::tensor::Dtype::F64 => E::from_f64(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect();
        loaded.insert(
            name,
            Tensor::new(shape, data).map_err(|e| err(e.to_string()))?,
        );
    }

    // materialize a state with the right structure, then fill it by name
    let mut state = ModelState::<E>::init(config, 0)?;
    let mut missing = Vec::new();
    state.params.for_each_mut(&mut |name, t| {
        match loaded.remove(&name) {
            Some(loaded_t) if loaded_t.shape() == t.shape() => *t = loaded_t,
            Some(loaded_t) => missing.push(format!(
                "{name}: shape {:?} in file, {:?} expected",
                loaded_t.shape(),
                t.shape()
            )),
            None => missing.push(format!("{name}: absent from file")),
        }
    });
    if !missing.is_empty() {
        return Err(err(missing.join("; ")));
    }
    if !loaded.is_empty() {
        let extra: Vec<String> = loaded.keys().cloned().collect();
        return Err(err(format!("unknown parameters in file: {}", extra.join(", "))));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            dim: 16,
            heads: 2,
            dropout: 0.0,
            chord_vocab: 49,
            lyric_vocab: 8,
            vocal_vocab: 8,
            song_vocab: 8,
            max_frames: 32,
            chord_path_layers: 1,
            audio_path_layers: 1,
            gpt_layers: 1,
            mlp_ratio: 2,
            fusion_mode: FusionMode::Dws,
        }
    }

    fn tiny_batch(frames: usize, seed: u64) -> SongBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tok = |rng: &mut ChaCha8Rng, v: u16| -> Vec<u16> {
            (0..frames)
                .map(|_| rand::Rng::random_range(rng, 0..v))
                .collect()
        };
        SongBatch {
            chord_tokens: tok(&mut rng, 49),
            lyric_tokens: tok(&mut rng, 8),
            vocal_tokens: tok(&mut rng, 8),
            song_tokens: tok(&mut rng, 8),
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.heads = 3; // 16 % 3 != 0
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.vocal_vocab = 1;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = tiny_config();
        let kv = cfg.to_kv();
        let back = ModelConfig::from_kv(&kv).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn zeroed_tables_leave_positions_only() {
        let mut state = ModelState::<f64>::init(tiny_config(), 3).unwrap();
        for name in [
            "chord_table",
            "lyric_table",
            "vocal_table",
            "song_table",
            "bos_vocal",
            "bos_song",
        ] {
            state.params.for_each_mut(&mut |n, t| {
                if n == name {
                    for v in t.data_mut() {
                        *v = 0.0;
                    }
                }
            });
        }
        let batch = tiny_batch(6, 0);
        let mut tape = Tape::new();
        let vars = state.stage(&mut tape, false);
        let (chord_emb, la) = combine_inputs(&mut tape, &batch, &vars).unwrap();
        let pos: Vec<f64> = state.params.pos_table.data()[..6 * 16].to_vec();
        assert_eq!(tape.data(chord_emb), &pos[..]);
        assert_eq!(tape.data(la), &pos[..]);
    }

    #[test]
    fn frame_zero_uses_bos_not_ground_truth() {
        let state = ModelState::<f64>::init(tiny_config(), 4).unwrap();
        let mut batch = tiny_batch(5, 1);
        let mut tape = Tape::new();
        let vars = state.stage(&mut tape, false);
        let (_, la_a) = combine_inputs(&mut tape, &batch, &vars).unwrap();
        let a = tape.data(la_a).to_vec();

        // changing frame-0 vocal/song tokens must not move frame 0 (only
        // frame 1, through the shift)
        batch.vocal_tokens[0] = (batch.vocal_tokens[0] + 1) % 8;
        batch.song_tokens[0] = (batch.song_tokens[0] + 1) % 8;
        let mut tape_b = Tape::new();
        let vars_b = state.stage(&mut tape_b, false);
        let (_, la_b) = combine_inputs(&mut tape_b, &batch, &vars_b).unwrap();
        let b = tape_b.data(la_b).to_vec();

        assert_eq!(&a[..16], &b[..16], "frame 0 must ignore frame-0 tokens");
        assert_ne!(&a[16..32], &b[16..32], "frame 1 must see frame-0 tokens");
    }

    #[test]
    fn untrained_loss_near_uniform_baseline() {
        let config = tiny_config();
        let state = ModelState::<f64>::init(config.clone(), 5).unwrap();
        let batch = tiny_batch(16, 2);
        let mut tape = Tape::new();
        let vars = state.stage(&mut tape, false);
        let out = forward_teacher_forced(&mut tape, &batch, &vars, &config).unwrap();
        let loss = tape.data(out.loss)[0];
        let baseline = (8.0f64).ln() * 2.0;
        assert!(
            (loss - baseline).abs() / baseline < 0.1,
            "loss {loss} vs baseline {baseline}"
        );
    }

    #[test]
    fn all_param_grads_finite() {
        let config = tiny_config();
        let state = ModelState::<f64>::init(config.clone(), 6).unwrap();
        let batch = tiny_batch(8, 3);
        let mut tape = Tape::with_mode(true, 0);
        let vars = state.stage(&mut tape, true);
        let out = forward_teacher_forced(&mut tape, &batch, &vars, &config).unwrap();
        tape.backward(out.loss).unwrap();
        let mut with_grad = 0;
        let mut without = Vec::new();
        vars.for_each(&mut |name, &v| match tape.grad(v) {
            Some(g) => {
                assert!(
                    g.iter().all(|x| x.is_finite()),
                    "{name} has non-finite gradient"
                );
                with_grad += 1;
            }
            None => without.push(name),
        });
        assert!(with_grad > 20);
        // the concat-baseline projection is the only parameter off the dws
        // loss path
        assert_eq!(without, ["fusion.concat_proj.weight", "fusion.concat_proj.bias"]);
    }

    #[test]
    fn future_song_token_cannot_move_past_logits() {
        let config = tiny_config();
        let state = ModelState::<f64>::init(config.clone(), 7).unwrap();
        let mut batch = tiny_batch(10, 4);
        let run = |b: &SongBatch| {
            let mut tape = Tape::new();
            let vars = state.stage(&mut tape, false);
            let out = forward_teacher_forced(&mut tape, b, &vars, &config).unwrap();
            (
                tape.data(out.vocal_logits).to_vec(),
                tape.data(out.song_logits).to_vec(),
            )
        };
        let (v_a, s_a) = run(&batch);
        let t = 6;
        batch.song_tokens[t] = (batch.song_tokens[t] + 3) % 8;
        let (v_b, s_b) = run(&batch);
        // logits at frames <= t are bitwise unchanged
        assert_eq!(&v_a[..(t + 1) * 8], &v_b[..(t + 1) * 8]);
        assert_eq!(&s_a[..(t + 1) * 8], &s_b[..(t + 1) * 8]);
        // and the change is visible afterwards
        assert_ne!(&s_a[(t + 1) * 8..], &s_b[(t + 1) * 8..]);
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let config = tiny_config();
        let state = ModelState::<f64>::init(config, 8).unwrap();
        let chords: Vec<u16> = (0..12).map(|i| (i * 4) % 48).collect();
        let lyrics: Vec<u16> = (0..12).map(|i| i % 8).collect();
        let a = generate(&state, &chords, &lyrics, Sampler::Greedy, 0).unwrap();
        let b = generate(&state, &chords, &lyrics, Sampler::Greedy, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeded_samplers_are_deterministic() {
        let config = tiny_config();
        let state = ModelState::<f64>::init(config, 9).unwrap();
        let chords: Vec<u16> = vec![0; 8];
        let lyrics: Vec<u16> = vec![1; 8];
        for sampler in [Sampler::TopK(3), Sampler::Temperature(0.8)] {
            let a = generate(&state, &chords, &lyrics, sampler, 42).unwrap();
            let b = generate(&state, &chords, &lyrics, sampler, 42).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_heads_tie_break_to_token_zero() {
        let config = tiny_config();
        let mut state = ModelState::<f64>::init(config, 10).unwrap();
        for name in ["vocal_head", "song_head"] {
            state.params.for_each_mut(&mut |n, t| {
                if n == name {
                    for v in t.data_mut() {
                        *v = 0.0;
                    }
                }
            });
        }
        let chords: Vec<u16> = vec![5; 6];
        let lyrics: Vec<u16> = vec![2; 6];
        let (vocal, song) = generate(&state, &chords, &lyrics, Sampler::Greedy, 0).unwrap();
        assert!(vocal.iter().all(|&t| t == 0));
        assert!(song.iter().all(|&t| t == 0));
    }

    #[test]
    fn generation_rejects_over_capacity() {
        let config = tiny_config();
        let state = ModelState::<f64>::init(config, 11).unwrap();
        let chords: Vec<u16> = vec![0; 33];
        let lyrics: Vec<u16> = vec![0; 33];
        assert!(matches!(
            generate(&state, &chords, &lyrics, Sampler::Greedy, 0),
            Err(ModelError::Capacity { frames: 33, max: 32 })
        ));
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let config = tiny_config();
        let state = ModelState::<f32>::init(config.clone(), 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let loaded: ModelState<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, state.config);

        let batch = tiny_batch(8, 5);
        let run = |s: &ModelState<f32>| {
            let mut tape = Tape::new();
            let vars = s.stage(&mut tape, false);
            let out = forward_teacher_forced(&mut tape, &batch, &vars, &config).unwrap();
            tape.data(out.song_logits).to_vec()
        };
        assert_eq!(run(&state), run(&loaded));
    }

    #[test]
    fn checkpoint_rejects_wrong_dtype() {
        let config = tiny_config();
        let state = ModelState::<f32>::init(config, 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state, &path).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
    }
}
