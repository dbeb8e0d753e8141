//! Dual-path chord/audio fusion.
//!
//! A non-causal transformer stack encodes the chord stream, a causal stack
//! encodes the lyric-audio stream, cross-attention aligns the two, and a
//! per-frame weight sequence gates how much aligned chord information enters
//! the fused output:
//!
//! ```text
//! C = softmax(Q K^T / sqrt(d_k)) V        (alignment)
//! W = sigmoid(M([C; A]))                  (per-frame weights)
//! F = sqrt(W) . C + sqrt(1 - W) . A       (fusion)
//! ```
//!
//! Two ablation baselines live here as well: frame-local concatenation and
//! plain cross-attention without the weight sequence.

use crate::tensor::{Element, Result, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;

/// Weight-sequence clamp band; keeps `sqrt(1 - W)` gradients finite under
/// sigmoid saturation.
pub const W_CLAMP: f64 = 1e-6;

const INIT_STD: f64 = 0.02;

/// How chord information enters the decoder trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Dual-path cross-attention with the dynamic weight sequence.
    Dws,
    /// Frame-local concatenation then projection.
    Concat,
    /// Dual-path cross-attention with a plain residual, no weights.
    Xattn,
    /// Chord stream ignored entirely.
    None,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::Dws,
        FusionMode::Concat,
        FusionMode::Xattn,
        FusionMode::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Dws => "dws",
            FusionMode::Concat => "concat",
            FusionMode::Xattn => "xattn",
            FusionMode::None => "none",
        }
    }

    pub fn uses_chords(self) -> bool {
        !matches!(self, FusionMode::None)
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "dws" => Ok(FusionMode::Dws),
            "concat" => Ok(FusionMode::Concat),
            "xattn" => Ok(FusionMode::Xattn),
            "none" => Ok(FusionMode::None),
            other => Err(format!(
                "unknown fusion mode {other:?} (expected dws, concat, xattn, or none)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub dim: usize,
    pub chord_path_layers: usize,
    pub audio_path_layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub mlp_ratio: usize,
    pub mode: FusionMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            dim: 64,
            chord_path_layers: 2,
            audio_path_layers: 2,
            heads: 4,
            dropout: 0.1,
            mlp_ratio: 2,
            mode: FusionMode::Dws,
        }
    }
}

// ── parameter containers ────────────────────────────────────────────
//
// Generic over the payload so one set of structs serves both stored
// parameters (`Linear<Tensor<E>>`) and their staged tape handles
// (`Linear<Var>`). `for_each` / `for_each_mut` must traverse fields in the
// same order; the optimizer and checkpoint code rely on it.

#[derive(Debug, Clone)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: Option<P>,
}

impl<P> Linear<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&self.weight),
            bias: self.bias.as_ref().map(&mut *f),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut P)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }
}

/// Multi-head attention weights: one q/k/v projection per head plus a
/// shared output map. Projections carry no bias.
#[derive(Debug, Clone)]
pub struct Attention<P> {
    pub wq: Vec<P>,
    pub wk: Vec<P>,
    pub wv: Vec<P>,
    pub wo: P,
}

impl<P> Attention<P> {
    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Attention<Q> {
        Attention {
            wq: self.wq.iter().map(&mut *f).collect(),
            wk: self.wk.iter().map(&mut *f).collect(),
            wv: self.wv.iter().map(&mut *f).collect(),
            wo: f(&self.wo),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        for (h, p) in self.wq.iter().enumerate() {
            f(format!("{prefix}.wq{h}"), p);
        }
        for (h, p) in self.wk.iter().enumerate() {
            f(format!("{prefix}.wk{h}"), p);
        }
        for (h, p) in self.wv.iter().enumerate() {
            f(format!("{prefix}.wv{h}"), p);
        }
        f(format!("{prefix}.wo"), &self.wo);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut P)) {
        for (h, p) in self.wq.iter_mut().enumerate() {
            f(format!("{prefix}.wq{h}"), p);
        }
        for (h, p) in self.wk.iter_mut().enumerate() {
            f(format!("{prefix}.wk{h}"), p);
        }
        for (h, p) in self.wv.iter_mut().enumerate() {
            f(format!("{prefix}.wv{h}"), p);
        }
        f(format!("{prefix}.wo"), &mut self.wo);
    }
}

/// Pre-norm transformer block: attention and MLP residual branches.
#[derive(Debug, Clone)]
pub struct Block<P> {
    pub ln1_gain: P,
    pub ln1_bias: P,
    pub attn: Attention<P>,
    pub ln2_gain: P,
    pub ln2_bias: P,
    pub mlp_in: Linear<P>,
    pub mlp_out: Linear<P>,
}

impl<P> Block<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Block<Q> {
        Block {
            ln1_gain: f(&self.ln1_gain),
            ln1_bias: f(&self.ln1_bias),
            attn: self.attn.map(f),
            ln2_gain: f(&self.ln2_gain),
            ln2_bias: f(&self.ln2_bias),
            mlp_in: self.mlp_in.map(f),
            mlp_out: self.mlp_out.map(f),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.ln1_gain"), &self.ln1_gain);
        f(format!("{prefix}.ln1_bias"), &self.ln1_bias);
        self.attn.for_each(&format!("{prefix}.attn"), f);
        f(format!("{prefix}.ln2_gain"), &self.ln2_gain);
        f(format!("{prefix}.ln2_bias"), &self.ln2_bias);
        self.mlp_in.for_each(&format!("{prefix}.mlp_in"), f);
        self.mlp_out.for_each(&format!("{prefix}.mlp_out"), f);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut P)) {
        f(format!("{prefix}.ln1_gain"), &mut self.ln1_gain);
        f(format!("{prefix}.ln1_bias"), &mut self.ln1_bias);
        self.attn.for_each_mut(&format!("{prefix}.attn"), f);
        f(format!("{prefix}.ln2_gain"), &mut self.ln2_gain);
        f(format!("{prefix}.ln2_bias"), &mut self.ln2_bias);
        self.mlp_in.for_each_mut(&format!("{prefix}.mlp_in"), f);
        self.mlp_out.for_each_mut(&format!("{prefix}.mlp_out"), f);
    }
}

/// All learnable state of the fusion stage.
#[derive(Debug, Clone)]
pub struct FusionParams<P> {
    pub chord_blocks: Vec<Block<P>>,
    pub audio_blocks: Vec<Block<P>>,
    pub align: Attention<P>,
    /// The single linear map producing the pre-sigmoid weight per frame.
    pub weight_map: Linear<P>,
    /// Projection for the concatenation baseline.
    pub concat_proj: Linear<P>,
}

impl<P> FusionParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> FusionParams<Q> {
        FusionParams {
            chord_blocks: self.chord_blocks.iter().map(|b| b.map(f)).collect(),
            audio_blocks: self.audio_blocks.iter().map(|b| b.map(f)).collect(),
            align: self.align.map(f),
            weight_map: self.weight_map.map(f),
            concat_proj: self.concat_proj.map(f),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        for (i, b) in self.chord_blocks.iter().enumerate() {
            b.for_each(&format!("{prefix}.chord_block{i}"), f);
        }
        for (i, b) in self.audio_blocks.iter().enumerate() {
            b.for_each(&format!("{prefix}.audio_block{i}"), f);
        }
        self.align.for_each(&format!("{prefix}.align"), f);
        self.weight_map.for_each(&format!("{prefix}.weight_map"), f);
        self.concat_proj.for_each(&format!("{prefix}.concat_proj"), f);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut P)) {
        for (i, b) in self.chord_blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("{prefix}.chord_block{i}"), f);
        }
        for (i, b) in self.audio_blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("{prefix}.audio_block{i}"), f);
        }
        self.align.for_each_mut(&format!("{prefix}.align"), f);
        self.weight_map
            .for_each_mut(&format!("{prefix}.weight_map"), f);
        self.concat_proj
            .for_each_mut(&format!("{prefix}.concat_proj"), f);
    }
}

// ── initialization ──────────────────────────────────────────────────

impl<E: Element> Linear<Tensor<E>> {
    pub fn init(in_dim: usize, out_dim: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Tensor::randn(vec![in_dim, out_dim], INIT_STD, rng),
            bias: bias.then(|| Tensor::zeros(vec![out_dim])),
        }
    }
}

impl<E: Element> Attention<Tensor<E>> {
    pub fn init(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let head_dim = dim / heads;
        let proj = |rng: &mut ChaCha8Rng| Tensor::randn(vec![dim, head_dim], INIT_STD, rng);
        Attention {
            wq: (0..heads).map(|_| proj(rng)).collect(),
            wk: (0..heads).map(|_| proj(rng)).collect(),
            wv: (0..heads).map(|_| proj(rng)).collect(),
            wo: Tensor::randn(vec![dim, dim], INIT_STD, rng),
        }
    }
}

impl<E: Element> Block<Tensor<E>> {
    pub fn init(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = dim * mlp_ratio;
        Block {
            ln1_gain: Tensor::full(vec![dim], E::ONE),
            ln1_bias: Tensor::zeros(vec![dim]),
            attn: Attention::init(dim, heads, rng),
            ln2_gain: Tensor::full(vec![dim], E::ONE),
            ln2_bias: Tensor::zeros(vec![dim]),
            mlp_in: Linear::init(dim, hidden, true, rng),
            mlp_out: Linear::init(hidden, dim, true, rng),
        }
    }

    /// Zeroes the residual-branch outputs so the block becomes the identity.
    pub fn zero_residual_outputs(&mut self) {
        for v in self.attn.wo.data_mut() {
            *v = E::ZERO;
        }
        for v in self.mlp_out.weight.data_mut() {
            *v = E::ZERO;
        }
        if let Some(b) = &mut self.mlp_out.bias {
            for v in b.data_mut() {
                *v = E::ZERO;
            }
        }
    }
}

impl<E: Element> FusionParams<Tensor<E>> {
    pub fn init(cfg: &FusionConfig, rng: &mut ChaCha8Rng) -> Self {
        FusionParams {
            chord_blocks: (0..cfg.chord_path_layers)
                .map(|_| Block::init(cfg.dim, cfg.heads, cfg.mlp_ratio, rng))
                .collect(),
            audio_blocks: (0..cfg.audio_path_layers)
                .map(|_| Block::init(cfg.dim, cfg.heads, cfg.mlp_ratio, rng))
                .collect(),
            align: Attention::init(cfg.dim, cfg.heads, rng),
            weight_map: Linear::init(2 * cfg.dim, 1, true, rng),
            concat_proj: Linear::init(2 * cfg.dim, cfg.dim, true, rng),
        }
    }
}

// ── forward pieces ──────────────────────────────────────────────────

fn linear<E: Element>(tape: &mut Tape<E>, x: Var, lin: &Linear<Var>) -> Result<Var> {
    let y = tape.matmul(x, lin.weight)?;
    match lin.bias {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

/// Multi-head attention with queries from `q_input` and keys/values from
/// `kv_input`. `causal` requires both inputs to be the same sequence.
///
/// Per-head projection weights are concatenated so the q and k/v projections
/// each run as one gemm; heads are then column slices.
pub fn attention<E: Element>(
    tape: &mut Tape<E>,
    q_input: Var,
    kv_input: Var,
    attn: &Attention<Var>,
    causal: bool,
) -> Result<Var> {
    let heads = attn.heads();
    let dim = tape.shape(q_input)[1];
    let head_dim = dim / heads;
    let scale = E::from_f64(1.0 / (head_dim as f64).sqrt());

    let wq_all = tape.concat_cols(&attn.wq)?;
    let q_all = tape.matmul(q_input, wq_all)?;
    let mut kv_weights = Vec::with_capacity(2 * heads);
    kv_weights.extend_from_slice(&attn.wk);
    kv_weights.extend_from_slice(&attn.wv);
    let wkv_all = tape.concat_cols(&kv_weights)?;
    let kv_all = tape.matmul(kv_input, wkv_all)?;

    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(q_all, h * head_dim, head_dim)?;
        let k = tape.slice_cols(kv_all, h * head_dim, head_dim)?;
        let v = tape.slice_cols(kv_all, dim + h * head_dim, head_dim)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, scale);
        let probs = if causal {
            tape.causal_softmax(scores)?
        } else {
            tape.softmax(scores, 1)?
        };
        contexts.push(tape.matmul(probs, v)?);
    }
    let ctx = tape.concat_cols(&contexts)?;
    tape.matmul(ctx, attn.wo)
}

/// One pre-norm block: `x + Attn(LN(x))` then `x + MLP(LN(x))`.
pub fn transformer_block<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    block: &Block<Var>,
    causal: bool,
    dropout: f64,
) -> Result<Var> {
    let h = tape.layer_norm(x, block.ln1_gain, block.ln1_bias)?;
    let a = attention(tape, h, h, &block.attn, causal)?;
    let a = tape.dropout(a, dropout)?;
    let x = tape.add(x, a)?;

    let h = tape.layer_norm(x, block.ln2_gain, block.ln2_bias)?;
    let m = linear(tape, h, &block.mlp_in)?;
    let m = tape.gelu(m);
    let m = linear(tape, m, &block.mlp_out)?;
    let m = tape.dropout(m, dropout)?;
    tape.add(x, m)
}

/// Runs a stack of blocks. Non-causal for the chord path, causal for the
/// lyric-audio path.
pub fn encode_path<E: Element>(
    tape: &mut Tape<E>,
    mut x: Var,
    blocks: &[Block<Var>],
    causal: bool,
    dropout: f64,
) -> Result<Var> {
    for block in blocks {
        x = transformer_block(tape, x, block, causal, dropout)?;
    }
    Ok(x)
}

/// Cross-attention alignment: queries from the (causal) lyric-audio
/// encoding, keys and values from the chord encoding. The output has one
/// row per audio frame; chord and audio frame counts may differ.
pub fn align<E: Element>(
    tape: &mut Tape<E>,
    audio_enc: Var,
    chord_enc: Var,
    attn: &Attention<Var>,
) -> Result<Var> {
    attention(tape, audio_enc, chord_enc, attn, false)
}

/// Per-frame weights `w_t = sigmoid(m . [c_t; a_t] + b)`, clamped to
/// `[1e-6, 1 - 1e-6]`. Output shape is `[frames, 1]`.
pub fn dynamic_weights<E: Element>(
    tape: &mut Tape<E>,
    aligned: Var,
    audio_enc: Var,
    weight_map: &Linear<Var>,
) -> Result<Var> {
    let cat = tape.concat_cols(&[aligned, audio_enc])?;
    let pre = linear(tape, cat, weight_map)?;
    let w = tape.sigmoid(pre);
    Ok(tape.clamp(w, E::from_f64(W_CLAMP), E::from_f64(1.0 - W_CLAMP)))
}

/// `F = sqrt(W) . C + sqrt(1 - W) . A`, the weight applied per frame across
/// all channels.
pub fn fuse<E: Element>(tape: &mut Tape<E>, aligned: Var, audio_enc: Var, w: Var) -> Result<Var> {
    let frames = tape.shape(w)[0];
    let sqrt_w = tape.sqrt(w);
    let ones = tape.constant(&Tensor::full(vec![frames, 1], E::ONE));
    let one_minus = tape.sub(ones, w)?;
    let sqrt_rest = tape.sqrt(one_minus);
    let c_part = tape.row_scale(aligned, sqrt_w)?;
    let a_part = tape.row_scale(audio_enc, sqrt_rest)?;
    tape.add(c_part, a_part)
}

/// Concatenation baseline: per-frame `[chord_t; audio_t]` projected back to
/// the model width. Strictly frame-local in the chord stream, so frame `t`
/// never sees chord frames other than `t`.
pub fn fuse_baseline_concat<E: Element>(
    tape: &mut Tape<E>,
    chord_emb: Var,
    lyric_audio_emb: Var,
    proj: &Linear<Var>,
) -> Result<Var> {
    let cat = tape.concat_cols(&[chord_emb, lyric_audio_emb])?;
    linear(tape, cat, proj)
}

/// Plain cross-attention baseline: the alignment output plus a residual of
/// the audio encoding, no weight sequence.
pub fn fuse_baseline_xattn<E: Element>(
    tape: &mut Tape<E>,
    aligned: Var,
    audio_enc: Var,
) -> Result<Var> {
    tape.add(aligned, audio_enc)
}

/// Full fusion pipeline for the configured mode. Inputs are the combined
/// chord and lyric-audio embedding sequences; output is the fused sequence
/// handed to the decoder trunk.
pub fn fuse_sequences<E: Element>(
    tape: &mut Tape<E>,
    cfg: &FusionConfig,
    chord_emb: Var,
    lyric_audio_emb: Var,
    params: &FusionParams<Var>,
) -> Result<Var> {
    match cfg.mode {
        FusionMode::None => Ok(lyric_audio_emb),
        FusionMode::Concat => {
            fuse_baseline_concat(tape, chord_emb, lyric_audio_emb, &params.concat_proj)
        }
        FusionMode::Dws | FusionMode::Xattn => {
            let chord_enc = encode_path(tape, chord_emb, &params.chord_blocks, false, cfg.dropout)?;
            let audio_enc =
                encode_path(tape, lyric_audio_emb, &params.audio_blocks, true, cfg.dropout)?;
            let aligned = align(tape, audio_enc, chord_enc, &params.align)?;
            if cfg.mode == FusionMode::Xattn {
                fuse_baseline_xattn(tape, aligned, audio_enc)
            } else {
                let w = dynamic_weights(tape, aligned, audio_enc, &params.weight_map)?;
                fuse(tape, aligned, audio_enc, w)
            }
        }
    }
}

/// Encodes a pre-staged chord embedding through the non-causal path only;
/// used by generation, where the chord encoding is fixed while audio grows.
pub fn encode_chord_only<E: Element>(
    tape: &mut Tape<E>,
    chord_emb: Var,
    params: &FusionParams<Var>,
    cfg: &FusionConfig,
) -> Result<Var> {
    encode_path(tape, chord_emb, &params.chord_blocks, false, cfg.dropout)
}

/// Continues the fusion pipeline for dws/xattn modes when the chord
/// encoding was computed elsewhere.
pub fn fuse_with_chord_encoding<E: Element>(
    tape: &mut Tape<E>,
    cfg: &FusionConfig,
    chord_enc: Var,
    lyric_audio_emb: Var,
    params: &FusionParams<Var>,
) -> Result<Var> {
    let audio_enc = encode_path(tape, lyric_audio_emb, &params.audio_blocks, true, cfg.dropout)?;
    let aligned = align(tape, audio_enc, chord_enc, &params.align)?;
    match cfg.mode {
        FusionMode::Xattn => fuse_baseline_xattn(tape, aligned, audio_enc),
        _ => {
            let w = dynamic_weights(tape, aligned, audio_enc, &params.weight_map)?;
            fuse(tape, aligned, audio_enc, w)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randn(shape: Vec<usize>, r: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, r)
    }

    #[test]
    fn zero_weight_map_gives_half_weights() {
        let mut tape = Tape::<f64>::new();
        let mut r = rng(0);
        let c = tape.constant(&randn(vec![5, 4], &mut r));
        let a = tape.constant(&randn(vec![5, 4], &mut r));
        let weight = tape.constant(&Tensor::zeros(vec![8, 1]));
        let bias = tape.constant(&Tensor::zeros(vec![1]));
        let map = Linear {
            weight,
            bias: Some(bias),
        };
        let w = dynamic_weights(&mut tape, c, a, &map).unwrap();
        for &v in tape.data(w) {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn saturated_bias_clamps_weights() {
        let mut tape = Tape::<f64>::new();
        let mut r = rng(1);
        let c = tape.constant(&randn(vec![3, 4], &mut r));
        let a = tape.constant(&randn(vec![3, 4], &mut r));
        let weight = tape.constant(&Tensor::zeros(vec![8, 1]));
        let bias = tape.constant(&Tensor::scalar(500.0));
        let map = Linear {
            weight,
            bias: Some(bias),
        };
        let w = dynamic_weights(&mut tape, c, a, &map).unwrap();
        for &v in tape.data(w) {
            assert_eq!(v, 1.0 - W_CLAMP);
        }
    }

    #[test]
    fn weight_map_is_frame_local_under_permutation() {
        let mut r = rng(2);
        let c = randn(vec![6, 4], &mut r);
        let a = randn(vec![6, 4], &mut r);
        let weight = randn(vec![8, 1], &mut r);
        let bias = randn(vec![1], &mut r);

        let eval = |c: &Tensor<f64>, a: &Tensor<f64>| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let cv = tape.constant(c);
            let av = tape.constant(a);
            let map = Linear {
                weight: tape.constant(&weight),
                bias: Some(tape.constant(&bias)),
            };
            let w = dynamic_weights(&mut tape, cv, av, &map).unwrap();
            tape.data(w).to_vec()
        };

        let base = eval(&c, &a);
        // reverse the frame order of both inputs
        let perm = |t: &Tensor<f64>| {
            let cols = t.shape()[1];
            let rows = t.shape()[0];
            let mut data = Vec::with_capacity(rows * cols);
            for r in (0..rows).rev() {
                data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
            }
            Tensor::new(vec![rows, cols], data).unwrap()
        };
        let permuted = eval(&perm(&c), &perm(&a));
        let reversed: Vec<f64> = base.iter().rev().copied().collect();
        assert_eq!(permuted, reversed);
    }

    #[test]
    fn fuse_analytic_quarter_weight() {
        let mut tape = Tape::<f64>::new();
        let mut r = rng(3);
        let c_t = randn(vec![4, 3], &mut r);
        let a_t = randn(vec![4, 3], &mut r);
        let c = tape.constant(&c_t);
        let a = tape.constant(&a_t);
        let w = tape.constant(&Tensor::full(vec![4, 1], 0.25));
        let f = fuse(&mut tape, c, a, w).unwrap();
        let fd = tape.data(f);
        for (i, &got) in fd.iter().enumerate() {
            let expect = 0.5 * c_t.data()[i] + 0.75f64.sqrt() * a_t.data()[i];
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_is_energy_preserving_not_convex() {
        // at w = 0.5 with C == A the output is sqrt(2) * C
        let mut tape = Tape::<f64>::new();
        let mut r = rng(4);
        let c_t = randn(vec![3, 2], &mut r);
        let c = tape.constant(&c_t);
        let w = tape.constant(&Tensor::full(vec![3, 1], 0.5));
        let f = fuse(&mut tape, c, c, w).unwrap();
        for (got, want) in tape.data(f).iter().zip(c_t.data()) {
            assert!((got - want * 2.0f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_at_w_one_limit_returns_c() {
        let mut tape = Tape::<f64>::new();
        let mut r = rng(5);
        let c_t = randn(vec![4, 3], &mut r);
        let a_t = randn(vec![4, 3], &mut r);
        let c = tape.constant(&c_t);
        let a = tape.constant(&a_t);
        let w = tape.constant(&Tensor::full(vec![4, 1], 1.0 - W_CLAMP));
        let f = fuse(&mut tape, c, a, w).unwrap();
        // residual is sqrt(1e-6) * A plus the sqrt(1 - 1e-6) shrink of C
        let diff_norm: f64 = tape
            .data(f)
            .iter()
            .zip(c_t.data())
            .map(|(got, want)| (got - want).powi(2))
            .sum::<f64>()
            .sqrt();
        let c_norm: f64 = c_t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff_norm / c_norm < 2e-3, "relative residual {}", diff_norm / c_norm);
    }

    #[test]
    fn identity_initialized_blocks_pass_input_through() {
        let mut r = rng(6);
        let mut block = Block::<Tensor<f64>>::init(8, 2, 2, &mut r);
        block.zero_residual_outputs();
        let x_t = randn(vec![5, 8], &mut r);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&x_t);
        let staged = block.map(&mut |t| tape.constant(t));
        let y = transformer_block(&mut tape, x, &staged, false, 0.0).unwrap();
        assert_eq!(tape.data(y), x_t.data());
    }

    #[test]
    fn align_single_chord_frame_broadcasts_value() {
        let mut r = rng(7);
        let attn_p = Attention::<Tensor<f64>>::init(8, 2, &mut r);
        let audio = randn(vec![5, 8], &mut r);
        let chord = randn(vec![1, 8], &mut r);

        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&audio);
        let c = tape.constant(&chord);
        let staged = attn_p.map(&mut |t| tape.constant(t));
        let out = align(&mut tape, a, c, &staged).unwrap();
        let d = tape.data(out);
        // softmax over a singleton is 1, so every row is the same projected
        // value regardless of the query
        for row in 1..5 {
            assert_eq!(&d[row * 8..(row + 1) * 8], &d[0..8]);
        }
    }

    #[test]
    fn align_uniform_keys_average_values() {
        let mut r = rng(8);
        let dim = 6;
        let mut attn_p = Attention::<Tensor<f64>>::init(dim, 1, &mut r);
        // zero the key projection so all scores are equal; identity wo and
        // value projection to read the raw average
        attn_p.wk[0] = Tensor::zeros(vec![dim, dim]);
        let mut eye = Tensor::zeros(vec![dim, dim]);
        for i in 0..dim {
            eye.data_mut()[i * dim + i] = 1.0;
        }
        attn_p.wv[0] = eye.clone();
        attn_p.wo = eye;

        let audio = randn(vec![3, dim], &mut r);
        let chord = randn(vec![4, dim], &mut r);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&audio);
        let c = tape.constant(&chord);
        let staged = attn_p.map(&mut |t| tape.constant(t));
        let out = align(&mut tape, a, c, &staged).unwrap();
        let d = tape.data(out);
        for j in 0..dim {
            let mean: f64 = (0..4).map(|r| chord.data()[r * dim + j]).sum::<f64>() / 4.0;
            for row in 0..3 {
                assert!((d[row * dim + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn energy_identity_per_frame() {
        let mut tape = Tape::<f64>::new();
        let mut r = rng(9);
        let c = tape.constant(&randn(vec![16, 4], &mut r));
        let a = tape.constant(&randn(vec![16, 4], &mut r));
        let weight = randn(vec![8, 1], &mut r);
        let bias = randn(vec![1], &mut r);
        let map = Linear {
            weight: tape.constant(&weight),
            bias: Some(tape.constant(&bias)),
        };
        let w = dynamic_weights(&mut tape, c, a, &map).unwrap();
        for &wt in tape.data(w) {
            assert!(wt > 0.0 && wt < 1.0);
            let e = wt.sqrt().powi(2) + (1.0 - wt).sqrt().powi(2);
            assert!((e - 1.0).abs() < 1e-9);
        }
    }
}
