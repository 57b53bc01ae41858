//! Frozen decoder-only transformer standing in for the video LLM.
//!
//! Pre-norm blocks with causal multi-head attention and a GELU MLP, a tied
//! output head, and single-precision arithmetic throughout. Weights are drawn
//! once from a seeded generator and never change.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::SyntheticVideo;
use crate::error::{Error, Result};
use crate::linalg::{sgemm, Op};

const LN_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub tap_stride: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_layers: 12,
            d: 64,
            n_heads: 4,
            vocab_size: 256,
            max_seq: 64,
            tap_stride: 2,
            seed: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d == 0 || self.n_heads == 0 {
            return Err(Error::Config("n_layers, d and n_heads must be positive".into()));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.d, self.n_heads
            )));
        }
        if self.tap_stride == 0 || self.tap_stride > self.n_layers {
            return Err(Error::Config(format!(
                "tap_stride {} must lie in [1, {}]",
                self.tap_stride, self.n_layers
            )));
        }
        if self.vocab_size == 0 || self.max_seq == 0 {
            return Err(Error::Config("vocab_size and max_seq must be positive".into()));
        }
        Ok(())
    }

    /// Tapped layer indices: 0, stride, 2·stride, … below `n_layers`.
    pub fn tap_layers(&self) -> Vec<usize> {
        let n = self.n_layers.div_ceil(self.tap_stride);
        (0..n).map(|i| i * self.tap_stride).collect()
    }

    pub fn n_taps(&self) -> usize {
        self.n_layers.div_ceil(self.tap_stride)
    }
}

/// Prompt and decode budget applied to every item during extraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub prompt: Vec<u32>,
    pub n_new: usize,
}

impl ExtractionConfig {
    pub fn for_vocab(vocab_size: usize) -> Self {
        let base = vocab_size.saturating_sub(4) as u32;
        Self {
            prompt: (base..vocab_size as u32).collect(),
            n_new: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpanKind {
    Content,
    Prompt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub kind: SpanKind,
    pub start: usize,
    pub end: usize,
}

/// The joint input sequence: content tokens followed by prompt tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    /// `n_original × d` token embeddings, row-major.
    pub embedded: Vec<f32>,
    pub spans: Vec<Span>,
    pub n_original: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TapState {
    pub layer_index: usize,
    /// `(n_original + n_new) × d`, row-major.
    pub hidden: Vec<f32>,
}

/// Hidden states captured at every tapped layer, with the first `n_original`
/// rows being old tokens and the remaining `n_new` rows generated ones.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStates {
    pub d: usize,
    pub tap_stride: usize,
    pub n_original: usize,
    pub n_new: usize,
    pub taps: Vec<TapState>,
}

impl LayerStates {
    pub fn n_tokens(&self) -> usize {
        self.n_original + self.n_new
    }

    pub fn old_count(&self) -> usize {
        self.n_original
    }

    pub fn new_count(&self) -> usize {
        self.n_new
    }

    pub fn old_tokens(&self, tap: usize) -> &[f32] {
        &self.taps[tap].hidden[..self.n_original * self.d]
    }

    pub fn new_tokens(&self, tap: usize) -> &[f32] {
        &self.taps[tap].hidden[self.n_original * self.d..]
    }

    pub fn token(&self, tap: usize, row: usize) -> &[f32] {
        &self.taps[tap].hidden[row * self.d..(row + 1) * self.d]
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Shape("layer states have no taps".into()));
        }
        if self.n_original == 0 {
            return Err(Error::Shape("layer states have no old tokens".into()));
        }
        let want = self.n_tokens() * self.d;
        let mut prev = None;
        for t in &self.taps {
            if t.hidden.len() != want {
                return Err(Error::Shape(format!(
                    "tap {} holds {} values, expected {}",
                    t.layer_index,
                    t.hidden.len(),
                    want
                )));
            }
            if prev.is_some_and(|p| t.layer_index <= p) {
                return Err(Error::Shape("taps are not in ascending layer order".into()));
            }
            prev = Some(t.layer_index);
        }
        Ok(())
    }
}

struct LayerNorm {
    gain: Vec<f32>,
    bias: Vec<f32>,
}

struct Block {
    ln1: LayerNorm,
    w_qkv: Vec<f32>, // d × 3d
    b_qkv: Vec<f32>,
    w_o: Vec<f32>, // d × d
    b_o: Vec<f32>,
    ln2: LayerNorm,
    w_up: Vec<f32>, // d × 4d
    b_up: Vec<f32>,
    w_down: Vec<f32>, // 4d × d
    b_down: Vec<f32>,
}

pub struct Backbone {
    config: BackboneConfig,
    tok_embed: Vec<f32>, // vocab × d, tied with the output head
    pos_embed: Vec<f32>, // max_seq × d
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

impl LayerNorm {
    fn identity(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn apply(&self, x: &[f32], out: &mut [f32]) {
        let d = self.gain.len();
        for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                o[j] = (row[j] - mean) * inv * self.gain[j] + self.bias[j];
            }
        }
    }
}

fn add_bias_rows(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tok_embed = uniform(&mut rng, config.vocab_size * d, 1.0);
        let pos_embed = uniform(&mut rng, config.max_seq * d, 0.5);
        let a_d = 1.0 / (d as f32).sqrt();
        let a_4d = 1.0 / ((4 * d) as f32).sqrt();
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1: LayerNorm::identity(d),
                w_qkv: uniform(&mut rng, d * 3 * d, a_d),
                b_qkv: uniform(&mut rng, 3 * d, a_d),
                w_o: uniform(&mut rng, d * d, a_d),
                b_o: uniform(&mut rng, d, a_d),
                ln2: LayerNorm::identity(d),
                w_up: uniform(&mut rng, d * 4 * d, a_d),
                b_up: uniform(&mut rng, 4 * d, a_d),
                w_down: uniform(&mut rng, 4 * d * d, a_4d),
                b_down: uniform(&mut rng, d, a_4d),
            })
            .collect();
        Ok(Self {
            config,
            tok_embed,
            pos_embed,
            blocks,
            ln_f: LayerNorm::identity(d),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.tok_embed, &self.pos_embed];
        for b in &self.blocks {
            out.extend([
                &b.ln1.gain[..],
                &b.ln1.bias,
                &b.w_qkv,
                &b.b_qkv,
                &b.w_o,
                &b.b_o,
                &b.ln2.gain,
                &b.ln2.bias,
                &b.w_up,
                &b.b_up,
                &b.w_down,
                &b.b_down,
            ]);
        }
        out.extend([&self.ln_f.gain[..], &self.ln_f.bias]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// SHA-256 over every weight in a fixed order, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn token_embedding(&self, id: u32) -> &[f32] {
        let d = self.config.d;
        &self.tok_embed[id as usize * d..(id as usize + 1) * d]
    }

    pub fn position_embedding(&self, pos: usize) -> &[f32] {
        let d = self.config.d;
        &self.pos_embed[pos * d..(pos + 1) * d]
    }

    /// Read-only view of block `l`'s attention and MLP weights, in the order
    /// (w_qkv, b_qkv, w_o, b_o, w_up, b_up, w_down, b_down).
    pub fn block_weights(&self, l: usize) -> [&[f32]; 8] {
        let b = &self.blocks[l];
        [
            &b.w_qkv, &b.b_qkv, &b.w_o, &b.b_o, &b.w_up, &b.b_up, &b.w_down, &b.b_down,
        ]
    }

    pub fn tokenize(&self, video: &SyntheticVideo, prompt: &[u32]) -> Result<TokenSequence> {
        let n_content = video.token_ids.len();
        let n = n_content + prompt.len();
        if n > self.config.max_seq {
            return Err(Error::Length(format!(
                "{n} tokens exceed max_seq {}",
                self.config.max_seq
            )));
        }
        let mut token_ids = Vec::with_capacity(n);
        token_ids.extend_from_slice(&video.token_ids);
        token_ids.extend_from_slice(prompt);
        if let Some(&bad) = token_ids
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Input(format!(
                "token id {bad} is outside the vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let mut embedded = Vec::with_capacity(n * self.config.d);
        for &t in &token_ids {
            embedded.extend_from_slice(self.token_embedding(t));
        }
        let mut spans = vec![Span {
            kind: SpanKind::Content,
            start: 0,
            end: n_content,
        }];
        if !prompt.is_empty() {
            spans.push(Span {
                kind: SpanKind::Prompt,
                start: n_content,
                end: n,
            });
        }
        Ok(TokenSequence {
            token_ids,
            embedded,
            spans,
            n_original: n,
        })
    }

    /// Greedily decodes `n_new` tokens, then captures every tapped layer over
    /// the full old+new sequence.
    pub fn forward_collect(&self, z: &TokenSequence, n_new: usize) -> Result<LayerStates> {
        let total = z.n_original + n_new;
        if total > self.config.max_seq {
            return Err(Error::Length(format!(
                "{} original + {n_new} new tokens exceed max_seq {}",
                z.n_original, self.config.max_seq
            )));
        }
        let mut ids = z.token_ids.clone();
        for _ in 0..n_new {
            let logits = self.next_token_logits(&ids);
            ids.push(argmax_lowest(&logits));
        }
        let taps = self.run(&ids, true).0;
        Ok(LayerStates {
            d: self.config.d,
            tap_stride: self.config.tap_stride,
            n_original: z.n_original,
            n_new,
            taps,
        })
    }

    /// Tokenize + forward_collect with an extraction config.
    pub fn extract(&self, video: &SyntheticVideo, ex: &ExtractionConfig) -> Result<LayerStates> {
        let z = self.tokenize(video, &ex.prompt)?;
        self.forward_collect(&z, ex.n_new)
    }

    pub fn next_token_logits(&self, ids: &[u32]) -> Vec<f32> {
        let d = self.config.d;
        let (_, x) = self.run(ids, false);
        let last = &x[(ids.len() - 1) * d..ids.len() * d];
        let mut h = vec![0.0; d];
        self.ln_f.apply(last, &mut h);
        let mut logits = vec![0.0; self.config.vocab_size];
        sgemm(
            Op::N,
            Op::T,
            1,
            self.config.vocab_size,
            d,
            &h,
            &self.tok_embed,
            0.0,
            &mut logits,
        );
        logits
    }

    /// Runs the residual stream. With `capture`, returns tapped states and
    /// stops after the deepest tap; otherwise runs every block.
    fn run(&self, ids: &[u32], capture: bool) -> (Vec<TapState>, Vec<f32>) {
        let d = self.config.d;
        let n = ids.len();
        let mut x = Vec::with_capacity(n * d);
        for (pos, &t) in ids.iter().enumerate() {
            let e = self.token_embedding(t);
            let p = self.position_embedding(pos);
            x.extend(e.iter().zip(p).map(|(a, b)| a + b));
        }
        let taps_at = self.config.tap_layers();
        let mut taps = Vec::new();
        if capture {
            taps.push(TapState {
                layer_index: 0,
                hidden: x.clone(),
            });
        }
        let last_layer = if capture {
            *taps_at.last().expect("at least one tap")
        } else {
            self.config.n_layers
        };
        let mut scratch = Scratch::new(n, d);
        for (l, block) in self.blocks.iter().enumerate().take(last_layer) {
            self.block_forward(block, &mut x, n, &mut scratch);
            if capture && taps_at.contains(&(l + 1)) {
                taps.push(TapState {
                    layer_index: l + 1,
                    hidden: x.clone(),
                });
            }
        }
        (taps, x)
    }

    fn block_forward(&self, b: &Block, x: &mut [f32], n: usize, s: &mut Scratch) {
        let d = self.config.d;
        let heads = self.config.n_heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f32).sqrt();

        b.ln1.apply(x, &mut s.h);
        sgemm(Op::N, Op::N, n, 3 * d, d, &s.h, &b.w_qkv, 0.0, &mut s.qkv);
        add_bias_rows(&mut s.qkv, &b.b_qkv);

        s.attn.iter_mut().for_each(|v| *v = 0.0);
        for head in 0..heads {
            let qo = head * hd;
            let ko = d + head * hd;
            let vo = 2 * d + head * hd;
            for i in 0..n {
                let q = &s.qkv[i * 3 * d + qo..i * 3 * d + qo + hd];
                let scores = &mut s.scores[..=i];
                let mut max = f32::NEG_INFINITY;
                for (j, sc) in scores.iter_mut().enumerate() {
                    let k = &s.qkv[j * 3 * d + ko..j * 3 * d + ko + hd];
                    *sc = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                    max = max.max(*sc);
                }
                let mut sum = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    sum += *sc;
                }
                let out = &mut s.attn[i * d + head * hd..i * d + head * hd + hd];
                for (j, sc) in scores.iter().enumerate() {
                    let w = sc / sum;
                    let v = &s.qkv[j * 3 * d + vo..j * 3 * d + vo + hd];
                    for (o, vv) in out.iter_mut().zip(v) {
                        *o += w * vv;
                    }
                }
            }
        }
        sgemm(Op::N, Op::N, n, d, d, &s.attn, &b.w_o, 1.0, x);
        add_bias_rows(x, &b.b_o);

        b.ln2.apply(x, &mut s.h);
        sgemm(Op::N, Op::N, n, 4 * d, d, &s.h, &b.w_up, 0.0, &mut s.up);
        add_bias_rows(&mut s.up, &b.b_up);
        s.up.iter_mut().for_each(|v| *v = gelu(*v));
        sgemm(Op::N, Op::N, n, d, 4 * d, &s.up, &b.w_down, 1.0, x);
        add_bias_rows(x, &b.b_down);
    }
}

struct Scratch {
    h: Vec<f32>,
    qkv: Vec<f32>,
    attn: Vec<f32>,
    up: Vec<f32>,
    scores: Vec<f32>,
}

impl Scratch {
    fn new(n: usize, d: usize) -> Self {
        Self {
            h: vec![0.0; n * d],
            qkv: vec![0.0; n * 3 * d],
            attn: vec![0.0; n * d],
            up: vec![0.0; n * 4 * d],
            scores: vec![0.0; n],
        }
    }
}

/// Index of the largest logit; ties go to the lowest token id.
pub fn argmax_lowest(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
