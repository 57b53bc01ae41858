//! Cross-layer fusion: a residual MLP expert per tapped layer maps its
//! compressed feature into a shared space, a gate reads every expert output
//! and assigns dense softmax weights, and the item embedding is the weighted
//! sum.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, softmax};
use crate::params::affine;

/// How per-tap features are built, or whether fusion is bypassed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Merge + attention-pool compressor at every tap.
    Full,
    /// Final token of every tap, projected to `d_c`.
    LastTokenMoe,
    /// Unweighted token mean of every tap, projected to `d_c`.
    MeanPoolMoe,
    /// Final token of the deepest tap projected straight to `d_z`; no gate.
    LastLayerLastToken,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::Full,
        FusionMode::LastTokenMoe,
        FusionMode::MeanPoolMoe,
        FusionMode::LastLayerLastToken,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Full => "full",
            FusionMode::LastTokenMoe => "last_token_moe",
            FusionMode::MeanPoolMoe => "mean_pool_moe",
            FusionMode::LastLayerLastToken => "last_layer_last_token",
        }
    }

    pub fn id(&self) -> u32 {
        match self {
            FusionMode::Full => 0,
            FusionMode::LastTokenMoe => 1,
            FusionMode::MeanPoolMoe => 2,
            FusionMode::LastLayerLastToken => 3,
        }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.id() == id)
            .ok_or_else(|| Error::Format(format!("unknown fusion mode id {id}")))
    }

    pub fn has_gate(&self) -> bool {
        *self != FusionMode::LastLayerLastToken
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub d_c: usize,
    pub d_z: usize,
    /// `d_c × d_z`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `d_z × d_z`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Affine shortcut, present only when `d_c != d_z`.
    pub shortcut: Option<(Vec<f64>, Vec<f64>)>,
}

/// `h = W2·tanh(W1·e + b1) + b2 + shortcut(e)`.
pub fn expert_forward(e: &[f64], p: &ExpertParams) -> Result<Vec<f64>> {
    if e.len() != p.d_c {
        return Err(Error::Shape(format!(
            "expert expects width {}, got {}",
            p.d_c,
            e.len()
        )));
    }
    let mut t = affine(e, &p.w1, &p.b1, 1);
    t.iter_mut().for_each(|v| *v = v.tanh());
    let mut h = affine(&t, &p.w2, &p.b2, 1);
    match &p.shortcut {
        None => add_into(&mut h, e),
        Some((w, b)) => add_into(&mut h, &affine(e, w, b, 1)),
    }
    Ok(h)
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub n_taps: usize,
    pub d_z: usize,
    /// `(n_taps·d_z) × hidden`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `hidden × n_taps`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Gate logits from the concatenated expert outputs.
pub fn gate_logits(h: &[Vec<f64>], p: &GateParams) -> Result<Vec<f64>> {
    if h.len() != p.n_taps {
        return Err(Error::Shape(format!(
            "gate expects {} layer vectors, got {}",
            p.n_taps,
            h.len()
        )));
    }
    if let Some(bad) = h.iter().find(|v| v.len() != p.d_z) {
        return Err(Error::Shape(format!(
            "gate expects width {}, got {}",
            p.d_z,
            bad.len()
        )));
    }
    let c: Vec<f64> = h.concat();
    let mut g = affine(&c, &p.w1, &p.b1, 1);
    g.iter_mut().for_each(|v| *v = v.tanh());
    Ok(affine(&g, &p.w2, &p.b2, 1))
}

/// π = softmax(G(concat(h))).
pub fn gate_forward(h: &[Vec<f64>], p: &GateParams) -> Result<Vec<f64>> {
    Ok(softmax(&gate_logits(h, p)?))
}

/// z = Σ π_ℓ h_ℓ, accumulated in layer order.
pub fn fuse(h: &[Vec<f64>], pi: &[f64]) -> Result<Vec<f64>> {
    if h.len() != pi.len() || h.is_empty() {
        return Err(Error::Shape(format!(
            "{} weights for {} layer vectors",
            pi.len(),
            h.len()
        )));
    }
    let mut z = vec![0.0; h[0].len()];
    for (hl, &w) in h.iter().zip(pi) {
        if hl.len() != z.len() {
            return Err(Error::Shape("layer vectors differ in width".into()));
        }
        axpy(w, hl, &mut z);
    }
    Ok(z)
}
