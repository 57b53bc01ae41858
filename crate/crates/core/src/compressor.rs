//! Per-layer token compression: bipartite token merging on the old branch,
//! learnable-query attention pooling on both branches, and an affine map from
//! the pooled `m × d` block to half of the layer feature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::affine;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeConfig {
    /// Tokens removed per pass.
    pub r: usize,
    pub passes: usize,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self { r: 2, passes: 2 }
    }
}

impl MergeConfig {
    pub const NONE: MergeConfig = MergeConfig { r: 0, passes: 0 };

    pub fn output_len(&self, n: usize) -> Result<usize> {
        let mut left = n;
        for pass in 0..self.passes {
            if self.r == 0 {
                break;
            }
            if left < 2 || self.r > left.div_ceil(2) || self.r >= left {
                return Err(Error::Config(format!(
                    "cannot merge {} tokens in pass {pass} when {left} remain",
                    self.r
                )));
            }
            left -= self.r;
        }
        Ok(left)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let denom = (aa * bb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        ab / denom
    }
}

/// One bipartite merge pass over `n × d` tokens with per-token sizes.
///
/// Even positions form set A, odd positions set B. Each A token picks its
/// most cosine-similar B token (lowest index on ties); the `r` A tokens with
/// the highest similarity (lowest index on ties) are folded into their match
/// by size-weighted averaging. Survivors keep their original order.
pub fn merge_pass(tokens: &[f64], sizes: &[f64], d: usize, r: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = sizes.len();
    if tokens.len() != n * d {
        return Err(Error::Shape(format!(
            "{} values do not form {n} tokens of width {d}",
            tokens.len()
        )));
    }
    if r == 0 {
        return Ok((tokens.to_vec(), sizes.to_vec()));
    }
    let n_a = n.div_ceil(2);
    if n < 2 || r > n_a || r >= n {
        return Err(Error::Config(format!("cannot merge {r} of {n} tokens")));
    }
    let row = |i: usize| &tokens[i * d..(i + 1) * d];

    let mut matches: Vec<(usize, usize, f64)> = (0..n)
        .step_by(2)
        .map(|a| {
            let mut best = (1, f64::NEG_INFINITY);
            for b in (1..n).step_by(2) {
                let s = cosine(row(a), row(b));
                if s > best.1 {
                    best = (b, s);
                }
            }
            (a, best.0, best.1)
        })
        .collect();
    matches.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)));

    let mut acc: Vec<f64> = tokens
        .chunks_exact(d)
        .zip(sizes)
        .flat_map(|(t, &s)| t.iter().map(move |v| v * s))
        .collect();
    let mut new_sizes = sizes.to_vec();
    let mut removed = vec![false; n];
    for &(a, b, _) in &matches[..r] {
        removed[a] = true;
        new_sizes[b] += new_sizes[a];
        for j in 0..d {
            acc[b * d + j] += acc[a * d + j];
        }
    }
    let mut out = Vec::with_capacity((n - r) * d);
    let mut out_sizes = Vec::with_capacity(n - r);
    for i in 0..n {
        if removed[i] {
            continue;
        }
        let s = new_sizes[i];
        if s == sizes[i] {
            out.extend_from_slice(row(i));
        } else {
            out.extend(acc[i * d..(i + 1) * d].iter().map(|v| v / s));
        }
        out_sizes.push(s);
    }
    Ok((out, out_sizes))
}

/// Runs every pass of `cfg` over unit-size tokens; returns the merged tokens
/// and their sizes.
pub fn token_merge_sized(tokens: &[f64], d: usize, cfg: MergeConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    if d == 0 || tokens.len() % d != 0 {
        return Err(Error::Shape(format!("{} values are not rows of width {d}", tokens.len())));
    }
    let n = tokens.len() / d;
    cfg.output_len(n)?;
    let mut cur = tokens.to_vec();
    let mut sizes = vec![1.0; n];
    for _ in 0..cfg.passes {
        let (t, s) = merge_pass(&cur, &sizes, d, cfg.r)?;
        cur = t;
        sizes = s;
    }
    Ok((cur, sizes))
}

pub fn token_merge(tokens: &[f64], d: usize, cfg: MergeConfig) -> Result<Vec<f64>> {
    token_merge_sized(tokens, d, cfg).map(|(t, _)| t)
}

/// Attention pooling of `n × d` tokens by `m × d` queries.
///
/// Returns the pooled `m × d` block and the `m × n` attention weights.
pub fn attention_pool(tokens: &[f64], queries: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if tokens.is_empty() {
        return Err(Error::Input("attention pooling over an empty token set".into()));
    }
    let n = tokens.len() / d;
    let m = queries.len() / d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = vec![0.0; m * n];
    let mut pooled = vec![0.0; m * d];
    for qi in 0..m {
        let q = &queries[qi * d..(qi + 1) * d];
        let w = &mut weights[qi * n..(qi + 1) * n];
        for (j, t) in tokens.chunks_exact(d).enumerate() {
            w[j] = crate::linalg::dot(q, t) * scale;
        }
        crate::linalg::softmax_in_place(w);
        let out = &mut pooled[qi * d..(qi + 1) * d];
        for (wj, t) in w.iter().zip(tokens.chunks_exact(d)) {
            for (o, v) in out.iter_mut().zip(t) {
                *o += wj * v;
            }
        }
    }
    Ok((pooled, weights))
}

/// Backward pass of [`attention_pool`]. Accumulates into `dq` (`m × d`) and,
/// when given, `dt` (`n × d`).
pub fn attention_pool_backward(
    tokens: &[f64],
    queries: &[f64],
    weights: &[f64],
    d_pooled: &[f64],
    d: usize,
    dq: &mut [f64],
    mut dt: Option<&mut [f64]>,
) {
    let n = tokens.len() / d;
    let m = queries.len() / d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut ds = vec![0.0; n];
    for qi in 0..m {
        let a = &weights[qi * n..(qi + 1) * n];
        let g = &d_pooled[qi * d..(qi + 1) * d];
        let mut inner = 0.0;
        for (j, t) in tokens.chunks_exact(d).enumerate() {
            ds[j] = crate::linalg::dot(g, t);
            inner += a[j] * ds[j];
        }
        for j in 0..n {
            ds[j] = a[j] * (ds[j] - inner);
        }
        let q = &queries[qi * d..(qi + 1) * d];
        let dqi = &mut dq[qi * d..(qi + 1) * d];
        for (j, t) in tokens.chunks_exact(d).enumerate() {
            crate::linalg::axpy(ds[j] * scale, t, dqi);
            if let Some(dt) = dt.as_deref_mut() {
                let row = &mut dt[j * d..(j + 1) * d];
                crate::linalg::axpy(a[j], g, row);
                crate::linalg::axpy(ds[j] * scale, q, row);
            }
        }
    }
}

/// Parameters of one layer's compressor, copied out of the flat store.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressorParams {
    pub d: usize,
    pub m: usize,
    pub d_c: usize,
    pub old_queries: Vec<f64>,
    pub new_queries: Vec<f64>,
    /// `(m·d) × (d_c/2)`
    pub old_proj_w: Vec<f64>,
    pub old_proj_b: Vec<f64>,
    pub new_proj_w: Vec<f64>,
    pub new_proj_b: Vec<f64>,
    /// Stands in for the new branch when nothing was generated.
    pub empty_token: Vec<f64>,
}

/// Converts an `f32` token block to `f64` without rounding.
pub fn widen(tokens: &[f32]) -> Vec<f64> {
    tokens.iter().map(|&v| v as f64).collect()
}

/// Old-branch tokens after merging, as consumed by the pooling stage.
pub fn merged_old_tokens(old: &[f32], d: usize, merge: MergeConfig) -> Result<Vec<f64>> {
    token_merge(&widen(old), d, merge)
}

/// `e = concat(old_proj(pool(merge(old))), new_proj(pool(new)))`, width `d_c`.
pub fn compress_layer(
    old: &[f32],
    new: &[f32],
    params: &CompressorParams,
    merge: MergeConfig,
) -> Result<Vec<f64>> {
    let d = params.d;
    if old.is_empty() {
        return Err(Error::Input("layer has no old tokens".into()));
    }
    if old.len() % d != 0 || new.len() % d != 0 {
        return Err(Error::Shape(format!("token rows are not of width {d}")));
    }
    let merged = merged_old_tokens(old, d, merge)?;
    let new = if new.is_empty() {
        params.empty_token.clone()
    } else {
        widen(new)
    };
    compress_prepared(&merged, &new, params)
}

/// [`compress_layer`] on already merged old tokens and a nonempty new block.
pub fn compress_prepared(old: &[f64], new: &[f64], params: &CompressorParams) -> Result<Vec<f64>> {
    let d = params.d;
    let (p_old, _) = attention_pool(old, &params.old_queries, d)?;
    let (p_new, _) = attention_pool(new, &params.new_queries, d)?;
    let mut e = affine(&p_old, &params.old_proj_w, &params.old_proj_b, 1);
    e.extend(affine(&p_new, &params.new_proj_w, &params.new_proj_b, 1));
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_r_is_identity() {
        let t: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(token_merge(&t, 3, MergeConfig { r: 0, passes: 3 }).unwrap(), t);
    }

    #[test]
    fn identical_pair_merges_to_itself() {
        let t = [0.3, -1.2, 0.3, -1.2];
        let out = token_merge(&t, 2, MergeConfig { r: 1, passes: 1 }).unwrap();
        assert_eq!(out, vec![0.3, -1.2]);
    }

    #[test]
    fn too_many_merges_are_rejected() {
        let t = vec![1.0; 8];
        assert!(matches!(
            token_merge(&t, 2, MergeConfig { r: 3, passes: 1 }),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            token_merge(&t, 2, MergeConfig { r: 2, passes: 2 }),
            Err(Error::Config(_))
        ));
        assert_eq!(MergeConfig { r: 1, passes: 3 }.output_len(4).unwrap(), 1);
    }

    #[test]
    fn sizes_accumulate_across_passes() {
        let t = [1.0, 0.0, 1.0, 0.1, 0.0, 1.0, 0.1, 1.0];
        let (out, sizes) = token_merge_sized(&t, 2, MergeConfig { r: 1, passes: 2 }).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(sizes.iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn single_token_pool_returns_the_token() {
        let t = [0.5, -2.0, 3.0];
        let q = [1.0, 2.0, 3.0, -1.0, 0.0, 4.0];
        let (p, w) = attention_pool(&t, &q, 3).unwrap();
        assert_eq!(p, vec![0.5, -2.0, 3.0, 0.5, -2.0, 3.0]);
        assert_eq!(w, vec![1.0, 1.0]);
        assert!(matches!(attention_pool(&[], &q, 3), Err(Error::Input(_))));
    }

    #[test]
    fn empty_new_branch_uses_the_learned_token() {
        let d = 2;
        let params = CompressorParams {
            d,
            m: 1,
            d_c: 2,
            old_queries: vec![0.1, 0.2],
            new_queries: vec![0.3, -0.1],
            old_proj_w: vec![1.0, 2.0],
            old_proj_b: vec![0.0],
            new_proj_w: vec![1.0, -1.0],
            new_proj_b: vec![0.5],
            empty_token: vec![0.25, 0.75],
        };
        let old = [1.0f32, 2.0, 3.0, 4.0];
        let e0 = compress_layer(&old, &[], &params, MergeConfig::NONE).unwrap();
        assert_eq!(e0[1], 0.25 - 0.75 + 0.5);
        let e1 = compress_layer(&old, &[9.0, 9.0], &params, MergeConfig::NONE).unwrap();
        assert_eq!(e0[0], e1[0]);
        assert!(matches!(
            compress_layer(&[], &[], &params, MergeConfig::NONE),
            Err(Error::Input(_))
        ));
    }
}
