//! User encoder and exact top-k dot-product ranking.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::linalg::{axpy, softmax};
use crate::params::affine;

pub const DEFAULT_H_MAX: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct RankerParams {
    pub h_max: usize,
    pub d_z: usize,
    /// Position logits, oldest slot first; a history of length k uses the
    /// trailing k entries.
    pub pos_logits: Vec<f64>,
    /// `d_z × d_z`
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
    pub cold_start: Vec<f64>,
}

/// Softmax weights for a history of length `k` (most recent last).
pub fn position_weights(pos_logits: &[f64], k: usize) -> Vec<f64> {
    softmax(&pos_logits[pos_logits.len() - k..])
}

/// Weighted history mean before the head; the cold-start vector when the
/// history is empty.
pub fn pool_history<Z: AsRef<[f64]>>(history: &[Z], p: &RankerParams) -> Result<Vec<f64>> {
    if history.len() > p.h_max {
        return Err(Error::Input(format!(
            "history of {} items exceeds the limit of {}",
            history.len(),
            p.h_max
        )));
    }
    if history.is_empty() {
        return Ok(p.cold_start.clone());
    }
    let w = position_weights(&p.pos_logits, history.len());
    let mut pooled = vec![0.0; p.d_z];
    for (wi, z) in w.iter().zip(history) {
        let z = z.as_ref();
        if z.len() != p.d_z {
            return Err(Error::Shape(format!(
                "history embedding has width {}, expected {}",
                z.len(),
                p.d_z
            )));
        }
        axpy(*wi, z, &mut pooled);
    }
    Ok(pooled)
}

/// u = head(Σ softmax(pos)_i · z_i), or head(cold_start) for no history.
pub fn encode_user<Z: AsRef<[f64]>>(history: &[Z], p: &RankerParams) -> Result<Vec<f64>> {
    let pooled = pool_history(history, p)?;
    Ok(affine(&pooled, &p.head_w, &p.head_b, 1))
}

/// Dot product of an f64 user vector with a stored f32 item vector.
pub fn score(u: &[f64], z: &[f32]) -> f64 {
    u.iter().zip(z).map(|(a, &b)| a * b as f64).sum()
}

/// Descending score, then ascending id.
pub fn rank_order(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Exact top-k of already scored candidates.
pub fn top_k(mut scored: Vec<(u32, f64)>, k: usize) -> Vec<(u32, f64)> {
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    scored
}

/// Scores every candidate against `u` and returns the best `k`.
pub fn score_and_rank<'a, I>(u: &[f64], candidates: I, k: usize) -> Result<Vec<(u32, f64)>>
where
    I: IntoIterator<Item = (u32, &'a [f32])>,
{
    if k == 0 {
        return Err(Error::Input("k must be at least 1".into()));
    }
    let scored: Vec<(u32, f64)> = candidates
        .into_iter()
        .map(|(id, z)| (id, score(u, z)))
        .collect();
    if scored.is_empty() {
        return Err(Error::Input("empty candidate set".into()));
    }
    Ok(top_k(scored, k))
}
