//! Training objectives and their gradients. Embedding batches are row-major
//! `rows × width` slices.

use crate::error::{Error, Result};
use crate::linalg::{dot, log_sum_exp, softmax};

fn check_rows(x: &[f64], width: usize) -> Result<usize> {
    if width == 0 || x.len() % width != 0 {
        return Err(Error::Shape(format!(
            "{} values are not rows of width {width}",
            x.len()
        )));
    }
    Ok(x.len() / width)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared distance between paired rows of `u` and `z`.
pub fn alignment_loss(u: &[f64], z: &[f64], width: usize) -> Result<f64> {
    alignment_loss_grad(u, z, width).map(|(l, _, _)| l)
}

/// Alignment loss with gradients for `u` and `z`.
pub fn alignment_loss_grad(u: &[f64], z: &[f64], width: usize) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = check_rows(u, width)?;
    if u.len() != z.len() {
        return Err(Error::Shape(format!(
            "{} user values against {} item values",
            u.len(),
            z.len()
        )));
    }
    if n == 0 {
        return Err(Error::Input("alignment over an empty batch".into()));
    }
    let mut total = 0.0;
    let mut du = vec![0.0; u.len()];
    let scale = 2.0 / n as f64;
    for r in 0..n {
        let (a, b) = (&u[r * width..(r + 1) * width], &z[r * width..(r + 1) * width]);
        total += sq_dist(a, b);
        for j in 0..width {
            du[r * width + j] = scale * (a[j] - b[j]);
        }
    }
    let dz = du.iter().map(|v| -v).collect();
    Ok((total / n as f64, du, dz))
}

/// log of the mean over distinct unordered pairs of exp(−2‖x−y‖²).
pub fn uniformity_loss(x: &[f64], width: usize) -> Result<f64> {
    uniformity_loss_grad(x, width).map(|(l, _)| l)
}

pub fn uniformity_loss_grad(x: &[f64], width: usize) -> Result<(f64, Vec<f64>)> {
    let n = check_rows(x, width)?;
    if n < 2 {
        return Err(Error::Input(format!(
            "uniformity needs at least 2 embeddings, got {n}"
        )));
    }
    let row = |i: usize| &x[i * width..(i + 1) * width];
    let mut logits = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            logits.push(-2.0 * sq_dist(row(i), row(j)));
        }
    }
    let loss = log_sum_exp(&logits) - (logits.len() as f64).ln();
    let w = softmax(&logits);
    let mut g = vec![0.0; x.len()];
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let c = -4.0 * w[k];
            k += 1;
            for t in 0..width {
                let diff = x[i * width + t] - x[j * width + t];
                g[i * width + t] += c * diff;
                g[j * width + t] -= c * diff;
            }
        }
    }
    Ok((loss, g))
}

/// Cross-entropy of logit 0 under a softmax over all logits, with gradient.
pub fn softmax_xent(logits: &[f64]) -> (f64, Vec<f64>) {
    let loss = log_sum_exp(logits) - logits[0];
    let mut g = softmax(logits);
    g[0] -= 1.0;
    (loss, g)
}

/// Sampled-softmax loss of a positive against negatives under dot scores.
pub fn rec_loss(u: &[f64], pos: &[f64], negatives: &[&[f64]]) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Input("rec_loss needs at least one negative".into()));
    }
    let mut logits = vec![dot(u, pos)];
    logits.extend(negatives.iter().map(|z| dot(u, z)));
    Ok(softmax_xent(&logits).0)
}

/// Scales `x` to unit length; returns the normalized vector and the norm.
pub fn normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let n = dot(x, x).sqrt();
    (x.iter().map(|v| v / n).collect(), n)
}

/// Chain rule through `x̂ = x/‖x‖`.
pub fn normalize_backward(x_hat: &[f64], norm: f64, d_hat: &[f64]) -> Vec<f64> {
    let proj = dot(x_hat, d_hat);
    x_hat
        .iter()
        .zip(d_hat)
        .map(|(h, g)| (g - h * proj) / norm)
        .collect()
}
