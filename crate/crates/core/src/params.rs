//! Flat parameter storage. Every trainable tensor is a named slice of one
//! `Vec<f64>`; gradients, optimizer moments and checkpoints share the layout.

use crate::linalg::{gemm, Op};

/// Learning-rate group a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Fusion,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub group: Group,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Registry {
    specs: Vec<TensorSpec>,
    len: usize,
}

impl Registry {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], group: Group) -> usize {
        let offset = self.len;
        let spec = TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            group,
        };
        self.len += spec.len();
        self.specs.push(spec);
        offset
    }

    /// Registers `name.w` (`n_in × n_out`) and `name.b` (`n_out`).
    pub fn affine(&mut self, name: &str, n_in: usize, n_out: usize, group: Group) -> AffineIdx {
        let w = self.add(format!("{name}.w"), &[n_in, n_out], group);
        let b = self.add(format!("{name}.b"), &[n_out], group);
        AffineIdx { w, b, n_in, n_out }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

/// `y = x·W + b` for `rows` stacked inputs, `W` being `n_in × n_out` with
/// `n_out = b.len()`.
pub fn affine(x: &[f64], w: &[f64], b: &[f64], rows: usize) -> Vec<f64> {
    let n_out = b.len();
    let n_in = w.len() / n_out.max(1);
    let mut y = Vec::with_capacity(rows * n_out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(Op::N, Op::N, rows, n_out, n_in, x, w, 1.0, &mut y);
    y
}

/// Offsets of an affine map `y = x·W + b` with `W` stored `n_in × n_out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AffineIdx {
    pub w: usize,
    pub b: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl AffineIdx {
    pub fn weight<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.n_in * self.n_out]
    }

    pub fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.n_out]
    }

    /// `y = x·W + b` over `rows` rows.
    pub fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        affine(x, self.weight(p), self.bias(p), rows)
    }

    /// Accumulates `dW += xᵀ·dy`, `db += Σ dy` into `g` and returns `dy·Wᵀ`
    /// when `want_dx` is set.
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        x: &[f64],
        dy: &[f64],
        rows: usize,
        want_dx: bool,
    ) -> Option<Vec<f64>> {
        let (n_in, n_out) = (self.n_in, self.n_out);
        gemm(
            Op::T,
            Op::N,
            n_in,
            n_out,
            rows,
            x,
            dy,
            1.0,
            &mut g[self.w..self.w + n_in * n_out],
        );
        let gb = &mut g[self.b..self.b + n_out];
        for row in dy.chunks_exact(n_out) {
            for (a, v) in gb.iter_mut().zip(row) {
                *a += v;
            }
        }
        want_dx.then(|| {
            let mut dx = vec![0.0; rows * n_in];
            gemm(Op::N, Op::T, rows, n_in, n_out, dy, self.weight(p), 0.0, &mut dx);
            dx
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_contiguous() {
        let mut r = Registry::default();
        let a = r.affine("a", 3, 2, Group::Fusion);
        let q = r.add("q", &[4], Group::Head);
        assert_eq!((a.w, a.b, q), (0, 6, 8));
        assert_eq!(r.len(), 12);
        assert_eq!(r.find("a.b").unwrap().range(), 6..8);
        assert_eq!(r.find("q").unwrap().group, Group::Head);
    }

    #[test]
    fn affine_backward_matches_hand_derivation() {
        let mut r = Registry::default();
        let a = r.affine("a", 2, 1, Group::Fusion);
        let p = vec![2.0, -1.0, 0.5];
        let x = [1.0, 3.0, -2.0, 4.0];
        assert_eq!(a.forward(&p, &x, 2), vec![-0.5, -7.5]);
        let mut g = vec![0.0; 3];
        let dx = a.backward(&p, &mut g, &x, &[1.0, 2.0], 2, true).unwrap();
        assert_eq!(g, vec![1.0 - 4.0, 3.0 + 8.0, 3.0]);
        assert_eq!(dx, vec![2.0, -1.0, 4.0, -2.0]);
    }
}
