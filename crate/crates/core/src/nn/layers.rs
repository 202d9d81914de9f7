//! Forward/backward primitives on flat slices. Backward functions
//! accumulate (`+=`) into gradient buffers so per-sample gradients can be
//! summed without extra copies.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::params::Tensor;
use crate::rng::Rng;

/// Dot product with four independent accumulators (fixed order, so the
/// result is deterministic).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let k = 4 * i;
        s0 += a[k] * b[k];
        s1 += a[k + 1] * b[k + 1];
        s2 += a[k + 2] * b[k + 2];
        s3 += a[k + 3] * b[k + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for k in 4 * chunks..n {
        s += a[k] * b[k];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn check_dense(w: &Tensor, b: &Tensor, x: usize, y: usize) -> Result<()> {
    if w.cols != x || w.rows != y || b.len() != w.rows {
        return Err(Error::Contract(format!(
            "dense {}: weight {}x{}, bias {}, input {x}, output {y}",
            w.name,
            w.rows,
            w.cols,
            b.len()
        )));
    }
    Ok(())
}

/// `y = W x + b`
pub fn dense_forward(w: &Tensor, b: &Tensor, x: &[f64], y: &mut [f64]) -> Result<()> {
    check_dense(w, b, x.len(), y.len())?;
    for (r, out) in y.iter_mut().enumerate() {
        *out = b.data[r] + dot(w.row(r), x);
    }
    Ok(())
}

/// `W x + b` for shapes already validated by the caller.
pub fn dense(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    debug_assert!(w.cols == x.len() && b.len() == w.rows);
    (0..w.rows).map(|r| b.data[r] + dot(w.row(r), x)).collect()
}

/// Accumulates `dW += dy xᵀ`, `db += dy` and, when requested, `dx += Wᵀ dy`.
pub fn dense_backward(
    w: &Tensor,
    x: &[f64],
    dy: &[f64],
    gw: &mut Tensor,
    gb: &mut Tensor,
    dx: Option<&mut [f64]>,
) -> Result<()> {
    if w.cols != x.len() || w.rows != dy.len() || gw.len() != w.len() || gb.len() != w.rows {
        return Err(Error::Contract(format!("dense backward shape mismatch for {}", w.name)));
    }
    let cols = w.cols;
    for (r, &g) in dy.iter().enumerate() {
        gb.data[r] += g;
        if g != 0.0 {
            axpy(g, x, &mut gw.data[r * cols..(r + 1) * cols]);
        }
    }
    if let Some(dx) = dx {
        if dx.len() != cols {
            return Err(Error::Contract("dense backward: dx length".into()));
        }
        for (r, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                axpy(g, w.row(r), dx);
            }
        }
    }
    Ok(())
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Gradient through ReLU given its pre-activation input.
pub fn relu_backward(pre: &[f64], dy: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(dy)
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient through sigmoid given its output.
pub fn sigmoid_backward(out: &[f64], dy: &[f64]) -> Vec<f64> {
    out.iter().zip(dy).map(|(&s, &g)| g * s * (1.0 - s)).collect()
}

/// Gradient through tanh given its output.
pub fn tanh_backward(out: &[f64], dy: &[f64]) -> Vec<f64> {
    out.iter().zip(dy).map(|(&t, &g)| g * (1.0 - t * t)).collect()
}

/// Inverted dropout: kept units are scaled by `1/(1-p)` at train time, so
/// evaluation is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask(pub Vec<f64>);

impl DropoutMask {
    pub fn sample(p: f64, n: usize, rng: &mut Rng) -> Self {
        if p <= 0.0 {
            return DropoutMask(vec![1.0; n]);
        }
        let keep = 1.0 / (1.0 - p);
        DropoutMask(
            (0..n)
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect(),
        )
    }

    pub fn apply(&self, x: &mut [f64]) {
        for (v, m) in x.iter_mut().zip(&self.0) {
            *v *= m;
        }
    }
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Gradients of `a ⊙ b` w.r.t. `a` and `b`.
pub fn hadamard_backward(a: &[f64], b: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (hadamard(dy, b), hadamard(dy, a))
}

pub fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

/// Splits the gradient of a concatenation back into its parts.
pub fn concat_backward(dy: &[f64], left: usize) -> (&[f64], &[f64]) {
    dy.split_at(left)
}
