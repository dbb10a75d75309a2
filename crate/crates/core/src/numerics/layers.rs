//! Forward and backward passes for the handful of layers the network uses.
//!
//! Each backward function takes whatever the forward pass cached and the
//! upstream gradient, accumulates into parameter gradients (`+=`), and
//! returns the gradient with respect to the layer input when asked for it.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tensor::Tensor2D;
use crate::error::{Error, Result};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// `y = x Wᵀ + b` with `x: [B×in]`, `W: [out×in]`, `b: [out]`.
pub fn linear_forward(x: &Tensor2D, w: &Tensor2D, b: &[f64]) -> Result<Tensor2D> {
    let (batch, d_in) = x.shape();
    let (d_out, w_in) = w.shape();
    if w_in != d_in || b.len() != d_out {
        return Err(Error::Shape {
            op: "linear_forward",
            detail: format!("x {batch}x{d_in}, W {d_out}x{w_in}, b {}", b.len()),
        });
    }
    let mut y = Tensor2D::zeros(batch, d_out);
    for r in 0..batch {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for (o, y_o) in yr.iter_mut().enumerate() {
            *y_o = b[o] + dot(xr, w.row(o));
        }
    }
    Ok(y)
}

/// Backward of [`linear_forward`]. Accumulates `dW += dyᵀ x` and
/// `db += Σ_rows dy`; returns `dx = dy W` when `need_dx`.
pub fn linear_backward(
    x: &Tensor2D,
    w: &Tensor2D,
    dy: &Tensor2D,
    grad_w: Option<&mut Tensor2D>,
    grad_b: Option<&mut [f64]>,
    need_dx: bool,
) -> Option<Tensor2D> {
    let batch = x.rows();
    debug_assert_eq!(dy.shape(), (batch, w.rows()));
    if let Some(gw) = grad_w {
        for r in 0..batch {
            let xr = x.row(r);
            for (o, &g) in dy.row(r).iter().enumerate() {
                if g != 0.0 {
                    axpy(g, xr, gw.row_mut(o));
                }
            }
        }
    }
    if let Some(gb) = grad_b {
        for r in 0..batch {
            for (acc, &g) in gb.iter_mut().zip(dy.row(r)) {
                *acc += g;
            }
        }
    }
    if !need_dx {
        return None;
    }
    let mut dx = Tensor2D::zeros(batch, x.cols());
    for r in 0..batch {
        let dxr = dx.row_mut(r);
        for (o, &g) in dy.row(r).iter().enumerate() {
            if g != 0.0 {
                axpy(g, w.row(o), dxr);
            }
        }
    }
    Some(dx)
}

pub fn relu(x: &Tensor2D) -> Tensor2D {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient through ReLU given the pre-activation. The kink at 0 takes slope 0.
pub fn relu_backward(pre: &Tensor2D, dy: &Tensor2D) -> Tensor2D {
    let data = pre
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect();
    Tensor2D::from_vec(pre.rows(), pre.cols(), data)
}

#[inline]
pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor2D) -> Tensor2D {
    x.map(sigmoid_scalar)
}

/// Gradient through the sigmoid given its output `s`.
pub fn sigmoid_backward(s: &Tensor2D, dy: &Tensor2D) -> Tensor2D {
    let data = s
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor2D::from_vec(s.rows(), s.cols(), data)
}

/// Inverted dropout. Returns the output and the per-element scale mask
/// (`0` or `1/(1-rate)`), or `None` for the mask when inactive.
pub fn dropout<R: Rng + ?Sized>(
    x: &Tensor2D,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> (Tensor2D, Option<Vec<f64>>) {
    if !training || rate <= 0.0 {
        return (x.clone(), None);
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask: Vec<f64> = (0..x.data().len())
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    (Tensor2D::from_vec(x.rows(), x.cols(), data), Some(mask))
}

pub fn dropout_backward(mask: Option<&[f64]>, dy: Tensor2D) -> Tensor2D {
    match mask {
        None => dy,
        Some(m) => {
            let data = dy.data().iter().zip(m).map(|(g, m)| g * m).collect();
            Tensor2D::from_vec(dy.rows(), dy.cols(), data)
        }
    }
}

/// Periodic features of a scalar column: row `i` is
/// `[sin(2π c_j x_i) for j] ++ [cos(2π c_j x_i) for j]`, width `2ℓ`.
pub fn sin_cos_features(x: &[f64], freqs: &[f64]) -> Tensor2D {
    let l = freqs.len();
    let mut out = Tensor2D::zeros(x.len(), 2 * l);
    for (r, &xv) in x.iter().enumerate() {
        let row = out.row_mut(r);
        for (j, &c) in freqs.iter().enumerate() {
            let arg = TWO_PI * c * xv;
            row[j] = arg.sin();
            row[l + j] = arg.cos();
        }
    }
    out
}

/// Gradient of [`sin_cos_features`] with respect to the frequencies,
/// accumulated into `grad_freqs`.
pub fn sin_cos_backward_freqs(x: &[f64], freqs: &[f64], dy: &Tensor2D, grad_freqs: &mut [f64]) {
    let l = freqs.len();
    for (r, &xv) in x.iter().enumerate() {
        let g = dy.row(r);
        for (j, &c) in freqs.iter().enumerate() {
            let arg = TWO_PI * c * xv;
            let d_arg = TWO_PI * xv;
            grad_freqs[j] += d_arg * (g[j] * arg.cos() - g[l + j] * arg.sin());
        }
    }
}

/// Row lookup into an embedding table `[C×d]`.
pub fn embedding_forward(table: &Tensor2D, idx: &[usize]) -> Tensor2D {
    let mut out = Tensor2D::zeros(idx.len(), table.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(table.row(i));
    }
    out
}

pub fn embedding_backward(idx: &[usize], dy: &Tensor2D, grad_table: &mut Tensor2D) {
    for (r, &i) in idx.iter().enumerate() {
        axpy(1.0, dy.row(r), grad_table.row_mut(i));
    }
}

/// He-uniform weights `U(±sqrt(6/fan_in))` and bias `U(±1/sqrt(fan_in))`.
pub fn kaiming_uniform<R: Rng + ?Sized>(
    d_out: usize,
    d_in: usize,
    rng: &mut R,
) -> (Tensor2D, Tensor2D) {
    let fan_in = d_in.max(1) as f64;
    let wb = (6.0 / fan_in).sqrt();
    let bb = 1.0 / fan_in.sqrt();
    let wd = Uniform::new_inclusive(-wb, wb).expect("finite bound");
    let bd = Uniform::new_inclusive(-bb, bb).expect("finite bound");
    let w = (0..d_out * d_in).map(|_| wd.sample(rng)).collect();
    let b = (0..d_out).map(|_| bd.sample(rng)).collect();
    (
        Tensor2D::from_vec(d_out, d_in, w),
        Tensor2D::from_vec(1, d_out, b),
    )
}

pub fn normal_init<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor2D {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Tensor2D::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
