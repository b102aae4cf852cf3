//! Dense primitives with explicit backward passes. Weights are stored
//! `in x out` so a row batch `x` maps to `x . W + b`.

use libm::erf;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layout::{LayerNormParams, Linear};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn linear_forward(x: ArrayView2<f64>, lin: &Linear, params: &[f64]) -> Array2<f64> {
    let mut y = x.dot(&lin.w.view(params));
    y += &lin.b.view(params);
    y
}

/// Accumulates weight/bias gradients into `grads` and returns `dL/dx`.
pub fn linear_backward(
    x: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    lin: &Linear,
    params: &[f64],
    grads: &mut [f64],
) -> Array2<f64> {
    {
        let mut dw = lin.w.view_mut(grads);
        ndarray::linalg::general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut dw);
    }
    {
        let mut db = lin.b.view_mut(grads);
        db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    dy.dot(&lin.w.view(params).t())
}

pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn layer_norm_forward(
    x: ArrayView2<f64>,
    ln: &LayerNormParams,
    params: &[f64],
) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.dot(&row) / d;
        *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row *= *s;
    }
    let gamma = ln.gamma.view(params);
    let beta = ln.beta.view(params);
    let y = &xhat * &gamma + &beta;
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &LayerNormCache,
    ln: &LayerNormParams,
    params: &[f64],
    grads: &mut [f64],
) -> Array2<f64> {
    {
        let mut dgamma = ln.gamma.view_mut(grads);
        dgamma += &(&dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    {
        let mut dbeta = ln.beta.view_mut(grads);
        dbeta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    let gamma = ln.gamma.view(params);
    let dxhat = &dy * &gamma;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let sum_g = g.sum();
        let sum_gx = g.dot(&xh);
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = s / d * (d * gi - sum_g - xi * sum_gx));
    }
    dx
}

/// Row-wise softmax in place.
pub fn softmax_rows(mut x: ArrayViewMut2<f64>) {
    for row in x.rows_mut() {
        softmax_in_place(row);
    }
}

pub fn softmax_in_place(mut row: ArrayViewMut1<f64>) {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    row.mapv_inplace(|v| (v - max).exp());
    let sum = row.sum();
    row /= sum;
}

/// Backward of a softmax row: `ds = s * (dy - <dy, s>)`.
pub fn softmax_backward(s: ArrayView1<f64>, dy: ArrayView1<f64>) -> Array1<f64> {
    let dot = s.dot(&dy);
    Zip::from(&s)
        .and(&dy)
        .map_collect(|&si, &gi| si * (gi - dot))
}

/// Inverted-dropout mask: entries are 0 or `1/(1-p)`. `None` when inactive.
pub fn dropout_mask(
    shape: (usize, usize),
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Option<Array2<f64>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

pub fn apply_mask(x: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}
