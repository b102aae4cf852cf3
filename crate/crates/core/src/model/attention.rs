//! Multi-head attention and the post-norm transformer block used by both
//! the self-attention encoders and the cross-attention exchange.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use super::layout::{AttentionParams, BlockParams, TensorRef};
use super::ops::{
    apply_mask, dropout_mask, gelu, gelu_grad, layer_norm_backward, layer_norm_forward,
    linear_backward, linear_forward, softmax_backward, softmax_rows, LayerNormCache,
};

pub struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per-head attention weights, `F_q x F_kv`.
    pub weights: Vec<Array2<f64>>,
    context: Array2<f64>,
}

pub fn attention_forward(
    xq: ArrayView2<f64>,
    xkv: ArrayView2<f64>,
    p: &AttentionParams,
    params: &[f64],
    n_heads: usize,
) -> (Array2<f64>, AttentionCache) {
    let q = linear_forward(xq, &p.q, params);
    let k = linear_forward(xkv, &p.k, params);
    let v = linear_forward(xkv, &p.v, params);
    let d = q.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut context = Array2::zeros((xq.nrows(), d));
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(a.view_mut());
        context.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
        weights.push(a);
    }
    let out = linear_forward(context.view(), &p.out, params);
    (
        out,
        AttentionCache {
            q,
            k,
            v,
            weights,
            context,
        },
    )
}

/// Returns `(dL/dxq, dL/dxkv)`.
pub fn attention_backward(
    dout: ArrayView2<f64>,
    xq: ArrayView2<f64>,
    xkv: ArrayView2<f64>,
    cache: &AttentionCache,
    p: &AttentionParams,
    params: &[f64],
    grads: &mut [f64],
) -> (Array2<f64>, Array2<f64>) {
    let n_heads = cache.weights.len();
    let d = cache.q.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let dcontext = linear_backward(cache.context.view(), dout, &p.out, params, grads);
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (h, a) in cache.weights.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dctx = dcontext.slice(cols);
        let da = dctx.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&dctx));
        let mut dscores = Array2::zeros(a.raw_dim());
        for ((mut row, arow), darow) in dscores.rows_mut().into_iter().zip(a.rows()).zip(da.rows())
        {
            row.assign(&softmax_backward(arow, darow));
        }
        dscores *= scale;
        dq.slice_mut(cols)
            .assign(&dscores.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols)
            .assign(&dscores.t().dot(&cache.q.slice(cols)));
    }
    let dxq = linear_backward(xq, dq.view(), &p.q, params, grads);
    let mut dxkv = linear_backward(xkv, dk.view(), &p.k, params, grads);
    dxkv += &linear_backward(xkv, dv.view(), &p.v, params, grads);
    (dxq, dxkv)
}

pub struct BlockCache {
    xq: Array2<f64>,
    xkv: Array2<f64>,
    pub attention: AttentionCache,
    attn_mask: Option<Array2<f64>>,
    norm1: LayerNormCache,
    h1: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    ffn_mask: Option<Array2<f64>>,
    norm2: LayerNormCache,
}

/// `h1 = LN(xq + drop(MHA(xq, xkv)))`, `out = LN(h1 + W2 drop(gelu(W1 h1)))`.
/// Dropout is active only when `rng` is given.
pub fn block_forward(
    xq: ArrayView2<f64>,
    xkv: ArrayView2<f64>,
    p: &BlockParams,
    params: &[f64],
    n_heads: usize,
    dropout: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Array2<f64>, BlockCache) {
    let (mut attn, attention) = attention_forward(xq, xkv, &p.attn, params, n_heads);
    let attn_mask = dropout_mask(attn.dim(), dropout, rng.as_deref_mut());
    apply_mask(&mut attn, &attn_mask);
    let r1 = &xq + &attn;
    let (h1, norm1) = layer_norm_forward(r1.view(), &p.norm1, params);
    let ffn_pre = linear_forward(h1.view(), &p.ffn_in, params);
    let mut ffn_act = ffn_pre.mapv(gelu);
    let ffn_mask = dropout_mask(ffn_act.dim(), dropout, rng.as_deref_mut());
    apply_mask(&mut ffn_act, &ffn_mask);
    let ffn = linear_forward(ffn_act.view(), &p.ffn_out, params);
    let r2 = &h1 + &ffn;
    let (out, norm2) = layer_norm_forward(r2.view(), &p.norm2, params);
    (
        out,
        BlockCache {
            xq: xq.to_owned(),
            xkv: xkv.to_owned(),
            attention,
            attn_mask,
            norm1,
            h1,
            ffn_pre,
            ffn_act,
            ffn_mask,
            norm2,
        },
    )
}

/// Returns `(dL/dxq, dL/dxkv)`; for self-attention the caller sums both.
pub fn block_backward(
    dout: ArrayView2<f64>,
    cache: &BlockCache,
    p: &BlockParams,
    params: &[f64],
    grads: &mut [f64],
) -> (Array2<f64>, Array2<f64>) {
    let dr2 = layer_norm_backward(dout, &cache.norm2, &p.norm2, params, grads);
    let mut dffn_act = linear_backward(cache.ffn_act.view(), dr2.view(), &p.ffn_out, params, grads);
    apply_mask(&mut dffn_act, &cache.ffn_mask);
    let dffn_pre = dffn_act * &cache.ffn_pre.mapv(gelu_grad);
    let mut dh1 = linear_backward(cache.h1.view(), dffn_pre.view(), &p.ffn_in, params, grads);
    dh1 += &dr2;
    let dr1 = layer_norm_backward(dh1.view(), &cache.norm1, &p.norm1, params, grads);
    let mut dattn = dr1.clone();
    apply_mask(&mut dattn, &cache.attn_mask);
    let (mut dxq, dxkv) = attention_backward(
        dattn.view(),
        cache.xq.view(),
        cache.xkv.view(),
        &cache.attention,
        &p.attn,
        params,
        grads,
    );
    dxq += &dr1;
    (dxq, dxkv)
}

/// Softmax pooling with a learned query: `w = softmax(X q / sqrt(D))`,
/// output `w^T X`. Returns the pooled vector and the weights.
pub fn attention_pool(
    seq: ArrayView2<f64>,
    query: &TensorRef,
    params: &[f64],
) -> (ndarray::Array1<f64>, ndarray::Array1<f64>) {
    let q = query.view(params).row(0).to_owned();
    let scale = 1.0 / (seq.ncols() as f64).sqrt();
    let mut w = seq.dot(&q) * scale;
    super::ops::softmax_in_place(w.view_mut());
    let pooled = seq.t().dot(&w);
    (pooled, w)
}

/// Returns `dL/dseq`; accumulates the query gradient.
pub fn attention_pool_backward(
    dpooled: ndarray::ArrayView1<f64>,
    seq: ArrayView2<f64>,
    weights: ndarray::ArrayView1<f64>,
    query: &TensorRef,
    params: &[f64],
    grads: &mut [f64],
) -> Array2<f64> {
    let q = query.view(params).row(0).to_owned();
    let scale = 1.0 / (seq.ncols() as f64).sqrt();
    let dw = seq.dot(&dpooled);
    let dscore = softmax_backward(weights, dw.view()) * scale;
    {
        let mut dq = query.view_mut(grads);
        dq.row_mut(0).scaled_add(1.0, &seq.t().dot(&dscore));
    }
    // d/dX of w^T X plus the score path through X q
    let mut dseq = weights
        .insert_axis(Axis(1))
        .dot(&dpooled.insert_axis(Axis(0)));
    dseq += &dscore.insert_axis(Axis(1)).dot(&q.insert_axis(Axis(0)));
    dseq
}
