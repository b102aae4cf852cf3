use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::data::ModalityBundle;
use crate::error::{Error, Result};
use crate::modality::{BlockWidths, Modality, PerModality};
use crate::rng;

use super::attention::{
    attention_pool, attention_pool_backward, block_backward, block_forward, BlockCache,
};
use super::config::SafnConfig;
use super::layout::{
    BlockParams, GateParams, HeadParams, MlpStreamParams, SafnLayout, StreamParams, TensorRef,
    TokenStreamParams,
};
use super::ops::{
    apply_mask, dropout_mask, gelu, gelu_grad, layer_norm_backward, layer_norm_forward,
    linear_backward, linear_forward, sigmoid, LayerNormCache,
};

/// Feature tokenizer: row `f` of the result is `x[f] * w[f] + b[f]`.
pub fn tokenize(
    x: &[f64],
    embed_w: ArrayView2<f64>,
    embed_b: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if x.len() != embed_w.nrows() || embed_w.dim() != embed_b.dim() {
        return Err(Error::Shape(format!(
            "{} features for {} embeddings",
            x.len(),
            embed_w.nrows()
        )));
    }
    let xs = ArrayView1::from(x).insert_axis(Axis(1));
    Ok(&embed_w * &xs + &embed_b)
}

/// Sigmoid gates over the concatenated pooled vectors and the gated fusion.
/// Returns `(alpha, H)` with `H_j = alpha_j * Z_j`.
pub fn gate_and_fuse(
    pooled: &[ArrayView1<f64>],
    gate_w: ArrayView2<f64>,
    gate_b: ArrayView1<f64>,
) -> (Vec<f64>, Array1<f64>) {
    let z = concat(pooled);
    let pre = gate_w.dot(&z) + gate_b;
    let alpha: Vec<f64> = pre.iter().map(|&v| sigmoid(v)).collect();
    (alpha.clone(), scale_blocks(&z, &alpha))
}

fn concat(parts: &[ArrayView1<f64>]) -> Array1<f64> {
    ndarray::concatenate(Axis(0), parts).expect("1-d concatenation")
}

fn scale_blocks(z: &Array1<f64>, alpha: &[f64]) -> Array1<f64> {
    let d = z.len() / alpha.len();
    let mut h = z.clone();
    for (j, &a) in alpha.iter().enumerate() {
        h.slice_mut(s![j * d..(j + 1) * d]).mapv_inplace(|v| v * a);
    }
    h
}

struct TokenCache {
    layers: Vec<BlockCache>,
    pool_weights: Array1<f64>,
}

struct MlpCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    mask: Option<Array2<f64>>,
}

pub struct HeadCache {
    norm: LayerNormCache,
    normed: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    mask: Option<Array2<f64>>,
}

/// Intermediate activations of one forward pass, kept for backprop and
/// attribution. Per-modality entries are `None` for inactive modalities;
/// `encoded`/`cross_attended` exist only for tokenized modalities.
pub struct ForwardTrace {
    pub active: Vec<Modality>,
    pub inputs: PerModality<Vec<f64>>,
    pub tokens: PerModality<Option<Array2<f64>>>,
    pub encoded: PerModality<Option<Array2<f64>>>,
    pub cross_attended: PerModality<Option<Array2<f64>>>,
    pub pooled: PerModality<Option<Array1<f64>>>,
    /// Concatenated pooled vectors in fusion order.
    pub z: Array1<f64>,
    /// One gate per active modality (all 1 when gates are disabled).
    pub alpha: Vec<f64>,
    pub h: Array1<f64>,
    pub logit: f64,
    pub prob: f64,
    token_caches: PerModality<Option<TokenCache>>,
    mlp_caches: PerModality<Option<MlpCache>>,
    cross_caches: Option<(BlockCache, BlockCache)>,
    head_cache: HeadCache,
}

impl ForwardTrace {
    /// Gate value for `m`, if that modality is active.
    pub fn gate(&self, m: Modality) -> Option<f64> {
        self.active
            .iter()
            .position(|&a| a == m)
            .map(|i| self.alpha[i])
    }
}

/// Gradient of the scalar objective with respect to the network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub logit: f64,
    /// Direct gradient on each active gate (the sparsity term); empty means zero.
    pub gates: Vec<f64>,
}

impl OutputGrad {
    pub fn logit(d: f64) -> Self {
        OutputGrad {
            logit: d,
            gates: Vec::new(),
        }
    }
}

/// The network definition: configuration, input widths and parameter layout.
/// Parameters themselves are a separate flat vector.
#[derive(Debug, Clone)]
pub struct Safn {
    pub config: SafnConfig,
    pub widths: BlockWidths,
    pub layout: SafnLayout,
}

impl Safn {
    pub fn new(config: SafnConfig, widths: BlockWidths) -> Result<Self> {
        config.validate()?;
        for m in config.wiring.active_modalities() {
            if widths[m] == 0 {
                return Err(Error::Config(format!(
                    "active modality {m} has no features"
                )));
            }
        }
        let layout = SafnLayout::new(&config, &widths);
        Ok(Safn {
            config,
            widths,
            layout,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout.len
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        self.layout.init(&mut rng::stream(seed, &[0x1417]))
    }

    fn check(&self, bundle: &ModalityBundle, params: &[f64]) -> Result<()> {
        if params.len() != self.layout.len {
            return Err(Error::Shape(format!(
                "{} parameters for a layout of {}",
                params.len(),
                self.layout.len
            )));
        }
        for m in self.config.wiring.active_modalities() {
            if bundle.block(m).len() != self.widths[m] {
                return Err(Error::Shape(format!(
                    "{m} block has {} features, model expects {}",
                    bundle.block(m).len(),
                    self.widths[m]
                )));
            }
        }
        Ok(())
    }

    /// Transformer encoder stack over a token sequence.
    pub fn encode(
        &self,
        tokens: ArrayView2<f64>,
        layers: &[BlockParams],
        params: &[f64],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, Vec<BlockCache>) {
        let mut x = tokens.to_owned();
        let mut caches = Vec::with_capacity(layers.len());
        for layer in layers {
            let (y, cache) = block_forward(
                x.view(),
                x.view(),
                layer,
                params,
                self.config.n_heads,
                self.config.dropout,
                rng.as_deref_mut(),
            );
            caches.push(cache);
            x = y;
        }
        (x, caches)
    }

    /// Full forward pass. Dropout is applied only when `train` is set, with
    /// masks drawn from `dropout_seed` and recorded in the trace.
    pub fn forward(
        &self,
        bundle: &ModalityBundle,
        params: &[f64],
        train: bool,
        dropout_seed: u64,
    ) -> Result<ForwardTrace> {
        self.check(bundle, params)?;
        let mut stream_rng = rng::stream(dropout_seed, &[0xD209]);
        let mut rng = if train && self.config.dropout > 0.0 {
            Some(&mut stream_rng)
        } else {
            None
        };
        let active = self.config.wiring.active_modalities();
        let mut tokens = PerModality::default();
        let mut encoded: PerModality<Option<Array2<f64>>> = PerModality::default();
        let mut token_caches: PerModality<Option<TokenCache>> = PerModality::default();
        let mut pooled: PerModality<Option<Array1<f64>>> = PerModality::default();
        let mut mlp_caches: PerModality<Option<MlpCache>> = PerModality::default();

        for &m in &active {
            match self.layout.stream(m).expect("active stream has params") {
                StreamParams::Tokens(p) => {
                    let t = tokenize(
                        bundle.block(m),
                        p.embed_w.view(params),
                        p.embed_b.view(params),
                    )?;
                    let (e, layers) = self.encode(t.view(), &p.layers, params, rng.as_deref_mut());
                    tokens[m] = Some(t);
                    encoded[m] = Some(e);
                    token_caches[m] = Some(TokenCache {
                        layers,
                        pool_weights: Array1::zeros(0),
                    });
                }
                StreamParams::Mlp(p) => {
                    let (z, cache) =
                        self.mlp_forward(bundle.block(m), p, params, rng.as_deref_mut());
                    pooled[m] = Some(z);
                    mlp_caches[m] = Some(cache);
                }
            }
        }

        // both directions read the encoder outputs, never each other's result
        let mut cross_attended: PerModality<Option<Array2<f64>>> = encoded.clone();
        let cross_caches = match &self.layout.cross {
            Some(cross) => {
                let ct = encoded.mri_ct.as_ref().expect("cortical stream active");
                let clin = encoded.clinical.as_ref().expect("clinical stream active");
                let (ct_new, ct_cache) = block_forward(
                    ct.view(),
                    clin.view(),
                    &cross.ct_from_clinical,
                    params,
                    self.config.n_heads,
                    self.config.dropout,
                    rng.as_deref_mut(),
                );
                let (clin_new, clin_cache) = block_forward(
                    clin.view(),
                    ct.view(),
                    &cross.clinical_from_ct,
                    params,
                    self.config.n_heads,
                    self.config.dropout,
                    rng.as_deref_mut(),
                );
                cross_attended.mri_ct = Some(ct_new);
                cross_attended.clinical = Some(clin_new);
                Some((ct_cache, clin_cache))
            }
            None => None,
        };

        for &m in &active {
            if let Some(StreamParams::Tokens(p)) = self.layout.stream(m) {
                let seq = cross_attended[m].as_ref().expect("tokenized stream");
                let (z, w) = attention_pool(seq.view(), &p.pool_query, params);
                pooled[m] = Some(z);
                token_caches[m].as_mut().expect("cache").pool_weights = w;
            }
        }

        let views: Vec<ArrayView1<f64>> = active
            .iter()
            .map(|&m| pooled[m].as_ref().expect("pooled").view())
            .collect();
        let (z, alpha, h) = match &self.layout.gate {
            Some(g) => {
                let (alpha, h) = gate_and_fuse(&views, g.w.view(params), g.b.view(params).row(0));
                (concat(&views), alpha, h)
            }
            None => {
                let z = concat(&views);
                (z.clone(), vec![1.0; active.len()], z)
            }
        };

        let (logit, head_cache) = self.head_forward(h.view(), &self.layout.head, params, rng);
        Ok(ForwardTrace {
            inputs: PerModality::from_fn(|m| bundle.block(m).to_vec()),
            active,
            tokens,
            encoded,
            cross_attended,
            pooled,
            z,
            alpha,
            h,
            logit,
            prob: sigmoid(logit),
            token_caches,
            mlp_caches,
            cross_caches,
            head_cache,
        })
    }

    fn mlp_forward(
        &self,
        x: &[f64],
        p: &MlpStreamParams,
        params: &[f64],
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Array1<f64>, MlpCache) {
        let x = ArrayView1::from(x).insert_axis(Axis(0)).to_owned();
        let pre = linear_forward(x.view(), &p.hidden, params);
        let mut act = pre.mapv(gelu);
        let mask = dropout_mask(act.dim(), self.config.dropout, rng);
        apply_mask(&mut act, &mask);
        let out = linear_forward(act.view(), &p.out, params);
        (out.row(0).to_owned(), MlpCache { x, pre, act, mask })
    }

    /// Classification head: `LayerNorm -> Linear -> GELU -> dropout -> Linear`.
    pub fn head_forward(
        &self,
        h: ArrayView1<f64>,
        p: &HeadParams,
        params: &[f64],
        rng: Option<&mut ChaCha8Rng>,
    ) -> (f64, HeadCache) {
        let h = h.insert_axis(Axis(0)).to_owned();
        let (normed, norm) = layer_norm_forward(h.view(), &p.norm, params);
        let pre = linear_forward(normed.view(), &p.hidden, params);
        let mut act = pre.mapv(gelu);
        let mask = dropout_mask(act.dim(), self.config.dropout, rng);
        apply_mask(&mut act, &mask);
        let logit = linear_forward(act.view(), &p.out, params)[[0, 0]];
        (
            logit,
            HeadCache {
                norm,
                normed,
                pre,
                act,
                mask,
            },
        )
    }

    /// Exact gradients of a scalar objective given its gradient on the logit
    /// (and optionally on the gates). Parameter gradients are accumulated into
    /// `grads` (flat layout); the per-modality input gradients are returned.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        params: &[f64],
        out: &OutputGrad,
        grads: &mut [f64],
    ) -> Result<PerModality<Vec<f64>>> {
        if params.len() != self.layout.len || grads.len() != self.layout.len {
            return Err(Error::Shape(
                "parameter/gradient buffers do not match layout".into(),
            ));
        }
        if trace.active != self.config.wiring.active_modalities() {
            return Err(Error::Shape(
                "trace was produced by a different wiring".into(),
            ));
        }
        let d = self.config.d_model;
        let dh = self.head_backward(
            out.logit,
            &trace.head_cache,
            &self.layout.head,
            params,
            grads,
        );
        let dh = dh.row(0);

        // gates
        let m_count = trace.active.len();
        let mut dz = Array1::zeros(m_count * d);
        match &self.layout.gate {
            Some(GateParams { w, b }) => {
                let mut dpre = Array1::zeros(m_count);
                for j in 0..m_count {
                    let block = s![j * d..(j + 1) * d];
                    let a = trace.alpha[j];
                    dz.slice_mut(block).assign(&(&dh.slice(block) * a));
                    let mut dalpha = dh.slice(block).dot(&trace.z.slice(block));
                    dalpha += out.gates.get(j).copied().unwrap_or(0.0);
                    dpre[j] = dalpha * a * (1.0 - a);
                }
                {
                    let mut dw = w.view_mut(grads);
                    dw += &dpre
                        .view()
                        .insert_axis(Axis(1))
                        .dot(&trace.z.view().insert_axis(Axis(0)));
                }
                {
                    let mut db = b.view_mut(grads);
                    db.row_mut(0).scaled_add(1.0, &dpre);
                }
                dz += &w.view(params).t().dot(&dpre);
            }
            None => dz.assign(&dh),
        }

        let mut dpooled: PerModality<Option<Array1<f64>>> = PerModality::default();
        for (j, &m) in trace.active.iter().enumerate() {
            dpooled[m] = Some(dz.slice(s![j * d..(j + 1) * d]).to_owned());
        }

        let mut dinputs: PerModality<Vec<f64>> = PerModality::default();
        // pooling, per tokenized stream
        let mut dcross: PerModality<Option<Array2<f64>>> = PerModality::default();
        for &m in &trace.active {
            match self.layout.stream(m).expect("active stream") {
                StreamParams::Tokens(p) => {
                    let cache = trace.token_caches[m].as_ref().expect("token cache");
                    let seq = trace.cross_attended[m].as_ref().expect("sequence");
                    dcross[m] = Some(attention_pool_backward(
                        dpooled[m].as_ref().expect("grad").view(),
                        seq.view(),
                        cache.pool_weights.view(),
                        &p.pool_query,
                        params,
                        grads,
                    ));
                }
                StreamParams::Mlp(p) => {
                    let cache = trace.mlp_caches[m].as_ref().expect("mlp cache");
                    dinputs[m] = self.mlp_backward(
                        dpooled[m].as_ref().expect("grad").view(),
                        cache,
                        p,
                        params,
                        grads,
                    );
                }
            }
        }

        // cross-attention: each encoded sequence feeds its own queries and
        // the other direction's keys/values
        let mut dencoded = dcross;
        if let (Some(cross), Some((ct_cache, clin_cache))) =
            (&self.layout.cross, &trace.cross_caches)
        {
            let d_ct_new = dencoded.mri_ct.take().expect("ct grad");
            let d_clin_new = dencoded.clinical.take().expect("clinical grad");
            let (dct_q, dclin_kv) = block_backward(
                d_ct_new.view(),
                ct_cache,
                &cross.ct_from_clinical,
                params,
                grads,
            );
            let (dclin_q, dct_kv) = block_backward(
                d_clin_new.view(),
                clin_cache,
                &cross.clinical_from_ct,
                params,
                grads,
            );
            dencoded.mri_ct = Some(dct_q + dct_kv);
            dencoded.clinical = Some(dclin_q + dclin_kv);
        }

        for &m in &trace.active {
            if let Some(StreamParams::Tokens(p)) = self.layout.stream(m) {
                let cache = trace.token_caches[m].as_ref().expect("token cache");
                let de = dencoded[m].take().expect("encoded grad");
                dinputs[m] = self.token_backward(de, cache, p, &trace.inputs[m], params, grads);
            }
        }
        Ok(dinputs)
    }

    fn head_backward(
        &self,
        dlogit: f64,
        cache: &HeadCache,
        p: &HeadParams,
        params: &[f64],
        grads: &mut [f64],
    ) -> Array2<f64> {
        let dout = Array2::from_elem((1, 1), dlogit);
        let mut dact = linear_backward(cache.act.view(), dout.view(), &p.out, params, grads);
        apply_mask(&mut dact, &cache.mask);
        let dpre = dact * &cache.pre.mapv(gelu_grad);
        let dnormed = linear_backward(cache.normed.view(), dpre.view(), &p.hidden, params, grads);
        layer_norm_backward(dnormed.view(), &cache.norm, &p.norm, params, grads)
    }

    fn mlp_backward(
        &self,
        dout: ArrayView1<f64>,
        cache: &MlpCache,
        p: &MlpStreamParams,
        params: &[f64],
        grads: &mut [f64],
    ) -> Vec<f64> {
        let dout = dout.insert_axis(Axis(0));
        let mut dact = linear_backward(cache.act.view(), dout, &p.out, params, grads);
        apply_mask(&mut dact, &cache.mask);
        let dpre = dact * &cache.pre.mapv(gelu_grad);
        let dx = linear_backward(cache.x.view(), dpre.view(), &p.hidden, params, grads);
        dx.row(0).to_vec()
    }

    fn token_backward(
        &self,
        mut dx: Array2<f64>,
        cache: &TokenCache,
        p: &TokenStreamParams,
        x: &[f64],
        params: &[f64],
        grads: &mut [f64],
    ) -> Vec<f64> {
        for (layer, lcache) in p.layers.iter().zip(&cache.layers).rev() {
            let (dq, dkv) = block_backward(dx.view(), lcache, layer, params, grads);
            dx = dq + dkv;
        }
        embedding_backward(dx.view(), x, &p.embed_w, &p.embed_b, params, grads)
    }
}

fn embedding_backward(
    dtokens: ArrayView2<f64>,
    x: &[f64],
    embed_w: &TensorRef,
    embed_b: &TensorRef,
    params: &[f64],
    grads: &mut [f64],
) -> Vec<f64> {
    let xs = ArrayView1::from(x).insert_axis(Axis(1));
    {
        let mut dw = embed_w.view_mut(grads);
        dw += &(&dtokens * &xs);
    }
    {
        let mut db = embed_b.view_mut(grads);
        db += &dtokens;
    }
    let w = embed_w.view(params);
    (&dtokens * &w).sum_axis(Axis(1)).to_vec()
}
