//! Flat parameter layout. Every tensor lives at a fixed offset inside one
//! `Vec<f64>`; optimiser state and finite-difference probes index the same
//! space.

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::modality::{BlockWidths, Modality, PerModality};

use super::config::SafnConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorRef {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn view<'a>(&self, flat: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &flat[self.range()])
            .expect("layout range matches shape")
    }

    pub fn view_mut<'a>(&self, flat: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut flat[self.range()])
            .expect("layout range matches shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Uniform(f64),
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutEntry {
    pub name: String,
    pub tensor: TensorRef,
    pub init: Init,
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: TensorRef,
    pub b: TensorRef,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: TensorRef,
    pub beta: TensorRef,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

/// Post-norm transformer block: attention, residual, norm, FFN, residual, norm.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNormParams,
}

#[derive(Debug, Clone)]
pub struct TokenStreamParams {
    /// Row f is the embedding direction of feature f.
    pub embed_w: TensorRef,
    pub embed_b: TensorRef,
    pub layers: Vec<BlockParams>,
    pub pool_query: TensorRef,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpStreamParams {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub enum StreamParams {
    Tokens(TokenStreamParams),
    Mlp(MlpStreamParams),
}

#[derive(Debug, Clone, Copy)]
pub struct GateParams {
    /// `M x (M*D)` for M active modalities.
    pub w: TensorRef,
    pub b: TensorRef,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub norm: LayerNormParams,
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct CrossParams {
    /// Cortical-thickness tokens query clinical tokens.
    pub ct_from_clinical: BlockParams,
    /// Clinical tokens query cortical-thickness tokens.
    pub clinical_from_ct: BlockParams,
}

#[derive(Debug, Clone)]
pub struct SafnLayout {
    pub entries: Vec<LayoutEntry>,
    pub streams: PerModality<Option<StreamParams>>,
    pub cross: Option<CrossParams>,
    pub gate: Option<GateParams>,
    pub head: HeadParams,
    pub len: usize,
}

struct Builder {
    entries: Vec<LayoutEntry>,
    len: usize,
}

impl Builder {
    fn tensor(&mut self, name: String, rows: usize, cols: usize, init: Init) -> TensorRef {
        let t = TensorRef {
            offset: self.len,
            rows,
            cols,
        };
        self.len += t.len();
        self.entries.push(LayoutEntry {
            name,
            tensor: t,
            init,
        });
        t
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: self.tensor(
                format!("{name}.weight"),
                fan_in,
                fan_out,
                Init::Uniform(bound),
            ),
            b: self.tensor(format!("{name}.bias"), 1, fan_out, Init::Uniform(bound)),
        }
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> LayerNormParams {
        LayerNormParams {
            gamma: self.tensor(format!("{name}.gamma"), 1, d, Init::Constant(1.0)),
            beta: self.tensor(format!("{name}.beta"), 1, d, Init::Constant(0.0)),
        }
    }

    fn block(&mut self, name: &str, d: usize, ffn: usize) -> BlockParams {
        BlockParams {
            attn: AttentionParams {
                q: self.linear(&format!("{name}.attn.q"), d, d),
                k: self.linear(&format!("{name}.attn.k"), d, d),
                v: self.linear(&format!("{name}.attn.v"), d, d),
                out: self.linear(&format!("{name}.attn.out"), d, d),
            },
            norm1: self.layer_norm(&format!("{name}.norm1"), d),
            ffn_in: self.linear(&format!("{name}.ffn.in"), d, ffn),
            ffn_out: self.linear(&format!("{name}.ffn.out"), ffn, d),
            norm2: self.layer_norm(&format!("{name}.norm2"), d),
        }
    }
}

impl SafnLayout {
    pub fn new(config: &SafnConfig, widths: &BlockWidths) -> Self {
        let d = config.d_model;
        let ffn = config.ffn_width();
        let embed_bound = 1.0 / (d as f64).sqrt();
        let mut b = Builder {
            entries: Vec::new(),
            len: 0,
        };
        let active = config.wiring.active_modalities();

        let mut streams: PerModality<Option<StreamParams>> = PerModality::default();
        for &m in &active {
            let f = widths[m];
            let name = m.name();
            streams[m] = Some(if m.is_tokenized() {
                let embed_w = b.tensor(
                    format!("{name}.embed.weight"),
                    f,
                    d,
                    Init::Uniform(embed_bound),
                );
                let embed_b = b.tensor(
                    format!("{name}.embed.bias"),
                    f,
                    d,
                    Init::Uniform(embed_bound),
                );
                let layers = (0..config.n_layers)
                    .map(|l| b.block(&format!("{name}.encoder.{l}"), d, ffn))
                    .collect();
                let pool_query = b.tensor(
                    format!("{name}.pool.query"),
                    1,
                    d,
                    Init::Uniform(embed_bound),
                );
                StreamParams::Tokens(TokenStreamParams {
                    embed_w,
                    embed_b,
                    layers,
                    pool_query,
                })
            } else {
                StreamParams::Mlp(MlpStreamParams {
                    hidden: b.linear(&format!("{name}.mlp.hidden"), f, d),
                    out: b.linear(&format!("{name}.mlp.out"), d, d),
                })
            });
        }

        let cross = config.wiring.uses_cross_attention().then(|| CrossParams {
            ct_from_clinical: b.block("cross.mri_ct_from_clinical", d, ffn),
            clinical_from_ct: b.block("cross.clinical_from_mri_ct", d, ffn),
        });

        let m = active.len();
        let gate = config.wiring.gates.then(|| {
            let bound = 1.0 / ((m * d) as f64).sqrt();
            GateParams {
                w: b.tensor("gate.weight".into(), m, m * d, Init::Uniform(bound)),
                b: b.tensor("gate.bias".into(), 1, m, Init::Uniform(bound)),
            }
        });

        let head = HeadParams {
            norm: b.layer_norm("head.norm", m * d),
            hidden: b.linear("head.hidden", m * d, config.head_hidden),
            out: b.linear("head.out", config.head_hidden, 1),
        };

        SafnLayout {
            entries: b.entries,
            streams,
            cross,
            gate,
            head,
            len: b.len,
        }
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut flat = vec![0.0; self.len];
        for entry in &self.entries {
            for v in &mut flat[entry.tensor.range()] {
                *v = match entry.init {
                    Init::Uniform(bound) => rng.random_range(-bound..bound),
                    Init::Constant(c) => c,
                };
            }
        }
        flat
    }

    /// Name of the tensor holding flat index `i` and the position inside it.
    pub fn locate(&self, i: usize) -> Option<(&str, usize)> {
        self.entries
            .iter()
            .find(|e| e.tensor.range().contains(&i))
            .map(|e| (e.name.as_str(), i - e.tensor.offset))
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn stream(&self, m: Modality) -> Option<&StreamParams> {
        self.streams[m].as_ref()
    }
}
