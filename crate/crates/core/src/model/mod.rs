//! The causal transformer: configuration, parameters, and forward passes.

mod attention;
mod forward;
mod rope;

pub use attention::attention_weights;
pub use forward::{logits, sinusoid, transformer_forward, ForwardPass, HiddenStates};
pub use rope::RotationTable;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// How token order reaches the attention layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosEncoding {
    /// Rotary embeddings on queries and keys.
    Rope,
    /// Fixed sine/cosine vectors added to the token embeddings.
    Sinusoidal,
    /// A learned `d × Δ` table added to the token embeddings.
    Learned,
}

impl PosEncoding {
    pub fn as_str(self) -> &'static str {
        match self {
            PosEncoding::Rope => "rope",
            PosEncoding::Sinusoidal => "sinusoidal",
            PosEncoding::Learned => "learned",
        }
    }
}

impl fmt::Display for PosEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PosEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rope" => Ok(PosEncoding::Rope),
            "sinusoidal" => Ok(PosEncoding::Sinusoidal),
            "learned" => Ok(PosEncoding::Learned),
            other => Err(Error::Config(format!("unknown positional encoding {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Embedding (hidden-state) dimension `d`.
    pub d_model: usize,
    pub vocab_size: usize,
    pub n_layer: usize,
    pub n_head: usize,
    /// Context window length `Δ`.
    pub context: usize,
    pub pos_encoding: PosEncoding,
    /// Use `W_embᵀ` as the output projection.
    pub tie_output: bool,
    /// Divide attention scores by `√d_h`.
    pub attn_scale: bool,
    pub ffn_mult: usize,
    /// When false, both LayerNorms in every block are the identity.
    pub layer_norm: bool,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn new(d_model: usize, vocab_size: usize, n_layer: usize, n_head: usize, context: usize) -> Self {
        Self {
            d_model,
            vocab_size,
            n_layer,
            n_head,
            context,
            pos_encoding: PosEncoding::Rope,
            tie_output: false,
            attn_scale: true,
            ffn_mult: 4,
            layer_norm: true,
            ln_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_head
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return fail(format!("d_model must be even and positive, got {}", self.d_model));
        }
        if self.n_head == 0 || self.d_model % self.n_head != 0 {
            return fail(format!("n_head {} must divide d_model {}", self.n_head, self.d_model));
        }
        if self.pos_encoding == PosEncoding::Rope && self.head_dim() % 2 != 0 {
            return fail(format!("head dimension {} must be even for rope", self.head_dim()));
        }
        if self.context == 0 {
            return fail("context window must be at least 1".into());
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return fail(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T = f32> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub heads: Vec<HeadParams<T>>,
    pub wo: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

/// All learned weights θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T = f32> {
    pub config: ModelConfig,
    /// Token embeddings, `d × V`; column `i` embeds token `i`.
    pub wte: Tensor<T>,
    /// Learned positions, `d × Δ`; present only for [`PosEncoding::Learned`].
    pub wpe: Option<Tensor<T>>,
    pub layers: Vec<LayerParams<T>>,
    /// Output projection `V × d`; `None` when tied to `wteᵀ`.
    pub w_out: Option<Tensor<T>>,
    pub b_out: Tensor<T>,
}

const INIT_STD: f64 = 0.02;

impl<T: Scalar> ModelParameters<T> {
    /// Weights ~ N(0, 0.02²); LayerNorm γ = 1, β = 0; biases 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v, dh, f) = (
            config.d_model,
            config.vocab_size,
            config.head_dim(),
            config.ffn_hidden(),
        );
        let mut randn = |shape: &[usize]| Tensor::<T>::randn(shape, INIT_STD, &mut rng);
        let wte = randn(&[d, v]);
        let wpe = (config.pos_encoding == PosEncoding::Learned).then(|| randn(&[d, config.context]));
        let mut layers = Vec::with_capacity(config.n_layer);
        for _ in 0..config.n_layer {
            let heads = (0..config.n_head)
                .map(|_| HeadParams {
                    wq: randn(&[dh, d]),
                    wk: randn(&[dh, d]),
                    wv: randn(&[dh, d]),
                })
                .collect();
            layers.push(LayerParams {
                ln1_gamma: Tensor::ones(&[d]),
                ln1_beta: Tensor::zeros(&[d]),
                heads,
                wo: randn(&[d, d]),
                ln2_gamma: Tensor::ones(&[d]),
                ln2_beta: Tensor::zeros(&[d]),
                w1: randn(&[f, d]),
                b1: Tensor::zeros(&[f]),
                w2: randn(&[d, f]),
                b2: Tensor::zeros(&[d]),
            });
        }
        let w_out = (!config.tie_output).then(|| randn(&[v, d]));
        Ok(Self {
            config: config.clone(),
            wte,
            wpe,
            layers,
            w_out,
            b_out: Tensor::zeros(&[v]),
        })
    }

    /// Every weight set to zero (LayerNorm γ included).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        for (_, t) in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
        Ok(p)
    }

    /// Named parameter tensors in a fixed order shared by [`Self::tensors_mut`],
    /// [`Self::bind`], optimizers and checkpoints.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("wte".to_string(), &self.wte)];
        if let Some(p) = &self.wpe {
            out.push(("wpe".into(), p));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("h.{l}.ln1.gamma"), &layer.ln1_gamma));
            out.push((format!("h.{l}.ln1.beta"), &layer.ln1_beta));
            for (k, h) in layer.heads.iter().enumerate() {
                out.push((format!("h.{l}.attn.{k}.wq"), &h.wq));
                out.push((format!("h.{l}.attn.{k}.wk"), &h.wk));
                out.push((format!("h.{l}.attn.{k}.wv"), &h.wv));
            }
            out.push((format!("h.{l}.attn.wo"), &layer.wo));
            out.push((format!("h.{l}.ln2.gamma"), &layer.ln2_gamma));
            out.push((format!("h.{l}.ln2.beta"), &layer.ln2_beta));
            out.push((format!("h.{l}.ffn.w1"), &layer.w1));
            out.push((format!("h.{l}.ffn.b1"), &layer.b1));
            out.push((format!("h.{l}.ffn.w2"), &layer.w2));
            out.push((format!("h.{l}.ffn.b2"), &layer.b2));
        }
        if let Some(w) = &self.w_out {
            out.push(("lm_head.weight".into(), w));
        }
        out.push(("lm_head.bias".into(), &self.b_out));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("wte".to_string(), &mut self.wte)];
        if let Some(p) = &mut self.wpe {
            out.push(("wpe".into(), p));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("h.{l}.ln1.gamma"), &mut layer.ln1_gamma));
            out.push((format!("h.{l}.ln1.beta"), &mut layer.ln1_beta));
            for (k, h) in layer.heads.iter_mut().enumerate() {
                out.push((format!("h.{l}.attn.{k}.wq"), &mut h.wq));
                out.push((format!("h.{l}.attn.{k}.wk"), &mut h.wk));
                out.push((format!("h.{l}.attn.{k}.wv"), &mut h.wv));
            }
            out.push((format!("h.{l}.attn.wo"), &mut layer.wo));
            out.push((format!("h.{l}.ln2.gamma"), &mut layer.ln2_gamma));
            out.push((format!("h.{l}.ln2.beta"), &mut layer.ln2_beta));
            out.push((format!("h.{l}.ffn.w1"), &mut layer.w1));
            out.push((format!("h.{l}.ffn.b1"), &mut layer.b1));
            out.push((format!("h.{l}.ffn.w2"), &mut layer.w2));
            out.push((format!("h.{l}.ffn.b2"), &mut layer.b2));
        }
        if let Some(w) = &mut self.w_out {
            out.push(("lm_head.weight".into(), w));
        }
        out.push(("lm_head.bias".into(), &mut self.b_out));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        ModelParameters {
            config: self.config.clone(),
            wte: self.wte.cast(),
            wpe: self.wpe.as_ref().map(Tensor::cast),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gamma: l.ln1_gamma.cast(),
                    ln1_beta: l.ln1_beta.cast(),
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadParams {
                            wq: h.wq.cast(),
                            wk: h.wk.cast(),
                            wv: h.wv.cast(),
                        })
                        .collect(),
                    wo: l.wo.cast(),
                    ln2_gamma: l.ln2_gamma.cast(),
                    ln2_beta: l.ln2_beta.cast(),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                })
                .collect(),
            w_out: self.w_out.as_ref().map(Tensor::cast),
            b_out: self.b_out.cast(),
        }
    }

    /// Output projection `V × d` (materialized `wteᵀ` when tied).
    pub fn output_weight(&self) -> std::borrow::Cow<'_, Tensor<T>> {
        match &self.w_out {
            Some(w) => std::borrow::Cow::Borrowed(w),
            None => std::borrow::Cow::Owned(crate::tensor::transpose(&self.wte)),
        }
    }

    /// Record every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        let leaf = |t: &Tensor<T>| tape.leaf(t.clone());
        let wte = leaf(&self.wte);
        let wpe = self.wpe.as_ref().map(leaf);
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                ln1_gamma: leaf(&l.ln1_gamma),
                ln1_beta: leaf(&l.ln1_beta),
                heads: l
                    .heads
                    .iter()
                    .map(|h| BoundHead {
                        wq: leaf(&h.wq),
                        wk: leaf(&h.wk),
                        wv: leaf(&h.wv),
                    })
                    .collect(),
                wo: leaf(&l.wo),
                ln2_gamma: leaf(&l.ln2_gamma),
                ln2_beta: leaf(&l.ln2_beta),
                w1: leaf(&l.w1),
                b1: leaf(&l.b1),
                w2: leaf(&l.w2),
                b2: leaf(&l.b2),
            })
            .collect();
        let w_out = self.w_out.as_ref().map(leaf);
        let b_out = leaf(&self.b_out);
        BoundParams {
            wte,
            wpe,
            layers,
            w_out,
            b_out,
        }
    }

    /// Apply `f(param, grad)` to every parameter in [`Self::tensors`] order.
    pub fn zip_apply(&mut self, grads: &[Tensor<T>], mut f: impl FnMut(usize, &mut Tensor<T>, &Tensor<T>)) {
        for (i, ((_, p), g)) in self.tensors_mut().into_iter().zip(grads).enumerate() {
            f(i, p, g);
        }
    }
}

pub struct BoundHead<'t, T: Scalar> {
    pub wq: Var<'t, T>,
    pub wk: Var<'t, T>,
    pub wv: Var<'t, T>,
}

pub struct BoundLayer<'t, T: Scalar> {
    pub ln1_gamma: Var<'t, T>,
    pub ln1_beta: Var<'t, T>,
    pub heads: Vec<BoundHead<'t, T>>,
    pub wo: Var<'t, T>,
    pub ln2_gamma: Var<'t, T>,
    pub ln2_beta: Var<'t, T>,
    pub w1: Var<'t, T>,
    pub b1: Var<'t, T>,
    pub w2: Var<'t, T>,
    pub b2: Var<'t, T>,
}

/// Parameters recorded as tape leaves, mirroring [`ModelParameters`].
pub struct BoundParams<'t, T: Scalar> {
    pub wte: Var<'t, T>,
    pub wpe: Option<Var<'t, T>>,
    pub layers: Vec<BoundLayer<'t, T>>,
    pub w_out: Option<Var<'t, T>>,
    pub b_out: Var<'t, T>,
}

impl<'t, T: Scalar> BoundParams<'t, T> {
    /// Leaves in [`ModelParameters::tensors`] order.
    pub fn leaves(&self) -> Vec<Var<'t, T>> {
        let mut out = vec![self.wte];
        out.extend(self.wpe);
        for l in &self.layers {
            out.push(l.ln1_gamma);
            out.push(l.ln1_beta);
            for h in &l.heads {
                out.extend([h.wq, h.wk, h.wv]);
            }
            out.extend([l.wo, l.ln2_gamma, l.ln2_beta, l.w1, l.b1, l.w2, l.b2]);
        }
        out.extend(self.w_out);
        out.push(self.b_out);
        out
    }
}
