//! Batched forward pass over a whole token sequence.

use super::{BoundLayer, BoundParams, ModelParameters, PosEncoding, RotationTable};
use crate::error::{Error, Result};
use crate::tensor::ops::matvec;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Hidden states `H_0, …, H_L`, each `d × T`. `H_0` is the embedding output.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates<T = f32> {
    pub layers: Vec<Tensor<T>>,
}

impl<T: Scalar> HiddenStates<T> {
    /// Final states `S = H_L`.
    pub fn output(&self) -> &Tensor<T> {
        self.layers.last().expect("at least the embedding layer")
    }

    pub fn len(&self) -> usize {
        self.output().cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The forward computation recorded on a tape.
pub struct ForwardPass<'t, T: Scalar> {
    /// `H_0, …, H_L`.
    pub hidden: Vec<Var<'t, T>>,
    /// `V × T` next-token logits.
    pub logits: Var<'t, T>,
}

/// Sinusoid `p_u` with `p_u(2j) = sin(u·ω_j)`, `p_u(2j+1) = cos(u·ω_j)`,
/// `ω_j = 10000^(−2j/d)`.
pub fn sinusoid(d: usize, u: usize) -> Vec<f64> {
    let mut p = vec![0.0; d];
    for j in 0..d / 2 {
        let w = 10000f64.powf(-2.0 * j as f64 / d as f64);
        let (s, c) = (u as f64 * w).sin_cos();
        p[2 * j] = s;
        p[2 * j + 1] = c;
    }
    p
}

impl<T: Scalar> ModelParameters<T> {
    /// Token embeddings plus any additive position vectors, `d × T`.
    pub fn embed<'t>(&self, bound: &BoundParams<'t, T>, tokens: &[usize]) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        let x = bound.wte.embed_cols(tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        match cfg.pos_encoding {
            PosEncoding::Rope => Ok(x),
            PosEncoding::Sinusoidal => {
                let t = tokens.len();
                let mut p = Tensor::zeros(&[cfg.d_model, t]);
                for u in 0..t {
                    let col: Vec<T> = sinusoid(cfg.d_model, u).into_iter().map(T::from_f64).collect();
                    p.set_column(u, &col);
                }
                x.add(x.tape().leaf(p))
            }
            PosEncoding::Learned => {
                if tokens.len() > cfg.context {
                    return Err(Error::Contract(format!(
                        "learned positions cover {} tokens, got {}",
                        cfg.context,
                        tokens.len()
                    )));
                }
                let wpe = bound.wpe.expect("learned table bound with learned encoding");
                x.add(wpe.embed_cols(&positions)?)
            }
        }
    }

    /// Run all layers on `tokens` (positions `0..T`) and project to logits.
    pub fn forward<'t>(&self, bound: &BoundParams<'t, T>, tokens: &[usize]) -> Result<ForwardPass<'t, T>> {
        if tokens.is_empty() {
            return Err(Error::Contract("forward pass over an empty sequence".into()));
        }
        let cfg = &self.config;
        let rope = match cfg.pos_encoding {
            PosEncoding::Rope => {
                let table = RotationTable::new(cfg.head_dim(), cfg.context)?;
                let positions: Vec<usize> = (0..tokens.len()).collect();
                Some(table.pair_tables::<T>(&positions))
            }
            _ => None,
        };
        let mut h = self.embed(bound, tokens)?;
        let mut hidden = vec![h];
        for layer in &bound.layers {
            h = self.block(layer, h, rope.as_ref())?;
            hidden.push(h);
        }
        let logits = match bound.w_out {
            Some(w) => w.matmul(h)?,
            None => bound.wte.t().matmul(h)?,
        }
        .add_bias(bound.b_out)?;
        Ok(ForwardPass { hidden, logits })
    }

    fn norm<'t>(&self, x: Var<'t, T>, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
        if self.config.layer_norm {
            x.layer_norm(gamma, beta, self.config.ln_eps)
        } else {
            Ok(x)
        }
    }

    fn block<'t>(
        &self,
        layer: &BoundLayer<'t, T>,
        h: Var<'t, T>,
        rope: Option<&(Vec<T>, Vec<T>)>,
    ) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        let a = self.norm(h, layer.ln1_gamma, layer.ln1_beta)?;
        let mut heads = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            let mut q = head.wq.matmul(a)?;
            let mut k = head.wk.matmul(a)?;
            let v = head.wv.matmul(a)?;
            if let Some((cos, sin)) = rope {
                q = q.rotate_pairs(cos.clone(), sin.clone())?;
                k = k.rotate_pairs(cos.clone(), sin.clone())?;
            }
            let mut scores = k.t().matmul(q)?;
            if cfg.attn_scale {
                scores = scores.scale(T::one() / T::from_f64(cfg.head_dim() as f64).sqrt());
            }
            let w = scores.causal_mask(cfg.context)?.softmax(0)?;
            heads.push(v.matmul(w)?);
        }
        let attn = layer.wo.matmul(Var::concat_rows(&heads)?)?;
        let h = h.add(attn)?;
        let b = self.norm(h, layer.ln2_gamma, layer.ln2_beta)?;
        let f = layer.w1.matmul(b)?.add_bias(layer.b1)?.gelu();
        let f = layer.w2.matmul(f)?.add_bias(layer.b2)?;
        h.add(f)
    }

    /// Hidden states and `V × T` logits without keeping a tape around.
    pub fn evaluate(&self, tokens: &[usize]) -> Result<(HiddenStates<T>, Tensor<T>)> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let pass = self.forward(&bound, tokens)?;
        let layers = pass.hidden.iter().map(|v| v.value().clone()).collect();
        let logits = pass.logits.value().clone();
        Ok((HiddenStates { layers }, logits))
    }
}

pub fn transformer_forward<T: Scalar>(tokens: &[usize], params: &ModelParameters<T>) -> Result<HiddenStates<T>> {
    Ok(params.evaluate(tokens)?.0)
}

/// `W_out s + b_out` for one final hidden state.
pub fn logits<T: Scalar>(s: &[T], params: &ModelParameters<T>) -> Result<Vec<T>> {
    let (d, v) = (params.config.d_model, params.config.vocab_size);
    if s.len() != d {
        return Err(Error::Shape {
            op: "logits",
            left: vec![s.len()],
            right: vec![d],
        });
    }
    let w = params.output_weight();
    let mut z = matvec(w.data(), s, v, d);
    for (zi, &b) in z.iter_mut().zip(params.b_out.data()) {
        *zi += b;
    }
    Ok(z)
}
