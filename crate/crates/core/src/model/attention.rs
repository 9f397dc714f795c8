//! Per-head attention for a single query position, evaluated without a tape.
//!
//! These mirror one column of the batched computation in the forward pass
//! and exist for inspection and conformance checks.

use super::{ModelParameters, PosEncoding, RotationTable};
use crate::error::{Error, Result};
use crate::tensor::ops::{layer_norm_slice, matvec};
use crate::tensor::{softmax_in_place, Scalar, Tensor};

/// Softmax over the visible scores.
pub fn attention_weights<T: Scalar>(scores: &[T]) -> Result<Vec<T>> {
    if scores.is_empty() {
        return Err(Error::Contract("attention over an empty window".into()));
    }
    let mut w = scores.to_vec();
    softmax_in_place(&mut w)?;
    Ok(w)
}

/// First visible key position for a query at `t`.
pub(crate) fn window_start(t: usize, window: usize) -> usize {
    (t + 1).saturating_sub(window)
}

struct HeadInputs<T> {
    query: Vec<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

impl<T: Scalar> ModelParameters<T> {
    fn head_inputs(&self, h_prev: &Tensor<T>, layer: usize, head: usize, t: usize) -> Result<HeadInputs<T>> {
        let cfg = &self.config;
        let lp = self.layers.get(layer).ok_or(Error::Index {
            what: "layer",
            index: layer,
            size: self.layers.len(),
        })?;
        let hp = lp.heads.get(head).ok_or(Error::Index {
            what: "head",
            index: head,
            size: lp.heads.len(),
        })?;
        if h_prev.ndim() != 2 || h_prev.rows() != cfg.d_model {
            return Err(Error::Shape {
                op: "attention",
                left: h_prev.shape().to_vec(),
                right: vec![cfg.d_model, t + 1],
            });
        }
        if t >= h_prev.cols() {
            return Err(Error::Index {
                what: "query position",
                index: t,
                size: h_prev.cols(),
            });
        }
        let (d, dh) = (cfg.d_model, cfg.head_dim());
        let input = |s: usize| {
            let col = h_prev.column(s);
            if cfg.layer_norm {
                layer_norm_slice(&col, lp.ln1_gamma.data(), lp.ln1_beta.data(), cfg.ln_eps).0
            } else {
                col
            }
        };
        let rope = match cfg.pos_encoding {
            PosEncoding::Rope => Some(RotationTable::new(dh, cfg.context)?),
            _ => None,
        };
        let project = |w: &Tensor<T>, x: &[T], pos: Option<usize>| -> Result<Vec<T>> {
            let y = matvec(w.data(), x, dh, d);
            match (&rope, pos) {
                (Some(r), Some(u)) => r.rotate(&y, u),
                _ => Ok(y),
            }
        };
        let query = project(&hp.wq, &input(t), Some(t))?;
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for s in window_start(t, cfg.context)..=t {
            let a = input(s);
            keys.push(project(&hp.wk, &a, Some(s))?);
            values.push(project(&hp.wv, &a, None)?);
        }
        Ok(HeadInputs { query, keys, values })
    }

    /// Scores `a(t, s)` for every visible key `s`, oldest first. `h_prev` is
    /// the `d × T` input to the layer; positions are 0-based.
    pub fn attention_scores(&self, h_prev: &Tensor<T>, layer: usize, head: usize, t: usize) -> Result<Vec<T>> {
        let inputs = self.head_inputs(h_prev, layer, head, t)?;
        let scale = if self.config.attn_scale {
            T::one() / T::from_f64(self.config.head_dim() as f64).sqrt()
        } else {
            T::one()
        };
        Ok(inputs
            .keys
            .iter()
            .map(|k| k.iter().zip(&inputs.query).map(|(&a, &b)| a * b).sum::<T>() * scale)
            .collect())
    }

    /// `Σ_s w(t, s) · W_V h_s` over the visible window.
    pub fn attention_head_output(&self, h_prev: &Tensor<T>, layer: usize, head: usize, t: usize) -> Result<Vec<T>> {
        let weights = attention_weights(&self.attention_scores(h_prev, layer, head, t)?)?;
        let values = self.head_inputs(h_prev, layer, head, t)?.values;
        let mut out = vec![T::zero(); self.config.head_dim()];
        for (w, v) in weights.iter().zip(&values) {
            for (o, &x) in out.iter_mut().zip(v) {
                *o += *w * x;
            }
        }
        Ok(out)
    }
}
