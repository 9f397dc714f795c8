//! Rotary position embeddings.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

const BASE: f64 = 10000.0;

/// Precomputed `cos(u·θ_j)`, `sin(u·θ_j)` with `θ_j = 10000^(−2j/d_h)`.
///
/// Positions past the table length are computed on demand with the same
/// formula, so the table only bounds what is cached, not what is valid.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationTable {
    head_dim: usize,
    len: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotationTable {
    pub fn new(head_dim: usize, len: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rope head dimension must be even, got {head_dim}"
            )));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for u in 0..len {
            for j in 0..half {
                let (s, c) = angle(head_dim, u, j).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Ok(Self {
            head_dim,
            len,
            cos,
            sin,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn theta(&self, j: usize) -> f64 {
        BASE.powf(-2.0 * j as f64 / self.head_dim as f64)
    }

    /// `(cos, sin)` of the rotation for pair `j` at position `u`.
    pub fn cos_sin(&self, u: usize, j: usize) -> (f64, f64) {
        let half = self.head_dim / 2;
        if u < self.len {
            (self.cos[u * half + j], self.sin[u * half + j])
        } else {
            let (s, c) = angle(self.head_dim, u, j).sin_cos();
            (c, s)
        }
    }

    /// `R_u x` for a single `d_h`-vector.
    pub fn rotate<T: Scalar>(&self, x: &[T], u: usize) -> Result<Vec<T>> {
        if x.len() != self.head_dim {
            return Err(Error::Shape {
                op: "rope",
                left: vec![x.len()],
                right: vec![self.head_dim],
            });
        }
        let mut out = vec![T::zero(); x.len()];
        for j in 0..self.head_dim / 2 {
            let (c, s) = self.cos_sin(u, j);
            let (c, s) = (T::from_f64(c), T::from_f64(s));
            let (a, b) = (x[2 * j], x[2 * j + 1]);
            out[2 * j] = a * c - b * s;
            out[2 * j + 1] = a * s + b * c;
        }
        Ok(out)
    }

    /// Cosine and sine tables in the `p·T + j` layout used by
    /// [`crate::tensor::Var::rotate_pairs`], for columns at `positions`.
    pub fn pair_tables<T: Scalar>(&self, positions: &[usize]) -> (Vec<T>, Vec<T>) {
        let t = positions.len();
        let half = self.head_dim / 2;
        let mut cos = vec![T::zero(); half * t];
        let mut sin = vec![T::zero(); half * t];
        for p in 0..half {
            for (j, &u) in positions.iter().enumerate() {
                let (c, s) = self.cos_sin(u, p);
                cos[p * t + j] = T::from_f64(c);
                sin[p * t + j] = T::from_f64(s);
            }
        }
        (cos, sin)
    }
}

fn angle(head_dim: usize, u: usize, j: usize) -> f64 {
    u as f64 * BASE.powf(-2.0 * j as f64 / head_dim as f64)
}
