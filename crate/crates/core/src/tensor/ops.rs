//! Tape-free numeric kernels shared by the differentiable ops and the
//! inference path.

use super::{lit, Scalar, Tensor};
use crate::error::{Error, Result};

/// Matrix product. `b` may be a vector, in which case the result is a vector.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let shape_err = || Error::Shape {
        op: "matmul",
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    };
    if a.ndim() != 2 || b.ndim() == 0 || b.ndim() > 2 {
        return Err(shape_err());
    }
    let (m, k) = (a.rows(), a.cols());
    if b.rows() != k {
        return Err(shape_err());
    }
    let n = b.cols();
    let mut out = vec![T::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    let shape = if b.ndim() == 1 { vec![m] } else { vec![m, n] };
    Tensor::from_vec(&shape, out)
}

/// `out += a · b` on raw row-major buffers (`a`: m×k, `b`: k×n).
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += aᵀ · b` where `a` is k×m and `b` is k×n.
pub(crate) fn matmul_tn_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

/// `out += a · bᵀ` where `a` is m×k and `b` is n×k.
pub(crate) fn matmul_nt_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `y = W x` for a row-major `W` (m×k).
pub(crate) fn matvec<T: Scalar>(w: &[T], x: &[T], m: usize, k: usize) -> Vec<T> {
    (0..m)
        .map(|i| w[i * k..(i + 1) * k].iter().zip(x).map(|(&a, &b)| a * b).sum())
        .collect()
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.rows(), a.cols());
    let src = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Tensor::from_vec(&[n, m], out).expect("transpose preserves size")
}

pub fn log_sum_exp<T: Scalar>(z: &[T]) -> T {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let s: T = z.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub fn log_softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let lse = log_sum_exp(z);
    z.iter().map(|&v| v - lse).collect()
}

/// Max-subtracted softmax over a contiguous slice. Entries at `-inf` get
/// weight exactly zero; at least one entry must be finite.
pub fn softmax_in_place<T: Scalar>(z: &mut [T]) -> Result<()> {
    let mut max = T::neg_infinity();
    for &v in z.iter() {
        if v.is_nan() {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        if v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return Err(Error::Numeric("softmax input has no finite maximum".into()));
    }
    let mut sum = T::zero();
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Softmax along `axis`. For a matrix, `axis = 0` normalizes each column and
/// `axis = 1` each row.
pub fn softmax<T: Scalar>(z: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let mut out = z.clone();
    match (z.ndim(), axis) {
        (1, 0) => softmax_in_place(out.data_mut())?,
        (2, 1) => {
            let c = z.cols();
            for row in out.data_mut().chunks_mut(c) {
                softmax_in_place(row)?;
            }
        }
        (2, 0) => {
            for j in 0..z.cols() {
                let mut col = z.column(j);
                softmax_in_place(&mut col)?;
                out.set_column(j, &col);
            }
        }
        _ => {
            return Err(Error::Shape {
                op: "softmax",
                left: z.shape().to_vec(),
                right: vec![axis],
            })
        }
    }
    Ok(out)
}

/// Per-token normalization `γ ⊙ (z − μ)/√(σ² + ε) + β`.
pub fn layer_norm<T: Scalar>(z: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if z.ndim() != 1 || z.is_empty() {
        return Err(Error::Contract("layer_norm expects a non-empty vector".into()));
    }
    z.same_shape(gamma, "layer_norm")?;
    z.same_shape(beta, "layer_norm")?;
    let out = layer_norm_slice(z.data(), gamma.data(), beta.data(), eps).0;
    Tensor::from_vec(z.shape(), out)
}

/// Returns the normalized output, the centred-and-scaled `x̂`, and `1/σ`.
pub(crate) fn layer_norm_slice<T: Scalar>(z: &[T], gamma: &[T], beta: &[T], eps: f64) -> (Vec<T>, Vec<T>, T) {
    let d = lit::<T>(z.len() as f64);
    let mean = z.iter().copied().sum::<T>() / d;
    let var = z.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
    let rstd = T::one() / (var + lit(eps)).sqrt();
    let xhat: Vec<T> = z.iter().map(|&v| (v - mean) * rstd).collect();
    let out = xhat
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&x, (&g, &b))| g * x + b)
        .collect();
    (out, xhat, rstd)
}

#[inline]
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = lit::<T>(0.5);
    half * x * (T::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Derivative of the exact GeLU: `Φ(x) + x φ(x)`.
#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = lit::<T>(0.5);
    let cdf = half * (T::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Exact Gaussian-error-function GeLU, `x Φ(x)`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// `−log softmax(logits)[target]`, via log-sum-exp.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, target: usize) -> Result<T> {
    if target >= logits.len() {
        return Err(Error::Index {
            what: "cross_entropy target",
            index: target,
            size: logits.len(),
        });
    }
    Ok(log_sum_exp(logits.data()) - logits.data()[target])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::<f64>::eye(2);
        let m = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_multiplied() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[&[2.0], &[3.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 1]);
        assert_eq!(c.data(), &[2.0, 3.0, 5.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_worked_example() {
        let z = Tensor::<f64>::vector(&[2.0, 1.0, 0.1]);
        let p = softmax(&z, 0).unwrap();
        for (got, want) in p.data().iter().zip([0.659, 0.242, 0.099]) {
            assert!(close(*got, want, 1e-3), "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_uniform_and_nan() {
        let p = softmax(&Tensor::<f64>::vector(&[0.0, 0.0, 0.0]), 0).unwrap();
        for v in p.data() {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }
        let bad = Tensor::<f64>::vector(&[0.0, f64::NAN]);
        assert!(matches!(softmax(&bad, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_columns_and_rows() {
        let z = Tensor::<f64>::from_rows(&[&[0.0, 1.0], &[0.0, 1.0]]).unwrap();
        let cols = softmax(&z, 0).unwrap();
        assert!(cols.data().iter().all(|&v| close(v, 0.5, 1e-15)));
        let rows = softmax(&z, 1).unwrap();
        assert!(close(rows.get(0, 0) + rows.get(0, 1), 1.0, 1e-15));
    }

    #[test]
    fn masked_entry_gets_zero_weight() {
        let mut z = vec![1.0f64, f64::NEG_INFINITY, 2.0];
        softmax_in_place(&mut z).unwrap();
        assert_eq!(z[1], 0.0);
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::<f64>::ones(&[4]);
        let zeros = Tensor::<f64>::zeros(&[4]);
        let constant = Tensor::<f64>::full(&[4], 3.5);
        let out = layer_norm(&constant, &ones, &zeros, 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let z = Tensor::<f64>::vector(&[1.0, -1.0]);
        let out = layer_norm(&z, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-5).unwrap();
        // closed form: μ = 0, σ² = 1
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!(close(out.data()[0], expect, 1e-12));
        assert!(close(out.data()[1], -expect, 1e-12));

        let beta = Tensor::<f64>::vector(&[0.25, -4.0]);
        let out = layer_norm(&z, &Tensor::zeros(&[2]), &beta, 1e-5).unwrap();
        assert_eq!(out.data(), beta.data());
    }

    #[test]
    fn gelu_reference_points() {
        let g = gelu(&Tensor::<f64>::vector(&[0.0, 10.0]));
        assert_eq!(g.data()[0], 0.0);
        assert!(close(g.data()[1], 10.0, 1e-4));
    }

    #[test]
    fn cross_entropy_cases() {
        let z = Tensor::<f64>::vector(&[2.0, 1.0, 0.1]);
        // −ln 0.659
        assert!(close(cross_entropy(&z, 0).unwrap(), 0.417, 2e-3));
        let uniform = Tensor::<f64>::vector(&[0.0, 0.0, 0.0]);
        assert!(close(cross_entropy(&uniform, 1).unwrap(), 3f64.ln(), 1e-12));
        let sure = Tensor::<f64>::vector(&[0.0, 1e4, 0.0]);
        assert!(cross_entropy(&sure, 1).unwrap().abs() < 1e-12);
        assert!(matches!(cross_entropy(&z, 3), Err(Error::Index { .. })));
    }

    /// Maclaurin series `erf x = 2/√π Σ (−1)ⁿ x^{2n+1} / (n! (2n+1))`.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..60 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn gelu_one_against_series_oracle() {
        let oracle = 0.5 * (1.0 + erf_series(std::f64::consts::FRAC_1_SQRT_2));
        let g = gelu(&Tensor::<f64>::vector(&[1.0])).data()[0];
        assert!(close(g, oracle, 1e-12));
        assert!(close(g, 0.8413, 1e-4));
        let g32 = gelu(&Tensor::<f32>::vector(&[1.0])).data()[0];
        assert!(close(g32 as f64, oracle, 1e-6));
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn softmax_sums_to_one_and_ignores_shifts(
            z in proptest::collection::vec(-50.0f64..50.0, 1..16),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&Tensor::<f64>::vector(&z), 0).unwrap();
            prop_assert!((p.sum() - 1.0).abs() <= 1e-6);
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            let q = softmax(&Tensor::vector(&shifted), 0).unwrap();
            for (a, b) in p.data().iter().zip(q.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn softmax_single_precision_sums_to_one(z in proptest::collection::vec(-50.0f32..50.0, 1..16)) {
            let mut p = z.clone();
            softmax_in_place(&mut p).unwrap();
            prop_assert!((p.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn layer_norm_standardizes(
            z in proptest::collection::vec(-10.0f64..10.0, 2..32),
        ) {
            let n = z.len() as f64;
            let mean = z.iter().sum::<f64>() / n;
            let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            // output variance is σ²/(σ² + ε), within 1e-4 of 1 once σ² ≥ 0.1
            prop_assume!(var >= 0.1);
            let ones = Tensor::<f64>::ones(&[z.len()]);
            let zeros = Tensor::<f64>::zeros(&[z.len()]);
            let y = layer_norm(&Tensor::vector(&z), &ones, &zeros, 1e-5).unwrap();
            let m = y.sum() / n;
            let v = y.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            prop_assert!(m.abs() <= 1e-6);
            prop_assert!((v - 1.0).abs() <= 1e-4);
        }
    }
}
