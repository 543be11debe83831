//! Forward kernels. Each public function validates shapes, computes, and
//! rejects non-finite output; the tape reuses the raw slice kernels.

use std::str::FromStr;

use rayon::prelude::*;

use super::{check_finite, Float, Tensor};
use crate::error::{Result, VimError};

/// Below this many multiply-adds a kernel stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Unary {
    Silu,
    Softplus,
    Exp,
}

impl FromStr for Unary {
    type Err = VimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Unary::Silu),
            "softplus" => Ok(Unary::Softplus),
            "exp" => Ok(Unary::Exp),
            other => Err(VimError::UnknownUnary(other.to_string())),
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Float>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Silu => "silu",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
        }
    }

    #[inline]
    pub fn value<T: Float>(self, v: T) -> T {
        match self {
            Unary::Silu => v * sigmoid(v),
            Unary::Softplus => softplus(v),
            Unary::Exp => v.exp(),
        }
    }

    #[inline]
    pub fn derivative<T: Float>(self, v: T) -> T {
        match self {
            Unary::Silu => {
                let s = sigmoid(v);
                s + v * s * (T::one() - s)
            }
            Unary::Softplus => sigmoid(v),
            Unary::Exp => v.exp(),
        }
    }
}

// ---------------------------------------------------------------------------
// raw kernels

/// `a[m,k] · b[k,n]`
pub(crate) fn matmul_raw<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `g[m,n] · b[k,n]ᵀ` → `[m,k]`
pub(crate) fn matmul_a_bt<T: Float>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    let row = |(i, out_row): (usize, &mut [T])| {
        let g_row = &g[i * n..(i + 1) * n];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            *o = g_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        out.chunks_mut(k).enumerate().for_each(row);
    }
    out
}

/// `a[m,k]ᵀ · g[m,n]` → `[k,n]`
pub(crate) fn matmul_at_b<T: Float>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    let row = |(p, out_row): (usize, &mut [T])| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let g_row = &g[i * n..(i + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// Causal depthwise convolution over `seqs` independent sequences of shape `[len, d]`.
pub(crate) fn conv1d_raw<T: Float>(
    x: &[T],
    kernel: &[T],
    bias: &[T],
    seqs: usize,
    len: usize,
    d: usize,
    k: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); seqs * len * d];
    for s in 0..seqs {
        let xs = &x[s * len * d..(s + 1) * len * d];
        let ys = &mut out[s * len * d..(s + 1) * len * d];
        for t in 0..len {
            let y = &mut ys[t * d..(t + 1) * d];
            y.copy_from_slice(bias);
            for j in 0..k {
                // x index t - k + 1 + j
                let Some(src) = (t + 1 + j).checked_sub(k) else {
                    continue;
                };
                let xr = &xs[src * d..(src + 1) * d];
                let kr = &kernel[j * d..(j + 1) * d];
                for ((o, &xv), &kv) in y.iter_mut().zip(xr).zip(kr) {
                    *o += kv * xv;
                }
            }
        }
    }
    out
}

/// Returns `(normalized·gamma + beta, xhat, rstd)`.
pub(crate) fn layer_norm_raw<T: Float>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    d: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let dn = T::of(d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (xr[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gamma[c] + beta[c];
        }
    }
    (out, xhat, rstd)
}

pub(crate) fn softmax_raw<T: Float>(x: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xr, yr) in x.chunks(k).zip(out.chunks_mut(k)) {
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - max).exp();
            sum += *y;
        }
        yr.iter_mut().for_each(|y| *y = *y / sum);
    }
    out
}

// ---------------------------------------------------------------------------
// tensor-level operations

/// Matrix product. `a` may carry leading batch axes, which are flattened into rows.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n, shape) = matmul_dims(a.shape(), b.shape())?;
    let out = matmul_raw(a.data(), b.data(), m, k, n);
    check_finite("matmul", "output", &out)?;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, Vec<usize>)> {
    let mismatch = || VimError::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() != 2 {
        return Err(mismatch());
    }
    let k = a[a.len() - 1];
    if k != b[0] {
        return Err(mismatch());
    }
    let m = a[..a.len() - 1].iter().product();
    let mut shape = a[..a.len() - 1].to_vec();
    shape.push(b[1]);
    Ok((m, k, b[1], shape))
}

/// `x[..., L, D]` convolved per channel with `kernel[K, D]`, zero left-padding.
pub fn conv1d_causal_depthwise<T: Float>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (seqs, len, d, k) = conv_dims(x.shape(), kernel.shape(), bias.shape())?;
    let out = conv1d_raw(x.data(), kernel.data(), bias.data(), seqs, len, d, k);
    check_finite("conv1d_causal_depthwise", "output", &out)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn conv_dims(
    x: &[usize],
    kernel: &[usize],
    bias: &[usize],
) -> Result<(usize, usize, usize, usize)> {
    if x.len() < 2 || kernel.len() != 2 || kernel[1] != x[x.len() - 1] || bias != [kernel[1]] {
        return Err(VimError::Shape {
            op: "conv1d_causal_depthwise",
            lhs: x.to_vec(),
            rhs: kernel.to_vec(),
        });
    }
    let d = x[x.len() - 1];
    let len = x[x.len() - 2];
    let seqs = x[..x.len() - 2].iter().product();
    Ok((seqs, len, d, kernel[0]))
}

pub fn layer_norm<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (_, d) = x.rows_cols();
    check_norm_dims(x.shape(), gamma.shape(), beta.shape(), eps)?;
    let (out, _, _) = layer_norm_raw(x.data(), gamma.data(), beta.data(), d, T::of(eps));
    check_finite("layer_norm", "output", &out)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn check_norm_dims(
    x: &[usize],
    gamma: &[usize],
    beta: &[usize],
    eps: f64,
) -> Result<()> {
    let d = *x.last().unwrap_or(&0);
    if gamma != [d] || beta != [d] {
        return Err(VimError::Shape {
            op: "layer_norm",
            lhs: x.to_vec(),
            rhs: gamma.to_vec(),
        });
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(VimError::invalid("layer_norm eps must be positive"));
    }
    Ok(())
}

/// Softmax over the last axis.
pub fn softmax<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = x.rows_cols();
    let out = softmax_raw(x.data(), k);
    check_finite("softmax", "output", &out)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn apply_unary<T: Float>(x: &Tensor<T>, f: Unary) -> Result<Tensor<T>> {
    let out: Vec<T> = x.data().iter().map(|&v| f.value(v)).collect();
    check_finite(f.name(), "output", &out)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Looks the function up by name (`silu`, `softplus`, `exp`).
pub fn apply_unary_named<T: Float>(x: &Tensor<T>, name: &str) -> Result<Tensor<T>> {
    apply_unary(x, name.parse()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&eye, &a).unwrap().data(), a.data());
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_dimension_error_names_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![4, 4]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 4]"), "{err}");
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let mut k = vec![0.0; 8];
        k[6] = 1.0;
        k[7] = 1.0;
        let kernel = t(&[4, 2], &k);
        let bias = Tensor::zeros(vec![2]);
        let y = conv1d_causal_depthwise(&x, &kernel, &bias).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_hand_case() {
        let x = t(&[3, 1], &[1., 2., 3.]);
        let kernel = t(&[2, 1], &[1., 1.]);
        let y = conv1d_causal_depthwise(&x, &kernel, &Tensor::zeros(vec![1])).unwrap();
        assert_eq!(y.data(), &[1., 3., 5.]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::<f32>::zeros(vec![4, 3]);
        let kernel = Tensor::<f32>::zeros(vec![2, 2]);
        assert!(conv1d_causal_depthwise(&x, &kernel, &Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let x = t(&[2], &[1., 3.]);
        let y = layer_norm(&x, &t(&[2], &[1., 1.]), &Tensor::zeros(vec![2]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

        let c = t(&[3], &[4., 4., 4.]);
        let y = layer_norm(&c, &t(&[3], &[1., 1., 1.]), &Tensor::zeros(vec![3]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let beta = t(&[2], &[0.3, -0.7]);
        let y = layer_norm(&x, &Tensor::zeros(vec![2]), &beta, 1e-5).unwrap();
        assert_eq!(y.data(), beta.data());

        assert!(layer_norm(&x, &Tensor::zeros(vec![3]), &beta, 1e-5).is_err());
    }

    #[test]
    fn softmax_cases() {
        let y = softmax(&t(&[2], &[0., 0.])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax(&t(&[2], &[1000., 1000.])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax(&t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()])).unwrap();
        for (got, want) in y.data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn unary_table() {
        let z = t(&[1], &[0.]);
        assert_eq!(apply_unary(&z, Unary::Silu).unwrap().data(), &[0.]);
        let sp = apply_unary(&z, Unary::Softplus).unwrap().data()[0];
        assert!((sp - 2f64.ln()).abs() < 1e-12);
        assert_eq!(apply_unary_named(&z, "exp").unwrap().data(), &[1.]);
        assert!(matches!(
            apply_unary_named(&z, "tanh"),
            Err(VimError::UnknownUnary(_))
        ));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = t(&[1], &[1000.]);
        let err = apply_unary(&x, Unary::Exp).unwrap_err();
        assert!(matches!(err, VimError::NonFinite { op: "exp", .. }));
    }

    fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f32>> {
        proptest::collection::vec(-1.0f32..1.0, rows * cols)
            .prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in mat(4, 5), b in mat(5, 3), c in mat(3, 6)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) <= 1e-4);
        }

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let x = Tensor::new(vec![v.len()], v.clone()).unwrap();
            let y = softmax(&x).unwrap();
            prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(y.data().iter().all(|&p| p >= 0.0));
            let xs = Tensor::new(vec![v.len()], v.iter().map(|a| a + shift).collect()).unwrap();
            prop_assert!(softmax(&xs).unwrap().max_abs_diff(&y) <= 1e-6);
        }

        #[test]
        fn layer_norm_standardizes(v in proptest::collection::vec(-10.0f64..10.0, 4..32)) {
            let d = v.len();
            let mean = v.iter().sum::<f64>() / d as f64;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assume!(var > 1e-2);
            let x = Tensor::new(vec![d], v).unwrap();
            let y = layer_norm(&x, &Tensor::full(vec![d], 1.0), &Tensor::zeros(vec![d]), 1e-9).unwrap();
            let m = y.data().iter().sum::<f64>() / d as f64;
            let pv = y.data().iter().map(|a| (a - m).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(m.abs() <= 1e-5);
            prop_assert!((pv - 1.0).abs() <= 1e-3);
        }
    }
}
