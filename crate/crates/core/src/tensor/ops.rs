//! Pure tensor primitives. Every function here allocates its result and
//! leaves its inputs untouched.

use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{dim_err, Error, Result};

/// A strided read-only matrix view into a slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef<'a, T> {
    data: &'a [T],
    offset: usize,
    pub rows: usize,
    pub cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            let last = offset + (rows - 1) * rs + (cols - 1) * cs;
            assert!(last < data.len(), "matrix view out of bounds");
        }
        Self { data, offset, rows, cols, rs, cs }
    }

    /// Contiguous row-major `rows×cols` matrix.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::new(data, 0, rows, cols, cols, 1)
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

/// A strided mutable matrix view.
#[derive(Debug)]
pub(crate) struct MatMut<'a, T> {
    data: &'a mut [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            let last = offset + (rows - 1) * rs + (cols - 1) * cs;
            assert!(last < data.len(), "matrix view out of bounds");
        }
        Self { data, offset, rows, cols, rs, cs }
    }

    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self::new(data, 0, rows, cols, cols, 1)
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm<T: Element>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output extent");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked at construction and `c`
    // is an exclusive borrow, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// `op(a) · op(b)` on dense matrices, with optional transposes.
pub(crate) fn matmul_dense<T: Element>(
    a: &[T],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[T],
    (br, bc): (usize, usize),
    tb: bool,
) -> Result<(Vec<T>, usize, usize)> {
    let mut av = MatRef::dense(a, ar, ac);
    let mut bv = MatRef::dense(b, br, bc);
    if ta {
        av = av.t();
    }
    if tb {
        bv = bv.t();
    }
    if av.cols != bv.rows {
        return Err(dim_err!(
            "matmul inner extents differ: {}×{} · {}×{}",
            av.rows,
            av.cols,
            bv.rows,
            bv.cols
        ));
    }
    let (m, n) = (av.rows, bv.cols);
    let mut out = vec![T::zero(); m * n];
    gemm(T::one(), av, bv, T::zero(), MatMut::dense(&mut out, m, n));
    Ok((out, m, n))
}

/// Matrix product of `[m×k]` and `[k×n]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (out, m, n) = matmul_dense(a.data(), a.dims2()?, false, b.data(), b.dims2()?, false)?;
    Tensor::new(vec![m, n], out)
}

pub(crate) fn softmax_row_inplace<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x = *x * inv;
    }
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, cols) = x.dims2()?;
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let mut out = x.to_vec();
    if cols > 0 {
        for row in out.chunks_mut(cols) {
            softmax_row_inplace(row);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
    /// tanh approximation
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Silu => x / (T::one() + (-x).exp()),
            Activation::Gelu => {
                let c = T::from_f64(GELU_C);
                let a = T::from_f64(GELU_A);
                let half = T::from_f64(0.5);
                half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
            }
        }
    }

    /// Derivative with respect to the input.
    pub fn derivative<T: Element>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Gelu => {
                let c = T::from_f64(GELU_C);
                let a = T::from_f64(GELU_A);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let t = (c * (x + a * x * x * x)).tanh();
                half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
            }
        }
    }
}

/// Element-wise activation.
pub fn activation<T: Element>(x: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    x.ensure_finite("activation input")?;
    Ok(x.map(|v| kind.apply(v)))
}

/// Normalizes one row in place, returning `1/sqrt(var + eps)`.
pub(crate) fn normalize_row<T: Element>(row: &[T], eps: T, out: &mut [T]) -> T {
    let n = T::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + eps).sqrt();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - mean) * rstd;
    }
    rstd
}

/// Row-wise layer normalization with affine parameters of length `d`.
pub fn layer_norm<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (_, d) = x.dims2()?;
    if gamma.len() != d || beta.len() != d {
        return Err(dim_err!(
            "layer_norm width {d} but gamma/beta have {}/{}",
            gamma.len(),
            beta.len()
        ));
    }
    let mut out = vec![T::zero(); x.len()];
    if d > 0 {
        for (row, o) in x.data().chunks(d).zip(out.chunks_mut(d)) {
            normalize_row(row, eps, o);
            for ((v, &g), &b) in o.iter_mut().zip(gamma.data()).zip(beta.data()) {
                *v = *v * g + b;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|l| a.data()[i * k + l] * b.data()[l * n + j]).sum()
        })
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = Rng::new(1);
        let a: Tensor<f64> = rng.normal_tensor(&[3, 3], 1.0);
        assert_eq!(matmul(&Tensor::identity(3), &a).unwrap(), a);
        let c = matmul(&Tensor::<f64>::full(&[1, 1], 2.0), &Tensor::full(&[1, 1], 3.0)).unwrap();
        assert_eq!(c.data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a: Tensor<f64> = rng.normal_tensor(&[4, 5], 1.0);
        let b: Tensor<f64> = rng.normal_tensor(&[5, 3], 1.0);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&naive(&a, &b)).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_associativity_f32() {
        let mut rng = Rng::new(5);
        let a: Tensor<f32> = rng.uniform_tensor(&[16, 12], -1.0, 1.0);
        let b: Tensor<f32> = rng.uniform_tensor(&[12, 9], -1.0, 1.0);
        let c: Tensor<f32> = rng.uniform_tensor(&[9, 7], -1.0, 1.0);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        assert!(left.max_abs_diff(&right).unwrap() < 1e-4);
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::new(vec![2, 2], vec![0.0, 0.0, 2f64.ln(), 0.0]).unwrap();
        let y = softmax_rows(&x).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-15);
        assert!((y.data()[2] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[3] - 1.0 / 3.0).abs() < 1e-15);

        let mut rng = Rng::new(3);
        let x: Tensor<f32> = rng.normal_tensor(&[8, 8], 3.0);
        let y = softmax_rows(&x).unwrap();
        for row in y.data().chunks(8) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_rows(&x), Err(Error::Numeric(_))));
    }

    #[test]
    fn activation_examples() {
        let x = Tensor::new(vec![2], vec![-1.0f64, 2.0]).unwrap();
        assert_eq!(activation(&x, Activation::Relu).unwrap().data(), &[0.0, 2.0]);
        assert_eq!(Activation::Silu.apply(0.0f64), 0.0);
        let mut rng = Rng::new(8);
        for _ in 0..100 {
            let v = rng.normal() * 4.0;
            let sig = 1.0 / (1.0 + (-v).exp());
            assert!((Activation::Silu.apply(v) - v * sig).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor::<f64>::full(&[2, 4], 3.5);
        let ones = Tensor::full(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let y = layer_norm(&x, &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut rng = Rng::new(4);
        let x: Tensor<f64> = rng.normal_tensor(&[3, 16], 2.0);
        let beta: Tensor<f64> = rng.normal_tensor(&[16], 1.0);
        let y = layer_norm(&x, &Tensor::zeros(&[16]), &beta, 1e-5).unwrap();
        for row in y.data().chunks(16) {
            assert_eq!(row, beta.data());
        }

        let y = layer_norm(&x, &ones_n(16), &Tensor::zeros(&[16]), 1e-12).unwrap();
        for row in y.data().chunks(16) {
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }

        assert!(matches!(
            layer_norm(&x, &ones, &zeros, 1e-5),
            Err(Error::Dimension(_))
        ));
    }

    fn ones_n(n: usize) -> Tensor<f64> {
        Tensor::full(&[n], 1.0)
    }
}
