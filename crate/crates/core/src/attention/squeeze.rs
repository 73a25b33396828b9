use super::{relu_linear_attention, AttentionInputs};
use crate::autograd::{GradTape, Var};
use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::ops::Activation;
use crate::tensor::{Element, Tensor};

/// Kernel generator of the squeeze dynamic convolution: a two-layer SiLU
/// MLP mapping the token-mean of V to one `k×k` kernel per channel.
///
/// Generic over the parameter handle so the same layout describes stored
/// tensors and their tape bindings.
#[derive(Clone, Debug, PartialEq)]
pub struct SqueezeConvParams<P> {
    /// `[hidden × d_model]`
    pub w1: P,
    /// `[hidden]`
    pub b1: P,
    /// `[d_model·k² × hidden]`
    pub w2: P,
    /// `[d_model·k²]`
    pub b2: P,
    pub kernel: usize,
    pub hidden: usize,
}

/// Default generator width for a model width.
pub fn default_hidden(d_model: usize) -> usize {
    (d_model / 4).max(8)
}

impl<P> SqueezeConvParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> SqueezeConvParams<Q> {
        SqueezeConvParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
            kernel: self.kernel,
            hidden: self.hidden,
        }
    }

    pub fn named(&self) -> [(&'static str, &P); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut P); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

fn delta_bias<T: Element>(d_model: usize, k: usize) -> Tensor<T> {
    let kk = k * k;
    let center = kk / 2;
    Tensor::from_fn(&[d_model * kk], |i| if i % kk == center { T::one() } else { T::zero() })
}

impl<T: Element> SqueezeConvParams<Tensor<T>> {
    /// Starts as an identity convolution: W1, b1 ~ N(0, 0.02²), W2 = 0 and
    /// b2 = the delta kernel for every channel.
    pub fn init(d_model: usize, kernel: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("squeeze-conv kernel size must be odd, got {kernel}")));
        }
        Ok(Self {
            w1: rng.normal_tensor(&[hidden, d_model], 0.02),
            b1: rng.normal_tensor(&[hidden], 0.02),
            w2: Tensor::zeros(&[d_model * kernel * kernel, hidden]),
            b2: delta_bias(d_model, kernel),
            kernel,
            hidden,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        let (k, h) = (self.kernel, self.hidden);
        if k % 2 == 0 {
            return Err(Error::Config(format!("squeeze-conv kernel size must be odd, got {k}")));
        }
        let kk = d_model * k * k;
        let ok = self.w1.shape() == [h, d_model]
            && self.b1.shape() == [h]
            && self.w2.shape() == [kk, h]
            && self.b2.shape() == [kk];
        if !ok {
            return Err(dim_err!(
                "squeeze-conv params do not match d_model {d_model}, k {k}, hidden {h}"
            ));
        }
        Ok(())
    }

    /// Kernels `[d_model × k²]` generated from the token-mean of `v`.
    pub fn generate_kernels(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = GradTape::new();
        let vv = tape.constant(v.clone());
        let bound = self.map(|p| tape.constant(p.clone()));
        let ker = generate_tape(&mut tape, vv, 1, &bound)?;
        let d = self.d_model();
        tape.value(ker).reshape(&[d, self.kernel * self.kernel])
    }
}

fn generate_tape<T: Element>(tape: &mut GradTape<T>, v: Var, batch: usize, p: &SqueezeConvParams<Var>) -> Result<Var> {
    let pool = tape.mean_rows(v, batch)?;
    let h = tape.matmul_t(pool, false, p.w1, true)?;
    let h = tape.add_tiled(h, p.b1)?;
    let h = tape.activation(h, Activation::Silu);
    let ker = tape.matmul_t(h, false, p.w2, true)?;
    tape.add_tiled(ker, p.b2)
}

/// Records the squeeze dynamic convolution of `v` (`[batch·N × d_model]`).
pub fn squeeze_dynamic_conv_tape<T: Element>(
    tape: &mut GradTape<T>,
    v: Var,
    batch: usize,
    grid: (usize, usize),
    p: &SqueezeConvParams<Var>,
) -> Result<Var> {
    let ker = generate_tape(tape, v, batch, p)?;
    tape.dwconv(v, ker, batch, grid, p.kernel)
}

/// Depthwise convolution of the `grid`-shaped value map with kernels
/// generated from the mean of `v`, zero padding, stride 1.
pub fn squeeze_dynamic_conv<T: Element>(
    v: &Tensor<T>,
    grid: (usize, usize),
    params: &SqueezeConvParams<Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, d) = v.dims2()?;
    if grid.0 * grid.1 != n {
        return Err(dim_err!("grid {:?} does not hold {n} tokens", grid));
    }
    params.validate(d)?;
    v.ensure_finite("V")?;
    let mut tape = GradTape::new();
    let vv = tape.constant(v.clone());
    let bound = params.map(|p| tape.constant(p.clone()));
    let out = squeeze_dynamic_conv_tape(&mut tape, vv, 1, grid, &bound)?;
    Ok(tape.value(out).clone())
}

/// Linear attention plus squeeze dynamic convolution on the value tensor.
pub fn jetvit_linear_block<T: Element>(
    inp: &AttentionInputs<T>,
    params: &SqueezeConvParams<Tensor<T>>,
    eps: T,
) -> Result<Tensor<T>> {
    let attn = relu_linear_attention(inp, eps)?;
    let conv = squeeze_dynamic_conv(&inp.v, inp.grid, params)?;
    attn.zip_map(&conv, |a, b| a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn zero_generator(d: usize, k: usize, hidden: usize, rng: &mut Rng) -> SqueezeConvParams<Tensor<f64>> {
        let mut p = SqueezeConvParams::init(d, k, hidden, rng).unwrap();
        p.w2 = Tensor::zeros(p.w2.shape());
        p.b2 = Tensor::zeros(p.b2.shape());
        p
    }

    #[test]
    fn delta_generator_is_identity() {
        let mut rng = Rng::new(1);
        let p: SqueezeConvParams<Tensor<f64>> = SqueezeConvParams::init(8, 3, 8, &mut rng).unwrap();
        let v: Tensor<f64> = rng.normal_tensor(&[16, 8], 1.0);
        let out = squeeze_dynamic_conv(&v, (4, 4), &p).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn single_token_uses_kernel_center() {
        let mut rng = Rng::new(2);
        let mut p: SqueezeConvParams<Tensor<f64>> = SqueezeConvParams::init(4, 3, 8, &mut rng).unwrap();
        p.w2 = rng.normal_tensor(p.w2.shape(), 0.5);
        let v: Tensor<f64> = rng.normal_tensor(&[1, 4], 1.0);
        let ker = p.generate_kernels(&v).unwrap();
        let out = squeeze_dynamic_conv(&v, (1, 1), &p).unwrap();
        for c in 0..4 {
            let expected = ker.data()[c * 9 + 4] * v.data()[c];
            assert!((out.data()[c] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let mut rng = Rng::new(3);
        let mut p: SqueezeConvParams<Tensor<f64>> = SqueezeConvParams::init(6, 3, 8, &mut rng).unwrap();
        p.w1 = rng.normal_tensor(p.w1.shape(), 0.5);
        p.w2 = rng.normal_tensor(p.w2.shape(), 0.5);
        let v: Tensor<f64> = rng.normal_tensor(&[16, 6], 1.0);
        let out = squeeze_dynamic_conv(&v, (4, 4), &p).unwrap();
        let ker = oracle::squeeze_kernels(&v, &p.w1, &p.b1, &p.w2, &p.b2);
        let expect = oracle::sliding_dwconv(&v, (4, 4), &ker, 3);
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-6);
    }

    #[test]
    fn constant_generator_equals_static_conv() {
        let mut rng = Rng::new(4);
        let mut p = zero_generator(4, 3, 8, &mut rng);
        let stat: Tensor<f64> = rng.normal_tensor(&[4 * 9], 1.0);
        p.b2 = stat.clone();
        for _ in 0..3 {
            let v: Tensor<f64> = rng.normal_tensor(&[12, 4], 1.0);
            let out = squeeze_dynamic_conv(&v, (3, 4), &p).unwrap();
            let expect = oracle::sliding_dwconv(&v, (3, 4), &stat.reshape(&[4, 9]).unwrap(), 3);
            assert!(out.max_abs_diff(&expect).unwrap() < 1e-12);
        }
    }

    #[test]
    fn grid_mismatch_is_dimension_error() {
        let mut rng = Rng::new(5);
        let p: SqueezeConvParams<Tensor<f64>> = SqueezeConvParams::init(4, 3, 8, &mut rng).unwrap();
        let v: Tensor<f64> = rng.normal_tensor(&[10, 4], 1.0);
        assert!(matches!(squeeze_dynamic_conv(&v, (3, 3), &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn even_kernel_rejected() {
        let mut rng = Rng::new(5);
        assert!(matches!(
            SqueezeConvParams::<Tensor<f32>>::init(4, 2, 8, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn block_examples() {
        let mut rng = Rng::new(6);
        let q: Tensor<f64> = rng.normal_tensor(&[16, 8], 1.0);
        let k: Tensor<f64> = rng.normal_tensor(&[16, 8], 1.0);
        let v: Tensor<f64> = rng.normal_tensor(&[16, 8], 1.0);
        let inp = AttentionInputs::new(q, k, v, 2, (4, 4)).unwrap();

        let zero = zero_generator(8, 3, 8, &mut rng);
        let out = jetvit_linear_block(&inp, &zero, 1e-6).unwrap();
        assert_eq!(out, relu_linear_attention(&inp, 1e-6).unwrap());

        let mut p: SqueezeConvParams<Tensor<f64>> = SqueezeConvParams::init(8, 3, 8, &mut rng).unwrap();
        p.w2 = rng.normal_tensor(p.w2.shape(), 0.3);
        let out = jetvit_linear_block(&inp, &p, 1e-6).unwrap();
        let lin = oracle::quadratic_linear_attention(&inp.q, &inp.k, &inp.v, 2, 1e-6);
        let ker = oracle::squeeze_kernels(&inp.v, &p.w1, &p.b1, &p.w2, &p.b2);
        let conv = oracle::sliding_dwconv(&inp.v, (4, 4), &ker, 3);
        let expect = lin.zip_map(&conv, |a, b| a + b).unwrap();
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-6);
    }

    #[test]
    fn single_token_block_with_delta_generator() {
        let q = Tensor::new(vec![1, 4], vec![1.0f64, 2.0, 0.5, 1.5]).unwrap();
        let v = Tensor::new(vec![1, 4], vec![0.7f64, -0.2, 1.1, 3.0]).unwrap();
        let inp = AttentionInputs::new(q.clone(), q, v.clone(), 2, (1, 1)).unwrap();
        let mut rng = Rng::new(7);
        let p = SqueezeConvParams::init(4, 3, 8, &mut rng).unwrap();
        let out = jetvit_linear_block(&inp, &p, 1e-6).unwrap();
        let attn = relu_linear_attention(&inp, 1e-6).unwrap();
        for i in 0..4 {
            assert!((out.data()[i] - (attn.data()[i] + v.data()[i])).abs() < 1e-15);
            assert!((attn.data()[i] - v.data()[i]).abs() < 1e-5);
        }
    }
}
