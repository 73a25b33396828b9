//! Full, window and linear attention, the squeeze dynamic convolution, and
//! an exact FLOP model for each.
//!
//! The free functions here are single-sample and allocation-only; the same
//! slice routines back the recorded ops on [`GradTape`], so a model forward
//! and a direct kernel call agree bit for bit.

mod flops;
pub(crate) mod kernels;
mod squeeze;

pub use flops::{attention_flops, FlopCount, FlopKind};
pub use squeeze::{default_hidden, jetvit_linear_block, squeeze_dynamic_conv, squeeze_dynamic_conv_tape, SqueezeConvParams};

use crate::autograd::{GradTape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Default stabilizer for the linear-attention denominator.
pub const LINEAR_EPS: f64 = 1e-6;

/// Query/key/value matrices for one sample laid out on a token grid.
#[derive(Clone, Debug)]
pub struct AttentionInputs<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub heads: usize,
    /// `(rows, cols)` of the token grid; `rows * cols == N`.
    pub grid: (usize, usize),
}

impl<T: Element> AttentionInputs<T> {
    pub fn new(q: Tensor<T>, k: Tensor<T>, v: Tensor<T>, heads: usize, grid: (usize, usize)) -> Result<Self> {
        let inp = Self { q, k, v, heads, grid };
        inp.validate()?;
        Ok(inp)
    }

    /// Square grid of side `sqrt(N)` when N is a perfect square, else `1×N`.
    pub fn with_default_grid(q: Tensor<T>, k: Tensor<T>, v: Tensor<T>, heads: usize) -> Result<Self> {
        let n = q.dims2()?.0;
        let side = (n as f64).sqrt().round() as usize;
        let grid = if side * side == n { (side, side) } else { (1, n) };
        Self::new(q, k, v, heads, grid)
    }

    pub fn tokens(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (n, dm) = self.q.dims2()?;
        if n == 0 {
            return Err(dim_err!("attention needs at least one token"));
        }
        if self.k.shape() != [n, dm] || self.v.shape() != [n, dm] {
            return Err(dim_err!(
                "Q {:?}, K {:?}, V {:?} must share a shape",
                self.q.shape(),
                self.k.shape(),
                self.v.shape()
            ));
        }
        if self.heads == 0 || dm % self.heads != 0 {
            return Err(Error::Config(format!("d_model {dm} not divisible by {} heads", self.heads)));
        }
        if self.grid.0 * self.grid.1 != n {
            return Err(dim_err!("grid {:?} does not hold {n} tokens", self.grid));
        }
        for (name, t) in [("Q", &self.q), ("K", &self.k), ("V", &self.v)] {
            t.ensure_finite(name)?;
        }
        Ok(())
    }
}

/// Per-head `softmax(QKᵀ/√d)·V`, heads concatenated.
pub fn full_attention<T: Element>(inp: &AttentionInputs<T>) -> Result<Tensor<T>> {
    inp.validate()?;
    let (n, dm) = (inp.tokens(), inp.d_model());
    let mut out = vec![T::zero(); n * dm];
    kernels::softmax_attention_fwd(inp.q.data(), inp.k.data(), inp.v.data(), n, dm, inp.heads, &mut out, None);
    Tensor::new(vec![n, dm], out)
}

/// Full attention computed independently inside each non-overlapping
/// `w×w` window of the token grid.
pub fn window_attention<T: Element>(inp: &AttentionInputs<T>, w: usize) -> Result<Tensor<T>> {
    inp.validate()?;
    let (hp, wp) = inp.grid;
    if w == 0 || hp % w != 0 || wp % w != 0 {
        return Err(Error::Config(format!("window {w} does not tile grid {hp}×{wp}")));
    }
    let (n, dm) = (inp.tokens(), inp.d_model());
    let mut out = vec![T::zero(); n * dm];
    kernels::window_attention_fwd(inp.q.data(), inp.k.data(), inp.v.data(), inp.grid, w, dm, inp.heads, &mut out, None);
    Tensor::new(vec![n, dm], out)
}

/// ReLU-kernel linear attention with a stabilized normalizer:
/// `O_i = φ(Q_i)ᵀZ / (φ(Q_i)ᵀS + eps)`, `Z = Σ φ(K_j)V_jᵀ`, `S = Σ φ(K_j)`.
pub fn relu_linear_attention<T: Element>(inp: &AttentionInputs<T>, eps: T) -> Result<Tensor<T>> {
    inp.validate()?;
    if !(eps > T::zero()) {
        return Err(Error::Config("linear attention eps must be positive".into()));
    }
    let pq = inp.q.map(|x| x.max(T::zero()));
    let pk = inp.k.map(|x| x.max(T::zero()));
    let (n, dm) = (inp.tokens(), inp.d_model());
    let mut out = vec![T::zero(); n * dm];
    kernels::kernelized_attention_fwd(pq.data(), pk.data(), inp.v.data(), n, dm, inp.heads, eps, &mut out);
    Tensor::new(vec![n, dm], out)
}

/// Focusing exponent for the sharpened kernel variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocusingParams {
    pub p: f64,
}

impl Default for FocusingParams {
    fn default() -> Self {
        Self { p: 3.0 }
    }
}

/// Row-wise `(‖x‖ / ‖x∘p‖) · x∘p` on rectified (non-negative) rows.
pub fn focusing_kernel<T: Element>(x: &Tensor<T>, fp: FocusingParams) -> Result<Tensor<T>> {
    if !(fp.p > 0.0) || !fp.p.is_finite() {
        return Err(Error::Config(format!("focusing factor must be finite and positive, got {}", fp.p)));
    }
    x.ensure_finite("focusing input")?;
    if x.data().iter().any(|&v| v < T::zero()) {
        return Err(Error::Contract("focusing kernel expects rectified input".into()));
    }
    let seg = *x.shape().last().expect("rank >= 1");
    let mut out = vec![T::zero(); x.len()];
    kernels::focus_fwd(x.data(), seg, T::from_f64(fp.p), &mut out);
    Tensor::new(x.shape().to_vec(), out)
}

/// Attention kind of one transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum AttentionKind {
    Linear,
    Window,
    Full,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [AttentionKind::Linear, AttentionKind::Window, AttentionKind::Full];

    pub fn code(self) -> char {
        match self {
            AttentionKind::Linear => 'L',
            AttentionKind::Window => 'W',
            AttentionKind::Full => 'F',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        match c {
            'L' => Some(AttentionKind::Linear),
            'W' => Some(AttentionKind::Window),
            'F' => Some(AttentionKind::Full),
            _ => None,
        }
    }

    /// Position in the efficiency hierarchy; higher is more expensive.
    pub fn cost_rank(self) -> u8 {
        match self {
            AttentionKind::Linear => 0,
            AttentionKind::Window => 1,
            AttentionKind::Full => 2,
        }
    }
}

/// Variant of the linear-attention feature map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FeatureMap {
    Relu,
    /// ReLU followed by the per-head focusing transform.
    ReluFocus(FocusingParams),
}

/// Records the attention mixing step of one layer on a tape. `q`, `k`, `v`
/// are `[batch·N × d_model]`; the squeeze convolution is added only for
/// linear layers.
#[allow(clippy::too_many_arguments)]
pub fn attention_tape<T: Element>(
    tape: &mut GradTape<T>,
    kind: AttentionKind,
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    heads: usize,
    grid: (usize, usize),
    window: usize,
    linear: Option<(&SqueezeConvParams<Var>, FeatureMap)>,
) -> Result<Var> {
    match kind {
        AttentionKind::Full => tape.softmax_attention(q, k, v, batch, heads),
        AttentionKind::Window => tape.window_attention(q, k, v, batch, heads, grid, window),
        AttentionKind::Linear => {
            let (params, map) =
                linear.ok_or_else(|| Error::State("linear layer has no squeeze-conv parameters".into()))?;
            let (mut pq, mut pk) = (tape.relu(q), tape.relu(k));
            if let FeatureMap::ReluFocus(fp) = map {
                let dh = tape.value(q).shape()[1] / heads;
                pq = tape.focus(pq, dh, T::from_f64(fp.p))?;
                pk = tape.focus(pk, dh, T::from_f64(fp.p))?;
            }
            let attn = tape.kernelized_attention(pq, pk, v, batch, heads, T::from_f64(LINEAR_EPS))?;
            let conv = squeeze_dynamic_conv_tape(tape, v, batch, grid, params)?;
            tape.add(attn, conv)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::rng::Rng;

    fn inputs<T: Element>(rng: &mut Rng, n: usize, dm: usize, heads: usize, grid: (usize, usize)) -> AttentionInputs<T> {
        AttentionInputs::new(
            rng.normal_tensor(&[n, dm], 1.0),
            rng.normal_tensor(&[n, dm], 1.0),
            rng.normal_tensor(&[n, dm], 1.0),
            heads,
            grid,
        )
        .unwrap()
    }

    #[test]
    fn full_single_token_returns_v() {
        let mut rng = Rng::new(1);
        let inp: AttentionInputs<f64> = inputs(&mut rng, 1, 8, 2, (1, 1));
        let o = full_attention(&inp).unwrap();
        assert!(o.max_abs_diff(&inp.v).unwrap() < 1e-15);
    }

    #[test]
    fn full_zero_queries_average_values() {
        let mut rng = Rng::new(2);
        let mut inp: AttentionInputs<f64> = inputs(&mut rng, 6, 4, 2, (2, 3));
        inp.q = Tensor::zeros(&[6, 4]);
        let o = full_attention(&inp).unwrap();
        for c in 0..4 {
            let mean: f64 = (0..6).map(|r| inp.v.data()[r * 4 + c]).sum::<f64>() / 6.0;
            for r in 0..6 {
                assert!((o.data()[r * 4 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_matches_dense_oracle_f32() {
        let mut rng = Rng::new(3);
        let inp: AttentionInputs<f32> = inputs(&mut rng, 8, 16, 2, (2, 4));
        let o = full_attention(&inp).unwrap();
        let r = oracle::dense_attention(&inp.q.cast(), &inp.k.cast(), &inp.v.cast(), 2, None);
        assert!(o.cast::<f64>().max_abs_diff(&r).unwrap() < 1e-6);
    }

    #[test]
    fn full_rejects_indivisible_heads() {
        let mut rng = Rng::new(3);
        let q: Tensor<f32> = rng.normal_tensor(&[4, 6], 1.0);
        let r = AttentionInputs::new(q.clone(), q.clone(), q, 4, (2, 2));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn window_degenerate_cases() {
        let mut rng = Rng::new(4);
        let inp: AttentionInputs<f64> = inputs(&mut rng, 16, 8, 2, (4, 4));
        let whole = window_attention(&inp, 4).unwrap();
        assert!(whole.max_abs_diff(&full_attention(&inp).unwrap()).unwrap() < 1e-12);
        let single = window_attention(&inp, 1).unwrap();
        assert!(single.max_abs_diff(&inp.v).unwrap() < 1e-12);
    }

    #[test]
    fn window_matches_masked_dense() {
        let mut rng = Rng::new(5);
        let inp: AttentionInputs<f64> = inputs(&mut rng, 16, 8, 2, (4, 4));
        let o = window_attention(&inp, 2).unwrap();
        let mask = oracle::window_mask(4, 4, 2);
        let r = oracle::dense_attention(&inp.q, &inp.k, &inp.v, 2, Some(&mask));
        assert!(o.max_abs_diff(&r).unwrap() < 1e-6);
    }

    #[test]
    fn window_rejects_non_dividing_size() {
        let mut rng = Rng::new(5);
        let inp: AttentionInputs<f64> = inputs(&mut rng, 16, 8, 2, (4, 4));
        assert!(matches!(window_attention(&inp, 3), Err(Error::Config(_))));
    }

    #[test]
    fn linear_single_token_is_self_normalizing() {
        let q = Tensor::new(vec![1, 4], vec![2.0f64, 1.0, 3.0, 0.5]).unwrap();
        let v = Tensor::new(vec![1, 4], vec![0.3f64, -1.0, 4.0, 2.0]).unwrap();
        let inp = AttentionInputs::new(q.clone(), q, v.clone(), 1, (1, 1)).unwrap();
        let o = relu_linear_attention(&inp, 1e-6).unwrap();
        assert!(o.max_abs_diff(&v).unwrap() < 1e-6);
    }

    #[test]
    fn linear_rank_one_case() {
        let mut rng = Rng::new(6);
        let n = 5;
        let krow: Vec<f64> = (0..4).map(|_| rng.normal().abs() + 0.1).collect();
        let vrow: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let k = Tensor::from_fn(&[n, 4], |i| krow[i % 4]);
        let v = Tensor::from_fn(&[n, 4], |i| vrow[i % 4]);
        let q: Tensor<f64> = rng.normal_tensor(&[n, 4], 1.0).map(|x: f64| x.abs() + 0.1);
        let inp = AttentionInputs::new(q, k, v, 2, (1, n)).unwrap();
        let o = relu_linear_attention(&inp, 1e-6).unwrap();
        for row in o.data().chunks(4) {
            for (a, b) in row.iter().zip(&vrow) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn linear_matches_quadratic_oracle() {
        let mut rng = Rng::new(7);
        let inp: AttentionInputs<f64> = inputs(&mut rng, 64, 32, 1, (8, 8));
        let o = relu_linear_attention(&inp, 1e-6).unwrap();
        let r = oracle::quadratic_linear_attention(&inp.q, &inp.k, &inp.v, 1, 1e-6);
        assert!(o.max_abs_diff(&r).unwrap() < 1e-10);
    }

    #[test]
    fn focusing_examples() {
        let mut rng = Rng::new(8);
        let x: Tensor<f64> = rng.normal_tensor(&[3, 8], 1.0).map(|v: f64| v.max(0.0));
        let y = focusing_kernel(&x, FocusingParams { p: 1.0 }).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-12);

        let hot = Tensor::new(vec![1, 4], vec![0.0f64, 2.5, 0.0, 0.0]).unwrap();
        for p in [0.5, 2.0, 3.0, 7.0] {
            let y = focusing_kernel(&hot, FocusingParams { p }).unwrap();
            assert!(y.max_abs_diff(&hot).unwrap() < 1e-12);
        }

        let y = focusing_kernel(&x, FocusingParams { p: 3.0 }).unwrap();
        for (xr, yr) in x.data().chunks(8).zip(y.data().chunks(8)) {
            let nx = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = yr.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((nx - ny).abs() < 1e-6);
        }

        assert!(matches!(focusing_kernel(&x, FocusingParams { p: 0.0 }), Err(Error::Config(_))));
        assert!(matches!(focusing_kernel(&x, FocusingParams { p: -1.0 }), Err(Error::Config(_))));
    }

    #[test]
    fn zero_focus_row_passes_through() {
        let z = Tensor::<f64>::zeros(&[2, 3]);
        assert_eq!(focusing_kernel(&z, FocusingParams::default()).unwrap(), z);
    }
}
