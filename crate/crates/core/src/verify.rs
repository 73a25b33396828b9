//! Self-checks of every kernel and search routine against the plain-loop
//! references in [`crate::oracle`]. The kernel checks take the kernel as a
//! closure, so a deliberately broken implementation can be run through the
//! same check.

use serde::Serialize;

use crate::attention::{
    attention_flops, attention_tape, full_attention, relu_linear_attention, squeeze_dynamic_conv,
    squeeze_dynamic_conv_tape, window_attention, AttentionInputs, AttentionKind, FeatureMap, FlopKind,
    SqueezeConvParams, LINEAR_EPS,
};
use crate::autograd::{grad_check, GradTape, Var};
use crate::distill::distill_loss;
use crate::error::Result;
use crate::oracle;
use crate::rng::Rng;
use crate::search::{beam_search_stage1, beam_search_stage2, exhaustive_search, FnEvaluator, SearchConfig, TableEvaluator};
use crate::task::{generate_sample, seg_metrics, TaskSpec};
use crate::tensor::{Element, Tensor};
use crate::vit::{unfold_patches, ArchDescriptor, InheritMode, MiniViT, ViTConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed error (or the quantity compared).
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn below(name: &str, measured: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed: measured < tolerance, measured, tolerance, detail: detail.into() }
    }

    fn flag(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, measured: passed as u8 as f64, tolerance: 1.0, detail: detail.into() }
    }

    fn failed(name: &str, err: impl std::fmt::Display) -> Self {
        Self { name: name.into(), passed: false, measured: f64::NAN, tolerance: 0.0, detail: format!("error: {err}") }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<40} measured={:.3e} tol={:.1e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.detail
        )
    }
}

fn collect(name: &str, r: Result<CheckResult>) -> CheckResult {
    r.unwrap_or_else(|e| CheckResult::failed(name, e))
}

pub type Kernel<T> = dyn Fn(&AttentionInputs<T>) -> Result<Tensor<T>>;

/// The library's linear attention, as a [`Kernel`].
pub fn library_linear<T: Element>(inp: &AttentionInputs<T>) -> Result<Tensor<T>> {
    relu_linear_attention(inp, T::from_f64(LINEAR_EPS))
}

fn qkv<T: Element>(rng: &mut Rng, n: usize, d: usize, heads: usize, grid: (usize, usize)) -> Result<AttentionInputs<T>> {
    AttentionInputs::new(
        rng.normal_tensor(&[n, d], 1.0),
        rng.normal_tensor(&[n, d], 1.0),
        rng.normal_tensor(&[n, d], 1.0),
        heads,
        grid,
    )
}

/// Reordered linear attention against the materialized `φ(Q)φ(K)ᵀ` form
/// over 10 seeds at N = 64, d = 32: below 1e-10 in f64 and 1e-5 in f32.
pub fn check_linear_reordering(k64: &Kernel<f64>, k32: &Kernel<f32>) -> Vec<CheckResult> {
    let run = || -> Result<(f64, f64)> {
        let (mut e64, mut e32) = (0.0f64, 0.0f64);
        for seed in 0..10 {
            let mut rng = Rng::with_stream(seed, 1);
            let inp: AttentionInputs<f64> = qkv(&mut rng, 64, 32, 4, (8, 8))?;
            let want = oracle::quadratic_linear_attention(&inp.q, &inp.k, &inp.v, 4, LINEAR_EPS);
            e64 = e64.max(k64(&inp)?.max_abs_diff(&want)?);

            let in32 = AttentionInputs::new(inp.q.cast(), inp.k.cast(), inp.v.cast(), 4, (8, 8))?;
            let (q, k, v) = (in32.q.cast(), in32.k.cast(), in32.v.cast());
            let want = oracle::quadratic_linear_attention(&q, &k, &v, 4, LINEAR_EPS);
            e32 = e32.max(k32(&in32)?.cast::<f64>().max_abs_diff(&want)?);
        }
        Ok((e64, e32))
    };
    match run() {
        Ok((e64, e32)) => vec![
            CheckResult::below("linear reordering f64", e64, 1e-10, "10 seeds, N=64, d=32"),
            CheckResult::below("linear reordering f32", e32, 1e-5, "10 seeds, N=64, d=32"),
        ],
        Err(e) => vec![CheckResult::failed("linear reordering f64", &e), CheckResult::failed("linear reordering f32", e)],
    }
}

/// Window attention against masked dense attention on 4×4 and 8×8 grids
/// with w ∈ {1, 2, 4}, plus w = grid against full attention.
pub fn check_window_consistency() -> Vec<CheckResult> {
    let mut out = Vec::new();
    for side in [4usize, 8] {
        let n = side * side;
        let mut rng = Rng::with_stream(side as u64, 2);
        let inp = match qkv::<f64>(&mut rng, n, 8, 2, (side, side)) {
            Ok(i) => i,
            Err(e) => return vec![CheckResult::failed("window consistency", e)],
        };
        for w in [1usize, 2, 4] {
            let name = format!("window {side}x{side} w={w}");
            out.push(collect(&name, (|| {
                let mask = oracle::window_mask(side, side, w);
                let want = oracle::dense_attention(&inp.q, &inp.k, &inp.v, 2, Some(&mask));
                let err = window_attention(&inp, w)?.max_abs_diff(&want)?;
                Ok(CheckResult::below(&name, err, 1e-6, "vs masked dense attention"))
            })()));
        }
        let name = format!("window {side}x{side} w=grid");
        out.push(collect(&name, (|| {
            let err = window_attention(&inp, side)?.max_abs_diff(&full_attention(&inp)?)?;
            Ok(CheckResult::below(&name, err, 1e-6, "vs full attention"))
        })()));
    }
    out
}

fn against_target(tape: &mut GradTape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let target = tape.constant(Rng::new(seed).normal_tensor(&shape, 1.0));
    tape.mse(out, target)
}

fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape, 1.0)
}

/// Linear attention's gradient has near-cancelling terms where a head's
/// φ(q) row has a single positive entry; shifted inputs stay clear of it.
fn rand_qk(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape, 1.0).map(|x: f64| x + 0.8)
}

fn squeeze_tensors(rng: &mut Rng, d: usize, k: usize, hidden: usize) -> Vec<Tensor<f64>> {
    vec![
        rand(rng, &[hidden, d]),
        rand(rng, &[hidden]),
        rng.normal_tensor(&[d * k * k, hidden], 0.5),
        rand(rng, &[d * k * k]),
    ]
}

fn squeeze_vars(v: &[Var], k: usize, hidden: usize) -> SqueezeConvParams<Var> {
    SqueezeConvParams { w1: v[0], b1: v[1], w2: v[2], b2: v[3], kernel: k, hidden }
}

pub const GRAD_H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

fn grad_result<F>(name: &str, f: F, inputs: &[Tensor<f64>]) -> CheckResult
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    match grad_check(f, inputs, GRAD_H) {
        Ok(r) => CheckResult::below(
            name,
            r.max_rel_err,
            GRAD_TOL,
            format!(
                "{} coords, h={GRAD_H:e}, worst input {} index {} (analytic {:.6e}, numeric {:.6e})",
                r.coordinates, r.worst_input, r.worst_index, r.analytic, r.numeric
            ),
        ),
        Err(e) => CheckResult::failed(name, e),
    }
}

/// Central-difference checks of every attention kernel's backward pass at
/// small sizes (feature widths ≤ 8).
pub fn gradient_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut rng = Rng::new(14);
    let (q, k, v) = (rand(&mut rng, &[8, 4]), rand(&mut rng, &[8, 4]), rand(&mut rng, &[8, 4]));
    out.push(grad_result(
        "grad full attention",
        |t, x| {
            let y = t.softmax_attention(x[0], x[1], x[2], 2, 2)?;
            against_target(t, y, 1)
        },
        &[q, k, v],
    ));
    let mut rng = Rng::new(15);
    let (q, k, v) = (rand(&mut rng, &[16, 4]), rand(&mut rng, &[16, 4]), rand(&mut rng, &[16, 4]));
    for w in [1, 2, 4] {
        out.push(grad_result(
            &format!("grad window attention w={w}"),
            |t, x| {
                let y = t.window_attention(x[0], x[1], x[2], 1, 2, (4, 4), w)?;
                against_target(t, y, 2)
            },
            &[q.clone(), k.clone(), v.clone()],
        ));
    }
    let mut rng = Rng::new(16);
    let (q, k, v) = (rand_qk(&mut rng, &[8, 8]), rand_qk(&mut rng, &[8, 8]), rand(&mut rng, &[8, 8]));
    out.push(grad_result(
        "grad relu linear attention",
        |t, x| {
            let (pq, pk) = (t.relu(x[0]), t.relu(x[1]));
            let y = t.kernelized_attention(pq, pk, x[2], 2, 1, LINEAR_EPS)?;
            against_target(t, y, 3)
        },
        &[q, k, v],
    ));
    let mut rng = Rng::new(19);
    let mut inputs = vec![rand(&mut rng, &[2 * 16, 4])];
    inputs.extend(squeeze_tensors(&mut rng, 4, 3, 8));
    out.push(grad_result(
        "grad squeeze dynamic conv",
        |t, x| {
            let p = squeeze_vars(&x[1..], 3, 8);
            let y = squeeze_dynamic_conv_tape(t, x[0], 2, (4, 4), &p)?;
            against_target(t, y, 4)
        },
        &inputs,
    ));
    let mut rng = Rng::new(20);
    let mut inputs = vec![rand_qk(&mut rng, &[16, 8]), rand_qk(&mut rng, &[16, 8]), rand(&mut rng, &[16, 8])];
    inputs.extend(squeeze_tensors(&mut rng, 8, 3, 8));
    out.push(grad_result(
        "grad linear block",
        |t, x| {
            let p = squeeze_vars(&x[3..], 3, 8);
            let y = attention_tape(t, AttentionKind::Linear, x[0], x[1], x[2], 1, 1, (4, 4), 2, Some((&p, FeatureMap::Relu)))?;
            against_target(t, y, 5)
        },
        &inputs,
    ));
    out
}

/// Squeeze convolution against explicit kernel generation plus a sliding
/// depthwise cross-correlation.
pub fn check_squeeze_conv() -> CheckResult {
    collect("squeeze conv", (|| {
        let mut worst = 0.0f64;
        for (seed, (hp, wp), k) in [(0u64, (4, 4), 3), (1, (5, 3), 3), (2, (6, 6), 5)] {
            let mut rng = Rng::with_stream(seed, 3);
            let v: Tensor<f64> = rand(&mut rng, &[hp * wp, 6]);
            let p = SqueezeConvParams::init(6, k, 4, &mut rng)?;
            let ker = oracle::squeeze_kernels(&v, &p.w1, &p.b1, &p.w2, &p.b2);
            let want = oracle::sliding_dwconv(&v, (hp, wp), &ker, k);
            worst = worst.max(squeeze_dynamic_conv(&v, (hp, wp), &p)?.max_abs_diff(&want)?);
        }
        Ok(CheckResult::below("squeeze conv", worst, 1e-12, "3 grids, k ∈ {3, 5}"))
    })())
}

/// FLOP formulas at fixed sizes and their scaling under doubled N.
pub fn check_flops() -> CheckResult {
    collect("flop model", (|| {
        let (n, d, h) = (1024u64, 64u64, 4u64);
        let f = attention_flops(FlopKind::Full, n, d, h)?;
        let w = attention_flops(FlopKind::Window { w: 8 }, n, d, h)?;
        let l = attention_flops(FlopKind::Linear, n, d, h)?;
        let s = attention_flops(FlopKind::LinearSqueeze { k: 3, hidden: 16 }, n, d, h)?;
        let mut ok = f.attention == 4 * n * n * d
            && w.attention == 4 * n * 64 * d
            && l.attention == 4 * n * d * d
            && s.squeeze_conv == 2 * n * d * 9
            && s.generator == 2 * 16 * d * 10
            && [f, w, l, s].iter().all(|c| c.projections == 8 * n * d * d);
        let f2 = attention_flops(FlopKind::Full, 2 * n, d, h)?;
        let l2 = attention_flops(FlopKind::Linear, 2 * n, d, h)?;
        let s2 = attention_flops(FlopKind::LinearSqueeze { k: 3, hidden: 16 }, 2 * n, d, h)?;
        ok &= f2.attention == 4 * f.attention && l2.total() == 2 * l.total();
        ok &= s2.per_token_total() == 2 * s.per_token_total() && s2.generator == s.generator;
        Ok(CheckResult::flag("flop model", ok, "formulas and N-doubling"))
    })())
}

/// An all-Full student inherited from a teacher reproduces its forward pass
/// bit for bit.
pub fn check_inheritance_identity() -> CheckResult {
    collect("inheritance identity", (|| {
        let cfg = ViTConfig { image_size: [16, 16], patch: 4, depth: 3, d_model: 16, heads: 2, window: 2, ..Default::default() };
        let mut rng = Rng::new(31);
        let teacher = MiniViT::<f32>::init(cfg, &mut rng)?;
        let student = MiniViT::inherit_weights(&teacher, &teacher.arch, &mut rng, InheritMode::All)?;
        let images = rng.normal_tensor::<f32>(&[2, 16, 16, 3], 1.0);
        let a = teacher.forward(&teacher.arch, &images)?;
        let b = student.forward(&teacher.arch, &images)?;
        let err = a.features.max_abs_diff(&b.features)? as f64;
        Ok(CheckResult { name: "inheritance identity".into(), passed: err == 0.0, measured: err, tolerance: 0.0, detail: "all-Full, exact".into() })
    })())
}

/// Patch unfolding, patch labels, distillation loss and segmentation metrics
/// against their explicit-loop definitions.
pub fn check_data_paths() -> Vec<CheckResult> {
    let unfold = collect("patch unfold", (|| {
        let mut rng = Rng::new(41);
        let images: Tensor<f64> = rand(&mut rng, &[2, 12, 8, 3]);
        let got = unfold_patches(&images, 4)?;
        let per = 6 * 48;
        let mut err = 0.0f64;
        for b in 0..2 {
            let img = Tensor::new(vec![12, 8, 3], images.data()[b * 288..(b + 1) * 288].to_vec())?;
            let want = oracle::unfold_patches(&img, 4);
            for (x, y) in got.data()[b * per..(b + 1) * per].iter().zip(want.data()) {
                err = err.max((x - y).abs());
            }
        }
        Ok(CheckResult::flag("patch unfold", err == 0.0, "2 images, 12x8, P=4"))
    })());
    let labels = {
        let spec = TaskSpec::default();
        let rng = Rng::new(42);
        let ok = (0..8).all(|i| {
            let s = generate_sample(&mut rng.split(i), &spec);
            s.patch_labels == oracle::patch_majority(&s.pixels, (spec.image_size[0], spec.image_size[1]), spec.patch, spec.classes)
        });
        CheckResult::flag("patch labels", ok, "8 samples, majority with low-id ties")
    };
    let distill = collect("distill loss", (|| {
        let mut rng = Rng::new(43);
        let s: Vec<Tensor<f64>> = (0..3).map(|_| rand(&mut rng, &[5, 4])).collect();
        let t: Vec<Tensor<f64>> = (0..3).map(|_| rand(&mut rng, &[5, 4])).collect();
        let err = (distill_loss(&s, &t)? - oracle::naive_distill_loss(&s, &t)).abs();
        Ok(CheckResult::below("distill loss", err, 1e-12, "3 taps"))
    })());
    let metrics = collect("seg metrics", (|| {
        let m = seg_metrics(&[0, 1, 1, 0, 1], &[0, 1, 0, 0, 0], 2)?;
        let err = (m.miou - 5.0 / 12.0).abs().max((m.pacc - 0.6).abs());
        Ok(CheckResult::below("seg metrics", err, 1e-12, "IoUs 1/3 and 1/2"))
    })());
    vec![unfold, labels, distill, metrics]
}

/// Beam search against exhaustive enumeration on seeded table evaluators,
/// plus the two-layer Full placement example.
pub fn check_search() -> Vec<CheckResult> {
    let lw = vec![vec![AttentionKind::Linear, AttentionKind::Window]; 6];
    let cfg = SearchConfig { beam: 4, tau: 0.0, ..Default::default() };
    let ratio = collect("beam vs exhaustive", (|| {
        let mut worst = f64::INFINITY;
        for seed in 0..20 {
            let mut e = TableEvaluator::random(&mut Rng::new(seed), 6, 0.1);
            let (_, ledger) = beam_search_stage1(&mut e, 6, &cfg)?;
            let best = exhaustive_search(&mut e, &lw)?.best_score;
            worst = worst.min(ledger.final_score.unwrap_or(f64::NAN) / best);
        }
        Ok(CheckResult {
            name: "beam vs exhaustive".into(),
            passed: worst >= 0.98,
            measured: worst,
            tolerance: 0.98,
            detail: "worst ratio over 20 6-layer tables with pair coupling 0.1".into(),
        })
    })());
    let separable = collect("beam on separable tables", (|| {
        let mut all = true;
        for seed in 0..20 {
            let mut e = TableEvaluator::random(&mut Rng::new(1000 + seed), 6, 0.0);
            let (_, ledger) = beam_search_stage1(&mut e, 6, &cfg)?;
            all &= ledger.final_score == Some(exhaustive_search(&mut e, &lw)?.best_score);
        }
        Ok(CheckResult::flag("beam on separable tables", all, "20 instances reach the optimum"))
    })());
    let placement = collect("full placement", (|| {
        let base: ArchDescriptor = "LWLLWL".parse()?;
        let mut e = FnEvaluator(|a: &ArchDescriptor| {
            Ok(a.kinds
                .iter()
                .enumerate()
                .map(|(i, &k)| match (k, i) {
                    (AttentionKind::Full, 2 | 4) => 1.0,
                    (AttentionKind::Full, _) => -0.5,
                    _ => 0.0,
                })
                .sum())
        });
        let s = SearchConfig { tau: 0.0, delta: 0.0, ..Default::default() };
        let (arch, _) = beam_search_stage2(&mut e, &base, 2.0, &s)?;
        let full: Vec<usize> = (0..6).filter(|&i| arch.kinds[i] == AttentionKind::Full).collect();
        Ok(CheckResult::flag("full placement", full == [2, 4], format!("Full at {full:?}")))
    })());
    vec![ratio, separable, placement]
}

/// Every check above with the library kernels.
pub fn run_all() -> Vec<CheckResult> {
    let mut out = check_linear_reordering(&library_linear::<f64>, &library_linear::<f32>);
    out.extend(check_window_consistency());
    out.extend(gradient_suite());
    out.push(check_squeeze_conv());
    out.push(check_flops());
    out.push(check_inheritance_identity());
    out.extend(check_data_paths());
    out.extend(check_search());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_passes_everything() {
        for r in run_all() {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn broken_kernel_fails_reordering() {
        let off_by_scale = |inp: &AttentionInputs<f64>| Ok(library_linear(inp)?.map(|x| x * 1.001));
        let r = check_linear_reordering(&off_by_scale, &library_linear::<f32>);
        assert!(!r[0].passed && r[1].passed);
    }
}
