//! Wall-clock timing of the attention kernels and scaling-exponent fits.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_flops, full_attention, jetvit_linear_block, relu_linear_attention, window_attention, AttentionInputs,
    FlopKind, SqueezeConvParams, LINEAR_EPS,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BENCH_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchKind {
    Full,
    Window,
    Linear,
    /// Linear attention plus the squeeze dynamic convolution.
    LinearSqueeze,
}

impl BenchKind {
    pub const ALL: [BenchKind; 4] = [BenchKind::Full, BenchKind::Window, BenchKind::Linear, BenchKind::LinearSqueeze];

    pub fn name(self) -> &'static str {
        match self {
            BenchKind::Full => "full",
            BenchKind::Window => "window",
            BenchKind::Linear => "linear",
            BenchKind::LinearSqueeze => "linear_squeeze",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown bench kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub kinds: Vec<BenchKind>,
    pub ns: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub window: usize,
    pub squeeze_kernel: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            kinds: BenchKind::ALL.to_vec(),
            ns: vec![1024, 2048, 4096, 8192, 16384],
            d_model: 64,
            heads: 4,
            repeats: 5,
            warmup: 1,
            window: 8,
            squeeze_kernel: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub kind: BenchKind,
    pub ns: Vec<usize>,
    /// Raw wall times in ms, `repeats` per N.
    pub samples_ms: Vec<Vec<f64>>,
    pub median_ms: Vec<f64>,
    pub min_ms: Vec<f64>,
    /// Token-mixing FLOPs of the timed kernel per N.
    pub flops: Vec<u64>,
    pub exponent: f64,
    pub warnings: Vec<String>,
}

/// Token grid for `n` tokens: as square as powers of two allow.
pub fn bench_grid(n: usize) -> (usize, usize) {
    let mut h = 1;
    while h * h * 4 <= n && n % (h * 2) == 0 {
        h *= 2;
    }
    (h, n / h)
}

/// Smallest observable gap between two clock reads.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

/// Times one kernel at every N: `warmup` untimed runs, then `repeats` timed
/// runs on inputs drawn from `seed` (identical across kinds).
pub fn time_forward(kind: BenchKind, cfg: &BenchConfig) -> Result<BenchResult> {
    if cfg.repeats < 5 {
        return Err(Error::Config(format!("need at least 5 repeats, got {}", cfg.repeats)));
    }
    if cfg.ns.is_empty() {
        return Err(Error::Config("no token counts to time".into()));
    }
    let resolution_ms = timer_resolution().as_secs_f64() * 1e3;
    let mut out = BenchResult {
        kind,
        ns: cfg.ns.clone(),
        samples_ms: Vec::new(),
        median_ms: Vec::new(),
        min_ms: Vec::new(),
        flops: Vec::new(),
        exponent: f64::NAN,
        warnings: Vec::new(),
    };
    let (d, h) = (cfg.d_model as u64, cfg.heads as u64);
    for &n in &cfg.ns {
        let grid = bench_grid(n);
        let mut rng = Rng::with_stream(cfg.seed, n as u64);
        let q: Tensor<f32> = rng.normal_tensor(&[n, cfg.d_model], 1.0);
        let k: Tensor<f32> = rng.normal_tensor(&[n, cfg.d_model], 1.0);
        let v: Tensor<f32> = rng.normal_tensor(&[n, cfg.d_model], 1.0);
        let inp = AttentionInputs::new(q, k, v, cfg.heads, grid)?;
        let hidden = crate::attention::default_hidden(cfg.d_model);
        let squeeze = SqueezeConvParams::<Tensor<f32>>::init(cfg.d_model, cfg.squeeze_kernel, hidden, &mut rng)?;
        let flop_kind = match kind {
            BenchKind::Full => FlopKind::Full,
            BenchKind::Window => FlopKind::Window { w: cfg.window },
            BenchKind::Linear => FlopKind::Linear,
            BenchKind::LinearSqueeze => FlopKind::LinearSqueeze { k: cfg.squeeze_kernel, hidden },
        };
        let f = attention_flops(flop_kind, n as u64, d, h)?;
        out.flops.push(f.attention + f.squeeze_conv + f.generator);
        let run = || -> Result<Tensor<f32>> {
            match kind {
                BenchKind::Full => full_attention(&inp),
                BenchKind::Window => window_attention(&inp, cfg.window),
                BenchKind::Linear => relu_linear_attention(&inp, LINEAR_EPS as f32),
                BenchKind::LinearSqueeze => jetvit_linear_block(&inp, &squeeze, LINEAR_EPS as f32),
            }
        };
        for _ in 0..cfg.warmup {
            std::hint::black_box(run()?);
        }
        let mut samples = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats {
            let t = Instant::now();
            std::hint::black_box(run()?);
            samples.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let med = median(&samples);
        if med < 10.0 * resolution_ms {
            out.warnings.push(format!(
                "N={n}: median {med:.6} ms is under 10× the timer resolution ({resolution_ms:.6} ms)"
            ));
        }
        out.median_ms.push(med);
        out.min_ms.push(samples.iter().cloned().fold(f64::INFINITY, f64::min));
        out.samples_ms.push(samples);
    }
    if cfg.ns.len() >= 3 {
        let pairs: Vec<(f64, f64)> = cfg.ns.iter().zip(&out.median_ms).map(|(&n, &t)| (n as f64, t)).collect();
        out.exponent = fit_scaling_exponent(&pairs)?;
    } else {
        out.warnings.push("fewer than 3 sizes: no exponent fitted".into());
    }
    Ok(out)
}

/// Least-squares slope of `log t` against `log N`.
pub fn fit_scaling_exponent(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 3 {
        return Err(Error::Data(format!("need at least 3 points, got {}", pairs.len())));
    }
    if pairs.windows(2).any(|w| !(w[1].0 > w[0].0)) || pairs[0].0 <= 0.0 {
        return Err(Error::Data("token counts must be positive and strictly increasing".into()));
    }
    if let Some(&(n, t)) = pairs.iter().find(|p| !(p.1 > 0.0)) {
        return Err(Error::Data(format!("non-positive time {t} at N={n}")));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

pub fn bench_csv(results: &[BenchResult]) -> String {
    let mut out = String::from("kind,N,median_ms,min_ms,flops\n");
    for r in results {
        for i in 0..r.ns.len() {
            out.push_str(&format!("{},{},{},{},{}\n", r.kind.name(), r.ns[i], r.median_ms[i], r.min_ms[i], r.flops[i]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn law(c: f64, p: f64, noise: Option<&mut Rng>) -> Vec<(f64, f64)> {
        let ns = [1024.0, 2048.0, 4096.0, 8192.0, 16384.0];
        let mut noise = noise;
        ns.iter()
            .map(|&n: &f64| {
                let jitter = noise.as_mut().map_or(1.0, |r| 1.0 + 0.01 * r.uniform(-1.0, 1.0));
                (n, c * n.powf(p) * jitter)
            })
            .collect()
    }

    #[test]
    fn exact_power_laws() {
        assert!((fit_scaling_exponent(&law(3e-6, 2.0, None)).unwrap() - 2.0).abs() < 1e-9);
        assert!((fit_scaling_exponent(&law(0.5, 1.0, None)).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noisy_power_law() {
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let e = fit_scaling_exponent(&law(1e-3, 1.5, Some(&mut rng))).unwrap();
            assert!((e - 1.5).abs() < 0.1, "{e}");
        }
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(fit_scaling_exponent(&[(1.0, 1.0), (2.0, 2.0)]), Err(Error::Data(_))));
        assert!(matches!(fit_scaling_exponent(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]), Err(Error::Data(_))));
        assert!(matches!(fit_scaling_exponent(&[(1.0, 1.0), (1.0, 2.0), (3.0, 1.0)]), Err(Error::Data(_))));
    }

    #[test]
    fn grids_cover_n() {
        for n in [16, 64, 1024, 2048, 4096, 8192, 16384] {
            let (h, w) = bench_grid(n);
            assert_eq!(h * w, n);
            assert!(h <= w && h % 8 == 0 || n < 256);
        }
    }

    #[test]
    fn records_exactly_r_samples_and_stable_flops() {
        let cfg = BenchConfig { ns: vec![64, 128, 256], repeats: 6, warmup: 0, window: 4, ..Default::default() };
        for kind in BenchKind::ALL {
            let a = time_forward(kind, &cfg).unwrap();
            assert!(a.samples_ms.iter().all(|s| s.len() == 6));
            assert!(a.median_ms.iter().all(|&t| t > 0.0));
            assert!(a.exponent.is_finite());
            let b = time_forward(kind, &cfg).unwrap();
            assert_eq!(a.flops, b.flops);
        }
        let csv = bench_csv(&[time_forward(BenchKind::Linear, &cfg).unwrap()]);
        assert!(csv.starts_with("kind,N,median_ms,min_ms,flops\nlinear,64,"));
        assert!(time_forward(BenchKind::Full, &BenchConfig { repeats: 4, ..cfg }).is_err());
    }
}
