use serde::{Deserialize, Serialize};

use crate::autograd::GradTape;
use crate::error::{dim_err, Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub classes: usize,
    pub steps: usize,
    /// Rows per minibatch; the whole set when larger than it.
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Standardize each feature dimension with training-set statistics.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            steps: 500,
            batch: 256,
            adam: AdamConfig::default(),
            seed: 0,
            standardize: true,
        }
    }
}

/// Linear classifier over token features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead<T> {
    /// `[d × classes]`
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub mean: Tensor<T>,
    pub inv_std: Tensor<T>,
}

impl<T: Element> LinearHead<T> {
    pub fn zeros(d: usize, classes: usize) -> Self {
        Self {
            w: Tensor::zeros(&[d, classes]),
            b: Tensor::zeros(&[classes]),
            mean: Tensor::zeros(&[d]),
            inv_std: Tensor::full(&[d], T::one()),
        }
    }

    pub fn classes(&self) -> usize {
        self.b.len()
    }

    fn normalize(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, d) = features.dims2()?;
        if d != self.mean.len() {
            return Err(dim_err!("features have width {d}, head expects {}", self.mean.len()));
        }
        let (m, s) = (self.mean.data(), self.inv_std.data());
        Ok(Tensor::from_fn(features.shape(), |i| (features.data()[i] - m[i % d]) * s[i % d]))
    }

    /// `[M × classes]` logits.
    pub fn logits(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.normalize(features)?;
        let mut tape = GradTape::new();
        let (x, w, b) = (tape.constant(x), tape.constant(self.w.clone()), tape.constant(self.b.clone()));
        let y = tape.matmul(x, w)?;
        let y = tape.add_tiled(y, b)?;
        Ok(tape.value(y).clone())
    }

    /// Arg-max class per row; ties go to the lower class.
    pub fn predict(&self, features: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok(logits
            .data()
            .chunks(self.classes())
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    /// Mean cross-entropy on `(features, labels)`.
    pub fn loss(&self, features: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(features)?;
        let mut tape = GradTape::new();
        let l = tape.constant(logits);
        let loss = tape.cross_entropy(l, labels)?;
        Ok(tape.value(loss).data()[0].to_f64())
    }
}

/// Trains a zero-initialized head with cross-entropy and Adam on
/// seed-ordered minibatches (reshuffled every pass).
pub fn linear_probe_train<T: Element>(features: &Tensor<T>, labels: &[usize], cfg: &ProbeConfig) -> Result<LinearHead<T>> {
    let (m, d) = features.dims2()?;
    if labels.len() != m {
        return Err(dim_err!("{} labels for {m} feature rows", labels.len()));
    }
    if cfg.classes < 2 || cfg.batch == 0 {
        return Err(Error::Config("probe needs ≥ 2 classes and a positive batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.classes) {
        return Err(Error::Data(format!("label {bad} out of range for {} classes", cfg.classes)));
    }
    features.ensure_finite("probe features")?;
    let mut head = LinearHead::zeros(d, cfg.classes);
    if cfg.standardize {
        let (mut mean, mut var) = (vec![0.0f64; d], vec![0.0f64; d]);
        for row in features.data().chunks(d) {
            for (j, &x) in row.iter().enumerate() {
                mean[j] += x.to_f64() / m as f64;
            }
        }
        for row in features.data().chunks(d) {
            for (j, &x) in row.iter().enumerate() {
                var[j] += (x.to_f64() - mean[j]).powi(2) / m as f64;
            }
        }
        head.mean = Tensor::from_fn(&[d], |j| T::from_f64(mean[j]));
        head.inv_std = Tensor::from_fn(&[d], |j| T::from_f64(1.0 / (var[j].sqrt() + 1e-6)));
    }
    let x = head.normalize(features)?;
    let batch = cfg.batch.min(m);
    let mut rng = Rng::new(cfg.seed);
    let mut order = rng.permutation(m);
    let mut cursor = 0;
    let mut state = AdamState::new(&[&head.w, &head.b]);
    let mut rows = Vec::with_capacity(batch * d);
    let mut ys = Vec::with_capacity(batch);
    for _ in 0..cfg.steps {
        rows.clear();
        ys.clear();
        for _ in 0..batch {
            if cursor == m {
                order = rng.permutation(m);
                cursor = 0;
            }
            let r = order[cursor];
            cursor += 1;
            rows.extend_from_slice(&x.data()[r * d..(r + 1) * d]);
            ys.push(labels[r]);
        }
        let mut tape = GradTape::new();
        let xb = tape.constant(Tensor::new(vec![batch, d], rows.clone())?);
        let (w, b) = (tape.param(head.w.clone()), tape.param(head.b.clone()));
        let y = tape.matmul(xb, w)?;
        let y = tape.add_tiled(y, b)?;
        let loss = tape.cross_entropy(y, &ys)?;
        tape.value(loss).ensure_finite("probe loss")?;
        let g = tape.backward(loss)?;
        let grads = [Some(g.get(w)), Some(g.get(b))];
        adam_step(&mut [&mut head.w, &mut head.b], &grads, &mut state, &cfg.adam)?;
    }
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable(rng: &mut Rng, m: usize) -> (Tensor<f64>, Vec<usize>) {
        let labels: Vec<usize> = (0..m).map(|i| i % 2).collect();
        let f = Tensor::from_fn(&[m, 3], |i| {
            let (r, c) = (i / 3, i % 3);
            let sign = if labels[r] == 1 { 1.0 } else { -1.0 };
            if c == 0 { sign * (1.0 + rng.uniform(0.0, 1.0)) } else { rng.normal() }
        });
        (f, labels)
    }

    #[test]
    fn separable_features_are_learned() {
        let mut rng = Rng::new(1);
        let (f, y) = separable(&mut rng, 400);
        let adam = AdamConfig { lr: 1e-2, ..Default::default() };
        let cfg = ProbeConfig { classes: 2, adam, ..Default::default() };
        let head = linear_probe_train(&f, &y, &cfg).unwrap();
        let pred = head.predict(&f).unwrap();
        let acc = pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
        assert!(acc >= 0.99, "{acc}");
    }

    #[test]
    fn zero_steps_gives_uniform_loss() {
        let mut rng = Rng::new(2);
        let f: Tensor<f64> = rng.normal_tensor(&[50, 4], 1.0);
        let y: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let cfg = ProbeConfig { steps: 0, ..Default::default() };
        let head = linear_probe_train(&f, &y, &cfg).unwrap();
        assert!((head.loss(&f, &y).unwrap() - 5f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let mut rng = Rng::new(3);
        let f: Tensor<f32> = rng.normal_tensor(&[64, 4], 1.0);
        let y: Vec<usize> = (0..64).map(|i| i % 3).collect();
        let cfg = ProbeConfig { classes: 3, steps: 20, batch: 16, ..Default::default() };
        let a = linear_probe_train(&f, &y, &cfg).unwrap();
        let b = linear_probe_train(&f, &y, &cfg).unwrap();
        assert_eq!(a.w.to_le_bytes(), b.w.to_le_bytes());
    }

    #[test]
    fn bad_labels_are_data_errors() {
        let f = Tensor::<f64>::zeros(&[2, 2]);
        let cfg = ProbeConfig { classes: 2, ..Default::default() };
        assert!(matches!(linear_probe_train(&f, &[0, 2], &cfg), Err(Error::Data(_))));
    }
}
