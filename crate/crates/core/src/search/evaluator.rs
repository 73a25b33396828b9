use std::collections::BTreeMap;

use crate::attention::AttentionKind;
use crate::error::Result;
use crate::rng::Rng;
use crate::vit::ArchDescriptor;

/// Scores an architecture; higher is better. Must be deterministic.
pub trait Evaluator {
    fn score(&mut self, arch: &ArchDescriptor) -> Result<f64>;

    fn metric_name(&self) -> &str {
        "score"
    }
}

/// Caches scores by arch code and counts distinct evaluations.
pub struct Memoized<E> {
    pub inner: E,
    cache: BTreeMap<String, f64>,
    pub evaluations: usize,
}

impl<E: Evaluator> Memoized<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, cache: BTreeMap::new(), evaluations: 0 }
    }

    pub fn cached(&self, arch: &ArchDescriptor) -> Option<f64> {
        self.cache.get(&arch.to_string()).copied()
    }
}

impl<E: Evaluator> Evaluator for Memoized<E> {
    fn score(&mut self, arch: &ArchDescriptor) -> Result<f64> {
        let key = arch.to_string();
        if let Some(&s) = self.cache.get(&key) {
            return Ok(s);
        }
        let s = self.inner.score(arch)?;
        self.evaluations += 1;
        self.cache.insert(key, s);
        Ok(s)
    }

    fn metric_name(&self) -> &str {
        self.inner.metric_name()
    }
}

/// `Σ_i unary[i][a_i] + Σ_{i<j} pair[i][j][a_i][a_j]`, kinds indexed in
/// `AttentionKind::ALL` order. Without pair terms the score is separable.
#[derive(Clone, Debug, PartialEq)]
pub struct TableEvaluator {
    pub unary: Vec<[f64; 3]>,
    pub pair: Option<Vec<Vec<[[f64; 3]; 3]>>>,
}

fn kind_index(k: AttentionKind) -> usize {
    AttentionKind::ALL.iter().position(|&a| a == k).expect("listed")
}

impl TableEvaluator {
    pub fn separable(unary: Vec<[f64; 3]>) -> Self {
        Self { unary, pair: None }
    }

    /// Unary entries uniform in `[0, 1)`; pair entries, if `coupling > 0`,
    /// uniform in `[-coupling, coupling)`.
    pub fn random(rng: &mut Rng, depth: usize, coupling: f64) -> Self {
        let unary = (0..depth).map(|_| [0; 3].map(|_| rng.uniform(0.0, 1.0))).collect();
        let pair = (coupling > 0.0).then(|| {
            (0..depth)
                .map(|_| (0..depth).map(|_| [[0.0; 3]; 3].map(|r| r.map(|_| rng.uniform(-coupling, coupling)))).collect())
                .collect()
        });
        Self { unary, pair }
    }
}

impl Evaluator for TableEvaluator {
    fn score(&mut self, arch: &ArchDescriptor) -> Result<f64> {
        let idx: Vec<usize> = arch.kinds.iter().map(|&k| kind_index(k)).collect();
        let mut s: f64 = idx.iter().enumerate().map(|(i, &k)| self.unary[i][k]).sum();
        if let Some(pair) = &self.pair {
            for i in 0..idx.len() {
                for j in i + 1..idx.len() {
                    s += pair[i][j][idx[i]][idx[j]];
                }
            }
        }
        Ok(s)
    }

    fn metric_name(&self) -> &str {
        "table"
    }
}

/// Wraps a closure.
pub struct FnEvaluator<F>(pub F);

impl<F: FnMut(&ArchDescriptor) -> Result<f64>> Evaluator for FnEvaluator<F> {
    fn score(&mut self, arch: &ArchDescriptor) -> Result<f64> {
        (self.0)(arch)
    }
}
