//! Stage-wise greedy beam search over per-layer attention kinds.
//!
//! Stage 1 starts from all-Linear and flips one Linear layer to Window per
//! expansion; stage 2 starts from the stage-1 result and flips one
//! efficient layer to Full. Scores come from an [`Evaluator`]; higher is
//! better.

mod evaluator;

pub use evaluator::{Evaluator, FnEvaluator, Memoized, TableEvaluator};

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::vit::ArchDescriptor;

pub const LEDGER_SCHEMA: u32 = 1;
/// Largest space [`exhaustive_search`] will enumerate.
pub const EXHAUSTIVE_GUARD: u128 = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub beam: usize,
    /// Minimum improvement of a round's best score over the previous best.
    pub tau: f64,
    /// Stage 2 stops once the best score is within `delta` of the teacher.
    pub delta: f64,
    /// Stage 2 never exceeds this many Full layers.
    pub k_max: usize,
    pub evaluator: String,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beam: 4,
            tau: 0.1,
            delta: 0.5,
            k_max: 4,
            evaluator: "probe-miou".into(),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if !(self.tau >= 0.0) || !(self.delta >= 0.0) {
            return Err(Error::Config("tau and delta must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Plateau,
    TeacherGapMet,
    Budget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub arch: String,
    pub score: f64,
    /// Beam member this candidate was expanded from.
    pub parent: Option<String>,
    /// Layer flipped to produce it.
    pub flip: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Every evaluated candidate, in enumeration order.
    pub candidates: Vec<CandidateRecord>,
    /// Top-B survivors in rank order.
    pub beam: Vec<String>,
    /// False for a final round rejected by the plateau rule.
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchLedger {
    pub schema_version: u32,
    pub stage: u8,
    pub metric: String,
    pub config: SearchConfig,
    pub start: String,
    pub teacher_score: Option<f64>,
    pub rounds: Vec<RoundRecord>,
    pub final_arch: Option<String>,
    pub final_score: Option<f64>,
    pub stop_reason: Option<StopReason>,
}

impl SearchLedger {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ledger is plain data") + "\n"
    }

    /// Score of `arch` as recorded in round `round`.
    pub fn round_score(&self, round: usize, arch: &str) -> Option<f64> {
        self.rounds.get(round)?.candidates.iter().find(|c| c.arch == arch).map(|c| c.score)
    }
}

/// A failed search with everything recorded before the failure.
#[derive(Debug)]
pub struct SearchAbort {
    pub error: Error,
    pub partial: SearchLedger,
}

impl fmt::Display for SearchAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "search aborted after {} rounds: {}", self.partial.rounds.len(), self.error)
    }
}

impl std::error::Error for SearchAbort {}

impl From<SearchAbort> for Error {
    fn from(a: SearchAbort) -> Self {
        a.error
    }
}

pub type SearchResult = std::result::Result<(ArchDescriptor, SearchLedger), SearchAbort>;

#[derive(Clone, Debug)]
struct Node {
    arch: ArchDescriptor,
    score: f64,
    flip: Option<usize>,
}

fn cost(a: &ArchDescriptor) -> u32 {
    a.kinds.iter().map(|k| k.cost_rank() as u32).sum()
}

/// Score descending, then cheaper arch, then lower flipped layer.
fn rank(a: &Node, b: &Node) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(cost(&a.arch).cmp(&cost(&b.arch)))
        .then(a.flip.cmp(&b.flip))
}

struct Runner<'a, E: Evaluator + ?Sized> {
    eval: &'a mut E,
    ledger: SearchLedger,
}

impl<E: Evaluator + ?Sized> Runner<'_, E> {
    fn score(&mut self, arch: &ArchDescriptor) -> Result<f64> {
        let s = self.eval.score(arch)?;
        if !s.is_finite() {
            return Err(Error::Evaluator(format!("non-finite score {s} for {arch}")));
        }
        Ok(s)
    }

    fn abort(self, error: Error) -> SearchAbort {
        SearchAbort { error, partial: self.ledger }
    }

    fn finish(mut self, best: &Node, reason: StopReason) -> SearchResult {
        self.ledger.final_arch = Some(best.arch.to_string());
        self.ledger.final_score = Some(best.score);
        self.ledger.stop_reason = Some(reason);
        Ok((best.arch.clone(), self.ledger))
    }

    /// One Hamming-1 expansion round: flip each `from` layer of every beam
    /// arch to `to`, dedupe keeping the first occurrence, score, rank.
    fn expand(&mut self, beam: &[Node], from: &dyn Fn(AttentionKind) -> bool, to: AttentionKind) -> Result<Vec<Node>> {
        let round = self.ledger.rounds.len();
        let mut seen = BTreeSet::new();
        let mut nodes = Vec::new();
        let mut records = Vec::new();
        for parent in beam {
            for (i, &k) in parent.arch.kinds.iter().enumerate() {
                if !from(k) {
                    continue;
                }
                let child = parent.arch.with(i, to);
                if !seen.insert(child.clone()) {
                    continue;
                }
                let score = match self.score(&child) {
                    Ok(s) => s,
                    Err(e) => {
                        self.ledger.rounds.push(RoundRecord { round, candidates: records, beam: vec![], accepted: false });
                        return Err(e);
                    }
                };
                records.push(CandidateRecord {
                    arch: child.to_string(),
                    score,
                    parent: Some(parent.arch.to_string()),
                    flip: Some(i),
                });
                nodes.push(Node { arch: child, score, flip: Some(i) });
            }
        }
        nodes.sort_by(rank);
        self.ledger.rounds.push(RoundRecord {
            round,
            candidates: records,
            beam: vec![],
            accepted: true,
        });
        Ok(nodes)
    }

    fn seed_round(&mut self, start: &ArchDescriptor) -> Result<Node> {
        let score = self.score(start)?;
        self.ledger.rounds.push(RoundRecord {
            round: 0,
            candidates: vec![CandidateRecord { arch: start.to_string(), score, parent: None, flip: None }],
            beam: vec![start.to_string()],
            accepted: true,
        });
        Ok(Node { arch: start.clone(), score, flip: None })
    }

    fn run(
        mut self,
        start: ArchDescriptor,
        cfg: &SearchConfig,
        from: &dyn Fn(AttentionKind) -> bool,
        to: AttentionKind,
        stop_before: &dyn Fn(&Node) -> Option<StopReason>,
    ) -> SearchResult {
        let root = match self.seed_round(&start) {
            Ok(n) => n,
            Err(e) => return Err(self.abort(e)),
        };
        let mut beam = vec![root];
        loop {
            let best = beam[0].clone();
            if let Some(reason) = stop_before(&best) {
                return self.finish(&best, reason);
            }
            if !beam.iter().any(|n| n.arch.kinds.iter().any(|&k| from(k))) {
                return self.finish(&best, StopReason::Budget);
            }
            let ranked = match self.expand(&beam, from, to) {
                Ok(r) => r,
                Err(e) => return Err(self.abort(e)),
            };
            let survivors: Vec<Node> = ranked.into_iter().take(cfg.beam).collect();
            let round = self.ledger.rounds.last_mut().expect("pushed by expand");
            round.beam = survivors.iter().map(|n| n.arch.to_string()).collect();
            if survivors[0].score < best.score + cfg.tau {
                round.accepted = false;
                return self.finish(&best, StopReason::Plateau);
            }
            beam = survivors;
        }
    }
}

fn new_ledger<E: Evaluator + ?Sized>(eval: &E, stage: u8, cfg: &SearchConfig, start: &ArchDescriptor, teacher: Option<f64>) -> SearchLedger {
    SearchLedger {
        schema_version: LEDGER_SCHEMA,
        stage,
        metric: eval.metric_name().to_string(),
        config: cfg.clone(),
        start: start.to_string(),
        teacher_score: teacher,
        rounds: Vec::new(),
        final_arch: None,
        final_score: None,
        stop_reason: None,
    }
}

fn config_abort<E: Evaluator + ?Sized>(eval: &E, stage: u8, cfg: &SearchConfig, start: &ArchDescriptor, e: Error) -> SearchAbort {
    SearchAbort { error: e, partial: new_ledger(eval, stage, cfg, start, None) }
}

/// Stage 1: from all-Linear, flip Linear layers to Window while the best
/// score improves by at least `tau`.
pub fn beam_search_stage1<E: Evaluator + ?Sized>(eval: &mut E, depth: usize, cfg: &SearchConfig) -> SearchResult {
    let start = ArchDescriptor::uniform(AttentionKind::Linear, depth);
    if let Err(e) = cfg.validate() {
        return Err(config_abort(eval, 1, cfg, &start, e));
    }
    let ledger = new_ledger(eval, 1, cfg, &start, None);
    Runner { eval, ledger }.run(start, cfg, &|k| k == AttentionKind::Linear, AttentionKind::Window, &|_| None)
}

/// Stage 2: from `stage1_arch`, flip efficient layers to Full until the
/// teacher gap is closed, the Full budget is spent, or gains plateau.
pub fn beam_search_stage2<E: Evaluator + ?Sized>(
    eval: &mut E,
    stage1_arch: &ArchDescriptor,
    teacher_score: f64,
    cfg: &SearchConfig,
) -> SearchResult {
    if let Err(e) = cfg.validate() {
        return Err(config_abort(eval, 2, cfg, stage1_arch, e));
    }
    let ledger = new_ledger(eval, 2, cfg, stage1_arch, Some(teacher_score));
    let (delta, k_max) = (cfg.delta, cfg.k_max);
    let stop = move |n: &Node| {
        if n.score >= teacher_score - delta {
            Some(StopReason::TeacherGapMet)
        } else if n.arch.count(AttentionKind::Full) >= k_max {
            Some(StopReason::Budget)
        } else {
            None
        }
    };
    Runner { eval, ledger }.run(stage1_arch.clone(), cfg, &|k| k != AttentionKind::Full, AttentionKind::Full, &stop)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExhaustiveResult {
    pub best: String,
    pub best_score: f64,
    /// Every arch with its score, in enumeration order.
    pub table: Vec<(String, f64)>,
}

/// Scores every arch over the per-layer kind sets; ties go to the
/// lexicographically smallest code.
pub fn exhaustive_search<E: Evaluator + ?Sized>(eval: &mut E, kinds: &[Vec<AttentionKind>]) -> Result<ExhaustiveResult> {
    if kinds.is_empty() || kinds.iter().any(|k| k.is_empty()) {
        return Err(Error::Config("every layer needs at least one kind".into()));
    }
    let size = kinds.iter().try_fold(1u128, |acc, k| acc.checked_mul(k.len() as u128)).unwrap_or(u128::MAX);
    if size > EXHAUSTIVE_GUARD {
        return Err(Error::SearchSpace(size, EXHAUSTIVE_GUARD));
    }
    let mut idx = vec![0usize; kinds.len()];
    let mut table = Vec::with_capacity(size as usize);
    let mut best: Option<(String, f64)> = None;
    loop {
        let arch = ArchDescriptor::new(idx.iter().zip(kinds).map(|(&i, k)| k[i]).collect());
        let score = eval.score(&arch)?;
        let code = arch.to_string();
        let better = match &best {
            None => true,
            Some((c, s)) => score > *s || (score == *s && code < *c),
        };
        if better {
            best = Some((code.clone(), score));
        }
        table.push((code, score));
        // odometer increment, last layer fastest
        let mut l = kinds.len();
        loop {
            if l == 0 {
                let (best, best_score) = best.expect("at least one arch");
                return Ok(ExhaustiveResult { best, best_score, table });
            }
            l -= 1;
            idx[l] += 1;
            if idx[l] < kinds[l].len() {
                break;
            }
            idx[l] = 0;
        }
    }
}

/// One heatmap row per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub layer: usize,
    pub score: f64,
    pub delta: f64,
}

/// Score of `base` with only layer `i` switched to Full, for every `i`.
pub fn fa_placement_heatmap<E: Evaluator + ?Sized>(eval: &mut E, base: &ArchDescriptor) -> Result<Vec<HeatmapRow>> {
    let base_score = eval.score(base)?;
    (0..base.depth())
        .map(|i| {
            let score = if base.kinds[i] == AttentionKind::Full { base_score } else { eval.score(&base.with(i, AttentionKind::Full))? };
            Ok(HeatmapRow { layer: i, score, delta: score - base_score })
        })
        .collect()
}

pub fn heatmap_csv(rows: &[HeatmapRow]) -> String {
    let mut out = String::from("layer,score,delta\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.layer, r.score, r.delta));
    }
    out
}
