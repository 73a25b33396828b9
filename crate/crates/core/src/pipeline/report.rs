use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_ledger, Layout};
use crate::attention::{attention_flops, AttentionKind, FlopKind};
use crate::error::{Error, Result};
use crate::search::{HeatmapRow, SearchLedger, StopReason};
use crate::vit::{ArchDescriptor, ViTConfig};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub arch: String,
    pub score: f64,
    pub full_layers: usize,
    /// Attention-block FLOPs per image summed over layers.
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub final_arch: Option<String>,
    pub final_score: Option<f64>,
    pub stop_reason: Option<StopReason>,
    pub rounds: usize,
    pub evaluated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub steps: usize,
    pub first_mean: f64,
    pub last_mean: f64,
}

/// Everything here is derived from files on disk and excludes wall times,
/// so identical inputs give a byte-identical report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub metric: String,
    /// Teacher, stage-2 hybrid, stage-1 hybrid, all-Linear.
    pub comparison: Vec<ComparisonRow>,
    /// Scores are non-increasing down `comparison`.
    pub ordering_holds: bool,
    pub teacher_gap: f64,
    pub stage1: StageSummary,
    pub stage2: StageSummary,
    pub heatmap: Option<Vec<HeatmapRow>>,
    pub losses: BTreeMap<String, LossSummary>,
    pub bench_exponents: Option<BTreeMap<String, f64>>,
}

impl Report {
    pub fn comparison_csv(&self) -> String {
        let mut out = String::from("name,arch,score,full_layers,flops\n");
        for r in &self.comparison {
            out.push_str(&format!("{},{},{},{},{}\n", r.name, r.arch, r.score, r.full_layers, r.flops));
        }
        out
    }

    pub fn row(&self, name: &str) -> Option<&ComparisonRow> {
        self.comparison.iter().find(|r| r.name == name)
    }
}

/// Per-image attention FLOPs of `arch` under `cfg`.
pub fn arch_flops(cfg: &ViTConfig, arch: &ArchDescriptor) -> Result<u64> {
    let (n, d, h) = (cfg.tokens() as u64, cfg.d_model as u64, cfg.heads as u64);
    arch.kinds.iter().try_fold(0u64, |acc, &k| {
        let kind = match k {
            AttentionKind::Full => FlopKind::Full,
            AttentionKind::Window => FlopKind::Window { w: cfg.window },
            AttentionKind::Linear => FlopKind::LinearSqueeze { k: cfg.squeeze_kernel, hidden: cfg.squeeze_hidden },
        };
        Ok(acc + attention_flops(kind, n, d, h)?.total())
    })
}

fn summary(l: &SearchLedger) -> StageSummary {
    StageSummary {
        final_arch: l.final_arch.clone(),
        final_score: l.final_score,
        stop_reason: l.stop_reason,
        rounds: l.rounds.len(),
        evaluated: l.rounds.iter().map(|r| r.candidates.len()).sum(),
    }
}

fn row(cfg: &ViTConfig, name: &str, arch: &str, score: f64) -> Result<ComparisonRow> {
    let a = ArchDescriptor::parse_with_depth(arch, cfg.depth)?;
    Ok(ComparisonRow {
        name: name.into(),
        arch: arch.into(),
        score,
        full_layers: a.count(AttentionKind::Full),
        flops: arch_flops(cfg, &a)?,
    })
}

fn loss_summary(path: &Path) -> Result<Option<LossSummary>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut losses = Vec::new();
    for line in fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        losses.push(v["loss"].as_f64().ok_or_else(|| Error::Format(format!("{}: record without loss", path.display())))?);
    }
    if losses.is_empty() {
        return Ok(None);
    }
    let k = 20.min(losses.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok(Some(LossSummary { steps: losses.len(), first_mean: mean(&losses[..k]), last_mean: mean(&losses[losses.len() - k..]) }))
}

fn read_heatmap(path: &Path) -> Result<Option<Vec<HeatmapRow>>> {
    if !path.exists() {
        return Ok(None);
    }
    let bad = || Error::Format(format!("malformed heatmap {}", path.display()));
    fs::read_to_string(path)?
        .lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(HeatmapRow {
                layer: f[0].parse().map_err(|_| bad())?,
                score: f[1].parse().map_err(|_| bad())?,
                delta: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn read_bench(path: &Path) -> Result<Option<BTreeMap<String, f64>>> {
    if !path.exists() {
        return Ok(None);
    }
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let results = v["results"].as_array().ok_or_else(|| Error::Format("bench file without results".into()))?;
    Ok(Some(
        results
            .iter()
            .filter_map(|r| Some((r["kind"].as_str()?.to_string(), r["exponent"].as_f64()?)))
            .collect(),
    ))
}

/// Aggregates both search ledgers plus whatever logs, heatmap and
/// benchmark files exist under `root`.
pub fn build_report(root: &Path, cfg: &ViTConfig) -> Result<Report> {
    let out = Layout::new(root);
    for stage in [1, 2] {
        if !out.ledger(stage).exists() {
            return Err(Error::State(format!(
                "{} not found; run `search --stage {stage}` first",
                out.ledger(stage).display()
            )));
        }
    }
    let (l1, l2) = (read_ledger(&out.ledger(1))?, read_ledger(&out.ledger(2))?);
    let incomplete = |l: &SearchLedger| Error::State(format!("stage-{} ledger is incomplete (search aborted)", l.stage));
    let teacher = l2.teacher_score.ok_or_else(|| incomplete(&l2))?;
    let (a2, s2) = l2.final_arch.as_deref().zip(l2.final_score).ok_or_else(|| incomplete(&l2))?;
    let (a1, s1) = l1.final_arch.as_deref().zip(l1.final_score).ok_or_else(|| incomplete(&l1))?;
    let linear = l1.round_score(0, &l1.start).ok_or_else(|| incomplete(&l1))?;
    let all_full = ArchDescriptor::uniform(AttentionKind::Full, cfg.depth).to_string();
    let comparison = vec![
        row(cfg, "teacher", &all_full, teacher)?,
        row(cfg, "hybrid_stage2", a2, s2)?,
        row(cfg, "hybrid_stage1", a1, s1)?,
        row(cfg, "all_linear", &l1.start, linear)?,
    ];
    let ordering_holds = comparison.windows(2).all(|w| w[0].score >= w[1].score);
    let mut losses = BTreeMap::new();
    for (name, path) in [
        ("teacher", out.teacher_log()),
        ("distill_stage1", out.distill_log(1)),
        ("distill_stage2", out.distill_log(2)),
    ] {
        if let Some(s) = loss_summary(&path)? {
            losses.insert(name.to_string(), s);
        }
    }
    Ok(Report {
        schema_version: REPORT_SCHEMA,
        metric: l2.metric.clone(),
        comparison,
        ordering_holds,
        teacher_gap: teacher - s2,
        stage1: summary(&l1),
        stage2: summary(&l2),
        heatmap: read_heatmap(&out.heatmap())?,
        losses,
        bench_exponents: read_bench(&out.bench_json())?,
    })
}
