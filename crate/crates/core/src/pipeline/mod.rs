//! End-to-end experiment: teacher training, two distillation stages, two
//! search stages, the Full-placement heatmap and the aggregate report.
//!
//! Every step reads and writes files under one output directory, so the
//! steps can run separately (as the CLI does) or back to back.

mod config;
mod evaluator;
mod report;
mod teacher;

pub use config::{EvalConfig, ExperimentConfig, CONFIG_SCHEMA};
pub use evaluator::ProbeEvaluator;
pub use report::{arch_flops, build_report, ComparisonRow, LossSummary, Report, StageSummary, REPORT_SCHEMA};
pub use teacher::{train_teacher, TeacherConfig, TeacherRecord};

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::attention::AttentionKind;
use crate::bench::{bench_csv, time_forward, BenchConfig, BenchResult, BENCH_SCHEMA};
use crate::distill::{train_supernet, SuperNet};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::search::{beam_search_stage1, beam_search_stage2, fa_placement_heatmap, heatmap_csv, HeatmapRow, Memoized, SearchLedger};
use crate::task::{dump_sample, generate_sample, Dataset};
use crate::vit::{load_checkpoint, save_checkpoint, ArchDescriptor, InheritMode, MiniViT};

/// Stream ids for the fixed evaluation sets.
const EVAL_TRAIN_STREAM: u64 = 0xE7A1_0001;
const EVAL_VAL_STREAM: u64 = 0xE7A1_0002;
const SQUEEZE_INIT_STREAM: u64 = 0x5EED_0001;

/// File layout under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn teacher(&self) -> PathBuf {
        self.root.join("teacher")
    }
    pub fn teacher_log(&self) -> PathBuf {
        self.root.join("teacher_log.jsonl")
    }
    pub fn supernet(&self, stage: u8) -> PathBuf {
        self.root.join(format!("supernet_stage{stage}"))
    }
    pub fn distill_log(&self, stage: u8) -> PathBuf {
        self.root.join(format!("distill_stage{stage}.jsonl"))
    }
    pub fn ledger(&self, stage: u8) -> PathBuf {
        self.root.join(format!("search_stage{stage}.json"))
    }
    pub fn heatmap(&self) -> PathBuf {
        self.root.join("heatmap.csv")
    }
    pub fn bench_csv(&self) -> PathBuf {
        self.root.join("bench.csv")
    }
    pub fn bench_json(&self) -> PathBuf {
        self.root.join("bench.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn comparison_csv(&self) -> PathBuf {
        self.root.join("comparison.csv")
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::State(format!("{what} not found at {}; run `{hint}` first", path.display())))
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

pub fn read_ledger(path: &Path) -> Result<SearchLedger> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn stage_arch(ledger: &SearchLedger, depth: usize) -> Result<ArchDescriptor> {
    let code = ledger
        .final_arch
        .as_deref()
        .ok_or_else(|| Error::State("stage-1 ledger has no final arch (search aborted?)".into()))?;
    ArchDescriptor::parse_with_depth(code, depth)
}

/// Fixed probe train/validation sets shared by every evaluation.
pub fn eval_sets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    Ok((
        Dataset::generate(&cfg.task, cfg.seed, EVAL_TRAIN_STREAM, cfg.eval.train_images)?,
        Dataset::generate(&cfg.task, cfg.seed, EVAL_VAL_STREAM, cfg.eval.val_images)?,
    ))
}

pub fn run_train_teacher(cfg: &ExperimentConfig, out: &Layout) -> Result<MiniViT<f32>> {
    cfg.validate()?;
    fs::create_dir_all(&out.root)?;
    let (teacher, log) = train_teacher(&cfg.vit, &cfg.task, &cfg.teacher)?;
    save_checkpoint(&teacher, &out.teacher(), Default::default())?;
    let lines: String = log.iter().map(|r| serde_json::to_string(r).expect("plain record") + "\n").collect();
    fs::write(out.teacher_log(), lines)?;
    let spec = &cfg.task;
    let rng = Rng::with_stream(cfg.seed, EVAL_VAL_STREAM);
    for i in 0..2 {
        dump_sample(&generate_sample(&mut rng.split(i), spec), spec, &out.samples(), i as usize)?;
    }
    Ok(teacher)
}

pub fn load_teacher(out: &Layout) -> Result<MiniViT<f32>> {
    require(&out.teacher(), "teacher checkpoint", "train-teacher")?;
    Ok(load_checkpoint(&out.teacher())?.0)
}

/// Distills one stage and saves its supernet. A numeric abort still saves
/// the last good supernet before reporting the error.
pub fn run_distill(cfg: &ExperimentConfig, out: &Layout, stage: u8) -> Result<SuperNet<f32>> {
    cfg.validate()?;
    let teacher = load_teacher(out)?;
    let (mut supernet, dcfg) = match stage {
        1 => {
            let mut rng = Rng::with_stream(cfg.seed, SQUEEZE_INIT_STREAM);
            (SuperNet::stage1(&teacher, &mut rng, InheritMode::All)?, &cfg.distill1)
        }
        2 => {
            require(&out.supernet(1), "stage-1 supernet checkpoint", "distill --stage 1")?;
            require(&out.ledger(1), "stage-1 search ledger", "search --stage 1")?;
            let s1 = SuperNet::<f32>::load(&out.supernet(1))?;
            let arch = stage_arch(&read_ledger(&out.ledger(1))?, teacher.depth())?;
            (SuperNet::stage2(&s1, &arch)?, &cfg.distill2)
        }
        s => return Err(Error::Config(format!("stage must be 1 or 2, got {s}"))),
    };
    let result = train_supernet(&teacher, &mut supernet, &cfg.task, dcfg);
    supernet.save(&out.supernet(stage))?;
    let log = result?;
    fs::write(out.distill_log(stage), log.to_jsonl())?;
    Ok(supernet)
}

/// Probe score of the teacher on the shared evaluation sets.
pub fn teacher_score(cfg: &ExperimentConfig, teacher: &MiniViT<f32>, sets: &(Dataset, Dataset)) -> Result<f64> {
    let mut e = ProbeEvaluator::new(teacher, &sets.0, &sets.1, &cfg.eval.probe);
    crate::search::Evaluator::score(&mut e, &teacher.arch)
}

/// Runs one search stage and writes its ledger (also when it aborts).
pub fn run_search(cfg: &ExperimentConfig, out: &Layout, stage: u8) -> Result<SearchLedger> {
    cfg.validate()?;
    let sets = eval_sets(cfg)?;
    let result = match stage {
        1 => {
            require(&out.supernet(1), "stage-1 supernet checkpoint", "distill --stage 1")?;
            let sn = SuperNet::<f32>::load(&out.supernet(1))?;
            let mut e = Memoized::new(ProbeEvaluator::new(&sn.model, &sets.0, &sets.1, &cfg.eval.probe));
            beam_search_stage1(&mut e, sn.model.depth(), &cfg.search1)
        }
        2 => {
            require(&out.supernet(2), "stage-2 supernet checkpoint", "distill --stage 2")?;
            require(&out.ledger(1), "stage-1 search ledger", "search --stage 1")?;
            let teacher = load_teacher(out)?;
            let sn = SuperNet::<f32>::load(&out.supernet(2))?;
            let base = stage_arch(&read_ledger(&out.ledger(1))?, sn.model.depth())?;
            let t = teacher_score(cfg, &teacher, &sets)?;
            let mut e = Memoized::new(ProbeEvaluator::new(&sn.model, &sets.0, &sets.1, &cfg.eval.probe));
            beam_search_stage2(&mut e, &base, t, &cfg.search2)
        }
        s => return Err(Error::Config(format!("stage must be 1 or 2, got {s}"))),
    };
    match result {
        Ok((_, ledger)) => {
            fs::write(out.ledger(stage), ledger.to_json())?;
            Ok(ledger)
        }
        Err(abort) => {
            fs::write(out.ledger(stage), abort.partial.to_json())?;
            Err(abort.into())
        }
    }
}

/// Per-layer Full placement scores around the stage-1 arch, using the
/// stage-2 supernet.
pub fn run_heatmap(cfg: &ExperimentConfig, out: &Layout) -> Result<Vec<HeatmapRow>> {
    cfg.validate()?;
    require(&out.supernet(2), "stage-2 supernet checkpoint", "distill --stage 2")?;
    require(&out.ledger(1), "stage-1 search ledger", "search --stage 1")?;
    let sets = eval_sets(cfg)?;
    let sn = SuperNet::<f32>::load(&out.supernet(2))?;
    let base = stage_arch(&read_ledger(&out.ledger(1))?, sn.model.depth())?;
    let mut e = Memoized::new(ProbeEvaluator::new(&sn.model, &sets.0, &sets.1, &cfg.eval.probe));
    let rows = fa_placement_heatmap(&mut e, &base)?;
    fs::write(out.heatmap(), heatmap_csv(&rows))?;
    Ok(rows)
}

#[derive(Serialize)]
struct BenchFile<'a> {
    schema_version: u32,
    config: &'a BenchConfig,
    results: &'a [BenchResult],
}

pub fn run_bench(bench: &BenchConfig, out: &Layout) -> Result<Vec<BenchResult>> {
    fs::create_dir_all(&out.root)?;
    let results = bench.kinds.iter().map(|&k| time_forward(k, bench)).collect::<Result<Vec<_>>>()?;
    fs::write(out.bench_csv(), bench_csv(&results))?;
    write_json(&out.bench_json(), &BenchFile { schema_version: BENCH_SCHEMA, config: bench, results: &results })?;
    Ok(results)
}

/// Builds the report from the files present and writes it with its CSV.
pub fn run_report(cfg: &ExperimentConfig, out: &Layout) -> Result<Report> {
    let report = build_report(&out.root, &cfg.vit)?;
    write_json(&out.report(), &report)?;
    fs::write(out.comparison_csv(), report.comparison_csv())?;
    Ok(report)
}

/// The whole pipeline on `cfg`.
pub fn run_demo(cfg: &ExperimentConfig, out: &Layout, bench: Option<&BenchConfig>) -> Result<Report> {
    run_train_teacher(cfg, out)?;
    run_distill(cfg, out, 1)?;
    run_search(cfg, out, 1)?;
    run_distill(cfg, out, 2)?;
    run_search(cfg, out, 2)?;
    run_heatmap(cfg, out)?;
    if let Some(b) = bench {
        run_bench(b, out)?;
    }
    run_report(cfg, out)
}

/// Count of layers of `kind` in a ledger's final arch.
pub fn final_count(ledger: &SearchLedger, kind: AttentionKind) -> Option<usize> {
    ledger.final_arch.as_ref().and_then(|a| a.parse::<ArchDescriptor>().ok()).map(|a| a.count(kind))
}
