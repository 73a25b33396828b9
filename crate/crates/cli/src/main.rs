use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use jetvit_core::bench::{BenchConfig, BenchKind};
use jetvit_core::pipeline::{self, ExperimentConfig, Layout};
use jetvit_core::{verify, Error};

const DEFAULT_OUT: &str = "jetvit-out";

#[derive(Parser, Debug)]
#[command(name = "jetvit", version, about = "Post-training hybrid attention search on a mini ViT")]
struct Cli {
    #[command(flatten)]
    run: RunArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment config (strict JSON; see `jetvit config`)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides JETVIT_OUT
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Re-derives every component seed from this value
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Numeric precision; the training pipeline runs in f32 only
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every oracle and gradient check
    Verify {
        /// Print results as JSON
        #[arg(long)]
        json: bool,
    },
    /// Print the default experiment config
    Config,
    /// Train the all-Full teacher
    TrainTeacher,
    /// Distill a supernet from the teacher
    Distill {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    /// Beam search over the supernet
    Search {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    /// Score Full attention at each layer of the stage-1 arch
    Heatmap,
    /// Time the attention kernels
    Bench(BenchArgs),
    /// Aggregate ledgers, logs and benchmarks into report.json
    Report,
    /// Run the whole pipeline
    Demo {
        /// Also run the kernel benchmark (wall-clock; not reproducible)
        #[arg(long)]
        bench: bool,
    },
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Benchmark config (strict JSON); flags below override it
    #[arg(long)]
    bench_config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    ns: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
}

fn load_config(run: &RunArgs) -> Result<ExperimentConfig, Error> {
    let cfg = match &run.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(match run.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn out_dir(run: &RunArgs) -> PathBuf {
    run.out
        .clone()
        .or_else(|| std::env::var_os("JETVIT_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn bench_config(args: &BenchArgs, seed: Option<u64>) -> Result<BenchConfig, Error> {
    let mut cfg = match &args.bench_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => BenchConfig::default(),
    };
    if let Some(k) = &args.kinds {
        cfg.kinds = k.iter().map(|s| BenchKind::parse(s)).collect::<Result<_, _>>()?;
    }
    if let Some(ns) = &args.ns {
        cfg.ns = ns.clone();
    }
    if let Some(r) = args.repeats {
        cfg.repeats = r;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_report(out: &Path, report: &pipeline::Report) {
    for r in &report.comparison {
        println!("{:<14} {:<10} score {:>7.3}  full layers {}  flops {}", r.name, r.arch, r.score, r.full_layers, r.flops);
    }
    println!("ordering holds: {}  teacher gap: {:.3}", report.ordering_holds, report.teacher_gap);
    println!("report: {}", out.join("report.json").display());
}

fn run(cli: Cli) -> Result<bool, Error> {
    let out = Layout::new(out_dir(&cli.run));
    if cli.run.precision == Precision::F64 && !matches!(cli.command, Command::Verify { .. } | Command::Config) {
        return Err(Error::Config("only `verify` supports --precision f64; the pipeline runs in f32".into()));
    }
    match cli.command {
        Command::Verify { json } => {
            let results = verify::run_all();
            if json {
                println!("{}", serde_json::to_string_pretty(&results)?);
            } else {
                for r in &results {
                    println!("{}", r.line());
                }
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            eprintln!("{} checks, {failed} failed", results.len());
            return Ok(failed == 0);
        }
        Command::Config => println!("{}", serde_json::to_string_pretty(&load_config(&cli.run)?)?),
        Command::TrainTeacher => {
            pipeline::run_train_teacher(&load_config(&cli.run)?, &out)?;
            println!("teacher: {}", out.teacher().display());
        }
        Command::Distill { stage } => {
            pipeline::run_distill(&load_config(&cli.run)?, &out, stage)?;
            println!("supernet: {}", out.supernet(stage).display());
        }
        Command::Search { stage } => {
            let ledger = pipeline::run_search(&load_config(&cli.run)?, &out, stage)?;
            println!(
                "stage {stage}: {} (score {:.3}, {:?})",
                ledger.final_arch.as_deref().unwrap_or("-"),
                ledger.final_score.unwrap_or(f64::NAN),
                ledger.stop_reason
            );
        }
        Command::Heatmap => {
            for r in pipeline::run_heatmap(&load_config(&cli.run)?, &out)? {
                println!("layer {:>2}  score {:>7.3}  delta {:>+7.3}", r.layer, r.score, r.delta);
            }
        }
        Command::Bench(args) => {
            let cfg = bench_config(&args, cli.run.seed)?;
            for r in pipeline::run_bench(&cfg, &out)? {
                println!("{:<15} exponent {:.3}  median ms {:?}", r.kind.name(), r.exponent, r.median_ms);
                for w in &r.warnings {
                    eprintln!("warning: {w}");
                }
            }
        }
        Command::Report => {
            let report = pipeline::run_report(&load_config(&cli.run)?, &out)?;
            print_report(&out.root, &report);
        }
        Command::Demo { bench } => {
            let cfg = load_config(&cli.run)?;
            let b = bench.then(BenchConfig::default);
            let report = pipeline::run_demo(&cfg, &out, b.as_ref())?;
            print_report(&out.root, &report);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
