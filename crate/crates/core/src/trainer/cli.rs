//! Command-line front end.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checks::{gradcheck_suite, oracle_check, GRADCHECK_POINTS, ORACLE_VECTORS};
use crate::encoders::{encode_elements, EncodedPair};
use crate::error::{Error, Result};
use crate::fdt::topk_correspondence;
use crate::model::Mode;
use crate::trainer::checkpoint::{load_checkpoint, save_checkpoint};
use crate::trainer::config::TrainConfig;
use crate::trainer::eval::{evaluate_completeness, evaluate_retrieval, mean_support_fraction, FeatureSource, RetrievalMetrics};
use crate::trainer::train::{train, DeskData};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.fdt";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Parser, Debug)]
#[command(name = "fdt", version, about = "Finite discrete token representations on a synthetic concept world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint.fdt and metrics.jsonl to --out.
    Train(TrainArgs),
    /// Retrieval recalls of a checkpoint on its held-out pool, as JSON.
    Eval(EvalArgs),
    /// Completeness probe of a checkpoint, as JSON.
    Probe(CheckpointArgs),
    /// Top-k elements per codebook token over the held-out pool, as JSON.
    DumpCorrespondence(DumpArgs),
    /// Finite-difference check of every gradient.
    Gradcheck(GradcheckArgs),
    /// Sparsemax against the exhaustive simplex projection.
    Oracle(OracleArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets the model, world and data seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["softmax", "sparsemax", "clip", "clip-baseline"])]
    mode: Option<String>,
    #[arg(long, default_value = "fdt-run")]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// fdt, clip or weights; defaults to the checkpoint's own feature path.
    #[arg(long)]
    features: Option<String>,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = GRADCHECK_POINTS)]
    points: usize,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = ORACLE_VECTORS)]
    count: usize,
}

/// Outcome of a subcommand that ran to completion.
enum Outcome {
    Ok,
    /// A check ran and did not pass.
    Failed,
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn print_json<S: Serialize>(value: &S) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn build_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(mode) = &args.mode {
        cfg.mode = mode.parse::<Mode>()?;
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: &TrainArgs) -> Result<Outcome> {
    let cfg = build_config(args)?;
    let data = DeskData::build(&cfg)?;
    std::fs::create_dir_all(&args.out)?;
    let mut metrics = BufWriter::new(File::create(args.out.join(METRICS_FILE))?);
    let mut write_err = None;
    let result = train(&cfg, &data, |rec| {
        let line = serde_json::to_string(rec).expect("metrics serialize");
        if let Err(e) = writeln!(metrics, "{line}") {
            write_err.get_or_insert(e);
        }
        eprintln!("{line}");
    });
    metrics.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    match result {
        Ok(outcome) => {
            save_checkpoint(&ckpt_path, &outcome.checkpoint)?;
            if let Some(last) = outcome.metrics.last() {
                print_json(last)?;
            }
            Ok(Outcome::Ok)
        }
        Err(failure) => {
            if let Some(last_good) = &failure.last_good {
                save_checkpoint(&ckpt_path, last_good)?;
                eprintln!("training stopped at step {}; last good state saved to {}", failure.step, ckpt_path.display());
            }
            Err(failure.error)
        }
    }
}

#[derive(Serialize)]
struct EvalReport {
    source: &'static str,
    #[serde(flatten)]
    retrieval: RetrievalMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    support_fraction: Option<f64>,
}

fn cmd_eval(args: &EvalArgs) -> Result<Outcome> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let source = match &args.features {
        Some(s) => s.parse()?,
        None => FeatureSource::for_mode(ckpt.config.mode),
    };
    let data = DeskData::build(&ckpt.config)?;
    let opts = ckpt.config.forward_options();
    print_json(&EvalReport {
        source: source.as_str(),
        retrieval: evaluate_retrieval(&ckpt.params, &opts, &data.eval, source)?,
        support_fraction: mean_support_fraction(&ckpt.params, &opts, &data.eval)?,
    })?;
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct ProbeReport {
    completeness: f64,
    items: usize,
    comparisons: usize,
}

fn cmd_probe(args: &CheckpointArgs) -> Result<Outcome> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = DeskData::build(&ckpt.config)?;
    let probe = data.probe();
    print_json(&ProbeReport {
        completeness: evaluate_completeness(&ckpt.params, &ckpt.config.forward_options(), &probe)?,
        items: probe.len(),
        comparisons: probe.iter().map(|p| p.partials.len()).sum(),
    })?;
    Ok(Outcome::Ok)
}

fn cmd_dump(args: &DumpArgs) -> Result<Outcome> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let grounding = ckpt
        .config
        .forward_options()
        .grounding()
        .ok_or_else(|| Error::Config("dump-correspondence needs an FDT checkpoint".into()))?;
    let data = DeskData::build(&ckpt.config)?;
    let encoded = data
        .eval
        .iter()
        .enumerate()
        .map(|(pair_id, p)| {
            Ok(EncodedPair {
                patches: encode_elements(&p.patches, &ckpt.params.image_encoder)?,
                tokens: encode_elements(&p.tokens, &ckpt.params.text_encoder)?,
                pair_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let corr = topk_correspondence(&encoded, &ckpt.params.codebook, &ckpt.params.projection, &grounding, args.k)?;
    let json = serde_json::to_string_pretty(&corr)?;
    match &args.out {
        Some(path) => std::fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(Outcome::Ok)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Outcome> {
    if args.points == 0 {
        return Err(Error::Config("--points must be positive".into()));
    }
    let reports = gradcheck_suite(args.seed, args.points);
    for r in &reports {
        print_json(r)?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("gradcheck: {} ops, {} failed", reports.len(), failed);
    Ok(if failed == 0 { Outcome::Ok } else { Outcome::Failed })
}

fn cmd_oracle(args: &OracleArgs) -> Result<Outcome> {
    let report = oracle_check(args.seed, args.count)?;
    print_json(&report)?;
    Ok(if report.passed { Outcome::Ok } else { Outcome::Failed })
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Probe(a) => cmd_probe(a),
        Command::DumpCorrespondence(a) => cmd_dump(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Oracle(a) => cmd_oracle(a),
    };
    match result {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::Failed) => EXIT_VALIDATION,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

/// Checkpoint path written by `train --out dir`.
pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join(CHECKPOINT_FILE)
}
