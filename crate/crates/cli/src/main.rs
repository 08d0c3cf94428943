use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use scanpath_core::ablation::{run_ablation, AblationSpec};
use scanpath_core::config::RunConfig;
use scanpath_core::datamodel::{Dataset, Modality};
use scanpath_core::evalpipe::{degradation_report, run_rollouts, HistoryFeed, RolloutConfig};
use scanpath_core::integrator::{load_checkpoint, save_checkpoint, Model, Variant};
use scanpath_core::metrics::{aggregate, evaluate_all, observer_means, paired_ttest, video_variance, write_records, GroupKey, Metric, Protocol};
use scanpath_core::synthgen::generate_dataset;
use scanpath_core::train::{train_loop, write_log};
use scanpath_core::verify::{run_verify, VerifyLevel};
use scanpath_core::Error;

/// Environment variable that overrides `--workers`.
const THREADS_ENV: &str = "SPCM_THREADS";

#[derive(Parser)]
#[command(name = "scanpath", version, about = "Personalized dynamic scanpath prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-step-ahead evaluation of a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1v1")]
        protocol: Vec<Protocol>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Autoregressive multi-step rollout and degradation report.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// raw, reblur or teacher_forced; the checkpoint's run config when absent.
        #[arg(long)]
        feed: Option<String>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score one model per non-empty cue subset.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "saliency,gaze,expression")]
        cues: Vec<Modality>,
        #[arg(long, value_delimiter = ',', default_value = "argmu,largmu")]
        variants: Vec<Variant>,
        /// Training seeds; the config seed when absent.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient and oracle self-checks.
    Verify {
        #[arg(long, default_value = "all")]
        level: VerifyLevel,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{failed} of {total} verification checks failed")]
    Verify { failed: usize, total: usize },
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => match e {
                Error::Shape { .. } => "shape",
                Error::NonFinite { .. } => "non_finite",
                Error::InvalidArgument(_) => "invalid_argument",
                Error::Backward(_) => "backward",
                Error::Container { .. } => "container",
                Error::Io { .. } => "io",
                Error::Json { .. } => "json",
                Error::Manifest(_) => "manifest",
                Error::Config(_) => "config",
                Error::Optimizer(_) => "optimizer",
            },
            CliError::Usage(_) => "usage",
            CliError::Verify { .. } => "verify",
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn workers(flag: usize) -> CliResult<usize> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?,
        Err(_) => flag,
    };
    if n == 0 {
        return Err(CliError::Usage("worker count must be at least 1".into()));
    }
    Ok(n)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e).into())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

/// Run config stored with a checkpoint, or the defaults when absent.
fn checkpoint_run(meta: &serde_json::Value) -> CliResult<RunConfig> {
    match meta.get("run") {
        Some(v) => Ok(RunConfig::from_json(&v.to_string())?),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_gen(config: Option<&Path>, out: &Path) -> CliResult<serde_json::Value> {
    let run = load_config(config)?;
    let manifest = generate_dataset(&run.data)?.save(out)?;
    write_json(&out.join("run_config.json"), &run.to_json())?;
    Ok(json!({ "manifest": manifest }))
}

fn cmd_train(config: Option<&Path>, data: &Path, out: &Path) -> CliResult<serde_json::Value> {
    let run = load_config(config)?;
    let dataset = Dataset::load(data)?;
    let outcome = train_loop(&run.training(), &run.model, &dataset)?;
    create_dir(out)?;
    let checkpoint = out.join("model.spcm");
    let meta = json!({
        "run": run.to_json(),
        "best_epoch": outcome.best_epoch,
        "best_val": outcome.best_val,
        "epochs_run": outcome.epochs_run,
    });
    save_checkpoint(&checkpoint, &outcome.model, meta)?;
    write_log(out.join("train_log.jsonl"), &outcome.log)?;
    write_json(&out.join("run_config.json"), &run.to_json())?;
    Ok(json!({
        "checkpoint": checkpoint,
        "best_epoch": outcome.best_epoch,
        "best_val": outcome.best_val,
        "epochs_run": outcome.epochs_run,
    }))
}

fn load_model(path: &Path, dataset: &Dataset) -> CliResult<(Model, RunConfig)> {
    let (model, header) = load_checkpoint(path)?;
    let c = model.config();
    if (c.height, c.width) != (dataset.height(), dataset.width()) {
        return Err(Error::Config(format!(
            "checkpoint resolution {}x{} differs from dataset {}x{}",
            c.height,
            c.width,
            dataset.height(),
            dataset.width()
        ))
        .into());
    }
    let run = checkpoint_run(&header.meta)?;
    Ok((model, run))
}

fn cmd_eval(checkpoint: &Path, data: &Path, protocols: &[Protocol], workers: usize, out: &Path) -> CliResult<serde_json::Value> {
    let dataset = Dataset::load(data)?;
    let (model, run) = load_model(checkpoint, &dataset)?;
    let mut protocols = protocols.to_vec();
    protocols.sort();
    protocols.dedup();
    let records = evaluate_all(&model, &dataset, &protocols, workers)?;
    create_dir(out)?;
    write_records(out.join("records.jsonl"), &records)?;
    aggregate(&records, &[GroupKey::Protocol]).write_csv(out.join("summary.csv"))?;
    aggregate(&records, &[GroupKey::Protocol, GroupKey::Observer]).write_csv(out.join("summary_by_observer.csv"))?;
    video_variance(&records, &[GroupKey::Protocol]).write_csv(out.join("video_variance.csv"))?;
    let mut summary = serde_json::Map::new();
    for &p in &protocols {
        let means = observer_means(&records, dataset.observers(), p, Metric::Aucj);
        summary.insert(format!("{}_aucj_per_observer", p.name()), json!(means));
    }
    if protocols.len() == 2 {
        let a = observer_means(&records, dataset.observers(), Protocol::OneVsOne, Metric::Aucj);
        let b = observer_means(&records, dataset.observers(), Protocol::OneVsInf, Metric::Aucj);
        summary.insert("ttest_1v1_vs_1vinf_aucj".into(), json!(paired_ttest(&a, &b)?));
    }
    let report = json!({
        "run": run.to_json(),
        "checkpoint": checkpoint,
        "protocols": protocols.iter().map(|p| p.name()).collect::<Vec<_>>(),
        "summary": summary,
    });
    write_json(&out.join("eval.json"), &report)?;
    Ok(report)
}

fn parse_feed(s: &str) -> CliResult<HistoryFeed> {
    serde_json::from_value(json!(s)).map_err(|_| CliError::Usage(format!("unknown history feed '{s}', expected raw, reblur or teacher_forced")))
}

fn cmd_rollout(checkpoint: &Path, data: &Path, steps: Option<usize>, feed: Option<&str>, workers: usize, out: &Path) -> CliResult<serde_json::Value> {
    let dataset = Dataset::load(data)?;
    let (model, mut run) = load_model(checkpoint, &dataset)?;
    if let Some(n) = steps {
        run.eval.steps = n;
    }
    if let Some(f) = feed {
        run.eval.feed = parse_feed(f)?;
    }
    let config: RolloutConfig = run.eval.clone();
    let records = run_rollouts(&model, &dataset, &config, workers)?;
    let report = degradation_report(&records)?;
    create_dir(out)?;
    write_records(out.join("rollout_records.jsonl"), &records)?;
    write_text(&out.join("degradation.csv"), &report.to_csv())?;
    let summary = json!({
        "run": run.to_json(),
        "checkpoint": checkpoint,
        "steps": report.steps,
    });
    write_json(&out.join("rollout.json"), &summary)?;
    Ok(summary)
}

struct AblateArgs<'a> {
    config: Option<&'a Path>,
    data: Option<&'a Path>,
    cues: &'a [Modality],
    variants: &'a [Variant],
    seeds: &'a [u64],
    workers: usize,
    out: &'a Path,
}

fn cmd_ablate(a: AblateArgs<'_>) -> CliResult<serde_json::Value> {
    let run = load_config(a.config)?;
    let dataset = match a.data {
        Some(p) => Dataset::load(p)?,
        None => generate_dataset(&run.data)?,
    };
    let spec = AblationSpec {
        variants: a.variants.to_vec(),
        cues: a.cues.to_vec(),
        seeds: if a.seeds.is_empty() { vec![run.seed] } else { a.seeds.to_vec() },
        ..AblationSpec::default()
    };
    let report = run_ablation(&run, &dataset, &spec, a.workers)?;
    create_dir(a.out)?;
    write_text(&a.out.join("ablation.csv"), &report.to_csv())?;
    let full: serde_json::Map<String, serde_json::Value> = spec
        .variants
        .iter()
        .map(|v| (v.name().to_owned(), json!(report.full_set_dominates(*v))))
        .collect();
    let summary = json!({
        "run": run.to_json(),
        "spec": spec,
        "rows": report.rows,
        "cells": report.cells(),
        "full_set_dominates": full,
    });
    write_json(&a.out.join("ablation.json"), &summary)?;
    Ok(json!({ "cells": report.cells(), "full_set_dominates": summary["full_set_dominates"] }))
}

fn cmd_verify(level: VerifyLevel) -> CliResult<serde_json::Value> {
    let checks = run_verify(level);
    for c in &checks {
        println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Verify { failed, total: checks.len() });
    }
    Ok(json!({ "checks": checks.len(), "failed": 0 }))
}

fn run(cli: Cli) -> CliResult<Option<serde_json::Value>> {
    let out = match cli.command {
        Command::Gen { config, out } => cmd_gen(config.as_deref(), &out)?,
        Command::Train { config, data, out } => cmd_train(config.as_deref(), &data, &out)?,
        Command::Eval {
            checkpoint,
            data,
            protocol,
            workers: w,
            out,
        } => cmd_eval(&checkpoint, &data, &protocol, workers(w)?, &out)?,
        Command::Rollout {
            checkpoint,
            data,
            steps,
            feed,
            workers: w,
            out,
        } => cmd_rollout(&checkpoint, &data, steps, feed.as_deref(), workers(w)?, &out)?,
        Command::Ablate {
            config,
            data,
            cues,
            variants,
            seeds,
            workers: w,
            out,
        } => cmd_ablate(AblateArgs {
            config: config.as_deref(),
            data: data.as_deref(),
            cues: &cues,
            variants: &variants,
            seeds: &seeds,
            workers: workers(w)?,
            out: &out,
        })?,
        Command::Verify { level } => {
            cmd_verify(level)?;
            return Ok(None);
        }
    };
    Ok(Some(out))
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim(), 2),
    };
    match run(cli) {
        Ok(Some(v)) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json values serialize"));
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), 1),
    }
}
