//! Command-line front end.
//!
//! Any `--key value` (or `--key=value`) whose key is a configuration key
//! overrides the config file; everything else goes to clap.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::classifier::HeadKind;
use crate::config::RunConfig;
use crate::dataset::{Dataset, SplitKind};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, GradCheckConfig};
use crate::model::{Checkpoint, FeatureBank};
use crate::pipeline::{make_dataset, run_eval, run_stage1, run_stage2};
use crate::tape::OpKind;
use crate::trainer::TrainLog;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

pub const FEATURES_HEADER: &str = "fewshot-features 1";

#[derive(Debug, Parser)]
#[command(
    name = "fewshot",
    version,
    about = "Few-shot recognition without forgetting",
    after_help = "Any configuration key can be overridden on the command line, e.g. `--seed 3 --head dot --s2-lr 0.05`.\nUnder `eval`, `--shots N` sets the evaluation shot count."
)]
struct Cli {
    /// Base configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, hide = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
        stage: u32,
        /// Dataset file; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stage-1 checkpoint (stage 2 only).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch JSON-lines log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on few-shot tasks.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        /// Metrics report (JSON); stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare autodiff gradients with finite differences.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Comma-separated subset of checks.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        /// Test hook: corrupt the adjoint of one operation.
        #[arg(long, value_name = "OP")]
        corrupt_adjoint: Option<String>,
    },
    /// Write features of one split as text.
    DumpFeatures {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitKind,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownKey(_) => EXIT_CONFIG,
        Error::Io(_) | Error::Format(_) | Error::UnsupportedVersion { .. } | Error::Json(_) => EXIT_IO,
        _ => EXIT_OTHER,
    }
}

/// Rewrites configuration overrides into `--set key=value`. Under `eval`,
/// `--shots` means the evaluation shot count.
fn route_overrides(args: Vec<String>) -> Vec<String> {
    let subcommand = args
        .iter()
        .skip(1)
        .find(|a| ["gen-data", "train", "eval", "grad-check", "dump-features"].contains(&a.as_str()));
    let is_eval = subcommand.is_some_and(|a| a == "eval");
    let keys: Vec<String> = RunConfig::default()
        .entries()
        .into_iter()
        .map(|(k, _)| k.to_string())
        .collect();
    let is_key = |k: &str| keys.iter().any(|x| x == k);
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            out.push(a);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let mut key = key.replace('-', "_");
        if is_eval && key == "shots" {
            key = "eval_shots".into();
        }
        if !is_key(&key) {
            out.push(a);
            continue;
        }
        let value = inline.or_else(|| it.next()).unwrap_or_default();
        out.push("--set".into());
        out.push(format!("{key}={value}"));
    }
    out
}

fn build_config(cli: &Cli, base: Option<&str>) -> Result<RunConfig> {
    let mut config = match base {
        Some(text) => RunConfig::from_text(text)?,
        None => RunConfig::default(),
    };
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)?;
        config.apply(&crate::config::parse_kv(&text)?)?;
    }
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
        config.set(k, v)?;
    }
    config.validate()?;
    Ok(config)
}

fn load_data(path: Option<&Path>, config: &mut RunConfig) -> Result<Dataset> {
    match path {
        Some(p) => {
            let d = Dataset::load(p)?;
            config.data = d.config.clone();
            config.seed = d.config.seed;
            if d.input_dim() != config.extractor.input_dim {
                return Err(Error::Config(format!(
                    "dataset has input_dim {}, configuration {}",
                    d.input_dim(),
                    config.extractor.input_dim
                )));
            }
            Ok(d)
        }
        None => make_dataset(config),
    }
}

fn write_log(path: Option<&Path>, log: &TrainLog) -> Result<()> {
    for r in &log.epochs {
        eprintln!("{r}");
    }
    if let Some(p) = path {
        std::fs::write(p, log.to_jsonl()?)?;
    }
    Ok(())
}

/// Line-delimited features: a version line, a `key=value` header line,
/// then `category index v1 v2 ...` per example.
pub fn render_features(ckpt: &Checkpoint, dataset: &Dataset, split: SplitKind) -> Result<String> {
    let cats = dataset.split.get(split);
    let model = &ckpt.model;
    let bank = FeatureBank::compute(&model.extractor, dataset, cats)?;
    let normalize = model.head() == HeadKind::Cosine;
    let rows: usize = cats.iter().map(|&c| dataset.count(c)).sum();
    let mut out = format!(
        "{FEATURES_HEADER}\nsplit={split} head={} normalized={normalize} dim={} rows={rows}\n",
        model.head(),
        model.feature_dim(),
    );
    for &c in cats {
        let f = bank.category(c);
        for i in 0..f.rows() {
            let row = f.row(i);
            let norm = if normalize {
                row.iter().map(|v| v * v).sum::<f64>().sqrt().max(crate::tape::NORM_EPS)
            } else {
                1.0
            };
            out.push_str(&format!("{c} {i}"));
            for v in row {
                out.push_str(&format!(" {}", v / norm));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::GenData { out } => {
            let config = build_config(cli, None)?;
            let d = make_dataset(&config)?;
            d.save(out)?;
            println!(
                "base {}  val {}  test {}  examples/category {}  seed {}  -> {}",
                d.split.base.len(),
                d.split.val_novel.len(),
                d.split.test_novel.len(),
                d.config.examples_per_category,
                d.config.seed,
                out.display()
            );
        }
        Command::Train {
            stage,
            data,
            ckpt,
            out,
            log,
        } => {
            let ckpt = match (stage, ckpt) {
                (1, None) => None,
                (1, Some(_)) => return Err(Error::Config("stage 1 starts from scratch; drop --ckpt".into())),
                (_, Some(p)) => Some(Checkpoint::load(p)?),
                (_, None) => return Err(Error::Config("stage 2 needs --ckpt".into())),
            };
            let mut config = build_config(cli, ckpt.as_ref().map(|c| c.run_config.as_str()))?;
            let dataset = load_data(data.as_deref(), &mut config)?;
            let (result, train_log) = match &ckpt {
                None => run_stage1(&config, &dataset)?,
                Some(c) => {
                    if c.stage != 1 {
                        return Err(Error::Config(format!("--ckpt is a stage-{} checkpoint", c.stage)));
                    }
                    run_stage2(&config, &dataset, c)?
                }
            };
            write_log(log.as_deref(), &train_log)?;
            result.save(out)?;
            eprintln!(
                "stage {stage} done, extractor checksum {:016x}",
                result.model.extractor_checksum()
            );
        }
        Command::Eval { data, ckpt, out } => {
            let ckpt = Checkpoint::load(ckpt)?;
            let mut config = build_config(cli, Some(&ckpt.run_config))?;
            let dataset = load_data(data.as_deref(), &mut config)?;
            let json = run_eval(&config, &dataset, &ckpt.model)?.to_json()?;
            match out {
                Some(p) => std::fs::write(p, json)?,
                None => std::io::stdout().write_all(json.as_bytes())?,
            }
        }
        Command::GradCheck {
            instances,
            only,
            corrupt_adjoint,
        } => {
            let config = build_config(cli, None)?;
            let corrupt = match corrupt_adjoint {
                None => None,
                Some(name) => Some(
                    OpKind::from_name(name)
                        .filter(|k| *k != OpKind::Leaf)
                        .ok_or_else(|| Error::Config(format!("unknown operation `{name}`")))?,
                ),
            };
            let gc = GradCheckConfig {
                instances: *instances,
                seed: config.seed,
                corrupt,
                ..Default::default()
            };
            let report = run_suite(&gc, only)?;
            for r in &report.results {
                println!("{r}");
            }
            println!("{:.2}s", report.seconds);
            if !report.passed() {
                eprintln!("gradient check failed");
                return Ok(EXIT_CHECK);
            }
        }
        Command::DumpFeatures {
            data,
            ckpt,
            split,
            out,
        } => {
            let ckpt = Checkpoint::load(ckpt)?;
            let mut config = build_config(cli, Some(&ckpt.run_config))?;
            let dataset = load_data(data.as_deref(), &mut config)?;
            std::fs::write(out, render_features(&ckpt, &dataset, *split)?)?;
        }
    }
    Ok(EXIT_OK)
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(route_overrides(args)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
