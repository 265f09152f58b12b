use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vocalburst::config::{Frontend, PipelineConfig};
use vocalburst::data::{Split, TaskSet};
use vocalburst::pipeline::{
    append_run_log, load_labels, run_evaluate, run_featurize, run_fuse, run_predict, run_preprocess, run_synth,
    run_train, FuseMode, WeightsFile, CHECKPOINT_FILE, INDEX_FILE,
};
use vocalburst::fusion::FusionWeights;
use vocalburst::metrics::evaluate;

/// Environment variable naming the root directory for stage outputs.
const OUT_ENV: &str = "VOCALBURST_OUT";

#[derive(Parser, Debug)]
#[command(name = "vocalburst", version, about = "Vocal-burst multitask pipeline")]
struct Cli {
    /// TOML pipeline config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every seeded stage; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the labeled synthetic corpus.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Highpass, denoise, trim and normalize every clip of a manifest.
    Preprocess {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute per-utterance features and the dataset index.
    Featurize {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        frontend: Option<Frontend>,
        /// Directory of `<id>.vbft` embeddings for the external frontend.
        #[arg(long)]
        external_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a featurized dataset.
    Train {
        /// Feature index (`features.json`).
        #[arg(long)]
        features: Option<PathBuf>,
        /// `all` or a comma list of age, emotion, country.
        #[arg(long, default_value = "all")]
        tasks: TaskSet,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write predictions for one split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction file against a manifest or key file.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Late-fuse prediction files.
    Fuse(FuseArgs),
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Prediction files, one per model.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// JSON weights file with `age`, `emotion` and `country` vectors.
    #[arg(long, conflicts_with = "search")]
    weights: Option<PathBuf>,
    /// Grid-search per-task weights against `--labels`.
    #[arg(long, requires = "labels")]
    search: bool,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    step: Option<f64>,
    /// Held-out prediction files (same model order) to fuse with the
    /// chosen weights.
    #[arg(long, num_args = 1..)]
    apply: Vec<PathBuf>,
    #[arg(long, requires = "apply")]
    apply_out: Option<PathBuf>,
    /// Labels for the held-out files, to report both scores side by side.
    #[arg(long, requires = "apply")]
    heldout_labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn out_root(cfg: &PipelineConfig) -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .or_else(|| cfg.paths.out_root.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg.resolved())
}

fn tasks_label(tasks: TaskSet) -> String {
    if tasks == TaskSet::ALL {
        return "all".into();
    }
    tasks.iter().map(|t| t.as_str()).collect::<Vec<_>>().join("+")
}

fn score_line(label: &str, s: &Result<f64, String>) -> String {
    match s {
        Ok(v) => format!("{label} s_mtl={v:.6}"),
        Err(why) => format!("{label} s_mtl=undefined ({why})"),
    }
}

fn run(cli: &Cli, cfg: &mut PipelineConfig, root: &Path) -> Result<()> {
    match &cli.command {
        Command::Synth { out, train, val, test } => {
            for (slot, v) in [(&mut cfg.synth.train, train), (&mut cfg.synth.val, val), (&mut cfg.synth.test, test)] {
                if let Some(v) = v {
                    *slot = *v;
                }
            }
            let dir = out.clone().unwrap_or_else(|| root.join("synth"));
            let manifest = run_synth(cfg, &dir)?;
            println!("{}", manifest.display());
        }
        Command::Preprocess { manifest, out } => {
            let manifest = manifest.clone().unwrap_or_else(|| root.join("synth").join("manifest.csv"));
            let dir = out.clone().unwrap_or_else(|| root.join("clean"));
            println!("{}", run_preprocess(cfg, &manifest, &dir)?.display());
        }
        Command::Featurize {
            manifest,
            frontend,
            external_dir,
            out,
        } => {
            if let Some(f) = frontend {
                cfg.features.frontend = *f;
            }
            if external_dir.is_some() {
                cfg.features.external_dir = external_dir.clone();
            }
            let manifest = manifest.clone().unwrap_or_else(|| root.join("clean").join("manifest.csv"));
            let dir = out
                .clone()
                .unwrap_or_else(|| root.join("features").join(cfg.features.frontend.as_str()));
            println!("{}", run_featurize(cfg, &manifest, &dir)?.display());
        }
        Command::Train {
            features,
            tasks,
            steps,
            out,
        } => {
            if tasks.is_empty() {
                bail!("no tasks selected");
            }
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            let frontend = cfg.features.frontend.as_str();
            let index = features
                .clone()
                .unwrap_or_else(|| root.join("features").join(frontend).join(INDEX_FILE));
            let dir = out
                .clone()
                .unwrap_or_else(|| root.join("models").join(format!("{frontend}_{}", tasks_label(*tasks))));
            let summary = run_train(cfg, &index, &dir, *tasks)?;
            if let Some(last) = summary.outcome.steps.last() {
                println!("final step {} loss {:.6}", last.step, last.loss.total);
            }
            if let Some(r) = &summary.val_report {
                print!("{}", r.to_key_values());
            }
            println!("{}", summary.checkpoint.display());
        }
        Command::Predict {
            checkpoint,
            features,
            split,
            out,
        } => {
            let checkpoint = if checkpoint.is_dir() {
                checkpoint.join(CHECKPOINT_FILE)
            } else {
                checkpoint.clone()
            };
            let index = features.clone().unwrap_or_else(|| {
                root.join("features")
                    .join(cfg.features.frontend.as_str())
                    .join(INDEX_FILE)
            });
            let preds = run_predict(&checkpoint, &index, *split, out)?;
            println!("{} predictions -> {}", preds.len(), out.display());
        }
        Command::Evaluate { predictions, labels, out } => {
            let out = out.clone().unwrap_or_else(|| {
                let mut name = predictions.file_name().unwrap_or_default().to_os_string();
                name.push(".report.txt");
                predictions.with_file_name(name)
            });
            let report = run_evaluate(cfg, predictions, labels, &out)?;
            print!("{}", report.to_key_values());
        }
        Command::Fuse(args) => fuse_command(cfg, args)?,
    }
    Ok(())
}

fn fuse_command(cfg: &PipelineConfig, args: &FuseArgs) -> Result<()> {
    let mode = if args.search {
        FuseMode::Search {
            labels: args.labels.clone().expect("clap enforces --labels"),
            step: args.step.unwrap_or(cfg.fusion.grid_step),
        }
    } else if let Some(path) = &args.weights {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let w: WeightsFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        FuseMode::Fixed(w.to_weights()?)
    } else {
        FuseMode::Fixed(FusionWeights::uniform(args.inputs.len())?)
    };
    let summary = run_fuse(cfg, &args.inputs, &mode, &args.out)?;
    println!(
        "weights age={:?} emotion={:?} country={:?}",
        summary.weights.age, summary.weights.emotion, summary.weights.country
    );
    if let Some(r) = &summary.report {
        println!("{}", score_line("val", &r.s_mtl));
    }
    if !args.apply.is_empty() {
        if args.apply.len() != args.inputs.len() {
            bail!("--apply needs {} files, got {}", args.inputs.len(), args.apply.len());
        }
        let out = args.apply_out.clone().unwrap_or_else(|| args.out.with_extension("heldout.csv"));
        let held = run_fuse(cfg, &args.apply, &FuseMode::Fixed(summary.weights.clone()), &out)?;
        if let Some(labels) = &args.heldout_labels {
            let gold = load_labels(labels, &cfg.schema()?)?;
            let rows: Vec<_> = held.fused.into_iter().filter(|p| gold.contains_key(&p.id)).collect();
            let r = evaluate(&rows, &gold, cfg.countries.len())?;
            println!("{}", score_line("heldout", &r.s_mtl));
        }
        println!("{}", out.display());
    }
    println!("{}", args.out.display());
    Ok(())
}

fn stage_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Synth { .. } => "synth",
        Command::Preprocess { .. } => "preprocess",
        Command::Featurize { .. } => "featurize",
        Command::Train { .. } => "train",
        Command::Predict { .. } => "predict",
        Command::Evaluate { .. } => "evaluate",
        Command::Fuse(_) => "fuse",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    let root = out_root(&cfg);
    let start = Instant::now();
    let result = run(&cli, &mut cfg, &root);
    let status = if result.is_ok() { "ok" } else { "error" };
    if let Err(e) = append_run_log(&root, stage_name(&cli.command), &cfg, start.elapsed(), status) {
        eprintln!("warning: could not append run log: {e}");
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
