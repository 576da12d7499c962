//! Command-line surface: dataset synthesis, training, ablation sweeps,
//! evaluation, and the gradient-check report.

use crate::checkpoint;
use crate::checks;
use crate::config::RunConfig;
use crate::data;
use crate::error::{Error, Result};
use crate::eval;
use crate::model::Model;
use crate::trainer;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "metricformer",
    version,
    about = "Two-branch metric-learning trainer: angular-margin head + transformer loss head"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic identity dataset as a PNG folder
    Synth(SynthArgs),
    /// Train the two-branch model on an image folder
    Train(TrainArgs),
    /// Run the alpha sweep: one training run per alpha with a shared seed
    Ablate(AblateArgs),
    /// Evaluate a checkpoint: verification accuracy and variance report
    Eval(EvalArgs),
    /// Run the finite-difference gradient-check suite
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing non-empty output directory
    #[arg(long)]
    force: bool,
    /// Also write pairs.tsv with this many verification pairs (half positive)
    #[arg(long, default_value_t = 0)]
    pairs: usize,
}

#[derive(Args, Clone)]
struct OverrideArgs {
    /// weighted | summed_logits | metric_only
    #[arg(long)]
    combine_mode: Option<String>,
    #[arg(long)]
    alpha: Option<f32>,
    /// softmax | cosface | arcface | adaface
    #[arg(long)]
    loss: Option<String>,
    /// linear | metric
    #[arg(long)]
    head_variant: Option<String>,
    /// none | learned
    #[arg(long)]
    pe: Option<String>,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// holdout verification every k epochs (0 disables)
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

impl OverrideArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(m) = &self.combine_mode {
            cfg.train.combine_mode = m.parse()?;
        }
        if let Some(a) = self.alpha {
            cfg.train.alpha = a;
        }
        if let Some(l) = &self.loss {
            cfg.head.kind = l.parse()?;
        }
        if let Some(h) = &self.head_variant {
            cfg.train.head_variant = h.parse()?;
        }
        if let Some(p) = &self.pe {
            cfg.encoder.positional_encoding = p.parse()?;
        }
        if self.deterministic {
            cfg.train.deterministic = true;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = self.eval_every {
            cfg.train.eval_every = e;
        }
        if let Some(c) = self.checkpoint_every {
            cfg.train.checkpoint_every = c;
        }
        cfg.validate()
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file; defaults apply for missing keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// image folder: root/<identity>/<image files>
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "runs/ablate")]
    out: PathBuf,
    /// comma-separated alpha values, e.g. 0.3,0.4,0.5,0.6
    #[arg(long)]
    alphas: String,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// pair file: path_a<TAB>path_b<TAB>0|1, paths relative to --data
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value = "runs/eval")]
    out: PathBuf,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// run only items whose name contains this substring
    #[arg(long)]
    only: Option<String>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: Option<&'a RunConfig>,
    output_dir: String,
    started_unix: u64,
    finished_unix: u64,
    artifacts: Vec<String>,
}

fn now_unix(deterministic: bool) -> u64 {
    if deterministic {
        0
    } else {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    seed: u64,
    config: Option<&RunConfig>,
    started: u64,
    deterministic: bool,
    artifacts: &[PathBuf],
) -> Result<()> {
    for a in artifacts {
        if !a.exists() {
            return Err(Error::integrity(format!(
                "manifest references missing artifact {}",
                a.display()
            )));
        }
    }
    let manifest = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config,
        output_dir: out_dir.display().to_string(),
        started_unix: started,
        finished_unix: now_unix(deterministic),
        artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
    };
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::integrity(format!("manifest encode: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_dataset(root: &Path, cfg: &RunConfig) -> Result<data::LabeledDataset> {
    let (_, h, w) = cfg.backbone.input_size;
    let resize = if h == w { Some(h) } else { None };
    let (set, report) = data::load_folder(root, resize)?;
    if !report.skipped.is_empty() {
        eprintln!("skipped {} unreadable files", report.skipped.len());
    }
    Ok(set)
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    if args.out.exists() {
        let non_empty = std::fs::read_dir(&args.out)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if non_empty && !args.force {
            return Err(Error::usage(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                args.out.display()
            )));
        }
    }
    let set = data::synth_generate(args.classes, args.per_class, args.size, args.seed)?;
    data::export_png(&set, &args.out)?;
    let mut artifacts: Vec<PathBuf> = vec![args.out.join(&set.paths[0])];
    if args.pairs > 0 {
        let n_pos = args.pairs / 2;
        let pairs = data::make_pairs(&set, n_pos, args.pairs - n_pos, args.seed)?;
        let pair_path = args.out.join("pairs.tsv");
        data::write_pair_file(&pair_path, &pairs, &set)?;
        artifacts.push(pair_path);
    }
    let started = now_unix(true);
    write_manifest(&args.out, "synth", args.seed, None, started, true, &artifacts)?;
    println!(
        "wrote {} images ({} classes x {}) to {}",
        set.len(),
        args.classes,
        args.per_class,
        args.out.display()
    );
    Ok(())
}

fn run_training(
    cfg: &RunConfig,
    dataset: &data::LabeledDataset,
    out_dir: &Path,
) -> Result<trainer::TrainOutcome> {
    let model = Model::new(cfg.clone(), dataset.n_classes)?;
    let mut store = model.init_params(cfg.train.seed)?;
    let (train_set, holdout) = data::split_holdout(dataset, cfg.data.holdout_fraction);
    let holdout_ref = if cfg.train.eval_every > 0 {
        Some(&holdout)
    } else {
        None
    };
    trainer::train(&model, &mut store, &train_set, holdout_ref, out_dir)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_ref())?;
    args.overrides.apply(&mut cfg)?;
    let started = now_unix(cfg.train.deterministic);
    let dataset = load_dataset(&args.data, &cfg)?;
    let outcome = run_training(&cfg, &dataset, &args.out)?;
    write_manifest(
        &args.out,
        "train",
        cfg.train.seed,
        Some(&cfg),
        started,
        cfg.train.deterministic,
        &[
            outcome.epoch0_checkpoint.clone(),
            outcome.final_checkpoint.clone(),
            outcome.log_path.clone(),
        ],
    )?;
    println!(
        "trained {} epochs; mean loss {:.4} -> {:.4}; final checkpoint {}",
        outcome.epoch_losses.len(),
        outcome.epoch_losses.first().copied().unwrap_or(f32::NAN),
        outcome.epoch_losses.last().copied().unwrap_or(f32::NAN),
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn parse_alphas(spec: &str) -> Result<Vec<f32>> {
    let alphas: Vec<f32> = spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f32>()
                .map_err(|_| Error::usage(format!("bad alpha value '{s}'")))
        })
        .collect::<Result<_>>()?;
    if alphas.is_empty() {
        return Err(Error::usage("alpha list is empty"));
    }
    for (i, a) in alphas.iter().enumerate() {
        if alphas[..i].iter().any(|b| b == a) {
            return Err(Error::usage(format!("duplicate alpha value {a}")));
        }
    }
    Ok(alphas)
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let alphas = parse_alphas(&args.alphas)?;
    let mut base = load_config(args.config.as_ref())?;
    args.overrides.apply(&mut base)?;
    if base.train.eval_every == 0 {
        base.train.eval_every = 1; // the summary needs per-epoch accuracy
    }
    let started = now_unix(base.train.deterministic);
    let dataset = load_dataset(&args.data, &base)?;

    let mut summary = String::from("epoch,alpha,accuracy\n");
    let mut artifacts = Vec::new();
    let mut epoch0_hashes = Vec::new();
    for &alpha in &alphas {
        let mut cfg = base.clone();
        cfg.train.alpha = alpha;
        cfg.validate()?;
        let run_dir = args.out.join(format!("alpha_{alpha:.2}"));
        let outcome = run_training(&cfg, &dataset, &run_dir)?;
        epoch0_hashes.push(checkpoint::file_sha256(&outcome.epoch0_checkpoint)?);
        for &(epoch, acc) in &outcome.evals {
            summary.push_str(&format!("{epoch},{alpha},{acc:.6}\n"));
        }
        artifacts.push(outcome.log_path);
        println!("alpha {alpha}: done ({} epochs)", outcome.epoch_losses.len());
    }
    if epoch0_hashes.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::integrity(
            "epoch-0 checkpoints differ across alpha runs despite a shared seed",
        ));
    }
    let summary_path = args.out.join("summary.csv");
    std::fs::write(&summary_path, summary)
        .map_err(|e| Error::io(summary_path.display().to_string(), e))?;
    artifacts.push(summary_path.clone());
    write_manifest(
        &args.out,
        "ablate",
        base.train.seed,
        Some(&base),
        started,
        base.train.deterministic,
        &artifacts,
    )?;
    println!(
        "ablation complete: {} runs, shared epoch-0 hash {}, summary {}",
        alphas.len(),
        &epoch0_hashes[0][..12],
        summary_path.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if !args.pairs.exists() {
        return Err(Error::usage(format!(
            "pair file {} does not exist",
            args.pairs.display()
        )));
    }
    let cfg = load_config(args.config.as_ref())?;
    cfg.validate()?;
    let started = now_unix(args.deterministic);
    let dataset = load_dataset(&args.data, &cfg)?;
    let pairs = data::read_pair_file(&args.pairs, &dataset)?;
    let model = Model::new(cfg.clone(), dataset.n_classes)?;
    let expect = model.init_params(cfg.train.seed)?;
    let store = checkpoint::load(&args.checkpoint, Some(&expect))?;

    let embeddings = eval::embed_dataset(&model, &store, &dataset, cfg.train.batch_size)?;
    let folds = 10.min(pairs.entries.len() / 2).max(2);
    let verification = eval::verification_accuracy(&pairs, &embeddings, folds)?;
    let variance = eval::variance_report(&embeddings)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let files = [
        ("verification.csv", eval::verification_csv(&verification)),
        ("roc.csv", eval::roc_csv(&verification)),
        ("variance.csv", eval::variance_csv(&variance)),
        (
            "variance.txt",
            eval::variance_table(&format!("{:?}", cfg.head.kind), &variance),
        ),
    ];
    let mut artifacts = Vec::new();
    for (name, body) in files {
        let p = args.out.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(p.display().to_string(), e))?;
        artifacts.push(p);
    }
    write_manifest(
        &args.out,
        "eval",
        cfg.train.seed,
        Some(&cfg),
        started,
        args.deterministic,
        &artifacts,
    )?;
    println!(
        "verification accuracy {:.4} (threshold {:.4}); intra {:.4} inter {:.4}",
        verification.accuracy, verification.best_threshold, variance.intra, variance.inter
    );
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let results = checks::run_suite(args.only.as_deref());
    if results.is_empty() {
        return Err(Error::usage(format!(
            "no gradient-check items match '{}'",
            args.only.as_deref().unwrap_or("")
        )));
    }
    let mut failures = 0usize;
    for r in &results {
        match &r.error {
            Ok(err) if *err < r.threshold => {
                println!("{:<32} {err:.3e}  (< {:.0e})  PASS", r.name, r.threshold);
            }
            Ok(err) => {
                println!("{:<32} {err:.3e}  (< {:.0e})  FAIL", r.name, r.threshold);
                failures += 1;
            }
            Err(e) => {
                println!("{:<32} error: {e}  FAIL", r.name);
                failures += 1;
            }
        }
    }
    if failures > 0 {
        return Err(Error::numerical(format!(
            "{failures}/{} gradient checks failed",
            results.len()
        )));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Parse args and run; returns the process exit code per the contract
/// (0 success, 1 usage, 2 data/integrity, 3 numerical).
pub fn main_entry<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
