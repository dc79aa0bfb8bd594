//! Command-line front end: `train`, `eval`, `sweep-alpha`, `difficulty`,
//! `synth` and `compare`.
//!
//! Exit codes: 0 success, 1 usage, 2 data or validation error, 3 numerical
//! failure. Log verbosity comes from `TASKRES_LOG` (env_logger syntax).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    alpha_sweep, boundary_shift, magnitude_difficulty_correlation, relative_transfer_difficulty,
    MagnitudeStats,
};
use crate::classifier::{AdapterKind, TargetClassifierSpec};
use crate::embedding_io::{
    read_bundle, read_file, read_json, write_bundle, write_file, write_json, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::params::{read_params, write_params, PARAMS_FILE};
use crate::synth::{difficulty_ladder, generate, SynthSpec};
use crate::trainer::{
    accuracy, per_class_accuracy, project_base, train, AlphaSetting, RunReport, TrainConfig,
    Variant,
};

pub const LOG_ENV: &str = "TASKRES_LOG";
pub const REPORT_FILE: &str = "report.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const RUN_MANIFEST_FILE: &str = "manifest.json";

/// `writeln!` that ignores a closed output (e.g. stdout piped into `head`).
macro_rules! say {
    ($out:expr, $($arg:tt)*) => {{
        let _ = writeln!($out, $($arg)*);
    }};
}

#[derive(Debug, Parser)]
#[command(
    name = "taskres",
    version,
    about = "Task residual tuning of frozen text-based classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a variant on a bundle and write a run directory.
    Train(TrainArgs),
    /// Evaluate the zero-shot base classifier or a trained params file.
    Eval(EvalArgs),
    /// Train a residual variant once per scaling factor and print a CSV.
    SweepAlpha(SweepArgs),
    /// Relative transfer difficulty, for one task or a set of run directories.
    Difficulty(DifficultyArgs),
    /// Write a synthetic bundle, or a ladder of bundles over base shifts.
    Synth(SynthArgs),
    /// Count wrong-to-right and right-to-wrong flips between two prediction files.
    Compare(CompareArgs),
}

/// Training options shared by `train` and `sweep-alpha`. Unset flags fall
/// back to the config file, then to built-in defaults.
#[derive(Debug, Args)]
struct TrainFlags {
    /// Bundle directory.
    #[arg(long)]
    bundle: PathBuf,
    /// JSON file with TrainConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// base, taskres-t, taskres-i, taskres-it, adapter-style, direct-adapter [default: taskres-t]
    #[arg(long)]
    variant: Option<Variant>,
    /// Labeled examples per class [default: 16]
    #[arg(long)]
    shots: Option<usize>,
    /// Training epochs [default: 100 for shots <= 4, else 200]
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size, clamped to the episode size [default: 256]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Base learning rate of the cosine schedule [default: 0.002]
    #[arg(long)]
    lr: Option<f64>,
    /// Adapter kind: nonlinear, linear, linear-bias [default: nonlinear]
    #[arg(long, value_parser = parse_adapter_kind)]
    adapter: Option<AdapterKind>,
    /// Adapter hidden width [default: dim / 4]
    #[arg(long)]
    adapter_hidden: Option<usize>,
    /// Tune a projection of the base classifier first [default: off]
    #[arg(long)]
    enhanced_base: bool,
    /// Epochs of the enhanced-base stage [default: 50]
    #[arg(long)]
    enhanced_epochs: Option<usize>,
    /// Comma-separated seeds [default: 1,2,3]
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Split sampled for few-shot episodes [default: train]
    #[arg(long)]
    train_split: Option<String>,
    /// Split used for evaluation [default: test]
    #[arg(long)]
    test_split: Option<String>,
    /// Seeds trained concurrently [default: 1]
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Scaling factor: a number or "learnable" [default: 0.5]
    #[arg(long, value_parser = parse_alpha)]
    alpha: Option<AlphaSetting>,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Write into an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Bundle directory.
    #[arg(long)]
    bundle: PathBuf,
    /// params.json of a trained model; without it the base classifier is evaluated.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Expected variant; `base` evaluates the zero-shot classifier.
    #[arg(long)]
    variant: Option<Variant>,
    /// Split to evaluate [default: test]
    #[arg(long, default_value = "test")]
    split: String,
    /// Write predicted labels as a JSON array.
    #[arg(long)]
    preds_out: Option<PathBuf>,
    /// Write true labels as a JSON array.
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Comma-separated scaling factors; "learnable" is allowed.
    #[arg(long, value_delimiter = ',', value_parser = parse_alpha, default_value = "0,0.1,0.3,0.5,0.7,1.0")]
    alphas: Vec<AlphaSetting>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DifficultyArgs {
    /// Number of classes.
    #[arg(long, requires = "zero_shot", conflicts_with = "runs")]
    k: Option<usize>,
    /// Zero-shot accuracy in [0, 1].
    #[arg(long, requires = "k")]
    zero_shot: Option<f64>,
    /// Comma-separated run directories; prints a CSV plus the Spearman correlation.
    #[arg(long, value_delimiter = ',', required_unless_present = "k")]
    runs: Option<Vec<PathBuf>>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory (one bundle, or one subdirectory per shift).
    #[arg(long)]
    out: PathBuf,
    /// Number of classes.
    #[arg(long, default_value_t = SynthSpec::default().num_classes)]
    classes: usize,
    /// Embedding dimension.
    #[arg(long, default_value_t = SynthSpec::default().dim)]
    dim: usize,
    /// Training pool size per class.
    #[arg(long, default_value_t = SynthSpec::default().train_per_class)]
    train_per_class: usize,
    /// Test examples per class.
    #[arg(long, default_value_t = SynthSpec::default().test_per_class)]
    test_per_class: usize,
    /// Base classifier perturbation scale.
    #[arg(long, default_value_t = SynthSpec::default().shift)]
    shift: f64,
    /// Comma-separated increasing shifts; writes `shift-<value>/` bundles.
    #[arg(long, value_delimiter = ',', conflicts_with = "shift")]
    shifts: Option<Vec<f64>>,
    /// Image embedding noise scale.
    #[arg(long, default_value_t = SynthSpec::default().sample_noise)]
    noise: f64,
    /// Generator seed.
    #[arg(long, default_value_t = SynthSpec::default().seed)]
    seed: u64,
    /// Softmax temperature stored in the manifest.
    #[arg(long, default_value_t = SynthSpec::default().temperature)]
    temperature: f64,
    /// Write into an existing directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// JSON array of base predictions.
    #[arg(long)]
    base_preds: PathBuf,
    /// JSON array of tuned predictions.
    #[arg(long)]
    tuned_preds: PathBuf,
    /// JSON array of true labels.
    #[arg(long)]
    labels: PathBuf,
}

fn parse_alpha(s: &str) -> std::result::Result<AlphaSetting, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_adapter_kind(s: &str) -> std::result::Result<AdapterKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown adapter kind {s:?} (nonlinear, linear, linear-bias)"))
}

/// Hashes and provenance recorded in every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: TrainConfig,
    pub bundle: BundleRecord,
    pub seeds: Vec<SeedOutputs>,
    pub report: String,
    pub loss: String,
    pub started_unix: f64,
    pub finished_unix: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleRecord {
    pub path: PathBuf,
    /// sha256 of every bundle file, manifest included.
    pub sha256: BTreeMap<String, String>,
    pub base_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutputs {
    pub seed: u64,
    pub params: String,
    pub predictions: String,
    pub test_accuracy: f64,
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut io::stdout().lock())
}

/// [`run`] with command output sent to `out`. Errors and help still go to
/// the process streams.
pub fn run_with<I, T>(args: I, out: &mut dyn io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let _ =
        env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).try_init();
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::SweepAlpha(a) => cmd_sweep_alpha(a, out),
        Command::Difficulty(a) => cmd_difficulty(a, out),
        Command::Synth(a) => cmd_synth(a, out),
        Command::Compare(a) => cmd_compare(a, out),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read_file(path)?)))
}

fn resolve_config(flags: &TrainFlags, alpha: Option<AlphaSetting>) -> Result<TrainConfig> {
    let mut c: TrainConfig = match &flags.config {
        Some(path) => read_json(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = flags.variant {
        c.variant = v;
    }
    if let Some(v) = flags.shots {
        c.shots = v;
    }
    if flags.epochs.is_some() {
        c.epochs = flags.epochs;
    }
    if let Some(v) = flags.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = flags.lr {
        c.base_lr = v;
    }
    if let Some(v) = alpha {
        c.alpha = v;
    }
    if let Some(v) = flags.adapter {
        c.adapter_kind = v;
    }
    if flags.adapter_hidden.is_some() {
        c.adapter_hidden = flags.adapter_hidden;
    }
    if flags.enhanced_base {
        c.enhanced_base = true;
    }
    if let Some(v) = flags.enhanced_epochs {
        c.enhanced_epochs = v;
    }
    if let Some(v) = &flags.seeds {
        c.seeds = v.clone();
    }
    if let Some(v) = &flags.train_split {
        c.train_split = v.clone();
    }
    if let Some(v) = &flags.test_split {
        c.test_split = v.clone();
    }
    if let Some(v) = flags.jobs {
        c.jobs = v;
    }
    c.validate()?;
    Ok(c)
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() && !force {
        return Err(Error::OutputExists(out.to_path_buf()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn loss_csv(report: &RunReport) -> String {
    let mut s = String::from("seed,stage,epoch,mean_loss,lr\n");
    for seed in &report.seeds {
        let stages = seed
            .enhanced
            .iter()
            .map(|e| ("enhanced", &e.loss_curve))
            .chain(std::iter::once(("residual", &seed.loss_curve)));
        for (stage, curve) in stages {
            for e in curve {
                let _ = writeln!(
                    s,
                    "{},{stage},{},{:e},{:e}",
                    seed.seed, e.epoch, e.mean_loss, e.lr
                );
            }
        }
    }
    s
}

fn bundle_hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: crate::embedding_io::BundleManifest = read_json(&manifest_path)?;
    let mut files = vec![
        MANIFEST_FILE.to_string(),
        crate::embedding_io::BASE_FILE.to_string(),
    ];
    for entry in manifest.splits.values() {
        files.push(entry.embeddings.clone());
        files.push(entry.labels.clone());
    }
    files
        .into_iter()
        .map(|f| Ok((f.clone(), sha256_file(&dir.join(&f))?)))
        .collect()
}

fn cmd_train(args: TrainArgs, out: &mut dyn io::Write) -> Result<()> {
    let started = now_unix();
    let config = resolve_config(&args.flags, args.alpha)?;
    if args.out.exists() && !args.force {
        return Err(Error::OutputExists(args.out.clone()));
    }
    let bundle = read_bundle(&args.flags.bundle)?;
    let hashes = bundle_hashes(&args.flags.bundle)?;
    info!(
        "training {} on {}",
        config.variant,
        args.flags.bundle.display()
    );
    let report = train(&bundle, &config)?;

    let run_dir = &args.out;
    prepare_out_dir(run_dir, args.force)?;
    let (k, d) = (report.num_classes, report.dim);
    let params_root = run_dir.join("params");
    if params_root.exists() {
        fs::remove_dir_all(&params_root).map_err(|e| Error::io(&params_root, e))?;
    }
    let preds_dir = run_dir.join("predictions");
    fs::create_dir_all(&preds_dir).map_err(|e| Error::io(&preds_dir, e))?;

    let normalized = bundle.normalized()?;
    let test = normalized.split(&config.test_split)?;
    let zero_shot = TargetClassifierSpec::base().predict(
        &normalized.base,
        test.embeddings.as_matrix(),
        normalized.temperature(),
    )?;
    write_json(&preds_dir.join("zero-shot.json"), &zero_shot)?;
    write_json(&preds_dir.join("labels.json"), &test.labels)?;

    let mut seeds = Vec::new();
    for (seed_report, model) in report.seeds.iter().zip(&report.models) {
        let rel_params = format!("params/seed-{}/{PARAMS_FILE}", seed_report.seed);
        let rel_preds = format!("predictions/seed-{}.json", seed_report.seed);
        write_params(
            &run_dir.join(format!("params/seed-{}", seed_report.seed)),
            model,
            k,
            d,
        )?;
        write_json(&run_dir.join(&rel_preds), &seed_report.test_predictions)?;
        seeds.push(SeedOutputs {
            seed: seed_report.seed,
            params: rel_params,
            predictions: rel_preds,
            test_accuracy: seed_report.test_accuracy,
        });
    }
    write_json(&run_dir.join(REPORT_FILE), &report)?;
    write_file(&run_dir.join(LOSS_FILE), loss_csv(&report).as_bytes())?;
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: "train".into(),
        config: report.config.clone(),
        bundle: BundleRecord {
            path: args.flags.bundle.clone(),
            sha256: hashes,
            base_hash: report.base_hash.clone(),
        },
        seeds,
        report: REPORT_FILE.into(),
        loss: LOSS_FILE.into(),
        started_unix: started,
        finished_unix: now_unix(),
    };
    write_json(&run_dir.join(RUN_MANIFEST_FILE), &manifest)?;

    say!(
        out,
        "{} mean_accuracy {} std_accuracy {} zero_shot {}",
        report.variant,
        report.mean_accuracy,
        report.std_accuracy,
        report.mean_zero_shot_accuracy
    );
    for s in &report.seeds {
        say!(out, "seed {} accuracy {}", s.seed, s.test_accuracy);
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs, out: &mut dyn io::Write) -> Result<()> {
    let bundle = read_bundle(&args.bundle)?.normalized()?;
    let (k, d) = (bundle.num_classes(), bundle.base.dim());
    let tau = bundle.temperature();
    let split = bundle.split(&args.split)?;

    let (base, spec) = match (&args.params, args.variant) {
        (Some(_), Some(Variant::Base)) => {
            return Err(Error::invalid(
                "--variant base evaluates the zero-shot classifier; drop --params",
            ))
        }
        (None, Some(v)) if v != Variant::Base => {
            return Err(Error::invalid(format!("--variant {v} needs --params")));
        }
        (None, _) => (bundle.base.clone(), TargetClassifierSpec::base()),
        (Some(path), expected) => {
            let (file, model) = read_params(path)?;
            if let Some(v) = expected {
                if v.name() != file.variant {
                    return Err(Error::invalid(format!(
                        "params hold {}, not {v}",
                        file.variant
                    )));
                }
            }
            if file.num_classes != k {
                return Err(Error::DimensionMismatch {
                    what: "params classes".into(),
                    expected: k,
                    found: file.num_classes,
                });
            }
            if file.dim != d {
                return Err(Error::DimensionMismatch {
                    what: "params dimension".into(),
                    expected: d,
                    found: file.dim,
                });
            }
            model.spec.validate(k, d)?;
            let base = match &model.projection {
                Some(p) => project_base(&bundle.base, p)?,
                None => bundle.base.clone(),
            };
            (base, model.spec)
        }
    };

    let preds = spec.predict(&base, split.embeddings.as_matrix(), tau)?;
    let acc = accuracy(&preds, &split.labels)?;
    say!(out, "accuracy {acc}");
    for (c, a) in per_class_accuracy(&preds, &split.labels, k)
        .iter()
        .enumerate()
    {
        let name = &bundle.manifest.class_names[c];
        match a {
            Some(a) => say!(out, "class {c} {name} {a}"),
            None => say!(out, "class {c} {name} n/a"),
        }
    }
    if let Some(p) = &args.preds_out {
        write_json(p, &preds)?;
    }
    if let Some(p) = &args.labels_out {
        write_json(p, &split.labels)?;
    }
    Ok(())
}

fn cmd_sweep_alpha(args: SweepArgs, out: &mut dyn io::Write) -> Result<()> {
    let config = resolve_config(&args.flags, None)?;
    let bundle = read_bundle(&args.flags.bundle)?;
    let rows = alpha_sweep(&bundle, &config, &args.alphas)?;
    let mut csv = String::from("alpha,mean_accuracy,std_accuracy,mean_zero_shot_accuracy\n");
    for r in &rows {
        let alpha = match r.setting {
            AlphaSetting::Fixed(a) => a.to_string(),
            AlphaSetting::Learnable(_) => format!("learnable:{}", r.alpha),
        };
        let _ = writeln!(
            csv,
            "{alpha},{},{},{}",
            r.mean_accuracy, r.std_accuracy, r.mean_zero_shot_accuracy
        );
    }
    match &args.out {
        Some(p) => write_file(p, csv.as_bytes()),
        None => {
            say!(out, "{}", csv.trim_end());
            Ok(())
        }
    }
}

fn cmd_difficulty(args: DifficultyArgs, out: &mut dyn io::Write) -> Result<()> {
    if let (Some(k), Some(acc)) = (args.k, args.zero_shot) {
        let rec = relative_transfer_difficulty(k, acc)?;
        say!(out, "{:.6}", rec.difficulty);
        return Ok(());
    }
    let runs = args.runs.unwrap_or_default();
    let mut records = Vec::new();
    let mut csv = String::from("task,num_classes,zero_shot_accuracy,difficulty,log_difficulty,mean_magnitude,median_magnitude\n");
    for dir in &runs {
        let report: RunReport = read_json(&dir.join(REPORT_FILE))?;
        let (Some(mean), Some(median)) = (report.mean_magnitude, report.median_magnitude) else {
            return Err(Error::invalid(format!(
                "{} has no residual magnitude",
                dir.display()
            )));
        };
        let task = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let rec = relative_transfer_difficulty(report.num_classes, report.mean_zero_shot_accuracy)?
            .named(task);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            rec.task,
            rec.num_classes,
            rec.zero_shot_accuracy,
            rec.difficulty,
            rec.log_difficulty,
            mean,
            median
        );
        records.push((
            rec,
            MagnitudeStats {
                mean,
                median,
                per_class_mean: Vec::new(),
            },
        ));
    }
    say!(out, "{}", csv.trim_end());
    if records.len() >= 3 {
        let rho = magnitude_difficulty_correlation(&records)?;
        say!(out, "# spearman(log_difficulty, mean_magnitude) {rho}");
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs, out: &mut dyn io::Write) -> Result<()> {
    let spec = SynthSpec {
        num_classes: args.classes,
        dim: args.dim,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
        shift: args.shift,
        sample_noise: args.noise,
        seed: args.seed,
        temperature: args.temperature,
    };
    spec.validate()?;
    match &args.shifts {
        None => {
            let bundle = generate(&spec)?;
            prepare_out_dir(&args.out, args.force)?;
            write_bundle(&args.out, &bundle)?;
            say!(out, "{}", args.out.display());
        }
        Some(shifts) => {
            let bundles = difficulty_ladder(&spec, shifts)?;
            prepare_out_dir(&args.out, args.force)?;
            for (shift, bundle) in shifts.iter().zip(&bundles) {
                let dir = args.out.join(format!("shift-{shift}"));
                write_bundle(&dir, bundle)?;
                say!(out, "{}", dir.display());
            }
        }
    }
    Ok(())
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    read_json(path)
}

fn cmd_compare(args: CompareArgs, out: &mut dyn io::Write) -> Result<()> {
    let base = read_labels(&args.base_preds)?;
    let tuned = read_labels(&args.tuned_preds)?;
    let labels = read_labels(&args.labels)?;
    let shift = boundary_shift(&base, &tuned, &labels)?;
    say!(out, "W2R {} R2W {}", shift.w2r, shift.r2w);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(args: &[&str]) -> i32 {
        run(std::iter::once("taskres").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(code(&[]), 1);
        assert_eq!(code(&["nope"]), 1);
        assert_eq!(code(&["train", "--shots", "4"]), 1);
        assert_eq!(code(&["difficulty", "--k", "10"]), 1);
        assert_eq!(
            code(&["train", "--bundle", "b", "--out", "o", "--alpha", "big"]),
            1
        );
    }

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(code(&["--help"]), 0);
        assert_eq!(code(&["--version"]), 0);
        assert_eq!(code(&["train", "--help"]), 0);
    }

    #[test]
    fn validation_errors_exit_two() {
        assert_eq!(code(&["difficulty", "--k", "0", "--zero-shot", "0.5"]), 2);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing");
        let out = dir.path().join("out");
        assert_eq!(
            code(&[
                "train",
                "--bundle",
                missing.to_str().unwrap(),
                "--out",
                out.to_str().unwrap()
            ]),
            2
        );
        assert!(!out.exists());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"shots": 2, "base_lr": 0.01, "seeds": [9]}"#).unwrap();
        let flags = TrainFlags::parse_from_for_test(&[
            "--bundle",
            "b",
            "--config",
            cfg.to_str().unwrap(),
            "--shots",
            "8",
        ]);
        let c = resolve_config(&flags, None).unwrap();
        assert_eq!(c.shots, 8);
        assert_eq!(c.base_lr, 0.01);
        assert_eq!(c.seeds, vec![9]);
        assert_eq!(c.batch_size, 256);

        fs::write(&cfg, r#"{"shot": 2}"#).unwrap();
        let flags =
            TrainFlags::parse_from_for_test(&["--bundle", "b", "--config", cfg.to_str().unwrap()]);
        assert!(matches!(
            resolve_config(&flags, None),
            Err(Error::Json { .. })
        ));
    }

    fn cli(args: &[&str]) -> (i32, String) {
        let mut out = Vec::new();
        let code = run_with(
            std::iter::once("taskres").chain(args.iter().copied()),
            &mut out,
        );
        (code, String::from_utf8(out).unwrap())
    }

    fn p(path: &Path) -> &str {
        path.to_str().unwrap()
    }

    fn accuracy_line(stdout: &str) -> f64 {
        stdout
            .lines()
            .find_map(|l| l.strip_prefix("accuracy "))
            .unwrap()
            .parse()
            .unwrap()
    }

    #[test]
    fn aligned_bundle_zero_shot_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let b = dir.path().join("b");
        let (code, _) = cli(&[
            "synth",
            "--out",
            p(&b),
            "--shift",
            "0",
            "--noise",
            "0",
            "--classes",
            "4",
            "--dim",
            "8",
        ]);
        assert_eq!(code, 0);
        let (code, stdout) = cli(&["eval", "--bundle", p(&b), "--variant", "base"]);
        assert_eq!(code, 0);
        assert_eq!(accuracy_line(&stdout), 1.0);
        assert_eq!(
            stdout.lines().filter(|l| l.starts_with("class ")).count(),
            4
        );
        // Never written over without --force.
        assert_eq!(cli(&["synth", "--out", p(&b)]).0, 2);
        assert_eq!(cli(&["synth", "--out", p(&b), "--force"]).0, 0);
    }

    #[test]
    fn train_writes_run_directory_and_eval_reproduces_it() {
        let dir = tempfile::tempdir().unwrap();
        let b = dir.path().join("b");
        let run_dir = dir.path().join("r");
        assert_eq!(
            cli(&[
                "synth",
                "--out",
                p(&b),
                "--classes",
                "5",
                "--dim",
                "16",
                "--test-per-class",
                "20"
            ])
            .0,
            0
        );
        let train_args = [
            "train",
            "--bundle",
            p(&b),
            "--variant",
            "taskres-t",
            "--shots",
            "4",
            "--epochs",
            "20",
            "--out",
            p(&run_dir),
        ];
        let (code, _) = cli(&train_args);
        assert_eq!(code, 0);
        for f in [
            REPORT_FILE,
            LOSS_FILE,
            RUN_MANIFEST_FILE,
            "predictions/labels.json",
            "predictions/zero-shot.json",
        ] {
            assert!(run_dir.join(f).is_file(), "{f}");
        }
        let report: RunReport = read_json(&run_dir.join(REPORT_FILE)).unwrap();
        assert_eq!(report.seeds.len(), 3);
        let manifest: RunManifest = read_json(&run_dir.join(RUN_MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.config.epochs, Some(20));
        assert_eq!(manifest.config.adapter_hidden, Some(4));
        assert_eq!(manifest.bundle.sha256.len(), 6);
        let loss = fs::read_to_string(run_dir.join(LOSS_FILE)).unwrap();
        assert_eq!(loss.lines().count(), 1 + 3 * 20);

        for (s, seed) in report.seeds.iter().zip(&manifest.seeds) {
            let preds = dir.path().join(format!("preds-{}.json", s.seed));
            let (code, stdout) = cli(&[
                "eval",
                "--bundle",
                p(&b),
                "--params",
                p(&run_dir.join(&seed.params)),
                "--variant",
                "taskres-t",
                "--preds-out",
                p(&preds),
            ]);
            assert_eq!(code, 0);
            assert!((accuracy_line(&stdout) - s.test_accuracy).abs() < 1e-12);
            let a: Vec<usize> = read_json(&preds).unwrap();
            let b: Vec<usize> = read_json(&run_dir.join(&seed.predictions)).unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(
            cli(&[
                "eval",
                "--bundle",
                p(&b),
                "--params",
                p(&run_dir.join(&manifest.seeds[0].params)),
                "--variant",
                "adapter-style"
            ])
            .0,
            2
        );

        // Existing run directories are protected.
        assert_eq!(cli(&train_args).0, 2);
        let mut forced = train_args.to_vec();
        forced.push("--force");
        assert_eq!(cli(&forced).0, 0);
        let again: RunReport = read_json(&run_dir.join(REPORT_FILE)).unwrap();
        assert_eq!(again.mean_accuracy, report.mean_accuracy);

        // Mismatched dimension between params and bundle.
        let other = dir.path().join("other");
        assert_eq!(
            cli(&["synth", "--out", p(&other), "--classes", "5", "--dim", "12"]).0,
            0
        );
        let (code, _) = cli(&[
            "eval",
            "--bundle",
            p(&other),
            "--params",
            p(&run_dir.join(&manifest.seeds[0].params)),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn zero_alpha_run_matches_base_eval() {
        let dir = tempfile::tempdir().unwrap();
        let b = dir.path().join("b");
        let run_dir = dir.path().join("r");
        assert_eq!(
            cli(&[
                "synth",
                "--out",
                p(&b),
                "--classes",
                "4",
                "--dim",
                "16",
                "--shift",
                "0.5"
            ])
            .0,
            0
        );
        let (code, _) = cli(&[
            "train",
            "--bundle",
            p(&b),
            "--variant",
            "taskres-t",
            "--alpha",
            "0",
            "--epochs",
            "50",
            "--shots",
            "2",
            "--out",
            p(&run_dir),
        ]);
        assert_eq!(code, 0);
        let report: RunReport = read_json(&run_dir.join(REPORT_FILE)).unwrap();
        let (_, stdout) = cli(&["eval", "--bundle", p(&b), "--variant", "base"]);
        let base = accuracy_line(&stdout);
        assert!(report.seeds.iter().all(|s| s.test_accuracy == base));
        assert!((report.mean_accuracy - base).abs() < 1e-12);
    }

    #[test]
    fn runaway_learning_rate_exits_three() {
        let dir = tempfile::tempdir().unwrap();
        let b = dir.path().join("b");
        let run_dir = dir.path().join("r");
        assert_eq!(
            cli(&["synth", "--out", p(&b), "--classes", "3", "--dim", "8"]).0,
            0
        );
        let (code, _) = cli(&[
            "train",
            "--bundle",
            p(&b),
            "--variant",
            "direct-adapter",
            "--lr",
            "1e300",
            "--epochs",
            "5",
            "--shots",
            "2",
            "--out",
            p(&run_dir),
        ]);
        assert_eq!(code, 3);
        assert!(!run_dir.exists());
    }

    #[test]
    fn analysis_commands() {
        let (code, stdout) = cli(&["difficulty", "--k", "1000", "--zero-shot", "0.5818"]);
        assert_eq!((code, stdout.trim()), (0, "0.001719"));

        let dir = tempfile::tempdir().unwrap();
        let labels = dir.path().join("labels.json");
        let preds = dir.path().join("preds.json");
        fs::write(&labels, "[0, 1, 2, 1]").unwrap();
        fs::write(&preds, "[0, 2, 2, 0]").unwrap();
        let (code, stdout) = cli(&[
            "compare",
            "--base-preds",
            p(&preds),
            "--tuned-preds",
            p(&preds),
            "--labels",
            p(&labels),
        ]);
        assert_eq!((code, stdout.trim()), (0, "W2R 0 R2W 0"));
        let short = dir.path().join("short.json");
        fs::write(&short, "[0, 1]").unwrap();
        assert_eq!(
            cli(&[
                "compare",
                "--base-preds",
                p(&preds),
                "--tuned-preds",
                p(&preds),
                "--labels",
                p(&short)
            ])
            .0,
            2
        );

        let b = dir.path().join("ladder");
        let (code, stdout) = cli(&[
            "synth",
            "--out",
            p(&b),
            "--classes",
            "4",
            "--dim",
            "16",
            "--shifts",
            "0.1,0.4,0.8",
        ]);
        assert_eq!(code, 0);
        assert_eq!(stdout.lines().count(), 3);
        let mut runs = Vec::new();
        for s in ["0.1", "0.4", "0.8"] {
            let r = dir.path().join(format!("run-{s}"));
            let bundle = b.join(format!("shift-{s}"));
            assert_eq!(
                cli(&[
                    "train",
                    "--bundle",
                    p(&bundle),
                    "--shots",
                    "2",
                    "--epochs",
                    "10",
                    "--seeds",
                    "1",
                    "--out",
                    p(&r)
                ])
                .0,
                0
            );
            runs.push(r.to_str().unwrap().to_string());
        }
        let (code, stdout) = cli(&["difficulty", "--runs", &runs.join(",")]);
        assert_eq!(code, 0);
        assert_eq!(stdout.lines().count(), 5);
        assert!(stdout.lines().last().unwrap().starts_with("# spearman"));

        let (code, stdout) = cli(&[
            "sweep-alpha",
            "--bundle",
            p(&b.join("shift-0.8")),
            "--shots",
            "2",
            "--epochs",
            "5",
            "--seeds",
            "1,2",
        ]);
        assert_eq!(code, 0);
        let rows: Vec<&str> = stdout.lines().collect();
        assert_eq!(
            rows[0],
            "alpha,mean_accuracy,std_accuracy,mean_zero_shot_accuracy"
        );
        let alphas: Vec<&str> = rows[1..]
            .iter()
            .map(|r| r.split(',').next().unwrap())
            .collect();
        assert_eq!(alphas, ["0", "0.1", "0.3", "0.5", "0.7", "1"]);
        assert_eq!(
            cli(&[
                "sweep-alpha",
                "--bundle",
                p(&b.join("shift-0.8")),
                "--variant",
                "adapter-style",
                "--alphas",
                "0.5"
            ])
            .0,
            2
        );
    }

    impl TrainFlags {
        fn parse_from_for_test(args: &[&str]) -> Self {
            #[derive(Parser)]
            struct Wrap {
                #[command(flatten)]
                flags: TrainFlags,
            }
            Wrap::parse_from(std::iter::once("t").chain(args.iter().copied())).flags
        }
    }
}
