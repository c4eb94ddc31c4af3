//! Experiment entry points: dataset generation (`gen`), single training runs
//! (`train`), lambda-grid sweeps (`sweep`), checkpoint scoring (`eval`), and
//! the analytic diagnostics suite (`diag`).
//!
//! Configs are JSON documents mirroring the trainer's `RunConfig` field for
//! field; `--set key=value` overrides use dotted paths into that document,
//! and unknown keys are rejected. Every run writes a resolved-config
//! snapshot that reproduces it exactly when fed back in.
//!
//! Exit codes: 0 success, 1 failed diagnostic check, 2 config or input
//! error, 3 runtime numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use itra_core::checkpoint::{load_checkpoint, save_checkpoint};
use itra_core::data::{gen_gaussian_mixture, write_csv, ClassSpec, MixtureSpec, ModeSpec};
use itra_core::diagnostics::{
    check_closed_form_gradient, check_gradient_norm_bound, check_modality_alignment,
    check_weight_identity, write_reports, Corruption, DiagnosticReport,
};
use itra_core::trainer::{
    append_jsonl, evaluate, load_datasets, train, MetricsRecord, RunConfig, TimingRecord,
};
use itra_core::{Error, Result};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Grid swept when `--lambdas` is not given.
const DEFAULT_LAMBDA_GRID: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// Trial count for each randomized diagnostic.
const DIAG_TRIALS: usize = 1000;

/// Seeds per modality-alignment report batch.
const DIAG_MODALITY_SEEDS: u64 = 5;

#[derive(Parser)]
#[command(name = "itra", version, about = "Distribution-matching training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-mixture dataset: CSV plus a sidecar
    /// with the per-sample mode ids.
    Gen {
        /// Mixture description (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output CSV path; the sidecar lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training configuration.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the same configuration across a lambda grid and summarize.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated lambda values; default 0.2,0.4,0.6,0.8,1.0.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Score a saved checkpoint on a config's dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config supplying the data source; the model comes from the
        /// checkpoint itself.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Run the analytic diagnostics and write their reports as JSON lines.
    Diag {
        /// One check name, or "all".
        #[arg(long, default_value = "all")]
        check: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Report path; defaults to diagnostics.jsonl under $ITRA_OUT_DIR
        /// or the working directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corrupt the checked formulas (or geometry); the run must then
        /// exit 1, which proves the checks can fail.
        #[arg(long)]
        negative_control: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON mirroring RunConfig).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override, e.g. --set lambda=0.6 --set model.batch_norm=true.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; falls back to the config's out_dir, then to
    /// $ITRA_OUT_DIR/<config file stem>.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Gen { spec, out } => cmd_gen(&spec, &out),
        Command::Train { run } => cmd_train(&run),
        Command::Sweep { run, lambdas } => cmd_sweep(&run, lambdas),
        Command::Eval { checkpoint, config, split } => cmd_eval(&checkpoint, &config, split),
        Command::Diag { check, seed, out, negative_control } => {
            cmd_diag(&check, seed, out, negative_control)
        }
    }
}

// ---------------------------------------------------------------------------
// Config loading and overrides
// ---------------------------------------------------------------------------

/// Parses the config document, applies dotted `--set` overrides, and
/// deserializes into a validated [`RunConfig`]. Unknown keys are rejected:
/// at the top level by the deserializer itself, and everywhere else by
/// checking the patched document against the config's own round-trip
/// serialization (which contains every legal key).
fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut doc: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for entry in overrides {
        apply_override(&mut doc, entry)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc.clone())
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let canonical = serde_json::to_value(&cfg)
        .map_err(|e| Error::Config(format!("reserialize config: {e}")))?;
    reject_unknown_keys(&doc, &canonical, "")?;
    for warning in cfg.validate()? {
        eprintln!("warning: {warning}");
    }
    Ok(cfg)
}

/// Sets one `key.path=value` override in the JSON document. The value is
/// parsed as JSON when possible and falls back to a bare string, so
/// `--set lambda=0.6` and `--set data.dir=data/fmnist` both work.
fn apply_override(doc: &mut Value, entry: &str) -> Result<()> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{entry}' is not KEY=VALUE")))?;
    if path.is_empty() {
        return Err(Error::Config(format!("override '{entry}' has an empty key")));
    }
    let value: Value =
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let segments: Vec<&str> = path.split('.').collect();
    let mut cursor = doc;
    for (i, segment) in segments.iter().enumerate() {
        let object = cursor.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "override '{path}': '{}' is not an object",
                segments[..i].join(".")
            ))
        })?;
        if i + 1 == segments.len() {
            object.insert(segment.to_string(), value);
            return Ok(());
        }
        cursor = object
            .entry(segment.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("segments is nonempty");
}

/// Every object key in `doc` must also appear in `canonical`; any extra key
/// names a field no run configuration has.
fn reject_unknown_keys(doc: &Value, canonical: &Value, path: &str) -> Result<()> {
    let (Value::Object(doc), Value::Object(canon)) = (doc, canonical) else {
        return Ok(());
    };
    for (key, value) in doc {
        let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match canon.get(key) {
            None => return Err(Error::Config(format!("unknown config field '{full}'"))),
            Some(inner) => reject_unknown_keys(value, inner, &full)?,
        }
    }
    Ok(())
}

fn resolve_out_dir(run: &RunArgs, cfg: &RunConfig) -> Result<PathBuf> {
    if let Some(dir) = &run.out_dir {
        return Ok(dir.clone());
    }
    if let Some(dir) = &cfg.out_dir {
        return Ok(dir.clone());
    }
    if let Ok(root) = std::env::var("ITRA_OUT_DIR") {
        let stem = run
            .config
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("run");
        return Ok(PathBuf::from(root).join(stem));
    }
    Err(Error::Config(
        "no output directory: pass --out-dir, set out_dir in the config, or export ITRA_OUT_DIR"
            .into(),
    ))
}

// ---------------------------------------------------------------------------
// train / sweep
// ---------------------------------------------------------------------------

fn cmd_train(run: &RunArgs) -> Result<u8> {
    let cfg = load_config(&run.config, &run.set)?;
    let dir = resolve_out_dir(run, &cfg)?;
    let (acc, ce) = execute_run(&cfg, &dir)?;
    println!("final: accuracy {acc:.6} cross_entropy {ce:.6}");
    println!("outputs in {}", dir.display());
    Ok(0)
}

/// Trains one configuration into `dir`: resolved-config snapshot, per-epoch
/// metrics JSONL (timing in its own sidecar so the metrics bytes are
/// reproducible), and the final checkpoint. Returns the last epoch's
/// (accuracy, cross entropy).
fn execute_run(cfg: &RunConfig, dir: &Path) -> Result<(f64, f64)> {
    fs::create_dir_all(dir)?;

    let mut snapshot = cfg.clone();
    snapshot.out_dir = Some(dir.to_path_buf());
    let rendered = serde_json::to_string_pretty(&snapshot)
        .map_err(|e| Error::Config(format!("serialize snapshot: {e}")))?;
    fs::write(dir.join("config.json"), rendered + "\n")?;

    let (train_ds, test_ds) = load_datasets(&cfg.data, &cfg.model)?;

    let metrics_path = dir.join("metrics.jsonl");
    let timing_path = dir.join("timing.jsonl");
    remove_if_present(&metrics_path)?;
    remove_if_present(&timing_path)?;

    let out = train(cfg, &train_ds, &test_ds, |rec: &MetricsRecord| {
        append_jsonl(&metrics_path, rec)?;
        append_jsonl(
            &timing_path,
            &TimingRecord { epoch: rec.epoch, wall_clock_seconds: rec.wall_clock_seconds },
        )?;
        println!(
            "epoch {:>3}  train_ce {:.4}  test_ce {:.4}  acc {:.4}  match {:.4}  pair_dist {:.4}",
            rec.epoch, rec.train_ce, rec.test_ce, rec.test_accuracy, rec.matching_loss,
            rec.pair_distance
        );
        Ok(())
    })?;

    save_checkpoint(&dir.join("model.ckpt"), &cfg.model, &out.params)?;
    let last = out.metrics.last().expect("training runs at least one epoch");
    Ok((last.test_accuracy, last.test_ce))
}

fn remove_if_present(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e.into()),
    }
}

fn cmd_sweep(run: &RunArgs, lambdas: Option<Vec<f64>>) -> Result<u8> {
    let base = load_config(&run.config, &run.set)?;
    let root = resolve_out_dir(run, &base)?;
    let grid = lambdas.unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec());
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    fs::create_dir_all(&root)?;

    let mut rows = vec!["lambda,final_acc,final_ce".to_string()];
    let mut worst = 0u8;
    for &lambda in &grid {
        let mut cfg = base.clone();
        cfg.lambda = lambda;
        let dir = root.join(format!("lambda_{lambda}"));
        match execute_run(&cfg, &dir) {
            Ok((acc, ce)) => {
                println!("lambda {lambda}: accuracy {acc:.6} cross_entropy {ce:.6}");
                rows.push(format!("{lambda},{acc},{ce}"));
            }
            Err(err) => {
                // Keep sweeping; the summary still gets a row per lambda.
                eprintln!("lambda {lambda} failed: {err}");
                worst = worst.max(exit_code_for(&err));
                rows.push(format!("{lambda},nan,nan"));
            }
        }
    }
    let summary = root.join("summary.csv");
    fs::write(&summary, rows.join("\n") + "\n")?;
    println!("summary at {}", summary.display());
    Ok(worst)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(checkpoint: &Path, config: &Path, split: Split) -> Result<u8> {
    let (spec, params) = load_checkpoint(checkpoint)?;
    let cfg = load_config(config, &[])?;
    let (train_ds, test_ds) = load_datasets(&cfg.data, &spec)?;
    let ds = match split {
        Split::Train => &train_ds,
        Split::Test => &test_ds,
    };
    let (acc, ce) = evaluate(&params, &spec, ds)?;
    let name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    println!("split {name}: accuracy {acc:.6} cross_entropy {ce:.6}");
    Ok(0)
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

/// Companion metadata for a generated CSV: which mode produced each row and
/// the realized per-class, per-mode sample counts.
#[derive(Debug, Serialize, Deserialize)]
struct GenSidecar {
    mode_ids: Vec<usize>,
    mode_counts: Vec<Vec<usize>>,
}

fn cmd_gen(spec_path: &Path, out: &Path) -> Result<u8> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?;
    let spec: MixtureSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?;
    let ds = gen_gaussian_mixture(&spec)?;

    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_csv(&ds, out)?;

    let mode_ids = ds.mode_ids.clone().expect("generated mixtures carry mode ids");
    let mut mode_counts: Vec<Vec<usize>> =
        spec.classes.iter().map(|c| vec![0; c.modes.len()]).collect();
    for (&label, &mode) in ds.labels.iter().zip(&mode_ids) {
        mode_counts[label][mode] += 1;
    }
    let sidecar = GenSidecar { mode_ids, mode_counts };
    let rendered = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Config(format!("serialize sidecar: {e}")))?;
    fs::write(sidecar_path(out), rendered + "\n")?;

    println!("wrote {} rows to {}", ds.len(), out.display());
    Ok(0)
}

/// `foo/mix.csv` gets its metadata at `foo/mix.csv.modes.json`.
fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".modes.json");
    PathBuf::from(name)
}

// ---------------------------------------------------------------------------
// diag
// ---------------------------------------------------------------------------

const ALL_CHECKS: [&str; 4] = [
    "closed_form_gradient",
    "gradient_norm_bound",
    "modality_alignment",
    "weight_identity",
];

/// Two well-separated modes (separation 10 stds) in a 2-D mixture, plus a
/// distant padding class the protocol never touches.
fn modality_spec(separation: f64) -> MixtureSpec {
    MixtureSpec {
        dim: 2,
        seed: 0,
        classes: vec![
            ClassSpec {
                modes: vec![
                    ModeSpec { mean: vec![0.0, 0.0], std: 0.5, count: 32 },
                    ModeSpec { mean: vec![separation, 0.0], std: 0.5, count: 32 },
                ],
            },
            ClassSpec {
                modes: vec![ModeSpec { mean: vec![100.0, 100.0], std: 0.5, count: 4 }],
            },
        ],
    }
}

fn cmd_diag(check: &str, seed: u64, out: Option<PathBuf>, negative_control: bool) -> Result<u8> {
    let selected: Vec<&str> = if check == "all" {
        ALL_CHECKS.to_vec()
    } else if ALL_CHECKS.contains(&check) {
        vec![check]
    } else {
        return Err(Error::Config(format!(
            "unknown check '{check}'; expected one of {} or all",
            ALL_CHECKS.join(", ")
        )));
    };

    let pick = |corrupted: Corruption| if negative_control { corrupted } else { Corruption::None };
    let taus = [2.0, 4.0, 6.0, 8.0, 10.0];
    let mut reports: Vec<DiagnosticReport> = Vec::new();
    for name in selected {
        match name {
            "closed_form_gradient" => reports.push(check_closed_form_gradient(
                DIAG_TRIALS,
                16,
                8,
                seed,
                pick(Corruption::FlipGradientSign),
            )?),
            "gradient_norm_bound" => reports.push(check_gradient_norm_bound(
                DIAG_TRIALS,
                &taus,
                1.5,
                seed,
                pick(Corruption::ShrinkBound),
            )?),
            "weight_identity" => reports.push(check_weight_identity(
                DIAG_TRIALS,
                seed,
                pick(Corruption::HalveIdentityCoefficient),
            )?),
            "modality_alignment" => {
                // This check has no formula to corrupt; the negative control
                // collapses the two modes so the mass criterion must fail.
                let spec = modality_spec(if negative_control { 0.0 } else { 5.0 });
                for offset in 0..DIAG_MODALITY_SEEDS {
                    reports.push(check_modality_alignment(&spec, 20, None, seed + offset)?);
                }
            }
            _ => unreachable!("selection is validated above"),
        }
    }

    let out = out.unwrap_or_else(|| {
        std::env::var("ITRA_OUT_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|_| PathBuf::from("."))
            .join("diagnostics.jsonl")
    });
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_reports(&out, &reports)?;

    let mut all_pass = true;
    for report in &reports {
        let verdict = if report.pass { "PASS" } else { "FAIL" };
        println!("{:<24} seed {:<4} {}", report.check, report.seed, verdict);
        all_pass &= report.pass;
    }
    println!("reports at {}", out.display());
    if all_pass {
        Ok(0)
    } else {
        eprintln!("one or more checks failed; see {}", out.display());
        Ok(EXIT_CHECK_FAILED)
    }
}

// ---------------------------------------------------------------------------
