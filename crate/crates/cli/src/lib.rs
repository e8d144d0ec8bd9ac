//! Batch command-line front end: dataset synthesis, training, evaluation,
//! inference, gradient verification and PCK curves.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gmscenet::checkpoint::{restore, to_bytes};
use gmscenet::config::{Config, MODEL_KEYS};
use gmscenet::data::{load_image, write_synthetic_dataset, Split};
use gmscenet::eval::{
    curve, evaluate_predictions, oks_config, part_names, predict, predict_samples,
};
use gmscenet::gradsuite::{gradient_suite, worst, SuiteEntry};
use gmscenet::heatmap::KeypointSet;
use gmscenet::model::Model;
use gmscenet::pipeline::{load_datasets, train_run};
use gmscenet::train::loss_log_csv;
use gmscenet::{Error, Result, Tensor};

/// Gradient checks pass below this relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub const CHECKPOINT_FILE: &str = "checkpoint.scn";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "annotations.jsonl";

#[derive(Parser, Debug)]
#[command(
    name = "gmscenet",
    version,
    about = "Pose estimation with structured context mixing and multi-level supervision"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Overlay {
    /// Config file with one `key = value` per line.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for initialization, data generation, splitting and shuffling.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct Aggregation {
    /// Multi-level keypoint aggregation.
    #[arg(long, value_enum)]
    mlka: Option<OnOff>,
    /// Similarity threshold for aggregation candidates.
    #[arg(long, value_name = "FLOAT")]
    threshold: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic images and an annotation file.
    Synth {
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint, loss log and resolved config.
    Train {
        #[command(flatten)]
        overlay: Overlay,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Report RMSE, OKS and PCK on a split, with and without aggregation.
    Eval {
        #[command(flatten)]
        overlay: Overlay,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[command(flatten)]
        agg: Aggregation,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Predict keypoints for image files (or directories of them).
    Infer {
        #[command(flatten)]
        overlay: Overlay,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[command(flatten)]
        agg: Aggregation,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(required = true, value_name = "IMAGE")]
        inputs: Vec<PathBuf>,
    },
    /// Run the gradient verification suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Consecutive seeds to run, starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Write the PCK curve of a split as CSV.
    Curve {
        #[command(flatten)]
        overlay: Overlay,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[command(flatten)]
        agg: Aggregation,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first), runs the command, and returns the
/// process exit code: 0 on success, 1 on failure, 2 on usage errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn apply_overlay(mut cfg: Config, overlay: &Overlay) -> Result<Config> {
    if let Some(path) = &overlay.config {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        cfg.apply_text(&text)?;
    }
    if let Some(seed) = overlay.seed {
        cfg.model.seed = seed;
    }
    for kv in &overlay.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {kv}` is not of the form key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn apply_aggregation(cfg: &mut Config, agg: &Aggregation) {
    if let Some(m) = agg.mlka {
        cfg.eval.mlka = matches!(m, OnOff::On);
    }
    if let Some(t) = agg.threshold {
        cfg.eval.mlka_threshold = t;
    }
}

fn log_config(err: &mut dyn Write, cfg: &Config) {
    let _ = writeln!(err, "# resolved config");
    let _ = write!(err, "{}", cfg.to_text());
}

/// Restores a checkpoint and overlays run-time settings. Architecture keys
/// must keep the values stored in the checkpoint.
fn load_checkpoint(path: &Path, overlay: &Overlay, agg: &Aggregation) -> Result<(Config, Model)> {
    let (stored, model, _) = restore(path)?;
    let mut cfg = apply_overlay(stored.clone(), overlay)?;
    apply_aggregation(&mut cfg, agg);
    let (before, after) = (stored.pairs(), cfg.pairs());
    for ((key, old), (_, new)) in before.iter().zip(&after) {
        if MODEL_KEYS.contains(key) && old != new {
            return Err(Error::ConfigMismatch {
                key: key.to_string(),
                expected: new.clone(),
                found: old.clone(),
            });
        }
    }
    cfg.validate()?;
    Ok((cfg, model))
}

fn execute(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Synth {
            n,
            size,
            seed,
            out: dir,
        } => {
            let manifest = write_synthetic_dataset(&dir, n, size, size, seed)?;
            let _ = writeln!(
                out,
                "wrote {} samples and {} to {}",
                manifest.entries.len(),
                MANIFEST_FILE,
                dir.display()
            );
            Ok(0)
        }
        Command::Train { overlay, out: dir } => {
            let cfg = apply_overlay(Config::default(), &overlay)?;
            cfg.validate()?;
            log_config(err, &cfg);
            ensure_dir(&dir)?;
            let data = load_datasets(&cfg)?;
            let run = train_run(&cfg, &data.train, |log| {
                let _ = writeln!(
                    err,
                    "epoch {} steps {} mean_loss {:.6}",
                    log.epoch, log.steps, log.mean_loss
                );
            })?;
            write_file(
                &dir.join(CHECKPOINT_FILE),
                &to_bytes(&cfg, &run.model, &run.opt)?,
            )?;
            write_file(&dir.join(LOSS_LOG_FILE), loss_log_csv(&run.logs).as_bytes())?;
            write_file(&dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
            let _ = writeln!(
                out,
                "trained {} epochs on {} samples; checkpoint {}",
                run.logs.len(),
                data.train.len(),
                dir.join(CHECKPOINT_FILE).display()
            );
            Ok(0)
        }
        Command::Eval {
            overlay,
            checkpoint,
            split,
            agg,
            out: dir,
        } => {
            let (cfg, mut model) = load_checkpoint(&checkpoint, &overlay, &agg)?;
            log_config(err, &cfg);
            let split = Split::from(split);
            let data = load_datasets(&cfg)?;
            let samples = data.split(split);
            let preds = predict_samples(&mut model, samples, &cfg.eval, cfg.train.batch_size)?;
            let gts: Vec<KeypointSet> = samples.iter().map(|s| s.keypoints.clone()).collect();
            let report =
                evaluate_predictions(&preds, &gts, &cfg.eval, &oks_config(&model, &cfg.eval))?;
            let csv = report.to_csv();
            let _ = write!(out, "{csv}");
            if let Some(dir) = dir {
                ensure_dir(&dir)?;
                write_file(
                    &dir.join(format!("eval_{}.csv", split.name())),
                    csv.as_bytes(),
                )?;
            }
            Ok(0)
        }
        Command::Curve {
            overlay,
            checkpoint,
            split,
            agg,
            out: dir,
        } => {
            let (cfg, mut model) = load_checkpoint(&checkpoint, &overlay, &agg)?;
            log_config(err, &cfg);
            let split = Split::from(split);
            let data = load_datasets(&cfg)?;
            let samples = data.split(split);
            let preds = predict_samples(&mut model, samples, &cfg.eval, cfg.train.batch_size)?;
            let gts: Vec<KeypointSet> = samples.iter().map(|s| s.keypoints.clone()).collect();
            let names = part_names(model.config.keypoints);
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let csv = curve(&preds, &gts, &cfg.eval)?.to_csv(&refs);
            let _ = write!(out, "{csv}");
            if let Some(dir) = dir {
                ensure_dir(&dir)?;
                write_file(
                    &dir.join(format!("pck_curve_{}.csv", split.name())),
                    csv.as_bytes(),
                )?;
            }
            Ok(0)
        }
        Command::Infer {
            overlay,
            checkpoint,
            agg,
            out: dir,
            inputs,
        } => {
            let (cfg, mut model) = load_checkpoint(&checkpoint, &overlay, &agg)?;
            log_config(err, &cfg);
            let files = expand_inputs(&inputs)?;
            let names = part_names(model.config.keypoints);
            let mut records = Vec::with_capacity(files.len());
            for file in &files {
                let image: Tensor = load_image(file)?;
                let pred = predict(&mut model, &image, &cfg.eval)?.remove(0);
                let chosen = if cfg.eval.mlka {
                    &pred.aggregated
                } else {
                    &pred.reference
                };
                records.push(InferRecord {
                    image: file.to_string_lossy().into_owned(),
                    keypoints: names
                        .iter()
                        .zip(&chosen.parts)
                        .map(|(n, p)| PartRecord {
                            part: n.clone(),
                            x: p.x,
                            y: p.y,
                        })
                        .collect(),
                });
            }
            let json = serde_json::to_string_pretty(&records).expect("records serialize") + "\n";
            let _ = write!(out, "{json}");
            if let Some(dir) = dir {
                ensure_dir(&dir)?;
                write_file(&dir.join("keypoints.json"), json.as_bytes())?;
            }
            Ok(0)
        }
        Command::Gradcheck { seed, seeds } => {
            let mut all: Vec<SuiteEntry> = Vec::new();
            for s in seed..seed + seeds.max(1) {
                for e in gradient_suite(s)? {
                    match all.iter_mut().find(|a| a.name == e.name) {
                        Some(a) => a.report = a.report.merge(e.report),
                        None => all.push(e),
                    }
                }
            }
            for e in &all {
                let _ = writeln!(
                    out,
                    "{:<22} max_rel_error {:.3e}  probes {:>5}  kinks {:>3}  ill-conditioned {:>3}",
                    e.name,
                    e.report.max_rel_error,
                    e.report.probes,
                    e.report.rejected,
                    e.report.ill_conditioned
                );
            }
            let w = worst(&all);
            let _ = writeln!(out, "max relative error: {:.3e}", w.max_rel_error);
            Ok(if w.max_rel_error < GRAD_TOLERANCE {
                0
            } else {
                1
            })
        }
    }
}

#[derive(Serialize)]
struct PartRecord {
    part: String,
    x: f64,
    y: f64,
}

#[derive(Serialize)]
struct InferRecord {
    image: String,
    keypoints: Vec<PartRecord>,
}

/// Files as given; directories contribute their `.pgm`/`.ppm` files in name
/// order.
fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(io_err(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "pgm" || x == "ppm"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::EmptyInput { op: "infer" });
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run_with(
            std::iter::once("gmscenet").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn usage_errors_exit_two() {
        let (code, _, err) = run_capture(&["eval"]);
        assert_eq!(code, 2);
        assert!(err.contains("--checkpoint"), "{err}");
        assert_eq!(run_capture(&["frobnicate"]).0, 2);
        assert_eq!(run_capture(&[]).0, 2);
        assert_eq!(
            run_capture(&["eval", "--checkpoint", "x", "--mlka", "maybe"]).0,
            2
        );
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run_capture(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("gradcheck"));
    }

    #[test]
    fn overlay_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "lr = 0.5\nseed = 3\n").unwrap();
        let overlay = Overlay {
            config: Some(path),
            seed: Some(9),
            set: vec!["lr=0.25".into()],
        };
        let cfg = apply_overlay(Config::default(), &overlay).unwrap();
        assert_eq!((cfg.train.lr, cfg.model.seed), (0.25, 9));
        let bad = Overlay {
            set: vec!["nonsense".into()],
            ..Overlay::default()
        };
        assert!(apply_overlay(Config::default(), &bad).is_err());
    }

    #[test]
    fn missing_checkpoint_is_a_runtime_error() {
        let (code, _, err) = run_capture(&["eval", "--checkpoint", "/nonexistent/ck.scn"]);
        assert_eq!(code, 1);
        assert!(err.starts_with("error:"), "{err}");
    }
}
