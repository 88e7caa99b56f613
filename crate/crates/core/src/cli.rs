//! `spectra` command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data or file format,
//! 3 numeric failure. The resolved configuration goes to stderr on every
//! run so stdout stays machine-readable.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::bench::{bench_inference, render_reports, BenchTarget, ReportFormat};
use crate::config::RunConfig;
use crate::costs::count_costs;
use crate::data::{
    apply_stats, make_windows, normalize, read_csv, resample_50hz, synth_with, write_csv, NormStats, SynthConfig,
    WindowBatch,
};
use crate::error::SpectraError;
use crate::format::{load_model, peek_version, save_model, VERSION_QUANT};
use crate::model::{build_model, ModelParams};
use crate::quant::{calibrate_with_mode, load_quantized, quantized_forward, save_quantized, QuantMode, QuantizedModel};
use crate::tensor::{rng_normal, Rng, Tensor};
use crate::training::{evaluate_probs, train_epochs};

#[derive(Debug, Parser)]
#[command(name = "spectra", version, about = "Spectral-temporal activity recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    /// INT8 weights and activations
    WeightActivation,
    /// INT8 weights, real-valued activations
    WeightOnly,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset as train.csv and test.csv
    SynthData {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Seconds of signal per class
        #[arg(long, default_value_t = 60.0)]
        seconds: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Standard deviation of the additive Gaussian noise
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 6)]
        channels: usize,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on DIR/train.csv (DIR/test.csv, if present, is scored every epoch)
    Train {
        #[arg(long)]
        data: PathBuf,
        /// key=value configuration file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "model.spct")]
        out: PathBuf,
        #[arg(long, default_value = "history.csv")]
        history: PathBuf,
    },
    /// Print metrics of a model on a CSV file or DIR/test.csv as JSON
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print class probabilities and argmax for every window of a CSV recording
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        window: PathBuf,
    },
    /// Post-training INT8 quantization calibrated on a CSV file or DIR/train.csv
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, default_value = "model_int8.spct")]
        out: PathBuf,
        /// Number of calibration windows, spread evenly over the recording
        #[arg(long, default_value_t = 200)]
        calib_windows: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::WeightActivation)]
        mode: ModeArg,
    },
    /// Print per-layer parameter and MAC counts as JSON
    Count {
        /// key=value configuration file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Measure single-window latency
    Bench {
        #[arg(long)]
        model: PathBuf,
        /// Also benchmark the INT8 path (MODEL must be a quantized file)
        #[arg(long, default_value_t = false)]
        int8: bool,
        /// json or csv
        #[arg(long, default_value = "json")]
        format: String,
        /// Report path; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = crate::bench::DEFAULT_WARMUP)]
        warmup: usize,
        #[arg(long, default_value_t = crate::bench::DEFAULT_ITERS)]
        iters: usize,
        /// Seed of the random benchmark window
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// An error plus the flag or file it concerns.
#[derive(Debug)]
pub struct CliError {
    pub context: String,
    pub source: SpectraError,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.context, self.source)
    }
}

trait Context<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T> Context<T> for crate::Result<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|source| CliError {
            context: context(),
            source,
        })
    }
}

fn flag(name: &str, path: &Path) -> impl FnOnce() -> String {
    let s = format!("--{name} {}", path.display());
    move || s
}

/// Parses `args` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    match execute(cli.command, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.source.exit_code()
        }
    }
}

fn resolved(lines: &str) {
    eprintln!("resolved config:");
    for l in lines.lines() {
        eprintln!("  {l}");
    }
}

fn model_config_lines(model: &ModelParams) -> String {
    let rc = RunConfig {
        model: model.config.clone(),
        ..Default::default()
    };
    rc.render()
        .lines()
        .take(12)
        .map(|l| format!("{l}\n"))
        .collect()
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| CliError {
            context: "stdout".into(),
            source: SpectraError::io("<stdout>", e),
        })
}

fn json_text(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// A CSV path, or `dir/default_name` when `path` is a directory.
fn csv_in(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    }
}

fn load_windows(path: &Path, window: usize, name: &str) -> Result<WindowBatch, CliError> {
    let ctx = flag(name, path);
    let rec = read_csv(path).ctx(|| format!("--{name} {}", path.display()))?;
    let rec = resample_50hz(&rec).ctx(|| format!("--{name} {}", path.display()))?;
    make_windows(&rec, window, 0.5).ctx(ctx)
}

fn labeled_windows(path: &Path, window: usize, name: &str) -> Result<(WindowBatch, usize), CliError> {
    let rec = read_csv(path).ctx(flag(name, path))?;
    let labels = rec.labels.as_ref().ok_or_else(|| CliError {
        context: format!("--{name} {}", path.display()),
        source: SpectraError::Data("CSV has no label column".into()),
    })?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let rec = resample_50hz(&rec).ctx(flag(name, path))?;
    Ok((make_windows(&rec, window, 0.5).ctx(flag(name, path))?, classes))
}

fn model_stats(model: &ModelParams) -> NormStats {
    NormStats {
        mean: model.norm_mean.data().to_vec(),
        std: model.norm_std.data().to_vec(),
        degenerate: vec![false; model.config.channels],
    }
}

enum Loaded {
    Float(ModelParams),
    Quant(QuantizedModel),
}

impl Loaded {
    fn open(path: &Path) -> Result<Loaded, CliError> {
        let version = peek_version(path).ctx(flag("model", path))?;
        Ok(if version == VERSION_QUANT {
            Loaded::Quant(load_quantized(path).ctx(flag("model", path))?)
        } else {
            Loaded::Float(load_model(path).ctx(flag("model", path))?)
        })
    }

    fn base(&self) -> &ModelParams {
        match self {
            Loaded::Float(m) => m,
            Loaded::Quant(q) => &q.base,
        }
    }

    fn forward(&self, x: &Tensor) -> crate::Result<Tensor> {
        match self {
            Loaded::Float(m) => m.forward_eval(x),
            Loaded::Quant(q) => quantized_forward(q, x),
        }
    }

    /// Raw windows normalized with the statistics stored in the model.
    fn prepare(&self, batch: &WindowBatch, name: &str, path: &Path) -> Result<Tensor, CliError> {
        let base = self.base();
        if batch.windows.shape()[2] != base.config.channels {
            return Err(CliError {
                context: format!("--{name} {}", path.display()),
                source: SpectraError::Dimension(format!(
                    "data has {} channels, model expects {}",
                    batch.windows.shape()[2],
                    base.config.channels
                )),
            });
        }
        apply_stats(&batch.windows, &model_stats(base)).ctx(flag(name, path))
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::SynthData {
            classes,
            seconds,
            seed,
            noise,
            channels,
            out: dir,
        } => {
            let cfg = SynthConfig {
                channels,
                noise_std: noise,
                ..SynthConfig::new(classes, seconds, seed)
            };
            resolved(&format!(
                "classes={classes}\nseconds={seconds}\nseed={seed}\nnoise={noise}\nchannels={channels}\nout={}",
                dir.display()
            ));
            let (train, test) = synth_with(&cfg).ctx(|| "--classes/--seconds".into())?;
            std::fs::create_dir_all(&dir)
                .map_err(|e| SpectraError::io(&dir, e))
                .ctx(flag("out", &dir))?;
            write_csv(&train, dir.join("train.csv")).ctx(flag("out", &dir))?;
            write_csv(&test, dir.join("test.csv")).ctx(flag("out", &dir))?;
            emit(
                out,
                &format!(
                    "wrote {} training and {} test samples to {}\n",
                    train.len(),
                    test.len(),
                    dir.display()
                ),
            )
        }

        Command::Train {
            data,
            config,
            out: model_path,
            history,
        } => {
            let mut rc = match &config {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| SpectraError::io(p, e))
                        .ctx(flag("config", p))?;
                    RunConfig::parse(&text).ctx(flag("config", p))?
                }
                None => RunConfig::default(),
            };
            let train_csv = csv_in(&data, "train.csv");
            let (raw, classes) = labeled_windows(&train_csv, rc.model.window_len, "data")?;
            let channels = raw.windows.shape()[2];
            if !rc.is_explicit("classes") {
                rc.model.classes = classes.max(2);
            }
            if !rc.is_explicit("channels") {
                rc.model.channels = channels;
            }
            resolved(&rc.render());
            if channels != rc.model.channels {
                return Err(CliError {
                    context: format!("--data {}", train_csv.display()),
                    source: SpectraError::Dimension(format!(
                        "data has {channels} channels, config says {}",
                        rc.model.channels
                    )),
                });
            }
            let cfg_ctx = || config.as_ref().map_or("config".to_string(), |p| format!("--config {}", p.display()));
            let model = build_model(&rc.model).ctx(cfg_ctx)?;
            let train = normalize(&raw, None).ctx(flag("data", &train_csv))?;
            let stats = train.norm_stats.clone().expect("normalize sets stats");
            if stats.has_warning() {
                eprintln!(
                    "warning: zero-variance channels {:?} normalized with std 1",
                    stats.degenerate.iter().enumerate().filter(|(_, &d)| d).map(|(i, _)| i).collect::<Vec<_>>()
                );
            }
            let test_csv = data.join("test.csv");
            let eval = if data.is_dir() && test_csv.exists() {
                let (b, _) = labeled_windows(&test_csv, rc.model.window_len, "data")?;
                Some(normalize(&b, Some(&stats)).ctx(flag("data", &test_csv))?)
            } else {
                None
            };
            let (mut trained, hist) = train_epochs(&model, &train, eval.as_ref(), &rc.train).ctx(cfg_ctx)?;
            trained.norm_mean = Tensor::from_parts(&[channels], stats.mean.clone());
            trained.norm_std = Tensor::from_parts(&[channels], stats.std.clone());
            save_model(&trained, &model_path).ctx(flag("out", &model_path))?;
            hist.write_csv(&history).ctx(flag("history", &history))?;
            let last = hist.epochs.last();
            emit(
                out,
                &json_text(&json!({
                    "model": model_path,
                    "history": history,
                    "epochs": hist.epochs.len(),
                    "final_train_loss": last.map(|e| e.train_loss),
                    "final_eval_acc": last.and_then(|e| e.eval_acc),
                    "final_eval_macro_f1": last.and_then(|e| e.eval_macro_f1),
                })),
            )
        }

        Command::Eval { model, data } => {
            let loaded = Loaded::open(&model)?;
            resolved(&model_config_lines(loaded.base()));
            let csv = csv_in(&data, "test.csv");
            let (batch, _) = labeled_windows(&csv, loaded.base().config.window_len, "data")?;
            let x = loaded.prepare(&batch, "data", &csv)?;
            let probs = loaded.forward(&x).ctx(flag("model", &model))?;
            let metrics = evaluate_probs(&probs, &batch.labels).ctx(flag("data", &csv))?;
            emit(out, &json_text(&metrics))
        }

        Command::Infer { model, window } => {
            let loaded = Loaded::open(&model)?;
            resolved(&model_config_lines(loaded.base()));
            let batch = load_windows(&window, loaded.base().config.window_len, "window")?;
            let x = loaded.prepare(&batch, "window", &window)?;
            let probs = loaded.forward(&x).ctx(flag("model", &model))?;
            let k = loaded.base().config.classes;
            let rows: Vec<_> = probs
                .data()
                .chunks(k)
                .map(|p| json!({ "probabilities": p, "argmax": crate::training::argmax(p) }))
                .collect();
            emit(out, &json_text(&json!({ "windows": rows })))
        }

        Command::Quantize {
            model,
            calib,
            out: out_path,
            calib_windows,
            mode,
        } => {
            let base = load_model(&model).ctx(flag("model", &model))?;
            resolved(&format!(
                "{}calib_windows={calib_windows}\nmode={mode:?}",
                model_config_lines(&base)
            ));
            let csv = csv_in(&calib, "train.csv");
            let loaded = Loaded::Float(base);
            let batch = load_windows(&csv, loaded.base().config.window_len, "calib")?;
            let x = loaded.prepare(&batch, "calib", &csv)?;
            let n = batch.len();
            let take = calib_windows.clamp(1, n);
            let idx: Vec<usize> = (0..take).map(|i| i * n / take).collect();
            let calib_batch = WindowBatch {
                windows: x,
                labels: batch.labels.clone(),
                norm_stats: None,
            }
            .select(&idx)
            .ctx(flag("calib", &csv))?;
            let mode = match mode {
                ModeArg::WeightActivation => QuantMode::WeightActivation,
                ModeArg::WeightOnly => QuantMode::WeightOnly,
            };
            let q = calibrate_with_mode(loaded.base(), &calib_batch, mode).ctx(flag("calib", &csv))?;
            save_quantized(&q, &out_path).ctx(flag("out", &out_path))?;
            emit(
                out,
                &json_text(&json!({
                    "out": out_path,
                    "mode": format!("{mode:?}"),
                    "calibration_windows": take,
                    "quantized_tensors": q.weights.keys().collect::<Vec<_>>(),
                    "fallback_ops": crate::quant::FALLBACK_OPS,
                })),
            )
        }

        Command::Count { config } => {
            let rc = match &config {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| SpectraError::io(p, e))
                        .ctx(flag("config", p))?;
                    RunConfig::parse(&text).ctx(flag("config", p))?
                }
                None => RunConfig::default(),
            };
            resolved(&rc.render());
            rc.model
                .validate()
                .ctx(|| config.as_ref().map_or("config".into(), |p| format!("--config {}", p.display())))?;
            let report = count_costs(&rc.model);
            let mut v = serde_json::to_value(&report).expect("serializable");
            v["total_macs"] = json!(report.total_macs());
            emit(out, &json_text(&v))
        }

        Command::Bench {
            model,
            int8,
            format,
            out: out_path,
            warmup,
            iters,
            seed,
        } => {
            let fmt: ReportFormat = format.parse().ctx(|| format!("--format {format}"))?;
            let loaded = Loaded::open(&model)?;
            resolved(&format!(
                "{}int8={int8}\nformat={format}\nwarmup={warmup}\niters={iters}\nseed={seed}",
                model_config_lines(loaded.base())
            ));
            let cfg = &loaded.base().config;
            let window = rng_normal(&mut Rng::new(seed), &[cfg.window_len, cfg.channels], 0.0, 1.0)
                .ctx(|| "--seed".into())?;
            let mut reports = vec![bench_inference(BenchTarget::Float(loaded.base()), &window, warmup, iters)
                .ctx(|| "--iters".into())?];
            if int8 {
                let Loaded::Quant(q) = &loaded else {
                    return Err(CliError {
                        context: format!("--model {}", model.display()),
                        source: SpectraError::Usage("--int8 needs a quantized model file (see `spectra quantize`)".into()),
                    });
                };
                reports.push(bench_inference(BenchTarget::Int8(q), &window, warmup, iters).ctx(|| "--iters".into())?);
            }
            let text = render_reports(&reports, fmt).ctx(|| format!("--format {format}"))?;
            match out_path {
                Some(p) => {
                    std::fs::write(&p, &text)
                        .map_err(|e| SpectraError::io(&p, e))
                        .ctx(flag("out", &p))?;
                    emit(out, &format!("wrote {} report(s) to {}\n", reports.len(), p.display()))
                }
                None => emit(out, &text),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["spectra", "bogus"]), 1);
        assert_eq!(run(["spectra", "count", "--nope"]), 1);
        assert_eq!(run(["spectra", "--help"]), 0);
    }
}
