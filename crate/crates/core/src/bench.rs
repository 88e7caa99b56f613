//! Single-window latency benchmark.
//!
//! Each measured iteration takes three monotonic timestamps around the
//! STFT front-end and the network backbone, so `stft + nn == total` per
//! iteration up to float addition. Batch size is fixed at 1 and the loop
//! runs on the calling thread. Energy is not measured.

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::costs::count_costs;
use crate::error::{Result, SpectraError};
use crate::model::{FloatKernels, ModelParams};
use crate::quant::QuantizedModel;
use crate::tensor::{peak_buffer_bytes, reset_peak_buffer, Tensor};

pub const DEFAULT_WARMUP: usize = 50;
pub const DEFAULT_ITERS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl Summary {
    pub fn of(samples: &[f64]) -> Summary {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        Summary {
            mean: s.iter().sum::<f64>() / n as f64,
            median: median_sorted(&s),
            p95: s[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1],
        }
    }
}

fn median_sorted(s: &[f64]) -> f64 {
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Median of unsorted samples.
pub fn median(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    median_sorted(&s)
}

/// Per-iteration timings in milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawTimings {
    pub stft_ms: Vec<f64>,
    pub nn_ms: Vec<f64>,
    pub total_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub stft_ms: Summary,
    pub nn_ms: Summary,
    pub total_ms: Summary,
    pub samples_per_s: f64,
    pub params: u64,
    /// Network plus filter-bank STFT MACs.
    pub macs: u64,
    /// Largest single buffer the inference path requested (approximate).
    pub peak_alloc_bytes: u64,
    pub warmup_iters: usize,
    pub measure_iters: usize,
    /// `FP32` or `INT8`.
    pub precision_tag: String,
    /// Raw samples; JSON only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<RawTimings>,
}

pub const CSV_HEADER: &str = "stft_ms_mean,stft_ms_median,stft_ms_p95,\
nn_ms_mean,nn_ms_median,nn_ms_p95,\
total_ms_mean,total_ms_median,total_ms_p95,\
samples_per_s,params,macs,peak_alloc_bytes,warmup_iters,measure_iters,precision_tag";

/// What to run: the float model or its INT8 counterpart.
#[derive(Clone, Copy)]
pub enum BenchTarget<'a> {
    Float(&'a ModelParams),
    Int8(&'a QuantizedModel),
}

impl BenchTarget<'_> {
    fn base(&self) -> &ModelParams {
        match self {
            BenchTarget::Float(m) => m,
            BenchTarget::Int8(q) => &q.base,
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            BenchTarget::Float(_) => "FP32",
            BenchTarget::Int8(_) => "INT8",
        }
    }

    /// One timed inference: `(stft_ms, nn_ms, total_ms)`.
    fn run_once(&self, window: &Tensor) -> Result<(f64, f64, f64)> {
        let t0 = Instant::now();
        let m = self.base().spectrogram(window)?;
        let t1 = Instant::now();
        let probs = match self {
            BenchTarget::Float(model) => model.backbone(&m, &mut FloatKernels::new(model))?,
            BenchTarget::Int8(q) => q.dequantized_model().backbone(&m, &mut q.kernels()?)?,
        };
        let t2 = Instant::now();
        std::hint::black_box(probs);
        let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
        Ok((ms(t1 - t0), ms(t2 - t1), ms(t2 - t0)))
    }
}

/// Times `iters` single-window inferences after `warmup` untimed ones.
pub fn bench_inference(target: BenchTarget, window: &Tensor, warmup: usize, iters: usize) -> Result<BenchReport> {
    if iters < 10 {
        return Err(SpectraError::Config(format!("need at least 10 measured iterations, got {iters}")));
    }
    let cfg = &target.base().config;
    if window.shape() != [cfg.window_len, cfg.channels] {
        return Err(SpectraError::Dimension(format!(
            "bench window must be ({}, {}), got {:?}",
            cfg.window_len,
            cfg.channels,
            window.shape()
        )));
    }
    for _ in 0..warmup {
        target.run_once(window)?;
    }
    reset_peak_buffer();
    let mut raw = RawTimings::default();
    for _ in 0..iters {
        let (s, n, t) = target.run_once(window)?;
        raw.stft_ms.push(s);
        raw.nn_ms.push(n);
        raw.total_ms.push(t);
    }
    let costs = count_costs(cfg);
    let total = Summary::of(&raw.total_ms);
    Ok(BenchReport {
        stft_ms: Summary::of(&raw.stft_ms),
        nn_ms: Summary::of(&raw.nn_ms),
        total_ms: total,
        samples_per_s: 1000.0 / total.median,
        params: costs.total_params,
        macs: costs.total_macs(),
        peak_alloc_bytes: peak_buffer_bytes() as u64,
        warmup_iters: warmup,
        measure_iters: iters,
        precision_tag: target.tag().to_string(),
        raw: Some(raw),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = SpectraError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(SpectraError::Usage(format!("unknown report format {s:?} (expected json or csv)"))),
        }
    }
}

fn csv_row(r: &BenchReport) -> String {
    let s = |x: &Summary| format!("{},{},{}", x.mean, x.median, x.p95);
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        s(&r.stft_ms),
        s(&r.nn_ms),
        s(&r.total_ms),
        r.samples_per_s,
        r.params,
        r.macs,
        r.peak_alloc_bytes,
        r.warmup_iters,
        r.measure_iters,
        r.precision_tag
    )
}

/// JSON: one object per report (an array when there are several).
/// CSV: [`CSV_HEADER`] then one row per report; raw samples are omitted.
pub fn render_reports(reports: &[BenchReport], format: ReportFormat) -> Result<String> {
    Ok(match format {
        ReportFormat::Json => {
            let v = match reports {
                [one] => serde_json::to_string_pretty(one),
                many => serde_json::to_string_pretty(many),
            };
            v.map_err(|e| SpectraError::Data(format!("cannot encode report: {e}")))? + "\n"
        }
        ReportFormat::Csv => {
            let mut out = String::from(CSV_HEADER);
            out.push('\n');
            for r in reports {
                out.push_str(&csv_row(r));
                out.push('\n');
            }
            out
        }
    })
}

pub fn emit_report(report: &BenchReport, format: &str, path: impl AsRef<Path>) -> Result<()> {
    emit_reports(std::slice::from_ref(report), format, path)
}

pub fn emit_reports(reports: &[BenchReport], format: &str, path: impl AsRef<Path>) -> Result<()> {
    let text = render_reports(reports, format.parse()?)?;
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| SpectraError::io(path, e))
}

pub fn parse_reports(text: &str) -> Result<Vec<BenchReport>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') || trimmed.starts_with('[') {
        let v: serde_json::Value =
            serde_json::from_str(trimmed).map_err(|e| SpectraError::Data(format!("bad report JSON: {e}")))?;
        let out = if v.is_array() {
            serde_json::from_value(v)
        } else {
            serde_json::from_value(v).map(|r| vec![r])
        };
        return out.map_err(|e| SpectraError::Data(format!("bad report JSON: {e}")));
    }
    let mut lines = trimmed.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(SpectraError::Data("report CSV header does not match".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 16 {
                return Err(SpectraError::Data(format!("report row has {} fields: {line}", f.len())));
            }
            let num = |i: usize| -> Result<f64> {
                f[i].parse().map_err(|_| SpectraError::Data(format!("bad number {:?}", f[i])))
            };
            let int = |i: usize| -> Result<u64> {
                f[i].parse().map_err(|_| SpectraError::Data(format!("bad integer {:?}", f[i])))
            };
            let sum = |i: usize| -> Result<Summary> {
                Ok(Summary {
                    mean: num(i)?,
                    median: num(i + 1)?,
                    p95: num(i + 2)?,
                })
            };
            Ok(BenchReport {
                stft_ms: sum(0)?,
                nn_ms: sum(3)?,
                total_ms: sum(6)?,
                samples_per_s: num(9)?,
                params: int(10)?,
                macs: int(11)?,
                peak_alloc_bytes: int(12)?,
                warmup_iters: int(13)? as usize,
                measure_iters: int(14)? as usize,
                precision_tag: f[15].to_string(),
                raw: None,
            })
        })
        .collect()
}

pub fn load_reports(path: impl AsRef<Path>) -> Result<Vec<BenchReport>> {
    let path = path.as_ref();
    parse_reports(&std::fs::read_to_string(path).map_err(|e| SpectraError::io(path, e))?)
}
