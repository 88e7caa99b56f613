//! IMU recordings to normalized training windows.
//!
//! A [`Recording`] is resampled onto a 50 Hz grid, cut into fixed windows
//! with 50% overlap, and z-normalized per channel with statistics taken from
//! the training split. [`synth_dataset`] produces a labeled rhythmic-activity
//! stand-in for the public HAR datasets.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpectraError};
use crate::tensor::{Rng, Tensor};

pub const TARGET_HZ: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    /// Seconds, strictly increasing.
    pub timestamps: Vec<f64>,
    /// `(N, C)`.
    pub samples: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl Recording {
    pub fn new(timestamps: Vec<f64>, samples: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        if samples.rank() != 2 || samples.shape()[0] != timestamps.len() {
            return Err(SpectraError::Data(format!(
                "{} timestamps but samples have shape {:?}",
                timestamps.len(),
                samples.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != timestamps.len() {
                return Err(SpectraError::Data(format!(
                    "{} labels for {} samples",
                    l.len(),
                    timestamps.len()
                )));
            }
        }
        if let Some(i) = timestamps.windows(2).position(|w| !(w[0] < w[1])) {
            return Err(SpectraError::Unsorted {
                row: i + 1,
                prev: timestamps[i],
                next: timestamps[i + 1],
            });
        }
        Ok(Recording {
            timestamps,
            samples,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[1]
    }
}

/// Per-channel normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Always positive; zero-variance channels carry 1.
    pub std: Vec<f64>,
    /// Channels whose observed standard deviation was zero.
    pub degenerate: Vec<bool>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            degenerate: vec![false; channels],
        }
    }

    pub fn has_warning(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// `(B, T, C)`.
    pub windows: Tensor,
    /// One class per window. Unlabeled recordings produce zeros.
    pub labels: Vec<usize>,
    pub norm_stats: Option<NormStats>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Windows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<WindowBatch> {
        let windows = Tensor::stack(&idx.iter().map(|&i| self.windows.slice0(i)).collect::<Vec<_>>())?;
        Ok(WindowBatch {
            windows,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            norm_stats: self.norm_stats.clone(),
        })
    }
}

/// Linear interpolation onto a uniform 50 Hz grid spanning `[t_0, t_last]`.
/// Labels come from the nearest original sample, earlier on ties.
pub fn resample_50hz(rec: &Recording) -> Result<Recording> {
    let n = rec.len();
    if n < 2 {
        return Err(SpectraError::Data(format!("resampling needs at least 2 samples, got {n}")));
    }
    let c = rec.channels();
    let t = &rec.timestamps;
    let (t0, t_last) = (t[0], t[n - 1]);
    let count = ((t_last - t0) * TARGET_HZ + 1e-9).floor() as usize + 1;
    let x = rec.samples.data();
    let mut times = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * c);
    let mut labels = rec.labels.as_ref().map(|_| Vec::with_capacity(count));
    let mut j = 0;
    for i in 0..count {
        let ti = (t0 + i as f64 / TARGET_HZ).min(t_last);
        while j + 2 < n && t[j + 1] <= ti {
            j += 1;
        }
        let (ta, tb) = (t[j], t[j + 1]);
        let w = ((ti - ta) / (tb - ta)).clamp(0.0, 1.0);
        for ch in 0..c {
            let (a, b) = (x[j * c + ch], x[(j + 1) * c + ch]);
            data.push(if w == 0.0 { a } else if w == 1.0 { b } else { a + w * (b - a) });
        }
        if let (Some(out), Some(src)) = (&mut labels, &rec.labels) {
            out.push(if ti - ta <= tb - ti { src[j] } else { src[j + 1] });
        }
        times.push(ti);
    }
    Recording::new(times, Tensor::new(&[count, c], data)?, labels)
}

/// Fixed-length windows with the given overlap fraction; the partial tail is
/// dropped. Window labels are the per-sample majority, lowest class on ties.
pub fn make_windows(rec: &Recording, window: usize, overlap: f64) -> Result<WindowBatch> {
    if window == 0 || !(0.0..1.0).contains(&overlap) {
        return Err(SpectraError::Config(format!(
            "window must be >= 1 and overlap in [0, 1), got {window} and {overlap}"
        )));
    }
    let n = rec.len();
    if n < window {
        return Err(SpectraError::Data(format!(
            "recording has {n} samples, fewer than the window length {window}"
        )));
    }
    let hop = ((window as f64 * (1.0 - overlap)).round() as usize).max(1);
    let count = (n - window) / hop + 1;
    let c = rec.channels();
    let x = rec.samples.data();
    let mut data = Vec::with_capacity(count * window * c);
    let mut labels = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * hop;
        data.extend_from_slice(&x[start * c..(start + window) * c]);
        labels.push(match &rec.labels {
            Some(l) => majority(&l[start..start + window]),
            None => 0,
        });
    }
    Ok(WindowBatch {
        windows: Tensor::new(&[count, window, c], data)?,
        labels,
        norm_stats: None,
    })
}

fn majority(labels: &[usize]) -> usize {
    let max = labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max + 1];
    for &l in labels {
        counts[l] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    counts.iter().position(|&n| n == best).unwrap_or(0)
}

/// Pooled per-channel statistics over every sample of every window.
pub fn compute_stats(windows: &Tensor) -> NormStats {
    let c = *windows.shape().last().expect("rank >= 1");
    let rows = windows.len() / c;
    let mut mean = vec![0.0; c];
    for row in windows.data().chunks(c) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; c];
    for row in windows.data().chunks(c) {
        for ch in 0..c {
            var[ch] += (row[ch] - mean[ch]).powi(2);
        }
    }
    let mut degenerate = vec![false; c];
    let std = var
        .iter()
        .enumerate()
        .map(|(ch, v)| {
            let s = (v / rows as f64).sqrt();
            if s > 0.0 {
                s
            } else {
                degenerate[ch] = true;
                1.0
            }
        })
        .collect();
    NormStats {
        mean,
        std,
        degenerate,
    }
}

/// Applies `(x - mean) / std` per channel over the last axis.
pub fn apply_stats(x: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let c = *x.shape().last().expect("rank >= 1");
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(SpectraError::Dimension(format!(
            "stats cover {} channels, data has {c}",
            stats.mean.len()
        )));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        for ch in 0..c {
            row[ch] = (row[ch] - stats.mean[ch]) / stats.std[ch];
        }
    }
    Ok(out)
}

/// Z-normalizes with `stats`, or with statistics of the batch itself when
/// none are given (training split).
pub fn normalize(batch: &WindowBatch, stats: Option<&NormStats>) -> Result<WindowBatch> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => compute_stats(&batch.windows),
    };
    Ok(WindowBatch {
        windows: apply_stats(&batch.windows, &stats)?,
        labels: batch.labels.clone(),
        norm_stats: Some(stats),
    })
}

/// Normalizes every window with its own statistics.
pub fn normalize_per_window(batch: &WindowBatch) -> Result<WindowBatch> {
    let windows = (0..batch.len())
        .map(|i| {
            let w = batch.windows.slice0(i);
            apply_stats(&w, &compute_stats(&w))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WindowBatch {
        windows: Tensor::stack(&windows)?,
        labels: batch.labels.clone(),
        norm_stats: None,
    })
}

/// Inverse of [`normalize`].
pub fn denormalize(batch: &WindowBatch) -> Result<Tensor> {
    let stats = batch
        .norm_stats
        .as_ref()
        .ok_or_else(|| SpectraError::Usage("batch carries no normalization stats".into()))?;
    let c = stats.mean.len();
    let mut out = batch.windows.clone();
    for row in out.data_mut().chunks_mut(c) {
        for ch in 0..c {
            row[ch] = row[ch] * stats.std[ch] + stats.mean[ch];
        }
    }
    Ok(out)
}

/// Knobs of the synthetic generator; [`synth_dataset`] uses the defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub seconds_per_class: f64,
    pub seed: u64,
    pub channels: usize,
    pub noise_std: f64,
    /// Length of the stretches that share one random phase.
    pub segment_seconds: f64,
    pub train_fraction: f64,
}

impl SynthConfig {
    pub fn new(n_classes: usize, seconds_per_class: f64, seed: u64) -> Self {
        SynthConfig {
            n_classes,
            seconds_per_class,
            seed,
            channels: 6,
            noise_std: 0.3,
            segment_seconds: 5.0,
            train_fraction: 0.8,
        }
    }
}

/// Fundamental frequency of class `c` in Hz.
pub fn class_frequency(class: usize) -> f64 {
    1.0 + 0.8 * class as f64
}

/// Noise-free value of channel `channel` for `class` at time `t` with phase `phase`.
pub fn synth_value(class: usize, channel: usize, t: f64, phase: f64) -> f64 {
    let theta = 2.0 * PI * class_frequency(class) * t + phase;
    let harmonic = (channel % 3 + 1) as f64;
    theta.sin() + (harmonic * theta).sin() / (1.0 + channel as f64)
}

pub fn synth_dataset(n_classes: usize, seconds_per_class: f64, seed: u64) -> Result<(Recording, Recording)> {
    synth_with(&SynthConfig::new(n_classes, seconds_per_class, seed))
}

/// Class blocks laid end to end; each block's first `train_fraction` goes to
/// the training recording and the rest to the test recording.
pub fn synth_with(cfg: &SynthConfig) -> Result<(Recording, Recording)> {
    if cfg.n_classes < 2 {
        return Err(SpectraError::Config(format!("need at least 2 classes, got {}", cfg.n_classes)));
    }
    if cfg.channels == 0 || cfg.noise_std < 0.0 || !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(SpectraError::Config(format!("invalid synthetic config {cfg:?}")));
    }
    let per_class = (cfg.seconds_per_class * TARGET_HZ).round() as usize;
    let n_train = (per_class as f64 * cfg.train_fraction).round() as usize;
    let segment = ((cfg.segment_seconds * TARGET_HZ).round() as usize).max(1);
    if n_train == 0 || n_train == per_class {
        return Err(SpectraError::Config(format!(
            "{} s per class leaves an empty split",
            cfg.seconds_per_class
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let c = cfg.channels;
    let mut parts = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
    for class in 0..cfg.n_classes {
        let mut phase = 0.0;
        for i in 0..per_class {
            if i % segment == 0 {
                phase = rng.uniform() * 2.0 * PI;
            }
            let t = i as f64 / TARGET_HZ;
            let (data, labels) = &mut parts[usize::from(i >= n_train)];
            for ch in 0..c {
                data.push(synth_value(class, ch, t, phase) + cfg.noise_std * rng.normal());
            }
            labels.push(class);
        }
    }
    let [train, test] = parts.map(|(data, labels)| {
        let n = labels.len();
        let times = (0..n).map(|i| i as f64 / TARGET_HZ).collect();
        Recording::new(times, Tensor::from_parts(&[n, c], data), Some(labels))
    });
    Ok((train?, test?))
}

/// Reads `t,c0,...,c{C-1}[,label]`.
pub fn read_csv(path: impl AsRef<Path>) -> Result<Recording> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| SpectraError::io(path, e))?;
    parse_csv(file)
}

pub fn parse_csv(reader: impl std::io::Read) -> Result<Recording> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| SpectraError::Data(format!("unreadable header: {e}")))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    let has_label = cols.last() == Some(&"label");
    let n_ch = cols.len().saturating_sub(1 + has_label as usize);
    let expected: Vec<String> = std::iter::once("t".to_string())
        .chain((0..n_ch).map(|i| format!("c{i}")))
        .chain(has_label.then(|| "label".to_string()))
        .collect();
    if n_ch == 0 || cols != expected {
        return Err(SpectraError::Data(format!(
            "header must be t,c0,...,c{{C-1}}[,label], got {}",
            cols.join(",")
        )));
    }
    let mut times = Vec::new();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| SpectraError::Data(format!("row {row}: {e}")))?;
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .parse::<f64>()
                .map_err(|_| SpectraError::Data(format!("row {row}: bad number {:?}", &rec[j])))
        };
        let t = num(0)?;
        if let Some(&prev) = times.last() {
            if !(prev < t) {
                return Err(SpectraError::Unsorted { row, prev, next: t });
            }
        }
        times.push(t);
        for j in 1..=n_ch {
            data.push(num(j)?);
        }
        if has_label {
            let s = &rec[n_ch + 1];
            labels.push(
                s.parse::<usize>()
                    .map_err(|_| SpectraError::Data(format!("row {row}: bad label {s:?}")))?,
            );
        }
    }
    if times.is_empty() {
        return Err(SpectraError::Data("CSV has no rows".into()));
    }
    let n = times.len();
    Recording::new(times, Tensor::new(&[n, n_ch], data)?, has_label.then_some(labels))
}

pub fn write_csv(rec: &Recording, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| SpectraError::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let c = rec.channels();
    let mut header = vec!["t".to_string()];
    header.extend((0..c).map(|i| format!("c{i}")));
    if rec.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(io)?;
    for (i, row) in rec.samples.data().chunks(c).enumerate() {
        let mut fields = vec![rec.timestamps[i].to_string()];
        fields.extend(row.iter().map(|v| v.to_string()));
        if let Some(l) = &rec.labels {
            fields.push(l[i].to_string());
        }
        w.write_record(&fields).map_err(io)?;
    }
    w.flush().map_err(|e| SpectraError::io(path, e))
}
