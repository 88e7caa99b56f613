//! Post-training INT8 affine quantization.
//!
//! Per-tensor asymmetric parameters: `q = clamp(round(v / scale) + zp, -128, 127)`
//! and `v ≈ (q - zp) · scale`, rounding half away from zero. The calibrated
//! range always contains 0, so zero padding and ReLU zeros are exact and the
//! zero point fits in `i8`.
//!
//! Eligible operators (conv, attention projections, GRU input projection,
//! pooling scores, classifier) run as `i8 × i8 → i32` accumulations in
//! weight+activation mode. Everything in [`FALLBACK_OPS`] stays in `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::WindowBatch;
use crate::error::{Result, SpectraError};
use crate::format::{self, QuantEntry, QuantSection, VERSION_QUANT};
use crate::model::{ActSite, FloatKernels, Kernels, ModelParams, Observed};
use crate::layers::bins_last;
use crate::tensor::Tensor;

/// Weight tensors with INT8 payloads.
pub const ELIGIBLE: [&str; 8] = [
    "sepconv.depthwise",
    "sepconv.pointwise",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "gru.proj",
    "pool.w",
    "clf.w",
];

/// Operators that always execute on dequantized reals.
pub const FALLBACK_OPS: [&str; 8] = [
    "stft",
    "sepconv.batchnorm",
    "sepconv.relu",
    "attn.softmax_mix",
    "gru.recurrence",
    "pool.softmax",
    "clf.bias",
    "clf.softmax",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i8,
}

impl QuantParams {
    /// Affine parameters covering `[min(lo, 0), max(hi, 0)]`.
    pub fn from_range(lo: f64, hi: f64) -> Result<QuantParams> {
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(SpectraError::Calibration(format!("invalid range [{lo}, {hi}]")));
        }
        let (lo, hi) = (lo.min(0.0), hi.max(0.0));
        if lo == hi {
            return Ok(QuantParams {
                scale: hi.abs().max(1e-8) / 127.0,
                zero_point: 0,
            });
        }
        let scale = (hi - lo) / 255.0;
        let zp = (-128.0 - lo / scale).round().clamp(-128.0, 127.0);
        Ok(QuantParams {
            scale,
            zero_point: zp as i8,
        })
    }

    pub fn from_values(values: &[f64]) -> Result<QuantParams> {
        if values.is_empty() {
            return Err(SpectraError::Calibration("no values to calibrate from".into()));
        }
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        Self::from_range(lo, hi)
    }

    pub fn quantize(&self, v: f64) -> i8 {
        ((v / self.scale).round() + self.zero_point as f64).clamp(-128.0, 127.0) as i8
    }

    pub fn dequantize(&self, q: i8) -> f64 {
        (q as i32 - self.zero_point as i32) as f64 * self.scale
    }

    /// Range of representable values.
    pub fn range(&self) -> (f64, f64) {
        (self.dequantize(-128), self.dequantize(127))
    }

    fn centered(&self, v: f64) -> i32 {
        self.quantize(v) as i32 - self.zero_point as i32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub params: QuantParams,
    pub shape: Vec<usize>,
    pub values: Vec<i8>,
}

impl QuantTensor {
    pub fn quantize(t: &Tensor, params: QuantParams) -> Self {
        QuantTensor {
            params,
            shape: t.shape().to_vec(),
            values: t.data().iter().map(|&v| params.quantize(v)).collect(),
        }
    }

    pub fn dequantize(&self) -> Tensor {
        Tensor::from_parts(
            &self.shape,
            self.values.iter().map(|&q| self.params.dequantize(q)).collect(),
        )
    }

    fn centered(&self) -> Vec<i32> {
        let zp = self.params.zero_point as i32;
        self.values.iter().map(|&q| q as i32 - zp).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// INT8 weights dequantized into real-valued kernels.
    WeightOnly,
    /// INT8 weights and activations with 32-bit integer accumulation.
    WeightActivation,
}

impl QuantMode {
    fn code(self) -> u8 {
        match self {
            QuantMode::WeightOnly => 0,
            QuantMode::WeightActivation => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(QuantMode::WeightOnly),
            1 => Ok(QuantMode::WeightActivation),
            _ => Err(crate::FormatError::Malformed(format!("unknown quant mode {c}")).into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub base: ModelParams,
    pub mode: QuantMode,
    pub weights: BTreeMap<String, QuantTensor>,
    pub activations: BTreeMap<ActSite, QuantParams>,
    /// `base` with eligible weights replaced by their dequantized values.
    dequantized: ModelParams,
}

/// Eligible names present in a model (ablations drop some).
pub fn eligible_names(model: &ModelParams) -> Vec<&'static str> {
    ELIGIBLE.into_iter().filter(|n| model.get(n).is_some()).collect()
}

/// Activation sites a model actually visits.
pub fn active_sites(model: &ModelParams) -> Vec<ActSite> {
    ActSite::ALL
        .into_iter()
        .filter(|s| match s {
            ActSite::Attention => model.attn.is_some(),
            ActSite::Projection | ActSite::Pool => model.gru.is_some(),
            _ => true,
        })
        .collect()
}

impl QuantizedModel {
    /// Assembles a quantized model from explicit parameters. Every eligible
    /// weight needs parameters; weight+activation mode also needs every
    /// active site.
    pub fn from_params(
        base: &ModelParams,
        mode: QuantMode,
        weight_params: &BTreeMap<String, QuantParams>,
        activations: BTreeMap<ActSite, QuantParams>,
    ) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for name in eligible_names(base) {
            let p = weight_params
                .get(name)
                .ok_or_else(|| SpectraError::Usage(format!("no quantization parameters for {name}")))?;
            weights.insert(name.to_string(), QuantTensor::quantize(base.get(name).expect("eligible"), *p));
        }
        Self::assemble(base.clone(), mode, weights, activations)
    }

    /// Weight-only quantization; needs no calibration data.
    pub fn weight_only(base: &ModelParams) -> Result<Self> {
        let params = weight_ranges(base)?;
        Self::from_params(base, QuantMode::WeightOnly, &params, BTreeMap::new())
    }

    fn assemble(
        base: ModelParams,
        mode: QuantMode,
        weights: BTreeMap<String, QuantTensor>,
        activations: BTreeMap<ActSite, QuantParams>,
    ) -> Result<Self> {
        if mode == QuantMode::WeightActivation {
            if let Some(s) = active_sites(&base).into_iter().find(|s| !activations.contains_key(s)) {
                return Err(SpectraError::Usage(format!(
                    "model is not calibrated: no activation parameters for {}",
                    s.name()
                )));
            }
        }
        let mut dequantized = base.clone();
        for (name, q) in &weights {
            let slot = dequantized
                .get_mut(name)
                .ok_or_else(|| SpectraError::Usage(format!("{name} is not a parameter of this model")))?;
            if slot.shape() != q.shape.as_slice() {
                return Err(SpectraError::Shape(format!(
                    "quantized {name} has shape {:?}, model has {:?}",
                    q.shape,
                    slot.shape()
                )));
            }
            *slot = q.dequantize();
        }
        Ok(QuantizedModel {
            base,
            mode,
            weights,
            activations,
            dequantized,
        })
    }

    /// The base model with eligible weights replaced by dequantized values.
    pub fn dequantized_model(&self) -> &ModelParams {
        &self.dequantized
    }

    pub fn kernels(&self) -> Result<Box<dyn Kernels + '_>> {
        Ok(match self.mode {
            QuantMode::WeightOnly => Box::new(FloatKernels::new(&self.dequantized)),
            QuantMode::WeightActivation => Box::new(Int8Kernels::new(self)?),
        })
    }

    /// Class probabilities for one `(T, C)` window.
    pub fn predict_window(&self, window: &Tensor) -> Result<Vec<f64>> {
        let m = self.base.spectrogram(window)?;
        self.dequantized.backbone(&m, &mut self.kernels()?)
    }
}

impl<K: Kernels + ?Sized> Kernels for Box<K> {
    fn depthwise(&mut self, m: &[f64], l: usize) -> Vec<f64> {
        (**self).depthwise(m, l)
    }
    fn pointwise(&mut self, dw: &[f64], l: usize) -> Vec<f64> {
        (**self).pointwise(dw, l)
    }
    fn qkv(&mut self, x: &[f64], rows: usize) -> [Vec<f64>; 3] {
        (**self).qkv(x, rows)
    }
    fn project(&mut self, z: &[f64], l: usize) -> Vec<f64> {
        (**self).project(z, l)
    }
    fn pool_scores(&mut self, h: &[f64], l: usize) -> Vec<f64> {
        (**self).pool_scores(h, l)
    }
    fn logits(&mut self, s: &[f64]) -> Vec<f64> {
        (**self).logits(s)
    }
}

fn weight_ranges(model: &ModelParams) -> Result<BTreeMap<String, QuantParams>> {
    eligible_names(model)
        .into_iter()
        .map(|n| Ok((n.to_string(), QuantParams::from_values(model.get(n).expect("eligible").data())?)))
        .collect()
}

/// Weight+activation quantization with activation ranges observed over
/// eval-mode passes on the (already normalized) calibration windows.
pub fn calibrate(model: &ModelParams, data: &WindowBatch) -> Result<QuantizedModel> {
    calibrate_with_mode(model, data, QuantMode::WeightActivation)
}

pub fn calibrate_with_mode(model: &ModelParams, data: &WindowBatch, mode: QuantMode) -> Result<QuantizedModel> {
    if data.is_empty() {
        return Err(SpectraError::Calibration("calibration set is empty".into()));
    }
    let windows = &data.windows;
    if windows.rank() != 3 || windows.shape()[0] != data.len() {
        return Err(SpectraError::Dimension(format!(
            "calibration windows {:?} do not match {} labels",
            windows.shape(),
            data.len()
        )));
    }
    let mut ranges: BTreeMap<ActSite, (f64, f64)> = BTreeMap::new();
    let mut fp = FloatKernels::new(model);
    let mut observed = Observed {
        inner: &mut fp,
        observe: |site: ActSite, xs: &[f64]| {
            let e = ranges.entry(site).or_insert((f64::INFINITY, f64::NEG_INFINITY));
            for &v in xs {
                e.0 = e.0.min(v);
                e.1 = e.1.max(v);
            }
        },
    };
    for i in 0..windows.shape()[0] {
        let m = model.spectrogram(&windows.slice0(i))?;
        model.backbone(&m, &mut observed)?;
    }
    let activations = ranges
        .into_iter()
        .map(|(s, (lo, hi))| Ok((s, QuantParams::from_range(lo, hi)?)))
        .collect::<Result<_>>()?;
    QuantizedModel::from_params(model, mode, &weight_ranges(model)?, activations)
}

/// `(B, T, C) -> (B, K)` through the quantized path.
pub fn quantized_forward(q: &QuantizedModel, x: &Tensor) -> Result<Tensor> {
    let cfg = &q.base.config;
    let b = match x.shape() {
        &[b, t, c] if t == cfg.window_len && c == cfg.channels => b,
        s => {
            return Err(SpectraError::Dimension(format!(
                "input batch must be (B, {}, {}), got {s:?}",
                cfg.window_len, cfg.channels
            )))
        }
    };
    let mut kernels = q.kernels()?;
    let mut out = Vec::with_capacity(b * cfg.classes);
    for i in 0..b {
        let m = q.base.spectrogram(&x.slice0(i))?;
        out.extend(q.dequantized.backbone(&m, &mut kernels)?);
    }
    Tensor::new(&[b, cfg.classes], out)
}

struct IntWeight {
    scale: f64,
    centered: Vec<i32>,
}

impl IntWeight {
    fn new(q: &QuantizedModel, name: &str) -> Option<Self> {
        q.weights.get(name).map(|w| IntWeight {
            scale: w.params.scale,
            centered: w.centered(),
        })
    }
}

/// Integer kernels: activations are quantized at each operator input and
/// accumulated against centered INT8 weights in `i32`.
pub struct Int8Kernels<'a> {
    q: &'a QuantizedModel,
    depthwise: IntWeight,
    pointwise: IntWeight,
    qkv: Option<[IntWeight; 3]>,
    proj: Option<IntWeight>,
    pool: Option<IntWeight>,
    clf: IntWeight,
}

impl<'a> Int8Kernels<'a> {
    pub fn new(q: &'a QuantizedModel) -> Result<Self> {
        if q.mode != QuantMode::WeightActivation {
            return Err(SpectraError::Usage("integer kernels need weight+activation mode".into()));
        }
        let w = |n: &str| IntWeight::new(q, n).ok_or_else(|| SpectraError::Usage(format!("{n} not quantized")));
        let qkv = if q.base.attn.is_some() {
            Some([w("attn.wq")?, w("attn.wk")?, w("attn.wv")?])
        } else {
            None
        };
        Ok(Int8Kernels {
            q,
            depthwise: w("sepconv.depthwise")?,
            pointwise: w("sepconv.pointwise")?,
            qkv,
            proj: IntWeight::new(q, "gru.proj"),
            pool: IntWeight::new(q, "pool.w"),
            clf: w("clf.w")?,
        })
    }

    fn act(&self, site: ActSite, x: &[f64]) -> (f64, Vec<i32>) {
        let p = self.q.activations[&site];
        (p.scale, x.iter().map(|&v| p.centered(v)).collect())
    }
}

/// `(m, k) × (k, n)` on centered integers, rescaled to reals.
fn int_matmul(x: &[i32], w: &[i32], m: usize, k: usize, n: usize, scale: f64) -> Vec<f64> {
    let mut acc = vec![0i32; m * n];
    for i in 0..m {
        let row = &x[i * k..(i + 1) * k];
        let out = &mut acc[i * n..(i + 1) * n];
        for (p, &xv) in row.iter().enumerate() {
            if xv == 0 {
                continue;
            }
            for (o, &wv) in out.iter_mut().zip(&w[p * n..(p + 1) * n]) {
                *o += xv * wv;
            }
        }
    }
    acc.into_iter().map(|a| a as f64 * scale).collect()
}

impl Kernels for Int8Kernels<'_> {
    fn depthwise(&mut self, m: &[f64], l: usize) -> Vec<f64> {
        let cfg = &self.q.base.config;
        let (f, c, k) = (cfg.n_bins(), cfg.channels, cfg.kernel_size);
        let (sx, x) = self.act(ActSite::Depthwise, m);
        let scale = sx * self.depthwise.scale;
        let theta = &self.depthwise.centered;
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; m.len()];
        for li in 0..l {
            for fi in 0..f {
                for ci in 0..c {
                    let mut acc = 0i32;
                    for i in 0..k {
                        let ls = li as isize + i as isize - pad;
                        if ls < 0 || ls >= l as isize {
                            continue;
                        }
                        for j in 0..k {
                            let fs = fi as isize + j as isize - pad;
                            if fs < 0 || fs >= f as isize {
                                continue;
                            }
                            acc += theta[(ci * k + i) * k + j] * x[(ls as usize * f + fs as usize) * c + ci];
                        }
                    }
                    out[(li * f + fi) * c + ci] = acc as f64 * scale;
                }
            }
        }
        out
    }

    fn pointwise(&mut self, dw: &[f64], l: usize) -> Vec<f64> {
        let cfg = &self.q.base.config;
        let (f, c, d) = (cfg.n_bins(), cfg.channels, cfg.conv_features);
        let (sx, x) = self.act(ActSite::Pointwise, &bins_last(dw, l, f, c));
        int_matmul(&x, &self.pointwise.centered, l * c, f, d, sx * self.pointwise.scale)
    }

    fn qkv(&mut self, x: &[f64], rows: usize) -> [Vec<f64>; 3] {
        let d = self.q.base.config.conv_features;
        let (sx, xq) = self.act(ActSite::Attention, x);
        let ws = self.qkv.as_ref().expect("attention enabled");
        [0, 1, 2].map(|i| int_matmul(&xq, &ws[i].centered, rows, d, d, sx * ws[i].scale))
    }

    fn project(&mut self, z: &[f64], l: usize) -> Vec<f64> {
        let cfg = &self.q.base.config;
        let (flat, h) = (cfg.channels * cfg.conv_features, cfg.hidden);
        let (sx, x) = self.act(ActSite::Projection, z);
        let w = self.proj.as_ref().expect("gru enabled");
        int_matmul(&x, &w.centered, l, flat, h, sx * w.scale)
    }

    fn pool_scores(&mut self, h: &[f64], l: usize) -> Vec<f64> {
        let width = 2 * self.q.base.config.hidden;
        let (sx, x) = self.act(ActSite::Pool, h);
        let w = self.pool.as_ref().expect("gru enabled");
        int_matmul(&x, &w.centered, l, width, 1, sx * w.scale)
    }

    fn logits(&mut self, s: &[f64]) -> Vec<f64> {
        let (sx, x) = self.act(ActSite::Classifier, s);
        let n = x.len();
        let bias = self.q.base.clf.b.data();
        self.clf
            .centered
            .chunks(n)
            .zip(bias)
            .map(|(row, b)| {
                let acc: i32 = row.iter().zip(&x).map(|(w, v)| w * v).sum();
                acc as f64 * sx * self.clf.scale + b
            })
            .collect()
    }
}

fn to_section(q: &QuantizedModel) -> QuantSection {
    let mut entries: Vec<QuantEntry> = q
        .weights
        .iter()
        .map(|(name, t)| QuantEntry {
            name: name.clone(),
            scale: t.params.scale as f32,
            zero_point: t.params.zero_point,
            payload: t.values.clone(),
        })
        .collect();
    entries.extend(q.activations.iter().map(|(site, p)| QuantEntry {
        name: site.name().to_string(),
        scale: p.scale as f32,
        zero_point: p.zero_point,
        payload: Vec::new(),
    }));
    QuantSection {
        mode: q.mode.code(),
        entries,
    }
}

fn from_section(base: ModelParams, section: QuantSection) -> Result<QuantizedModel> {
    let malformed = |m: String| SpectraError::from(crate::FormatError::Malformed(m));
    let mode = QuantMode::from_code(section.mode)?;
    let mut weights = BTreeMap::new();
    let mut activations = BTreeMap::new();
    for e in section.entries {
        let params = QuantParams {
            scale: e.scale as f64,
            zero_point: e.zero_point,
        };
        if !(params.scale > 0.0) {
            return Err(malformed(format!("{} has non-positive scale {}", e.name, e.scale)));
        }
        if let Some(site) = ActSite::from_name(&e.name) {
            activations.insert(site, params);
            continue;
        }
        let shape = base
            .get(&e.name)
            .ok_or_else(|| malformed(format!("quant entry for unknown tensor {}", e.name)))?
            .shape()
            .to_vec();
        if shape.iter().product::<usize>() != e.payload.len() {
            return Err(malformed(format!("payload of {} has {} values", e.name, e.payload.len())));
        }
        weights.insert(
            e.name,
            QuantTensor {
                params,
                shape,
                values: e.payload,
            },
        );
    }
    if let Some(missing) = eligible_names(&base).into_iter().find(|n| !weights.contains_key(*n)) {
        return Err(malformed(format!("no quantized payload for {missing}")));
    }
    QuantizedModel::assemble(base, mode, weights, activations)
}

pub fn save_quantized(q: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    format::write_file(path.as_ref(), &format::encode(&q.base, Some(&to_section(q)))?)
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    let (base, section) = format::decode(&format::read_file(path.as_ref())?, &[VERSION_QUANT])?;
    from_section(base, section.expect("version 2 carries a quant table"))
}
