//! End-to-end network assembly.
//!
//! [`ModelParams`] owns every learnable tensor under a stable dotted name
//! (`sepconv.depthwise`, `attn.wq`, `gru.fwd.wz`, `clf.w`, ...) plus the
//! non-learnable buffers (BatchNorm running statistics and the input
//! normalization recorded at training time).
//!
//! Inference goes through [`ModelParams::backbone`], generic over a
//! [`Kernels`] implementation that supplies the weight-bearing linear maps;
//! the float path and the INT8 path share everything else.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpectraError};
use crate::layers::{
    bins_last, mean_pool, mean_pool_backward, AttentionCache, AttnPool, BiGru, ChannelAttention,
    Classifier, ClassifierCache, GruCache, PoolCache, SepConvBlock, SepConvCache,
};
use crate::spectral::{self, stft_filterbank, StftPlan};
use crate::tensor::{matmul_into, matvec, note_buffer, softmax_in_place, Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectraConfig {
    /// Samples per window (T).
    pub window_len: usize,
    /// Sensor channels (C).
    pub channels: usize,
    /// Activity classes (K).
    pub classes: usize,
    pub n_fft: usize,
    pub hop: usize,
    /// Depthwise kernel size (k), odd.
    pub kernel_size: usize,
    /// Conv feature width (D).
    pub conv_features: usize,
    /// GRU hidden size (H).
    pub hidden: usize,
    pub dropout: f64,
    pub use_channel_attention: bool,
    pub use_gru: bool,
    pub seed: u64,
}

impl Default for SpectraConfig {
    fn default() -> Self {
        SpectraConfig {
            window_len: 100,
            channels: 6,
            classes: 6,
            n_fft: 16,
            hop: 8,
            kernel_size: 3,
            conv_features: 16,
            hidden: 32,
            dropout: 0.2,
            use_channel_attention: true,
            use_gru: true,
            seed: 0,
        }
    }
}

impl SpectraConfig {
    pub fn validate(&self) -> Result<()> {
        let mut failed = Vec::new();
        for (name, v) in [
            ("window_len", self.window_len),
            ("channels", self.channels),
            ("classes", self.classes),
            ("n_fft", self.n_fft),
            ("hop", self.hop),
            ("kernel_size", self.kernel_size),
            ("conv_features", self.conv_features),
            ("hidden", self.hidden),
        ] {
            if v < 1 {
                failed.push(format!("{name} >= 1"));
            }
        }
        if !self.n_fft.is_power_of_two() || self.n_fft < 2 {
            failed.push(format!("n_fft power of two >= 2 (got {})", self.n_fft));
        }
        if self.window_len < self.n_fft {
            failed.push(format!(
                "window_len >= n_fft (got {} < {})",
                self.window_len, self.n_fft
            ));
        }
        if self.kernel_size % 2 == 0 {
            failed.push(format!("kernel_size odd (got {})", self.kernel_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            failed.push(format!("dropout in [0, 1) (got {})", self.dropout));
        }
        if failed.is_empty() {
            Ok(())
        } else {
            Err(SpectraError::Config(format!("failed constraints: {}", failed.join(", "))))
        }
    }

    /// F.
    pub fn n_bins(&self) -> usize {
        spectral::n_bins(self.n_fft)
    }

    /// L.
    pub fn n_frames(&self) -> usize {
        spectral::n_frames(self.window_len, self.n_fft, self.hop)
    }

    /// Width of the vector entering the classifier.
    pub fn head_width(&self) -> usize {
        if self.use_gru {
            2 * self.hidden
        } else {
            self.channels * self.conv_features
        }
    }
}

/// Parameter gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: SpectraConfig,
    plan: StftPlan,
    pub sepconv: SepConvBlock,
    pub attn: Option<ChannelAttention>,
    pub gru: Option<BiGru>,
    pub pool: Option<AttnPool>,
    pub clf: Classifier,
    /// Per-channel input mean used to normalize raw windows.
    pub norm_mean: Tensor,
    /// Per-channel input standard deviation.
    pub norm_std: Tensor,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.named_params() == other.named_params()
            && self.named_buffers() == other.named_buffers()
    }
}

/// Builds and initializes a model: Glorot-uniform weights, zero biases,
/// unit BatchNorm scale, attention gate at 0.
pub fn build_model(config: &SpectraConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    let (c, f, d, h) = (config.channels, config.n_bins(), config.conv_features, config.hidden);
    let plan = StftPlan::new(config.n_fft, config.hop, config.window_len)?;
    let sepconv = SepConvBlock::init(c, f, config.kernel_size, d, &mut rng);
    let attn = config
        .use_channel_attention
        .then(|| ChannelAttention::init(d, &mut rng));
    let gru = config.use_gru.then(|| BiGru::init(c * d, h, &mut rng));
    let pool = config.use_gru.then(|| AttnPool::init(2 * h, &mut rng));
    let clf = Classifier::init(config.classes, config.head_width(), config.dropout, &mut rng);
    Ok(ModelParams {
        config: config.clone(),
        plan,
        sepconv,
        attn,
        gru,
        pool,
        clf,
        norm_mean: Tensor::zeros(&[c]),
        norm_std: Tensor::ones(&[c]),
    })
}

/// Sites where an eligible operator reads its input activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActSite {
    Depthwise,
    Pointwise,
    Attention,
    Projection,
    Pool,
    Classifier,
}

impl ActSite {
    pub const ALL: [ActSite; 6] = [
        ActSite::Depthwise,
        ActSite::Pointwise,
        ActSite::Attention,
        ActSite::Projection,
        ActSite::Pool,
        ActSite::Classifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActSite::Depthwise => "act.depthwise_in",
            ActSite::Pointwise => "act.pointwise_in",
            ActSite::Attention => "act.attn_in",
            ActSite::Projection => "act.proj_in",
            ActSite::Pool => "act.pool_in",
            ActSite::Classifier => "act.clf_in",
        }
    }

    pub fn from_name(name: &str) -> Option<ActSite> {
        ActSite::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// The weight-bearing linear maps of the inference path.
pub trait Kernels {
    /// `(L, F, C) -> (L, F, C)` depthwise correlation.
    fn depthwise(&mut self, m: &[f64], l: usize) -> Vec<f64>;
    /// `(L, F, C) -> (L, C, D)` projection of the bin axis.
    fn pointwise(&mut self, dw: &[f64], l: usize) -> Vec<f64>;
    /// Row-wise `x·Wq, x·Wk, x·Wv` for `rows` rows of width D.
    fn qkv(&mut self, x: &[f64], rows: usize) -> [Vec<f64>; 3];
    /// `(L, C·D) -> (L, H)`.
    fn project(&mut self, z: &[f64], l: usize) -> Vec<f64>;
    /// `(L, 2H) -> (L)` pooling scores.
    fn pool_scores(&mut self, h: &[f64], l: usize) -> Vec<f64>;
    /// Classifier logits.
    fn logits(&mut self, s: &[f64]) -> Vec<f64>;
}

/// Float kernels reading the model weights directly.
pub struct FloatKernels<'a> {
    model: &'a ModelParams,
}

impl<'a> FloatKernels<'a> {
    pub fn new(model: &'a ModelParams) -> Self {
        FloatKernels { model }
    }
}

impl Kernels for FloatKernels<'_> {
    fn depthwise(&mut self, m: &[f64], l: usize) -> Vec<f64> {
        let (f, c) = (self.model.config.n_bins(), self.model.config.channels);
        let t = Tensor::from_parts(&[1, l, f, c], m.to_vec());
        self.model.sepconv.depthwise_conv(&t).expect("checked shapes").into_data()
    }

    fn pointwise(&mut self, dw: &[f64], l: usize) -> Vec<f64> {
        self.model.sepconv.pointwise_project(dw, 1, l, self.model.config.channels)
    }

    fn qkv(&mut self, x: &[f64], rows: usize) -> [Vec<f64>; 3] {
        let attn = self.model.attn.as_ref().expect("attention enabled");
        let d = attn.features();
        [&attn.wq, &attn.wk, &attn.wv].map(|w| {
            let mut out = vec![0.0; rows * d];
            matmul_into(x, w.data(), &mut out, rows, d, d);
            out
        })
    }

    fn project(&mut self, z: &[f64], l: usize) -> Vec<f64> {
        let gru = self.model.gru.as_ref().expect("gru enabled");
        let (flat, h) = (gru.proj.shape()[0], gru.proj.shape()[1]);
        let mut u = vec![0.0; l * h];
        matmul_into(z, gru.proj.data(), &mut u, l, flat, h);
        u
    }

    fn pool_scores(&mut self, h: &[f64], l: usize) -> Vec<f64> {
        let pool = self.model.pool.as_ref().expect("gru enabled");
        matvec(h, pool.w.data(), l, pool.w.len())
    }

    fn logits(&mut self, s: &[f64]) -> Vec<f64> {
        self.model.clf.logits(s)
    }
}

/// Wraps kernels and reports every activation they read.
pub struct Observed<'k, K, F> {
    pub inner: &'k mut K,
    pub observe: F,
}

impl<K: Kernels, F: FnMut(ActSite, &[f64])> Kernels for Observed<'_, K, F> {
    fn depthwise(&mut self, m: &[f64], l: usize) -> Vec<f64> {
        (self.observe)(ActSite::Depthwise, m);
        self.inner.depthwise(m, l)
    }
    fn pointwise(&mut self, dw: &[f64], l: usize) -> Vec<f64> {
        (self.observe)(ActSite::Pointwise, dw);
        self.inner.pointwise(dw, l)
    }
    fn qkv(&mut self, x: &[f64], rows: usize) -> [Vec<f64>; 3] {
        (self.observe)(ActSite::Attention, x);
        self.inner.qkv(x, rows)
    }
    fn project(&mut self, z: &[f64], l: usize) -> Vec<f64> {
        (self.observe)(ActSite::Projection, z);
        self.inner.project(z, l)
    }
    fn pool_scores(&mut self, h: &[f64], l: usize) -> Vec<f64> {
        (self.observe)(ActSite::Pool, h);
        self.inner.pool_scores(h, l)
    }
    fn logits(&mut self, s: &[f64]) -> Vec<f64> {
        (self.observe)(ActSite::Classifier, s);
        self.inner.logits(s)
    }
}

struct SampleCache {
    attn: Option<AttentionCache>,
    gru: Option<(GruCache, PoolCache)>,
    feat_shape: Vec<usize>,
    clf: ClassifierCache,
}

/// State recorded by a training-mode forward pass.
pub struct ForwardCache {
    conv: SepConvCache,
    samples: Vec<SampleCache>,
    /// `(B, K)` output probabilities.
    pub probs: Tensor,
}

impl ForwardCache {
    pub fn conv_cache(&self) -> &SepConvCache {
        &self.conv
    }
}

impl ModelParams {
    pub fn plan(&self) -> &StftPlan {
        &self.plan
    }

    /// Learnable parameters in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .sepconv
            .params()
            .into_iter()
            .map(|(n, t)| (format!("sepconv.{n}"), t))
            .collect();
        if let Some(a) = &self.attn {
            out.extend(a.params().into_iter().map(|(n, t)| (format!("attn.{n}"), t)));
        }
        if let Some(g) = &self.gru {
            out.extend(g.params().into_iter().map(|(n, t)| (format!("gru.{n}"), t)));
        }
        if let Some(p) = &self.pool {
            out.extend(p.params().into_iter().map(|(n, t)| (format!("pool.{n}"), t)));
        }
        out.extend(self.clf.params().into_iter().map(|(n, t)| (format!("clf.{n}"), t)));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .sepconv
            .params_mut()
            .into_iter()
            .map(|(n, t)| (format!("sepconv.{n}"), t))
            .collect();
        if let Some(a) = &mut self.attn {
            out.extend(a.params_mut().into_iter().map(|(n, t)| (format!("attn.{n}"), t)));
        }
        if let Some(g) = &mut self.gru {
            out.extend(g.params_mut().into_iter().map(|(n, t)| (format!("gru.{n}"), t)));
        }
        if let Some(p) = &mut self.pool {
            out.extend(p.params_mut().into_iter().map(|(n, t)| (format!("pool.{n}"), t)));
        }
        out.extend(self.clf.params_mut().into_iter().map(|(n, t)| (format!("clf.{n}"), t)));
        out
    }

    /// Non-learnable tensors that still travel with the model file.
    pub fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("sepconv.bn_running_mean".into(), &self.sepconv.bn_running_mean),
            ("sepconv.bn_running_var".into(), &self.sepconv.bn_running_var),
            ("input.norm_mean".into(), &self.norm_mean),
            ("input.norm_std".into(), &self.norm_std),
        ]
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("sepconv.bn_running_mean".into(), &mut self.sepconv.bn_running_mean),
            ("sepconv.bn_running_var".into(), &mut self.sepconv.bn_running_var),
            ("input.norm_mean".into(), &mut self.norm_mean),
            ("input.norm_std".into(), &mut self.norm_std),
        ]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named_params()
            .into_iter()
            .chain(self.named_buffers())
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if let Some(i) = self.named_params().iter().position(|(n, _)| n == name) {
            return self.named_params_mut().into_iter().nth(i).map(|(_, t)| t);
        }
        self.named_buffers_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_batch(&self, x: &Tensor) -> Result<usize> {
        let cfg = &self.config;
        match x.shape() {
            &[b, t, c] if t == cfg.window_len && c == cfg.channels => Ok(b),
            s => Err(SpectraError::Dimension(format!(
                "input batch must be (B, {}, {}), got {s:?}",
                cfg.window_len, cfg.channels
            ))),
        }
    }

    /// STFT magnitudes `(L, F, C)` of one `(T, C)` window via the filter bank.
    pub fn spectrogram(&self, window: &Tensor) -> Result<Tensor> {
        Ok(stft_filterbank(window, &self.plan)?.mags)
    }

    /// Everything after the STFT for one window in eval mode; returns class
    /// probabilities.
    pub fn backbone<K: Kernels>(&self, m: &Tensor, kernels: &mut K) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let (l, f, c, d) = (cfg.n_frames(), cfg.n_bins(), cfg.channels, cfg.conv_features);
        if m.shape() != [l, f, c] {
            return Err(SpectraError::Dimension(format!(
                "spectrogram must be {:?}, got {:?}",
                [l, f, c],
                m.shape()
            )));
        }
        let dw = kernels.depthwise(m.data(), l);
        let v = kernels.pointwise(&dw, l);
        note_buffer(dw.len().max(v.len()));
        let mut x = self.sepconv.batchnorm_eval(&v);
        if self.sepconv.residual {
            let shortcut = bins_last(m.data(), l, f, c);
            x.iter_mut().zip(shortcut).for_each(|(a, b)| *a += b);
        }
        x.iter_mut().for_each(|v| *v = v.max(0.0));

        if let Some(attn) = &self.attn {
            let [q, k, v] = kernels.qkv(&x, l * c);
            note_buffer(3 * q.len());
            x = ChannelAttention::mix(&x, &q, &k, &v, attn.gamma.data()[0], l, c, d).0;
        }
        let s = match (&self.gru, &self.pool) {
            (Some(gru), Some(_)) => {
                let u = kernels.project(&x, l);
                let h = gru.recur(&u, l);
                note_buffer(h.len());
                let e = kernels.pool_scores(&h, l);
                AttnPool::pool_with_scores(&h, e, 2 * gru.hidden()).0
            }
            _ => mean_pool(&Tensor::new(&[l, c * d], x)?)?.into_data(),
        };
        let mut probs = kernels.logits(&s);
        softmax_in_place(&mut probs);
        Ok(probs)
    }

    /// Eval-mode class probabilities for one `(T, C)` window.
    pub fn predict_window(&self, window: &Tensor) -> Result<Vec<f64>> {
        let m = self.spectrogram(window)?;
        self.backbone(&m, &mut FloatKernels::new(self))
    }

    /// `(B, T, C) -> (B, K)`. Training mode draws dropout masks from a stream
    /// seeded by the config seed.
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        if training {
            let mut rng = Rng::new(self.config.seed);
            Ok(self.forward_train(x, &mut rng)?.1.probs)
        } else {
            self.forward_eval(x)
        }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.check_batch(x)?;
        if !x.is_finite() {
            return Err(SpectraError::Numeric("input batch is not finite".into()));
        }
        let mut out = Vec::with_capacity(b * self.config.classes);
        for i in 0..b {
            out.extend(self.predict_window(&x.slice0(i))?);
        }
        Tensor::new(&[b, self.config.classes], out)
    }

    /// Training-mode forward: BatchNorm uses batch statistics, dropout is active.
    pub fn forward_train(&self, x: &Tensor, rng: &mut Rng) -> Result<(Tensor, ForwardCache)> {
        let b = self.check_batch(x)?;
        if !x.is_finite() {
            return Err(SpectraError::Numeric("input batch is not finite".into()));
        }
        let specs = (0..b)
            .map(|i| self.spectrogram(&x.slice0(i)))
            .collect::<Result<Vec<_>>>()?;
        let m = Tensor::stack(&specs)?;
        let (feats, conv) = self.sepconv.forward(&m, true)?;
        let mut samples = Vec::with_capacity(b);
        let mut probs = Vec::with_capacity(b * self.config.classes);
        for i in 0..b {
            let mut feat = feats.slice0(i);
            let feat_shape = feat.shape().to_vec();
            let attn = match &self.attn {
                Some(a) => {
                    let (out, cache) = a.forward(&feat)?;
                    feat = out;
                    Some(cache)
                }
                None => None,
            };
            let (s, gru) = match (&self.gru, &self.pool) {
                (Some(g), Some(p)) => {
                    let (h, gc) = g.forward(&feat)?;
                    let (s, _, pc) = p.forward(&h)?;
                    (s, Some((gc, pc)))
                }
                _ => (mean_pool(&feat)?, None),
            };
            let (y, clf) = self.clf.forward(&s, rng, true)?;
            probs.extend_from_slice(y.data());
            samples.push(SampleCache {
                attn,
                gru,
                feat_shape,
                clf,
            });
        }
        let probs = Tensor::new(&[b, self.config.classes], probs)?;
        Ok((
            probs.clone(),
            ForwardCache {
                conv,
                samples,
                probs,
            },
        ))
    }

    /// Gradients of the batch-mean cross-entropy with respect to every
    /// learnable parameter.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<Gradients> {
        let k = self.config.classes;
        let b = cache.samples.len();
        if labels.len() != b {
            return Err(SpectraError::Usage(format!(
                "backward got {} labels for a cached batch of {b}",
                labels.len()
            )));
        }
        let mut grads: Gradients = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, Tensor::zeros(t.shape())))
            .collect();
        let mut acc = |prefix: &str, name: &str, g: &Tensor| -> Result<()> {
            grads
                .get_mut(&format!("{prefix}.{name}"))
                .expect("gradient slot exists")
                .add_assign(g)
        };
        let mut d_feats = Vec::with_capacity(b);
        for (i, (sc, &label)) in cache.samples.iter().zip(labels).enumerate() {
            if label >= k {
                return Err(SpectraError::Label { label, classes: k });
            }
            let mut dlogits = cache.probs.slice0(i).into_data();
            dlogits[label] -= 1.0;
            dlogits.iter_mut().for_each(|v| *v /= b as f64);
            let (gc, mut ds) = self.clf.backward_logits(&sc.clf, &Tensor::new(&[k], dlogits)?)?;
            for (n, t) in gc.named() {
                acc("clf", n, t)?;
            }
            let mut dfeat = match (&self.gru, &self.pool, &sc.gru) {
                (Some(g), Some(p), Some((gcache, pcache))) => {
                    let (gp, dh) = p.backward(pcache, &ds)?;
                    for (n, t) in gp.params() {
                        acc("pool", n, t)?;
                    }
                    let (gg, dx) = g.backward(gcache, &dh)?;
                    for (n, t) in gg.params() {
                        acc("gru", &n, t)?;
                    }
                    dx
                }
                _ => {
                    ds = mean_pool_backward(&sc.feat_shape, &ds)?;
                    ds
                }
            };
            if let (Some(a), Some(ac)) = (&self.attn, &sc.attn) {
                let (ga, dx) = a.backward(ac, &dfeat)?;
                for (n, t) in ga.params() {
                    acc("attn", n, t)?;
                }
                dfeat = dx;
            }
            d_feats.push(dfeat);
        }
        let (gs, _) = self.sepconv.backward(&cache.conv, &Tensor::stack(&d_feats)?)?;
        for (n, t) in gs.named() {
            acc("sepconv", n, t)?;
        }
        Ok(grads)
    }
}
