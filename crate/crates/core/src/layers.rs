//! Learnable blocks of the network with hand-written backward passes.
//!
//! Every `forward` returns the output together with a cache; `backward`
//! consumes that cache plus the upstream gradient and returns parameter
//! gradients and the gradient with respect to the layer input. Parameter
//! gradients reuse the layer's own struct where the layer holds nothing but
//! learnable tensors.
//!
//! Shapes (per sample unless noted):
//! - separable conv: `(B, L, F, C) -> (B, L, C, D)`
//! - channel attention: `(L, C, D) -> (L, C, D)`
//! - Bi-GRU: `(L, C, D) -> (L, 2H)`
//! - attention pooling: `(L, 2H) -> (2H)`
//! - classifier: `(in) -> (K)` probabilities

use crate::error::{Result, SpectraError};
use crate::tensor::{glorot_uniform, matmul_into, matvec, sigmoid, softmax_in_place, Rng, Tensor};

fn dim_err(what: &str, expected: &[usize], got: &[usize]) -> SpectraError {
    SpectraError::Dimension(format!("{what}: expected {expected:?}, got {got:?}"))
}

fn expect_shape(t: &Tensor, expected: &[usize], what: &str) -> Result<()> {
    if t.shape() != expected {
        return Err(dim_err(what, expected, t.shape()));
    }
    Ok(())
}

fn stale(what: &str, expected: &[usize], got: &[usize]) -> SpectraError {
    SpectraError::Usage(format!(
        "{what} backward: upstream gradient {got:?} does not match cached output {expected:?}"
    ))
}

/// Accumulates `a += b` over slices of equal length.
fn axpy(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// `W^T · g` for `W` stored `(n, k)` output-major.
fn matvec_t(w: &[f64], g: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k];
    for i in 0..n {
        let gi = g[i];
        for (o, &wv) in out.iter_mut().zip(&w[i * k..(i + 1) * k]) {
            *o += gi * wv;
        }
    }
    out
}

/// `dW += g ⊗ x` for `W` stored `(n, k)`.
fn outer_acc(dw: &mut [f64], g: &[f64], x: &[f64]) {
    let k = x.len();
    for (i, &gi) in g.iter().enumerate() {
        for (d, &xv) in dw[i * k..(i + 1) * k].iter_mut().zip(x) {
            *d += gi * xv;
        }
    }
}

// ---------------------------------------------------------------------------
// Depthwise separable convolution + BatchNorm + ReLU
// ---------------------------------------------------------------------------

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Depthwise `k×k` correlation over `(frame, bin)` per channel, followed by a
/// shared `F -> D` projection of the bin axis, BatchNorm over `D` and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct SepConvBlock {
    /// `(C, k, k)`
    pub depthwise: Tensor,
    /// `(F, D)`
    pub pointwise: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_running_mean: Tensor,
    pub bn_running_var: Tensor,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Identity shortcut added before the ReLU; only valid when `D == F`.
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SepConvGrads {
    pub depthwise: Tensor,
    pub pointwise: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
}

impl SepConvGrads {
    pub fn named(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("depthwise", &self.depthwise),
            ("pointwise", &self.pointwise),
            ("bn_gamma", &self.bn_gamma),
            ("bn_beta", &self.bn_beta),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct SepConvCache {
    training: bool,
    input: Tensor,
    depthwise_out: Vec<f64>,
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    pre_relu: Vec<f64>,
    /// Batch statistics (mean, biased variance, element count) in training mode.
    pub batch_stats: Option<(Vec<f64>, Vec<f64>, usize)>,
}

impl SepConvBlock {
    pub fn init(channels: usize, bins: usize, kernel: usize, features: usize, rng: &mut Rng) -> Self {
        let kk = kernel * kernel;
        SepConvBlock {
            depthwise: glorot_uniform(rng, &[channels, kernel, kernel], kk, kk),
            pointwise: glorot_uniform(rng, &[bins, features], bins, features),
            bn_gamma: Tensor::ones(&[features]),
            bn_beta: Tensor::zeros(&[features]),
            bn_running_mean: Tensor::zeros(&[features]),
            bn_running_var: Tensor::ones(&[features]),
            bn_eps: BN_EPS,
            bn_momentum: BN_MOMENTUM,
            residual: bins == features,
        }
    }

    pub fn channels(&self) -> usize {
        self.depthwise.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.depthwise.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.pointwise.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.pointwise.shape()[1]
    }

    pub fn params(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("depthwise", &self.depthwise),
            ("pointwise", &self.pointwise),
            ("bn_gamma", &self.bn_gamma),
            ("bn_beta", &self.bn_beta),
        ]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("depthwise", &mut self.depthwise),
            ("pointwise", &mut self.pointwise),
            ("bn_gamma", &mut self.bn_gamma),
            ("bn_beta", &mut self.bn_beta),
        ]
    }

    pub fn zero_grads(&self) -> SepConvGrads {
        SepConvGrads {
            depthwise: Tensor::zeros(self.depthwise.shape()),
            pointwise: Tensor::zeros(self.pointwise.shape()),
            bn_gamma: Tensor::zeros(self.bn_gamma.shape()),
            bn_beta: Tensor::zeros(self.bn_beta.shape()),
        }
    }

    fn check(&self, input: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (b, l, f, c) = match input.shape() {
            &[b, l, f, c] => (b, l, f, c),
            s => return Err(dim_err("separable conv input (B, L, F, C)", &[0, 0, self.bins(), self.channels()], s)),
        };
        if f != self.bins() || c != self.channels() {
            return Err(dim_err(
                "separable conv input (B, L, F, C)",
                &[b, l, self.bins(), self.channels()],
                input.shape(),
            ));
        }
        if self.kernel() % 2 == 0 {
            return Err(SpectraError::Config(format!(
                "depthwise kernel must be odd, got {}",
                self.kernel()
            )));
        }
        if self.residual && self.features() != f {
            return Err(SpectraError::Config(format!(
                "residual shortcut needs D == F, got D={} F={f}",
                self.features()
            )));
        }
        Ok((b, l, f, c))
    }

    /// Single spectrogram `(L, F, C)` to `(L, C, D)`.
    pub fn forward_one(&self, m: &Tensor, training: bool) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(m.shape());
        let batched = m.clone().reshape(&shape)?;
        let (out, _) = self.forward(&batched, training)?;
        let s = out.shape()[1..].to_vec();
        out.reshape(&s)
    }

    /// Zero-padded depthwise correlation of a `(B, L, F, C)` block.
    pub fn depthwise_conv(&self, input: &Tensor) -> Result<Tensor> {
        let (b, l, f, c) = self.check(input)?;
        Ok(Tensor::from_parts(
            input.shape(),
            depthwise_correlate(input.data(), self.depthwise.data(), b, l, f, c, self.kernel()),
        ))
    }

    /// Projects `(B, L, F, C)` along `F` to `(B, L, C, D)`.
    pub fn pointwise_project(&self, dw: &[f64], b: usize, l: usize, c: usize) -> Vec<f64> {
        let (f, d) = (self.bins(), self.features());
        let transposed = bins_last(dw, b * l, f, c);
        let mut v = vec![0.0; b * l * c * d];
        matmul_into(&transposed, self.pointwise.data(), &mut v, b * l * c, f, d);
        v
    }

    /// Eval-mode BatchNorm applied to `(.., D)` data, returned before the ReLU.
    pub fn batchnorm_eval(&self, v: &[f64]) -> Vec<f64> {
        let d = self.features();
        let (scale, shift) = self.bn_eval_affine();
        v.chunks(d)
            .flat_map(|row| row.iter().enumerate().map(|(j, &x)| x * scale[j] + shift[j]).collect::<Vec<_>>())
            .collect()
    }

    /// Per-feature `(scale, shift)` of eval-mode BatchNorm.
    pub fn bn_eval_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.features();
        let mut scale = vec![0.0; d];
        let mut shift = vec![0.0; d];
        for j in 0..d {
            let inv = 1.0 / (self.bn_running_var.data()[j] + self.bn_eps).sqrt();
            scale[j] = self.bn_gamma.data()[j] * inv;
            shift[j] = self.bn_beta.data()[j] - self.bn_running_mean.data()[j] * scale[j];
        }
        (scale, shift)
    }

    pub fn forward(&self, input: &Tensor, training: bool) -> Result<(Tensor, SepConvCache)> {
        let (b, l, f, c) = self.check(input)?;
        let d = self.features();
        let dw = depthwise_correlate(input.data(), self.depthwise.data(), b, l, f, c, self.kernel());
        let v = self.pointwise_project(&dw, b, l, c);

        let n = b * l * c;
        let (mean, var) = if training {
            let mut mean = vec![0.0; d];
            for row in v.chunks(d) {
                axpy(&mut mean, row);
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; d];
            for row in v.chunks(d) {
                for j in 0..d {
                    var[j] += (row[j] - mean[j]).powi(2);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            (mean, var)
        } else {
            (
                self.bn_running_mean.data().to_vec(),
                self.bn_running_var.data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + self.bn_eps).sqrt()).collect();
        let gamma = self.bn_gamma.data();
        let beta = self.bn_beta.data();
        let mut x_hat = vec![0.0; n * d];
        let mut pre = vec![0.0; n * d];
        for (i, row) in v.chunks(d).enumerate() {
            for j in 0..d {
                let xh = (row[j] - mean[j]) * inv_std[j];
                x_hat[i * d + j] = xh;
                pre[i * d + j] = gamma[j] * xh + beta[j];
            }
        }
        if self.residual {
            let shortcut = bins_last(input.data(), b * l, f, c);
            axpy(&mut pre, &shortcut);
        }
        let out: Vec<f64> = pre.iter().map(|&p| p.max(0.0)).collect();
        let cache = SepConvCache {
            training,
            input: input.clone(),
            depthwise_out: dw,
            x_hat,
            inv_std,
            pre_relu: pre,
            batch_stats: training.then_some((mean, var, n)),
        };
        Ok((Tensor::new(&[b, l, c, d], out)?, cache))
    }

    pub fn backward(&self, cache: &SepConvCache, upstream: &Tensor) -> Result<(SepConvGrads, Tensor)> {
        if !cache.training {
            return Err(SpectraError::Usage(
                "separable conv backward needs a cache from a training-mode forward".into(),
            ));
        }
        let (b, l, f, c) = self.check(&cache.input)?;
        let d = self.features();
        let k = self.kernel();
        let expected = [b, l, c, d];
        if upstream.shape() != expected {
            return Err(stale("separable conv", &expected, upstream.shape()));
        }
        let n = b * l * c;
        let g_pre: Vec<f64> = upstream
            .data()
            .iter()
            .zip(&cache.pre_relu)
            .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
            .collect();

        let mut d_gamma = vec![0.0; d];
        let mut d_beta = vec![0.0; d];
        for (gr, xr) in g_pre.chunks(d).zip(cache.x_hat.chunks(d)) {
            for j in 0..d {
                d_gamma[j] += gr[j] * xr[j];
                d_beta[j] += gr[j];
            }
        }
        // dL/dv through the batch-statistics normalization.
        let gamma = self.bn_gamma.data();
        let mut sum_dxh = vec![0.0; d];
        let mut sum_dxh_xh = vec![0.0; d];
        for (gr, xr) in g_pre.chunks(d).zip(cache.x_hat.chunks(d)) {
            for j in 0..d {
                let dxh = gr[j] * gamma[j];
                sum_dxh[j] += dxh;
                sum_dxh_xh[j] += dxh * xr[j];
            }
        }
        let nf = n as f64;
        let mut dv = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let dxh = g_pre[i * d + j] * gamma[j];
                dv[i * d + j] = cache.inv_std[j] / nf
                    * (nf * dxh - sum_dxh[j] - cache.x_hat[i * d + j] * sum_dxh_xh[j]);
            }
        }

        // Pointwise: v[(bl, c), :] = dw_t[(bl, c), :] · P.
        let dw_t = bins_last(&cache.depthwise_out, b * l, f, c);
        let mut d_pointwise = vec![0.0; f * d];
        for (xr, gr) in dw_t.chunks(f).zip(dv.chunks(d)) {
            outer_acc(&mut d_pointwise, xr, gr);
        }
        let p = self.pointwise.data();
        let mut d_dw_t = vec![0.0; n * f];
        for (row, gr) in d_dw_t.chunks_mut(f).zip(dv.chunks(d)) {
            for (fi, r) in row.iter_mut().enumerate() {
                *r = p[fi * d..(fi + 1) * d].iter().zip(gr).map(|(a, g)| a * g).sum();
            }
        }
        let d_dw = bins_first(&d_dw_t, b * l, f, c);

        let pad = (k / 2) as isize;
        let theta = self.depthwise.data();
        let x = cache.input.data();
        let mut d_theta = vec![0.0; c * k * k];
        let mut dx = vec![0.0; x.len()];
        let idx = |bi: usize, li: usize, fi: usize, ci: usize| ((bi * l + li) * f + fi) * c + ci;
        for bi in 0..b {
            for li in 0..l {
                for fi in 0..f {
                    for ci in 0..c {
                        let g = d_dw[idx(bi, li, fi, ci)];
                        if g == 0.0 {
                            continue;
                        }
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
                                let src = idx(bi, ls as usize, fs as usize, ci);
                                d_theta[(ci * k + i) * k + j] += g * x[src];
                                dx[src] += g * theta[(ci * k + i) * k + j];
                            }
                        }
                    }
                }
            }
        }
        if self.residual {
            let g_res = bins_first(&g_pre, b * l, f, c);
            axpy(&mut dx, &g_res);
        }
        let grads = SepConvGrads {
            depthwise: Tensor::new(&[c, k, k], d_theta)?,
            pointwise: Tensor::new(&[f, d], d_pointwise)?,
            bn_gamma: Tensor::new(&[d], d_gamma)?,
            bn_beta: Tensor::new(&[d], d_beta)?,
        };
        Ok((grads, Tensor::new(cache.input.shape(), dx)?))
    }

    /// Folds training-mode batch statistics into the running estimates
    /// (unbiased variance, exponential moving average).
    pub fn update_running_stats(&mut self, cache: &SepConvCache) {
        let Some((mean, var, n)) = &cache.batch_stats else {
            return;
        };
        let m = self.bn_momentum;
        let unbias = if *n > 1 { *n as f64 / (*n as f64 - 1.0) } else { 1.0 };
        for (r, &x) in self.bn_running_mean.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * x;
        }
        for (r, &x) in self.bn_running_var.data_mut().iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * x * unbias;
        }
    }
}

/// `(R, F, C)` to `(R, C, F)`.
pub fn bins_last(x: &[f64], rows: usize, f: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for fi in 0..f {
            for ci in 0..c {
                out[(r * c + ci) * f + fi] = x[(r * f + fi) * c + ci];
            }
        }
    }
    out
}

/// `(R, C, F)` to `(R, F, C)`.
pub fn bins_first(x: &[f64], rows: usize, f: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for ci in 0..c {
            for fi in 0..f {
                out[(r * f + fi) * c + ci] = x[(r * c + ci) * f + fi];
            }
        }
    }
    out
}

fn depthwise_correlate(
    x: &[f64],
    theta: &[f64],
    b: usize,
    l: usize,
    f: usize,
    c: usize,
    k: usize,
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; x.len()];
    let idx = |bi: usize, li: usize, fi: usize, ci: usize| ((bi * l + li) * f + fi) * c + ci;
    for bi in 0..b {
        for li in 0..l {
            for fi in 0..f {
                for ci in 0..c {
                    let mut acc = 0.0;
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
                            acc += theta[(ci * k + i) * k + j] * x[idx(bi, ls as usize, fs as usize, ci)];
                        }
                    }
                    out[idx(bi, li, fi, ci)] = acc;
                }
            }
        }
    }
    out
}

/// Parameter counts of a separable versus a standard conv mapping `C -> D`
/// with kernel `k`: `(kC + CD, kCD, kCD / (kC + CD))`.
pub fn sepconv_cost(channels: u64, kernel: u64, features: u64) -> (u64, u64, f64) {
    let separable = kernel * channels + channels * features;
    let standard = kernel * channels * features;
    (separable, standard, standard as f64 / separable as f64)
}

// ---------------------------------------------------------------------------
// Channel self-attention
// ---------------------------------------------------------------------------

/// Per frame: `X + γ · softmax(X Wq (X Wk)^T / sqrt(D)) · X Wv`, tokens = channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttention {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// Shape `[1]`.
    pub gamma: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Tensor,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    a: Vec<f64>,
    av: Vec<f64>,
}

impl ChannelAttention {
    pub fn init(features: usize, rng: &mut Rng) -> Self {
        ChannelAttention {
            wq: glorot_uniform(rng, &[features, features], features, features),
            wk: glorot_uniform(rng, &[features, features], features, features),
            wv: glorot_uniform(rng, &[features, features], features, features),
            gamma: Tensor::zeros(&[1]),
        }
    }

    pub fn zeros(features: usize) -> Self {
        ChannelAttention {
            wq: Tensor::zeros(&[features, features]),
            wk: Tensor::zeros(&[features, features]),
            wv: Tensor::zeros(&[features, features]),
            gamma: Tensor::zeros(&[1]),
        }
    }

    pub fn features(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn params(&self) -> [(&'static str, &Tensor); 4] {
        [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("gamma", &self.gamma)]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("gamma", &mut self.gamma),
        ]
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let d = self.features();
        match x.shape() {
            &[l, c, dd] if dd == d => Ok((l, c, d)),
            s => Err(dim_err("channel attention input (L, C, D)", &[s.first().copied().unwrap_or(0), s.get(1).copied().unwrap_or(0), d], s)),
        }
    }

    /// Mixes precomputed per-frame projections: `x + γ · softmax(q k^T / sqrt(D)) · v`.
    /// Returns `(output, A, A·V)`.
    pub fn mix(x: &[f64], q: &[f64], k: &[f64], v: &[f64], gamma: f64, l: usize, c: usize, d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = x.to_vec();
        let mut a_all = vec![0.0; l * c * c];
        let mut av_all = vec![0.0; l * c * d];
        for fr in 0..l {
            let o = fr * c * d;
            let (qf, kf, vf) = (&q[o..o + c * d], &k[o..o + c * d], &v[o..o + c * d]);
            let a = &mut a_all[fr * c * c..(fr + 1) * c * c];
            for i in 0..c {
                for j in 0..c {
                    a[i * c + j] = qf[i * d..(i + 1) * d]
                        .iter()
                        .zip(&kf[j * d..(j + 1) * d])
                        .map(|(x, y)| x * y)
                        .sum::<f64>()
                        * scale;
                }
                softmax_in_place(&mut a[i * c..(i + 1) * c]);
            }
            let av = &mut av_all[o..o + c * d];
            matmul_into(a, vf, av, c, c, d);
            for (dst, &val) in out[o..o + c * d].iter_mut().zip(av.iter()) {
                *dst += gamma * val;
            }
        }
        (out, a_all, av_all)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, AttentionCache)> {
        let (l, c, d) = self.check(x)?;
        let rows = l * c;
        let mut q = vec![0.0; rows * d];
        let mut k = vec![0.0; rows * d];
        let mut v = vec![0.0; rows * d];
        matmul_into(x.data(), self.wq.data(), &mut q, rows, d, d);
        matmul_into(x.data(), self.wk.data(), &mut k, rows, d, d);
        matmul_into(x.data(), self.wv.data(), &mut v, rows, d, d);
        let (out, a, av) = Self::mix(x.data(), &q, &k, &v, self.gamma.data()[0], l, c, d);
        let cache = AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            a,
            av,
        };
        Ok((Tensor::new(x.shape(), out)?, cache))
    }

    pub fn backward(&self, cache: &AttentionCache, upstream: &Tensor) -> Result<(ChannelAttention, Tensor)> {
        let (l, c, d) = self.check(&cache.x)?;
        if upstream.shape() != cache.x.shape() {
            return Err(stale("channel attention", cache.x.shape(), upstream.shape()));
        }
        let g = upstream.data();
        let gamma = self.gamma.data()[0];
        let scale = 1.0 / (d as f64).sqrt();
        let d_gamma: f64 = g.iter().zip(&cache.av).map(|(a, b)| a * b).sum();

        let mut dq = vec![0.0; l * c * d];
        let mut dk = vec![0.0; l * c * d];
        let mut dv = vec![0.0; l * c * d];
        for fr in 0..l {
            let o = fr * c * d;
            let a = &cache.a[fr * c * c..(fr + 1) * c * c];
            let (qf, kf, vf) = (&cache.q[o..o + c * d], &cache.k[o..o + c * d], &cache.v[o..o + c * d]);
            let d_out: Vec<f64> = g[o..o + c * d].iter().map(|x| x * gamma).collect();
            // dA = dO V^T ; dV = A^T dO
            let mut d_a = vec![0.0; c * c];
            for i in 0..c {
                for j in 0..c {
                    d_a[i * c + j] = d_out[i * d..(i + 1) * d]
                        .iter()
                        .zip(&vf[j * d..(j + 1) * d])
                        .map(|(x, y)| x * y)
                        .sum();
                }
            }
            for i in 0..c {
                for j in 0..c {
                    let aij = a[i * c + j];
                    for t in 0..d {
                        dv[o + j * d + t] += aij * d_out[i * d + t];
                    }
                }
            }
            // Softmax rows, then the 1/sqrt(D) scaling.
            for i in 0..c {
                let row = &a[i * c..(i + 1) * c];
                let dot: f64 = row.iter().zip(&d_a[i * c..(i + 1) * c]).map(|(x, y)| x * y).sum();
                for j in 0..c {
                    let ds = row[j] * (d_a[i * c + j] - dot) * scale;
                    for t in 0..d {
                        dq[o + i * d + t] += ds * kf[j * d + t];
                        dk[o + j * d + t] += ds * qf[i * d + t];
                    }
                }
            }
        }
        let x = cache.x.data();
        let rows = l * c;
        let xt = cache.x.clone().reshape(&[rows, d])?.transpose()?;
        let mut d_wq = vec![0.0; d * d];
        let mut d_wk = vec![0.0; d * d];
        let mut d_wv = vec![0.0; d * d];
        matmul_into(xt.data(), &dq, &mut d_wq, d, rows, d);
        matmul_into(xt.data(), &dk, &mut d_wk, d, rows, d);
        matmul_into(xt.data(), &dv, &mut d_wv, d, rows, d);

        let mut dx = g.to_vec();
        for (grad, w) in [(&dq, &self.wq), (&dk, &self.wk), (&dv, &self.wv)] {
            let wt = w.transpose()?;
            let mut tmp = vec![0.0; rows * d];
            matmul_into(grad, wt.data(), &mut tmp, rows, d, d);
            axpy(&mut dx, &tmp);
        }
        debug_assert_eq!(x.len(), dx.len());
        let grads = ChannelAttention {
            wq: Tensor::new(&[d, d], d_wq)?,
            wk: Tensor::new(&[d, d], d_wk)?,
            wv: Tensor::new(&[d, d], d_wv)?,
            gamma: Tensor::scalar(d_gamma),
        };
        Ok((grads, Tensor::new(cache.x.shape(), dx)?))
    }
}

// ---------------------------------------------------------------------------
// Bidirectional GRU with input projection
// ---------------------------------------------------------------------------

/// One GRU direction. Gates:
/// `z = σ(Wz u + Uz h + bz)`, `r = σ(Wr u + Ur h + br)`,
/// `n = tanh(Wn u + r ⊙ (Un h) + bn)`, `h' = (1 − z) ⊙ n + z ⊙ h`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruDirection {
    pub wz: Tensor,
    pub wr: Tensor,
    pub wn: Tensor,
    pub uz: Tensor,
    pub ur: Tensor,
    pub un: Tensor,
    pub bz: Tensor,
    pub br: Tensor,
    pub bn: Tensor,
}

#[derive(Debug, Clone)]
struct GruStep {
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

impl GruDirection {
    pub fn init(hidden: usize, input: usize, rng: &mut Rng) -> Self {
        GruDirection {
            wz: glorot_uniform(rng, &[hidden, input], input, hidden),
            wr: glorot_uniform(rng, &[hidden, input], input, hidden),
            wn: glorot_uniform(rng, &[hidden, input], input, hidden),
            uz: glorot_uniform(rng, &[hidden, hidden], hidden, hidden),
            ur: glorot_uniform(rng, &[hidden, hidden], hidden, hidden),
            un: glorot_uniform(rng, &[hidden, hidden], hidden, hidden),
            bz: Tensor::zeros(&[hidden]),
            br: Tensor::zeros(&[hidden]),
            bn: Tensor::zeros(&[hidden]),
        }
    }

    pub fn zeros(hidden: usize, input: usize) -> Self {
        GruDirection {
            wz: Tensor::zeros(&[hidden, input]),
            wr: Tensor::zeros(&[hidden, input]),
            wn: Tensor::zeros(&[hidden, input]),
            uz: Tensor::zeros(&[hidden, hidden]),
            ur: Tensor::zeros(&[hidden, hidden]),
            un: Tensor::zeros(&[hidden, hidden]),
            bz: Tensor::zeros(&[hidden]),
            br: Tensor::zeros(&[hidden]),
            bn: Tensor::zeros(&[hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wz.shape()[0]
    }

    pub fn input(&self) -> usize {
        self.wz.shape()[1]
    }

    pub fn params(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("wz", &self.wz),
            ("wr", &self.wr),
            ("wn", &self.wn),
            ("uz", &self.uz),
            ("ur", &self.ur),
            ("un", &self.un),
            ("bz", &self.bz),
            ("br", &self.br),
            ("bn", &self.bn),
        ]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 9] {
        [
            ("wz", &mut self.wz),
            ("wr", &mut self.wr),
            ("wn", &mut self.wn),
            ("uz", &mut self.uz),
            ("ur", &mut self.ur),
            ("un", &mut self.un),
            ("bz", &mut self.bz),
            ("br", &mut self.br),
            ("bn", &mut self.bn),
        ]
    }

    /// One recurrence step.
    pub fn cell(&self, u: &[f64], h: &[f64]) -> Vec<f64> {
        self.step(u, h).0
    }

    fn step(&self, u: &[f64], h: &[f64]) -> (Vec<f64>, GruStep) {
        let (hd, inp) = (self.hidden(), self.input());
        let wz = matvec(self.wz.data(), u, hd, inp);
        let wr = matvec(self.wr.data(), u, hd, inp);
        let wn = matvec(self.wn.data(), u, hd, inp);
        let uz = matvec(self.uz.data(), h, hd, hd);
        let ur = matvec(self.ur.data(), h, hd, hd);
        let hn = matvec(self.un.data(), h, hd, hd);
        let mut z = vec![0.0; hd];
        let mut r = vec![0.0; hd];
        let mut n = vec![0.0; hd];
        let mut out = vec![0.0; hd];
        for i in 0..hd {
            z[i] = sigmoid(wz[i] + uz[i] + self.bz.data()[i]);
            r[i] = sigmoid(wr[i] + ur[i] + self.br.data()[i]);
            n[i] = (wn[i] + r[i] * hn[i] + self.bn.data()[i]).tanh();
            out[i] = (1.0 - z[i]) * n[i] + z[i] * h[i];
        }
        let step = GruStep {
            h_prev: h.to_vec(),
            z,
            r,
            n,
            hn,
        };
        (out, step)
    }

    /// Runs the recurrence over `inputs` (rows of width `input()`) in the given
    /// order from a zero state, returning states in processing order.
    fn run(&self, inputs: &[f64], order: impl Iterator<Item = usize>) -> Vec<(usize, Vec<f64>, GruStep)> {
        let inp = self.input();
        let mut h = vec![0.0; self.hidden()];
        let mut steps = Vec::new();
        for pos in order {
            let (next, st) = self.step(&inputs[pos * inp..(pos + 1) * inp], &h);
            h = next.clone();
            steps.push((pos, next, st));
        }
        steps
    }

    /// BPTT over recorded steps. `dh_out` is `(L, H)` for this direction;
    /// accumulates into `grads` and `du` (`(L, input)`).
    fn backward_steps(
        &self,
        inputs: &[f64],
        steps: &[(usize, Vec<f64>, GruStep)],
        dh_out: &[f64],
        grads: &mut GruDirection,
        du: &mut [f64],
    ) {
        let (hd, inp) = (self.hidden(), self.input());
        let mut carry = vec![0.0; hd];
        for (pos, _, st) in steps.iter().rev() {
            let u = &inputs[pos * inp..(pos + 1) * inp];
            let mut dh = dh_out[pos * hd..(pos + 1) * hd].to_vec();
            axpy(&mut dh, &carry);
            let mut daz = vec![0.0; hd];
            let mut dar = vec![0.0; hd];
            let mut dan = vec![0.0; hd];
            let mut dhn = vec![0.0; hd];
            let mut dh_prev = vec![0.0; hd];
            for i in 0..hd {
                let (z, r, n) = (st.z[i], st.r[i], st.n[i]);
                let dz = dh[i] * (st.h_prev[i] - n);
                let dn = dh[i] * (1.0 - z);
                dh_prev[i] = dh[i] * z;
                dan[i] = dn * (1.0 - n * n);
                let dr = dan[i] * st.hn[i];
                dhn[i] = dan[i] * r;
                daz[i] = dz * z * (1.0 - z);
                dar[i] = dr * r * (1.0 - r);
            }
            outer_acc(grads.wz.data_mut(), &daz, u);
            outer_acc(grads.wr.data_mut(), &dar, u);
            outer_acc(grads.wn.data_mut(), &dan, u);
            outer_acc(grads.uz.data_mut(), &daz, &st.h_prev);
            outer_acc(grads.ur.data_mut(), &dar, &st.h_prev);
            outer_acc(grads.un.data_mut(), &dhn, &st.h_prev);
            axpy(grads.bz.data_mut(), &daz);
            axpy(grads.br.data_mut(), &dar);
            axpy(grads.bn.data_mut(), &dan);

            let du_pos = &mut du[pos * inp..(pos + 1) * inp];
            axpy(du_pos, &matvec_t(self.wz.data(), &daz, hd, inp));
            axpy(du_pos, &matvec_t(self.wr.data(), &dar, hd, inp));
            axpy(du_pos, &matvec_t(self.wn.data(), &dan, hd, inp));
            axpy(&mut dh_prev, &matvec_t(self.uz.data(), &daz, hd, hd));
            axpy(&mut dh_prev, &matvec_t(self.ur.data(), &dar, hd, hd));
            axpy(&mut dh_prev, &matvec_t(self.un.data(), &dhn, hd, hd));
            carry = dh_prev;
        }
    }
}

/// Linear projection `C·D -> H` of each flattened frame followed by a
/// bidirectional GRU; output rows are `[forward_ℓ ; backward_ℓ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiGru {
    /// `(C·D, H)`
    pub proj: Tensor,
    pub fwd: GruDirection,
    pub bwd: GruDirection,
}

#[derive(Debug, Clone)]
pub struct GruCache {
    x_shape: Vec<usize>,
    z: Vec<f64>,
    u: Vec<f64>,
    fwd_steps: Vec<(usize, Vec<f64>, GruStep)>,
    bwd_steps: Vec<(usize, Vec<f64>, GruStep)>,
}

impl BiGru {
    pub fn init(flat: usize, hidden: usize, rng: &mut Rng) -> Self {
        BiGru {
            proj: glorot_uniform(rng, &[flat, hidden], flat, hidden),
            fwd: GruDirection::init(hidden, hidden, rng),
            bwd: GruDirection::init(hidden, hidden, rng),
        }
    }

    pub fn zeros(flat: usize, hidden: usize) -> Self {
        BiGru {
            proj: Tensor::zeros(&[flat, hidden]),
            fwd: GruDirection::zeros(hidden, hidden),
            bwd: GruDirection::zeros(hidden, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.proj.shape()[1]
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("proj".to_string(), &self.proj)];
        for (dir, g) in [("fwd", &self.fwd), ("bwd", &self.bwd)] {
            out.extend(g.params().into_iter().map(|(n, t)| (format!("{dir}.{n}"), t)));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("proj".to_string(), &mut self.proj)];
        for (dir, g) in [("fwd", &mut self.fwd), ("bwd", &mut self.bwd)] {
            out.extend(g.params_mut().into_iter().map(|(n, t)| (format!("{dir}.{n}"), t)));
        }
        out
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize)> {
        let flat = self.proj.shape()[0];
        let (l, cd) = match x.shape() {
            &[l, c, d] => (l, c * d),
            &[l, cd] => (l, cd),
            s => return Err(dim_err("GRU input (L, C, D)", &[0, flat], s)),
        };
        if l == 0 {
            return Err(SpectraError::Shape("GRU received an empty sequence".into()));
        }
        if cd != flat {
            return Err(dim_err("GRU flattened frame width", &[flat], &[cd]));
        }
        Ok((l, cd))
    }

    /// Runs both directions on already projected inputs `(L, H)`.
    pub fn recur(&self, u: &[f64], l: usize) -> Vec<f64> {
        let hd = self.hidden();
        let f = self.fwd.run(u, 0..l);
        let b = self.bwd.run(u, (0..l).rev());
        let mut out = vec![0.0; l * 2 * hd];
        for (pos, h, _) in &f {
            out[pos * 2 * hd..pos * 2 * hd + hd].copy_from_slice(h);
        }
        for (pos, h, _) in &b {
            out[pos * 2 * hd + hd..(pos + 1) * 2 * hd].copy_from_slice(h);
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, GruCache)> {
        let (l, cd) = self.check(x)?;
        let hd = self.hidden();
        let mut u = vec![0.0; l * hd];
        matmul_into(x.data(), self.proj.data(), &mut u, l, cd, hd);
        let fwd_steps = self.fwd.run(&u, 0..l);
        let bwd_steps = self.bwd.run(&u, (0..l).rev());
        let mut out = vec![0.0; l * 2 * hd];
        for (pos, h, _) in &fwd_steps {
            out[pos * 2 * hd..pos * 2 * hd + hd].copy_from_slice(h);
        }
        for (pos, h, _) in &bwd_steps {
            out[pos * 2 * hd + hd..(pos + 1) * 2 * hd].copy_from_slice(h);
        }
        let cache = GruCache {
            x_shape: x.shape().to_vec(),
            z: x.data().to_vec(),
            u,
            fwd_steps,
            bwd_steps,
        };
        Ok((Tensor::new(&[l, 2 * hd], out)?, cache))
    }

    pub fn backward(&self, cache: &GruCache, upstream: &Tensor) -> Result<(BiGru, Tensor)> {
        let hd = self.hidden();
        let flat = self.proj.shape()[0];
        let l = cache.x_shape[0];
        if upstream.shape() != [l, 2 * hd] {
            return Err(stale("Bi-GRU", &[l, 2 * hd], upstream.shape()));
        }
        let g = upstream.data();
        let mut dh_f = vec![0.0; l * hd];
        let mut dh_b = vec![0.0; l * hd];
        for pos in 0..l {
            dh_f[pos * hd..(pos + 1) * hd].copy_from_slice(&g[pos * 2 * hd..pos * 2 * hd + hd]);
            dh_b[pos * hd..(pos + 1) * hd].copy_from_slice(&g[pos * 2 * hd + hd..(pos + 1) * 2 * hd]);
        }
        let mut grads = BiGru::zeros(flat, hd);
        let mut du = vec![0.0; l * hd];
        self.fwd.backward_steps(&cache.u, &cache.fwd_steps, &dh_f, &mut grads.fwd, &mut du);
        self.bwd.backward_steps(&cache.u, &cache.bwd_steps, &dh_b, &mut grads.bwd, &mut du);
        for pos in 0..l {
            outer_acc(
                grads.proj.data_mut(),
                &cache.z[pos * flat..(pos + 1) * flat],
                &du[pos * hd..(pos + 1) * hd],
            );
        }
        let mut dx = vec![0.0; l * flat];
        for pos in 0..l {
            let d = matvec(self.proj.data(), &du[pos * hd..(pos + 1) * hd], flat, hd);
            dx[pos * flat..(pos + 1) * flat].copy_from_slice(&d);
        }
        Ok((grads, Tensor::new(&cache.x_shape, dx)?))
    }
}

// ---------------------------------------------------------------------------
// Attention pooling and mean pooling
// ---------------------------------------------------------------------------

/// `e = h w`, `α = softmax(e)`, `s = Σ α_ℓ h_ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnPool {
    pub w: Tensor,
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    h: Tensor,
    alpha: Vec<f64>,
}

impl AttnPool {
    pub fn init(width: usize, rng: &mut Rng) -> Self {
        AttnPool {
            w: glorot_uniform(rng, &[width], width, 1),
        }
    }

    pub fn params(&self) -> [(&'static str, &Tensor); 1] {
        [("w", &self.w)]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 1] {
        [("w", &mut self.w)]
    }

    /// Pools `h` with precomputed scores `e`.
    pub fn pool_with_scores(h: &[f64], mut e: Vec<f64>, width: usize) -> (Vec<f64>, Vec<f64>) {
        softmax_in_place(&mut e);
        let mut s = vec![0.0; width];
        for (row, &a) in h.chunks(width).zip(&e) {
            for (sv, &hv) in s.iter_mut().zip(row) {
                *sv += a * hv;
            }
        }
        (s, e)
    }

    /// Returns `(s, α, cache)`.
    pub fn forward(&self, h: &Tensor) -> Result<(Tensor, Tensor, PoolCache)> {
        let w = self.w.len();
        let l = match h.shape() {
            &[l, ww] if ww == w => l,
            s => return Err(dim_err("attention pool input (L, 2H)", &[s[0], w], s)),
        };
        let e = matvec(h.data(), self.w.data(), l, w);
        let (s, alpha) = Self::pool_with_scores(h.data(), e, w);
        let cache = PoolCache {
            h: h.clone(),
            alpha: alpha.clone(),
        };
        Ok((Tensor::new(&[w], s)?, Tensor::new(&[l], alpha)?, cache))
    }

    pub fn backward(&self, cache: &PoolCache, upstream: &Tensor) -> Result<(AttnPool, Tensor)> {
        let w = self.w.len();
        if upstream.shape() != [w] {
            return Err(stale("attention pool", &[w], upstream.shape()));
        }
        let ds = upstream.data();
        let h = cache.h.data();
        let l = cache.alpha.len();
        let d_alpha: Vec<f64> = h.chunks(w).map(|row| row.iter().zip(ds).map(|(a, b)| a * b).sum()).collect();
        let dot: f64 = cache.alpha.iter().zip(&d_alpha).map(|(a, b)| a * b).sum();
        let de: Vec<f64> = cache.alpha.iter().zip(&d_alpha).map(|(a, da)| a * (da - dot)).collect();
        let mut dw = vec![0.0; w];
        let mut dh = vec![0.0; l * w];
        for pos in 0..l {
            let row = &h[pos * w..(pos + 1) * w];
            for j in 0..w {
                dw[j] += de[pos] * row[j];
                dh[pos * w + j] = cache.alpha[pos] * ds[j] + de[pos] * self.w.data()[j];
            }
        }
        Ok((AttnPool { w: Tensor::new(&[w], dw)? }, Tensor::new(&[l, w], dh)?))
    }
}

/// Mean over frames of the flattened `(C·D)` features; the head used when
/// the recurrent block is ablated.
pub fn mean_pool(x: &Tensor) -> Result<Tensor> {
    let l = x.shape()[0];
    let width = x.len() / l;
    let mut s = vec![0.0; width];
    for row in x.data().chunks(width) {
        axpy(&mut s, row);
    }
    s.iter_mut().for_each(|v| *v /= l as f64);
    Tensor::new(&[width], s)
}

pub fn mean_pool_backward(x_shape: &[usize], ds: &Tensor) -> Result<Tensor> {
    let l = x_shape[0];
    let per = ds.data().iter().map(|v| v / l as f64).collect::<Vec<_>>();
    let data = (0..l).flat_map(|_| per.iter().copied()).collect();
    Tensor::new(x_shape, data)
}

// ---------------------------------------------------------------------------
// Dropout + linear classifier + softmax
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    /// `(K, in)`
    pub w: Tensor,
    pub b: Tensor,
    pub dropout_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrads {
    pub w: Tensor,
    pub b: Tensor,
}

impl ClassifierGrads {
    pub fn named(&self) -> [(&'static str, &Tensor); 2] {
        [("w", &self.w), ("b", &self.b)]
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierCache {
    training: bool,
    dropped: Vec<f64>,
    mask: Vec<f64>,
    /// Output probabilities.
    pub probs: Vec<f64>,
}

impl Classifier {
    pub fn init(classes: usize, input: usize, dropout_p: f64, rng: &mut Rng) -> Self {
        Classifier {
            w: glorot_uniform(rng, &[classes, input], input, classes),
            b: Tensor::zeros(&[classes]),
            dropout_p,
        }
    }

    pub fn classes(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn input(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn params(&self) -> [(&'static str, &Tensor); 2] {
        [("w", &self.w), ("b", &self.b)]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 2] {
        [("w", &mut self.w), ("b", &mut self.b)]
    }

    /// Softmax of `W s + b` (logits returned alongside the probabilities).
    pub fn logits(&self, s: &[f64]) -> Vec<f64> {
        let mut z = matvec(self.w.data(), s, self.classes(), self.input());
        axpy(&mut z, self.b.data());
        z
    }

    pub fn forward(&self, s: &Tensor, rng: &mut Rng, training: bool) -> Result<(Tensor, ClassifierCache)> {
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(SpectraError::Config(format!(
                "dropout probability must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        expect_shape(s, &[self.input()], "classifier input")?;
        let p = self.dropout_p;
        let mask: Vec<f64> = if training && p > 0.0 {
            let keep = 1.0 / (1.0 - p);
            (0..s.len())
                .map(|_| if rng.uniform() >= p { keep } else { 0.0 })
                .collect()
        } else {
            vec![1.0; s.len()]
        };
        let dropped: Vec<f64> = s.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let mut probs = self.logits(&dropped);
        softmax_in_place(&mut probs);
        let cache = ClassifierCache {
            training,
            dropped,
            mask,
            probs: probs.clone(),
        };
        Ok((Tensor::new(&[self.classes()], probs)?, cache))
    }

    /// Backward from a gradient on the probabilities.
    pub fn backward(&self, cache: &ClassifierCache, upstream: &Tensor) -> Result<(ClassifierGrads, Tensor)> {
        let k = self.classes();
        if upstream.shape() != [k] {
            return Err(stale("classifier", &[k], upstream.shape()));
        }
        let g = upstream.data();
        let dot: f64 = cache.probs.iter().zip(g).map(|(p, d)| p * d).sum();
        let dlogits: Vec<f64> = cache.probs.iter().zip(g).map(|(p, d)| p * (d - dot)).collect();
        self.backward_logits(cache, &Tensor::new(&[k], dlogits)?)
    }

    /// Backward from a gradient on the logits (for softmax + cross-entropy it
    /// is `ŷ − y`).
    pub fn backward_logits(&self, cache: &ClassifierCache, dlogits: &Tensor) -> Result<(ClassifierGrads, Tensor)> {
        if !cache.training {
            return Err(SpectraError::Usage(
                "classifier backward needs a cache from a training-mode forward".into(),
            ));
        }
        let (k, n) = (self.classes(), self.input());
        if dlogits.shape() != [k] {
            return Err(stale("classifier", &[k], dlogits.shape()));
        }
        let mut dw = vec![0.0; k * n];
        outer_acc(&mut dw, dlogits.data(), &cache.dropped);
        let ds: Vec<f64> = matvec_t(self.w.data(), dlogits.data(), k, n)
            .into_iter()
            .zip(&cache.mask)
            .map(|(a, m)| a * m)
            .collect();
        let grads = ClassifierGrads {
            w: Tensor::new(&[k, n], dw)?,
            b: dlogits.clone(),
        };
        Ok((grads, Tensor::new(&[n], ds)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rng_normal, rng_uniform};
    use proptest::prelude::*;
    use crate::tensor::Rng;

    fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor {
        rng_normal(rng, shape, 0.0, 0.5).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central differences of `loss` w.r.t. every element of the tensor chosen
    /// by `pick`, compared against `analytic`.
    fn check_grad<M: Clone>(
        model: &M,
        pick: impl Fn(&mut M) -> &mut Tensor,
        analytic: &Tensor,
        loss: impl Fn(&M) -> f64,
        what: &str,
    ) {
        let h = 1e-5;
        let n = pick(&mut model.clone()).len();
        assert_eq!(analytic.len(), n, "{what}");
        for i in 0..n {
            let mut plus = model.clone();
            pick(&mut plus).data_mut()[i] += h;
            let mut minus = model.clone();
            pick(&mut minus).data_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(rel_err(a, fd) <= 1e-4, "{what}[{i}]: analytic {a} vs fd {fd}");
        }
    }

    /// Scalar loss `Σ out ⊙ weights` for a fixed random weighting.
    fn weighted(out: &Tensor, w: &Tensor) -> f64 {
        out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    fn sepconv_oracle(block: &SepConvBlock, m: &Tensor) -> Tensor {
        // Quadruple loop: for each (l, c, d) gather the depthwise sum inline.
        let (l, f, c) = (m.shape()[0], m.shape()[1], m.shape()[2]);
        let k = block.kernel();
        let d = block.features();
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros(&[l, c, d]);
        for li in 0..l {
            for ci in 0..c {
                for di in 0..d {
                    let mut v = 0.0;
                    for fi in 0..f {
                        let mut dw = 0.0;
                        for i in 0..k {
                            for j in 0..k {
                                let (a, b) = (li as isize + i as isize - p, fi as isize + j as isize - p);
                                if a >= 0 && a < l as isize && b >= 0 && b < f as isize {
                                    dw += block.depthwise.at(&[ci, i, j]) * m.at(&[a as usize, b as usize, ci]);
                                }
                            }
                        }
                        v += dw * block.pointwise.at(&[fi, di]);
                    }
                    let rm = block.bn_running_mean.data()[di];
                    let rv = block.bn_running_var.data()[di];
                    let mut y = block.bn_gamma.data()[di] * (v - rm) / (rv + block.bn_eps).sqrt()
                        + block.bn_beta.data()[di];
                    if block.residual {
                        y += m.at(&[li, di, ci]);
                    }
                    out.set(&[li, ci, di], y.max(0.0));
                }
            }
        }
        out
    }

    fn random_block(rng: &mut Rng, c: usize, f: usize, k: usize, d: usize) -> SepConvBlock {
        let mut b = SepConvBlock::init(c, f, k, d, rng);
        b.residual = false;
        b.bn_gamma = rng_uniform(rng, &[d], 0.5, 1.5).unwrap();
        b.bn_beta = rand_t(rng, &[d]);
        b.bn_running_mean = rand_t(rng, &[d]);
        b.bn_running_var = rng_uniform(rng, &[d], 0.5, 2.0).unwrap();
        b
    }

    #[test]
    fn sepconv_identity_configuration() {
        let (l, f, c) = (4, 5, 3);
        let mut block = SepConvBlock::init(c, f, 3, f, &mut Rng::new(0));
        block.residual = false;
        block.depthwise = Tensor::zeros(&[c, 3, 3]);
        for ci in 0..c {
            block.depthwise.set(&[ci, 1, 1], 1.0);
        }
        let mut eye = Tensor::zeros(&[f, f]);
        for i in 0..f {
            eye.set(&[i, i], 1.0);
        }
        block.pointwise = eye;
        // Fold eps back out so BatchNorm is exactly bypassed.
        block.bn_eps = 0.0;
        let m = rng_uniform(&mut Rng::new(1), &[l, f, c], 0.0, 2.0).unwrap();
        let out = block.forward_one(&m, false).unwrap();
        for li in 0..l {
            for ci in 0..c {
                for fi in 0..f {
                    assert_eq!(out.at(&[li, ci, fi]), m.at(&[li, fi, ci]));
                }
            }
        }
        // With the shortcut enabled, the identity path is added once more.
        block.residual = true;
        let out = block.forward_one(&m, false).unwrap();
        assert!((out.at(&[1, 2, 3]) - 2.0 * m.at(&[1, 3, 2])).abs() < 1e-15);
    }

    #[test]
    fn sepconv_scalar_chain() {
        let mut rng = Rng::new(2);
        let mut block = random_block(&mut rng, 1, 1, 1, 4);
        block.bn_running_mean = Tensor::zeros(&[4]);
        let m = Tensor::scalar(0.7).reshape(&[1, 1, 1]).unwrap();
        let out = block.forward_one(&m, false).unwrap();
        for di in 0..4 {
            let pre = block.depthwise.data()[0] * 0.7 * block.pointwise.data()[di];
            let bn = block.bn_gamma.data()[di] * pre / (block.bn_running_var.data()[di] + BN_EPS).sqrt()
                + block.bn_beta.data()[di];
            assert!((out.at(&[0, 0, di]) - bn.max(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn sepconv_matches_loop_oracle() {
        let mut rng = Rng::new(3);
        for (l, f, c, k, d, residual) in [(7, 5, 3, 3, 4, false), (6, 4, 2, 5, 4, true), (3, 9, 6, 3, 16, false)] {
            let mut block = random_block(&mut rng, c, f, k, d);
            block.residual = residual;
            let m = rng_uniform(&mut rng, &[l, f, c], 0.0, 3.0).unwrap();
            let out = block.forward_one(&m, false).unwrap();
            assert!(out.max_abs_diff(&sepconv_oracle(&block, &m)) <= 1e-10);
        }
    }

    #[test]
    fn sepconv_shape_errors() {
        let block = SepConvBlock::init(3, 5, 3, 4, &mut Rng::new(0));
        assert!(matches!(
            block.forward_one(&Tensor::zeros(&[4, 6, 3]), false),
            Err(SpectraError::Dimension(_))
        ));
    }

    #[test]
    fn sepconv_cost_closed_forms() {
        let (s, st, r) = sepconv_cost(6, 3, 16);
        assert_eq!((s, st), (114, 288));
        assert!((r - 288.0 / 114.0).abs() < 1e-15);
        for (c, k) in [(3, 3), (6, 5), (2, 7)] {
            let (_, _, r) = sepconv_cost(c, k, k);
            assert!((r - k as f64 / 2.0).abs() < 1e-12);
        }
        assert_eq!(sepconv_cost(1, 1, 1), (2, 1, 0.5));
    }

    #[test]
    fn batchnorm_eval_is_affine() {
        let mut rng = Rng::new(4);
        let block = random_block(&mut rng, 2, 3, 3, 5);
        let v = rand_t(&mut rng, &[10, 5]);
        let at = |c: f64| block.batchnorm_eval(&v.scale(c).into_data());
        let (y0, y1, y2) = (at(0.0), at(1.0), at(2.0));
        for i in 0..y0.len() {
            assert!(((y2[i] - y1[i]) - (y1[i] - y0[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn sepconv_gradients() {
        let mut rng = Rng::new(5);
        for residual in [false, true] {
            let (b, l, f, c, k) = (2, 5, 4, 3, 3);
            let d = if residual { f } else { 3 };
            let mut block = random_block(&mut rng, c, f, k, d);
            block.residual = residual;
            let x = rng_uniform(&mut rng, &[b, l, f, c], 0.0, 2.0).unwrap();
            let wts = rand_t(&mut rng, &[b, l, c, d]);
            let (_, cache) = block.forward(&x, true).unwrap();
            let (g, dx) = block.backward(&cache, &wts).unwrap();
            let loss = |m: &SepConvBlock| weighted(&m.forward(&x, true).unwrap().0, &wts);
            check_grad(&block, |m| &mut m.depthwise, &g.depthwise, loss, "depthwise");
            check_grad(&block, |m| &mut m.pointwise, &g.pointwise, loss, "pointwise");
            check_grad(&block, |m| &mut m.bn_gamma, &g.bn_gamma, loss, "bn_gamma");
            check_grad(&block, |m| &mut m.bn_beta, &g.bn_beta, loss, "bn_beta");
            let xl = |t: &Tensor| weighted(&block.forward(t, true).unwrap().0, &wts);
            check_grad(&x, |t| t, &dx, xl, "sepconv input");
        }
    }

    #[test]
    fn sepconv_backward_rejects_eval_or_stale_cache() {
        let block = SepConvBlock::init(2, 3, 3, 4, &mut Rng::new(0));
        let x = Tensor::ones(&[1, 4, 3, 2]);
        let (_, eval_cache) = block.forward(&x, false).unwrap();
        let g = Tensor::ones(&[1, 4, 2, 4]);
        assert!(matches!(block.backward(&eval_cache, &g), Err(SpectraError::Usage(_))));
        let (_, cache) = block.forward(&x, true).unwrap();
        assert!(matches!(
            block.backward(&cache, &Tensor::ones(&[1, 5, 2, 4])),
            Err(SpectraError::Usage(_))
        ));
    }

    fn attention_oracle(attn: &ChannelAttention, x: &Tensor) -> Tensor {
        let (l, c, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut frames = Vec::new();
        for fr in 0..l {
            let xl = x.slice0(fr);
            let q = xl.matmul(&attn.wq).unwrap();
            let k = xl.matmul(&attn.wk).unwrap();
            let v = xl.matmul(&attn.wv).unwrap();
            let a = q
                .matmul(&k.transpose().unwrap())
                .unwrap()
                .scale(1.0 / (d as f64).sqrt())
                .softmax_rows()
                .unwrap();
            frames.push(xl.add(&a.matmul(&v).unwrap().scale(attn.gamma.data()[0])).unwrap());
        }
        let out = Tensor::stack(&frames).unwrap();
        assert_eq!(out.shape(), [l, c, d]);
        out
    }

    #[test]
    fn attention_gamma_zero_is_identity() {
        let mut rng = Rng::new(6);
        let attn = ChannelAttention::init(5, &mut rng);
        let x = rand_t(&mut rng, &[3, 4, 5]);
        assert_eq!(attn.forward(&x).unwrap().0, x);
    }

    #[test]
    fn attention_single_channel() {
        let mut rng = Rng::new(7);
        let mut attn = ChannelAttention::init(4, &mut rng);
        attn.gamma = Tensor::scalar(0.8);
        let x = rand_t(&mut rng, &[2, 1, 4]);
        let out = attn.forward(&x).unwrap().0;
        let xv = x.clone().reshape(&[2, 4]).unwrap().matmul(&attn.wv).unwrap();
        let expect = x.clone().reshape(&[2, 4]).unwrap().add(&xv.scale(0.8)).unwrap();
        assert!(out.reshape(&[2, 4]).unwrap().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn attention_matches_frame_oracle_and_gradients() {
        let mut rng = Rng::new(8);
        let mut attn = ChannelAttention::init(5, &mut rng);
        attn.gamma = Tensor::scalar(0.7);
        let x = rand_t(&mut rng, &[3, 4, 5]);
        let (out, cache) = attn.forward(&x).unwrap();
        assert!(out.max_abs_diff(&attention_oracle(&attn, &x)) <= 1e-10);

        let wts = rand_t(&mut rng, &[3, 4, 5]);
        let (g, dx) = attn.backward(&cache, &wts).unwrap();
        let loss = |m: &ChannelAttention| weighted(&m.forward(&x).unwrap().0, &wts);
        check_grad(&attn, |m| &mut m.wq, &g.wq, loss, "wq");
        check_grad(&attn, |m| &mut m.wk, &g.wk, loss, "wk");
        check_grad(&attn, |m| &mut m.wv, &g.wv, loss, "wv");
        check_grad(&attn, |m| &mut m.gamma, &g.gamma, loss, "gamma");
        check_grad(&x, |t| t, &dx, |t: &Tensor| weighted(&attn.forward(t).unwrap().0, &wts), "attn input");
    }

    fn rand_gru(rng: &mut Rng, flat: usize, h: usize) -> BiGru {
        let mut g = BiGru::init(flat, h, rng);
        for (_, t) in g.params_mut() {
            if t.rank() == 1 {
                *t = rand_t(rng, t.shape());
            }
        }
        g
    }

    #[test]
    fn gru_zero_weights_give_zero_states() {
        let g = BiGru::zeros(6, 4);
        let x = rand_t(&mut Rng::new(9), &[5, 2, 3]);
        let out = g.forward(&x).unwrap().0;
        assert_eq!(out.shape(), [5, 8]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_single_step_matches_scalar_oracle() {
        let mut rng = Rng::new(10);
        let g = rand_gru(&mut rng, 6, 3);
        let x = rand_t(&mut rng, &[1, 2, 3]);
        let out = g.forward(&x).unwrap().0;
        let u: Vec<f64> = (0..3)
            .map(|j| (0..6).map(|i| x.data()[i] * g.proj.at(&[i, j])).sum())
            .collect();
        for (dir, offset) in [(&g.fwd, 0), (&g.bwd, 3)] {
            for i in 0..3 {
                let dot = |w: &Tensor| (0..3).map(|j| w.at(&[i, j]) * u[j]).sum::<f64>();
                let s = |v: f64| 1.0 / (1.0 + (-v).exp());
                let z = s(dot(&dir.wz) + dir.bz.data()[i]);
                let r = s(dot(&dir.wr) + dir.br.data()[i]);
                let n = (dot(&dir.wn) + r * 0.0 + dir.bn.data()[i]).tanh();
                let h = (1.0 - z) * n;
                assert!((out.at(&[0, offset + i]) - h).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gru_reversal_symmetry() {
        let mut rng = Rng::new(11);
        let mut g = rand_gru(&mut rng, 4, 3);
        g.bwd = g.fwd.clone();
        let x = rand_t(&mut rng, &[6, 4]);
        let out = g.forward(&x).unwrap().0;
        let mut rev = Vec::new();
        for pos in (0..6).rev() {
            rev.extend_from_slice(&x.data()[pos * 4..(pos + 1) * 4]);
        }
        let out_rev = g.forward(&Tensor::new(&[6, 4], rev).unwrap()).unwrap().0;
        for pos in 0..6 {
            for i in 0..3 {
                assert!((out.at(&[pos, 3 + i]) - out_rev.at(&[5 - pos, i])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gru_shape_check_and_gradients() {
        let mut rng = Rng::new(12);
        let g = rand_gru(&mut rng, 6, 3);
        assert!(matches!(g.forward(&Tensor::zeros(&[4, 5])), Err(SpectraError::Dimension(_))));

        let x = rand_t(&mut rng, &[4, 2, 3]);
        let wts = rand_t(&mut rng, &[4, 6]);
        let (_, cache) = g.forward(&x).unwrap();
        let (grads, dx) = g.backward(&cache, &wts).unwrap();
        let loss = |m: &BiGru| weighted(&m.forward(&x).unwrap().0, &wts);
        let names: Vec<String> = g.params().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Tensor> = grads.params().into_iter().map(|(_, t)| t.clone()).collect();
        for (idx, name) in names.iter().enumerate() {
            check_grad(
                &g,
                |m| m.params_mut().into_iter().nth(idx).unwrap().1,
                &analytic[idx],
                loss,
                name,
            );
        }
        check_grad(&x, |t| t, &dx, |t: &Tensor| weighted(&g.forward(t).unwrap().0, &wts), "gru input");
    }

    #[test]
    fn pool_cases() {
        let mut rng = Rng::new(13);
        let h = rand_t(&mut rng, &[5, 4]);
        let zero = AttnPool { w: Tensor::zeros(&[4]) };
        let (s, alpha, _) = zero.forward(&h).unwrap();
        assert!(alpha.data().iter().all(|a| (a - 0.2).abs() < 1e-15));
        let mean = mean_pool(&h).unwrap();
        assert!(s.max_abs_diff(&mean) < 1e-15);

        let pool = AttnPool::init(4, &mut rng);
        let one = h.slice0(2).reshape(&[1, 4]).unwrap();
        let (s, alpha, _) = pool.forward(&one).unwrap();
        assert_eq!(alpha.data(), &[1.0]);
        assert_eq!(s.data(), one.data());
    }

    #[test]
    fn pool_matches_direct_oracle_and_gradients() {
        let mut rng = Rng::new(14);
        let pool = AttnPool { w: rand_t(&mut rng, &[6]) };
        let h = rand_t(&mut rng, &[7, 6]);
        let (s, alpha, cache) = pool.forward(&h).unwrap();
        let e: Vec<f64> = (0..7).map(|l| (0..6).map(|j| h.at(&[l, j]) * pool.w.data()[j]).sum()).collect();
        let z: f64 = e.iter().map(|v| v.exp()).sum();
        for l in 0..7 {
            assert!((alpha.data()[l] - e[l].exp() / z).abs() <= 1e-12);
        }
        for j in 0..6 {
            let sj: f64 = (0..7).map(|l| e[l].exp() / z * h.at(&[l, j])).sum();
            assert!((s.data()[j] - sj).abs() <= 1e-12);
        }
        let wts = rand_t(&mut rng, &[6]);
        let (g, dh) = pool.backward(&cache, &wts).unwrap();
        let loss = |m: &AttnPool| weighted(&m.forward(&h).unwrap().0, &wts);
        check_grad(&pool, |m| &mut m.w, &g.w, loss, "pool.w");
        check_grad(&h, |t| t, &dh, |t: &Tensor| weighted(&pool.forward(t).unwrap().0, &wts), "pool input");
    }

    #[test]
    fn classifier_cases() {
        let mut clf = Classifier::init(4, 6, 0.0, &mut Rng::new(0));
        clf.w = Tensor::zeros(&[4, 6]);
        let s = rand_t(&mut Rng::new(1), &[6]);
        let (y, _) = clf.forward(&s, &mut Rng::new(2), true).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.25).abs() < 1e-15));

        let clf = Classifier::init(3, 6, 0.5, &mut Rng::new(3));
        let a = clf.forward(&s, &mut Rng::new(10), false).unwrap().0;
        let b = clf.forward(&s, &mut Rng::new(99), false).unwrap().0;
        assert_eq!(a, b);

        // K=2 with rows [w, -w]: ŷ0 = σ(2 wᵀs).
        let w = rand_t(&mut Rng::new(4), &[6]);
        let mut rows = w.data().to_vec();
        rows.extend(w.data().iter().map(|v| -v));
        let clf = Classifier {
            w: Tensor::new(&[2, 6], rows).unwrap(),
            b: Tensor::zeros(&[2]),
            dropout_p: 0.0,
        };
        let y = clf.forward(&s, &mut Rng::new(0), false).unwrap().0;
        let dot: f64 = w.data().iter().zip(s.data()).map(|(a, b)| a * b).sum();
        let logistic = 1.0 / (1.0 + (-2.0 * dot).exp());
        assert!((y.data()[0] - logistic).abs() <= 1e-12);
    }

    #[test]
    fn classifier_cross_entropy_logit_gradient() {
        let mut rng = Rng::new(15);
        let mut clf = Classifier::init(4, 5, 0.3, &mut rng);
        clf.b = rand_t(&mut rng, &[4]);
        let s = rand_t(&mut rng, &[5]);
        let label = 2;
        let seed = 77;
        let (y, cache) = clf.forward(&s, &mut Rng::new(seed), true).unwrap();
        // Gradient of -log ŷ[label] through the softmax equals ŷ - onehot.
        let mut dprob = vec![0.0; 4];
        dprob[label] = -1.0 / y.data()[label];
        let (g_soft, ds_soft) = clf.backward(&cache, &Tensor::new(&[4], dprob).unwrap()).unwrap();
        let mut dlogits = y.data().to_vec();
        dlogits[label] -= 1.0;
        let (g, ds) = clf.backward_logits(&cache, &Tensor::new(&[4], dlogits.clone()).unwrap()).unwrap();
        assert!(g.w.max_abs_diff(&g_soft.w) < 1e-12 && ds.max_abs_diff(&ds_soft) < 1e-12);

        let ce = |m: &Classifier| -m.forward(&s, &mut Rng::new(seed), true).unwrap().0.data()[label].ln();
        // Finite differences on the bias equal the logit gradient.
        for i in 0..4 {
            let h = 1e-6;
            let mut p = clf.clone();
            p.b.data_mut()[i] += h;
            let mut m = clf.clone();
            m.b.data_mut()[i] -= h;
            let fd = (ce(&p) - ce(&m)) / (2.0 * h);
            assert!(rel_err(dlogits[i], fd) <= 1e-6, "{i}: {} vs {fd}", dlogits[i]);
        }
        check_grad(&clf, |m| &mut m.w, &g.w, ce, "clf.w");
        check_grad(&s, |t| t, &ds, |t: &Tensor| -clf.forward(t, &mut Rng::new(seed), true).unwrap().0.data()[label].ln(), "clf input");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(16);
        let g = rand_gru(&mut rng, 6, 3);
        let x = rand_t(&mut rng, &[4, 6]);
        let (_, cache) = g.forward(&x).unwrap();
        let (grads, dx) = g.backward(&cache, &Tensor::zeros(&[4, 6])).unwrap();
        assert!(grads.params().iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
        assert!(dx.data().iter().all(|&v| v == 0.0));

        let mut attn = ChannelAttention::init(3, &mut rng);
        attn.gamma = Tensor::scalar(0.5);
        let x = rand_t(&mut rng, &[2, 2, 3]);
        let (_, cache) = attn.forward(&x).unwrap();
        let (ga, dx) = attn.backward(&cache, &Tensor::zeros(&[2, 2, 3])).unwrap();
        assert!(ga.params().iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn pooled_vector_in_hull(seed in any::<u64>(), l in 1usize..10, w in 1usize..6) {
            let mut rng = Rng::new(seed);
            let pool = AttnPool { w: rng_normal(&mut rng, &[w], 0.0, 3.0).unwrap() };
            let h = rng_normal(&mut rng, &[l, w], 0.0, 2.0).unwrap();
            let (s, alpha, _) = pool.forward(&h).unwrap();
            prop_assert!((alpha.sum() - 1.0).abs() <= 1e-12);
            for j in 0..w {
                let col: Vec<f64> = (0..l).map(|i| h.at(&[i, j])).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(s.data()[j] >= lo - 1e-12 && s.data()[j] <= hi + 1e-12);
            }
        }

        #[test]
        fn attention_gamma_zero_exact(seed in any::<u64>(), l in 1usize..4, c in 1usize..5, d in 1usize..5) {
            let mut rng = Rng::new(seed);
            let attn = ChannelAttention::init(d, &mut rng);
            let x = rng_normal(&mut rng, &[l, c, d], 0.0, 5.0).unwrap();
            prop_assert_eq!(attn.forward(&x).unwrap().0, x);
        }
    }
}
