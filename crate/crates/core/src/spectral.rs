//! Per-channel STFT magnitudes.
//!
//! Two routes produce the same `(L, F, C)` spectrogram:
//! [`stft_direct`] windows each frame and runs a radix-2 FFT, while
//! [`stft_filterbank`] correlates the signal with `2F` Hann-windowed cosine and
//! sine kernels at stride `hop`, the form used by runtimes without an STFT op.
//!
//! Frames are taken without padding; a partial trailing frame is dropped, so
//! `L = floor((T - n_fft) / hop) + 1`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Result, SpectraError};
use crate::tensor::Tensor;

/// Periodic Hann window `0.5 (1 - cos(2πt/n))`.
pub fn hann_window(n_fft: usize) -> Result<Tensor> {
    if n_fft < 2 {
        return Err(SpectraError::Config(format!(
            "Hann window length must be >= 2, got {n_fft}"
        )));
    }
    let n = n_fft as f64;
    let w = (0..n_fft)
        .map(|t| 0.5 * (1.0 - (2.0 * PI * t as f64 / n).cos()))
        .collect();
    Tensor::new(&[n_fft], w)
}

#[derive(Debug, Clone)]
pub struct StftPlan {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    n_frames: usize,
    n_bins: usize,
    // Filter bank, (F, n_fft) each, window folded in.
    cos_bank: Vec<f64>,
    sin_bank: Vec<f64>,
}

/// Number of bins kept by a real-input STFT.
pub fn n_bins(n_fft: usize) -> usize {
    n_fft / 2 + 1
}

/// Frame count for a signal of `t` samples without padding.
pub fn n_frames(t: usize, n_fft: usize, hop: usize) -> usize {
    (t - n_fft) / hop + 1
}

impl StftPlan {
    pub fn new(n_fft: usize, hop: usize, signal_len: usize) -> Result<Self> {
        if n_fft < 2 || !n_fft.is_power_of_two() {
            return Err(SpectraError::Config(format!(
                "n_fft must be a power of two >= 2, got {n_fft}"
            )));
        }
        if hop == 0 {
            return Err(SpectraError::Config("hop must be >= 1".into()));
        }
        if signal_len < n_fft {
            return Err(SpectraError::Shape(format!(
                "signal length {signal_len} is shorter than n_fft {n_fft}"
            )));
        }
        let window = hann_window(n_fft)?.into_data();
        let f = n_bins(n_fft);
        let mut cos_bank = vec![0.0; f * n_fft];
        let mut sin_bank = vec![0.0; f * n_fft];
        for k in 0..f {
            for t in 0..n_fft {
                let phase = 2.0 * PI * ((k * t) % n_fft) as f64 / n_fft as f64;
                cos_bank[k * n_fft + t] = window[t] * phase.cos();
                sin_bank[k * n_fft + t] = window[t] * phase.sin();
            }
        }
        Ok(StftPlan {
            n_fft,
            hop,
            window,
            n_frames: n_frames(signal_len, n_fft, hop),
            n_bins: f,
            cos_bank,
            sin_bank,
        })
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Signal length the plan was built for.
    pub fn signal_len(&self) -> usize {
        (self.n_frames - 1) * self.hop + self.n_fft
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (t, c) = match x.shape() {
            &[t, c] => (t, c),
            s => {
                return Err(SpectraError::Dimension(format!(
                    "STFT input must be (T, C), got {s:?}"
                )))
            }
        };
        if t < self.n_fft {
            return Err(SpectraError::Shape(format!(
                "window has {t} samples, fewer than n_fft {}",
                self.n_fft
            )));
        }
        if n_frames(t, self.n_fft, self.hop) != self.n_frames {
            return Err(SpectraError::Dimension(format!(
                "window of {t} samples yields {} frames, plan expects {}",
                n_frames(t, self.n_fft, self.hop),
                self.n_frames
            )));
        }
        if !x.is_finite() {
            return Err(SpectraError::Numeric("STFT input is not finite".into()));
        }
        Ok((t, c))
    }
}

/// Magnitudes with shape `(L, F, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub mags: Tensor,
}

/// In-place iterative radix-2 decimation-in-time FFT.
pub fn fft_in_place(buf: &mut [Complex64]) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    let bits = n.trailing_zeros();
    if bits == 0 {
        return;
    }
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = Complex64::from_polar(1.0, ang * k as f64);
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

pub fn stft_direct(x: &Tensor, plan: &StftPlan) -> Result<Spectrogram> {
    let (_, c) = plan.check_input(x)?;
    let (l, f, n) = (plan.n_frames, plan.n_bins, plan.n_fft);
    let xs = x.data();
    let mut mags = vec![0.0; l * f * c];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for ch in 0..c {
        for frame in 0..l {
            let start = frame * plan.hop;
            for (t, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(xs[(start + t) * c + ch] * plan.window[t], 0.0);
            }
            fft_in_place(&mut buf);
            for (k, v) in buf.iter().take(f).enumerate() {
                mags[(frame * f + k) * c + ch] = v.norm();
            }
        }
    }
    Ok(Spectrogram {
        mags: Tensor::new(&[l, f, c], mags)?,
    })
}

pub fn stft_filterbank(x: &Tensor, plan: &StftPlan) -> Result<Spectrogram> {
    let (_, c) = plan.check_input(x)?;
    let (l, f, n) = (plan.n_frames, plan.n_bins, plan.n_fft);
    let xs = x.data();
    let mut mags = vec![0.0; l * f * c];
    for ch in 0..c {
        for frame in 0..l {
            let start = frame * plan.hop;
            for k in 0..f {
                let (mut re, mut im) = (0.0, 0.0);
                let ck = &plan.cos_bank[k * n..(k + 1) * n];
                let sk = &plan.sin_bank[k * n..(k + 1) * n];
                for t in 0..n {
                    let v = xs[(start + t) * c + ch];
                    re += v * ck[t];
                    im -= v * sk[t];
                }
                mags[(frame * f + k) * c + ch] = re.hypot(im);
            }
        }
    }
    Ok(Spectrogram {
        mags: Tensor::new(&[l, f, c], mags)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rng_normal, Rng};
    use proptest::prelude::*;

    /// O(n²) DFT magnitudes of one windowed frame.
    fn dft_oracle(frame: &[f64], window: &[f64], bins: usize) -> Vec<f64> {
        let n = frame.len();
        (0..bins)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for t in 0..n {
                    let a = -2.0 * PI * (k * t) as f64 / n as f64;
                    let v = frame[t] * window[t];
                    re += v * a.cos();
                    im += v * a.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn hann_values() {
        let w = hann_window(4).unwrap();
        let expect = [0.0, 0.5, 1.0, 0.5];
        for (a, b) in w.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        for n in [2, 3, 7, 64] {
            assert_eq!(hann_window(n).unwrap().data()[0], 0.0);
        }
        let w = hann_window(16).unwrap();
        for (t, v) in w.data().iter().enumerate() {
            let o = 0.5 * (1.0 - (2.0 * PI * t as f64 / 16.0).cos());
            assert!((v - o).abs() <= 1e-15);
        }
        assert!(matches!(hann_window(1), Err(SpectraError::Config(_))));
    }

    #[test]
    fn plan_geometry() {
        let p = StftPlan::new(16, 8, 100).unwrap();
        assert_eq!((p.n_frames(), p.n_bins()), (11, 9));
        assert!(matches!(StftPlan::new(12, 4, 100), Err(SpectraError::Config(_))));
        assert!(matches!(StftPlan::new(16, 8, 8), Err(SpectraError::Shape(_))));
    }

    #[test]
    fn short_input_is_shape_error() {
        let p = StftPlan::new(8, 4, 8).unwrap();
        let x = Tensor::zeros(&[4, 1]);
        assert!(matches!(stft_direct(&x, &p), Err(SpectraError::Shape(_))));
        assert!(matches!(stft_filterbank(&x, &p), Err(SpectraError::Shape(_))));
    }

    #[test]
    fn constant_signal_concentrates_in_dc() {
        let p = StftPlan::new(8, 8, 8).unwrap();
        let x = Tensor::ones(&[8, 1]);
        let s = stft_direct(&x, &p).unwrap();
        assert!((s.mags.at(&[0, 0, 0]) - 4.0).abs() < 1e-12);
        let oracle = dft_oracle(&[1.0; 8], p.window(), 5);
        for k in 0..5 {
            assert!((s.mags.at(&[0, k, 0]) - oracle[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_peaks_at_its_bin() {
        let p = StftPlan::new(16, 16, 16).unwrap();
        let sig: Vec<f64> = (0..16).map(|t| (2.0 * PI * 2.0 * t as f64 / 16.0).cos()).collect();
        let x = Tensor::new(&[16, 1], sig.clone()).unwrap();
        let s = stft_direct(&x, &p).unwrap();
        let col: Vec<f64> = (0..9).map(|k| s.mags.at(&[0, k, 0])).collect();
        let argmax = (0..9).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        assert_eq!(argmax, 2);
        let oracle = dft_oracle(&sig, p.window(), 9);
        let brute = (0..9).max_by(|&a, &b| oracle[a].total_cmp(&oracle[b])).unwrap();
        assert_eq!(brute, 2);
    }

    #[test]
    fn zeros_give_zeros() {
        let p = StftPlan::new(16, 8, 100).unwrap();
        let x = Tensor::zeros(&[100, 3]);
        assert!(stft_direct(&x, &p).unwrap().mags.data().iter().all(|&v| v == 0.0));
        assert!(stft_filterbank(&x, &p).unwrap().mags.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn filterbank_single_frame_matches_dft() {
        let p = StftPlan::new(16, 4, 16).unwrap();
        let x = rng_normal(&mut Rng::new(5), &[16, 2], 0.0, 1.0).unwrap();
        let s = stft_filterbank(&x, &p).unwrap();
        for ch in 0..2 {
            let frame: Vec<f64> = (0..16).map(|t| x.at(&[t, ch])).collect();
            let oracle = dft_oracle(&frame, p.window(), 9);
            for k in 0..9 {
                assert!((s.mags.at(&[0, k, ch]) - oracle[k]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn filterbank_matches_direct() {
        let p = StftPlan::new(16, 8, 100).unwrap();
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            let x = rng_normal(&mut rng, &[100, 6], 0.0, 1.0).unwrap();
            let a = stft_direct(&x, &p).unwrap().mags;
            let b = stft_filterbank(&x, &p).unwrap().mags;
            assert!(a.max_abs_diff(&b) <= 1e-9);
        }
    }

    proptest! {
        #[test]
        fn parseval_per_frame(seed in any::<u64>(), log_n in 1u32..7) {
            let n = 1usize << log_n;
            let p = StftPlan::new(n, n, n).unwrap();
            let x = rng_normal(&mut Rng::new(seed), &[n, 1], 0.0, 1.0).unwrap();
            let s = stft_direct(&x, &p).unwrap();
            let lhs: f64 = (0..p.n_bins())
                .map(|k| {
                    let g = if k == 0 || k == n / 2 { 1.0 } else { 2.0 } / n as f64;
                    g * s.mags.at(&[0, k, 0]).powi(2)
                })
                .sum();
            let rhs: f64 = (0..n).map(|t| (x.at(&[t, 0]) * p.window()[t]).powi(2)).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1e-300));
        }

        #[test]
        fn magnitudes_scale_linearly(seed in any::<u64>(), a in -10.0f64..10.0) {
            let p = StftPlan::new(8, 4, 32).unwrap();
            let x = rng_normal(&mut Rng::new(seed), &[32, 2], 0.0, 1.0).unwrap();
            let m = stft_direct(&x, &p).unwrap().mags;
            let ms = stft_direct(&x.scale(a), &p).unwrap().mags;
            prop_assert!(ms.data().iter().all(|&v| v >= 0.0));
            prop_assert!(ms.max_abs_diff(&m.scale(a.abs())) <= 1e-12 * (1.0 + a.abs()) * 8.0);
        }

        #[test]
        fn frame_count_formula(log_n in 1u32..6, hop in 1usize..20, extra in 0usize..100) {
            let n = 1usize << log_n;
            let t = n + extra;
            let p = StftPlan::new(n, hop, t).unwrap();
            prop_assert_eq!(p.n_frames(), (t - n) / hop + 1);
            let x = Tensor::zeros(&[t, 1]);
            prop_assert_eq!(stft_filterbank(&x, &p).unwrap().mags.shape()[0], p.n_frames());
        }
    }
}
