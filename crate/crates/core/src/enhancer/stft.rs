//! Short-time Fourier analysis with a periodic Hann window, weighted
//! overlap-add resynthesis, and the adjoints needed to backpropagate
//! through both.
//!
//! Frames are not padded: a signal of length `n` yields
//! `1 + (n - frame_length) / hop` frames. Resynthesis divides by the summed
//! analysis window, so every sample covered by a non-zero window weight is
//! reconstructed exactly.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::{num_complex::Complex64, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset inside the log of the log-magnitude features.
pub const LOG_MAG_EPS: f64 = 1e-8;
const ENVELOPE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub frame_length: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { frame_length: 256, hop: 128 }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_length < 2 || self.frame_length % 2 != 0 {
            return Err(Error::invalid("frame length must be even and at least 2"));
        }
        if self.hop == 0 || self.hop > self.frame_length {
            return Err(Error::invalid("hop must be in 1..=frame_length"));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.frame_length / 2 + 1
    }

    pub fn frame_count(&self, len: usize) -> Result<usize> {
        if len < self.frame_length {
            return Err(Error::invalid(format!(
                "signal of {len} samples is shorter than one {}-sample frame",
                self.frame_length
            )));
        }
        Ok(1 + (len - self.frame_length) / self.hop)
    }
}

pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n).map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos()).collect()
}

/// Frame-level transform with cached FFT plans.
#[derive(Clone)]
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: hann_periodic(cfg.frame_length),
            forward: planner.plan_fft_forward(cfg.frame_length),
            inverse: planner.plan_fft_inverse(cfg.frame_length),
        })
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    /// Frames × bins complex spectrogram.
    pub fn analyze(&self, x: &[f64]) -> Result<Array2<Complex64>> {
        let StftConfig { frame_length: l, hop } = self.cfg;
        let frames = self.cfg.frame_count(x.len())?;
        let bins = self.cfg.bins();
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); l];
        for t in 0..frames {
            let seg = &x[t * hop..t * hop + l];
            for ((b, &v), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex64::new(v * w, 0.0);
            }
            self.forward.process(&mut buf);
            for f in 0..bins {
                out[[t, f]] = buf[f];
            }
        }
        Ok(out)
    }

    /// Sum of shifted analysis windows over a signal of `len` samples.
    pub fn envelope(&self, frames: usize, len: usize) -> Vec<f64> {
        let mut env = vec![0.0; len];
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for (k, &w) in self.window.iter().enumerate() {
                if let Some(e) = env.get_mut(start + k) {
                    *e += w;
                }
            }
        }
        env
    }

    fn inverse_frame(&self, row: ndarray::ArrayView1<Complex64>, buf: &mut [Complex64]) {
        let l = self.cfg.frame_length;
        let bins = self.cfg.bins();
        for f in 0..bins {
            buf[f] = row[f];
        }
        buf[0].im = 0.0;
        buf[l / 2].im = 0.0;
        for f in bins..l {
            buf[f] = row[l - f].conj();
        }
        self.inverse.process(buf);
    }

    /// Overlap-add resynthesis to `len` samples.
    pub fn synthesize(&self, spec: &Array2<Complex64>, len: usize) -> Result<Vec<f64>> {
        let StftConfig { frame_length: l, hop } = self.cfg;
        if spec.ncols() != self.cfg.bins() {
            return Err(Error::invalid(format!("spectrogram has {} bins, expected {}", spec.ncols(), self.cfg.bins())));
        }
        let frames = spec.nrows();
        if frames == 0 || (frames - 1) * hop + l > len {
            return Err(Error::invalid(format!("{frames} frames do not fit in {len} samples")));
        }
        let mut out = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); l];
        for t in 0..frames {
            self.inverse_frame(spec.row(t), &mut buf);
            for k in 0..l {
                out[t * hop + k] += buf[k].re / l as f64;
            }
        }
        let env = self.envelope(frames, len);
        for (o, e) in out.iter_mut().zip(&env) {
            *o = if *e > ENVELOPE_FLOOR { *o / e } else { 0.0 };
        }
        Ok(out)
    }

    /// Given `g = dL/dy` for `y = synthesize(Y)`, returns `H` with
    /// `H[t,f] = Σ_k h_t[k] e^{-2πifk/L}`, where `h_t` is the envelope-weighted
    /// slice of `g` under frame `t`. For a real mask `M` applied as
    /// `Y = M ⊙ X`, `dL/dM[t,f] = c_f / L · Re(X[t,f] · conj(H[t,f]))` with
    /// `c_f = 1` at DC and Nyquist and 2 elsewhere.
    pub fn synthesis_adjoint(&self, grad: &[f64], frames: usize) -> Array2<Complex64> {
        let StftConfig { frame_length: l, hop } = self.cfg;
        let env = self.envelope(frames, grad.len());
        let mut out = Array2::zeros((frames, self.cfg.bins()));
        let mut buf = vec![Complex64::new(0.0, 0.0); l];
        for t in 0..frames {
            for k in 0..l {
                let n = t * hop + k;
                let e = env[n];
                buf[k] = Complex64::new(if e > ENVELOPE_FLOOR { grad[n] / e } else { 0.0 }, 0.0);
            }
            self.forward.process(&mut buf);
            for f in 0..self.cfg.bins() {
                out[[t, f]] = buf[f];
            }
        }
        out
    }

    /// Multiplicity of one-sided bin `f` in the real inverse transform.
    pub fn bin_weight(&self, f: usize) -> f64 {
        if f == 0 || f == self.cfg.frame_length / 2 {
            1.0
        } else {
            2.0
        }
    }

    /// Backpropagates `grad` (frames × bins, w.r.t. `log10(|X| + eps)`)
    /// to the time-domain signal that produced `spec`.
    pub fn log_magnitude_adjoint(&self, spec: &Array2<Complex64>, grad: &Array2<f64>, len: usize) -> Vec<f64> {
        let StftConfig { frame_length: l, hop } = self.cfg;
        let bins = self.cfg.bins();
        let mut out = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); l];
        for t in 0..spec.nrows() {
            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            for f in 0..bins {
                let y = spec[[t, f]];
                let mag = y.norm();
                if mag > 0.0 {
                    let d = grad[[t, f]] / (std::f64::consts::LN_10 * (mag + LOG_MAG_EPS));
                    buf[f] = y * (d / mag);
                }
            }
            // Σ_f G_f e^{+2πifk/L} over one-sided bins only.
            self.inverse.process(&mut buf);
            for k in 0..l {
                out[t * hop + k] += buf[k].re * self.window[k];
            }
        }
        out
    }
}

/// `log10(|X| + 1e-8)` per bin.
pub fn log_magnitude(spec: &Array2<Complex64>) -> Array2<f64> {
    spec.mapv(|c| (c.norm() + LOG_MAG_EPS).log10())
}

pub fn stft(x: &[f64], cfg: StftConfig) -> Result<Array2<Complex64>> {
    Stft::new(cfg)?.analyze(x)
}

pub fn istft(spec: &Array2<Complex64>, cfg: StftConfig, len: usize) -> Result<Vec<f64>> {
    Stft::new(cfg)?.synthesize(spec, len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::numeric_gradient;
    use crate::rng::seeded;
    use rand::Rng;

    fn random_signal(n: usize, seed: u64) -> Vec<f64> {
        let mut r = seeded(seed);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn round_trip_interior_is_exact() {
        let cfg = StftConfig::default();
        let x = random_signal(8000, 3);
        let spec = stft(&x, cfg).unwrap();
        let y = istft(&spec, cfg, x.len()).unwrap();
        let s = Stft::new(cfg).unwrap();
        let env = s.envelope(spec.nrows(), x.len());
        let mut max_err: f64 = 0.0;
        for ((a, b), e) in x.iter().zip(&y).zip(&env) {
            if *e >= 0.5 {
                max_err = max_err.max((a - b).abs());
            }
        }
        assert!(max_err < 1e-10, "{max_err}");
    }

    #[test]
    fn tone_concentrates_in_its_bin() {
        let cfg = StftConfig::default();
        let x: Vec<f64> = (0..2048).map(|n| (2.0 * PI * 1000.0 * n as f64 / 8000.0).sin()).collect();
        let spec = stft(&x, cfg).unwrap();
        let expected = (1000.0 * 256.0 / 8000.0) as usize;
        for row in spec.rows() {
            let peak = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
                .unwrap()
                .0;
            assert!(peak.abs_diff(expected) <= 1);
        }
    }

    #[test]
    fn zero_signal_zero_spectrum() {
        let spec = stft(&[0.0; 512], StftConfig::default()).unwrap();
        assert!(spec.iter().all(|c| c.norm() == 0.0));
        assert_eq!(spec.nrows(), 3);
    }

    #[test]
    fn too_short_rejected() {
        assert!(matches!(stft(&[0.0; 100], StftConfig::default()), Err(Error::InvalidArgument(_))));
        assert!(StftConfig { frame_length: 256, hop: 300 }.validate().is_err());
    }

    #[test]
    fn mask_adjoint_matches_finite_differences() {
        let cfg = StftConfig { frame_length: 16, hop: 8 };
        let s = Stft::new(cfg).unwrap();
        let x = random_signal(64, 1);
        let target = random_signal(64, 2);
        let spec = s.analyze(&x).unwrap();
        let (frames, bins) = spec.dim();
        let mask0: Vec<f64> = random_signal(frames * bins, 4).iter().map(|v| 0.5 + 0.4 * v).collect();
        let loss = |m: &[f64]| {
            let masked = Array2::from_shape_fn((frames, bins), |(t, f)| spec[[t, f]] * m[t * bins + f]);
            let y = s.synthesize(&masked, 64).unwrap();
            y.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        let masked = Array2::from_shape_fn((frames, bins), |(t, f)| spec[[t, f]] * mask0[t * bins + f]);
        let y = s.synthesize(&masked, 64).unwrap();
        let g: Vec<f64> = y.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
        let h = s.synthesis_adjoint(&g, frames);
        let analytic: Vec<f64> = (0..frames * bins)
            .map(|i| {
                let (t, f) = (i / bins, i % bins);
                s.bin_weight(f) / 16.0 * (spec[[t, f]] * h[[t, f]].conj()).re
            })
            .collect();
        let numeric = numeric_gradient(loss, &mask0, 1e-6);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6 * (1.0 + a.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn log_magnitude_adjoint_matches_finite_differences() {
        let cfg = StftConfig { frame_length: 16, hop: 8 };
        let s = Stft::new(cfg).unwrap();
        let x = random_signal(48, 5);
        let weights = random_signal(5 * 9, 6);
        let loss = |v: &[f64]| {
            let lm = log_magnitude(&s.analyze(v).unwrap());
            lm.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let spec = s.analyze(&x).unwrap();
        let grad = Array2::from_shape_vec(spec.dim(), weights.clone()).unwrap();
        let analytic = s.log_magnitude_adjoint(&spec, &grad, x.len());
        let numeric = numeric_gradient(loss, &x, 1e-6);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-5 * (1.0 + a.abs()), "{a} vs {n}");
        }
    }
}
