use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

/// Parameters of the harmonic voiced-speech stand-in.
///
/// Each utterance draws one fundamental from `f0_range_hz`. The utterance is
/// cut into fixed-length segments ("phones"); each segment emphasises the
/// harmonics near one of `phone_formants_hz`, so the phone index is
/// recoverable from the spectral envelope of a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeechProfile {
    pub f0_range_hz: [f64; 2],
    pub harmonics: usize,
    pub phone_formants_hz: Vec<f64>,
    pub formant_bandwidth_hz: f64,
    pub phone_duration_s: f64,
}

impl Default for SpeechProfile {
    fn default() -> Self {
        Self {
            f0_range_hz: [80.0, 300.0],
            harmonics: 24,
            phone_formants_hz: vec![500.0, 1000.0, 1700.0, 2600.0],
            formant_bandwidth_hz: 350.0,
            phone_duration_s: 0.125,
        }
    }
}

impl SpeechProfile {
    pub fn with_f0_range(mut self, lo: f64, hi: f64) -> Self {
        self.f0_range_hz = [lo, hi];
        self
    }

    fn validate(&self) -> Result<()> {
        let [lo, hi] = self.f0_range_hz;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid(format!("bad f0 range [{lo}, {hi}]")));
        }
        if self.harmonics < 5 {
            return Err(Error::invalid("at least 5 harmonics are required"));
        }
        if self.phone_formants_hz.is_empty() {
            return Err(Error::invalid("at least one phone formant is required"));
        }
        if !(self.formant_bandwidth_hz > 0.0) || !(self.phone_duration_s > 0.0) {
            return Err(Error::invalid("formant bandwidth and phone duration must be positive"));
        }
        Ok(())
    }
}

/// A synthetic utterance with its ground truth.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub waveform: Waveform,
    pub f0_hz: f64,
    /// Phone index per segment of `phone_len` samples.
    pub phones: Vec<usize>,
    pub phone_len: usize,
}

impl Utterance {
    pub fn phone_at(&self, sample: usize) -> usize {
        let idx = (sample / self.phone_len).min(self.phones.len() - 1);
        self.phones[idx]
    }
}

fn sample_count(duration_s: f64, sample_rate: u32) -> Result<usize> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::invalid(format!("duration must be positive, got {duration_s}")));
    }
    let n = (duration_s * sample_rate as f64).round() as usize;
    if n == 0 {
        return Err(Error::invalid("duration shorter than one sample"));
    }
    Ok(n)
}

/// Harmonic tone complex with slow amplitude modulation, peak-normalized to 0.5.
pub fn synth_speech(seed: u64, duration_s: f64, profile: &SpeechProfile) -> Result<Waveform> {
    Ok(synth_utterance(seed, duration_s, super::DEFAULT_SAMPLE_RATE, profile)?.waveform)
}

pub fn synth_utterance(
    seed: u64,
    duration_s: f64,
    sample_rate: u32,
    profile: &SpeechProfile,
) -> Result<Utterance> {
    profile.validate()?;
    let n = sample_count(duration_s, sample_rate)?;
    let fs = sample_rate as f64;
    let mut rng = seeded(seed);

    let [lo, hi] = profile.f0_range_hz;
    let f0 = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let vibrato_rate = rng.gen_range(1.5..3.0);
    let vibrato_phase = rng.gen_range(0.0..2.0 * PI);
    let am_rate = rng.gen_range(2.5..5.0);
    let am_phase = rng.gen_range(0.0..2.0 * PI);
    let harmonic_phases: Vec<f64> =
        (0..profile.harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();

    let phone_len = ((profile.phone_duration_s * fs).round() as usize).max(1);
    let segments = n.div_ceil(phone_len);
    let n_phones = profile.phone_formants_hz.len();
    let phones: Vec<usize> = (0..segments).map(|_| rng.gen_range(0..n_phones)).collect();

    // Harmonic gains per phone template, for the utterance's nominal f0.
    let nyquist_guard = 0.95 * fs / 2.0;
    let gains: Vec<Vec<f64>> = profile
        .phone_formants_hz
        .iter()
        .map(|&formant| {
            (1..=profile.harmonics)
                .map(|h| {
                    let f = h as f64 * f0;
                    if f >= nyquist_guard {
                        return 0.0;
                    }
                    let z = (f - formant) / profile.formant_bandwidth_hz;
                    (0.15 + (-z * z).exp()) / (h as f64).sqrt()
                })
                .collect()
        })
        .collect();

    let fade = ((0.01 * fs) as usize).min(phone_len / 2).max(1);
    let mut out = Vec::with_capacity(n);
    let mut phase = 0.0;
    let mut current = vec![0.0; profile.harmonics];
    for i in 0..n {
        let t = i as f64 / fs;
        let inst_f0 = f0 * (1.0 + 0.02 * (2.0 * PI * vibrato_rate * t + vibrato_phase).sin());
        phase += 2.0 * PI * inst_f0 / fs;

        // Crossfade from the previous phone template over `fade` samples.
        let seg = i / phone_len;
        let pos = i % phone_len;
        let g_now = &gains[phones[seg]];
        if seg > 0 && pos < fade {
            let g_prev = &gains[phones[seg - 1]];
            let a = pos as f64 / fade as f64;
            for (c, (p, q)) in current.iter_mut().zip(g_prev.iter().zip(g_now)) {
                *c = (1.0 - a) * p + a * q;
            }
        } else {
            current.copy_from_slice(g_now);
        }

        let am = 0.6 + 0.4 * (2.0 * PI * am_rate * t + am_phase).sin();
        let mut v = 0.0;
        for (h, (&g, &ph)) in current.iter().zip(&harmonic_phases).enumerate() {
            if g != 0.0 {
                v += g * ((h + 1) as f64 * phase + ph).sin();
            }
        }
        out.push(am * v);
    }

    let peak = out.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    Ok(Utterance { waveform: Waveform::new(out, sample_rate)?, f0_hz: f0, phones, phone_len })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "white" => Ok(NoiseKind::White),
            "pink" => Ok(NoiseKind::Pink),
            "babble" => Ok(NoiseKind::Babble),
            other => Err(Error::invalid(format!("unknown noise kind '{other}'"))),
        }
    }
}

const BABBLE_TALKERS: u64 = 6;

/// Unit-RMS noise of the requested spectral character.
pub fn synth_noise(kind: NoiseKind, seed: u64, duration_s: f64, sample_rate: u32) -> Result<Waveform> {
    let n = sample_count(duration_s, sample_rate)?;
    let raw = match kind {
        NoiseKind::White => gaussian(seed, n),
        NoiseKind::Pink => pink(seed, n),
        NoiseKind::Babble => {
            let profile = SpeechProfile::default();
            let mut acc = vec![0.0; n];
            for talker in 0..BABBLE_TALKERS {
                let u = synth_utterance(derive_seed(seed, talker), duration_s, sample_rate, &profile)?;
                acc.iter_mut().zip(u.waveform.samples()).for_each(|(a, v)| *a += v);
            }
            acc
        }
    };
    let rms = (raw.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms <= 0.0 {
        return Err(Error::numeric("generated noise is silent"));
    }
    Waveform::new(raw.into_iter().map(|v| v / rms).collect(), sample_rate)
}

fn gaussian(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// White noise shaped by 1/sqrt(f) in the frequency domain (1/f power).
fn pink(seed: u64, n: usize) -> Vec<f64> {
    let mut buf: Vec<Complex64> = gaussian(seed, n).into_iter().map(|v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex64::new(0.0, 0.0);
    for k in 1..n {
        let f = k.min(n - k) as f64;
        buf[k] /= f.sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.into_iter().map(|c| c.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Mean per-bin power over a band, by direct DFT (independent of the FFT
    /// path used above).
    fn band_power(x: &[f64], fs: f64, lo: f64, hi: f64) -> f64 {
        let n = x.len();
        let k_lo = (lo * n as f64 / fs).ceil() as usize;
        let k_hi = (hi * n as f64 / fs).floor() as usize;
        (k_lo..=k_hi)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (k * t) as f64 / n as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re * re + im * im
            })
            .sum::<f64>()
            / (k_hi - k_lo + 1) as f64
    }

    #[test]
    fn speech_is_peak_normalized_and_deterministic() {
        let p = SpeechProfile::default();
        let a = synth_speech(7, 1.0, &p).unwrap();
        let b = synth_speech(7, 1.0, &p).unwrap();
        assert_eq!(a.len(), 8000);
        assert!((a.peak() - 0.5).abs() < 1e-6);
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_change_the_fundamental() {
        let p = SpeechProfile::default();
        let a = synth_utterance(7, 1.0, 8000, &p).unwrap();
        let b = synth_utterance(8, 1.0, 8000, &p).unwrap();
        assert_ne!(a.f0_hz, b.f0_hz);
        assert_ne!(a.waveform, b.waveform);
        assert!((80.0..300.0).contains(&a.f0_hz));
    }

    #[test]
    fn speech_rejects_bad_duration() {
        let p = SpeechProfile::default();
        assert!(matches!(synth_speech(1, 0.0, &p), Err(Error::InvalidArgument(_))));
        assert!(synth_speech(1, -1.0, &p).is_err());
    }

    #[test]
    fn phones_cover_the_utterance() {
        let u = synth_utterance(3, 1.0, 8000, &SpeechProfile::default()).unwrap();
        assert_eq!(u.phones.len(), 8);
        assert!(u.phones.iter().all(|&p| p < 4));
        assert_eq!(u.phone_at(7999), u.phones[7]);
    }

    #[test]
    fn noise_is_unit_rms_and_deterministic() {
        for kind in [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble] {
            let a = synth_noise(kind, 1, 1.0, 8000).unwrap();
            let b = synth_noise(kind, 1, 1.0, 8000).unwrap();
            assert!((a.rms() - 1.0).abs() < 1e-6, "{kind:?}");
            assert_eq!(a, b);
        }
    }

    #[test]
    fn pink_noise_tilts_toward_low_frequencies() {
        let w = synth_noise(NoiseKind::Pink, 1, 1.0, 8000).unwrap();
        let low = band_power(w.samples(), 8000.0, 100.0, 200.0);
        let high = band_power(w.samples(), 8000.0, 1600.0, 3200.0);
        assert!(low > high, "low {low} high {high}");
    }

    #[test]
    fn unknown_noise_kind_rejected() {
        assert!(matches!("brown".parse::<NoiseKind>(), Err(Error::InvalidArgument(_))));
        assert_eq!("Pink".parse::<NoiseKind>().unwrap(), NoiseKind::Pink);
    }
}
