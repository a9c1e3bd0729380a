//! Waveforms, synthetic corpora, SNR-controlled mixing and energy ratios.

mod corpus;
mod synth;
mod wav;

pub use corpus::{make_corpus, Batch, CorpusConfig, CorpusItem};
pub use synth::{synth_noise, synth_speech, synth_utterance, NoiseKind, SpeechProfile, Utterance};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// Fixed-rate mono signal. Never empty, every sample finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AsRef<[f64]> for Waveform {
    fn as_ref(&self) -> &[f64] {
        &self.samples
    }
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform must contain at least one sample"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Sum of squares.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    /// Mean square.
    pub fn power(&self) -> f64 {
        self.energy() / self.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.samples.iter().map(|v| v * factor).collect(), self.sample_rate)
    }

    pub fn check_compatible(&self, other: &Waveform) -> Result<()> {
        if self.len() != other.len() || self.sample_rate != other.sample_rate {
            return Err(Error::invalid(format!(
                "waveforms differ in shape: {} samples @ {} Hz vs {} samples @ {} Hz",
                self.len(),
                self.sample_rate,
                other.len(),
                other.sample_rate
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Waveform) -> Result<Self> {
        self.check_compatible(other)?;
        let samples = self.samples.iter().zip(&other.samples).map(|(a, b)| a + b).collect();
        Self::new(samples, self.sample_rate)
    }
}

/// Output of [`mix_at_snr`].
#[derive(Debug, Clone)]
pub struct Mixture {
    pub mix: Waveform,
    pub scaled_noise: Waveform,
}

/// Scales `noise` so that the full-utterance power ratio of speech to noise
/// equals `snr_db`, then adds it to `speech`.
pub fn mix_at_snr(speech: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Mixture> {
    speech.check_compatible(noise)?;
    if !snr_db.is_finite() {
        return Err(Error::invalid("snr must be finite"));
    }
    let ps = speech.power();
    let pn = noise.power();
    if ps <= 0.0 {
        return Err(Error::invalid("speech has zero power"));
    }
    if pn <= 0.0 {
        return Err(Error::invalid("noise has zero power"));
    }
    let alpha = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled_noise = noise.scaled(alpha)?;
    let mix = speech.add(&scaled_noise)?;
    Ok(Mixture { mix, scaled_noise })
}

/// Power ratio of two signals in dB.
pub fn snr_db(speech: &Waveform, noise: &Waveform) -> f64 {
    10.0 * (speech.power() / noise.power()).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OirMeasurement {
    pub ratio: f64,
    pub ratio_db: f64,
}

impl OirMeasurement {
    pub fn from_ratio(ratio: f64) -> Self {
        Self { ratio, ratio_db: 10.0 * ratio.log10() }
    }
}

/// Mean over pairs of `‖out‖² / ‖in‖²`.
pub fn output_to_input_ratio(outputs: &[Waveform], inputs: &[Waveform]) -> Result<OirMeasurement> {
    if outputs.len() != inputs.len() {
        return Err(Error::invalid(format!(
            "{} outputs but {} inputs",
            outputs.len(),
            inputs.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::invalid("output-to-input ratio needs at least one pair"));
    }
    let mut total = 0.0;
    for (i, (out, inp)) in outputs.iter().zip(inputs).enumerate() {
        out.check_compatible(inp)?;
        let e_in = inp.energy();
        if e_in <= 0.0 {
            return Err(Error::invalid(format!("input {i} has zero energy")));
        }
        total += out.energy() / e_in;
    }
    Ok(OirMeasurement::from_ratio(total / outputs.len() as f64))
}
