use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::synth::{synth_noise, synth_utterance, NoiseKind, SpeechProfile};
use super::{mix_at_snr, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub items: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub snr_grid_db: Vec<f64>,
    pub noise_kinds: Vec<NoiseKind>,
    /// One f0 band per synthetic speaker; item `i` belongs to speaker `i % len`.
    pub speaker_f0_bands_hz: Vec<[f64; 2]>,
    pub profile: SpeechProfile,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            items: 200,
            duration_s: 1.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            snr_grid_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            noise_kinds: vec![NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble],
            speaker_f0_bands_hz: vec![[85.0, 105.0], [125.0, 145.0], [170.0, 195.0], [230.0, 260.0]],
            profile: SpeechProfile::default(),
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.items == 0 {
            return Err(Error::invalid("corpus needs at least one item"));
        }
        if self.snr_grid_db.is_empty() {
            return Err(Error::invalid("snr grid is empty"));
        }
        if self.snr_grid_db.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("snr grid contains a non-finite value"));
        }
        if self.noise_kinds.is_empty() {
            return Err(Error::invalid("no noise kinds configured"));
        }
        if self.speaker_f0_bands_hz.is_empty() {
            return Err(Error::invalid("no speakers configured"));
        }
        if !(self.duration_s > 0.0) {
            return Err(Error::invalid("duration must be positive"));
        }
        Ok(())
    }

    pub fn speaker_count(&self) -> usize {
        self.speaker_f0_bands_hz.len()
    }

    pub fn phone_count(&self) -> usize {
        self.profile.phone_formants_hz.len()
    }
}

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub clean: Waveform,
    /// Noise already scaled to `snr_db`; `mix = clean + noise`.
    pub noise: Waveform,
    pub mix: Waveform,
    pub snr_db: f64,
    pub noise_kind: NoiseKind,
    pub speaker: usize,
    pub f0_hz: f64,
    pub phones: Vec<usize>,
    pub phone_len: usize,
}

impl CorpusItem {
    pub fn phone_at(&self, sample: usize) -> usize {
        let idx = (sample / self.phone_len).min(self.phones.len() - 1);
        self.phones[idx]
    }

    /// Same clean/noise pair mixed at a different SNR.
    pub fn remixed(&self, snr_db: f64) -> Result<CorpusItem> {
        let m = mix_at_snr(&self.clean, &self.noise, snr_db)?;
        Ok(CorpusItem { noise: m.scaled_noise, mix: m.mix, snr_db, ..self.clone() })
    }
}

/// Aligned (clean, noise, mix) triples. Never empty.
#[derive(Debug, Clone)]
pub struct Batch {
    items: Vec<CorpusItem>,
}

impl Batch {
    pub fn new(items: Vec<CorpusItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("batch must contain at least one item"));
        }
        for (i, it) in items.iter().enumerate() {
            it.clean.check_compatible(&it.noise)?;
            it.clean.check_compatible(&it.mix)?;
            for ((c, n), m) in it.clean.samples().iter().zip(it.noise.samples()).zip(it.mix.samples()) {
                if (c + n - m).abs() > 1e-9 * (1.0 + m.abs()) {
                    return Err(Error::invalid(format!("item {i}: mix != clean + noise")));
                }
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[CorpusItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn cleans(&self) -> Vec<Waveform> {
        self.items.iter().map(|i| i.clean.clone()).collect()
    }

    pub fn mixes(&self) -> Vec<Waveform> {
        self.items.iter().map(|i| i.mix.clone()).collect()
    }

    pub fn noises(&self) -> Vec<Waveform> {
        self.items.iter().map(|i| i.noise.clone()).collect()
    }

    /// Every item remixed at one fixed SNR.
    pub fn at_snr(&self, snr_db: f64) -> Result<Batch> {
        let items = self.items.iter().map(|i| i.remixed(snr_db)).collect::<Result<Vec<_>>>()?;
        Ok(Batch { items })
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Result<Batch> {
        let items = self
            .items
            .get(range.clone())
            .ok_or_else(|| Error::invalid(format!("subset {range:?} out of bounds")))?
            .to_vec();
        Batch::new(items)
    }
}

pub fn make_corpus(config: &CorpusConfig) -> Result<Batch> {
    config.validate()?;
    let mut items = Vec::with_capacity(config.items);
    for i in 0..config.items {
        let item_seed = derive_seed(config.seed, i as u64);
        let mut pick = seeded(derive_seed(item_seed, 2));
        let speaker = i % config.speaker_count();
        let [lo, hi] = config.speaker_f0_bands_hz[speaker];
        let profile = config.profile.clone().with_f0_range(lo, hi);
        let utt = synth_utterance(derive_seed(item_seed, 0), config.duration_s, config.sample_rate, &profile)?;
        let snr_db = config.snr_grid_db[pick.gen_range(0..config.snr_grid_db.len())];
        let noise_kind = config.noise_kinds[pick.gen_range(0..config.noise_kinds.len())];
        let raw = synth_noise(noise_kind, derive_seed(item_seed, 1), config.duration_s, config.sample_rate)?;
        let m = mix_at_snr(&utt.waveform, &raw, snr_db)?;
        items.push(CorpusItem {
            clean: utt.waveform,
            noise: m.scaled_noise,
            mix: m.mix,
            snr_db,
            noise_kind,
            speaker,
            f0_hz: utt.f0_hz,
            phones: utt.phones,
            phone_len: utt.phone_len,
        });
    }
    Batch::new(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::snr_db;

    fn small() -> CorpusConfig {
        CorpusConfig { items: 12, duration_s: 0.25, ..Default::default() }
    }

    #[test]
    fn snr_round_trip_exact() {
        let c = make_corpus(&small()).unwrap();
        for it in c.items() {
            for target in [-5.0, 0.0, 5.0, 15.0, 30.0] {
                let r = it.remixed(target).unwrap();
                assert!((snr_db(&r.clean, &r.noise) - target).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn corpus_respects_grid_and_count() {
        let cfg = CorpusConfig { items: 100, duration_s: 0.1, ..Default::default() };
        let c = make_corpus(&cfg).unwrap();
        assert_eq!(c.len(), 100);
        for it in c.items() {
            assert!(cfg.snr_grid_db.contains(&it.snr_db));
            assert!(it.speaker < 4);
        }
    }

    #[test]
    fn corpus_is_deterministic_and_additive() {
        let a = make_corpus(&small()).unwrap();
        let b = make_corpus(&small()).unwrap();
        for (x, y) in a.items().iter().zip(b.items()) {
            assert_eq!(x.mix, y.mix);
            assert_eq!(x.snr_db, y.snr_db);
            for ((c, n), m) in x.clean.samples().iter().zip(x.noise.samples()).zip(x.mix.samples()) {
                assert!((c + n - m).abs() <= 1e-9 * (1.0 + m.abs()));
            }
        }
    }

    #[test]
    fn speaker_bands_are_honoured() {
        let c = make_corpus(&small()).unwrap();
        let bands = CorpusConfig::default().speaker_f0_bands_hz;
        for it in c.items() {
            let [lo, hi] = bands[it.speaker];
            assert!(it.f0_hz >= lo && it.f0_hz <= hi);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let empty_grid = CorpusConfig { snr_grid_db: vec![], ..small() };
        assert!(matches!(make_corpus(&empty_grid), Err(Error::InvalidArgument(_))));
        let zero = CorpusConfig { items: 0, ..small() };
        assert!(matches!(make_corpus(&zero), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let bad = r#"{"items": 3, "bogus": 1}"#;
        assert!(serde_json::from_str::<CorpusConfig>(bad).is_err());
        let ok: CorpusConfig = serde_json::from_str(r#"{"items": 3}"#).unwrap();
        assert_eq!(ok.items, 3);
        assert_eq!(ok.snr_grid_db.len(), 5);
    }
}
