//! Frame-wise ratio-mask enhancer.
//!
//! A dense network maps each noisy log-magnitude frame to a magnitude mask
//! in `[0, 1]`; the masked spectrum is resynthesized with the noisy phase.
//! Inputs are zero-padded by `frame_length - hop` on both sides (plus up to
//! one hop at the end) so every original sample sits under full window
//! coverage, and the output is cropped back to the input length.

pub mod stft;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::downstream::DownstreamModel;
use crate::error::{Error, Result};
use crate::losses::{ct_loss, kl_divergence, si_sdr_loss, FeatureDistribution, LossConfig};
use crate::nn::{adam_step, Activation, AdamConfig, AdamState, DenseNetwork, NetworkCheckpoint};
use crate::rng::{derive_seed, seeded};
use crate::signal::{Batch, Waveform};
use stft::{log_magnitude, Stft};
pub use stft::{istft, stft, StftConfig};

/// Anything that maps a noisy waveform to an enhanced one of equal length.
pub trait SpeechEnhancer {
    fn enhance(&self, x: &Waveform) -> Result<Waveform>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskEnhancer {
    net: DenseNetwork,
    stft: StftConfig,
}

/// Noisy input prepared for the mask network.
struct Prepared {
    spec: Array2<Complex64>,
    features: Array2<f64>,
    padded_len: usize,
    front: usize,
    len: usize,
}

impl MaskEnhancer {
    /// Mask network `bins → hidden… → bins`, ReLU hidden layers, sigmoid output.
    pub fn new(stft: StftConfig, hidden: &[usize], seed: u64) -> Result<Self> {
        stft.validate()?;
        let bins = stft.bins();
        let mut dims = vec![bins];
        dims.extend_from_slice(hidden);
        dims.push(bins);
        let mut acts = vec![Activation::Relu; hidden.len()];
        acts.push(Activation::Sigmoid);
        Self::from_network(DenseNetwork::new(&dims, &acts, seed)?, stft)
    }

    pub fn default_shape(seed: u64) -> Result<Self> {
        Self::new(StftConfig::default(), &[128, 128], seed)
    }

    pub fn from_network(net: DenseNetwork, stft: StftConfig) -> Result<Self> {
        stft.validate()?;
        let bins = stft.bins();
        if net.in_dim() != bins || net.out_dim() != bins {
            return Err(Error::invalid(format!(
                "mask network must map {bins} -> {bins}, got {} -> {}",
                net.in_dim(),
                net.out_dim()
            )));
        }
        if net.layers().last().map(|l| l.activation) != Some(Activation::Sigmoid) {
            return Err(Error::invalid("mask network must end in a sigmoid"));
        }
        Ok(Self { net, stft })
    }

    /// Single sigmoid layer with zero weights and the given bias: a constant
    /// mask of `sigmoid(bias)` in every bin. Bias ±40 gives exactly 1 and 0.
    pub fn constant_mask(stft: StftConfig, bias: f64) -> Result<Self> {
        let mut net = DenseNetwork::zeros(&[stft.bins(), stft.bins()], &[Activation::Sigmoid])?;
        if let Some(l) = net.layer_mut(0) {
            l.biases.fill(bias);
        }
        Self::from_network(net, stft)
    }

    pub fn network(&self) -> &DenseNetwork {
        &self.net
    }

    pub fn stft_config(&self) -> StftConfig {
        self.stft
    }

    fn padding(&self, len: usize) -> (usize, usize) {
        let StftConfig { frame_length: l, hop } = self.stft;
        let front = l - hop;
        let mut padded = front + len + (l - hop);
        let rem = (padded - l) % hop;
        if rem != 0 {
            padded += hop - rem;
        }
        (front, padded)
    }

    fn prepare(&self, stft: &Stft, x: &[f64]) -> Result<Prepared> {
        if x.len() < self.stft.frame_length {
            return Err(Error::invalid(format!(
                "input of {} samples is shorter than one frame ({})",
                x.len(),
                self.stft.frame_length
            )));
        }
        let (front, padded_len) = self.padding(x.len());
        let mut padded = vec![0.0; padded_len];
        padded[front..front + x.len()].copy_from_slice(x);
        let spec = stft.analyze(&padded)?;
        let features = log_magnitude(&spec);
        Ok(Prepared { spec, features, padded_len, front, len: x.len() })
    }

    fn apply_mask(&self, stft: &Stft, p: &Prepared, mask: ndarray::ArrayView2<f64>) -> Result<Vec<f64>> {
        let masked = Array2::from_shape_fn(p.spec.dim(), |(t, f)| p.spec[[t, f]] * mask[[t, f]]);
        let y = stft.synthesize(&masked, p.padded_len)?;
        Ok(y[p.front..p.front + p.len].to_vec())
    }

    /// dL/dmask for one item given dL/dŝ.
    fn mask_gradient(&self, stft: &Stft, p: &Prepared, grad: &[f64]) -> Array2<f64> {
        let mut padded = vec![0.0; p.padded_len];
        padded[p.front..p.front + p.len].copy_from_slice(grad);
        let h = stft.synthesis_adjoint(&padded, p.spec.nrows());
        let l = self.stft.frame_length as f64;
        Array2::from_shape_fn(p.spec.dim(), |(t, f)| {
            stft.bin_weight(f) / l * (p.spec[[t, f]] * h[[t, f]].conj()).re
        })
    }

    /// Predicted mask (frames × bins) for a noisy input.
    pub fn mask(&self, x: &Waveform) -> Result<Array2<f64>> {
        let stft = Stft::new(self.stft)?;
        let p = self.prepare(&stft, x.samples())?;
        self.net.predict_batch(p.features.view())
    }

    pub fn to_checkpoint(&self) -> EnhancerCheckpoint {
        EnhancerCheckpoint { stft: self.stft, network: self.net.to_checkpoint(None) }
    }

    pub fn from_checkpoint(ck: &EnhancerCheckpoint) -> Result<Self> {
        Self::from_network(DenseNetwork::from_checkpoint(&ck.network)?, ck.stft)
    }
}

impl SpeechEnhancer for MaskEnhancer {
    fn enhance(&self, x: &Waveform) -> Result<Waveform> {
        let stft = Stft::new(self.stft)?;
        let p = self.prepare(&stft, x.samples())?;
        let mask = self.net.predict_batch(p.features.view())?;
        Waveform::new(self.apply_mask(&stft, &p, mask.view())?, x.sample_rate())
    }
}

pub fn enhance(e: &MaskEnhancer, x: &Waveform) -> Result<Waveform> {
    e.enhance(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhancerCheckpoint {
    pub stft: StftConfig,
    pub network: NetworkCheckpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnhancerLoss {
    SiSdr,
    Ct,
    Cm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhancerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for EnhancerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            adam: AdamConfig::with_lr(2e-3, 0.95),
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    /// (epoch, mean loss over the epoch's batches)
    pub points: Vec<(usize, f64)>,
}

impl TrainingCurve {
    /// True when no epoch's loss exceeds the best earlier loss by more than
    /// `rel_tol` of its magnitude.
    pub fn is_non_increasing(&self, rel_tol: f64) -> bool {
        let mut best = f64::INFINITY;
        for &(_, v) in &self.points {
            if best.is_finite() && v > best + rel_tol * best.abs() {
                return false;
            }
            best = best.min(v);
        }
        true
    }
}

/// Trains `init` on the corpus under the selected loss. The CM loss needs a
/// downstream model to compare distributions of enhanced and clean speech.
pub fn train_enhancer(
    init: MaskEnhancer,
    corpus: &Batch,
    kind: EnhancerLoss,
    downstream: Option<&DownstreamModel>,
    cfg: &EnhancerTrainConfig,
) -> Result<(MaskEnhancer, TrainingCurve)> {
    cfg.loss.validate()?;
    if kind == EnhancerLoss::Cm && downstream.is_none() {
        return Err(Error::invalid("the cm loss requires a downstream model"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut model = init;
    let mut curve = TrainingCurve::default();
    if cfg.epochs == 0 {
        return Ok((model, curve));
    }
    let stft = Stft::new(model.stft)?;
    let prepared = corpus
        .items()
        .iter()
        .map(|it| model.prepare(&stft, it.mix.samples()))
        .collect::<Result<Vec<_>>>()?;
    let clean_dists = match (kind, downstream) {
        (EnhancerLoss::Cm, Some(ds)) => Some(
            corpus.items().iter().map(|it| ds.infer(&it.clean)).collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };

    let mut state = AdamState::new(model.net.parameter_count(), cfg.adam);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeded(derive_seed(cfg.seed, epoch as u64)));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let feats: Vec<_> = chunk.iter().map(|&i| prepared[i].features.view()).collect();
            let stacked = concatenate(Axis(0), &feats).map_err(|e| Error::invalid(e.to_string()))?;
            let cache = model.net.forward_batch(stacked.view())?;
            let masks = cache.output();

            let mut estimates = Vec::with_capacity(chunk.len());
            let mut row = 0;
            for &i in chunk {
                let p = &prepared[i];
                let n = p.spec.nrows();
                estimates.push(model.apply_mask(&stft, p, masks.slice(ndarray::s![row..row + n, ..]))?);
                row += n;
            }
            let targets: Vec<&[f64]> = chunk.iter().map(|&i| corpus.items()[i].clean.samples()).collect();

            let (value, mut grads) = match kind {
                EnhancerLoss::SiSdr => {
                    let l = si_sdr_loss(&estimates, &targets, &cfg.loss)?;
                    (l.value, l.gradient)
                }
                EnhancerLoss::Ct => {
                    let noise: Vec<&[f64]> = chunk.iter().map(|&i| corpus.items()[i].noise.samples()).collect();
                    let l = ct_loss(&estimates, &targets, &noise, &cfg.loss)?;
                    (l.value, l.gradient)
                }
                EnhancerLoss::Cm => {
                    let ds = downstream.expect("checked above");
                    let clean = clean_dists.as_ref().expect("computed for cm");
                    let sdr = si_sdr_loss(&estimates, &targets, &cfg.loss)?;
                    let (kl, extra) = cm_distribution_term(ds, &estimates, chunk, clean, &cfg.loss, corpus)?;
                    let grads = sdr
                        .gradient
                        .into_iter()
                        .zip(extra)
                        .map(|(a, b)| a.into_iter().zip(b).map(|(x, y)| x + cfg.loss.lambda_cm * y).collect())
                        .collect();
                    (sdr.value + cfg.loss.lambda_cm * kl, grads)
                }
            };
            if !value.is_finite() {
                return Err(Error::Numeric {
                    message: format!("non-finite enhancer loss in epoch {epoch}"),
                    trace: curve.points.clone(),
                });
            }

            let mask_grads: Vec<Array2<f64>> = chunk
                .iter()
                .zip(grads.iter_mut())
                .map(|(&i, g)| model.mask_gradient(&stft, &prepared[i], g))
                .collect();
            let views: Vec<_> = mask_grads.iter().map(|m| m.view()).collect();
            let dmask = concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))?;
            let g = model.net.backward_batch(&cache, dmask.view())?;
            let mut params = model.net.params();
            adam_step(&mut params, &g.params, &mut state)?;
            model.net.set_params(&params)?;

            total += value;
            batches += 1;
        }
        curve.points.push((epoch, total / batches as f64));
        state.next_epoch();
    }
    Ok((model, curve))
}

/// KL between downstream outputs on enhanced and clean speech, over all
/// frames of the batch, and its gradient w.r.t. each estimate.
fn cm_distribution_term(
    ds: &DownstreamModel,
    estimates: &[Vec<f64>],
    chunk: &[usize],
    clean: &[FeatureDistribution],
    loss: &LossConfig,
    corpus: &Batch,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let rate = corpus.items()[chunk[0]].clean.sample_rate();
    let traces = estimates
        .iter()
        .map(|e| ds.infer_traced(&Waveform::new(e.clone(), rate)?))
        .collect::<Result<Vec<_>>>()?;
    let vx_rows: Vec<_> = traces.iter().map(|t| t.distribution().probs().view()).collect();
    let vs_rows: Vec<_> = chunk.iter().map(|&i| clean[i].probs().view()).collect();
    let vx = FeatureDistribution::new(concatenate(Axis(0), &vx_rows).map_err(|e| Error::invalid(e.to_string()))?)?;
    let vs = FeatureDistribution::new(concatenate(Axis(0), &vs_rows).map_err(|e| Error::invalid(e.to_string()))?)?;
    let kl = kl_divergence(&vx, &vs, loss)?;
    let mut row = 0;
    let mut grads = Vec::with_capacity(traces.len());
    for t in &traces {
        let n = t.distribution().frames();
        let g = kl.gradient.slice(ndarray::s![row..row + n, ..]).to_owned();
        grads.push(ds.waveform_gradient(t, &g)?);
        row += n;
    }
    Ok((kl.value, grads))
}
