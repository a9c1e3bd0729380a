//! Toy downstream models consuming (possibly enhanced) speech.
//!
//! Each model featurizes a waveform into per-frame log-magnitude spectra and
//! maps every frame to a softmax distribution over its classes. Tasks:
//!
//! * SV-analog: which synthetic speaker (f0 band) is talking, scored per frame;
//! * ASR-analog: which phone template is active in each frame;
//! * Representation-analog: pseudo-labels from a frozen random projection of
//!   the clean features.
//!
//! The SE task has no learned model; its downstream is the identity.

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::enhancer::stft::{log_magnitude, Stft, StftConfig};
use crate::error::{Error, Result};
use crate::losses::{kl_divergence, FeatureDistribution, LossConfig};
use crate::nn::{adam_step, Activation, AdamConfig, AdamState, DenseNetwork, ForwardCache, NetworkCheckpoint};
use crate::rng::{derive_seed, seeded};
use crate::signal::{Batch, CorpusItem, Waveform};

pub const TASK_VOCABULARY: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "SE")]
    Se,
    #[serde(rename = "SV")]
    Sv,
    #[serde(rename = "ASR")]
    Asr,
    Representation,
}

impl Task {
    pub const ALL: [Task; TASK_VOCABULARY] = [Task::Se, Task::Sv, Task::Asr, Task::Representation];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Task> {
        Task::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("task id {id} outside vocabulary of {TASK_VOCABULARY}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Se => "SE",
            Task::Sv => "SV",
            Task::Asr => "ASR",
            Task::Representation => "Representation",
        }
    }

    pub fn from_name(name: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::invalid(format!("unknown task '{name}'")))
    }
}

/// Weight-prediction input: which task, and whether the downstream model
/// was trained with noise injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDescriptor", into = "RawDescriptor")]
pub struct TaskDescriptor {
    task_id: usize,
    noise_injection: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDescriptor {
    task_id: usize,
    noise_injection: bool,
}

impl TryFrom<RawDescriptor> for TaskDescriptor {
    type Error = Error;

    fn try_from(r: RawDescriptor) -> Result<Self> {
        TaskDescriptor::new(r.task_id, r.noise_injection)
    }
}

impl From<TaskDescriptor> for RawDescriptor {
    fn from(d: TaskDescriptor) -> Self {
        RawDescriptor { task_id: d.task_id, noise_injection: d.noise_injection }
    }
}

impl TaskDescriptor {
    pub fn new(task_id: usize, noise_injection: bool) -> Result<Self> {
        Task::from_id(task_id)?;
        Ok(Self { task_id, noise_injection })
    }

    pub fn of(task: Task, noise_injection: bool) -> Self {
        Self { task_id: task.id(), noise_injection }
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn task(&self) -> Task {
        Task::ALL[self.task_id]
    }

    pub fn noise_injection(&self) -> bool {
        self.noise_injection
    }
}

impl std::fmt::Display for TaskDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.task().name(), if self.noise_injection { "NI" } else { "clean" })
    }
}

/// Where accuracy is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScope {
    /// One label per utterance; frame log-probabilities are summed.
    Utterance,
    Frame,
}

/// Per-frame log-magnitude spectra `log10(|STFT| + 1e-8)`, unpadded.
pub fn featurize(w: &Waveform, cfg: StftConfig) -> Result<Array2<f64>> {
    Ok(log_magnitude(&Stft::new(cfg)?.analyze(w.samples())?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamModel {
    net: DenseNetwork,
    stft: StftConfig,
    descriptor: TaskDescriptor,
    class_count: usize,
    scope: LabelScope,
    /// Frozen projection (classes × bins) defining Representation pseudo-labels.
    encoder: Option<Array2<f64>>,
    clean_accuracy: Option<f64>,
}

/// Forward state kept for backpropagating to the waveform.
pub struct DownstreamTrace {
    spec: Array2<Complex64>,
    cache: ForwardCache,
    dist: FeatureDistribution,
    len: usize,
}

impl DownstreamTrace {
    pub fn distribution(&self) -> &FeatureDistribution {
        &self.dist
    }
}

impl DownstreamModel {
    pub fn descriptor(&self) -> TaskDescriptor {
        self.descriptor
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn scope(&self) -> LabelScope {
        self.scope
    }

    pub fn stft_config(&self) -> StftConfig {
        self.stft
    }

    pub fn network(&self) -> &DenseNetwork {
        &self.net
    }

    /// Clean-condition accuracy on the training corpus, recorded at the end of training.
    pub fn clean_accuracy(&self) -> Option<f64> {
        self.clean_accuracy
    }

    /// Per-frame class distributions.
    pub fn infer(&self, w: &Waveform) -> Result<FeatureDistribution> {
        let feats = featurize(w, self.stft)?;
        FeatureDistribution::new(self.net.predict_batch(feats.view())?)
    }

    pub fn infer_traced(&self, w: &Waveform) -> Result<DownstreamTrace> {
        let spec = Stft::new(self.stft)?.analyze(w.samples())?;
        let feats = log_magnitude(&spec);
        let cache = self.net.forward_batch(feats.view())?;
        let dist = FeatureDistribution::new(cache.output().clone())?;
        Ok(DownstreamTrace { spec, cache, dist, len: w.len() })
    }

    /// Complex spectrogram the model featurizes.
    pub fn spectrum(&self, w: &Waveform) -> Result<Array2<Complex64>> {
        Stft::new(self.stft)?.analyze(w.samples())
    }

    /// Inference from a precomputed spectrogram, keeping the forward cache.
    pub(crate) fn infer_spectrum(&self, spec: &Array2<Complex64>) -> Result<(FeatureDistribution, ForwardCache)> {
        let cache = self.net.forward_batch(log_magnitude(spec).view())?;
        Ok((FeatureDistribution::new(cache.output().clone())?, cache))
    }

    /// Gradient w.r.t. the log-magnitude features for an output gradient.
    pub(crate) fn feature_gradient(&self, cache: &ForwardCache, grad: &Array2<f64>) -> Result<Array2<f64>> {
        self.net.input_gradient(cache, grad.view())
    }

    /// Backpropagates a gradient w.r.t. the output distribution of a traced
    /// inference down to the input waveform samples.
    pub fn waveform_gradient(&self, trace: &DownstreamTrace, grad: &Array2<f64>) -> Result<Vec<f64>> {
        let g = self.net.input_gradient(&trace.cache, grad.view())?;
        Ok(Stft::new(self.stft)?.log_magnitude_adjoint(&trace.spec, &g, trace.len))
    }

    /// Frame labels of a corpus item for this model's task.
    pub fn frame_labels(&self, item: &CorpusItem) -> Result<Vec<usize>> {
        labels_for(self.descriptor.task(), item, self.stft, self.encoder.as_ref())
    }

    /// Accuracy of predictions made from `input` against the labels of `item`.
    fn item_hits(&self, item: &CorpusItem, dist: &FeatureDistribution) -> Result<(usize, usize)> {
        let labels = self.frame_labels(item)?;
        let probs = dist.probs();
        match self.scope {
            LabelScope::Utterance => {
                let mut score = Array1::<f64>::zeros(self.class_count);
                for row in probs.rows() {
                    score.zip_mut_with(&row, |s, &p| *s += p.max(1e-300).ln());
                }
                Ok((usize::from(argmax(score.iter().copied()) == labels[0]), 1))
            }
            LabelScope::Frame => {
                let hits = probs
                    .rows()
                    .into_iter()
                    .zip(&labels)
                    .filter(|(row, &y)| argmax(row.iter().copied()) == y)
                    .count();
                Ok((hits, labels.len()))
            }
        }
    }

    pub fn to_checkpoint(&self) -> DownstreamCheckpoint {
        DownstreamCheckpoint {
            format_version: crate::nn::CHECKPOINT_FORMAT_VERSION,
            descriptor: self.descriptor,
            class_count: self.class_count,
            scope: self.scope,
            stft: self.stft,
            network: self.net.to_checkpoint(None),
            encoder: self.encoder.as_ref().map(|e| MatrixRecord::from(e)),
            clean_accuracy: self.clean_accuracy,
        }
    }

    pub fn from_checkpoint(ck: &DownstreamCheckpoint) -> Result<Self> {
        let net = DenseNetwork::from_checkpoint(&ck.network)?;
        if net.out_dim() != ck.class_count || net.in_dim() != ck.stft.bins() {
            return Err(Error::invalid("downstream checkpoint dimensions are inconsistent"));
        }
        Ok(Self {
            net,
            stft: ck.stft,
            descriptor: ck.descriptor,
            class_count: ck.class_count,
            scope: ck.scope,
            encoder: ck.encoder.as_ref().map(MatrixRecord::to_array).transpose()?,
            clean_accuracy: ck.clean_accuracy,
        })
    }
}

fn argmax(v: impl Iterator<Item = f64>) -> usize {
    v.enumerate().fold((0, f64::NEG_INFINITY), |best, (i, x)| if x > best.1 { (i, x) } else { best }).0
}

fn labels_for(task: Task, item: &CorpusItem, stft: StftConfig, encoder: Option<&Array2<f64>>) -> Result<Vec<usize>> {
    let frames = stft.frame_count(item.clean.len())?;
    match task {
        Task::Se => Err(Error::invalid("the SE task has no class labels")),
        Task::Sv => Ok(vec![item.speaker; frames]),
        Task::Asr => Ok((0..frames).map(|t| item.phone_at(t * stft.hop + stft.frame_length / 2)).collect()),
        Task::Representation => {
            let enc = encoder.ok_or_else(|| Error::invalid("representation model has no encoder"))?;
            let feats = featurize(&item.clean, stft)?;
            let logits = feats.dot(&enc.t());
            Ok(logits.rows().into_iter().map(|r| argmax(r.iter().copied())).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Array2<f64>> for MatrixRecord {
    fn from(a: &Array2<f64>) -> Self {
        Self { rows: a.nrows(), cols: a.ncols(), data: a.iter().copied().collect() }
    }
}

impl MatrixRecord {
    pub fn to_array(&self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone()).map_err(|e| Error::invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamCheckpoint {
    pub format_version: u32,
    pub descriptor: TaskDescriptor,
    pub class_count: usize,
    pub scope: LabelScope,
    pub stft: StftConfig,
    pub network: NetworkCheckpoint,
    #[serde(default)]
    pub encoder: Option<MatrixRecord>,
    #[serde(default)]
    pub clean_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub adam: AdamConfig,
    /// Noise-injection SNRs, drawn uniformly per item per epoch.
    pub injection_snr_db: Vec<f64>,
    /// Class count of the Representation pseudo-labels.
    pub representation_classes: usize,
    pub stft: StftConfig,
    pub seed: u64,
}

impl Default for DownstreamTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            hidden: vec![64, 64],
            adam: AdamConfig::with_lr(3e-3, 0.95),
            injection_snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            representation_classes: 8,
            stft: StftConfig::default(),
            seed: 0,
        }
    }
}

/// Trains a frame classifier for `task`. With noise injection the inputs are
/// the clean utterances remixed with their noise at a fresh SNR every epoch;
/// otherwise the clean utterances themselves. Labels always come from the
/// clean item.
pub fn train_downstream(task: TaskDescriptor, corpus: &Batch, cfg: &DownstreamTrainConfig) -> Result<DownstreamModel> {
    let (class_count, scope, encoder) = match task.task() {
        Task::Se => return Err(Error::invalid("the SE task uses the identity downstream; nothing to train")),
        Task::Sv => (corpus.items().iter().map(|i| i.speaker).max().unwrap_or(0) + 1, LabelScope::Frame, None),
        Task::Asr => (
            corpus.items().iter().flat_map(|i| i.phones.iter().copied()).max().unwrap_or(0) + 1,
            LabelScope::Frame,
            None,
        ),
        Task::Representation => {
            let mut r = seeded(derive_seed(cfg.seed, 0xE5C0));
            let enc = Array2::from_shape_fn((cfg.representation_classes, cfg.stft.bins()), |_| r.sample(StandardNormal));
            (cfg.representation_classes, LabelScope::Frame, Some(enc))
        }
    };
    if class_count < 2 {
        return Err(Error::invalid(format!("task {task} needs at least 2 classes, corpus provides {class_count}")));
    }
    if task.noise_injection() && cfg.injection_snr_db.is_empty() {
        return Err(Error::invalid("noise injection requested with an empty SNR grid"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut dims = vec![cfg.stft.bins()];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(class_count);
    let mut acts = vec![Activation::Relu; cfg.hidden.len()];
    acts.push(Activation::Softmax);
    let net = DenseNetwork::new(&dims, &acts, derive_seed(cfg.seed, 1))?;
    let mut model = DownstreamModel {
        net,
        stft: cfg.stft,
        descriptor: task,
        class_count,
        scope,
        encoder,
        clean_accuracy: None,
    };

    let labels = corpus.items().iter().map(|it| model.frame_labels(it)).collect::<Result<Vec<_>>>()?;
    if labels.iter().flatten().any(|&y| y >= class_count) {
        return Err(Error::invalid("label outside the model's class range"));
    }
    let clean_feats = corpus
        .items()
        .iter()
        .map(|it| featurize(&it.clean, cfg.stft))
        .collect::<Result<Vec<_>>>()?;

    let mut state = AdamState::new(model.net.parameter_count(), cfg.adam);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seeded(derive_seed(cfg.seed, 1000 + epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let feats = chunk
                .iter()
                .map(|&i| {
                    if task.noise_injection() {
                        let snr = cfg.injection_snr_db[rng.gen_range(0..cfg.injection_snr_db.len())];
                        featurize(&corpus.items()[i].remixed(snr)?.mix, cfg.stft)
                    } else {
                        Ok(clean_feats[i].clone())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
            let x = concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))?;
            let cache = model.net.forward_batch(x.view())?;
            let probs = cache.output();
            // Cross-entropy, averaged over frames: gradient −1/(p_y · frames) at the label.
            let frames = probs.nrows() as f64;
            let mut grad = Array2::zeros(probs.dim());
            let mut row = 0;
            for &i in chunk {
                for &y in &labels[i] {
                    grad[[row, y]] = -1.0 / (probs[[row, y]].max(1e-300) * frames);
                    row += 1;
                }
            }
            let g = model.net.backward_batch(&cache, grad.view())?;
            let mut params = model.net.params();
            adam_step(&mut params, &g.params, &mut state)?;
            model.net.set_params(&params)?;
        }
        state.next_epoch();
    }
    model.clean_accuracy = Some(evaluate(&model, corpus, &corpus.cleans())?.accuracy);
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_kl_to_clean: f64,
}

/// Accuracy of the model on `inputs` (one per corpus item, e.g. the clean
/// signals, the mixes, or gated enhancer outputs) and the mean KL divergence
/// between its outputs on `inputs` and on the clean signals.
pub fn evaluate(m: &DownstreamModel, corpus: &Batch, inputs: &[Waveform]) -> Result<Evaluation> {
    if inputs.len() != corpus.len() {
        return Err(Error::invalid(format!("{} inputs for {} corpus items", inputs.len(), corpus.len())));
    }
    let loss = LossConfig::default();
    let (mut hits, mut total, mut kl) = (0usize, 0usize, 0.0);
    for (item, input) in corpus.items().iter().zip(inputs) {
        let vx = m.infer(input)?;
        let (h, t) = m.item_hits(item, &vx)?;
        hits += h;
        total += t;
        kl += if input == &item.clean { 0.0 } else { kl_divergence(&vx, &m.infer(&item.clean)?, &loss)?.value };
    }
    Ok(Evaluation { accuracy: hits as f64 / total as f64, mean_kl_to_clean: kl / corpus.len() as f64 })
}

/// Per-item accuracy hits for callers that compute their own inputs.
pub fn accuracy_of(m: &DownstreamModel, corpus: &Batch, dists: &[FeatureDistribution]) -> Result<f64> {
    let (mut hits, mut total) = (0, 0);
    for (item, d) in corpus.items().iter().zip(dists) {
        let (h, t) = m.item_hits(item, d)?;
        hits += h;
        total += t;
    }
    Ok(hits as f64 / total as f64)
}

/// A gate's consumer: either a learned classifier or, for the SE task, the
/// identity (scored by SI-SDR against the clean reference).
#[derive(Debug, Clone, PartialEq)]
pub enum Downstream {
    Identity,
    Model(DownstreamModel),
}

impl Downstream {
    pub fn model(&self) -> Option<&DownstreamModel> {
        match self {
            Downstream::Identity => None,
            Downstream::Model(m) => Some(m),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{make_corpus, CorpusConfig};

    fn corpus(items: usize, seed: u64) -> Batch {
        make_corpus(&CorpusConfig { items, duration_s: 0.5, seed, ..Default::default() }).unwrap()
    }

    #[test]
    fn featurize_laws() {
        let cfg = StftConfig::default();
        let z = Waveform::zeros(1000, 8000).unwrap();
        let f = featurize(&z, cfg).unwrap();
        assert_eq!(f.nrows(), 1 + (1000 - 256) / 128);
        assert!(f.iter().all(|&v| (v + 8.0).abs() < 1e-12));

        let c = corpus(1, 2);
        let x = &c.items()[0].mix;
        let a = featurize(x, cfg).unwrap();
        let b = featurize(&x.scaled(10.0).unwrap(), cfg).unwrap();
        // |10·X| + 1e-8 vs 10·(|X| + 1e-8): equal up to the offset.
        let max_dev = (&b - &a).iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
        assert!(max_dev < 1e-6, "{max_dev}");
    }

    #[test]
    fn descriptor_bounds_and_json() {
        assert!(TaskDescriptor::new(4, false).is_err());
        let d = TaskDescriptor::of(Task::Sv, true);
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<TaskDescriptor>(&json).unwrap(), d);
        assert!(serde_json::from_str::<TaskDescriptor>(r#"{"task_id": 9, "noise_injection": true}"#).is_err());
        assert_eq!(Task::from_name("asr").unwrap(), Task::Asr);
    }

    #[test]
    fn se_has_no_learned_model() {
        let c = corpus(4, 0);
        let r = train_downstream(TaskDescriptor::of(Task::Se, false), &c, &DownstreamTrainConfig::default());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let c = corpus(40, 1);
        let cfg = DownstreamTrainConfig { epochs: 0, ..Default::default() };
        let m = train_downstream(TaskDescriptor::of(Task::Sv, false), &c, &cfg).unwrap();
        let acc = m.clean_accuracy().unwrap();
        assert!((acc - 0.25).abs() <= 0.15, "{acc}");
    }

    #[test]
    fn inference_is_a_distribution_and_deterministic() {
        let c = corpus(8, 3);
        let cfg = DownstreamTrainConfig { epochs: 2, ..Default::default() };
        let m = train_downstream(TaskDescriptor::of(Task::Asr, false), &c, &cfg).unwrap();
        let a = m.infer(&c.items()[0].mix).unwrap();
        for row in a.probs().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        assert_eq!(a, m.infer(&c.items()[0].mix).unwrap());
        let e = evaluate(&m, &c, &c.cleans()).unwrap();
        assert_eq!(e.mean_kl_to_clean, 0.0);
    }

    #[test]
    fn waveform_gradient_matches_finite_differences() {
        let c = corpus(4, 5);
        let cfg = DownstreamTrainConfig {
            epochs: 1,
            stft: StftConfig { frame_length: 32, hop: 16 },
            hidden: vec![8],
            ..Default::default()
        };
        let m = train_downstream(TaskDescriptor::of(Task::Sv, false), &c, &cfg).unwrap();
        let x: Vec<f64> = c.items()[0].mix.samples()[..96].to_vec();
        let w = Waveform::new(x.clone(), 8000).unwrap();
        let target = m.infer(&c.items()[0].clean.clone().subset_for_test(96)).unwrap();
        let trace = m.infer_traced(&w).unwrap();
        let lc = LossConfig::default();
        let kl = kl_divergence(trace.distribution(), &target, &lc).unwrap();
        let analytic = m.waveform_gradient(&trace, &kl.gradient).unwrap();
        let f = |v: &[f64]| {
            let d = m.infer(&Waveform::new(v.to_vec(), 8000).unwrap()).unwrap();
            kl_divergence(&d, &target, &lc).unwrap().value
        };
        let r = crate::nn::gradient_check(f, &x, &analytic, 1e-4);
        assert!(r.pass, "{r:?}");
    }

    trait Prefix {
        fn subset_for_test(self, n: usize) -> Waveform;
    }

    impl Prefix for Waveform {
        fn subset_for_test(self, n: usize) -> Waveform {
            Waveform::new(self.samples()[..n].to_vec(), self.sample_rate()).unwrap()
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = corpus(8, 6);
        let cfg = DownstreamTrainConfig { epochs: 1, ..Default::default() };
        let m = train_downstream(TaskDescriptor::of(Task::Representation, true), &c, &cfg).unwrap();
        let json = serde_json::to_string(&m.to_checkpoint()).unwrap();
        let back = DownstreamModel::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
