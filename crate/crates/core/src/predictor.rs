//! Gate-weight prediction from downstream metadata, and the inference
//! pipeline that applies the predicted gate.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView1};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::downstream::{Downstream, MatrixRecord, Task, TaskDescriptor, TASK_VOCABULARY};
use crate::enhancer::SpeechEnhancer;
use crate::error::{Error, Result};
use crate::gate::{mix_gate, optimize_gate, GateOptConfig, GateProblem, GateWeight};
use crate::losses::FeatureDistribution;
use crate::nn::{adam_step, Activation, AdamConfig, AdamState, DenseNetwork, NetworkCheckpoint, CHECKPOINT_FORMAT_VERSION};
use crate::rng::{derive_seed, seeded};
use crate::signal::{Batch, Waveform};

/// Row-per-task embedding matrix `M`; `E_task = M[id]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    matrix: Array2<f64>,
}

impl EmbeddingTable {
    pub fn from_matrix(matrix: Array2<f64>) -> Result<Self> {
        if matrix.is_empty() {
            return Err(Error::invalid("embedding matrix is empty"));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding matrix has non-finite entries"));
        }
        Ok(Self { matrix })
    }

    /// Entries drawn from N(0, 1).
    pub fn random(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        Self::from_matrix(Array2::from_shape_fn((capacity, dim), |_| normal.sample(&mut rng)))
    }

    pub fn zeros(capacity: usize, dim: usize) -> Result<Self> {
        Self::from_matrix(Array2::zeros((capacity, dim)))
    }

    pub fn capacity(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn lookup(&self, id: usize) -> Result<ArrayView1<'_, f64>> {
        if id >= self.capacity() {
            return Err(Error::invalid(format!("task id {id} outside embedding capacity {}", self.capacity())));
        }
        Ok(self.matrix.row(id))
    }
}

/// MLP from `[E_task ‖ B_NI]` to a sigmoid scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingNet {
    net: DenseNetwork,
}

impl MappingNet {
    /// Glorot-initialized hidden layers and a zero output layer, so the
    /// untrained prediction is exactly 0.5.
    pub fn new(embed_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let (dims, acts) = Self::shape(embed_dim, hidden);
        let mut net = DenseNetwork::new(&dims, &acts, seed)?;
        let last = net.layers().len() - 1;
        let layer = net.layer_mut(last).expect("output layer");
        layer.weights.fill(0.0);
        layer.biases.fill(0.0);
        Ok(Self { net })
    }

    pub fn zeros(embed_dim: usize, hidden: &[usize]) -> Result<Self> {
        let (dims, acts) = Self::shape(embed_dim, hidden);
        Ok(Self { net: DenseNetwork::zeros(&dims, &acts)? })
    }

    pub fn from_network(net: DenseNetwork) -> Result<Self> {
        let last = net.layers().last().expect("non-empty network");
        if net.out_dim() != 1 || last.activation != Activation::Sigmoid {
            return Err(Error::invalid("mapping network must end in a single sigmoid unit"));
        }
        if net.in_dim() < 2 {
            return Err(Error::invalid("mapping network needs an embedding and the noise-injection flag"));
        }
        Ok(Self { net })
    }

    fn shape(embed_dim: usize, hidden: &[usize]) -> (Vec<usize>, Vec<Activation>) {
        let mut dims = vec![embed_dim + 1];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mut acts = vec![Activation::Relu; hidden.len()];
        acts.push(Activation::Sigmoid);
        (dims, acts)
    }

    pub fn network(&self) -> &DenseNetwork {
        &self.net
    }

    pub fn embed_dim(&self) -> usize {
        self.net.in_dim() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightPredictor {
    pub embedding: EmbeddingTable,
    pub mapping: MappingNet,
}

impl WeightPredictor {
    pub fn new(embedding: EmbeddingTable, mapping: MappingNet) -> Result<Self> {
        if embedding.dim() != mapping.embed_dim() {
            return Err(Error::invalid(format!(
                "embedding dim {} does not match mapping input {}",
                embedding.dim(),
                mapping.embed_dim()
            )));
        }
        Ok(Self { embedding, mapping })
    }

    pub fn init(cfg: &PredictorConfig) -> Result<Self> {
        cfg.validate()?;
        Self::new(
            EmbeddingTable::random(cfg.task_capacity, cfg.embed_dim, derive_seed(cfg.seed, 1))?,
            MappingNet::new(cfg.embed_dim, &cfg.hidden, derive_seed(cfg.seed, 2))?,
        )
    }

    fn input_row(&self, task: TaskDescriptor) -> Result<Vec<f64>> {
        let mut row = self.embedding.lookup(task.task_id())?.to_vec();
        row.push(if task.noise_injection() { 1.0 } else { 0.0 });
        Ok(row)
    }

    /// `ŵ = f_map(M[id] ‖ B_NI)`.
    pub fn predict(&self, task: TaskDescriptor) -> Result<GateWeight> {
        let (out, _) = self.mapping.net.forward(&self.input_row(task)?)?;
        Ok(GateWeight::clamped(out[0]))
    }

    pub fn to_checkpoint(&self, final_mse: Option<f64>) -> PredictorCheckpoint {
        PredictorCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            embedding: MatrixRecord::from(&self.embedding.matrix),
            mapping: self.mapping.net.to_checkpoint(None),
            final_mse,
        }
    }

    pub fn from_checkpoint(ck: &PredictorCheckpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::invalid(format!("unsupported predictor checkpoint version {}", ck.format_version)));
        }
        Self::new(
            EmbeddingTable::from_matrix(ck.embedding.to_array()?)?,
            MappingNet::from_network(DenseNetwork::from_checkpoint(&ck.mapping)?)?,
        )
    }
}

/// Standalone prediction call.
pub fn predict_w(table: &EmbeddingTable, map: &MappingNet, task: TaskDescriptor) -> Result<GateWeight> {
    WeightPredictor::new(table.clone(), map.clone())?.predict(task)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorCheckpoint {
    pub format_version: u32,
    pub embedding: MatrixRecord,
    pub mapping: NetworkCheckpoint,
    #[serde(default)]
    pub final_mse: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    PaperTable,
    Optimized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRow", into = "RawRow")]
pub struct TargetRow {
    pub descriptor: TaskDescriptor,
    pub w_star: GateWeight,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRow {
    task: String,
    task_id: usize,
    noise_injection: bool,
    w: f64,
    provenance: Provenance,
}

impl TryFrom<RawRow> for TargetRow {
    type Error = Error;

    fn try_from(r: RawRow) -> Result<Self> {
        let descriptor = TaskDescriptor::new(r.task_id, r.noise_injection)?;
        if Task::from_name(&r.task)? != descriptor.task() {
            return Err(Error::invalid(format!("task name '{}' does not match task_id {}", r.task, r.task_id)));
        }
        Ok(Self { descriptor, w_star: GateWeight::new(r.w)?, provenance: r.provenance })
    }
}

impl From<TargetRow> for RawRow {
    fn from(r: TargetRow) -> Self {
        RawRow {
            task: r.descriptor.task().name().to_string(),
            task_id: r.descriptor.task_id(),
            noise_injection: r.descriptor.noise_injection(),
            w: r.w_star.value(),
            provenance: r.provenance,
        }
    }
}

/// Gate targets keyed by unique descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TargetRow>", into = "Vec<TargetRow>")]
pub struct GateTargetTable {
    rows: Vec<TargetRow>,
}

const REFERENCE_FIXTURE: &str = include_str!("../fixtures/gate_targets_reference.json");

impl GateTargetTable {
    /// Repeated descriptors with equal targets collapse to one row; repeated
    /// descriptors with different targets are rejected.
    pub fn from_rows(rows: Vec<TargetRow>) -> Result<Self> {
        let mut seen: HashMap<TaskDescriptor, f64> = HashMap::new();
        let mut unique = Vec::with_capacity(rows.len());
        for r in rows {
            match seen.get(&r.descriptor) {
                Some(&w) if w == r.w_star.value() => {}
                Some(&w) => {
                    return Err(Error::invalid(format!(
                        "conflicting targets for {}: {} and {}",
                        r.descriptor,
                        w,
                        r.w_star.value()
                    )))
                }
                None => {
                    seen.insert(r.descriptor, r.w_star.value());
                    unique.push(r);
                }
            }
        }
        Ok(Self { rows: unique })
    }

    /// The published relationship table (six rows, five distinct descriptors).
    pub fn reference() -> Self {
        serde_json::from_str(REFERENCE_FIXTURE).expect("bundled fixture is valid")
    }

    pub fn reference_json() -> &'static str {
        REFERENCE_FIXTURE
    }

    pub fn rows(&self) -> &[TargetRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, d: TaskDescriptor) -> Option<GateWeight> {
        self.rows.iter().find(|r| r.descriptor == d).map(|r| r.w_star)
    }
}

impl TryFrom<Vec<TargetRow>> for GateTargetTable {
    type Error = Error;

    fn try_from(rows: Vec<TargetRow>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<GateTargetTable> for Vec<TargetRow> {
    fn from(t: GateTargetTable) -> Self {
        t.rows
    }
}

/// Runs one gate optimization per descriptor. SE descriptors use the
/// identity downstream; every other descriptor needs a model in `models`
/// with that exact descriptor.
pub fn build_target_table(
    descriptors: &[TaskDescriptor],
    enhancer: &dyn SpeechEnhancer,
    models: &[Downstream],
    corpus: &Batch,
    cfg: &GateOptConfig,
) -> Result<GateTargetTable> {
    let problem = GateProblem::new(enhancer, corpus)?;
    let identity = Downstream::Identity;
    let mut rows = Vec::with_capacity(descriptors.len());
    for &d in descriptors {
        let downstream = if d.task() == Task::Se {
            &identity
        } else {
            models
                .iter()
                .find(|m| m.model().is_some_and(|m| m.descriptor() == d))
                .ok_or_else(|| Error::invalid(format!("no downstream model for {d}")))?
        };
        let opt = optimize_gate(&problem, downstream, cfg)?;
        rows.push(TargetRow { descriptor: d, w_star: opt.w_star, provenance: Provenance::Optimized });
    }
    GateTargetTable::from_rows(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    /// Rows of `M`.
    pub task_capacity: usize,
    /// Columns of `M`.
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            task_capacity: TASK_VOCABULARY,
            embed_dim: 10,
            hidden: vec![256, 256, 256],
            epochs: 5000,
            adam: AdamConfig::with_lr(1e-3, 1.0),
            seed: 0,
        }
    }
}

impl PredictorConfig {
    /// 10 task slots with 4-dimensional embeddings.
    pub fn transposed_embedding() -> Self {
        Self { task_capacity: 10, embed_dim: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_capacity < TASK_VOCABULARY {
            return Err(Error::invalid(format!("task_capacity must be at least {TASK_VOCABULARY}")));
        }
        if self.embed_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("embedding and hidden widths must be positive"));
        }
        if !(self.adam.lr0 > 0.0 && self.adam.lr0.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPredictor {
    pub predictor: WeightPredictor,
    pub final_mse: f64,
    /// MSE before each epoch's update.
    pub history: Vec<f64>,
}

/// Full-batch joint training of `M` and the mapping net on squared error.
pub fn train_predictor(table: &GateTargetTable, cfg: &PredictorConfig) -> Result<TrainedPredictor> {
    if table.is_empty() {
        return Err(Error::invalid("target table is empty"));
    }
    let mut p = WeightPredictor::init(cfg)?;
    let dim = cfg.embed_dim;
    let n = table.len();
    let targets: Vec<f64> = table.rows().iter().map(|r| r.w_star.value()).collect();
    let ids: Vec<usize> = table.rows().iter().map(|r| r.descriptor.task_id()).collect();
    for &id in &ids {
        p.embedding.lookup(id)?;
    }
    let flags: Vec<f64> = table.rows().iter().map(|r| f64::from(u8::from(r.descriptor.noise_injection()))).collect();

    let net_params = p.mapping.net.parameter_count();
    let mut params: Vec<f64> = p.mapping.net.params();
    params.extend(p.embedding.matrix.iter());
    let mut state = AdamState::new(params.len(), cfg.adam);
    let mut history = Vec::with_capacity(cfg.epochs);

    let batch_input = |p: &WeightPredictor| {
        let mut x = Array2::zeros((n, dim + 1));
        for (k, &id) in ids.iter().enumerate() {
            x.slice_mut(s![k, ..dim]).assign(&p.embedding.matrix.row(id));
            x[[k, dim]] = flags[k];
        }
        x
    };
    let mse_of = |out: &Array2<f64>| out.column(0).iter().zip(&targets).map(|(y, t)| (y - t).powi(2)).sum::<f64>() / n as f64;

    for epoch in 0..cfg.epochs {
        let x = batch_input(&p);
        let cache = p.mapping.net.forward_batch(x.view())?;
        let out = cache.output();
        let loss = mse_of(out);
        if !loss.is_finite() {
            return Err(Error::Numeric {
                message: format!("non-finite predictor loss at epoch {epoch}"),
                trace: history.iter().copied().enumerate().collect(),
            });
        }
        history.push(loss);
        let grad_out = Array2::from_shape_fn((n, 1), |(k, _)| 2.0 * (out[[k, 0]] - targets[k]) / n as f64);
        let g = p.mapping.net.backward_batch(&cache, grad_out.view())?;
        let mut grads = g.params;
        let mut emb_grad = Array2::<f64>::zeros(p.embedding.matrix.raw_dim());
        for (k, &id) in ids.iter().enumerate() {
            let row = g.input.slice(s![k, ..dim]);
            let mut target = emb_grad.row_mut(id);
            target += &row;
        }
        grads.extend(emb_grad.iter());
        adam_step(&mut params, &grads, &mut state)?;
        p.mapping.net.set_params(&params[..net_params])?;
        p.embedding.matrix = Array2::from_shape_vec(p.embedding.matrix.raw_dim(), params[net_params..].to_vec())
            .map_err(|e| Error::invalid(e.to_string()))?;
        state.next_epoch();
    }
    let final_mse = mse_of(&p.mapping.net.predict_batch(batch_input(&p).view())?);
    Ok(TrainedPredictor { predictor: p, final_mse, history })
}

/// Where the inference gate comes from.
#[derive(Debug, Clone, Copy)]
pub enum GateSource<'a> {
    Predicted(&'a WeightPredictor),
    Fixed(GateWeight),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    pub w_hat: GateWeight,
    pub enhanced: Waveform,
    pub mixed: Waveform,
    /// Downstream output on the gated signal; absent for the identity.
    pub output: Option<FeatureDistribution>,
}

/// The gate is resolved first, then `x` is enhanced, gated and passed to
/// the downstream model.
pub fn run_inference(
    x: &Waveform,
    task: TaskDescriptor,
    enhancer: &dyn SpeechEnhancer,
    downstream: &Downstream,
    gate: GateSource<'_>,
) -> Result<InferenceOutput> {
    if let Some(m) = downstream.model() {
        if m.descriptor() != task {
            return Err(Error::invalid(format!("downstream model is {} but task is {task}", m.descriptor())));
        }
    }
    let w_hat = match gate {
        GateSource::Predicted(p) => p.predict(task)?,
        GateSource::Fixed(w) => w,
    };
    let enhanced = enhancer.enhance(x)?;
    let mixed = mix_gate(&enhanced, x, w_hat)?;
    let output = downstream.model().map(|m| m.infer(&mixed)).transpose()?;
    Ok(InferenceOutput { w_hat, enhanced, mixed, output })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(epochs: usize) -> PredictorConfig {
        PredictorConfig { hidden: vec![32, 32], epochs, ..Default::default() }
    }

    #[test]
    fn zero_init_predicts_half() {
        let p = WeightPredictor::new(EmbeddingTable::zeros(4, 10).unwrap(), MappingNet::zeros(10, &[256, 256, 256]).unwrap())
            .unwrap();
        for t in Task::ALL {
            assert_eq!(p.predict(TaskDescriptor::of(t, true)).unwrap().value(), 0.5);
        }
        let init = WeightPredictor::init(&PredictorConfig::default()).unwrap();
        assert_eq!(init.predict(TaskDescriptor::of(Task::Sv, false)).unwrap().value(), 0.5);
    }

    #[test]
    fn zero_epochs_keeps_half() {
        let t = train_predictor(&GateTargetTable::reference(), &small(0)).unwrap();
        for r in GateTargetTable::reference().rows() {
            assert_eq!(t.predictor.predict(r.descriptor).unwrap().value(), 0.5);
        }
    }

    #[test]
    fn out_of_range_task_id() {
        let e = EmbeddingTable::zeros(2, 10).unwrap();
        let m = MappingNet::zeros(10, &[4]).unwrap();
        assert!(predict_w(&e, &m, TaskDescriptor::of(Task::Asr, false)).is_err());
        assert!(PredictorConfig { task_capacity: 2, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn reference_fixture_dedups_to_five_rows() {
        let raw: Vec<serde_json::Value> = serde_json::from_str(GateTargetTable::reference_json()).unwrap();
        assert_eq!(raw.len(), 6);
        let t = GateTargetTable::reference();
        assert_eq!(t.len(), 5);
        assert_eq!(t.get(TaskDescriptor::of(Task::Sv, true)).unwrap().value(), 0.56);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<GateTargetTable>(&json).unwrap(), t);
    }

    #[test]
    fn conflicting_and_malformed_rows_rejected() {
        let bad = r#"[{"task":"SV","task_id":1,"noise_injection":true,"w":0.5,"provenance":"optimized"},
                      {"task":"SV","task_id":1,"noise_injection":true,"w":0.6,"provenance":"optimized"}]"#;
        assert!(serde_json::from_str::<GateTargetTable>(bad).is_err());
        let mismatch = r#"[{"task":"ASR","task_id":1,"noise_injection":true,"w":0.5,"provenance":"optimized"}]"#;
        assert!(serde_json::from_str::<GateTargetTable>(mismatch).is_err());
        let range = r#"[{"task":"SV","task_id":1,"noise_injection":true,"w":1.5,"provenance":"optimized"}]"#;
        assert!(serde_json::from_str::<GateTargetTable>(range).is_err());
    }

    #[test]
    fn single_row_memorized() {
        let table = GateTargetTable::from_rows(vec![TargetRow {
            descriptor: TaskDescriptor::of(Task::Asr, true),
            w_star: GateWeight::new(0.9).unwrap(),
            provenance: Provenance::Optimized,
        }])
        .unwrap();
        let t = train_predictor(&table, &small(500)).unwrap();
        let w = t.predictor.predict(TaskDescriptor::of(Task::Asr, true)).unwrap().value();
        assert!((w - 0.9).abs() < 0.01, "{w}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let t = train_predictor(&GateTargetTable::reference(), &small(50)).unwrap();
        let ck = t.predictor.to_checkpoint(Some(t.final_mse));
        let json = serde_json::to_string(&ck).unwrap();
        let back = WeightPredictor::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, t.predictor);
    }

    #[test]
    fn training_is_deterministic() {
        let a = train_predictor(&GateTargetTable::reference(), &small(30)).unwrap();
        let b = train_predictor(&GateTargetTable::reference(), &small(30)).unwrap();
        assert_eq!(a.predictor, b.predictor);
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let table = GateTargetTable::reference();
        let cfg = small(0);
        let p = WeightPredictor::init(&PredictorConfig { hidden: vec![8], ..cfg }).unwrap();
        let p = WeightPredictor::new(p.embedding, MappingNet::from_network(DenseNetwork::new(&[11, 8, 1], &[Activation::Relu, Activation::Sigmoid], 3).unwrap()).unwrap()).unwrap();
        let loss = |m: &Array2<f64>| {
            let q = WeightPredictor::new(EmbeddingTable::from_matrix(m.clone()).unwrap(), p.mapping.clone()).unwrap();
            table.rows().iter().map(|r| (q.predict(r.descriptor).unwrap().value() - r.w_star.value()).powi(2)).sum::<f64>()
                / table.len() as f64
        };
        let m0 = p.embedding.matrix().clone();
        let x: Vec<f64> = m0.iter().copied().collect();
        let f = |v: &[f64]| loss(&Array2::from_shape_vec(m0.raw_dim(), v.to_vec()).unwrap());
        let numeric = crate::nn::numeric_gradient(f, &x, crate::nn::DEFAULT_STEP);
        // Analytic gradient via one training step's backward pass.
        let n = table.len();
        let mut analytic = Array2::<f64>::zeros(m0.raw_dim());
        for r in table.rows() {
            let row = p.input_row(r.descriptor).unwrap();
            let (out, cache) = p.mapping.network().forward(&row).unwrap();
            let g = p.mapping.network().backward(&cache, &[2.0 * (out[0] - r.w_star.value()) / n as f64]).unwrap();
            let mut target = analytic.row_mut(r.descriptor.task_id());
            target += &g.input.slice(s![0, ..10]);
        }
        for (a, b) in analytic.iter().zip(&numeric) {
            assert!(crate::nn::relative_error(*a, *b) < 1e-4, "{a} vs {b}");
        }
    }
}
