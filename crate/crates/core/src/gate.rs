//! Convex gating of enhanced and noisy speech, and optimization of the gate
//! target against a frozen downstream model.

use std::io::Write;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::downstream::{accuracy_of, Downstream, DownstreamModel};
use crate::enhancer::stft::LOG_MAG_EPS;
use crate::enhancer::SpeechEnhancer;
use crate::error::{Error, Result};
use crate::losses::{kl_divergence, si_sdr_loss, FeatureDistribution, LossConfig};
use crate::nn::{adam_step, sigmoid, AdamConfig, AdamState};
use crate::signal::{output_to_input_ratio, Batch, OirMeasurement, Waveform};

/// Scalar in `[0, 1]`; 0 is full enhancement, 1 is passthrough.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct GateWeight(f64);

impl GateWeight {
    pub const ENHANCED: GateWeight = GateWeight(0.0);
    pub const PASSTHROUGH: GateWeight = GateWeight(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(format!("gate weight {value} outside [0, 1]")));
        }
        Ok(Self(value))
    }

    /// Clamps into `[0, 1]`; NaN maps to 0.
    pub fn clamped(value: f64) -> Self {
        Self(if value.is_nan() { 0.0 } else { value.clamp(0.0, 1.0) })
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for GateWeight {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        GateWeight::new(v)
    }
}

impl From<GateWeight> for f64 {
    fn from(w: GateWeight) -> f64 {
        w.0
    }
}

/// `(1 − w)·ŝ + w·x`, sample-wise. The endpoints return copies of the inputs.
pub fn mix_gate(enhanced: &Waveform, noisy: &Waveform, w: GateWeight) -> Result<Waveform> {
    enhanced.check_compatible(noisy)?;
    if w.0 == 0.0 {
        return Ok(enhanced.clone());
    }
    if w.0 == 1.0 {
        return Ok(noisy.clone());
    }
    let samples = enhanced
        .samples()
        .iter()
        .zip(noisy.samples())
        .map(|(s, x)| (1.0 - w.0) * s + w.0 * x)
        .collect();
    Waveform::new(samples, noisy.sample_rate())
}

/// A corpus together with the frozen enhancer's output on each mix.
#[derive(Debug, Clone)]
pub struct GateProblem<'a> {
    corpus: &'a Batch,
    enhanced: Vec<Waveform>,
}

impl<'a> GateProblem<'a> {
    pub fn new(enhancer: &dyn SpeechEnhancer, corpus: &'a Batch) -> Result<Self> {
        let enhanced = corpus.items().iter().map(|it| enhancer.enhance(&it.mix)).collect::<Result<Vec<_>>>()?;
        Self::with_enhanced(corpus, enhanced)
    }

    /// Uses precomputed enhancer outputs, one per corpus item.
    pub fn with_enhanced(corpus: &'a Batch, enhanced: Vec<Waveform>) -> Result<Self> {
        if enhanced.len() != corpus.len() {
            return Err(Error::invalid(format!("{} enhanced signals for {} items", enhanced.len(), corpus.len())));
        }
        for (e, it) in enhanced.iter().zip(corpus.items()) {
            e.check_compatible(&it.mix)?;
        }
        Ok(Self { corpus, enhanced })
    }

    pub fn corpus(&self) -> &Batch {
        self.corpus
    }

    pub fn enhanced(&self) -> &[Waveform] {
        &self.enhanced
    }

    pub fn mixed(&self, w: GateWeight) -> Result<Vec<Waveform>> {
        self.enhanced.iter().zip(self.corpus.items()).map(|(e, it)| mix_gate(e, &it.mix, w)).collect()
    }
}

/// The downstream loss `L_w` as a function of the gate, with the clean
/// references precomputed.
pub struct GateObjective<'p, 'a> {
    problem: &'p GateProblem<'a>,
    downstream: &'p Downstream,
    references: Vec<FeatureDistribution>,
    /// Per item, the enhanced spectrogram `Ŝ` and `X − Ŝ`: the gated
    /// spectrogram is `Ŝ + w·(X − Ŝ)` by linearity of the STFT.
    spectra: Vec<(Array2<Complex64>, Array2<Complex64>)>,
    loss: LossConfig,
}

/// One evaluation of the objective.
#[derive(Debug, Clone)]
pub struct GateEvaluation {
    pub loss: f64,
    /// dL/dw, when requested.
    pub gradient: Option<f64>,
    pub accuracy: Option<f64>,
    pub any_clamped: bool,
}

impl<'p, 'a> GateObjective<'p, 'a> {
    pub fn new(problem: &'p GateProblem<'a>, downstream: &'p Downstream) -> Result<Self> {
        let (mut references, mut spectra) = (Vec::new(), Vec::new());
        if let Some(m) = downstream.model() {
            for (it, e) in problem.corpus.items().iter().zip(&problem.enhanced) {
                references.push(m.infer(&it.clean)?);
                let se = m.spectrum(e)?;
                let d = m.spectrum(&it.mix)? - &se;
                spectra.push((se, d));
            }
        }
        Ok(Self { problem, downstream, references, spectra, loss: LossConfig::default() })
    }

    /// Mean per-item KL between the downstream outputs on the gated signal and
    /// on clean speech; for the identity downstream, the SI-SDR loss of the
    /// gated signal.
    pub fn evaluate(&self, w: GateWeight, with_gradient: bool) -> Result<GateEvaluation> {
        let items = self.problem.corpus.items();
        match self.downstream {
            Downstream::Identity => {
                let mixed = self.problem.mixed(w)?;
                let l = si_sdr_loss(&mixed, &self.problem.corpus.cleans(), &self.loss)?;
                let gradient = with_gradient.then(|| {
                    l.gradient
                        .iter()
                        .zip(&self.problem.enhanced)
                        .zip(items)
                        .map(|((g, e), it)| direction_dot(g, e, &it.mix))
                        .sum()
                });
                Ok(GateEvaluation {
                    loss: l.value,
                    gradient,
                    accuracy: None,
                    any_clamped: l.clamped.iter().any(|&c| c),
                })
            }
            Downstream::Model(m) => self.evaluate_model(m, w.value(), with_gradient),
        }
    }

    fn evaluate_model(&self, m: &DownstreamModel, w: f64, with_gradient: bool) -> Result<GateEvaluation> {
        let n = self.spectra.len() as f64;
        let mut loss = 0.0;
        let mut grad = 0.0;
        let mut dists = Vec::with_capacity(self.spectra.len());
        for ((se, d), reference) in self.spectra.iter().zip(&self.references) {
            let y = se + &d.mapv(|v| v * w);
            let (dist, cache) = m.infer_spectrum(&y)?;
            let kl = kl_divergence(&dist, reference, &self.loss)?;
            loss += kl.value / n;
            if with_gradient {
                let gf = m.feature_gradient(&cache, &kl.gradient)?;
                // d log10(|Y| + eps)/dw = Re(conj(Y)·(X − Ŝ)) / (ln 10 · |Y| · (|Y| + eps))
                let mut dw = 0.0;
                ndarray::Zip::from(&gf).and(&y).and(d).for_each(|&g, &yv, &dv| {
                    let mag = yv.norm();
                    if mag > 0.0 {
                        dw += g * (yv.conj() * dv).re / (std::f64::consts::LN_10 * mag * (mag + LOG_MAG_EPS));
                    }
                });
                grad += dw / n;
            }
            dists.push(dist);
        }
        Ok(GateEvaluation {
            loss,
            gradient: with_gradient.then_some(grad),
            accuracy: Some(accuracy_of(m, self.problem.corpus, &dists)?),
            any_clamped: false,
        })
    }
}

/// ⟨g, x − ŝ⟩ = d/dw of a loss with gradient `g` w.r.t. the gated signal.
fn direction_dot(g: &[f64], enhanced: &Waveform, noisy: &Waveform) -> f64 {
    g.iter().zip(enhanced.samples().iter().zip(noisy.samples())).map(|(g, (s, x))| g * (x - s)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateOptConfig {
    pub iterations: usize,
    /// Optimizer on `u`; `decay_gamma` applies per iteration.
    pub adam: AdamConfig,
    /// Losses within this distance count as ties, resolved toward smaller w.
    pub tie_tolerance: f64,
}

impl Default for GateOptConfig {
    fn default() -> Self {
        Self { iterations: 150, adam: AdamConfig::with_lr(0.05, 1.0), tie_tolerance: 1e-9 }
    }
}

impl GateOptConfig {
    /// The 1e-5 learning rate used for full-network fine-tuning.
    pub fn paper_faithful() -> Self {
        Self { adam: AdamConfig::paper_faithful(), ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub w: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOptimization {
    pub w_star: GateWeight,
    pub best_loss: f64,
    /// Endpoint probes (w = 0 then w = 1) followed by the gradient iterates.
    pub trace: Vec<TraceEntry>,
}

fn better(candidate: (f64, f64), best: (f64, f64), tol: f64) -> bool {
    let (w, l) = candidate;
    let (bw, bl) = best;
    l < bl - tol || ((l - bl).abs() <= tol && w < bw)
}

/// Minimizes `L_w` over `w = sigmoid(u)` by Adam from `u = 0`. The endpoints
/// `w = 0` and `w = 1` are probed first, since the sigmoid never reaches
/// them; the result is the best `w` observed, ties going to the smaller `w`.
pub fn optimize_gate(problem: &GateProblem, downstream: &Downstream, cfg: &GateOptConfig) -> Result<GateOptimization> {
    let objective = GateObjective::new(problem, downstream)?;
    let mut trace = Vec::with_capacity(cfg.iterations + 2);
    let fail = |trace: &[TraceEntry], msg: String| Error::Numeric {
        message: msg,
        trace: trace.iter().map(|e| (e.iteration, e.loss)).collect(),
    };

    let mut best = (f64::INFINITY, f64::INFINITY);
    let mut record = |trace: &mut Vec<TraceEntry>, w: f64, loss: f64| -> Result<()> {
        let iteration = trace.len();
        trace.push(TraceEntry { iteration, w, loss });
        if !loss.is_finite() {
            return Err(fail(trace, format!("non-finite gate loss at w = {w}")));
        }
        if best.1.is_infinite() || better((w, loss), best, cfg.tie_tolerance) {
            best = (w, loss);
        }
        Ok(())
    };

    for w in [0.0, 1.0] {
        let e = objective.evaluate(GateWeight(w), false)?;
        record(&mut trace, w, e.loss)?;
    }
    let mut u = [0.0];
    let mut state = AdamState::new(1, cfg.adam);
    for _ in 0..cfg.iterations {
        let w = sigmoid(u[0]);
        let e = objective.evaluate(GateWeight::clamped(w), true)?;
        record(&mut trace, w, e.loss)?;
        let dw = e.gradient.unwrap_or(0.0);
        if !dw.is_finite() {
            return Err(fail(&trace, format!("non-finite gate gradient at w = {w}")));
        }
        adam_step(&mut u, &[dw * w * (1.0 - w)], &mut state)?;
        state.next_epoch();
    }
    Ok(GateOptimization { w_star: GateWeight::clamped(best.0), best_loss: best.1, trace })
}

/// Exhaustive search over `0, step, 2·step, …, 1`; ties go to the smaller w.
pub fn grid_search_gate(problem: &GateProblem, downstream: &Downstream, step: f64) -> Result<(GateWeight, f64)> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::invalid("grid step must be in (0, 1]"));
    }
    let objective = GateObjective::new(problem, downstream)?;
    let points = (1.0 / step).round() as usize;
    let mut best = (f64::INFINITY, f64::INFINITY);
    for k in 0..=points {
        let w = (k as f64 * step).min(1.0);
        let l = objective.evaluate(GateWeight(w), false)?.loss;
        if best.1.is_infinite() || better((w, l), best, 1e-9) {
            best = (w, l);
        }
    }
    Ok((GateWeight(best.0), best.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub w: GateWeight,
    pub oir: OirMeasurement,
    pub downstream_loss: f64,
    /// Absent for the identity downstream, which has no classes.
    pub accuracy: Option<f64>,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSweepCurve {
    pub points: Vec<SweepPoint>,
}

impl GateSweepCurve {
    /// Grid point with the smallest downstream loss (ties to smaller w).
    pub fn argmin(&self) -> Option<&SweepPoint> {
        self.points.iter().fold(None, |best: Option<&SweepPoint>, p| match best {
            Some(b) if !better((p.w.0, p.downstream_loss), (b.w.0, b.downstream_loss), 1e-9) => Some(b),
            _ => Some(p),
        })
    }

    /// CSV with header `w,oir_ratio,oir_db,downstream_kl,accuracy,clamped`.
    /// A missing accuracy is an empty cell.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        wtr.write_record(["w", "oir_ratio", "oir_db", "downstream_kl", "accuracy", "clamped"]).map_err(io)?;
        for p in &self.points {
            wtr.write_record([
                p.w.0.to_string(),
                p.oir.ratio.to_string(),
                p.oir.ratio_db.to_string(),
                p.downstream_loss.to_string(),
                p.accuracy.map(|a| a.to_string()).unwrap_or_default(),
                u8::from(p.clamped).to_string(),
            ])
            .map_err(io)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Evaluates OIR, downstream loss and accuracy at each grid value.
pub fn sweep_gate(problem: &GateProblem, downstream: &Downstream, grid: &[f64]) -> Result<GateSweepCurve> {
    if grid.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    let mut ws = grid.iter().map(|&w| GateWeight::new(w)).collect::<Result<Vec<_>>>()?;
    ws.sort_by(|a, b| a.0.total_cmp(&b.0));
    ws.dedup();
    let objective = GateObjective::new(problem, downstream)?;
    let inputs = problem.corpus.mixes();
    let points = ws
        .into_iter()
        .map(|w| {
            let e = objective.evaluate(w, false)?;
            let oir = output_to_input_ratio(&problem.mixed(w)?, &inputs)?;
            Ok(SweepPoint { w, oir, downstream_loss: e.loss, accuracy: e.accuracy, clamped: e.any_clamped })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GateSweepCurve { points })
}

/// `n` evenly spaced weights from 0 to 1 inclusive.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|k| k as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{make_corpus, CorpusConfig};

    fn w(v: &[f64]) -> Waveform {
        Waveform::new(v.to_vec(), 8000).unwrap()
    }

    #[test]
    fn gate_weight_bounds() {
        assert!(GateWeight::new(1.5).is_err());
        assert!(GateWeight::new(-0.1).is_err());
        assert!(GateWeight::new(f64::NAN).is_err());
        assert_eq!(GateWeight::clamped(1.5).value(), 1.0);
        assert_eq!(GateWeight::clamped(-2.0).value(), 0.0);
        assert!(serde_json::from_str::<GateWeight>("1.2").is_err());
    }

    #[test]
    fn mix_endpoints_and_midpoint() {
        let s = w(&[1.0, 0.0]);
        let x = w(&[0.0, 2.0]);
        assert_eq!(mix_gate(&s, &x, GateWeight::ENHANCED).unwrap(), s);
        assert_eq!(mix_gate(&s, &x, GateWeight::PASSTHROUGH).unwrap(), x);
        assert_eq!(mix_gate(&s, &x, GateWeight::new(0.5).unwrap()).unwrap().samples(), &[0.5, 1.0]);
        assert!(mix_gate(&s, &w(&[1.0]), GateWeight::ENHANCED).is_err());
    }

    #[test]
    fn sweep_endpoint_oir_and_csv() {
        let c = make_corpus(&CorpusConfig { items: 3, duration_s: 0.1, ..Default::default() }).unwrap();
        let p = GateProblem::with_enhanced(&c, c.cleans()).unwrap();
        let curve = sweep_gate(&p, &Downstream::Identity, &uniform_grid(11)).unwrap();
        assert_eq!(curve.points.len(), 11);
        assert_eq!(curve.points[10].oir.ratio, 1.0);
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 12);
        assert!(text.starts_with("w,oir_ratio,oir_db,downstream_kl,accuracy,clamped"));
        assert!(!text.contains("NaN"));
        assert!(sweep_gate(&p, &Downstream::Identity, &[]).is_err());
        assert!(sweep_gate(&p, &Downstream::Identity, &[1.2]).is_err());
    }

    #[test]
    fn perfect_enhancer_prefers_full_enhancement() {
        let c = make_corpus(&CorpusConfig { items: 3, duration_s: 0.1, ..Default::default() }).unwrap();
        let p = GateProblem::with_enhanced(&c, c.cleans()).unwrap();
        let r = optimize_gate(&p, &Downstream::Identity, &GateOptConfig { iterations: 20, ..Default::default() }).unwrap();
        assert!(r.w_star.value() <= 0.02);
        assert_eq!(r.trace[0].w, 0.0);
        assert_eq!(r.trace[1].w, 1.0);
    }

    #[test]
    fn identity_enhancer_ties_to_zero() {
        let c = make_corpus(&CorpusConfig { items: 3, duration_s: 0.1, ..Default::default() }).unwrap();
        let p = GateProblem::with_enhanced(&c, c.mixes()).unwrap();
        let r = optimize_gate(&p, &Downstream::Identity, &GateOptConfig { iterations: 10, ..Default::default() }).unwrap();
        assert!(r.w_star.value() <= 0.02);
        let (g, _) = grid_search_gate(&p, &Downstream::Identity, 0.01).unwrap();
        assert_eq!(g.value(), 0.0);
    }

    #[test]
    fn model_gate_gradient_matches_finite_differences() {
        use crate::downstream::{train_downstream, DownstreamTrainConfig, Task, TaskDescriptor};
        let c = make_corpus(&CorpusConfig { items: 4, duration_s: 0.2, ..Default::default() }).unwrap();
        let m = train_downstream(
            TaskDescriptor::of(Task::Sv, false),
            &c,
            &DownstreamTrainConfig { epochs: 3, hidden: vec![16], ..Default::default() },
        )
        .unwrap();
        let ds = Downstream::Model(m);
        let enhanced: Vec<Waveform> = c.items().iter().map(|it| it.clean.scaled(0.8).unwrap()).collect();
        let p = GateProblem::with_enhanced(&c, enhanced).unwrap();
        let obj = GateObjective::new(&p, &ds).unwrap();
        for at in [0.21, 0.5, 0.83] {
            let g = obj.evaluate(GateWeight(at), true).unwrap().gradient.unwrap();
            let h = 1e-6;
            let num = (obj.evaluate(GateWeight(at + h), false).unwrap().loss
                - obj.evaluate(GateWeight(at - h), false).unwrap().loss)
                / (2.0 * h);
            assert!(crate::nn::relative_error(g, num) < 1e-4, "w={at}: {g} vs {num}");
        }
    }

    #[test]
    fn identity_gate_gradient_matches_finite_differences() {
        let c = make_corpus(&CorpusConfig { items: 2, duration_s: 0.1, ..Default::default() }).unwrap();
        let half: Vec<Waveform> = c.items().iter().map(|it| {
            let v: Vec<f64> = it.clean.samples().iter().zip(it.noise.samples()).enumerate()
                .map(|(k, (s, n))| s + 0.3 * n * (k as f64 * 0.01).cos()).collect();
            w(&v)
        }).collect();
        let p = GateProblem::with_enhanced(&c, half).unwrap();
        let obj = GateObjective::new(&p, &Downstream::Identity).unwrap();
        let at = 0.37;
        let g = obj.evaluate(GateWeight(at), true).unwrap().gradient.unwrap();
        let h = 1e-5;
        let num = (obj.evaluate(GateWeight(at + h), false).unwrap().loss
            - obj.evaluate(GateWeight(at - h), false).unwrap().loss)
            / (2.0 * h);
        assert!(crate::nn::relative_error(g, num) < 1e-4, "{g} vs {num}");
    }
}
