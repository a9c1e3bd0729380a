//! Training objectives with analytic gradients.
//!
//! Per-item dB terms are clamped to `±db_clamp`; a clamped item contributes
//! the cap to the loss and nothing to the gradient. Batch losses average
//! over items (`N` = number of items).

use std::f64::consts::LN_10;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DB: f64 = 10.0 / LN_10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_cm: f64,
    pub lambda_ct: f64,
    pub db_clamp: f64,
    pub prob_floor: f64,
    /// Use the orthogonal projection onto span{s, n} in SI-SAR instead of
    /// the two independent single-vector projections.
    pub exact_sar_projection: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_cm: 0.01, lambda_ct: 0.01, db_clamp: 60.0, prob_floor: 1e-12, exact_sar_projection: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_cm", self.lambda_cm), ("lambda_ct", self.lambda_ct)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.db_clamp > 0.0) || !(self.prob_floor > 0.0) {
            return Err(Error::invalid("db_clamp and prob_floor must be positive"));
        }
        Ok(())
    }
}

/// Loss over a batch of signal estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// One gradient vector per estimate, matching its length.
    pub gradient: Vec<Vec<f64>>,
    /// Items whose dB term hit the clamp (or was degenerate).
    pub clamped: Vec<bool>,
}

/// Frame-wise probability vectors, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDistribution {
    probs: Array2<f64>,
}

impl FeatureDistribution {
    /// Rows must be non-negative and sum to 1 within 1e-6.
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(Error::invalid("distribution batch is empty"));
        }
        for (i, row) in probs.rows().into_iter().enumerate() {
            let sum = row.sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::invalid(format!("row {i} is not a probability vector (sum {sum})")));
            }
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn frames(&self) -> usize {
        self.probs.nrows()
    }

    pub fn classes(&self) -> usize {
        self.probs.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.probs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionLoss {
    pub value: f64,
    /// Gradient w.r.t. the first (estimated) distribution.
    pub gradient: Array2<f64>,
}

/// Combined enhancement + downstream-consistency loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CmLossValue {
    pub value: f64,
    pub estimate_gradient: Vec<Vec<f64>>,
    pub distribution_gradient: Array2<f64>,
    pub clamped: Vec<bool>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

struct ItemTerm {
    db: f64,
    /// d(db)/d(estimate)
    grad: Vec<f64>,
    clamped: bool,
}

impl ItemTerm {
    fn capped(db: f64, len: usize) -> Self {
        Self { db, grad: vec![0.0; len], clamped: true }
    }
}

/// `10·log10(num/den)` with the clamp policy; `grad_fn` is only evaluated
/// for unclamped items.
fn clamped_ratio(num: f64, den: f64, clamp: f64, len: usize, grad_fn: impl FnOnce() -> Vec<f64>) -> ItemTerm {
    if num <= 0.0 {
        return ItemTerm::capped(-clamp, len);
    }
    if den <= 0.0 {
        return ItemTerm::capped(clamp, len);
    }
    let db = 10.0 * (num / den).log10();
    if db >= clamp {
        ItemTerm::capped(clamp, len)
    } else if db <= -clamp {
        ItemTerm::capped(-clamp, len)
    } else {
        ItemTerm { db, grad: grad_fn(), clamped: false }
    }
}

fn check_pair(i: usize, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("item {i}: length {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid(format!("item {i} is empty")));
    }
    Ok(())
}

fn si_sdr_item(est: &[f64], tgt: &[f64], clamp: f64) -> ItemTerm {
    let ss = norm_sq(tgt);
    let a = dot(est, tgt);
    let alpha = a / ss;
    let err: Vec<f64> = est.iter().zip(tgt).map(|(e, t)| e - alpha * t).collect();
    let ee = norm_sq(&err);
    let st = alpha * alpha * ss;
    clamped_ratio(st, ee, clamp, est.len(), || {
        // d/dŝ [ln‖s_t‖² − ln‖e‖²] = 2s/⟨ŝ,s⟩ − 2e/‖e‖²
        tgt.iter().zip(&err).map(|(t, e)| DB * (2.0 * t / a - 2.0 * e / ee)).collect()
    })
}

fn sar_projection(est: &[f64], s: &[f64], n: &[f64], exact: bool) -> (f64, f64) {
    let ss = norm_sq(s);
    let nn = norm_sq(n);
    let es = dot(est, s);
    let en = dot(est, n);
    if exact {
        let sn = dot(s, n);
        let det = ss * nn - sn * sn;
        if det > 1e-12 * ss * nn {
            return ((es * nn - en * sn) / det, (en * ss - es * sn) / det);
        }
    }
    (es / ss, en / nn)
}

fn si_sar_item(est: &[f64], s: &[f64], n: &[f64], clamp: f64, exact: bool) -> ItemTerm {
    let (a, b) = sar_projection(est, s, n, exact);
    let xt: Vec<f64> = s.iter().zip(n).map(|(sv, nv)| a * sv + b * nv).collect();
    let err: Vec<f64> = est.iter().zip(&xt).map(|(e, x)| e - x).collect();
    let xx = norm_sq(&xt);
    let ee = norm_sq(&err);
    clamped_ratio(xx, ee, clamp, est.len(), || {
        // x_t = P ŝ with P symmetric, so ∇‖x_t‖² = 2 P x_t and ∇‖e‖² = 2 (I − P) e.
        let (pa, pb) = sar_projection(&xt, s, n, exact);
        let (qa, qb) = sar_projection(&err, s, n, exact);
        (0..est.len())
            .map(|k| {
                let p_xt = pa * s[k] + pb * n[k];
                let q_e = err[k] - (qa * s[k] + qb * n[k]);
                DB * (2.0 * p_xt / xx - 2.0 * q_e / ee)
            })
            .collect()
    })
}

fn average(terms: Vec<ItemTerm>) -> LossValue {
    let n = terms.len() as f64;
    let value = -terms.iter().map(|t| t.db).sum::<f64>() / n;
    let clamped = terms.iter().map(|t| t.clamped).collect();
    let gradient = terms.into_iter().map(|t| t.grad.into_iter().map(|g| -g / n).collect()).collect();
    LossValue { value, gradient, clamped }
}

/// Negative mean SI-SDR (dB) of `estimates` against `targets`.
pub fn si_sdr_loss<E: AsRef<[f64]>, T: AsRef<[f64]>>(
    estimates: &[E],
    targets: &[T],
    cfg: &LossConfig,
) -> Result<LossValue> {
    if estimates.len() != targets.len() || estimates.is_empty() {
        return Err(Error::invalid(format!(
            "need equal non-empty batches, got {} estimates and {} targets",
            estimates.len(),
            targets.len()
        )));
    }
    let mut terms = Vec::with_capacity(estimates.len());
    for (i, (e, t)) in estimates.iter().zip(targets).enumerate() {
        let (e, t) = (e.as_ref(), t.as_ref());
        check_pair(i, e, t)?;
        if norm_sq(t) <= 0.0 {
            return Err(Error::invalid(format!("target {i} has zero energy")));
        }
        terms.push(si_sdr_item(e, t, cfg.db_clamp));
    }
    Ok(average(terms))
}

/// Negative mean SI-SAR (dB): energy of the estimate outside the
/// (approximate) span of speech and noise counts as artifact.
pub fn si_sar_loss<E: AsRef<[f64]>, S: AsRef<[f64]>, N: AsRef<[f64]>>(
    estimates: &[E],
    speech: &[S],
    noise: &[N],
    cfg: &LossConfig,
) -> Result<LossValue> {
    if estimates.len() != speech.len() || speech.len() != noise.len() || estimates.is_empty() {
        return Err(Error::invalid("estimate, speech and noise batches must be equal and non-empty"));
    }
    let mut terms = Vec::with_capacity(estimates.len());
    for (i, ((e, s), n)) in estimates.iter().zip(speech).zip(noise).enumerate() {
        let (e, s, n) = (e.as_ref(), s.as_ref(), n.as_ref());
        check_pair(i, e, s)?;
        check_pair(i, e, n)?;
        if norm_sq(s) <= 0.0 || norm_sq(n) <= 0.0 {
            return Err(Error::invalid(format!("item {i}: speech and noise need positive energy")));
        }
        terms.push(si_sar_item(e, s, n, cfg.db_clamp, cfg.exact_sar_projection));
    }
    Ok(average(terms))
}

/// Unclamped artifact energy `‖ŝ − x_t‖²` of one item.
pub fn artifact_energy(estimate: &[f64], speech: &[f64], noise: &[f64], exact: bool) -> f64 {
    let (a, b) = sar_projection(estimate, speech, noise, exact);
    estimate
        .iter()
        .zip(speech.iter().zip(noise))
        .map(|(e, (s, n))| (e - a * s - b * n).powi(2))
        .sum()
}

/// Unclamped SI-SDR in dB of a single estimate.
pub fn si_sdr_db(estimate: &[f64], target: &[f64]) -> f64 {
    let alpha = dot(estimate, target) / norm_sq(target);
    let ee: f64 = estimate.iter().zip(target).map(|(e, t)| (e - alpha * t).powi(2)).sum();
    10.0 * (alpha * alpha * norm_sq(target) / ee).log10()
}

/// `(1/N) Σ_frames Σ_k vs_k ln(vs_k / vx_k)`, natural log, both arguments
/// floored at `prob_floor`. The gradient is w.r.t. `vx`.
pub fn kl_divergence(
    vx: &FeatureDistribution,
    vs: &FeatureDistribution,
    cfg: &LossConfig,
) -> Result<DistributionLoss> {
    if vx.probs.dim() != vs.probs.dim() {
        return Err(Error::invalid(format!(
            "distribution shapes differ: {:?} vs {:?}",
            vx.probs.dim(),
            vs.probs.dim()
        )));
    }
    let n = vx.frames() as f64;
    let floor = cfg.prob_floor;
    let mut value = 0.0;
    let mut gradient = Array2::zeros(vx.probs.dim());
    ndarray::Zip::from(&mut gradient).and(&vx.probs).and(&vs.probs).for_each(|g, &x, &s| {
        let xf = x.max(floor);
        let sf = s.max(floor);
        value += s * (sf / xf).ln();
        if x > floor {
            *g = -s / (xf * n);
        }
    });
    Ok(DistributionLoss { value: value / n, gradient })
}

/// `si_sdr_loss + λ_CM · kl_divergence`.
pub fn cm_loss<E: AsRef<[f64]>, T: AsRef<[f64]>>(
    estimates: &[E],
    targets: &[T],
    vx: &FeatureDistribution,
    vs: &FeatureDistribution,
    cfg: &LossConfig,
) -> Result<CmLossValue> {
    let sdr = si_sdr_loss(estimates, targets, cfg)?;
    let kl = kl_divergence(vx, vs, cfg)?;
    Ok(CmLossValue {
        value: sdr.value + cfg.lambda_cm * kl.value,
        estimate_gradient: sdr.gradient,
        distribution_gradient: kl.gradient * cfg.lambda_cm,
        clamped: sdr.clamped,
    })
}

/// `si_sdr_loss + λ_ct · si_sar_loss`.
pub fn ct_loss<E: AsRef<[f64]>, S: AsRef<[f64]>, N: AsRef<[f64]>>(
    estimates: &[E],
    speech: &[S],
    noise: &[N],
    cfg: &LossConfig,
) -> Result<LossValue> {
    let sdr = si_sdr_loss(estimates, speech, cfg)?;
    let sar = si_sar_loss(estimates, speech, noise, cfg)?;
    let gradient = sdr
        .gradient
        .iter()
        .zip(&sar.gradient)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + cfg.lambda_ct * y).collect())
        .collect();
    let clamped = sdr.clamped.iter().zip(&sar.clamped).map(|(a, b)| *a || *b).collect();
    Ok(LossValue { value: sdr.value + cfg.lambda_ct * sar.value, gradient, clamped })
}

/// Mean squared error; gradient w.r.t. `a`.
pub fn mse(a: &[f64], b: &[f64]) -> Result<LossValue> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!("mse needs equal non-empty inputs ({} vs {})", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let value = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    let gradient = vec![a.iter().zip(b).map(|(x, y)| 2.0 * (x - y) / n).collect()];
    Ok(LossValue { value, gradient, clamped: vec![false] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradient_check, numeric_gradient};
    use ndarray::array;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    fn dist(rows: Array2<f64>) -> FeatureDistribution {
        FeatureDistribution::new(rows).unwrap()
    }

    #[test]
    fn si_sdr_hand_value() {
        let l = si_sdr_loss(&[vec![1.0, 0.1, 0.0, 0.0]], &[vec![1.0, 0.0, 0.0, 0.0]], &cfg()).unwrap();
        assert!((l.value + 20.0).abs() < 1e-9, "{}", l.value);
        assert!(!l.clamped[0]);
    }

    #[test]
    fn perfect_and_scaled_reconstruction_clamp() {
        let s = vec![0.3, -0.2, 0.9, 0.1];
        let l = si_sdr_loss(&[s.clone()], &[s.clone()], &cfg()).unwrap();
        assert_eq!(l.value, -60.0);
        assert!(l.clamped[0]);
        assert!(l.gradient[0].iter().all(|&g| g == 0.0));
        let scaled: Vec<f64> = s.iter().map(|v| 3.7 * v).collect();
        assert_eq!(si_sdr_loss(&[scaled], &[s], &cfg()).unwrap().value, -60.0);
    }

    #[test]
    fn orthogonal_estimate_is_flagged() {
        let l = si_sdr_loss(&[vec![0.0, 1.0]], &[vec![1.0, 0.0]], &cfg()).unwrap();
        assert_eq!(l.value, 60.0);
        assert!(l.clamped[0]);
    }

    #[test]
    fn zero_target_rejected() {
        assert!(matches!(
            si_sdr_loss(&[vec![1.0, 0.0]], &[vec![0.0, 0.0]], &cfg()),
            Err(Error::InvalidArgument(_))
        ));
        assert!(si_sdr_loss(&[vec![1.0]], &[vec![1.0, 0.0]], &cfg()).is_err());
    }

    #[test]
    fn si_sar_hand_values() {
        let l = si_sar_loss(&[vec![0.7, 0.3]], &[vec![1.0, 0.0]], &[vec![0.0, 1.0]], &cfg()).unwrap();
        assert_eq!(l.value, -60.0);
        let l = si_sar_loss(&[vec![0.6, 0.3, 0.1]], &[vec![1.0, 0.0, 0.0]], &[vec![0.0, 1.0, 0.0]], &cfg())
            .unwrap();
        let expected = -10.0 * 45f64.log10();
        assert!((l.value - expected).abs() < 1e-9);
        assert!((l.value + 16.532).abs() < 1e-3);
    }

    #[test]
    fn si_sar_rejects_silent_components() {
        let r = si_sar_loss(&[vec![1.0, 1.0]], &[vec![1.0, 0.0]], &[vec![0.0, 0.0]], &cfg());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn exact_projection_differs_when_correlated() {
        let s = vec![1.0, 0.0, 0.0];
        let n = vec![1.0, 1.0, 0.0];
        let est = vec![2.0, 1.0, 0.2];
        assert!(artifact_energy(&est, &s, &n, true) < artifact_energy(&est, &s, &n, false));
        assert!((artifact_energy(&est, &s, &n, true) - 0.04).abs() < 1e-12);
    }

    #[test]
    fn kl_hand_value_and_identity() {
        let vs = dist(array![[0.5, 0.5]]);
        let vx = dist(array![[0.9, 0.1]]);
        let d = kl_divergence(&vx, &vs, &cfg()).unwrap();
        let expected = 0.5 * (5.0f64 / 9.0).ln() + 0.5 * 5f64.ln();
        assert!((d.value - expected).abs() < 1e-12);
        assert!((d.value - 0.51083).abs() < 1e-5);
        assert_eq!(kl_divergence(&vs, &vs, &cfg()).unwrap().value, 0.0);
    }

    #[test]
    fn kl_shape_mismatch_rejected() {
        let a = dist(array![[0.5, 0.5]]);
        let b = dist(array![[0.2, 0.3, 0.5]]);
        assert!(kl_divergence(&a, &b, &cfg()).is_err());
        assert!(FeatureDistribution::new(array![[0.5, 0.6]]).is_err());
    }

    #[test]
    fn combined_losses_are_linear() {
        let est = [vec![1.0, 0.1, 0.0, 0.0]];
        let tgt = [vec![1.0, 0.0, 0.0, 0.0]];
        let vs = dist(array![[0.5, 0.5]]);
        let vx = dist(array![[0.9, 0.1]]);
        let c = cm_loss(&est, &tgt, &vx, &vs, &cfg()).unwrap();
        assert!((c.value - (-20.0 + 0.01 * 0.510825623765991)).abs() < 1e-9);
        assert!((c.value + 19.99489).abs() < 1e-5);
        let zero = LossConfig { lambda_cm: 0.0, ..cfg() };
        assert_eq!(cm_loss(&est, &tgt, &vx, &vs, &zero).unwrap().value, -20.0);
        assert_eq!(cm_loss(&est, &tgt, &vs, &vs, &cfg()).unwrap().value, -20.0);

        let s = [vec![0.2, -0.5, 0.7]];
        // n ⊥ s, so the two-term projection reproduces ŝ = s exactly.
        let ct = ct_loss(&s, &s, &[vec![0.5, 0.2, 0.0]], &cfg()).unwrap();
        assert!((ct.value + 60.6).abs() < 1e-12);
        let ct0 = ct_loss(&est, &tgt, &[vec![0.0, 1.0, 0.0, 0.0]], &LossConfig { lambda_ct: 0.0, ..cfg() }).unwrap();
        assert_eq!(ct0.value, -20.0);
    }

    #[test]
    fn ct_linear_combination_of_hand_values() {
        // SI-SDR of the 3-sample SAR example and the SAR term itself.
        let est = [vec![0.6, 0.3, 0.1]];
        let s = [vec![1.0, 0.0, 0.0]];
        let n = [vec![0.0, 1.0, 0.0]];
        let sdr = si_sdr_loss(&est, &s, &cfg()).unwrap().value;
        let sar = si_sar_loss(&est, &s, &n, &cfg()).unwrap().value;
        let ct = ct_loss(&est, &s, &n, &cfg()).unwrap().value;
        assert!((ct - (sdr + 0.01 * sar)).abs() < 1e-12);
    }

    #[test]
    fn mse_values_and_gradient() {
        assert_eq!(mse(&[1.0, 0.0], &[1.0, 0.0]).unwrap().value, 0.0);
        assert_eq!(mse(&[1.0, 0.0], &[0.0, 0.0]).unwrap().value, 0.5);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        let a = [0.3, -1.2, 2.5];
        let b = [0.1, 0.4, -0.7];
        let g = &mse(&a, &b).unwrap().gradient[0];
        let num = numeric_gradient(|x| mse(x, &b).unwrap().value, &a, 1e-5);
        for (x, y) in g.iter().zip(&num) {
            assert!((x - y).abs() / x.abs().max(1e-12) < 1e-8);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let est = vec![0.4, -0.3, 0.8, 0.05, -0.6];
        let s = vec![0.5, -0.1, 0.7, 0.2, -0.4];
        let n = vec![0.1, 0.6, -0.3, 0.2, 0.3];
        let c = cfg();
        let g = si_sdr_loss(&[est.clone()], &[s.clone()], &c).unwrap().gradient.remove(0);
        let r = gradient_check(|x| si_sdr_loss(&[x], &[&s[..]], &c).unwrap().value, &est, &g, 1e-4);
        assert!(r.pass, "si-sdr {r:?}");
        for exact in [false, true] {
            let c = LossConfig { exact_sar_projection: exact, ..cfg() };
            let g = si_sar_loss(&[est.clone()], &[s.clone()], &[n.clone()], &c).unwrap().gradient.remove(0);
            let r = gradient_check(
                |x| si_sar_loss(&[x], &[&s[..]], &[&n[..]], &c).unwrap().value,
                &est,
                &g,
                1e-4,
            );
            assert!(r.pass, "si-sar exact={exact} {r:?}");
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let vs = dist(array![[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]]);
        let vx = array![[0.3, 0.3, 0.4], [0.5, 0.25, 0.25]];
        let g = kl_divergence(&dist(vx.clone()), &vs, &cfg()).unwrap().gradient;
        let flat: Vec<f64> = vx.iter().copied().collect();
        // Perturbations leave the simplex, so evaluate the formula directly.
        let f = |p: &[f64]| {
            let x = Array2::from_shape_vec((2, 3), p.to_vec()).unwrap();
            let mut v = 0.0;
            ndarray::Zip::from(&x).and(vs.probs()).for_each(|&a, &b| v += b * (b / a).ln());
            v / 2.0
        };
        let r = gradient_check(f, &flat, &g.iter().copied().collect::<Vec<_>>(), 1e-6);
        assert!(r.pass, "{r:?}");
    }
}
