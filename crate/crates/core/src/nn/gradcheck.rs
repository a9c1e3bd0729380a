//! Central finite-difference gradient verification.

use super::DenseNetwork;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Gradient magnitudes below this are compared in absolute terms (scaled by
/// the floor) rather than relative terms.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Compares a supplied analytic gradient of `f` at `x` against central differences.
pub fn gradient_check(
    f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    tolerance: f64,
) -> GradCheckReport {
    let numeric = numeric_gradient(f, x, DEFAULT_STEP);
    let max_rel_error = if analytic.len() != numeric.len() {
        f64::INFINITY
    } else {
        analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max)
    };
    GradCheckReport { max_rel_error, pass: max_rel_error < tolerance }
}

/// Checks `net`'s backward pass for the scalar loss `loss_fn(output)`, which
/// returns the loss and its gradient w.r.t. the output, at a single input.
pub fn finite_diff_check(
    net: &DenseNetwork,
    loss_fn: impl Fn(&[f64]) -> (f64, Vec<f64>),
    input: &[f64],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (out, cache) = net.forward(input)?;
    let (_, dout) = loss_fn(&out);
    let analytic = net.backward(&cache, &dout)?.params;
    let mut probe = net.clone();
    let params = net.params();
    let f = |p: &[f64]| {
        probe.set_params(p).expect("same layout");
        match probe.forward(input) {
            Ok((o, _)) => loss_fn(&o).0,
            Err(_) => f64::NAN,
        }
    };
    Ok(gradient_check(f, &params, &analytic, tolerance))
}

/// Like [`finite_diff_check`] but probes at most `max_params` parameter
/// coordinates, chosen uniformly with `seed`. Used for wide networks where
/// probing every coordinate is too slow.
pub fn finite_diff_check_sampled(
    net: &DenseNetwork,
    loss_fn: impl Fn(&[f64]) -> (f64, Vec<f64>),
    input: &[f64],
    tolerance: f64,
    max_params: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    use rand::seq::index::sample;

    let (out, cache) = net.forward(input)?;
    let (_, dout) = loss_fn(&out);
    let analytic = net.backward(&cache, &dout)?.params;
    let count = net.parameter_count();
    let picks = sample(&mut crate::rng::seeded(seed), count, max_params.min(count));
    let mut probe = net.clone();
    let mut params = net.params();
    let mut max_rel_error: f64 = 0.0;
    for i in picks.iter() {
        let orig = params[i];
        let mut eval = |v: f64| {
            params[i] = v;
            probe.set_params(&params).expect("same layout");
            probe.forward(input).map(|(o, _)| loss_fn(&o).0).unwrap_or(f64::NAN)
        };
        let numeric = (eval(orig + DEFAULT_STEP) - eval(orig - DEFAULT_STEP)) / (2.0 * DEFAULT_STEP);
        params[i] = orig;
        max_rel_error = max_rel_error.max(relative_error(analytic[i], numeric));
    }
    if !max_rel_error.is_finite() {
        max_rel_error = f64::INFINITY;
    }
    Ok(GradCheckReport { max_rel_error, pass: max_rel_error < tolerance })
}

/// Smallest `|pre-activation|` over every layer for one input; ReLU
/// gradient checks need this away from zero.
pub fn min_abs_preactivation(net: &DenseNetwork, input: &[f64]) -> f64 {
    let mut a = ndarray::Array1::from(input.to_vec());
    let mut min = f64::INFINITY;
    for l in net.layers() {
        let z = l.weights.dot(&a) + &l.biases;
        min = z.iter().fold(min, |m, v| m.min(v.abs()));
        a = z.mapv(|v| if l.activation == super::Activation::Relu { v.max(0.0) } else { v });
    }
    min
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn quadratic(out: &[f64]) -> (f64, Vec<f64>) {
        let v = out.iter().map(|o| 0.5 * o * o).sum();
        (v, out.to_vec())
    }

    #[test]
    fn linear_net_with_quadratic_loss_is_near_exact() {
        let net = DenseNetwork::new(&[4, 3], &[Activation::Identity], 11).unwrap();
        let r = finite_diff_check(&net, quadratic, &[0.5, -1.0, 2.0, 0.25], 1e-7).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_detected() {
        let net = DenseNetwork::new(&[3, 2], &[Activation::Sigmoid], 2).unwrap();
        let input = [0.2, -0.4, 0.9];
        let (out, cache) = net.forward(&input).unwrap();
        let g = net.backward(&cache, &quadratic(&out).1).unwrap();
        let doubled: Vec<f64> = g.params.iter().map(|v| 2.0 * v).collect();
        let mut probe = net.clone();
        let f = |p: &[f64]| {
            probe.set_params(p).unwrap();
            quadratic(&probe.forward(&input).unwrap().0).0
        };
        let r = gradient_check(f, &net.params(), &doubled, 1e-4);
        assert!(!r.pass);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }
}
