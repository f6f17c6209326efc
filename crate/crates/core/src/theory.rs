//! Closed-form convergence envelopes and the tightness construction.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::distributed::{CountingMode, RunTrace, TraceRow};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    /// Bounds `|w_t - w*|`.
    Distance,
    /// Bounds `E |w_t - w*|^2`.
    SquaredDistance,
}

/// Envelope values for `t = 0, 1, ...`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundSeries {
    pub kind: BoundKind,
    pub values: Vec<f64>,
}

impl BoundSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// CSV with header `t,bound`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,bound\n");
        for (t, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{t},{v:.16e}\n"));
        }
        out
    }
}

/// Inexact contraction `|w_{t+1} - w*| <= c_t |w_t - w*| + noise_t` with
/// `E|noise_t|^2 <= alpha_t^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecursionSpec {
    c_seq: Vec<f64>,
    alpha_seq: Vec<f64>,
    d0: f64,
}

impl RecursionSpec {
    pub fn new(c_seq: Vec<f64>, alpha_seq: Vec<f64>, d0: f64) -> Result<Self> {
        if c_seq.len() != alpha_seq.len() {
            return Err(Error::InvalidInput(format!(
                "{} contraction factors but {} noise bounds",
                c_seq.len(),
                alpha_seq.len()
            )));
        }
        if let Some(c) = c_seq.iter().find(|c| !(**c > 0.0 && **c < 1.0)) {
            return Err(Error::InvalidInput(format!("contraction factor {c} outside (0, 1)")));
        }
        if let Some(a) = alpha_seq.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
            return Err(Error::InvalidInput(format!("noise bound {a} is negative or not finite")));
        }
        if !(d0 >= 0.0 && d0.is_finite()) {
            return Err(Error::InvalidInput(format!("initial distance {d0} is invalid")));
        }
        Ok(Self { c_seq, alpha_seq, d0 })
    }

    pub fn constant(c: f64, alpha: impl Fn(usize) -> f64, d0: f64, horizon: usize) -> Result<Self> {
        Self::new(vec![c; horizon], (0..horizon).map(alpha).collect(), d0)
    }

    pub fn len(&self) -> usize {
        self.c_seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c_seq.is_empty()
    }

    pub fn c_seq(&self) -> &[f64] {
        &self.c_seq
    }

    pub fn alpha_seq(&self) -> &[f64] {
        &self.alpha_seq
    }

    pub fn d0(&self) -> f64 {
        self.d0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecursionBound {
    /// `D_t^2 = prod_{j<t} c_j^2`.
    pub d_sq: Vec<f64>,
    /// `C_t^2 = sum_{j<t} alpha_j^2 prod_{j<l<t} c_l^2`.
    pub c_sq: Vec<f64>,
    /// `D_t^2 D0^2 + C_t^2`, a squared-distance envelope.
    pub bound: BoundSeries,
}

/// Evaluates the envelope for `t = 0..=horizon` with the forward recursion
/// `C_{t+1}^2 = c_t^2 C_t^2 + alpha_t^2`.
pub fn recursion_bound(spec: &RecursionSpec, horizon: usize) -> Result<RecursionBound> {
    if horizon > spec.len() {
        return Err(Error::InvalidInput(format!(
            "horizon {horizon} exceeds the {} specified steps",
            spec.len()
        )));
    }
    let mut d_sq = Vec::with_capacity(horizon + 1);
    let mut c_sq = Vec::with_capacity(horizon + 1);
    let (mut d, mut c) = (1.0, 0.0);
    d_sq.push(d);
    c_sq.push(c);
    for t in 0..horizon {
        let ct2 = spec.c_seq[t] * spec.c_seq[t];
        d *= ct2;
        c = ct2 * c + spec.alpha_seq[t] * spec.alpha_seq[t];
        d_sq.push(d);
        c_sq.push(c);
    }
    let d02 = spec.d0 * spec.d0;
    let values = d_sq.iter().zip(&c_sq).map(|(d, c)| d * d02 + c).collect();
    Ok(RecursionBound {
        d_sq,
        c_sq,
        bound: BoundSeries { kind: BoundKind::SquaredDistance, values },
    })
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Natural log of the recursion envelope for every `t`, immune to
/// underflow on long horizons.
pub fn recursion_log_bound(spec: &RecursionSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.len() + 1);
    let mut log_d = 0.0;
    let mut log_c = f64::NEG_INFINITY;
    let log_d0 = 2.0 * spec.d0.ln();
    out.push(log_d0);
    for t in 0..spec.len() {
        let lc = 2.0 * spec.c_seq[t].ln();
        log_d += lc;
        log_c = log_add_exp(lc + log_c, 2.0 * spec.alpha_seq[t].ln());
        out.push(log_add_exp(log_d + log_d0, log_c));
    }
    out
}

fn check_rates(c: f64, c_prime: f64) -> Result<()> {
    if !(c >= 0.0 && c < c_prime && c_prime < 1.0) {
        return Err(Error::Config(format!(
            "c < c' < 1 violated: c = {c}, c' = {c_prime}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicBound {
    pub xi_s: f64,
    pub series: BoundSeries,
}

/// `xi_s = max{0, D0 - c eta s/(c'-c)} + c' eta s/(c'-c)`.
pub fn xi_s(c: f64, c_prime: f64, eta: f64, s: f64, d0: f64) -> f64 {
    let gap = c_prime - c;
    (d0 - c * eta * s / gap).max(0.0) + c_prime * eta * s / gap
}

/// Distance envelope `c'^t xi_s` for a contraction with additive error at
/// most `eta s c'^{t+1}` in step `t`.
pub fn deterministic_bound(
    c: f64,
    c_prime: f64,
    eta: f64,
    s: f64,
    d0: f64,
    horizon: usize,
) -> Result<DeterministicBound> {
    check_rates(c, c_prime)?;
    let xi = xi_s(c, c_prime, eta, s, d0);
    let values = (0..=horizon).map(|t| c_prime.powi(t as i32) * xi).collect();
    Ok(DeterministicBound {
        xi_s: xi,
        series: BoundSeries { kind: BoundKind::Distance, values },
    })
}

/// Mean-square envelope of DEED-SGD:
/// `c'^t (max{0, D0^2 - c eta^2 s/(c'-c)} + c' eta^2 s/(c'-c))`.
pub fn sgd_bound(c: f64, c_prime: f64, eta: f64, s: f64, d0: f64, horizon: usize) -> Result<BoundSeries> {
    check_rates(c, c_prime)?;
    let gap = c_prime - c;
    let head = (d0 * d0 - c * eta * eta * s / gap).max(0.0) + c_prime * eta * eta * s / gap;
    Ok(BoundSeries {
        kind: BoundKind::SquaredDistance,
        values: (0..=horizon).map(|t| c_prime.powi(t as i32) * head).collect(),
    })
}

/// Bound on `|message| / max_error` for every DEED-GD message after round 0:
/// `(2 L^2 eta xi_s / s + 2 L eta c' + 3 c') / c'^2`.
pub fn zeta_bits(c_prime: f64, eta: f64, s: f64, l: f64, xi_s: f64) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::InvalidInput(
            "the error fraction is undefined for s = 0".into(),
        ));
    }
    Ok((2.0 * l * l * eta * xi_s / s + 2.0 * l * eta * c_prime + 3.0 * c_prime) / (c_prime * c_prime))
}

/// Per-message bit guarantee `(1.05 + log2(zeta + 2)) d`.
pub fn message_bits_bound(zeta: f64, dim: usize) -> f64 {
    (1.05 + (zeta + 2.0).log2()) * dim as f64
}

/// Constants of the accelerated envelope.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AcceleratedConstants {
    /// `f(x0) - f* + mu/2 |x0 - x*|^2`.
    pub delta: f64,
    pub mu: f64,
    pub l: f64,
    /// `sqrt(1 - sqrt(mu/L))`.
    pub c: f64,
    pub c_prime: f64,
    pub s: f64,
    /// `c'/c`.
    pub gamma: f64,
    pub alpha_s: f64,
    pub beta_s: f64,
    /// `beta_s^2 + alpha_s + beta_s sqrt(alpha_s) - delta`.
    pub c_single: f64,
    /// Same with the full cross term `2 beta_s sqrt(alpha_s)`.
    pub c_double: f64,
}

impl AcceleratedConstants {
    pub fn new(delta: f64, mu: f64, l: f64, c_prime: f64, s: f64) -> Result<Self> {
        if !(mu > 0.0 && l >= mu) {
            return Err(Error::InvalidInput(format!("need 0 < mu <= L, got mu = {mu}, L = {l}")));
        }
        let c = (1.0 - (mu / l).sqrt()).sqrt();
        if !(c < c_prime && c_prime < 1.0) {
            return Err(Error::Config(format!(
                "c < c' < 1 violated: c = sqrt(1 - sqrt(mu/L)) = {c}, c' = {c_prime}"
            )));
        }
        let gamma = c_prime / c;
        let g2 = gamma * gamma - 1.0;
        let alpha_s = s * s / (l * g2) + delta;
        let beta_s = (3.0 * (2.0 / l).sqrt() + 5.0 * (2.0 / mu).sqrt()) / (c * g2) * s * gamma;
        let root = alpha_s.sqrt();
        Ok(Self {
            delta,
            mu,
            l,
            c,
            c_prime,
            s,
            gamma,
            alpha_s,
            beta_s,
            c_single: beta_s * beta_s + alpha_s + beta_s * root - delta,
            c_double: beta_s * beta_s + alpha_s + 2.0 * beta_s * root - delta,
        })
    }

    /// The larger of the two readings of `C`.
    pub fn c_envelope(&self) -> f64 {
        self.c_single.max(self.c_double)
    }

    /// Momentum weight `(sqrt L - sqrt mu)/(sqrt L + sqrt mu)`.
    pub fn tau(&self) -> f64 {
        let (a, b) = (self.l.sqrt(), self.mu.sqrt());
        (a - b) / (a + b)
    }

    /// Upper bounds on `|message| / max_error` after round 0 for worker and
    /// center messages of A-DEED-GD.
    ///
    /// With `X = sqrt(2 (Delta + C)/mu)` every `|x_k - x*| <= c'^k X`, hence
    /// `|y_k - x*| <= c'^k Y` with `Y = X (1 + 2 tau)/c'`, and
    /// `|y_k - y_{k-1}| <= c'^{k-1} (1 + c') Y`. The triangle inequalities
    /// of the plain method then give the two ratios.
    pub fn zeta(&self) -> (f64, f64) {
        let x = (2.0 * (self.delta + self.c_envelope()) / self.mu).sqrt();
        let y = x * (1.0 + 2.0 * self.tau()) / self.c_prime;
        let cp = self.c_prime;
        let drift = 2.0 * self.l * y * (1.0 + cp) / (self.s * cp * cp);
        (drift + 1.0 / cp, drift + 1.0 + 2.0 / cp)
    }
}

/// `sqrt(2/mu) sqrt(c^{2k} Delta + c'^{2k} C)` for `k = 0..=horizon`.
pub fn accelerated_bound(consts: &AcceleratedConstants, horizon: usize) -> BoundSeries {
    let cc = consts.c_envelope();
    let scale = (2.0 / consts.mu).sqrt();
    let values = (0..=horizon)
        .map(|k| {
            let a = consts.c.powi(2 * k as i32) * consts.delta;
            let b = consts.c_prime.powi(2 * k as i32) * cc;
            scale * (a + b).sqrt()
        })
        .collect();
    BoundSeries { kind: BoundKind::Distance, values }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedBound {
    pub v: f64,
    pub series: BoundSeries,
}

/// `v/(gamma + t)` with `v = max{beta^2 (B + C + s^2)/(beta mu - 1), gamma D0^2}`.
#[allow(clippy::too_many_arguments)]
pub fn fed_bound(
    b: f64,
    c: f64,
    beta: f64,
    gamma: f64,
    mu: f64,
    s: f64,
    d0: f64,
    horizon: usize,
) -> Result<FedBound> {
    if !(beta * mu > 1.0) {
        return Err(Error::Config(format!(
            "beta > 1/mu violated: beta = {beta}, 1/mu = {}",
            1.0 / mu
        )));
    }
    if !(gamma > 1.0) {
        return Err(Error::Config(format!("gamma > 1 violated: gamma = {gamma}")));
    }
    let v = (beta * beta * (b + c + s * s) / (beta * mu - 1.0)).max(gamma * d0 * d0);
    let values = (0..=horizon).map(|t| v / (gamma + t as f64)).collect();
    Ok(FedBound {
        v,
        series: BoundSeries { kind: BoundKind::SquaredDistance, values },
    })
}

/// Envelope of a run whose per-step error has constant size
/// `eta * fixed_eps`.
pub fn const_error_envelope(c: f64, eta: f64, fixed_eps: f64, d0: f64, horizon: usize) -> Result<RecursionBound> {
    let spec = RecursionSpec::constant(c, |_| eta * fixed_eps, d0, horizon)?;
    recursion_bound(&spec, horizon)
}

/// Realizes the recursion envelope with equality.
///
/// `w_{t+1} = c_t w_t + e_t` with `w* = 0`, where `e_t` has norm `alpha_t`,
/// is orthogonal to `c_t w_t` and has a fair random sign, so
/// `|w_{t+1}|^2 = c_t^2 |w_t|^2 + alpha_t^2` on every realization.
pub fn tightness_construction(spec: &RecursionSpec, w0: &[f64], horizon: usize, seed: u64) -> Result<RunTrace> {
    let dim = w0.len();
    if dim < 2 {
        return Err(Error::Precondition(
            "orthogonal noise needs dimension at least 2".into(),
        ));
    }
    if horizon > spec.len() {
        return Err(Error::InvalidInput(format!(
            "horizon {horizon} exceeds the {} specified steps",
            spec.len()
        )));
    }
    let mut rng = rng::stream(seed, rng::GLOBAL, 0, Purpose::Construction);
    let mut w = w0.to_vec();
    let mut rows = Vec::with_capacity(horizon + 1);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let push = |rows: &mut Vec<TraceRow>, t: usize, w: &[f64], budget: f64| {
        let dist = norm(w);
        rows.push(TraceRow {
            t,
            dist,
            fgap: 0.5 * dist * dist,
            bits_up: 0,
            bits_down: 0,
            cum_bits: 0,
            budget,
        });
    };
    push(&mut rows, 0, &w, 0.0);
    for t in 0..horizon {
        let c = spec.c_seq[t];
        let alpha = spec.alpha_seq[t];
        for x in w.iter_mut() {
            *x *= c;
        }
        if alpha > 0.0 {
            let w_norm = norm(&w);
            let e = loop {
                let mut e: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                if w_norm > 0.0 {
                    let proj = e.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / (w_norm * w_norm);
                    for (a, b) in e.iter_mut().zip(&w) {
                        *a -= proj * b;
                    }
                    // second pass removes the residue of the first
                    let proj = e.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / (w_norm * w_norm);
                    for (a, b) in e.iter_mut().zip(&w) {
                        *a -= proj * b;
                    }
                }
                let n = norm(&e);
                if n > 1e-8 {
                    break e.into_iter().map(|x| x / n).collect::<Vec<_>>();
                }
            };
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            for (x, d) in w.iter_mut().zip(&e) {
                *x += sign * alpha * d;
            }
        }
        push(&mut rows, t + 1, &w, alpha);
    }
    Ok(RunTrace::new("tightness", rows, CountingMode::StarFull))
}

/// Outcome of the finite-horizon linear-convergence test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearVerdict {
    /// `sup c_t` is bounded away from one.
    pub contraction_below_one: bool,
    /// `alpha_t` decays geometrically.
    pub noise_geometric: bool,
    /// Both conditions together.
    pub linear: bool,
    /// Direct classification of the envelope itself.
    pub envelope_linear: bool,
    pub alpha_slope: f64,
    pub alpha_r2: f64,
    pub envelope_slope: f64,
    pub envelope_r2: f64,
    /// The contraction factors decrease somewhere, so the characterization
    /// does not apply as stated.
    pub hypothesis_violated: bool,
}

pub const LINEAR_SLOPE: f64 = -1e-3;
pub const LINEAR_R2: f64 = 0.99;

/// Least-squares slope and coefficient of determination of `ys` against
/// their index. Infinite values are skipped.
pub fn log_linear_fit(start: usize, ys: &[f64]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = ys
        .iter()
        .enumerate()
        .filter(|(_, y)| y.is_finite())
        .map(|(i, &y)| ((start + i) as f64, y))
        .collect();
    if pts.len() < 2 {
        return (f64::NEG_INFINITY, 1.0);
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy <= 1e-300 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, r2)
}

fn tail_is_linear(start: usize, logs: &[f64]) -> (bool, f64, f64) {
    if logs.iter().all(|y| *y == f64::NEG_INFINITY) {
        return (true, f64::NEG_INFINITY, 1.0);
    }
    let (slope, r2) = log_linear_fit(start, logs);
    (slope <= LINEAR_SLOPE && r2 >= LINEAR_R2, slope, r2)
}

/// Classifies whether the envelope of `spec` decays linearly, both through
/// the two conditions on `(c_t, alpha_t)` and directly from the envelope,
/// over the last half of the horizon.
pub fn linear_rate_iff_check(spec: &RecursionSpec) -> LinearVerdict {
    let sup_c = spec.c_seq.iter().copied().fold(0.0, f64::max);
    let contraction_below_one = 2.0 * sup_c.ln() <= LINEAR_SLOPE;
    let half = spec.len() / 2;

    let log_alpha: Vec<f64> = spec.alpha_seq[half..].iter().map(|a| a.ln()).collect();
    let (noise_geometric, alpha_slope, alpha_r2) = tail_is_linear(half, &log_alpha);

    let log_bound = recursion_log_bound(spec);
    let (envelope_linear, envelope_slope, envelope_r2) = tail_is_linear(half, &log_bound[half..]);

    let hypothesis_violated = spec.c_seq.windows(2).any(|w| w[1] < w[0]);
    LinearVerdict {
        contraction_below_one,
        noise_geometric,
        linear: contraction_below_one && noise_geometric,
        envelope_linear,
        alpha_slope,
        alpha_r2,
        envelope_slope,
        envelope_r2,
        hypothesis_violated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn halving(horizon: usize) -> RecursionSpec {
        RecursionSpec::constant(0.5, |t| 0.5f64.powi(t as i32 + 1), 1.0, horizon).unwrap()
    }

    #[test]
    fn noiseless_recursion() {
        let spec = RecursionSpec::constant(0.5, |_| 0.0, 1.0, 3).unwrap();
        let b = recursion_bound(&spec, 3).unwrap();
        assert_eq!(b.bound.values[3], 0.015625);
    }

    #[test]
    fn halving_recursion_values() {
        let b = recursion_bound(&halving(3), 3).unwrap();
        assert_eq!(b.d_sq[3], 0.015625);
        assert!((b.c_sq[3] - 0.046875).abs() < 1e-15);
        assert!((b.bound.values[3] - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn recursion_rejects_bad_specs() {
        assert!(RecursionSpec::new(vec![1.0], vec![0.0], 1.0).is_err());
        assert!(RecursionSpec::new(vec![0.5], vec![-1.0], 1.0).is_err());
        assert!(RecursionSpec::new(vec![0.5, 0.5], vec![0.0], 1.0).is_err());
        assert!(recursion_bound(&halving(3), 4).is_err());
    }

    fn brute_force(spec: &RecursionSpec, t: usize) -> f64 {
        let mut d = 1.0;
        for j in 0..t {
            d *= spec.c_seq()[j].powi(2);
        }
        let mut c = 0.0;
        for j in 0..t {
            let mut prod = spec.alpha_seq()[j].powi(2);
            for l in (j + 1)..t {
                prod *= spec.c_seq()[l].powi(2);
            }
            c += prod;
        }
        d * spec.d0().powi(2) + c
    }

    fn random_spec(rng: &mut ChaCha8Rng, horizon: usize) -> RecursionSpec {
        let c: Vec<f64> = (0..horizon).map(|_| rng.random_range(0.05..0.999)).collect();
        let a: Vec<f64> = (0..horizon).map(|_| rng.random_range(0.0..2.0)).collect();
        RecursionSpec::new(c, a, rng.random_range(0.0..10.0)).unwrap()
    }

    #[test]
    fn forward_recursion_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let horizon = rng.random_range(1..=200);
            let spec = random_spec(&mut rng, horizon);
            let b = recursion_bound(&spec, horizon).unwrap();
            for t in [0, horizon / 2, horizon] {
                let want = brute_force(&spec, t);
                assert!((b.bound.values[t] - want).abs() <= 1e-12 * want.max(1e-300));
            }
        }
    }

    #[test]
    fn log_bound_matches_direct() {
        let spec = halving(40);
        let direct = recursion_bound(&spec, 40).unwrap();
        for (l, d) in recursion_log_bound(&spec).iter().zip(&direct.bound.values) {
            assert!((l.exp() - d).abs() <= 1e-12 * d);
        }
    }

    #[test]
    fn deterministic_examples() {
        let b = deterministic_bound(0.0, 0.5, 1.0, 1.0, 1.0, 3).unwrap();
        assert_eq!(b.xi_s, 2.0);
        assert_eq!(b.series.values[3], 0.25);
        let zero = deterministic_bound(0.8, 0.9, 0.1, 0.0, 3.0, 20).unwrap();
        for (t, v) in zero.series.values.iter().enumerate() {
            assert!((v - 0.9f64.powi(t as i32) * 3.0).abs() < 1e-15);
        }
        assert!(zero.series.values.windows(2).all(|w| w[1] < w[0]));
        assert!(matches!(deterministic_bound(0.9, 0.9, 1.0, 1.0, 1.0, 3), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_bound_is_geometric() {
        let b = deterministic_bound(0.6, 0.8, 0.5, 2.0, 0.1, 50).unwrap();
        for w in b.series.values.windows(2) {
            assert!(w[1] <= 0.8 * w[0] * (1.0 + 1e-15));
        }
    }

    #[test]
    fn recursion_reproduces_deterministic_envelope() {
        // on the branch D0 >= c eta s/(c'-c) the squared deterministic
        // envelope dominates the constant-contraction recursion
        let (c, cp, eta, s, d0) = (0.7, 0.85, 0.4, 0.5, 3.0);
        assert!(d0 >= c * eta * s / (cp - c));
        let det = deterministic_bound(c, cp, eta, s, d0, 60).unwrap();
        let spec = RecursionSpec::constant(c, |t| eta * s * cp.powi(t as i32 + 1), d0, 60).unwrap();
        let rec = recursion_bound(&spec, 60).unwrap();
        for (r, d) in rec.bound.values.iter().zip(&det.series.values) {
            assert!(*r <= d * d * (1.0 + 1e-12));
        }
    }

    #[test]
    fn zeta_examples() {
        assert_eq!(zeta_bits(0.5, 1.0, 1.0, 1.0, 2.0).unwrap(), 26.0);
        assert!(zeta_bits(0.5, 1.0, 0.0, 1.0, 2.0).is_err());
        let z = |s: f64| zeta_bits(0.95, 0.1, s, 4.0, xi_s(0.9, 0.95, 0.1, s, 5.0)).unwrap();
        let mut prev = f64::INFINITY;
        // strictly decreasing while D0 > c eta s/(c'-c), i.e. s < 2.77
        for k in 1..50 {
            let v = z(k as f64 * 0.05);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn accelerated_noiseless_limit() {
        let k = AcceleratedConstants::new(3.0, 1.0, 16.0, 0.9, 0.0).unwrap();
        assert_eq!(k.c_envelope(), 0.0);
        let b = accelerated_bound(&k, 30);
        for (t, v) in b.values.iter().enumerate() {
            let want = (2.0 * 3.0f64).sqrt() * k.c.powi(t as i32);
            assert!((v - want).abs() <= 1e-12 * want);
        }
        assert!(AcceleratedConstants::new(3.0, 1.0, 16.0, 0.8, 1.0).is_err());
    }

    #[test]
    fn accelerated_bound_nonincreasing() {
        let k = AcceleratedConstants::new(2.0, 1.0, 64.0, 0.97, 0.5).unwrap();
        assert!(k.c_single >= 0.0 && k.c_double >= k.c_single);
        let b = accelerated_bound(&k, 300);
        assert!(b.values.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fed_examples() {
        let b = fed_bound(0.0, 0.0, 2.0, 5.0, 1.0, 0.0, 2.0, 10).unwrap();
        assert_eq!(b.v, 20.0);
        assert_eq!(b.series.values[3], 20.0 / 8.0);
        let b = fed_bound(0.6, 0.4, 2.0, 3.0, 1.0, 0.0, 0.1, 10).unwrap();
        assert_eq!(b.v, 4.0);
        assert!(matches!(fed_bound(1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 5), Err(Error::Config(_))));
    }

    #[test]
    fn tightness_examples() {
        let trace = tightness_construction(&halving(3), &[1.0, 0.0], 3, 1).unwrap();
        assert!((trace.rows[3].dist.powi(2) - 0.0625).abs() <= 1e-15);
        let plain = RecursionSpec::constant(0.7, |_| 0.0, 1.0, 20).unwrap();
        let trace = tightness_construction(&plain, &[0.6, 0.8], 20, 1).unwrap();
        assert!((trace.rows[20].dist - 0.7f64.powi(20)).abs() <= 1e-15);
        assert!(tightness_construction(&plain, &[1.0], 5, 1).is_err());
    }

    #[test]
    fn tightness_matches_recursion_on_random_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let horizon = rng.random_range(1..=200);
            let dim = rng.random_range(2..6);
            let spec = random_spec(&mut rng, horizon);
            let mut w0: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = w0.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut w0 {
                *x *= spec.d0() / n;
            }
            let bound = recursion_bound(&spec, horizon).unwrap();
            for seed in [1, 2] {
                let trace = tightness_construction(&spec, &w0, horizon, seed).unwrap();
                for (row, b) in trace.rows.iter().zip(&bound.bound.values) {
                    let got = row.dist * row.dist;
                    assert!((got - b).abs() <= 1e-10 * b.max(1e-300), "{got} vs {b}");
                }
            }
        }
    }

    #[test]
    fn linear_verdicts() {
        let n = 10_000;
        let geo = RecursionSpec::constant(0.9, |t| 0.95f64.powi(t as i32), 1.0, n).unwrap();
        let v = linear_rate_iff_check(&geo);
        assert!(v.linear && v.envelope_linear && !v.hypothesis_violated);

        let harmonic = RecursionSpec::constant(0.9, |t| 1.0 / (t as f64 + 1.0), 1.0, n).unwrap();
        let v = linear_rate_iff_check(&harmonic);
        assert!(!v.linear && !v.envelope_linear);

        let creeping = RecursionSpec::new(
            (0..n).map(|t| 1.0 - 1.0 / (t as f64 + 2.0)).collect(),
            vec![0.0; n],
            1.0,
        )
        .unwrap();
        let v = linear_rate_iff_check(&creeping);
        assert!(!v.linear && !v.envelope_linear);

        let decreasing = RecursionSpec::new(vec![0.9, 0.5, 0.4], vec![0.0; 3], 1.0).unwrap();
        assert!(linear_rate_iff_check(&decreasing).hypothesis_violated);
    }

    proptest! {
        #[test]
        fn bounds_are_pure(c in 0.0f64..0.8, gap in 0.01f64..0.19, s in 0.0f64..3.0, d0 in 0.0f64..5.0) {
            let a = deterministic_bound(c, c + gap, 0.5, s, d0, 30).unwrap();
            let b = deterministic_bound(c, c + gap, 0.5, s, d0, 30).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn verdict_matches_envelope(c in 0.5f64..0.98, r in 0.95f64..0.999, poly in proptest::bool::ANY) {
            let n = 10_000;
            let spec = if poly {
                RecursionSpec::constant(c, |t| 1.0 / (t as f64 + 1.0), 1.0, n).unwrap()
            } else {
                RecursionSpec::constant(c, |t| r.powi(t as i32), 1.0, n).unwrap()
            };
            let v = linear_rate_iff_check(&spec);
            prop_assert_eq!(v.linear, v.envelope_linear);
        }
    }
}
