//! The acceptance suite. Each criterion runs from a fixed master seed and
//! reports pass/fail, a human-readable detail line and a digest of every
//! artifact it produced, so reruns can be compared byte for byte.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bitstream::{decode_sparse, encode_sparse};
use crate::distributed::{
    accelerated_constants, adeed_gd_trace, fed_envelope, run_adeed_gd, run_const_error_gd, run_deed_fed,
    run_deed_gd, run_deed_sgd, run_exact_agd, run_exact_gd, roundoff_floor, AccelParams, BaselineParams,
    DeedParams, FedParams, McRun, RunTrace, SgdParams,
};
use crate::error::{Error, Result};
use crate::problems::{estimate_rho, make_linreg, LinRegSpec, Participation, QuadraticProblem};
use crate::quantizer::{bits_lower_bound, bits_upper_bound, dequantize, quantize, QuantSpec, QuantizedMessage};
use crate::rng::{self, Purpose};
use crate::theory::{self, log_linear_fit, recursion_bound, tightness_construction, RecursionSpec};

pub const MASTER_SEED: u64 = 20_240_601;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Codec,
    Bounds,
    Tightness,
    Gd,
    Sgd,
    Fed,
    Accel,
    All,
}

impl Suite {
    pub const TAGS: [&'static str; 8] = ["codec", "bounds", "tightness", "gd", "sgd", "fed", "accel", "all"];

    /// Criteria run by the suite; `All` adds the determinism rerun.
    pub fn criteria(self) -> &'static [u8] {
        match self {
            Suite::Codec => &[1],
            Suite::Bounds => &[2],
            Suite::Tightness => &[3],
            Suite::Gd => &[4, 5, 11],
            Suite::Accel => &[6, 7, 8],
            Suite::Sgd => &[9],
            Suite::Fed => &[10],
            Suite::All => &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11],
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "codec" => Suite::Codec,
            "bounds" => Suite::Bounds,
            "tightness" => Suite::Tightness,
            "gd" => Suite::Gd,
            "sgd" => Suite::Sgd,
            "fed" => Suite::Fed,
            "accel" => Suite::Accel,
            "all" => Suite::All,
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown suite {other:?}; expected one of {}",
                    Suite::TAGS.join(", ")
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionReport {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
    /// SHA-256 over the criterion's artifacts.
    pub digest: String,
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} criterion {:>2} {}: {} ({:.2} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

/// Artifact digest and the facts a criterion establishes.
struct Check {
    hasher: Sha256,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Check {
    fn new() -> Self {
        Self {
            hasher: Sha256::new(),
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn absorb(&mut self, artifact: &str) {
        self.hasher.update(artifact.as_bytes());
        self.hasher.update([0u8]);
    }

    fn trace(&mut self, trace: &RunTrace) {
        self.absorb(&trace.to_csv());
        if let Some(b) = &trace.bound {
            self.absorb(&b.to_csv());
        }
    }

    fn mc(&mut self, run: &McRun) {
        self.absorb(&run.mc_csv());
        for t in &run.traces {
            self.absorb(&t.to_csv());
        }
    }

    fn require(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }
}

fn finish(id: u8, name: &'static str, start: Instant, limit: Option<f64>, outcome: Result<Check>) -> CriterionReport {
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok(mut check) => {
            if let Some(limit) = limit {
                check.require(seconds < limit, format!("runtime {seconds:.1} s exceeds {limit} s"));
            }
            let digest = check.hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
            let passed = check.failures.is_empty();
            let mut parts = check.failures;
            parts.extend(check.notes);
            CriterionReport {
                id,
                name,
                passed,
                detail: parts.join("; "),
                seconds,
                digest,
            }
        }
        Err(e) => CriterionReport {
            id,
            name,
            passed: false,
            detail: format!("error: {e}"),
            seconds,
            digest: String::new(),
        },
    }
}

fn kappa_problem(kappa: f64) -> Result<QuadraticProblem> {
    make_linreg(&LinRegSpec::new(MASTER_SEED, 100, 10, kappa, 100))
}

fn scalar_problem() -> Result<QuadraticProblem> {
    // f(w) = w^2 / 2
    QuadraticProblem::from_nodes(
        vec![(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 0.0))],
        None,
    )
}

fn theory_eta(p: &QuadraticProblem) -> f64 {
    2.0 / (p.l() + p.mu())
}

fn experiment_eta(p: &QuadraticProblem) -> f64 {
    1.0 / p.l()
}

fn above(c: f64) -> f64 {
    c + 0.1 * (1.0 - c)
}

fn accel_rate(p: &QuadraticProblem) -> f64 {
    (1.0 - (p.mu() / p.l()).sqrt()).sqrt()
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn codec() -> Result<Check> {
    let mut check = Check::new();
    let mut rng = rng::stream(MASTER_SEED, rng::GLOBAL, 1, Purpose::Construction);
    let (mut violations, mut wire_failures, mut sparse_failures, mut worst) = (0, 0, 0, 0.0f64);
    for _ in 0..10_000 {
        let d = rng.random_range(1..=1000);
        let eps = 10f64.powf(rng.random_range(-6.0..2.0));
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let w: Vec<f64> = (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let spec = QuantSpec::new(eps, d)?;
        let msg = quantize(&w, &spec, &mut rng)?;
        let u = dequantize(&msg);
        let err = norm_diff(&u, &w);
        worst = worst.max(err / eps);
        if err > eps {
            violations += 1;
        }
        let back = QuantizedMessage::from_wire(&msg.to_wire(), spec.float_bits())?;
        if dequantize(&back) != u {
            wire_failures += 1;
        }
        if let Some(grid) = msg.grid() {
            if &decode_sparse(&encode_sparse(grid), d)? != grid {
                sparse_failures += 1;
            }
        }
        check.absorb(&format!("{d},{},{:.16e}", msg.bits(), err));
    }
    check.require(violations == 0, format!("{violations} error-bound violations"));
    check.require(wire_failures == 0, format!("{wire_failures} wire roundtrip failures"));
    check.require(sparse_failures == 0, format!("{sparse_failures} sparse roundtrip failures"));
    check.note(format!("10000 trials, worst |u - w|/eps = {worst:.4}"));

    let m = 100_000;
    let mut worst_ratio = 0.0f64;
    for dim in [1usize, 4, 10] {
        let w: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let spec = QuantSpec::new(0.3, dim)?;
        let mut sums = vec![0.0; dim];
        for _ in 0..m {
            for (s, x) in sums.iter_mut().zip(dequantize(&quantize(&w, &spec, &mut rng)?)) {
                *s += x;
            }
        }
        let tol = 5.0 * (spec.grid_step() / 2.0) / (m as f64).sqrt();
        for (s, x) in sums.iter().zip(&w) {
            let dev = (s / m as f64 - x).abs();
            worst_ratio = worst_ratio.max(dev / tol);
            check.absorb(&format!("{dev:.16e}"));
        }
    }
    check.require(worst_ratio <= 1.0, format!("sample mean outside Hoeffding tolerance ({worst_ratio:.3})"));
    check.note(format!("mean deviation at {:.0}% of tolerance", 100.0 * worst_ratio));
    Ok(check)
}

fn bit_bound_values() -> Result<Check> {
    let mut check = Check::new();
    let lower = bits_lower_bound(2, 0.25);
    let upper = bits_upper_bound(2, 0.25);
    check.require(lower == 4, format!("lower(2, 0.25) = {lower}, want 4"));
    check.require(upper == 8, format!("upper(2, 0.25) = {upper}, want 8"));
    for (d, rel) in [(2, 1.0), (2, 3.0), (100, 1.0), (7, 50.0)] {
        let got = bits_lower_bound(d, rel);
        check.require(got == 0, format!("lower({d}, {rel}) = {got}, want 0"));
        check.absorb(&got.to_string());
    }
    check.absorb(&format!("{lower},{upper}"));
    check.note(format!("lower = {lower}, upper = {upper}"));
    Ok(check)
}

fn tightness() -> Result<Check> {
    let mut check = Check::new();
    let mut rng = rng::stream(MASTER_SEED, rng::GLOBAL, 3, Purpose::Construction);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let horizon = rng.random_range(1..=200);
        let dim = rng.random_range(2..=10);
        let c: Vec<f64> = (0..horizon).map(|_| rng.random_range(0.05..0.999)).collect();
        let a: Vec<f64> = (0..horizon).map(|_| rng.random_range(0.0..2.0)).collect();
        let spec = RecursionSpec::new(c, a, rng.random_range(0.1..10.0))?;
        let mut w0: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = w0.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut w0 {
            *x *= spec.d0() / n;
        }
        let bound = recursion_bound(&spec, horizon)?;
        for seed in [1, 2] {
            let trace = tightness_construction(&spec, &w0, horizon, seed)?;
            for (row, b) in trace.rows.iter().zip(&bound.bound.values) {
                worst = worst.max((row.dist * row.dist - b).abs() / b.max(f64::MIN_POSITIVE));
            }
            check.trace(&trace);
        }
    }
    check.require(worst <= 1e-10, format!("relative deviation {worst:e} above 1e-10"));
    check.note(format!("100 specs x 2 signs, max relative deviation {worst:.2e}"));
    Ok(check)
}

fn deed_envelope() -> Result<Check> {
    let mut check = Check::new();
    let scalar = scalar_problem()?;
    let mut params = DeedParams::new(theory_eta(&scalar), 0.5, 1.0, 60);
    params.w0 = Some(vec![1.0]);
    params.seed = MASTER_SEED;
    let trace = run_deed_gd(&scalar, &params)?;
    check.require(trace.first_budget_violation().is_none(), "scalar run breaks the error budget");
    check.trace(&trace);

    let p = kappa_problem(16.0)?;
    let eta = theory_eta(&p);
    let mut params = DeedParams::new(eta, above(1.0 - eta * p.mu()), 0.01, 200);
    params.seed = MASTER_SEED;
    let trace = run_deed_gd(&p, &params)?;
    if let Some(r) = trace.first_budget_violation() {
        check.require(false, format!("round {} residual {:e} > budget {:e}", r.round, r.residual, r.budget));
    }
    check.trace(&trace);
    let margin = trace
        .rows
        .iter()
        .zip(&trace.bound.as_ref().expect("envelope attached").values)
        .map(|(r, b)| r.dist / b)
        .fold(0.0, f64::max);
    check.require(trace.first_violation(0.0).is_none(), "kappa=16 run needs the roundoff allowance");
    check.note(format!("scalar and kappa=16 envelopes hold, max dist/bound = {margin:.3}"));
    Ok(check)
}

fn lossless_match() -> Result<Check> {
    let mut check = Check::new();
    let p = kappa_problem(16.0)?;
    for eta in [theory_eta(&p), experiment_eta(&p)] {
        let mut params = DeedParams::new(eta, above(1.0 - eta * p.mu()), 0.0, 200);
        params.seed = MASTER_SEED;
        let deed = run_deed_gd(&p, &params)?;
        let gd = run_exact_gd(&p, &BaselineParams::new(eta, 200))?;
        check.require(deed.rows == gd.rows && deed.to_csv() == gd.to_csv(), format!("s = 0 DEED-GD differs from GD at eta = {eta}"));
        check.trace(&deed);
    }
    let mut params = AccelParams::new(above(accel_rate(&p)), 0.0, 200);
    params.seed = MASTER_SEED;
    let adeed = run_adeed_gd(&p, &params)?;
    let agd = run_exact_agd(&p, &BaselineParams::new(experiment_eta(&p), 200))?;
    check.require(adeed.rows == agd.rows && adeed.to_csv() == agd.to_csv(), "s = 0 A-DEED-GD differs from A-GD");
    check.trace(&adeed);
    check.note("DEED-GD (both step sizes) and A-DEED-GD identical to their baselines");
    Ok(check)
}

/// Largest `|a - b| / b` over f-gaps after `skip`, and the first row where it
/// exceeds `tol`.
fn deviation(run: &RunTrace, base: &RunTrace, skip: usize, tol: f64) -> (f64, usize, Option<(usize, f64)>) {
    let mut worst = (0.0, 0);
    let mut first = None;
    for (a, b) in run.rows.iter().zip(&base.rows).filter(|(a, _)| a.t > skip) {
        let rel = (a.fgap - b.fgap).abs() / b.fgap;
        if rel > worst.0 {
            worst = (rel, a.t);
        }
        if rel > tol && first.is_none() {
            first = Some((a.t, b.fgap));
        }
    }
    (worst.0, worst.1, first)
}

fn coincidence() -> Result<Check> {
    let mut check = Check::new();
    let p = kappa_problem(16.0)?;
    let eta = experiment_eta(&p);

    let mut params = DeedParams::new(eta, 0.95, 0.01, 800);
    params.seed = MASTER_SEED;
    let deed = run_deed_gd(&p, &params)?;
    let gd = run_exact_gd(&p, &BaselineParams::new(eta, 800))?;
    let (worst, at, first) = deviation(&deed, &gd, 10, 0.05);
    check.require(worst <= 0.05, format!("DEED-GD deviation {:.1}% at t = {at}", 100.0 * worst));
    if let Some((t, fgap)) = first {
        check.note(format!("DEED-GD first exceeds 5% at t = {t} (GD f-gap {fgap:.1e})"));
    }
    check.trace(&deed);

    let mut params = AccelParams::new(0.82, 0.1, 200);
    params.seed = MASTER_SEED;
    params.strict = false;
    let adeed = run_adeed_gd(&p, &params)?;
    let agd = run_exact_agd(&p, &BaselineParams::new(eta, 200))?;
    let (worst, at, first) = deviation(&adeed, &agd, 10, 0.05);
    check.require(worst <= 0.05, format!("A-DEED-GD deviation {:.1}% at t = {at}", 100.0 * worst));
    if let Some((t, fgap)) = first {
        check.note(format!("A-DEED-GD first exceeds 5% at t = {t} (A-GD f-gap {fgap:.1e})"));
    }
    check.trace(&adeed);
    Ok(check)
}

/// `fixed_eps` of the constant-error baseline in the bits comparison.
pub const CONST_EPS: f64 = 0.1;

fn ordering() -> Result<Check> {
    let mut check = Check::new();
    let p = kappa_problem(16.0)?;
    let eta = experiment_eta(&p);
    let target = 1e-6;

    let mut params = DeedParams::new(eta, 0.95, 0.01, 800);
    params.seed = MASTER_SEED;
    let deed = run_deed_gd(&p, &params)?;
    let mut params = AccelParams::new(0.82, 0.1, 200);
    params.seed = MASTER_SEED;
    params.strict = false;
    let adeed = adeed_gd_trace(&p, &params)?;
    let gd = run_exact_gd(&p, &BaselineParams::new(eta, 800))?;
    let mut base = BaselineParams::new(eta, 800);
    base.fixed_eps = CONST_EPS;
    base.seed = MASTER_SEED;
    let constant = run_const_error_gd(&p, &base)?;

    let bits = |t: &RunTrace| t.first_below(target).map(|r| r.cum_bits);
    let (a, d, g) = (bits(&adeed), bits(&deed), bits(&gd));
    match (a, d, g) {
        (Some(a), Some(d), Some(g)) => {
            check.require(a < d && d < g, format!("bits to 1e-6: A-DEED {a}, DEED {d}, GD {g} out of order"));
            check.note(format!("bits to 1e-6: A-DEED {a} < DEED {d} < GD {g}"));
        }
        _ => check.require(false, format!("threshold unreached: A-DEED {a:?}, DEED {d:?}, GD {g:?}")),
    }
    let floor = constant.rows.iter().map(|r| r.fgap).fold(f64::INFINITY, f64::min);
    check.require(constant.first_below(target).is_none(), "constant-error baseline reaches 1e-6");
    if let Some((t, dist, b)) = constant.first_violation(roundoff_floor(&p)) {
        check.require(false, format!("constant-error row {t}: {dist:e} above envelope {b:e}"));
    }
    check.note(format!("constant-error plateau, smallest f-gap {floor:.2e}"));
    for t in [&deed, &adeed, &gd, &constant] {
        check.trace(t);
    }
    Ok(check)
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn rate_separation() -> Result<Check> {
    let mut check = Check::new();
    let target = 1e-8;
    let (mut kappas, mut deed_iters, mut accel_iters) = (Vec::new(), Vec::new(), Vec::new());
    for kappa in [16.0, 64.0, 256.0] {
        let p = kappa_problem(kappa)?;
        let eta = theory_eta(&p);
        let c_prime = above(1.0 - eta * p.mu());
        let mut params = DeedParams::new(eta, c_prime, 0.01, (40.0 / (1.0 - c_prime)).ceil() as usize);
        params.seed = MASTER_SEED;
        let deed = run_deed_gd(&p, &params)?;
        let c_prime = above(accel_rate(&p));
        let mut params = AccelParams::new(c_prime, 0.01, (40.0 / (1.0 - c_prime)).ceil() as usize);
        params.seed = MASTER_SEED;
        let accel = run_adeed_gd(&p, &params)?;
        let (Some(a), Some(b)) = (deed.first_below(target), accel.first_below(target)) else {
            check.require(false, format!("kappa = {kappa}: 1e-8 unreached"));
            continue;
        };
        kappas.push(p.kappa().ln());
        deed_iters.push((a.t as f64).ln());
        accel_iters.push((b.t as f64).ln());
        check.note(format!("kappa {kappa}: DEED {} / A-DEED {} iterations", a.t, b.t));
        check.trace(&deed);
        check.trace(&accel);
    }
    if kappas.len() == 3 {
        let (sd, sa) = (slope(&kappas, &deed_iters), slope(&kappas, &accel_iters));
        check.require((sd - 1.0).abs() <= 0.2, format!("DEED-GD slope {sd:.3} not within 1.0 +- 0.2"));
        check.require((sa - 0.5).abs() <= 0.2, format!("A-DEED-GD slope {sa:.3} not within 0.5 +- 0.2"));
        check.notes.insert(0, format!("slopes {sd:.3} (DEED-GD), {sa:.3} (A-DEED-GD)"));
    }
    Ok(check)
}

fn sgd() -> Result<Check> {
    let mut check = Check::new();
    let p = make_linreg(&LinRegSpec::new(MASTER_SEED, 20, 5, 8.0, 20).interpolating(true))?;
    let mut rng = rng::stream(MASTER_SEED, rng::GLOBAL, 0, Purpose::Estimation);
    let rho = estimate_rho(&p, 256, &mut rng)?;
    let c = 1.0 - p.mu() / (rho * p.l());
    let mut params = SgdParams::new(rho, above(c), 0.01, 500, 30);
    params.seed = MASTER_SEED;
    let run = run_deed_sgd(&p, &params)?;
    if let Some(r) = run.first_violation() {
        check.require(false, format!("t = {}: mean {:e} > bound {:e} + 3 SE {:e}", r.t, r.mean_sq, r.bound, r.std_err));
    }
    let summary = run.summary();
    let half = summary.len() / 2;
    let logs: Vec<f64> = summary[half..].iter().map(|r| r.mean_sq.ln()).collect();
    let (fit, r2) = log_linear_fit(half, &logs);
    check.require(fit <= -1e-3 && r2 >= 0.99, format!("log-linear fit slope {fit:.3e}, R^2 {r2:.4}"));
    check.note(format!("rho = {rho:.3}, 30 seeds; log-mean slope {fit:.3e} per step, R^2 {r2:.4}"));
    check.mc(&run);
    Ok(check)
}

fn fed() -> Result<Check> {
    let mut check = Check::new();
    let p = make_linreg(&LinRegSpec::new(MASTER_SEED, 10, 8, 4.0, 20).noise(0.1))?;
    let beta = 2.0 / p.min_node_mu();
    let local_steps = 5;
    let gamma = (4.0 * beta * p.l()).max(local_steps as f64);
    let base = |participation: Participation, k: usize| {
        let mut params = FedParams::new(local_steps, beta, gamma, 0.01, 40);
        params.participation = participation;
        params.k = k;
        params.seed = MASTER_SEED;
        params.mc_runs = 30;
        params
    };
    let mut full_traces = None;
    for (participation, k) in [
        (Participation::Full, p.n()),
        (Participation::WithReplacement, 4),
        (Participation::WithoutReplacement, 4),
        (Participation::WithoutReplacement, p.n()),
    ] {
        let params = base(participation, k);
        let (consts, bound) = fed_envelope(&p, &params)?;
        let mu = p.min_node_mu();
        let d0 = p.dist(&vec![0.0; p.d()]);
        let v = (beta * beta * (consts.b + consts.c + 0.01f64.powi(2)) / (beta * mu - 1.0)).max(gamma * d0 * d0);
        check.require(v == bound.v, format!("{participation:?}: v = {} differs from assembled {v}", bound.v));
        check.require(consts.b == consts.b_from_parts() && consts.c == consts.c_from_parts(), "B or C not assembled from parts");
        let run = run_deed_fed(&p, &params)?;
        if let Some(r) = run.first_violation() {
            check.require(false, format!("{participation:?} K = {k}: t = {} mean {:e} > v/(gamma+t) {:e} + 3 SE", r.t, r.mean_sq, r.bound));
        }
        match (participation, k == p.n()) {
            (Participation::Full, _) => {
                check.require(consts.c == 0.0, "full participation has C != 0");
                full_traces = Some(run.traces.clone());
            }
            (Participation::WithoutReplacement, true) => {
                check.require(consts.c == 0.0, format!("K = N without replacement has C = {}", consts.c));
                check.require(Some(&run.traces) == full_traces.as_ref(), "K = N without replacement differs from full participation");
            }
            _ => {}
        }
        let worst = run.summary().iter().filter(|r| r.t % local_steps == 0).map(|r| r.mean_sq / r.bound).fold(0.0, f64::max);
        check.note(format!("{participation:?} K={k}: C = {:.3e}, max mean/bound {worst:.2e}", consts.c));
        check.mc(&run);
    }
    Ok(check)
}

/// The fraction bound assumes exact arithmetic; runs are kept short enough
/// that every stage budget stays above the rounding error of its inputs.
fn above_roundoff(check: &mut Check, trace: &RunTrace, name: &str) {
    if let Some(r) = trace.rounds.iter().find(|r| r.budget / 2.0 <= r.roundoff) {
        check.require(false, format!("{name} round {} budget {:e} below roundoff {:e}", r.round, r.budget, r.roundoff));
    }
}

fn bits_bounded() -> Result<Check> {
    let mut check = Check::new();
    let p = kappa_problem(16.0)?;
    let d = p.d();
    let eta = theory_eta(&p);
    let c = 1.0 - eta * p.mu();
    let c_prime = above(c);
    let s = 0.01;
    let mut params = DeedParams::new(eta, c_prime, s, 200);
    params.seed = MASTER_SEED;
    let trace = run_deed_gd(&p, &params)?;
    above_roundoff(&mut check, &trace, "DEED-GD");
    let d0 = p.dist(&vec![0.0; d]);
    let zeta = theory::zeta_bits(c_prime, eta, s, p.l(), theory::xi_s(c, c_prime, eta, s, d0))?;
    let cap = 4 * bits_upper_bound(d, 1.0 / zeta);
    let (mut frac, mut payload) = (0.0f64, 0u64);
    for r in trace.rounds.iter().filter(|r| r.round >= 1) {
        frac = frac.max(r.worker_fraction).max(r.center_fraction);
        payload = payload.max(r.max_payload_bits);
    }
    check.require(frac <= zeta, format!("DEED-GD fraction {frac:.3} > zeta {zeta:.3}"));
    check.require(payload <= cap, format!("DEED-GD payload {payload} > {cap}"));
    check.note(format!("DEED-GD fraction {frac:.2} <= {zeta:.2}, payload {payload} <= {cap}"));
    check.trace(&trace);

    let c_prime = above(accel_rate(&p));
    let mut params = AccelParams::new(c_prime, s, 200);
    params.seed = MASTER_SEED;
    let trace = run_adeed_gd(&p, &params)?;
    above_roundoff(&mut check, &trace, "A-DEED-GD");
    let consts = accelerated_constants(&p, &vec![0.0; d], c_prime, s)?;
    let (zw, zc) = consts.zeta();
    let cap = 4 * bits_upper_bound(d, 1.0 / zw.max(zc));
    let (mut fw, mut fc, mut payload) = (0.0f64, 0.0f64, 0u64);
    for r in trace.rounds.iter().filter(|r| r.round >= 1) {
        fw = fw.max(r.worker_fraction);
        fc = fc.max(r.center_fraction);
        payload = payload.max(r.max_payload_bits);
    }
    check.require(fw <= zw && fc <= zc, format!("A-DEED-GD fractions {fw:.3}/{fc:.3} > zeta {zw:.3}/{zc:.3}"));
    check.require(payload <= cap, format!("A-DEED-GD payload {payload} > {cap}"));
    check.note(format!("A-DEED-GD fractions {fw:.2}/{fc:.2} <= {zw:.2}/{zc:.2}, payload {payload} <= {cap}"));
    check.trace(&trace);
    Ok(check)
}

pub fn criterion_name(id: u8) -> &'static str {
    match id {
        1 => "codec contract",
        2 => "bit-bound calculators",
        3 => "recursion tightness",
        4 => "DEED-GD envelope",
        5 => "lossless degeneracy",
        6 => "baseline coincidence",
        7 => "bits ordering",
        8 => "rate separation",
        9 => "DEED-SGD envelope",
        10 => "DEED-Fed envelope",
        11 => "bits per round",
        12 => "determinism",
        _ => "unknown",
    }
}

/// Runs one criterion from 1 to 11.
pub fn run_criterion(id: u8) -> CriterionReport {
    let start = Instant::now();
    let (outcome, limit) = match id {
        1 => (codec(), Some(60.0)),
        2 => (bit_bound_values(), None),
        3 => (tightness(), Some(10.0)),
        4 => (deed_envelope(), Some(30.0)),
        5 => (lossless_match(), None),
        6 => (coincidence(), Some(120.0)),
        7 => (ordering(), None),
        8 => (rate_separation(), Some(300.0)),
        9 => (sgd(), Some(120.0)),
        10 => (fed(), Some(180.0)),
        11 => (bits_bounded(), None),
        other => (Err(Error::InvalidInput(format!("no criterion {other}"))), None),
    };
    finish(id, criterion_name(id), start, limit, outcome)
}

/// Reruns every report and compares digests.
pub fn determinism(first: &[CriterionReport]) -> CriterionReport {
    let start = Instant::now();
    let mut check = Check::new();
    for report in first {
        let again = run_criterion(report.id);
        check.absorb(&again.digest);
        check.require(
            !report.digest.is_empty() && again.digest == report.digest,
            format!("criterion {} not reproducible", report.id),
        );
    }
    check.note(format!("{} criteria rerun with identical digests", first.len()));
    finish(12, criterion_name(12), start, None, Ok(check))
}

pub fn run_suite(suite: Suite) -> Vec<CriterionReport> {
    let mut reports: Vec<CriterionReport> = suite.criteria().iter().map(|&id| run_criterion(id)).collect();
    if suite == Suite::All {
        let det = determinism(&reports);
        reports.push(det);
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_tags_parse() {
        for tag in Suite::TAGS {
            assert!(tag.parse::<Suite>().is_ok());
        }
        assert!("everything".parse::<Suite>().is_err());
    }

    #[test]
    fn cheap_criteria_pass_and_repeat() {
        let a = run_criterion(2);
        let b = run_criterion(2);
        assert!(a.passed, "{a}");
        assert_eq!(a.digest, b.digest);
    }
}
