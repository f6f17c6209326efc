//! Frequent-communication engines: DEED-GD, A-DEED-GD, DEED-SGD and the
//! unquantized / constant-error baselines.

use rayon::prelude::*;
use serde::Serialize;

use super::{
    aggregate, check_replicas, diff_norm, encode, initial_point, norm, roundoff_floor, BitLedger,
    CountingMode, McRun, RoundStats, RunTrace, TraceRow,
};
use crate::error::{Error, Result};
use crate::problems::QuadraticProblem;
use crate::quantizer::DEFAULT_FLOAT_BITS;
use crate::rng::{self, Purpose};
use crate::theory::{self, AcceleratedConstants, BoundKind, BoundSeries};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeedParams {
    pub eta: f64,
    pub c_prime: f64,
    pub s: f64,
    pub iterations: usize,
    pub seed: u64,
    pub counting: CountingMode,
    pub float_bits: u32,
    pub w0: Option<Vec<f64>>,
}

impl DeedParams {
    pub fn new(eta: f64, c_prime: f64, s: f64, iterations: usize) -> Self {
        Self {
            eta,
            c_prime,
            s,
            iterations,
            seed: 0,
            counting: CountingMode::StarFull,
            float_bits: DEFAULT_FLOAT_BITS,
            w0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccelParams {
    pub c_prime: f64,
    pub s: f64,
    pub iterations: usize,
    pub seed: u64,
    pub counting: CountingMode,
    pub float_bits: u32,
    pub w0: Option<Vec<f64>>,
    /// Require `sqrt(1 - sqrt(mu/L)) < c'` and assert the envelope. When
    /// false only `1 - sqrt(mu/L) < c'` is required and no envelope is
    /// attached.
    pub strict: bool,
}

impl AccelParams {
    pub fn new(c_prime: f64, s: f64, iterations: usize) -> Self {
        Self {
            c_prime,
            s,
            iterations,
            seed: 0,
            counting: CountingMode::StarFull,
            float_bits: DEFAULT_FLOAT_BITS,
            w0: None,
            strict: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SgdParams {
    /// Certified weak-growth constant.
    pub rho: f64,
    pub c_prime: f64,
    pub s: f64,
    pub iterations: usize,
    pub seed: u64,
    pub mc_runs: usize,
    pub counting: CountingMode,
    pub float_bits: u32,
    pub w0: Option<Vec<f64>>,
}

impl SgdParams {
    pub fn new(rho: f64, c_prime: f64, s: f64, iterations: usize, mc_runs: usize) -> Self {
        Self {
            rho,
            c_prime,
            s,
            iterations,
            seed: 0,
            mc_runs,
            counting: CountingMode::StarFull,
            float_bits: DEFAULT_FLOAT_BITS,
            w0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineParams {
    /// Step size of the gradient baselines; the accelerated one uses `1/L`.
    pub eta: f64,
    pub iterations: usize,
    /// Absolute error per stage pair of the constant-error baseline.
    pub fixed_eps: f64,
    pub seed: u64,
    pub counting: CountingMode,
    pub float_bits: u32,
    pub w0: Option<Vec<f64>>,
}

impl BaselineParams {
    pub fn new(eta: f64, iterations: usize) -> Self {
        Self {
            eta,
            iterations,
            fixed_eps: 0.0,
            seed: 0,
            counting: CountingMode::StarFull,
            float_bits: DEFAULT_FLOAT_BITS,
            w0: None,
        }
    }
}

/// Workers, center mirrors and replicas of one double-encoded exchange.
struct Exchange<'a> {
    problem: &'a QuadraticProblem,
    seed: u64,
    float_bits: u32,
    /// `s^i` held by worker `i`.
    worker_s: Vec<Vec<f64>>,
    /// The center's copy of every `s^i`.
    mirrors: Vec<Vec<f64>>,
    center_v: Vec<f64>,
    worker_v: Vec<Vec<f64>>,
}

struct RoundOutput {
    v: Vec<f64>,
    uplink: u64,
    broadcast: u64,
    worker_fraction: f64,
    center_fraction: f64,
    max_payload: u64,
    scale: f64,
}

impl<'a> Exchange<'a> {
    fn new(problem: &'a QuadraticProblem, seed: u64, float_bits: u32) -> Self {
        let (n, d) = (problem.n(), problem.d());
        Self {
            problem,
            seed,
            float_bits,
            worker_s: vec![vec![0.0; d]; n],
            mirrors: vec![vec![0.0; d]; n],
            center_v: vec![0.0; d],
            worker_v: vec![vec![0.0; d]; n],
        }
    }

    /// Workers send `Q(g_i - s^i)`, the center aggregates its mirrors and
    /// broadcasts `Q(s - v)`. Every message has maximal error `stage_error`.
    fn round(&mut self, k: usize, grads: &[Vec<f64>], stage_error: f64) -> Result<RoundOutput> {
        let fraction = |norm: f64| if stage_error > 0.0 { norm / stage_error } else { 0.0 };
        let mut out = RoundOutput {
            v: Vec::new(),
            uplink: 0,
            broadcast: 0,
            worker_fraction: 0.0,
            center_fraction: 0.0,
            max_payload: 0,
            scale: 0.0,
        };
        for (i, g) in grads.iter().enumerate() {
            let mut rng = rng::stream(self.seed, i as u64, k as u64, Purpose::Quantize);
            let msg = encode(g, &self.worker_s[i], stage_error, self.float_bits, &mut rng)?;
            msg.apply(&mut self.worker_s[i]);
            msg.apply(&mut self.mirrors[i]);
            if self.worker_s[i] != self.mirrors[i] {
                return Err(Error::Precondition(format!("mirror of worker {i} diverged")));
            }
            out.uplink += msg.bits();
            out.max_payload = out.max_payload.max(msg.bits());
            out.worker_fraction = out.worker_fraction.max(fraction(msg.input_norm));
            out.scale = out.scale.max(norm(g)).max(norm(&self.worker_s[i]));
        }
        let refs: Vec<&[f64]> = self.mirrors.iter().map(Vec::as_slice).collect();
        let s = aggregate(self.problem.weights(), &refs);
        let mut rng = rng::stream(self.seed, rng::CENTER, k as u64, Purpose::Quantize);
        let msg = encode(&s, &self.center_v, stage_error, self.float_bits, &mut rng)?;
        msg.apply(&mut self.center_v);
        for replica in &mut self.worker_v {
            msg.apply(replica);
        }
        check_replicas(&self.center_v, &self.worker_v)?;
        out.broadcast = msg.bits();
        out.max_payload = out.max_payload.max(msg.bits());
        out.center_fraction = fraction(msg.input_norm);
        out.scale = out.scale.max(norm(&self.center_v));
        out.v = self.center_v.clone();
        Ok(out)
    }
}

fn row(problem: &QuadraticProblem, t: usize, w: &[f64], bits: (u64, u64, u64), budget: f64) -> TraceRow {
    TraceRow {
        t,
        dist: problem.dist(w),
        fgap: problem.fgap(w),
        bits_up: bits.0,
        bits_down: bits.1,
        cum_bits: bits.2,
        budget,
    }
}

fn stats(k: usize, budget: f64, v: &[f64], grads: &[Vec<f64>], problem: &QuadraticProblem, out: &RoundOutput) -> RoundStats {
    let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    let g = aggregate(problem.weights(), &refs);
    RoundStats {
        round: k,
        budget,
        residual: diff_norm(v, &g),
        roundoff: 16.0 * f64::EPSILON * (problem.d() as f64).sqrt() * out.scale,
        worker_fraction: out.worker_fraction,
        center_fraction: out.center_fraction,
        max_payload_bits: out.max_payload,
    }
}

fn step_all(replicas: &mut [Vec<f64>], eta: f64, v: &[f64]) {
    for w in replicas.iter_mut() {
        for (x, g) in w.iter_mut().zip(v) {
            *x -= eta * g;
        }
    }
}

fn gd_contraction(problem: &QuadraticProblem, eta: f64) -> Result<f64> {
    let limit = 2.0 / (problem.l() + problem.mu());
    if !(eta > 0.0 && eta <= limit * (1.0 + 1e-12)) {
        return Err(Error::Config(format!(
            "0 < eta <= 2/(L+mu) violated: eta = {eta}, 2/(L+mu) = {limit}"
        )));
    }
    Ok(1.0 - eta * problem.mu())
}

fn check_s(s: f64) -> Result<()> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::Config(format!("s >= 0 violated: s = {s}")));
    }
    Ok(())
}

fn assert_envelope(trace: &RunTrace, problem: &QuadraticProblem) -> Result<()> {
    if let Some((t, dist, bound)) = trace.first_violation(roundoff_floor(problem)) {
        return Err(Error::BoundViolation(format!(
            "{}: row t = {t} has distance {dist:e} above the envelope {bound:e}",
            trace.algorithm
        )));
    }
    Ok(())
}

/// DEED-GD: gradient differences and aggregate differences are both
/// quantized with maximal error `s c'^{k+1}/2` in round `k`.
///
/// Fails with a bound violation if any row leaves the distance envelope.
pub fn run_deed_gd(problem: &QuadraticProblem, params: &DeedParams) -> Result<RunTrace> {
    let trace = deed_gd_trace(problem, params)?;
    assert_envelope(&trace, problem)?;
    Ok(trace)
}

/// DEED-GD trace with its envelope attached but not asserted.
pub(crate) fn deed_gd_trace(problem: &QuadraticProblem, params: &DeedParams) -> Result<RunTrace> {
    let c = gd_contraction(problem, params.eta)?;
    check_s(params.s)?;
    let w0 = initial_point(problem, params.w0.as_deref())?;
    let d0 = problem.dist(&w0);
    let bound = theory::deterministic_bound(c, params.c_prime, params.eta, params.s, d0, params.iterations)?;

    let budget = |k: usize| params.s * params.c_prime.powi(k as i32 + 1);
    let n = problem.n();
    let mut replicas = vec![w0.clone(); n];
    let mut exchange = Exchange::new(problem, params.seed, params.float_bits);
    let mut ledger = BitLedger::new(params.counting);
    let mut rows = vec![row(problem, 0, &w0, (0, 0, 0), budget(0))];
    let mut rounds = Vec::with_capacity(params.iterations);
    for k in 0..params.iterations {
        let grads: Vec<Vec<f64>> = (0..n).map(|i| problem.full_grad(i, &replicas[i])).collect();
        let eps = budget(k);
        let out = exchange.round(k, &grads, eps / 2.0)?;
        rounds.push(stats(k, eps, &out.v, &grads, problem, &out));
        step_all(&mut replicas, params.eta, &out.v);
        check_replicas(&replicas[0], &replicas[1..])?;
        let bits = ledger.record(out.uplink, out.broadcast, n);
        rows.push(row(problem, k + 1, &replicas[0], bits, budget(k + 1)));
    }
    let mut trace = RunTrace::new("deed-gd", rows, params.counting);
    trace.rounds = rounds;
    trace.bound = Some(bound.series);
    Ok(trace)
}

/// Full-precision gradient descent; each message costs `F d` bits.
pub fn run_exact_gd(problem: &QuadraticProblem, params: &BaselineParams) -> Result<RunTrace> {
    let w0 = initial_point(problem, params.w0.as_deref())?;
    let n = problem.n();
    let message = u64::from(params.float_bits) * problem.d() as u64;
    let mut w = w0;
    let mut ledger = BitLedger::new(params.counting);
    let mut rows = vec![row(problem, 0, &w, (0, 0, 0), 0.0)];
    for k in 0..params.iterations {
        let grads: Vec<Vec<f64>> = (0..n).map(|i| problem.full_grad(i, &w)).collect();
        let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let g = aggregate(problem.weights(), &refs);
        for (x, gj) in w.iter_mut().zip(&g) {
            *x -= params.eta * gj;
        }
        let bits = ledger.record(message * n as u64, message, n);
        rows.push(row(problem, k + 1, &w, bits, 0.0));
    }
    Ok(RunTrace::new("gd", rows, params.counting))
}

fn momentum(problem: &QuadraticProblem) -> f64 {
    let (a, b) = (problem.l().sqrt(), problem.mu().sqrt());
    (a - b) / (a + b)
}

fn nesterov_step(x: &mut Vec<f64>, y: &mut [f64], eta: f64, tau: f64, v: &[f64]) {
    let x_new: Vec<f64> = y.iter().zip(v).map(|(yj, vj)| yj - eta * vj).collect();
    for ((yj, xn), xo) in y.iter_mut().zip(&x_new).zip(x.iter()) {
        *yj = xn + tau * (xn - xo);
    }
    *x = x_new;
}

/// Constants of the accelerated envelope for a run from `w0`.
pub(crate) fn accelerated_constants(problem: &QuadraticProblem, w0: &[f64], c_prime: f64, s: f64) -> Result<AcceleratedConstants> {
    let d0 = problem.dist(w0);
    let delta = problem.fgap(w0) + 0.5 * problem.mu() * d0 * d0;
    AcceleratedConstants::new(delta, problem.mu(), problem.l(), c_prime, s)
}

/// A-DEED-GD: DEED-GD's double encoding with Nesterov's momentum.
pub fn run_adeed_gd(problem: &QuadraticProblem, params: &AccelParams) -> Result<RunTrace> {
    let trace = adeed_gd_trace(problem, params)?;
    assert_envelope(&trace, problem)?;
    Ok(trace)
}

pub(crate) fn adeed_gd_trace(problem: &QuadraticProblem, params: &AccelParams) -> Result<RunTrace> {
    check_s(params.s)?;
    let w0 = initial_point(problem, params.w0.as_deref())?;
    let bound = if params.strict {
        let consts = accelerated_constants(problem, &w0, params.c_prime, params.s)?;
        Some(theory::accelerated_bound(&consts, params.iterations))
    } else {
        let floor = 1.0 - (problem.mu() / problem.l()).sqrt();
        if !(floor < params.c_prime && params.c_prime < 1.0) {
            return Err(Error::Config(format!(
                "1 - sqrt(mu/L) < c' < 1 violated: 1 - sqrt(mu/L) = {floor}, c' = {}",
                params.c_prime
            )));
        }
        None
    };

    let eta = 1.0 / problem.l();
    let tau = momentum(problem);
    let budget = |k: usize| params.s * params.c_prime.powi(k as i32 + 1);
    let n = problem.n();
    let mut xs = vec![w0.clone(); n];
    let mut ys = vec![w0.clone(); n];
    let mut exchange = Exchange::new(problem, params.seed, params.float_bits);
    let mut ledger = BitLedger::new(params.counting);
    let mut rows = vec![row(problem, 0, &w0, (0, 0, 0), budget(0))];
    let mut rounds = Vec::with_capacity(params.iterations);
    for k in 0..params.iterations {
        let grads: Vec<Vec<f64>> = (0..n).map(|i| problem.full_grad(i, &ys[i])).collect();
        let eps = budget(k);
        let out = exchange.round(k, &grads, eps / 2.0)?;
        rounds.push(stats(k, eps, &out.v, &grads, problem, &out));
        for (x, y) in xs.iter_mut().zip(ys.iter_mut()) {
            nesterov_step(x, y, eta, tau, &out.v);
        }
        check_replicas(&xs[0], &xs[1..])?;
        let bits = ledger.record(out.uplink, out.broadcast, n);
        rows.push(row(problem, k + 1, &xs[0], bits, budget(k + 1)));
    }
    let mut trace = RunTrace::new("a-deed-gd", rows, params.counting);
    trace.rounds = rounds;
    trace.bound = bound;
    Ok(trace)
}

/// Full-precision Nesterov method with `eta = 1/L`.
pub fn run_exact_agd(problem: &QuadraticProblem, params: &BaselineParams) -> Result<RunTrace> {
    let w0 = initial_point(problem, params.w0.as_deref())?;
    let n = problem.n();
    let eta = 1.0 / problem.l();
    let tau = momentum(problem);
    let message = u64::from(params.float_bits) * problem.d() as u64;
    let mut x = w0.clone();
    let mut y = w0;
    let mut ledger = BitLedger::new(params.counting);
    let mut rows = vec![row(problem, 0, &x, (0, 0, 0), 0.0)];
    for k in 0..params.iterations {
        let grads: Vec<Vec<f64>> = (0..n).map(|i| problem.full_grad(i, &y)).collect();
        let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let g = aggregate(problem.weights(), &refs);
        nesterov_step(&mut x, &mut y, eta, tau, &g);
        let bits = ledger.record(message * n as u64, message, n);
        rows.push(row(problem, k + 1, &x, bits, 0.0));
    }
    Ok(RunTrace::new("agd", rows, params.counting))
}

/// Gradient descent whose gradients are quantized directly (not their
/// differences) with constant error `fixed_eps/2` per stage.
///
/// The attached envelope is the square root of the recursion envelope
/// with constant noise `eta * fixed_eps`.
pub fn run_const_error_gd(problem: &QuadraticProblem, params: &BaselineParams) -> Result<RunTrace> {
    let c = gd_contraction(problem, params.eta)?;
    if !(params.fixed_eps >= 0.0 && params.fixed_eps.is_finite()) {
        return Err(Error::Config(format!(
            "fixed_eps >= 0 violated: fixed_eps = {}",
            params.fixed_eps
        )));
    }
    let w0 = initial_point(problem, params.w0.as_deref())?;
    let d0 = problem.dist(&w0);
    let n = problem.n();
    let d = problem.d();
    let stage = params.fixed_eps / 2.0;
    let zero = vec![0.0; d];
    let mut w = w0;
    let mut ledger = BitLedger::new(params.counting);
    let mut rows = vec![row(problem, 0, &w, (0, 0, 0), params.fixed_eps)];
    for k in 0..params.iterations {
        let mut uplink = 0;
        let mut received = Vec::with_capacity(n);
        for i in 0..n {
            let g = problem.full_grad(i, &w);
            let mut rng = rng::stream(params.seed, i as u64, k as u64, Purpose::Quantize);
            let msg = encode(&g, &zero, stage, params.float_bits, &mut rng)?;
            let mut value = zero.clone();
            msg.apply(&mut value);
            uplink += msg.bits();
            received.push(value);
        }
        let refs: Vec<&[f64]> = received.iter().map(Vec::as_slice).collect();
        let s = aggregate(problem.weights(), &refs);
        let mut rng = rng::stream(params.seed, rng::CENTER, k as u64, Purpose::Quantize);
        let msg = encode(&s, &zero, stage, params.float_bits, &mut rng)?;
        let mut u = zero.clone();
        msg.apply(&mut u);
        for (x, g) in w.iter_mut().zip(&u) {
            *x -= params.eta * g;
        }
        let bits = ledger.record(uplink, msg.bits(), n);
        rows.push(row(problem, k + 1, &w, bits, params.fixed_eps));
    }
    let envelope = theory::const_error_envelope(c, params.eta, params.fixed_eps, d0, params.iterations)?;
    let mut trace = RunTrace::new("const-quant-gd", rows, params.counting);
    trace.bound = Some(BoundSeries {
        kind: BoundKind::Distance,
        values: envelope.bound.values.iter().map(|v| v.sqrt()).collect(),
    });
    Ok(trace)
}

fn sgd_replicate(problem: &QuadraticProblem, params: &SgdParams, eta: f64, seed: u64, w0: &[f64]) -> Result<RunTrace> {
    let budget = |k: usize| (params.s * params.c_prime.powi(k as i32 + 1)).sqrt();
    let n = problem.n();
    let mut replicas = vec![w0.to_vec(); n];
    let mut exchange = Exchange::new(problem, seed, params.float_bits);
    let mut ledger = BitLedger::new(params.counting);
    let mut rows = vec![row(problem, 0, w0, (0, 0, 0), budget(0))];
    let mut rounds = Vec::with_capacity(params.iterations);
    for k in 0..params.iterations {
        let grads: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut rng = rng::stream(seed, i as u64, k as u64, Purpose::RowSample);
                problem.stochastic_grad(i, &replicas[i], &mut rng)
            })
            .collect();
        let eps = budget(k);
        let out = exchange.round(k, &grads, eps / 2.0)?;
        rounds.push(stats(k, eps, &out.v, &grads, problem, &out));
        step_all(&mut replicas, eta, &out.v);
        check_replicas(&replicas[0], &replicas[1..])?;
        let bits = ledger.record(out.uplink, out.broadcast, n);
        rows.push(row(problem, k + 1, &replicas[0], bits, budget(k + 1)));
    }
    let mut trace = RunTrace::new("deed-sgd", rows, params.counting);
    trace.rounds = rounds;
    Ok(trace)
}

/// DEED-SGD on single-row stochastic gradients with `eta = 1/(rho L)` and
/// maximal error `sqrt(s c'^{k+1})/2` per stage. Replicates run in parallel
/// with seeds derived from `params.seed`.
pub fn run_deed_sgd(problem: &QuadraticProblem, params: &SgdParams) -> Result<McRun> {
    if !problem.is_interpolating() {
        return Err(Error::Precondition(
            "DEED-SGD needs an interpolating problem".into(),
        ));
    }
    if !(params.rho >= 1.0 && params.rho.is_finite()) {
        return Err(Error::Config(format!("rho >= 1 violated: rho = {}", params.rho)));
    }
    check_s(params.s)?;
    if params.mc_runs == 0 {
        return Err(Error::Config("mc_runs >= 1 violated: mc_runs = 0".into()));
    }
    let eta = 1.0 / (params.rho * problem.l());
    let c = 1.0 - eta * problem.mu();
    let w0 = initial_point(problem, params.w0.as_deref())?;
    let bound = theory::sgd_bound(c, params.c_prime, eta, params.s, problem.dist(&w0), params.iterations)?;
    let traces = (0..params.mc_runs)
        .into_par_iter()
        .map(|r| sgd_replicate(problem, params, eta, rng::replicate_seed(params.seed, r as u64), &w0))
        .collect::<Result<Vec<_>>>()?;
    Ok(McRun {
        traces,
        bound,
        checked_rows: (0..=params.iterations).collect(),
    })
}
