//! DEED-Fed: local SGD with double-encoded synchronization every `E` steps.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{aggregate, check_replicas, encode, initial_point, BitLedger, CountingMode, McRun, RunTrace, TraceRow};
use crate::error::{Error, Result};
use crate::problems::{estimate_fed_constants, FedConstants, Participation, QuadraticProblem};
use crate::quantizer::DEFAULT_FLOAT_BITS;
use crate::rng::{self, Purpose};
use crate::theory::{self, FedBound};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FedParams {
    pub local_steps: usize,
    pub beta: f64,
    pub gamma: f64,
    pub s: f64,
    /// Number of synchronizations; the run has `rounds * local_steps` steps.
    pub rounds: usize,
    pub participation: Participation,
    /// Sampled workers per round (ignored for full participation).
    pub k: usize,
    pub seed: u64,
    pub mc_runs: usize,
    pub counting: CountingMode,
    pub float_bits: u32,
    pub w0: Option<Vec<f64>>,
    /// Radius of the ball around `w*` on which `G` and `sigma_k` are
    /// certified; `2 |w0 - w*|` when absent.
    pub radius: Option<f64>,
}

impl FedParams {
    pub fn new(local_steps: usize, beta: f64, gamma: f64, s: f64, rounds: usize) -> Self {
        Self {
            local_steps,
            beta,
            gamma,
            s,
            rounds,
            participation: Participation::Full,
            k: 0,
            seed: 0,
            mc_runs: 1,
            counting: CountingMode::StarFull,
            float_bits: DEFAULT_FLOAT_BITS,
            w0: None,
            radius: None,
        }
    }

    pub fn step_size(&self, t: usize) -> f64 {
        self.beta / (t as f64 + self.gamma)
    }

    pub fn horizon(&self) -> usize {
        self.rounds * self.local_steps
    }
}

/// Every violated step-size or participation condition, each naming its
/// inequality.
pub fn validate_fed(problem: &QuadraticProblem, params: &FedParams) -> Vec<String> {
    let mut errs = Vec::new();
    let mu = problem.min_node_mu();
    let l = problem.l();
    if params.local_steps == 0 {
        errs.push("E >= 1 violated: E = 0".to_string());
    }
    if !(mu > 0.0) {
        errs.push(format!(
            "every f_i mu-strongly convex violated: smallest node curvature is {mu:e}"
        ));
    } else if !(params.beta * mu > 1.0) {
        errs.push(format!(
            "beta > 1/mu violated: beta = {}, 1/mu = {}",
            params.beta,
            1.0 / mu
        ));
    }
    if !(params.gamma > 1.0) {
        errs.push(format!("gamma > 1 violated: gamma = {}", params.gamma));
    }
    if params.gamma > 0.0 && !(params.beta / params.gamma <= 1.0 / (4.0 * l)) {
        errs.push(format!(
            "eta_0 <= 1/(4L) violated: eta_0 = {}, 1/(4L) = {}",
            params.beta / params.gamma,
            1.0 / (4.0 * l)
        ));
    }
    if params.gamma > 0.0 && params.local_steps > 0 {
        let bad = (0..=params.horizon())
            .find(|&t| params.step_size(t) > 2.0 * params.step_size(t + params.local_steps));
        if let Some(t) = bad {
            errs.push(format!(
                "eta_t <= 2 eta_(t+E) violated at t = {t}: {} > 2 * {}",
                params.step_size(t),
                params.step_size(t + params.local_steps)
            ));
        }
    }
    if !(params.s >= 0.0 && params.s.is_finite()) {
        errs.push(format!("s >= 0 violated: s = {}", params.s));
    }
    match params.participation {
        Participation::Full => {}
        Participation::WithReplacement => {
            if params.k == 0 {
                errs.push("K >= 1 violated: K = 0".to_string());
            }
        }
        Participation::WithoutReplacement => {
            if params.k == 0 || params.k > problem.n() {
                errs.push(format!("1 <= K <= N violated: K = {}, N = {}", params.k, problem.n()));
            }
        }
    }
    if params.mc_runs == 0 {
        errs.push("mc_runs >= 1 violated: mc_runs = 0".to_string());
    }
    errs
}

fn fail(errs: Vec<String>) -> Result<()> {
    match errs.len() {
        0 => Ok(()),
        1 => Err(Error::Config(errs.into_iter().next().expect("one error"))),
        _ => Err(Error::ConfigList(errs)),
    }
}

/// Certified constants and envelope of a DEED-Fed configuration.
pub fn fed_envelope(problem: &QuadraticProblem, params: &FedParams) -> Result<(FedConstants, FedBound)> {
    fail(validate_fed(problem, params))?;
    let w0 = initial_point(problem, params.w0.as_deref())?;
    let d0 = problem.dist(&w0);
    let radius = params.radius.unwrap_or(if d0 > 0.0 { 2.0 * d0 } else { 1.0 });
    let constants = estimate_fed_constants(problem, params.local_steps, params.k, params.participation, radius)?;
    let bound = theory::fed_bound(
        constants.b,
        constants.c,
        params.beta,
        params.gamma,
        problem.min_node_mu(),
        params.s,
        d0,
        params.horizon(),
    )?;
    Ok((constants, bound))
}

/// Worker ids drawn for one synchronization, ascending, with multiplicity.
fn draw_participants<R: Rng + ?Sized>(problem: &QuadraticProblem, params: &FedParams, rng: &mut R) -> Vec<usize> {
    let n = problem.n();
    let mut ids = match params.participation {
        Participation::Full => (0..n).collect(),
        Participation::WithReplacement => {
            let dist = WeightedIndex::new(problem.weights()).expect("weights are positive");
            (0..params.k).map(|_| rng.sample(&dist)).collect()
        }
        Participation::WithoutReplacement => rand::seq::index::sample(rng, n, params.k).into_vec(),
    };
    ids.sort_unstable();
    ids
}

/// Aggregate of the center's mirrors under the participation rule.
fn aggregate_participants(problem: &QuadraticProblem, params: &FedParams, ids: &[usize], mirrors: &[Vec<f64>]) -> Vec<f64> {
    let n = problem.n();
    let d = problem.d();
    match params.participation {
        Participation::Full => {
            let refs: Vec<&[f64]> = mirrors.iter().map(Vec::as_slice).collect();
            aggregate(problem.weights(), &refs)
        }
        Participation::WithReplacement => {
            let mut out = vec![0.0; d];
            for &i in ids {
                for (o, x) in out.iter_mut().zip(&mirrors[i]) {
                    *o += x;
                }
            }
            let k = ids.len() as f64;
            out.iter_mut().for_each(|o| *o /= k);
            out
        }
        Participation::WithoutReplacement => {
            let k = ids.len();
            if problem.has_uniform_weights() {
                // (N/K) sum p_i x_i with p_i = 1/N
                let mut out = vec![0.0; d];
                for &i in ids {
                    for (o, x) in out.iter_mut().zip(&mirrors[i]) {
                        *o += x;
                    }
                }
                out.iter_mut().for_each(|o| *o /= k as f64);
                out
            } else {
                let mut out = vec![0.0; d];
                for &i in ids {
                    let p = problem.weights()[i];
                    for (o, x) in out.iter_mut().zip(&mirrors[i]) {
                        *o += p * x;
                    }
                }
                let scale = n as f64 / k as f64;
                out.iter_mut().for_each(|o| *o *= scale);
                out
            }
        }
    }
}

fn fed_replicate(problem: &QuadraticProblem, params: &FedParams, seed: u64, w0: &[f64]) -> Result<RunTrace> {
    let n = problem.n();
    let d = problem.d();
    let e = params.local_steps;
    let mut local = vec![w0.to_vec(); n];
    let mut worker_s = vec![vec![0.0; d]; n];
    let mut mirrors = vec![vec![0.0; d]; n];
    let mut center_v = vec![0.0; d];
    let mut worker_v = vec![vec![0.0; d]; n];
    let mut ledger = BitLedger::new(params.counting);

    let average = |local: &[Vec<f64>]| {
        let refs: Vec<&[f64]> = local.iter().map(Vec::as_slice).collect();
        aggregate(problem.weights(), &refs)
    };
    let make_row = |t: usize, w: &[f64], bits: (u64, u64, u64)| TraceRow {
        t,
        dist: problem.dist(w),
        fgap: problem.fgap(w),
        bits_up: bits.0,
        bits_down: bits.1,
        cum_bits: bits.2,
        budget: params.s * params.step_size(t),
    };
    let mut rows = Vec::with_capacity(params.horizon() + 1);
    rows.push(make_row(0, &average(&local), (0, 0, 0)));

    for t in 0..params.horizon() {
        let eta = params.step_size(t);
        for (i, w) in local.iter_mut().enumerate() {
            let mut rng = rng::stream(seed, i as u64, t as u64, Purpose::RowSample);
            let g = problem.stochastic_grad(i, w, &mut rng);
            for (x, gj) in w.iter_mut().zip(&g) {
                *x -= eta * gj;
            }
        }
        let k = t + 1;
        let mut bits = (0, 0, ledger.total());
        if k % e == 0 {
            let sync = (k / e - 1) as u64;
            let stage = params.s * params.step_size(k) / 2.0;
            let mut prng = rng::stream(seed, rng::GLOBAL, sync, Purpose::Participation);
            let ids = draw_participants(problem, params, &mut prng);
            let mut distinct = ids.clone();
            distinct.dedup();
            let mut uplink = 0;
            for &i in &distinct {
                let mut rng = rng::stream(seed, i as u64, k as u64, Purpose::Quantize);
                let msg = encode(&local[i], &worker_s[i], stage, params.float_bits, &mut rng)?;
                msg.apply(&mut worker_s[i]);
                msg.apply(&mut mirrors[i]);
                uplink += msg.bits();
            }
            let target = aggregate_participants(problem, params, &ids, &mirrors);
            let mut rng = rng::stream(seed, rng::CENTER, k as u64, Purpose::Quantize);
            let msg = encode(&target, &center_v, stage, params.float_bits, &mut rng)?;
            msg.apply(&mut center_v);
            for replica in &mut worker_v {
                msg.apply(replica);
            }
            check_replicas(&center_v, &worker_v)?;
            for (w, v) in local.iter_mut().zip(&worker_v) {
                w.copy_from_slice(v);
            }
            bits = ledger.record(uplink, msg.bits(), n);
        }
        rows.push(make_row(k, &average(&local), bits));
    }
    Ok(RunTrace::new("deed-fed", rows, params.counting))
}

/// DEED-Fed replicates with the mean-square envelope `v/(gamma + t)`,
/// asserted at synchronization rows.
pub fn run_deed_fed(problem: &QuadraticProblem, params: &FedParams) -> Result<McRun> {
    let (_, bound) = fed_envelope(problem, params)?;
    let w0 = initial_point(problem, params.w0.as_deref())?;
    let traces = (0..params.mc_runs)
        .into_par_iter()
        .map(|r| fed_replicate(problem, params, rng::replicate_seed(params.seed, r as u64), &w0))
        .collect::<Result<Vec<_>>>()?;
    Ok(McRun {
        traces,
        bound: bound.series,
        checked_rows: (0..=params.rounds).map(|r| r * params.local_steps).collect(),
    })
}
