//! Executing configurations: traces, envelopes, summaries and comparisons.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::config::{Algorithm, Experiment, Plan};
use crate::distributed::{
    self, accelerated_constants, adeed_gd_trace, deed_gd_trace, initial_point, roundoff_floor, McRun,
    RunTrace,
};
use crate::error::{Error, Result};
use crate::theory::{self, BoundKind, BoundSeries};

/// f-gap thresholds of every bits-to-accuracy table.
pub const THRESHOLDS: [f64; 7] = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdHit {
    pub threshold: f64,
    pub status: &'static str,
    pub iteration: Option<usize>,
    pub cum_bits: Option<u64>,
}

pub fn threshold_hit(trace: &RunTrace, threshold: f64) -> ThresholdHit {
    match trace.first_below(threshold) {
        Some(r) => ThresholdHit {
            threshold,
            status: "reached",
            iteration: Some(r.t),
            cum_bits: Some(r.cum_bits),
        },
        None => ThresholdHit {
            threshold,
            status: "unreached",
            iteration: None,
            cum_bits: None,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub name: String,
    pub algorithm: &'static str,
    pub problem_seed: u64,
    pub d: usize,
    pub nodes: usize,
    pub kappa: f64,
    pub l: f64,
    pub mu: f64,
    pub iterations: usize,
    pub final_dist: f64,
    pub final_fgap: f64,
    pub total_bits: u64,
    pub bits_to_accuracy: Vec<ThresholdHit>,
    pub mc_runs: usize,
    /// Mean squared distance at the last row, for Monte Carlo runs.
    pub mc_final_mean_sq: Option<f64>,
    pub checks: Vec<&'static str>,
    pub violation: Option<String>,
    pub passed: bool,
}

/// Everything one run produces. `trace` is the first replicate of a Monte
/// Carlo run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub name: String,
    pub trace: RunTrace,
    pub mc: Option<McRun>,
    pub bound: Option<BoundSeries>,
    pub summary: Summary,
}

impl RunOutput {
    /// `(file name, contents)` of every output file.
    pub fn files(&self) -> Vec<(String, String)> {
        let mut out = vec![(format!("{}.trace.csv", self.name), self.trace.to_csv())];
        if let Some(b) = &self.bound {
            out.push((format!("{}.bound.csv", self.name), b.to_csv()));
        }
        if let Some(mc) = &self.mc {
            out.push((format!("{}.mc.csv", self.name), mc.mc_csv()));
        }
        let json = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        out.push((format!("{}.summary.json", self.name), json + "\n"));
        out
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        write_files(dir, &self.files())
    }
}

pub fn write_files(dir: &Path, files: &[(String, String)]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    files
        .iter()
        .map(|(name, body)| {
            let path = dir.join(name);
            fs::write(&path, body)?;
            Ok(path)
        })
        .collect()
}

fn check_deterministic(exp: &Experiment, trace: &RunTrace) -> Option<String> {
    if let Some((t, dist, bound)) = trace.first_violation(roundoff_floor(&exp.problem)) {
        return Some(format!(
            "row t = {t}: distance {dist:e} exceeds envelope {bound:e}"
        ));
    }
    trace.first_budget_violation().map(|r| {
        format!(
            "round {}: |v - g| = {:e} exceeds budget {:e}",
            r.round, r.residual, r.budget
        )
    })
}

fn check_mc(mc: &McRun) -> Option<String> {
    mc.first_violation().map(|r| {
        format!(
            "row t = {}: mean squared distance {:e} exceeds envelope {:e} + 3 SE ({:e})",
            r.t, r.mean_sq, r.bound, r.std_err
        )
    })
}

fn distance_envelope(values: Vec<f64>) -> BoundSeries {
    BoundSeries {
        kind: BoundKind::Distance,
        values,
    }
}

/// The envelope of a configuration without running it.
pub fn bound_only(exp: &Experiment) -> Result<BoundSeries> {
    let p = &exp.problem;
    match &exp.plan {
        Plan::Deed(params) => {
            let w0 = initial_point(p, params.w0.as_deref())?;
            let c = 1.0 - params.eta * p.mu();
            let b = theory::deterministic_bound(c, params.c_prime, params.eta, params.s, p.dist(&w0), params.iterations)?;
            Ok(b.series)
        }
        Plan::Accel(params) => {
            if !params.strict {
                return Err(Error::Config(
                    "a-deed-gd with strict = false has no envelope".into(),
                ));
            }
            let w0 = initial_point(p, params.w0.as_deref())?;
            let consts = accelerated_constants(p, &w0, params.c_prime, params.s)?;
            Ok(theory::accelerated_bound(&consts, params.iterations))
        }
        Plan::Sgd(params) => {
            let w0 = initial_point(p, params.w0.as_deref())?;
            let eta = 1.0 / (params.rho * p.l());
            let c = 1.0 - eta * p.mu();
            theory::sgd_bound(c, params.c_prime, eta, params.s, p.dist(&w0), params.iterations)
        }
        Plan::Fed(params) => Ok(distributed::fed_envelope(p, params)?.1.series),
        Plan::ConstQuant(params) => {
            let w0 = initial_point(p, params.w0.as_deref())?;
            let c = 1.0 - params.eta * p.mu();
            let env = theory::const_error_envelope(c, params.eta, params.fixed_eps, p.dist(&w0), params.iterations)?;
            Ok(distance_envelope(env.bound.values.iter().map(|v| v.sqrt()).collect()))
        }
        Plan::Gd(_) | Plan::Agd(_) => Err(Error::Config(format!(
            "{} has no envelope",
            exp.config.algorithm.tag()
        ))),
    }
}

/// Runs a configuration. Envelope and budget violations are reported in
/// the summary rather than as errors, so the outputs can still be written.
pub fn execute(exp: &Experiment) -> Result<RunOutput> {
    let p = &exp.problem;
    let (trace, mc, checks, violation) = match &exp.plan {
        Plan::Deed(params) => {
            let t = deed_gd_trace(p, params)?;
            let v = check_deterministic(exp, &t);
            (t, None, vec!["distance envelope", "error budget"], v)
        }
        Plan::Accel(params) => {
            let t = adeed_gd_trace(p, params)?;
            let v = check_deterministic(exp, &t);
            let checks = if params.strict {
                vec!["distance envelope", "error budget"]
            } else {
                vec!["error budget"]
            };
            (t, None, checks, v)
        }
        Plan::Sgd(params) => {
            let mc = distributed::run_deed_sgd(p, params)?;
            let v = check_mc(&mc);
            (mc.traces[0].clone(), Some(mc), vec!["mean-square envelope"], v)
        }
        Plan::Fed(params) => {
            let mc = distributed::run_deed_fed(p, params)?;
            let v = check_mc(&mc);
            (mc.traces[0].clone(), Some(mc), vec!["mean-square envelope at sync rounds"], v)
        }
        Plan::Gd(params) => (distributed::run_exact_gd(p, params)?, None, vec![], None),
        Plan::Agd(params) => (distributed::run_exact_agd(p, params)?, None, vec![], None),
        Plan::ConstQuant(params) => {
            let t = distributed::run_const_error_gd(p, params)?;
            let v = t
                .first_violation(roundoff_floor(p))
                .map(|(t, dist, bound)| format!("row t = {t}: distance {dist:e} exceeds envelope {bound:e}"));
            (t, None, vec!["constant-noise envelope"], v)
        }
    };
    let bound = match &mc {
        Some(m) => Some(m.bound.clone()),
        None => trace.bound.clone(),
    };
    let last = trace.final_row();
    let summary = Summary {
        name: exp.config.name(),
        algorithm: exp.config.algorithm.tag(),
        problem_seed: exp.config.problem.seed,
        d: p.d(),
        nodes: p.n(),
        kappa: p.kappa(),
        l: p.l(),
        mu: p.mu(),
        iterations: last.t,
        final_dist: last.dist,
        final_fgap: last.fgap,
        total_bits: trace.total_bits(),
        bits_to_accuracy: THRESHOLDS.iter().map(|&th| threshold_hit(&trace, th)).collect(),
        mc_runs: mc.as_ref().map_or(1, |m| m.traces.len()),
        mc_final_mean_sq: mc.as_ref().and_then(|m| m.summary().last().map(|r| r.mean_sq)),
        checks,
        passed: violation.is_none(),
        violation,
    };
    Ok(RunOutput {
        name: exp.config.name(),
        trace,
        mc,
        bound,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Expectation {
    pub description: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub name: String,
    pub algorithm: &'static str,
    pub total_bits: u64,
    pub hits: Vec<ThresholdHit>,
    pub violation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub expectations: Vec<Expectation>,
    pub passed: bool,
}

impl CompareReport {
    /// One line per run: cumulative bits to each threshold, `-` if unreached.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,algorithm");
        for th in THRESHOLDS {
            out.push_str(&format!(",bits_to_{th:e}"));
        }
        out.push_str(",total_bits\n");
        for row in &self.rows {
            out.push_str(&format!("{},{}", row.name, row.algorithm));
            for h in &row.hits {
                match h.cum_bits {
                    Some(b) => out.push_str(&format!(",{b}")),
                    None => out.push_str(",-"),
                }
            }
            out.push_str(&format!(",{}\n", row.total_bits));
        }
        out
    }
}

fn find<'a>(outputs: &'a [RunOutput], key: &str) -> Result<&'a RunOutput> {
    outputs
        .iter()
        .find(|o| o.name == key)
        .or_else(|| outputs.iter().find(|o| o.summary.algorithm == key))
        .ok_or_else(|| Error::Config(format!("expectation names unknown run {key:?}")))
}

fn expectations(exps: &[Experiment], outputs: &[RunOutput]) -> Result<Vec<Expectation>> {
    let mut out = Vec::new();
    for (exp, own) in exps.iter().zip(outputs) {
        let Some(expect) = &exp.config.expect else { continue };
        let th = expect.threshold;
        let mine = threshold_hit(&own.trace, th);
        if expect.unreached {
            out.push(Expectation {
                description: format!("{} never reaches f-gap {th:e}", own.name),
                passed: mine.iteration.is_none(),
            });
        }
        let cmp = |other: &RunOutput, pick: fn(&ThresholdHit) -> Option<u64>| {
            let theirs = threshold_hit(&other.trace, th);
            match (pick(&mine), pick(&theirs)) {
                (Some(a), Some(b)) => a < b,
                (Some(_), None) => true,
                _ => false,
            }
        };
        for key in &expect.fewer_bits_than {
            let other = find(outputs, key)?;
            out.push(Expectation {
                description: format!("{} reaches f-gap {th:e} with fewer bits than {}", own.name, other.name),
                passed: cmp(other, |h| h.cum_bits),
            });
        }
        for key in &expect.fewer_iterations_than {
            let other = find(outputs, key)?;
            out.push(Expectation {
                description: format!("{} reaches f-gap {th:e} in fewer iterations than {}", own.name, other.name),
                passed: cmp(other, |h| h.iteration.map(|i| i as u64)),
            });
        }
    }
    Ok(out)
}

/// Runs configurations on a common problem concurrently and tabulates the
/// bits each needs to reach every threshold.
pub fn compare(exps: &[Experiment]) -> Result<CompareReport> {
    if exps.len() < 2 {
        return Err(Error::InvalidInput(
            "compare needs at least two configurations".into(),
        ));
    }
    let first = &exps[0].config.problem;
    for exp in &exps[1..] {
        if &exp.config.problem != first {
            return Err(Error::Config(format!(
                "problem blocks differ between {} and {}",
                exps[0].config.name(),
                exp.config.name()
            )));
        }
    }
    let outputs = exps.par_iter().map(execute).collect::<Result<Vec<_>>>()?;
    let expectations = expectations(exps, &outputs)?;
    let rows: Vec<CompareRow> = outputs
        .iter()
        .map(|o| CompareRow {
            name: o.name.clone(),
            algorithm: o.summary.algorithm,
            total_bits: o.summary.total_bits,
            hits: o.summary.bits_to_accuracy.clone(),
            violation: o.summary.violation.clone(),
        })
        .collect();
    let passed = expectations.iter().all(|e| e.passed) && rows.iter().all(|r| r.violation.is_none());
    Ok(CompareReport {
        rows,
        expectations,
        passed,
    })
}

/// Whether an algorithm attaches an envelope that `bound_only` can evaluate.
pub fn has_envelope(algorithm: Algorithm) -> bool {
    !matches!(algorithm, Algorithm::Gd | Algorithm::Agd)
}
