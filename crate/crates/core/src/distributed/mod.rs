//! Simulated star network: workers, a center, and the algorithm engines.
//!
//! Every exchanged vector goes through [`crate::quantizer`], and the bits of
//! each message are charged to a [`BitLedger`]. Replicas of the shared
//! accumulators are kept per worker and compared bit for bit every round.

mod deed;
mod fed;

pub use deed::{
    run_adeed_gd, run_const_error_gd, run_deed_gd, run_deed_sgd, run_exact_agd, run_exact_gd,
    AccelParams, BaselineParams, DeedParams, SgdParams,
};
pub use fed::{fed_envelope, run_deed_fed, validate_fed, FedParams};
pub(crate) use deed::{accelerated_constants, adeed_gd_trace, deed_gd_trace};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::QuadraticProblem;
use crate::quantizer::{self, Encoding, QuantSpec, QuantizedMessage};
use crate::theory::{BoundKind, BoundSeries};

/// How broadcast traffic is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountingMode {
    /// The center sends its broadcast payload to each of the `N` workers.
    #[default]
    StarFull,
    /// No center: every worker message goes to its `N - 1` peers.
    FullyConnected,
    /// Downlink is charged the same as uplink.
    X2,
}

impl CountingMode {
    /// `(uplink, downlink)` charges for one round.
    pub fn charge(self, uplink: u64, broadcast: u64, receivers: usize) -> (u64, u64) {
        match self {
            CountingMode::StarFull => (uplink, broadcast * receivers as u64),
            CountingMode::FullyConnected => (uplink * receivers.saturating_sub(1) as u64, 0),
            CountingMode::X2 => (uplink, uplink),
        }
    }
}

/// Running bit totals of one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitLedger {
    mode: CountingMode,
    rounds: Vec<(u64, u64)>,
    total: u64,
}

impl BitLedger {
    pub fn new(mode: CountingMode) -> Self {
        Self { mode, rounds: Vec::new(), total: 0 }
    }

    pub fn mode(&self) -> CountingMode {
        self.mode
    }

    /// Charges one round and returns `(uplink, downlink, cumulative)`.
    pub fn record(&mut self, uplink: u64, broadcast: u64, receivers: usize) -> (u64, u64, u64) {
        let (up, down) = self.mode.charge(uplink, broadcast, receivers);
        self.rounds.push((up, down));
        self.total += up + down;
        (up, down, self.total)
    }

    pub fn rounds(&self) -> &[(u64, u64)] {
        &self.rounds
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: usize,
    pub dist: f64,
    pub fgap: f64,
    /// Bits of the round that produced this iterate.
    pub bits_up: u64,
    pub bits_down: u64,
    pub cum_bits: u64,
    /// Error budget of the round that starts at this iterate.
    pub budget: f64,
}

/// Per-round measurements of a double-encoded exchange.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundStats {
    pub round: usize,
    /// Total budget of the round (both stages together).
    pub budget: f64,
    /// `|v_k - g_k|` against the exact aggregate gradient at the query point.
    pub residual: f64,
    /// Floating-point allowance on `residual` for the accumulator updates.
    pub roundoff: f64,
    /// Largest `|message| / stage_error` over worker messages.
    pub worker_fraction: f64,
    /// `|message| / stage_error` of the broadcast.
    pub center_fraction: f64,
    /// Largest single payload of the round.
    pub max_payload_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunTrace {
    pub algorithm: String,
    pub counting: CountingMode,
    pub rows: Vec<TraceRow>,
    pub rounds: Vec<RoundStats>,
    /// Envelope the run is checked against, aligned with `rows`.
    pub bound: Option<BoundSeries>,
}

impl RunTrace {
    pub fn new(algorithm: &str, rows: Vec<TraceRow>, counting: CountingMode) -> Self {
        Self {
            algorithm: algorithm.to_string(),
            counting,
            rows,
            rounds: Vec::new(),
            bound: None,
        }
    }

    pub fn final_row(&self) -> &TraceRow {
        self.rows.last().expect("traces hold at least the initial row")
    }

    pub fn total_bits(&self) -> u64 {
        self.final_row().cum_bits
    }

    /// First iteration whose f-gap is at or below `threshold`.
    pub fn first_below(&self, threshold: f64) -> Option<&TraceRow> {
        self.rows.iter().find(|r| r.fgap <= threshold)
    }

    /// CSV with header `t,dist,fgap,bits_up,bits_down,cum_bits,budget`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,dist,fgap,bits_up,bits_down,cum_bits,budget\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{},{},{},{:.16e}\n",
                r.t, r.dist, r.fgap, r.bits_up, r.bits_down, r.cum_bits, r.budget
            ));
        }
        out
    }

    /// First row whose distance leaves the attached distance envelope by more
    /// than `floor`.
    pub fn first_violation(&self, floor: f64) -> Option<(usize, f64, f64)> {
        let bound = self.bound.as_ref()?;
        if bound.kind != BoundKind::Distance {
            return None;
        }
        self.rows
            .iter()
            .zip(&bound.values)
            .find(|(r, b)| r.dist > **b * (1.0 + 1e-9) + floor)
            .map(|(r, b)| (r.t, r.dist, *b))
    }

    /// First round whose residual exceeds its budget plus roundoff.
    pub fn first_budget_violation(&self) -> Option<&RoundStats> {
        self.rounds
            .iter()
            .find(|r| r.residual > r.budget * (1.0 + 1e-9) + r.roundoff)
    }
}

/// Absolute allowance for floating-point stagnation of a deterministic run
/// near the optimum: `256 eps kappa (1 + |w*|)`.
pub fn roundoff_floor(problem: &QuadraticProblem) -> f64 {
    let w_norm = problem.dist(&vec![0.0; problem.d()]);
    256.0 * f64::EPSILON * problem.kappa() * (1.0 + w_norm)
}

/// Monte Carlo replicates of a stochastic algorithm and their envelope.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRun {
    pub traces: Vec<RunTrace>,
    /// Squared-distance envelope.
    pub bound: BoundSeries,
    /// Rows at which the envelope is asserted.
    pub checked_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    pub t: usize,
    pub mean_sq: f64,
    pub std_err: f64,
    pub bound: f64,
}

impl McRun {
    /// Across-replicate mean and standard error of `|w_t - w*|^2`.
    pub fn summary(&self) -> Vec<McRow> {
        let runs = self.traces.len() as f64;
        let rows = self.traces.first().map_or(0, |t| t.rows.len());
        (0..rows)
            .map(|i| {
                let sq: Vec<f64> = self.traces.iter().map(|t| t.rows[i].dist.powi(2)).collect();
                let mean = sq.iter().sum::<f64>() / runs;
                let var = if runs > 1.0 {
                    sq.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (runs - 1.0)
                } else {
                    0.0
                };
                McRow {
                    t: self.traces[0].rows[i].t,
                    mean_sq: mean,
                    std_err: (var / runs).sqrt(),
                    bound: self.bound.values.get(i).copied().unwrap_or(f64::INFINITY),
                }
            })
            .collect()
    }

    /// First checked row where the mean exceeds the envelope by more than
    /// three standard errors.
    pub fn first_violation(&self) -> Option<McRow> {
        let summary = self.summary();
        self.checked_rows
            .iter()
            .map(|&i| summary[i].clone())
            .find(|r| r.mean_sq > r.bound + 3.0 * r.std_err)
    }

    pub fn mc_csv(&self) -> String {
        let mut out = String::from("t,mean_sq_dist,std_err,bound\n");
        for r in self.summary() {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e}\n",
                r.t, r.mean_sq, r.std_err, r.bound
            ));
        }
        out
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Weighted aggregate in ascending index order. Uniform weights sum first
/// and divide once, so every engine and baseline shares the same rounding.
pub(crate) fn aggregate(weights: &[f64], vectors: &[&[f64]]) -> Vec<f64> {
    let d = vectors[0].len();
    let mut out = vec![0.0; d];
    let n = vectors.len();
    let uniform = weights.iter().all(|&p| p == weights[0]) && weights.len() == n;
    if uniform {
        for v in vectors {
            for (o, x) in out.iter_mut().zip(v.iter()) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
    } else {
        for (v, &p) in vectors.iter().zip(weights) {
            for (o, x) in out.iter_mut().zip(v.iter()) {
                *o += p * x;
            }
        }
    }
    out
}

/// One encoded message together with how its receivers apply it.
pub(crate) struct Message {
    msg: QuantizedMessage,
    /// `|target - previous|` at the sender.
    pub input_norm: f64,
}

impl Message {
    pub fn bits(&self) -> u64 {
        self.msg.bits()
    }

    /// Updates a receiver's copy of the tracked vector.
    ///
    /// A lossy message carries the quantized increment and is added; a
    /// lossless one (zero budget) carries the target itself and replaces the
    /// copy, so lossless runs reproduce exact arithmetic.
    pub fn apply(&self, copy: &mut [f64]) {
        if self.msg.spec().is_lossless() {
            if let Encoding::PassThrough { values } = self.msg.encoding() {
                copy.copy_from_slice(values);
            }
        } else {
            self.msg.add_into(copy);
        }
    }
}

/// Encodes the move of a copy from `previous` to `target` with maximal
/// error `stage_error`.
pub(crate) fn encode<R: rand::Rng + ?Sized>(
    target: &[f64],
    previous: &[f64],
    stage_error: f64,
    float_bits: u32,
    rng: &mut R,
) -> Result<Message> {
    let spec = QuantSpec::with_float_bits(stage_error, target.len(), float_bits)?;
    let delta: Vec<f64> = target.iter().zip(previous).map(|(a, b)| a - b).collect();
    let input_norm = norm(&delta);
    let msg = if spec.is_lossless() {
        quantizer::quantize(target, &spec, rng)?
    } else {
        quantizer::quantize(&delta, &spec, rng)?
    };
    Ok(Message { msg, input_norm })
}

pub(crate) fn check_replicas(center: &[f64], replicas: &[Vec<f64>]) -> Result<()> {
    if replicas.iter().any(|r| r.as_slice() != center) {
        return Err(Error::Precondition("replicas of v diverged".into()));
    }
    Ok(())
}

pub(crate) fn initial_point(problem: &QuadraticProblem, w0: Option<&[f64]>) -> Result<Vec<f64>> {
    match w0 {
        Some(w) if w.len() != problem.d() => Err(Error::InvalidInput(format!(
            "initial point has {} coordinates, problem has {}",
            w.len(),
            problem.d()
        ))),
        Some(w) => Ok(w.to_vec()),
        None => Ok(vec![0.0; problem.d()]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_modes() {
        assert_eq!(CountingMode::StarFull.charge(30, 5, 10), (30, 50));
        assert_eq!(CountingMode::FullyConnected.charge(30, 5, 10), (270, 0));
        assert_eq!(CountingMode::X2.charge(30, 5, 10), (30, 30));
    }

    #[test]
    fn ledger_accumulates() {
        let mut ledger = BitLedger::new(CountingMode::X2);
        assert_eq!(ledger.record(3, 100, 2), (3, 3, 6));
        assert_eq!(ledger.record(4, 100, 2), (4, 4, 14));
        assert_eq!(ledger.total(), 14);
        assert_eq!(ledger.rounds(), &[(3, 3), (4, 4)]);
    }

    #[test]
    fn aggregate_orders() {
        let a = [1.0, 2.0];
        let b = [3.0, 5.0];
        assert_eq!(aggregate(&[0.5, 0.5], &[&a, &b]), vec![2.0, 3.5]);
        assert_eq!(aggregate(&[0.25, 0.75], &[&a, &b]), vec![2.5, 4.25]);
    }

    #[test]
    fn csv_layout() {
        let rows = vec![TraceRow {
            t: 0,
            dist: 1.0,
            fgap: 0.5,
            bits_up: 3,
            bits_down: 4,
            cum_bits: 7,
            budget: 0.1,
        }];
        let csv = RunTrace::new("x", rows, CountingMode::StarFull).to_csv();
        assert_eq!(
            csv,
            "t,dist,fgap,bits_up,bits_down,cum_bits,budget\n\
             0,1.0000000000000000e0,5.0000000000000000e-1,3,4,7,1.0000000000000001e-1\n"
        );
    }
}
