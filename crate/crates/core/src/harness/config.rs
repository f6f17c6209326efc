//! TOML run configurations.
//!
//! Parsing is strict: unknown keys and missing required keys are errors, and
//! every algorithm precondition is checked against the constructed problem
//! before anything runs. All violations are reported together.

use serde::{Deserialize, Serialize};

use crate::distributed::{
    validate_fed, AccelParams, BaselineParams, CountingMode, DeedParams, FedParams, SgdParams,
};
use crate::error::{Error, Result};
use crate::problems::{estimate_rho, make_linreg, LinRegSpec, Participation, QuadraticProblem};
use crate::quantizer::DEFAULT_FLOAT_BITS;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    DeedGd,
    ADeedGd,
    DeedSgd,
    DeedFed,
    Gd,
    Agd,
    ConstQuantGd,
}

impl Algorithm {
    pub fn tag(self) -> &'static str {
        match self {
            Algorithm::DeedGd => "deed-gd",
            Algorithm::ADeedGd => "a-deed-gd",
            Algorithm::DeedSgd => "deed-sgd",
            Algorithm::DeedFed => "deed-fed",
            Algorithm::Gd => "gd",
            Algorithm::Agd => "agd",
            Algorithm::ConstQuantGd => "const-quant-gd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepsizeMode {
    /// `eta = 2/(L + mu)`.
    #[default]
    Theory,
    /// `eta = min_i 1/L_i`.
    Experiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub seed: u64,
    pub d: usize,
    #[serde(alias = "N")]
    pub nodes: usize,
    pub kappa: f64,
    pub rows_per_node: usize,
    #[serde(default)]
    pub interpolating: bool,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

fn default_noise() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantBlock {
    #[serde(default = "default_s")]
    pub s: f64,
    /// Defaults to `c + (1 - c)/10` above the algorithm's contraction `c`.
    #[serde(default)]
    pub c_prime: Option<f64>,
    #[serde(default = "default_float_bits", alias = "F")]
    pub float_bits: u32,
    #[serde(default = "default_fixed_eps")]
    pub fixed_eps: f64,
}

fn default_s() -> f64 {
    0.01
}

fn default_float_bits() -> u32 {
    DEFAULT_FLOAT_BITS
}

fn default_fixed_eps() -> f64 {
    0.1
}

impl Default for QuantBlock {
    fn default() -> Self {
        Self {
            s: default_s(),
            c_prime: None,
            float_bits: default_float_bits(),
            fixed_eps: default_fixed_eps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedBlock {
    #[serde(alias = "E")]
    pub local_steps: usize,
    /// Defaults to `2/mu`.
    #[serde(default)]
    pub beta: Option<f64>,
    /// Defaults to `max(4 beta L, E)`.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub participation: Participation,
    #[serde(default, alias = "K")]
    pub k: Option<usize>,
    #[serde(default)]
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    /// Iterations, or synchronization rounds for `deed-fed`.
    #[serde(alias = "T", alias = "rounds")]
    pub iterations: usize,
    #[serde(default = "default_mc_runs")]
    pub mc_runs: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub counting: CountingMode,
    #[serde(default)]
    pub stepsize: StepsizeMode,
    /// Weak growth constant for `deed-sgd`; estimated when absent.
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub w0: Option<Vec<f64>>,
    /// `false` lets `a-deed-gd` run with `1 - sqrt(mu/L) < c'` and no envelope.
    #[serde(default = "default_strict")]
    pub strict: bool,
}

fn default_mc_runs() -> usize {
    1
}

fn default_strict() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default)]
    pub dir: Option<String>,
    /// File stem; the algorithm tag when absent.
    #[serde(default)]
    pub name: Option<String>,
}

/// Orderings asserted by `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectBlock {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub fewer_bits_than: Vec<String>,
    #[serde(default)]
    pub fewer_iterations_than: Vec<String>,
    /// The run must never reach the threshold.
    #[serde(default)]
    pub unreached: bool,
}

fn default_threshold() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub problem: ProblemBlock,
    #[serde(default)]
    pub quant: QuantBlock,
    #[serde(default)]
    pub fed: Option<FedBlock>,
    pub run: RunBlock,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default)]
    pub expect: Option<ExpectBlock>,
}

impl RunConfig {
    pub fn name(&self) -> String {
        self.output
            .name
            .clone()
            .unwrap_or_else(|| self.algorithm.tag().to_string())
    }
}

/// Engine parameters resolved from a configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum Plan {
    Deed(DeedParams),
    Accel(AccelParams),
    Sgd(SgdParams),
    Fed(FedParams),
    Gd(BaselineParams),
    Agd(BaselineParams),
    ConstQuant(BaselineParams),
}

/// A validated configuration with its problem instance.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: RunConfig,
    pub problem: QuadraticProblem,
    pub plan: Plan,
}

pub fn parse_config(text: &str) -> Result<Experiment> {
    let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    validate(config)
}

fn finish(errs: Vec<String>) -> Result<()> {
    match errs.len() {
        0 => Ok(()),
        1 => Err(Error::Config(errs.into_iter().next().expect("one error"))),
        _ => Err(Error::ConfigList(errs)),
    }
}

fn problem_errors(p: &ProblemBlock) -> Vec<String> {
    let mut errs = Vec::new();
    if p.d == 0 {
        errs.push("d >= 1 violated: d = 0".to_string());
    }
    if p.nodes == 0 {
        errs.push("N >= 1 violated: N = 0".to_string());
    }
    if !(p.kappa >= 1.0 && p.kappa.is_finite()) {
        errs.push(format!("kappa >= 1 violated: kappa = {}", p.kappa));
    }
    if p.rows_per_node == 0 {
        errs.push("rows_per_node >= 1 violated: rows_per_node = 0".to_string());
    }
    if !(p.noise >= 0.0 && p.noise.is_finite()) {
        errs.push(format!("noise >= 0 violated: noise = {}", p.noise));
    }
    if let Some(w) = &p.weights {
        if w.len() != p.nodes {
            errs.push(format!("len(weights) = N violated: {} weights, N = {}", w.len(), p.nodes));
        }
        if w.iter().any(|x| !(*x > 0.0)) {
            errs.push("weights > 0 violated".to_string());
        }
    }
    errs
}

pub fn build_problem(p: &ProblemBlock) -> Result<QuadraticProblem> {
    finish(problem_errors(p))?;
    let mut spec = LinRegSpec::new(p.seed, p.d, p.nodes, p.kappa, p.rows_per_node)
        .interpolating(p.interpolating)
        .noise(p.noise);
    if let Some(w) = &p.weights {
        spec = spec.weights(w.clone());
    }
    make_linreg(&spec)
}

fn stepsize(problem: &QuadraticProblem, mode: StepsizeMode) -> f64 {
    match mode {
        StepsizeMode::Theory => 2.0 / (problem.l() + problem.mu()),
        StepsizeMode::Experiment => 1.0 / problem.l(),
    }
}

fn c_prime_or_default(given: Option<f64>, c: f64) -> f64 {
    given.unwrap_or(c + 0.1 * (1.0 - c))
}

fn check_window(errs: &mut Vec<String>, name: &str, c: f64, c_prime: f64) {
    if !(c < c_prime && c_prime < 1.0) {
        errs.push(format!("{name} < c' < 1 violated: {name} = {c}, c' = {c_prime}"));
    }
}

fn common_errors(cfg: &RunConfig, problem: &QuadraticProblem) -> Vec<String> {
    let mut errs = Vec::new();
    let q = &cfg.quant;
    if !(q.s >= 0.0 && q.s.is_finite()) {
        errs.push(format!("s >= 0 violated: s = {}", q.s));
    }
    if !(1..=64).contains(&q.float_bits) {
        errs.push(format!("1 <= F <= 64 violated: F = {}", q.float_bits));
    }
    if cfg.run.mc_runs == 0 {
        errs.push("mc_runs >= 1 violated: mc_runs = 0".to_string());
    }
    if let Some(w0) = &cfg.run.w0 {
        if w0.len() != problem.d() {
            errs.push(format!("len(w0) = d violated: {} entries, d = {}", w0.len(), problem.d()));
        }
    }
    if cfg.fed.is_some() && cfg.algorithm != Algorithm::DeedFed {
        errs.push(format!("[fed] block given for {}", cfg.algorithm.tag()));
    }
    errs
}

/// Resolves and validates a parsed configuration, reporting every violation.
pub fn validate(config: RunConfig) -> Result<Experiment> {
    let problem = build_problem(&config.problem)?;
    let mut errs = common_errors(&config, &problem);
    let run = &config.run;
    let q = &config.quant;
    let seed = run.master_seed;
    let plan = match config.algorithm {
        Algorithm::DeedGd => {
            let eta = stepsize(&problem, run.stepsize);
            let c = 1.0 - eta * problem.mu();
            let c_prime = c_prime_or_default(q.c_prime, c);
            check_window(&mut errs, "c", c, c_prime);
            let mut p = DeedParams::new(eta, c_prime, q.s, run.iterations);
            p.seed = seed;
            p.counting = run.counting;
            p.float_bits = q.float_bits;
            p.w0 = run.w0.clone();
            Plan::Deed(p)
        }
        Algorithm::ADeedGd => {
            let root = (problem.mu() / problem.l()).sqrt();
            let c = if run.strict { (1.0 - root).sqrt() } else { 1.0 - root };
            let c_prime = c_prime_or_default(q.c_prime, c);
            let name = if run.strict { "sqrt(1 - sqrt(mu/L))" } else { "1 - sqrt(mu/L)" };
            check_window(&mut errs, name, c, c_prime);
            let mut p = AccelParams::new(c_prime, q.s, run.iterations);
            p.seed = seed;
            p.counting = run.counting;
            p.float_bits = q.float_bits;
            p.w0 = run.w0.clone();
            p.strict = run.strict;
            Plan::Accel(p)
        }
        Algorithm::DeedSgd => {
            if !problem.is_interpolating() {
                errs.push("interpolating = true required by deed-sgd".to_string());
            }
            let rho = match run.rho {
                Some(r) => r,
                None if problem.is_interpolating() => {
                    let mut rng = rng::stream(seed, rng::GLOBAL, 0, Purpose::Estimation);
                    estimate_rho(&problem, 256, &mut rng)?
                }
                None => 1.0,
            };
            if !(rho >= 1.0 && rho.is_finite()) {
                errs.push(format!("rho >= 1 violated: rho = {rho}"));
            }
            let c = 1.0 - problem.mu() / (rho * problem.l());
            let c_prime = c_prime_or_default(q.c_prime, c);
            check_window(&mut errs, "c", c, c_prime);
            let mut p = SgdParams::new(rho, c_prime, q.s, run.iterations, run.mc_runs);
            p.seed = seed;
            p.counting = run.counting;
            p.float_bits = q.float_bits;
            p.w0 = run.w0.clone();
            Plan::Sgd(p)
        }
        Algorithm::DeedFed => match &config.fed {
            None => {
                errs.push("[fed] block required by deed-fed".to_string());
                return Err(Error::ConfigList(errs));
            }
            Some(fed) => {
                let mu = problem.min_node_mu();
                let beta = fed.beta.unwrap_or(2.0 / mu);
                let gamma = fed
                    .gamma
                    .unwrap_or_else(|| (4.0 * beta * problem.l()).max(fed.local_steps as f64));
                let mut p = FedParams::new(fed.local_steps, beta, gamma, q.s, run.iterations);
                p.participation = fed.participation;
                p.k = match fed.participation {
                    Participation::Full => problem.n(),
                    _ => fed.k.unwrap_or(0),
                };
                p.seed = seed;
                p.mc_runs = run.mc_runs;
                p.counting = run.counting;
                p.float_bits = q.float_bits;
                p.w0 = run.w0.clone();
                p.radius = fed.radius;
                errs.extend(validate_fed(&problem, &p).into_iter().filter(|e| !e.starts_with("mc_runs") && !e.starts_with("s >=")));
                Plan::Fed(p)
            }
        },
        Algorithm::Gd | Algorithm::Agd | Algorithm::ConstQuantGd => {
            let eta = stepsize(&problem, run.stepsize);
            let mut p = BaselineParams::new(eta, run.iterations);
            p.seed = seed;
            p.counting = run.counting;
            p.float_bits = q.float_bits;
            p.w0 = run.w0.clone();
            p.fixed_eps = q.fixed_eps;
            match config.algorithm {
                Algorithm::Gd => Plan::Gd(p),
                Algorithm::Agd => Plan::Agd(p),
                _ => {
                    if !(q.fixed_eps > 0.0 && q.fixed_eps.is_finite()) {
                        errs.push(format!("fixed_eps > 0 violated: fixed_eps = {}", q.fixed_eps));
                    }
                    Plan::ConstQuant(p)
                }
            }
        }
    };
    finish(errs)?;
    Ok(Experiment { config, problem, plan })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
algorithm = "deed-gd"
[problem]
seed = 1
d = 5
N = 2
kappa = 4.0
rows_per_node = 10
[run]
T = 20
"#;

    fn messages(err: Error) -> Vec<String> {
        match err {
            Error::Config(m) => vec![m],
            Error::ConfigList(v) => v,
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn minimal_config_uses_theory_stepsize() {
        let exp = parse_config(MINIMAL).unwrap();
        let Plan::Deed(p) = &exp.plan else { panic!("wrong plan") };
        let expected = 2.0 / (exp.problem.l() + exp.problem.mu());
        assert_eq!(p.eta, expected);
        assert_eq!(p.s, 0.01);
        let c = 1.0 - p.eta * exp.problem.mu();
        assert!(c < p.c_prime && p.c_prime < 1.0);
    }

    #[test]
    fn c_prime_below_contraction_is_named() {
        let text = MINIMAL.replace("[run]", "[quant]\nc_prime = 0.1\n[run]");
        let msgs = messages(parse_config(&text).unwrap_err());
        assert!(msgs.iter().any(|m| m.contains("c < c' < 1")), "{msgs:?}");
    }

    #[test]
    fn unknown_and_missing_keys_are_errors() {
        let typo = MINIMAL.replace("T = 20", "T = 20\nstepsise = \"theory\"");
        assert!(matches!(parse_config(&typo), Err(Error::Config(_))));
        let missing = MINIMAL.replace("kappa = 4.0\n", "");
        let msg = messages(parse_config(&missing).unwrap_err()).join(" ");
        assert!(msg.contains("kappa"), "{msg}");
    }

    #[test]
    fn fed_beta_condition_is_named() {
        let text = MINIMAL
            .replace("\"deed-gd\"", "\"deed-fed\"")
            .replace("[run]", "[fed]\nE = 2\nbeta = 0.01\ngamma = 1000.0\n[run]");
        let msgs = messages(parse_config(&text).unwrap_err());
        assert!(msgs.iter().any(|m| m.contains("beta > 1/mu")), "{msgs:?}");
    }

    #[test]
    fn all_violations_are_listed() {
        let text = MINIMAL
            .replace("[run]", "[quant]\ns = -1.0\nc_prime = 2.0\nF = 0\n[run]")
            .replace("T = 20", "T = 20\nmc_runs = 0");
        let msgs = messages(parse_config(&text).unwrap_err());
        assert_eq!(msgs.len(), 4, "{msgs:?}");
    }

    #[test]
    fn sgd_requires_interpolation() {
        let text = MINIMAL.replace("\"deed-gd\"", "\"deed-sgd\"");
        let msgs = messages(parse_config(&text).unwrap_err());
        assert!(msgs.iter().any(|m| m.contains("interpolating")), "{msgs:?}");
    }

    proptest::proptest! {
        #[test]
        fn parser_never_panics(text in "\\PC{0,200}") {
            let _ = parse_config(&text);
        }

        #[test]
        fn mutated_configs_never_panic(line in 0usize..12, value in "[-0-9a-z.\"]{0,8}") {
            let mut lines: Vec<String> = MINIMAL.lines().map(str::to_string).collect();
            let i = line % lines.len();
            if let Some((key, _)) = lines[i].clone().split_once(" = ") {
                lines[i] = format!("{key} = {value}");
            }
            let _ = parse_config(&lines.join("\n"));
        }
    }
}
