//! Synthetic distributed least-squares objectives.
//!
//! `f(w) = sum_i p_i f_i(w)` with `f_i(w) = |A_i w - b_i|^2 / (2 m_i)`. With
//! uniform weights this is the plain node average. Every constant the
//! convergence bounds need (smoothness, strong convexity, the optimum, WGC
//! and FedAvg constants) is computed exactly from the data.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Which workers report at a federated sync round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Participation {
    #[default]
    Full,
    /// `K` draws with replacement, proportional to the node weights.
    WithReplacement,
    /// `K` uniform draws without replacement.
    WithoutReplacement,
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    a: DMatrix<f64>,
    b: DVector<f64>,
    hessian: DMatrix<f64>,
    smoothness: f64,
    strong_convexity: f64,
}

impl Node {
    fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() == 0 {
            return Err(Error::InvalidInput("node without rows".into()));
        }
        if a.nrows() != b.len() {
            return Err(Error::InvalidInput(format!(
                "node has {} rows but {} targets",
                a.nrows(),
                b.len()
            )));
        }
        let m = a.nrows() as f64;
        let hessian = a.tr_mul(&a) / m;
        let eig = hessian.clone().symmetric_eigenvalues();
        Ok(Self {
            smoothness: eig.max(),
            strong_convexity: eig.min().max(0.0),
            a,
            b,
            hessian,
        })
    }

    fn rows(&self) -> usize {
        self.a.nrows()
    }

    fn residual(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.a * w - &self.b
    }

    fn value(&self, w: &DVector<f64>) -> f64 {
        self.residual(w).norm_squared() / (2.0 * self.rows() as f64)
    }

    fn grad(&self, w: &DVector<f64>) -> DVector<f64> {
        self.a.tr_mul(&self.residual(w)) / self.rows() as f64
    }
}

/// Parameters of [`make_linreg`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinRegSpec {
    pub seed: u64,
    pub d: usize,
    pub nodes: usize,
    pub kappa: f64,
    pub rows_per_node: usize,
    pub interpolating: bool,
    /// Standard deviation of the target noise when not interpolating.
    pub noise: f64,
    /// Node weights; uniform when absent.
    pub weights: Option<Vec<f64>>,
    /// Planted solution; drawn from a standard Gaussian when absent.
    pub w_star: Option<Vec<f64>>,
}

impl LinRegSpec {
    pub fn new(seed: u64, d: usize, nodes: usize, kappa: f64, rows_per_node: usize) -> Self {
        Self {
            seed,
            d,
            nodes,
            kappa,
            rows_per_node,
            interpolating: false,
            noise: 0.1,
            weights: None,
            w_star: None,
        }
    }

    pub fn interpolating(mut self, yes: bool) -> Self {
        self.interpolating = yes;
        self
    }

    pub fn noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn weights(mut self, weights: Vec<f64>) -> Self {
        self.weights = Some(weights);
        self
    }

    pub fn w_star(mut self, w_star: Vec<f64>) -> Self {
        self.w_star = Some(w_star);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    nodes: Vec<Node>,
    weights: Vec<f64>,
    d: usize,
    hessian: DMatrix<f64>,
    smoothness: f64,
    strong_convexity: f64,
    w_star: DVector<f64>,
    f_star: f64,
    interpolating: bool,
    seed: Option<u64>,
}

fn validate_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} weights for {n} nodes",
            weights.len()
        )));
    }
    if weights.iter().any(|&p| !(p.is_finite() && p > 0.0)) {
        return Err(Error::InvalidInput("weights must be positive".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!(
            "weights must sum to one, got {total}"
        )));
    }
    Ok(())
}

impl QuadraticProblem {
    /// Builds a problem from explicit node data `(A_i, b_i)`.
    ///
    /// The optimum is found by a direct solve; the interpolation flag is set
    /// when every node residual at the optimum is at most `1e-10` relative to
    /// its targets.
    pub fn from_nodes(data: Vec<(DMatrix<f64>, DVector<f64>)>, weights: Option<Vec<f64>>) -> Result<Self> {
        let problem = Self::assemble(data, weights, None, None)?;
        Ok(problem)
    }

    fn assemble(
        data: Vec<(DMatrix<f64>, DVector<f64>)>,
        weights: Option<Vec<f64>>,
        planted: Option<DVector<f64>>,
        seed: Option<u64>,
    ) -> Result<Self> {
        let n = data.len();
        if n == 0 {
            return Err(Error::InvalidInput("at least one node is required".into()));
        }
        let d = data[0].0.ncols();
        if d == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        if data.iter().any(|(a, _)| a.ncols() != d) {
            return Err(Error::InvalidInput("nodes disagree on the dimension".into()));
        }
        let weights = weights.unwrap_or_else(|| vec![1.0 / n as f64; n]);
        validate_weights(&weights, n)?;
        let nodes = data
            .into_iter()
            .map(|(a, b)| Node::new(a, b))
            .collect::<Result<Vec<_>>>()?;

        let mut hessian = DMatrix::zeros(d, d);
        for (node, &p) in nodes.iter().zip(&weights) {
            hessian += &node.hessian * p;
        }
        let smoothness = nodes.iter().map(|n| n.smoothness).fold(0.0, f64::max);
        let strong_convexity = hessian.clone().symmetric_eigenvalues().min();
        if !(strong_convexity > 1e-12 * smoothness) {
            return Err(Error::Rank(format!(
                "global Hessian is singular (min eigenvalue {strong_convexity:e})"
            )));
        }

        let mut problem = Self {
            nodes,
            weights,
            d,
            hessian,
            smoothness,
            strong_convexity,
            w_star: DVector::zeros(d),
            f_star: 0.0,
            interpolating: false,
            seed,
        };
        let (w_star, interpolating) = match planted {
            Some(w) => (w, true),
            None => {
                let w = problem.solve()?;
                let interp = problem.nodes.iter().all(|node| {
                    node.residual(&w).norm() <= 1e-10 * node.b.norm().max(1.0)
                });
                (w, interp)
            }
        };
        problem.f_star = problem.objective_vec(&w_star);
        problem.w_star = w_star;
        problem.interpolating = interpolating;
        Ok(problem)
    }

    fn solve(&self) -> Result<DVector<f64>> {
        let mut rhs = DVector::zeros(self.d);
        for (node, &p) in self.nodes.iter().zip(&self.weights) {
            rhs += node.a.tr_mul(&node.b) * (p / node.rows() as f64);
        }
        let chol = self
            .hessian
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Rank("global Hessian is not positive definite".into()))?;
        let mut w = chol.solve(&rhs);
        // one step of iterative refinement
        let r = &rhs - &self.hessian * &w;
        w += chol.solve(&r);
        Ok(w)
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn has_uniform_weights(&self) -> bool {
        let u = 1.0 / self.n() as f64;
        self.weights.iter().all(|&p| p == u)
    }

    pub fn rows(&self, i: usize) -> usize {
        self.nodes[i].rows()
    }

    /// Smoothness `L = max_i L_i`.
    pub fn l(&self) -> f64 {
        self.smoothness
    }

    /// Strong convexity of the weighted objective.
    pub fn mu(&self) -> f64 {
        self.strong_convexity
    }

    pub fn kappa(&self) -> f64 {
        self.smoothness / self.strong_convexity
    }

    pub fn node_l(&self, i: usize) -> f64 {
        self.nodes[i].smoothness
    }

    /// Strong convexity of node `i` alone (zero when it has fewer rows than
    /// dimensions).
    pub fn node_mu(&self, i: usize) -> f64 {
        self.nodes[i].strong_convexity
    }

    pub fn min_node_mu(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| n.strong_convexity)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn node_matrix(&self, i: usize) -> &DMatrix<f64> {
        &self.nodes[i].a
    }

    pub fn node_targets(&self, i: usize) -> &DVector<f64> {
        &self.nodes[i].b
    }

    pub fn w_star(&self) -> &[f64] {
        self.w_star.as_slice()
    }

    pub fn f_star(&self) -> f64 {
        self.f_star
    }

    pub fn is_interpolating(&self) -> bool {
        self.interpolating
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    fn objective_vec(&self, w: &DVector<f64>) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(node, &p)| p * node.value(w))
            .sum()
    }

    pub fn objective(&self, w: &[f64]) -> f64 {
        self.objective_vec(&DVector::from_column_slice(w))
    }

    pub fn node_objective(&self, i: usize, w: &[f64]) -> f64 {
        self.nodes[i].value(&DVector::from_column_slice(w))
    }

    /// `f(w) - f*`, evaluated as `(w - w*)' H (w - w*) / 2` so that it stays
    /// accurate far below the magnitude of `f*`.
    pub fn fgap(&self, w: &[f64]) -> f64 {
        let e = DVector::from_column_slice(w) - &self.w_star;
        0.5 * e.dot(&(&self.hessian * &e))
    }

    pub fn dist(&self, w: &[f64]) -> f64 {
        w.iter()
            .zip(self.w_star.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// `grad f_i(w) = A_i'(A_i w - b_i) / m_i`.
    pub fn full_grad(&self, i: usize, w: &[f64]) -> Vec<f64> {
        self.nodes[i]
            .grad(&DVector::from_column_slice(w))
            .data
            .into()
    }

    /// Weighted sum of node gradients.
    pub fn global_grad(&self, w: &[f64]) -> Vec<f64> {
        let w = DVector::from_column_slice(w);
        let mut g = DVector::zeros(self.d);
        for (node, &p) in self.nodes.iter().zip(&self.weights) {
            g += node.grad(&w) * p;
        }
        g.data.into()
    }

    /// Gradient of one uniformly drawn row of node `i`; unbiased for
    /// `full_grad(i, w)`.
    pub fn stochastic_grad<R: Rng + ?Sized>(&self, i: usize, w: &[f64], rng: &mut R) -> Vec<f64> {
        let node = &self.nodes[i];
        if node.rows() == 1 {
            return self.full_grad(i, w);
        }
        let r = rng.random_range(0..node.rows());
        let row = node.a.row(r);
        let residual: f64 = row.iter().zip(w).map(|(a, x)| a * x).sum::<f64>() - node.b[r];
        row.iter().map(|a| a * residual).collect()
    }

    /// Self-describing little-endian fixture:
    /// `DEEDPRB1 | seed? | n | d | interp | weights | (m_i, A_i col-major, b_i)* | w*`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"DEEDPRB1");
        match self.seed {
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.to_le_bytes());
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.n() as u64).to_le_bytes());
        out.extend_from_slice(&(self.d as u64).to_le_bytes());
        out.push(u8::from(self.interpolating));
        for p in &self.weights {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for node in &self.nodes {
            out.extend_from_slice(&(node.rows() as u64).to_le_bytes());
            for v in node.a.iter().chain(node.b.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in self.w_star.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor { bytes, pos: 0 };
        if cur.take(8)? != b"DEEDPRB1" {
            return Err(Error::CorruptStream("bad problem fixture magic".into()));
        }
        let seed = match cur.take(1)?[0] {
            0 => None,
            1 => Some(cur.u64()?),
            t => return Err(Error::CorruptStream(format!("bad seed tag {t}"))),
        };
        let n = cur.u64()? as usize;
        let d = cur.u64()? as usize;
        let interpolating = cur.take(1)?[0] == 1;
        let weights = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let m = cur.u64()? as usize;
            let a = (0..m * d).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            let b = (0..m).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            data.push((DMatrix::from_vec(m, d, a), DVector::from_vec(b)));
        }
        let w_star = DVector::from_vec((0..d).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?);
        if cur.pos != bytes.len() {
            return Err(Error::CorruptStream("trailing bytes in problem fixture".into()));
        }
        let planted = interpolating.then_some(w_star.clone());
        let mut problem = Self::assemble(data, Some(weights), planted, seed)?;
        problem.w_star = w_star;
        problem.f_star = problem.objective_vec(&problem.w_star);
        problem.interpolating = interpolating;
        Ok(problem)
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let out = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Decode("problem fixture truncated".into()))?;
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Direct solve of the normal equations. Fails on a singular Hessian.
pub fn solve_optimum(problem: &QuadraticProblem) -> Result<(Vec<f64>, f64)> {
    let w = problem.solve()?;
    let f = problem.objective_vec(&w);
    Ok((w.data.into(), f))
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Node smoothness ratio `max_i L_i / mu` for a stacked matrix with the given
/// global spectrum; `mu` is 1 by construction.
fn shaped_nodes(
    u: &DMatrix<f64>,
    v_t: &DMatrix<f64>,
    global_kappa: f64,
    spec: &LinRegSpec,
    weights: &[f64],
) -> (Vec<DMatrix<f64>>, f64) {
    let d = spec.d;
    let m = spec.rows_per_node;
    let total = (spec.nodes * m) as f64;
    let scales = DVector::from_fn(d, |j, _| {
        let t = if d == 1 { 0.0 } else { j as f64 / (d - 1) as f64 };
        (total * global_kappa.powf(t)).sqrt()
    });
    let mut us = u.clone();
    for (j, mut col) in us.column_iter_mut().enumerate() {
        col *= scales[j];
    }
    let x = us * v_t;
    let mut blocks = Vec::with_capacity(spec.nodes);
    let mut worst: f64 = 0.0;
    for (i, &p) in weights.iter().enumerate() {
        let block = x.rows(i * m, m) / (spec.nodes as f64 * p).sqrt();
        let l = (block.tr_mul(&block) / m as f64).symmetric_eigenvalues().max();
        worst = worst.max(l);
        blocks.push(block);
    }
    (blocks, worst)
}

/// Gaussian least-squares problem whose reported condition number
/// `max_i L_i / mu` equals `spec.kappa`.
///
/// The stacked data matrix is SVD-rescaled so the global Hessian has
/// eigenvalues geometrically spaced on `[1, kappa_g]`; `kappa_g` is found by
/// bisection so that the worst node smoothness equals `spec.kappa`.
pub fn make_linreg(spec: &LinRegSpec) -> Result<QuadraticProblem> {
    if spec.d == 0 || spec.nodes == 0 || spec.rows_per_node == 0 {
        return Err(Error::InvalidInput(
            "d, nodes and rows_per_node must be positive".into(),
        ));
    }
    if !(spec.kappa >= 1.0 && spec.kappa.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "target kappa must be >= 1, got {}",
            spec.kappa
        )));
    }
    let total_rows = spec.nodes * spec.rows_per_node;
    if total_rows < spec.d {
        return Err(Error::Rank(format!(
            "{total_rows} rows cannot determine {} unknowns",
            spec.d
        )));
    }
    let weights = spec
        .weights
        .clone()
        .unwrap_or_else(|| vec![1.0 / spec.nodes as f64; spec.nodes]);
    validate_weights(&weights, spec.nodes)?;

    let mut rng = rng::stream(spec.seed, rng::GLOBAL, 0, Purpose::Problem);
    let x = gaussian_matrix(&mut rng, total_rows, spec.d);
    let svd = x.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V'");

    let target = spec.kappa;
    let (mut blocks, floor) = shaped_nodes(&u, &v_t, 1.0, spec, &weights);
    if floor > target * (1.0 + 1e-9) {
        return Err(Error::Precondition(format!(
            "target kappa {target} is below the smallest attainable value {floor:.6} \
             for this data layout"
        )));
    }
    if floor < target * (1.0 - 1e-12) {
        let (mut lo, mut hi) = (0.0f64, target.ln());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let (b, ratio) = shaped_nodes(&u, &v_t, mid.exp(), spec, &weights);
            if ((ratio - target) / target).abs() <= 1e-12 {
                blocks = b;
                break;
            }
            if ratio < target {
                lo = mid;
            } else {
                hi = mid;
            }
            blocks = b;
            if hi - lo < 1e-15 {
                break;
            }
        }
    }

    let w_star = match &spec.w_star {
        Some(w) if w.len() != spec.d => {
            return Err(Error::InvalidInput(format!(
                "planted solution has {} coordinates, expected {}",
                w.len(),
                spec.d
            )))
        }
        Some(w) => DVector::from_column_slice(w),
        None => DVector::from_fn(spec.d, |_, _| rng.sample(StandardNormal)),
    };
    let data = blocks
        .into_iter()
        .map(|a| {
            let mut b = &a * &w_star;
            if !spec.interpolating {
                for v in b.iter_mut() {
                    *v += spec.noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            (a, b)
        })
        .collect();
    let planted = spec.interpolating.then_some(w_star);
    QuadraticProblem::assemble(data, Some(weights), planted, Some(spec.seed))
}

/// `sup_{|e| <= radius} e'Pe + 2q'e + c` for symmetric positive semidefinite
/// `P`, via the secular equation of the maximizing boundary point.
pub fn sup_quadratic_on_ball(p: &DMatrix<f64>, q: &DVector<f64>, c: f64, radius: f64) -> f64 {
    let eig = SymmetricEigen::new(p.clone());
    let q_hat = eig.eigenvectors.tr_mul(q);
    let lambdas = &eig.eigenvalues;
    let top = lambdas.max();
    let scale = top.abs().max(1.0);
    // components on the top eigenspace
    let top_mass: f64 = lambdas
        .iter()
        .zip(q_hat.iter())
        .filter(|(l, _)| top - **l <= 1e-12 * scale)
        .map(|(_, qj)| qj * qj)
        .sum();
    let secular = |lambda: f64| -> f64 {
        lambdas
            .iter()
            .zip(q_hat.iter())
            .map(|(l, qj)| {
                let gap = lambda - l;
                if gap <= 0.0 {
                    if *qj == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    (qj / gap).powi(2)
                }
            })
            .sum()
    };
    let value_at = |e: &DVector<f64>| e.dot(&(p * e)) + 2.0 * q.dot(e) + c;

    let q_norm = q.norm();
    if q_norm == 0.0 {
        return top * radius * radius + c;
    }
    let r2 = radius * radius;
    if top_mass <= 1e-30 * q_norm * q_norm {
        // possible hard case: the secular function is bounded at the top
        let mut e_hat = DVector::zeros(lambdas.len());
        let mut top_idx = 0;
        for (j, (l, qj)) in lambdas.iter().zip(q_hat.iter()).enumerate() {
            if top - l > 1e-12 * scale {
                e_hat[j] = qj / (top - l);
            } else {
                top_idx = j;
            }
        }
        let partial = e_hat.norm_squared();
        if partial <= r2 {
            e_hat[top_idx] = (r2 - partial).sqrt();
            let e = &eig.eigenvectors * e_hat;
            return value_at(&e);
        }
    }
    let (mut lo, mut hi) = (top, top + q_norm / radius);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if secular(mid) > r2 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = hi;
    let e_hat = DVector::from_fn(lambdas.len(), |j, _| {
        let gap = lambda - lambdas[j];
        if gap > 0.0 {
            q_hat[j] / gap
        } else {
            0.0
        }
    });
    // rescale onto the sphere to remove bisection residue
    let norm = e_hat.norm();
    let e_hat = if norm > 0.0 { e_hat * (radius / norm) } else { e_hat };
    value_at(&(&eig.eigenvectors * e_hat))
}

/// Second moment of the single-row stochastic gradient of node `i` as a
/// quadratic in `e = w - w*`: returns `(M, q, c)` with
/// `E|g|^2 = e'Me + 2q'e + c`.
fn second_moment_form(problem: &QuadraticProblem, i: usize) -> (DMatrix<f64>, DVector<f64>, f64) {
    let node = &problem.nodes[i];
    let d = problem.d;
    let m = node.rows() as f64;
    let residual = node.residual(&problem.w_star);
    let mut mat = DMatrix::zeros(d, d);
    let mut lin = DVector::zeros(d);
    let mut cst = 0.0;
    for (r, row) in node.a.row_iter().enumerate() {
        let a = row.transpose();
        let sq = a.norm_squared();
        mat += (&a * a.transpose()) * (sq / m);
        lin += &a * (sq * residual[r] / m);
        cst += sq * residual[r] * residual[r] / m;
    }
    (mat, lin, cst)
}

/// Certified weak-growth constant.
///
/// The ratio `(1/N) sum_i E|g_i(w)|^2 / (2 L (f(w) - f*))` is evaluated in
/// closed form at `sample_budget` random points and at its exact maximizer
/// (top generalized eigenvector); the maximum, floored at one, is returned
/// with a 5% margin.
pub fn estimate_rho<R: Rng + ?Sized>(problem: &QuadraticProblem, sample_budget: usize, rng: &mut R) -> Result<f64> {
    if !problem.interpolating {
        return Err(Error::Precondition(
            "weak growth needs an interpolating problem".into(),
        ));
    }
    let d = problem.d;
    let mut moment = DMatrix::zeros(d, d);
    for (i, &p) in problem.weights.iter().enumerate() {
        moment += second_moment_form(problem, i).0 * p;
    }
    let l = problem.smoothness;
    let ratio = |e: &DVector<f64>| {
        let den = l * e.dot(&(&problem.hessian * e));
        if den > 0.0 {
            e.dot(&(&moment * e)) / den
        } else {
            0.0
        }
    };

    let chol = problem
        .hessian
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Rank("global Hessian is not positive definite".into()))?;
    let lower = chol.l();
    let lower_inv = lower
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Rank("Cholesky factor is singular".into()))?;
    let reduced = &lower_inv * &moment * lower_inv.transpose();
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    let eig = SymmetricEigen::new(reduced);
    let (top, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
    let maximizer = lower_inv.transpose() * eig.eigenvectors.column(top);

    let mut best = ratio(&maximizer);
    for _ in 0..sample_budget {
        let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        best = best.max(ratio(&e));
    }
    Ok(1.05 * best.max(1.0))
}

/// Left-hand side of the weak growth condition at `w`:
/// `(1/N) sum_i E|g_i(w)|^2` with exact per-row expectations.
pub fn wgc_lhs(problem: &QuadraticProblem, w: &[f64]) -> f64 {
    let e = DVector::from_column_slice(w) - &problem.w_star;
    problem
        .weights
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let (mat, lin, cst) = second_moment_form(problem, i);
            p * (e.dot(&(&mat * &e)) + 2.0 * lin.dot(&e) + cst)
        })
        .sum()
}

/// Constants of the FedAvg recursion for a given local-step count and
/// participation scheme, certified on a ball around `w*`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FedConstants {
    /// Per-node stochastic gradient variance bounds.
    pub sigma_sq: Vec<f64>,
    /// Uniform bound on the stochastic gradient second moment.
    pub g_sq: f64,
    /// Heterogeneity `f* - sum_k p_k f_k*`.
    pub gamma_het: f64,
    pub weights: Vec<f64>,
    pub smoothness: f64,
    pub local_steps: usize,
    pub participants: usize,
    pub participation: Participation,
    pub radius: f64,
    pub b: f64,
    pub c: f64,
}

impl FedConstants {
    /// `sum p_k^2 sigma_k^2 + 6 L Gamma + 8 (E-1)^2 G^2`.
    pub fn b_from_parts(&self) -> f64 {
        let var: f64 = self
            .weights
            .iter()
            .zip(&self.sigma_sq)
            .map(|(p, s)| p * p * s)
            .sum();
        let e = self.local_steps as f64;
        var + 6.0 * self.smoothness * self.gamma_het + 8.0 * (e - 1.0).powi(2) * self.g_sq
    }

    pub fn c_from_parts(&self) -> f64 {
        participation_constant(
            self.participation,
            self.weights.len(),
            self.participants,
            self.local_steps,
            self.g_sq,
        )
    }
}

/// `0` (full), `4 E^2 G^2 / K` (with replacement), or
/// `(N-K)/(N-1) * 4 E^2 G^2 / K` (without replacement).
pub fn participation_constant(
    participation: Participation,
    n: usize,
    k: usize,
    local_steps: usize,
    g_sq: f64,
) -> f64 {
    let e = local_steps as f64;
    let base = 4.0 * e * e * g_sq / k as f64;
    match participation {
        Participation::Full => 0.0,
        Participation::WithReplacement => base,
        Participation::WithoutReplacement => {
            if n <= 1 || k >= n {
                0.0
            } else {
                (n - k) as f64 / (n - 1) as f64 * base
            }
        }
    }
}

/// Minimum of `f_i` alone (least squares, possibly underdetermined).
pub fn node_minimum(problem: &QuadraticProblem, i: usize) -> f64 {
    let node = &problem.nodes[i];
    let svd = node.a.clone().svd(true, true);
    let w = svd
        .solve(&node.b, 1e-12 * svd.singular_values.max())
        .expect("U and V' were computed");
    node.value(&w)
}

pub fn estimate_fed_constants(
    problem: &QuadraticProblem,
    local_steps: usize,
    participants: usize,
    participation: Participation,
    radius: f64,
) -> Result<FedConstants> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "certification radius must be positive, got {radius}"
        )));
    }
    if local_steps == 0 {
        return Err(Error::InvalidInput("local step count must be positive".into()));
    }
    let n = problem.n();
    let k = match participation {
        Participation::Full => n,
        _ => participants,
    };
    if k == 0 {
        return Err(Error::InvalidInput("participant count must be positive".into()));
    }

    let mut sigma_sq = Vec::with_capacity(n);
    let mut g_sq: f64 = 0.0;
    for i in 0..n {
        let (mat, lin, cst) = second_moment_form(problem, i);
        g_sq = g_sq.max(sup_quadratic_on_ball(&mat, &lin, cst, radius));

        let node = &problem.nodes[i];
        let h = &node.hessian;
        let grad_star = node.grad(&problem.w_star);
        let var_mat = &mat - h * h;
        let var_mat = (&var_mat + var_mat.transpose()) * 0.5;
        let var_lin = &lin - h * &grad_star;
        let var_cst = cst - grad_star.norm_squared();
        sigma_sq.push(sup_quadratic_on_ball(&var_mat, &var_lin, var_cst, radius).max(0.0));
    }

    let local_min: f64 = (0..n)
        .map(|i| problem.weights[i] * node_minimum(problem, i))
        .sum();
    let gamma_het = (problem.f_star - local_min).max(0.0);

    let mut out = FedConstants {
        sigma_sq,
        g_sq,
        gamma_het,
        weights: problem.weights.clone(),
        smoothness: problem.smoothness,
        local_steps,
        participants: k,
        participation,
        radius,
        b: 0.0,
        c: 0.0,
    };
    out.b = out.b_from_parts();
    out.c = out.c_from_parts();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn scalar_problem() -> QuadraticProblem {
        QuadraticProblem::from_nodes(
            vec![(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 2.0))],
            None,
        )
        .unwrap()
    }

    fn small_spec() -> LinRegSpec {
        LinRegSpec::new(9, 8, 3, 6.0, 12)
    }

    #[test]
    fn scalar_problem_constants() {
        let p = scalar_problem();
        assert_eq!(p.l(), 1.0);
        assert_eq!(p.mu(), 1.0);
        assert_eq!(p.w_star(), &[2.0]);
        assert_eq!(p.f_star(), 0.0);
        assert!(p.is_interpolating());
        assert_eq!(p.objective(&[3.0]), 0.5);
        assert_eq!(p.global_grad(&[3.0]), vec![1.0]);
        assert_eq!(solve_optimum(&p).unwrap(), (vec![2.0], 0.0));
    }

    #[test]
    fn scalar_linreg_matches_hand_built() {
        let spec = LinRegSpec::new(4, 1, 1, 1.0, 1).interpolating(true).w_star(vec![2.0]);
        let p = make_linreg(&spec).unwrap();
        assert!((p.l() - 1.0).abs() < 1e-12 && (p.mu() - 1.0).abs() < 1e-12);
        assert!((p.objective(&[3.0]) - 0.5).abs() < 1e-12);
        assert_eq!(p.f_star(), 0.0);
    }

    #[test]
    fn linreg_hits_target_kappa() {
        let p = make_linreg(&LinRegSpec::new(1, 100, 10, 16.0, 100)).unwrap();
        assert!((p.kappa() - 16.0).abs() <= 16.0 * 1e-6, "kappa = {}", p.kappa());
        let worst = (0..p.n()).map(|i| p.node_l(i)).fold(0.0, f64::max);
        assert!((p.l() - worst).abs() <= 1e-8 * worst);
    }

    #[test]
    fn linreg_is_deterministic() {
        let spec = small_spec();
        let a = make_linreg(&spec).unwrap();
        let b = make_linreg(&spec).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let spec = LinRegSpec::new(1, 10, 2, 4.0, 3);
        assert!(matches!(make_linreg(&spec), Err(Error::Rank(_))));
    }

    #[test]
    fn interpolating_optimum_is_exact() {
        let p = make_linreg(&small_spec().interpolating(true)).unwrap();
        assert!(p.is_interpolating());
        assert_eq!(p.f_star(), 0.0);
        let g = p.global_grad(p.w_star());
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let w_norm = p.dist(&vec![0.0; p.d()]);
        assert!(norm <= 1e-10 * p.l() * w_norm);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..p.n() {
            for _ in 0..20 {
                assert!(p.stochastic_grad(i, p.w_star(), &mut rng).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn optimum_beats_perturbations() {
        let p = make_linreg(&LinRegSpec::new(3, 100, 10, 16.0, 100)).unwrap();
        let (w, f) = solve_optimum(&p).unwrap();
        let g = p.global_grad(&w);
        let g_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let w_norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(g_norm <= 1e-10 * p.l() * (1.0 + w_norm));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let scale = 10f64.powf(rng.random_range(-4.0..1.0));
            let v: Vec<f64> = w
                .iter()
                .map(|x| x + scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            assert!(p.objective(&v) >= f);
        }
    }

    #[test]
    fn fgap_matches_objective_difference() {
        let p = make_linreg(&small_spec()).unwrap();
        let w: Vec<f64> = (0..p.d()).map(|j| j as f64 * 0.3 - 1.0).collect();
        let direct = p.objective(&w) - p.f_star();
        assert!((p.fgap(&w) - direct).abs() <= 1e-10 * direct.abs().max(1.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = make_linreg(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let w: Vec<f64> = (0..p.d()).map(|_| rng.sample(StandardNormal)).collect();
            let dir: Vec<f64> = (0..p.d()).map(|_| rng.sample(StandardNormal)).collect();
            let h = 1e-5;
            let plus: Vec<f64> = w.iter().zip(&dir).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = w.iter().zip(&dir).map(|(a, b)| a - h * b).collect();
            let fd = (p.objective(&plus) - p.objective(&minus)) / (2.0 * h);
            let g = p.global_grad(&w);
            let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "fd {fd} vs {an}");
            for i in 0..p.n() {
                let fd_i = (p.node_objective(i, &plus) - p.node_objective(i, &minus)) / (2.0 * h);
                let an_i: f64 = p.full_grad(i, &w).iter().zip(&dir).map(|(a, b)| a * b).sum();
                assert!((fd_i - an_i).abs() <= 1e-6 * an_i.abs().max(1.0));
            }
        }
    }

    #[test]
    fn reported_constants_match_eigenvalues() {
        let p = make_linreg(&small_spec()).unwrap();
        for i in 0..p.n() {
            let a = p.node_matrix(i);
            let h = a.tr_mul(a) / a.nrows() as f64;
            let top = SymmetricEigen::new(h).eigenvalues.max();
            assert!((p.node_l(i) - top).abs() <= 1e-8 * top);
        }
        let low = SymmetricEigen::new(p.hessian().clone()).eigenvalues.min();
        assert!((p.mu() - low).abs() <= 1e-8 * low);
    }

    #[test]
    fn single_row_stochastic_equals_full() {
        let p = make_linreg(&LinRegSpec::new(2, 3, 4, 20.0, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = [0.3, -0.2, 1.1];
        for i in 0..p.n() {
            assert_eq!(p.stochastic_grad(i, &w, &mut rng), p.full_grad(i, &w));
        }
    }

    #[test]
    fn stochastic_gradient_is_unbiased() {
        let p = make_linreg(&LinRegSpec::new(6, 4, 2, 3.0, 10)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = [0.5, -1.0, 0.25, 2.0];
        let draws = 100_000;
        let mut mean = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..draws {
            for (j, g) in p.stochastic_grad(0, &w, &mut rng).into_iter().enumerate() {
                mean[j] += g;
                sq[j] += g * g;
            }
        }
        let full = p.full_grad(0, &w);
        for j in 0..4 {
            let m = mean[j] / draws as f64;
            let var = sq[j] / draws as f64 - m * m;
            let se = (var / draws as f64).sqrt();
            assert!((m - full[j]).abs() <= 5.0 * se + 1e-12, "coord {j}: {m} vs {}", full[j]);
        }
    }

    #[test]
    fn rho_scalar_single_row() {
        let p = scalar_problem();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rho = estimate_rho(&p, 100, &mut rng).unwrap();
        assert!((rho - 1.05).abs() < 1e-12, "rho = {rho}");
    }

    #[test]
    fn rho_requires_interpolation() {
        let p = make_linreg(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(estimate_rho(&p, 10, &mut rng), Err(Error::Precondition(_))));
    }

    #[test]
    fn rho_is_certified_and_monotone_in_budget() {
        let p = make_linreg(&LinRegSpec::new(12, 6, 3, 5.0, 8).interpolating(true)).unwrap();
        let rho_small = estimate_rho(&p, 50, &mut rng::stream(1, 0, 0, Purpose::Estimation)).unwrap();
        let rho_big = estimate_rho(&p, 100, &mut rng::stream(1, 0, 0, Purpose::Estimation)).unwrap();
        assert!(rho_big >= rho_small);
        assert!(rho_small >= 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let scale = 10f64.powf(rng.random_range(-3.0..2.0));
            let w: Vec<f64> = p
                .w_star()
                .iter()
                .map(|x| x + scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let lhs = wgc_lhs(&p, &w);
            let rhs = 2.0 * rho_small * p.l() * p.fgap(&w);
            assert!(lhs <= rhs * (1.0 + 1e-12), "{lhs} > {rhs}");
        }
    }

    #[test]
    fn ball_supremum_matches_brute_force_in_2d() {
        let p = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        for (q, radius) in [
            (DVector::from_vec(vec![0.5, -1.0]), 1.5),
            (DVector::from_vec(vec![0.0, 0.0]), 2.0),
            (DVector::from_vec(vec![10.0, 3.0]), 0.1),
        ] {
            let sup = sup_quadratic_on_ball(&p, &q, 0.7, radius);
            let mut brute = f64::NEG_INFINITY;
            for k in 0..200_000 {
                let th = k as f64 / 200_000.0 * std::f64::consts::TAU;
                let e = DVector::from_vec(vec![radius * th.cos(), radius * th.sin()]);
                brute = brute.max(e.dot(&(&p * &e)) + 2.0 * q.dot(&e) + 0.7);
            }
            assert!(sup >= brute - 1e-9, "{sup} < {brute}");
            assert!(sup <= brute + 1e-6 * brute.abs().max(1.0), "{sup} vs {brute}");
        }
    }

    #[test]
    fn ball_supremum_hard_case() {
        // q orthogonal to the top eigenvector
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let q = DVector::from_vec(vec![0.0, 0.3]);
        let sup = sup_quadratic_on_ball(&p, &q, 0.0, 1.0);
        let mut brute = f64::NEG_INFINITY;
        for k in 0..100_000 {
            let th = k as f64 / 100_000.0 * std::f64::consts::TAU;
            let e = DVector::from_vec(vec![th.cos(), th.sin()]);
            brute = brute.max(e.dot(&(&p * &e)) + 2.0 * q.dot(&e));
        }
        assert!((sup - brute).abs() <= 1e-6, "{sup} vs {brute}");
    }

    #[test]
    fn fed_constants_homogeneous_and_participation() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 0.5, -0.2]);
        let p = QuadraticProblem::from_nodes(vec![(a.clone(), b.clone()), (a, b)], None).unwrap();
        let full = estimate_fed_constants(&p, 3, 2, Participation::Full, 2.0).unwrap();
        assert!(full.gamma_het.abs() < 1e-12);
        assert_eq!(full.c, 0.0);
        assert_eq!(full.b, full.b_from_parts());
        let without = estimate_fed_constants(&p, 3, 2, Participation::WithoutReplacement, 2.0).unwrap();
        assert_eq!(without.c, 0.0);
        let with = estimate_fed_constants(&p, 3, 1, Participation::WithReplacement, 2.0).unwrap();
        assert!((with.c - 4.0 * 9.0 * with.g_sq).abs() <= 1e-12 * with.c);
    }

    #[test]
    fn fed_constants_bound_sampled_moments() {
        let p = make_linreg(&LinRegSpec::new(21, 5, 4, 4.0, 10).noise(0.5)).unwrap();
        let radius = 1.5;
        let fed = estimate_fed_constants(&p, 4, 2, Participation::WithReplacement, radius).unwrap();
        assert!(fed.gamma_het > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let dir: Vec<f64> = (0..p.d()).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let r = radius * rng.random::<f64>().sqrt();
            let w: Vec<f64> = p.w_star().iter().zip(&dir).map(|(s, x)| s + r * x / norm).collect();
            for i in 0..p.n() {
                let full = p.full_grad(i, &w);
                let m = p.rows(i);
                let (mut second, mut var) = (0.0, 0.0);
                for row in 0..m {
                    let a = p.node_matrix(i).row(row);
                    let res: f64 = a.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() - p.node_targets(i)[row];
                    let g: Vec<f64> = a.iter().map(|x| x * res).collect();
                    second += g.iter().map(|x| x * x).sum::<f64>() / m as f64;
                    var += g.iter().zip(&full).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / m as f64;
                }
                assert!(second <= fed.g_sq * (1.0 + 1e-9));
                assert!(var <= fed.sigma_sq[i] * (1.0 + 1e-9) + 1e-12);
            }
        }
    }

    #[test]
    fn fixture_roundtrip() {
        for spec in [small_spec(), small_spec().interpolating(true)] {
            let p = make_linreg(&spec).unwrap();
            let bytes = p.to_bytes();
            let back = QuadraticProblem::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes(), bytes);
            assert_eq!(back.w_star(), p.w_star());
            assert_eq!(back.l(), p.l());
        }
        assert!(QuadraticProblem::from_bytes(b"DEEDPRB1\0").is_err());
    }
}
