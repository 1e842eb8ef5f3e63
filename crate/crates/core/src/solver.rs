//! L1-penalized logistic regression with per-column penalty factors.
//!
//! Minimizes
//!
//! ```text
//! f(b0, b) = -(1/N) sum_i [y_i eta_i - log(1 + exp(eta_i))] + lambda * sum_j v_j |b_j|
//! ```
//!
//! with `eta_i = b0 + x_i . b` and an unpenalized intercept. Each outer
//! iteration forms the quadratic approximation of the log-likelihood at the
//! current linear predictor (IRLS working weights and response); the inner
//! loop minimizes the penalized quadratic by cyclic coordinate descent with
//! soft-thresholding. The intercept and every column with `v_j = 0` form an
//! unpenalized block that is minimized exactly (a small Cholesky solve) once
//! per sweep. Penalized coordinates use an active-set scheme: a full sweep,
//! then sweeps over the nonzero set until stable, then a full sweep to verify
//! nothing else enters.
//!
//! A fit is reported as converged only when the KKT conditions of the true
//! objective hold to `kkt_tol` and the relative objective change of the last
//! outer step is below `tol`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{DesignColumn, SparseDesignMatrix};

/// KKT certification tolerance on the gradient scale.
pub const KKT_EPS: f64 = 1e-6;
/// IRLS weights are floored here to avoid blow-ups at saturated probabilities.
pub const WEIGHT_FLOOR: f64 = 1e-5;
/// Coefficients smaller than this after a coordinate update become exact zeros.
pub const ZERO_SNAP: f64 = 1e-12;
/// Unpenalized coefficients beyond this magnitude indicate separation.
pub const SEPARATION_BOUND: f64 = 30.0;
const ANDERSON_DEPTH: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Relative objective change between outer iterations.
    pub tol: f64,
    /// Coordinate sweeps allowed per lambda.
    pub max_iter: usize,
    /// KKT residual target; convergence requires it.
    pub kkt_tol: f64,
    /// Record one trace entry per outer iteration.
    pub verbose: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-7,
            max_iter: 10_000,
            kkt_tol: 1e-7,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub objective: f64,
    pub n_nonzero: usize,
    pub max_kkt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub intercept: f64,
    /// Nonzero coefficients as `(column, value)`, sorted by column.
    pub coefficients: Vec<(usize, f64)>,
    pub lambda: f64,
    pub n_nonzero: usize,
    pub converged: bool,
    /// Outer (IRLS) iterations.
    pub iterations: usize,
    /// Coordinate sweeps across all outer iterations.
    pub sweeps: usize,
    pub objective: f64,
    pub max_kkt: f64,
    pub n_cols: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<IterationTrace>,
}

impl LassoFit {
    /// Dense coefficient vector of length `n_cols`.
    pub fn dense_coefficients(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.n_cols];
        for &(j, v) in &self.coefficients {
            b[j] = v;
        }
        b
    }

    pub fn coefficient(&self, j: usize) -> f64 {
        self.coefficients
            .binary_search_by_key(&j, |&(k, _)| k)
            .map(|i| self.coefficients[i].1)
            .unwrap_or(0.0)
    }

    /// A copy with the given columns zeroed.
    pub fn with_zeroed(&self, columns: &[usize]) -> LassoFit {
        let mut out = self.clone();
        out.coefficients.retain(|(j, _)| !columns.contains(j));
        out.n_nonzero = out.coefficients.len();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPath {
    pub lambdas: Vec<f64>,
    pub fits: Vec<LassoFit>,
}

#[inline]
pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(eta))` without overflow.
#[inline]
pub fn log1pexp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// `log(1+e^eta) - y*eta` averaged over rows, plus `sum_j (lambda v_j)|b_j|`.
pub fn objective(eta: &[f64], y: &[f64], penalty_factors: &[f64], lambda: f64, beta: &[f64]) -> f64 {
    let n = y.len() as f64;
    let loss: f64 = eta.iter().zip(y).map(|(&e, &yi)| log1pexp(e) - yi * e).sum::<f64>() / n;
    let pen: f64 = beta
        .iter()
        .zip(penalty_factors)
        .map(|(b, v)| (lambda * v) * b.abs())
        .sum();
    loss + pen
}

/// Objective of a fit on `(design, y)`.
pub fn fit_objective(design: &SparseDesignMatrix, y: &[u8], penalty_factors: &[f64], fit: &LassoFit) -> f64 {
    let eta = design.linear_predictor(fit.intercept, &fit.coefficients);
    let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    objective(&eta, &yf, penalty_factors, fit.lambda, &fit.dense_coefficients())
}

/// `(1/N) X^T r` for every column.
fn column_gradients(design: &SparseDesignMatrix, r: &[f64]) -> Vec<f64> {
    let n = r.len() as f64;
    design
        .columns()
        .iter()
        .map(|col| match col {
            DesignColumn::Binary(rows) => rows.iter().map(|&i| r[i as usize]).sum::<f64>() / n,
            DesignColumn::Dense(v) => v.iter().zip(r).map(|(x, ri)| x * ri).sum::<f64>() / n,
        })
        .collect()
}

fn max_kkt_from_gradients(
    grads: &[f64],
    intercept_grad: f64,
    beta: &[f64],
    penalty_factors: &[f64],
    lambda: f64,
) -> f64 {
    let mut worst = intercept_grad.abs();
    for ((&g, &b), &v) in grads.iter().zip(beta).zip(penalty_factors) {
        let pen = lambda * v;
        let res = if v == 0.0 {
            g.abs()
        } else if b == 0.0 {
            (g.abs() - pen).max(0.0)
        } else {
            (g - pen * b.signum()).abs()
        };
        worst = worst.max(res);
    }
    worst
}

/// Largest KKT violation of `fit` on `(design, y)`, on the gradient scale.
pub fn kkt_residual(design: &SparseDesignMatrix, y: &[u8], penalty_factors: &[f64], fit: &LassoFit) -> f64 {
    let eta = design.linear_predictor(fit.intercept, &fit.coefficients);
    let r: Vec<f64> = eta.iter().zip(y).map(|(&e, &yi)| yi as f64 - sigmoid(e)).collect();
    let g0 = r.iter().sum::<f64>() / r.len() as f64;
    let grads = column_gradients(design, &r);
    max_kkt_from_gradients(&grads, g0, &fit.dense_coefficients(), penalty_factors, fit.lambda)
}

fn check_inputs(design: &SparseDesignMatrix, y: &[u8], penalty_factors: &[f64]) -> Result<()> {
    if y.len() != design.n_rows() {
        return Err(Error::Dimension(format!(
            "{} outcomes for {} rows",
            y.len(),
            design.n_rows()
        )));
    }
    if penalty_factors.len() != design.n_cols() {
        return Err(Error::Dimension(format!(
            "{} penalty factors for {} columns",
            penalty_factors.len(),
            design.n_cols()
        )));
    }
    if let Some(bad) = y.iter().find(|&&v| v > 1) {
        return Err(Error::InvalidInput(format!("outcome value {bad} is not 0/1")));
    }
    if let Some(v) = penalty_factors.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidInput(format!(
            "penalty factor {v} must be finite and >= 0"
        )));
    }
    for col in design.columns() {
        if let DesignColumn::Dense(v) = col {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput("non-finite design value".into()));
            }
        }
    }
    let pos = y.iter().filter(|&&v| v == 1).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::DegenerateOutcome {
            n: y.len(),
            value: if pos == 0 { 0 } else { 1 },
        });
    }
    Ok(())
}

/// Working state of one fit.
struct Solver<'a> {
    design: &'a SparseDesignMatrix,
    y: Vec<f64>,
    pf: &'a [f64],
    lambda: f64,
    opts: FitOptions,
    /// Penalized columns held at zero (base-model fits).
    freeze_penalized: bool,
    n: f64,
    penalized: Vec<usize>,
    unpenalized: Vec<usize>,
    /// Dense copies of unpenalized columns.
    ucols: Vec<Vec<f64>>,
    beta0: f64,
    beta: Vec<f64>,
    eta: Vec<f64>,
    /// Working residual and IRLS weight per row, interleaved for locality.
    rw: Vec<[f64; 2]>,
    xv: Vec<f64>,
    block_chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    /// Unpenalized columns that participate in the block (nonzero weight mass).
    block_members: Vec<usize>,
    sweeps: usize,
}

impl<'a> Solver<'a> {
    fn new(
        design: &'a SparseDesignMatrix,
        y: &[u8],
        pf: &'a [f64],
        lambda: f64,
        opts: FitOptions,
        freeze_penalized: bool,
    ) -> Self {
        let p = design.n_cols();
        let (unpenalized, penalized): (Vec<usize>, Vec<usize>) = (0..p).partition(|&j| pf[j] == 0.0);
        let ucols = unpenalized
            .iter()
            .map(|&j| match design.column(j) {
                DesignColumn::Binary(rows) => {
                    let mut v = vec![0.0; design.n_rows()];
                    rows.iter().for_each(|&i| v[i as usize] = 1.0);
                    v
                }
                DesignColumn::Dense(v) => v.clone(),
            })
            .collect();
        let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let ybar = yf.iter().sum::<f64>() / yf.len() as f64;
        Solver {
            design,
            n: yf.len() as f64,
            y: yf,
            pf,
            lambda,
            opts,
            freeze_penalized,
            penalized,
            unpenalized,
            ucols,
            beta0: logit(ybar),
            beta: vec![0.0; p],
            eta: Vec::new(),
            rw: Vec::new(),
            xv: vec![0.0; p],
            block_chol: None,
            block_members: Vec::new(),
            sweeps: 0,
        }
    }

    fn compute_eta(&mut self) {
        let mut eta = vec![self.beta0; self.design.n_rows()];
        for (j, &b) in self.beta.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            match self.design.column(j) {
                DesignColumn::Binary(rows) => rows.iter().for_each(|&i| eta[i as usize] += b),
                DesignColumn::Dense(v) => eta.iter_mut().zip(v).for_each(|(e, x)| *e += b * x),
            }
        }
        self.eta = eta;
    }

    fn current_objective(&self) -> f64 {
        objective(&self.eta, &self.y, self.pf, self.lambda, &self.beta)
    }

    /// Sets probabilities, floored weights and residuals `y - p`.
    fn refresh_weights(&mut self) {
        self.rw = self
            .eta
            .iter()
            .zip(&self.y)
            .map(|(&e, &y)| {
                let p = sigmoid(e);
                [y - p, (p * (1.0 - p)).max(WEIGHT_FLOOR)]
            })
            .collect();
    }

    fn max_kkt(&self) -> f64 {
        let r: Vec<f64> = self.rw.iter().map(|v| v[0]).collect();
        let g0 = r.iter().sum::<f64>() / self.n;
        let grads = column_gradients(self.design, &r);
        if self.freeze_penalized {
            let mut worst = g0.abs();
            for &j in &self.unpenalized {
                worst = worst.max(grads[j].abs());
            }
            return worst;
        }
        max_kkt_from_gradients(&grads, g0, &self.beta, self.pf, self.lambda)
    }

    fn n_nonzero(&self) -> usize {
        self.beta.iter().filter(|b| **b != 0.0).count()
    }

    fn prepare_quadratic(&mut self) {
        let n = self.n;
        for &j in &self.penalized {
            self.xv[j] = match self.design.column(j) {
                DesignColumn::Binary(rows) => rows.iter().map(|&i| self.rw[i as usize][1]).sum::<f64>() / n,
                DesignColumn::Dense(v) => v.iter().zip(&self.rw).map(|(x, rw)| rw[1] * x * x).sum::<f64>() / n,
            };
        }
        // Unpenalized block Gram matrix, intercept first.
        self.block_members = (0..self.unpenalized.len())
            .filter(|&k| self.ucols[k].iter().any(|&x| x != 0.0))
            .collect();
        let m = self.block_members.len() + 1;
        let mut g = DMatrix::<f64>::zeros(m, m);
        let col = |k: usize| -> Option<&Vec<f64>> { (k > 0).then(|| &self.ucols[self.block_members[k - 1]]) };
        for a in 0..m {
            for b in a..m {
                let s: f64 = match (col(a), col(b)) {
                    (None, None) => self.rw.iter().map(|v| v[1]).sum(),
                    (None, Some(xb)) | (Some(xb), None) => self.rw.iter().zip(xb).map(|(v, x)| v[1] * x).sum(),
                    (Some(xa), Some(xb)) => self
                        .rw
                        .iter()
                        .zip(xa.iter().zip(xb))
                        .map(|(v, (x1, x2))| v[1] * x1 * x2)
                        .sum(),
                };
                g[(a, b)] = s / n;
                g[(b, a)] = s / n;
            }
        }
        let mut jitter = 0.0;
        let scale = (0..m).map(|i| g[(i, i)]).fold(0.0f64, f64::max).max(1e-300);
        self.block_chol = loop {
            let mut gj = g.clone();
            for i in 0..m {
                gj[(i, i)] += jitter;
            }
            if let Some(c) = gj.cholesky() {
                break Some(c);
            }
            jitter = if jitter == 0.0 { scale * 1e-12 } else { jitter * 100.0 };
            if jitter > scale {
                break None;
            }
        };
    }

    /// Exact minimization over the intercept and unpenalized columns.
    /// Returns the largest gradient component before the update.
    fn update_block(&mut self) -> f64 {
        let m = self.block_members.len() + 1;
        let mut rhs = DVector::<f64>::zeros(m);
        rhs[0] = self.rw.iter().map(|v| v[0]).sum::<f64>() / self.n;
        for (k, &u) in self.block_members.iter().enumerate() {
            rhs[k + 1] = self.ucols[u].iter().zip(&self.rw).map(|(x, v)| x * v[0]).sum::<f64>() / self.n;
        }
        let worst = rhs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let Some(chol) = &self.block_chol else {
            return worst;
        };
        let delta = chol.solve(&rhs);
        self.beta0 += delta[0];
        if self.block_members.is_empty() {
            let d = delta[0];
            self.rw.iter_mut().for_each(|v| v[0] -= v[1] * d);
            return worst;
        }
        let mut shift = vec![delta[0]; self.rw.len()];
        for (k, &u) in self.block_members.iter().enumerate() {
            let d = delta[k + 1];
            if d == 0.0 {
                continue;
            }
            self.beta[self.unpenalized[u]] += d;
            shift.iter_mut().zip(&self.ucols[u]).for_each(|(s, x)| *s += d * x);
        }
        for (v, s) in self.rw.iter_mut().zip(&shift) {
            v[0] -= v[1] * s;
        }
        worst
    }

    /// One pass over `coords` (penalized columns) plus the unpenalized block.
    /// Returns the largest |xv_j * delta_j| seen, on the gradient scale.
    fn sweep(&mut self, coords: &[usize]) -> f64 {
        self.sweeps += 1;
        let mut worst = self.update_block();
        if self.freeze_penalized {
            return worst;
        }
        let n = self.n;
        for &j in coords {
            let xv = self.xv[j];
            if xv <= 0.0 {
                continue;
            }
            let old = self.beta[j];
            let gamma = self.lambda * self.pf[j];
            let col = self.design.column(j);
            let dot = match col {
                DesignColumn::Binary(rows) => rows.iter().map(|&i| self.rw[i as usize][0]).sum::<f64>(),
                DesignColumn::Dense(v) => v.iter().zip(&self.rw).map(|(x, rw)| x * rw[0]).sum::<f64>(),
            };
            let z = dot / n + xv * old;
            let mut new = soft_threshold(z, gamma) / xv;
            if new.abs() < ZERO_SNAP {
                new = 0.0;
            }
            let delta = new - old;
            if delta == 0.0 {
                continue;
            }
            self.beta[j] = new;
            match col {
                DesignColumn::Binary(rows) => {
                    for &i in rows {
                        let v = &mut self.rw[i as usize];
                        v[0] -= v[1] * delta;
                    }
                }
                DesignColumn::Dense(v) => {
                    for (rw, &x) in self.rw.iter_mut().zip(v) {
                        rw[0] -= rw[1] * delta * x;
                    }
                }
            }
            worst = worst.max((xv * delta).abs());
        }
        worst
    }

    /// Block and active coefficients as one vector: intercept, block members, `coords`.
    fn snapshot(&self, coords: &[usize]) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.block_members.len() + coords.len());
        v.push(self.beta0);
        v.extend(self.block_members.iter().map(|&u| self.beta[self.unpenalized[u]]));
        v.extend(coords.iter().map(|&j| self.beta[j]));
        v
    }

    /// Anderson extrapolation from the last iterates; kept only if the
    /// penalized quadratic model decreases.
    fn anderson_step(&mut self, coords: &[usize], hist: &[Vec<f64>]) {
        let k = hist.len() - 1;
        let diffs: Vec<Vec<f64>> = hist
            .windows(2)
            .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect())
            .collect();
        let mut g = DMatrix::<f64>::zeros(k, k);
        for a in 0..k {
            for b in a..k {
                let d: f64 = diffs[a].iter().zip(&diffs[b]).map(|(x, y)| x * y).sum();
                g[(a, b)] = d;
                g[(b, a)] = d;
            }
        }
        let ridge = 1e-10 * (0..k).map(|i| g[(i, i)]).sum::<f64>().max(1e-300);
        for i in 0..k {
            g[(i, i)] += ridge;
        }
        let Some(z) = g.cholesky().map(|c| c.solve(&DVector::from_element(k, 1.0))) else {
            return;
        };
        let total: f64 = z.iter().sum();
        if !total.is_finite() || total.abs() < 1e-300 {
            return;
        }
        let current = &hist[k];
        let mut delta = vec![0.0; current.len()];
        for (i, d) in delta.iter_mut().enumerate() {
            let e: f64 = (0..k).map(|t| z[t] / total * hist[t + 1][i]).sum();
            *d = e - current[i];
        }
        if delta.iter().any(|d| !d.is_finite()) {
            return;
        }
        let nb = self.block_members.len();
        let mut deta = vec![delta[0]; self.rw.len()];
        for (t, &u) in self.block_members.iter().enumerate() {
            let d = delta[1 + t];
            if d != 0.0 {
                deta.iter_mut().zip(&self.ucols[u]).for_each(|(e, x)| *e += d * x);
            }
        }
        let mut pen_change = 0.0;
        let mut new_vals = Vec::with_capacity(coords.len());
        for (t, &j) in coords.iter().enumerate() {
            let old = self.beta[j];
            let mut new = old + delta[1 + nb + t];
            if new.abs() < ZERO_SNAP {
                new = 0.0;
            }
            let d = new - old;
            new_vals.push(new);
            pen_change += self.lambda * self.pf[j] * (new.abs() - old.abs());
            if d == 0.0 {
                continue;
            }
            match self.design.column(j) {
                DesignColumn::Binary(rows) => rows.iter().for_each(|&i| deta[i as usize] += d),
                DesignColumn::Dense(v) => deta.iter_mut().zip(v).for_each(|(e, x)| *e += d * x),
            }
        }
        let mut q_change = 0.0;
        for (rw, &de) in self.rw.iter().zip(&deta) {
            let r_new = rw[0] - rw[1] * de;
            q_change += (r_new * r_new - rw[0] * rw[0]) / rw[1];
        }
        q_change /= 2.0 * self.n;
        if q_change + pen_change >= 0.0 {
            return;
        }
        self.beta0 += delta[0];
        for (t, &u) in self.block_members.iter().enumerate() {
            self.beta[self.unpenalized[u]] += delta[1 + t];
        }
        for (&j, v) in coords.iter().zip(new_vals) {
            self.beta[j] = v;
        }
        for (rw, &de) in self.rw.iter_mut().zip(&deta) {
            rw[0] -= rw[1] * de;
        }
    }

    /// Coordinate descent on the current quadratic approximation.
    fn inner(&mut self, inner_tol: f64) {
        let all = self.penalized.clone();
        loop {
            if self.sweeps >= self.opts.max_iter {
                return;
            }
            if self.sweep(&all) < inner_tol {
                return;
            }
            let active: Vec<usize> = all.iter().copied().filter(|&j| self.beta[j] != 0.0).collect();
            let mut hist = vec![self.snapshot(&active)];
            loop {
                if self.sweeps >= self.opts.max_iter {
                    return;
                }
                if self.sweep(&active) < inner_tol {
                    break;
                }
                hist.push(self.snapshot(&active));
                if hist.len() == ANDERSON_DEPTH + 1 {
                    self.anderson_step(&active, &hist);
                    hist.clear();
                    hist.push(self.snapshot(&active));
                }
            }
        }
    }

    fn run(&mut self) -> (bool, usize, f64, f64, Vec<IterationTrace>) {
        self.compute_eta();
        let mut trace = Vec::new();
        let mut f_prev: Option<f64> = None;
        let mut old: Option<(f64, Vec<f64>)> = None;
        // Inner solves are inexact: tolerance tracks the current KKT residual,
        // with a floor that tightens whenever the outer loop stalls.
        let mut inner_floor = self.opts.kkt_tol * 0.1;
        let mut halvings = 0;
        let mut outer = 0;
        loop {
            let f_cur = self.current_objective();
            if let (Some(fp), Some((b0_old, b_old))) = (f_prev, old.as_ref()) {
                if f_cur > fp + 1e-13 * fp.abs().max(1.0) {
                    if halvings < 40 {
                        halvings += 1;
                        self.beta0 = 0.5 * (self.beta0 + b0_old);
                        for (b, bo) in self.beta.iter_mut().zip(b_old) {
                            *b = 0.5 * (*b + bo);
                            if b.abs() < ZERO_SNAP {
                                *b = 0.0;
                            }
                        }
                    } else {
                        self.beta0 = *b0_old;
                        self.beta.clone_from(b_old);
                    }
                    self.compute_eta();
                    continue;
                }
            }
            halvings = 0;
            if let Some(fp) = f_prev {
                debug_assert!(
                    f_cur <= fp + 1e-12 * fp.abs().max(1.0),
                    "objective increased: {fp} -> {f_cur}"
                );
            }
            self.refresh_weights();
            let kkt = self.max_kkt();
            if self.opts.verbose {
                trace.push(IterationTrace {
                    iteration: outer,
                    objective: f_cur,
                    n_nonzero: self.n_nonzero(),
                    max_kkt: kkt,
                });
            }
            let rel = f_prev.map(|fp| (fp - f_cur).abs() / f_cur.abs().max(1e-300));
            let small_step = rel.is_none_or(|r| r < self.opts.tol);
            if kkt <= self.opts.kkt_tol && small_step {
                return (true, outer, f_cur, kkt, trace);
            }
            if small_step && rel.is_some() {
                inner_floor = (inner_floor * 0.1).max(1e-15);
            }
            if self.sweeps >= self.opts.max_iter {
                return (false, outer, f_cur, kkt, trace);
            }
            old = Some((self.beta0, self.beta.clone()));
            f_prev = Some(f_cur);
            self.prepare_quadratic();
            self.inner((0.1 * kkt).max(inner_floor));
            // Fresh linear predictor to avoid drift from incremental updates.
            self.compute_eta();
            outer += 1;
        }
    }

    fn into_fit(
        self,
        converged: bool,
        iterations: usize,
        objective: f64,
        max_kkt: f64,
        trace: Vec<IterationTrace>,
    ) -> LassoFit {
        let coefficients: Vec<(usize, f64)> = self
            .beta
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(j, &b)| (j, b))
            .collect();
        LassoFit {
            intercept: self.beta0,
            n_nonzero: coefficients.len(),
            coefficients,
            lambda: self.lambda,
            converged,
            iterations,
            sweeps: self.sweeps,
            objective,
            max_kkt,
            n_cols: self.beta.len(),
            trace,
        }
    }
}

/// Fits the lasso at one `lambda`, optionally warm-started from `warm`.
///
/// Non-convergence within `max_iter` sweeps is returned as `converged =
/// false`, not as an error. At `lambda = 0` non-convergence or diverging
/// coefficients are reported as separation.
pub fn fit_logistic_lasso(
    design: &SparseDesignMatrix,
    y: &[u8],
    penalty_factors: &[f64],
    lambda: f64,
    options: &FitOptions,
    warm: Option<&LassoFit>,
) -> Result<LassoFit> {
    check_inputs(design, y, penalty_factors)?;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidInput(format!("lambda {lambda} must be finite and >= 0")));
    }
    if warm.is_none() && lambda > 0.0 && penalty_factors.iter().any(|&v| v > 0.0) {
        if let Some(fit) = null_model_at(design, y, penalty_factors, lambda) {
            return Ok(fit);
        }
    }
    let mut solver = Solver::new(design, y, penalty_factors, lambda, *options, false);
    if let Some(w) = warm {
        if w.n_cols != design.n_cols() {
            return Err(Error::Dimension(format!(
                "warm start has {} columns, design has {}",
                w.n_cols,
                design.n_cols()
            )));
        }
        solver.beta0 = w.intercept;
        for &(j, b) in &w.coefficients {
            solver.beta[j] = b;
        }
    }
    let (converged, iterations, obj, kkt, trace) = solver.run();
    let fit = solver.into_fit(converged, iterations, obj, kkt, trace);
    if lambda == 0.0 {
        let worst = fit.coefficients.iter().map(|c| c.1.abs()).fold(0.0, f64::max);
        if !converged || worst > SEPARATION_BOUND {
            return Err(Error::Separation(format!(
                "unpenalized fit diverges (max |coef| = {worst:.3e}); data are separable at lambda = 0"
            )));
        }
    }
    if !fit.converged {
        log::warn!(
            "lasso fit at lambda {:e} did not converge in {} sweeps (max KKT {:e})",
            lambda,
            fit.sweeps,
            fit.max_kkt
        );
    }
    Ok(fit)
}

/// Maximum-likelihood fit of the intercept and unpenalized columns with all
/// penalized coefficients held at zero.
pub fn fit_base_model(design: &SparseDesignMatrix, y: &[u8], penalty_factors: &[f64]) -> Result<LassoFit> {
    check_inputs(design, y, penalty_factors)?;
    let opts = FitOptions {
        tol: 1e-12,
        kkt_tol: 1e-10,
        max_iter: 500,
        verbose: false,
    };
    let mut solver = Solver::new(design, y, penalty_factors, 0.0, opts, true);
    let (converged, iterations, obj, kkt, trace) = solver.run();
    let fit = solver.into_fit(converged, iterations, obj, kkt, trace);
    let offending = fit
        .coefficients
        .iter()
        .copied()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()));
    if let Some((j, b)) = offending {
        if b.abs() > SEPARATION_BOUND || !converged {
            return Err(Error::Separation(format!(
                "unpenalized column {j} separates the outcome (coef {b:.3e}); remove it or give it a positive penalty factor"
            )));
        }
    }
    if !converged || fit.intercept.abs() > SEPARATION_BOUND {
        return Err(Error::Separation(format!(
            "base model did not converge (intercept {:.3e})",
            fit.intercept
        )));
    }
    Ok(fit)
}

/// `|g_j| / v_j` at the base model for every penalized column, NaN elsewhere.
fn base_thresholds(design: &SparseDesignMatrix, y: &[u8], penalty_factors: &[f64], base: &LassoFit) -> Vec<f64> {
    let eta = design.linear_predictor(base.intercept, &base.coefficients);
    let r: Vec<f64> = eta.iter().zip(y).map(|(&e, &yi)| yi as f64 - sigmoid(e)).collect();
    column_gradients(design, &r)
        .iter()
        .zip(penalty_factors)
        .map(|(g, &v)| if v > 0.0 { g.abs() / v } else { f64::NAN })
        .collect()
}

/// The base model, relabelled at `lambda`, when no penalized column can enter.
fn null_model_at(design: &SparseDesignMatrix, y: &[u8], penalty_factors: &[f64], lambda: f64) -> Option<LassoFit> {
    let base = fit_base_model(design, y, penalty_factors).ok()?;
    if base_thresholds(design, y, penalty_factors, &base)
        .iter()
        .any(|t| !t.is_nan() && *t > lambda)
    {
        return None;
    }
    let mut fit = LassoFit { lambda, ..base };
    fit.max_kkt = kkt_residual(design, y, penalty_factors, &fit);
    fit.objective = fit_objective(design, y, penalty_factors, &fit);
    Some(fit)
}

/// Smallest lambda at which every penalized coefficient is zero.
pub fn lambda_max(design: &SparseDesignMatrix, y: &[u8], penalty_factors: &[f64]) -> Result<f64> {
    check_inputs(design, y, penalty_factors)?;
    if penalty_factors.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidInput("no penalized column".into()));
    }
    let base = fit_base_model(design, y, penalty_factors)?;
    Ok(base_thresholds(design, y, penalty_factors, &base)
        .into_iter()
        .filter(|t| !t.is_nan())
        .fold(0.0, f64::max))
}

/// `count` log-spaced values from `lambda_max` down to `lambda_max * min_ratio`.
pub fn lambda_grid(lambda_max: f64, count: usize, min_ratio: f64) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lambda_max],
        _ => (0..count)
            .map(|k| lambda_max * min_ratio.powf(k as f64 / (count - 1) as f64))
            .collect(),
    }
}

pub const DEFAULT_GRID_SIZE: usize = 50;
pub const DEFAULT_MIN_RATIO: f64 = 1e-4;

/// Warm-started fits along a strictly decreasing lambda sequence.
pub fn fit_path(
    design: &SparseDesignMatrix,
    y: &[u8],
    penalty_factors: &[f64],
    lambdas: &[f64],
    options: &FitOptions,
) -> Result<LambdaPath> {
    if lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput("lambda path must be strictly decreasing".into()));
    }
    let mut fits: Vec<LassoFit> = Vec::with_capacity(lambdas.len());
    for (position, &lambda) in lambdas.iter().enumerate() {
        let fit = fit_logistic_lasso(design, y, penalty_factors, lambda, options, fits.last()).map_err(|e| {
            Error::PathFit {
                position,
                lambda,
                source: Box::new(e),
            }
        })?;
        fits.push(fit);
    }
    Ok(LambdaPath {
        lambdas: lambdas.to_vec(),
        fits,
    })
}

/// Linear predictor `b0 + x_i . b` for every row.
pub fn predict_logit(fit: &LassoFit, design: &SparseDesignMatrix) -> Result<Vec<f64>> {
    if fit.n_cols != design.n_cols() {
        return Err(Error::Dimension(format!(
            "fit has {} columns, design has {}",
            fit.n_cols,
            design.n_cols()
        )));
    }
    Ok(design.linear_predictor(fit.intercept, &fit.coefficients))
}

pub fn predict_proba(fit: &LassoFit, design: &SparseDesignMatrix) -> Result<Vec<f64>> {
    Ok(predict_logit(fit, design)?.into_iter().map(sigmoid).collect())
}
