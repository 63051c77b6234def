//! L1-penalised GLMs over a regularisation path.
//!
//! Columns are standardised (mean 0, unit variance with the `1/n`
//! convention) before fitting. Gaussian responses are solved by cyclic
//! coordinate descent directly; binomial and poisson responses by an outer
//! IRLS loop whose weighted quadratic approximations are solved the same
//! way. Paths are warm-started from the all-zero solution at `lambda_max`.

use std::collections::HashMap;

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::ColumnMatrix;
use crate::error::{Result, SurfError};
use crate::glm::{Family, GlmSpec};
use crate::linalg::cholesky_solve;
use crate::rng::{self, tag};

/// Minimum IRLS weight inside the penalised solver.
const MIN_WEIGHT: f64 = 1e-9;

// The path solver works with the exact (unclamped) loss so that its
// solutions satisfy the KKT conditions of the stated objective even near
// separation.

fn exact_mean(family: Family, eta: f64) -> f64 {
    match family {
        Family::Gaussian => eta,
        Family::Binomial => {
            if eta >= 0.0 {
                1.0 / (1.0 + (-eta).exp())
            } else {
                let e = eta.exp();
                e / (1.0 + e)
            }
        }
        Family::Poisson => eta.min(700.0).exp(),
    }
}

fn exact_weight(family: Family, eta: f64) -> f64 {
    match family {
        Family::Gaussian => 1.0,
        Family::Binomial => {
            let e = (-eta.abs()).exp();
            e / ((1.0 + e) * (1.0 + e))
        }
        Family::Poisson => eta.min(700.0).exp(),
    }
}

/// Deviance as a function of the linear predictor.
fn exact_deviance(family: Family, y: &[f64], eta: &[f64]) -> f64 {
    y.iter()
        .zip(eta)
        .map(|(&yi, &e)| match family {
            Family::Gaussian => (yi - e) * (yi - e),
            Family::Binomial => {
                // y is 0 or 1, so the saturated log-likelihood is 0
                let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
                2.0 * (softplus - yi * e)
            }
            Family::Poisson => {
                let sat = if yi > 0.0 { yi * yi.ln() - yi } else { 0.0 };
                2.0 * (sat - yi * e + e.min(700.0).exp())
            }
        })
        .sum()
}
const MAX_OUTER: usize = 100;
/// Looser tolerance for callers that only read the active set.
pub const SUPPORT_TOL: f64 = 1e-7;
/// Active-set sweeps between exact solves on the current sign pattern.
const NEWTON_EVERY: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPath {
    pub values: Vec<f64>,
    pub lambda_max: f64,
    pub min_ratio: f64,
}

impl LambdaPath {
    /// Log-spaced path from `lambda_max` down to `lambda_max * min_ratio`.
    pub fn geometric(lambda_max: f64, min_ratio: f64, len: usize) -> Result<Self> {
        if !(lambda_max > 0.0 && lambda_max.is_finite()) {
            return Err(SurfError::InvalidConfig(format!(
                "lambda_max must be positive, got {lambda_max}"
            )));
        }
        if !(min_ratio > 0.0 && min_ratio < 1.0) {
            return Err(SurfError::InvalidConfig(format!(
                "min_ratio must lie in (0, 1), got {min_ratio}"
            )));
        }
        if len < 2 {
            return Err(SurfError::InvalidConfig("path needs at least 2 values".into()));
        }
        let step = min_ratio.ln() / (len - 1) as f64;
        let mut values: Vec<f64> = (0..len)
            .map(|k| lambda_max * (step * k as f64).exp())
            .collect();
        values[0] = lambda_max;
        values[len - 1] = lambda_max * min_ratio;
        Ok(LambdaPath {
            values,
            lambda_max,
            min_ratio,
        })
    }

    pub fn default_min_ratio(n: usize, p: usize) -> f64 {
        if n < p {
            0.01
        } else {
            0.0001
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct LassoOptions {
    pub n_lambda: usize,
    /// Defaults to 0.01 when `n < p`, else 0.0001.
    pub min_ratio: Option<f64>,
    pub max_sweeps: usize,
    /// Largest coordinate change (standardised scale) accepted as converged.
    pub tol: f64,
    /// Stop the path once more than this many variables are active.
    pub max_active: Option<usize>,
    /// Order in which coordinates are visited; identity when `None`.
    pub coordinate_order: Option<Vec<usize>>,
    /// Stop the path once the explained deviance saturates.
    pub early_stop: bool,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            n_lambda: 100,
            min_ratio: None,
            max_sweeps: 1000,
            tol: 1e-10,
            max_active: None,
            coordinate_order: None,
            early_stop: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoFit {
    pub family: Family,
    pub path: LambdaPath,
    /// Original-scale coefficients, one vector per fitted lambda.
    pub coefficients: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    /// Standardised-scale coefficients and intercepts.
    pub std_coefficients: Vec<Vec<f64>>,
    pub std_intercepts: Vec<f64>,
    pub deviance: Vec<f64>,
    pub null_deviance: f64,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub sweeps: Vec<usize>,
}

impl LassoFit {
    /// Number of lambdas actually solved (a prefix of `path.values`).
    pub fn n_fitted(&self) -> usize {
        self.coefficients.len()
    }

    pub fn fitted_lambdas(&self) -> &[f64] {
        &self.path.values[..self.n_fitted()]
    }

    /// Index of the fitted lambda closest to `lambda` on the log scale.
    pub fn nearest_index(&self, lambda: f64) -> usize {
        let target = lambda.max(f64::MIN_POSITIVE).ln();
        self.fitted_lambdas()
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1.ln() - target)
                    .abs()
                    .total_cmp(&(b.1.ln() - target).abs())
            })
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    pub fn active_at(&self, index: usize) -> Vec<usize> {
        self.std_coefficients[index]
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0.0)
            .map(|(j, _)| j)
            .collect()
    }

    /// Linear predictor of the original-scale fit at path index `index`.
    pub fn linear_predictor(&self, x: &ColumnMatrix, index: usize) -> Vec<f64> {
        let mut eta = vec![self.intercepts[index]; x.nrows()];
        for (j, &b) in self.coefficients[index].iter().enumerate() {
            if b != 0.0 {
                eta.iter_mut().zip(x.col(j)).for_each(|(e, v)| *e += b * v);
            }
        }
        eta
    }
}

/// Indices of the nonzero coefficients at the grid point nearest `lambda`.
pub fn active_set(fit: &LassoFit, lambda: f64) -> Vec<usize> {
    fit.active_at(fit.nearest_index(lambda))
}

pub(crate) struct Standardized {
    pub n: usize,
    pub p: usize,
    pub data: Vec<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    /// Constant columns and later copies of duplicated columns.
    pub constant: Vec<bool>,
}

impl Standardized {
    pub fn new(x: &ColumnMatrix) -> Self {
        let n = x.nrows();
        let p = x.ncols();
        let mut data = vec![0.0; n * p];
        let mut means = vec![0.0; p];
        let mut scales = vec![1.0; p];
        let mut constant = vec![false; p];
        for j in 0..p {
            let c = x.col(j);
            let mean = c.iter().sum::<f64>() / n as f64;
            let var = c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            let max_abs = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            means[j] = mean;
            if sd == 0.0 || sd <= 1e-13 * max_abs {
                constant[j] = true;
                continue;
            }
            scales[j] = sd;
            let out = &mut data[j * n..(j + 1) * n];
            out.iter_mut()
                .zip(c)
                .for_each(|(o, v)| *o = (v - mean) / sd);
        }
        Standardized {
            n,
            p,
            data,
            means,
            scales,
            constant,
        }
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.n..(j + 1) * self.n]
    }

    /// Excludes every column that is bitwise identical to one visited
    /// earlier in `order`; the lasso solution is then carried by the first
    /// copy only.
    pub fn exclude_duplicates(&mut self, order: &[usize]) {
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        for &j in order {
            if self.constant[j] {
                continue;
            }
            let key: Vec<u64> = self.col(j).iter().map(|v| v.to_bits()).collect();
            if seen.insert(key, j).is_some() {
                self.constant[j] = true;
            }
        }
    }
}

#[inline]
fn soft_threshold(g: f64, lambda: f64) -> f64 {
    // boundary cases (|g| == lambda up to rounding) resolve to zero so that
    // exact duplicates of an active column stay inactive
    let slack = 1e-10 * lambda + 1e-14;
    if g > lambda + slack {
        g - lambda
    } else if g < -lambda - slack {
        g + lambda
    } else {
        0.0
    }
}

fn null_intercept(family: Family, y: &[f64]) -> Result<f64> {
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    match family {
        Family::Gaussian => Ok(ybar),
        Family::Binomial => {
            if ybar <= 0.0 || ybar >= 1.0 {
                return Err(SurfError::DegenerateResponse(
                    "binomial response has a single class".into(),
                ));
            }
            Ok((ybar / (1.0 - ybar)).ln())
        }
        Family::Poisson => {
            if ybar <= 0.0 {
                return Err(SurfError::DegenerateResponse(
                    "poisson response is identically zero".into(),
                ));
            }
            Ok(ybar.ln())
        }
    }
}

/// Smallest lambda at which every standardised coefficient is zero:
/// `max_j |x_j' (y - ybar)| / n`.
pub(crate) fn lambda_max_std(std: &Standardized, y: &[f64]) -> f64 {
    let n = std.n as f64;
    let ybar = y.iter().sum::<f64>() / n;
    (0..std.p)
        .filter(|&j| !std.constant[j])
        .map(|j| {
            std.col(j)
                .iter()
                .zip(y)
                .map(|(x, yi)| x * (yi - ybar))
                .sum::<f64>()
                .abs()
                / n
        })
        .fold(0.0, f64::max)
}

/// Default path for a design/response pair.
pub fn default_path(x: ArrayView2<f64>, y: ArrayView1<f64>, opts: &LassoOptions) -> Result<LambdaPath> {
    let cm = ColumnMatrix::from_view(x);
    let std = Standardized::new(&cm);
    let y = y.to_vec();
    path_for(&std, &y, opts)
}

fn path_for(std: &Standardized, y: &[f64], opts: &LassoOptions) -> Result<LambdaPath> {
    let lmax = lambda_max_std(std, y);
    if !(lmax > 0.0) {
        return Err(SurfError::DegenerateResponse(
            "no column is associated with the response (lambda_max = 0)".into(),
        ));
    }
    let ratio = opts
        .min_ratio
        .unwrap_or_else(|| LambdaPath::default_min_ratio(std.n, std.p));
    LambdaPath::geometric(lmax, ratio, opts.n_lambda)
}

/// Working state of the penalised solver on the standardised scale.
pub(crate) struct CdState {
    pub beta: Vec<f64>,
    pub b0: f64,
}

/// Solves the weighted lasso subproblem
/// `(1/2n) sum w_i (z_i - b0 - x_i b)^2 + lambda |b|_1`
/// by cyclic coordinate descent with active-set cycling.
///
/// `resid` must hold `z - b0 - X b` on entry and is kept current.
/// Returns the number of sweeps and, when `trace` is given, pushes the
/// objective after every sweep.
#[allow(clippy::too_many_arguments)]
pub(crate) fn solve_weighted(
    std: &Standardized,
    w: Option<&[f64]>,
    xwx: &[f64],
    lambda: f64,
    prev_lambda: f64,
    state: &mut CdState,
    resid: &mut [f64],
    order: &[usize],
    max_sweeps: usize,
    tol: f64,
    mut trace: Option<&mut Vec<f64>>,
) -> usize {
    let n = std.n;
    let nf = n as f64;
    let sum_w: f64 = w.map_or(nf, |w| w.iter().sum());
    let mut sweeps = 0;

    let coord = |j: usize, state: &mut CdState, resid: &mut [f64]| -> f64 {
        let x = std.col(j);
        let old = state.beta[j];
        let grad = match w {
            None => x.iter().zip(resid.iter()).map(|(a, r)| a * r).sum::<f64>(),
            Some(w) => x
                .iter()
                .zip(resid.iter())
                .zip(w)
                .map(|((a, r), wi)| a * r * wi)
                .sum::<f64>(),
        } / nf;
        let new = soft_threshold(grad + xwx[j] * old, lambda) / xwx[j];
        let delta = new - old;
        if delta != 0.0 {
            state.beta[j] = new;
            resid.iter_mut().zip(x).for_each(|(r, a)| *r -= delta * a);
        }
        delta.abs()
    };

    let intercept = |state: &mut CdState, resid: &mut [f64]| -> f64 {
        let s = match w {
            None => resid.iter().sum::<f64>(),
            Some(w) => resid.iter().zip(w).map(|(r, wi)| r * wi).sum::<f64>(),
        };
        let delta = s / sum_w;
        if delta != 0.0 {
            state.b0 += delta;
            resid.iter_mut().for_each(|r| *r -= delta);
        }
        delta.abs()
    };

    let objective = |state: &CdState, resid: &[f64]| -> f64 {
        let loss = match w {
            None => resid.iter().map(|r| r * r).sum::<f64>(),
            Some(w) => resid.iter().zip(w).map(|(r, wi)| wi * r * r).sum::<f64>(),
        } / (2.0 * nf);
        loss + lambda * state.beta.iter().map(|b| b.abs()).sum::<f64>()
    };

    let eligible: Vec<usize> = order.iter().copied().filter(|&j| !std.constant[j]).collect();
    let gradient = |j: usize, resid: &[f64]| -> f64 {
        let x = std.col(j);
        let s = match w {
            None => x.iter().zip(resid).map(|(a, r)| a * r).sum::<f64>(),
            Some(w) => x.iter().zip(resid).zip(w).map(|((a, r), wi)| a * r * wi).sum::<f64>(),
        };
        s / nf
    };
    // Sequential strong rule: only screened coordinates are swept, and the
    // KKT conditions of the rest are checked once the screened problem
    // converges.
    let threshold = 2.0 * lambda - prev_lambda.max(lambda);
    let mut in_set: Vec<bool> = eligible
        .iter()
        .map(|&j| state.beta[j] != 0.0 || (gradient(j, resid) + xwx[j] * state.beta[j]).abs() >= threshold)
        .collect();
    'kkt: loop {
        let screened: Vec<usize> = eligible
            .iter()
            .zip(&in_set)
            .filter(|(_, &s)| s)
            .map(|(&j, _)| j)
            .collect();
        'outer: while sweeps < max_sweeps {
            let mut max_change = intercept(state, resid);
            for &j in &screened {
                max_change = max_change.max(coord(j, state, resid));
            }
            sweeps += 1;
            if let Some(t) = trace.as_deref_mut() {
                t.push(objective(state, resid));
            }
            if max_change < tol {
                break;
            }
            let active: Vec<usize> = screened
                .iter()
                .copied()
                .filter(|&j| state.beta[j] != 0.0)
                .collect();
            let mut cycles = 0;
            let mut next_newton = NEWTON_EVERY;
            loop {
                if sweeps >= max_sweeps {
                    break 'outer;
                }
                let mut change = intercept(state, resid);
                for &j in &active {
                    change = change.max(coord(j, state, resid));
                }
                sweeps += 1;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(objective(state, resid));
                }
                if change < tol {
                    // small coordinate moves can hide slow progress along a
                    // flat direction; polish once with a Newton step
                    match newton_on_active(std, w, lambda, state, resid, &active) {
                        Some(moved) if moved >= tol => {
                            if let Some(t) = trace.as_deref_mut() {
                                t.push(objective(state, resid));
                            }
                            continue;
                        }
                        _ => break,
                    }
                }
                cycles += 1;
                if cycles == next_newton {
                    if newton_on_active(std, w, lambda, state, resid, &active).is_some() {
                        if let Some(t) = trace.as_deref_mut() {
                            t.push(objective(state, resid));
                        }
                        next_newton += NEWTON_EVERY.max(active.len());
                    } else {
                        next_newton *= 2;
                    }
                }
            }
        }
        if sweeps >= max_sweeps {
            break;
        }
        let mut violated = false;
        for (k, &j) in eligible.iter().enumerate() {
            if !in_set[k] && gradient(j, resid).abs() > lambda {
                in_set[k] = true;
                violated = true;
            }
        }
        if !violated {
            break 'kkt;
        }
    }
    sweeps
}

/// Exact minimiser of the weighted subproblem over the current sign pattern
/// of `active`: solves `A'WA theta = A'W t - n lambda s` for the intercept
/// and active coefficients. When the solution flips a sign the step is cut
/// at the first zero crossing and that coefficient is set to zero, so the
/// objective cannot increase. Returns the largest coefficient move, or
/// `None` when no step was taken.
fn newton_on_active(
    std: &Standardized,
    w: Option<&[f64]>,
    lambda: f64,
    state: &mut CdState,
    resid: &mut [f64],
    active: &[usize],
) -> Option<f64> {
    let n = std.n;
    let m = active.len() + 1;
    if active.is_empty() || m > n {
        return None;
    }
    // working response t = resid + b0 + X_A beta_A
    let mut t = resid.to_vec();
    t.iter_mut().for_each(|v| *v += state.b0);
    for &j in active {
        let b = state.beta[j];
        t.iter_mut().zip(std.col(j)).for_each(|(v, x)| *v += b * x);
    }
    let ones = vec![1.0; n];
    let cols: Vec<&[f64]> = std::iter::once(ones.as_slice())
        .chain(active.iter().map(|&j| std.col(j)))
        .collect();
    let weighted: Vec<Vec<f64>> = cols
        .iter()
        .map(|c| match w {
            None => c.to_vec(),
            Some(w) => c.iter().zip(w).map(|(a, b)| a * b).collect(),
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut gram = vec![0.0; m * m];
    let mut rhs = vec![0.0; m];
    for r in 0..m {
        for c in r..m {
            let g = dot(&weighted[r], cols[c]);
            gram[c * m + r] = g;
            gram[r * m + c] = g;
        }
        rhs[r] = dot(&weighted[r], &t);
        if r > 0 {
            rhs[r] -= n as f64 * lambda * state.beta[active[r - 1]].signum();
        }
    }
    cholesky_solve(&mut gram, m, &mut rhs)?;
    if rhs.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let sol = rhs;
    // walk towards the Newton point, stopping where the first coefficient
    // reaches zero; the sign pattern is fixed on that segment
    let mut step = 1.0f64;
    let mut blocking = None;
    for (k, &j) in active.iter().enumerate() {
        let (b, nb) = (state.beta[j], sol[k + 1]);
        if nb == 0.0 || nb.signum() != b.signum() {
            let s = b / (b - nb);
            if s < step {
                step = s;
                blocking = Some(j);
            }
        }
    }
    if step <= 0.0 {
        return None;
    }
    let d0 = step * (sol[0] - state.b0);
    let mut moved = d0.abs();
    state.b0 += d0;
    resid.iter_mut().for_each(|r| *r -= d0);
    for (k, &j) in active.iter().enumerate() {
        let target = if blocking == Some(j) { 0.0 } else { state.beta[j] + step * (sol[k + 1] - state.beta[j]) };
        let d = target - state.beta[j];
        moved = moved.max(d.abs());
        state.beta[j] = target;
        resid.iter_mut().zip(std.col(j)).for_each(|(r, x)| *r -= d * x);
    }
    Some(moved)
}

/// Fits the lasso path on a column-major design.
pub(crate) fn fit_path(
    x: &ColumnMatrix,
    y: &[f64],
    family: Family,
    path: Option<&LambdaPath>,
    opts: &LassoOptions,
) -> Result<LassoFit> {
    let n = x.nrows();
    let p = x.ncols();
    if p == 0 {
        return Err(SurfError::InvalidConfig("design has no columns".into()));
    }
    if y.len() != n {
        return Err(SurfError::DimensionMismatch(format!(
            "design has {n} rows, response has {}",
            y.len()
        )));
    }
    x.check_finite()?;
    family.validate_response(y)?;
    let b0_null = null_intercept(family, y)?;

    let mut std = Standardized::new(x);
    let path = match path {
        Some(p) => p.clone(),
        None => path_for(&std, y, opts)?,
    };
    let order: Vec<usize> = match &opts.coordinate_order {
        Some(o) => {
            let mut seen = vec![false; p];
            if o.len() != p || o.iter().any(|&j| j >= p || std::mem::replace(&mut seen[j], true)) {
                return Err(SurfError::InvalidConfig(
                    "coordinate order must be a permutation of the columns".into(),
                ));
            }
            o.clone()
        }
        None => (0..p).collect(),
    };
    std.exclude_duplicates(&order);

    let null_mu = exact_mean(family, b0_null);
    let null_deviance = exact_deviance(family, y, &vec![b0_null; n]);

    let mut state = CdState {
        beta: vec![0.0; p],
        b0: b0_null,
    };
    let nf = n as f64;
    let mut fit = LassoFit {
        family,
        path: path.clone(),
        coefficients: Vec::new(),
        intercepts: Vec::new(),
        std_coefficients: Vec::new(),
        std_intercepts: Vec::new(),
        deviance: Vec::new(),
        null_deviance,
        means: std.means.clone(),
        scales: std.scales.clone(),
        sweeps: Vec::new(),
    };

    let mut eta = vec![b0_null; n];
    let mut mu = vec![null_mu; n];
    let mut resid = vec![0.0; n];
    let mut w = vec![1.0; n];
    let mut z = vec![0.0; n];
    let mut xwx = vec![1.0; p];
    let mut prev_ratio = 0.0;

    for (k, &lambda) in path.values.iter().enumerate() {
        let prev_lambda = if k == 0 { lambda } else { path.values[k - 1] };
        let mut sweeps = 0;
        match family {
            Family::Gaussian => {
                for i in 0..n {
                    resid[i] = y[i] - eta[i];
                }
                sweeps += solve_weighted(
                    &std, None, &xwx, lambda, prev_lambda, &mut state, &mut resid, &order, opts.max_sweeps,
                    opts.tol, None,
                );
                for i in 0..n {
                    eta[i] = y[i] - resid[i];
                    mu[i] = eta[i];
                }
            }
            Family::Binomial | Family::Poisson => {
                let penalised = |dev: f64, beta: &[f64]| {
                    dev / (2.0 * nf) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
                };
                let mut obj_old = penalised(exact_deviance(family, y, &eta), &state.beta);
                for _ in 0..MAX_OUTER {
                    for i in 0..n {
                        let wi = exact_weight(family, eta[i]).max(MIN_WEIGHT);
                        w[i] = wi;
                        z[i] = eta[i] + (y[i] - mu[i]) / wi;
                        resid[i] = z[i] - eta[i];
                    }
                    for j in 0..p {
                        if !std.constant[j] {
                            xwx[j] = std
                                .col(j)
                                .iter()
                                .zip(&w)
                                .map(|(a, wi)| a * a * wi)
                                .sum::<f64>()
                                / nf;
                        }
                    }
                    let beta_old = state.beta.clone();
                    let b0_old = state.b0;
                    sweeps += solve_weighted(
                        &std, Some(&w), &xwx, lambda, prev_lambda, &mut state, &mut resid, &order, opts.max_sweeps,
                        opts.tol, None,
                    );
                    let mut obj;
                    let mut halvings = 0;
                    loop {
                        linear_predictor_std(&std, &state, &mut eta);
                        for i in 0..n {
                            mu[i] = exact_mean(family, eta[i]);
                        }
                        obj = penalised(exact_deviance(family, y, &eta), &state.beta);
                        if obj.is_finite() && obj <= obj_old * (1.0 + 1e-12) + 1e-15 || halvings >= 30 {
                            break;
                        }
                        for (b, o) in state.beta.iter_mut().zip(&beta_old) {
                            *b = 0.5 * (*b + o);
                        }
                        state.b0 = 0.5 * (state.b0 + b0_old);
                        halvings += 1;
                    }
                    obj_old = obj;
                    let change = state
                        .beta
                        .iter()
                        .zip(&beta_old)
                        .map(|(a, b)| (a - b).abs())
                        .fold((state.b0 - b0_old).abs(), f64::max);
                    if change < opts.tol {
                        break;
                    }
                }
            }
        }

        let dev = exact_deviance(family, y, &eta);
        let (coef, icpt) = unstandardize(&std, &state);
        fit.std_coefficients.push(state.beta.clone());
        fit.std_intercepts.push(state.b0);
        fit.coefficients.push(coef);
        fit.intercepts.push(icpt);
        fit.deviance.push(dev);
        fit.sweeps.push(sweeps);

        let n_active = state.beta.iter().filter(|b| **b != 0.0).count();
        if let Some(cap) = opts.max_active {
            if n_active > cap {
                break;
            }
        }
        if opts.early_stop && null_deviance > 0.0 {
            let ratio = 1.0 - dev / null_deviance;
            if ratio > 0.999 || (k >= 5 && ratio - prev_ratio < 1e-5 * ratio) {
                break;
            }
            prev_ratio = ratio;
        }
    }
    Ok(fit)
}

fn linear_predictor_std(std: &Standardized, state: &CdState, eta: &mut [f64]) {
    eta.iter_mut().for_each(|e| *e = state.b0);
    for (j, &b) in state.beta.iter().enumerate() {
        if b != 0.0 {
            eta.iter_mut().zip(std.col(j)).for_each(|(e, x)| *e += b * x);
        }
    }
}

fn unstandardize(std: &Standardized, state: &CdState) -> (Vec<f64>, f64) {
    let mut icpt = state.b0;
    let coef: Vec<f64> = state
        .beta
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            if b == 0.0 {
                0.0
            } else {
                let c = b / std.scales[j];
                icpt -= c * std.means[j];
                c
            }
        })
        .collect();
    (coef, icpt)
}

/// Lasso path for `x` (n x p) and response `y`.
pub fn lasso_path(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    spec: &GlmSpec,
    path: Option<&LambdaPath>,
    opts: &LassoOptions,
) -> Result<LassoFit> {
    let cm = ColumnMatrix::from_view(x);
    let y = y.to_vec();
    fit_path(&cm, &y, spec.family, path, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    #[default]
    OneSe,
    Min,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CvResult {
    pub fold_count: usize,
    pub lambdas: Vec<f64>,
    pub mean_cv_error: Vec<f64>,
    pub se_cv_error: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_1se: f64,
    pub index_min: usize,
    pub index_1se: usize,
}

impl CvResult {
    pub fn chosen_index(&self, rule: LambdaRule) -> usize {
        match rule {
            LambdaRule::OneSe => self.index_1se,
            LambdaRule::Min => self.index_min,
        }
    }
}

/// Fold label per observation; binomial responses are stratified by class.
pub fn assign_folds(y: &[f64], k: usize, stratify: bool, rng: &mut impl rand::Rng) -> Vec<usize> {
    let n = y.len();
    let mut groups: Vec<Vec<usize>> = if stratify {
        let zeros = (0..n).filter(|&i| y[i] == 0.0).collect();
        let ones = (0..n).filter(|&i| y[i] != 0.0).collect();
        vec![zeros, ones]
    } else {
        vec![(0..n).collect()]
    };
    let mut folds = vec![0; n];
    let mut pos = 0;
    for g in groups.iter_mut() {
        g.shuffle(rng);
        for &i in g.iter() {
            folds[i] = pos % k;
            pos += 1;
        }
    }
    folds
}

/// k-fold cross-validation of the lasso path; see [`cv_lasso`].
pub fn cross_validate(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    spec: &GlmSpec,
    k: usize,
    seed: u64,
) -> Result<CvResult> {
    let cm = ColumnMatrix::from_view(x);
    let y = y.to_vec();
    cv_lasso(&cm, &y, spec.family, k, seed, &LassoOptions::default()).map(|(_, cv)| cv)
}

/// Fits the full-data path and cross-validates it with `k` folds.
///
/// The CV loss is the mean held-out unit deviance. Folds are redrawn (up to
/// 10 times) when a binomial training split would contain a single class.
pub fn cv_lasso(
    x: &ColumnMatrix,
    y: &[f64],
    family: Family,
    k: usize,
    seed: u64,
    opts: &LassoOptions,
) -> Result<(LassoFit, CvResult)> {
    let n = y.len();
    if k < 2 {
        return Err(SurfError::InvalidConfig(format!("fold count must be >= 2, got {k}")));
    }
    if n < 2 * k && k != n {
        return Err(SurfError::InvalidConfig(format!(
            "need at least {} observations for {k}-fold CV, got {n}",
            2 * k
        )));
    }
    let full = fit_path(x, y, family, None, opts)?;
    let fitted_path = LambdaPath {
        values: full.fitted_lambdas().to_vec(),
        lambda_max: full.path.lambda_max,
        min_ratio: full.path.min_ratio,
    };
    let stratify = family == Family::Binomial;

    let mut folds = None;
    for attempt in 0..10u64 {
        let mut r = rng::stream(seed, &[tag::FOLDS, attempt]);
        let f = assign_folds(y, k, stratify, &mut r);
        let ok = family != Family::Binomial
            || (0..k).all(|fold| {
                let (mut zeros, mut ones) = (0, 0);
                for i in 0..n {
                    if f[i] != fold {
                        if y[i] == 0.0 {
                            zeros += 1;
                        } else {
                            ones += 1;
                        }
                    }
                }
                zeros > 0 && ones > 0
            });
        if ok {
            folds = Some(f);
            break;
        }
    }
    let folds = folds.ok_or_else(|| {
        SurfError::DegenerateResponse("a training fold contains a single class".into())
    })?;

    let mut fold_opts = opts.clone();
    fold_opts.early_stop = false;
    fold_opts.max_active = None;
    let n_lambda = fitted_path.len();

    // per fold: (held-out count, summed loss per lambda)
    let per_fold: Vec<Result<(usize, Vec<f64>)>> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let train: Vec<usize> = (0..n).filter(|&i| folds[i] != fold).collect();
            let test: Vec<usize> = (0..n).filter(|&i| folds[i] == fold).collect();
            let xt = x.select_rows(&train);
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let xv = x.select_rows(&test);
            let yv: Vec<f64> = test.iter().map(|&i| y[i]).collect();
            let fit = fit_path(&xt, &yt, family, Some(&fitted_path), &fold_opts)?;
            let losses = (0..n_lambda)
                .map(|l| {
                    let idx = l.min(fit.n_fitted() - 1);
                    fit.linear_predictor(&xv, idx)
                        .iter()
                        .zip(&yv)
                        .map(|(&e, &yi)| family.unit_deviance(yi, family.mean(e)))
                        .sum::<f64>()
                })
                .collect();
            Ok((test.len(), losses))
        })
        .collect();
    let per_fold: Vec<(usize, Vec<f64>)> = per_fold.into_iter().collect::<Result<_>>()?;

    let nf = n as f64;
    let mut mean = vec![0.0; n_lambda];
    let mut se = vec![0.0; n_lambda];
    for l in 0..n_lambda {
        let total: f64 = per_fold.iter().map(|(_, s)| s[l]).sum();
        let m = total / nf;
        let var = per_fold
            .iter()
            .map(|(cnt, s)| {
                let e = s[l] / *cnt as f64;
                *cnt as f64 * (e - m) * (e - m)
            })
            .sum::<f64>()
            / nf;
        mean[l] = m;
        se[l] = (var / (k as f64 - 1.0)).sqrt();
    }
    let index_min = mean
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v < mean[best] { i } else { best });
    let threshold = mean[index_min] + se[index_min];
    let index_1se = (0..=index_min).find(|&i| mean[i] <= threshold).unwrap_or(index_min);

    let cv = CvResult {
        fold_count: k,
        lambdas: fitted_path.values.clone(),
        lambda_min: fitted_path.values[index_min],
        lambda_1se: fitted_path.values[index_1se],
        mean_cv_error: mean,
        se_cv_error: se,
        index_min,
        index_1se,
    };
    Ok((full, cv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_design(n: usize, p: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, &[]);
        Array2::from_shape_fn((n, p), |_| r.sample(StandardNormal))
    }

    #[test]
    fn path_is_strictly_decreasing_with_endpoints() {
        let path = LambdaPath::geometric(2.0, 0.01, 100).unwrap();
        assert_eq!(path.values[0], 2.0);
        assert_eq!(path.values[99], 0.02);
        assert!(path.values.windows(2).all(|w| w[0] > w[1]));
        assert!(LambdaPath::geometric(0.0, 0.01, 10).is_err());
    }

    #[test]
    fn lambda_max_gives_empty_model_and_matches_formula() {
        let x = random_design(40, 6, 3);
        let y: Vec<f64> = (0..40).map(|i| x[[i, 2]] + 0.1 * (i % 3) as f64).collect();
        let fit = lasso_path(x.view(), ArrayView1::from(&y), &GlmSpec::gaussian(), None, &LassoOptions::default()).unwrap();
        assert!(fit.std_coefficients[0].iter().all(|&b| b == 0.0));
        assert!(active_set(&fit, fit.path.lambda_max).is_empty());

        // lambda_max = max |x_j'(y - ybar)| / n on standardised columns
        let n = 40.0;
        let ybar = y.iter().sum::<f64>() / n;
        let mut lmax: f64 = 0.0;
        for j in 0..6 {
            let c = x.column(j);
            let m = c.sum() / n;
            let sd = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            let g: f64 = c.iter().zip(&y).map(|(v, yi)| (v - m) / sd * (yi - ybar)).sum::<f64>() / n;
            lmax = lmax.max(g.abs());
        }
        assert!((fit.path.lambda_max - lmax).abs() < 1e-12);
    }

    #[test]
    fn single_class_binomial_is_degenerate() {
        let x = random_design(10, 2, 1);
        let y = vec![1.0; 10];
        let err = lasso_path(x.view(), ArrayView1::from(&y), &GlmSpec::binomial(), None, &LassoOptions::default()).unwrap_err();
        assert!(matches!(err, SurfError::DegenerateResponse(_)));
    }

    #[test]
    fn constant_column_gets_zero() {
        let mut x = random_design(30, 3, 5);
        x.column_mut(1).fill(4.0);
        let y: Vec<f64> = (0..30).map(|i| x[[i, 0]]).collect();
        let fit = lasso_path(x.view(), ArrayView1::from(&y), &GlmSpec::gaussian(), None, &LassoOptions::default()).unwrap();
        assert!(fit.coefficients.iter().all(|c| c[1] == 0.0));
    }

    #[test]
    fn coordinate_descent_objective_is_monotone() {
        let x = random_design(50, 20, 11);
        let cm = ColumnMatrix::from_view(x.view());
        let std = Standardized::new(&cm);
        let mut r = rng::stream(12, &[]);
        let y: Vec<f64> = (0..50).map(|i| x[[i, 0]] - 2.0 * x[[i, 3]] + r.sample::<f64, _>(StandardNormal)).collect();
        let lambda = 0.05;
        let ybar = y.iter().sum::<f64>() / 50.0;
        let mut state = CdState { beta: vec![0.0; 20], b0: ybar };
        let mut resid: Vec<f64> = y.iter().map(|v| v - ybar).collect();
        let order: Vec<usize> = (0..20).collect();
        let mut trace = Vec::new();
        solve_weighted(&std, None, &vec![1.0; 20], lambda, lambda, &mut state, &mut resid, &order, 1000, 1e-10, Some(&mut trace));
        assert!(trace.len() > 2);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "objective rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn exact_duplicate_pair_never_both_active() {
        let mut x = random_design(60, 5, 21);
        let c0 = x.column(0).to_owned();
        x.column_mut(4).assign(&c0);
        let mut r = rng::stream(22, &[]);
        let y: Vec<f64> = (0..60).map(|i| 2.0 * x[[i, 0]] + 0.3 * r.sample::<f64, _>(StandardNormal)).collect();
        let fit = lasso_path(x.view(), ArrayView1::from(&y), &GlmSpec::gaussian(), None, &LassoOptions::default()).unwrap();
        for k in 0..fit.n_fitted() {
            let a = fit.active_at(k);
            assert!(!(a.contains(&0) && a.contains(&4)), "both duplicates active at {k}");
        }
        // reversed visiting order hands the signal to the other copy
        let opts = LassoOptions { coordinate_order: Some(vec![4, 3, 2, 1, 0]), ..Default::default() };
        let fit = lasso_path(x.view(), ArrayView1::from(&y), &GlmSpec::gaussian(), None, &opts).unwrap();
        let mid = fit.n_fitted() / 2;
        assert!(fit.active_at(mid).contains(&4));
        assert!(!fit.active_at(mid).contains(&0));
    }

    #[test]
    fn strong_single_signal_is_recovered_mid_path() {
        let x = random_design(80, 10, 31);
        let mut r = rng::stream(32, &[]);
        let y: Vec<f64> = (0..80).map(|i| x[[i, 3]] + 0.05 * r.sample::<f64, _>(StandardNormal)).collect();
        let fit = lasso_path(x.view(), ArrayView1::from(&y), &GlmSpec::gaussian(), None, &LassoOptions::default()).unwrap();
        // geometric midpoint of the first decade of the path
        let lambda = fit.path.lambda_max * 0.3;
        assert_eq!(active_set(&fit, lambda), vec![3]);
    }

    #[test]
    fn back_mapped_coefficients_reproduce_linear_predictor() {
        let mut x = random_design(40, 8, 41);
        x.mapv_inplace(|v| 3.0 * v + 1.5);
        let y: Vec<f64> = (0..40).map(|i| if x[[i, 1]] + x[[i, 2]] > 3.0 { 1.0 } else { 0.0 }).collect();
        let fit = lasso_path(x.view(), ArrayView1::from(&y), &GlmSpec::binomial(), None, &LassoOptions::default()).unwrap();
        let cm = ColumnMatrix::from_view(x.view());
        let std = Standardized::new(&cm);
        for k in (0..fit.n_fitted()).step_by(7) {
            let orig = fit.linear_predictor(&cm, k);
            let st = CdState { beta: fit.std_coefficients[k].clone(), b0: fit.std_intercepts[k] };
            let mut eta = vec![0.0; 40];
            linear_predictor_std(&std, &st, &mut eta);
            for (a, b) in orig.iter().zip(&eta) {
                assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn cv_is_seed_deterministic_and_orders_lambdas() {
        let x = random_design(60, 10, 51);
        let mut r = rng::stream(52, &[]);
        let y: Vec<f64> = (0..60).map(|i| x[[i, 0]] + r.sample::<f64, _>(StandardNormal)).collect();
        let a = cross_validate(x.view(), ArrayView1::from(&y), &GlmSpec::gaussian(), 5, 9).unwrap();
        let b = cross_validate(x.view(), ArrayView1::from(&y), &GlmSpec::gaussian(), 5, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.lambda_1se >= a.lambda_min);
        let thr = a.mean_cv_error[a.index_min] + a.se_cv_error[a.index_min];
        assert!(a.mean_cv_error[a.index_1se] <= thr);
        assert!((0..a.index_1se).all(|i| a.mean_cv_error[i] > thr));
    }

    #[test]
    fn cv_rejects_bad_fold_counts() {
        let x = random_design(6, 2, 1);
        let y = vec![0.0, 1.0, 0.5, 0.2, 0.1, 0.3];
        assert!(cross_validate(x.view(), ArrayView1::from(&y), &GlmSpec::gaussian(), 1, 0).is_err());
        assert!(cross_validate(x.view(), ArrayView1::from(&y), &GlmSpec::gaussian(), 4, 0).is_err());
    }

    #[test]
    fn stratified_folds_balance_classes() {
        let y: Vec<f64> = (0..100).map(|i| if i < 30 { 1.0 } else { 0.0 }).collect();
        let mut r = rng::stream(3, &[]);
        let f = assign_folds(&y, 5, true, &mut r);
        for fold in 0..5 {
            let ones = (0..100).filter(|&i| f[i] == fold && y[i] == 1.0).count();
            assert_eq!(ones, 6);
        }
    }
}
