//! Unpenalized exponential-family GLMs fitted by iteratively reweighted
//! least squares, plus the likelihood-ratio statistic used by ranking and
//! forward selection.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Result, SurfError};
use crate::linalg::least_squares;

/// Fitted binomial probabilities are kept inside `[MU_CLAMP, 1 - MU_CLAMP]`.
pub const MU_CLAMP: f64 = 1e-8;
/// Slack below zero tolerated in a likelihood-ratio statistic before it is
/// treated as an upstream convergence failure.
pub const LLR_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Binomial,
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logit,
    Log,
}

/// How the gaussian dispersion enters the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GaussianScale {
    /// Variance maximised out of the likelihood: `D = n log(RSS0 / RSS1)`.
    #[default]
    Profiled,
    /// Known variance: `D = (RSS0 - RSS1) / variance`.
    Known(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlmSpec {
    pub family: Family,
    #[serde(default)]
    pub gaussian_scale: GaussianScale,
}

impl GlmSpec {
    pub fn new(family: Family) -> Self {
        GlmSpec {
            family,
            gaussian_scale: GaussianScale::Profiled,
        }
    }

    pub fn gaussian() -> Self {
        Self::new(Family::Gaussian)
    }

    pub fn binomial() -> Self {
        Self::new(Family::Binomial)
    }

    pub fn poisson() -> Self {
        Self::new(Family::Poisson)
    }

    pub fn with_gaussian_scale(mut self, scale: GaussianScale) -> Self {
        self.gaussian_scale = scale;
        self
    }

    /// Always the canonical link of the family.
    pub fn link(&self) -> Link {
        self.family.canonical_link()
    }
}

impl Family {
    pub fn canonical_link(self) -> Link {
        match self {
            Family::Gaussian => Link::Identity,
            Family::Binomial => Link::Logit,
            Family::Poisson => Link::Log,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Binomial => "binomial",
            Family::Poisson => "poisson",
        }
    }

    /// Inverse link with the clamping used throughout fitting.
    #[inline]
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::Binomial => {
                let p = 1.0 / (1.0 + (-eta).exp());
                p.clamp(MU_CLAMP, 1.0 - MU_CLAMP)
            }
            Family::Poisson => eta.min(700.0).exp().max(1e-10),
        }
    }

    #[inline]
    pub fn link_fn(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            Family::Binomial => (mu / (1.0 - mu)).ln(),
            Family::Poisson => mu.ln(),
        }
    }

    /// Variance function; for canonical links this is also the IRLS weight.
    #[inline]
    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Binomial => mu * (1.0 - mu),
            Family::Poisson => mu,
        }
    }

    /// Unit deviance d(y, mu), summing to the model deviance.
    #[inline]
    pub fn unit_deviance(self, y: f64, mu: f64) -> f64 {
        match self {
            Family::Gaussian => (y - mu) * (y - mu),
            Family::Binomial => {
                let a = if y > 0.0 { y * (y / mu).ln() } else { 0.0 };
                let b = if y < 1.0 {
                    (1.0 - y) * ((1.0 - y) / (1.0 - mu)).ln()
                } else {
                    0.0
                };
                2.0 * (a + b)
            }
            Family::Poisson => {
                let a = if y > 0.0 { y * (y / mu).ln() } else { 0.0 };
                2.0 * (a - (y - mu))
            }
        }
    }

    pub fn deviance(self, y: &[f64], mu: &[f64]) -> f64 {
        y.iter()
            .zip(mu)
            .map(|(&yi, &mi)| self.unit_deviance(yi, mi))
            .sum()
    }

    /// Checks that every response value lies in the family's support.
    pub fn validate_response(self, y: &[f64]) -> Result<()> {
        for (i, &v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(SurfError::NonFinite(format!("response at row {i}")));
            }
            let ok = match self {
                Family::Gaussian => true,
                Family::Binomial => v == 0.0 || v == 1.0,
                Family::Poisson => v >= 0.0 && v.fract() == 0.0,
            };
            if !ok {
                return Err(SurfError::InvalidResponse(format!(
                    "value {v} at row {i} is not valid for the {} family",
                    self.name()
                )));
            }
        }
        Ok(())
    }

    fn initial_mean(self, y: f64) -> f64 {
        match self {
            Family::Gaussian => y,
            Family::Binomial => (y + 0.5) / 2.0,
            Family::Poisson => y + 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative deviance change that ends the IRLS loop.
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 50,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GlmFit {
    pub spec: GlmSpec,
    pub intercept: f64,
    /// One per supplied column; columns in `dropped` are zero.
    pub coefficients: Vec<f64>,
    pub deviance: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Columns removed because they were linearly dependent on earlier ones.
    pub dropped: Vec<usize>,
    pub n_obs: usize,
}

impl GlmFit {
    pub fn rank_deficient(&self) -> bool {
        !self.dropped.is_empty()
    }

    /// Linear predictor for the given columns (same order as the fit). An
    /// intercept-only fit predicts for its own `n_obs` rows.
    pub fn linear_predictor(&self, columns: &[&[f64]]) -> Vec<f64> {
        let n = columns.first().map_or(self.n_obs, |c| c.len());
        let mut eta = vec![self.intercept; n];
        for (col, &b) in columns.iter().zip(&self.coefficients) {
            if b != 0.0 {
                eta.iter_mut().zip(col.iter()).for_each(|(e, x)| *e += b * x);
            }
        }
        eta
    }

    pub fn predict_mean(&self, columns: &[&[f64]]) -> Vec<f64> {
        let fam = self.spec.family;
        self.linear_predictor(columns)
            .into_iter()
            .map(|e| fam.mean(e))
            .collect()
    }
}

/// Fits a GLM with intercept on the columns of `x`.
pub fn fit_glm(x: ArrayView2<f64>, y: ArrayView1<f64>, spec: &GlmSpec) -> Result<GlmFit> {
    let cols: Vec<Vec<f64>> = x.columns().into_iter().map(|c| c.to_vec()).collect();
    let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
    let y = y.to_vec();
    fit_glm_columns(&refs, &y, spec, &FitOptions::default())
}

/// Column-slice form of [`fit_glm`], avoiding copies in hot loops.
pub fn fit_glm_columns(
    columns: &[&[f64]],
    y: &[f64],
    spec: &GlmSpec,
    opts: &FitOptions,
) -> Result<GlmFit> {
    fit_glm_columns_from(columns, y, spec, opts, None)
}

/// [`fit_glm_columns`] with IRLS started from the linear predictor
/// `start_eta` (e.g. a nested model's fit) instead of the response.
pub fn fit_glm_columns_from(
    columns: &[&[f64]],
    y: &[f64],
    spec: &GlmSpec,
    opts: &FitOptions,
    start_eta: Option<&[f64]>,
) -> Result<GlmFit> {
    let n = y.len();
    if n == 0 {
        return Err(SurfError::DimensionMismatch("empty response".into()));
    }
    for (j, c) in columns.iter().enumerate() {
        if c.len() != n {
            return Err(SurfError::DimensionMismatch(format!(
                "column {j} has {} rows, response has {n}",
                c.len()
            )));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(SurfError::NonFinite(format!("design column {j}")));
        }
    }
    let family = spec.family;
    family.validate_response(y)?;
    if let GaussianScale::Known(v) = spec.gaussian_scale {
        if !(v > 0.0 && v.is_finite()) {
            return Err(SurfError::InvalidConfig(format!(
                "gaussian variance must be positive, got {v}"
            )));
        }
    }

    let k = columns.len();
    let m = k + 1;
    let mut a = vec![0.0; n * m];
    let mut z = vec![0.0; n];

    if family == Family::Gaussian {
        a[..n].iter_mut().for_each(|v| *v = 1.0);
        for (j, c) in columns.iter().enumerate() {
            a[(j + 1) * n..(j + 2) * n].copy_from_slice(c);
        }
        z.copy_from_slice(y);
        let sol = least_squares(&mut a, n, m, &mut z);
        let (intercept, coefficients, dropped) = unpack(sol.coef, sol.dropped);
        let mut fit = GlmFit {
            spec: *spec,
            intercept,
            coefficients,
            deviance: 0.0,
            log_likelihood: 0.0,
            converged: true,
            iterations: 1,
            dropped,
            n_obs: n,
        };
        let mu = fit.predict_mean(columns);
        fit.deviance = family.deviance(y, &mu);
        fit.log_likelihood = log_likelihood(spec, y, &mu);
        return Ok(fit);
    }

    let (mut mu, mut eta): (Vec<f64>, Vec<f64>) = match start_eta {
        Some(e) if e.len() == n && e.iter().all(|v| v.is_finite()) => {
            let mu: Vec<f64> = e.iter().map(|&v| family.mean(v)).collect();
            let eta = mu.iter().map(|&v| family.link_fn(v)).collect();
            (mu, eta)
        }
        _ => {
            let mu: Vec<f64> = y.iter().map(|&v| family.initial_mean(v)).collect();
            let eta = mu.iter().map(|&v| family.link_fn(v)).collect();
            (mu, eta)
        }
    };
    let mut dev_old = family.deviance(y, &mu);
    let mut coef_old: Option<Vec<f64>> = None;
    let mut coef = vec![0.0; m];
    let mut dropped_cols = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut dev = dev_old;

    for iter in 1..=opts.max_iter {
        iterations = iter;
        for i in 0..n {
            let w = family.variance(mu[i]);
            let sw = w.sqrt();
            z[i] = sw * (eta[i] + (y[i] - mu[i]) / w);
            a[i] = sw;
            for (j, c) in columns.iter().enumerate() {
                a[(j + 1) * n + i] = sw * c[i];
            }
        }
        let sol = least_squares(&mut a, n, m, &mut z);
        coef = sol.coef;
        dropped_cols = sol.dropped;

        let eval = |coef: &[f64], eta: &mut Vec<f64>, mu: &mut Vec<f64>| -> f64 {
            for i in 0..n {
                let mut e = coef[0];
                for (j, c) in columns.iter().enumerate() {
                    e += coef[j + 1] * c[i];
                }
                eta[i] = e;
                mu[i] = family.mean(e);
            }
            family.deviance(y, mu)
        };
        dev = eval(&coef, &mut eta, &mut mu);

        // step halving on divergence
        if let Some(prev) = &coef_old {
            let mut halvings = 0;
            while (!dev.is_finite() || dev > dev_old * (1.0 + 1e-12) + 1e-12) && halvings < 30 {
                for (c, p) in coef.iter_mut().zip(prev) {
                    *c = 0.5 * (*c + p);
                }
                dev = eval(&coef, &mut eta, &mut mu);
                halvings += 1;
            }
        }
        if !dev.is_finite() {
            return Err(SurfError::Numerical("IRLS produced a non-finite deviance".into()));
        }
        let change = (dev - dev_old).abs() / (dev.abs() + 0.1);
        dev_old = dev;
        coef_old = Some(coef.clone());
        if change < opts.tol {
            converged = true;
            break;
        }
    }

    let (intercept, coefficients, dropped) = unpack(coef, dropped_cols);
    Ok(GlmFit {
        spec: *spec,
        intercept,
        coefficients,
        deviance: dev,
        log_likelihood: log_likelihood(spec, y, &mu),
        converged,
        iterations,
        dropped,
        n_obs: n,
    })
}

fn unpack(coef: Vec<f64>, dropped: Vec<usize>) -> (f64, Vec<f64>, Vec<usize>) {
    // index 0 is the intercept; a constant response column can only drop it
    // if everything is zero-weighted, which IRLS never produces
    let intercept = coef[0];
    let coefficients = coef[1..].to_vec();
    let dropped = dropped.into_iter().filter(|&j| j > 0).map(|j| j - 1).collect();
    (intercept, coefficients, dropped)
}

fn log_likelihood(spec: &GlmSpec, y: &[f64], mu: &[f64]) -> f64 {
    let n = y.len() as f64;
    match spec.family {
        Family::Gaussian => {
            let rss: f64 = y.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            match spec.gaussian_scale {
                GaussianScale::Profiled => {
                    let s2 = (rss / n).max(f64::MIN_POSITIVE);
                    -0.5 * n * ((2.0 * std::f64::consts::PI * s2).ln() + 1.0)
                }
                GaussianScale::Known(v) => {
                    -0.5 * n * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * rss / v
                }
            }
        }
        Family::Binomial => y
            .iter()
            .zip(mu)
            .map(|(&yi, &mi)| yi * mi.ln() + (1.0 - yi) * (1.0 - mi).ln())
            .sum(),
        Family::Poisson => y
            .iter()
            .zip(mu)
            .map(|(&yi, &mi)| yi * mi.ln() - mi - ln_gamma(yi + 1.0))
            .sum(),
    }
}

/// Likelihood-ratio statistic `D` of a nested pair of fits.
///
/// Binomial and poisson use `2 (l_alt - l_null)`; the gaussian form depends
/// on [`GaussianScale`]. Values in `[-LLR_SLACK, 0)` are clamped to zero.
pub fn log_likelihood_ratio(null_fit: &GlmFit, alt_fit: &GlmFit, n: usize) -> Result<f64> {
    let d = match null_fit.spec.family {
        Family::Gaussian => match null_fit.spec.gaussian_scale {
            GaussianScale::Profiled => {
                let r0 = null_fit.deviance.max(f64::MIN_POSITIVE);
                let r1 = alt_fit.deviance.max(f64::MIN_POSITIVE);
                n as f64 * (r0 / r1).ln()
            }
            GaussianScale::Known(v) => (null_fit.deviance - alt_fit.deviance) / v,
        },
        Family::Binomial | Family::Poisson => null_fit.deviance - alt_fit.deviance,
    };
    if d.is_nan() {
        return Err(SurfError::Numerical("likelihood ratio is NaN".into()));
    }
    if d < -LLR_SLACK {
        return Err(SurfError::Numerical(format!(
            "likelihood ratio {d:.3e} is negative; alternative fit did not converge"
        )));
    }
    Ok(d.max(0.0))
}
