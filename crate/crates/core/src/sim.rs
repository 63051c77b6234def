//! Simulation harness: synthetic compositional designs, SNR calibration,
//! response generation, surrogate-aware scoring and method comparison.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::ColumnMatrix;
use crate::error::{Result, SurfError};
use crate::forward::{forward_select, ForwardConfig};
use crate::glm::{fit_glm_columns, Family, FitOptions, GlmSpec};
use crate::lasso::{cv_lasso, LambdaRule, LassoOptions, SUPPORT_TOL};
use crate::ranking::{rank_variables, RankingConfig};
use crate::rng::{self, tag};
use crate::stability::{stability_select, StabilityConfig};
use crate::table;

/// Synthetic log-normal abundance table.
///
/// Columns are grouped in blocks sharing a latent normal factor (correlation
/// `rho` on the log scale). Each surrogate pair `[a, b]` replaces column `b`
/// by column `a` times a small log-normal perturbation, giving a pair whose
/// correlation is close to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n: usize,
    pub p: usize,
    pub block_size: usize,
    pub rho: f64,
    /// Standard deviation of the log abundances.
    pub log_sd: f64,
    /// Spread of the per-column log means.
    pub mean_sd: f64,
    /// Divide each row by its total.
    pub proportions: bool,
    pub surrogate_pairs: Vec<[usize; 2]>,
    pub surrogate_noise: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            n: 100,
            p: 100,
            block_size: 10,
            rho: 0.3,
            log_sd: 1.0,
            mean_sd: 1.0,
            proportions: true,
            surrogate_pairs: Vec::new(),
            surrogate_noise: 0.05,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.block_size == 0 {
            return Err(SurfError::InvalidConfig(
                "generator needs n, p and block_size >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(SurfError::InvalidConfig(format!(
                "rho must lie in [0, 1), got {}",
                self.rho
            )));
        }
        for &[a, b] in &self.surrogate_pairs {
            if a >= self.p || b >= self.p || a == b {
                return Err(SurfError::InvalidConfig(format!(
                    "surrogate pair [{a}, {b}] is invalid for p = {}",
                    self.p
                )));
            }
        }
        Ok(())
    }
}

/// Per-column log means of the abundances.
pub fn column_means(spec: &GeneratorSpec, rng: &mut impl Rng) -> Vec<f64> {
    (0..spec.p)
        .map(|_| spec.mean_sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Draws an `n x p` design: column means first, then rows, from one stream.
pub fn generate_design(spec: &GeneratorSpec, rng: &mut impl Rng) -> Result<Array2<f64>> {
    let means = column_means(spec, rng);
    generate_rows(spec, &means, spec.n, rng)
}

/// Draws `n` rows around fixed column log means.
pub fn generate_rows(
    spec: &GeneratorSpec,
    means: &[f64],
    n: usize,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    spec.validate()?;
    let p = spec.p;
    if means.len() != p {
        return Err(SurfError::DimensionMismatch(format!(
            "{} column means for p = {p}",
            means.len()
        )));
    }
    let blocks = p.div_ceil(spec.block_size);
    let (a, b) = (spec.rho.sqrt(), (1.0 - spec.rho).sqrt());
    let mut x = Array2::zeros((n, p));
    for i in 0..n {
        let factors: Vec<f64> = (0..blocks)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        for j in 0..p {
            let z = a * factors[j / spec.block_size] + b * rng.sample::<f64, _>(StandardNormal);
            x[[i, j]] = (means[j] + spec.log_sd * z).exp();
        }
        for &[s, t] in &spec.surrogate_pairs {
            let e: f64 = rng.sample(StandardNormal);
            x[[i, t]] = x[[i, s]] * (spec.surrogate_noise * e).exp();
        }
        if spec.proportions {
            let total: f64 = x.row(i).sum();
            x.row_mut(i).mapv_inplace(|v| v / total);
        }
    }
    Ok(x)
}

fn linear_predictor(x: &ColumnMatrix, beta: &[f64], intercept: f64) -> Vec<f64> {
    let mut eta = vec![intercept; x.nrows()];
    for (j, &b) in beta.iter().enumerate() {
        if b != 0.0 {
            eta.iter_mut().zip(x.col(j)).for_each(|(e, v)| *e += b * v);
        }
    }
    eta
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
    (m, var)
}

/// Empirical signal-to-noise ratio over the rows of `x`:
/// `Var(P) / E(P(1-P))` for binomial, `Var(x beta)` (unit noise variance)
/// for gaussian and `Var(mu) / E(mu)` for poisson.
pub fn signal_to_noise(x: &ColumnMatrix, beta: &[f64], intercept: f64, family: Family) -> f64 {
    let eta = linear_predictor(x, beta, intercept);
    match family {
        Family::Gaussian => mean_var(&eta).1,
        Family::Binomial => {
            let pr: Vec<f64> = eta.iter().map(|&e| family.mean(e)).collect();
            let noise = pr.iter().map(|q| q * (1.0 - q)).sum::<f64>() / pr.len() as f64;
            mean_var(&pr).1 / noise
        }
        Family::Poisson => {
            let mu: Vec<f64> = eta.iter().map(|&e| family.mean(e)).collect();
            let (m, v) = mean_var(&mu);
            v / m
        }
    }
}

/// Scales `beta_direction` by `c > 0` so that the signal-to-noise ratio is
/// `target` (closed form for gaussian, bisection otherwise, to within 0.01%).
pub fn calibrate_snr(
    x: &ColumnMatrix,
    beta_direction: &[f64],
    intercept: f64,
    family: Family,
    target: f64,
) -> Result<Vec<f64>> {
    if beta_direction.len() != x.ncols() {
        return Err(SurfError::DimensionMismatch(format!(
            "{} coefficients for {} columns",
            beta_direction.len(),
            x.ncols()
        )));
    }
    if !(target > 0.0 && target.is_finite()) {
        return Err(SurfError::InvalidConfig(format!("target SNR must be positive, got {target}")));
    }
    if beta_direction.iter().all(|&b| b == 0.0) {
        return Err(SurfError::InvalidConfig("coefficient direction is zero".into()));
    }
    let scaled = |c: f64| -> Vec<f64> { beta_direction.iter().map(|b| c * b).collect() };
    let snr = |c: f64| signal_to_noise(x, &scaled(c), intercept, family);

    if family == Family::Gaussian {
        let v = snr(1.0);
        if v <= 0.0 {
            return Err(SurfError::UnattainableSnr {
                target,
                max_attainable: 0.0,
            });
        }
        return Ok(scaled((target / v).sqrt()));
    }

    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = snr(hi);
    let mut doublings = 0;
    while best < target {
        lo = hi;
        hi *= 2.0;
        let s = snr(hi);
        doublings += 1;
        if !s.is_finite() || doublings > 60 {
            return Err(SurfError::UnattainableSnr {
                target,
                max_attainable: best,
            });
        }
        best = best.max(s);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let s = snr(mid);
        if (s - target).abs() <= 1e-4 * target {
            return Ok(scaled(mid));
        }
        if s < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    let s = snr(c);
    if (s - target).abs() <= 0.01 * target {
        Ok(scaled(c))
    } else {
        Err(SurfError::UnattainableSnr {
            target,
            max_attainable: best,
        })
    }
}

/// Draws a response from the GLM `g(E y) = intercept + x beta`; gaussian
/// noise has unit variance.
pub fn generate_response(
    x: &ColumnMatrix,
    beta: &[f64],
    intercept: f64,
    family: Family,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if beta.len() != x.ncols() {
        return Err(SurfError::DimensionMismatch(format!(
            "{} coefficients for {} columns",
            beta.len(),
            x.ncols()
        )));
    }
    let eta = linear_predictor(x, beta, intercept);
    eta.iter()
        .map(|&e| match family {
            Family::Gaussian => Ok(e + rng.sample::<f64, _>(StandardNormal)),
            Family::Binomial => {
                let p = 1.0 / (1.0 + (-e).exp());
                Ok(if rng.random::<f64>() < p { 1.0 } else { 0.0 })
            }
            Family::Poisson => {
                let mu = family.mean(e);
                Poisson::new(mu)
                    .map(|d| d.sample(rng))
                    .map_err(|err| SurfError::Numerical(format!("poisson mean {mu}: {err}")))
            }
        })
        .collect()
}

/// True and false positives of `selected` given the truth equivalence
/// classes. Each class earns at most one true positive; further members of
/// a credited class and variables outside every class are false positives.
pub fn score_selection(selected: &[usize], classes: &[Vec<usize>]) -> (usize, usize) {
    let mut sel = selected.to_vec();
    sel.sort_unstable();
    sel.dedup();
    let mut credited = vec![false; classes.len()];
    let (mut tp, mut fp) = (0, 0);
    for v in sel {
        match classes.iter().position(|c| c.contains(&v)) {
            Some(k) if !credited[k] => {
                credited[k] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
    }
    (tp, fp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Surf,
    Stability,
    Lasso,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Surf => "surf",
            Method::Stability => "stability",
            Method::Lasso => "lasso",
        }
    }
}

/// One simulation scenario, readable from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub family: Family,
    pub generator: GeneratorSpec,
    /// Real design matrix (CSV/TSV, first column sample id) used instead of
    /// the generator.
    pub design_file: Option<PathBuf>,
    pub test_design_file: Option<PathBuf>,
    /// Held-out rows drawn from the generator for test error.
    pub n_test: usize,
    /// Draw a fresh synthetic design for every replicate.
    pub redraw_design: bool,
    /// `(column, coefficient)`; coefficients give the direction when
    /// `target_snr` is set.
    pub true_vars: Vec<(usize, f64)>,
    /// Defaults to logit(0.3) for binomial and 0 otherwise.
    pub intercept: Option<f64>,
    pub target_snr: Option<f64>,
    /// Sets of mutually surrogate columns; a true variable outside every
    /// set forms its own class.
    pub equivalence_classes: Vec<Vec<usize>>,
    pub n_reps: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub ranking: RankingConfig,
    pub forward: ForwardConfig,
    pub stability: StabilityConfig,
    pub lasso_folds: usize,
    pub lasso_rule: LambdaRule,
    /// Center design columns before generating responses.
    pub center_columns: bool,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            name: "scenario".into(),
            family: Family::Binomial,
            generator: GeneratorSpec::default(),
            design_file: None,
            test_design_file: None,
            n_test: 0,
            redraw_design: false,
            true_vars: Vec::new(),
            intercept: None,
            target_snr: None,
            equivalence_classes: Vec::new(),
            n_reps: 100,
            seed: 1,
            methods: vec![Method::Surf],
            ranking: RankingConfig {
                b: 50,
                ..Default::default()
            },
            forward: ForwardConfig::default(),
            stability: StabilityConfig::default(),
            lasso_folds: 5,
            lasso_rule: LambdaRule::OneSe,
            center_columns: true,
        }
    }
}

pub fn default_intercept(family: Family) -> f64 {
    match family {
        Family::Binomial => (0.3f64 / 0.7).ln(),
        Family::Gaussian | Family::Poisson => 0.0,
    }
}

impl ScenarioSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SurfError::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut spec = Self::from_toml_str(&text)?;
        // relative design paths are relative to the config file
        if let Some(dir) = path.parent() {
            for f in [&mut spec.design_file, &mut spec.test_design_file].into_iter().flatten() {
                if f.is_relative() {
                    *f = dir.join(&*f);
                }
            }
        }
        Ok(spec)
    }

    pub fn intercept_value(&self) -> f64 {
        self.intercept.unwrap_or_else(|| default_intercept(self.family))
    }

    /// Truth equivalence classes: one per true variable.
    pub fn truth_classes(&self) -> Vec<Vec<usize>> {
        let mut classes: Vec<Vec<usize>> = Vec::new();
        for &(v, _) in &self.true_vars {
            let class = self
                .equivalence_classes
                .iter()
                .find(|c| c.contains(&v))
                .cloned()
                .unwrap_or_else(|| vec![v]);
            if !classes.contains(&class) {
                classes.push(class);
            }
        }
        classes
    }

    pub fn score(&self, selected: &[usize]) -> (usize, usize) {
        score_selection(selected, &self.truth_classes())
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        for &(v, _) in &self.true_vars {
            if v >= p {
                return Err(SurfError::InvalidConfig(format!(
                    "true variable {v} outside the {p} design columns"
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.equivalence_classes {
            for &v in c {
                if v >= p {
                    return Err(SurfError::InvalidConfig(format!(
                        "equivalence class member {v} outside the {p} design columns"
                    )));
                }
                if !seen.insert(v) {
                    return Err(SurfError::InvalidConfig(format!(
                        "column {v} appears in two equivalence classes"
                    )));
                }
            }
        }
        if let Some(t) = self.target_snr {
            if !(t > 0.0) {
                return Err(SurfError::InvalidConfig("target_snr must be positive".into()));
            }
            if self.true_vars.is_empty() {
                return Err(SurfError::InvalidConfig(
                    "target_snr needs at least one true variable".into(),
                ));
            }
        }
        Ok(())
    }

    fn synthetic_rows(&self, n: usize, stream: u64) -> Result<ColumnMatrix> {
        let means = column_means(&self.generator, &mut rng::stream(self.seed, &[tag::DESIGN]));
        let mut r = rng::stream(self.seed, &[tag::DESIGN, stream]);
        Ok(ColumnMatrix::from_view(generate_rows(&self.generator, &means, n, &mut r)?.view()))
    }

    /// Training and optional test designs. Synthetic replicates share
    /// column means and differ in rows. With `center_columns`, both designs
    /// are shifted by the training column means.
    pub fn designs(&self, rep: Option<usize>) -> Result<(ColumnMatrix, Option<ColumnMatrix>)> {
        let read = |path: &Path| -> Result<ColumnMatrix> {
            Ok(ColumnMatrix::from_view(table::read_table(path)?.numeric_matrix()?.view()))
        };
        let mut train = match &self.design_file {
            Some(path) => read(path)?,
            None => self.synthetic_rows(self.generator.n, rep.map_or(0, |r| 2 * r as u64 + 2))?,
        };
        let mut test = match (&self.test_design_file, &self.design_file) {
            (Some(path), _) => Some(read(path)?),
            (None, None) if self.n_test > 0 => {
                Some(self.synthetic_rows(self.n_test, rep.map_or(1, |r| 2 * r as u64 + 3))?)
            }
            _ => None,
        };
        if let Some(t) = &test {
            if t.ncols() != train.ncols() {
                return Err(SurfError::DimensionMismatch(format!(
                    "test design has {} columns, training design {}",
                    t.ncols(),
                    train.ncols()
                )));
            }
        }
        if self.center_columns {
            let means = train.center();
            if let Some(t) = test.as_mut() {
                t.subtract(&means);
            }
        }
        Ok((train, test))
    }

    /// Coefficients on the design columns, calibrated when `target_snr` is set.
    pub fn coefficients(&self, x: &ColumnMatrix) -> Result<Vec<f64>> {
        let mut beta = vec![0.0; x.ncols()];
        for &(v, c) in &self.true_vars {
            beta[v] += c;
        }
        match self.target_snr {
            Some(t) => calibrate_snr(x, &beta, self.intercept_value(), self.family, t),
            None => Ok(beta),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub rep: usize,
    pub selected: Vec<usize>,
    pub tp: usize,
    pub fp: usize,
    /// Misclassification rate (binomial) or mean squared error.
    pub train_error: f64,
    pub test_error: Option<f64>,
    /// In-sample R^2 for gaussian responses.
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: Method,
    pub completed: usize,
    pub failures: usize,
    /// `tp_distribution[k]` counts replicates recovering `k` truth classes.
    pub tp_distribution: Vec<usize>,
    pub tp_mean: f64,
    pub fp_mean: f64,
    pub fp_sd: f64,
    pub selected_mean: f64,
    pub zero_selected: usize,
    pub train_error_mean: f64,
    pub train_error_median: f64,
    pub test_error_mean: Option<f64>,
    pub r2_median: Option<f64>,
    pub reps: Vec<RepOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub scenario: String,
    pub family: Family,
    pub n_reps: usize,
    pub intercept: f64,
    /// Nonzero coefficients actually used, as `(column, value)`.
    pub coefficients: Vec<(usize, f64)>,
    pub achieved_snr: Option<f64>,
    pub methods: Vec<MethodMetrics>,
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

/// Runs `method` on one replicate and returns its selected columns.
pub fn select_with(
    method: Method,
    x: &ColumnMatrix,
    y: &[f64],
    spec: &ScenarioSpec,
    rep_seed: u64,
) -> Result<Vec<usize>> {
    let glm = GlmSpec::new(spec.family);
    match method {
        Method::Surf => {
            let rc = RankingConfig {
                seed: rng::derive_seed(rep_seed, &[tag::RANKING]),
                ..spec.ranking.clone()
            };
            let fc = ForwardConfig {
                seed: rng::derive_seed(rep_seed, &[tag::FORWARD]),
                ..spec.forward.clone()
            };
            let ranking = rank_variables(x, y, &glm, &rc)?;
            Ok(forward_select(x, y, &glm, &ranking, &fc)?.selected())
        }
        Method::Stability => {
            let sc = StabilityConfig {
                seed: rng::derive_seed(rep_seed, &[tag::STABILITY]),
                ..spec.stability.clone()
            };
            Ok(stability_select(x, y, &glm, &sc)?.selected)
        }
        Method::Lasso => {
            let seed = rng::derive_seed(rep_seed, &[tag::FOLDS]);
            let (fit, cv) = cv_lasso(x, y, spec.family, spec.lasso_folds, seed, &LassoOptions { tol: SUPPORT_TOL, ..Default::default() })?;
            Ok(fit.active_at(cv.chosen_index(spec.lasso_rule)))
        }
    }
}

/// Prediction error of `y` by means `mu`: misclassification at 0.5 for
/// binomial, mean squared error otherwise.
fn prediction_error(family: Family, y: &[f64], mu: &[f64]) -> f64 {
    let n = y.len() as f64;
    match family {
        Family::Binomial => {
            y.iter()
                .zip(mu)
                .filter(|(&yi, &m)| (m > 0.5) != (yi > 0.5))
                .count() as f64
                / n
        }
        _ => y.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n,
    }
}

/// Runs every replicate of `spec` for the given methods.
pub fn run_scenario(spec: &ScenarioSpec, methods: &[Method]) -> Result<ScenarioMetrics> {
    if methods.is_empty() {
        return Err(SurfError::InvalidConfig("no methods requested".into()));
    }
    let intercept = spec.intercept_value();
    let fixed = if spec.redraw_design || spec.n_reps == 0 {
        None
    } else {
        let (x, test) = spec.designs(None)?;
        spec.validate(x.ncols())?;
        let beta = spec.coefficients(&x)?;
        Some((x, test, beta))
    };
    let (coefficients, achieved_snr) = match &fixed {
        Some((x, _, beta)) => {
            let snr = spec.target_snr.map(|_| signal_to_noise(x, beta, intercept, spec.family));
            let nz: Vec<(usize, f64)> = beta
                .iter()
                .enumerate()
                .filter(|(_, b)| **b != 0.0)
                .map(|(j, b)| (j, *b))
                .collect();
            (nz, snr)
        }
        None => (spec.true_vars.clone(), None),
    };

    let reps: Vec<Result<Vec<std::result::Result<RepOutcome, String>>>> = (0..spec.n_reps)
        .into_par_iter()
        .map(|rep| {
            let own;
            let (x, test_x, beta) = match &fixed {
                Some((x, t, b)) => (x, t, b),
                None => {
                    let (x, t) = spec.designs(Some(rep))?;
                    spec.validate(x.ncols())?;
                    let b = spec.coefficients(&x)?;
                    own = (x, t, b);
                    (&own.0, &own.1, &own.2)
                }
            };
            let rep_seed = rng::derive_seed(spec.seed, &[tag::SIMULATION, rep as u64]);
            let mut r = rng::stream(rep_seed, &[tag::SIMULATION]);
            let y = generate_response(x, beta, intercept, spec.family, &mut r)?;
            let y_test = match test_x {
                Some(tx) => Some(generate_response(tx, beta, intercept, spec.family, &mut r)?),
                None => None,
            };
            let glm = GlmSpec::new(spec.family);
            Ok(methods
                .iter()
                .map(|&m| {
                    let selected = select_with(m, x, y.as_slice(), spec, rep_seed).map_err(|e| e.to_string())?;
                    let (tp, fp) = spec.score(&selected);
                    let cols: Vec<&[f64]> = selected.iter().map(|&j| x.col(j)).collect();
                    let fit = fit_glm_columns(&cols, &y, &glm, &FitOptions::default())
                        .map_err(|e| e.to_string())?;
                    let mu = fit.predict_mean(&cols);
                    let train_error = prediction_error(spec.family, &y, &mu);
                    let r2 = (spec.family == Family::Gaussian).then(|| {
                        let (_, var) = mean_var(&y);
                        1.0 - train_error / var
                    });
                    let test_error = match (test_x, &y_test) {
                        (Some(tx), Some(yt)) => {
                            let tcols: Vec<&[f64]> = selected.iter().map(|&j| tx.col(j)).collect();
                            let mu = if tcols.is_empty() {
                                vec![spec.family.mean(fit.intercept); yt.len()]
                            } else {
                                fit.predict_mean(&tcols)
                            };
                            Some(prediction_error(spec.family, yt, &mu))
                        }
                        _ => None,
                    };
                    Ok(RepOutcome {
                        rep,
                        selected,
                        tp,
                        fp,
                        train_error,
                        test_error,
                        r2,
                    })
                })
                .collect())
        })
        .collect();

    let mut per_method: Vec<Vec<RepOutcome>> = vec![Vec::new(); methods.len()];
    let mut failures = vec![0usize; methods.len()];
    for rep in reps {
        for (k, outcome) in rep?.into_iter().enumerate() {
            match outcome {
                Ok(o) => per_method[k].push(o),
                Err(_) => failures[k] += 1,
            }
        }
    }
    let n_classes = spec.truth_classes().len();
    let mut out = Vec::new();
    for (k, &m) in methods.iter().enumerate() {
        if failures[k] as f64 > 0.1 * spec.n_reps as f64 {
            return Err(SurfError::TooManyFailures(format!(
                "{} failed on {} of {} replicates",
                m.name(),
                failures[k],
                spec.n_reps
            )));
        }
        let reps = std::mem::take(&mut per_method[k]);
        let mut hist = vec![0usize; n_classes + 1];
        reps.iter().for_each(|o| hist[o.tp.min(n_classes)] += 1);
        let fps: Vec<f64> = reps.iter().map(|o| o.fp as f64).collect();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let train: Vec<f64> = reps.iter().map(|o| o.train_error).collect();
        let test: Vec<f64> = reps.iter().filter_map(|o| o.test_error).collect();
        let r2: Vec<f64> = reps.iter().filter_map(|o| o.r2).collect();
        let sizes: Vec<f64> = reps.iter().map(|o| o.selected.len() as f64).collect();
        out.push(MethodMetrics {
            method: m,
            completed: reps.len(),
            failures: failures[k],
            tp_distribution: hist,
            tp_mean: mean(&reps.iter().map(|o| o.tp as f64).collect::<Vec<_>>()),
            fp_mean: mean(&fps),
            fp_sd: sd(&fps),
            selected_mean: mean(&sizes),
            zero_selected: reps.iter().filter(|o| o.selected.is_empty()).count(),
            train_error_mean: mean(&train),
            train_error_median: if train.is_empty() { 0.0 } else { median(&train) },
            test_error_mean: (!test.is_empty()).then(|| mean(&test)),
            r2_median: (!r2.is_empty()).then(|| median(&r2)),
            reps,
        });
    }
    Ok(ScenarioMetrics {
        scenario: spec.name.clone(),
        family: spec.family,
        n_reps: spec.n_reps,
        intercept,
        coefficients,
        achieved_snr,
        methods: out,
    })
}

/// One CSV row per method.
pub fn write_metrics_csv<W: Write>(metrics: &ScenarioMetrics, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "scenario",
        "method",
        "completed",
        "failures",
        "tp_mean",
        "tp_distribution",
        "fp_mean",
        "fp_sd",
        "selected_mean",
        "zero_selected",
        "train_error_mean",
        "train_error_median",
        "test_error_mean",
        "r2_median",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for m in &metrics.methods {
        let hist: Vec<String> = m.tp_distribution.iter().map(|c| c.to_string()).collect();
        w.write_record([
            metrics.scenario.clone(),
            m.method.name().to_string(),
            m.completed.to_string(),
            m.failures.to_string(),
            format!("{}", m.tp_mean),
            hist.join(";"),
            format!("{}", m.fp_mean),
            format!("{}", m.fp_sd),
            format!("{}", m.selected_mean),
            m.zero_selected.to_string(),
            format!("{}", m.train_error_mean),
            format!("{}", m.train_error_median),
            opt(m.test_error_mean),
            opt(m.r2_median),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn scoring_rules() {
        let classes = vec![vec![0, 1], vec![5]];
        assert_eq!(score_selection(&[0, 1], &classes[..1]), (1, 1));
        assert_eq!(score_selection(&[1, 5], &classes), (2, 0));
        assert_eq!(score_selection(&[], &[]), (0, 0));
        assert_eq!(score_selection(&[7, 0], &classes), (1, 1));
        assert_eq!(score_selection(&[0, 7], &classes), score_selection(&[7, 0], &classes));
    }

    #[test]
    fn gaussian_calibration_closed_form() {
        // Var(x) = 4 (population variance of -2, 2)
        let x = ColumnMatrix::from_columns(&[vec![-2.0, 2.0, -2.0, 2.0]]).unwrap();
        let b = calibrate_snr(&x, &[1.0], 0.0, Family::Gaussian, 3.0).unwrap();
        assert!((b[0] - (0.75f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_direction_has_zero_snr() {
        let x = ColumnMatrix::from_columns(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(signal_to_noise(&x, &[0.0], -0.8, Family::Binomial), 0.0);
    }

    #[test]
    fn binomial_calibration_hits_target() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut x = ColumnMatrix::from_view(
            generate_design(&GeneratorSpec { n: 200, p: 5, ..Default::default() }, &mut r)
                .unwrap()
                .view(),
        );
        x.center();
        let dir = [1.0, 0.0, 0.0, 0.0, 0.0];
        for target in [0.7, 1.0, 3.0] {
            let b = calibrate_snr(&x, &dir, default_intercept(Family::Binomial), Family::Binomial, target).unwrap();
            let s = signal_to_noise(&x, &b, default_intercept(Family::Binomial), Family::Binomial);
            assert!((s - target).abs() <= 0.01 * target);
        }
    }

    #[test]
    fn surrogate_pair_is_highly_correlated() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let g = GeneratorSpec {
            n: 300,
            p: 20,
            surrogate_pairs: vec![[0, 1]],
            ..Default::default()
        };
        let x = generate_design(&g, &mut r).unwrap();
        let (a, b) = (x.column(0), x.column(1));
        let (ma, mb) = (a.mean().unwrap(), b.mean().unwrap());
        let cov: f64 = a.iter().zip(b.iter()).map(|(u, v)| (u - ma) * (v - mb)).sum();
        let va: f64 = a.iter().map(|u| (u - ma) * (u - ma)).sum();
        let vb: f64 = b.iter().map(|v| (v - mb) * (v - mb)).sum();
        assert!(cov / (va * vb).sqrt() > 0.98);
        for row in x.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn config_parses_from_toml() {
        let s = ScenarioSpec::from_toml_str(
            r#"
name = "s1"
family = "binomial"
true_vars = [[0, -1.0]]
target_snr = 3.0
equivalence_classes = [[0, 1]]
n_reps = 10
methods = ["surf", "lasso"]

[generator]
n = 80
p = 40
surrogate_pairs = [[0, 1]]

[ranking]
B = 20

[forward]
n_perm = 100
"#,
        )
        .unwrap();
        assert_eq!(s.ranking.b, 20);
        assert_eq!(s.forward.n_perm, 100);
        assert_eq!(s.generator.p, 40);
        assert_eq!(s.truth_classes(), vec![vec![0, 1]]);
        assert!(ScenarioSpec::from_toml_str("bogus_key = 1").is_err());
    }

    #[test]
    fn zero_reps_give_empty_metrics() {
        let spec = ScenarioSpec {
            n_reps: 0,
            generator: GeneratorSpec { n: 30, p: 10, ..Default::default() },
            ..Default::default()
        };
        let m = run_scenario(&spec, &[Method::Surf]).unwrap();
        assert_eq!(m.methods[0].completed, 0);
        assert_eq!(m.methods[0].tp_distribution.iter().sum::<usize>(), 0);
    }
}
