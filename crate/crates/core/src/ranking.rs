//! Variable ranking by lasso selection frequency over subsamples.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::ColumnMatrix;
use crate::error::{Result, SurfError};
use crate::glm::{fit_glm_columns, fit_glm_columns_from, Family, FitOptions, GlmSpec};
use crate::lasso::{cv_lasso, LambdaRule, LassoOptions, SUPPORT_TOL};
use crate::rng::{self, tag};

/// Largest fraction of subsamples that may fail before ranking gives up.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;

/// Base-model deviance (relative to the null deviance) below which every
/// further deviance reduction is treated as zero.
const SATURATION_REL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankingConfig {
    #[serde(rename = "B")]
    pub b: usize,
    pub fraction: f64,
    /// Stratify subsamples by class; defaults to true for binomial responses.
    pub stratified: Option<bool>,
    pub lambda_rule: LambdaRule,
    pub seed: u64,
    pub cv_folds: usize,
    /// Visit lasso coordinates in a fresh random order on each subsample so
    /// exact duplicate columns share selections instead of the first always
    /// winning.
    pub shuffle_coordinates: bool,
}

impl Default for RankingConfig {
    fn default() -> Self {
        RankingConfig {
            b: 250,
            fraction: 0.9,
            stratified: None,
            lambda_rule: LambdaRule::OneSe,
            seed: 0,
            cv_folds: 5,
            shuffle_coordinates: true,
        }
    }
}

impl RankingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b < 1 {
            return Err(SurfError::InvalidConfig("B must be at least 1".into()));
        }
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(SurfError::InvalidConfig(format!(
                "subsample fraction must lie in (0, 1), got {}",
                self.fraction
            )));
        }
        if self.cv_folds < 2 {
            return Err(SurfError::InvalidConfig("cv_folds must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableRanking {
    /// Column indices, best first.
    pub order: Vec<usize>,
    /// Number of completed subsamples selecting each column.
    pub frequency: Vec<usize>,
    /// Deviance reduction used to order each column within its frequency
    /// group (0 for singleton groups and saturated models).
    pub tie_break: Vec<f64>,
    pub completed: usize,
    pub skipped: usize,
}

impl VariableRanking {
    /// 0-based position of `column` in `order`.
    pub fn rank_of(&self, column: usize) -> Option<usize> {
        self.order.iter().position(|&c| c == column)
    }
}

/// Class label per observation for stratified subsampling of a binary response.
pub fn binary_strata(y: &[f64]) -> Vec<usize> {
    y.iter().map(|&v| usize::from(v != 0.0)).collect()
}

/// Draws a subsample without replacement, sorted ascending.
///
/// With `strata`, each class contributes `round(fraction * class size)`
/// observations; a class rounding to zero is an error.
pub fn subsample_indices(
    n: usize,
    fraction: f64,
    strata: Option<&[usize]>,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SurfError::InvalidConfig(format!(
            "subsample fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut out = Vec::new();
    match strata {
        None => {
            let m = (fraction * n as f64).round() as usize;
            if m == 0 {
                return Err(SurfError::StratumTooSmall(format!(
                    "fraction {fraction} of {n} observations is empty"
                )));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            out.extend_from_slice(&idx[..m]);
        }
        Some(s) => {
            if s.len() != n {
                return Err(SurfError::DimensionMismatch(format!(
                    "{} stratum labels for {n} observations",
                    s.len()
                )));
            }
            let mut classes: Vec<usize> = s.to_vec();
            classes.sort_unstable();
            classes.dedup();
            for c in classes {
                let mut members: Vec<usize> = (0..n).filter(|&i| s[i] == c).collect();
                let m = (fraction * members.len() as f64).round() as usize;
                if m == 0 {
                    return Err(SurfError::StratumTooSmall(format!(
                        "class {c} has {} observations; fraction {fraction} allocates none",
                        members.len()
                    )));
                }
                members.shuffle(rng);
                out.extend_from_slice(&members[..m]);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

fn recoverable(e: &SurfError) -> bool {
    matches!(e, SurfError::DegenerateResponse(_) | SurfError::Numerical(_))
}

/// Ranks the columns of `x` by how often cross-validated lasso selects them
/// on `config.b` subsamples.
pub fn rank_variables(
    x: &ColumnMatrix,
    y: &[f64],
    spec: &GlmSpec,
    config: &RankingConfig,
) -> Result<VariableRanking> {
    config.validate()?;
    let (n, p) = (x.nrows(), x.ncols());
    if p == 0 {
        return Err(SurfError::DimensionMismatch("design has no columns".into()));
    }
    if y.len() != n {
        return Err(SurfError::DimensionMismatch(format!(
            "design has {n} rows, response has {}",
            y.len()
        )));
    }
    x.check_finite()?;
    spec.family.validate_response(y)?;
    let stratified = config.stratified.unwrap_or(spec.family == Family::Binomial);
    if stratified && spec.family != Family::Binomial {
        return Err(SurfError::InvalidConfig(
            "stratified subsampling needs a binomial response".into(),
        ));
    }
    let strata = stratified.then(|| binary_strata(y));

    let runs: Vec<Result<Option<Vec<usize>>>> = (0..config.b)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(config.seed, &[tag::RANKING, b as u64]);
            let idx = subsample_indices(n, config.fraction, strata.as_deref(), &mut r)?;
            let mut opts = LassoOptions {
                tol: SUPPORT_TOL,
                ..Default::default()
            };
            if config.shuffle_coordinates {
                let mut order: Vec<usize> = (0..p).collect();
                order.shuffle(&mut r);
                opts.coordinate_order = Some(order);
            }
            let xs = x.select_rows(&idx);
            let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let fold_seed = rng::derive_seed(config.seed, &[tag::RANKING, b as u64, tag::FOLDS]);
            match cv_lasso(&xs, &ys, spec.family, config.cv_folds, fold_seed, &opts) {
                Ok((fit, cv)) => Ok(Some(fit.active_at(cv.chosen_index(config.lambda_rule)))),
                Err(e) if recoverable(&e) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut frequency = vec![0usize; p];
    let mut skipped = 0;
    for run in runs {
        match run? {
            Some(active) => active.into_iter().for_each(|j| frequency[j] += 1),
            None => skipped += 1,
        }
    }
    if skipped as f64 > MAX_SKIPPED_FRACTION * config.b as f64 {
        return Err(SurfError::TooManyFailures(format!(
            "{skipped} of {} subsamples could not be fitted",
            config.b
        )));
    }
    let (order, tie_break) = tie_break_order(x, y, spec, &frequency)?;
    Ok(VariableRanking {
        order,
        frequency,
        tie_break,
        completed: config.b - skipped,
        skipped,
    })
}

/// Orders columns by descending `frequency`. Within a group of equal
/// frequency, columns are taken greedily by the deviance reduction they give
/// when added alone to the GLM holding every column already ranked; exact
/// ties go to the lower index.
///
/// Returns the order and the reduction recorded for each column.
pub fn tie_break_order(
    x: &ColumnMatrix,
    y: &[f64],
    spec: &GlmSpec,
    frequency: &[usize],
) -> Result<(Vec<usize>, Vec<f64>)> {
    let p = x.ncols();
    let n = x.nrows();
    let mut groups: Vec<usize> = frequency.to_vec();
    groups.sort_unstable_by(|a, b| b.cmp(a));
    groups.dedup();

    let opts = FitOptions::default();
    let null = fit_glm_columns(&[], y, spec, &opts)?;
    let null_dev = null.deviance;
    let mut order: Vec<usize> = Vec::with_capacity(p);
    let mut reduction = vec![0.0; p];
    let mut base = null;
    let mut saturated = null_dev <= 0.0;

    for f in groups {
        let mut pending: Vec<usize> = (0..p).filter(|&j| frequency[j] == f).collect();
        while !pending.is_empty() {
            if pending.len() == 1 || saturated {
                order.append(&mut pending);
                break;
            }
            let cols: Vec<&[f64]> = order.iter().map(|&j| x.col(j)).collect();
            let eta = base.linear_predictor(&cols);
            let devs: Vec<f64> = pending
                .par_iter()
                .map(|&j| {
                    let mut c = cols.clone();
                    c.push(x.col(j));
                    fit_glm_columns_from(&c, y, spec, &opts, Some(&eta))
                        .map(|fit| (base.deviance - fit.deviance).max(0.0))
                        .unwrap_or(0.0)
                })
                .collect();
            let mut best = 0;
            for k in 1..devs.len() {
                if devs[k] > devs[best] {
                    best = k;
                }
            }
            let j = pending.remove(best);
            reduction[j] = devs[best];
            order.push(j);
            let cols: Vec<&[f64]> = order.iter().map(|&j| x.col(j)).collect();
            base = fit_glm_columns_from(&cols, y, spec, &opts, Some(&eta))?;
            let rank = order.len() - base.dropped.len();
            saturated = base.deviance <= SATURATION_REL * null_dev || rank + 1 >= n;
        }
    }
    Ok((order, reduction))
}
