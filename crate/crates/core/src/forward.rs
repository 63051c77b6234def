//! Forward selection over a ranked candidate list, with each step's
//! critical value taken from a row-permutation null of the maximum
//! likelihood-ratio statistic.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::ColumnMatrix;
use crate::error::{Result, SurfError};
use crate::glm::{fit_glm_columns, fit_glm_columns_from, log_likelihood_ratio, FitOptions, GlmFit, GlmSpec};
use crate::ranking::VariableRanking;
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardConfig {
    pub alpha: f64,
    pub n_perm: usize,
    /// Defaults to `min(n / 2, 50)`.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        ForwardConfig {
            alpha: 0.05,
            n_perm: 200,
            max_steps: None,
            seed: 0,
        }
    }
}

impl ForwardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(SurfError::InvalidConfig(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if (self.n_perm as f64) * self.alpha < 1.0 - 1e-9 {
            return Err(SurfError::InvalidConfig(format!(
                "{} permutations cannot resolve alpha = {}; need at least {}",
                self.n_perm,
                self.alpha,
                (1.0 / self.alpha).ceil()
            )));
        }
        Ok(())
    }

    pub fn effective_max_steps(&self, n: usize) -> usize {
        self.max_steps.unwrap_or((n / 2).min(50))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub variable: usize,
    pub llr: f64,
    pub critical_value: f64,
    pub p_value: f64,
    /// Maximum statistic of each permutation draw, in draw order.
    pub null_stats: Vec<f64>,
    /// Candidates whose fit failed on the observed data and were scored 0.
    pub failed_candidates: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub steps: Vec<SelectionStep>,
    /// Null draws of the step that ended the search (empty when the
    /// candidate list ran out or the step cap was hit).
    pub terminal_null_stats: Vec<f64>,
    pub terminal_critical_value: Option<f64>,
    /// Best remaining candidate at termination and its permutation p-value.
    /// Reported for information; it played no part in the decision.
    pub terminal_candidate: Option<usize>,
    pub terminal_p_value: Option<f64>,
    pub hit_max_steps: bool,
    pub final_model: GlmFit,
}

impl SelectionResult {
    pub fn selected(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.variable).collect()
    }
}

/// Order statistic at 1-based index `ceil(level * m)` of `values`.
pub fn quantile_upper(values: &[f64], level: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    // the guard keeps 0.95 * 200 from rounding up to 191
    let k = ((level * m as f64) - 1e-9).ceil().clamp(1.0, m as f64) as usize;
    v[k - 1]
}

/// Permutation p-value `(1 + #{null >= stat}) / (m + 1)`.
pub fn permutation_p_value(null_stats: &[f64], stat: f64) -> f64 {
    let exceed = null_stats.iter().filter(|&&s| s >= stat).count();
    (1 + exceed) as f64 / (null_stats.len() + 1) as f64
}

/// Upper bound `2p exp(-x/2) / sqrt(2 pi x)` on the survival function of the
/// maximum of `p` null one-degree-of-freedom deviance statistics.
pub fn max_llr_survival_bound(x: f64, p: usize) -> f64 {
    2.0 * p as f64 * (-x / 2.0).exp() / (2.0 * std::f64::consts::PI * x).sqrt()
}

/// Bonferroni-type ceiling `-2 log(alpha / 2p)` on the critical value.
pub fn critical_value_ceiling(alpha: f64, p: usize) -> f64 {
    -2.0 * (alpha / (2.0 * p as f64)).ln()
}

/// Fit of the current model (intercept plus `selected`).
pub fn fit_current(x: &ColumnMatrix, y: &[f64], spec: &GlmSpec, selected: &[usize]) -> Result<GlmFit> {
    let cols: Vec<&[f64]> = selected.iter().map(|&j| x.col(j)).collect();
    fit_glm_columns(&cols, y, spec, &FitOptions::default())
}

/// Likelihood-ratio statistic of `current + candidate` against `current`
/// for each candidate, with candidate rows reordered by `perm` when given.
/// The flag marks candidates whose fit failed (statistic set to 0).
pub fn candidate_llrs(
    x: &ColumnMatrix,
    y: &[f64],
    spec: &GlmSpec,
    current: &GlmFit,
    selected: &[usize],
    candidates: &[usize],
    perm: Option<&[usize]>,
) -> Vec<(f64, bool)> {
    let n = y.len();
    let base: Vec<&[f64]> = selected.iter().map(|&j| x.col(j)).collect();
    let eta = current.linear_predictor(&base);
    let opts = FitOptions::default();
    let mut buf = vec![0.0; n];
    let mut out = Vec::with_capacity(candidates.len());
    for &j in candidates {
        let c = x.col(j);
        let col: &[f64] = match perm {
            Some(p) => {
                for (b, &pi) in buf.iter_mut().zip(p) {
                    *b = c[pi];
                }
                &buf
            }
            None => c,
        };
        let mut cols = base.clone();
        cols.push(col);
        let r = fit_glm_columns_from(&cols, y, spec, &opts, Some(&eta))
            .and_then(|alt| log_likelihood_ratio(current, &alt, n));
        out.push(match r {
            Ok(d) => (d, false),
            Err(_) => (0.0, true),
        });
    }
    out
}

/// Maximum candidate statistic after one joint row permutation of all
/// candidate columns (selected columns and response unchanged).
pub fn max_llr_under_permutation(
    x: &ColumnMatrix,
    y: &[f64],
    spec: &GlmSpec,
    current: &GlmFit,
    selected: &[usize],
    candidates: &[usize],
    perm: &[usize],
) -> f64 {
    candidate_llrs(x, y, spec, current, selected, candidates, Some(perm))
        .into_iter()
        .map(|(d, _)| d)
        .fold(0.0, f64::max)
}

/// `n_perm` draws of the permutation null of the maximum statistic for
/// forward-selection step `step`. Draw `d` uses its own random stream, so the
/// result does not depend on scheduling.
pub fn null_max_llr(
    x: &ColumnMatrix,
    y: &[f64],
    spec: &GlmSpec,
    selected: &[usize],
    candidates: &[usize],
    n_perm: usize,
    seed: u64,
    step: usize,
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(SurfError::InvalidConfig("no candidate variables".into()));
    }
    if let Some(j) = candidates.iter().find(|j| selected.contains(j)) {
        return Err(SurfError::InvalidConfig(format!(
            "candidate {j} is already selected"
        )));
    }
    let current = fit_current(x, y, spec, selected)?;
    let n = y.len();
    Ok((0..n_perm)
        .into_par_iter()
        .map(|d| {
            let mut r = rng::stream(seed, &[tag::FORWARD, step as u64, d as u64]);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut r);
            max_llr_under_permutation(x, y, spec, &current, selected, candidates, &perm)
        })
        .collect())
}

/// Sequential permutation-calibrated forward selection along `ranking`.
///
/// At each step the first candidate (in ranking order) whose statistic
/// exceeds the permutation critical value and whose p-value is at most
/// `alpha` is added; the search stops when no candidate qualifies.
pub fn forward_select(
    x: &ColumnMatrix,
    y: &[f64],
    spec: &GlmSpec,
    ranking: &VariableRanking,
    config: &ForwardConfig,
) -> Result<SelectionResult> {
    config.validate()?;
    let (n, p) = (x.nrows(), x.ncols());
    if y.len() != n {
        return Err(SurfError::DimensionMismatch(format!(
            "design has {n} rows, response has {}",
            y.len()
        )));
    }
    let mut seen = vec![false; p];
    for &j in &ranking.order {
        if j >= p || seen[j] {
            return Err(SurfError::InvalidConfig(
                "ranking is not a permutation of the design columns".into(),
            ));
        }
        seen[j] = true;
    }
    if ranking.order.len() != p {
        return Err(SurfError::InvalidConfig(format!(
            "ranking covers {} of {p} columns",
            ranking.order.len()
        )));
    }
    x.check_finite()?;
    spec.family.validate_response(y)?;

    let max_steps = config.effective_max_steps(n);
    let mut selected: Vec<usize> = Vec::new();
    let mut candidates: Vec<usize> = ranking.order.clone();
    let mut steps = Vec::new();
    let mut result_tail = (Vec::new(), None, None, None);
    let mut hit_max_steps = false;

    loop {
        if candidates.is_empty() {
            break;
        }
        if steps.len() >= max_steps {
            hit_max_steps = true;
            break;
        }
        let step = steps.len();
        let null = null_max_llr(x, y, spec, &selected, &candidates, config.n_perm, config.seed, step)?;
        let crit = quantile_upper(&null, 1.0 - config.alpha);
        let current = fit_current(x, y, spec, &selected)?;
        let observed = candidate_llrs(x, y, spec, &current, &selected, &candidates, None);
        let failed: Vec<usize> = candidates
            .iter()
            .zip(&observed)
            .filter(|(_, o)| o.1)
            .map(|(&j, _)| j)
            .collect();

        let pick = observed.iter().position(|&(d, _)| {
            d > crit && permutation_p_value(&null, d) <= config.alpha
        });
        match pick {
            Some(k) => {
                let d = observed[k].0;
                let variable = candidates.remove(k);
                selected.push(variable);
                steps.push(SelectionStep {
                    variable,
                    llr: d,
                    critical_value: crit,
                    p_value: permutation_p_value(&null, d),
                    null_stats: null,
                    failed_candidates: failed,
                });
            }
            None => {
                let mut best = 0;
                for k in 1..observed.len() {
                    if observed[k].0 > observed[best].0 {
                        best = k;
                    }
                }
                let p_best = permutation_p_value(&null, observed[best].0);
                result_tail = (null, Some(crit), Some(candidates[best]), Some(p_best));
                break;
            }
        }
    }

    let final_model = fit_current(x, y, spec, &selected)?;
    let (terminal_null_stats, terminal_critical_value, terminal_candidate, terminal_p_value) = result_tail;
    Ok(SelectionResult {
        steps,
        terminal_null_stats,
        terminal_critical_value,
        terminal_candidate,
        terminal_p_value,
        hit_max_steps,
        final_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_examples() {
        let v: Vec<f64> = (1..=200).map(f64::from).collect();
        assert_eq!(quantile_upper(&v, 0.95), 190.0);
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile_upper(&v, 0.5), 50.0);
        assert_eq!(quantile_upper(&[3.5; 7], 0.9), 3.5);
    }

    #[test]
    fn p_value_counts_ties() {
        let null = [1.0, 2.0, 3.0, 3.0];
        assert_eq!(permutation_p_value(&null, 3.0), 3.0 / 5.0);
        assert_eq!(permutation_p_value(&null, 10.0), 1.0 / 5.0);
    }

    #[test]
    fn ceiling_formula() {
        assert!((critical_value_ceiling(0.05, 1781) - 22.35).abs() < 0.01);
    }

    #[test]
    fn config_rejects_too_few_permutations() {
        let c = ForwardConfig {
            n_perm: 19,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ForwardConfig {
            n_perm: 20,
            ..Default::default()
        };
        assert!(c.validate().is_ok());
        assert_eq!(c.effective_max_steps(70), 35);
        assert_eq!(c.effective_max_steps(1000), 50);
    }
}
