//! Stability-selection baseline: lasso selection frequency over half-size
//! subsamples, each subsample's selection truncated to `q` variables.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::ColumnMatrix;
use crate::error::{Result, SurfError};
use crate::glm::{Family, GlmSpec};
use crate::lasso::{fit_path, LassoOptions, SUPPORT_TOL};
use crate::ranking::{binary_strata, subsample_indices, MAX_SKIPPED_FRACTION};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    /// Selection threshold on the frequency, in (0.5, 1].
    pub cutoff: f64,
    /// Bound on the expected number of falsely selected variables.
    pub ewv_bound: f64,
    #[serde(rename = "B")]
    pub b: usize,
    pub seed: u64,
    pub fraction: f64,
    pub shuffle_coordinates: bool,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            cutoff: 0.6,
            ewv_bound: 1.0,
            b: 100,
            seed: 0,
            fraction: 0.5,
            shuffle_coordinates: true,
        }
    }
}

impl StabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.5 && self.cutoff <= 1.0) {
            return Err(SurfError::InvalidConfig(format!(
                "cutoff must lie in (0.5, 1], got {}",
                self.cutoff
            )));
        }
        if !(self.ewv_bound > 0.0 && self.ewv_bound.is_finite()) {
            return Err(SurfError::InvalidConfig("ewv_bound must be positive".into()));
        }
        if self.b < 1 {
            return Err(SurfError::InvalidConfig("B must be at least 1".into()));
        }
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(SurfError::InvalidConfig("fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Per-subsample selection budget `floor(sqrt(ewv (2 cutoff - 1) p))`.
    pub fn max_selected(&self, p: usize) -> Result<usize> {
        let q = ((self.ewv_bound * (2.0 * self.cutoff - 1.0) * p as f64).sqrt() + 1e-9).floor() as usize;
        if q < 1 {
            return Err(SurfError::InvalidConfig(format!(
                "bound too tight for p = {p}: per-subsample budget is 0"
            )));
        }
        Ok(q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    pub selected: Vec<usize>,
    /// Fraction of completed subsamples selecting each column.
    pub frequency: Vec<f64>,
    pub q: usize,
    pub completed: usize,
    pub skipped: usize,
}

impl StabilityResult {
    /// Columns whose frequency reaches `cutoff`.
    pub fn at_cutoff(&self, cutoff: f64) -> Vec<usize> {
        self.frequency
            .iter()
            .enumerate()
            .filter(|(_, &f)| f >= cutoff - 1e-12)
            .map(|(j, _)| j)
            .collect()
    }
}

pub fn stability_select(
    x: &ColumnMatrix,
    y: &[f64],
    spec: &GlmSpec,
    config: &StabilityConfig,
) -> Result<StabilityResult> {
    config.validate()?;
    let (n, p) = (x.nrows(), x.ncols());
    if n < 4 {
        return Err(SurfError::DimensionMismatch(format!(
            "stability selection needs at least 4 observations, got {n}"
        )));
    }
    if y.len() != n {
        return Err(SurfError::DimensionMismatch(format!(
            "design has {n} rows, response has {}",
            y.len()
        )));
    }
    x.check_finite()?;
    spec.family.validate_response(y)?;
    let q = config.max_selected(p)?;
    let strata = (spec.family == Family::Binomial).then(|| binary_strata(y));

    let runs: Vec<Result<Option<Vec<usize>>>> = (0..config.b)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(config.seed, &[tag::STABILITY, b as u64]);
            let idx = subsample_indices(n, config.fraction, strata.as_deref(), &mut r)?;
            let mut opts = LassoOptions {
                max_active: Some(q),
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
            match fit_path(&xs, &ys, spec.family, None, &opts) {
                Ok(fit) => {
                    // smallest lambda whose active set fits the budget
                    let chosen = (0..fit.n_fitted())
                        .rev()
                        .map(|k| fit.active_at(k))
                        .find(|a| a.len() <= q)
                        .unwrap_or_default();
                    Ok(Some(chosen))
                }
                Err(SurfError::DegenerateResponse(_)) | Err(SurfError::Numerical(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut counts = vec![0usize; p];
    let mut skipped = 0;
    for run in runs {
        match run? {
            Some(active) => active.into_iter().for_each(|j| counts[j] += 1),
            None => skipped += 1,
        }
    }
    if skipped as f64 > MAX_SKIPPED_FRACTION * config.b as f64 {
        return Err(SurfError::TooManyFailures(format!(
            "{skipped} of {} stability subsamples could not be fitted",
            config.b
        )));
    }
    let completed = config.b - skipped;
    let frequency: Vec<f64> = counts.iter().map(|&c| c as f64 / completed as f64).collect();
    let mut result = StabilityResult {
        selected: Vec::new(),
        frequency,
        q,
        completed,
        skipped,
    };
    result.selected = result.at_cutoff(config.cutoff);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_formula() {
        let c = StabilityConfig {
            cutoff: 0.6,
            ..Default::default()
        };
        assert_eq!(c.max_selected(100).unwrap(), 4);
        let c = StabilityConfig {
            cutoff: 0.51,
            ewv_bound: 0.1,
            ..Default::default()
        };
        assert!(c.max_selected(10).is_err());
    }

    #[test]
    fn cutoff_bounds() {
        for cutoff in [0.5, 1.01] {
            let c = StabilityConfig {
                cutoff,
                ..Default::default()
            };
            assert!(c.validate().is_err());
        }
    }
}
