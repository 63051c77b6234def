mod common;

use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;
use surf_core::glm::{fit_glm, log_likelihood_ratio};
use surf_core::{Family, GlmSpec};

fn family_of(k: u8) -> Family {
    [Family::Gaussian, Family::Binomial, Family::Poisson][k as usize % 3]
}

fn instance(family: Family, seed: u64, n: usize, p: usize) -> (Array2<f64>, Array1<f64>) {
    let (x, y) = common::random_instance(family, seed, n, p);
    (x, Array1::from(y))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn adding_a_column_never_increases_deviance(seed in 0u64..10_000, fam in 0u8..3, k in 1usize..5) {
        let family = family_of(fam);
        let (x, y) = instance(family, seed, 40, 5);
        let spec = GlmSpec::new(family);
        let small = fit_glm(x.slice(ndarray::s![.., ..k - 1]).view(), y.view(), &spec).unwrap();
        let big = fit_glm(x.slice(ndarray::s![.., ..k]).view(), y.view(), &spec).unwrap();
        prop_assert!(big.deviance <= small.deviance + 1e-6);
        prop_assert!(log_likelihood_ratio(&small, &big, 40).unwrap() >= 0.0);
    }

    #[test]
    fn score_equations_hold(seed in 0u64..10_000, fam in 0u8..3) {
        let family = family_of(fam);
        let (x, y) = instance(family, seed, 60, 3);
        let fit = fit_glm(x.view(), y.view(), &GlmSpec::new(family)).unwrap();
        prop_assume!(fit.converged);
        let eta: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| fit.intercept + r.iter().zip(&fit.coefficients).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let resid: Vec<f64> = eta.iter().zip(y.iter()).map(|(&e, &yi)| yi - family.mean(e)).collect();
        prop_assert!(resid.iter().sum::<f64>().abs() < 1e-6);
        for c in x.columns() {
            let s: f64 = c.iter().zip(&resid).map(|(a, b)| a * b).sum();
            prop_assert!(s.abs() < 1e-6, "score {}", s);
        }
    }

    #[test]
    fn gaussian_fit_matches_normal_equations(seed in 0u64..10_000, p in 1usize..6) {
        let (x, y) = instance(Family::Gaussian, seed, 30, p);
        let fit = fit_glm(x.view(), y.view(), &GlmSpec::gaussian()).unwrap();
        let (b0, beta, rss) = common::ols(&x, y.as_slice().unwrap());
        prop_assert!((fit.intercept - b0).abs() <= 1e-8 * (1.0 + b0.abs()));
        for (a, b) in fit.coefficients.iter().zip(&beta) {
            prop_assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()));
        }
        prop_assert!((fit.deviance - rss).abs() <= 1e-8 * (1.0 + rss));
    }
}

#[test]
fn duplicated_column_is_dropped_not_fatal() {
    let (x, y) = instance(Family::Binomial, 4, 50, 2);
    let mut wide = Array2::zeros((50, 3));
    wide.slice_mut(ndarray::s![.., ..2]).assign(&x);
    wide.column_mut(2).assign(&x.column(0).mapv(|v| 3.0 * v));
    let fit = fit_glm(wide.view(), y.view(), &GlmSpec::binomial()).unwrap();
    let reduced = fit_glm(x.view(), y.view(), &GlmSpec::binomial()).unwrap();
    assert_eq!(fit.dropped, vec![2]);
    assert_eq!(fit.coefficients[2], 0.0);
    assert!((fit.deviance - reduced.deviance).abs() < 1e-8 * reduced.deviance);
}

#[test]
fn row_order_does_not_change_the_fit() {
    let (x, y) = instance(Family::Poisson, 8, 40, 3);
    let order: Vec<usize> = (0..40).rev().collect();
    let xr = x.select(Axis(0), &order);
    let yr: Array1<f64> = order.iter().map(|&i| y[i]).collect();
    let a = fit_glm(x.view(), y.view(), &GlmSpec::poisson()).unwrap();
    let b = fit_glm(xr.view(), yr.view(), &GlmSpec::poisson()).unwrap();
    assert!((a.deviance - b.deviance).abs() < 1e-9 * (1.0 + a.deviance));
    for (u, v) in a.coefficients.iter().zip(&b.coefficients) {
        assert!((u - v).abs() < 1e-7);
    }
}
