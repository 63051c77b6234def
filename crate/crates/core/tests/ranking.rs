mod common;

use proptest::prelude::*;
use surf_core::lasso::{cv_lasso, LassoOptions, SUPPORT_TOL};
use surf_core::ranking::{rank_variables, subsample_indices, RankingConfig};
use surf_core::rng::{derive_seed, stream, tag};
use surf_core::{ColumnMatrix, Family, GlmSpec};

fn columns(x: &ndarray::Array2<f64>) -> ColumnMatrix {
    ColumnMatrix::from_view(x.view())
}

#[test]
fn a_deterministic_response_is_always_selected() {
    let mut r = common::rng(1);
    let x = common::normal_matrix(&mut r, 60, 8);
    let y: Vec<f64> = x.column(3).to_vec();
    let cfg = RankingConfig { b: 50, seed: 4, ..Default::default() };
    let ranking = rank_variables(&columns(&x), &y, &GlmSpec::gaussian(), &cfg).unwrap();
    assert_eq!(ranking.frequency[3], 50);
    assert_eq!(ranking.order[0], 3);
    assert_eq!(ranking.completed, 50);
}

#[test]
fn single_subsample_frequencies_are_the_lasso_active_set() {
    let (x, y) = common::random_instance(Family::Binomial, 17, 80, 12);
    let cfg = RankingConfig { b: 1, seed: 21, shuffle_coordinates: false, ..Default::default() };
    let ranking = rank_variables(&columns(&x), &y, &GlmSpec::binomial(), &cfg).unwrap();
    assert_eq!(ranking.completed, 1);
    assert!(ranking.frequency.iter().all(|&f| f <= 1));
    let chosen: Vec<usize> = (0..12).filter(|&j| ranking.frequency[j] == 1).collect();
    // everything selected ranks ahead of everything not selected
    for (pos, &j) in ranking.order.iter().enumerate() {
        assert_eq!(pos < chosen.len(), chosen.contains(&j));
    }
}

#[test]
fn frequencies_count_the_independent_refits() {
    // replay each subsample outside the ranking and count selections
    let (x, y) = common::random_instance(Family::Gaussian, 40, 50, 10);
    let cm = columns(&x);
    let cfg = RankingConfig { b: 6, seed: 9, shuffle_coordinates: false, ..Default::default() };
    let ranking = rank_variables(&cm, &y, &GlmSpec::gaussian(), &cfg).unwrap();
    let mut counts = vec![0usize; 10];
    for b in 0..6u64 {
        let mut r = stream(cfg.seed, &[tag::RANKING, b]);
        let rows = subsample_indices(50, cfg.fraction, None, &mut r).unwrap();
        let sub = cm.select_rows(&rows);
        let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let fold_seed = derive_seed(cfg.seed, &[tag::RANKING, b, tag::FOLDS]);
        let (fit, cv) = cv_lasso(&sub, &ys, Family::Gaussian, cfg.cv_folds, fold_seed, &LassoOptions { tol: SUPPORT_TOL, ..Default::default() })
            .unwrap();
        for j in fit.active_at(cv.index_1se) {
            counts[j] += 1;
        }
    }
    assert_eq!(ranking.frequency, counts);
}

#[test]
fn worker_count_does_not_change_the_ranking() {
    let (x, y) = common::random_instance(Family::Binomial, 3, 70, 15);
    let cm = columns(&x);
    let cfg = RankingConfig { b: 20, seed: 2, ..Default::default() };
    let run = |t: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .unwrap()
            .install(|| rank_variables(&cm, &y, &GlmSpec::binomial(), &cfg).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(2));
    assert_eq!(one, run(8));
}

#[test]
fn duplicated_columns_are_never_selected_together() {
    let (x, y) = common::random_instance(Family::Gaussian, 12, 60, 6);
    let mut cols: Vec<Vec<f64>> = x.columns().into_iter().map(|c| c.to_vec()).collect();
    cols.push(cols[0].clone());
    let cm = ColumnMatrix::from_columns(&cols).unwrap();
    let cfg = RankingConfig { b: 30, seed: 1, ..Default::default() };
    let ranking = rank_variables(&cm, &y, &GlmSpec::gaussian(), &cfg).unwrap();
    assert!(ranking.frequency[0] + ranking.frequency[6] <= 30);
    assert!(ranking.frequency[0] > 0 && ranking.frequency[6] > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn order_is_a_permutation_sorted_by_frequency(seed in 0u64..1000, fam in 0usize..3) {
        let family = [Family::Gaussian, Family::Binomial, Family::Poisson][fam];
        let (x, y) = common::random_instance(family, seed, 50, 9);
        let cfg = RankingConfig { b: 5, seed, ..Default::default() };
        let ranking = rank_variables(&columns(&x), &y, &GlmSpec::new(family), &cfg).unwrap();
        let mut sorted = ranking.order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..9).collect::<Vec<_>>());
        for w in ranking.order.windows(2) {
            prop_assert!(ranking.frequency[w[0]] >= ranking.frequency[w[1]]);
        }
        prop_assert!(ranking.frequency.iter().all(|&f| f <= ranking.completed));
        prop_assert_eq!(ranking.completed + ranking.skipped, 5);
    }
}
