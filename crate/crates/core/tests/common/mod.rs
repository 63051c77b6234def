//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use surf_core::Family;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(r: &mut impl Rng, n: usize, p: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, p), |_| r.sample(StandardNormal))
}

fn logistic(e: f64) -> f64 {
    1.0 / (1.0 + (-e).exp())
}

/// Response drawn from `family` with linear predictor `eta`.
pub fn draw_response(r: &mut impl Rng, family: Family, eta: &[f64]) -> Vec<f64> {
    eta.iter()
        .map(|&e| match family {
            Family::Gaussian => e + r.sample::<f64, _>(StandardNormal),
            Family::Binomial => (r.random::<f64>() < logistic(e)) as u8 as f64,
            Family::Poisson => Poisson::new(e.exp()).unwrap().sample(r),
        })
        .collect()
}

/// Random `n x p` instance with a sparse signal on the first three columns.
pub fn random_instance(family: Family, seed: u64, n: usize, p: usize) -> (Array2<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let x = normal_matrix(&mut r, n, p);
    let scale = match family {
        Family::Gaussian => 1.0,
        Family::Binomial => 0.8,
        Family::Poisson => 0.3,
    };
    let eta: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|row| {
            let signal: f64 = [1.0, -0.7, 0.5].iter().zip(row.iter()).map(|(b, v)| b * v).sum();
            scale * signal + if family == Family::Poisson { 0.5 } else { 0.0 }
        })
        .collect();
    let y = draw_response(&mut r, family, &eta);
    (x, y)
}

/// Columns centred and scaled to unit (1/n) variance.
pub fn standardize(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows() as f64;
    let mut z = x.clone();
    for mut c in z.columns_mut() {
        let m = c.sum() / n;
        let sd = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
        c.mapv_inplace(|v| (v - m) / sd);
    }
    z
}

fn mean_fn(family: Family, e: f64) -> f64 {
    match family {
        Family::Gaussian => e,
        Family::Binomial => logistic(e),
        Family::Poisson => e.exp(),
    }
}

/// Average negative log-likelihood (up to constants): half the mean deviance.
fn loss(family: Family, y: &[f64], eta: &[f64]) -> f64 {
    let n = y.len() as f64;
    y.iter()
        .zip(eta)
        .map(|(&yi, &e)| match family {
            Family::Gaussian => 0.5 * (yi - e) * (yi - e),
            Family::Binomial => {
                let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
                softplus - yi * e
            }
            Family::Poisson => e.exp() - yi * e,
        })
        .sum::<f64>()
        / n
}

fn eta_of(z: &Array2<f64>, b0: f64, beta: &[f64]) -> Vec<f64> {
    z.rows()
        .into_iter()
        .map(|row| b0 + row.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// Gradient of the smooth loss: `(d/db0, d/dbeta)`.
pub fn loss_gradient(family: Family, z: &Array2<f64>, y: &[f64], b0: f64, beta: &[f64]) -> (f64, Vec<f64>) {
    let n = y.len() as f64;
    let eta = eta_of(z, b0, beta);
    let r: Vec<f64> = eta.iter().zip(y).map(|(&e, &yi)| mean_fn(family, e) - yi).collect();
    let g0 = r.iter().sum::<f64>() / n;
    let g = z
        .columns()
        .into_iter()
        .map(|c| c.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / n)
        .collect();
    (g0, g)
}

/// Minimises `loss + lambda |beta|_1` (intercept unpenalised) by
/// accelerated proximal gradient with backtracking and adaptive restart,
/// then polishes on the identified support with damped Newton steps.
pub fn proximal_gradient(family: Family, z: &Array2<f64>, y: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let fista = fista(family, z, y, lambda);
    let polished = newton_on_support(family, z, y, lambda, &fista);
    let res = |s: &(f64, Vec<f64>)| kkt_residual(family, z, y, lambda, s.0, &s.1);
    if res(&polished) < res(&fista) { polished } else { fista }
}

fn fista(family: Family, z: &Array2<f64>, y: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let p = z.ncols();
    let objective = |b0: f64, beta: &[f64]| {
        loss(family, y, &eta_of(z, b0, beta)) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    };
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let mut x0 = match family {
        Family::Gaussian => ybar,
        Family::Binomial => (ybar / (1.0 - ybar)).ln(),
        Family::Poisson => ybar.ln(),
    };
    let mut x = vec![0.0; p];
    let (mut v0, mut v) = (x0, x.clone());
    let mut t = 1.0f64;
    let mut step = 1.0f64;
    let mut f_old = objective(x0, &x);
    for _ in 0..200_000 {
        let (g0, g) = loss_gradient(family, z, y, v0, &v);
        let fv = loss(family, y, &eta_of(z, v0, &v));
        let (mut n0, mut nx);
        loop {
            n0 = v0 - step * g0;
            nx = v
                .iter()
                .zip(&g)
                .map(|(vi, gi)| {
                    let u = vi - step * gi;
                    u.signum() * (u.abs() - step * lambda).max(0.0)
                })
                .collect::<Vec<f64>>();
            let d0 = n0 - v0;
            let d: Vec<f64> = nx.iter().zip(&v).map(|(a, b)| a - b).collect();
            let quad = fv + g0 * d0 + d.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
                + (d0 * d0 + d.iter().map(|a| a * a).sum::<f64>()) / (2.0 * step);
            if loss(family, y, &eta_of(z, n0, &nx)) <= quad + 1e-15 {
                break;
            }
            step *= 0.5;
        }
        let f_new = objective(n0, &nx);
        let change = nx
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold((n0 - x0).abs(), f64::max);
        if change < 1e-13 {
            x0 = n0;
            x = nx;
            break;
        }
        if f_new > f_old && t > 1.0 {
            // restart momentum
            t = 1.0;
            v0 = x0;
            v = x.clone();
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let mom = (t - 1.0) / t_next;
        v0 = n0 + mom * (n0 - x0);
        v = nx.iter().zip(&x).map(|(a, b)| a + mom * (a - b)).collect();
        x0 = n0;
        x = nx;
        t = t_next;
        f_old = f_new;
    }
    (x0, x)
}

/// Newton's method on the smooth problem restricted to the support and
/// signs of `start`. Stops early, keeping the last iterate, if a step would
/// flip a sign.
fn newton_on_support(family: Family, z: &Array2<f64>, y: &[f64], lambda: f64, start: &(f64, Vec<f64>)) -> (f64, Vec<f64>) {
    let n = y.len();
    let support: Vec<usize> = (0..start.1.len()).filter(|&j| start.1[j] != 0.0).collect();
    let signs: Vec<f64> = support.iter().map(|&j| start.1[j].signum()).collect();
    let k = support.len() + 1;
    let objective = |b0: f64, beta: &[f64]| {
        loss(family, y, &eta_of(z, b0, beta)) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    };
    let (mut b0, mut beta) = start.clone();
    for _ in 0..100 {
        let eta = eta_of(z, b0, &beta);
        let (g0, g) = loss_gradient(family, z, y, b0, &beta);
        let mut grad = vec![g0];
        grad.extend(support.iter().zip(&signs).map(|(&j, s)| g[j] + lambda * s));
        let col = |c: usize, i: usize| if c == 0 { 1.0 } else { z[[i, support[c - 1]]] };
        let w: Vec<f64> = eta
            .iter()
            .map(|&e| match family {
                Family::Gaussian => 1.0,
                Family::Binomial => logistic(e) * (1.0 - logistic(e)),
                Family::Poisson => e.exp(),
            })
            .collect();
        let mut h = vec![vec![0.0; k]; k];
        for r in 0..k {
            for c in 0..=r {
                let v = (0..n).map(|i| w[i] * col(r, i) * col(c, i)).sum::<f64>() / n as f64;
                h[r][c] = v;
                h[c][r] = v;
            }
        }
        let d: Vec<f64> = solve(h, grad.iter().map(|g| -g).collect());
        if d.iter().any(|v| !v.is_finite()) {
            break;
        }
        let f0 = objective(b0, &beta);
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-10 {
            let nb0 = b0 + t * d[0];
            let mut nbeta = beta.clone();
            for (c, &j) in support.iter().enumerate() {
                nbeta[j] = beta[j] + t * d[c + 1];
            }
            let flips = support.iter().zip(&signs).any(|(&j, s)| nbeta[j] * s <= 0.0);
            if !flips && objective(nb0, &nbeta) <= f0 + 1e-16 * f0.abs() {
                accepted = Some((nb0, nbeta));
                break;
            }
            t *= 0.5;
        }
        let Some((nb0, nbeta)) = accepted else { break };
        let moved = (nb0 - b0).abs().max(support.iter().map(|&j| (nbeta[j] - beta[j]).abs()).fold(0.0, f64::max));
        b0 = nb0;
        beta = nbeta;
        if moved < 1e-14 {
            break;
        }
    }
    (b0, beta)
}

/// Largest KKT violation of a standardised-scale solution.
pub fn kkt_residual(family: Family, z: &Array2<f64>, y: &[f64], lambda: f64, b0: f64, beta: &[f64]) -> f64 {
    let (g0, g) = loss_gradient(family, z, y, b0, beta);
    let mut worst = g0.abs();
    for (gj, bj) in g.iter().zip(beta) {
        let r = if *bj == 0.0 {
            (gj.abs() - lambda).max(0.0)
        } else {
            (gj + lambda * bj.signum()).abs()
        };
        worst = worst.max(r);
    }
    worst
}

/// Solves the dense system `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let k = b.len();
    for c in 0..k {
        let piv = (c..k).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..k {
            let f = a[r][c] / a[c][c];
            for cc in c..k {
                a[r][cc] -= f * a[c][cc];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; k];
    for c in (0..k).rev() {
        let s: f64 = (c + 1..k).map(|j| a[c][j] * x[j]).sum();
        x[c] = (b[c] - s) / a[c][c];
    }
    x
}

/// Least squares with intercept via the normal equations; returns
/// `(intercept, coefficients, rss)`.
pub fn ols(x: &Array2<f64>, y: &[f64]) -> (f64, Vec<f64>, f64) {
    let (n, p) = x.dim();
    let col = |j: usize, i: usize| if j == 0 { 1.0 } else { x[[i, j - 1]] };
    let mut a = vec![vec![0.0; p + 1]; p + 1];
    let mut b = vec![0.0; p + 1];
    for r in 0..=p {
        for c in 0..=p {
            a[r][c] = (0..n).map(|i| col(r, i) * col(c, i)).sum();
        }
        b[r] = (0..n).map(|i| col(r, i) * y[i]).sum();
    }
    let s = solve(a, b);
    let rss = (0..n)
        .map(|i| {
            let f: f64 = (0..=p).map(|j| s[j] * col(j, i)).sum();
            (y[i] - f) * (y[i] - f)
        })
        .sum();
    (s[0], s[1..].to_vec(), rss)
}
