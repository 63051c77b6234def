//! Small dense least-squares kernel used by the GLM fitter.

/// Relative tolerance below which a column counts as linearly dependent on
/// the columns kept before it.
pub(crate) const DEPENDENCE_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub(crate) struct LeastSquares {
    /// One entry per input column; dropped columns get 0.
    pub coef: Vec<f64>,
    /// Input columns judged dependent on earlier ones.
    pub dropped: Vec<usize>,
}

/// Solves `min ||a x - b||` by Householder QR, processing columns in order
/// and skipping any column whose residual norm (after removing the kept
/// columns before it) is below `DEPENDENCE_TOL` times its own norm.
///
/// `a` is column-major `n x m` and is overwritten; `b` is overwritten.
pub(crate) fn least_squares(a: &mut [f64], n: usize, m: usize, b: &mut [f64]) -> LeastSquares {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(b.len(), n);

    let mut kept: Vec<usize> = Vec::with_capacity(m.min(n));
    let mut dropped = Vec::new();
    let mut diag: Vec<f64> = Vec::with_capacity(m.min(n));
    let mut v = vec![0.0; n];

    for j in 0..m {
        let r = kept.len();
        let col = &a[j * n..(j + 1) * n];
        let orig = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        // norm of the part not yet explained by kept reflectors
        let rest = col[r..].iter().map(|x| x * x).sum::<f64>().sqrt();
        if r == n || orig == 0.0 || !(rest > DEPENDENCE_TOL * orig) {
            dropped.push(j);
            continue;
        }

        let alpha = if col[r] > 0.0 { -rest } else { rest };
        v[..r].iter_mut().for_each(|x| *x = 0.0);
        v[r] = col[r] - alpha;
        v[r + 1..n].copy_from_slice(&col[r + 1..n]);
        let vnorm2: f64 = v[r..n].iter().map(|x| x * x).sum();

        {
            let colm = &mut a[j * n..(j + 1) * n];
            colm[r] = alpha;
            colm[r + 1..n].iter_mut().for_each(|x| *x = 0.0);
        }
        if vnorm2 > 0.0 {
            for k in (j + 1)..m {
                let c = &mut a[k * n..(k + 1) * n];
                let dot: f64 = v[r..n].iter().zip(&c[r..n]).map(|(p, q)| p * q).sum();
                let s = 2.0 * dot / vnorm2;
                c[r..n].iter_mut().zip(&v[r..n]).for_each(|(q, p)| *q -= s * p);
            }
            let dot: f64 = v[r..n].iter().zip(&b[r..n]).map(|(p, q)| p * q).sum();
            let s = 2.0 * dot / vnorm2;
            b[r..n].iter_mut().zip(&v[r..n]).for_each(|(q, p)| *q -= s * p);
        }
        kept.push(j);
        diag.push(alpha);
    }

    let mut coef = vec![0.0; m];
    for t in (0..kept.len()).rev() {
        let mut acc = b[t];
        for s in (t + 1)..kept.len() {
            acc -= a[kept[s] * n + t] * coef[kept[s]];
        }
        coef[kept[t]] = acc / diag[t];
    }
    LeastSquares { coef, dropped }
}

/// Solves the symmetric positive definite system `a x = b` in place by
/// Cholesky factorisation. `a` is row-major `m x m`. Returns `None` when a
/// pivot is not positive relative to the largest diagonal entry.
pub(crate) fn cholesky_solve(a: &mut [f64], m: usize, b: &mut [f64]) -> Option<()> {
    let scale = (0..m).map(|i| a[i * m + i]).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    for j in 0..m {
        let mut d = a[j * m + j];
        for k in 0..j {
            d -= a[j * m + k] * a[j * m + k];
        }
        if !(d > 1e-15 * scale) {
            return None;
        }
        let d = d.sqrt();
        a[j * m + j] = d;
        for i in j + 1..m {
            let mut v = a[i * m + j];
            for k in 0..j {
                v -= a[i * m + k] * a[j * m + k];
            }
            a[i * m + j] = v / d;
        }
    }
    for i in 0..m {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i * m + k] * b[k];
        }
        b[i] = v / a[i * m + i];
    }
    for i in (0..m).rev() {
        let mut v = b[i];
        for k in i + 1..m {
            v -= a[k * m + i] * b[k];
        }
        b[i] = v / a[i * m + i];
    }
    Some(())
}
