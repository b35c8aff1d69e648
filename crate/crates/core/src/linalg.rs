//! Symmetric tridiagonal eigen helpers and a Lanczos iteration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Number of eigenvalues of the tridiagonal `(diag, off)` strictly below `x`.
pub(crate) fn sturm_count(diag: &[f64], off: &[f64], x: f64) -> usize {
    let tiny = f64::MIN_POSITIVE.sqrt();
    let mut count = 0;
    let mut q = 1.0;
    for i in 0..diag.len() {
        let e2 = if i == 0 { 0.0 } else { off[i - 1] * off[i - 1] };
        q = diag[i] - x - if i == 0 { 0.0 } else { e2 / q };
        if q == 0.0 {
            q = -tiny;
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Smallest eigenvalue of a symmetric tridiagonal matrix by bisection.
pub(crate) fn smallest_eigenvalue(diag: &[f64], off: &[f64]) -> f64 {
    let n = diag.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { off[i - 1].abs() } else { 0.0 } + if i + 1 < n { off[i].abs() } else { 0.0 };
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }
    let scale = lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 2.0 * f64::EPSILON * scale || mid == lo || mid == hi {
            break;
        }
        if sturm_count(diag, off, mid) >= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Eigenvector for the smallest eigenvalue `theta` by shifted inverse iteration.
pub(crate) fn lowest_eigenvector(diag: &[f64], off: &[f64], theta: f64) -> Vec<f64> {
    let n = diag.len();
    let scale = diag.iter().chain(off.iter()).fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    // the shift sits just below the spectrum, so the shifted matrix is positive definite
    let shift = theta - 1e-10 * scale;
    let mut x = vec![1.0; n];
    for _ in 0..4 {
        x = solve_tridiagonal(diag, off, shift, &x);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter_mut().for_each(|v| *v /= norm);
    }
    x
}

fn solve_tridiagonal(diag: &[f64], off: &[f64], shift: f64, rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut m = diag[0] - shift;
    c[0] = if n > 1 { off[0] / m } else { 0.0 };
    d[0] = rhs[0] / m;
    for i in 1..n {
        m = diag[i] - shift - off[i - 1] * c[i - 1];
        if i + 1 < n {
            c[i] = off[i] / m;
        }
        d[i] = (rhs[i] - off[i - 1] * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

pub(crate) struct LanczosResult {
    pub value: f64,
    pub vector: Vec<f64>,
}

/// Lowest eigenpair of a symmetric operator restricted to the complement of `deflate`
/// (a unit vector), with full reorthogonalisation.
pub(crate) fn lanczos_lowest(
    n: usize,
    apply: impl Fn(&[f64], &mut [f64]),
    deflate: &[f64],
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<LanczosResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = dot(&q, deflate);
    axpy(-c, deflate, &mut q);
    let norm = dot(&q, &q).sqrt();
    q.iter_mut().for_each(|v| *v /= norm);

    let mut basis: Vec<Vec<f64>> = vec![q];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![0.0; n];
    let mut last = (f64::NAN, f64::INFINITY, Vec::new());
    let max_iter = max_iter.min(n.saturating_sub(1)).max(1);

    for j in 0..max_iter {
        apply(&basis[j], &mut w);
        let a = dot(&basis[j], &w);
        alpha.push(a);
        for _ in 0..2 {
            let c = dot(&w, deflate);
            axpy(-c, deflate, &mut w);
            for v in &basis {
                let c = dot(&w, v);
                axpy(-c, v, &mut w);
            }
        }
        let b = dot(&w, &w).sqrt();
        let done = b <= 1e-13 * a.abs().max(1.0) || j + 1 == max_iter;
        if j % 8 == 7 || done {
            let theta = smallest_eigenvalue(&alpha, &beta);
            let y = lowest_eigenvector(&alpha, &beta, theta);
            let res = b * y[y.len() - 1].abs();
            last = (theta, res, y);
            if res <= tol * theta.abs().max(1.0) || b <= 1e-13 * a.abs().max(1.0) {
                break;
            }
        }
        if done {
            break;
        }
        beta.push(b);
        basis.push(w.iter().map(|v| v / b).collect());
    }
    let (value, residual, y) = last;
    if !(residual <= tol * value.abs().max(1.0)) {
        return Err(Error::Solver(format!(
            "Lanczos stopped after {} steps with residual {residual:.3e}",
            alpha.len()
        )));
    }
    let mut vector = vec![0.0; n];
    for (yk, v) in y.iter().zip(&basis) {
        axpy(*yk, v, &mut vector);
    }
    Ok(LanczosResult { value, vector })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_difference_spectrum() {
        // tridiag(-1, 2, -1) of size n has eigenvalues 2 - 2 cos(k pi / (n+1))
        let n = 50;
        let d = vec![2.0; n];
        let e = vec![-1.0; n - 1];
        let exact = 2.0 - 2.0 * (std::f64::consts::PI / (n as f64 + 1.0)).cos();
        let got = smallest_eigenvalue(&d, &e);
        assert!((got - exact).abs() < 1e-13);
        let v = lowest_eigenvector(&d, &e, got);
        for k in 0..n {
            let s = (std::f64::consts::PI * (k + 1) as f64 / (n as f64 + 1.0)).sin();
            let s0 = (std::f64::consts::PI / (n as f64 + 1.0)).sin();
            assert!((v[k] / v[0] - s / s0).abs() < 1e-8);
        }
    }

    #[test]
    fn lanczos_finds_lowest_off_the_deflated_direction() {
        // diagonal operator with entries 1..n, deflating e_1 leaves 2 as the lowest
        let n = 60;
        let mut e1 = vec![0.0; n];
        e1[0] = 1.0;
        let apply = |x: &[f64], y: &mut [f64]| {
            for i in 0..n {
                y[i] = (i + 1) as f64 * x[i];
            }
        };
        let r = lanczos_lowest(n, apply, &e1, 1e-10, 200, 7).unwrap();
        assert!((r.value - 2.0).abs() < 1e-9);
    }
}
