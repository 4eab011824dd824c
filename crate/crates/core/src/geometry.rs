//! Euclidean distance to convex polytopes given by a linear minimization
//! oracle (Wolfe's minimum-norm-point algorithm).
//!
//! A single hull `co{g_1..g_k}` and Minkowski sums of scaled hulls are both
//! handled through their oracles, which keeps the Riemann sums of vectograms
//! used by flow verification exact up to solver tolerance.

use crate::error::{Error, Result};
use crate::torus::{dot, Velocity};

const MAX_MAJOR: usize = 2000;

/// Minimum-norm point of the polytope whose oracle returns, for a direction
/// `c`, a vertex minimizing `<c, q>`. Returns the point.
pub fn min_norm_point(dim: usize, mut lmo: impl FnMut(&[f64]) -> Velocity) -> Velocity {
    let mut verts: Vec<Velocity> = vec![lmo(&vec![0.0; dim])];
    let mut lambda = vec![1.0];
    let mut x = verts[0].clone();
    let mut scale = dot(&x, &x).max(1.0);
    for _ in 0..MAX_MAJOR {
        let q = lmo(&x);
        scale = scale.max(dot(&q, &q));
        let gap = dot(&x, &x) - dot(&x, &q);
        if gap <= 1e-13 * scale {
            return x;
        }
        if verts.iter().any(|v| v == &q) {
            return x;
        }
        verts.push(q);
        lambda.push(0.0);
        loop {
            let mu = match affine_minimizer(&verts) {
                Some(mu) => mu,
                None => {
                    // Degenerate affine hull: drop the oldest zero-weight vertex.
                    drop_small(&mut verts, &mut lambda, 1e-14);
                    return combine(&verts, &lambda, dim);
                }
            };
            if mu.iter().all(|&m| m > 1e-14) {
                lambda = mu;
                x = combine(&verts, &lambda, dim);
                break;
            }
            let mut theta = 1.0f64;
            for (l, m) in lambda.iter().zip(&mu) {
                if *m <= 1e-14 && l - m > 0.0 {
                    theta = theta.min(l / (l - m));
                }
            }
            for (l, m) in lambda.iter_mut().zip(&mu) {
                *l += theta * (m - *l);
            }
            drop_small(&mut verts, &mut lambda, 1e-14);
            x = combine(&verts, &lambda, dim);
            if verts.len() == 1 {
                break;
            }
        }
    }
    x
}

fn drop_small(verts: &mut Vec<Velocity>, lambda: &mut Vec<f64>, eps: f64) {
    let mut i = 0;
    while i < verts.len() {
        if lambda[i] <= eps && verts.len() > 1 {
            verts.remove(i);
            lambda.remove(i);
        } else {
            i += 1;
        }
    }
    let s: f64 = lambda.iter().sum();
    lambda.iter_mut().for_each(|l| *l /= s);
}

fn combine(verts: &[Velocity], lambda: &[f64], dim: usize) -> Velocity {
    let mut x = vec![0.0; dim];
    for (v, l) in verts.iter().zip(lambda) {
        for (xi, vi) in x.iter_mut().zip(v) {
            *xi += l * vi;
        }
    }
    x
}

/// Weights `mu` (summing to one) of the minimum-norm point of the affine hull.
fn affine_minimizer(verts: &[Velocity]) -> Option<Vec<f64>> {
    let k = verts.len();
    // [G 1; 1^T 0] [mu; kappa] = [0; 1]
    let n = k + 1;
    let mut a = vec![vec![0.0; n + 1]; n];
    for i in 0..k {
        for j in 0..k {
            a[i][j] = dot(&verts[i], &verts[j]);
        }
        a[i][k] = 1.0;
        a[k][i] = 1.0;
    }
    a[k][n] = 1.0;
    let sol = gauss_solve(a)?;
    Some(sol[..k].to_vec())
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
pub(crate) fn gauss_solve(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    let norm = a.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-13 * norm {
            return None;
        }
        a.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                if f != 0.0 {
                    for c in col..=n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
    }
    Some((0..n).map(|i| a[i][n] / a[i][i]).collect())
}

/// Distance from `w` to `co{generators}`.
pub fn dist_to_hull(w: &[f64], generators: &[Velocity]) -> Result<f64> {
    if generators.is_empty() {
        return Err(Error::structural("empty generator list"));
    }
    let dim = w.len();
    let shifted: Vec<Velocity> = generators
        .iter()
        .map(|g| g.iter().zip(w).map(|(a, b)| a - b).collect())
        .collect();
    let p = min_norm_point(dim, |c| argmin_dot(&shifted, c).clone());
    Ok(dot(&p, &p).sqrt())
}

/// Distance from `w` to the Minkowski sum `sum_k scale_k * co{sets_k}`.
pub fn dist_to_minkowski_sum(w: &[f64], sets: &[(f64, Vec<Velocity>)]) -> Result<f64> {
    if sets.iter().any(|(_, g)| g.is_empty()) {
        return Err(Error::structural("empty generator list"));
    }
    let dim = w.len();
    if sets.is_empty() {
        return Ok(dot(w, w).sqrt());
    }
    let p = min_norm_point(dim, |c| {
        let mut q: Velocity = w.iter().map(|x| -x).collect();
        for (s, gens) in sets {
            let g = argmin_dot_scaled(gens, c, *s);
            for (qi, gi) in q.iter_mut().zip(g) {
                *qi += s * gi;
            }
        }
        q
    });
    Ok(dot(&p, &p).sqrt())
}

fn argmin_dot<'a>(gens: &'a [Velocity], c: &[f64]) -> &'a Velocity {
    let mut best = &gens[0];
    let mut bv = dot(best, c);
    for g in &gens[1..] {
        let v = dot(g, c);
        if v < bv {
            bv = v;
            best = g;
        }
    }
    best
}

fn argmin_dot_scaled<'a>(gens: &'a [Velocity], c: &[f64], s: f64) -> &'a Velocity {
    if s >= 0.0 {
        argmin_dot(gens, c)
    } else {
        let neg: Vec<f64> = c.iter().map(|x| -x).collect();
        argmin_dot(gens, &neg)
    }
}
