//! Singular value decomposition (one-sided Jacobi) and LU-based solves.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Thin SVD `m = U diag(sigma) V^T` with `k = min(rows, cols)` components.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.sigma.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul_t(&self.v)
    }
}

const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// One-sided (Hestenes) Jacobi SVD.
///
/// Columns of a working copy are rotated pairwise until every pair is
/// orthogonal to within `1e-12` relative to their norms.
pub fn svd(m: &Matrix) -> Result<Svd> {
    m.check_finite("svd input")?;
    if m.rows() < m.cols() {
        let t = svd(&m.transpose())?;
        return Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    let (rows, cols) = m.shape();
    // Work column-major: column j of A is a[j].
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let negligible = scale * f64::EPSILON * (rows.max(cols) as f64);

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut sigma = Vec::with_capacity(cols);
    let mut v_out = Matrix::zeros(cols, cols);
    let mut pending = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        for i in 0..cols {
            v_out[(i, k)] = v[j][i];
        }
        let s = norms[j];
        if s > negligible && s > 0.0 {
            sigma.push(s);
            u_cols.push(a[j].iter().map(|x| x / s).collect());
        } else {
            sigma.push(0.0);
            u_cols.push(vec![0.0; rows]);
            pending.push(k);
        }
    }
    complete_orthonormal(&mut u_cols, &pending);

    let u = Matrix::from_fn(rows, cols, |i, k| u_cols[k][i]);
    Ok(Svd { u, sigma, v: v_out })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the columns listed in `pending` with unit vectors orthogonal to all
/// other columns (Gram-Schmidt against the standard basis).
fn complete_orthonormal(cols: &mut [Vec<f64>], pending: &[usize]) {
    if pending.is_empty() {
        return;
    }
    let n = cols[0].len();
    let mut candidate = 0;
    for &k in pending {
        loop {
            assert!(candidate < n, "cannot complete orthonormal basis");
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == k || (pending.contains(&j) && c.iter().all(|&x| x == 0.0)) {
                        continue;
                    }
                    let proj = dot(&e, c);
                    for (ei, ci) in e.iter_mut().zip(c) {
                        *ei -= proj * ci;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                cols[k] = e.iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    if m.is_empty() {
        return Ok(0.0);
    }
    Ok(svd(m)?.sigma[0])
}

/// Numerical rank: count of singular values above `tol * sigma_max`.
pub fn rank(m: &Matrix, tol: f64) -> Result<usize> {
    let s = svd(m)?;
    let top = s.sigma.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(s.sigma.iter().filter(|&&x| x > tol * top).count())
}

/// LU factorisation with partial pivoting.
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
}

impl Lu {
    pub fn new(m: &Matrix) -> Result<Lu> {
        if m.rows() != m.cols() {
            return Err(Error::Contract(format!(
                "LU needs a square matrix, got {:?}",
                m.shape()
            )));
        }
        m.check_finite("LU input")?;
        let n = m.rows();
        let mut lu = m.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = m.max_abs().max(f64::MIN_POSITIVE);
        for k in 0..n {
            let mut piv = k;
            let mut best = lu[(k, k)].abs();
            for i in (k + 1)..n {
                let v = lu[(i, k)].abs();
                if v > best {
                    best = v;
                    piv = i;
                }
            }
            if best <= scale * 1e-14 {
                return Err(Error::Numeric(format!(
                    "matrix is singular to working precision (pivot {k})"
                )));
            }
            if piv != k {
                perm.swap(k, piv);
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(piv, j)];
                    lu[(piv, j)] = tmp;
                }
            }
            let pivot = lu[(k, k)];
            for i in (k + 1)..n {
                let f = lu[(i, k)] / pivot;
                lu[(i, k)] = f;
                if f == 0.0 {
                    continue;
                }
                for j in (k + 1)..n {
                    let u = lu[(k, j)];
                    lu[(i, j)] -= f * u;
                }
            }
        }
        Ok(Lu { lu, perm })
    }

    /// Solves `A X = B` column by column.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        let n = self.lu.rows();
        assert_eq!(b.rows(), n, "rhs row count mismatch");
        let mut x = Matrix::zeros(n, b.cols());
        for c in 0..b.cols() {
            let mut y: Vec<f64> = self.perm.iter().map(|&p| b[(p, c)]).collect();
            for i in 0..n {
                let mut s = y[i];
                for j in 0..i {
                    s -= self.lu[(i, j)] * y[j];
                }
                y[i] = s;
            }
            for i in (0..n).rev() {
                let mut s = y[i];
                for j in (i + 1)..n {
                    s -= self.lu[(i, j)] * y[j];
                }
                y[i] = s / self.lu[(i, i)];
            }
            for i in 0..n {
                x[(i, c)] = y[i];
            }
        }
        x
    }
}

pub fn inverse(m: &Matrix) -> Result<Matrix> {
    let lu = Lu::new(m)?;
    Ok(lu.solve(&Matrix::identity(m.rows())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;

    fn orthonormal_cols(m: &Matrix) -> f64 {
        m.t_matmul(m).max_abs_diff(&Matrix::identity(m.cols()))
    }

    #[test]
    fn diagonal_singular_values() {
        let s = svd(&Matrix::from_diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(s.sigma, vec![3.0, 2.0, 1.0]);
        let s = svd(&Matrix::identity(4)).unwrap();
        assert_eq!(s.sigma, vec![1.0; 4]);
    }

    #[test]
    fn random_rectangular_reconstruction() {
        let mut rng = Rng::new(7);
        for &(r, c) in &[(5, 3), (3, 5), (1, 4), (6, 6)] {
            let m = rng.gaussian_matrix(r, c, 1.0);
            let s = svd(&m).unwrap();
            assert!(s.reconstruct().max_abs_diff(&m) <= 1e-10);
            assert!(orthonormal_cols(&s.u) <= 1e-10);
            assert!(orthonormal_cols(&s.v) <= 1e-10);
            assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_deficient_input_still_orthonormal() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]);
        let s = svd(&a).unwrap();
        assert!(s.sigma[1].abs() < 1e-12);
        assert!(orthonormal_cols(&s.u) <= 1e-10);
        assert!(s.reconstruct().max_abs_diff(&a) <= 1e-10);
        let z = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(z.sigma, vec![0.0, 0.0]);
        assert!(orthonormal_cols(&z.u) <= 1e-10);
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = Matrix::identity(2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(svd(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = Rng::new(3);
        let m = rng.gaussian_matrix(6, 6, 1.0).add(&Matrix::identity(6).scale(3.0));
        let inv = inverse(&m).unwrap();
        assert!(m.matmul(&inv).max_abs_diff(&Matrix::identity(6)) < 1e-12);
    }

    #[test]
    fn singular_is_reported() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(matches!(inverse(&m), Err(Error::Numeric(_))));
    }
}
