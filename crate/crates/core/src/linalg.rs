//! Small dense linear algebra in `f64`: LU inversion and a cyclic Jacobi
//! eigensolver for symmetric matrices.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Pivots smaller than this in magnitude are treated as singular.
pub const MIN_PIVOT: f64 = 1e-8;

/// LU factorization `P·A = L·U` with partial pivoting, packed in one matrix.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &[f64], n: usize) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::shape("lu", &[a.len()], &[n, n]));
        }
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let (pivot_row, pivot) = (col..n)
                .map(|r| (r, lu[r * n + col].abs()))
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .unwrap();
            if !(pivot >= MIN_PIVOT) {
                return Err(Error::IllConditioned(format!(
                    "pivot {pivot:.3e} in column {col} below {MIN_PIVOT:e}"
                )));
            }
            if pivot_row != col {
                for j in 0..n {
                    lu.swap(col * n + j, pivot_row * n + j);
                }
                perm.swap(col, pivot_row);
            }
            let p = lu[col * n + col];
            for r in col + 1..n {
                let f = lu[r * n + col] / p;
                lu[r * n + col] = f;
                if f != 0.0 {
                    for j in col + 1..n {
                        lu[r * n + j] -= f * lu[col * n + j];
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm })
    }

    /// Solves `A·x = b` in place.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.lu[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu[i * n + j] * x[j];
            }
            x[i] /= self.lu[i * n + i];
        }
        b.copy_from_slice(&x);
    }

    pub fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            col.fill(0.0);
            col[j] = 1.0;
            self.solve(&mut col);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        inv
    }
}

/// Induced 1-norm (maximum absolute column sum).
pub fn norm1(a: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverse of the row-major `n×n` matrix `a`, computed in `f64` and cast back.
pub fn invert<T: Real>(a: &[T], n: usize) -> Result<Vec<T>> {
    let a64: Vec<f64> = a.iter().map(|x| x.f64()).collect();
    let inv = Lu::factor(&a64, n)?.inverse();
    Ok(inv.into_iter().map(T::of).collect())
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    f64::gemm(m, k, n, a, false, b, false, &mut c, false);
    c
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// Row `i` is the unit eigenvector for `values[i]`.
    pub vectors: Vec<Vec<f64>>,
    pub sweeps: usize,
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm drops below
/// `tol` times the matrix norm.
pub fn jacobi_eigen(a: &[f64], n: usize, tol: f64) -> Result<SymEigen> {
    if a.len() != n * n {
        return Err(Error::shape("jacobi_eigen", &[a.len()], &[n, n]));
    }
    let mut m = a.to_vec();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = avg;
            m[j * n + i] = avg;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    const MAX_SWEEPS: usize = 100;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS && off(&m) > tol * total.max(f64::MIN_POSITIVE) {
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if off(&m) > tol * total.max(f64::MIN_POSITIVE) {
        return Err(Error::Config(format!(
            "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    Ok(SymEigen {
        values: order.iter().map(|&i| m[i * n + i]).collect(),
        vectors: order
            .iter()
            .map(|&i| (0..n).map(|k| v[k * n + i]).collect())
            .collect(),
        sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn max_abs_identity_error(a: &[f64], inv: &[f64], n: usize) -> f64 {
        let p = matmul(a, inv, n, n, n);
        (0..n * n)
            .map(|k| (p[k] - if k / n == k % n { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_inverse_is_exact() {
        let n = 6;
        let mut eye = vec![0.0; n * n];
        (0..n).for_each(|i| eye[i * n + i] = 1.0);
        assert_eq!(Lu::factor(&eye, n).unwrap().inverse(), eye);
    }

    #[test]
    fn diagonal_inverse() {
        let n = 4;
        let mut a = vec![0.0; n * n];
        (0..n).for_each(|i| a[i * n + i] = 2.0);
        let inv = Lu::factor(&a, n).unwrap().inverse();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(inv[i * n + j], if i == j { 0.5 } else { 0.0 });
            }
        }
    }

    #[test]
    fn random_perturbed_identity_inverts() {
        let n = 32;
        let mut rng = Rng::new(5);
        for _ in 0..10 {
            let mut a: Vec<f64> = (0..n * n).map(|_| rng.normal() / (n as f64).sqrt()).collect();
            (0..n).for_each(|i| a[i * n + i] += 1.0);
            let inv = Lu::factor(&a, n).unwrap().inverse();
            assert!(max_abs_identity_error(&a, &inv, n) <= 1e-10);
        }
    }

    #[test]
    fn pivoting_handles_zero_leading_entry() {
        let a = [0.0, 1.0, 1.0, 0.0];
        let inv = Lu::factor(&a, 2).unwrap().inverse();
        assert_eq!(inv, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn singular_matrix_rejected() {
        let a = [1.0, 2.0, 2.0, 4.0];
        assert!(matches!(Lu::factor(&a, 2), Err(Error::IllConditioned(_))));
    }

    #[test]
    fn jacobi_diagonalizes_known_matrix() {
        // Eigenvalues of [[2,1],[1,2]] are 3 and 1.
        let e = jacobi_eigen(&[2.0, 1.0, 1.0, 2.0], 2, 1e-12).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-12 && (e.values[1] - 1.0).abs() < 1e-12);
        let v = &e.vectors[0];
        assert!((v[0].abs() - v[1].abs()).abs() < 1e-12);
    }

    #[test]
    fn jacobi_reconstructs_random_symmetric() {
        let n = 8;
        let mut rng = Rng::new(17);
        let b: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        let mut a = vec![0.0; n * n];
        f64::gemm(n, n, n, &b, false, &b, true, &mut a, false);
        let e = jacobi_eigen(&a, n, 1e-12).unwrap();
        for i in 0..n {
            for j in 0..n {
                let r: f64 = (0..n).map(|k| e.values[k] * e.vectors[k][i] * e.vectors[k][j]).sum();
                assert!((r - a[i * n + j]).abs() < 1e-9);
            }
        }
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }
}
