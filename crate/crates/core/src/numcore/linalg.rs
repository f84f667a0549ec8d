//! Symmetric factorizations: damped SPD inverse (Cholesky) and a Jacobi
//! eigensolver for the small symmetric matrices this pipeline produces.

use crate::error::{Error, Result};
use crate::numcore::matrix::Matrix;

/// Cholesky factor L of an SPD matrix, lower triangular with A = L Lᵀ.
fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Some(l)
}

/// Inverse of (H + λ·mean(diag H)·I) through a Cholesky factorization.
///
/// `context` names the layer/group for the singularity error message.
pub fn sym_inverse_damped(h: &Matrix, lambda: f64, context: &str) -> Result<Matrix> {
    if h.rows() != h.cols() {
        return Err(Error::Dimension(format!(
            "sym_inverse_damped: matrix is {}x{}",
            h.rows(),
            h.cols()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::Parameter("damping must be nonnegative".into()));
    }
    let n = h.rows();
    let mean_diag = if n == 0 {
        0.0
    } else {
        (0..n).map(|i| h.get(i, i)).sum::<f64>() / n as f64
    };
    let mut damped = h.clone();
    for i in 0..n {
        damped.set(i, i, damped.get(i, i) + lambda * mean_diag);
    }
    let l = cholesky(&damped).ok_or_else(|| {
        Error::Singular(format!(
            "Hessian not positive definite after damping (lambda={lambda}) in {context}"
        ))
    })?;
    // Invert by solving L Lᵀ x = e_i column by column.
    let mut inv = Matrix::zeros(n, n);
    let mut y = vec![0.0; n];
    for col in 0..n {
        // forward solve L y = e_col
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l.get(i, k) * y[k];
            }
            y[i] = s / l.get(i, i);
        }
        // back solve Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l.get(k, i) * inv.get(k, col);
            }
            inv.set(i, col, s / l.get(i, i));
        }
    }
    // enforce exact symmetry
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (inv.get(i, j) + inv.get(j, i));
            inv.set(i, j, v);
            inv.set(j, i, v);
        }
    }
    inv.ensure_finite(context)?;
    Ok(inv)
}

/// Full symmetric eigendecomposition by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvector matrix with vectors as columns),
/// unsorted.
fn jacobi_eigh(s: &Matrix) -> (Vec<f64>, Matrix) {
    let n = s.rows();
    let mut a = s.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a.get(i, j) * a.get(i, j);
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + a.max_abs()) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - sn * akq);
                    a.set(k, q, sn * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - sn * aqk);
                    a.set(q, k, sn * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + c * vkq);
                }
            }
        }
    }
    let vals = (0..n).map(|i| a.get(i, i)).collect();
    (vals, v)
}

/// Top-k eigenpairs of a symmetric matrix, eigenvalues descending,
/// eigenvectors as the k columns of the returned matrix.
pub fn eigh_topk(s: &Matrix, k: usize) -> Result<(Vec<f64>, Matrix)> {
    let n = s.rows();
    if s.cols() != n {
        return Err(Error::Dimension("eigh_topk: matrix not square".into()));
    }
    if k > n {
        return Err(Error::Dimension(format!(
            "eigh_topk: k={k} exceeds dimension {n}"
        )));
    }
    let (vals, vecs) = jacobi_eigh(s);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap().then(a.cmp(&b)));
    let top = &order[..k];
    let values: Vec<f64> = top.iter().map(|&i| vals[i]).collect();
    let vectors = vecs.select_cols(top);
    Ok((values, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::matrix::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inverse_identity() {
        let i = Matrix::identity(4);
        let inv = sym_inverse_damped(&i, 0.0, "test").unwrap();
        assert!(inv.max_abs_diff(&i) <= 1e-12);
    }

    #[test]
    fn inverse_diagonal() {
        let h = Matrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        let inv = sym_inverse_damped(&h, 0.0, "test").unwrap();
        assert!((inv.get(0, 0) - 0.5).abs() <= 1e-12);
        assert!((inv.get(1, 1) - 0.25).abs() <= 1e-12);
    }

    #[test]
    fn inverse_rank_one_with_damping() {
        let h = Matrix::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let inv = sym_inverse_damped(&h, 0.01, "test").unwrap();
        // multiply back against the damped matrix
        let mut damped = h.clone();
        for i in 0..2 {
            damped.set(i, i, damped.get(i, i) + 0.01);
        }
        let prod = matmul(&damped, &inv).unwrap();
        assert!(prod.max_abs_diff(&Matrix::identity(2)) <= 1e-8);
    }

    #[test]
    fn inverse_rejects_indefinite() {
        let h = Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(matches!(
            sym_inverse_damped(&h, 0.0, "layer 3"),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn inverse_multiply_back_well_conditioned() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 8;
        let a = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap();
        let mut h = matmul(&a, &a.transpose()).unwrap();
        for i in 0..n {
            h.set(i, i, h.get(i, i) + 1.0);
        }
        let inv = sym_inverse_damped(&h, 0.0, "test").unwrap();
        let prod = matmul(&h, &inv).unwrap();
        assert!(prod.max_abs_diff(&Matrix::identity(n)) <= 1e-8);
        assert!(inv.max_abs_diff(&inv.transpose()) <= 1e-10);
    }

    #[test]
    fn eigh_diagonal() {
        let s = Matrix::from_vec(3, 3, vec![3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let (vals, vecs) = eigh_topk(&s, 2).unwrap();
        assert!((vals[0] - 3.0).abs() <= 1e-10);
        assert!((vals[1] - 2.0).abs() <= 1e-10);
        assert!(vecs.get(0, 0).abs() > 0.999);
        assert!(vecs.get(2, 1).abs() > 0.999);
    }

    #[test]
    fn eigh_rank_one() {
        let u = [0.6, 0.8];
        let mut s = Matrix::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                s.set(i, j, u[i] * u[j]);
            }
        }
        let (vals, vecs) = eigh_topk(&s, 1).unwrap();
        assert!((vals[0] - 1.0).abs() <= 1e-10);
        let dot: f64 = (0..2).map(|i| vecs.get(i, 0) * u[i]).sum();
        assert!((dot.abs() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn eigh_k_too_large() {
        assert!(eigh_topk(&Matrix::identity(2), 3).is_err());
    }

    /// Power iteration + deflation oracle for the dominant eigenpairs.
    fn power_iteration_oracle(s: &Matrix, k: usize) -> Vec<f64> {
        let n = s.rows();
        // shift to make all eigenvalues positive so power iteration finds
        // them in magnitude order
        let shift = s.max_abs() * (n as f64) + 1.0;
        let mut m = s.clone();
        for i in 0..n {
            m.set(i, i, m.get(i, i) + shift);
        }
        let mut vals = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..k {
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
            for _ in 0..20000 {
                let w = crate::numcore::matrix::matvec(&m, &v).unwrap();
                let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                v = w.iter().map(|x| x / norm).collect();
            }
            let w = crate::numcore::matrix::matvec(&m, &v).unwrap();
            let lam: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            vals.push(lam - shift);
            // deflate
            for i in 0..n {
                for j in 0..n {
                    m.set(i, j, m.get(i, j) - lam * v[i] * v[j]);
                }
            }
        }
        vals
    }

    #[test]
    fn eigh_vs_power_iteration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 12;
        let a = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap();
        let s = a.add(&a.transpose()).unwrap().scale(0.5);
        let (vals, vecs) = eigh_topk(&s, n).unwrap();
        let oracle = power_iteration_oracle(&s, 4);
        for i in 0..4 {
            assert!(
                (vals[i] - oracle[i]).abs() <= 1e-8,
                "eigenvalue {i}: {} vs oracle {}",
                vals[i],
                oracle[i]
            );
        }
        // orthonormality
        let gram = matmul(&vecs.transpose(), &vecs).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(n)) <= 1e-8);
        // residual S v = lambda v
        for c in 0..n {
            let v = vecs.col(c);
            let sv = crate::numcore::matrix::matvec(&s, &v).unwrap();
            let resid: f64 = sv
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - vals[c] * b).abs())
                .fold(0.0, f64::max);
            assert!(resid <= 1e-6 * (1.0 + s.max_abs()));
        }
    }
}
