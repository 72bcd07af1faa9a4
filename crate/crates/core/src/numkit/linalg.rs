use crate::error::{Error, Result};

use super::matrix::dot;
use super::Matrix;

/// Sweep cap shared by both Jacobi solvers.
pub const MAX_SWEEPS: usize = 100;
/// Relative off-diagonal mass below which a Jacobi iteration is converged.
pub const SWEEP_TOLERANCE: f64 = 1e-12;

/// Thin SVD `a = u · diag(s) · vᵀ` with `s` descending.
#[derive(Clone, Debug)]
pub struct Svd {
    /// rows(a) × p, orthonormal columns, p = min(rows, cols)
    pub u: Matrix,
    pub s: Vec<f64>,
    /// cols(a) × p, orthonormal columns
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        self.u
            .scale_cols(&self.s)
            .and_then(|us| us.matmul_nt(&self.v))
            .expect("svd factors have consistent shapes")
    }
}

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Argument("svd of an empty matrix".into()));
    }
    if !a.is_finite() {
        return Err(Error::Argument("svd input has non-finite entries".into()));
    }
    if a.rows() < a.cols() {
        let t = svd_tall(&a.transpose())?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    svd_tall(a)
}

/// rows ≥ cols. Columns of `a` are orthogonalized in place as rows of `w = aᵀ`.
fn svd_tall(a: &Matrix) -> Result<Svd> {
    let (m, n) = a.shape();
    let mut w = a.transpose();
    let mut vt = Matrix::identity(n);
    let negligible = (1e-15 * a.frobenius_norm()).powi(2);

    let mut converged = false;
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        residual = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let (alpha, beta, gamma) = {
                    let wi = w.row(i);
                    let wj = w.row(j);
                    (dot(wi, wi), dot(wj, wj), dot(wi, wj))
                };
                if alpha <= negligible || beta <= negligible || gamma == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off < SWEEP_TOLERANCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, i, j, c, s);
                rotate_rows(&mut vt, i, j, c, s);
            }
        }
        if residual < SWEEP_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numerical("one-sided Jacobi SVD", residual));
    }

    let norms: Vec<f64> = (0..n).map(|j| dot(w.row(j), w.row(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let s_max = norms[order[0]];
    let zero_cut = s_max * (m.max(n) as f64) * f64::EPSILON;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > zero_cut && sigma > 0.0 {
            s.push(sigma);
            u_cols.push(w.row(j).iter().map(|x| x / sigma).collect());
        } else {
            s.push(0.0);
            u_cols.push(Vec::new());
        }
        for r in 0..n {
            v.set(r, k, vt.get(j, r));
        }
    }
    complete_orthonormal(&mut u_cols, m);
    let u = Matrix::from_fn(m, n, |r, c| u_cols[c][r]);
    Ok(Svd { u, s, v })
}

fn rotate_rows(m: &mut Matrix, i: usize, j: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.data_mut();
    for k in 0..cols {
        let a = data[i * cols + k];
        let b = data[j * cols + k];
        data[i * cols + k] = c * a - s * b;
        data[j * cols + k] = s * a + c * b;
    }
}

/// Fills empty entries of `cols` with unit vectors orthogonal to the rest
/// (Gram-Schmidt against the standard basis).
fn complete_orthonormal(cols: &mut [Vec<f64>], dim: usize) {
    let mut candidate = 0;
    for k in 0..cols.len() {
        if !cols[k].is_empty() {
            continue;
        }
        loop {
            assert!(candidate < dim, "ran out of basis vectors");
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of classical Gram-Schmidt
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let p = dot(&e, other);
                    for (x, o) in e.iter_mut().zip(other) {
                        *x -= p * o;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                e.iter_mut().for_each(|x| *x /= norm);
                cols[k] = e;
                break;
            }
        }
    }
}

/// Eigendecomposition of a symmetric matrix; eigenvalues ascending,
/// eigenvectors as the matching columns of `vectors`.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
pub fn sym_eig(s: &Matrix) -> Result<SymEig> {
    let n = s.rows();
    if n != s.cols() || n == 0 {
        return Err(Error::Argument(format!(
            "sym_eig needs a non-empty square matrix, got {:?}",
            s.shape()
        )));
    }
    let asym = s.asymmetry();
    if asym > 1e-10 {
        return Err(Error::Contract(format!(
            "sym_eig input is not symmetric (max |s_ij - s_ji| = {asym:e})"
        )));
    }
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (s.get(i, j) + s.get(j, i)));
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);

    let off_mass = |a: &Matrix| {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += a.get(i, j) * a.get(i, j);
                }
            }
        }
        acc.sqrt()
    };

    let mut converged = false;
    let mut residual = off_mass(&a) / scale;
    for _ in 0..MAX_SWEEPS {
        if residual < SWEEP_TOLERANCE {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
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
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + c * vkq);
                }
            }
        }
        residual = off_mass(&a) / scale;
    }
    if !converged && residual >= SWEEP_TOLERANCE {
        return Err(Error::numerical("cyclic Jacobi eigensolver", residual));
    }

    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| diag[x].total_cmp(&diag[y]).then(x.cmp(&y)));
    Ok(SymEig {
        values: order.iter().map(|&i| diag[i]).collect(),
        vectors: v.select_cols(&order),
    })
}
