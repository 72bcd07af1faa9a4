//! Initializers for the low-rank factors of an adapted weight `W_0` (d_out × d_in).
//!
//! The semantic SVD initializer rescales the top-r singular values by
//! `σ_k · ReLU(1 + λ·R_k)`, where `R_k` is the largest cosine between the k-th
//! right singular vector and any cluster centroid, then splits `√S_e` across
//! both factors and freezes the residual `W_0 − B·A`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{cosine_similarity, svd, Matrix, RngStream, Svd};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    SemSvd,
    Pissa,
    Milora,
    KaimingZero,
}

impl InitStrategy {
    pub fn is_svd_family(self) -> bool {
        !matches!(self, InitStrategy::KaimingZero)
    }

    pub fn name(self) -> &'static str {
        match self {
            InitStrategy::SemSvd => "sem_svd",
            InitStrategy::Pissa => "pissa",
            InitStrategy::Milora => "milora",
            InitStrategy::KaimingZero => "kaiming_zero",
        }
    }
}

impl std::str::FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sem_svd" | "semsvd" => Ok(InitStrategy::SemSvd),
            "pissa" => Ok(InitStrategy::Pissa),
            "milora" => Ok(InitStrategy::Milora),
            "kaiming_zero" | "kaiming" => Ok(InitStrategy::KaimingZero),
            other => Err(Error::Config(format!("unknown init strategy {other:?}"))),
        }
    }
}

/// Initial factors for one adapted weight.
#[derive(Clone, Debug, PartialEq)]
pub struct InitPair {
    /// r × d_in
    pub a: Matrix,
    /// d_out × r
    pub b: Matrix,
    /// Frozen part: `W_0 − B·A` for SVD-family strategies, `W_0` otherwise.
    pub base: Matrix,
    pub strategy: InitStrategy,
}

/// Audit record of a semantic SVD initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemSvdFactors {
    pub u_r: Matrix,
    pub sigma_r: Vec<f64>,
    pub v_r: Matrix,
    pub relevance: Vec<f64>,
    pub s_e: Vec<f64>,
    pub w_res: Matrix,
    pub lambda: f64,
}

/// `R_k = max_j cos(v_r[:, k], c_j)`; centroids are rows.
pub fn relevance_scores(v_r: &Matrix, centroids: &Matrix) -> Result<Vec<f64>> {
    if centroids.rows() == 0 {
        return Err(Error::Argument("relevance needs at least one centroid".into()));
    }
    if centroids.cols() != v_r.rows() {
        return Err(Error::Argument(format!(
            "centroid dim {} does not match layer input dim {}; use truncate_or_pad explicitly",
            centroids.cols(),
            v_r.rows()
        )));
    }
    (0..v_r.cols())
        .map(|k| {
            let v = v_r.col(k);
            let mut best = f64::NEG_INFINITY;
            for j in 0..centroids.rows() {
                best = best.max(cosine_similarity(&v, centroids.row(j))?);
            }
            Ok(best)
        })
        .collect()
}

/// `σ_k · max(0, 1 + λ·R_k)`.
pub fn modulate(sigma: &[f64], relevance: &[f64], lambda: f64) -> Vec<f64> {
    sigma
        .iter()
        .zip(relevance)
        .map(|(s, r)| s * (1.0 + lambda * r).max(0.0))
        .collect()
}

/// Singular triplets `first..first + r` of a full SVD.
#[derive(Clone, Debug)]
pub struct Truncation {
    pub u_r: Matrix,
    pub sigma_r: Vec<f64>,
    pub v_r: Matrix,
}

impl Truncation {
    pub fn top(full: &Svd, r: usize) -> Result<Self> {
        Self::range(full, 0, r)
    }

    pub fn bottom(full: &Svd, r: usize) -> Result<Self> {
        let len = full.s.len();
        if r > len {
            return Err(Error::Argument(format!("rank {r} exceeds {len} singular values")));
        }
        Self::range(full, len - r, r)
    }

    fn range(full: &Svd, first: usize, r: usize) -> Result<Self> {
        let len = full.s.len();
        if r == 0 || first + r > len {
            return Err(Error::Argument(format!(
                "rank {r} must lie in 1..={len}"
            )));
        }
        let mut u_r = full.u.slice_cols(first, first + r)?;
        let mut v_r = full.v.slice_cols(first, first + r)?;
        canonicalize_signs(&mut u_r, &mut v_r);
        Ok(Self {
            u_r,
            sigma_r: full.s[first..first + r].to_vec(),
            v_r,
        })
    }

    /// `(√s·V_rᵀ, U_r·√s)` for scaled singular values `s`.
    pub fn factors(&self, scaled: &[f64]) -> Result<(Matrix, Matrix)> {
        let root: Vec<f64> = scaled.iter().map(|s| s.max(0.0).sqrt()).collect();
        let a = self.v_r.transpose().scale_rows(&root)?;
        let b = self.u_r.scale_cols(&root)?;
        Ok((a, b))
    }

    pub fn modulated(&self, lambda: f64, centroids: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        let relevance = relevance_scores(&self.v_r, centroids)?;
        let s_e = modulate(&self.sigma_r, &relevance, lambda);
        Ok((relevance, s_e))
    }
}

/// Flips paired singular vectors so the largest-magnitude entry of each
/// right singular vector is positive (first such entry on ties). Relevance is
/// sign-sensitive, so this pins it to a convention independent of the solver.
fn canonicalize_signs(u_r: &mut Matrix, v_r: &mut Matrix) {
    for k in 0..v_r.cols() {
        let col = v_r.col(k);
        let mut pivot = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            for i in 0..v_r.rows() {
                v_r.set(i, k, -v_r.get(i, k));
            }
            for i in 0..u_r.rows() {
                u_r.set(i, k, -u_r.get(i, k));
            }
        }
    }
}

fn check_rank(w0: &Matrix, r: usize) -> Result<()> {
    let max = w0.rows().min(w0.cols());
    if r == 0 || r > max {
        return Err(Error::Argument(format!(
            "rank {r} must lie in 1..={max} for a {}x{} weight",
            w0.rows(),
            w0.cols()
        )));
    }
    Ok(())
}

/// Semantic SVD initialization against `centroids` (rows of length d_in).
pub fn semsvd_init(w0: &Matrix, r: usize, lambda: f64, centroids: &Matrix) -> Result<(InitPair, SemSvdFactors)> {
    check_rank(w0, r)?;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Argument(format!("lambda must be a finite value >= 0, got {lambda}")));
    }
    let t = Truncation::top(&svd(w0)?, r)?;
    let (relevance, s_e) = t.modulated(lambda, centroids)?;
    let dropped = s_e.iter().zip(&t.sigma_r).filter(|(s, sig)| **s == 0.0 && **sig > 0.0).count();
    if dropped > 0 {
        log::info!("semantic modulation removed {dropped} of {r} singular directions");
    }
    let (a, b) = t.factors(&s_e)?;
    let w_res = w0.sub(&b.matmul(&a)?)?;
    let pair = InitPair {
        a,
        b,
        base: w_res.clone(),
        strategy: InitStrategy::SemSvd,
    };
    let factors = SemSvdFactors {
        u_r: t.u_r,
        sigma_r: t.sigma_r,
        v_r: t.v_r,
        relevance,
        s_e,
        w_res,
        lambda,
    };
    Ok((pair, factors))
}

/// A ~ Kaiming-uniform (bound `√(6/d_in)`), B = 0, base = W_0.
pub fn kaiming_zero_init(w0: &Matrix, r: usize, rng: &mut RngStream) -> Result<InitPair> {
    check_rank(w0, r)?;
    let bound = (6.0 / w0.cols() as f64).sqrt();
    Ok(InitPair {
        a: Matrix::random_uniform(r, w0.cols(), bound, rng),
        b: Matrix::zeros(w0.rows(), r),
        base: w0.clone(),
        strategy: InitStrategy::KaimingZero,
    })
}

fn svd_pair(w0: &Matrix, t: &Truncation, strategy: InitStrategy) -> Result<InitPair> {
    let (a, b) = t.factors(&t.sigma_r)?;
    let base = w0.sub(&b.matmul(&a)?)?;
    Ok(InitPair { a, b, base, strategy })
}

/// Principal (top-r) singular components go to the adapter.
pub fn pissa_init(w0: &Matrix, r: usize) -> Result<InitPair> {
    check_rank(w0, r)?;
    svd_pair(w0, &Truncation::top(&svd(w0)?, r)?, InitStrategy::Pissa)
}

/// Minor (bottom-r) singular components go to the adapter.
pub fn milora_init(w0: &Matrix, r: usize) -> Result<InitPair> {
    check_rank(w0, r)?;
    svd_pair(w0, &Truncation::bottom(&svd(w0)?, r)?, InitStrategy::Milora)
}

impl InitPair {
    /// `‖(base + B·A) − W_0‖_F / ‖W_0‖_F`.
    pub fn residual_error(&self, w0: &Matrix) -> Result<f64> {
        self.base.add(&self.b.matmul(&self.a)?)?.relative_error(w0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn relevance_fixtures() {
        let id = Matrix::identity(3);
        let c = Matrix::from_rows(&[e(0, 3), {
            let mut v = e(2, 3);
            v[2] = -1.0;
            v
        }])
        .unwrap();
        assert_eq!(relevance_scores(&id, &c).unwrap(), vec![1.0, 0.0, 0.0]);

        let single = Matrix::from_rows(&[e(1, 3)]).unwrap();
        assert_eq!(relevance_scores(&id, &single).unwrap()[1], 1.0);

        let v = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        let orth = Matrix::from_rows(&[e(2, 3)]).unwrap();
        assert_eq!(relevance_scores(&v, &orth).unwrap(), vec![0.0, 0.0]);

        assert!(relevance_scores(&id, &Matrix::from_rows(&[[1.0, 0.0]]).unwrap()).is_err());
    }

    #[test]
    fn identity_worked_example() {
        let c = Matrix::from_rows(&[e(0, 3)]).unwrap();
        let (pair, f) = semsvd_init(&Matrix::identity(3), 3, 0.5, &c).unwrap();
        let mut s_e = f.s_e.clone();
        s_e.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(s_e, vec![1.5, 1.0, 1.0]);
        let ba = pair.b.matmul(&pair.a).unwrap();
        assert!(ba.max_abs_diff(&Matrix::from_diag(&[1.5, 1.0, 1.0])).unwrap() < 1e-15);
        assert!(pair.base.max_abs_diff(&Matrix::from_diag(&[-0.5, 0.0, 0.0])).unwrap() < 1e-15);
    }

    #[test]
    fn negative_relevance_drops_direction() {
        let c = Matrix::from_rows(&[[-1.0, 0.0]]).unwrap();
        let w0 = Matrix::from_diag(&[3.0, 2.0]);
        let (pair, f) = semsvd_init(&w0, 2, 3.0, &c).unwrap();
        // R = [-1, 0] → factors [ReLU(1 - 3), 1]
        assert_eq!(f.s_e, vec![0.0, 2.0]);
        let ba = pair.b.matmul(&pair.a).unwrap();
        assert!(ba.max_abs_diff(&Matrix::from_diag(&[0.0, 2.0])).unwrap() < 1e-15);
        assert!(pair.a.is_finite() && pair.b.is_finite());
    }

    #[test]
    fn lambda_zero_is_pissa() {
        let mut rng = RngStream::new(11);
        let w0 = Matrix::random_normal(12, 9, 1.0, &mut rng);
        let c = Matrix::random_normal(2, 9, 1.0, &mut rng);
        let (sem, _) = semsvd_init(&w0, 4, 0.0, &c).unwrap();
        let pissa = pissa_init(&w0, 4).unwrap();
        assert!(sem.a.max_abs_diff(&pissa.a).unwrap() <= 1e-12);
        assert!(sem.b.max_abs_diff(&pissa.b).unwrap() <= 1e-12);
        assert!(sem.base.max_abs_diff(&pissa.base).unwrap() <= 1e-12);
    }

    #[test]
    fn milora_takes_smallest_triplet() {
        let w0 = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        let pair = milora_init(&w0, 1).unwrap();
        let ba = pair.b.matmul(&pair.a).unwrap();
        assert!(ba.max_abs_diff(&Matrix::from_diag(&[0.0, 0.0, 1.0])).unwrap() < 1e-12);
        assert!(pair.residual_error(&w0).unwrap() < 1e-12);
        let full = milora_init(&w0, 3).unwrap();
        let top = pissa_init(&w0, 3).unwrap();
        assert!(full.base.max_abs() < 1e-12 && top.base.max_abs() < 1e-12);
    }

    #[test]
    fn kaiming_bounds_and_zero_product() {
        let w0 = Matrix::filled(5, 24, 0.3);
        let pair = kaiming_zero_init(&w0, 3, &mut RngStream::new(2)).unwrap();
        let bound = (6.0f64 / 24.0).sqrt();
        assert!(pair.a.data().iter().all(|x| x.abs() <= bound));
        assert_eq!(pair.b.matmul(&pair.a).unwrap().max_abs(), 0.0);
        assert_eq!(pair.base, w0);
        let again = kaiming_zero_init(&w0, 3, &mut RngStream::new(2)).unwrap();
        assert_eq!(pair.a, again.a);
    }

    #[test]
    fn rank_bounds_checked() {
        let w0 = Matrix::identity(3);
        assert!(pissa_init(&w0, 0).is_err());
        assert!(pissa_init(&w0, 4).is_err());
        assert!(semsvd_init(&w0, 2, -1.0, &Matrix::identity(3)).is_err());
    }
}
