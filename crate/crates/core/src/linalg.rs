//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Rank-K truncated singular value decomposition `M ≈ U diag(S) Vᵀ`.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// r×K, orthonormal columns.
    pub u: DMatrix<f64>,
    /// K singular values, descending.
    pub s: Vec<f64>,
    /// c×K, orthonormal columns.
    pub v: DMatrix<f64>,
}

impl TruncatedSvd {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (k, s) in self.s.iter().enumerate() {
            us.column_mut(k).scale_mut(*s);
        }
        us * self.v.transpose()
    }
}

pub fn truncated_svd(m: &DMatrix<f64>, k: usize) -> Result<TruncatedSvd> {
    let (r, c) = m.shape();
    if k == 0 || k > r.min(c) {
        return Err(Error::InvalidInput(format!(
            "rank {k} outside 1..={} for a {r}x{c} matrix",
            r.min(c)
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite entry in SVD input".into()));
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    order.truncate(k);
    Ok(TruncatedSvd {
        u: DMatrix::from_fn(r, k, |i, j| u[(i, order[j])]),
        s: order.iter().map(|&j| svd.singular_values[j]).collect(),
        v: DMatrix::from_fn(c, k, |i, j| v_t[(order[j], i)]),
    })
}

/// SVD of the product `A Bᵀ` (A: n×K, B: m×K) without forming the n×m
/// product: thin QR of both factors, then a K×K SVD of `R_a R_bᵀ`.
pub fn product_svd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<TruncatedSvd> {
    let k = a.ncols();
    if b.ncols() != k {
        return Err(Error::Shape("factor column counts differ".into()));
    }
    if k > a.nrows() || k > b.nrows() {
        return Err(Error::InvalidInput("more factors than rows".into()));
    }
    let qa = a.clone().qr();
    let qb = b.clone().qr();
    let core = qa.r() * qb.r().transpose();
    let inner = truncated_svd(&core, k)?;
    Ok(TruncatedSvd {
        u: qa.q() * inner.u,
        s: inner.s,
        v: qb.q() * inner.v,
    })
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    match a.cholesky() {
        Some(ch) => Ok(ch.solve(b)),
        None => Err(Error::RankDeficient(
            "normal-equation matrix is not positive definite".into(),
        )),
    }
}

/// Ratio of smallest to largest singular value; 0 for rank-deficient input.
pub fn inverse_condition(x: &DMatrix<f64>) -> f64 {
    if x.nrows() < x.ncols() {
        return 0.0;
    }
    let sv = x.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if max > 0.0 {
        min / max
    } else {
        0.0
    }
}
