//! Alternating maximum likelihood fit of the Poisson factor model
//! `Y ~ Poisson(Λ)`, `g(Λ) = B Fᵀ`, and the deviance reduction table used
//! to choose the number of factors.
//!
//! Each outer iteration fits `n` row-wise Poisson regressions of the count
//! profiles on the loadings, then `m` column-wise regressions on the new
//! scores, and finally rotates the pair back to the requested orthonormal
//! gauge through an SVD of the (never materialized) product `B Fᵀ`.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{GlmOptions, PoissonRegression};
use crate::linalg::{product_svd, truncated_svd, TruncatedSvd};
use crate::model::{deviance_unchecked, CountMatrix, FactorModel, Link, Normalization};

const MAX_OUTER_HALVINGS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmlConfig {
    pub k: usize,
    pub link: Link,
    pub max_outer_iters: usize,
    /// Relative deviance-change tolerance of the outer loop.
    pub outer_tol: f64,
    pub glm_max_iters: usize,
    pub glm_tol: f64,
    pub normalization: Normalization,
    pub weight_floor: f64,
}

impl AmlConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    pub fn with_link(mut self, link: Link) -> Self {
        self.link = link;
        self
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    fn glm_options(&self) -> GlmOptions {
        GlmOptions {
            max_iters: self.glm_max_iters,
            tol: self.glm_tol,
            weight_floor: self.weight_floor,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidInput("K must be at least 1".into()));
        }
        if !(self.outer_tol > 0.0 && self.glm_tol > 0.0 && self.weight_floor > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        Ok(())
    }
}

impl Default for AmlConfig {
    fn default() -> Self {
        Self {
            k: 1,
            link: Link::Sqrt,
            max_outer_iters: 100,
            outer_tol: 1e-7,
            glm_max_iters: 50,
            glm_tol: 1e-8,
            normalization: Normalization::ScoresOrthonormal,
            weight_floor: 1e-10,
        }
    }
}

/// Starting point for the alternating iterations.
#[derive(Debug, Clone)]
pub struct AmlStart {
    /// m×K loadings.
    pub loadings: DMatrix<f64>,
    /// Optional n×K scores used to warm-start the row regressions.
    pub scores: Option<DMatrix<f64>>,
}

impl AmlStart {
    pub fn from_model(model: &FactorModel) -> Self {
        Self {
            loadings: model.loadings.clone(),
            scores: Some(model.scores.clone()),
        }
    }

    /// Loadings only; useful when the rows differ from the earlier fit.
    pub fn from_loadings(loadings: DMatrix<f64>) -> Self {
        Self {
            loadings,
            scores: None,
        }
    }
}

/// SVD start on the shifted, linked counts.
fn svd_start(y: &DMatrix<f64>, cfg: &AmlConfig) -> Result<AmlStart> {
    let gy = y.map(|v| cfg.link.shifted_forward(v));
    let svd = truncated_svd(&gy, cfg.k)?;
    let (scores, loadings) = split_gauge(&svd, Normalization::LoadingsOrthonormal);
    Ok(AmlStart {
        loadings,
        scores: Some(scores),
    })
}

/// Distributes the singular values onto scores or loadings.
fn split_gauge(svd: &TruncatedSvd, normalization: Normalization) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut b = svd.u.clone();
    let mut f = svd.v.clone();
    let target = match normalization {
        Normalization::LoadingsOrthonormal => &mut b,
        Normalization::ScoresOrthonormal => &mut f,
    };
    for (k, s) in svd.s.iter().enumerate() {
        target.column_mut(k).scale_mut(*s);
    }
    fix_signs(&mut b, &mut f);
    (b, f)
}

/// Makes the first non-negligible entry of every loading column positive.
fn fix_signs(b: &mut DMatrix<f64>, f: &mut DMatrix<f64>) {
    for k in 0..f.ncols() {
        let scale = f.column(k).amax();
        let first = f.column(k).iter().copied().find(|v| v.abs() > 1e-12 * scale);
        if matches!(first, Some(v) if v < 0.0) {
            f.column_mut(k).neg_mut();
            b.column_mut(k).neg_mut();
        }
    }
}

fn deviance_of(y: &DMatrix<f64>, b: &DMatrix<f64>, f: &DMatrix<f64>, link: Link) -> f64 {
    let fitted = (b * f.transpose()).map(|e| link.inverse(e));
    deviance_unchecked(y.as_slice(), fitted.as_slice())
}

struct HalfStep {
    coef: DMatrix<f64>,
    nonconverged: usize,
}

/// Regresses every row of `y` on `design`; row i of the result holds its coefficients.
fn regress_rows(
    y: &DMatrix<f64>,
    design: &DMatrix<f64>,
    warm: Option<&DMatrix<f64>>,
    cfg: &AmlConfig,
) -> Result<HalfStep> {
    let reg = PoissonRegression::new(design.clone(), cfg.link)?;
    let opts = cfg.glm_options();
    let k = design.ncols();
    let fits: Vec<_> = (0..y.nrows())
        .into_par_iter()
        .map(|i| {
            let resp: Vec<f64> = y.row(i).iter().copied().collect();
            let start: Option<Vec<f64>> = warm.map(|w| w.row(i).iter().copied().collect());
            reg.fit(&resp, start.as_deref(), &opts)
        })
        .collect::<Result<_>>()?;
    let mut coef = DMatrix::zeros(y.nrows(), k);
    let mut nonconverged = 0;
    for (i, fit) in fits.iter().enumerate() {
        nonconverged += usize::from(!fit.converged);
        for (j, b) in fit.beta.iter().enumerate() {
            coef[(i, j)] = *b;
        }
    }
    Ok(HalfStep { coef, nonconverged })
}

/// Fits the K-factor model from the default SVD start.
pub fn fit_factor_model(counts: &CountMatrix, cfg: &AmlConfig) -> Result<FactorModel> {
    fit_factor_model_from(counts, cfg, None)
}

/// Fits the K-factor model, optionally warm-started.
pub fn fit_factor_model_from(
    counts: &CountMatrix,
    cfg: &AmlConfig,
    start: Option<AmlStart>,
) -> Result<FactorModel> {
    cfg.validate()?;
    let (n, m) = (counts.n(), counts.m());
    if cfg.k > n.min(m) {
        return Err(Error::Infeasible(format!(
            "K = {} exceeds min(n, m) = {}",
            cfg.k,
            n.min(m)
        )));
    }
    let y = counts.to_matrix();
    let mut warnings = Vec::new();
    for i in 0..n {
        if y.row(i).iter().all(|&v| v == 0.0) {
            warnings.push(format!("row {i} has no arrivals"));
        }
    }
    for j in 0..m {
        if y.column(j).iter().all(|&v| v == 0.0) {
            warnings.push(format!("column {j} has no arrivals"));
        }
    }

    let start = match start {
        Some(s) => {
            if s.loadings.shape() != (m, cfg.k) {
                return Err(Error::Shape(format!(
                    "start loadings are {:?}, need ({m}, {})",
                    s.loadings.shape(),
                    cfg.k
                )));
            }
            if matches!(&s.scores, Some(b) if b.shape() != (n, cfg.k)) {
                return Err(Error::Shape("start scores have the wrong shape".into()));
            }
            s
        }
        None => svd_start(&y, cfg)?,
    };

    let mut f_old = start.loadings;
    let mut b_old = match start.scores {
        Some(b) => b,
        None => regress_rows(&y, &f_old, None, cfg)?.coef,
    };
    let mut dev_old = deviance_of(&y, &b_old, &f_old, cfg.link);
    let mut converged = false;
    let mut iterations = 0;
    let mut glm_failures = 0;

    for it in 1..=cfg.max_outer_iters {
        iterations = it;
        let rows = regress_rows(&y, &f_old, Some(&b_old), cfg)?;
        let yt = y.transpose();
        let cols = regress_rows(&yt, &rows.coef, Some(&f_old), cfg)?;
        glm_failures += rows.nonconverged + cols.nonconverged;

        let mut b_new = rows.coef;
        let mut f_new = cols.coef;
        let mut dev_new = deviance_of(&y, &b_new, &f_new, cfg.link);
        let mut halvings = 0;
        while !(dev_new <= dev_old * (1.0 + cfg.outer_tol)) && halvings < MAX_OUTER_HALVINGS {
            b_new = (&b_old + &b_new) * 0.5;
            f_new = (&f_old + &f_new) * 0.5;
            dev_new = deviance_of(&y, &b_new, &f_new, cfg.link);
            halvings += 1;
        }
        if !(dev_new <= dev_old * (1.0 + cfg.outer_tol)) {
            log::debug!("AML: no descent after {MAX_OUTER_HALVINGS} halvings at iteration {it}");
            break;
        }

        let svd = product_svd(&b_new, &f_new)?;
        let (b, f) = split_gauge(&svd, Normalization::LoadingsOrthonormal);
        let change = (dev_old - dev_new).abs() / dev_new.max(f64::MIN_POSITIVE);
        b_old = b;
        f_old = f;
        dev_old = dev_new;
        if change < cfg.outer_tol || dev_new < 1e-12 {
            converged = true;
            break;
        }
    }
    if glm_failures > 0 {
        warnings.push(format!("{glm_failures} GLM fits hit the iteration limit"));
    }
    if !dev_old.is_finite() {
        return Err(Error::Numerical("factor-model deviance is not finite".into()));
    }

    let svd = product_svd(&b_old, &f_old)?;
    let (scores, loadings) = split_gauge(&svd, cfg.normalization);
    let deviance = deviance_of(&y, &scores, &loadings, cfg.link);
    Ok(FactorModel {
        link: cfg.link,
        scores,
        loadings,
        normalization: cfg.normalization,
        deviance,
        iterations_used: iterations,
        converged,
        warnings,
        interval_labels: counts.interval_labels().to_vec(),
    })
}

/// One row of the deviance reduction table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevianceRow {
    pub k: usize,
    pub deviance: f64,
    /// deviance(K − 1) − deviance(K).
    pub reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevianceReductionTable {
    /// Deviance of the constant-rate model that plays the role of K = 0.
    pub null_deviance: f64,
    pub rows: Vec<DevianceRow>,
}

impl DevianceReductionTable {
    /// Smallest K whose reduction is below `fraction` of the total
    /// reduction, minus one; `K_max` when no such K exists. Advisory only.
    pub fn suggested_k(&self, fraction: f64) -> usize {
        let total = self.null_deviance - self.rows.last().map_or(self.null_deviance, |r| r.deviance);
        self.rows
            .iter()
            .find(|r| r.reduction < fraction * total)
            .map(|r| (r.k - 1).max(1))
            .unwrap_or_else(|| self.rows.last().map_or(1, |r| r.k))
    }

    /// `K,deviance,reduction` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("K,deviance,reduction\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.k, r.deviance, r.reduction);
        }
        out
    }
}

/// Deviances of nested fits K = 1..=k_max, each warm-started from the
/// previous one extended by a new direction with zero scores, so the
/// starting deviance of fit K + 1 equals the final deviance of fit K.
pub fn deviance_reduction_table(
    counts: &CountMatrix,
    k_max: usize,
    cfg: &AmlConfig,
) -> Result<DevianceReductionTable> {
    let (n, m) = (counts.n(), counts.m());
    if k_max == 0 || k_max > n.min(m) {
        return Err(Error::Infeasible(format!(
            "K_max = {k_max} outside 1..={}",
            n.min(m)
        )));
    }
    let y = counts.to_matrix();
    let mean = y.mean().max(crate::model::RATE_FLOOR);
    let null_deviance = deviance_unchecked(y.as_slice(), &vec![mean; y.len()]);

    let mut rows = Vec::with_capacity(k_max);
    let mut prev: Option<FactorModel> = None;
    let mut prev_dev = null_deviance;
    for k in 1..=k_max {
        let kcfg = AmlConfig { k, ..*cfg };
        let start = prev.as_ref().map(|p| extend_start(p, &y, cfg.link));
        let model = fit_factor_model_from(counts, &kcfg, start)?;
        rows.push(DevianceRow {
            k,
            deviance: model.deviance,
            reduction: prev_dev - model.deviance,
        });
        prev_dev = model.deviance;
        prev = Some(model);
    }
    Ok(DevianceReductionTable {
        null_deviance,
        rows,
    })
}

/// Appends one loading direction (the leading residual direction, made
/// orthogonal to the existing loadings) with zero scores.
fn extend_start(model: &FactorModel, y: &DMatrix<f64>, link: Link) -> AmlStart {
    let (n, m, k) = (model.n(), model.m(), model.k());
    let gy = y.map(|v| link.shifted_forward(v));
    let resid = gy - &model.scores * model.loadings.transpose();
    let q = model.loadings.clone().qr().q();
    let mut dir = truncated_svd(&resid, 1)
        .map(|s| s.v.column(0).into_owned())
        .unwrap_or_else(|_| nalgebra::DVector::zeros(m));
    let mut candidates = vec![dir.clone()];
    candidates.extend((0..m).map(|j| {
        let mut e = nalgebra::DVector::zeros(m);
        e[j] = 1.0;
        e
    }));
    for c in candidates {
        let proj = &c - &q * (q.transpose() * &c);
        if proj.norm() > 1e-6 {
            dir = proj.normalize();
            break;
        }
    }
    let scale = model.loadings.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut loadings = DMatrix::zeros(m, k + 1);
    loadings.columns_mut(0, k).copy_from(&model.loadings);
    loadings.column_mut(k).copy_from(&(dir * scale.max(1.0)));
    let mut scores = DMatrix::zeros(n, k + 1);
    scores.columns_mut(0, k).copy_from(&model.scores);
    AmlStart {
        loadings,
        scores: Some(scores),
    }
}
