//! Poisson regression by Fisher scoring (iteratively reweighted least squares).
//!
//! A [`PoissonRegression`] owns a design matrix and can fit any number of
//! responses against it, which is how the factor fit uses it: every row of
//! the count matrix is regressed on the same loadings, every column on the
//! same scores. The QR-based pseudo-inverse of the design is computed once;
//! under the square-root link the Fisher weight is the constant 4, so each
//! scoring step is an ordinary least-squares solve with that cached matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{inverse_condition, solve_spd};
use crate::model::{unit_deviance, Link};

/// Below this |η| the square-root link's working response is evaluated at ±ETA_GUARD.
const ETA_GUARD: f64 = 1e-6;
const MAX_HALVINGS: usize = 10;
const MIN_INVERSE_CONDITION: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmOptions {
    pub max_iters: usize,
    /// Relative deviance-change tolerance.
    pub tol: f64,
    pub weight_floor: f64,
}

impl Default for GlmOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-8,
            weight_floor: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub beta: Vec<f64>,
    pub deviance: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Poisson regression on a fixed design matrix.
#[derive(Debug, Clone)]
pub struct PoissonRegression {
    x: DMatrix<f64>,
    link: Link,
    /// (XᵀX)⁻¹Xᵀ, K×p.
    pinv: DMatrix<f64>,
}

impl PoissonRegression {
    pub fn new(x: DMatrix<f64>, link: Link) -> Result<Self> {
        let (p, k) = x.shape();
        if k == 0 {
            return Err(Error::InvalidInput("design has no columns".into()));
        }
        if p < k {
            return Err(Error::RankDeficient(format!(
                "{p} observations for {k} coefficients"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite design entry".into()));
        }
        let rcond = inverse_condition(&x);
        if rcond < MIN_INVERSE_CONDITION {
            return Err(Error::RankDeficient(format!(
                "design is not of full column rank (inverse condition {rcond:.3e})"
            )));
        }
        let qr = x.clone().qr();
        let r = qr.r();
        let qt = qr.q().transpose();
        let pinv = r
            .solve_upper_triangular(&qt)
            .ok_or_else(|| Error::RankDeficient("triangular factor is singular".into()))?;
        Ok(Self { x, link, pinv })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn link(&self) -> Link {
        self.link
    }

    /// Least-squares fit of the shifted, linked counts; the default start.
    pub fn initial_beta(&self, y: &[f64]) -> DVector<f64> {
        let gy = DVector::from_iterator(y.len(), y.iter().map(|&v| self.link.shifted_forward(v)));
        &self.pinv * gy
    }

    /// Fisher working weights at the linear predictor, floored.
    pub fn working_weights(&self, eta: &DVector<f64>, floor: f64) -> Vec<f64> {
        eta.iter()
            .map(|&e| self.link.fisher_weight(e).max(floor))
            .collect()
    }

    fn deviance_at(&self, y: &[f64], eta: &DVector<f64>) -> f64 {
        2.0 * y
            .iter()
            .zip(eta.iter())
            .map(|(&yi, &e)| unit_deviance(yi, self.link.inverse(e)))
            .sum::<f64>()
    }

    fn working_response(&self, y: &[f64], eta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            y.len(),
            y.iter().zip(eta.iter()).map(|(&yi, &e)| {
                let mu = self.link.inverse(e);
                let d = match self.link {
                    Link::Sqrt => {
                        let guarded = if e.abs() < ETA_GUARD {
                            ETA_GUARD.copysign(e)
                        } else {
                            e
                        };
                        2.0 * guarded
                    }
                    Link::Log => mu,
                    Link::Identity => 1.0,
                };
                e + (yi - mu) / d
            }),
        )
    }

    fn scoring_step(&self, y: &[f64], eta: &DVector<f64>, floor: f64) -> Result<DVector<f64>> {
        let z = self.working_response(y, eta);
        if self.link == Link::Sqrt {
            return Ok(&self.pinv * z);
        }
        let w = self.working_weights(eta, floor);
        let mut xw = self.x.clone();
        for (i, wi) in w.iter().enumerate() {
            xw.row_mut(i).scale_mut(*wi);
        }
        let xtwx = self.x.transpose() * &xw;
        let xtwz = xw.transpose() * z;
        solve_spd(xtwx, &xtwz)
    }

    /// Fits one response vector, warm-started from `start` when given.
    ///
    /// Each accepted step does not increase the deviance (step-halving); a
    /// fit that exhausts `max_iters` returns its best iterate with
    /// `converged = false`.
    pub fn fit(&self, y: &[f64], start: Option<&[f64]>, opts: &GlmOptions) -> Result<GlmFit> {
        let (p, k) = self.x.shape();
        if y.len() != p {
            return Err(Error::Shape(format!("{} responses for {p} design rows", y.len())));
        }
        if let Some(v) = y.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("response {v} is not a count")));
        }
        let mut beta = match start {
            Some(s) if s.len() == k && s.iter().all(|v| v.is_finite()) => {
                DVector::from_column_slice(s)
            }
            Some(s) if s.len() != k => {
                return Err(Error::Shape(format!("start has {} entries, need {k}", s.len())))
            }
            _ => self.initial_beta(y),
        };
        let mut eta = &self.x * &beta;
        let mut dev = self.deviance_at(y, &eta);
        let mut converged = false;
        let mut iterations = 0;

        for it in 1..=opts.max_iters {
            iterations = it;
            let mut cand = self.scoring_step(y, &eta, opts.weight_floor)?;
            let mut cand_eta = &self.x * &cand;
            let mut cand_dev = self.deviance_at(y, &cand_eta);
            let mut halvings = 0;
            while !(cand_dev <= dev) && halvings < MAX_HALVINGS {
                cand = (&beta + &cand) * 0.5;
                cand_eta = &self.x * &cand;
                cand_dev = self.deviance_at(y, &cand_eta);
                halvings += 1;
            }
            if !(cand_dev <= dev) {
                // No descent along the scoring direction: numerically stationary.
                converged = true;
                break;
            }
            let rel = (dev - cand_dev).abs() / (cand_dev.abs() + 0.1);
            beta = cand;
            eta = cand_eta;
            dev = cand_dev;
            if rel < opts.tol {
                converged = true;
                break;
            }
        }
        if !dev.is_finite() {
            return Err(Error::Numerical("deviance became non-finite".into()));
        }
        Ok(GlmFit {
            beta: beta.iter().copied().collect(),
            deviance: dev,
            converged,
            iterations,
        })
    }
}

/// One-shot Poisson regression of `y` on `x`.
pub fn fit_poisson_glm(
    y: &[f64],
    x: &DMatrix<f64>,
    link: Link,
    opts: &GlmOptions,
) -> Result<GlmFit> {
    PoissonRegression::new(x.clone(), link)?.fit(y, None, opts)
}
