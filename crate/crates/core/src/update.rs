//! Within-day rate updating.
//!
//! After the first `m0` intervals of a day are observed, the score vector of
//! that day is re-estimated by minimizing
//!
//! ```text
//! C(β) = Σ_{j ≤ m0} {λ_j − y_j log λ_j} + ω ‖β − β_TS‖²,   λ = g⁻¹(F^e β)
//! ```
//!
//! by Newton-type reweighted ridge solves, and the latter intervals are
//! forecast from the updated scores.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aml::{fit_factor_model_from, AmlConfig, AmlStart};
use crate::error::{Error, Result};
use crate::glm::{GlmOptions, PoissonRegression};
use crate::linalg::solve_spd;
use crate::model::{CountMatrix, FactorModel, Link, Normalization, Weekday, RATE_FLOOR};
use crate::scores::{draw_counts, fit_score_model, forecast_scores, Quantiles};
use crate::stats::{column_quantiles, split_rng};

const MAX_HALVINGS: usize = 10;
/// Smallest |η0| used when the square-root expansion is evaluated internally.
const SQRT_ETA_GUARD: f64 = 1e-6;
/// Relative RMSE difference below which grid values count as tied.
const OMEGA_TIE: f64 = 1e-6;

/// Quadratic expansion of `λ − y log λ` around `eta0`: returns `(w, y*)`
/// with `λ − y log λ ≈ const + w (η − y*)²`.
///
/// The weight is floored at `floor`; `y*` is then chosen so the gradient
/// of the surrogate at `eta0` still matches the exact one.
pub fn taylor_weights(link: Link, y: f64, eta0: f64, floor: f64) -> Result<(f64, f64)> {
    if !(y >= 0.0 && y.is_finite()) {
        return Err(Error::Domain(format!("count {y} is not a nonnegative number")));
    }
    if !eta0.is_finite() {
        return Err(Error::Domain("non-finite linear predictor".into()));
    }
    if eta0 == 0.0 && link != Link::Log {
        return Err(Error::SingularExpansion(format!(
            "{link} link expansion is undefined at a zero linear predictor"
        )));
    }
    // First and half second derivatives of λ − y log λ in η.
    let (grad, half_hess) = match link {
        Link::Sqrt => (2.0 * eta0 - 2.0 * y / eta0, 1.0 + y / (eta0 * eta0)),
        Link::Identity => (1.0 - y / eta0, y / (2.0 * eta0 * eta0)),
        Link::Log => {
            let e = eta0.exp();
            (e - y, e / 2.0)
        }
    };
    let w = half_hess.max(floor);
    Ok((w, eta0 - grad / (2.0 * w)))
}

/// Keeps the expansion point inside the region where it is defined.
fn guard_eta(link: Link, eta: f64) -> f64 {
    match link {
        Link::Sqrt if eta.abs() < SQRT_ETA_GUARD => SQRT_ETA_GUARD.copysign(eta),
        Link::Identity if eta < RATE_FLOOR => RATE_FLOOR,
        _ => eta,
    }
}

/// Observed early part of the day being updated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialDay {
    pub early_counts: Vec<u64>,
    pub day_label: Weekday,
}

impl PartialDay {
    pub fn new(early_counts: Vec<u64>, day_label: Weekday) -> Result<Self> {
        if early_counts.is_empty() {
            return Err(Error::InvalidInput("cut point m0 must be at least 1".into()));
        }
        Ok(Self {
            early_counts,
            day_label,
        })
    }

    /// The first `m0` counts of a full day.
    pub fn from_day(counts: &[u64], m0: usize, day_label: Weekday) -> Result<Self> {
        if m0 == 0 || m0 >= counts.len() {
            return Err(Error::InvalidInput(format!(
                "cut point m0 = {m0} outside 1..{}",
                counts.len()
            )));
        }
        Self::new(counts[..m0].to_vec(), day_label)
    }

    pub fn m0(&self) -> usize {
        self.early_counts.len()
    }

    fn y(&self) -> Vec<f64> {
        self.early_counts.iter().map(|&c| c as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenalizedUpdateConfig {
    pub omega: f64,
    pub omega_grid: Vec<f64>,
    pub max_iters: usize,
    /// Relative objective-change tolerance.
    pub tol: f64,
    pub weight_floor: f64,
}

impl Default for PenalizedUpdateConfig {
    fn default() -> Self {
        Self {
            omega: 1e3,
            omega_grid: default_omega_grid(),
            max_iters: 50,
            tol: 1e-9,
            weight_floor: 1e-10,
        }
    }
}

impl PenalizedUpdateConfig {
    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = omega;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::InvalidInput(format!("omega = {} must be ≥ 0", self.omega)));
        }
        if self.omega_grid.is_empty() || self.omega_grid.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidInput("omega grid must be nonempty and ≥ 0".into()));
        }
        if self.omega_grid.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::InvalidInput("omega grid must be strictly increasing".into()));
        }
        if !(self.tol > 0.0 && self.weight_floor > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidInput("tolerances and max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// `{0, 10, 10², …, 10⁹}`.
pub fn default_omega_grid() -> Vec<f64> {
    std::iter::once(0.0).chain((1..=9).map(|k| 10f64.powi(k))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdatedForecast {
    pub m0: usize,
    pub scores: Vec<f64>,
    /// Rates for intervals m0.. (the latter segment).
    pub latter_rates: Vec<f64>,
    pub objective_value: f64,
    pub omega_used: f64,
    pub iterations: usize,
    pub converged: bool,
    /// n_boot × (m − m0), from [`one_step_bootstrap_update`].
    pub ensemble: Option<Vec<Vec<f64>>>,
    pub ensemble_scores: Option<Vec<Vec<f64>>>,
    pub count_draws: Option<Vec<Vec<u64>>>,
    pub interval_labels: Vec<String>,
    pub seed: Option<u64>,
}

impl UpdatedForecast {
    pub fn attach(&mut self, ensemble: UpdateEnsemble, seed: u64) {
        self.ensemble = Some(ensemble.latter_rates);
        self.ensemble_scores = Some(ensemble.scores);
        self.count_draws = Some(ensemble.count_draws);
        self.seed = Some(seed);
    }

    pub fn rate_quantile(&self, p: f64) -> Vec<f64> {
        match &self.ensemble {
            Some(rows) => column_quantiles(rows, p),
            None => self.latter_rates.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&UpdatedDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: UpdatedDoc = serde_json::from_str(text)?;
        Ok(UpdatedForecast {
            m0: d.m0,
            scores: d.scores,
            latter_rates: d.latter_rates,
            objective_value: d.objective_value,
            omega_used: d.omega_used,
            iterations: d.iterations,
            converged: d.converged,
            ensemble: d.ensemble,
            ensemble_scores: d.ensemble_scores,
            count_draws: None,
            interval_labels: d.interval_labels,
            seed: d.seed,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct UpdatedDoc {
    m0: usize,
    omega_used: f64,
    scores: Vec<f64>,
    latter_rates: Vec<f64>,
    objective_value: f64,
    iterations: usize,
    converged: bool,
    quantiles: Quantiles,
    seed: Option<u64>,
    n_boot: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    interval_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ensemble_scores: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ensemble: Option<Vec<Vec<f64>>>,
}

impl From<&UpdatedForecast> for UpdatedDoc {
    fn from(u: &UpdatedForecast) -> Self {
        UpdatedDoc {
            m0: u.m0,
            omega_used: u.omega_used,
            scores: u.scores.clone(),
            latter_rates: u.latter_rates.clone(),
            objective_value: u.objective_value,
            iterations: u.iterations,
            converged: u.converged,
            quantiles: Quantiles::of(u.ensemble.as_ref(), &u.latter_rates),
            seed: u.seed,
            n_boot: u.ensemble.as_ref().map(Vec::len),
            interval_labels: u.interval_labels.clone(),
            ensemble_scores: u.ensemble_scores.clone(),
            ensemble: u.ensemble.clone(),
        }
    }
}

/// The penalized criterion on the early segment, plus the pieces needed to
/// evaluate and minimize it.
struct Problem<'a> {
    fe: DMatrix<f64>,
    y: Vec<f64>,
    link: Link,
    omega: f64,
    ts: &'a [f64],
    floor: f64,
}

impl Problem<'_> {
    fn objective(&self, beta: &DVector<f64>) -> f64 {
        let eta = &self.fe * beta;
        let fit: f64 = eta
            .iter()
            .zip(&self.y)
            .map(|(&e, &y)| {
                let l = self.link.inverse(e);
                if y > 0.0 {
                    l - y * l.ln()
                } else {
                    l
                }
            })
            .sum();
        let pen: f64 = beta.iter().zip(self.ts).map(|(b, t)| (b - t) * (b - t)).sum();
        fit + self.omega * pen
    }

    /// Normal equations of the quadratic surrogate at `beta0`:
    /// `(F^eᵀ W F^e + ωI)` and `F^eᵀ W y*`.
    fn surrogate(&self, beta0: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let eta0 = &self.fe * beta0;
        let k = self.fe.ncols();
        let mut wf = self.fe.clone();
        let mut wy = DVector::zeros(self.y.len());
        for (j, (&e, &y)) in eta0.iter().zip(&self.y).enumerate() {
            let (w, ystar) = taylor_weights(self.link, y, guard_eta(self.link, e), self.floor)?;
            wf.row_mut(j).scale_mut(w);
            wy[j] = w * ystar;
        }
        let mut a = self.fe.transpose() * wf;
        for i in 0..k {
            a[(i, i)] += self.omega;
        }
        Ok((a, self.fe.transpose() * wy))
    }

    fn rhs_with_anchor(&self, fwy: &DVector<f64>, anchor: &[f64]) -> DVector<f64> {
        fwy + DVector::from_column_slice(anchor) * self.omega
    }
}

/// Minimizer of the frozen-weight surrogate at `beta0`:
/// `(F^eᵀWF^e + ωI)⁻¹(F^eᵀW y* + ω β_TS)`.
pub fn surrogate_step(
    loadings_early: &DMatrix<f64>,
    early_counts: &[f64],
    link: Link,
    beta0: &[f64],
    ts_scores: &[f64],
    omega: f64,
    weight_floor: f64,
) -> Result<Vec<f64>> {
    let p = Problem {
        fe: loadings_early.clone(),
        y: early_counts.to_vec(),
        link,
        omega,
        ts: ts_scores,
        floor: weight_floor,
    };
    let (a, fwy) = p.surrogate(&DVector::from_column_slice(beta0))?;
    Ok(solve_spd(a, &p.rhs_with_anchor(&fwy, ts_scores))?.iter().copied().collect())
}

fn check_update_inputs(model: &FactorModel, partial: &PartialDay, ts_scores: &[f64]) -> Result<()> {
    if model.normalization != Normalization::ScoresOrthonormal {
        return Err(Error::InvalidInput(
            "updating needs a scores-orthonormal factor model".into(),
        ));
    }
    let (m, k) = (model.m(), model.k());
    if partial.m0() > m {
        return Err(Error::Shape(format!("m0 = {} exceeds m = {m}", partial.m0())));
    }
    if ts_scores.len() != k {
        return Err(Error::Shape(format!("{} anchor scores for K = {k}", ts_scores.len())));
    }
    if ts_scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite anchor score".into()));
    }
    Ok(())
}

fn latter_rates(model: &FactorModel, m0: usize, beta: &[f64]) -> Vec<f64> {
    let fl = model.loadings.rows(m0, model.m() - m0);
    (fl * DVector::from_column_slice(beta))
        .iter()
        .map(|&e| model.link.inverse(e))
        .collect()
}

/// Penalized maximum-likelihood update of the current day's scores.
///
/// Starts from whichever of the unpenalized ML fit on the early segment and
/// the anchor `ts_scores` has the lower criterion (only the anchor exists
/// when m0 < K, and with omega = 0 the unidentified directions stay there), then iterates reweighted ridge solves with step-halving
/// on the true criterion. `partial.m0()` may equal m, in which case the
/// latter segment is empty.
pub fn penalized_update(
    model: &FactorModel,
    partial: &PartialDay,
    ts_scores: &[f64],
    cfg: &PenalizedUpdateConfig,
) -> Result<UpdatedForecast> {
    cfg.validate()?;
    check_update_inputs(model, partial, ts_scores)?;
    let (m0, k) = (partial.m0(), model.k());
    let prob = Problem {
        fe: model.loadings.rows(0, m0).into_owned(),
        y: partial.y(),
        link: model.link,
        omega: cfg.omega,
        ts: ts_scores,
        floor: cfg.weight_floor,
    };

    let ml = if m0 >= k {
        let opts = GlmOptions {
            max_iters: 200,
            tol: 1e-14,
            weight_floor: cfg.weight_floor,
        };
        match PoissonRegression::new(prob.fe.clone(), model.link) {
            Ok(reg) => Some(reg.fit(&prob.y, Some(ts_scores), &opts)?.beta),
            Err(e) if cfg.omega == 0.0 => return Err(e),
            Err(_) => None,
        }
    } else {
        None
    };
    // Without a penalty and with m0 < K the criterion is flat along the null
    // space of the early loadings; minimum-norm steps keep that part at the anchor.
    let min_norm = cfg.omega == 0.0 && m0 < k;

    let anchor = DVector::from_column_slice(ts_scores);
    let mut beta = anchor.clone();
    let mut obj = prob.objective(&beta);
    if let Some(ml) = ml {
        let b = DVector::from_vec(ml);
        let o = prob.objective(&b);
        if cfg.omega == 0.0 || o <= obj {
            beta = b;
            obj = o;
        }
    }

    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iters {
        iterations = it;
        let (a, fwy) = prob.surrogate(&beta)?;
        let mut cand = if min_norm {
            let resid = &fwy - &a * &beta;
            let tol = 1e-12 * a.amax();
            let step = a
                .svd(true, true)
                .solve(&resid, tol)
                .map_err(|e| Error::Numerical(e.into()))?;
            &beta + step
        } else {
            solve_spd(a, &prob.rhs_with_anchor(&fwy, ts_scores))?
        };
        let mut cand_obj = prob.objective(&cand);
        let mut halvings = 0;
        while !(cand_obj <= obj) && halvings < MAX_HALVINGS {
            cand = (&beta + &cand) * 0.5;
            cand_obj = prob.objective(&cand);
            halvings += 1;
        }
        if !(cand_obj <= obj) {
            converged = true;
            break;
        }
        let change = obj - cand_obj;
        beta = cand;
        obj = cand_obj;
        if change <= cfg.tol * (obj.abs() + 1.0) {
            converged = true;
            break;
        }
    }
    if !obj.is_finite() {
        return Err(Error::Numerical("penalized criterion is not finite".into()));
    }
    let scores: Vec<f64> = beta.iter().copied().collect();
    Ok(UpdatedForecast {
        m0,
        latter_rates: latter_rates(model, m0, &scores),
        scores,
        objective_value: obj,
        omega_used: cfg.omega,
        iterations,
        converged,
        ensemble: None,
        ensemble_scores: None,
        count_draws: None,
        interval_labels: model.interval_labels.get(m0..).map(<[String]>::to_vec).unwrap_or_default(),
        seed: None,
    })
}

/// Bootstrap ensemble of updated forecasts.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateEnsemble {
    pub scores: Vec<Vec<f64>>,
    pub latter_rates: Vec<Vec<f64>>,
    pub count_draws: Vec<Vec<u64>>,
}

/// One reweighted solve per bootstrap anchor, all expanded at `base.scores`
/// so a single factorization serves every replicate.
pub fn one_step_bootstrap_update(
    model: &FactorModel,
    partial: &PartialDay,
    base: &UpdatedForecast,
    ts_ensemble_scores: &[Vec<f64>],
    cfg: &PenalizedUpdateConfig,
    seed: u64,
) -> Result<UpdateEnsemble> {
    cfg.validate()?;
    check_update_inputs(model, partial, &base.scores)?;
    if ts_ensemble_scores.is_empty() {
        return Err(Error::InvalidInput("empty bootstrap ensemble".into()));
    }
    let k = model.k();
    if let Some(bad) = ts_ensemble_scores.iter().position(|r| r.len() != k) {
        return Err(Error::Shape(format!("ensemble row {bad} does not have K = {k} scores")));
    }
    if base.m0 != partial.m0() {
        return Err(Error::Shape("base forecast was computed for a different cut".into()));
    }
    let m0 = partial.m0();
    let prob = Problem {
        fe: model.loadings.rows(0, m0).into_owned(),
        y: partial.y(),
        link: model.link,
        omega: base.omega_used,
        ts: &base.scores,
        floor: cfg.weight_floor,
    };
    let (a, fwy) = prob.surrogate(&DVector::from_column_slice(&base.scores))?;
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("surrogate system is not positive definite".into()))?;

    let reps: Vec<(Vec<f64>, Vec<f64>, Vec<u64>)> = ts_ensemble_scores
        .par_iter()
        .enumerate()
        .map(|(b, anchor)| {
            let beta: Vec<f64> = chol.solve(&prob.rhs_with_anchor(&fwy, anchor)).iter().copied().collect();
            let rates = latter_rates(model, m0, &beta);
            let mut rng = split_rng(seed, b as u64);
            let counts = draw_counts(&rates, &mut rng);
            (beta, rates, counts)
        })
        .collect();
    let mut out = UpdateEnsemble {
        scores: Vec::with_capacity(reps.len()),
        latter_rates: Vec::with_capacity(reps.len()),
        count_draws: Vec::with_capacity(reps.len()),
    };
    for (s, r, c) in reps {
        out.scores.push(s);
        out.latter_rates.push(r);
        out.count_draws.push(c);
    }
    Ok(out)
}

/// Rescales the latter part of a base forecast by the ratio of observed to
/// forecast early volume. Returns the latter rates and the ratio.
pub fn hp_update(base_rates: &[f64], partial: &PartialDay) -> Result<(Vec<f64>, f64)> {
    let m0 = partial.m0();
    if m0 >= base_rates.len() {
        return Err(Error::Shape(format!(
            "cut m0 = {m0} leaves no latter intervals of {}",
            base_rates.len()
        )));
    }
    let forecast: f64 = base_rates[..m0].iter().sum();
    if !(forecast > 0.0) {
        return Err(Error::Domain("cumulative early forecast is zero".into()));
    }
    let observed: f64 = partial.early_counts.iter().map(|&c| c as f64).sum();
    let ratio = observed / forecast;
    Ok((base_rates[m0..].iter().map(|r| r * ratio).collect(), ratio))
}

/// Rolling hold-out settings for choosing ω.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaSelection {
    pub aml: AmlConfig,
    /// Number of final history days used as hold-out.
    pub holdout: usize,
    /// Training days preceding each hold-out day.
    pub window: usize,
}

impl OmegaSelection {
    pub fn new(aml: AmlConfig) -> Self {
        Self {
            aml,
            holdout: 50,
            window: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaChoice {
    pub omega: f64,
    /// (ω, mean hold-out RMSE of latter counts) per grid value.
    pub scores: Vec<(f64, f64)>,
}

/// Factor model and score model fitted on `train`, plus the one-day-ahead
/// score forecast.
pub fn fit_ts_forecaster(
    train: &CountMatrix,
    aml: &AmlConfig,
    start: Option<AmlStart>,
) -> Result<(FactorModel, crate::scores::ScoreForecastModel, Vec<f64>)> {
    let fm = fit_factor_model_from(train, aml, start)?;
    let sm = fit_score_model(&fm.scores, train.day_labels())?;
    let ts = forecast_scores(&sm, &sm.last_scores, sm.last_day, 1)?;
    Ok((fm, sm, ts))
}

/// Picks ω from `cfg.omega_grid` by a rolling hold-out on the last
/// `sel.holdout` days of `history`: mean RMSE of updated latter-segment
/// forecasts against realized counts. Near-ties (within 1e-6 relative) go
/// to the larger ω.
pub fn select_omega(
    history: &CountMatrix,
    m0: usize,
    cfg: &PenalizedUpdateConfig,
    sel: &OmegaSelection,
) -> Result<OmegaChoice> {
    cfg.validate()?;
    let (n, m) = (history.n(), history.m());
    if m0 == 0 || m0 >= m {
        return Err(Error::InvalidInput(format!("cut m0 = {m0} outside 1..{m}")));
    }
    if sel.holdout == 0 || sel.window + sel.holdout > n {
        return Err(Error::Infeasible(format!(
            "history of {n} days cannot hold {} training + {} hold-out days",
            sel.window, sel.holdout
        )));
    }
    if cfg.omega_grid.len() == 1 {
        return Ok(OmegaChoice {
            omega: cfg.omega_grid[0],
            scores: vec![(cfg.omega_grid[0], f64::NAN)],
        });
    }
    let aml = sel.aml.clone().with_normalization(Normalization::ScoresOrthonormal);
    let per_day: Vec<Vec<f64>> = (n - sel.holdout..n)
        .into_par_iter()
        .map(|t| {
            let train = history.slice_rows(t - sel.window, t)?;
            let (fm, _, ts) = fit_ts_forecaster(&train, &aml, None)?;
            let partial = PartialDay::from_day(history.row(t), m0, history.day(t))?;
            let actual: Vec<f64> = history.row(t)[m0..].iter().map(|&c| c as f64).collect();
            cfg.omega_grid
                .iter()
                .map(|&w| {
                    let up = penalized_update(&fm, &partial, &ts, &cfg.clone().with_omega(w))?;
                    Ok(rmse(&actual, &up.latter_rates))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let days = per_day.len() as f64;
    let scores: Vec<(f64, f64)> = cfg
        .omega_grid
        .iter()
        .enumerate()
        .map(|(g, &w)| (w, per_day.iter().map(|d| d[g]).sum::<f64>() / days))
        .collect();
    let best = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let omega = scores
        .iter()
        .rev()
        .find(|s| s.1 <= best * (1.0 + OMEGA_TIE))
        .map(|s| s.0)
        .expect("grid is nonempty");
    Ok(OmegaChoice { omega, scores })
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}
