//! Rolling-origin forecast evaluation.
//!
//! For each test day the methods see only the preceding `train_window`
//! days, plus the first `cut` intervals of the test day for updating
//! methods. Errors are measured against hidden rates (simulation) or
//! against oracle staffing built from the realized counts.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aml::{AmlConfig, AmlStart};
use crate::error::{Error, Result};
use crate::model::{CountMatrix, Link, Normalization};
use crate::scores::forecast_rates;
use crate::simgen::{fit_two_way_gaussian, TwoWayKind};
use crate::staffing::StaffingParams;
use crate::stats::{child_seed, column_quantiles, mean, quantile_sorted};
use crate::update::{
    fit_ts_forecaster, hp_update, one_step_bootstrap_update, penalized_update, PartialDay,
    PenalizedUpdateConfig,
};

const TRUTH_FLOOR: f64 = 1e-8;

/// `(RMSE, MRE in percent)` of a forecast against strictly positive truth.
pub fn rmse_mre(truth: &[f64], forecast: &[f64]) -> Result<(f64, f64)> {
    if truth.len() != forecast.len() || truth.is_empty() {
        return Err(Error::Shape(format!(
            "truth has {} entries, forecast {}",
            truth.len(),
            forecast.len()
        )));
    }
    if let Some(t) = truth.iter().find(|t| !(**t >= TRUTH_FLOOR)) {
        return Err(Error::Domain(format!("truth entry {t} is too small for a relative error")));
    }
    let m = truth.len() as f64;
    let (mut sq, mut rel) = (0.0, 0.0);
    for (t, f) in truth.iter().zip(forecast) {
        sq += (f - t) * (f - t);
        rel += (f - t).abs() / t;
    }
    Ok(((sq / m).sqrt(), 100.0 * rel / m))
}

/// Sorted `(value, F(value))` steps; ties collapse into one step.
pub fn empirical_cdf(samples: &[f64]) -> Result<Vec<(f64, f64)>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empirical CDF of an empty sample".into()));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("NaN sample".into()));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let p = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = p,
            _ => out.push((*x, p)),
        }
    }
    Ok(out)
}

pub fn cdf_csv(steps: &[(f64, f64)]) -> String {
    let mut out = String::from("value,cdf\n");
    for (v, p) in steps {
        out.push_str(&format!("{v},{p}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalStats {
    /// Per-day fraction of intervals whose truth lies in the band.
    pub coverage: Vec<f64>,
    /// Per-day mean band width.
    pub width: Vec<f64>,
    pub mean_coverage: f64,
    pub mean_width: f64,
}

/// Central `level` bands of per-day ensembles (n_boot × m each) against
/// per-day truth.
pub fn interval_report(ensembles: &[Vec<Vec<f64>>], truth: &[Vec<f64>], level: f64) -> Result<IntervalStats> {
    if ensembles.len() != truth.len() || truth.is_empty() {
        return Err(Error::Shape(format!(
            "{} ensembles for {} truth rows",
            ensembles.len(),
            truth.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level {level} outside (0, 1)")));
    }
    let mut coverage = Vec::with_capacity(truth.len());
    let mut width = Vec::with_capacity(truth.len());
    for (ens, t) in ensembles.iter().zip(truth) {
        let (c, w) = band_stats(ens, t, level)?;
        coverage.push(c);
        width.push(w);
    }
    Ok(IntervalStats {
        mean_coverage: mean(&coverage),
        mean_width: mean(&width),
        coverage,
        width,
    })
}

fn band_stats(ensemble: &[Vec<f64>], truth: &[f64], level: f64) -> Result<(f64, f64)> {
    if ensemble.is_empty() || ensemble.iter().any(|r| r.len() != truth.len()) {
        return Err(Error::Shape("ensemble rows do not match the truth length".into()));
    }
    let tail = (1.0 - level) / 2.0;
    let lo = column_quantiles(ensemble, tail);
    let hi = column_quantiles(ensemble, 1.0 - tail);
    let m = truth.len() as f64;
    let covered = truth
        .iter()
        .enumerate()
        .filter(|(j, t)| lo[*j] <= **t && **t <= hi[*j])
        .count() as f64;
    let width: f64 = lo.iter().zip(&hi).map(|(l, h)| h - l).sum();
    Ok((covered / m, width / m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Factor model with K factors and time-series score forecasts.
    Ts(usize),
    Mul,
    Add,
    /// MUL forecast rescaled by the early-volume ratio.
    Hpm,
    /// ADD forecast rescaled by the early-volume ratio.
    Hpa,
    /// Penalized update of the K-factor TS forecast.
    Pml(usize),
}

impl Method {
    fn factors(self) -> Option<usize> {
        match self {
            Method::Ts(k) | Method::Pml(k) => Some(k),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Ts(k) => write!(f, "TS{k}"),
            Method::Pml(k) => write!(f, "PML{k}"),
            Method::Mul => f.write_str("MUL"),
            Method::Add => f.write_str("ADD"),
            Method::Hpm => f.write_str("HPM"),
            Method::Hpa => f.write_str("HPA"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let u = s.trim().to_ascii_uppercase();
        let k = |rest: &str| -> Result<usize> {
            rest.parse::<usize>()
                .ok()
                .filter(|k| *k >= 1)
                .ok_or_else(|| Error::InvalidInput(format!("bad factor count in method {s:?}")))
        };
        match u.as_str() {
            "MUL" => Ok(Method::Mul),
            "ADD" => Ok(Method::Add),
            "HPM" => Ok(Method::Hpm),
            "HPA" => Ok(Method::Hpa),
            _ if u.starts_with("PML") => Ok(Method::Pml(k(&u[3..])?)),
            _ if u.starts_with("TS") => Ok(Method::Ts(k(&u[2..])?)),
            _ => Err(Error::InvalidInput(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RollingSpec {
    pub train_window: usize,
    pub test_days: usize,
    /// Refit the factor model on every window; otherwise loadings from the
    /// first window are kept and later days' scores are regressed on them.
    pub refit_each_day: bool,
    pub methods: Vec<Method>,
    /// Updating cut m0; `None` makes the updating methods equal their base.
    pub cut: Option<usize>,
    /// Intervals before this index are never scored.
    pub mask_from: Option<usize>,
    pub update: PenalizedUpdateConfig,
    /// Bootstrap size for TS/PML ensembles.
    pub n_boot: Option<usize>,
    pub level: f64,
    pub link: Link,
    /// Iteration controls for the factor fits (K and link are overridden).
    pub aml: AmlConfig,
}

impl RollingSpec {
    pub fn new(train_window: usize, test_days: usize, methods: Vec<Method>) -> Self {
        Self {
            train_window,
            test_days,
            refit_each_day: true,
            methods,
            cut: None,
            mask_from: None,
            update: PenalizedUpdateConfig::default(),
            n_boot: None,
            level: 0.95,
            link: Link::Sqrt,
            aml: AmlConfig::default(),
        }
    }

    fn validate(&self, counts: &CountMatrix) -> Result<()> {
        let (n, m) = (counts.n(), counts.m());
        if self.methods.is_empty() {
            return Err(Error::InvalidInput("no methods requested".into()));
        }
        if self.test_days == 0 || self.train_window + self.test_days > n {
            return Err(Error::Infeasible(format!(
                "{} training + {} test days exceed the {n} available",
                self.train_window, self.test_days
            )));
        }
        if let Some(c) = self.cut {
            if c >= m {
                return Err(Error::InvalidInput(format!("cut {c} leaves no intervals of {m}")));
            }
        }
        if self.scored_from() >= m {
            return Err(Error::InvalidInput("masking leaves no intervals to score".into()));
        }
        if self.n_boot == Some(0) {
            return Err(Error::InvalidInput("n_boot must be at least 1".into()));
        }
        self.update.validate()
    }

    /// First scored interval.
    pub fn scored_from(&self) -> usize {
        self.cut.unwrap_or(0).max(self.mask_from.unwrap_or(0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub replicate: usize,
    /// Row index of the forecast day.
    pub day: usize,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub metric: String,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Forecasts of one method for one day, over the scored intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct DayForecast {
    pub day: usize,
    pub method: Method,
    pub point: Vec<f64>,
    pub ensemble: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub records: Vec<Record>,
    /// Kept for inspection (e.g. leakage checks); not serialized.
    pub forecasts: Vec<DayForecast>,
}

impl MetricReport {
    pub fn with_replicate(mut self, replicate: usize) -> Self {
        self.records.iter_mut().for_each(|r| r.replicate = replicate);
        self
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.records.extend(other.records);
        self.forecasts.extend(other.forecasts);
    }

    /// Per-day values of one metric for one method, in record order.
    pub fn values(&self, method: &str, metric: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.method == method && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn mean_of(&self, method: &str, metric: &str) -> f64 {
        mean(&self.values(method, metric))
    }

    pub fn summaries(&self) -> Vec<Summary> {
        let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in &self.records {
            groups.entry((r.method.clone(), r.metric.clone())).or_default().push(r.value);
        }
        groups
            .into_iter()
            .map(|((method, metric), mut v)| {
                v.sort_by(f64::total_cmp);
                Summary {
                    method,
                    metric,
                    count: v.len(),
                    mean: mean(&v),
                    median: quantile_sorted(&v, 0.5),
                    q1: quantile_sorted(&v, 0.25),
                    q3: quantile_sorted(&v, 0.75),
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("replicate,day,method,metric,value\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{},{}\n", r.replicate, r.day, r.method, r.metric, r.value));
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summaries())?)
    }
}

fn oracle_agents(counts: &[u64], params: &StaffingParams, theta: f64) -> Vec<f64> {
    counts.iter().map(|&y| params.agents(theta, y as f64)).collect()
}

/// Staffing computed as if the realized counts were the rates.
pub fn oracle_staffing(counts: &[u64], params: &StaffingParams) -> Result<Vec<f64>> {
    Ok(oracle_agents(counts, params, params.theta()?))
}

/// How forecasts are compared.
enum Truth<'a> {
    Rates(&'a [Vec<f64>]),
    Staffing(StaffingParams, f64),
}

impl Truth<'_> {
    fn for_day(&self, counts: &CountMatrix, t: usize, from: usize) -> Vec<f64> {
        match self {
            Truth::Rates(r) => r[t][from..].to_vec(),
            Truth::Staffing(p, theta) => oracle_agents(&counts.row(t)[from..], p, *theta),
        }
    }

    fn transform(&self, rates: &[f64]) -> Vec<f64> {
        match self {
            Truth::Rates(_) => rates.to_vec(),
            Truth::Staffing(p, theta) => rates.iter().map(|&r| p.agents(*theta, r)).collect(),
        }
    }

    fn errors(&self, truth: &[f64], forecast: &[f64]) -> Result<(f64, f64)> {
        match self {
            Truth::Rates(_) => rmse_mre(truth, forecast),
            Truth::Staffing(..) => {
                // Oracle staffing is zero on empty intervals; those are left
                // out of the relative error only.
                let m = truth.len() as f64;
                let sq: f64 = truth.iter().zip(forecast).map(|(t, f)| (f - t) * (f - t)).sum();
                let pos: Vec<(f64, f64)> = truth
                    .iter()
                    .zip(forecast)
                    .filter(|(t, _)| **t >= TRUTH_FLOOR)
                    .map(|(t, f)| (*t, *f))
                    .collect();
                let mre = if pos.is_empty() {
                    f64::NAN
                } else {
                    100.0 * pos.iter().map(|(t, f)| (f - t).abs() / t).sum::<f64>() / pos.len() as f64
                };
                Ok(((sq / m).sqrt(), mre))
            }
        }
    }
}

/// Per-K factor-model state carried across days.
struct TsState {
    k: usize,
    loadings: Option<nalgebra::DMatrix<f64>>,
}

/// Runs the rolling exercise over the last `spec.test_days` rows.
///
/// `hidden_rates` (n rows of m) selects rate mode; otherwise `staffing`
/// must be given and forecasts are scored as staffing levels against
/// oracle staffing from the realized counts.
pub fn run_rolling_exercise(
    counts: &CountMatrix,
    hidden_rates: Option<&[Vec<f64>]>,
    spec: &RollingSpec,
    staffing: Option<&StaffingParams>,
    seed: u64,
) -> Result<MetricReport> {
    spec.validate(counts)?;
    let (n, m) = (counts.n(), counts.m());
    let truth = match (hidden_rates, staffing) {
        (Some(r), _) => {
            if r.len() != n || r.iter().any(|row| row.len() != m) {
                return Err(Error::Shape("hidden rates do not match the counts".into()));
            }
            Truth::Rates(r)
        }
        (None, Some(p)) => Truth::Staffing(*p, p.theta()?),
        (None, None) => {
            return Err(Error::InvalidInput(
                "need hidden rates or staffing parameters to score against".into(),
            ))
        }
    };
    let from = spec.scored_from();
    let cut = spec.cut.unwrap_or(0);

    let mut ks: Vec<usize> = spec.methods.iter().filter_map(|m| m.factors()).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut states: Vec<TsState> = ks.iter().map(|&k| TsState { k, loadings: None }).collect();
    let needs = |pred: fn(&Method) -> bool| spec.methods.iter().any(pred);
    let need_mul = needs(|m| matches!(m, Method::Mul | Method::Hpm));
    let need_add = needs(|m| matches!(m, Method::Add | Method::Hpa));

    let mut report = MetricReport::default();
    for t in n - spec.test_days..n {
        let start = t - spec.train_window;
        let train = counts.slice_rows(start, t)?;
        debug_assert!(train.n() == spec.train_window && start + train.n() == t);
        let day_seed = child_seed(seed, t as u64);
        let partial = if cut > 0 {
            Some(PartialDay::from_day(counts.row(t), cut, counts.day(t))?)
        } else {
            None
        };
        let mut day_out: Vec<DayForecast> = Vec::new();

        for st in &mut states {
            let aml = AmlConfig {
                k: st.k,
                link: spec.link,
                normalization: Normalization::ScoresOrthonormal,
                ..spec.aml.clone()
            };
            let (fm, sm, ts) = if spec.refit_each_day || st.loadings.is_none() {
                let warm = st.loadings.clone().map(AmlStart::from_loadings);
                let out = fit_ts_forecaster(&train, &aml, warm)?;
                st.loadings = Some(out.0.loadings.clone());
                out
            } else {
                fixed_loadings_forecaster(&train, &aml, st.loadings.as_ref().unwrap())?
            };
            let fc = forecast_rates(&fm, &sm, 1, spec.n_boot, child_seed(day_seed, st.k as u64))?;
            if spec.methods.contains(&Method::Ts(st.k)) {
                day_out.push(DayForecast {
                    day: t,
                    method: Method::Ts(st.k),
                    point: fc.point_rates.as_slice()[from..].to_vec(),
                    ensemble: fc
                        .ensemble
                        .as_ref()
                        .map(|e| e.iter().map(|r| r[from..].to_vec()).collect()),
                });
            }
            if spec.methods.contains(&Method::Pml(st.k)) {
                let (point, ensemble) = match &partial {
                    None => (
                        fc.point_rates.as_slice()[from..].to_vec(),
                        fc.ensemble
                            .as_ref()
                            .map(|e| e.iter().map(|r| r[from..].to_vec()).collect()),
                    ),
                    Some(p) => {
                        let up = penalized_update(&fm, p, &ts, &spec.update)?;
                        let ens = match &fc.ensemble_scores {
                            Some(s) => Some(
                                one_step_bootstrap_update(
                                    &fm,
                                    p,
                                    &up,
                                    s,
                                    &spec.update,
                                    child_seed(day_seed, 1000 + st.k as u64),
                                )?
                                .latter_rates
                                .into_iter()
                                .map(|r| r[from - cut..].to_vec())
                                .collect(),
                            ),
                            None => None,
                        };
                        (up.latter_rates[from - cut..].to_vec(), ens)
                    }
                };
                day_out.push(DayForecast {
                    day: t,
                    method: Method::Pml(st.k),
                    point,
                    ensemble,
                });
            }
        }

        for (needed, kind, base, hp) in [
            (need_mul, TwoWayKind::Mul, Method::Mul, Method::Hpm),
            (need_add, TwoWayKind::Add, Method::Add, Method::Hpa),
        ] {
            if !needed {
                continue;
            }
            let rates = fit_two_way_gaussian(&train, kind)?.forecast(1)?;
            if spec.methods.contains(&base) {
                day_out.push(DayForecast {
                    day: t,
                    method: base,
                    point: rates[from..].to_vec(),
                    ensemble: None,
                });
            }
            if spec.methods.contains(&hp) {
                let point = match &partial {
                    None => rates[from..].to_vec(),
                    Some(p) => hp_update(&rates, p)?.0[from - cut..].to_vec(),
                };
                day_out.push(DayForecast {
                    day: t,
                    method: hp,
                    point,
                    ensemble: None,
                });
            }
        }

        let actual = truth.for_day(counts, t, from);
        for method in &spec.methods {
            let f = day_out
                .iter()
                .find(|d| d.method == *method)
                .expect("every requested method produced a forecast");
            let (rmse, mre) = truth.errors(&actual, &truth.transform(&f.point))?;
            let name = method.to_string();
            let mut push = |metric: &str, value: f64| {
                report.records.push(Record {
                    replicate: 0,
                    day: t,
                    method: name.clone(),
                    metric: metric.into(),
                    value,
                })
            };
            push("rmse", rmse);
            push("mre", mre);
            if let Some(ens) = &f.ensemble {
                let transformed: Vec<Vec<f64>> = ens.iter().map(|r| truth.transform(r)).collect();
                let (c, w) = band_stats(&transformed, &actual, spec.level)?;
                push("coverage", c);
                push("width", w);
            }
        }
        report.forecasts.extend(day_out);
    }
    Ok(report)
}

/// Forecaster with loadings held fixed: each training day's scores are the
/// Poisson regression of its counts on the loadings.
fn fixed_loadings_forecaster(
    train: &CountMatrix,
    aml: &AmlConfig,
    loadings: &nalgebra::DMatrix<f64>,
) -> Result<(crate::model::FactorModel, crate::scores::ScoreForecastModel, Vec<f64>)> {
    use crate::glm::{GlmOptions, PoissonRegression};
    let reg = PoissonRegression::new(loadings.clone(), aml.link)?;
    let opts = GlmOptions {
        max_iters: aml.glm_max_iters,
        tol: aml.glm_tol,
        weight_floor: aml.weight_floor,
    };
    let k = loadings.ncols();
    let mut scores = nalgebra::DMatrix::zeros(train.n(), k);
    for i in 0..train.n() {
        let fit = reg.fit(&train.row_f64(i), None, &opts)?;
        for (j, b) in fit.beta.iter().enumerate() {
            scores[(i, j)] = *b;
        }
    }
    let y = train.to_matrix();
    let fitted = (&scores * loadings.transpose()).map(|e| aml.link.inverse(e));
    let deviance = crate::model::poisson_deviance(y.as_slice(), fitted.as_slice())?;
    let fm = crate::model::FactorModel {
        link: aml.link,
        scores,
        loadings: loadings.clone(),
        normalization: Normalization::ScoresOrthonormal,
        deviance,
        iterations_used: 0,
        converged: true,
        warnings: vec!["loadings held fixed; scores are not re-orthonormalized".into()],
        interval_labels: train.interval_labels().to_vec(),
    };
    let sm = crate::scores::fit_score_model(&fm.scores, train.day_labels())?;
    let ts = crate::scores::forecast_scores(&sm, &sm.last_scores, sm.last_day, 1)?;
    Ok((fm, sm, ts))
}
