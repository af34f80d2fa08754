//! Time-series models for the factor-score series and the resulting rate
//! forecasts.
//!
//! Every score series gets a varying-intercept AR(1):
//! `β_i = a(d_{i−1}) + b β_{i−1} + ε_i`, where the intercept depends on the
//! weekday of the previous day. Forecast ensembles come from a path-wise
//! residual bootstrap, run independently per factor.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};
use crate::model::{apply_factor_model, FactorModel, RateProfile, Weekday};
use crate::stats::{column_quantiles, split_rng};

/// Fitted AR(1) of one factor-score series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorScoreModel {
    /// `a(d)` indexed by weekday (Monday first).
    pub intercepts: [f64; 5],
    pub slope: f64,
    /// One residual per transition, in time order.
    pub residuals: Vec<f64>,
    pub residual_sd: f64,
    /// Set when |slope| ≥ 1.
    pub nonstationary: bool,
}

impl FactorScoreModel {
    pub fn step(&self, previous: f64, previous_day: Weekday) -> f64 {
        self.intercepts[previous_day.index()] + self.slope * previous
    }
}

/// Score models for all K factors plus the state needed to forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreForecastModel {
    pub factors: Vec<FactorScoreModel>,
    /// Scores of the last observed day.
    pub last_scores: Vec<f64>,
    pub last_day: Weekday,
}

impl ScoreForecastModel {
    pub fn k(&self) -> usize {
        self.factors.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        if model.last_scores.len() != model.factors.len() {
            return Err(Error::Shape("last_scores length differs from factor count".into()));
        }
        Ok(model)
    }
}

/// Sufficient statistics of a one-slope-per-group regression after
/// removing group means (the intercept dummies).
struct Centered {
    /// Per group: (count, Σx, Σy, Σx̃², Σx̃ỹ, Σỹ²).
    groups: [(usize, f64, f64, f64, f64, f64); 5],
}

impl Centered {
    fn new(series: &[f64], days: &[Weekday]) -> Self {
        let mut groups = [(0usize, 0.0, 0.0, 0.0, 0.0, 0.0); 5];
        // Pass 1: group sums.
        for i in 1..series.len() {
            let g = &mut groups[days[i - 1].index()];
            g.0 += 1;
            g.1 += series[i - 1];
            g.2 += series[i];
        }
        // Pass 2: centered cross products.
        for i in 1..series.len() {
            let g = &mut groups[days[i - 1].index()];
            let c = g.0 as f64;
            let xt = series[i - 1] - g.1 / c;
            let yt = series[i] - g.2 / c;
            g.3 += xt * xt;
            g.4 += xt * yt;
            g.5 += yt * yt;
        }
        Self { groups }
    }

    fn missing_day(&self) -> Option<Weekday> {
        Weekday::ALL.into_iter().find(|d| self.groups[d.index()].0 == 0)
    }

    fn pooled(&self) -> (f64, f64, f64) {
        self.groups.iter().fold((0.0, 0.0, 0.0), |acc, g| {
            (acc.0 + g.3, acc.1 + g.4, acc.2 + g.5)
        })
    }
}

fn fit_series(series: &[f64], days: &[Weekday]) -> Result<FactorScoreModel> {
    let stats = Centered::new(series, days);
    if let Some(d) = stats.missing_day() {
        return Err(Error::RankDeficient(format!(
            "no transition from a {d} (code {}): its intercept is not estimable",
            d.code()
        )));
    }
    let (sxx, sxy, _) = stats.pooled();
    let scale = series.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    // A lag that is a function of the weekday alone carries no slope information.
    let slope = if sxx > 1e-14 * scale { sxy / sxx } else { 0.0 };
    let mut intercepts = [0.0; 5];
    for d in Weekday::ALL {
        let g = &stats.groups[d.index()];
        let c = g.0 as f64;
        intercepts[d.index()] = g.2 / c - slope * g.1 / c;
    }
    let residuals: Vec<f64> = (1..series.len())
        .map(|i| series[i] - intercepts[days[i - 1].index()] - slope * series[i - 1])
        .collect();
    let dof = residuals.len().saturating_sub(6).max(1);
    let rss: f64 = residuals.iter().map(|e| e * e).sum();
    Ok(FactorScoreModel {
        intercepts,
        slope,
        residual_sd: (rss / dof as f64).sqrt(),
        residuals,
        nonstationary: slope.abs() >= 1.0,
    })
}

fn check_series(n: usize, days: &[Weekday]) -> Result<()> {
    if days.len() != n {
        return Err(Error::Shape(format!("{} day labels for {n} scores", days.len())));
    }
    if n < 8 {
        return Err(Error::InvalidInput(format!(
            "need at least 8 observations per score series, got {n}"
        )));
    }
    Ok(())
}

/// Fits one AR(1) per column of the n×K score matrix by least squares on
/// weekday intercept dummies and the lagged score.
pub fn fit_score_model(scores: &DMatrix<f64>, day_labels: &[Weekday]) -> Result<ScoreForecastModel> {
    let n = scores.nrows();
    check_series(n, day_labels)?;
    let factors = scores
        .column_iter()
        .map(|c| {
            let series: Vec<f64> = c.iter().copied().collect();
            fit_series(&series, day_labels)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreForecastModel {
        factors,
        last_scores: scores.row(n - 1).iter().copied().collect(),
        last_day: day_labels[n - 1],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FTest {
    pub f_stat: f64,
    pub p_value: f64,
    pub df1: usize,
    pub df2: usize,
}

/// F-test of weekday-specific slopes against one common slope (both models
/// with weekday intercepts).
pub fn nested_slope_f_test(series: &[f64], day_labels: &[Weekday]) -> Result<FTest> {
    check_series(series.len(), day_labels)?;
    let stats = Centered::new(series, day_labels);
    if let Some(d) = stats.missing_day() {
        return Err(Error::RankDeficient(format!("no transition from a {d}")));
    }
    let groups = 5;
    let obs = series.len() - 1;
    if obs <= 2 * groups {
        return Err(Error::Infeasible(format!(
            "{obs} transitions cannot support {} parameters",
            2 * groups
        )));
    }
    let (sxx, sxy, syy) = stats.pooled();
    let rss_small = if sxx > 0.0 { syy - sxy * sxy / sxx } else { syy };
    let rss_large: f64 = stats
        .groups
        .iter()
        .map(|g| if g.3 > 0.0 { g.5 - g.4 * g.4 / g.3 } else { g.5 })
        .sum();
    let df1 = groups - 1;
    let df2 = obs - 2 * groups;
    let diff = rss_small - rss_large;
    // Differences at rounding level of the centered total mean identical fits.
    let (f_stat, p_value) = if diff <= 1e-10 * syy.max(f64::MIN_POSITIVE) {
        (0.0, 1.0)
    } else if rss_large <= 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        let f = (diff / df1 as f64) / (rss_large / df2 as f64);
        let dist = FisherSnedecor::new(df1 as f64, df2 as f64)
            .map_err(|e| Error::Numerical(e.to_string()))?;
        (f, dist.sf(f).clamp(0.0, 1.0))
    };
    Ok(FTest {
        f_stat,
        p_value,
        df1,
        df2,
    })
}

/// Deterministic h-step forecast of all factor scores (residuals set to zero).
pub fn forecast_scores(
    model: &ScoreForecastModel,
    last_scores: &[f64],
    last_day: Weekday,
    h: usize,
) -> Result<Vec<f64>> {
    if h == 0 {
        return Err(Error::InvalidInput("horizon must be at least 1".into()));
    }
    if last_scores.len() != model.k() {
        return Err(Error::Shape(format!(
            "{} last scores for {} factors",
            last_scores.len(),
            model.k()
        )));
    }
    let mut state = last_scores.to_vec();
    let mut day = last_day;
    for _ in 0..h {
        for (s, f) in state.iter_mut().zip(&model.factors) {
            *s = f.step(*s, day);
        }
        day = day.next();
    }
    Ok(state)
}

/// Point and (optionally) bootstrap forecast of a future rate profile.
#[derive(Debug, Clone, PartialEq)]
pub struct RateForecast {
    pub h: usize,
    /// Weekday of the forecast target.
    pub day: Weekday,
    pub point_scores: Vec<f64>,
    pub point_rates: RateProfile,
    /// n_boot × m bootstrap rate profiles.
    pub ensemble: Option<Vec<Vec<f64>>>,
    /// n_boot × K bootstrap score vectors.
    pub ensemble_scores: Option<Vec<Vec<f64>>>,
    /// One Poisson count profile per ensemble row.
    pub count_draws: Option<Vec<Vec<u64>>>,
    pub seed: u64,
    pub interval_labels: Vec<String>,
}

impl RateForecast {
    pub fn n_boot(&self) -> Option<usize> {
        self.ensemble.as_ref().map(Vec::len)
    }

    /// Per-interval ensemble quantile, or the point rate when no ensemble exists.
    pub fn rate_quantile(&self, p: f64) -> Vec<f64> {
        match &self.ensemble {
            Some(rows) => column_quantiles(rows, p),
            None => self.point_rates.as_slice().to_vec(),
        }
    }

    /// The point count forecast, which coincides with the point rate forecast.
    pub fn point_counts(&self) -> &[f64] {
        self.point_rates.as_slice()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&RateForecastDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: RateForecastDoc = serde_json::from_str(text)?;
        Ok(RateForecast {
            h: doc.h,
            day: doc.day,
            point_scores: doc.point_scores,
            point_rates: doc.point_rates,
            ensemble: doc.ensemble,
            ensemble_scores: doc.ensemble_scores,
            count_draws: None,
            seed: doc.seed,
            interval_labels: doc.interval_labels,
        })
    }

    /// Ensemble as CSV, one row per replicate.
    pub fn ensemble_csv(&self) -> Option<String> {
        let rows = self.ensemble.as_ref()?;
        let m = self.point_rates.len();
        let mut out = String::from("replicate");
        for j in 0..m {
            out.push(',');
            out.push_str(self.interval_labels.get(j).map_or(&j.to_string(), |s| s));
        }
        out.push('\n');
        for (b, r) in rows.iter().enumerate() {
            out.push_str(&b.to_string());
            for v in r {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        Some(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct Quantiles {
    pub p025: Vec<f64>,
    pub p05: Vec<f64>,
    pub p50: Vec<f64>,
    pub p95: Vec<f64>,
    pub p975: Vec<f64>,
}

impl Quantiles {
    pub(crate) fn of(rows: Option<&Vec<Vec<f64>>>, point: &[f64]) -> Self {
        let q = |p: f64| match rows {
            Some(r) => column_quantiles(r, p),
            None => point.to_vec(),
        };
        Quantiles {
            p025: q(0.025),
            p05: q(0.05),
            p50: q(0.5),
            p95: q(0.95),
            p975: q(0.975),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RateForecastDoc {
    h: usize,
    day: Weekday,
    point_scores: Vec<f64>,
    point_rates: RateProfile,
    quantiles: Quantiles,
    seed: u64,
    n_boot: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    interval_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ensemble_scores: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ensemble: Option<Vec<Vec<f64>>>,
}

impl From<&RateForecast> for RateForecastDoc {
    fn from(f: &RateForecast) -> Self {
        RateForecastDoc {
            h: f.h,
            day: f.day,
            point_scores: f.point_scores.clone(),
            point_rates: f.point_rates.clone(),
            quantiles: Quantiles::of(f.ensemble.as_ref(), f.point_rates.as_slice()),
            seed: f.seed,
            n_boot: f.n_boot(),
            interval_labels: f.interval_labels.clone(),
            ensemble_scores: f.ensemble_scores.clone(),
            ensemble: f.ensemble.clone(),
        }
    }
}

/// One bootstrap path of all factor scores over the horizon; every factor
/// and every step draws its own residual.
fn bootstrap_path<R: Rng>(
    model: &ScoreForecastModel,
    h: usize,
    rng: &mut R,
) -> Vec<f64> {
    let mut state = model.last_scores.clone();
    let mut day = model.last_day;
    for _ in 0..h {
        for (s, f) in state.iter_mut().zip(&model.factors) {
            let e = if f.residuals.is_empty() {
                0.0
            } else {
                f.residuals[rng.random_range(0..f.residuals.len())]
            };
            *s = f.step(*s, day) + e;
        }
        day = day.next();
    }
    state
}

/// Draws one Poisson count per rate.
pub fn draw_counts<R: Rng>(rates: &[f64], rng: &mut R) -> Vec<u64> {
    rates
        .iter()
        .map(|&l| match Poisson::new(l) {
            Ok(p) => p.sample(rng) as u64,
            Err(_) => 0,
        })
        .collect()
}

/// Rate-profile forecast `h` days past the last fitted day.
///
/// With `n_boot = Some(B)` the result also carries B bootstrap rate
/// profiles, their score vectors, and one simulated count profile each.
/// Replicate b uses stream b of `seed`, so the ensemble is reproducible and
/// independent of thread scheduling.
pub fn forecast_rates(
    factor_model: &FactorModel,
    score_model: &ScoreForecastModel,
    h: usize,
    n_boot: Option<usize>,
    seed: u64,
) -> Result<RateForecast> {
    if factor_model.k() != score_model.k() {
        return Err(Error::Shape(format!(
            "factor model has K = {}, score model has K = {}",
            factor_model.k(),
            score_model.k()
        )));
    }
    if n_boot == Some(0) {
        return Err(Error::InvalidInput("n_boot must be at least 1".into()));
    }
    let point_scores = forecast_scores(score_model, &score_model.last_scores, score_model.last_day, h)?;
    let point_rates = apply_factor_model(factor_model, &point_scores)?;

    let (ensemble, ensemble_scores, count_draws) = match n_boot {
        None => (None, None, None),
        Some(b) => {
            let reps: Vec<(Vec<f64>, Vec<f64>, Vec<u64>)> = (0..b)
                .into_par_iter()
                .map(|rep| {
                    let mut rng = split_rng(seed, rep as u64);
                    let scores = bootstrap_path(score_model, h, &mut rng);
                    let rates = apply_factor_model(factor_model, &scores)?.into_vec();
                    let counts = draw_counts(&rates, &mut rng);
                    Ok((scores, rates, counts))
                })
                .collect::<Result<_>>()?;
            let mut s = Vec::with_capacity(b);
            let mut r = Vec::with_capacity(b);
            let mut c = Vec::with_capacity(b);
            for (scores, rates, counts) in reps {
                s.push(scores);
                r.push(rates);
                c.push(counts);
            }
            (Some(r), Some(s), Some(c))
        }
    };

    Ok(RateForecast {
        h,
        day: score_model.last_day.advance(h),
        point_scores,
        point_rates,
        ensemble,
        ensemble_scores,
        count_draws,
        seed,
        interval_labels: factor_model.interval_labels.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Link, Normalization};

    fn cycle(n: usize) -> Vec<Weekday> {
        (0..n).map(|i| Weekday::ALL[i % 5]).collect()
    }

    fn model_with(intercepts: [f64; 5], slope: f64, residuals: Vec<f64>) -> FactorScoreModel {
        FactorScoreModel {
            intercepts,
            slope,
            residuals,
            residual_sd: 0.0,
            nonstationary: slope.abs() >= 1.0,
        }
    }

    #[test]
    fn noiseless_ar1_recovery() {
        let days = cycle(30);
        let mut s = vec![1.7];
        for i in 1..30 {
            s.push(0.5 * s[i - 1]);
        }
        let m = fit_score_model(&DMatrix::from_column_slice(30, 1, &s), &days).unwrap();
        let f = &m.factors[0];
        assert!((f.slope - 0.5).abs() < 1e-10);
        assert!(f.intercepts.iter().all(|a| a.abs() < 1e-10));
        assert!(!f.nonstationary);
    }

    #[test]
    fn residuals_are_centered() {
        let days = cycle(40);
        let s: Vec<f64> = (0..40).map(|i| ((i * 17 % 13) as f64).sin() + i as f64 * 0.01).collect();
        let m = fit_score_model(&DMatrix::from_column_slice(40, 1, &s), &days).unwrap();
        let r = &m.factors[0].residuals;
        assert_eq!(r.len(), 39);
        assert!(r.iter().sum::<f64>().abs() / 39.0 < 1e-8);
    }

    #[test]
    fn seasonal_series_without_slope_information() {
        // β_i = d_{i−1}: the lag is a function of the weekday, so b̂ = 0.
        let days = cycle(25);
        let s: Vec<f64> = (0..25)
            .map(|i| if i == 0 { 5.0 } else { days[i - 1].code() as f64 })
            .collect();
        let m = fit_score_model(&DMatrix::from_column_slice(25, 1, &s), &days).unwrap();
        for d in Weekday::ALL {
            let fc = forecast_scores(&m, &[123.0], d, 1).unwrap();
            assert!((fc[0] - d.code() as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn missing_weekday_is_named() {
        let days: Vec<Weekday> = (0..12).map(|i| Weekday::ALL[i % 4]).collect();
        let s: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let err = fit_score_model(&DMatrix::from_column_slice(12, 1, &s), &days).unwrap_err();
        assert!(err.to_string().contains("Fri"), "{err}");
        assert!(fit_score_model(&DMatrix::zeros(5, 1), &cycle(5)).is_err());
    }

    #[test]
    fn forecast_recursion_examples() {
        let base = ScoreForecastModel {
            factors: vec![model_with([1., 2., 3., 4., 5.], 0.0, vec![])],
            last_scores: vec![0.0],
            last_day: Weekday::ALL[0],
        };
        let wed = Weekday::new(3).unwrap();
        assert_eq!(forecast_scores(&base, &[99.0], wed, 1).unwrap(), vec![3.0]);

        let rw = ScoreForecastModel {
            factors: vec![model_with([0.0; 5], 1.0, vec![]); 2],
            last_scores: vec![0.0, 0.0],
            last_day: wed,
        };
        assert_eq!(forecast_scores(&rw, &[2.5, -1.0], wed, 3).unwrap(), vec![2.5, -1.0]);

        let half = ScoreForecastModel {
            factors: vec![model_with([1., 2., 3., 4., 5.], 0.5, vec![])],
            last_scores: vec![2.0],
            last_day: wed,
        };
        assert_eq!(forecast_scores(&half, &[2.0], wed, 1).unwrap(), vec![4.0]);
        // h = 2 feeds the Thursday intercept: 4 + 0.5·4 = 6.
        assert_eq!(forecast_scores(&half, &[2.0], wed, 2).unwrap(), vec![6.0]);
        assert!(forecast_scores(&half, &[2.0], wed, 0).is_err());
    }

    #[test]
    fn f_test_identical_fits() {
        // Every weekday group has the same slope exactly: both models fit equally.
        let days = cycle(31);
        let mut s = vec![1.0];
        for i in 1..31 {
            s.push(0.3 + 0.4 * s[i - 1]);
        }
        let t = nested_slope_f_test(&s, &days).unwrap();
        assert_eq!(t.f_stat, 0.0);
        assert_eq!(t.p_value, 1.0);
        assert_eq!((t.df1, t.df2), (4, 31 - 11));
    }

    fn toy_factor_model() -> FactorModel {
        FactorModel {
            link: Link::Sqrt,
            scores: DMatrix::zeros(2, 2),
            loadings: DMatrix::from_row_slice(3, 2, &[3.0, 0.5, 4.0, -0.5, 5.0, 0.0]),
            normalization: Normalization::ScoresOrthonormal,
            deviance: 0.0,
            iterations_used: 0,
            converged: true,
            warnings: vec![],
            interval_labels: vec!["a".into(), "b".into(), "c".into()],
        }
    }

    #[test]
    fn degenerate_bootstrap_matches_point() {
        let fm = toy_factor_model();
        let sm = ScoreForecastModel {
            factors: vec![
                model_with([1.0; 5], 0.2, vec![0.0; 10]),
                model_with([0.1; 5], -0.3, vec![0.0; 10]),
            ],
            last_scores: vec![1.0, 0.5],
            last_day: Weekday::ALL[4],
        };
        let none = forecast_rates(&fm, &sm, 2, None, 1).unwrap();
        assert!(none.ensemble.is_none());
        let f = forecast_rates(&fm, &sm, 2, Some(50), 1).unwrap();
        assert_eq!(f.point_rates, none.point_rates);
        for row in f.ensemble.as_ref().unwrap() {
            assert_eq!(row.as_slice(), f.point_rates.as_slice());
        }
        assert_eq!(f.day.code(), 2);
        assert!(forecast_rates(&fm, &sm, 1, Some(0), 1).is_err());
    }

    #[test]
    fn ensemble_is_reproducible_and_json_round_trips() {
        let fm = toy_factor_model();
        let sm = ScoreForecastModel {
            factors: vec![
                model_with([1.0; 5], 0.2, vec![-0.1, 0.0, 0.1, 0.05]),
                model_with([0.1; 5], -0.3, vec![0.2, -0.2]),
            ],
            last_scores: vec![1.0, 0.5],
            last_day: Weekday::ALL[0],
        };
        let a = forecast_rates(&fm, &sm, 3, Some(40), 99).unwrap();
        let b = forecast_rates(&fm, &sm, 3, Some(40), 99).unwrap();
        assert_eq!(a, b);
        let lo = a.rate_quantile(0.025);
        let hi = a.rate_quantile(0.975);
        let q25 = a.rate_quantile(0.25);
        let q75 = a.rate_quantile(0.75);
        for j in 0..3 {
            assert!(lo[j] <= q25[j] && q25[j] <= q75[j] && q75[j] <= hi[j]);
        }
        let text = a.to_json().unwrap();
        assert!(text.contains("\"p05\"") && text.contains("\"n_boot\": 40"));
        let back = RateForecast::from_json(&text).unwrap();
        assert_eq!(back.ensemble, a.ensemble);
        assert_eq!(back.to_json().unwrap(), text);
        assert!(a.ensemble_csv().unwrap().starts_with("replicate,a,b,c\n0,"));
    }
}
