//! Core data types: count matrices, rate profiles, link functions and the
//! fitted factor model, plus the Poisson log-likelihood and deviance.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest rate ever produced by an inverse link.
pub const RATE_FLOOR: f64 = 1e-8;

/// Weekday code, 1 = Monday .. 5 = Friday.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Weekday(u8);

impl Weekday {
    pub const ALL: [Weekday; 5] = [Weekday(1), Weekday(2), Weekday(3), Weekday(4), Weekday(5)];

    pub fn new(code: u8) -> Result<Self> {
        if (1..=5).contains(&code) {
            Ok(Weekday(code))
        } else {
            Err(Error::InvalidInput(format!(
                "day-of-week code {code} outside 1..=5"
            )))
        }
    }

    pub fn code(self) -> u8 {
        self.0
    }

    /// Zero-based index, Monday = 0.
    pub fn index(self) -> usize {
        (self.0 - 1) as usize
    }

    /// The following business day, Friday wrapping to Monday.
    pub fn next(self) -> Self {
        Weekday(self.0 % 5 + 1)
    }

    pub fn prev(self) -> Self {
        Weekday((self.0 + 3) % 5 + 1)
    }

    pub fn advance(self, days: usize) -> Self {
        Weekday(((self.0 as usize - 1 + days) % 5 + 1) as u8)
    }

    pub fn name(self) -> &'static str {
        ["Mon", "Tue", "Wed", "Thu", "Fri"][self.index()]
    }
}

impl TryFrom<u8> for Weekday {
    type Error = Error;
    fn try_from(code: u8) -> Result<Self> {
        Weekday::new(code)
    }
}

impl From<Weekday> for u8 {
    fn from(d: Weekday) -> u8 {
        d.0
    }
}

impl fmt::Display for Weekday {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Arrival counts of `n` time-ordered processes (days) over `m` intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    n: usize,
    m: usize,
    /// Row-major counts.
    values: Vec<u64>,
    day_labels: Vec<Weekday>,
    interval_labels: Vec<String>,
    dates: Vec<String>,
}

impl CountMatrix {
    /// Builds a matrix from row-major counts. Interval labels default to
    /// their indices and dates to the row indices.
    pub fn new(n: usize, m: usize, values: Vec<u64>, day_labels: Vec<Weekday>) -> Result<Self> {
        let interval_labels = (0..m).map(|j| j.to_string()).collect();
        let dates = (0..n).map(|i| format!("day{:04}", i + 1)).collect();
        Self::with_labels(n, m, values, day_labels, interval_labels, dates)
    }

    pub fn with_labels(
        n: usize,
        m: usize,
        values: Vec<u64>,
        day_labels: Vec<Weekday>,
        interval_labels: Vec<String>,
        dates: Vec<String>,
    ) -> Result<Self> {
        if n < 2 || m < 1 {
            return Err(Error::InvalidInput(format!(
                "count matrix needs n >= 2 and m >= 1, got {n}x{m}"
            )));
        }
        if values.len() != n * m {
            return Err(Error::Shape(format!(
                "{} values for a {n}x{m} matrix",
                values.len()
            )));
        }
        if day_labels.len() != n || dates.len() != n {
            return Err(Error::Shape(format!(
                "{} day labels and {} dates for {n} rows",
                day_labels.len(),
                dates.len()
            )));
        }
        if interval_labels.len() != m {
            return Err(Error::Shape(format!(
                "{} interval labels for {m} columns",
                interval_labels.len()
            )));
        }
        Ok(Self {
            n,
            m,
            values,
            day_labels,
            interval_labels,
            dates,
        })
    }

    /// Builds from a matrix of (integral, nonnegative) reals.
    pub fn from_matrix(y: &DMatrix<f64>, day_labels: Vec<Weekday>) -> Result<Self> {
        let mut values = Vec::with_capacity(y.len());
        for i in 0..y.nrows() {
            for j in 0..y.ncols() {
                let v = y[(i, j)];
                if !(v >= 0.0 && v.fract() == 0.0 && v.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "count ({i},{j}) = {v} is not a nonnegative integer"
                    )));
                }
                values.push(v as u64);
            }
        }
        Self::new(y.nrows(), y.ncols(), values, day_labels)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.values[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn day(&self, i: usize) -> Weekday {
        self.day_labels[i]
    }

    pub fn day_labels(&self) -> &[Weekday] {
        &self.day_labels
    }

    pub fn interval_labels(&self) -> &[String] {
        &self.interval_labels
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn values(&self) -> &[u64] {
        &self.values
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.n, self.m, self.values.iter().map(|&v| v as f64))
    }

    /// Contiguous block of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<CountMatrix> {
        if start >= end || end > self.n {
            return Err(Error::InvalidInput(format!(
                "row range {start}..{end} outside 0..{}",
                self.n
            )));
        }
        CountMatrix::with_labels(
            end - start,
            self.m,
            self.values[start * self.m..end * self.m].to_vec(),
            self.day_labels[start..end].to_vec(),
            self.interval_labels.clone(),
            self.dates[start..end].to_vec(),
        )
    }

    pub fn total(&self) -> u64 {
        self.values.iter().sum()
    }
}

/// Per-interval expected arrivals of one process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RateProfile(Vec<f64>);

impl RateProfile {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if let Some((j, r)) = rates
            .iter()
            .enumerate()
            .find(|(_, r)| !(r.is_finite() && **r > 0.0))
        {
            return Err(Error::Domain(format!("rate {j} = {r} is not positive and finite")));
        }
        Ok(RateProfile(rates))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for RateProfile {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        RateProfile::new(v)
    }
}

impl From<RateProfile> for Vec<f64> {
    fn from(r: RateProfile) -> Vec<f64> {
        r.0
    }
}

/// Link between a Poisson rate and the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Log,
    #[default]
    Sqrt,
}

impl Link {
    pub fn forward(self, rate: f64) -> f64 {
        match self {
            Link::Identity => rate,
            Link::Log => rate.ln(),
            Link::Sqrt => rate.sqrt(),
        }
    }

    /// Inverse link, floored at [`RATE_FLOOR`].
    pub fn inverse(self, eta: f64) -> f64 {
        let rate = match self {
            Link::Identity => eta,
            Link::Log => eta.exp(),
            Link::Sqrt => eta * eta,
        };
        if rate > RATE_FLOOR {
            rate
        } else {
            RATE_FLOOR
        }
    }

    /// dλ/dη of the unfloored inverse link.
    pub fn inverse_derivative(self, eta: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Log => eta.exp(),
            Link::Sqrt => 2.0 * eta,
        }
    }

    /// Fisher-scoring working weight (dλ/dη)²/λ. Constant for the square-root link.
    pub fn fisher_weight(self, eta: f64) -> f64 {
        match self {
            Link::Identity => 1.0 / self.inverse(eta),
            Link::Log => self.inverse(eta),
            Link::Sqrt => 4.0,
        }
    }

    /// Link applied to a count with a shift keeping it finite at zero.
    pub fn shifted_forward(self, count: f64) -> f64 {
        match self {
            Link::Identity => count + RATE_FLOOR,
            Link::Log => (count + 0.5).ln(),
            Link::Sqrt => (count + 0.25).sqrt(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Log => "log",
            Link::Sqrt => "sqrt",
        }
    }
}

impl FromStr for Link {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(Link::Identity),
            "log" | "logarithmic" => Ok(Link::Log),
            "sqrt" | "square-root" => Ok(Link::Sqrt),
            other => Err(Error::InvalidInput(format!("unknown link '{other}'"))),
        }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which factor matrix carries the orthonormal columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    LoadingsOrthonormal,
    #[default]
    ScoresOrthonormal,
}

/// Fitted K-factor model `g(Λ) = B Fᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub link: Link,
    /// n×K factor scores (one row per process).
    pub scores: DMatrix<f64>,
    /// m×K factor loadings (one row per interval).
    pub loadings: DMatrix<f64>,
    pub normalization: Normalization,
    pub deviance: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub interval_labels: Vec<String>,
}

impl FactorModel {
    pub fn k(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn n(&self) -> usize {
        self.scores.nrows()
    }

    pub fn m(&self) -> usize {
        self.loadings.nrows()
    }

    /// The fitted rate grid `g⁻¹(B Fᵀ)`.
    pub fn fitted_rates(&self) -> DMatrix<f64> {
        (&self.scores * self.loadings.transpose()).map(|eta| self.link.inverse(eta))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&FactorModelDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: FactorModelDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}

/// Persisted form of [`FactorModel`]; matrices are stored as arrays of rows.
#[derive(Debug, Serialize, Deserialize)]
struct FactorModelDoc {
    link: Link,
    #[serde(rename = "K")]
    k: usize,
    normalization: Normalization,
    scores: Vec<Vec<f64>>,
    loadings: Vec<Vec<f64>>,
    deviance: f64,
    #[serde(default)]
    iterations_used: usize,
    #[serde(default = "default_true")]
    converged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    interval_labels: Vec<String>,
}

fn default_true() -> bool {
    true
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Shape(format!("{what} rows must have {ncols} entries")));
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        ncols,
        rows.iter().flatten().copied(),
    ))
}

impl From<&FactorModel> for FactorModelDoc {
    fn from(model: &FactorModel) -> Self {
        FactorModelDoc {
            link: model.link,
            k: model.k(),
            normalization: model.normalization,
            scores: rows_of(&model.scores),
            loadings: rows_of(&model.loadings),
            deviance: model.deviance,
            iterations_used: model.iterations_used,
            converged: model.converged,
            interval_labels: model.interval_labels.clone(),
        }
    }
}

impl TryFrom<FactorModelDoc> for FactorModel {
    type Error = Error;
    fn try_from(doc: FactorModelDoc) -> Result<Self> {
        if doc.k == 0 {
            return Err(Error::InvalidInput("K must be positive".into()));
        }
        let scores = matrix_from_rows(&doc.scores, doc.k, "score")?;
        let loadings = matrix_from_rows(&doc.loadings, doc.k, "loading")?;
        if !doc.interval_labels.is_empty() && doc.interval_labels.len() != loadings.nrows() {
            return Err(Error::Shape("interval_labels length differs from m".into()));
        }
        if scores.iter().chain(loadings.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite entry in factor model".into()));
        }
        Ok(FactorModel {
            link: doc.link,
            scores,
            loadings,
            normalization: doc.normalization,
            deviance: doc.deviance,
            iterations_used: doc.iterations_used,
            converged: doc.converged,
            warnings: Vec::new(),
            interval_labels: doc.interval_labels,
        })
    }
}

fn check_pair(counts: &[f64], rates: &[f64]) -> Result<()> {
    if counts.len() != rates.len() {
        return Err(Error::Shape(format!(
            "{} counts vs {} rates",
            counts.len(),
            rates.len()
        )));
    }
    if let Some(r) = rates.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(Error::Domain(format!("rate {r} is not positive")));
    }
    Ok(())
}

/// Poisson log-likelihood `Σ y log λ − λ` without the `log y!` constant.
pub fn poisson_loglik(counts: &[f64], rates: &[f64]) -> Result<f64> {
    check_pair(counts, rates)?;
    Ok(counts
        .iter()
        .zip(rates)
        .map(|(&y, &l)| if y > 0.0 { y * l.ln() - l } else { -l })
        .sum())
}

/// Poisson deviance `2 Σ [y log(y/λ) − (y − λ)]` with `0 log 0 = 0`.
pub fn poisson_deviance(counts: &[f64], fitted: &[f64]) -> Result<f64> {
    check_pair(counts, fitted)?;
    Ok(deviance_unchecked(counts, fitted))
}

pub(crate) fn deviance_unchecked(counts: &[f64], fitted: &[f64]) -> f64 {
    2.0 * counts
        .iter()
        .zip(fitted)
        .map(|(&y, &l)| unit_deviance(y, l))
        .sum::<f64>()
}

#[inline]
pub(crate) fn unit_deviance(y: f64, rate: f64) -> f64 {
    if y > 0.0 {
        y * (y / rate).ln() - (y - rate)
    } else {
        rate
    }
}

/// Rate profile `g⁻¹(F β)` for a score vector.
pub fn apply_factor_model(model: &FactorModel, scores: &[f64]) -> Result<RateProfile> {
    if scores.len() != model.k() {
        return Err(Error::Shape(format!(
            "{} scores for a {}-factor model",
            scores.len(),
            model.k()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Domain(format!("non-finite score {s}")));
    }
    let beta = DVector::from_column_slice(scores);
    let eta = &model.loadings * beta;
    RateProfile::new(eta.iter().map(|&e| model.link.inverse(e)).collect())
}
