//! Synthetic count matrices from two-way multiplicative (MUL) and additive
//! (ADD) models on the square-root scale, and Gaussian fits of the same
//! models used as forecasting baselines.
//!
//! MUL: `√λ_ij = α_i γ(d_i, j)` with `Σ_j γ(d, j) = 1`.
//! ADD: `√λ_ij = μ + α_i + β_j + γ(d_i, j)`.
//! In both, the day level follows `α_i − a(d_i) = b (α_{i−1} − a(d_{i−1})) + η_i`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CountMatrix, Weekday, RATE_FLOOR};
use crate::scores::draw_counts;

const CONSTRAINT_TOL: f64 = 1e-10;

pub const DEFAULT_MUL_PARAMS: &str = include_str!("../data/mul_default.json");
pub const DEFAULT_ADD_PARAMS: &str = include_str!("../data/add_default.json");

/// Day-level AR(1) shared by both generators.
#[derive(Debug, Clone, Copy)]
struct LevelProcess<'a> {
    intercepts: &'a [f64; 5],
    slope: f64,
    sd: f64,
}

impl LevelProcess<'_> {
    fn path(&self, days: &[Weekday], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let noise = Normal::new(0.0, self.sd).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let stationary_sd = if self.slope.abs() < 1.0 {
            self.sd / (1.0 - self.slope * self.slope).sqrt()
        } else {
            0.0
        };
        let mut dev = stationary_sd * Normal::new(0.0, 1.0).unwrap().sample(rng);
        let mut out = Vec::with_capacity(days.len());
        for (i, d) in days.iter().enumerate() {
            if i > 0 {
                dev = self.slope * dev + noise.sample(rng);
            }
            out.push(self.intercepts[d.index()] + dev);
        }
        Ok(out)
    }
}

fn check_level(intercepts: &[f64; 5], slope: f64, sd: f64) -> Result<()> {
    if intercepts.iter().any(|v| !v.is_finite()) || !slope.is_finite() {
        return Err(Error::InvalidInput("non-finite level parameter".into()));
    }
    if !(sd >= 0.0 && sd.is_finite()) {
        return Err(Error::InvalidInput(format!("innovation sd {sd} must be ≥ 0")));
    }
    if slope.abs() >= 1.0 {
        log::warn!("day-level AR slope {slope} is not stationary");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulParams {
    pub day_intercepts: [f64; 5],
    pub ar_slope: f64,
    pub innovation_sd: f64,
    /// 5×m, each row sums to 1.
    pub day_profiles: Vec<Vec<f64>>,
}

impl MulParams {
    pub fn default_study() -> Self {
        serde_json::from_str(DEFAULT_MUL_PARAMS).expect("shipped MUL parameters parse")
    }

    pub fn m(&self) -> usize {
        self.day_profiles.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        check_level(&self.day_intercepts, self.ar_slope, self.innovation_sd)?;
        let m = self.m();
        if self.day_profiles.len() != 5 || m == 0 || self.day_profiles.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("day_profiles must be 5 rows of equal length".into()));
        }
        for (d, row) in self.day_profiles.iter().enumerate() {
            if row.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::InvalidInput(format!("day profile {} has a negative entry", d + 1)));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > CONSTRAINT_TOL {
                return Err(Error::InvalidInput(format!("day profile {} sums to {s}, not 1", d + 1)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddParams {
    pub grand_mean: f64,
    pub day_intercepts: [f64; 5],
    pub ar_slope: f64,
    pub innovation_sd: f64,
    /// β_j, summing to 0.
    pub interval_effects: Vec<f64>,
    /// 5×m, rows and columns summing to 0.
    pub interactions: Vec<Vec<f64>>,
}

impl AddParams {
    pub fn default_study() -> Self {
        serde_json::from_str(DEFAULT_ADD_PARAMS).expect("shipped ADD parameters parse")
    }

    pub fn m(&self) -> usize {
        self.interval_effects.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_level(&self.day_intercepts, self.ar_slope, self.innovation_sd)?;
        let m = self.m();
        if m == 0 || self.interactions.len() != 5 || self.interactions.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("interactions must be 5 rows of length m".into()));
        }
        if !self.grand_mean.is_finite()
            || self.interval_effects.iter().chain(self.interactions.iter().flatten()).any(|v| !v.is_finite())
        {
            return Err(Error::InvalidInput("non-finite effect".into()));
        }
        let sb: f64 = self.interval_effects.iter().sum();
        if sb.abs() > CONSTRAINT_TOL {
            return Err(Error::InvalidInput(format!("interval effects sum to {sb}, not 0")));
        }
        for (d, row) in self.interactions.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if s.abs() > CONSTRAINT_TOL {
                return Err(Error::InvalidInput(format!("interaction row {} sums to {s}", d + 1)));
            }
        }
        for j in 0..m {
            let s: f64 = self.interactions.iter().map(|r| r[j]).sum();
            if s.abs() > CONSTRAINT_TOL {
                return Err(Error::InvalidInput(format!("interaction column {j} sums to {s}")));
            }
        }
        Ok(())
    }
}

/// Simulated counts with their hidden rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub counts: CountMatrix,
    /// n rows of m rates.
    pub rates: Vec<Vec<f64>>,
    /// Day levels α_i.
    pub levels: Vec<f64>,
    /// Cells whose square-root predictor was clamped.
    pub clamped: usize,
}

/// Weekday labels cycling Mon–Fri from `start`.
pub fn weekday_sequence(start: Weekday, n: usize) -> Vec<Weekday> {
    (0..n).map(|i| start.advance(i)).collect()
}

/// `HH:MM` labels of consecutive quarter hours starting at `start_minutes`.
pub fn quarter_hour_labels(start_minutes: usize, m: usize) -> Vec<String> {
    (0..m)
        .map(|j| {
            let t = start_minutes + 15 * j;
            format!("{:02}:{:02}", t / 60, t % 60)
        })
        .collect()
}

fn finish(
    sqrt_rates: Vec<Vec<f64>>,
    days: Vec<Weekday>,
    levels: Vec<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Simulated> {
    let n = sqrt_rates.len();
    let m = sqrt_rates.first().map_or(0, Vec::len);
    let floor = RATE_FLOOR.sqrt();
    let mut clamped = 0;
    let mut rates = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * m);
    for row in sqrt_rates {
        let r: Vec<f64> = row
            .into_iter()
            .map(|x| {
                if x > floor {
                    x * x
                } else {
                    clamped += 1;
                    floor * floor
                }
            })
            .collect();
        values.extend(draw_counts(&r, rng));
        rates.push(r);
    }
    let labels = if m == 68 {
        quarter_hour_labels(7 * 60, m)
    } else {
        (0..m).map(|j| j.to_string()).collect()
    };
    let dates = (1..=n).map(|i| format!("day{i:04}")).collect();
    Ok(Simulated {
        counts: CountMatrix::with_labels(n, m, values, days, labels, dates)?,
        rates,
        levels,
        clamped,
    })
}

fn check_days(n_days: usize) -> Result<()> {
    if n_days < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 days, got {n_days}")));
    }
    Ok(())
}

pub fn generate_mul(params: &MulParams, n_days: usize, start_day: Weekday, seed: u64) -> Result<Simulated> {
    params.validate()?;
    check_days(n_days)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let days = weekday_sequence(start_day, n_days);
    let levels = LevelProcess {
        intercepts: &params.day_intercepts,
        slope: params.ar_slope,
        sd: params.innovation_sd,
    }
    .path(&days, &mut rng)?;
    let sqrt_rates = days
        .iter()
        .zip(&levels)
        .map(|(d, a)| params.day_profiles[d.index()].iter().map(|g| a * g).collect())
        .collect();
    finish(sqrt_rates, days, levels, &mut rng)
}

pub fn generate_add(params: &AddParams, n_days: usize, start_day: Weekday, seed: u64) -> Result<Simulated> {
    params.validate()?;
    check_days(n_days)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let days = weekday_sequence(start_day, n_days);
    let levels = LevelProcess {
        intercepts: &params.day_intercepts,
        slope: params.ar_slope,
        sd: params.innovation_sd,
    }
    .path(&days, &mut rng)?;
    let sqrt_rates = days
        .iter()
        .zip(&levels)
        .map(|(d, a)| {
            params
                .interval_effects
                .iter()
                .zip(&params.interactions[d.index()])
                .map(|(b, g)| params.grand_mean + a + b + g)
                .collect()
        })
        .collect();
    finish(sqrt_rates, days, levels, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TwoWayKind {
    Mul,
    Add,
}

impl std::str::FromStr for TwoWayKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mul" => Ok(TwoWayKind::Mul),
            "add" => Ok(TwoWayKind::Add),
            _ => Err(Error::InvalidInput(format!("unknown model {s:?}, expected mul or add"))),
        }
    }
}

/// Two-way model fitted to `x = √(y + ¼)` by least squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoWayFit {
    pub kind: TwoWayKind,
    /// μ̂ (ADD only; 0 for MUL).
    pub grand_mean: f64,
    /// Fitted day levels α̂_i.
    pub levels: Vec<f64>,
    pub level_intercepts: [f64; 5],
    pub level_slope: f64,
    /// β̂_j (ADD only; zeros for MUL).
    pub interval_effects: Vec<f64>,
    /// γ̂(d, j): profiles for MUL, interactions for ADD.
    pub day_profiles: Vec<Vec<f64>>,
    pub last_day: Weekday,
}

impl TwoWayFit {
    /// Rate forecast `h` days past the last fitted day.
    pub fn forecast(&self, h: usize) -> Result<Vec<f64>> {
        if h == 0 {
            return Err(Error::InvalidInput("horizon must be at least 1".into()));
        }
        let a = &self.level_intercepts;
        let mut day = self.last_day;
        let mut dev = self.levels.last().copied().unwrap_or(0.0) - a[day.index()];
        for _ in 0..h {
            dev *= self.level_slope;
            day = day.next();
        }
        let level = a[day.index()] + dev;
        let prof = &self.day_profiles[day.index()];
        Ok((0..prof.len())
            .map(|j| {
                let x = match self.kind {
                    TwoWayKind::Mul => level * prof[j],
                    TwoWayKind::Add => self.grand_mean + level + self.interval_effects[j] + prof[j],
                };
                (x.max(0.0) * x.max(0.0)).max(RATE_FLOOR)
            })
            .collect())
    }
}

/// Weekday means of `levels` and the no-intercept AR(1) slope of the
/// deviations from them.
fn fit_level_ar(levels: &[f64], days: &[Weekday]) -> ([f64; 5], f64) {
    let mut sum = [0.0; 5];
    let mut cnt = [0usize; 5];
    for (l, d) in levels.iter().zip(days) {
        sum[d.index()] += l;
        cnt[d.index()] += 1;
    }
    let mut a = [0.0; 5];
    for d in 0..5 {
        a[d] = sum[d] / cnt[d] as f64;
    }
    let u: Vec<f64> = levels.iter().zip(days).map(|(l, d)| l - a[d.index()]).collect();
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for i in 1..u.len() {
        sxy += u[i] * u[i - 1];
        sxx += u[i - 1] * u[i - 1];
    }
    let scale: f64 = levels.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    let b = if sxx > 1e-14 * scale { sxy / sxx } else { 0.0 };
    (a, b)
}

pub fn fit_two_way_gaussian(counts: &CountMatrix, kind: TwoWayKind) -> Result<TwoWayFit> {
    let (n, m) = (counts.n(), counts.m());
    if n < 15 {
        return Err(Error::InvalidInput(format!("need at least 15 days, got {n}")));
    }
    let days = counts.day_labels();
    let mut per_day = [0usize; 5];
    for d in days {
        per_day[d.index()] += 1;
    }
    if let Some(d) = Weekday::ALL.into_iter().find(|d| per_day[d.index()] == 0) {
        return Err(Error::RankDeficient(format!("no {d} in the training data")));
    }
    let x: Vec<Vec<f64>> = (0..n)
        .map(|i| counts.row(i).iter().map(|&y| (y as f64 + 0.25).sqrt()).collect())
        .collect();

    let fit = match kind {
        TwoWayKind::Mul => {
            let levels: Vec<f64> = x.iter().map(|r| r.iter().sum()).collect();
            let mut prof = vec![vec![0.0; m]; 5];
            for (i, r) in x.iter().enumerate() {
                let p = &mut prof[days[i].index()];
                for (pj, xj) in p.iter_mut().zip(r) {
                    *pj += xj / levels[i];
                }
            }
            for row in &mut prof {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            let (a, b) = fit_level_ar(&levels, days);
            TwoWayFit {
                kind,
                grand_mean: 0.0,
                levels,
                level_intercepts: a,
                level_slope: b,
                interval_effects: vec![0.0; m],
                day_profiles: prof,
                last_day: days[n - 1],
            }
        }
        TwoWayKind::Add => {
            let row_mean: Vec<f64> = x.iter().map(|r| r.iter().sum::<f64>() / m as f64).collect();
            let mu = row_mean.iter().sum::<f64>() / n as f64;
            let col_mean: Vec<f64> = (0..m).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
            let levels: Vec<f64> = row_mean.iter().map(|r| r - mu).collect();
            let mut beta: Vec<f64> = col_mean.iter().map(|c| c - mu).collect();
            let mut gamma = vec![vec![0.0; m]; 5];
            for (i, r) in x.iter().enumerate() {
                let d = days[i].index();
                for j in 0..m {
                    gamma[d][j] += r[j] - row_mean[i] - col_mean[j] + mu;
                }
            }
            for d in 0..5 {
                gamma[d].iter_mut().for_each(|v| *v /= per_day[d] as f64);
            }
            // Rows already sum to zero; center the columns and move the
            // column means into β.
            for j in 0..m {
                let c = (0..5).map(|d| gamma[d][j]).sum::<f64>() / 5.0;
                beta[j] += c;
                (0..5).for_each(|d| gamma[d][j] -= c);
            }
            let (a, b) = fit_level_ar(&levels, days);
            TwoWayFit {
                kind,
                grand_mean: mu,
                levels,
                level_intercepts: a,
                level_slope: b,
                interval_effects: beta,
                day_profiles: gamma,
                last_day: days[n - 1],
            }
        }
    };
    Ok(fit)
}
