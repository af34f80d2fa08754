//! Square-root safety staffing: `N = R + θ√R` with offered load `R = λ/μ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{column_quantiles, normal_cdf, normal_pdf};

const THETA_MAX: f64 = 40.0;

/// Steady-state delay probability `α = {1 + θΦ(θ)/φ(θ)}⁻¹` for θ > 0.
pub fn delay_prob_from_theta(theta: f64) -> Result<f64> {
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::Domain(format!("theta = {theta} must be positive")));
    }
    // Φ/φ overflows past θ ≈ 38; α is then below 1e-300 anyway.
    let ratio = normal_cdf(theta) / normal_pdf(theta);
    Ok(1.0 / (1.0 + theta * ratio))
}

/// Inverse of [`delay_prob_from_theta`] by bisection on (0, 40].
pub fn theta_from_delay_prob(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("delay probability {alpha} outside (0, 1)")));
    }
    let (mut lo, mut hi) = (0.0_f64, THETA_MAX);
    if delay_prob_from_theta(hi)? >= alpha {
        return Ok(hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        // α is decreasing in θ.
        let a = if mid > 0.0 { delay_prob_from_theta(mid)? } else { 1.0 };
        if a > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceGrade {
    Theta(f64),
    DelayProb(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    #[default]
    None,
    Ceil,
}

impl std::str::FromStr for Rounding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Rounding::None),
            "ceil" => Ok(Rounding::Ceil),
            _ => Err(Error::InvalidInput(format!("unknown rounding mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaffingParams {
    /// Calls one agent handles per interval.
    pub service_rate: f64,
    pub grade: ServiceGrade,
    #[serde(default)]
    pub rounding: Rounding,
}

impl StaffingParams {
    pub fn with_theta(service_rate: f64, theta: f64) -> Self {
        Self {
            service_rate,
            grade: ServiceGrade::Theta(theta),
            rounding: Rounding::None,
        }
    }

    pub fn theta(&self) -> Result<f64> {
        if !(self.service_rate > 0.0 && self.service_rate.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "service rate {} must be positive",
                self.service_rate
            )));
        }
        match self.grade {
            ServiceGrade::Theta(t) if t.is_finite() => Ok(t),
            ServiceGrade::Theta(t) => Err(Error::InvalidInput(format!("theta = {t}"))),
            ServiceGrade::DelayProb(a) if a == 1.0 => Ok(0.0),
            ServiceGrade::DelayProb(a) => theta_from_delay_prob(a),
        }
    }

    /// Agents for one interval rate.
    pub fn agents(&self, theta: f64, rate: f64) -> f64 {
        let r = rate / self.service_rate;
        let n = r + theta * r.sqrt();
        match self.rounding {
            Rounding::None => n,
            Rounding::Ceil => n.ceil(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaffingPlan {
    pub offered_load: Vec<f64>,
    pub agents: Vec<f64>,
    /// 2.5% ensemble quantile of N per interval.
    pub lower: Option<Vec<f64>>,
    /// 97.5% ensemble quantile of N per interval.
    pub upper: Option<Vec<f64>>,
}

impl StaffingPlan {
    /// `interval,offered_load,agents,lo95,hi95`; bounds blank without an ensemble.
    pub fn to_csv(&self, labels: &[String]) -> String {
        let mut out = String::from("interval,offered_load,agents,lo95,hi95\n");
        for j in 0..self.agents.len() {
            let label = labels.get(j).cloned().unwrap_or_else(|| j.to_string());
            let bound = |b: &Option<Vec<f64>>| b.as_ref().map_or(String::new(), |v| v[j].to_string());
            out.push_str(&format!(
                "{label},{},{},{},{}\n",
                self.offered_load[j],
                self.agents[j],
                bound(&self.lower),
                bound(&self.upper)
            ));
        }
        out
    }
}

fn check_rates(rates: &[f64]) -> Result<()> {
    match rates.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        Some(r) => Err(Error::Domain(format!("rate {r} is not positive"))),
        None => Ok(()),
    }
}

/// Staffing per interval; with an ensemble, each ensemble row is staffed
/// and the per-interval 2.5%/97.5% quantiles of N are reported.
pub fn staffing_level(
    rates: &[f64],
    ensemble: Option<&[Vec<f64>]>,
    params: &StaffingParams,
) -> Result<StaffingPlan> {
    let theta = params.theta()?;
    check_rates(rates)?;
    let offered_load: Vec<f64> = rates.iter().map(|r| r / params.service_rate).collect();
    let agents: Vec<f64> = rates.iter().map(|&r| params.agents(theta, r)).collect();
    let (lower, upper) = match ensemble {
        None => (None, None),
        Some(rows) => {
            if rows.is_empty() {
                return Err(Error::InvalidInput("empty ensemble".into()));
            }
            let staffed: Vec<Vec<f64>> = rows
                .par_iter()
                .map(|row| {
                    if row.len() != rates.len() {
                        return Err(Error::Shape(format!(
                            "ensemble row has {} intervals, expected {}",
                            row.len(),
                            rates.len()
                        )));
                    }
                    check_rates(row)?;
                    Ok(row.iter().map(|&r| params.agents(theta, r)).collect())
                })
                .collect::<Result<_>>()?;
            // Quantiles interpolate between replicates; keep rounded plans integral.
            let band = |p: f64| -> Vec<f64> {
                let q = column_quantiles(&staffed, p);
                match params.rounding {
                    Rounding::None => q,
                    Rounding::Ceil => q.into_iter().map(f64::ceil).collect(),
                }
            };
            (Some(band(0.025)), Some(band(0.975)))
        }
    };
    Ok(StaffingPlan {
        offered_load,
        agents,
        lower,
        upper,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delay_probability_examples() {
        // Direct evaluation with Φ(1) = 0.8413447460685429, φ(1) = 0.24197072451914337.
        let a1 = 1.0 / (1.0 + 0.841_344_746_068_542_9 / 0.241_970_724_519_143_37);
        assert!((delay_prob_from_theta(1.0).unwrap() - a1).abs() < 1e-12);
        assert!((delay_prob_from_theta(1e-9).unwrap() - 1.0).abs() < 1e-6);
        assert!(delay_prob_from_theta(0.0).is_err());
        assert!(delay_prob_from_theta(-1.0).is_err());
        assert!(delay_prob_from_theta(40.0).unwrap() >= 0.0);
    }

    #[test]
    fn inverse_limits() {
        assert!(theta_from_delay_prob(1.0 - 1e-12).unwrap() < 1e-5);
        assert!(theta_from_delay_prob(1.0).is_err());
        assert!(theta_from_delay_prob(0.0).is_err());
        for t in [0.1, 0.5, 1.0, 2.0, 3.0] {
            let back = theta_from_delay_prob(delay_prob_from_theta(t).unwrap()).unwrap();
            assert!((back - t).abs() < 1e-9, "{t} -> {back}");
        }
    }

    #[test]
    fn worked_staffing() {
        let p = StaffingParams::with_theta(3.0, 1.0);
        let plan = staffing_level(&[300.0, 75.0], None, &p).unwrap();
        assert_eq!(plan.offered_load, vec![100.0, 25.0]);
        assert_eq!(plan.agents, vec![110.0, 30.0]);
        let zero = staffing_level(&[300.0], None, &StaffingParams::with_theta(3.0, 0.0)).unwrap();
        assert_eq!(zero.agents, zero.offered_load);
        let neg = staffing_level(&[300.0], None, &StaffingParams::with_theta(3.0, -1.0)).unwrap();
        assert_eq!(neg.agents, vec![90.0]);
        assert!(staffing_level(&[0.0], None, &p).is_err());
        let ceil = StaffingParams {
            rounding: Rounding::Ceil,
            ..StaffingParams::with_theta(3.0, 1.0)
        };
        assert_eq!(staffing_level(&[10.0], None, &ceil).unwrap().agents, vec![6.0]);
    }

    #[test]
    fn ensemble_bounds_and_csv() {
        let p = StaffingParams::with_theta(3.0, 1.0);
        let ens: Vec<Vec<f64>> = (1..=41).map(|i| vec![i as f64 * 10.0]).collect();
        let plan = staffing_level(&[210.0], Some(&ens), &p).unwrap();
        let (lo, hi) = (plan.lower.clone().unwrap()[0], plan.upper.clone().unwrap()[0]);
        assert!(lo <= plan.agents[0] && plan.agents[0] <= hi);
        let csv = plan.to_csv(&["10:00".into()]);
        assert!(csv.starts_with("interval,offered_load,agents,lo95,hi95\n10:00,70,"));
        let bare = staffing_level(&[300.0], None, &p).unwrap().to_csv(&[]);
        assert_eq!(bare, "interval,offered_load,agents,lo95,hi95\n0,100,110,,\n");
    }
}
