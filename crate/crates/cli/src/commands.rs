use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chrono::{Datelike, Days, NaiveDate};
use serde::{Deserialize, Serialize};

use ratefactor::eval::{run_rolling_exercise, Method, RollingSpec};
use ratefactor::io::{counts_to_csv, rates_to_csv, read_counts, read_partial, read_rates};
use ratefactor::simgen::{generate_add, generate_mul, AddParams, MulParams, Simulated};
use ratefactor::staffing::ServiceGrade;
use ratefactor::update::{hp_update, one_step_bootstrap_update, select_omega, OmegaSelection};
use ratefactor::{
    deviance_reduction_table, fit_factor_model, fit_score_model, forecast_rates, penalized_update, AmlConfig,
    CountMatrix, FactorModel, Link, Normalization, PartialDay, PenalizedUpdateConfig, RateForecast,
    ScoreForecastModel, StaffingParams, UpdatedForecast, Weekday,
};

use crate::files::{read, sibling, write_atomic};
use crate::{
    Baseline, Cli, Command, EvaluateArgs, FitArgs, ForecastArgs, ModelKind, SimulateArgs, StaffArgs, UpdateArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => fit(cli, a),
        Command::Forecast(a) => forecast(cli, a),
        Command::Update(a) => update(cli, a),
        Command::Staff(a) => staff(cli, a),
        Command::Simulate(a) => simulate(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
    }
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn counts(path: &Path) -> Result<CountMatrix> {
    read_counts(path).with_context(|| format!("reading {}", path.display()))
}

/// Index of the interval labelled `time`.
fn interval_index(labels: &[String], time: &str) -> Result<usize> {
    labels
        .iter()
        .position(|l| l == time)
        .ok_or_else(|| anyhow!(ratefactor::Error::InvalidInput(format!("no interval labelled {time:?}"))))
}

fn resolve_index(labels: &[String], index: Option<usize>, time: Option<&str>) -> Result<Option<usize>> {
    match (index, time) {
        (Some(i), _) => Ok(Some(i)),
        (None, Some(t)) => interval_index(labels, t).map(Some),
        (None, None) => Ok(None),
    }
}

/// `None` stands for `auto`.
fn parse_omega(s: &str) -> Result<Option<f64>> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(None);
    }
    let w: f64 = s.parse().map_err(|_| anyhow!("--omega {s:?} is neither a number nor `auto`"))?;
    if !(w >= 0.0 && w.is_finite()) {
        bail!("--omega must be a finite nonnegative number");
    }
    Ok(Some(w))
}

fn normalization_name(n: Normalization) -> &'static str {
    match n {
        Normalization::ScoresOrthonormal => "scores-orthonormal",
        Normalization::LoadingsOrthonormal => "loadings-orthonormal",
    }
}

fn fit(cli: &Cli, a: &FitArgs) -> Result<()> {
    let counts = counts(&a.input)?;
    let out = out_path(cli, "model.json");
    let mut cfg = AmlConfig::new(1).with_link(Link::from(cli.link));
    cfg.max_outer_iters = a.max_iters;
    cfg.outer_tol = a.tol;
    let k = match (a.factors, a.select_k) {
        (Some(k), _) => k,
        (None, Some(kmax)) => {
            let table = deviance_reduction_table(&counts, kmax, &cfg)?;
            write_atomic(&sibling(&out, "deviance", "csv"), &table.to_csv())?;
            let k = table.suggested_k(0.02);
            println!("deviance table for K = 1..{kmax}; suggested K = {k}");
            k
        }
        (None, None) => unreachable!("clap requires --factors or --select-k"),
    };
    cfg.k = k;
    let fm = fit_factor_model(&counts, &cfg)?;
    for w in &fm.warnings {
        log::warn!("{w}");
    }
    let sm = fit_score_model(&fm.scores, counts.day_labels())?;
    for (i, f) in sm.factors.iter().enumerate() {
        if f.nonstationary {
            log::warn!("factor {} score series has AR slope {:.3}", i + 1, f.slope);
        }
    }
    write_atomic(&out, &fm.to_json()?)?;
    write_atomic(&sibling(&out, "scores", "json"), &sm.to_json()?)?;
    println!(
        "fitted K = {} on {}x{} counts: link {}, {} normalization, deviance {:.3}, {} iterations{}",
        fm.k(),
        counts.n(),
        counts.m(),
        fm.link.name(),
        normalization_name(fm.normalization),
        fm.deviance,
        fm.iterations_used,
        if fm.converged { "" } else { " (not converged)" }
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<FactorModel> {
    FactorModel::from_json(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn forecast(cli: &Cli, a: &ForecastArgs) -> Result<()> {
    let fm = load_model(&a.model)?;
    let scores_path = a.scores.clone().unwrap_or_else(|| sibling(&a.model, "scores", "json"));
    let sm = ScoreForecastModel::from_json(&read(&scores_path)?)
        .with_context(|| format!("parsing {}", scores_path.display()))?;
    let f = forecast_rates(&fm, &sm, a.horizon, a.bootstrap, cli.seed)?;
    write_atomic(&out_path(cli, "forecast.json"), &f.to_json()?)?;
    let total: f64 = f.point_rates.as_slice().iter().sum();
    println!("forecast for {} (h = {}): {:.1} expected arrivals", f.day, f.h, total);
    Ok(())
}

/// Volume-ratio update written next to the penalized one.
#[derive(Debug, Serialize, Deserialize)]
struct HpDoc {
    m0: usize,
    ratio: f64,
    latter_rates: Vec<f64>,
    interval_labels: Vec<String>,
}

fn update(cli: &Cli, a: &UpdateArgs) -> Result<()> {
    let fm = load_model(&a.model)?;
    let fc = RateForecast::from_json(&read(&a.forecast)?).with_context(|| format!("parsing {}", a.forecast.display()))?;
    let (labels, day, early) = read_partial(&a.partial).with_context(|| format!("reading {}", a.partial.display()))?;
    if labels.len() > fm.m() || labels[..] != fm.interval_labels[..labels.len()] {
        bail!(ratefactor::Error::InvalidInput(format!(
            "{} columns do not match the model's leading interval labels",
            a.partial.display()
        )));
    }
    let m0 = resolve_index(&fm.interval_labels, a.cut, a.cut_time.as_deref())?.unwrap_or(labels.len());
    if m0 == 0 || m0 > labels.len() {
        bail!(ratefactor::Error::InvalidInput(format!(
            "cut m0 = {m0} but {} holds {} intervals",
            a.partial.display(),
            labels.len()
        )));
    }
    if day != fc.day {
        log::warn!("partial day is a {day}, forecast target is a {}", fc.day);
    }
    let partial = PartialDay::new(early[..m0].to_vec(), day)?;

    let mut cfg = PenalizedUpdateConfig::default();
    cfg.omega = match parse_omega(&a.omega)? {
        Some(w) => w,
        None => {
            let hist = a.history.as_deref().ok_or_else(|| anyhow!("--omega auto needs --history"))?;
            let sel = OmegaSelection {
                aml: AmlConfig::new(fm.k()).with_link(fm.link),
                holdout: a.holdout,
                window: a.window,
            };
            let choice = select_omega(&counts(hist)?, m0, &cfg, &sel)?;
            println!("selected omega = {:e}", choice.omega);
            choice.omega
        }
    };
    let mut up = penalized_update(&fm, &partial, &fc.point_scores, &cfg)?;
    if let Some(ens) = &fc.ensemble_scores {
        let e = one_step_bootstrap_update(&fm, &partial, &up, ens, &cfg, cli.seed)?;
        up.attach(e, cli.seed);
    }
    let out = out_path(cli, "updated.json");
    write_atomic(&out, &up.to_json()?)?;
    println!(
        "updated at m0 = {m0} with omega = {:e}: {:.1} expected latter arrivals",
        up.omega_used,
        up.latter_rates.iter().sum::<f64>()
    );
    if let Baseline::Hp = a.baseline {
        let (latter_rates, ratio) = hp_update(fc.point_rates.as_slice(), &partial)?;
        let doc = HpDoc {
            m0,
            ratio,
            latter_rates,
            interval_labels: fm.interval_labels[m0..].to_vec(),
        };
        write_atomic(&sibling(&out, "hp", "json"), &serde_json::to_string_pretty(&doc)?)?;
        println!("volume ratio {ratio:.4}");
    }
    Ok(())
}

/// Rates, optional ensemble and labels from any of the forecast documents.
fn staffing_input(text: &str) -> Result<(Vec<f64>, Option<Vec<Vec<f64>>>, Vec<String>)> {
    if let Ok(f) = RateForecast::from_json(text) {
        return Ok((f.point_rates.into_vec(), f.ensemble, f.interval_labels));
    }
    if let Ok(u) = UpdatedForecast::from_json(text) {
        return Ok((u.latter_rates, u.ensemble, u.interval_labels));
    }
    if let Ok(h) = serde_json::from_str::<HpDoc>(text) {
        return Ok((h.latter_rates, None, h.interval_labels));
    }
    bail!(ratefactor::Error::InvalidInput("not a forecast or updated forecast document".into()))
}

fn staff(cli: &Cli, a: &StaffArgs) -> Result<()> {
    let (rates, ens, labels) =
        staffing_input(&read(&a.forecast)?).with_context(|| format!("parsing {}", a.forecast.display()))?;
    let grade = match (a.theta, a.delay_prob) {
        (_, Some(p)) => ServiceGrade::DelayProb(p),
        (t, None) => ServiceGrade::Theta(t.unwrap_or(1.0)),
    };
    let params = StaffingParams {
        service_rate: a.service_rate,
        grade,
        rounding: a.rounding.into(),
    };
    let plan = ratefactor::staffing_level(&rates, ens.as_deref(), &params)?;
    write_atomic(&out_path(cli, "staffing.csv"), &plan.to_csv(&labels))?;
    println!("peak staffing {:.1} agents over {} intervals", plan.agents.iter().cloned().fold(0.0, f64::max), rates.len());
    Ok(())
}

/// `n` consecutive weekdays from `start`, which must itself be a weekday.
fn weekday_dates(start: &str, n: usize) -> Result<(Weekday, Vec<String>)> {
    let mut d = NaiveDate::parse_from_str(start, "%Y-%m-%d")
        .map_err(|e| anyhow!(ratefactor::Error::InvalidInput(format!("--start-date {start:?}: {e}"))))?;
    let code = d.weekday().number_from_monday();
    if code > 5 {
        bail!(ratefactor::Error::InvalidInput(format!("{start} is a weekend day")));
    }
    let first = Weekday::new(code as u8)?;
    let mut dates = Vec::with_capacity(n);
    while dates.len() < n {
        if d.weekday().number_from_monday() <= 5 {
            dates.push(d.format("%Y-%m-%d").to_string());
        }
        d = d.checked_add_days(Days::new(1)).ok_or_else(|| anyhow!("date overflow"))?;
    }
    Ok((first, dates))
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let (first, dates) = weekday_dates(&a.start_date, a.days)?;
    let params_text = a.params.as_deref().map(read).transpose()?;
    let sim: Simulated = match a.model {
        ModelKind::Mul => {
            let p = match &params_text {
                Some(t) => serde_json::from_str(t).context("parsing MUL parameters")?,
                None => MulParams::default_study(),
            };
            generate_mul(&p, a.days, first, cli.seed)?
        }
        ModelKind::Add => {
            let p = match &params_text {
                Some(t) => serde_json::from_str(t).context("parsing ADD parameters")?,
                None => AddParams::default_study(),
            };
            generate_add(&p, a.days, first, cli.seed)?
        }
    };
    if sim.clamped > 0 {
        log::warn!("{} cells clamped to the rate floor", sim.clamped);
    }
    let c = &sim.counts;
    let counts = CountMatrix::with_labels(
        c.n(),
        c.m(),
        c.values().to_vec(),
        c.day_labels().to_vec(),
        c.interval_labels().to_vec(),
        dates,
    )?;
    let out = out_path(cli, "counts.csv");
    write_atomic(&out, &counts_to_csv(&counts))?;
    write_atomic(&sibling(&out, "rates", "csv"), &rates_to_csv(&sim.rates, &counts)?)?;
    println!("simulated {} days x {} intervals ({}), {} arrivals", counts.n(), counts.m(), format!("{:?}", a.model).to_uppercase(), counts.total());
    Ok(())
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let counts = counts(&a.counts)?;
    let rates = a
        .rates
        .as_deref()
        .map(|p| read_rates(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let methods = a
        .methods
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse::<Method>)
        .collect::<ratefactor::Result<Vec<_>>>()?;
    let labels = counts.interval_labels();
    let mut spec = RollingSpec::new(a.train, a.test, methods);
    spec.cut = resolve_index(labels, a.cut, a.cut_time.as_deref())?;
    spec.mask_from = resolve_index(labels, a.mask_from, a.mask_time.as_deref())?;
    spec.refit_each_day = !a.fixed_loadings;
    spec.n_boot = a.bootstrap;
    spec.level = a.level;
    spec.link = cli.link.into();
    spec.update.omega = match parse_omega(&a.omega)? {
        Some(w) => w,
        None => {
            let m0 = spec.cut.ok_or_else(|| anyhow!("--omega auto needs a cut"))?;
            let k = spec.methods.iter().find_map(|m| match m {
                Method::Pml(k) => Some(*k),
                _ => None,
            });
            let sel = OmegaSelection {
                holdout: a.holdout,
                window: a.window,
                ..OmegaSelection::new(AmlConfig::new(k.unwrap_or(1)).with_link(spec.link))
            };
            // Only the initial training window is used to choose omega.
            let choice = select_omega(&counts.slice_rows(0, a.train)?, m0, &spec.update, &sel)?;
            println!("selected omega = {:e}", choice.omega);
            choice.omega
        }
    };
    let staffing = StaffingParams::with_theta(a.service_rate, a.theta);
    let report = run_rolling_exercise(&counts, rates.as_deref(), &spec, Some(&staffing), cli.seed)?;
    let out = out_path(cli, "report.csv");
    write_atomic(&out, &report.to_csv())?;
    write_atomic(&sibling(&out, "summary", "json"), &report.summary_json()?)?;
    for s in report.summaries().iter().filter(|s| s.metric == "rmse") {
        println!("{:<6} rmse mean {:.4} median {:.4} over {} days", s.method, s.mean, s.median, s.count);
    }
    Ok(())
}
