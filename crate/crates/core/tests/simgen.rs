mod common;

use std::time::Instant;

use common::mon;

use ratefactor::simgen::{
    fit_two_way_gaussian, generate_add, generate_mul, quarter_hour_labels, AddParams, MulParams,
    TwoWayKind,
};

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

#[test]
fn count_means_match_rates() {
    // Same hidden rates across seeds: no level noise.
    let base = MulParams::default_study();
    let params = MulParams {
        innovation_sd: 0.0,
        day_intercepts: base.day_intercepts.map(|a| 1.5 * a),
        ..base
    };
    let reps = 200;
    let draws: Vec<_> = (0..reps).map(|s| generate_mul(&params, 2, mon(), s).unwrap()).collect();
    let rates = &draws[0].rates;
    assert!(rates.iter().flatten().all(|&l| l >= 50.0));
    for i in 0..1 {
        for j in 0..params.m() {
            let l = rates[i][j];
            assert_eq!(draws[1].rates[i][j], l);
            let mean = draws.iter().map(|d| d.counts.get(i, j) as f64).sum::<f64>() / reps as f64;
            assert!((mean - l).abs() <= 3.0 * (l / reps as f64).sqrt(), "cell ({i},{j}): {mean} vs {l}");
        }
    }
}

#[test]
fn full_scale_generation_is_fast_and_valid() {
    let t = Instant::now();
    let mul = generate_mul(&MulParams::default_study(), 200, mon(), 1).unwrap();
    let add = generate_add(&AddParams::default_study(), 200, mon(), 1).unwrap();
    assert!(t.elapsed().as_secs_f64() < 1.0);
    for sim in [&mul, &add] {
        assert_eq!((sim.counts.n(), sim.counts.m()), (200, 68));
        assert!(sim.rates.iter().flatten().all(|&l| l > 0.0));
        assert_eq!(sim.counts.interval_labels(), quarter_hour_labels(7 * 60, 68).as_slice());
    }
    assert_eq!(mul.counts.interval_labels()[12], "10:00");
    assert_eq!(mul.counts.interval_labels()[20], "12:00");
}

#[test]
fn generation_is_bitwise_deterministic() {
    let a = generate_add(&AddParams::default_study(), 40, mon(), 9).unwrap();
    let b = generate_add(&AddParams::default_study(), 40, mon(), 9).unwrap();
    assert_eq!(a.counts, b.counts);
    assert_eq!(a.rates, b.rates);
    let c = generate_add(&AddParams::default_study(), 40, mon(), 10).unwrap();
    assert_ne!(a.counts, c.counts);
}

#[test]
fn additive_clamp_is_counted() {
    let mut p = AddParams::default_study();
    p.grand_mean = 3.0;
    let sim = generate_add(&p, 20, mon(), 2).unwrap();
    assert!(sim.clamped > 0);
    assert!(sim.rates.iter().flatten().all(|&l| l > 0.0));
}

#[test]
fn mul_profiles_recovered() {
    let truth = MulParams::default_study();
    let big = MulParams {
        day_intercepts: truth.day_intercepts.map(|a| 10.0 * a),
        innovation_sd: 0.0,
        ..truth.clone()
    };
    let sim = generate_mul(&big, 200, mon(), 3).unwrap();
    let fit = fit_two_way_gaussian(&sim.counts, TwoWayKind::Mul).unwrap();
    for d in 0..5 {
        let s: f64 = fit.day_profiles[d].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        for (g, t) in fit.day_profiles[d].iter().zip(&truth.day_profiles[d]) {
            assert!((g - t).abs() <= 0.01 * t, "day {d}: {g} vs {t}");
        }
    }
}

#[test]
fn wrong_parametric_model_forecasts_worse() {
    let params = AddParams::default_study();
    let mut worse = 0;
    for r in 0..20 {
        let sim = generate_add(&params, 160, mon(), 700 + r).unwrap();
        let (mut e_mul, mut e_add) = (0.0, 0.0);
        for t in 150..160 {
            let train = sim.counts.slice_rows(t - 150, t).unwrap();
            let truth = &sim.rates[t];
            e_mul += rmse(&fit_two_way_gaussian(&train, TwoWayKind::Mul).unwrap().forecast(1).unwrap(), truth);
            e_add += rmse(&fit_two_way_gaussian(&train, TwoWayKind::Add).unwrap().forecast(1).unwrap(), truth);
        }
        worse += usize::from(e_mul > e_add);
    }
    assert!(worse >= 12, "MUL worse than ADD in {worse}/20");
}

#[test]
fn parameter_validation() {
    let mut p = MulParams::default_study();
    p.day_profiles[0][0] += 0.01;
    assert!(p.validate().is_err());
    let mut a = AddParams::default_study();
    a.interactions[1][3] += 0.01;
    assert!(a.validate().is_err());
    let mut b = MulParams::default_study();
    b.innovation_sd = -1.0;
    assert!(generate_mul(&b, 10, mon(), 0).is_err());
}
