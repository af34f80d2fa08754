#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use ratefactor::simgen::{generate_mul, MulParams, Simulated};
use ratefactor::{CountMatrix, Weekday};

pub fn mon() -> Weekday {
    Weekday::new(1).unwrap()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Nelder–Mead minimizer with standard coefficients.
pub fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, iters: usize) -> (Vec<f64>, f64) {
    let d = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..d {
        let mut x = x0.to_vec();
        x[i] += step;
        simplex.push(x);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|x| f(x)).collect();
    for _ in 0..iters {
        let mut idx: Vec<usize> = (0..=d).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();
        let centroid: Vec<f64> = (0..d).map(|j| simplex[..d].iter().map(|x| x[j]).sum::<f64>() / d as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..d).map(|j| centroid[j] + t * (simplex[d][j] - centroid[j])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[d] = xe;
                vals[d] = fe;
            } else {
                simplex[d] = xr;
                vals[d] = fr;
            }
        } else if fr < vals[d - 1] {
            simplex[d] = xr;
            vals[d] = fr;
        } else {
            let xc = along(0.5);
            let fc = f(&xc);
            if fc < vals[d] {
                simplex[d] = xc;
                vals[d] = fc;
            } else {
                for i in 1..=d {
                    simplex[i] = (0..d).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                    vals[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=d).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    (simplex[best].clone(), vals[best])
}

/// Newton–Raphson maximum likelihood for Poisson regression with the
/// square-root link, with a backtracking line search.
pub fn newton_sqrt_ml(x: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let obj = |b: &DVector<f64>| -> f64 {
        (x * b)
            .iter()
            .zip(y)
            .map(|(e, y)| e * e - if *y > 0.0 { 2.0 * y * e.abs().ln() } else { 0.0 })
            .sum()
    };
    let z = DVector::from_iterator(y.len(), y.iter().map(|v| (v + 0.25).sqrt()));
    let mut b = (x.transpose() * x).lu().solve(&(x.transpose() * z)).unwrap();
    for _ in 0..200 {
        let eta = x * &b;
        let mut g = DVector::zeros(x.ncols());
        let mut h = DMatrix::zeros(x.ncols(), x.ncols());
        for (j, e) in eta.iter().enumerate() {
            let f = x.row(j).transpose();
            g += &f * (2.0 * e - 2.0 * y[j] / e);
            h += &f * f.transpose() * (2.0 + 2.0 * y[j] / (e * e));
        }
        let step = h.lu().solve(&g).unwrap();
        let mut t = 1.0;
        let f0 = obj(&b);
        while obj(&(&b - &step * t)) > f0 && t > 1e-12 {
            t *= 0.5;
        }
        b -= step * t;
        if g.norm() < 1e-13 * (1.0 + f0.abs()) {
            break;
        }
    }
    b.iter().copied().collect()
}

/// MUL simulation with i.i.d. multiplicative shocks on each day's
/// square-root level, counts redrawn from the shocked rates.
pub fn shocked_mul(params: &MulParams, n: usize, seed: u64, shock_sd: f64) -> Simulated {
    let base = generate_mul(params, n, mon(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shock = Normal::new(0.0, shock_sd).unwrap();
    let mut values = Vec::new();
    let mut rates = Vec::new();
    for row in &base.rates {
        let s = (1.0 + shock.sample(&mut rng)).max(0.2);
        let r: Vec<f64> = row.iter().map(|l| l * s * s).collect();
        values.extend(r.iter().map(|l| Poisson::new(*l).unwrap().sample(&mut rng) as u64));
        rates.push(r);
    }
    let c = &base.counts;
    let counts = CountMatrix::with_labels(
        n,
        c.m(),
        values,
        c.day_labels().to_vec(),
        c.interval_labels().to_vec(),
        c.dates().to_vec(),
    )
    .unwrap();
    Simulated {
        counts,
        rates,
        levels: base.levels,
        clamped: 0,
    }
}

/// Central 3-point finite-difference gradient.
pub fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[i] += h;
            dn[i] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}
