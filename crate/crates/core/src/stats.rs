//! Small statistical helpers shared across modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Deterministic per-task generator: stream `task` of the master seed.
///
/// Every replicate gets its own ChaCha stream, so results do not depend on
/// the order (or thread) in which replicates run.
pub fn split_rng(seed: u64, task: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task);
    rng
}

/// Derives a child seed, for handing a seed to a nested seeded routine.
pub fn child_seed(seed: u64, task: u64) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = seed ^ task.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Quantile of sorted data with linear interpolation between order
/// statistics (`h = (n − 1) p`, the "type 7" definition).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let p = p.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("quantile of an empty sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&v, p))
}

/// Per-column quantiles of a row-major ensemble.
pub fn column_quantiles(rows: &[Vec<f64>], p: f64) -> Vec<f64> {
    let m = rows.first().map_or(0, Vec::len);
    let mut col = Vec::with_capacity(rows.len());
    (0..m)
        .map(|j| {
            col.clear();
            col.extend(rows.iter().map(|r| r[j]));
            col.sort_by(f64::total_cmp);
            quantile_sorted(&col, p)
        })
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
