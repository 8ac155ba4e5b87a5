//! Seeded statistics for the result tables: percentile bootstrap intervals
//! over per-example scores and paired sign-flip permutation tests.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 1000;
pub const DEFAULT_PERMUTATIONS: usize = 2000;
pub const DEFAULT_CI_LEVEL: f64 = 0.95;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Linear-interpolation quantile over a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// Percentile bootstrap interval over per-example scores in [0, 1],
/// reported in percent. Constant inputs give exact degenerate intervals
/// (all zeros -> (0.0, 0.0), all ones -> (100.0, 100.0)).
pub fn bootstrap_ci(
    scores: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::InvalidInput(
            "bootstrap interval needs at least one score".into(),
        ));
    }
    if !(0.0..1.0).contains(&level) {
        return Err(Error::InvalidInput(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let n = scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut sum = 0.0;
        for _ in 0..n {
            sum += scores[rng.gen_range(0..n)];
        }
        means.push(sum / n as f64 * 100.0);
    }
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((quantile(&means, alpha), quantile(&means, 1.0 - alpha)))
}

/// Two-sided paired sign-flip permutation test on the mean difference,
/// with add-one smoothing so p stays in (0, 1].
pub fn permutation_test(
    scores_a: &[f64],
    scores_b: &[f64],
    permutations: usize,
    seed: u64,
) -> Result<f64> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::InvalidInput(format!(
            "paired test needs equal lengths, got {} and {}",
            scores_a.len(),
            scores_b.len()
        )));
    }
    if scores_a.is_empty() {
        return Err(Error::InvalidInput("paired test needs at least one pair".into()));
    }
    let diffs: Vec<f64> = scores_a
        .iter()
        .zip(scores_b.iter())
        .map(|(a, b)| a - b)
        .collect();
    let observed = mean(&diffs).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut at_least = 0usize;
    let mut flipped = vec![0.0; diffs.len()];
    for _ in 0..permutations {
        for (dst, &d) in flipped.iter_mut().zip(&diffs) {
            *dst = if rng.gen::<bool>() { d } else { -d };
        }
        if mean(&flipped).abs() >= observed {
            at_least += 1;
        }
    }
    Ok((at_least + 1) as f64 / (permutations + 1) as f64)
}
