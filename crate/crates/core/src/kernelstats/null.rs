use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::error::{Error, Result};
use crate::seed;

/// Where a null spectrum came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumSource {
    /// Pairwise products of the two marginal Gram spectra.
    ProductOfMarginals,
    /// Eigenvalues of the product-feature covariance `ŵŵᵀ`.
    WwTranspose,
}

/// Nonincreasing, nonnegative weights of a χ² mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSpectrum {
    pub eigenvalues: Vec<f64>,
    pub source: SpectrumSource,
}

impl NullSpectrum {
    /// Sorts, clamps round-off negatives to zero and drops values below
    /// `floor · λmax`.
    pub fn new(mut eigenvalues: Vec<f64>, source: SpectrumSource, floor: f64) -> Self {
        for v in eigenvalues.iter_mut() {
            if *v < 0.0 || !v.is_finite() {
                *v = 0.0;
            }
        }
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        let max = eigenvalues.first().copied().unwrap_or(0.0);
        eigenvalues.retain(|&v| v > 0.0 && v >= floor * max);
        NullSpectrum { eigenvalues, source }
    }

    pub fn sum(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.eigenvalues.iter().map(|v| v * v).sum()
    }
}

fn plus_one(exceed: usize, total: usize) -> f64 {
    (1 + exceed) as f64 / (1 + total) as f64
}

/// `P(Σ wₖ ζₖ² ≥ stat)` estimated from `n_draws` Monte Carlo draws, with the
/// `+1` correction.
pub fn spectral_pvalue(stat: f64, weights: &[f64], n_draws: usize, seed: u64) -> Result<f64> {
    if weights.iter().all(|&w| w <= 0.0) {
        return Err(Error::NullEstimationFailure("null spectrum is empty".into()));
    }
    let mut rng = seed::rng(seed);
    let mut exceed = 0;
    for _ in 0..n_draws {
        let mut s = 0.0;
        for &w in weights {
            let z: f64 = rng.sample(StandardNormal);
            s += w * z * z;
        }
        if s >= stat {
            exceed += 1;
        }
    }
    Ok(plus_one(exceed, n_draws))
}

/// Upper tail of a gamma law matched to the given mean and variance.
pub fn gamma_pvalue(stat: f64, mean: f64, var: f64) -> Result<f64> {
    if !(mean > 0.0 && var > 0.0) || !mean.is_finite() || !var.is_finite() {
        return Err(Error::NullEstimationFailure(format!(
            "gamma moments not positive (mean {mean}, var {var})"
        )));
    }
    let shape = mean * mean / var;
    let rate = mean / var;
    let g = Gamma::new(shape, rate).map_err(|e| Error::NullEstimationFailure(format!("gamma parameters: {e}")))?;
    Ok(g.sf(stat.max(0.0)).clamp(0.0, 1.0))
}

/// Permutation p-value for an arbitrary two-sample statistic; `y` is shuffled.
pub fn permutation_pvalue<F>(mut statistic_fn: F, x: &[f64], y: &[f64], n_perm: usize, seed: u64) -> Result<f64>
where
    F: FnMut(&[f64], &[f64]) -> f64,
{
    if n_perm < 100 {
        return Err(Error::InvalidArgument(format!("n_perm must be ≥ 100, got {n_perm}")));
    }
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    let observed = statistic_fn(x, y);
    let mut rng = seed::rng(seed);
    let mut buf = y.to_vec();
    let mut exceed = 0;
    for _ in 0..n_perm {
        buf.shuffle(&mut rng);
        if statistic_fn(x, &buf) >= observed {
            exceed += 1;
        }
    }
    Ok(plus_one(exceed, n_perm))
}

/// Permutation p-value with index permutations, for callers that permute
/// their own representation.
pub(crate) fn permutation_pvalue_indexed<F>(observed: f64, n: usize, n_perm: usize, seed: u64, mut stat_of: F) -> f64
where
    F: FnMut(&[usize]) -> f64,
{
    let mut rng = seed::rng(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut exceed = 0;
    for _ in 0..n_perm {
        idx.shuffle(&mut rng);
        if stat_of(&idx) >= observed {
            exceed += 1;
        }
    }
    plus_one(exceed, n_perm)
}
