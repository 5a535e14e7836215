//! Kernel independence tests.
//!
//! The unconditional statistic is `T = (1/n)·Tr(K̃x K̃y)` over centred RBF Gram
//! matrices. Its null law is a weighted sum of χ²₁ variables with weights
//! `λx,i·λy,j / n²`. The conditional statistic replaces each Gram by a
//! residualised version `R K̈ R`, where `K̈` is the Gram of the
//! concatenation `(x, z)` and `R = ε·(K̃z + ε·I)⁻¹`. Its null weights are the
//! eigenvalues of the covariance of the per-sample products of conditional
//! feature maps.
//!
//! Two routes are provided:
//!
//! * dense [`centered_gram`] / [`conditional_gram`], exact `n × n` matrices,
//!   used for small problems and as test oracles;
//! * the low-rank route in [`lowrank`], which factors each Gram by pivoted
//!   Cholesky. The public tests [`uncond_independence_test`] and
//!   [`cond_independence_test`] use it. Test statistics are exact up to the
//!   Cholesky tolerance; null spectra are truncated to the leading features
//!   (see [`NullConfig::trace_fraction`]).

mod gram;
pub mod lowrank;
mod null;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub use gram::{centered_gram, conditional_gram, CenteredGram};
pub use lowrank::{cond_from_maps, uncond_from_maps, Conditioner, FeatureMap};
pub use null::{gamma_pvalue, permutation_pvalue, spectral_pvalue, NullSpectrum, SpectrumSource};

/// Smallest sample accepted by the independence tests.
pub const MIN_TEST_SAMPLES: usize = 8;

/// One node's observations for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleVector {
    values: Vec<f64>,
    standardized: bool,
}

impl SampleVector {
    /// Wrap raw observations. Entries must be finite and the vector nonempty.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DegenerateSample("empty sample".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::DegenerateSample(format!("non-finite value at index {i}")));
        }
        Ok(SampleVector {
            values,
            standardized: false,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    /// Z-score (population standard deviation). Idempotent.
    pub fn standardize(&self) -> Result<SampleVector> {
        if self.standardized {
            return Ok(self.clone());
        }
        let sd = linalg::std_dev(&self.values);
        let scale = self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if !(sd > 1e-12 * scale.max(1e-300)) {
            return Err(Error::DegenerateSample("zero variance".into()));
        }
        Ok(SampleVector {
            values: zscore_with(&self.values, sd),
            standardized: true,
        })
    }

    /// Like [`standardize`](Self::standardize) but a constant vector maps to
    /// all zeros instead of failing.
    pub(crate) fn standardize_lenient(&self) -> SampleVector {
        self.standardize().unwrap_or_else(|_| SampleVector {
            values: vec![0.0; self.values.len()],
            standardized: true,
        })
    }
}

fn zscore_with(x: &[f64], sd: f64) -> Vec<f64> {
    let m = linalg::mean(x);
    x.iter().map(|v| (v - m) / sd).collect()
}

/// Median of pairwise absolute differences over all pairs `i < j`.
pub fn median_bandwidth(x: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::DegenerateSample("need at least two values".into()));
    }
    let h = joint_median_distance(&[x]);
    if h > 0.0 {
        Ok(h)
    } else {
        Err(Error::DegenerateSample("all values equal".into()))
    }
}

/// Median pairwise Euclidean distance between rows formed by `cols`.
pub(crate) fn joint_median_distance(cols: &[&[f64]]) -> f64 {
    let n = cols[0].len();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = cols.iter().map(|c| (c[i] - c[j]).powi(2)).sum();
            d.push(s);
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    // median of squared distances, then sqrt: sqrt is monotone, and for an
    // even count the mean of the middle pair is taken on the distances.
    let mid = d.len() / 2;
    d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let hi = d[mid].sqrt();
    if d.len() % 2 == 1 {
        hi
    } else {
        let lo = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max).sqrt();
        0.5 * (lo + hi)
    }
}

/// Which null distribution turns a statistic into a p-value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum NullMethod {
    /// Monte Carlo draws from the weighted χ² mixture.
    #[serde(rename = "spectral-montecarlo", alias = "spectral-monte-carlo", alias = "spectral")]
    SpectralMonteCarlo,
    /// Two-moment gamma approximation of the same mixture.
    Gamma,
    /// Row permutation (unconditional test only).
    Permutation,
}

impl std::fmt::Display for NullMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NullMethod::SpectralMonteCarlo => "spectral-montecarlo",
            NullMethod::Gamma => "gamma",
            NullMethod::Permutation => "permutation",
        })
    }
}

impl std::str::FromStr for NullMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral-montecarlo" | "spectral" => Ok(NullMethod::SpectralMonteCarlo),
            "gamma" => Ok(NullMethod::Gamma),
            "permutation" => Ok(NullMethod::Permutation),
            other => Err(Error::Config(format!("unknown null method `{other}`"))),
        }
    }
}

/// Knobs shared by every kernel test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NullConfig {
    pub method: NullMethod,
    /// Monte Carlo draws for the spectral null.
    pub n_draws: usize,
    /// Shuffles for the permutation null.
    pub n_permutations: usize,
    /// Conditional-kernel ridge `ε`.
    pub eps: f64,
    /// Seed for null draws / permutations.
    pub seed: u64,
    /// Null-spectrum eigenvalues below `eig_floor · λmax` are dropped.
    pub eig_floor: f64,
    /// Conditional feature maps keep the leading eigen-directions that
    /// together carry this fraction of the Gram trace.
    pub trace_fraction: f64,
    /// Residual-diagonal tolerance of the pivoted Cholesky factorisation.
    pub cholesky_tol: f64,
    /// Upper bound on the Cholesky rank.
    pub max_rank: usize,
}

impl Default for NullConfig {
    fn default() -> Self {
        NullConfig {
            method: NullMethod::SpectralMonteCarlo,
            n_draws: 1000,
            n_permutations: 1000,
            eps: 1e-3,
            seed: 0,
            eig_floor: 1e-8,
            trace_fraction: 0.995,
            cholesky_tol: 1e-6,
            max_rank: 400,
        }
    }
}

impl NullConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        NullConfig { seed, ..self.clone() }
    }

    pub fn with_method(&self, method: NullMethod) -> Self {
        NullConfig { method, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_draws < 1 {
            return Err(Error::Config("n_draws must be ≥ 1".into()));
        }
        if self.method == NullMethod::Permutation && self.n_permutations < 100 {
            return Err(Error::Config("n_permutations must be ≥ 100".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if !(self.trace_fraction > 0.0 && self.trace_fraction <= 1.0) {
            return Err(Error::Config("trace_fraction must lie in (0, 1]".into()));
        }
        if !(self.cholesky_tol > 0.0) || self.max_rank == 0 {
            return Err(Error::Config("cholesky_tol and max_rank must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one independence test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub pvalue: f64,
    pub null_method: NullMethod,
    pub n: usize,
    /// Fraction of the null-covariance trace carried by the retained
    /// spectrum (1 for the unconditional test).
    pub spectrum_coverage: f64,
}

impl TestResult {
    /// Retained spectrum carries less than 99% of the trace.
    pub fn truncation_warning(&self) -> bool {
        self.spectrum_coverage < 0.99
    }
}

fn check_inputs(vs: &[&SampleVector]) -> Result<usize> {
    let n = vs[0].len();
    for v in vs {
        if v.len() != n {
            return Err(Error::LengthMismatch(n, v.len()));
        }
    }
    if n < MIN_TEST_SAMPLES {
        return Err(Error::DegenerateSample(format!(
            "{n} observations, need at least {MIN_TEST_SAMPLES}"
        )));
    }
    Ok(n)
}

/// Unconditional test of `x ⟂ y`.
pub fn uncond_independence_test(x: &SampleVector, y: &SampleVector, cfg: &NullConfig) -> Result<TestResult> {
    cfg.validate()?;
    check_inputs(&[x, y])?;
    let xs = x.standardize()?;
    let ys = y.standardize()?;
    let fx = FeatureMap::marginal(&[xs.values()], cfg)?;
    let fy = FeatureMap::marginal(&[ys.values()], cfg)?;
    uncond_from_maps(&fx, &fy, cfg)
}

/// Conditional test of `x ⟂ y | z`.
pub fn cond_independence_test(
    x: &SampleVector,
    y: &SampleVector,
    z: &SampleVector,
    cfg: &NullConfig,
) -> Result<TestResult> {
    cond_independence_test_multi(x, y, &[z], cfg)
}

/// Conditional test with a multivariate conditioning set; the conditioning
/// variables enter one isotropic RBF kernel after standardisation.
pub fn cond_independence_test_multi(
    x: &SampleVector,
    y: &SampleVector,
    z: &[&SampleVector],
    cfg: &NullConfig,
) -> Result<TestResult> {
    cfg.validate()?;
    if z.is_empty() {
        return uncond_independence_test(x, y, cfg);
    }
    let mut all = vec![x, y];
    all.extend_from_slice(z);
    check_inputs(&all)?;
    let xs = x.standardize()?;
    let ys = y.standardize()?;
    let zs: Vec<SampleVector> = z.iter().map(|v| v.standardize()).collect::<Result<_>>()?;
    let zcols: Vec<&[f64]> = zs.iter().map(|v| v.values()).collect();
    let cond = Conditioner::new(&zcols, cfg)?;
    let fx = cond.feature_map(xs.values(), cfg)?;
    let fy = cond.feature_map(ys.values(), cfg)?;
    cond_from_maps(&fx, &fy, cfg)
}

#[cfg(test)]
mod tests;
