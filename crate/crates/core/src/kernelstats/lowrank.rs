//! Low-rank kernel features.
//!
//! Every Gram used by the tests is approximated as `K ≈ G Gᵀ` by pivoted
//! Cholesky, centred by centring the columns of `G`, and diagonalised through
//! the small matrix `GᵀG`. A [`FeatureMap`] holds `ψ = G W` whose columns are
//! `√λᵢ vᵢ` for the eigenpairs of the centred Gram, so `K̃ = ψψᵀ`.
//!
//! Feature maps are reusable: screening builds each node's marginal map once
//! per subject and each candidate's [`Conditioner`] once per subject.

use nalgebra::DMatrix;

use super::null::{self, NullSpectrum, SpectrumSource};
use super::{joint_median_distance, NullConfig, NullMethod, TestResult};
use crate::error::{Error, Result};
use crate::linalg;

/// Centred feature representation of one kernel matrix.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    psi: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    retained: usize,
    diag: Vec<f64>,
}

fn centered_factor(cols: &[&[f64]], cfg: &NullConfig) -> DMatrix<f64> {
    let n = cols[0].len();
    let h = joint_median_distance(cols);
    let h = if h > 0.0 { h } else { 1.0 };
    let inv = 1.0 / (2.0 * h * h);
    let mut g = linalg::pivoted_cholesky(
        n,
        |p, out| {
            for (t, o) in out.iter_mut().enumerate() {
                let d2: f64 = cols.iter().map(|c| (c[t] - c[p]).powi(2)).sum();
                *o = (-d2 * inv).exp();
            }
        },
        cfg.cholesky_tol,
        cfg.max_rank,
    );
    linalg::center_columns(&mut g);
    g
}

impl FeatureMap {
    /// Features of `K = A Aᵀ` for any factor `A` (rows = samples).
    pub fn from_factor(a: DMatrix<f64>, cfg: &NullConfig) -> Self {
        let n = a.nrows();
        let (vals, vecs) = linalg::sym_eigen_desc(linalg::at_b(&a, &a));
        let max = vals.first().copied().unwrap_or(0.0).max(0.0);
        let rank = vals.iter().take_while(|&&v| v > 1e-12 * max && v > 0.0).count();
        let psi = if rank == 0 {
            DMatrix::zeros(n, 0)
        } else {
            &a * vecs.columns(0, rank)
        };
        let eigenvalues: Vec<f64> = vals[..rank].to_vec();
        let total: f64 = eigenvalues.iter().sum();
        let mut retained = 0;
        let mut acc = 0.0;
        for &v in &eigenvalues {
            if acc >= cfg.trace_fraction * total || v < cfg.eig_floor * max {
                break;
            }
            acc += v;
            retained += 1;
        }
        let diag = (0..n).map(|t| psi.row(t).norm_squared()).collect();
        FeatureMap {
            psi,
            eigenvalues,
            retained,
            diag,
        }
    }

    /// Marginal (unconditional) features of the RBF kernel over `cols`,
    /// which should already be standardised.
    pub fn marginal(cols: &[&[f64]], cfg: &NullConfig) -> Result<Self> {
        check_cols(cols)?;
        Ok(Self::from_factor(centered_factor(cols, cfg), cfg))
    }

    pub fn n(&self) -> usize {
        self.psi.nrows()
    }

    /// Numerical rank.
    pub fn rank(&self) -> usize {
        self.psi.ncols()
    }

    /// Columns used for the conditional null.
    pub fn retained(&self) -> usize {
        self.retained
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// Dense `ψψᵀ` (for tests and small problems).
    pub fn gram(&self) -> DMatrix<f64> {
        &self.psi * self.psi.transpose()
    }
}

fn check_cols(cols: &[&[f64]]) -> Result<()> {
    let n = cols.first().map(|c| c.len()).unwrap_or(0);
    if n == 0 {
        return Err(Error::DegenerateSample("empty sample".into()));
    }
    for c in cols {
        if c.len() != n {
            return Err(Error::LengthMismatch(n, c.len()));
        }
    }
    Ok(())
}

/// Applies `R = ε·(K̃z + ε·I)⁻¹` for one conditioning set.
#[derive(Debug, Clone)]
pub struct Conditioner {
    zcols: Vec<Vec<f64>>,
    basis: DMatrix<f64>,
    shrink: Vec<f64>,
}

impl Conditioner {
    /// `zcols` should already be standardised.
    pub fn new(zcols: &[&[f64]], cfg: &NullConfig) -> Result<Self> {
        check_cols(zcols)?;
        let fz = FeatureMap::from_factor(centered_factor(zcols, cfg), cfg);
        let mut basis = fz.psi.clone();
        let mut shrink = Vec::with_capacity(fz.rank());
        for (j, &lam) in fz.eigenvalues.iter().enumerate() {
            basis.column_mut(j).scale_mut(1.0 / lam.sqrt());
            shrink.push(lam / (lam + cfg.eps));
        }
        if shrink.iter().any(|s| !s.is_finite()) {
            return Err(Error::SingularRegularization);
        }
        Ok(Conditioner {
            zcols: zcols.iter().map(|c| c.to_vec()).collect(),
            basis,
            shrink,
        })
    }

    pub fn n(&self) -> usize {
        self.zcols[0].len()
    }

    /// Rank of the conditioning-set factor.
    pub fn rank(&self) -> usize {
        self.shrink.len()
    }

    /// `R G`.
    pub fn residualize(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let mut coef = linalg::at_b(&self.basis, g);
        for (i, s) in self.shrink.iter().enumerate() {
            coef.row_mut(i).scale_mut(*s);
        }
        g - &self.basis * coef
    }

    /// Conditional features of `x`: `R K̈ R` with `K̈` the centred RBF Gram on
    /// the standardised concatenation `(x, z)`.
    pub fn feature_map(&self, x: &[f64], cfg: &NullConfig) -> Result<FeatureMap> {
        if x.len() != self.n() {
            return Err(Error::LengthMismatch(self.n(), x.len()));
        }
        let mut cols: Vec<&[f64]> = vec![x];
        cols.extend(self.zcols.iter().map(|c| c.as_slice()));
        let g = centered_factor(&cols, cfg);
        Ok(FeatureMap::from_factor(self.residualize(&g), cfg))
    }
}

fn statistic(fx: &FeatureMap, fy: &FeatureMap) -> f64 {
    let n = fx.n() as f64;
    (linalg::at_b(&fx.psi, &fy.psi).norm_squared() / n).max(0.0)
}

fn same_n(fx: &FeatureMap, fy: &FeatureMap) -> Result<usize> {
    if fx.n() != fy.n() {
        return Err(Error::LengthMismatch(fx.n(), fy.n()));
    }
    Ok(fx.n())
}

/// Unconditional test from two marginal feature maps.
pub fn uncond_from_maps(fx: &FeatureMap, fy: &FeatureMap, cfg: &NullConfig) -> Result<TestResult> {
    let n = same_n(fx, fy)?;
    let nf = n as f64;
    let stat = statistic(fx, fy);
    let pvalue = match cfg.method {
        NullMethod::SpectralMonteCarlo => {
            let spectrum = product_spectrum(fx, fy, cfg.eig_floor);
            let w: Vec<f64> = spectrum.eigenvalues.iter().map(|v| v / (nf * nf)).collect();
            null::spectral_pvalue(stat, &w, cfg.n_draws, cfg.seed)?
        }
        NullMethod::Gamma => {
            let mean = fx.trace() * fy.trace() / (nf * nf);
            let sx: f64 = fx.eigenvalues.iter().map(|v| v * v).sum();
            let sy: f64 = fy.eigenvalues.iter().map(|v| v * v).sum();
            null::gamma_pvalue(stat, mean, 2.0 * sx * sy / nf.powi(4))?
        }
        NullMethod::Permutation => {
            let mut py = fy.psi.clone();
            null::permutation_pvalue_indexed(stat, n, cfg.n_permutations, cfg.seed, |idx| {
                for (t, &s) in idx.iter().enumerate() {
                    py.row_mut(t).copy_from(&fy.psi.row(s));
                }
                linalg::at_b(&fx.psi, &py).norm_squared() / nf
            })
        }
    };
    Ok(TestResult {
        statistic: stat,
        pvalue,
        null_method: cfg.method,
        n,
        spectrum_coverage: 1.0,
    })
}

/// `λx,i · λy,j` for all pairs (unscaled).
pub fn product_spectrum(fx: &FeatureMap, fy: &FeatureMap, floor: f64) -> NullSpectrum {
    let mut prods = Vec::with_capacity(fx.rank() * fy.rank());
    for a in &fx.eigenvalues {
        for b in &fy.eigenvalues {
            prods.push(a * b);
        }
    }
    NullSpectrum::new(prods, SpectrumSource::ProductOfMarginals, floor)
}

/// Eigenvalues of `ŵŵᵀ` from the retained conditional features, together
/// with the fraction of `Tr(ŵŵᵀ)` they carry.
pub fn ww_spectrum(fx: &FeatureMap, fy: &FeatureMap, floor: f64) -> (NullSpectrum, f64) {
    let n = fx.n();
    let (kx, ky) = (fx.retained, fy.retained);
    let px = fx.psi.columns(0, kx);
    let py = fy.psi.columns(0, ky);
    let d = kx * ky;
    let vals = if d == 0 {
        Vec::new()
    } else if d <= n {
        let mut f = DMatrix::zeros(n, d);
        for a in 0..kx {
            for b in 0..ky {
                let mut col = f.column_mut(a * ky + b);
                for t in 0..n {
                    col[t] = px[(t, a)] * py[(t, b)];
                }
            }
        }
        linalg::sym_eigenvalues_desc(linalg::at_b(&f, &f))
    } else {
        let gx = px * px.transpose();
        let gy = py * py.transpose();
        linalg::sym_eigenvalues_desc(gx.component_mul(&gy))
    };
    let spectrum = NullSpectrum::new(vals, SpectrumSource::WwTranspose, 0.0);
    let full: f64 = fx.diag.iter().zip(&fy.diag).map(|(a, b)| a * b).sum();
    let coverage = if full > 0.0 {
        (spectrum.sum() / full).min(1.0)
    } else {
        1.0
    };
    let max = spectrum.eigenvalues.first().copied().unwrap_or(0.0);
    let mut spectrum = spectrum;
    spectrum.eigenvalues.retain(|&v| v >= floor * max);
    (spectrum, coverage)
}

/// Conditional test from two conditional feature maps built with the same
/// [`Conditioner`].
pub fn cond_from_maps(fx: &FeatureMap, fy: &FeatureMap, cfg: &NullConfig) -> Result<TestResult> {
    let n = same_n(fx, fy)?;
    let nf = n as f64;
    let stat = statistic(fx, fy);
    let (spectrum, coverage) = ww_spectrum(fx, fy, cfg.eig_floor);
    if coverage < 0.99 {
        log::debug!("conditional null spectrum covers {:.4} of the trace", coverage);
    }
    let pvalue = match cfg.method {
        NullMethod::SpectralMonteCarlo => {
            let w: Vec<f64> = spectrum.eigenvalues.iter().map(|v| v / nf).collect();
            null::spectral_pvalue(stat, &w, cfg.n_draws, cfg.seed)?
        }
        NullMethod::Gamma => {
            let mean: f64 = fx.diag.iter().zip(&fy.diag).map(|(a, b)| a * b).sum::<f64>() / nf;
            null::gamma_pvalue(stat, mean, 2.0 * spectrum.sum_sq() / (nf * nf))?
        }
        NullMethod::Permutation => {
            return Err(Error::Config(
                "the permutation null is only available for the unconditional test".into(),
            ))
        }
    };
    Ok(TestResult {
        statistic: stat,
        pvalue,
        null_method: cfg.method,
        n,
        spectrum_coverage: coverage,
    })
}
