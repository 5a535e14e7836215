use nalgebra::DMatrix;

use super::{joint_median_distance, SampleVector};
use crate::error::{Error, Result};
use crate::linalg;

/// A (possibly centred) `n × n` kernel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredGram {
    pub matrix: DMatrix<f64>,
    pub bandwidth: f64,
    pub centered: bool,
}

impl CenteredGram {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// Symmetry, zero row sums (when centred) and PSD within tolerance.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let m = &self.matrix;
        let n = m.nrows();
        for i in 0..n {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 {
                    return Err(format!("asymmetric at ({i},{j})"));
                }
            }
        }
        if self.centered {
            for i in 0..n {
                let s = m.row(i).sum();
                if s.abs() > 1e-8 {
                    return Err(format!("row {i} sums to {s}"));
                }
            }
        }
        let min_eig = linalg::sym_eigenvalues_desc(m.clone()).last().copied().unwrap_or(0.0);
        if min_eig < -1e-8 * (1.0 + m.trace().abs()) {
            return Err(format!("negative eigenvalue {min_eig}"));
        }
        Ok(())
    }
}

pub(crate) fn rbf_gram(cols: &[&[f64]], bandwidth: f64) -> DMatrix<f64> {
    let n = cols[0].len();
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut k = DMatrix::from_element(n, n, 1.0);
    for j in 0..n {
        for i in (j + 1)..n {
            let d2: f64 = cols.iter().map(|c| (c[i] - c[j]).powi(2)).sum();
            let v = (-d2 * inv).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Centred RBF Gram `H K H` of `x` as given (no standardisation).
pub fn centered_gram(x: &SampleVector, bandwidth: f64) -> Result<CenteredGram> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let mut k = rbf_gram(&[x.values()], bandwidth);
    linalg::double_center(&mut k);
    Ok(CenteredGram {
        matrix: k,
        bandwidth,
        centered: true,
    })
}

fn bandwidth_or_unit(cols: &[&[f64]]) -> f64 {
    let h = joint_median_distance(cols);
    if h > 0.0 {
        h
    } else {
        1.0
    }
}

/// Dense conditional Gram `R K̈ R`, `R = ε·(K̃z + ε·I)⁻¹`.
///
/// Both inputs are standardised first; a constant `z` is allowed and yields
/// `K̃z = 0`, hence `R = I`. The returned bandwidth is the joint `(x, z)` one.
pub fn conditional_gram(x: &SampleVector, z: &SampleVector, eps: f64) -> Result<CenteredGram> {
    if x.len() != z.len() {
        return Err(Error::LengthMismatch(x.len(), z.len()));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let xs = x.standardize_lenient();
    let zs = z.standardize_lenient();
    let joint = [xs.values(), zs.values()];
    let hj = bandwidth_or_unit(&joint);
    let mut kxz = rbf_gram(&joint, hj);
    linalg::double_center(&mut kxz);

    let hz = bandwidth_or_unit(&[zs.values()]);
    let mut kz = rbf_gram(&[zs.values()], hz);
    linalg::double_center(&mut kz);
    let n = x.len();
    let mut reg = kz;
    for i in 0..n {
        reg[(i, i)] += eps;
    }
    // symmetrise away round-off before factorising
    let reg = (&reg + reg.transpose()) * 0.5;
    let chol = reg.cholesky().ok_or(Error::SingularRegularization)?;
    let r = chol.inverse() * eps;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularRegularization);
    }
    let m = &r * kxz * &r;
    let m = (&m + m.transpose()) * 0.5;
    Ok(CenteredGram {
        matrix: m,
        bandwidth: hj,
        centered: true,
    })
}

/// The centred joint Gram `K̈` used inside [`conditional_gram`].
#[cfg(test)]
pub(crate) fn joint_gram(x: &SampleVector, z: &SampleVector) -> CenteredGram {
    let xs = x.standardize_lenient();
    let zs = z.standardize_lenient();
    let joint = [xs.values(), zs.values()];
    let hj = bandwidth_or_unit(&joint);
    let mut k = rbf_gram(&joint, hj);
    linalg::double_center(&mut k);
    CenteredGram {
        matrix: k,
        bandwidth: hj,
        centered: true,
    }
}
