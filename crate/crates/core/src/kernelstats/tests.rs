use super::*;
use crate::seed;
use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn normals(n: usize, s: u64) -> Vec<f64> {
    let mut rng = seed::rng(s);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn sv(v: Vec<f64>) -> SampleVector {
    SampleVector::new(v).unwrap()
}

fn add(a: &[f64], b: &[f64], wb: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + wb * y).collect()
}

fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm()
}

#[test]
fn sample_vector_rejects_non_finite_and_empty() {
    assert!(SampleVector::new(vec![]).is_err());
    assert!(SampleVector::new(vec![1.0, f64::NAN]).is_err());
    let v = sv(vec![1.0, 2.0, 3.0]);
    assert!(!v.is_standardized());
    let s = v.standardize().unwrap();
    assert!(s.is_standardized());
    assert_relative_eq!(linalg::mean(s.values()), 0.0, epsilon = 1e-12);
    assert_relative_eq!(linalg::std_dev(s.values()), 1.0, epsilon = 1e-12);
    assert!(matches!(
        sv(vec![2.0; 5]).standardize(),
        Err(Error::DegenerateSample(_))
    ));
}

#[test]
fn median_bandwidth_examples() {
    assert_eq!(median_bandwidth(&[0.0, 1.0]).unwrap(), 1.0);
    assert_eq!(median_bandwidth(&[0.0, 1.0, 2.0]).unwrap(), 1.0);
    assert!(matches!(
        median_bandwidth(&[3.0, 3.0, 3.0]),
        Err(Error::DegenerateSample(_))
    ));
    assert!(median_bandwidth(&[1.0]).is_err());
}

#[test]
fn median_bandwidth_of_standard_normal() {
    // |X − Y| ~ |N(0, 2)| so its median is √2 · Φ⁻¹(0.75).
    let expected = 2f64.sqrt() * 0.674_489_750_196_081_7;
    let h = median_bandwidth(&normals(1000, 11)).unwrap();
    assert!((0.8..=1.5).contains(&h), "{h}");
    assert!((h - expected).abs() < 0.06, "{h} vs {expected}");
}

#[test]
fn median_bandwidth_brute_force_agreement() {
    let x = normals(41, 5);
    let mut d = Vec::new();
    for i in 0..x.len() {
        for j in (i + 1)..x.len() {
            d.push((x[i] - x[j]).abs());
        }
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let m = d.len();
    let oracle = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    assert_relative_eq!(median_bandwidth(&x).unwrap(), oracle, epsilon = 1e-12);
}

#[test]
fn centered_gram_two_points() {
    let g = centered_gram(&sv(vec![0.3, -1.7]), 0.8).unwrap();
    let m = &g.matrix;
    let a = m[(0, 0)];
    assert!(a >= 0.0);
    assert_relative_eq!(m[(0, 1)], -a, epsilon = 1e-14);
    assert_relative_eq!(m[(1, 0)], -a, epsilon = 1e-14);
    assert_relative_eq!(m[(1, 1)], a, epsilon = 1e-14);
}

#[test]
fn centered_gram_constant_is_zero() {
    let g = centered_gram(&sv(vec![4.2; 9]), 1.0).unwrap();
    assert!(g.matrix.iter().all(|v| v.abs() < 1e-14));
}

#[test]
fn centered_gram_invariants_hold() {
    let g = centered_gram(&sv(normals(50, 3)), 0.9).unwrap();
    for i in 0..50 {
        assert!(g.matrix.row(i).sum().abs() < 1e-8);
    }
    g.check_invariants().unwrap();
    assert!(centered_gram(&sv(normals(5, 3)), 0.0).is_err());
}

#[test]
fn lowrank_marginal_matches_dense_gram() {
    let x = sv(normals(120, 21)).standardize().unwrap();
    let cfg = NullConfig {
        cholesky_tol: 1e-12,
        ..NullConfig::default()
    };
    let fm = FeatureMap::marginal(&[x.values()], &cfg).unwrap();
    let h = median_bandwidth(x.values()).unwrap();
    let dense = centered_gram(&x, h).unwrap();
    assert!(frob(&fm.gram(), &dense.matrix) < 1e-8 * dense.matrix.norm().max(1.0));
    assert_relative_eq!(fm.trace(), dense.trace(), max_relative = 1e-9);
}

#[test]
fn lowrank_conditional_matches_dense_gram() {
    let z = normals(100, 31);
    let x = add(&z, &normals(100, 32), 0.7);
    let cfg = NullConfig {
        cholesky_tol: 1e-12,
        ..NullConfig::default()
    };
    let xs = sv(x.clone()).standardize().unwrap();
    let zs = sv(z.clone()).standardize().unwrap();
    let cond = Conditioner::new(&[zs.values()], &cfg).unwrap();
    let fm = cond.feature_map(xs.values(), &cfg).unwrap();
    let dense = conditional_gram(&sv(x), &sv(z), cfg.eps).unwrap();
    let err = frob(&fm.gram(), &dense.matrix);
    assert!(err < 1e-6 * dense.matrix.norm().max(1.0), "err {err}");
}

#[test]
fn lowrank_statistic_matches_dense_trace() {
    let n = 80;
    let x = sv(normals(n, 41)).standardize().unwrap();
    let y = sv(add(&normals(n, 42), x.values(), 0.5)).standardize().unwrap();
    let cfg = NullConfig {
        cholesky_tol: 1e-12,
        ..NullConfig::default()
    };
    let kx = centered_gram(&x, median_bandwidth(x.values()).unwrap()).unwrap();
    let ky = centered_gram(&y, median_bandwidth(y.values()).unwrap()).unwrap();
    let oracle = (&kx.matrix * &ky.matrix).trace() / n as f64;
    let r = uncond_independence_test(&x, &y, &cfg).unwrap();
    assert_relative_eq!(r.statistic, oracle, max_relative = 1e-8);
}

#[test]
fn conditional_gram_large_eps_is_joint_gram() {
    let x = sv(normals(30, 51));
    let z = sv(normals(30, 52));
    let k = conditional_gram(&x, &z, 1e6).unwrap();
    let joint = gram::joint_gram(&x, &z);
    assert!(frob(&k.matrix, &joint.matrix) < 1e-3);
}

#[test]
fn conditional_gram_constant_z_is_vacuous() {
    let x = sv(normals(30, 53));
    let z = sv(vec![1.5; 30]);
    let k = conditional_gram(&x, &z, 1e-3).unwrap();
    let joint = gram::joint_gram(&x, &z);
    // K̃z = 0 so R = I and the ratio is exactly one.
    let ratio = k.matrix.dot(&joint.matrix) / joint.matrix.norm_squared();
    assert_relative_eq!(ratio, 1.0, epsilon = 1e-9);
    assert!(frob(&(joint.matrix.clone() * ratio), &k.matrix) < 1e-9);
}

#[test]
fn conditional_gram_self_conditioning_removes_variance() {
    let x = sv(normals(100, 54));
    let k = conditional_gram(&x, &x, 1e-3).unwrap();
    let joint = gram::joint_gram(&x, &x);
    assert!(k.trace() < 0.05 * joint.trace(), "{} vs {}", k.trace(), joint.trace());
    k.check_invariants().unwrap();
}

#[test]
fn conditional_gram_distance_monotone_in_eps() {
    let x = sv(normals(40, 55));
    let z = sv(add(&normals(40, 56), x.values(), 0.8));
    let joint = gram::joint_gram(&x, &z);
    let d: Vec<f64> = [1e-3, 1.0, 1e3, 1e6]
        .iter()
        .map(|&e| frob(&conditional_gram(&x, &z, e).unwrap().matrix, &joint.matrix))
        .collect();
    for w in d.windows(2) {
        assert!(w[1] < w[0], "{d:?}");
    }
}

#[test]
fn identical_variables_are_dependent() {
    let x = sv(normals(200, 61));
    for method in [
        NullMethod::SpectralMonteCarlo,
        NullMethod::Gamma,
        NullMethod::Permutation,
    ] {
        let cfg = NullConfig::default().with_method(method);
        let r = uncond_independence_test(&x, &x, &cfg).unwrap();
        assert!(r.pvalue < 0.001, "{method}: {}", r.pvalue);
        assert_eq!(r.n, 200);
    }
}

#[test]
fn conditional_identical_variables_are_dependent() {
    let x = sv(normals(200, 62));
    let z = sv(normals(200, 63));
    let r = cond_independence_test(&x, &x, &z, &NullConfig::default()).unwrap();
    assert!(r.pvalue < 0.001, "{}", r.pvalue);
}

#[test]
fn permutation_null_rejected_for_conditional_test() {
    let x = sv(normals(50, 1));
    let cfg = NullConfig::default().with_method(NullMethod::Permutation);
    let e = cond_independence_test(&x, &x, &x, &cfg).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn input_validation() {
    let a = sv(normals(20, 1));
    let b = sv(normals(21, 2));
    assert!(matches!(
        uncond_independence_test(&a, &b, &NullConfig::default()),
        Err(Error::LengthMismatch(20, 21))
    ));
    let short = sv(normals(7, 3));
    assert!(matches!(
        uncond_independence_test(&short, &short, &NullConfig::default()),
        Err(Error::DegenerateSample(_))
    ));
    let flat = sv(vec![1.0; 20]);
    assert!(matches!(
        uncond_independence_test(&a, &flat, &NullConfig::default()),
        Err(Error::DegenerateSample(_))
    ));
}

#[test]
fn permutation_pvalue_examples() {
    let x = normals(100, 71);
    let hsic = |a: &[f64], b: &[f64]| -> f64 {
        let cfg = NullConfig::default();
        let fa = FeatureMap::marginal(&[a], &cfg).unwrap();
        let fb = FeatureMap::marginal(&[b], &cfg).unwrap();
        uncond_from_maps(&fa, &fb, &cfg.with_method(NullMethod::Gamma))
            .unwrap()
            .statistic
    };
    let p = permutation_pvalue(hsic, &x, &x, 999, 3).unwrap();
    assert_eq!(p, 1.0 / 1000.0);
    let p = permutation_pvalue(|_, _| 1.0, &x, &x, 150, 3).unwrap();
    assert_eq!(p, 1.0);
    assert!(permutation_pvalue(|_, _| 1.0, &x, &x, 99, 3).is_err());
}

#[test]
fn spectral_pvalue_deterministic_and_floored() {
    let w = [0.5, 0.25, 0.1];
    let a = spectral_pvalue(0.3, &w, 500, 9).unwrap();
    let b = spectral_pvalue(0.3, &w, 500, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(spectral_pvalue(1e9, &w, 1000, 9).unwrap(), 1.0 / 1001.0);
    assert_eq!(spectral_pvalue(0.0, &w, 1000, 9).unwrap(), 1.0);
    assert!(matches!(
        spectral_pvalue(1.0, &[0.0], 10, 0),
        Err(Error::NullEstimationFailure(_))
    ));
}

#[test]
fn gamma_pvalue_matches_exponential_case() {
    // mean = var = 1 is the unit exponential: P(X ≥ t) = e^{-t}.
    for t in [0.1, 1.0, 3.0] {
        assert_relative_eq!(gamma_pvalue(t, 1.0, 1.0).unwrap(), (-t).exp(), max_relative = 1e-10);
    }
    assert!(gamma_pvalue(1.0, 0.0, 1.0).is_err());
}

#[test]
fn null_spectrum_clamps_and_sorts() {
    let s = NullSpectrum::new(vec![0.1, -1e-12, 3.0, 1e-10], SpectrumSource::WwTranspose, 1e-8);
    assert_eq!(s.eigenvalues, vec![3.0, 0.1]);
}

#[test]
fn spectral_and_gamma_moments_agree() {
    // The gamma fit uses the exact first two moments of the spectral mixture.
    let n = 150;
    let cfg = NullConfig::default();
    let x = sv(normals(n, 81)).standardize().unwrap();
    let y = sv(normals(n, 82)).standardize().unwrap();
    let fx = FeatureMap::marginal(&[x.values()], &cfg).unwrap();
    let fy = FeatureMap::marginal(&[y.values()], &cfg).unwrap();
    let spec = lowrank::product_spectrum(&fx, &fy, 0.0);
    let nf = n as f64;
    assert_relative_eq!(
        spec.sum() / (nf * nf),
        fx.trace() * fy.trace() / (nf * nf),
        max_relative = 1e-10
    );
}

#[test]
fn multivariate_conditioning_separates_chain_ends() {
    let n = 300;
    let a = normals(n, 91);
    let b = normals(n, 92);
    let x = add(&a, &b, 1.0);
    let y = add(&add(&a, &b, 1.0), &normals(n, 93), 1.0);
    let x = add(&x, &normals(n, 94), 1.0);
    let (a, b, x, y) = (sv(a), sv(b), sv(x), sv(y));
    let cfg = NullConfig::default();
    let r = cond_independence_test_multi(&x, &y, &[&a, &b], &cfg).unwrap();
    let u = uncond_independence_test(&x, &y, &cfg).unwrap();
    assert!(u.pvalue < 0.01);
    assert!(r.pvalue > 0.01, "{}", r.pvalue);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn statistics_nonnegative_and_pvalues_in_range(
        xs in prop::collection::vec(-5.0f64..5.0, 12..40),
        mix in -1.0f64..1.0,
        s in 0u64..1000,
    ) {
        let n = xs.len();
        let noise = normals(n, s);
        let ys = add(&noise, &xs, mix);
        let zs = normals(n, s + 1);
        let (x, y, z) = (sv(xs), sv(ys), sv(zs));
        prop_assume!(x.standardize().is_ok());
        for method in [NullMethod::SpectralMonteCarlo, NullMethod::Gamma] {
            let cfg = NullConfig::default().with_method(method).with_seed(s);
            let u = uncond_independence_test(&x, &y, &cfg).unwrap();
            prop_assert!(u.statistic >= 0.0);
            prop_assert!((0.0..=1.0).contains(&u.pvalue));
            let c = cond_independence_test(&x, &y, &z, &cfg).unwrap();
            prop_assert!(c.statistic >= 0.0);
            prop_assert!((0.0..=1.0).contains(&c.pvalue));
        }
    }

    #[test]
    fn centered_gram_invariants(xs in prop::collection::vec(-3.0f64..3.0, 2..25), h in 0.05f64..5.0) {
        let g = centered_gram(&sv(xs), h).unwrap();
        prop_assert!(g.check_invariants().is_ok());
    }

    #[test]
    fn test_is_seed_deterministic(s in 0u64..500) {
        let x = sv(normals(40, s));
        let y = sv(normals(40, s + 7));
        let cfg = NullConfig::default().with_seed(s);
        let a = uncond_independence_test(&x, &y, &cfg).unwrap();
        let b = uncond_independence_test(&x, &y, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }
}
