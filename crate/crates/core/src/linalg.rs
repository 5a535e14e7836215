//! Small dense linear-algebra helpers shared by the kernel tests.

use nalgebra::{DMatrix, SymmetricEigen};

/// Pivoted (incomplete) Cholesky factorisation of a kernel matrix with unit
/// diagonal, accessed column by column.
///
/// Returns `G` (n × m) with `K ≈ G Gᵀ`; stops once every remaining residual
/// diagonal entry is `≤ tol` or `max_rank` columns have been produced. The
/// residual `K − G Gᵀ` is positive semidefinite with trace `≤ n · tol`.
pub fn pivoted_cholesky<F>(n: usize, mut kernel_col: F, tol: f64, max_rank: usize) -> DMatrix<f64>
where
    F: FnMut(usize, &mut [f64]),
{
    let mut resid = vec![1.0_f64; n];
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut pivots: Vec<usize> = Vec::new();
    let mut buf = vec![0.0; n];
    while cols.len() < max_rank.min(n) {
        let (piv, &dmax) = resid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("n > 0");
        if dmax <= tol {
            break;
        }
        kernel_col(piv, &mut buf);
        for col in &cols {
            let c = col[piv];
            if c != 0.0 {
                for (b, v) in buf.iter_mut().zip(col) {
                    *b -= c * v;
                }
            }
        }
        let s = dmax.sqrt();
        let mut g = vec![0.0; n];
        for t in 0..n {
            g[t] = buf[t] / s;
            resid[t] -= g[t] * g[t];
        }
        for &p in &pivots {
            resid[p] = 0.0;
        }
        resid[piv] = 0.0;
        pivots.push(piv);
        cols.push(g);
    }
    let m = cols.len();
    let mut out = DMatrix::zeros(n, m);
    for (j, col) in cols.iter().enumerate() {
        out.column_mut(j).copy_from_slice(col);
    }
    out
}

/// `Aᵀ B`. Materialising the transpose lets the product go through the
/// blocked GEMM kernel, which is several times faster than `tr_mul` here.
pub fn at_b(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * b
}

/// Subtract each column's mean, i.e. left-multiply by the centering matrix.
pub fn center_columns(g: &mut DMatrix<f64>) {
    let n = g.nrows() as f64;
    for mut col in g.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
}

/// `H K H` for a square matrix, with `H = I − (1/n)·11ᵀ`.
pub fn double_center(k: &mut DMatrix<f64>) {
    let n = k.nrows();
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).sum() / nf).collect();
    let col_means: Vec<f64> = (0..n).map(|j| k.column(j).sum() / nf).collect();
    let grand = row_means.iter().sum::<f64>() / nf;
    for j in 0..n {
        for i in 0..n {
            k[(i, j)] += grand - row_means[i] - col_means[j];
        }
    }
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues sorted in
/// nonincreasing order with eigenvectors permuted to match.
pub fn sym_eigen_desc(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), m);
    }
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

/// Eigenvalues only, nonincreasing.
pub fn sym_eigenvalues_desc(m: DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut vals: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    vals
}

/// Median of a slice (average of the two middle values for even length).
pub fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    assert!(n > 0, "median of empty slice");
    let mid = n / 2;
    let (_, &mut hi, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    if n % 2 == 1 {
        hi
    } else {
        let lo = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation.
pub fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    let denom = (sxx * syy).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (sxy / denom).clamp(-1.0, 1.0)
    }
}
