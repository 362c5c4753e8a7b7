//! Dense linear-algebra helpers: Gram matrices with fixed-order sums,
//! symmetric eigendecomposition and Moore–Penrose pseudo-inverses.
//!
//! Decompositions are delegated to `nalgebra`; data lives in `ndarray`
//! row-major arrays everywhere else.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::reduce::pairwise_sum_by;

/// Relative eigenvalue / singular value cutoff used by every pseudo-inverse.
pub const PINV_REL_EPS: f64 = 1e-10;

fn to_nalgebra(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// `XᵀX` for an `n × d` matrix. Each entry is a pairwise sum over rows;
/// entries are computed in parallel but each one has a fixed summation tree.
pub fn gram(x: ArrayView2<f64>) -> Array2<f64> {
    let d = x.ncols();
    let n = x.nrows();
    // column-contiguous copy so each entry streams two slices
    let cols: Vec<Vec<f64>> = x.axis_iter(Axis(1)).map(|c| c.to_vec()).collect();
    let upper: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map(|j| {
            (j..d)
                .map(|k| {
                    let (a, b) = (&cols[j], &cols[k]);
                    pairwise_sum_by(n, |i| a[i] * b[i])
                })
                .collect()
        })
        .collect();
    let mut g = Array2::zeros((d, d));
    for (j, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            g[[j, j + off]] = v;
            g[[j + off, j]] = v;
        }
    }
    g
}

/// Eigenpairs of a symmetric matrix sorted by descending eigenvalue.
/// Exact ties keep ascending original index order. Eigenvectors are the
/// columns of the returned matrix.
pub fn symmetric_eigen_desc(s: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let eig = SymmetricEigen::new(to_nalgebra(s));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    // stable sort: equal eigenvalues stay in index order
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i]));
    let d = s.nrows();
    let vectors = Array2::from_shape_fn((d, order.len()), |(r, c)| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Pseudo-inverse of a symmetric positive semi-definite matrix together with
/// a whitening factor `L` (`d × r`) satisfying `pinv = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdPinv {
    pub pinv: Array2<f64>,
    pub factor: Array2<f64>,
}

impl PsdPinv {
    /// Quadratic form `vᵀ pinv v`, evaluated as `‖Lᵀv‖²`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        let n = v.len();
        pairwise_sum_by(self.factor.ncols(), |k| {
            let col = self.factor.column(k);
            let p = pairwise_sum_by(n, |i| col[i] * v[i]);
            p * p
        })
    }

    /// `Lᵀv`: coordinates of `v` in the whitened space.
    pub fn whiten(&self, v: &[f64]) -> Vec<f64> {
        let n = v.len();
        (0..self.factor.ncols())
            .map(|k| {
                let col = self.factor.column(k);
                pairwise_sum_by(n, |i| col[i] * v[i])
            })
            .collect()
    }
}

/// Pseudo-inverse of a symmetric PSD matrix via eigendecomposition.
/// Eigenvalues below `PINV_REL_EPS · λ_max` are treated as zero; an all-zero
/// (or non-positive) spectrum yields the zero matrix.
pub fn psd_pinv(s: ArrayView2<f64>) -> PsdPinv {
    let d = s.nrows();
    let (values, vectors) = symmetric_eigen_desc(s);
    let lmax = values.iter().copied().fold(0.0f64, f64::max);
    let kept: Vec<usize> = if lmax > 0.0 {
        (0..values.len())
            .filter(|&j| values[j] >= PINV_REL_EPS * lmax)
            .collect()
    } else {
        Vec::new()
    };
    let factor = Array2::from_shape_fn((d, kept.len()), |(i, c)| {
        let j = kept[c];
        vectors[[i, j]] / values[j].sqrt()
    });
    let upper: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map(|a| {
            (a..d)
                .map(|b| pairwise_sum_by(kept.len(), |c| factor[[a, c]] * factor[[b, c]]))
                .collect()
        })
        .collect();
    let mut pinv = Array2::zeros((d, d));
    for (a, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            pinv[[a, a + off]] = v;
            pinv[[a + off, a]] = v;
        }
    }
    PsdPinv { pinv, factor }
}

/// Moore–Penrose pseudo-inverse of a general matrix via SVD, with singular
/// values below `PINV_REL_EPS · σ_max` treated as zero.
pub fn pinv(m: ArrayView2<f64>) -> Array2<f64> {
    let (r, c) = m.dim();
    if r == 0 || c == 0 {
        return Array2::zeros((c, r));
    }
    let svd = to_nalgebra(m).svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.iter().copied().fold(0.0f64, f64::max);
    let mut out = DMatrix::<f64>::zeros(c, r);
    if smax > 0.0 {
        for (k, &s) in svd.singular_values.iter().enumerate() {
            if s < PINV_REL_EPS * smax {
                continue;
            }
            // out += v_k u_kᵀ / s
            for i in 0..c {
                let vik = vt[(k, i)] / s;
                for j in 0..r {
                    out[(i, j)] += vik * u[(j, k)];
                }
            }
        }
    }
    from_nalgebra(&out)
}
