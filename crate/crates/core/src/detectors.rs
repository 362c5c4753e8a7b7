//! Per-sample OOD scores. For every method a larger score means "more
//! in-distribution". Scores are computed in f64 regardless of input
//! precision, in input order, and are always finite.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arraystore::{LastLayer, SampleSet};
use crate::fitstats::{normalize_row, softmax, FeatureStats, FittedState, KlRefs, KnnIndex, VimParams};
use crate::linalg::PsdPinv;
use crate::reduce::{dot, norm2, pairwise_sum_by};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Msp,
    #[serde(rename = "maxlogit")]
    MaxLogit,
    Energy,
    KlMatching,
    Mahalanobis,
    RelMahalanobis,
    React,
    Vim,
    Knn,
    Cosine,
    Rcos,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Msp,
        Method::MaxLogit,
        Method::Energy,
        Method::KlMatching,
        Method::Mahalanobis,
        Method::RelMahalanobis,
        Method::React,
        Method::Vim,
        Method::Knn,
        Method::Cosine,
        Method::Rcos,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Msp => "msp",
            Method::MaxLogit => "maxlogit",
            Method::Energy => "energy",
            Method::KlMatching => "kl_matching",
            Method::Mahalanobis => "mahalanobis",
            Method::RelMahalanobis => "rel_mahalanobis",
            Method::React => "react",
            Method::Vim => "vim",
            Method::Knn => "knn",
            Method::Cosine => "cosine",
            Method::Rcos => "rcos",
        }
    }

    /// Column header used in summary tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Msp => "MSP",
            Method::MaxLogit => "MaxLogit",
            Method::Energy => "Energy",
            Method::KlMatching => "KL-Match",
            Method::Mahalanobis => "Maha",
            Method::RelMahalanobis => "RMaha",
            Method::React => "ReAct",
            Method::Vim => "ViM",
            Method::Knn => "KNN",
            Method::Cosine => "Cosine",
            Method::Rcos => "RCos",
        }
    }

    pub fn needs_features(self) -> bool {
        !matches!(
            self,
            Method::Msp | Method::MaxLogit | Method::Energy | Method::KlMatching
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Method::ALL.iter().map(|m| m.id()).collect();
                Error::Usage(format!("unknown method '{s}' (known: {})", known.join(", ")))
            })
    }
}

/// Scores of one method on one sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub method: Method,
    pub set_name: String,
    pub values: Vec<f64>,
}

fn per_row<F>(m: ArrayView2<f64>, f: F) -> Vec<f64>
where
    F: Fn(ArrayView1<f64>) -> f64 + Sync,
{
    (0..m.nrows()).into_par_iter().map(|i| f(m.row(i))).collect()
}

fn max_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// `log Σ exp(x)` with max subtraction.
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = max_of(x.iter().copied());
    m + pairwise_sum_by(x.len(), |i| (x[i] - m).exp()).ln()
}

pub fn score_msp(logits: ArrayView2<f64>) -> Vec<f64> {
    per_row(logits, |o| max_of(softmax(&o.to_vec())))
}

pub fn score_maxlogit(logits: ArrayView2<f64>) -> Vec<f64> {
    per_row(logits, |o| max_of(o.iter().copied()))
}

pub fn score_energy(logits: ArrayView2<f64>) -> Vec<f64> {
    per_row(logits, |o| logsumexp(&o.to_vec()))
}

/// `KL[p ‖ q]` with `0·ln(0/q) = 0` and `p·ln(p/0) = +∞`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    pairwise_sum_by(p.len(), |k| {
        if p[k] == 0.0 {
            0.0
        } else if q[k] == 0.0 {
            f64::INFINITY
        } else {
            p[k] * (p[k] / q[k]).ln()
        }
    })
}

pub fn score_kl_matching(logits: ArrayView2<f64>, refs: &KlRefs) -> Result<Vec<f64>> {
    let c = logits.ncols();
    if refs.refs.ncols() != c {
        return Err(dim_err("logits", c, refs.refs.ncols()));
    }
    let scores = per_row(logits, |o| {
        let p = softmax(&o.to_vec());
        let best = refs
            .refs
            .axis_iter(Axis(0))
            .map(|d| kl_divergence(&p, &d.to_vec()))
            .fold(f64::INFINITY, f64::min);
        -best
    });
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Degenerate(format!(
            "KL-matching: sample {i} has infinite divergence to every reference vector"
        )));
    }
    Ok(scores)
}

/// Squared Mahalanobis distance from each class mean, in whitened coordinates.
struct WhitenedMeans<'a> {
    pinv: &'a PsdPinv,
    means: Vec<Vec<f64>>,
}

impl<'a> WhitenedMeans<'a> {
    fn new(means: ArrayView2<f64>, pinv: &'a PsdPinv) -> Self {
        let means = (0..means.nrows())
            .map(|c| pinv.whiten(&means.row(c).to_vec()))
            .collect();
        Self { pinv, means }
    }

    fn min_distance(&self, h: &[f64]) -> f64 {
        let g = self.pinv.whiten(h);
        self.means
            .iter()
            .map(|m| pairwise_sum_by(g.len(), |k| (g[k] - m[k]) * (g[k] - m[k])))
            .fold(f64::INFINITY, f64::min)
    }
}

/// `−min_c (h − μ_c)ᵀ Σ⁺ (h − μ_c)`.
pub fn score_mahalanobis(features: ArrayView2<f64>, class_means: ArrayView2<f64>, shared_cov: &PsdPinv) -> Vec<f64> {
    let w = WhitenedMeans::new(class_means, shared_cov);
    per_row(features, |h| -w.min_distance(&h.to_vec()))
}

/// `−min_c [ M_c(h) − M_global(h) ]` with `M` the squared Mahalanobis distances.
pub fn score_rel_mahalanobis(features: ArrayView2<f64>, stats: &FeatureStats) -> Vec<f64> {
    let w = WhitenedMeans::new(stats.class_means.view(), &stats.shared_cov);
    let global = stats.global_mean.to_vec();
    per_row(features, |h| {
        let h = h.to_vec();
        let centered: Vec<f64> = h.iter().zip(&global).map(|(a, b)| a - b).collect();
        stats.global_cov.quad_form(&centered) - w.min_distance(&h)
    })
}

/// Energy of the logits recomputed from features clipped at `r`.
pub fn score_react_energy(features: ArrayView2<f64>, last_layer: &LastLayer, r: f64) -> Vec<f64> {
    per_row(features, |h| {
        let clipped: Vec<f64> = h.iter().map(|&x| x.min(r)).collect();
        logsumexp(&last_layer.logits(&clipped))
    })
}

/// Negative softmax probability of the virtual logit `α‖residual‖`.
pub fn score_vim(features: ArrayView2<f64>, logits: ArrayView2<f64>, vim: &VimParams) -> Vec<f64> {
    (0..features.nrows())
        .into_par_iter()
        .map(|i| {
            let virtual_logit = vim.alpha * norm2(&vim.residual(features.row(i)));
            let o = logits.row(i);
            let m = max_of(o.iter().copied()).max(virtual_logit);
            let e0 = (virtual_logit - m).exp();
            let z = pairwise_sum_by(o.len(), |c| (o[c] - m).exp()) + e0;
            -e0 / z
        })
        .collect()
}

/// Negative distance to the K-th nearest normalized train feature.
pub fn score_knn(features: ArrayView2<f64>, index: &KnnIndex) -> Vec<f64> {
    let n = index.normalized.nrows();
    let k = index.k.clamp(1, n.max(1));
    per_row(features, |h| {
        let z = normalize_row(&h.to_vec());
        let mut dist: Vec<f64> = (0..n)
            .map(|i| {
                let zi = index.normalized.row(i);
                pairwise_sum_by(z.len(), |j| (z[j] - zi[j]) * (z[j] - zi[j])).sqrt()
            })
            .collect();
        let (_, kth, _) = dist.select_nth_unstable_by(k - 1, f64::total_cmp);
        -*kth
    })
}

/// Cosine similarity; 0 if either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm2(a), norm2(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

fn similarities(h: ArrayView1<f64>, concepts: ArrayView2<f64>) -> Vec<f64> {
    let h = h.to_vec();
    concepts
        .axis_iter(Axis(0))
        .map(|u| cosine_similarity(&u.to_vec(), &h))
        .collect()
}

pub fn score_cosine(features: ArrayView2<f64>, concepts: ArrayView2<f64>) -> Vec<f64> {
    per_row(features, |h| max_of(similarities(h, concepts)))
}

/// Max softmax over cosine similarities (temperature 1).
pub fn score_rcos_mcm(features: ArrayView2<f64>, concepts: ArrayView2<f64>) -> Vec<f64> {
    per_row(features, |h| max_of(softmax(&similarities(h, concepts))))
}

fn dim_err(what: &str, got: usize, want: usize) -> Error {
    Error::Data(format!("dimension mismatch: {what} have {got} columns, fitted state expects {want}"))
}

/// Scores one sample set with a fitted state. `concepts` replaces the class
/// means as concept vectors for the cosine-based methods.
pub fn score_set(
    method: Method,
    set_name: &str,
    set: &SampleSet,
    state: &FittedState,
    concepts: Option<&Array2<f64>>,
) -> Result<ScoreVector> {
    let logits = set.logits.view();
    if logits.ncols() != state.num_classes {
        return Err(dim_err("logits", logits.ncols(), state.num_classes));
    }
    let values = if method.needs_features() {
        let (Some(h), Some(stats)) = (&set.features, &state.features) else {
            return Err(Error::Usage(format!(
                "method '{method}' requires features, but the bundle is logits-only"
            )));
        };
        let d = stats.class_means.ncols();
        if h.ncols() != d {
            return Err(dim_err("features", h.ncols(), d));
        }
        let h = h.view();
        let concepts = match concepts {
            Some(c) if c.ncols() != d => return Err(dim_err("concept vectors", c.ncols(), d)),
            Some(c) => c.view(),
            None => stats.class_means.view(),
        };
        match method {
            Method::Mahalanobis => score_mahalanobis(h, stats.class_means.view(), &stats.shared_cov),
            Method::RelMahalanobis => score_rel_mahalanobis(h, stats),
            Method::React => score_react_energy(h, &stats.last_layer, stats.react_r),
            Method::Vim => score_vim(h, logits, &stats.vim),
            Method::Knn => score_knn(h, &stats.knn),
            Method::Cosine => score_cosine(h, concepts),
            Method::Rcos => score_rcos_mcm(h, concepts),
            _ => unreachable!("logit methods handled below"),
        }
    } else {
        match method {
            Method::Msp => score_msp(logits),
            Method::MaxLogit => score_maxlogit(logits),
            Method::Energy => score_energy(logits),
            Method::KlMatching => score_kl_matching(logits, &state.kl_refs)?,
            _ => unreachable!("feature methods handled above"),
        }
    };
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Degenerate(format!(
            "{method} produced a non-finite score for sample {i} of '{set_name}'"
        )));
    }
    Ok(ScoreVector {
        method,
        set_name: set_name.to_string(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn msp_examples() {
        assert_eq!(score_msp(array![[0.0, 0.0, 0.0, 0.0]].view()), vec![0.25]);
        assert!(close(score_msp(array![[8f64.ln(), 0.0, 0.0]].view())[0], 0.8, 1e-15));
        assert_eq!(score_msp(array![[-3.7]].view()), vec![1.0]);
    }

    #[test]
    fn maxlogit_examples() {
        assert_eq!(score_maxlogit(array![[3.5, -1.0, 2.0], [-5.0, -7.0, -9.0]].view()), vec![3.5, -5.0]);
    }

    #[test]
    fn energy_examples() {
        assert!(close(score_energy(array![[0.0, 0.0, 0.0]].view())[0], 3f64.ln(), 1e-15));
        assert!(close(score_energy(array![[1.0, 1.0]].view())[0], 1.0 + 2f64.ln(), 1e-15));
        assert_eq!(score_energy(array![[-2.5]].view()), vec![-2.5]);
        // no overflow for huge logits
        assert!(close(score_energy(array![[1000.0, 1000.0]].view())[0], 1000.0 + 2f64.ln(), 1e-12));
    }

    fn refs(rows: Array2<f64>) -> KlRefs {
        KlRefs {
            classes: (0..rows.nrows()).collect(),
            refs: rows,
        }
    }

    #[test]
    fn kl_matching_examples() {
        let r = refs(array![[1.0, 0.0], [0.5, 0.5]]);
        assert_eq!(score_kl_matching(array![[0.0, 0.0]].view(), &r).unwrap(), vec![0.0]);

        let r = refs(array![[0.5, 0.5]]);
        let o = array![[0.9f64.ln(), 0.1f64.ln()]];
        let s = score_kl_matching(o.view(), &r).unwrap()[0];
        let want = -(0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln());
        assert!(close(s, want, 1e-12));
        assert!(close(s, -0.368064, 1e-6));
    }

    #[test]
    fn kl_matching_all_infinite_is_error() {
        let r = refs(array![[1.0, 0.0]]);
        assert!(matches!(
            score_kl_matching(array![[0.0, 0.0]].view(), &r),
            Err(Error::Degenerate(_))
        ));
    }

    fn pinv_of(m: Array2<f64>) -> PsdPinv {
        // test helper: build the factor from a diagonal pinv
        let d = m.nrows();
        let factor = Array2::from_shape_fn((d, d), |(i, j)| if i == j { m[[i, i]].sqrt() } else { 0.0 });
        PsdPinv { pinv: m, factor }
    }

    #[test]
    fn mahalanobis_examples() {
        let id = pinv_of(Array2::eye(2));
        let means = array![[0.0, 0.0]];
        assert_eq!(score_mahalanobis(array![[3.0, 4.0]].view(), means.view(), &id), vec![-25.0]);
        assert_eq!(score_mahalanobis(array![[0.0, 0.0]].view(), means.view(), &id), vec![-0.0]);
        let scaled = pinv_of(array![[0.25, 0.0], [0.0, 1.0]]);
        assert_eq!(score_mahalanobis(array![[2.0, 0.0]].view(), means.view(), &scaled), vec![-1.0]);
    }

    #[test]
    fn react_example() {
        let ll = LastLayer {
            weights: Array2::eye(2),
            bias: Array1::zeros(2),
        };
        let s = score_react_energy(array![[2.0, 0.5]].view(), &ll, 1.0)[0];
        assert!(close(s, (1f64.exp() + 0.5f64.exp()).ln(), 1e-15));
        assert!(close(s, 1.474077, 1e-6));
        // r above every entry: identical to plain energy
        let s = score_react_energy(array![[2.0, 0.5]].view(), &ll, 10.0)[0];
        assert_eq!(s, score_energy(array![[2.0, 0.5]].view())[0]);
    }

    #[test]
    fn vim_zero_residual_is_minus_third() {
        let vim = VimParams {
            offset: Array1::zeros(2),
            basis: array![[1.0], [0.0]],
            alpha: 3.0,
        };
        let s = score_vim(array![[5.0, 0.0]].view(), array![[0.0, 0.0]].view(), &vim)[0];
        assert!(close(s, -1.0 / 3.0, 1e-15));
    }

    #[test]
    fn vim_monotone_in_residual() {
        let vim = VimParams {
            offset: Array1::zeros(2),
            basis: array![[1.0], [0.0]],
            alpha: 0.7,
        };
        let h = Array2::from_shape_fn((20, 2), |(i, j)| if j == 0 { 1.0 } else { i as f64 * 0.5 });
        let o = Array2::from_elem((20, 3), 1.25);
        let s = score_vim(h.view(), o.view(), &vim);
        assert!(s.windows(2).all(|w| w[1] < w[0]), "{s:?}");
        assert!(s.iter().all(|&v| v > -1.0 && v < 0.0));
    }

    #[test]
    fn knn_examples() {
        let idx = KnnIndex {
            normalized: array![[1.0, 0.0], [0.0, 1.0]],
            k: 2,
        };
        assert!(close(score_knn(array![[2.0, 0.0]].view(), &idx)[0], -(2f64.sqrt()), 1e-15));
        let idx1 = KnnIndex { k: 1, ..idx };
        assert_eq!(score_knn(array![[0.0, 3.0]].view(), &idx1), vec![-0.0]);
        // zero query behaves like the origin: distance 1 to every unit vector
        assert_eq!(score_knn(array![[0.0, 0.0]].view(), &idx1), vec![-1.0]);
    }

    #[test]
    fn cosine_examples() {
        let means = array![[1.0, 2.0], [-3.0, 0.5]];
        assert!(close(score_cosine(array![[1.0, 2.0]].view(), means.view())[0], 1.0, 1e-15));
        let one = array![[1.0, 1.0]];
        assert_eq!(score_cosine(array![[1.0, -1.0]].view(), one.view()), vec![0.0]);
        assert!(close(score_cosine(array![[-1.0, -1.0]].view(), one.view())[0], -1.0, 1e-15));
        assert_eq!(score_cosine(array![[0.0, 0.0]].view(), means.view()), vec![0.0]);
    }

    #[test]
    fn rcos_examples() {
        let means = array![[1.0, 0.0], [-1.0, 0.0]];
        let s = score_rcos_mcm(array![[2.0, 0.0]].view(), means.view())[0];
        let e = 1f64.exp();
        assert!(close(s, e / (e + 1.0 / e), 1e-15));
        assert!(close(s, 0.880797, 1e-6));
        let eq = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        assert!(close(score_rcos_mcm(array![[0.0, 0.0]].view(), eq.view())[0], 1.0 / 3.0, 1e-15));
    }

    #[test]
    fn method_ids_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.id().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.id()));
        }
        assert!(matches!("odin".parse::<Method>(), Err(Error::Usage(_))));
    }
}
