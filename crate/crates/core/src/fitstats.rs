//! Train-set statistics for every detector.
//!
//! All sums go through [`crate::reduce`]; parallel loops only split
//! independent outputs, so a fit is bit-identical for any thread count.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::arraystore::{EvalBundle, LastLayer};
use crate::linalg::{self, PsdPinv};
use crate::reduce::{pairwise_sum_by, norm2};
use crate::{Error, Result};

/// Default neighbour rank for the KNN detector.
pub const DEFAULT_KNN_K: usize = 1000;

/// Fraction of train activations that ReAct clips.
pub const REACT_CLIP_FRACTION: f64 = 0.01;

/// Residual mass (relative to the total offset-feature mass) below which the
/// ViM residual space is considered empty.
pub const VIM_DEGENERATE_RTOL: f64 = 1e-10;

/// Which train grouping defines the KL-matching reference vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlGrouping {
    /// Group by the classifier's argmax prediction (lowest index wins ties).
    #[default]
    Predicted,
    /// Group by the ground-truth train label.
    TrueLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub knn_k: usize,
    pub kl_grouping: KlGrouping,
    /// Overrides the width-based principal dimension rule of ViM.
    pub vim_dim: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            knn_k: DEFAULT_KNN_K,
            kl_grouping: KlGrouping::Predicted,
            vim_dim: None,
        }
    }
}

/// Mean probability vectors for KL-matching. Only classes whose group was
/// non-empty are present; `classes[i]` is the class index of `refs.row(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KlRefs {
    pub classes: Vec<usize>,
    pub refs: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VimParams {
    /// `u = -(Wᵀ)⁺ b`
    pub offset: Array1<f64>,
    /// `d × D`, orthonormal columns spanning the principal space.
    pub basis: Array2<f64>,
    pub alpha: f64,
}

impl VimParams {
    pub fn principal_dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Component of `h - u` orthogonal to the principal space.
    pub fn residual(&self, h: ArrayView1<f64>) -> Vec<f64> {
        let centered: Vec<f64> = h.iter().zip(self.offset.iter()).map(|(a, u)| a - u).collect();
        residual_of(&self.basis, &centered)
    }
}

fn residual_of(basis: &Array2<f64>, v: &[f64]) -> Vec<f64> {
    let d = v.len();
    let coords: Vec<f64> = basis
        .axis_iter(Axis(1))
        .map(|col| pairwise_sum_by(d, |i| col[i] * v[i]))
        .collect();
    (0..d)
        .map(|i| {
            let row = basis.row(i);
            v[i] - pairwise_sum_by(coords.len(), |k| row[k] * coords[k])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnIndex {
    /// Train features scaled to unit norm; zero rows stay zero.
    pub normalized: Array2<f64>,
    pub k: usize,
}

/// Statistics that need penultimate features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub class_means: Array2<f64>,
    pub shared_cov: PsdPinv,
    pub global_mean: Array1<f64>,
    pub global_cov: PsdPinv,
    pub vim: VimParams,
    pub react_r: f64,
    pub knn: KnnIndex,
    pub last_layer: LastLayer,
}

/// Everything the detectors need, fitted once on the ID train split.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedState {
    pub num_classes: usize,
    pub kl_refs: KlRefs,
    /// `None` for logits-only bundles.
    pub features: Option<FeatureStats>,
}

impl FittedState {
    pub fn feature_dim(&self) -> Option<usize> {
        self.features.as_ref().map(|f| f.class_means.ncols())
    }
}

/// Per-class arithmetic means, `C × d`.
pub fn fit_class_means(features: ArrayView2<f64>, labels: &[u32], num_classes: usize) -> Result<Array2<f64>> {
    let d = features.ncols();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= num_classes {
            return Err(Error::Data(format!("label {y} at index {i} out of range [0, {num_classes})")));
        }
        members[y].push(i);
    }
    if let Some(c) = members.iter().position(|m| m.is_empty()) {
        return Err(Error::Data(format!("class {c} has no train samples")));
    }
    let rows: Vec<Vec<f64>> = members
        .par_iter()
        .map(|idx| {
            (0..d)
                .map(|j| pairwise_sum_by(idx.len(), |k| features[[idx[k], j]]) / idx.len() as f64)
                .collect()
        })
        .collect();
    Ok(Array2::from_shape_fn((num_classes, d), |(c, j)| rows[c][j]))
}

/// `(1/N) Σ_i (h_i − μ_{y_i})(h_i − μ_{y_i})ᵀ`.
pub fn shared_covariance(features: ArrayView2<f64>, labels: &[u32], class_means: ArrayView2<f64>) -> Array2<f64> {
    let n = features.nrows();
    let mut centered = features.to_owned();
    for (mut row, &y) in centered.axis_iter_mut(Axis(0)).zip(labels) {
        row -= &class_means.row(y as usize);
    }
    let mut g = linalg::gram(centered.view());
    if n > 0 {
        g /= n as f64;
    }
    g
}

pub fn fit_shared_covariance(features: ArrayView2<f64>, labels: &[u32], class_means: ArrayView2<f64>) -> PsdPinv {
    linalg::psd_pinv(shared_covariance(features, labels, class_means).view())
}

pub fn global_mean(features: ArrayView2<f64>) -> Array1<f64> {
    let n = features.nrows();
    Array1::from_iter(
        features
            .axis_iter(Axis(1))
            .map(|col| pairwise_sum_by(n, |i| col[i]) / n as f64),
    )
}

/// `(1/N) Σ_i (h_i − μ)(h_i − μ)ᵀ` for the class-agnostic Gaussian.
pub fn global_covariance(features: ArrayView2<f64>, mean: ArrayView1<f64>) -> Array2<f64> {
    let n = features.nrows();
    let centered = &features - &mean;
    let mut g = linalg::gram(centered.view());
    if n > 0 {
        g /= n as f64;
    }
    g
}

pub fn fit_global_gaussian(features: ArrayView2<f64>) -> (Array1<f64>, PsdPinv) {
    let mean = global_mean(features);
    let pinv = linalg::psd_pinv(global_covariance(features, mean.view()).view());
    (mean, pinv)
}

/// Principal-space width for ViM from the feature width `d`:
/// 1000 for `d ≥ 2048`, 512 for `768 ≤ d < 2048`, otherwise `d/2` rounded half up.
pub fn vim_principal_dim(d: usize) -> usize {
    if d >= 2048 {
        1000
    } else if d >= 768 {
        512
    } else {
        d.div_ceil(2)
    }
}

/// Fits the ViM offset, principal basis and virtual-logit scale.
pub fn fit_vim(
    features: ArrayView2<f64>,
    logits: ArrayView2<f64>,
    last_layer: &LastLayer,
    principal_dim: usize,
) -> Result<VimParams> {
    let (n, d) = features.dim();
    if principal_dim == 0 || principal_dim > d {
        return Err(Error::Usage(format!(
            "ViM principal dimension {principal_dim} must be in [1, {d}]"
        )));
    }
    if n < principal_dim {
        return Err(Error::Data(format!(
            "ViM needs at least {principal_dim} train samples, got {n}"
        )));
    }
    // u = -(Wᵀ)⁺ b
    let wt_pinv = linalg::pinv(last_layer.weights.t());
    let offset = -wt_pinv.dot(&last_layer.bias);

    let centered = &features - &offset;
    let (_, vectors) = linalg::symmetric_eigen_desc(linalg::gram(centered.view()).view());
    let basis = vectors.slice(ndarray::s![.., ..principal_dim]).to_owned();

    let rows: Vec<(f64, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let v = centered.row(i).to_vec();
            let r = norm2(&residual_of(&basis, &v));
            let maxlogit = logits.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (r, norm2(&v), maxlogit)
        })
        .collect();
    let residual_sum = pairwise_sum_by(n, |i| rows[i].0);
    let total_sum = pairwise_sum_by(n, |i| rows[i].1);
    let logit_sum = pairwise_sum_by(n, |i| rows[i].2);
    // written as a negation so that NaN sums are rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(residual_sum > VIM_DEGENERATE_RTOL * total_sum) {
        return Err(Error::Degenerate(
            "degenerate residual space: train features have no component outside the principal space".into(),
        ));
    }
    let alpha = logit_sum / residual_sum;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Degenerate(format!(
            "ViM scale alpha = {alpha} is not positive (sum of train max-logits {logit_sum})"
        )));
    }
    Ok(VimParams { offset, basis, alpha })
}

/// Linear-interpolation quantile of already sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// ReAct clipping threshold: the 99th percentile over all train feature
/// entries (one global threshold, not per dimension).
pub fn fit_react_threshold(features: ArrayView2<f64>) -> f64 {
    let mut all: Vec<f64> = features.iter().copied().collect();
    all.par_sort_unstable_by(f64::total_cmp);
    quantile_sorted(&all, 1.0 - REACT_CLIP_FRACTION)
}

/// Numerically stable softmax.
pub fn softmax(o: &[f64]) -> Vec<f64> {
    let m = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = o.iter().map(|x| (x - m).exp()).collect();
    let z = pairwise_sum_by(e.len(), |i| e[i]);
    e.into_iter().map(|x| x / z).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(o: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in o.iter().enumerate() {
        if v > o[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax vector per group. `labels` is only read for
/// [`KlGrouping::TrueLabel`].
pub fn fit_kl_refs(train_logits: ArrayView2<f64>, grouping: KlGrouping, labels: &[u32]) -> KlRefs {
    let c = train_logits.ncols();
    let probs: Vec<Vec<f64>> = (0..train_logits.nrows())
        .into_par_iter()
        .map(|i| softmax(&train_logits.row(i).to_vec()))
        .collect();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, p) in probs.iter().enumerate() {
        let g = match grouping {
            KlGrouping::Predicted => argmax(p),
            KlGrouping::TrueLabel => labels[i] as usize,
        };
        groups[g].push(i);
    }
    let classes: Vec<usize> = (0..c).filter(|&g| !groups[g].is_empty()).collect();
    let refs = Array2::from_shape_fn((classes.len(), c), |(r, k)| {
        let idx = &groups[classes[r]];
        pairwise_sum_by(idx.len(), |t| probs[idx[t]][k]) / idx.len() as f64
    });
    KlRefs { classes, refs }
}

pub fn normalize_row(h: &[f64]) -> Vec<f64> {
    let n = norm2(h);
    if n > 0.0 {
        h.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; h.len()]
    }
}

pub fn build_knn_index(features: ArrayView2<f64>, k_requested: usize) -> KnnIndex {
    let (n, d) = features.dim();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| normalize_row(&features.row(i).to_vec()))
        .collect();
    KnnIndex {
        normalized: Array2::from_shape_fn((n, d), |(i, j)| rows[i][j]),
        k: k_requested.min(n).max(1),
    }
}

/// Fits every statistic available for the bundle.
pub fn fit(bundle: &EvalBundle, config: &FitConfig) -> Result<FittedState> {
    let train = bundle.id_train();
    let logits = train.set.logits.view();
    let num_classes = bundle.num_classes();
    let kl_refs = fit_kl_refs(logits, config.kl_grouping, &train.labels);

    let features = match (&train.set.features, bundle.last_layer()) {
        (Some(h), Some(ll)) => {
            let h = h.view();
            let class_means = fit_class_means(h, &train.labels, num_classes)?;
            let shared_cov = fit_shared_covariance(h, &train.labels, class_means.view());
            let (global_mean, global_cov) = fit_global_gaussian(h);
            let dim = config.vim_dim.unwrap_or_else(|| vim_principal_dim(h.ncols()));
            let vim = fit_vim(h, logits, ll, dim)?;
            Some(FeatureStats {
                class_means,
                shared_cov,
                global_mean,
                global_cov,
                vim,
                react_r: fit_react_threshold(h),
                knn: build_knn_index(h, config.knn_k),
                last_layer: ll.clone(),
            })
        }
        _ => None,
    };
    Ok(FittedState {
        num_classes,
        kl_refs,
        features,
    })
}

// ---- serialization -------------------------------------------------------

const STATE_MAGIC: &[u8; 4] = b"OODS";
const STATE_VERSION: u16 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn mat(&mut self, m: &Array2<f64>) {
        self.u64(m.nrows() as u64);
        self.u64(m.ncols() as u64);
        m.iter().for_each(|&v| self.f64(v));
    }
    fn vec(&mut self, v: &Array1<f64>) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
    fn pinv(&mut self, p: &PsdPinv) {
        self.mat(&p.pinv);
        self.mat(&p.factor);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::format(self.path, format!("truncated state file at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::format(self.path, format!("count {v} too large")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn mat(&mut self) -> Result<Array2<f64>> {
        let r = self.usize()?;
        let c = self.usize()?;
        let n = r.checked_mul(c).ok_or_else(|| Error::format(self.path, "size overflow"))?;
        Ok(Array2::from_shape_vec((r, c), self.values(n)?).expect("length matches"))
    }
    fn vec(&mut self) -> Result<Array1<f64>> {
        let n = self.usize()?;
        Ok(Array1::from(self.values(n)?))
    }
    fn pinv(&mut self) -> Result<PsdPinv> {
        Ok(PsdPinv {
            pinv: self.mat()?,
            factor: self.mat()?,
        })
    }
}

impl FittedState {
    /// Layout: magic `OODS`, version u16, then fields in declaration order as
    /// little-endian u64 counts and f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(STATE_MAGIC);
        w.0.extend_from_slice(&STATE_VERSION.to_le_bytes());
        w.u64(self.num_classes as u64);
        w.u64(self.kl_refs.classes.len() as u64);
        self.kl_refs.classes.iter().for_each(|&c| w.u64(c as u64));
        w.mat(&self.kl_refs.refs);
        match &self.features {
            None => w.0.push(0),
            Some(f) => {
                w.0.push(1);
                w.mat(&f.class_means);
                w.pinv(&f.shared_cov);
                w.vec(&f.global_mean);
                w.pinv(&f.global_cov);
                w.vec(&f.vim.offset);
                w.mat(&f.vim.basis);
                w.f64(f.vim.alpha);
                w.f64(f.react_r);
                w.mat(&f.knn.normalized);
                w.u64(f.knn.k as u64);
                w.mat(&f.last_layer.weights);
                w.vec(&f.last_layer.bias);
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(4)? != STATE_MAGIC {
            return Err(Error::format(path, "bad magic for fitted state"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != STATE_VERSION {
            return Err(Error::format(path, format!("unsupported state version {version}")));
        }
        let num_classes = r.usize()?;
        let n_present = r.usize()?;
        let classes = (0..n_present).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let refs = r.mat()?;
        let kl_refs = KlRefs { classes, refs };
        let features = match r.take(1)?[0] {
            0 => None,
            1 => Some(FeatureStats {
                class_means: r.mat()?,
                shared_cov: r.pinv()?,
                global_mean: r.vec()?,
                global_cov: r.pinv()?,
                vim: VimParams {
                    offset: r.vec()?,
                    basis: r.mat()?,
                    alpha: r.f64()?,
                },
                react_r: r.f64()?,
                knn: KnnIndex {
                    normalized: r.mat()?,
                    k: r.usize()?,
                },
                last_layer: LastLayer {
                    weights: r.mat()?,
                    bias: r.vec()?,
                },
            }),
            other => return Err(Error::format(path, format!("bad feature flag {other}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::format(path, "trailing bytes after fitted state"));
        }
        Ok(FittedState {
            num_classes,
            kl_refs,
            features,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
