//! Shared fixtures and brute-force reference implementations.
//!
//! The references are deliberately naive: plain loops, sequential sums, a
//! cyclic Jacobi eigensolver, explicit pseudo-inverses and projectors. They
//! share no code with the library.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use oodeval::arraystore::{EvalBundle, LastLayer, SampleSet, TrainSet};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sd: f64) -> Array2<f64> {
    let n = Normal::new(0.0, sd).unwrap();
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

pub fn logits_of(features: &Array2<f64>, ll: &LastLayer) -> Array2<f64> {
    let mut o = features.dot(&ll.weights);
    o += &ll.bias;
    o
}

/// Class-structured Gaussian features with logits from a random last layer.
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_ood: usize,
    pub dim: usize,
    pub classes: usize,
    pub ood_sets: usize,
}

impl SyntheticSpec {
    pub fn new(seed: u64, dim: usize, classes: usize) -> Self {
        Self {
            seed,
            n_train: 500,
            n_test: 200,
            n_ood: 200,
            dim,
            classes,
            ood_sets: 1,
        }
    }

    pub fn build(&self) -> EvalBundle {
        let mut r = rng(self.seed);
        let (d, c) = (self.dim, self.classes);
        let means = gaussian_matrix(&mut r, c, d, 2.0);
        let weights = gaussian_matrix(&mut r, d, c, 1.0);
        let bias = Array1::from_shape_fn(c, |_| r.random_range(-0.5..0.5));
        let ll = LastLayer { weights, bias };

        let draw = |n: usize, shift: f64, r: &mut ChaCha8Rng| -> (Array2<f64>, Vec<u32>) {
            let labels: Vec<u32> = (0..n).map(|i| (i % c) as u32).collect();
            let noise = gaussian_matrix(r, n, d, 1.0);
            let h = Array2::from_shape_fn((n, d), |(i, j)| {
                means[[labels[i] as usize, j]] + noise[[i, j]] + if j == 0 { shift } else { 0.0 }
            });
            (h, labels)
        };
        let (h_tr, labels) = draw(self.n_train, 0.0, &mut r);
        let (h_te, _) = draw(self.n_test, 0.0, &mut r);
        let train = TrainSet {
            set: SampleSet {
                logits: logits_of(&h_tr, &ll),
                features: Some(h_tr),
            },
            labels,
        };
        let test = SampleSet {
            logits: logits_of(&h_te, &ll),
            features: Some(h_te),
        };
        let mut ood = BTreeMap::new();
        for k in 0..self.ood_sets {
            let (h, _) = draw(self.n_ood, 3.0 + k as f64, &mut r);
            ood.insert(
                format!("shifted_{k}"),
                SampleSet {
                    logits: logits_of(&h, &ll),
                    features: Some(h),
                },
            );
        }
        EvalBundle::new(train, test, ood, Some(ll)).expect("synthetic bundle is valid")
    }
}

pub fn rel_close(a: f64, b: f64, rtol: f64) -> bool {
    a == b || (a - b).abs() <= rtol * a.abs().max(b.abs())
}

// ---------------------------------------------------------------- linear algebra

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and eigenvectors as columns.
pub fn jacobi_eigen(s: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = s.nrows();
    let mut a = s.clone();
    let mut v = Array2::<f64>::eye(n);
    let total: f64 = a.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[[p, q]] == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - sn * akq;
                    a[[k, q]] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - sn * aqk;
                    a[[q, k]] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - sn * vkq;
                    v[[k, q]] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]));
    let values = order.iter().map(|&i| a[[i, i]]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    (values, vectors)
}

/// Pseudo-inverse of a PSD matrix, dropping eigenvalues below 1e-10·λmax.
pub fn psd_pinv(s: &Array2<f64>) -> Array2<f64> {
    let n = s.nrows();
    let (vals, vecs) = jacobi_eigen(s);
    let cut = 1e-10 * vals[0].max(0.0);
    let mut p = Array2::<f64>::zeros((n, n));
    for (k, &l) in vals.iter().enumerate() {
        if l > cut && l > 0.0 {
            for i in 0..n {
                for j in 0..n {
                    p[[i, j]] += vecs[[i, k]] * vecs[[j, k]] / l;
                }
            }
        }
    }
    p
}

pub fn quad(p: &Array2<f64>, v: &[f64]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += v[i] * p[[i, j]] * v[j];
        }
    }
    s
}

// ---------------------------------------------------------------- fitted references

pub struct OracleFit {
    pub means: Array2<f64>,
    pub shared_pinv: Array2<f64>,
    pub global_mean: Vec<f64>,
    pub global_pinv: Array2<f64>,
    pub react_r: f64,
    pub vim_offset: Vec<f64>,
    pub vim_projector: Array2<f64>,
    pub vim_alpha: f64,
    pub knn_train: Vec<Vec<f64>>,
    pub knn_k: usize,
    pub kl_refs: Vec<Vec<f64>>,
    pub weights: Array2<f64>,
    pub bias: Vec<f64>,
}

fn row(m: &Array2<f64>, i: usize) -> Vec<f64> {
    m.row(i).to_vec()
}

pub fn percentile_linear(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn softmax(o: &[f64]) -> Vec<f64> {
    let m = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = o.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub fn lse(o: &[f64]) -> f64 {
    let m = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + o.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn unit(h: &[f64]) -> Vec<f64> {
    let n = h.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        vec![0.0; h.len()]
    } else {
        h.iter().map(|x| x / n).collect()
    }
}

fn first_argmax(o: &[f64]) -> usize {
    let mut b = 0;
    for i in 1..o.len() {
        if o[i] > o[b] {
            b = i;
        }
    }
    b
}

/// Fits every statistic with the same definitions as the library but no shared code.
pub fn oracle_fit(bundle: &EvalBundle, knn_k: usize, vim_dim: usize) -> OracleFit {
    let tr = bundle.id_train();
    let h = tr.set.features.as_ref().unwrap();
    let o = &tr.set.logits;
    let (n, d) = h.dim();
    let c = bundle.num_classes();

    let mut means = Array2::<f64>::zeros((c, d));
    let mut counts = vec![0usize; c];
    for i in 0..n {
        let y = tr.labels[i] as usize;
        counts[y] += 1;
        for j in 0..d {
            means[[y, j]] += h[[i, j]];
        }
    }
    for y in 0..c {
        for j in 0..d {
            means[[y, j]] /= counts[y] as f64;
        }
    }
    let mut shared = Array2::<f64>::zeros((d, d));
    let mut gmean = vec![0.0; d];
    for i in 0..n {
        let y = tr.labels[i] as usize;
        for a in 0..d {
            gmean[a] += h[[i, a]] / n as f64;
            for b in 0..d {
                shared[[a, b]] += (h[[i, a]] - means[[y, a]]) * (h[[i, b]] - means[[y, b]]) / n as f64;
            }
        }
    }
    let mut gcov = Array2::<f64>::zeros((d, d));
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                gcov[[a, b]] += (h[[i, a]] - gmean[a]) * (h[[i, b]] - gmean[b]) / n as f64;
            }
        }
    }

    let all: Vec<f64> = h.iter().cloned().collect();
    let react_r = percentile_linear(&all, 0.99);

    // u = -(Wᵀ)⁺ b = -(W Wᵀ)⁺ W b
    let ll = bundle.last_layer().unwrap();
    let w = &ll.weights;
    let wwt = w.dot(&w.t());
    let wb = w.dot(&ll.bias);
    let u: Vec<f64> = psd_pinv(&wwt).dot(&wb).iter().map(|x| -x).collect();
    let mut gram = Array2::<f64>::zeros((d, d));
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                gram[[a, b]] += (h[[i, a]] - u[a]) * (h[[i, b]] - u[b]);
            }
        }
    }
    let (_, vecs) = jacobi_eigen(&gram);
    let mut proj = Array2::<f64>::eye(d);
    for k in 0..vim_dim {
        for a in 0..d {
            for b in 0..d {
                proj[[a, b]] -= vecs[[a, k]] * vecs[[b, k]];
            }
        }
    }
    let mut res_sum = 0.0;
    let mut logit_sum = 0.0;
    for i in 0..n {
        let centered: Vec<f64> = (0..d).map(|j| h[[i, j]] - u[j]).collect();
        res_sum += residual_norm(&proj, &centered);
        logit_sum += row(o, i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }

    let probs: Vec<Vec<f64>> = (0..n).map(|i| softmax(&row(o, i))).collect();
    let mut kl_refs = Vec::new();
    for g in 0..c {
        let members: Vec<&Vec<f64>> = probs.iter().filter(|p| first_argmax(p) == g).collect();
        if members.is_empty() {
            continue;
        }
        kl_refs.push((0..c).map(|k| members.iter().map(|p| p[k]).sum::<f64>() / members.len() as f64).collect());
    }

    OracleFit {
        means,
        shared_pinv: psd_pinv(&shared),
        global_mean: gmean,
        global_pinv: psd_pinv(&gcov),
        react_r,
        vim_offset: u,
        vim_projector: proj,
        vim_alpha: logit_sum / res_sum,
        knn_train: (0..n).map(|i| unit(&row(h, i))).collect(),
        knn_k: knn_k.min(n),
        kl_refs,
        weights: w.clone(),
        bias: ll.bias.to_vec(),
    }
}

fn residual_norm(proj: &Array2<f64>, v: &[f64]) -> f64 {
    let d = v.len();
    (0..d)
        .map(|a| (0..d).map(|b| proj[[a, b]] * v[b]).sum::<f64>())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Brute-force score of one sample for the method with the given id.
pub fn oracle_score(method: &str, fit: &OracleFit, h: &[f64], o: &[f64]) -> f64 {
    let c = fit.means.nrows();
    let maha = |p: &Array2<f64>, mu: &[f64]| {
        let diff: Vec<f64> = h.iter().zip(mu).map(|(a, b)| a - b).collect();
        quad(p, &diff)
    };
    let class_maha: Vec<f64> = (0..c).map(|k| maha(&fit.shared_pinv, &row(&fit.means, k))).collect();
    match method {
        "msp" => softmax(o).into_iter().fold(f64::NEG_INFINITY, f64::max),
        "maxlogit" => o.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        "energy" => lse(o),
        "kl_matching" => {
            let p = softmax(o);
            let best = fit
                .kl_refs
                .iter()
                .map(|q| {
                    p.iter()
                        .zip(q)
                        .map(|(&pk, &qk)| if pk == 0.0 { 0.0 } else { pk * (pk / qk).ln() })
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            -best
        }
        "mahalanobis" => -class_maha.iter().cloned().fold(f64::INFINITY, f64::min),
        "rel_mahalanobis" => {
            let g = maha(&fit.global_pinv, &fit.global_mean);
            -class_maha.iter().map(|m| m - g).fold(f64::INFINITY, f64::min)
        }
        "react" => {
            let clipped: Vec<f64> = h.iter().map(|&x| x.min(fit.react_r)).collect();
            let logits: Vec<f64> = (0..c)
                .map(|k| (0..h.len()).map(|j| fit.weights[[j, k]] * clipped[j]).sum::<f64>() + fit.bias[k])
                .collect();
            lse(&logits)
        }
        "vim" => {
            let centered: Vec<f64> = h.iter().zip(&fit.vim_offset).map(|(a, b)| a - b).collect();
            let o0 = fit.vim_alpha * residual_norm(&fit.vim_projector, &centered);
            let mut ext = o.to_vec();
            ext.push(o0);
            -softmax(&ext)[c]
        }
        "knn" => {
            let z = unit(h);
            let mut dist: Vec<f64> = fit
                .knn_train
                .iter()
                .map(|t| t.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect();
            dist.sort_by(f64::total_cmp);
            -dist[fit.knn_k - 1]
        }
        "cosine" => (0..c).map(|k| cos(h, &row(&fit.means, k))).fold(f64::NEG_INFINITY, f64::max),
        "rcos" => {
            let sims: Vec<f64> = (0..c).map(|k| cos(h, &row(&fit.means, k))).collect();
            softmax(&sims).into_iter().fold(f64::NEG_INFINITY, f64::max)
        }
        other => panic!("no oracle for {other}"),
    }
}

pub fn oracle_scores(method: &str, fit: &OracleFit, set: &SampleSet) -> Vec<f64> {
    let h = set.features.as_ref().unwrap();
    (0..set.len())
        .map(|i| oracle_score(method, fit, &row(h, i), &row(&set.logits, i)))
        .collect()
}

// ---------------------------------------------------------------- metric references

/// AUROC by explicit pair counting, returned as (2·wins + ties, 2·n·m).
pub fn auroc_pairs(id: &[f64], ood: &[f64]) -> (u64, u64) {
    let mut num = 0u64;
    for &a in id {
        for &b in ood {
            if a > b {
                num += 2;
            } else if a == b {
                num += 1;
            }
        }
    }
    (num, 2 * id.len() as u64 * ood.len() as u64)
}

/// Average precision by walking every distinct threshold, positives scoring
/// high. Tied samples enter the ranking together.
pub fn average_precision(pos: &[f64], neg: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = pos.iter().chain(neg).cloned().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let tp = pos.iter().filter(|&&s| s >= t).count() as f64;
        let fp = neg.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / pos.len() as f64;
        if tp > 0.0 {
            ap += (recall - prev_recall) * tp / (tp + fp);
        }
        prev_recall = recall;
    }
    ap
}

/// τ by sorting: the ⌈Q·N⌉-th largest ID score.
pub fn threshold_by_sort(id: &[f64], q: f64) -> f64 {
    let mut v = id.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let k = ((q * v.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    v[k - 1]
}
