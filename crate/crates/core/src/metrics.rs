//! Evaluation metrics over score vectors.
//!
//! A detector accepts `x` as in-distribution when `S(x) ≥ τ`, with `τ` chosen
//! on ID-test scores so that at least a fraction `Q` of them is accepted.
//! Per-class results are aggregated uniformly over OOD classes.
//!
//! AUPR is average precision, `Σ_k (R_k − R_{k−1}) · P_k` over descending
//! score thresholds where tied scores form a single threshold step. AUPR-S
//! takes ID as the positive class; AUPR-E takes OOD as positive and ranks by
//! negated score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detectors::Method;
use crate::reduce::pairwise_sum;
use crate::{Error, Result};

pub const DEFAULT_TPR_Q: f64 = 0.95;
pub const DEFAULT_UNIT_FAIL_THRESHOLD: f64 = 0.10;

/// Number of ID samples that must be accepted: `⌈Q·N⌉`, clamped to `[1, N]`.
/// Products within 1e-9 (relative) of an integer are snapped to it, so that
/// e.g. `0.95 · 100` yields 95 rather than 96.
pub fn accepted_count(q: f64, n: usize) -> usize {
    let x = q * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
    (k as usize).clamp(1, n)
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q <= 1.0 {
        Ok(())
    } else {
        Err(Error::Usage(format!("TPR level Q = {q} outside (0, 1]")))
    }
}

/// The `⌈Q·N⌉`-th largest ID score.
pub fn threshold_at_tpr(id_scores: &[f64], q: f64) -> Result<f64> {
    check_q(q)?;
    if id_scores.is_empty() {
        return Err(Error::Data("threshold needs at least one ID score".into()));
    }
    let k = accepted_count(q, id_scores.len());
    let mut v = id_scores.to_vec();
    // k-th largest = element at index k-1 in descending order
    let (_, kth, _) = v.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    Ok(*kth)
}

/// Fraction of scores accepted (`≥ tau`).
pub fn acceptance_rate(scores: &[f64], tau: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| s >= tau).count() as f64 / scores.len() as f64
}

pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], q: f64) -> Result<f64> {
    let tau = threshold_at_tpr(id_scores, q)?;
    Ok(acceptance_rate(ood_scores, tau))
}

fn sorted_ascending(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_unstable_by(f64::total_cmp);
    s
}

/// AUROC as an exact fraction `(2·wins + ties, 2·N_id·N_ood)`.
pub fn auroc_counts(id_scores: &[f64], ood_scores: &[f64]) -> (u64, u64) {
    let id = sorted_ascending(id_scores);
    let ood = sorted_ascending(ood_scores);
    // sweep ascending: for each block of equal scores, ID members beat every
    // OOD score strictly below the block and tie with OOD members inside it
    let (mut i, mut j) = (0usize, 0usize);
    let mut doubled: u64 = 0;
    while i < id.len() {
        let v = id[i];
        while j < ood.len() && ood[j] < v {
            j += 1;
        }
        let below = j as u64;
        let mut jt = j;
        while jt < ood.len() && ood[jt] == v {
            jt += 1;
        }
        let ties = (jt - j) as u64;
        let mut it = i;
        while it < id.len() && id[it] == v {
            it += 1;
        }
        let block = (it - i) as u64;
        doubled += block * (2 * below + ties);
        i = it;
    }
    (doubled, 2 * id.len() as u64 * ood.len() as u64)
}

/// Probability that an ID score exceeds an OOD score, ties counted half.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::Data("AUROC needs non-empty ID and OOD scores".into()));
    }
    let (num, den) = auroc_counts(id_scores, ood_scores);
    Ok(num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positive {
    Id,
    Ood,
}

/// Average precision with tied scores processed as one block.
pub fn aupr(id_scores: &[f64], ood_scores: &[f64], positive: Positive) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::Data("AUPR needs non-empty ID and OOD scores".into()));
    }
    // (ranking key, is_positive); higher key ranks first
    let mut items: Vec<(f64, bool)> = match positive {
        Positive::Id => id_scores
            .iter()
            .map(|&s| (s, true))
            .chain(ood_scores.iter().map(|&s| (s, false)))
            .collect(),
        Positive::Ood => id_scores
            .iter()
            .map(|&s| (-s, false))
            .chain(ood_scores.iter().map(|&s| (-s, true)))
            .collect(),
    };
    items.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    let n_pos = items.iter().filter(|x| x.1).count() as f64;
    let mut steps = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < items.len() {
        let v = items[i].0;
        let mut block_tp = 0u64;
        while i < items.len() && items[i].0 == v {
            if items[i].1 {
                block_tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        tp += block_tp;
        if block_tp > 0 {
            steps.push(block_tp as f64 / n_pos * (tp as f64 / (tp + fp) as f64));
        }
    }
    Ok(pairwise_sum(&steps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_name: String,
    pub n: usize,
    pub fpr_at_tpr: f64,
    pub auroc: f64,
    pub aupr_s: f64,
    pub aupr_e: f64,
}

/// One step of the empirical CDF over per-class FPRs: the fraction of
/// classes whose FPR is `≤ fpr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub fpr: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitTestResult {
    pub name: String,
    pub n: usize,
    pub fpr: f64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitTestBlock {
    pub fail_threshold: f64,
    pub failed: usize,
    pub per_test: Vec<UnitTestResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub method: Method,
    pub tpr_q: f64,
    pub threshold_tau: f64,
    pub mean_fpr: f64,
    pub mean_auroc: f64,
    pub mean_aupr_s: f64,
    pub mean_aupr_e: f64,
    pub per_class: Vec<ClassMetrics>,
    pub cdf_points: Vec<CdfPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_tests: Option<UnitTestBlock>,
}

/// Uniform mean; values are summed in sorted order so the result does not
/// depend on class order.
fn uniform_mean(values: impl Iterator<Item = f64>) -> f64 {
    let v = sorted_ascending(&values.collect::<Vec<_>>());
    pairwise_sum(&v) / v.len() as f64
}

/// Right-continuous step CDF evaluated at each distinct FPR.
pub fn cdf_points(fprs: &[f64]) -> Vec<CdfPoint> {
    let sorted = sorted_ascending(fprs);
    let n = sorted.len() as f64;
    let mut out: Vec<CdfPoint> = Vec::new();
    for (i, &x) in sorted.iter().enumerate() {
        let point = CdfPoint {
            fpr: x,
            fraction: (i + 1) as f64 / n,
        };
        match out.last_mut() {
            Some(last) if last.fpr == x => *last = point,
            _ => out.push(point),
        }
    }
    out
}

/// `∫₀¹ (1 − F(x)) dx` for the step CDF; equals the mean FPR.
pub fn area_over_cdf(points: &[CdfPoint]) -> f64 {
    let mut pieces = Vec::with_capacity(points.len() + 1);
    let mut prev_x = 0.0;
    let mut prev_f = 0.0;
    for p in points {
        pieces.push((p.fpr - prev_x) * (1.0 - prev_f));
        prev_x = p.fpr;
        prev_f = p.fraction;
    }
    pieces.push((1.0 - prev_x) * (1.0 - prev_f));
    pairwise_sum(&pieces)
}

/// Per-OOD-class metrics at a single ID-derived threshold, with uniform
/// means and the CDF of per-class FPRs.
pub fn per_class_report(
    method: Method,
    id_scores: &[f64],
    ood_scores: &BTreeMap<String, Vec<f64>>,
    q: f64,
) -> Result<EvalReport> {
    if ood_scores.is_empty() {
        return Err(Error::Data("at least one OOD set required".into()));
    }
    let tau = threshold_at_tpr(id_scores, q)?;
    let per_class = ood_scores
        .iter()
        .map(|(name, s)| {
            if s.is_empty() {
                return Err(Error::Data(format!("OOD set '{name}' is empty")));
            }
            Ok(ClassMetrics {
                class_name: name.clone(),
                n: s.len(),
                fpr_at_tpr: acceptance_rate(s, tau),
                auroc: auroc(id_scores, s)?,
                aupr_s: aupr(id_scores, s, Positive::Id)?,
                aupr_e: aupr(id_scores, s, Positive::Ood)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fprs: Vec<f64> = per_class.iter().map(|c| c.fpr_at_tpr).collect();
    Ok(EvalReport {
        model: None,
        method,
        tpr_q: q,
        threshold_tau: tau,
        mean_fpr: uniform_mean(fprs.iter().copied()),
        mean_auroc: uniform_mean(per_class.iter().map(|c| c.auroc)),
        mean_aupr_s: uniform_mean(per_class.iter().map(|c| c.aupr_s)),
        mean_aupr_e: uniform_mean(per_class.iter().map(|c| c.aupr_e)),
        cdf_points: cdf_points(&fprs),
        per_class,
        unit_tests: None,
    })
}

/// A unit test fails when its FPR is strictly above the threshold.
pub fn count_failed_unit_tests(unit_fprs: &BTreeMap<String, f64>, fail_threshold: f64) -> usize {
    unit_fprs.values().filter(|&&f| f > fail_threshold).count()
}

/// Unit-test FPRs at the report's threshold `tau`.
pub fn unit_test_block(tau: f64, unit_scores: &BTreeMap<String, Vec<f64>>, fail_threshold: f64) -> UnitTestBlock {
    let per_test: Vec<UnitTestResult> = unit_scores
        .iter()
        .map(|(name, s)| {
            let fpr = acceptance_rate(s, tau);
            UnitTestResult {
                name: name.clone(),
                n: s.len(),
                fpr,
                failed: fpr > fail_threshold,
            }
        })
        .collect();
    let fprs: BTreeMap<String, f64> = per_test.iter().map(|t| (t.name.clone(), t.fpr)).collect();
    UnitTestBlock {
        fail_threshold,
        failed: count_failed_unit_tests(&fprs, fail_threshold),
        per_test,
    }
}
