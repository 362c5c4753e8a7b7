//! Fixed-order summation.
//!
//! Every reduction in the crate goes through [`pairwise_sum_by`]: the tree
//! shape depends only on the length of the input, never on thread count, so
//! parallel fits and scores are bit-identical to sequential ones. Parallelism
//! is applied across independent outputs, never inside one sum.

const BLOCK: usize = 16;

/// Pairwise (cascade) sum of `f(0) + ... + f(n - 1)`.
pub fn pairwise_sum_by<F: Fn(usize) -> f64>(n: usize, f: F) -> f64 {
    fn go<F: Fn(usize) -> f64>(lo: usize, hi: usize, f: &F) -> f64 {
        let len = hi - lo;
        if len <= BLOCK {
            let mut acc = 0.0;
            for i in lo..hi {
                acc += f(i);
            }
            acc
        } else {
            let mid = lo + len / 2;
            go(lo, mid, f) + go(mid, hi, f)
        }
    }
    go(0, n, &f)
}

pub fn pairwise_sum(xs: &[f64]) -> f64 {
    pairwise_sum_by(xs.len(), |i| xs[i])
}

/// Dot product with the same fixed summation tree.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    pairwise_sum_by(a.len(), |i| a[i] * b[i])
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
