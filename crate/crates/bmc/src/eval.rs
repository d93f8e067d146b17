//! Misclassification counting under the optimal label matching.
//!
//! Cluster labels carry no meaning, so an estimated partition is compared to
//! the truth after renumbering its clusters to minimize disagreements. The
//! search is exhaustive over the `K!` permutations for `K ≤ 8` and switches
//! to an optimal-assignment solve on the `K×K` agreement matrix above that.

use itertools::Itertools;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;

use crate::model::Partition;
use crate::{Error, Result};

const EXHAUSTIVE_LIMIT: usize = 8;

/// Result of comparing an estimated partition against the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// Number of misclassified states `|E|` under the best label matching.
    pub mismatches: usize,
    /// `|E| / n`.
    pub rate: f64,
    /// `best_perm[k]` is the estimate label matched to truth cluster `k`.
    pub best_perm: Vec<usize>,
}

/// Count misclassified states, minimizing over all relabelings of the
/// estimate. The estimate may leave some of its `K` labels unused.
pub fn misclassification(truth: &Partition, estimate: &Partition) -> Result<ErrorReport> {
    if truth.n() != estimate.n() {
        return Err(Error::DimensionMismatch(format!(
            "truth has {} states, estimate has {}",
            truth.n(),
            estimate.n()
        )));
    }
    if truth.k() != estimate.k() {
        return Err(Error::DimensionMismatch(format!(
            "truth has {} clusters, estimate has {}",
            truth.k(),
            estimate.k()
        )));
    }
    let n = truth.n();
    let k = truth.k();
    let mut agreement = vec![vec![0i64; k]; k];
    for (t, e) in truth.assignment().iter().zip(estimate.assignment()) {
        agreement[*t][*e] += 1;
    }
    let (best_agree, best_perm) = if k <= EXHAUSTIVE_LIMIT {
        let mut best = (-1i64, Vec::new());
        for perm in (0..k).permutations(k) {
            let agree: i64 = perm.iter().enumerate().map(|(t, &e)| agreement[t][e]).sum();
            if agree > best.0 {
                best = (agree, perm);
            }
        }
        best
    } else {
        let weights = Matrix::from_rows(agreement.clone()).expect("square agreement matrix");
        let (total, assignment) = kuhn_munkres(&weights);
        (total, assignment)
    };
    let mismatches = n - best_agree as usize;
    Ok(ErrorReport {
        mismatches,
        rate: mismatches as f64 / n as f64,
        best_perm,
    })
}

/// Reference error rates: assigning states uniformly at random gives
/// `1 − 1/K`; assigning everything to the smallest cluster gives
/// `1 − min_k α_k`.
pub fn baseline_rates(alpha: &[f64]) -> (f64, f64) {
    let k = alpha.len();
    let random = 1.0 - 1.0 / k as f64;
    let smallest = 1.0 - alpha.iter().cloned().fold(f64::INFINITY, f64::min);
    (random, smallest.max(0.0))
}
