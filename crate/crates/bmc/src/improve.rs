//! Stage-2 recovery: likelihood-based cluster improvement.
//!
//! Each pass estimates `(p̂, π̂, α̂)` from the current partition,
//!
//! ```text
//! p̂[a][b] = N̂_{V̂_a,V̂_b} / N̂_{V̂_a,V},   π̂_k = N̂_{V̂_k,V} / T,   α̂_k = |V̂_k| / n,
//! ```
//!
//! then reassigns every state `x` to the cluster maximizing
//!
//! ```text
//! u_x(c) = Σ_k (N̂_{x,V̂_k}·ln p̂[c][k] + N̂_{V̂_k,x}·ln(p̂[k][c]/α̂_c)) − (T/n)·π̂_c/α̂_c.
//! ```
//!
//! The update is parallel: all states are scored against the estimates of
//! the incoming partition, never against partially updated clusters.
//! Empirical zeros in `p̂` are floored at `1/(2T)` (row renormalized) before
//! logs are taken.

use ndarray::Array2;

use crate::eval::misclassification;
use crate::model::Partition;
use crate::simulate::CountMatrix;
use crate::{Error, Result};

/// Parameter estimates inferred from a candidate partition.
#[derive(Debug, Clone)]
pub struct ClusterEstimates {
    /// Block kernel estimate, floored and row-renormalized.
    pub p_hat: Array2<f64>,
    /// Estimated cluster occupation `π̂_k = N̂_{V̂_k,V}/T`.
    pub pi_hat: Vec<f64>,
    /// Exact cluster fractions `α̂_k = |V̂_k|/n`.
    pub alpha_hat: Vec<f64>,
    /// Floor applied to zero estimates, `1/(2T)`.
    pub floor: f64,
}

/// One recorded pass of the improvement loop.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    /// Partition after this pass.
    pub partition: Partition,
    /// States that changed cluster in this pass.
    pub reassignments: usize,
    /// Error rate against the ground truth, when one was supplied.
    pub error_rate: Option<f64>,
}

/// Trace of the improvement loop.
#[derive(Debug, Clone)]
pub struct ImprovementTrace {
    /// One record per executed pass.
    pub iterations: Vec<IterationRecord>,
    /// A fixed point was reached (final pass moved no state).
    pub converged: bool,
    /// The loop stopped because a pass emptied a cluster.
    pub halted_empty: bool,
}

impl ImprovementTrace {
    /// Partition after the final executed pass, or `None` if no pass ran.
    pub fn final_partition(&self) -> Option<&Partition> {
        self.iterations.last().map(|r| &r.partition)
    }

    /// CSV dump with columns `iter,reassignments,error_rate` (error rate
    /// blank when no ground truth was supplied).
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let io_err = |e| Error::Io {
            context: "writing improvement trace".into(),
            source: e,
        };
        writeln!(w, "iter,reassignments,error_rate").map_err(io_err)?;
        for (i, rec) in self.iterations.iter().enumerate() {
            let err = rec
                .error_rate
                .map(|e| e.to_string())
                .unwrap_or_default();
            writeln!(w, "{},{},{}", i + 1, rec.reassignments, err).map_err(io_err)?;
        }
        Ok(())
    }
}

/// Default iteration cap `⌈ln n⌉`.
pub fn default_max_iters(n: usize) -> usize {
    (n as f64).ln().ceil().max(1.0) as usize
}

/// Estimate `(p̂, π̂, α̂)` from counts and a candidate partition.
///
/// A cluster that was never left (zero row) gets a uniform `p̂` row and a
/// warning; zero entries elsewhere are floored at `1/(2T)` and the row
/// renormalized so every log in the objective is finite.
pub fn estimate_parameters(counts: &CountMatrix, part: &Partition) -> Result<ClusterEstimates> {
    if part.n() != counts.n() {
        return Err(Error::DimensionMismatch(format!(
            "partition over {} states, counts over {}",
            part.n(),
            counts.n()
        )));
    }
    if counts.t() == 0 {
        return Err(Error::DomainError("estimates need at least one transition".into()));
    }
    let k = part.k();
    for (c, members) in part.members().iter().enumerate() {
        if members.is_empty() {
            return Err(Error::EmptyCluster { k: c });
        }
    }
    let n = counts.n();
    let assign = part.assignment();
    let mut block = Array2::<f64>::zeros((k, k));
    for ((x, y), &c) in counts.counts().indexed_iter() {
        if c > 0 {
            block[[assign[x], assign[y]]] += c as f64;
        }
    }
    let t = counts.t() as f64;
    let floor = 1.0 / (2.0 * t);
    let mut p_hat = Array2::<f64>::zeros((k, k));
    let mut pi_hat = vec![0.0; k];
    for a in 0..k {
        let row_total: f64 = (0..k).map(|b| block[[a, b]]).sum();
        pi_hat[a] = row_total / t;
        if row_total == 0.0 {
            log::warn!("cluster {a} was never visited; p-hat row set uniform");
            for b in 0..k {
                p_hat[[a, b]] = 1.0 / k as f64;
            }
            continue;
        }
        let mut sum = 0.0;
        for b in 0..k {
            let v = (block[[a, b]] / row_total).max(floor);
            p_hat[[a, b]] = v;
            sum += v;
        }
        for b in 0..k {
            p_hat[[a, b]] /= sum;
        }
    }
    let alpha_hat = part
        .sizes()
        .iter()
        .map(|&s| s as f64 / n as f64)
        .collect();
    Ok(ClusterEstimates {
        p_hat,
        pi_hat,
        alpha_hat,
        floor,
    })
}

/// The improvement objective `u_x(c)` for a single state and candidate
/// cluster, evaluated directly from the member lists.
pub fn objective(
    counts: &CountMatrix,
    part: &Partition,
    estimates: &ClusterEstimates,
    x: usize,
    c: usize,
) -> f64 {
    let k = part.k();
    let t = counts.t() as f64;
    let n = counts.n() as f64;
    let mut u = 0.0;
    for b in 0..k {
        let mut out = 0.0;
        let mut inc = 0.0;
        for &y in &part.members()[b] {
            out += counts.counts()[[x, y]] as f64;
            inc += counts.counts()[[y, x]] as f64;
        }
        u += out * estimates.p_hat[[c, b]].ln();
        u += inc * (estimates.p_hat[[b, c]].ln() - estimates.alpha_hat[c].ln());
    }
    u - (t / n) * estimates.pi_hat[c] / estimates.alpha_hat[c]
}

/// Result of a single improvement pass.
#[derive(Debug, Clone)]
pub struct ImprovementStep {
    /// The reassigned partition; clusters may be empty.
    pub partition: Partition,
    /// Number of states whose cluster changed.
    pub reassignments: usize,
}

/// One parallel improvement pass: estimates are computed once from the
/// input partition and every state moves to its argmax cluster (ties to the
/// lowest index). The output may contain empty clusters.
pub fn improvement_step(counts: &CountMatrix, part: &Partition) -> Result<ImprovementStep> {
    let estimates = estimate_parameters(counts, part)?;
    let k = part.k();
    let n = counts.n();
    let assign = part.assignment();
    // Per-state block counts: out[x][b] = N̂_{x,V̂_b}, inc[x][b] = N̂_{V̂_b,x}.
    let mut out = Array2::<f64>::zeros((n, k));
    let mut inc = Array2::<f64>::zeros((n, k));
    for ((x, y), &c) in counts.counts().indexed_iter() {
        if c > 0 {
            out[[x, assign[y]]] += c as f64;
            inc[[y, assign[x]]] += c as f64;
        }
    }
    let ln_p: Array2<f64> = estimates.p_hat.mapv(f64::ln);
    let ln_alpha: Vec<f64> = estimates.alpha_hat.iter().map(|a| a.ln()).collect();
    let penalty: Vec<f64> = (0..k)
        .map(|c| {
            counts.t() as f64 / n as f64 * estimates.pi_hat[c] / estimates.alpha_hat[c]
        })
        .collect();
    let mut new_assign = vec![0usize; n];
    let mut reassignments = 0;
    for x in 0..n {
        let mut best_c = 0;
        let mut best_u = f64::NEG_INFINITY;
        for c in 0..k {
            let mut u = -penalty[c];
            for b in 0..k {
                u += out[[x, b]] * ln_p[[c, b]];
                u += inc[[x, b]] * (ln_p[[b, c]] - ln_alpha[c]);
            }
            if u > best_u {
                best_u = u;
                best_c = c;
            }
        }
        new_assign[x] = best_c;
        if best_c != assign[x] {
            reassignments += 1;
        }
    }
    Ok(ImprovementStep {
        partition: Partition::new(k, new_assign)?,
        reassignments,
    })
}

/// Run improvement passes until a fixed point, an emptied cluster, or
/// `max_iters` passes. Error rates are recorded when `truth` is supplied.
pub fn improve(
    counts: &CountMatrix,
    initial: &Partition,
    max_iters: usize,
    truth: Option<&Partition>,
) -> Result<ImprovementTrace> {
    if max_iters == 0 {
        return Err(Error::DomainError("max_iters must be at least 1".into()));
    }
    let mut current = initial.clone();
    let mut trace = ImprovementTrace {
        iterations: Vec::new(),
        converged: false,
        halted_empty: false,
    };
    for _ in 0..max_iters {
        let step = improvement_step(counts, &current)?;
        let error_rate = match truth {
            Some(t) => Some(misclassification(t, &step.partition)?.rate),
            None => None,
        };
        let empties = step.partition.has_empty_cluster();
        trace.iterations.push(IterationRecord {
            partition: step.partition.clone(),
            reassignments: step.reassignments,
            error_rate,
        });
        if step.reassignments == 0 {
            trace.converged = true;
            break;
        }
        if empties {
            trace.halted_empty = true;
            break;
        }
        current = step.partition;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_transition_matrix, BmcModel};
    use crate::simulate::{count_matrix, simulate_counts, Trajectory};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn example_model() -> BmcModel {
        BmcModel::new(
            vec![0.15, 0.35, 0.5],
            array![
                [0.92, 0.045, 0.035],
                [0.0125, 0.8975, 0.09],
                [0.0175, 0.02, 0.9625]
            ],
        )
        .unwrap()
    }

    #[test]
    fn alternating_singletons_estimate() {
        // Two singleton clusters, strict alternation.
        let states: Vec<u32> = (0..101).map(|i| i % 2).collect();
        let traj = Trajectory { states, seed: 0 };
        let counts = count_matrix(&traj, 2).unwrap();
        let part = Partition::new(2, vec![0, 1]).unwrap();
        let est = estimate_parameters(&counts, &part).unwrap();
        let delta = est.floor;
        // Diagonal entries were never observed: floored, then renormalized.
        let expect_diag = delta / (1.0 + delta);
        let expect_off = 1.0 / (1.0 + delta);
        for a in 0..2 {
            assert_abs_diff_eq!(est.p_hat[[a, a]], expect_diag, epsilon = 1e-12);
            assert_abs_diff_eq!(est.p_hat[[a, 1 - a]], expect_off, epsilon = 1e-12);
            assert_abs_diff_eq!(est.p_hat.row(a).sum(), 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(est.pi_hat[0], 0.5, epsilon = 1e-2);
        assert_abs_diff_eq!(est.pi_hat[0] + est.pi_hat[1], 1.0, epsilon = 1e-12);
        assert_eq!(est.alpha_hat, vec![0.5, 0.5]);
    }

    #[test]
    fn estimates_converge_to_truth_at_large_t() {
        // Median relative error of every p-hat entry over 20 seeds stays
        // below 5% at T = 1e5, n = 300, on the true partition.
        let model = example_model();
        let part = Partition::proportional(300, model.alpha()).unwrap();
        let kernel = build_transition_matrix(&model, &part).unwrap();
        let mut rel_errors = vec![vec![Vec::new(); 3]; 3];
        for seed in 0..20u64 {
            let counts = simulate_counts(&kernel, 100_000, seed);
            let est = estimate_parameters(&counts, &part).unwrap();
            for a in 0..3 {
                for b in 0..3 {
                    let rel = (est.p_hat[[a, b]] / model.p()[[a, b]] - 1.0).abs();
                    rel_errors[a][b].push(rel);
                }
                assert_eq!(est.alpha_hat[a], part.sizes()[a] as f64 / 300.0);
            }
        }
        for a in 0..3 {
            for b in 0..3 {
                let errs = &mut rel_errors[a][b];
                errs.sort_by(|x, y| x.partial_cmp(y).unwrap());
                let median = 0.5 * (errs[9] + errs[10]);
                assert!(
                    median < 0.05,
                    "p_hat[{a}][{b}]: median relative error {median}"
                );
            }
        }
    }

    #[test]
    fn empty_cluster_rejected_in_estimates() {
        let traj = Trajectory {
            states: vec![0, 1, 0, 1],
            seed: 0,
        };
        let counts = count_matrix(&traj, 2).unwrap();
        let part = Partition::new(2, vec![0, 0]).unwrap();
        assert!(matches!(
            estimate_parameters(&counts, &part),
            Err(Error::EmptyCluster { k: 1 })
        ));
    }

    #[test]
    fn objective_matches_straight_line_evaluation() {
        // Hand instance from a short path on 4 states.
        let traj = Trajectory {
            states: vec![0, 1, 0, 2, 3, 2, 0, 1],
            seed: 0,
        };
        let counts = count_matrix(&traj, 4).unwrap();
        let part = Partition::new(2, vec![0, 0, 1, 1]).unwrap();
        let est = estimate_parameters(&counts, &part).unwrap();
        // Independent brute-force evaluation of the formula.
        let brute = |x: usize, c: usize| -> f64 {
            let t = counts.t() as f64;
            let n = 4.0;
            let mut u = 0.0;
            for b in 0..2 {
                let mut nxk = 0.0;
                let mut nkx = 0.0;
                for y in 0..4 {
                    if part.assignment()[y] == b {
                        nxk += counts.counts()[[x, y]] as f64;
                        nkx += counts.counts()[[y, x]] as f64;
                    }
                }
                u += nxk * est.p_hat[[c, b]].ln();
                u += nkx * (est.p_hat[[b, c]] / est.alpha_hat[c]).ln();
            }
            u - (t / n) * est.pi_hat[c] / est.alpha_hat[c]
        };
        for x in 0..4 {
            for c in 0..2 {
                assert_abs_diff_eq!(
                    objective(&counts, &part, &est, x, c),
                    brute(x, c),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn isolated_state_prefers_low_occupation_cluster() {
        // State 3 has no transitions at all; u_x(c) reduces to
        // −(T/n)·π̂_c/α̂_c, so the argmax minimizes π̂_c/α̂_c.
        let traj = Trajectory {
            states: vec![0, 1, 0, 1, 0, 2, 0, 1, 0, 1, 0],
            seed: 0,
        };
        let counts = count_matrix(&traj, 4).unwrap();
        let part = Partition::new(2, vec![0, 0, 1, 1]).unwrap();
        let est = estimate_parameters(&counts, &part).unwrap();
        let u0 = objective(&counts, &part, &est, 3, 0);
        let u1 = objective(&counts, &part, &est, 3, 1);
        let t_over_n = counts.t() as f64 / 4.0;
        assert_abs_diff_eq!(
            u0,
            -t_over_n * est.pi_hat[0] / est.alpha_hat[0],
            epsilon = 1e-12
        );
        // Cluster 1 is visited far less, so it wins.
        assert!(u1 > u0);
        let step = improvement_step(&counts, &part).unwrap();
        assert_eq!(step.partition.assignment()[3], 1);
    }

    #[test]
    fn step_is_pure_and_deterministic() {
        let model = example_model();
        let part = Partition::proportional(60, model.alpha()).unwrap();
        let kernel = build_transition_matrix(&model, &part).unwrap();
        let counts = simulate_counts(&kernel, 3_000, 4);
        let a = improvement_step(&counts, &part).unwrap();
        let b = improvement_step(&counts, &part).unwrap();
        assert_eq!(a.partition.assignment(), b.partition.assignment());
        assert_eq!(a.reassignments, b.reassignments);
    }

    #[test]
    fn label_permutation_equivariance() {
        let model = example_model();
        let part = Partition::proportional(60, model.alpha()).unwrap();
        let kernel = build_transition_matrix(&model, &part).unwrap();
        let counts = simulate_counts(&kernel, 3_000, 12);
        // Swap labels 0 and 2 in the input.
        let swapped: Vec<usize> = part
            .assignment()
            .iter()
            .map(|&c| match c {
                0 => 2,
                2 => 0,
                other => other,
            })
            .collect();
        let part_swapped = Partition::new(3, swapped).unwrap();
        let base = improvement_step(&counts, &part).unwrap();
        let perm = improvement_step(&counts, &part_swapped).unwrap();
        for x in 0..60 {
            let expect = match base.partition.assignment()[x] {
                0 => 2,
                2 => 0,
                other => other,
            };
            assert_eq!(perm.partition.assignment()[x], expect);
        }
    }

    #[test]
    fn true_partition_is_fixed_point_at_large_t() {
        let model = example_model();
        let part = Partition::proportional(300, model.alpha()).unwrap();
        let kernel = build_transition_matrix(&model, &part).unwrap();
        let counts = simulate_counts(&kernel, 100_000, 2);
        let step = improvement_step(&counts, &part).unwrap();
        assert_eq!(step.reassignments, 0);

        let trace = improve(&counts, &part, 5, Some(&part)).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.iterations.len(), 1);
        assert_eq!(trace.iterations[0].reassignments, 0);
        assert_eq!(trace.iterations[0].error_rate, Some(0.0));
    }

    #[test]
    fn one_step_reduces_error_on_good_initial_clustering() {
        // Off-diagonal-dominant model, long trajectory: starting from the
        // spectral output, a single pass never worsens the error and, when
        // there are misclassified states, strictly reduces them, in at
        // least 90% of seeds.
        use crate::eval::misclassification;
        use crate::spectral::{spectral_cluster_with, ClusterMethod};
        let model = BmcModel::new(
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            array![[0.1, 0.4, 0.5], [0.7, 0.1, 0.2], [0.6, 0.3, 0.1]],
        )
        .unwrap();
        let n = 240;
        let part = Partition::proportional(n, model.alpha()).unwrap();
        let kernel = build_transition_matrix(&model, &part).unwrap();
        let mut good = 0;
        let seeds = 20u64;
        for seed in 0..seeds {
            let counts = simulate_counts(&kernel, 30_000, seed);
            let method = ClusterMethod::Lloyd { seed, restarts: 10 };
            let initial = spectral_cluster_with(&counts, 3, &method).unwrap().clusters;
            let before = misclassification(&part, &initial).unwrap().mismatches;
            let step = improvement_step(&counts, &initial).unwrap();
            let after = misclassification(&part, &step.partition).unwrap().mismatches;
            if (before > 0 && after < before) || (before == 0 && after == 0) {
                good += 1;
            }
        }
        assert!(good * 10 >= seeds as usize * 9, "{good}/{seeds} seeds improved");
    }

    #[test]
    fn single_cluster_is_identity() {
        let model = BmcModel::new(vec![1.0], array![[1.0]]).unwrap();
        let part = Partition::proportional(8, &[1.0]).unwrap();
        let kernel = build_transition_matrix(&model, &part).unwrap();
        let counts = simulate_counts(&kernel, 500, 6);
        let step = improvement_step(&counts, &part).unwrap();
        assert_eq!(step.reassignments, 0);
        assert!(step.partition.assignment().iter().all(|&c| c == 0));
    }

    #[test]
    fn trace_csv_format() {
        let model = example_model();
        let part = Partition::proportional(60, model.alpha()).unwrap();
        let kernel = build_transition_matrix(&model, &part).unwrap();
        let counts = simulate_counts(&kernel, 5_000, 13);
        let trace = improve(&counts, &part, 3, Some(&part)).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,reassignments,error_rate\n"));
        assert_eq!(text.lines().count(), trace.iterations.len() + 1);
    }

    #[test]
    fn default_cap_is_log_n() {
        assert_eq!(default_max_iters(300), 6);
        assert_eq!(default_max_iters(2), 1);
    }
}
