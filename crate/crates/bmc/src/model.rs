//! Block Markov chain models, partitions, and state-level kernels.
//!
//! A model is the block-level data `(K, α, p)`: `K` clusters, limiting
//! cluster fractions `α`, and a row-stochastic `K×K` block kernel `p`. Given
//! a concrete partition of `n` states it induces the state-level transition
//! matrix
//!
//! ```text
//! P[x][y] = p[σ(x)][σ(y)] / (|V_{σ(y)}| - 1{σ(x) = σ(y)})   for x ≠ y,
//! P[x][x] = 0,
//! ```
//!
//! whose stationary distribution `Π` is constant on each cluster and solves
//! a reduced `K×K` balance system.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2};
use ndarray_linalg::Solve;
use serde::Deserialize;

use crate::{Error, Result};

/// Tolerance for row-stochasticity checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Tolerance for stationarity residuals `‖πᵀp − πᵀ‖_∞`.
pub const STATIONARY_TOL: f64 = 1e-10;
/// Tolerance for probability-vector normalization of user inputs.
const PROB_SUM_TOL: f64 = 1e-9;

/// Block-level parameters of a block Markov chain, with the separability
/// ratio `η` computed at construction.
#[derive(Debug, Clone)]
pub struct BmcModel {
    alpha: Vec<f64>,
    p: Array2<f64>,
    eta: f64,
}

impl BmcModel {
    /// Validate `(α, p)` and compute the separability ratio
    /// `η = max over (a,b,c) of max{ p[b][a]/p[c][a], p[a][b]/p[a][c] }`.
    pub fn new(alpha: Vec<f64>, p: Array2<f64>) -> Result<Self> {
        let k = alpha.len();
        if k == 0 {
            return Err(Error::InvalidField {
                field: "alpha",
                reason: "must be nonempty".into(),
            });
        }
        if p.nrows() != k || p.ncols() != k {
            return Err(Error::InvalidField {
                field: "p",
                reason: format!("expected {k}x{k}, got {}x{}", p.nrows(), p.ncols()),
            });
        }
        for (i, &a) in alpha.iter().enumerate() {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::InvalidField {
                    field: "alpha",
                    reason: format!("alpha[{i}] = {a} is not strictly positive"),
                });
            }
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidField {
                field: "alpha",
                reason: format!("entries sum to {sum}, expected 1"),
            });
        }
        for ((i, j), &v) in p.indexed_iter() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidField {
                    field: "p",
                    reason: format!("p[{i}][{j}] = {v} is not strictly positive"),
                });
            }
        }
        for (i, row) in p.rows().into_iter().enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > STOCHASTIC_TOL.max(PROB_SUM_TOL) {
                return Err(Error::InvalidField {
                    field: "p",
                    reason: format!("row {i} sums to {s}, expected 1"),
                });
            }
        }
        let mut eta = 1.0_f64;
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    eta = eta.max(p[[b, a]] / p[[c, a]]).max(p[[a, b]] / p[[a, c]]);
                }
            }
        }
        Ok(BmcModel { alpha, p, eta })
    }

    /// Number of clusters `K`.
    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    /// Limiting cluster fractions `α`.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Block transition kernel `p` (row-stochastic, `K×K`).
    pub fn p(&self) -> &Array2<f64> {
        &self.p
    }

    /// Separability ratio `η ≥ 1`.
    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Parse from a JSON document with keys `K`, `alpha`, `p` and optional `n`.
    pub fn from_json_str(text: &str) -> Result<(Self, Option<usize>)> {
        let raw: RawModel =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("json: {e}")))?;
        raw.build()
    }

    /// Parse from a TOML document with keys `K`, `alpha`, `p` and optional `n`.
    pub fn from_toml_str(text: &str) -> Result<(Self, Option<usize>)> {
        let raw: RawModel = toml::from_str(text).map_err(|e| Error::Parse(format!("toml: {e}")))?;
        raw.build()
    }

    /// Load a model file, picking the format from the file extension
    /// (`.json` or `.toml`; anything else is tried as JSON first).
    pub fn load(path: &Path) -> Result<(Self, Option<usize>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            context: format!("reading model file {}", path.display()),
            source: e,
        })?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml_str(&text),
            Some("json") => Self::from_json_str(&text),
            _ => Self::from_json_str(&text).or_else(|_| Self::from_toml_str(&text)),
        }
    }
}

/// On-disk model schema: `K`, `alpha` (length-`K` array), `p` (row-major
/// `K×K` array of arrays), optional `n`.
#[derive(Debug, Deserialize)]
struct RawModel {
    #[serde(rename = "K")]
    k: usize,
    alpha: Vec<f64>,
    p: Vec<Vec<f64>>,
    n: Option<usize>,
}

impl RawModel {
    fn build(self) -> Result<(BmcModel, Option<usize>)> {
        if self.alpha.len() != self.k {
            return Err(Error::InvalidField {
                field: "alpha",
                reason: format!("has length {}, expected K = {}", self.alpha.len(), self.k),
            });
        }
        if self.p.len() != self.k {
            return Err(Error::InvalidField {
                field: "p",
                reason: format!("has {} rows, expected K = {}", self.p.len(), self.k),
            });
        }
        for (i, row) in self.p.iter().enumerate() {
            if row.len() != self.k {
                return Err(Error::InvalidField {
                    field: "p",
                    reason: format!("row {i} has length {}, expected K = {}", row.len(), self.k),
                });
            }
        }
        let flat: Vec<f64> = self.p.into_iter().flatten().collect();
        let p = Array2::from_shape_vec((self.k, self.k), flat).expect("shape checked above");
        Ok((BmcModel::new(self.alpha, p)?, self.n))
    }
}

/// An assignment of `n` states to `K` clusters, with cached member lists.
///
/// Empty clusters are representable (the improvement algorithm may produce
/// them); operations that require nonempty clusters check explicitly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    k: usize,
    assignment: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl Partition {
    /// Build from an explicit assignment; every label must lie in `0..k`.
    pub fn new(k: usize, assignment: Vec<usize>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidField {
                field: "k",
                reason: "must be at least 1".into(),
            });
        }
        if assignment.is_empty() {
            return Err(Error::InvalidField {
                field: "assignment",
                reason: "must be nonempty".into(),
            });
        }
        let mut members = vec![Vec::new(); k];
        for (x, &c) in assignment.iter().enumerate() {
            if c >= k {
                return Err(Error::InvalidField {
                    field: "assignment",
                    reason: format!("state {x} has label {c}, expected < {k}"),
                });
            }
            members[c].push(x);
        }
        Ok(Partition {
            k,
            assignment,
            members,
        })
    }

    /// Deterministic partition of `n` states from the fractions `α`:
    /// cluster `k` gets `⌊nα_k⌋` states, and the leftover states go to
    /// clusters in descending order of fractional part `nα_k − ⌊nα_k⌋`
    /// (ties broken by lower cluster index). States are assigned in blocks,
    /// cluster 0 first.
    pub fn proportional(n: usize, alpha: &[f64]) -> Result<Self> {
        let k = alpha.len();
        if k == 0 || n == 0 {
            return Err(Error::InvalidField {
                field: "alpha",
                reason: "need n >= 1 and at least one cluster".into(),
            });
        }
        let mut sizes: Vec<usize> = Vec::with_capacity(k);
        let mut fracs: Vec<(usize, f64)> = Vec::with_capacity(k);
        for (c, &a) in alpha.iter().enumerate() {
            let exact = n as f64 * a;
            let fl = exact.floor();
            sizes.push(fl as usize);
            fracs.push((c, exact - fl));
        }
        let assigned: usize = sizes.iter().sum();
        let mut leftover = n.saturating_sub(assigned);
        fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut i = 0;
        while leftover > 0 {
            sizes[fracs[i % k].0] += 1;
            leftover -= 1;
            i += 1;
        }
        let mut assignment = Vec::with_capacity(n);
        for (c, &s) in sizes.iter().enumerate() {
            assignment.extend(std::iter::repeat_n(c, s));
        }
        Partition::new(k, assignment)
    }

    /// Number of states `n`.
    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    /// Number of clusters `K`.
    pub fn k(&self) -> usize {
        self.k
    }

    /// The assignment `σ`, one label in `0..K` per state.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Cluster of state `x`.
    pub fn cluster_of(&self, x: usize) -> usize {
        self.assignment[x]
    }

    /// Member lists `V_0, …, V_{K-1}`.
    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }

    /// Cluster sizes `|V_k|`.
    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Whether any cluster is empty.
    pub fn has_empty_cluster(&self) -> bool {
        self.members.iter().any(Vec::is_empty)
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Partition(n={}, k={}, sizes={:?})", self.n(), self.k, self.sizes())
    }
}

/// A state-level transition matrix together with its exact stationary
/// distribution.
#[derive(Debug, Clone)]
pub struct StateKernel {
    p: Array2<f64>,
    pi: Vec<f64>,
}

impl StateKernel {
    /// Number of states.
    pub fn n(&self) -> usize {
        self.pi.len()
    }

    /// The `n×n` transition matrix `P` (zero diagonal, row-stochastic).
    pub fn p(&self) -> &Array2<f64> {
        &self.p
    }

    /// The exact stationary distribution `Π`.
    pub fn pi(&self) -> &[f64] {
        &self.pi
    }
}

/// Build the state-level kernel induced by `model` on `part`, along with the
/// exact stationary distribution.
///
/// Requires `part.k() == model.k()` and every cluster size at least 2 (the
/// denominator `|V_{σ(y)}| − 1{σ(x) = σ(y)}` must stay positive).
pub fn build_transition_matrix(model: &BmcModel, part: &Partition) -> Result<StateKernel> {
    if part.k() != model.k() {
        return Err(Error::DimensionMismatch(format!(
            "partition has {} clusters, model has {}",
            part.k(),
            model.k()
        )));
    }
    let sizes = part.sizes();
    for (k, &s) in sizes.iter().enumerate() {
        if s < 2 {
            return Err(Error::ClusterTooSmall { k, size: s });
        }
    }
    let n = part.n();
    let assign = part.assignment();
    let p = model.p();
    let mut kernel = Array2::<f64>::zeros((n, n));
    for x in 0..n {
        let cx = assign[x];
        for y in 0..n {
            if x == y {
                continue;
            }
            let cy = assign[y];
            let denom = sizes[cy] - usize::from(cx == cy);
            kernel[[x, y]] = p[[cx, cy]] / denom as f64;
        }
    }
    let pi = solve_stationary_exact(model, part)?;
    Ok(StateKernel { p: kernel, pi })
}

/// Solve `πᵀp = πᵀ` for the block-level stationary distribution.
///
/// Irreducibility of `p`'s support is verified by breadth-first reachability
/// before the balance system (with one row replaced by the normalization
/// `Σπ = 1`) is solved directly.
pub fn solve_stationary_block(p: &Array2<f64>) -> Result<Vec<f64>> {
    let k = p.nrows();
    if p.ncols() != k || k == 0 {
        return Err(Error::DimensionMismatch(format!(
            "expected square block matrix, got {}x{}",
            k,
            p.ncols()
        )));
    }
    if !is_irreducible(p) {
        return Err(Error::Reducible);
    }
    if k == 1 {
        return Ok(vec![1.0]);
    }
    // (pᵀ − I)π = 0 with the last balance equation replaced by Σπ = 1.
    let mut m = p.t().to_owned();
    for i in 0..k {
        m[[i, i]] -= 1.0;
    }
    for j in 0..k {
        m[[k - 1, j]] = 1.0;
    }
    let mut b = Array1::<f64>::zeros(k);
    b[k - 1] = 1.0;
    let pi = m.solve(&b).map_err(|_| Error::SingularSystem)?;
    let mut pi = pi.to_vec();
    let total: f64 = pi.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::SingularSystem);
    }
    for v in &mut pi {
        *v /= total;
        if !(*v > 0.0) {
            return Err(Error::SingularSystem);
        }
    }
    let residual = stationarity_residual(p, &pi);
    if residual > STATIONARY_TOL {
        return Err(Error::SingularSystem);
    }
    Ok(pi)
}

/// Max-norm residual `‖πᵀp − πᵀ‖_∞`.
pub fn stationarity_residual(p: &Array2<f64>, pi: &[f64]) -> f64 {
    let k = p.nrows();
    (0..k)
        .map(|j| {
            let flow: f64 = (0..k).map(|i| pi[i] * p[[i, j]]).sum();
            (flow - pi[j]).abs()
        })
        .fold(0.0, f64::max)
}

fn is_irreducible(p: &Array2<f64>) -> bool {
    let k = p.nrows();
    reaches_all(p, false, k) && reaches_all(p, true, k)
}

fn reaches_all(p: &Array2<f64>, transpose: bool, k: usize) -> bool {
    let mut seen = vec![false; k];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = queue.pop_front() {
        for j in 0..k {
            let w = if transpose { p[[j, i]] } else { p[[i, j]] };
            if w > 0.0 && !seen[j] {
                seen[j] = true;
                count += 1;
                queue.push_back(j);
            }
        }
    }
    count == k
}

/// Exact stationary distribution of the state-level kernel, exploiting the
/// within-cluster symmetry `Π_x = Π̄_{σ(x)}`.
///
/// Solves the reduced `K×K` system
/// `Π̄_l = Σ_k Π̄_k (|V_k| − 1{k=l}) p[k][l] / (|V_l| − 1{k=l})`
/// with the normalization `Σ_l |V_l| Π̄_l = 1`, then expands to `n` entries.
/// The expansion makes `Π` bitwise constant on each cluster.
pub fn solve_stationary_exact(model: &BmcModel, part: &Partition) -> Result<Vec<f64>> {
    if part.k() != model.k() {
        return Err(Error::DimensionMismatch(format!(
            "partition has {} clusters, model has {}",
            part.k(),
            model.k()
        )));
    }
    let k = model.k();
    let sizes = part.sizes();
    for (c, &s) in sizes.iter().enumerate() {
        if s < 2 {
            return Err(Error::ClusterTooSmall { k: c, size: s });
        }
    }
    let p = model.p();
    if k == 1 {
        return Ok(vec![1.0 / part.n() as f64; part.n()]);
    }
    // Reduced transfer matrix: row l of `m` collects the inflow into one
    // state of cluster l from every cluster c.
    let mut m = Array2::<f64>::zeros((k, k));
    for l in 0..k {
        for c in 0..k {
            let same = usize::from(c == l);
            m[[l, c]] = (sizes[c] - same) as f64 * p[[c, l]] / (sizes[l] - same) as f64;
        }
        m[[l, l]] -= 1.0;
    }
    for c in 0..k {
        m[[k - 1, c]] = sizes[c] as f64;
    }
    let mut b = Array1::<f64>::zeros(k);
    b[k - 1] = 1.0;
    let bar = m.solve(&b).map_err(|_| Error::SingularSystem)?;
    if bar.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::SingularSystem);
    }
    let mut pi = Vec::with_capacity(part.n());
    for &c in part.assignment() {
        pi.push(bar[c]);
    }
    Ok(pi)
}

/// Upper bound on the mixing time, `t_mix(ε) ≤ c_mix · (−ln ε)` with
/// `c_mix = −1 / ln(1 − 1/(2η))`.
pub fn mixing_time_bound(eta: f64, epsilon: f64) -> Result<f64> {
    if !(eta >= 1.0) || !eta.is_finite() {
        return Err(Error::DomainError(format!("eta = {eta} must be >= 1")));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::DomainError(format!(
            "epsilon = {epsilon} must lie in (0,1)"
        )));
    }
    let c_mix = -1.0 / (1.0 - 1.0 / (2.0 * eta)).ln();
    Ok(c_mix * (-epsilon.ln()))
}
