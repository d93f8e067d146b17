//! Detectability quantities for block Markov chains.
//!
//! The central object is the information quantity
//!
//! ```text
//! I(α,p) = min_{a≠b} I_{a,b}(α,p),
//! I_{a,b} = Σ_k (1/α_a)·(π_a p[a][k] ln(p[a][k]/p[b][k])
//!                        + π_k p[k][a] ln(p[k][a]·α_b / (p[k][b]·α_a)))
//!           + (π_b/α_b − π_a/α_a),
//! ```
//!
//! where `π` solves `πᵀp = πᵀ`. Accurate detection is possible only when
//! `I(α,p) > 0`, and in the critical regime `T = n ln n` exact recovery
//! requires `I(α,p) > 1`. The module also provides the squared-distance
//! separability `D(α,p)` used by the spectral analysis, the exact
//! zero-information condition, and the perturbation functional
//! `I_a(q‖p)` with the balanced perturbation that equalizes it across a
//! cluster pair.

use std::io::Write;

use ndarray::Array2;

use crate::model::{solve_stationary_block, BmcModel};
use crate::{Error, Result};

/// Absolute tolerance for the zero-information condition; inputs are
/// user-specified rationals, so exact ties are intended.
pub const ZERO_CONDITION_TOL: f64 = 1e-9;

/// Tolerance on `|I_a − I_b|` for the balanced perturbation.
pub const BALANCE_TOL: f64 = 1e-9;

/// All detectability quantities of a model.
#[derive(Debug, Clone)]
pub struct InfoReport {
    /// `I(α,p) = min_{a≠b} I_{a,b}`.
    pub i: f64,
    /// Pairwise values `I_{a,b}`; the diagonal is `+∞` (undefined).
    pub pairwise: Array2<f64>,
    /// The minimizing pair `(a, b)`.
    pub argmin_pair: (usize, usize),
    /// Squared-distance separability `D(α,p)`.
    pub d: f64,
}

impl InfoReport {
    /// JSON rendering with `null` on the undefined diagonal.
    pub fn to_json(&self) -> serde_json::Value {
        let k = self.pairwise.nrows();
        let rows: Vec<serde_json::Value> = (0..k)
            .map(|a| {
                (0..k)
                    .map(|b| {
                        if a == b {
                            serde_json::Value::Null
                        } else {
                            serde_json::json!(self.pairwise[[a, b]])
                        }
                    })
                    .collect()
            })
            .collect();
        serde_json::json!({
            "I": self.i,
            "pairwise": rows,
            "argmin_pair": [self.argmin_pair.0, self.argmin_pair.1],
            "D": self.d,
        })
    }
}

fn ln_ratio(x: f64, y: f64) -> f64 {
    x.ln() - y.ln()
}

fn pair_value(alpha: &[f64], p: &Array2<f64>, pi: &[f64], a: usize, b: usize) -> f64 {
    let k = alpha.len();
    let mut sum = 0.0;
    for c in 0..k {
        sum += (pi[a] * p[[a, c]] * ln_ratio(p[[a, c]], p[[b, c]])
            + pi[c]
                * p[[c, a]]
                * (ln_ratio(p[[c, a]], p[[c, b]]) + ln_ratio(alpha[b], alpha[a])))
            / alpha[a];
    }
    sum + pi[b] / alpha[b] - pi[a] / alpha[a]
}

/// The pairwise information value `I_{a,b}(α,p)` for a pair of distinct
/// clusters. Not symmetric in `(a, b)`.
pub fn information_pair(model: &BmcModel, a: usize, b: usize) -> Result<f64> {
    let k = model.k();
    if a >= k || b >= k {
        return Err(Error::DimensionMismatch(format!(
            "cluster index out of range: ({a}, {b}) with K = {k}"
        )));
    }
    if a == b {
        return Err(Error::SamePair);
    }
    let pi = solve_stationary_block(model.p())?;
    Ok(pair_value(model.alpha(), model.p(), &pi, a, b))
}

fn d_quantity(alpha: &[f64], p: &Array2<f64>, pi: &[f64]) -> f64 {
    let k = alpha.len();
    let mut best = f64::INFINITY;
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            let mut sum = 0.0;
            for c in 0..k {
                let out = pi[a] * p[[a, c]] / (alpha[c] * alpha[a])
                    - pi[b] * p[[b, c]] / (alpha[c] * alpha[b]);
                let inc = pi[c] * p[[c, a]] / (alpha[c] * alpha[a])
                    - pi[c] * p[[c, b]] / (alpha[c] * alpha[b]);
                sum += out * out + inc * inc;
            }
            best = best.min(sum);
        }
    }
    if best.is_finite() {
        best
    } else {
        0.0
    }
}

/// Compute every `I_{a,b}`, their minimum `I(α,p)`, and `D(α,p)`.
pub fn information_quantity(model: &BmcModel) -> Result<InfoReport> {
    let k = model.k();
    let pi = solve_stationary_block(model.p())?;
    let mut pairwise = Array2::<f64>::from_elem((k, k), f64::INFINITY);
    let mut best = f64::INFINITY;
    let mut argmin = (0, 0);
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            let v = pair_value(model.alpha(), model.p(), &pi, a, b);
            pairwise[[a, b]] = v;
            if v < best {
                best = v;
                argmin = (a, b);
            }
        }
    }
    if k == 1 {
        // Single cluster: nothing to distinguish.
        best = 0.0;
    }
    Ok(InfoReport {
        i: best,
        pairwise,
        argmin_pair: argmin,
        d: d_quantity(model.alpha(), model.p(), &pi),
    })
}

/// Exact characterization of `I(α,p) = 0`: true iff some pair `i ≠ j`
/// satisfies `p[i][c] = p[j][c]` and `p[c][i]/α_i = p[c][j]/α_j` for every
/// `c`, within [`ZERO_CONDITION_TOL`]. Returns the first witness pair.
pub fn check_zero_condition(model: &BmcModel) -> (bool, Option<(usize, usize)>) {
    let k = model.k();
    let p = model.p();
    let alpha = model.alpha();
    for i in 0..k {
        for j in (i + 1)..k {
            let mut holds = true;
            for c in 0..k {
                if (p[[i, c]] - p[[j, c]]).abs() > ZERO_CONDITION_TOL
                    || (p[[c, i]] / alpha[i] - p[[c, j]] / alpha[j]).abs() > ZERO_CONDITION_TOL
                {
                    holds = false;
                    break;
                }
            }
            if holds {
                return (true, Some((i, j)));
            }
        }
    }
    (false, None)
}

/// A perturbation of one state's transition behavior: `q_to[k]` scales the
/// rate from cluster `k` into the singled-out state, `q_from[k]` is the
/// probability of jumping from it into cluster `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    q_to: Vec<f64>,
    q_from: Vec<f64>,
}

impl Perturbation {
    /// Validate positivity of all entries and normalization of `q_from`.
    pub fn new(q_to: Vec<f64>, q_from: Vec<f64>) -> Result<Self> {
        if q_to.len() != q_from.len() || q_to.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "q_to has length {}, q_from has length {}",
                q_to.len(),
                q_from.len()
            )));
        }
        if q_to.iter().chain(&q_from).any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidField {
                field: "q",
                reason: "all entries must be strictly positive and finite".into(),
            });
        }
        let s: f64 = q_from.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidField {
                field: "q_from",
                reason: format!("sums to {s}, expected 1"),
            });
        }
        Ok(Perturbation { q_to, q_from })
    }

    /// The canonical point `q_c`: `q_to[k] = p[k][c]/α_c`, `q_from[k] = p[c][k]`.
    /// It makes the state indistinguishable from cluster `c`, so
    /// `I_c(q_c‖p) = 0`.
    pub fn canonical(model: &BmcModel, c: usize) -> Result<Self> {
        let k = model.k();
        if c >= k {
            return Err(Error::DimensionMismatch(format!(
                "cluster index {c} out of range for K = {k}"
            )));
        }
        let q_to = (0..k)
            .map(|j| model.p()[[j, c]] / model.alpha()[c])
            .collect();
        let q_from = (0..k).map(|j| model.p()[[c, j]]).collect();
        Perturbation::new(q_to, q_from)
    }

    /// Rates into the singled-out state, indexed by source cluster.
    pub fn q_to(&self) -> &[f64] {
        &self.q_to
    }

    /// Jump distribution out of the singled-out state.
    pub fn q_from(&self) -> &[f64] {
        &self.q_from
    }

    fn lerp(a: &Perturbation, b: &Perturbation, lambda: f64) -> Perturbation {
        let mix = |x: &[f64], y: &[f64]| {
            x.iter()
                .zip(y)
                .map(|(u, v)| lambda * u + (1.0 - lambda) * v)
                .collect()
        };
        Perturbation {
            q_to: mix(&a.q_to, &b.q_to),
            q_from: mix(&a.q_from, &b.q_from),
        }
    }
}

/// The perturbation functional
///
/// ```text
/// I_a(q‖p) = Σ_k ((Σ_l π_l q_to[l]) · q_from[k] · ln(q_from[k]/p[a][k])
///                 + π_k q_to[k] · ln(q_to[k]·α_a/p[k][a]))
///            + π_a/α_a − Σ_k π_k q_to[k].
/// ```
///
/// The leading order of the expected log-likelihood ratio between the
/// perturbed and true chains when the singled-out state came from cluster
/// `a`. Not guaranteed nonnegative away from the canonical points.
pub fn perturbation_functional(q: &Perturbation, model: &BmcModel, a: usize) -> Result<f64> {
    let k = model.k();
    if a >= k {
        return Err(Error::DimensionMismatch(format!(
            "cluster index {a} out of range for K = {k}"
        )));
    }
    if q.q_to.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "perturbation has {} clusters, model has {k}",
            q.q_to.len()
        )));
    }
    let pi = solve_stationary_block(model.p())?;
    let p = model.p();
    let alpha = model.alpha();
    let weight: f64 = (0..k).map(|l| pi[l] * q.q_to[l]).sum();
    let mut sum = 0.0;
    for c in 0..k {
        if !(q.q_from[c] > 0.0) || !(q.q_to[c] > 0.0) {
            return Err(Error::DomainError(format!(
                "nonpositive perturbation entry at cluster {c}"
            )));
        }
        sum += weight * q.q_from[c] * ln_ratio(q.q_from[c], p[[a, c]]);
        sum += pi[c] * q.q_to[c] * (ln_ratio(q.q_to[c], p[[c, a]]) + alpha[a].ln());
    }
    Ok(sum + pi[a] / alpha[a] - weight)
}

/// A balanced perturbation `q̄` with `I_a(q̄‖p) = I_b(q̄‖p)`.
#[derive(Debug, Clone)]
pub struct BalancedPerturbation {
    /// The balanced point.
    pub q: Perturbation,
    /// Mixing weight: `q̄ = λ·q_a + (1−λ)·q_b`.
    pub lambda: f64,
    /// The common value `I_a(q̄‖p) = I_b(q̄‖p)`.
    pub common_value: f64,
}

/// Find `q̄` on the segment between the canonical points `q_a` and `q_b`
/// with `I_a(q̄‖p) = I_b(q̄‖p)`, by bisection on
/// `g(λ) = I_a(λq_a + (1−λ)q_b‖p) − I_b(λq_a + (1−λ)q_b‖p)`.
///
/// `g(0) = I_{b,a} > 0` and `g(1) = −I_{a,b} < 0` whenever `I(α,p) > 0`, so
/// a sign change is guaranteed; its absence is reported as
/// [`Error::NoSignChange`].
pub fn find_balanced_perturbation(
    model: &BmcModel,
    a: usize,
    b: usize,
) -> Result<BalancedPerturbation> {
    if a == b {
        return Err(Error::SamePair);
    }
    let q_a = Perturbation::canonical(model, a)?;
    let q_b = Perturbation::canonical(model, b)?;
    let g = |lambda: f64| -> Result<f64> {
        let q = Perturbation::lerp(&q_a, &q_b, lambda);
        Ok(perturbation_functional(&q, model, a)? - perturbation_functional(&q, model, b)?)
    };
    let g0 = g(0.0)?;
    let g1 = g(1.0)?;
    let finish = |lambda: f64| -> Result<BalancedPerturbation> {
        let q = Perturbation::lerp(&q_a, &q_b, lambda);
        let common_value = perturbation_functional(&q, model, a)?;
        Ok(BalancedPerturbation {
            q,
            lambda,
            common_value,
        })
    };
    if g0.abs() < BALANCE_TOL {
        return finish(0.0);
    }
    if g1.abs() < BALANCE_TOL {
        return finish(1.0);
    }
    if g0.signum() == g1.signum() {
        return Err(Error::NoSignChange);
    }
    let (mut lo, mut hi, mut g_lo) = (0.0f64, 1.0f64, g0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let gm = g(mid)?;
        if gm.abs() < BALANCE_TOL {
            return finish(mid);
        }
        if gm.signum() == g_lo.signum() {
            lo = mid;
            g_lo = gm;
        } else {
            hi = mid;
        }
    }
    Err(Error::NoSignChange)
}

/// One cell of the two-cluster feasibility raster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterCell {
    pub p12: f64,
    pub p21: f64,
    /// `I(α, p(p12, p21))`.
    pub i: f64,
    /// `I > threshold`.
    pub feasible: bool,
}

/// Feasibility raster over `(p_{1,2}, p_{2,1}) ∈ (0,1)²` for `K = 2`.
#[derive(Debug, Clone)]
pub struct FeasibilityRaster {
    pub alpha: [f64; 2],
    pub resolution: usize,
    pub threshold: f64,
    /// Row-major cells: index `[i * resolution + j]` holds the cell at
    /// `p12 = (i + 1/2)/res`, `p21 = (j + 1/2)/res`.
    pub cells: Vec<RasterCell>,
}

impl FeasibilityRaster {
    pub fn cell(&self, i: usize, j: usize) -> &RasterCell {
        &self.cells[i * self.resolution + j]
    }

    /// CSV dump with columns `p12,p21,I,feasible`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io_err = |e| Error::Io {
            context: "writing feasibility raster".into(),
            source: e,
        };
        writeln!(w, "p12,p21,I,feasible").map_err(io_err)?;
        for cell in &self.cells {
            writeln!(
                w,
                "{},{},{},{}",
                cell.p12,
                cell.p21,
                cell.i,
                u8::from(cell.feasible)
            )
            .map_err(io_err)?;
        }
        Ok(())
    }
}

/// Rasterize `I(α,p)` over a grid of `(p_{1,2}, p_{2,1})` values at cell
/// centers. A threshold of 1 reproduces the critical-regime region in which
/// exact recovery at `T = n ln n` is possible.
pub fn feasibility_raster(
    alpha: [f64; 2],
    resolution: usize,
    threshold: f64,
) -> Result<FeasibilityRaster> {
    if resolution < 2 {
        return Err(Error::DomainError(format!(
            "raster resolution {resolution} must be at least 2"
        )));
    }
    if !(alpha[0] > 0.0 && alpha[1] > 0.0) || (alpha[0] + alpha[1] - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidField {
            field: "alpha",
            reason: "must be a positive probability pair".into(),
        });
    }
    let mut cells = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        let p12 = (i as f64 + 0.5) / resolution as f64;
        for j in 0..resolution {
            let p21 = (j as f64 + 0.5) / resolution as f64;
            let model = BmcModel::new(
                alpha.to_vec(),
                ndarray::array![[1.0 - p12, p12], [p21, 1.0 - p21]],
            )?;
            let i_val = information_quantity(&model)?.i;
            cells.push(RasterCell {
                p12,
                p21,
                i: i_val,
                feasible: i_val > threshold,
            });
        }
    }
    Ok(FeasibilityRaster {
        alpha,
        resolution,
        threshold,
        cells,
    })
}
