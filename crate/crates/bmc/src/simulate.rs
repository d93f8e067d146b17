//! Trajectory simulation and transition counting.
//!
//! Chains start in equilibrium: `X_0 ~ Π` and `X_{t+1} ~ P[X_t][·]`.
//! Sampling uses precomputed cumulative rows with binary search, and the
//! generator is a seeded counter-based stream cipher so that parallel trials
//! with distinct seeds are reproducible bit for bit.

use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::model::StateKernel;
use crate::{Error, Result};

/// A sample path `X_0, …, X_T` together with the seed that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    /// State sequence of length `T + 1`.
    pub states: Vec<u32>,
    /// Seed of the generator that produced the path.
    pub seed: u64,
}

impl Trajectory {
    /// Number of transitions `T`.
    pub fn t(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    /// Write the dump format: a header line `# n=<n> T=<T> seed=<seed>`
    /// followed by one state index per line.
    pub fn write_dump<W: Write>(&self, n: usize, mut w: W) -> Result<()> {
        let io_err = |e| Error::Io {
            context: "writing trajectory dump".into(),
            source: e,
        };
        writeln!(w, "# n={} T={} seed={}", n, self.t(), self.seed).map_err(io_err)?;
        for &s in &self.states {
            writeln!(w, "{s}").map_err(io_err)?;
        }
        Ok(())
    }

    /// Read the dump format written by [`Trajectory::write_dump`]; returns
    /// the trajectory and the `n` recorded in the header.
    pub fn read_dump<R: BufRead>(r: R) -> Result<(Self, usize)> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty trajectory dump".into()))?
            .map_err(|e| Error::Io {
                context: "reading trajectory dump".into(),
                source: e,
            })?;
        let mut n = None;
        let mut seed = 0u64;
        for token in header.trim_start_matches('#').split_whitespace() {
            if let Some(v) = token.strip_prefix("n=") {
                n = v.parse::<usize>().ok();
            } else if let Some(v) = token.strip_prefix("seed=") {
                seed = v
                    .parse::<u64>()
                    .map_err(|e| Error::Parse(format!("bad seed in header: {e}")))?;
            }
        }
        let n = n.ok_or_else(|| Error::Parse("trajectory header lacks n=<n>".into()))?;
        let mut states = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::Io {
                context: "reading trajectory dump".into(),
                source: e,
            })?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let s: u32 = line
                .parse()
                .map_err(|e| Error::Parse(format!("bad state index `{line}`: {e}")))?;
            if (s as usize) >= n {
                return Err(Error::StateOutOfRange { state: s as usize, n });
            }
            states.push(s);
        }
        if states.is_empty() {
            return Err(Error::Parse("trajectory dump has no states".into()));
        }
        Ok((Trajectory { states, seed }, n))
    }
}

/// Observed transition counts `N̂[x][y]` with cached row and column sums.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    counts: Array2<u64>,
    out_visits: Vec<u64>,
    in_visits: Vec<u64>,
    t: u64,
}

impl CountMatrix {
    fn from_counts(counts: Array2<u64>) -> Self {
        let n = counts.nrows();
        let mut out_visits = vec![0u64; n];
        let mut in_visits = vec![0u64; n];
        let mut t = 0u64;
        for ((x, y), &c) in counts.indexed_iter() {
            out_visits[x] += c;
            in_visits[y] += c;
            t += c;
        }
        CountMatrix {
            counts,
            out_visits,
            in_visits,
            t,
        }
    }

    /// Number of states.
    pub fn n(&self) -> usize {
        self.counts.nrows()
    }

    /// Total transitions `T = Σ_{x,y} N̂[x][y]`.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// The raw count matrix.
    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    /// Departures per state (row sums).
    pub fn out_visits(&self) -> &[u64] {
        &self.out_visits
    }

    /// Arrivals per state (column sums).
    pub fn in_visits(&self) -> &[u64] {
        &self.in_visits
    }

    /// Combined visit statistic `out + in` used for trimming.
    pub fn visits(&self, x: usize) -> u64 {
        self.out_visits[x] + self.in_visits[x]
    }

    /// The counts as a dense real matrix.
    pub fn as_f64(&self) -> Array2<f64> {
        self.counts.mapv(|c| c as f64)
    }

    /// Copy with the rows and columns of every state not in `retain` zeroed.
    pub fn zeroed_outside(&self, retain: &[bool]) -> CountMatrix {
        let mut counts = self.counts.clone();
        for ((x, y), c) in counts.indexed_iter_mut() {
            if !retain[x] || !retain[y] {
                *c = 0;
            }
        }
        CountMatrix::from_counts(counts)
    }

    /// Dense CSV dump with integer entries.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io_err = |e| Error::Io {
            context: "writing count matrix".into(),
            source: e,
        };
        for row in self.counts.rows() {
            let line = row
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",");
            writeln!(w, "{line}").map_err(io_err)?;
        }
        Ok(())
    }
}

/// Cumulative distribution rows for fast categorical sampling.
struct CumulativeRows {
    rows: Vec<Vec<f64>>,
}

impl CumulativeRows {
    fn new(kernel: &StateKernel) -> Self {
        let rows = kernel
            .p()
            .rows()
            .into_iter()
            .map(|row| {
                let mut acc = 0.0;
                let mut cum: Vec<f64> = row
                    .iter()
                    .map(|&v| {
                        acc += v;
                        acc
                    })
                    .collect();
                if let Some(last) = cum.last_mut() {
                    *last = 1.0;
                }
                cum
            })
            .collect();
        CumulativeRows { rows }
    }

    fn sample(&self, x: usize, u: f64) -> usize {
        sample_cumulative(&self.rows[x], u)
    }
}

fn sample_cumulative(cum: &[f64], u: f64) -> usize {
    cum.partition_point(|&c| c <= u).min(cum.len() - 1)
}

fn initial_state(pi: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let mut acc = 0.0;
    let mut cum: Vec<f64> = pi
        .iter()
        .map(|&v| {
            acc += v;
            acc
        })
        .collect();
    if let Some(last) = cum.last_mut() {
        *last = 1.0;
    }
    sample_cumulative(&cum, rng.random::<f64>())
}

/// Simulate `t` transitions from equilibrium. Deterministic given `seed`.
pub fn simulate_trajectory(kernel: &StateKernel, t: u64, seed: u64) -> Trajectory {
    let cum = CumulativeRows::new(kernel);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(t as usize + 1);
    let mut x = initial_state(kernel.pi(), &mut rng);
    states.push(x as u32);
    for _ in 0..t {
        x = cum.sample(x, rng.random::<f64>());
        states.push(x as u32);
    }
    Trajectory { states, seed }
}

/// Simulate `t` transitions and accumulate counts directly, never holding
/// the state sequence. Produces bit-identical counts to
/// `count_matrix(&simulate_trajectory(kernel, t, seed), n)`.
pub fn simulate_counts(kernel: &StateKernel, t: u64, seed: u64) -> CountMatrix {
    let n = kernel.n();
    let cum = CumulativeRows::new(kernel);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = Array2::<u64>::zeros((n, n));
    let mut x = initial_state(kernel.pi(), &mut rng);
    for _ in 0..t {
        let y = cum.sample(x, rng.random::<f64>());
        counts[[x, y]] += 1;
        x = y;
    }
    CountMatrix::from_counts(counts)
}

/// Count the transitions of a trajectory over `n` states:
/// `N̂[x][y] = Σ_t 1{X_t = x, X_{t+1} = y}`.
pub fn count_matrix(traj: &Trajectory, n: usize) -> Result<CountMatrix> {
    for &s in &traj.states {
        if s as usize >= n {
            return Err(Error::StateOutOfRange { state: s as usize, n });
        }
    }
    let mut counts = Array2::<u64>::zeros((n, n));
    for w in traj.states.windows(2) {
        counts[[w[0] as usize, w[1] as usize]] += 1;
    }
    Ok(CountMatrix::from_counts(counts))
}

/// Expected counts under equilibrium: `N[x][y] = T · Π_x · P[x][y]`.
pub fn expected_count_matrix(kernel: &StateKernel, t: u64) -> Array2<f64> {
    let n = kernel.n();
    let mut m = kernel.p().clone();
    for x in 0..n {
        let w = t as f64 * kernel.pi()[x];
        for y in 0..n {
            m[[x, y]] *= w;
        }
    }
    m
}
