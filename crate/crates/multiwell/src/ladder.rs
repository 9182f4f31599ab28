//! First-passage parity of the alternating kick walk and the branching
//! probabilities it induces at interior vertices.
//!
//! A particle released just above an interior vertex shuttles between the
//! two outer walls of the merged well, losing or gaining energy kick by
//! kick: left wall first, then right, alternating. The side it settles
//! into is decided by whether the cumulative kick sum first exceeds the
//! release offset on a left-wall or a right-wall collision, so branching
//! reduces to the parity of a first-passage index. Three estimators of
//! that parity live here:
//!
//! * [`walk_parity_mc`] simulates the alternating walk directly.
//! * [`ladder_stats_mc`] exploits that, when the right kick is almost
//!   surely positive, the parity limit equals a ratio of two first-ascent
//!   statistics of the paired walk; both are estimated by Monte Carlo.
//! * [`ladder_grid`] computes the same ratio deterministically by
//!   iterating a sub-probability kernel on a grid of cell masses.
//!
//! When the right kick can be negative the ratio route is invalid and
//! [`general_parity`] takes over: it estimates the parity limit from the
//! occupation statistics of the ascent-parity chain combined with two
//! families of fresh first-ascent walks, one per interleaving order.

use crate::error::{Error, Result};
use crate::kernels::{KickPair, PerturbationSpec};
use crate::microsim::branch_frequency_mc;
use crate::stream::{Stream, Streams};
use crate::topology::WellGraph;
use serde::Serialize;
use std::fmt;
use std::str::FromStr;

/// 97.5% standard normal quantile, for two-sided 95% intervals.
const Z95: f64 = 1.959_963_984_540_054;

/// Per-walk step budget before the first passage is declared stuck.
const MAX_WALK_STEPS: u64 = 10_000_000;

/// Per-epoch pair budget before a first ascent is declared stuck.
const MAX_EPOCH_PAIR_STEPS: u64 = 10_000_000;

/// Kernel-iteration cap for the grid route.
const MAX_GRID_ITERATIONS: u64 = 1_000_000;

/// Stop iterating the restricted kernel once this little mass is alive.
const ALIVE_STOP: f64 = 1e-10;

/// Mass allowed to fall off the negative end of the grid.
const LEAK_TOL: f64 = 1e-9;

/// Accounted mass must match the input mass this closely.
const MASS_CHECK_TOL: f64 = 1e-6;

const MIN_GRID_CELLS: usize = 64;

/// Default release level: comfortably many kicks above the vertex, so the
/// first passage forgets the starting interleaving, yet cheap to simulate.
pub fn default_level(pair: &KickPair) -> f64 {
    50.0 * pair.bound().max(1.0)
}

// ---------------------------------------------------------------------------
// Direct parity simulation
// ---------------------------------------------------------------------------

/// The alternating walk and the level its first passage is taken against.
#[derive(Debug, Clone)]
pub struct WalkSpec {
    pub pair: KickPair,
    /// Level spacing, > 0.
    pub lambda: f64,
    /// Level multiplier, >= 1; the passage level is `n * lambda`.
    pub n: u64,
}

impl WalkSpec {
    pub fn new(pair: KickPair, lambda: f64, n: u64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!(
                "level spacing must be positive and finite, got {lambda}"
            )));
        }
        if n == 0 {
            return Err(Error::Config("level multiplier must be at least 1".into()));
        }
        Ok(WalkSpec { pair, lambda, n })
    }

    /// Spec with the default release level split as `50 * max(M, 1) * 1`.
    pub fn with_default_level(pair: KickPair) -> Self {
        let lambda = default_level(&pair);
        WalkSpec { pair, lambda, n: 1 }
    }

    pub fn level(&self) -> f64 {
        self.n as f64 * self.lambda
    }
}

/// Frequency of odd first-passage indices with a Wilson 95% interval.
#[derive(Debug, Clone, Serialize)]
pub struct ParityEstimate {
    pub p_odd: f64,
    pub p_even: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub odd_count: u64,
    pub replicas: u64,
}

fn wilson95(successes: u64, trials: u64) -> (f64, f64) {
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Simulates the alternating walk (left kick first) until it first exceeds
/// the level and reports how often that happens on an odd step.
pub fn walk_parity_mc(
    spec: &WalkSpec,
    replicas: u64,
    stream: &mut Stream,
) -> Result<ParityEstimate> {
    if replicas == 0 {
        return Err(Error::Config("need at least one replica".into()));
    }
    let level = spec.level();
    let mut odd = 0u64;
    for _ in 0..replicas {
        let mut s = 0.0f64;
        let mut m = 0u64;
        loop {
            s += spec.pair.xi.sample(stream)?;
            m += 1;
            if s > level {
                break;
            }
            s += spec.pair.eta.sample(stream)?;
            m += 1;
            if s > level {
                break;
            }
            if m >= MAX_WALK_STEPS {
                return Err(Error::Numeric(format!(
                    "no passage over level {level} within {MAX_WALK_STEPS} steps; \
                     kick drift too weak for this level"
                )));
            }
        }
        if m % 2 == 1 {
            odd += 1;
        }
    }
    let p_odd = odd as f64 / replicas as f64;
    let (wilson_lo, wilson_hi) = wilson95(odd, replicas);
    Ok(ParityEstimate {
        p_odd,
        p_even: 1.0 - p_odd,
        wilson_lo,
        wilson_hi,
        odd_count: odd,
        replicas,
    })
}

// ---------------------------------------------------------------------------
// Ladder-epoch ratio (right kick almost surely positive)
// ---------------------------------------------------------------------------

/// A point estimate with its standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn ci95(&self) -> f64 {
        Z95 * self.se
    }
}

/// First-ascent statistics of the paired walk and the settling ratio.
#[derive(Debug, Clone, Serialize)]
pub struct LadderStats {
    /// Mean pair sum at the first ascent (always positive).
    pub e_c: Estimate,
    /// Mean positive part of the sum one left kick before the ascent.
    pub e_b_pos: Estimate,
    /// Mean pair sum one full pair before the ascent (kept for reference;
    /// not used by the ratio).
    pub e_a: Estimate,
    /// Branch-left probability estimate `E[b 1_{b>0}] / E[c]`.
    pub p: f64,
    pub p_se: f64,
    pub epochs: u64,
}

/// True when the kick is positive with probability one (and not the
/// constant zero).
fn almost_surely_positive(spec: &PerturbationSpec) -> bool {
    let (lo, hi) = spec.support();
    if !(hi > 0.0) {
        return false;
    }
    if spec.has_density() {
        lo >= 0.0
    } else {
        // Atomic families can put real mass on the left endpoint.
        lo > 0.0
    }
}

fn require_positive_right_kick(pair: &KickPair) -> Result<()> {
    if almost_surely_positive(&pair.eta) {
        Ok(())
    } else {
        Err(Error::Hypothesis(
            "the ladder ratio needs a right kick that is positive with \
             probability one; use general_parity for sign-changing kicks"
                .into(),
        ))
    }
}

/// One first-ascent epoch of the paired walk. Returns `(a, b, c)` where
/// `c` is the pair sum at the ascent, `b` the sum one left kick earlier,
/// and `a` the sum one full pair earlier.
fn ladder_epoch(pair: &KickPair, stream: &mut Stream) -> Result<(f64, f64, f64)> {
    let mut t_prev = 0.0f64;
    let mut pairs = 0u64;
    loop {
        let xi = pair.xi.sample(stream)?;
        let eta = pair.eta.sample(stream)?;
        let t = t_prev + xi + eta;
        if t > 0.0 {
            return Ok((t_prev, t_prev + xi, t));
        }
        t_prev = t;
        pairs += 1;
        if pairs >= MAX_EPOCH_PAIR_STEPS {
            return Err(Error::Numeric(format!(
                "first ascent still open after {MAX_EPOCH_PAIR_STEPS} kick pairs"
            )));
        }
    }
}

/// Estimates the settling ratio from repeated first-ascent epochs.
///
/// Requires the right kick to be almost surely positive; then the epoch
/// statistics satisfy `c > 0` and `b <= c` pathwise and the ratio
/// `E[b 1_{b>0}] / E[c]` is the branch-left probability.
pub fn ladder_stats_mc(pair: &KickPair, epochs: u64, stream: &mut Stream) -> Result<LadderStats> {
    if epochs == 0 {
        return Err(Error::Config("need at least one epoch".into()));
    }
    require_positive_right_kick(pair)?;
    let (mut sx, mut sy, mut sa) = (0.0f64, 0.0f64, 0.0f64);
    let (mut sxx, mut syy, mut saa, mut sxy) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..epochs {
        let (a, b, c) = ladder_epoch(pair, stream)?;
        let x = if b > 0.0 { b } else { 0.0 };
        sx += x;
        sy += c;
        sa += a;
        sxx += x * x;
        syy += c * c;
        saa += a * a;
        sxy += x * c;
    }
    let n = epochs as f64;
    let (mx, my, ma) = (sx / n, sy / n, sa / n);
    let denom = (n - 1.0).max(1.0);
    let vx = ((sxx - n * mx * mx) / denom).max(0.0);
    let vy = ((syy - n * my * my) / denom).max(0.0);
    let va = ((saa - n * ma * ma) / denom).max(0.0);
    let cxy = (sxy - n * mx * my) / denom;
    let p = mx / my;
    let var_ratio = ((vx - 2.0 * p * cxy + p * p * vy) / (n * my * my)).max(0.0);
    Ok(LadderStats {
        e_c: Estimate { value: my, se: (vy / n).sqrt() },
        e_b_pos: Estimate { value: mx, se: (vx / n).sqrt() },
        e_a: Estimate { value: ma, se: (va / n).sqrt() },
        p,
        p_se: var_ratio.sqrt(),
        epochs,
    })
}

// ---------------------------------------------------------------------------
// Grid route: deterministic computation of the same ratio
// ---------------------------------------------------------------------------

/// A measure on uniform cells `[k h, (k+1) h)`, `k = k_min, k_min+1, ...`.
#[derive(Debug, Clone, Serialize)]
pub struct GridMeasure {
    /// Cell width.
    pub h: f64,
    /// Index of the first cell.
    pub k_min: i64,
    /// Mass per cell.
    pub masses: Vec<f64>,
}

impl GridMeasure {
    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    fn center(&self, i: usize) -> f64 {
        (self.k_min + i as i64) as f64 * self.h + 0.5 * self.h
    }

    /// Mass on cells entirely right of zero.
    pub fn mass_above_zero(&self) -> f64 {
        self.masses
            .iter()
            .enumerate()
            .filter(|(i, _)| self.k_min + *i as i64 >= 0)
            .map(|(_, m)| m)
            .sum()
    }

    /// First moment over cells right of zero, cell mass at cell center.
    pub fn moment_above_zero(&self) -> f64 {
        self.masses
            .iter()
            .enumerate()
            .filter(|(i, _)| self.k_min + *i as i64 >= 0)
            .map(|(i, m)| m * self.center(i))
            .sum()
    }

    /// Smallest interval of nonzero cells, as coordinates.
    pub fn support(&self) -> Option<(f64, f64)> {
        let first = self.masses.iter().position(|&m| m > 0.0)?;
        let last = self.masses.iter().rposition(|&m| m > 0.0)?;
        Some((
            (self.k_min + first as i64) as f64 * self.h,
            (self.k_min + last as i64 + 1) as f64 * self.h,
        ))
    }
}

/// Cell-mass vector with a signed base index; the workhorse of the DP.
#[derive(Debug, Clone)]
pub(crate) struct CellVec {
    k_min: i64,
    m: Vec<f64>,
}

impl CellVec {
    fn empty() -> Self {
        CellVec { k_min: 0, m: Vec::new() }
    }

    fn total(&self) -> f64 {
        self.m.iter().sum()
    }

    /// Mass convolution of two cell-uniform measures. The sum of two
    /// cell-uniform variables straddles the shared edge of two adjacent
    /// cells, half the product mass on each side, so the raw index
    /// convolution is followed by a mass-conserving half split.
    fn conv_smoothed(&self, other: &CellVec) -> CellVec {
        if self.m.is_empty() || other.m.is_empty() {
            return CellVec::empty();
        }
        let mut raw = vec![0.0f64; self.m.len() + other.m.len() - 1];
        for (i, &a) in self.m.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (j, &b) in other.m.iter().enumerate() {
                raw[i + j] += a * b;
            }
        }
        let mut sm = vec![0.0f64; raw.len() + 1];
        for (j, &v) in raw.iter().enumerate() {
            sm[j] += 0.5 * v;
            sm[j + 1] += 0.5 * v;
        }
        CellVec { k_min: self.k_min + other.k_min, m: sm }
    }

    /// Splits into (cells entirely below zero, cells at or above zero).
    fn split_at_zero(&self) -> (CellVec, CellVec) {
        let cut = (-self.k_min).clamp(0, self.m.len() as i64) as usize;
        let neg = CellVec { k_min: self.k_min, m: self.m[..cut].to_vec() };
        let pos = CellVec { k_min: self.k_min + cut as i64, m: self.m[cut..].to_vec() };
        (neg, pos)
    }

    /// Drops cells below `k_bot`, returning the dropped mass.
    fn clip_below(&mut self, k_bot: i64) -> f64 {
        if self.k_min >= k_bot {
            return 0.0;
        }
        let cut = ((k_bot - self.k_min) as usize).min(self.m.len());
        let dropped: f64 = self.m[..cut].iter().sum();
        self.m.drain(..cut);
        self.k_min = k_bot;
        dropped
    }

    fn add(&self, other: &CellVec) -> CellVec {
        if self.m.is_empty() {
            return other.clone();
        }
        if other.m.is_empty() {
            return self.clone();
        }
        let k_min = self.k_min.min(other.k_min);
        let k_end = (self.k_min + self.m.len() as i64).max(other.k_min + other.m.len() as i64);
        let mut m = vec![0.0f64; (k_end - k_min) as usize];
        for (i, &v) in self.m.iter().enumerate() {
            m[(self.k_min - k_min) as usize + i] += v;
        }
        for (i, &v) in other.m.iter().enumerate() {
            m[(other.k_min - k_min) as usize + i] += v;
        }
        CellVec { k_min, m }
    }

    fn into_measure(self, h: f64) -> GridMeasure {
        GridMeasure { h, k_min: self.k_min, masses: self.m }
    }
}

/// Cell masses of a marginal kick law from exact distribution-function
/// differences, on cells aligned so that zero is a cell edge.
fn marginal_cells(spec: &PerturbationSpec, h: f64) -> CellVec {
    let (lo, hi) = spec.support();
    let k_lo = (lo / h).floor() as i64;
    let k_hi = ((hi / h).ceil() as i64).max(k_lo + 1);
    let mut m = Vec::with_capacity((k_hi - k_lo) as usize);
    let mut prev = spec.cdf(k_lo as f64 * h);
    for k in k_lo..k_hi {
        let next = spec.cdf((k + 1) as f64 * h);
        m.push((next - prev).max(0.0));
        prev = next;
    }
    CellVec { k_min: k_lo, m }
}

/// Everything the grid iteration produces; tests inspect the internals.
pub(crate) struct GridParts {
    pub(crate) h: f64,
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) eta: CellVec,
    /// Law of the pair sum at the first ascent, positive cells.
    pub(crate) e: CellVec,
    /// Law of the sum one left kick before the ascent, all cells; the
    /// pre-ascent occupation measure and the unit atom at zero are already
    /// folded in.
    pub(crate) b_full: CellVec,
    pub(crate) residual: f64,
    pub(crate) leaked: f64,
    pub(crate) iterations: u64,
}

pub(crate) fn compute_grid(pair: &KickPair, grid_points: usize, n_neg: usize) -> Result<GridParts> {
    let bound = pair.bound();
    if !(bound > 0.0) {
        return Err(Error::Config("kick pair has no spread".into()));
    }
    let span = 2.0 * bound * (n_neg as f64 + 1.0);
    let h = span / grid_points as f64;
    // Positive extent: one pair step plus smoothing slack.
    let k_top = (2.0 * bound / h).ceil() as i64 + 2;
    let k_bot = k_top - grid_points as i64;
    let xi = marginal_cells(&pair.xi, h);
    let eta = marginal_cells(&pair.eta, h);
    let zeta = xi.conv_smoothed(&eta);

    let mut e = CellVec::empty();
    let mut w_neg = CellVec::empty();
    let mut leaked = 0.0f64;
    let mut iterations = 0u64;
    // First step leaves the unit atom at zero, so the step law itself.
    let mut cur = zeta.clone();
    let residual;
    loop {
        iterations += 1;
        let (mut neg, pos) = cur.split_at_zero();
        e = e.add(&pos);
        leaked += neg.clip_below(k_bot);
        let alive = neg.total();
        if alive < ALIVE_STOP {
            residual = alive;
            break;
        }
        if iterations >= MAX_GRID_ITERATIONS {
            return Err(Error::Numeric(format!(
                "restricted kernel iteration still has mass {alive:.3e} after \
                 {MAX_GRID_ITERATIONS} steps"
            )));
        }
        w_neg = w_neg.add(&neg);
        cur = neg.conv_smoothed(&zeta);
    }
    // b = (atom + W_neg) convolved with the left kick; the atom sits
    // exactly on a cell edge, so its contribution is the marginal itself.
    let b_full = xi.add(&w_neg.conv_smoothed(&xi));
    Ok(GridParts { h, eta, e, b_full, residual, leaked, iterations })
}

/// Grid output: the two first-ascent laws and the settling ratio.
#[derive(Debug, Clone, Serialize)]
pub struct LadderGrid {
    /// Law of the sum one left kick before the ascent (both signs).
    pub b: GridMeasure,
    /// Law of the pair sum at the ascent (positive part).
    pub c: GridMeasure,
    /// Branch-left probability.
    pub p: f64,
    pub grid_points: usize,
    pub cell_width: f64,
    /// Sub-threshold mass discarded when the iteration stopped.
    pub residual: f64,
    /// Mass that fell off the negative end of the grid.
    pub leaked: f64,
    pub iterations: u64,
}

/// Deterministic branch-left probability on a uniform grid of cell masses.
///
/// Iterates the pair-step kernel restricted to the nonpositive half line,
/// accumulating the first-ascent laws; the ratio of their first moments
/// over the positive half line is the branch-left probability. The
/// negative extent of the grid grows until the discarded tail mass is
/// negligible.
pub fn ladder_grid(pair: &KickPair, grid_points: usize) -> Result<LadderGrid> {
    if grid_points < MIN_GRID_CELLS {
        return Err(Error::Config(format!(
            "need at least {MIN_GRID_CELLS} grid cells, got {grid_points}"
        )));
    }
    require_positive_right_kick(pair)?;
    if !pair.xi.has_density() || !pair.eta.has_density() {
        return Err(Error::Hypothesis(
            "the grid route needs kicks with continuous densities".into(),
        ));
    }
    let mut n_neg = 4usize;
    loop {
        let parts = compute_grid(pair, grid_points, n_neg)?;
        if parts.leaked > LEAK_TOL {
            if n_neg >= 64 {
                return Err(Error::Numeric(format!(
                    "negative tail mass {:.3e} does not fit the grid even at \
                     span multiplier {n_neg}",
                    parts.leaked
                )));
            }
            n_neg *= 2;
            continue;
        }
        let accounted = parts.e.total() + parts.residual + parts.leaked;
        if (accounted - 1.0).abs() > MASS_CHECK_TOL {
            return Err(Error::Numeric(format!(
                "grid too coarse: accounted ascent mass {accounted} is not 1"
            )));
        }
        let c = parts.e.into_measure(parts.h);
        let b = parts.b_full.into_measure(parts.h);
        let denom = c.moment_above_zero();
        if !(denom > 0.0) {
            return Err(Error::Numeric("degenerate ascent law on the grid".into()));
        }
        let p_raw = b.moment_above_zero() / denom;
        if !(-1e-9..=1.0 + 1e-9).contains(&p_raw) {
            return Err(Error::Numeric(format!(
                "grid ratio {p_raw} escapes [0, 1]"
            )));
        }
        return Ok(LadderGrid {
            p: p_raw.clamp(0.0, 1.0),
            b,
            c,
            grid_points,
            cell_width: parts.h,
            residual: parts.residual,
            leaked: parts.leaked,
            iterations: parts.iterations,
        });
    }
}

// ---------------------------------------------------------------------------
// General-sign fallback: parity chain plus fresh first-ascent walks
// ---------------------------------------------------------------------------

/// Occupation statistics of the ascent-parity chain and the combined
/// parity-limit value.
#[derive(Debug, Clone, Serialize)]
pub struct GeneralParityStats {
    pub mu0: f64,
    pub mu1: f64,
    pub mu00: f64,
    pub mu01: f64,
    pub mu10: f64,
    pub mu11: f64,
    /// `nu_pairs[i][j]` counts ascents with (previous, current) parity (i, j).
    pub nu_pairs: [[u64; 2]; 2],
    /// `nu_prev[i]` counts ascents whose previous parity was `i`.
    pub nu_prev: [u64; 2],
    /// Mean first-ascent height of fresh left-kick-first walks.
    pub e_gamma0: Estimate,
    /// Mean first-ascent height of fresh right-kick-first walks.
    pub e_gamma1: Estimate,
    /// Parity-limit estimate (probability of settling left).
    pub value: f64,
    pub ladder_points: u64,
    pub chain_steps: u64,
}

fn can_be_positive(spec: &PerturbationSpec) -> bool {
    spec.support().1 > 0.0
}

/// Mean height of the first strict ascent above zero for a walk that
/// alternates `first, second, first, ...`.
fn first_ascent_height(
    first: &PerturbationSpec,
    second: &PerturbationSpec,
    replicas: u64,
    stream: &mut Stream,
) -> Result<Estimate> {
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    for _ in 0..replicas {
        let mut s = 0.0f64;
        let mut steps = 0u64;
        let height = loop {
            s += first.sample(stream)?;
            if s > 0.0 {
                break s;
            }
            s += second.sample(stream)?;
            if s > 0.0 {
                break s;
            }
            steps += 2;
            if steps >= MAX_WALK_STEPS {
                return Err(Error::Numeric(format!(
                    "no ascent above zero within {MAX_WALK_STEPS} steps"
                )));
            }
        };
        sum += height;
        sumsq += height * height;
    }
    let n = replicas as f64;
    let mean = sum / n;
    let var = ((sumsq - n * mean * mean) / (n - 1.0).max(1.0)).max(0.0);
    Ok(Estimate { value: mean, se: (var / n).sqrt() })
}

/// Estimates the parity limit for kicks of arbitrary sign.
///
/// Runs one long alternating walk, recording at every strict ascent of the
/// running maximum the parity of the step index; transition counts of that
/// parity sequence are combined with the mean first-ascent heights of the
/// two interleavings (estimated from fresh walks on separate substreams)
/// into the settling probability. Uses substreams `base`, `base+1`,
/// `base+2` of `streams`.
pub fn general_parity(
    pair: &KickPair,
    epochs: u64,
    streams: &Streams,
    stream_base: u64,
) -> Result<GeneralParityStats> {
    if epochs == 0 {
        return Err(Error::Config("need at least one ascent".into()));
    }
    if !can_be_positive(&pair.xi) || !can_be_positive(&pair.eta) {
        return Err(Error::Hypothesis(
            "each kick needs positive mass on (0, inf) for the parity chain".into(),
        ));
    }
    let mut chain = streams.stream(stream_base);
    let step_budget = epochs.saturating_mul(100_000).max(10_000_000);
    let mut s = 0.0f64;
    let mut max_s = 0.0f64;
    let mut prev: usize = 0;
    let mut nu_pairs = [[0u64; 2]; 2];
    let mut nu_prev = [0u64; 2];
    let mut found = 0u64;
    let mut step = 0u64;
    while found < epochs {
        step += 1;
        s += if step % 2 == 1 {
            pair.xi.sample(&mut chain)?
        } else {
            pair.eta.sample(&mut chain)?
        };
        if s > max_s {
            max_s = s;
            let cur = (step % 2) as usize;
            nu_prev[prev] += 1;
            nu_pairs[prev][cur] += 1;
            prev = cur;
            found += 1;
        }
        if step >= step_budget {
            return Err(Error::Numeric(format!(
                "only {found} ascents in {step} steps; ascent rate too low"
            )));
        }
    }
    let e_gamma0 = first_ascent_height(&pair.xi, &pair.eta, epochs, &mut streams.stream(stream_base + 1))?;
    let e_gamma1 = first_ascent_height(&pair.eta, &pair.xi, epochs, &mut streams.stream(stream_base + 2))?;
    let n = epochs as f64;
    let mu = |c: u64| c as f64 / n;
    let (g0, g1) = (e_gamma0.value, e_gamma1.value);
    let mu0 = mu(nu_prev[0]);
    let mu1 = mu(nu_prev[1]);
    let mu01 = mu(nu_pairs[0][1]);
    let mu11 = mu(nu_pairs[1][1]);
    let denom = mu1 * g1 + mu0 * g0;
    if !(denom > 0.0) {
        return Err(Error::Numeric("degenerate ascent heights".into()));
    }
    Ok(GeneralParityStats {
        mu0,
        mu1,
        mu00: mu(nu_pairs[0][0]),
        mu01,
        mu10: mu(nu_pairs[1][0]),
        mu11,
        nu_pairs,
        nu_prev,
        e_gamma0,
        e_gamma1,
        value: (mu11 * g1 + mu01 * g0) / denom,
        ladder_points: epochs,
        chain_steps: step,
    })
}

// ---------------------------------------------------------------------------
// Dispatcher
// ---------------------------------------------------------------------------

/// Which estimator answers a branching query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchMethod {
    /// Microscopic simulation released just above the vertex.
    Mc,
    /// First-ascent ratio Monte Carlo.
    Ladder,
    /// Deterministic grid computation of the first-ascent ratio.
    Grid,
}

impl fmt::Display for BranchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BranchMethod::Mc => "mc",
            BranchMethod::Ladder => "ladder",
            BranchMethod::Grid => "grid",
        })
    }
}

impl FromStr for BranchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" => Ok(BranchMethod::Mc),
            "ladder" => Ok(BranchMethod::Ladder),
            "grid" => Ok(BranchMethod::Grid),
            other => Err(Error::Config(format!(
                "unknown branching method {other:?}; expected mc, ladder, or grid"
            ))),
        }
    }
}

/// Branching probabilities at one interior vertex.
#[derive(Debug, Clone, Serialize)]
pub struct BranchingOutcome {
    pub p_left: f64,
    pub p_right: f64,
    /// The method that was asked for.
    pub method: BranchMethod,
    /// True when the ratio hypotheses failed and the parity-chain fallback
    /// answered instead; the value is then an open-regime estimate.
    pub fell_back_to_parity_chain: bool,
    /// Half-width of a 95% interval where the estimator provides one.
    pub ci95: Option<f64>,
}

/// Collision budget per release for the microscopic method.
const MC_COLLISION_CAP: u64 = 100_000_000;

/// Estimates `(p_left, p_right)` at an interior vertex by the requested
/// method. `budget` means releases for `mc`, epochs for `ladder`, and grid
/// cells for `grid`. When the vertex kick pair violates the ratio
/// hypotheses (a right kick that can be nonpositive), `ladder` and `grid`
/// fall back to [`general_parity`] and flag the outcome. Uses substreams
/// `stream_base..stream_base+3`.
pub fn branching_probabilities(
    graph: &WellGraph,
    vertex: usize,
    method: BranchMethod,
    budget: u64,
    epsilon: f64,
    streams: &Streams,
    stream_base: u64,
) -> Result<BranchingOutcome> {
    let edge = graph.edge(vertex);
    if edge.is_leaf() {
        return Err(Error::Config(format!(
            "vertex {} is a leaf; branching needs an interior vertex",
            graph.vertex_label(vertex)
        )));
    }
    let pair = graph.kick(vertex);
    let outcome = |p_left: f64, fell_back: bool, ci95: Option<f64>| BranchingOutcome {
        p_left,
        p_right: 1.0 - p_left,
        method,
        fell_back_to_parity_chain: fell_back,
        ci95,
    };
    match method {
        BranchMethod::Mc => {
            let offset = default_level(pair);
            let est = branch_frequency_mc(
                graph,
                vertex,
                epsilon,
                offset,
                budget,
                MC_COLLISION_CAP,
                streams,
                stream_base,
            )?;
            Ok(outcome(est.p_left, false, Some(Z95 * est.se)))
        }
        BranchMethod::Ladder | BranchMethod::Grid => {
            if require_positive_right_kick(pair).is_err() {
                let stats = general_parity(pair, budget, streams, stream_base)?;
                return Ok(outcome(stats.value, true, None));
            }
            match method {
                BranchMethod::Ladder => {
                    let stats = ladder_stats_mc(pair, budget, &mut streams.stream(stream_base))?;
                    Ok(outcome(stats.p, false, Some(Z95 * stats.p_se)))
                }
                BranchMethod::Grid => {
                    let grid = ladder_grid(pair, budget as usize)?;
                    Ok(outcome(grid.p, false, None))
                }
                BranchMethod::Mc => unreachable!(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_graph, WellSystem};
    use proptest::prelude::*;

    fn uni(a: f64, b: f64) -> PerturbationSpec {
        PerturbationSpec::uniform(a, b).unwrap()
    }

    fn pair(xa: f64, xb: f64, ea: f64, eb: f64) -> KickPair {
        KickPair::new(uni(xa, xb), uni(ea, eb)).unwrap()
    }

    /// Both kicks positive: settling ratio is the mean ratio 0.3/1.1.
    fn both_positive() -> KickPair {
        pair(0.2, 0.4, 0.6, 1.0)
    }

    /// Left kick changes sign, right kick stays positive.
    fn mixed_left() -> KickPair {
        pair(-0.5, 1.0, 0.1, 0.6)
    }

    /// Both kicks change sign: only mc/general_parity apply.
    fn both_signs() -> KickPair {
        pair(-0.4, 0.8, -0.3, 0.9)
    }

    const P_BOTH_POSITIVE: f64 = 0.3 / 1.1;

    #[test]
    fn deterministic_walk_parity_matches_hand_enumeration() {
        // Constant kicks c = 0.25. Level 2c: passage at step 3 (odd).
        let det = KickPair::new(uni(0.25, 0.25), uni(0.25, 0.25)).unwrap();
        let mut s = Streams::from_seed(1).stream(0);
        let spec = WalkSpec::new(det.clone(), 0.25, 2).unwrap();
        let est = walk_parity_mc(&spec, 100, &mut s).unwrap();
        assert_eq!(est.p_odd, 1.0);
        assert_eq!(est.wilson_hi, 1.0);
        assert!(est.wilson_lo > 0.9);
        // Level 3c: S_3 = 3c is not above, S_4 is: even passage.
        let spec = WalkSpec::new(det, 0.25, 3).unwrap();
        let est = walk_parity_mc(&spec, 100, &mut s).unwrap();
        assert_eq!(est.p_odd, 0.0);
        assert_eq!(est.p_even, 1.0);
    }

    #[test]
    fn parity_complement_is_exact() {
        let mut s = Streams::from_seed(2).stream(0);
        let spec = WalkSpec::new(mixed_left(), 5.0, 3).unwrap();
        let est = walk_parity_mc(&spec, 999, &mut s).unwrap();
        assert_eq!(est.p_odd + est.p_even, 1.0);
        assert!(est.wilson_lo <= est.p_odd && est.p_odd <= est.wilson_hi);
    }

    #[test]
    fn both_positive_parity_matches_mean_ratio() {
        let mut s = Streams::from_seed(3).stream(0);
        let spec = WalkSpec::with_default_level(both_positive());
        assert_eq!(spec.level(), 50.0);
        let est = walk_parity_mc(&spec, 20_000, &mut s).unwrap();
        let se = (P_BOTH_POSITIVE * (1.0 - P_BOTH_POSITIVE) / 20_000.0).sqrt();
        assert!(
            (est.p_odd - P_BOTH_POSITIVE).abs() < 3.0 * se,
            "p = {}, want {} +- {}",
            est.p_odd,
            P_BOTH_POSITIVE,
            3.0 * se
        );
    }

    #[test]
    fn walk_parity_regression_pinned() {
        // Deterministic stream, so the estimate is reproducible exactly;
        // value recorded from the first run of this configuration.
        let mut s = Streams::from_seed(2024).stream(7);
        let spec = WalkSpec::new(mixed_left(), 50.0, 1).unwrap();
        let est = walk_parity_mc(&spec, 100_000, &mut s).unwrap();
        assert_eq!(est.replicas, 100_000);
        assert_eq!(est.odd_count, 53_768);
        assert_eq!(est.p_odd, 0.53768);
        let mut s2 = Streams::from_seed(2024).stream(7);
        let est2 = walk_parity_mc(&spec, 100_000, &mut s2).unwrap();
        assert_eq!(est2.p_odd, est.p_odd);
    }

    #[test]
    fn ladder_forces_single_pair_when_both_positive() {
        let mut s = Streams::from_seed(4).stream(0);
        let stats = ladder_stats_mc(&both_positive(), 10_000, &mut s).unwrap();
        // The very first pair already ascends, so the pre-pair sum is zero.
        assert_eq!(stats.e_a.value, 0.0);
        assert_eq!(stats.e_a.se, 0.0);
        assert!((stats.e_c.value - 1.1).abs() < 3.0 * stats.e_c.se);
        assert!(
            (stats.p - P_BOTH_POSITIVE).abs() < 3.0 * stats.p_se,
            "p = {} +- {}",
            stats.p,
            stats.p_se
        );
    }

    #[test]
    fn ladder_epoch_invariants_hold_pathwise() {
        let pair = mixed_left();
        let mut s = Streams::from_seed(5).stream(0);
        for _ in 0..20_000 {
            let (a, b, c) = ladder_epoch(&pair, &mut s).unwrap();
            assert!(c > 0.0);
            assert!(b <= c, "b = {b}, c = {c}");
            assert!(a <= 0.0, "pre-pair sum {a} should not have ascended");
        }
    }

    #[test]
    fn ladder_rejects_sign_changing_right_kick() {
        let mut s = Streams::from_seed(6).stream(0);
        let err = ladder_stats_mc(&both_signs(), 100, &mut s).unwrap_err();
        match err {
            Error::Hypothesis(msg) => assert!(msg.contains("general_parity")),
            other => panic!("expected hypothesis error, got {other:?}"),
        }
    }

    #[test]
    fn ladder_and_direct_parity_agree() {
        let pair = mixed_left();
        let mut s = Streams::from_seed(7).stream(0);
        let stats = ladder_stats_mc(&pair, 200_000, &mut s).unwrap();
        let spec = WalkSpec::new(pair, 50.0, 1).unwrap();
        let mut s2 = Streams::from_seed(7).stream(1);
        let est = walk_parity_mc(&spec, 50_000, &mut s2).unwrap();
        assert!(
            (stats.p - est.p_odd).abs() < 0.01,
            "ladder {} vs direct {}",
            stats.p,
            est.p_odd
        );
    }

    #[test]
    fn grid_reproduces_the_mean_ratio_when_both_positive() {
        let grid = ladder_grid(&both_positive(), 4096).unwrap();
        assert!(
            (grid.p - P_BOTH_POSITIVE).abs() < 2e-4,
            "grid p = {}, want {}",
            grid.p,
            P_BOTH_POSITIVE
        );
        // Every epoch closes on the first pair: all mass ascends at once.
        assert!((grid.c.total_mass() - 1.0).abs() < 1e-9);
        assert_eq!(grid.iterations, 1);
        let (lo, hi) = grid.c.support().unwrap();
        assert!(lo >= 0.8 - 2.0 * grid.cell_width && hi <= 1.4 + 2.0 * grid.cell_width);
    }

    #[test]
    fn grid_matches_ladder_mc_with_sign_changing_left_kick() {
        let pair = mixed_left();
        let grid = ladder_grid(&pair, 4096).unwrap();
        let mut s = Streams::from_seed(8).stream(0);
        let stats = ladder_stats_mc(&pair, 500_000, &mut s).unwrap();
        assert!(
            (grid.p - stats.p).abs() < 0.005,
            "grid {} vs mc {}",
            grid.p,
            stats.p
        );
        assert!(grid.leaked <= 1e-9);
        assert!(grid.residual < 1e-10);
    }

    #[test]
    fn grid_conserves_mass() {
        for pair in [both_positive(), mixed_left()] {
            let grid = ladder_grid(&pair, 2048).unwrap();
            let accounted = grid.c.total_mass() + grid.residual + grid.leaked;
            assert!((accounted - 1.0).abs() < 1e-9, "accounted {accounted}");
        }
    }

    #[test]
    fn grid_satisfies_the_convolution_identity() {
        // The ascent law must equal the pre-ascent-plus-left-kick law
        // convolved with the right kick, restricted to the positive side.
        let parts = compute_grid(&mixed_left(), 4096, 4).unwrap();
        let (_, rhs) = parts.b_full.conv_smoothed(&parts.eta).split_at_zero();
        let lhs = &parts.e;
        let k_min = lhs.k_min.min(rhs.k_min);
        let k_end = (lhs.k_min + lhs.m.len() as i64).max(rhs.k_min + rhs.m.len() as i64);
        let mut tv = 0.0f64;
        for k in k_min..k_end {
            let a = if k >= lhs.k_min && k < lhs.k_min + lhs.m.len() as i64 {
                lhs.m[(k - lhs.k_min) as usize]
            } else {
                0.0
            };
            let b = if k >= rhs.k_min && k < rhs.k_min + rhs.m.len() as i64 {
                rhs.m[(k - rhs.k_min) as usize]
            } else {
                0.0
            };
            tv += (a - b).abs();
        }
        assert!(tv <= 1e-6, "total variation {tv}");
    }

    #[test]
    fn grid_rejects_coarse_or_unsupported_input() {
        assert!(matches!(
            ladder_grid(&both_positive(), 16),
            Err(Error::Config(_))
        ));
        let atomic = KickPair::new(
            PerturbationSpec::two_point(1.0, 0.75, -1.0).unwrap(),
            uni(0.1, 0.2),
        )
        .unwrap();
        assert!(matches!(ladder_grid(&atomic, 1024), Err(Error::Hypothesis(_))));
    }

    /// Joint rescaling by a power of two is exact in floating point, so
    /// the estimators must return identical values, not merely close ones.
    #[test]
    fn scaling_invariance_is_exact_for_powers_of_two() {
        let scaled = |s: f64| pair(-0.5 * s, 1.0 * s, 0.1 * s, 0.6 * s);
        let base_parity = {
            let mut st = Streams::from_seed(9).stream(0);
            walk_parity_mc(&WalkSpec::new(scaled(1.0), 50.0, 1).unwrap(), 5_000, &mut st)
                .unwrap()
                .p_odd
        };
        let base_ladder = {
            let mut st = Streams::from_seed(9).stream(1);
            ladder_stats_mc(&scaled(1.0), 20_000, &mut st).unwrap().p
        };
        let base_grid = ladder_grid(&scaled(1.0), 1024).unwrap().p;
        for s in [0.5, 2.0] {
            let mut st = Streams::from_seed(9).stream(0);
            let parity = walk_parity_mc(
                &WalkSpec::new(scaled(s), 50.0 * s, 1).unwrap(),
                5_000,
                &mut st,
            )
            .unwrap()
            .p_odd;
            assert_eq!(parity, base_parity, "parity at scale {s}");
            let mut st = Streams::from_seed(9).stream(1);
            let lad = ladder_stats_mc(&scaled(s), 20_000, &mut st).unwrap().p;
            assert_eq!(lad, base_ladder, "ladder at scale {s}");
            let grid = ladder_grid(&scaled(s), 1024).unwrap().p;
            assert_eq!(grid, base_grid, "grid at scale {s}");
        }
    }

    #[test]
    fn general_parity_degenerates_correctly_when_both_positive() {
        let streams = Streams::from_seed(10);
        let stats = general_parity(&both_positive(), 20_000, &streams, 0).unwrap();
        // Every step ascends, so parities strictly alternate.
        assert_eq!(stats.nu_pairs[1][1], 0);
        assert_eq!(stats.nu_pairs[0][0], 0);
        assert!((stats.value - P_BOTH_POSITIVE).abs() < 0.02, "value {}", stats.value);
    }

    #[test]
    fn general_parity_occupation_counts_are_consistent() {
        let streams = Streams::from_seed(11);
        let stats = general_parity(&both_signs(), 30_000, &streams, 0).unwrap();
        assert_eq!(
            stats.nu_pairs[0][0] + stats.nu_pairs[0][1],
            stats.nu_prev[0]
        );
        assert_eq!(
            stats.nu_pairs[1][0] + stats.nu_pairs[1][1],
            stats.nu_prev[1]
        );
        assert_eq!(stats.nu_prev[0] + stats.nu_prev[1], stats.ladder_points);
        assert!((stats.mu0 + stats.mu1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn general_parity_reduces_when_kicks_are_exchangeable() {
        let exchangeable = pair(-0.2, 0.8, -0.2, 0.8);
        let streams = Streams::from_seed(12);
        let stats = general_parity(&exchangeable, 40_000, &streams, 0).unwrap();
        let gamma_gap = (stats.e_gamma0.value - stats.e_gamma1.value).abs();
        let gamma_se = stats.e_gamma0.se.hypot(stats.e_gamma1.se);
        assert!(gamma_gap < 4.0 * gamma_se, "gap {gamma_gap} vs se {gamma_se}");
        // With equal ascent heights the value collapses onto mu11 + mu01,
        // and the two interleavings are symmetric, so both are near 1/2.
        assert!((stats.value - (stats.mu11 + stats.mu01)).abs() < 0.02);
        assert!((stats.value - 0.5).abs() < 0.02, "value {}", stats.value);
    }

    #[test]
    fn general_parity_tracks_direct_simulation_when_both_kicks_change_sign() {
        let pair = both_signs();
        let streams = Streams::from_seed(13);
        let stats = general_parity(&pair, 100_000, &streams, 0).unwrap();
        let spec = WalkSpec::new(pair, 50.0, 1).unwrap();
        let mut s = streams.stream(9);
        let est = walk_parity_mc(&spec, 30_000, &mut s).unwrap();
        assert!(
            (stats.value - est.p_odd).abs() < 0.02,
            "formula {} vs direct {}",
            stats.value,
            est.p_odd
        );
    }

    fn two_well_graph(vertex_pair: KickPair) -> WellGraph {
        let filler = pair(0.2, 0.4, 0.2, 0.4);
        let system = WellSystem::new(
            vec![0.0, 1.0, 2.0],
            vec![1.0],
            vec![0.2, 0.3],
            8.0,
            vec![filler.clone(), filler, vertex_pair],
        )
        .unwrap();
        build_graph(&system).unwrap()
    }

    #[test]
    fn branching_dispatcher_agrees_across_methods() {
        let graph = two_well_graph(both_positive());
        let streams = Streams::from_seed(14);
        let root = graph.root();
        let lad = branching_probabilities(
            &graph,
            root,
            BranchMethod::Ladder,
            100_000,
            1e-3,
            &streams,
            0,
        )
        .unwrap();
        assert!(!lad.fell_back_to_parity_chain);
        assert!((lad.p_left - P_BOTH_POSITIVE).abs() < 3.0 * lad.ci95.unwrap().max(1e-3));
        assert_eq!(lad.p_left + lad.p_right, 1.0);

        let grid =
            branching_probabilities(&graph, root, BranchMethod::Grid, 4096, 1e-3, &streams, 0)
                .unwrap();
        assert!((grid.p_left - P_BOTH_POSITIVE).abs() < 1e-3);

        let mc = branching_probabilities(
            &graph,
            root,
            BranchMethod::Mc,
            4_000,
            1e-3,
            &streams,
            100,
        )
        .unwrap();
        assert!(
            (mc.p_left - P_BOTH_POSITIVE).abs() < mc.ci95.unwrap().max(0.02) * 2.0,
            "mc {} vs {}",
            mc.p_left,
            P_BOTH_POSITIVE
        );
    }

    #[test]
    fn swapping_kicks_mirrors_the_probabilities() {
        let swapped = KickPair::new(uni(0.6, 1.0), uni(0.2, 0.4)).unwrap();
        let mut s = Streams::from_seed(15).stream(0);
        let stats = ladder_stats_mc(&swapped, 50_000, &mut s).unwrap();
        assert!(
            (stats.p - (1.0 - P_BOTH_POSITIVE)).abs() < 3.0 * stats.p_se,
            "p = {}",
            stats.p
        );
    }

    #[test]
    fn dispatcher_falls_back_for_sign_changing_right_kick() {
        let graph = two_well_graph(both_signs());
        let streams = Streams::from_seed(16);
        let out = branching_probabilities(
            &graph,
            graph.root(),
            BranchMethod::Ladder,
            20_000,
            1e-3,
            &streams,
            0,
        )
        .unwrap();
        assert!(out.fell_back_to_parity_chain);
        assert!(out.p_left > 0.0 && out.p_left < 1.0);
        let leaf_err = branching_probabilities(
            &graph,
            0,
            BranchMethod::Ladder,
            10,
            1e-3,
            &streams,
            0,
        )
        .unwrap_err();
        assert!(matches!(leaf_err, Error::Config(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        /// For positive kick pairs the ladder ratio must sit inside [0, 1]
        /// and near the mean ratio.
        #[test]
        fn ladder_ratio_stays_in_unit_interval(
            xa in 0.05f64..0.5,
            xw in 0.01f64..0.5,
            ea in 0.05f64..0.5,
            ew in 0.01f64..0.5,
            seed in 0u64..1000,
        ) {
            let p = pair(xa, xa + xw, ea, ea + ew);
            let closed = p.xi.mean() / p.mean_sum();
            let mut s = Streams::from_seed(seed).stream(0);
            let stats = ladder_stats_mc(&p, 4_000, &mut s).unwrap();
            prop_assert!((0.0..=1.0).contains(&stats.p));
            prop_assert!((stats.p - closed).abs() < 6.0 * stats.p_se.max(1e-3));
        }

        /// Odd and even frequencies always complement exactly.
        #[test]
        fn parity_frequencies_complement(seed in 0u64..1000) {
            let mut s = Streams::from_seed(seed).stream(3);
            let spec = WalkSpec::new(both_signs(), 10.0, 1).unwrap();
            let est = walk_parity_mc(&spec, 500, &mut s).unwrap();
            prop_assert_eq!(est.p_odd + est.p_even, 1.0);
        }
    }
}
