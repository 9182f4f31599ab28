//! Large-deviation machinery for energy climbs against the dissipative
//! drift: per-edge Hamiltonians, Legendre transforms, the action of energy
//! paths, exponential tilting of kick laws, rare-event estimators, and
//! quasi-potentials between the vertices of a well graph.
//!
//! Conventions. A collision at scale `epsilon` changes energy by
//! `-epsilon * kick`, so the natural per-collision gain variable is
//! `zeta = -(xi + eta)` per left/right pair, and `K0(beta) =
//! ln E exp(beta * zeta)` (see [`KickPair::cumulant`]) is its cumulant
//! generating function. On an edge of width `D`, collision pairs arrive at
//! rate `sqrt(2h)/(2D)` per unit rescaled time, which makes
//! `H(h, beta) = sqrt(2h)/(2D) * K0(beta)` the rate function's Hamiltonian
//! and its Legendre transform `L(h, alpha)` the per-time cost of moving the
//! energy at slope `alpha`:
//!
//! - the cheapest climb between adjacent vertices costs `beta* * dh`, where
//!   `K0(beta*) = 0` with `beta* > 0` ([`uphill_root`]);
//! - downhill motion along the drift costs nothing;
//! - [`minimize_path`] reproduces the closed form variationally, and the
//!   acceptance suite requires the two routes to agree.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::averaging::GraphPath;
use crate::error::{Error, Result};
use crate::kernels::{Family, KickPair, PerturbationSpec};
use crate::microsim::{validate_kick_scale, ParticleState, Side};
use crate::quad;
use crate::stream::{Stream, Streams};
use crate::topology::WellGraph;

/// Absolute tolerance for beta roots (uphill root, Legendre adjoints).
const ROOT_TOL: f64 = 1e-12;
/// Successive-refinement tolerance for per-segment action integrals.
const ACTION_REFINE_TOL: f64 = 1e-9;
/// Relative tolerance of the golden-section duration search.
const DURATION_TOL: f64 = 1e-10;
const MAX_NEWTON_ITERS: usize = 300;
const MAX_ADAPT_DEPTH: u32 = 30;
/// Largest |beta| the bracket search will reach. Cumulant evaluations stay
/// in log space, so the cap only limits how close to the slope-range
/// boundary an adjoint can be resolved.
const BETA_BRACKET_CAP: f64 = 1e8;
/// Below this acceptance rate the rejection envelope is declared unusable.
const MIN_TILT_EFFICIENCY: f64 = 1e-4;
const MAX_REJECTION_ATTEMPTS: u64 = 10_000_000;
const Z95: f64 = 1.959_963_984_540_054;

/// Which transform an [`EdgeHamiltonian`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Flavor {
    /// The plain pair transform, valid across the edge's energy interval.
    Interior,
    /// At a leaf floor only energy-raising (negative) kicks act, so the
    /// transform restricts to `{xi < 0, eta < 0}` and is pinned to the
    /// floor energy. Report-only: it holds at a single energy, which any
    /// escaping path crosses in zero time, so it never enters
    /// [`adjacent_quasipotential`].
    LeafFloorModified,
}

/// The climb Hamiltonian of one edge: collision-pair rate times the kick
/// cumulant transform.
#[derive(Debug, Clone)]
pub struct EdgeHamiltonian {
    pub edge: usize,
    /// Well width D (spatial length of the edge).
    pub d: f64,
    pub pair: KickPair,
    pub flavor: Flavor,
    /// Leaf floor energy; only the floor-modified flavor reads it.
    pub floor: f64,
}

impl EdgeHamiltonian {
    pub fn interior(graph: &WellGraph, edge: usize) -> Self {
        let e = graph.edge(edge);
        EdgeHamiltonian {
            edge,
            d: e.width(),
            pair: graph.kick(edge).clone(),
            flavor: Flavor::Interior,
            floor: e.h_bot,
        }
    }

    /// Floor-restricted transform of a leaf edge.
    pub fn leaf_floor_modified(graph: &WellGraph, edge: usize) -> Result<Self> {
        let e = graph.edge(edge);
        if !e.is_leaf() {
            return Err(Error::Config(format!(
                "floor-modified transform needs a leaf edge; {} is merged",
                graph.vertex_label(edge)
            )));
        }
        Ok(EdgeHamiltonian {
            flavor: Flavor::LeafFloorModified,
            ..Self::interior(graph, edge)
        })
    }

    /// Free-standing interior Hamiltonian from a width and a pair.
    pub fn from_pair(d: f64, pair: KickPair) -> Result<Self> {
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Config(format!("well width must be positive, got {d}")));
        }
        Ok(EdgeHamiltonian {
            edge: 0,
            d,
            pair,
            flavor: Flavor::Interior,
            floor: 0.0,
        })
    }

    /// Collision-pair rate sqrt(2h)/(2D) at energy `h`.
    fn coefficient(&self, h: f64) -> Result<f64> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Config(format!(
                "Hamiltonian needs a positive energy, got {h}"
            )));
        }
        Ok((2.0 * h).sqrt() / (2.0 * self.d))
    }

    fn require_interior(&self, what: &str) -> Result<()> {
        if self.flavor != Flavor::Interior {
            return Err(Error::Config(format!(
                "{what} is defined for the interior flavor only; the \
                 floor-modified transform is report-only"
            )));
        }
        Ok(())
    }
}

/// H(h, beta). The floor-modified flavor evaluates its restricted transform
/// at the pinned floor energy regardless of `h` (which must still be a
/// valid positive energy), and is -inf when either kick never goes
/// negative.
pub fn hamiltonian(eh: &EdgeHamiltonian, h: f64, beta: f64) -> Result<f64> {
    let c = eh.coefficient(h)?;
    match eh.flavor {
        Flavor::Interior => Ok(c * eh.pair.cumulant(beta)?),
        Flavor::LeafFloorModified => {
            let c_floor = eh.coefficient(eh.floor)?;
            Ok(c_floor * eh.pair.cumulant_restricted_negative(beta)?)
        }
    }
}

/// (dH/dbeta, d2H/dbeta2) at (h, beta); interior flavor only.
pub fn hamiltonian_beta_derivs(eh: &EdgeHamiltonian, h: f64, beta: f64) -> Result<(f64, f64)> {
    eh.require_interior("the beta derivative")?;
    let c = eh.coefficient(h)?;
    let (d1, d2) = eh.pair.cumulant_derivs(beta)?;
    Ok((c * d1, c * d2))
}

/// Open interval of energy slopes with finite Legendre cost at energy `h`:
/// sqrt(2h)/(2D) * (ess inf zeta, ess sup zeta) with zeta = -(xi + eta).
pub fn slope_range(eh: &EdgeHamiltonian, h: f64) -> Result<(f64, f64)> {
    eh.require_interior("the slope range")?;
    let c = eh.coefficient(h)?;
    let (s_lo, s_hi) = eh.pair.support_sum();
    Ok((-c * s_hi, -c * s_lo))
}

/// Point masses of a kick marginal, when it is purely atomic.
fn atoms(spec: &PerturbationSpec) -> Option<Vec<(f64, f64)>> {
    match *spec.family() {
        Family::TwoPoint { x1, p1, x2 } => Some(vec![(x1, p1), (x2, 1.0 - p1)]),
        Family::Uniform { a, b } if a == b => Some(vec![(a, 1.0)]),
        _ => None,
    }
}

/// ln P{xi + eta = target} for purely atomic pairs; `None` when either
/// marginal is continuous or the target carries no mass.
fn sum_atom_log_prob(pair: &KickPair, target: f64) -> Option<f64> {
    let xs = atoms(&pair.xi)?;
    let es = atoms(&pair.eta)?;
    let mut p = 0.0;
    for &(x, px) in &xs {
        for &(e, pe) in &es {
            if x + e == target {
                p += px * pe;
            }
        }
    }
    if p > 0.0 {
        Some(p.ln())
    } else {
        None
    }
}

/// Safeguarded Newton on a bracket lo < hi with f(lo) < 0 < f(hi) and a
/// unique upward crossing inside. `eval` returns (f, f'). Terminates on the
/// raw Newton correction |f/f'|, which estimates the distance to a simple
/// root; measuring the correction before the bracket guard matters, since
/// a bracket end that lands exactly on the root would otherwise reject
/// every later Newton step and stall the iteration on bisection.
fn bracketed_newton<F>(mut eval: F, mut lo: f64, mut hi: f64, label: &str) -> Result<f64>
where
    F: FnMut(f64) -> Result<(f64, f64)>,
{
    let mut beta = 0.5 * (lo + hi);
    for _ in 0..MAX_NEWTON_ITERS {
        let (f, fp) = eval(beta)?;
        if f == 0.0 {
            return Ok(beta);
        }
        if f < 0.0 {
            lo = beta;
        } else {
            hi = beta;
        }
        let raw = if fp > 0.0 { f / fp } else { f64::NAN };
        if raw.is_finite() && raw.abs() <= ROOT_TOL * (1.0 + beta.abs()) {
            let polished = beta - raw;
            return Ok(if polished > lo && polished < hi {
                polished
            } else {
                beta
            });
        }
        let mut next = beta - raw;
        if !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        if next == beta {
            // Bracket collapsed to adjacent floats around the root.
            return Ok(beta);
        }
        beta = next;
    }
    Err(Error::RootSolve(format!("{label}: Newton stalled near beta = {beta}")))
}

/// Solve dH/dbeta = alpha for alpha strictly inside the open slope range.
/// Returns (beta, K0(beta), K0'(beta)).
fn solve_adjoint(pair: &KickPair, c: f64, alpha: f64) -> Result<(f64, f64, f64)> {
    let target = alpha / c;
    let g = |beta: f64| -> Result<(f64, f64)> {
        let (d1, d2) = pair.cumulant_derivs(beta)?;
        Ok((d1 - target, d2))
    };
    let (g0, _) = g(0.0)?;
    if g0 == 0.0 {
        return Ok((0.0, 0.0, target));
    }
    // Expand a bracket away from 0 in the root's direction; dH/dbeta is
    // strictly increasing, so the first sign change brackets the root.
    let dir = if g0 < 0.0 { 1.0 } else { -1.0 };
    let (mut lo, mut glo) = (0.0, g0);
    let mut width = 1.0;
    let hi;
    loop {
        let b = dir * width;
        let (gb, _) = g(b)?;
        if glo.signum() != gb.signum() || gb == 0.0 {
            hi = b;
            break;
        }
        lo = b;
        glo = gb;
        width *= 2.0;
        if width > BETA_BRACKET_CAP {
            return Err(Error::RootSolve(format!(
                "adjoint bracket exceeded |beta| = {BETA_BRACKET_CAP:e} for \
                 slope/rate = {target}; the slope is numerically at the \
                 range boundary"
            )));
        }
    }
    // g is increasing, so ordering the bracket by value restores
    // g(lo) < 0 < g(hi).
    let (lo, hi) = (lo.min(hi), lo.max(hi));
    let beta = bracketed_newton(g, lo, hi, "adjoint solve")?;
    let k0 = pair.cumulant(beta)?;
    let (d1, _) = pair.cumulant_derivs(beta)?;
    Ok((beta, k0, d1))
}

/// L(h, alpha) = sup_beta (alpha beta - H(h, beta)) together with the
/// maximizing beta. Outside the open slope range the value is +inf (with a
/// signed infinite adjoint), except exactly at a boundary carried by an
/// atom of xi + eta, where the supremum is the finite limit
/// -sqrt(2h)/(2D) * ln P{atom}.
pub fn legendre(eh: &EdgeHamiltonian, h: f64, alpha: f64) -> Result<(f64, f64)> {
    eh.require_interior("the Legendre transform")?;
    let c = eh.coefficient(h)?;
    if !alpha.is_finite() {
        return Err(Error::Config(format!("slope must be finite, got {alpha}")));
    }
    let (s_lo, s_hi) = eh.pair.support_sum();
    let (a_lo, a_hi) = (-c * s_hi, -c * s_lo);
    if a_lo == a_hi {
        // Both kicks degenerate: the only feasible slope is the drift.
        let scale = alpha.abs().max(a_hi.abs()).max(1e-300);
        if (alpha - a_hi).abs() <= 1e-9 * scale {
            return Ok((0.0, 0.0));
        }
        return Ok((
            f64::INFINITY,
            if alpha > a_hi { f64::INFINITY } else { f64::NEG_INFINITY },
        ));
    }
    if alpha >= a_hi {
        if alpha == a_hi {
            if let Some(lp) = sum_atom_log_prob(&eh.pair, s_lo) {
                return Ok((-c * lp, f64::INFINITY));
            }
        }
        return Ok((f64::INFINITY, f64::INFINITY));
    }
    if alpha <= a_lo {
        if alpha == a_lo {
            if let Some(lp) = sum_atom_log_prob(&eh.pair, s_hi) {
                return Ok((-c * lp, f64::NEG_INFINITY));
            }
        }
        return Ok((f64::INFINITY, f64::NEG_INFINITY));
    }
    let (beta, k0, _) = solve_adjoint(&eh.pair, c, alpha)?;
    // beta = 0 is always feasible and gives alpha*0 - H(h,0) = 0, so the
    // supremum is nonnegative; the max guards round-off at the drift slope.
    Ok(((alpha * beta - c * k0).max(0.0), beta))
}

/// 5-point Gauss value of `f` over [a, b].
fn gauss5<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    quad::gl5().integrate(|x| f(x), a, b)
}

/// Bisection-refined Gauss integration; +inf once any refinement is
/// infinite, NaN (solver failure) propagated.
fn adaptive_action<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    if whole.is_nan() {
        return f64::NAN;
    }
    if whole.is_infinite() {
        return f64::INFINITY;
    }
    let m = 0.5 * (a + b);
    let left = gauss5(f, a, m);
    let right = gauss5(f, m, b);
    if left.is_nan() || right.is_nan() {
        return f64::NAN;
    }
    if left.is_infinite() || right.is_infinite() {
        return f64::INFINITY;
    }
    let sum = left + right;
    if (sum - whole).abs() <= tol || depth == 0 {
        return sum;
    }
    let l = adaptive_action(f, a, m, left, 0.5 * tol, depth - 1);
    let r = adaptive_action(f, m, b, right, 0.5 * tol, depth - 1);
    l + r
}

/// Integrate s -> L(h(s), hdot(s)) over [t0, t1], with endpoint feasibility
/// checks (the slope range shrinks with sqrt(h), so an endpoint is always
/// among the tightest points of a monotone segment).
fn segment_action<H, A>(eh: &EdgeHamiltonian, h_of: H, slope_of: A, t0: f64, t1: f64) -> Result<f64>
where
    H: Fn(f64) -> f64,
    A: Fn(f64) -> f64,
{
    if t1 <= t0 {
        return Err(Error::Config(format!(
            "segment times must increase, got [{t0}, {t1}]"
        )));
    }
    for t in [t0, t1] {
        let (l, _) = legendre(eh, h_of(t), slope_of(t))?;
        if l.is_infinite() {
            return Ok(f64::INFINITY);
        }
    }
    let integrand = |t: f64| -> f64 {
        match legendre(eh, h_of(t), slope_of(t)) {
            Ok((l, _)) => l,
            Err(_) => f64::NAN,
        }
    };
    let whole = gauss5(&integrand, t0, t1);
    let v = adaptive_action(&integrand, t0, t1, whole, ACTION_REFINE_TOL, MAX_ADAPT_DEPTH);
    if v.is_nan() {
        return Err(Error::RootSolve(
            "adjoint solve failed inside an action integral".into(),
        ));
    }
    Ok(v)
}

/// Action of a graph limit-path: sum over segments of the integrated
/// Legendre cost of the segment's own energy slope. Relaxation segments
/// follow the drift, so their cost vanishes; the value is +inf as soon as
/// any segment's slope leaves the finite-cost range.
pub fn action(graph: &WellGraph, path: &GraphPath) -> Result<f64> {
    let mut total = 0.0;
    for seg in &path.segments {
        let eh = EdgeHamiltonian::interior(graph, seg.edge);
        let kappa = seg.drift.m / (2.0 * std::f64::consts::SQRT_2 * seg.drift.d);
        let h_start = seg.h_start;
        let t_start = seg.t_start;
        let h_of = move |t: f64| {
            let r = (h_start.sqrt() - kappa * (t - t_start)).max(0.0);
            r * r
        };
        let slope_of = move |t: f64| {
            let r = (h_start.sqrt() - kappa * (t - t_start)).max(0.0);
            -2.0 * kappa * r
        };
        if seg.t_end <= seg.t_start {
            continue;
        }
        total += segment_action(&eh, h_of, slope_of, seg.t_start, seg.t_end)?;
        if total.is_infinite() {
            return Ok(f64::INFINITY);
        }
    }
    Ok(total)
}

/// Action of a piecewise-linear energy path on a single edge, given as
/// (time, energy) knots with strictly increasing times and positive
/// energies.
pub fn linear_action(eh: &EdgeHamiltonian, knots: &[(f64, f64)]) -> Result<f64> {
    if knots.len() < 2 {
        return Err(Error::Config("a path needs at least two knots".into()));
    }
    for w in knots.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(Error::Config(format!(
                "knot times must strictly increase, got {} then {}",
                w[0].0, w[1].0
            )));
        }
    }
    for &(t, h) in knots {
        if !(h > 0.0) || !h.is_finite() || !t.is_finite() {
            return Err(Error::Config(format!("invalid knot ({t}, {h})")));
        }
    }
    let mut total = 0.0;
    for w in knots.windows(2) {
        let (t0, h0) = w[0];
        let (t1, h1) = w[1];
        let alpha = (h1 - h0) / (t1 - t0);
        let h_of = move |t: f64| h0 + alpha * (t - t0);
        let slope_of = move |_t: f64| alpha;
        total += segment_action(eh, h_of, slope_of, t0, t1)?;
        if total.is_infinite() {
            return Ok(f64::INFINITY);
        }
    }
    Ok(total)
}

/// The unique beta > 0 with K0(beta) = 0. Exists when the kick sum takes
/// negative values with positive probability (K0 starts at 0 with negative
/// slope, is strictly convex, and grows without bound).
pub fn uphill_root(eh: &EdgeHamiltonian) -> Result<f64> {
    let pair = &eh.pair;
    let (s_lo, _) = pair.support_sum();
    if !(s_lo < 0.0) {
        return Err(Error::Hypothesis(
            "the kick sum is never negative, so no uphill motion is \
             possible through this edge (quasi-potential +inf)"
            .into(),
        ));
    }
    // Find a seed with K0 < 0 strictly right of the trivial root at 0.
    let mut seed = 1e-3;
    let mut k_seed = pair.cumulant(seed)?;
    let mut shrink = 0;
    while k_seed >= 0.0 && shrink < 40 {
        seed /= 1024.0;
        k_seed = pair.cumulant(seed)?;
        shrink += 1;
    }
    if k_seed >= 0.0 {
        return Err(Error::RootSolve(
            "could not seed the uphill root below the trivial zero".into(),
        ));
    }
    let mut lo = seed;
    let mut hi = seed;
    loop {
        hi *= 2.0;
        if hi > BETA_BRACKET_CAP {
            return Err(Error::RootSolve(format!(
                "uphill root exceeds beta = {BETA_BRACKET_CAP:e}"
            )));
        }
        let k = pair.cumulant(hi)?;
        if k > 0.0 {
            break;
        }
        lo = hi;
    }
    // The transform is convex and negative at lo > 0, so (lo, hi) brackets
    // its unique upward crossing away from the trivial root at 0.
    bracketed_newton(
        |beta| {
            let k = pair.cumulant(beta)?;
            let (d1, _) = pair.cumulant_derivs(beta)?;
            Ok((k, d1))
        },
        lo,
        hi,
        "uphill root",
    )
}

/// Quasi-potential between two adjacent vertices of the well graph:
/// beta* times the energy gap when climbing (child vertex to its parent),
/// exactly 0 when descending, +inf when the child edge admits no uphill
/// motion.
pub fn adjacent_quasipotential(graph: &WellGraph, from: usize, to: usize) -> Result<f64> {
    let climb = graph.edge(from).parent == Some(to);
    let descend = graph.edge(to).parent == Some(from);
    if !climb && !descend {
        return Err(Error::Config(format!(
            "{} and {} are not adjacent on the well graph",
            graph.vertex_label(from),
            graph.vertex_label(to)
        )));
    }
    if descend {
        return Ok(0.0);
    }
    let child = graph.edge(from);
    let eh = EdgeHamiltonian::interior(graph, from);
    match uphill_root(&eh) {
        Ok(beta_star) => Ok(beta_star * (child.h_top - child.h_bot)),
        Err(Error::Hypothesis(_)) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Where a rate-table entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Computed,
    UserSupplied,
}

#[derive(Debug, Clone, Serialize)]
pub struct RateEntry {
    pub from: usize,
    pub to: usize,
    pub from_label: String,
    pub to_label: String,
    pub value: f64,
    pub provenance: Provenance,
}

/// Quasi-potentials for every ordered adjacent vertex pair of a graph.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RateTable {
    pub entries: Vec<RateEntry>,
}

impl RateTable {
    /// Closed-form table over all adjacent pairs: climbs cost
    /// beta* * gap, descents cost zero.
    pub fn compute(graph: &WellGraph) -> Result<RateTable> {
        let mut entries = Vec::new();
        for e in graph.edges() {
            let Some(p) = e.parent else { continue };
            for (from, to) in [(e.index, p), (p, e.index)] {
                entries.push(RateEntry {
                    from,
                    to,
                    from_label: graph.vertex_label(from),
                    to_label: graph.vertex_label(to),
                    value: adjacent_quasipotential(graph, from, to)?,
                    provenance: Provenance::Computed,
                });
            }
        }
        Ok(RateTable { entries })
    }

    pub fn get(&self, from: usize, to: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.from == from && e.to == to)
            .map(|e| e.value)
    }

    /// Install a user-supplied value for one adjacent ordered pair,
    /// replacing any existing entry. Descending entries must stay zero and
    /// climbs nonnegative.
    pub fn set(&mut self, graph: &WellGraph, from: usize, to: usize, value: f64) -> Result<()> {
        let climb = graph.edge(from).parent == Some(to);
        let descend = graph.edge(to).parent == Some(from);
        if !climb && !descend {
            return Err(Error::Config(format!(
                "{} and {} are not adjacent on the well graph",
                graph.vertex_label(from),
                graph.vertex_label(to)
            )));
        }
        if descend && value != 0.0 {
            return Err(Error::Config(format!(
                "descending quasi-potential {} -> {} must be 0, got {value}",
                graph.vertex_label(from),
                graph.vertex_label(to)
            )));
        }
        if value < 0.0 || value.is_nan() {
            return Err(Error::Config(format!(
                "quasi-potentials are nonnegative, got {value}"
            )));
        }
        let entry = RateEntry {
            from,
            to,
            from_label: graph.vertex_label(from),
            to_label: graph.vertex_label(to),
            value,
            provenance: Provenance::UserSupplied,
        };
        if let Some(slot) = self
            .entries
            .iter_mut()
            .find(|e| e.from == from && e.to == to)
        {
            *slot = entry;
        } else {
            self.entries.push(entry);
        }
        Ok(())
    }

    pub fn is_complete(&self, graph: &WellGraph) -> bool {
        graph.edges().iter().all(|e| match e.parent {
            None => true,
            Some(p) => self.get(e.index, p).is_some() && self.get(p, e.index).is_some(),
        })
    }
}

/// All-pairs quasi-potentials over the vertex adjacency of the graph.
#[derive(Debug, Clone, Serialize)]
pub struct PairwiseV {
    pub labels: Vec<String>,
    /// v[from][to]; +inf marks unreachable pairs.
    pub v: Vec<Vec<f64>>,
    #[serde(skip)]
    next: Vec<Vec<Option<usize>>>,
}

impl PairwiseV {
    pub fn value(&self, from: usize, to: usize) -> f64 {
        self.v[from][to]
    }

    /// Vertex sequence of a minimizing route, inclusive of endpoints.
    pub fn route(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        if self.v[from][to].is_infinite() {
            return None;
        }
        let mut route = vec![from];
        let mut at = from;
        while at != to {
            at = self.next[at][to]?;
            route.push(at);
            if route.len() > self.v.len() {
                return None;
            }
        }
        Some(route)
    }
}

/// Minimal summed quasi-potential over vertex paths, for every ordered
/// pair. Costs are nonnegative, so a Floyd-Warshall sweep suffices at the
/// graph sizes at hand; strict-improvement updates keep routes
/// deterministic.
pub fn pairwise_quasipotential(graph: &WellGraph, table: &RateTable) -> Result<PairwiseV> {
    let n = graph.edge_count();
    let mut v = vec![vec![f64::INFINITY; n]; n];
    let mut next: Vec<Vec<Option<usize>>> = vec![vec![None; n]; n];
    for e in table.entries.iter() {
        if e.value < 0.0 || e.value.is_nan() {
            return Err(Error::Config(format!(
                "quasi-potentials are nonnegative, got {} for {} -> {}",
                e.value, e.from_label, e.to_label
            )));
        }
        v[e.from][e.to] = e.value;
        next[e.from][e.to] = Some(e.to);
    }
    for e in graph.edges() {
        if let Some(p) = e.parent {
            if next[e.index][p].is_none() || next[p][e.index].is_none() {
                return Err(Error::Config(format!(
                    "rate table is missing the adjacent pair {} / {}",
                    graph.vertex_label(e.index),
                    graph.vertex_label(p)
                )));
            }
        }
    }
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 0.0;
        next[i][i] = Some(i);
    }
    for k in 0..n {
        for i in 0..n {
            if v[i][k].is_infinite() {
                continue;
            }
            for j in 0..n {
                let alt = v[i][k] + v[k][j];
                if alt < v[i][j] {
                    v[i][j] = alt;
                    next[i][j] = next[i][k];
                }
            }
        }
    }
    Ok(PairwiseV {
        labels: (0..n).map(|i| graph.vertex_label(i)).collect(),
        v,
        next,
    })
}

/// Result of the variational climb minimization.
#[derive(Debug, Clone, Serialize)]
pub struct PathMinimum {
    pub value: f64,
    pub duration: f64,
    /// (time, energy) knots of the best path found.
    pub knots: Vec<(f64, f64)>,
    pub evaluations: u64,
    pub converged: bool,
}

/// Golden-section minimum of a convex function on [a, b].
fn golden_min<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, evals: &mut u64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    *evals += 2;
    while (b - a) > DURATION_TOL * (a.abs() + b.abs()) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        *evals += 1;
    }
    let mid = 0.5 * (a + b);
    let fm = f(mid);
    *evals += 1;
    if fm <= fc && fm <= fd {
        (mid, fm)
    } else if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Variational infimum of the action over monotone piecewise-linear energy
/// climbs from `h_a` to `h_b`: energy knots fixed uniformly in sqrt(h),
/// each segment's duration minimized independently (the total duration is
/// free, so the per-segment costs decouple and each one is convex in its
/// duration). `duration_grid` controls the log-spaced bracket scan that
/// seeds the golden-section search. Never fails on feasible input: returns
/// the best value found with diagnostics, or +inf when no climb is
/// possible.
pub fn minimize_path(
    eh: &EdgeHamiltonian,
    h_a: f64,
    h_b: f64,
    segments: usize,
    duration_grid: usize,
) -> Result<PathMinimum> {
    eh.require_interior("path minimization")?;
    if !(h_a > 0.0) || !(h_b > h_a) || !h_b.is_finite() {
        return Err(Error::Config(format!(
            "climb needs 0 < h_a < h_b, got [{h_a}, {h_b}]"
        )));
    }
    if segments < 1 {
        return Err(Error::Config("segments must be at least 1".into()));
    }
    if duration_grid < 8 {
        return Err(Error::Config("duration_grid must be at least 8".into()));
    }
    let r_a = h_a.sqrt();
    let r_b = h_b.sqrt();
    let knots_h: Vec<f64> = (0..=segments)
        .map(|k| {
            let r = r_a + (r_b - r_a) * k as f64 / segments as f64;
            r * r
        })
        .collect();
    let (s_lo, _) = eh.pair.support_sum();
    let zeta_hi = -s_lo;
    if !(zeta_hi > 0.0) {
        // No energy-raising kicks at all: every climb has infinite action.
        return Ok(PathMinimum {
            value: f64::INFINITY,
            duration: f64::INFINITY,
            knots: vec![(0.0, h_a), (f64::INFINITY, h_b)],
            evaluations: 0,
            converged: true,
        });
    }
    // Duration scale hint: the cheapest climb moves at the beta*-tilted
    // drift when it exists, and at half the maximal slope otherwise.
    let zeta_rate = match uphill_root(eh) {
        Ok(beta_star) => eh.pair.cumulant_derivs(beta_star)?.0,
        Err(Error::Hypothesis(_)) => 0.5 * zeta_hi,
        Err(e) => return Err(e),
    };
    let mut evaluations = 0u64;
    let mut converged = true;
    let mut total = 0.0;
    let mut durations = Vec::with_capacity(segments);
    for k in 0..segments {
        let (h_lo, h_hi) = (knots_h[k], knots_h[k + 1]);
        let dh = h_hi - h_lo;
        let alpha_of = |tau: f64| dh / tau;
        let mut cost = |tau: f64| -> f64 {
            let alpha = alpha_of(tau);
            let h_of = move |t: f64| h_lo + alpha * t;
            let slope_of = move |_t: f64| alpha;
            match segment_action(eh, h_of, slope_of, 0.0, tau) {
                Ok(v) => v,
                Err(_) => f64::NAN,
            }
        };
        let c_mid = (2.0 * (0.5 * (h_lo + h_hi))).sqrt() / (2.0 * eh.d);
        let tau_hint = dh / (c_mid * zeta_rate);
        let mut lo = tau_hint / 64.0;
        let mut hi = tau_hint * 64.0;
        let (mut best_i, mut best_tau, mut best_v);
        let mut expansions = 0;
        loop {
            let ratio = (hi / lo).ln();
            best_i = usize::MAX;
            best_tau = tau_hint;
            best_v = f64::INFINITY;
            for i in 0..duration_grid {
                let tau = lo * (ratio * i as f64 / (duration_grid - 1) as f64).exp();
                let v = cost(tau);
                evaluations += 1;
                if v.is_nan() {
                    continue;
                }
                if v < best_v {
                    best_v = v;
                    best_tau = tau;
                    best_i = i;
                }
            }
            if best_i == usize::MAX {
                // Nothing finite in the bracket; push to longer durations
                // (gentler slopes are always eventually feasible).
                lo = hi;
                hi *= 4096.0;
            } else if best_i == 0 {
                hi = lo * 4.0;
                lo /= 4096.0;
            } else if best_i == duration_grid - 1 {
                lo = hi / 4.0;
                hi *= 4096.0;
            } else {
                break;
            }
            expansions += 1;
            if expansions > 6 {
                converged = false;
                break;
            }
        }
        let (tau_star, v_star) = if best_i == usize::MAX || best_i == 0 || best_i == duration_grid - 1
        {
            (best_tau, best_v)
        } else {
            let ratio = (hi / lo).ln();
            let step = ratio / (duration_grid - 1) as f64;
            let a = lo * (step * (best_i - 1) as f64).exp();
            let b = lo * (step * (best_i + 1) as f64).exp();
            let (t, v) = golden_min(&mut cost, a, b, &mut evaluations);
            if v.is_nan() || v > best_v {
                (best_tau, best_v)
            } else {
                (t, v)
            }
        };
        durations.push(tau_star);
        total += v_star;
    }
    let mut t = 0.0;
    let mut knots = Vec::with_capacity(segments + 1);
    knots.push((0.0, knots_h[0]));
    for (k, tau) in durations.iter().enumerate() {
        t += tau;
        knots.push((t, knots_h[k + 1]));
    }
    Ok(PathMinimum {
        value: total,
        duration: t,
        knots,
        evaluations,
        converged,
    })
}

/// One kick marginal under the exponential tilt that reweights the pair
/// toward energy gain: acceptance weight exp(-beta (x - anchor)) against
/// draws from the base law, with the anchor at the support end where the
/// weight peaks, so the envelope constant is exactly 1.
#[derive(Debug, Clone)]
pub struct TiltedMarginal {
    spec: PerturbationSpec,
    beta: f64,
    /// Marginal transform ln E exp(-beta x) at the tilt.
    k_marginal: f64,
    anchor: f64,
    log_efficiency: f64,
}

impl TiltedMarginal {
    fn new(spec: &PerturbationSpec, beta: f64) -> Result<Self> {
        if matches!(spec.family(), Family::TwoPoint { .. }) {
            return Err(Error::SamplingUnsupported(
                "two-point-test kicks cannot drive the tilted sampler".into(),
            ));
        }
        if !beta.is_finite() {
            return Err(Error::Config(format!("tilt must be finite, got {beta}")));
        }
        let (lo, hi) = spec.support();
        let anchor = if beta >= 0.0 { lo } else { hi };
        let k_marginal = spec.log_mgf_neg(beta)?;
        let log_efficiency = k_marginal + beta * anchor;
        if log_efficiency < MIN_TILT_EFFICIENCY.ln() {
            return Err(Error::Envelope(log_efficiency.exp()));
        }
        Ok(TiltedMarginal {
            spec: spec.clone(),
            beta,
            k_marginal,
            anchor,
            log_efficiency,
        })
    }

    /// Expected acceptance rate of the rejection loop.
    pub fn efficiency(&self) -> f64 {
        self.log_efficiency.exp()
    }

    pub fn sample(&self, stream: &mut Stream) -> Result<f64> {
        if self.beta == 0.0 {
            // Identity tilt: defer to the base sampler draw-for-draw.
            return self.spec.sample(stream);
        }
        for _ in 0..MAX_REJECTION_ATTEMPTS {
            let x = self.spec.sample(stream)?;
            let log_accept = -self.beta * (x - self.anchor);
            if log_accept >= 0.0 || stream.uniform01() < log_accept.exp() {
                return Ok(x);
            }
        }
        Err(Error::Numeric(format!(
            "rejection sampler made no progress in {MAX_REJECTION_ATTEMPTS} attempts"
        )))
    }

    /// log dP/dP_tilted for one accepted draw; summing these over a
    /// trajectory's kicks gives the replica's likelihood-ratio exponent.
    pub fn log_lr(&self, x: f64) -> f64 {
        self.beta * x + self.k_marginal
    }
}

/// Joint tilt of a kick pair: the law of zeta = -(xi + eta) reweighted by
/// exp(beta zeta - K0(beta)), realized marginal-by-marginal (independence
/// factorizes the tilt).
#[derive(Debug, Clone)]
pub struct TiltedSampler {
    pub beta: f64,
    /// K0(beta) of the pair.
    pub k0: f64,
    xi: TiltedMarginal,
    eta: TiltedMarginal,
}

pub fn tilted_sampler(pair: &KickPair, beta: f64) -> Result<TiltedSampler> {
    Ok(TiltedSampler {
        beta,
        k0: pair.cumulant(beta)?,
        xi: TiltedMarginal::new(&pair.xi, beta)?,
        eta: TiltedMarginal::new(&pair.eta, beta)?,
    })
}

impl TiltedSampler {
    pub fn sample_pair(&self, stream: &mut Stream) -> Result<(f64, f64)> {
        Ok((self.xi.sample(stream)?, self.eta.sample(stream)?))
    }

    pub fn sample_side(&self, side: Side, stream: &mut Stream) -> Result<f64> {
        match side {
            Side::Left => self.xi.sample(stream),
            Side::Right => self.eta.sample(stream),
        }
    }

    pub fn log_lr_side(&self, side: Side, x: f64) -> f64 {
        match side {
            Side::Left => self.xi.log_lr(x),
            Side::Right => self.eta.log_lr(x),
        }
    }

    /// log dP/dP_tilted for a full left/right kick pair.
    pub fn log_lr_pair(&self, xi: f64, eta: f64) -> f64 {
        self.xi.log_lr(xi) + self.eta.log_lr(eta)
    }

    /// Mean of zeta = -(xi + eta) under the tilt: K0'(beta).
    pub fn mean_zeta(&self, pair: &KickPair) -> Result<f64> {
        Ok(pair.cumulant_derivs(self.beta)?.0)
    }

    pub fn efficiencies(&self) -> (f64, f64) {
        (self.xi.efficiency(), self.eta.efficiency())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RareMethod {
    Naive,
    Tilted,
}

impl fmt::Display for RareMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RareMethod::Naive => "naive",
            RareMethod::Tilted => "tilted",
        })
    }
}

impl FromStr for RareMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(RareMethod::Naive),
            "tilted" => Ok(RareMethod::Tilted),
            other => Err(Error::Config(format!(
                "unknown rare-event method '{other}' (naive | tilted)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RareEventEstimate {
    pub method: RareMethod,
    pub probability: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Exact 95% upper bound, reported when a naive run scores zero hits.
    pub upper95: Option<f64>,
    /// -epsilon * ln(probability); +inf when the estimate is zero.
    pub log_rate: f64,
    pub hits: u64,
    pub replicas: u64,
    /// Tilt used by the tilted method.
    pub beta_star: Option<f64>,
    pub mean_collisions: f64,
}

/// Probability that the piecewise-linear energy `H-hat` exceeds
/// `h0 + delta_h` somewhere before the rescaled `horizon`, started from the
/// middle of `edge` at energy `h0`. Naive replicas count raw frequencies;
/// tilted replicas draw every kick from the beta*-tilted law of the
/// pre-collision edge and reweight by the accumulated likelihood ratio,
/// stopping at the first crossing so the weight is the stopped ratio.
#[allow(clippy::too_many_arguments)]
pub fn rare_event_probability(
    graph: &WellGraph,
    edge: usize,
    h0: f64,
    delta_h: f64,
    horizon: f64,
    epsilon: f64,
    method: RareMethod,
    replicas: u64,
    max_collisions: u64,
    streams: &Streams,
    stream_base: u64,
) -> Result<RareEventEstimate> {
    validate_kick_scale(graph, epsilon)?;
    if edge >= graph.edge_count() {
        return Err(Error::Config(format!("edge {edge} out of range")));
    }
    if !(horizon > 0.0) || replicas == 0 {
        return Err(Error::Config(
            "rare-event estimation needs a positive horizon and at least one replica".into(),
        ));
    }
    if !(delta_h >= 0.0) {
        return Err(Error::Config(format!(
            "energy gap must be nonnegative, got {delta_h}"
        )));
    }
    let e = graph.edge(edge);
    let q0 = 0.5 * (e.x_left + e.x_right);
    let threshold = h0 + delta_h;
    if threshold > graph.energy_cap() {
        return Err(Error::Config(format!(
            "event threshold {threshold} is above the energy cap {}",
            graph.energy_cap()
        )));
    }
    {
        let probe = ParticleState::new(graph, h0, q0, 1)?;
        if probe.edge != edge {
            return Err(Error::Config(format!(
                "energy {h0} lies outside the interval of {}",
                graph.vertex_label(edge)
            )));
        }
    }
    let beta_star = match method {
        RareMethod::Naive => None,
        RareMethod::Tilted => Some(uphill_root(&EdgeHamiltonian::interior(graph, edge))?),
    };
    if delta_h == 0.0 {
        // The supremum includes t = 0, where H-hat = h0 already meets the
        // threshold.
        return Ok(RareEventEstimate {
            method,
            probability: 1.0,
            se: 0.0,
            ci_lo: 1.0,
            ci_hi: 1.0,
            upper95: None,
            log_rate: 0.0,
            hits: replicas,
            replicas,
            beta_star,
            mean_collisions: 0.0,
        });
    }
    let natural_end = horizon / epsilon;
    let mut samplers: Vec<Option<TiltedSampler>> = vec![None; graph.edge_count()];
    let mut sum_w = 0.0;
    let mut sum_w2 = 0.0;
    let mut hits = 0u64;
    let mut collisions_total = 0u64;
    for r in 0..replicas {
        let mut stream = streams.stream(stream_base + r);
        let mut state = ParticleState::new(graph, h0, q0, 1)?;
        let mut log_lr = 0.0;
        let mut collisions = 0u64;
        let weight = loop {
            let (dt, _) = state.time_to_next_wall(graph);
            if state.natural_time + dt > natural_end {
                break 0.0;
            }
            if collisions >= max_collisions {
                return Err(Error::Numeric(format!(
                    "collision budget {max_collisions} exhausted before the horizon; \
                     raise the budget or lower the horizon"
                )));
            }
            let side = state.fly_to_wall(graph);
            let pre = state.edge;
            let kick = match beta_star {
                None => match side {
                    Side::Left => graph.kick(pre).xi.sample(&mut stream)?,
                    Side::Right => graph.kick(pre).eta.sample(&mut stream)?,
                },
                Some(beta) => {
                    if samplers[pre].is_none() {
                        samplers[pre] = Some(tilted_sampler(graph.kick(pre), beta)?);
                    }
                    let sampler = samplers[pre].as_ref().expect("just filled");
                    let x = sampler.sample_side(side, &mut stream)?;
                    log_lr += sampler.log_lr_side(side, x);
                    x
                }
            };
            collisions += 1;
            match state.apply_kick(graph, side, epsilon, kick) {
                Ok((_, h_post)) => {
                    if h_post >= threshold {
                        break log_lr.exp();
                    }
                }
                // Beyond the cap is beyond the threshold; the kick's
                // likelihood ratio is already accumulated.
                Err(Error::CapExceeded { .. }) => break log_lr.exp(),
                Err(err) => return Err(err),
            }
        };
        collisions_total += collisions;
        if weight > 0.0 {
            hits += 1;
        }
        sum_w += weight;
        sum_w2 += weight * weight;
    }
    let n = replicas as f64;
    let p = sum_w / n;
    let var = ((sum_w2 / n - p * p) / n).max(0.0);
    let se = var.sqrt();
    let upper95 = if method == RareMethod::Naive && hits == 0 {
        Some(1.0 - 0.05f64.powf(1.0 / n))
    } else {
        None
    };
    Ok(RareEventEstimate {
        method,
        probability: p,
        se,
        ci_lo: (p - Z95 * se).max(0.0),
        ci_hi: p + Z95 * se,
        upper95,
        log_rate: -epsilon * p.ln(),
        hits,
        replicas,
        beta_star,
        mean_collisions: collisions_total as f64 / n,
    })
}
