//! The limiting slow motion on the merge tree.
//!
//! As kicks shrink, the rescaled energy on one edge follows a deterministic
//! decay: each collision pair removes `m = E[xi] + E[eta]` of energy and one
//! oscillation period lasts `T(H) = 2 D / sqrt(2H)`, so
//!
//! ```text
//!     dH/dt = -m / T(H),   with sqrt(H(t)) affine in t.
//! ```
//!
//! At an interior vertex the limit motion enters one of the two children
//! and continues; the whole path is a concatenation of closed-form
//! segments, with randomness confined to the branch choices.

use crate::error::{Error, Result};
use crate::microsim::TrajectoryRecord;
use crate::stream::Stream;
use crate::topology::WellGraph;
use std::collections::BTreeMap;

/// Left-branch probability per interior edge index.
pub type BranchMap = BTreeMap<usize, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChildSide {
    Left,
    Right,
}

/// Decay parameters of one edge: mean dissipation per collision pair and
/// well width.
#[derive(Debug, Clone, Copy)]
pub struct EdgeDrift {
    pub edge: usize,
    pub m: f64,
    pub d: f64,
}

const SQRT_8: f64 = 2.0 * std::f64::consts::SQRT_2;

impl EdgeDrift {
    pub fn from_graph(graph: &WellGraph, edge: usize) -> Self {
        EdgeDrift {
            edge,
            m: graph.kick(edge).mean_sum(),
            d: graph.edge(edge).width(),
        }
    }

    /// Oscillation period at energy `h`.
    pub fn period(&self, h: f64) -> f64 {
        2.0 * self.d / (2.0 * h).sqrt()
    }

    /// Closed-form decayed energy after rescaled time `t` from `h_start`.
    pub fn energy_at(&self, h_start: f64, t: f64) -> f64 {
        let r = h_start.sqrt() - t * self.m / (SQRT_8 * self.d);
        let r = r.max(0.0);
        r * r
    }

    /// Rescaled time to decay from `h_start` to `h_end`.
    pub fn duration(&self, h_start: f64, h_end: f64) -> Result<f64> {
        if h_end > h_start {
            return Err(Error::Config(format!(
                "averaged motion is downhill only: {h_start} -> {h_end}"
            )));
        }
        Ok(SQRT_8 * self.d * (h_start.sqrt() - h_end.sqrt()) / self.m)
    }
}

/// One closed-form decay segment of a limit path.
#[derive(Debug, Clone)]
pub struct PathSegment {
    pub edge: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub h_start: f64,
    pub h_end: f64,
    pub drift: EdgeDrift,
}

impl PathSegment {
    pub fn h_at(&self, t: f64) -> f64 {
        self.drift.energy_at(self.h_start, (t - self.t_start).max(0.0))
    }
}

/// A limit trajectory: deterministic inside edges, branching at vertices.
#[derive(Debug, Clone)]
pub struct GraphPath {
    pub segments: Vec<PathSegment>,
}

impl GraphPath {
    pub fn duration(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.t_end)
    }

    /// Energy at rescaled time `t`, held constant after the final floor.
    pub fn h_at(&self, t: f64) -> f64 {
        for s in &self.segments {
            if t <= s.t_end {
                return s.h_at(t);
            }
        }
        self.segments.last().map_or(f64::NAN, |s| s.h_end)
    }

    pub fn edge_at(&self, t: f64) -> usize {
        for s in &self.segments {
            if t <= s.t_end {
                return s.edge;
            }
        }
        self.segments.last().map_or(usize::MAX, |s| s.edge)
    }

    /// (time, energy) at segment boundaries.
    pub fn breakpoints(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = self
            .segments
            .iter()
            .map(|s| (s.t_start, s.h_start))
            .collect();
        if let Some(last) = self.segments.last() {
            out.push((last.t_end, last.h_end));
        }
        out
    }

    /// The leaf edge of the final segment.
    pub fn terminal_leaf(&self) -> Option<usize> {
        self.segments.last().map(|s| s.edge)
    }
}

/// Deterministic limit path from `h0` on `start_edge`, taking the supplied
/// child choice at each interior vertex reached, ending at a leaf floor.
pub fn limit_path(
    graph: &WellGraph,
    start_edge: usize,
    h0: f64,
    decisions: &[ChildSide],
) -> Result<GraphPath> {
    let e0 = graph.edge(start_edge);
    if !(h0 >= e0.h_bot && h0 <= e0.h_top) {
        return Err(Error::Config(format!(
            "start energy {h0} outside the edge interval [{}, {}]",
            e0.h_bot, e0.h_top
        )));
    }
    let mut segments = Vec::new();
    let mut edge = start_edge;
    let mut h = h0;
    let mut t = 0.0;
    let mut next_decision = 0usize;
    loop {
        let e = graph.edge(edge);
        let drift = EdgeDrift::from_graph(graph, edge);
        let h_end = e.h_bot;
        let dt = drift.duration(h, h_end)?;
        segments.push(PathSegment {
            edge,
            t_start: t,
            t_end: t + dt,
            h_start: h,
            h_end,
            drift,
        });
        t += dt;
        h = h_end;
        match e.children {
            None => return Ok(GraphPath { segments }),
            Some((l, r)) => {
                let side = decisions.get(next_decision).ok_or_else(|| {
                    Error::Config(format!(
                        "missing branch decision for vertex {}",
                        graph.vertex_label(edge)
                    ))
                })?;
                next_decision += 1;
                edge = match side {
                    ChildSide::Left => l,
                    ChildSide::Right => r,
                };
            }
        }
    }
}

/// Limit path with branch choices drawn independently at each vertex from
/// `branch`: one uniform draw per vertex visited.
pub fn sample_limit_process(
    graph: &WellGraph,
    start_edge: usize,
    h0: f64,
    branch: &BranchMap,
    stream: &mut Stream,
) -> Result<GraphPath> {
    // Pre-draw decisions along the vertex sequence; the sequence depends
    // on earlier choices, so walk the tree as limit_path would.
    let e0 = graph.edge(start_edge);
    if !(h0 >= e0.h_bot && h0 <= e0.h_top) {
        return Err(Error::Config(format!(
            "start energy {h0} outside the edge interval [{}, {}]",
            e0.h_bot, e0.h_top
        )));
    }
    let mut decisions = Vec::new();
    let mut edge = start_edge;
    while let Some((l, r)) = graph.edge(edge).children {
        let p_left = *branch.get(&edge).ok_or_else(|| {
            Error::Config(format!(
                "no branch probability for vertex {}",
                graph.vertex_label(edge)
            ))
        })?;
        if !(0.0..=1.0).contains(&p_left) {
            return Err(Error::Config(format!(
                "branch probability {p_left} outside [0, 1] at {}",
                graph.vertex_label(edge)
            )));
        }
        let side = if stream.uniform01() < p_left {
            ChildSide::Left
        } else {
            ChildSide::Right
        };
        decisions.push(side);
        edge = match side {
            ChildSide::Left => l,
            ChildSide::Right => r,
        };
    }
    limit_path(graph, start_edge, h0, &decisions)
}

/// Agreement between a simulated record and one limit-path segment.
#[derive(Debug, Clone)]
pub struct SegmentAgreement {
    pub edge: usize,
    pub samples_total: usize,
    pub samples_matched: usize,
    /// Sup of |H_hat - H_limit| over matched samples.
    pub sup_distance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub t: f64,
    pub expected_edge: usize,
    pub actual_edge: usize,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    /// Sup of |H_hat - H_limit| over grid times up to the first vertex
    /// arrival of the limit path.
    pub sup_before_first_vertex: f64,
    /// Conditional per-segment agreement after the first vertex.
    pub per_edge: Vec<SegmentAgreement>,
    pub first_mismatch: Option<Mismatch>,
}

/// Compare a simulated trajectory against a limit path: unconditionally up
/// to the first vertex arrival, then per segment conditioned on the edge
/// matching (branch outcomes are random and may disagree).
pub fn compare(record: &TrajectoryRecord, path: &GraphPath) -> CompareReport {
    let t_first_vertex = path.segments.first().map_or(0.0, |s| s.t_end);
    let mut sup_before: f64 = 0.0;
    for smp in &record.grid {
        if smp.t <= t_first_vertex {
            sup_before = sup_before.max((smp.h_hat - path.h_at(smp.t)).abs());
        }
    }
    let mut per_edge = Vec::new();
    let mut first_mismatch = None;
    for seg in path.segments.iter().skip(1) {
        let mut total = 0usize;
        let mut matched = 0usize;
        let mut sup: Option<f64> = None;
        for smp in &record.grid {
            if smp.t <= seg.t_start || smp.t > seg.t_end {
                continue;
            }
            total += 1;
            if smp.edge == seg.edge {
                matched += 1;
                let d = (smp.h_hat - seg.h_at(smp.t)).abs();
                sup = Some(sup.map_or(d, |s: f64| s.max(d)));
            } else if first_mismatch.is_none() {
                first_mismatch = Some(Mismatch {
                    t: smp.t,
                    expected_edge: seg.edge,
                    actual_edge: smp.edge,
                });
            }
        }
        per_edge.push(SegmentAgreement {
            edge: seg.edge,
            samples_total: total,
            samples_matched: matched,
            sup_distance: sup,
        });
    }
    CompareReport {
        sup_before_first_vertex: sup_before,
        per_edge,
        first_mismatch,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KickPair, PerturbationSpec};
    use crate::microsim;
    use crate::stream::Streams;
    use crate::topology::{build_graph, WellGraph, WellSystem};
    use proptest::prelude::*;

    fn uniform_pair(a: f64, b: f64, c: f64, d: f64) -> KickPair {
        KickPair::new(
            PerturbationSpec::uniform(a, b).unwrap(),
            PerturbationSpec::uniform(c, d).unwrap(),
        )
        .unwrap()
    }

    fn four_leaf_graph() -> WellGraph {
        let sys = WellSystem::new(
            vec![0.0, 1.0, 2.3, 3.9, 5.8],
            vec![1.0, 2.0, 3.0],
            vec![0.2, 0.3, 0.5, 0.4],
            6.0,
            vec![uniform_pair(0.1, 0.3, 0.2, 0.4); 7],
        )
        .unwrap();
        build_graph(&sys).unwrap()
    }

    #[test]
    fn closed_form_direct_substitution() {
        // m = 2 sqrt(2), D = 1: H(t) = (2 - t)^2 from H = 4.
        let drift = EdgeDrift {
            edge: 0,
            m: SQRT_8,
            d: 1.0,
        };
        for &t in &[0.0, 0.25, 0.5, 1.0] {
            let expect = (2.0 - t) * (2.0 - t);
            assert!((drift.energy_at(4.0, t) - expect).abs() < 1e-12);
        }
        assert!((drift.duration(4.0, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(drift.duration(4.0, 4.0).unwrap(), 0.0);
        assert!(drift.duration(1.0, 2.0).is_err());
    }

    /// Independent oracle: integrate dH/dt = -m sqrt(2H) / (2D) with
    /// fixed-step RK4 and compare against the closed form.
    #[test]
    fn closed_form_matches_rk4_integration() {
        let drift = EdgeDrift {
            edge: 0,
            m: 0.37,
            d: 1.3,
        };
        let rhs = |h: f64| -drift.m * (2.0 * h).sqrt() / (2.0 * drift.d);
        let t_end = drift.duration(2.7, 0.9).unwrap();
        let n = 200_000usize;
        let dt = t_end / n as f64;
        let mut h = 2.7;
        for i in 0..n {
            if 2 * i == n {
                let mid = drift.energy_at(2.7, 0.5 * t_end);
                assert!((h - mid).abs() < 1e-10, "midpoint {h} vs {mid}");
            }
            let k1 = rhs(h);
            let k2 = rhs(h + 0.5 * dt * k1);
            let k3 = rhs(h + 0.5 * dt * k2);
            let k4 = rhs(h + dt * k3);
            h += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert!((h - 0.9).abs() < 1e-10, "endpoint {h}");
    }

    #[test]
    fn sqrt_energy_is_affine_in_time() {
        let drift = EdgeDrift {
            edge: 0,
            m: 0.8,
            d: 2.1,
        };
        let f = |t: f64| drift.energy_at(3.0, t).sqrt();
        let (a, b, c) = (f(0.1), f(0.2), f(0.3));
        assert!((a - 2.0 * b + c).abs() < 1e-12);
    }

    #[test]
    fn single_well_path_has_one_segment() {
        let sys = WellSystem::new(
            vec![0.0, 2.0],
            vec![],
            vec![0.5],
            4.0,
            vec![uniform_pair(0.1, 0.3, 0.2, 0.4)],
        )
        .unwrap();
        let g = build_graph(&sys).unwrap();
        let path = limit_path(&g, 0, 3.0, &[]).unwrap();
        assert_eq!(path.segments.len(), 1);
        assert_eq!(path.segments[0].h_end, 0.5);
        let drift = EdgeDrift::from_graph(&g, 0);
        assert!((path.duration() - drift.duration(3.0, 0.5).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn four_leaf_left_left_left_path() {
        let g = four_leaf_graph();
        let h0 = 5.0;
        let path = limit_path(
            &g,
            6,
            h0,
            &[ChildSide::Left, ChildSide::Left, ChildSide::Left],
        )
        .unwrap();
        let edges: Vec<usize> = path.segments.iter().map(|s| s.edge).collect();
        assert_eq!(edges, vec![6, 5, 4, 0]);
        let hs: Vec<f64> = path.breakpoints().iter().map(|&(_, h)| h).collect();
        assert_eq!(hs, vec![5.0, 3.0, 2.0, 1.0, 0.2]);
        let mut total = 0.0;
        for (edge, ha, hb) in [(6, 5.0, 3.0), (5, 3.0, 2.0), (4, 2.0, 1.0), (0, 1.0, 0.2)] {
            total += EdgeDrift::from_graph(&g, edge).duration(ha, hb).unwrap();
        }
        assert!((path.duration() - total).abs() < 1e-12);
        // Energy is continuous across segments.
        for w in path.segments.windows(2) {
            assert_eq!(w[0].h_end, w[1].h_start);
            assert_eq!(w[0].t_end, w[1].t_start);
        }
    }

    #[test]
    fn missing_decision_is_an_error() {
        let g = four_leaf_graph();
        let r = limit_path(&g, 6, 5.0, &[ChildSide::Left]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn forced_left_sampling_is_deterministic() {
        let g = four_leaf_graph();
        let table: BranchMap = [(4, 1.0), (5, 1.0), (6, 1.0)].into_iter().collect();
        let mut s = Streams::from_seed(3).stream(0);
        let path = sample_limit_process(&g, 6, 5.0, &table, &mut s).unwrap();
        assert_eq!(path.terminal_leaf(), Some(0));
    }

    #[test]
    fn terminal_distribution_matches_product_formula() {
        let g = four_leaf_graph();
        let (p1, p5, p6) = (0.3, 0.6, 0.7);
        let table: BranchMap = [(4, p1), (5, p5), (6, p6)].into_iter().collect();
        let expect = [
            p6 * p5 * p1,
            p6 * p5 * (1.0 - p1),
            p6 * (1.0 - p5),
            1.0 - p6,
        ];
        let n = 100_000usize;
        let streams = Streams::from_seed(21);
        let mut counts = [0usize; 4];
        for r in 0..n {
            let mut s = streams.stream(r as u64);
            let path = sample_limit_process(&g, 6, 5.0, &table, &mut s).unwrap();
            counts[path.terminal_leaf().unwrap()] += 1;
        }
        for k in 0..4 {
            let freq = counts[k] as f64 / n as f64;
            let se = (expect[k] * (1.0 - expect[k]) / n as f64).sqrt();
            assert!(
                (freq - expect[k]).abs() < 3.0 * se,
                "leaf {k}: {freq} vs {}",
                expect[k]
            );
        }
    }

    #[test]
    fn deterministic_kicks_track_the_limit_within_kick_scale() {
        let eps = 1e-3;
        let c = 0.1;
        let pair = KickPair::new(
            PerturbationSpec::uniform(c, c).unwrap(),
            PerturbationSpec::uniform(c, c).unwrap(),
        )
        .unwrap();
        let sys =
            WellSystem::new(vec![0.0, 1.0], vec![], vec![0.5], 4.0, vec![pair]).unwrap();
        let g = build_graph(&sys).unwrap();
        let h0 = 2.0;
        let path = limit_path(&g, 0, h0, &[]).unwrap();
        let horizon = 0.8 * path.duration();
        let mut s = Streams::from_seed(1).stream(0);
        let rec = microsim::run(&g, h0, 0.5, eps, horizon, horizon / 400.0, &mut s).unwrap();
        let report = compare(&rec, &path);
        let bound = 2.0 * g.kick_bound() * eps;
        assert!(
            report.sup_before_first_vertex <= bound,
            "sup {} vs bound {bound}",
            report.sup_before_first_vertex
        );
        assert!(report.first_mismatch.is_none());
    }

    #[test]
    fn stochastic_runs_converge_to_the_limit() {
        let eps = 1e-3;
        let pair = uniform_pair(0.05, 0.15, 0.1, 0.2);
        let sys =
            WellSystem::new(vec![0.0, 1.0], vec![], vec![0.5], 4.0, vec![pair]).unwrap();
        let g = build_graph(&sys).unwrap();
        let h0 = 2.0;
        let path = limit_path(&g, 0, h0, &[]).unwrap();
        let horizon = 0.9 * path.duration();
        let streams = Streams::from_seed(17);
        let mut sups = Vec::new();
        for r in 0..50u64 {
            let mut s = streams.stream(r);
            let rec = microsim::run(&g, h0, 0.5, eps, horizon, horizon / 200.0, &mut s).unwrap();
            sups.push(compare(&rec, &path).sup_before_first_vertex);
        }
        sups.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p95 = sups[(0.95 * 50.0) as usize];
        assert!(p95 < 0.05 * h0, "95th percentile {p95}");
    }

    proptest! {
        /// duration(a -> c) = duration(a -> b) + duration(b -> c).
        #[test]
        fn prop_duration_additivity(
            m in 0.1f64..2.0, d in 0.5f64..3.0,
            ha in 1.0f64..10.0, f1 in 0.1f64..0.9, f2 in 0.1f64..0.9,
        ) {
            let drift = EdgeDrift { edge: 0, m, d };
            let hb = ha * f1;
            let hc = hb * f2;
            let whole = drift.duration(ha, hc).unwrap();
            let split = drift.duration(ha, hb).unwrap() + drift.duration(hb, hc).unwrap();
            prop_assert!((whole - split).abs() < 1e-12 * whole.max(1.0));
        }

        /// Path energy is continuous and nonincreasing for any decisions.
        #[test]
        fn prop_limit_path_monotone(h0 in 3.0f64..6.0, bits in 0u32..8) {
            let g = four_leaf_graph();
            let decisions: Vec<ChildSide> = (0..3)
                .map(|i| if (bits >> i) & 1 == 0 { ChildSide::Left } else { ChildSide::Right })
                .collect();
            let path = limit_path(&g, 6, h0, &decisions).unwrap();
            let mut prev = h0;
            for t in 0..=100 {
                let tt = path.duration() * t as f64 / 100.0;
                let h = path.h_at(tt);
                prop_assert!(h <= prev + 1e-12);
                prev = h;
            }
        }
    }
}
