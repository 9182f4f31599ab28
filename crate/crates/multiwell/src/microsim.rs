//! Event-driven simulation of the kicked particle.
//!
//! Between collisions the particle moves ballistically at speed sqrt(2H)
//! inside its current confinement interval. At a wall it reverses direction
//! and loses `epsilon * kick` of energy, where the kick is drawn from the
//! current well's pair (`xi` at the left wall, `eta` at the right wall,
//! chosen by the pre-collision edge). On leaf edges the energy is clamped
//! at the floor. After each collision the edge is recomputed: up into the
//! parent if the energy reached the merge height, down into the child
//! containing the particle if it fell below the current bottom.
//!
//! Reported times are rescaled by `epsilon`, which keeps the energy drift
//! O(1) per unit time as the kicks shrink.

use crate::error::{Error, Result};
use crate::stream::{Stream, Streams};
use crate::topology::WellGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParticleState {
    pub edge: usize,
    pub h: f64,
    pub q: f64,
    /// +1 rightward, -1 leftward.
    pub direction: i8,
    /// Unrescaled elapsed time.
    pub natural_time: f64,
    /// Collisions per (edge, side); indices follow edge order.
    pub collision_counts: Vec<[u64; 2]>,
}

impl ParticleState {
    pub fn new(graph: &WellGraph, h0: f64, q0: f64, direction: i8) -> Result<Self> {
        if direction != 1 && direction != -1 {
            return Err(Error::Config(format!("direction must be +1 or -1, got {direction}")));
        }
        let edge = graph.locate(h0, q0)?;
        Ok(ParticleState {
            edge,
            h: h0,
            q: q0,
            direction,
            natural_time: 0.0,
            collision_counts: vec![[0, 0]; graph.edge_count()],
        })
    }

    pub fn total_collisions(&self) -> u64 {
        self.collision_counts.iter().map(|c| c[0] + c[1]).sum()
    }

    /// Natural-time flight duration to the next bounding wall.
    pub fn time_to_next_wall(&self, graph: &WellGraph) -> (f64, Side) {
        let e = graph.edge(self.edge);
        if self.direction > 0 {
            ((e.x_right - self.q) / (2.0 * self.h).sqrt(), Side::Right)
        } else {
            ((self.q - e.x_left) / (2.0 * self.h).sqrt(), Side::Left)
        }
    }

    /// Move to the next wall without colliding yet. Public so that drivers
    /// which supply their own kick draws (importance sampling) can pair it
    /// with `apply_kick`.
    pub fn fly_to_wall(&mut self, graph: &WellGraph) -> Side {
        let (dt, side) = self.time_to_next_wall(graph);
        self.natural_time += dt;
        let e = graph.edge(self.edge);
        self.q = match side {
            Side::Left => e.x_left,
            Side::Right => e.x_right,
        };
        side
    }

    /// Reflect at the wall just reached and apply a given kick value.
    /// Returns (pre energy, post energy). The caller owns the kick draw,
    /// which lets importance-sampling drivers reuse the exact transition.
    pub fn apply_kick(
        &mut self,
        graph: &WellGraph,
        side: Side,
        epsilon: f64,
        kick: f64,
    ) -> Result<(f64, f64)> {
        let h_pre = self.h;
        let pre_edge = self.edge;
        self.collision_counts[pre_edge][match side {
            Side::Left => 0,
            Side::Right => 1,
        }] += 1;
        self.direction = -self.direction;
        let mut h = h_pre - epsilon * kick;
        if graph.edge(pre_edge).is_leaf() {
            h = h.max(graph.edge(pre_edge).h_bot);
        }
        if h > graph.energy_cap() {
            return Err(Error::CapExceeded {
                time: epsilon * self.natural_time,
                energy: h,
            });
        }
        // Ascend while the merge height above is reached.
        let mut e = self.edge;
        while let Some(p) = graph.edge(e).parent {
            if h >= graph.edge(e).h_top {
                e = p;
            } else {
                break;
            }
        }
        // Descend into the child containing q while below the bottom.
        while h < graph.edge(e).h_bot {
            match graph.edge(e).children {
                Some((l, r)) => {
                    let mid = graph.edge(l).x_right;
                    e = if self.q < mid { l } else { r };
                }
                None => {
                    // Unreachable when epsilon * kick bound is below half
                    // the minimum vertical gap; clamp defensively.
                    h = graph.edge(e).h_bot;
                    break;
                }
            }
        }
        self.edge = e;
        self.h = h;
        Ok((h_pre, h))
    }
}

/// One collision, in rescaled time.
#[derive(Debug, Clone)]
pub struct CollisionEvent {
    pub t: f64,
    pub side: Side,
    pub kick: f64,
    pub h_pre: f64,
    pub h_post: f64,
    /// Pre-collision edge: the well whose kick pair was drawn from.
    pub edge: usize,
    /// Edge after relocation.
    pub edge_after: usize,
}

/// Fly to the next wall, draw the kick from the pre-collision edge's pair,
/// and relocate.
pub fn step(
    state: &mut ParticleState,
    graph: &WellGraph,
    epsilon: f64,
    stream: &mut Stream,
) -> Result<CollisionEvent> {
    let side = state.fly_to_wall(graph);
    let pre_edge = state.edge;
    let pair = graph.kick(pre_edge);
    let kick = match side {
        Side::Left => pair.xi.sample(stream)?,
        Side::Right => pair.eta.sample(stream)?,
    };
    let (h_pre, h_post) = state.apply_kick(graph, side, epsilon, kick)?;
    Ok(CollisionEvent {
        t: epsilon * state.natural_time,
        side,
        kick,
        h_pre,
        h_post,
        edge: pre_edge,
        edge_after: state.edge,
    })
}

/// Energy and edge sampled on the uniform rescaled-time grid.
#[derive(Debug, Clone)]
pub struct GridSample {
    pub t: f64,
    /// Right-continuous step energy.
    pub h_step: f64,
    /// Piecewise-linear interpolation through collision corners.
    pub h_hat: f64,
    pub edge: usize,
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub grid: Vec<GridSample>,
    pub events: Vec<CollisionEvent>,
    pub h0: f64,
    pub horizon: f64,
    pub epsilon: f64,
    pub final_state: ParticleState,
}

impl TrajectoryRecord {
    /// Pointwise gap between the step energy and its piecewise-linear
    /// modification; the maximum kick jump, bounded by the kick scale.
    pub fn sup_hat_step_distance(&self) -> f64 {
        self.events
            .iter()
            .map(|e| (e.h_post - e.h_pre).abs())
            .fold(0.0, f64::max)
    }
}

/// Validates that single kicks cannot jump across a whole energy interval,
/// which would skip a vertex in one collision.
pub fn validate_kick_scale(graph: &WellGraph, epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let m = graph.kick_bound();
    let gap = graph.min_vertical_gap();
    if epsilon * m > 0.5 * gap {
        return Err(Error::Config(format!(
            "epsilon * kick bound = {} exceeds half the minimum vertical gap {}",
            epsilon * m,
            gap
        )));
    }
    Ok(())
}

/// Simulate from (h0, q0) for `horizon` rescaled time units, recording the
/// trajectory on a `grid_dt` grid together with every collision.
pub fn run(
    graph: &WellGraph,
    h0: f64,
    q0: f64,
    epsilon: f64,
    horizon: f64,
    grid_dt: f64,
    stream: &mut Stream,
) -> Result<TrajectoryRecord> {
    validate_kick_scale(graph, epsilon)?;
    if !(horizon > 0.0) || !(grid_dt > 0.0) {
        return Err(Error::Config(
            "horizon and grid_dt must be positive".into(),
        ));
    }
    let mut state = ParticleState::new(graph, h0, q0, 1)?;
    let natural_end = horizon / epsilon;
    let mut events = Vec::new();
    loop {
        let (dt, _) = state.time_to_next_wall(graph);
        if state.natural_time + dt > natural_end {
            break;
        }
        events.push(step(&mut state, graph, epsilon, stream)?);
    }

    // Corners of the piecewise-linear energy: start, every collision, end.
    let mut corners: Vec<(f64, f64)> = Vec::with_capacity(events.len() + 2);
    corners.push((0.0, h0));
    corners.extend(events.iter().map(|e| (e.t, e.h_post)));
    corners.push((horizon, state.h));

    let n_grid = (horizon / grid_dt).floor() as usize + 1;
    let mut grid = Vec::with_capacity(n_grid);
    let mut ev = 0usize; // events with t <= current grid time
    let mut corner = 0usize;
    let initial_edge = graph.locate(h0, q0)?;
    for i in 0..n_grid {
        let t = (i as f64 * grid_dt).min(horizon);
        while ev < events.len() && events[ev].t <= t {
            ev += 1;
        }
        let (h_step, edge) = if ev == 0 {
            (h0, initial_edge)
        } else {
            (events[ev - 1].h_post, events[ev - 1].edge_after)
        };
        while corner + 1 < corners.len() && corners[corner + 1].0 <= t {
            corner += 1;
        }
        let h_hat = if corner + 1 == corners.len() {
            corners[corner].1
        } else {
            let (t0, v0) = corners[corner];
            let (t1, v1) = corners[corner + 1];
            if t1 > t0 {
                v0 + (v1 - v0) * (t - t0) / (t1 - t0)
            } else {
                v1
            }
        };
        grid.push(GridSample {
            t,
            h_step,
            h_hat,
            edge,
        });
    }

    Ok(TrajectoryRecord {
        grid,
        events,
        h0,
        horizon,
        epsilon,
        final_state: state,
    })
}

#[derive(Debug, Clone)]
pub struct FirstBranch {
    /// Leaf edge first entered.
    pub leaf: usize,
    pub collisions: u64,
    /// Rescaled time at entry.
    pub t: f64,
}

/// Simulate from an interior edge until the particle first enters a leaf
/// edge; that leaf identifies the branch taken below the starting region.
pub fn first_branch(
    graph: &WellGraph,
    h0: f64,
    q0: f64,
    epsilon: f64,
    max_collisions: u64,
    stream: &mut Stream,
) -> Result<FirstBranch> {
    validate_kick_scale(graph, epsilon)?;
    let mut state = ParticleState::new(graph, h0, q0, 1)?;
    if graph.edge(state.edge).is_leaf() {
        return Err(Error::Config(
            "first_branch must start on a merged (interior) edge".into(),
        ));
    }
    for k in 0..max_collisions {
        step(&mut state, graph, epsilon, stream)?;
        if graph.edge(state.edge).is_leaf() {
            return Ok(FirstBranch {
                leaf: state.edge,
                collisions: k + 1,
                t: epsilon * state.natural_time,
            });
        }
    }
    Err(Error::NoDecision(max_collisions))
}

#[derive(Debug, Clone)]
pub struct BranchEstimate {
    /// Frequency of settling into the left subtree.
    pub p_left: f64,
    /// Binomial standard error.
    pub se: f64,
    pub runs: u64,
}

/// Estimate the left-branch probability at an interior vertex by repeated
/// simulation started `offset` kick units above the vertex energy, at the
/// midpoint of the merged well. One stream per run keeps replicas
/// independent and order-free.
pub fn branch_frequency_mc(
    graph: &WellGraph,
    vertex_edge: usize,
    epsilon: f64,
    offset: f64,
    runs: u64,
    max_collisions: u64,
    streams: &Streams,
    stream_base: u64,
) -> Result<BranchEstimate> {
    let e = graph.edge(vertex_edge);
    let (left_child, _) = e
        .children
        .ok_or_else(|| Error::Config("branching needs an interior vertex".into()))?;
    let h0 = e.h_bot + epsilon * offset;
    if h0 >= e.h_top {
        return Err(Error::Config(format!(
            "start offset {offset} kicks puts the energy above the merged well"
        )));
    }
    let q0 = 0.5 * (e.x_left + e.x_right);
    let left_leaves = graph.leaves_under(left_child);
    let mut hits = 0u64;
    for r in 0..runs {
        let mut stream = streams.stream(stream_base + r);
        let fb = first_branch(graph, h0, q0, epsilon, max_collisions, &mut stream)?;
        if left_leaves.contains(&fb.leaf) {
            hits += 1;
        }
    }
    let p = hits as f64 / runs as f64;
    Ok(BranchEstimate {
        p_left: p,
        se: (p * (1.0 - p) / runs as f64).sqrt(),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KickPair, PerturbationSpec};
    use crate::stream::Streams;
    use crate::topology::{build_graph, WellGraph, WellSystem};

    fn constant_pair(xi: f64, eta: f64) -> KickPair {
        KickPair::new(
            PerturbationSpec::uniform(xi, xi).unwrap(),
            PerturbationSpec::uniform(eta, eta).unwrap(),
        )
        .unwrap()
    }

    fn single_well(width: f64, floor: f64, cap: f64, pair: KickPair) -> WellGraph {
        let sys = WellSystem::new(vec![0.0, width], vec![], vec![floor], cap, vec![pair]).unwrap();
        build_graph(&sys).unwrap()
    }

    fn two_wells(height: f64, pair: KickPair) -> WellGraph {
        let sys = WellSystem::new(
            vec![0.0, 1.0, 3.0],
            vec![height],
            vec![0.5, 0.3],
            height + 2.0,
            vec![pair; 3],
        )
        .unwrap();
        build_graph(&sys).unwrap()
    }

    #[test]
    fn two_deterministic_collisions_drop_exactly() {
        let eps = 1e-3;
        let g = single_well(2.0, 0.5, 4.0, constant_pair(0.1, 0.1));
        let mut s = Streams::from_seed(1).stream(0);
        let mut st = ParticleState::new(&g, 2.0, 0.7, 1).unwrap();
        step(&mut st, &g, eps, &mut s).unwrap();
        step(&mut st, &g, eps, &mut s).unwrap();
        assert_eq!(st.h, (2.0 - eps * 0.1) - eps * 0.1);
        assert!((st.h - (2.0 - 2.0 * eps * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn floor_clamps_exactly() {
        let eps = 1e-3;
        let g = single_well(1.0, 1.0, 4.0, constant_pair(0.5, 0.5));
        let mut s = Streams::from_seed(1).stream(0);
        let mut st = ParticleState::new(&g, 1.0 + eps * 0.1, 0.4, -1).unwrap();
        let ev = step(&mut st, &g, eps, &mut s).unwrap();
        assert_eq!(ev.side, Side::Left);
        assert_eq!(st.h, 1.0);
    }

    #[test]
    fn descent_picks_child_containing_position() {
        let eps = 1e-3;
        let g = two_wells(2.0, constant_pair(0.2, 0.2));
        // Root is edge 2; vertex at 2.0. Start just above, heading left.
        let h0 = 2.0 + eps * 0.05;
        let mut st = ParticleState::new(&g, h0, 0.5, -1).unwrap();
        assert_eq!(st.edge, 2);
        let mut s = Streams::from_seed(1).stream(0);
        step(&mut st, &g, eps, &mut s).unwrap();
        // Kick 0.2 drops energy below the merge height at the left wall.
        assert_eq!(st.edge, 0);
        assert!(st.h < 2.0);

        // Same start heading right lands at the outer right wall instead.
        let mut st = ParticleState::new(&g, h0, 0.5, 1).unwrap();
        let mut s = Streams::from_seed(1).stream(0);
        step(&mut st, &g, eps, &mut s).unwrap();
        assert_eq!(st.edge, 1);
    }

    #[test]
    fn ascent_merges_into_parent() {
        let eps = 1e-3;
        // Left kick raises energy (negative value), right kick dissipates.
        let g = two_wells(2.0, constant_pair(-0.3, 0.5));
        let h0 = 2.0 - eps * 0.1;
        let mut st = ParticleState::new(&g, h0, 0.5, -1).unwrap();
        assert_eq!(st.edge, 0);
        let mut s = Streams::from_seed(1).stream(0);
        step(&mut st, &g, eps, &mut s).unwrap();
        assert_eq!(st.edge, 2, "energy gain lifts into the merged well");
        assert!(st.h > 2.0);
    }

    #[test]
    fn cap_exceeded_aborts() {
        let eps = 1e-3;
        let g = two_wells(2.0, constant_pair(-1.0, 1.5));
        // Start just below the cap; one energy-raising kick crosses it.
        let mut st = ParticleState::new(&g, 4.0 - eps * 0.5, 0.5, -1).unwrap();
        let mut s = Streams::from_seed(1).stream(0);
        let r = step(&mut st, &g, eps, &mut s);
        assert!(matches!(r, Err(Error::CapExceeded { .. })));
    }

    #[test]
    fn kick_scale_validation() {
        let g = two_wells(2.0, constant_pair(0.2, 0.2));
        // Minimum vertical gap is 1.5 (leaf 1: 2.0 - 0.5); bound M = 0.2.
        assert!(validate_kick_scale(&g, 1e-3).is_ok());
        assert!(validate_kick_scale(&g, 4.0).is_err());
        assert!(validate_kick_scale(&g, 0.0).is_err());
    }

    #[test]
    fn collision_count_scales_inversely_with_epsilon() {
        let eps = 1e-3;
        let pair = KickPair::new(
            PerturbationSpec::uniform(0.001, 0.002).unwrap(),
            PerturbationSpec::uniform(0.001, 0.002).unwrap(),
        )
        .unwrap();
        let g = single_well(1.0, 0.5, 4.0, pair);
        let mut s = Streams::from_seed(9).stream(0);
        let rec = run(&g, 2.0, 0.25, eps, 1.0, 0.01, &mut s).unwrap();
        let h_min = rec
            .events
            .iter()
            .map(|e| e.h_post)
            .fold(2.0f64, f64::min);
        let pairs = rec.final_state.total_collisions() as f64 / 2.0;
        let d = 1.0;
        let c1 = (2.0 * h_min).sqrt() / (2.0 * d) * 0.95;
        let c2 = (2.0 * 2.0f64).sqrt() / (2.0 * d) * 1.05;
        assert!(
            pairs >= c1 / eps && pairs <= c2 / eps,
            "pairs {pairs} outside [{}, {}]",
            c1 / eps,
            c2 / eps
        );
    }

    #[test]
    fn hat_energy_stays_within_kick_scale_of_step() {
        let eps = 1e-3;
        let pair = KickPair::new(
            PerturbationSpec::uniform(-0.1, 0.3).unwrap(),
            PerturbationSpec::uniform(-0.1, 0.3).unwrap(),
        )
        .unwrap();
        let g = two_wells(2.0, pair);
        let mut s = Streams::from_seed(3).stream(0);
        let rec = run(&g, 3.0, 1.5, eps, 2.0, 0.01, &mut s).unwrap();
        let m = g.kick_bound();
        assert!(rec.sup_hat_step_distance() <= 2.0 * m * eps);
        // Grid interpolation respects the same bound sample by sample.
        for smp in &rec.grid {
            assert!((smp.h_hat - smp.h_step).abs() <= 2.0 * m * eps + 1e-12);
        }
        assert!(!rec.events.is_empty());
        assert_eq!(rec.grid.len(), 201);
    }

    #[test]
    fn identical_seeds_reproduce_trajectories() {
        let pair = KickPair::new(
            PerturbationSpec::uniform(-0.05, 0.25).unwrap(),
            PerturbationSpec::truncated_normal(0.1, 0.1, -0.2, 0.4).unwrap(),
        )
        .unwrap();
        let g = two_wells(2.0, pair);
        let run_once = || {
            let mut s = Streams::from_seed(42).stream(7);
            run(&g, 3.0, 1.5, 1e-3, 1.0, 0.05, &mut s).unwrap()
        };
        let (a, b) = (run_once(), run_once());
        assert_eq!(a.events.len(), b.events.len());
        for (x, y) in a.events.iter().zip(&b.events) {
            assert_eq!(x.t.to_bits(), y.t.to_bits());
            assert_eq!(x.kick.to_bits(), y.kick.to_bits());
            assert_eq!(x.h_post.to_bits(), y.h_post.to_bits());
        }
    }

    /// With constant kicks the crossing collision index, and hence the
    /// branch side, follows from arithmetic alone.
    #[test]
    fn deterministic_branch_parity_matches_hand_count() {
        let eps = 1e-3;
        let c = 0.05;
        for extra in [0u32, 1, 2, 3, 4, 5] {
            let g = two_wells(2.0, constant_pair(c, c));
            // Start (extra + 0.5) kicks above the vertex at the midpoint,
            // moving right: collisions alternate right, left, right, ...
            let h0 = 2.0 + eps * c * (extra as f64 + 0.5);
            let mut s = Streams::from_seed(5).stream(0);
            let fb = first_branch(&g, h0, 1.5, eps, 10_000, &mut s).unwrap();
            // Crossing happens at collision extra + 1; odd collision
            // indices are at the right wall.
            let crossing = extra + 1;
            let expect = if crossing % 2 == 1 { 1 } else { 0 };
            assert_eq!(fb.leaf, expect, "extra = {extra}");
            assert_eq!(fb.collisions, crossing as u64);
        }
    }

    #[test]
    fn symmetric_wells_branch_evenly() {
        let eps = 2e-3;
        let pair = KickPair::new(
            PerturbationSpec::uniform(0.2, 0.4).unwrap(),
            PerturbationSpec::uniform(0.2, 0.4).unwrap(),
        )
        .unwrap();
        let sys = WellSystem::new(
            vec![0.0, 1.0, 2.0],
            vec![2.0],
            vec![0.4, 0.3],
            4.0,
            vec![pair; 3],
        )
        .unwrap();
        let g = build_graph(&sys).unwrap();
        let streams = Streams::from_seed(11);
        let runs = 100_000;
        let est = branch_frequency_mc(&g, 2, eps, 150.0, runs, 1_000_000, &streams, 0).unwrap();
        assert!(
            (est.p_left - 0.5).abs() < 3.0 * est.se,
            "p_left = {} (se {})",
            est.p_left,
            est.se
        );
    }

    /// Both kicks positive: the branch frequency approaches
    /// E[xi] / (E[xi] + E[eta]) as epsilon shrinks.
    #[test]
    fn both_positive_branch_frequency_matches_ratio() {
        let eps = 1e-3;
        let pair = KickPair::new(
            PerturbationSpec::uniform(0.2, 0.4).unwrap(),
            PerturbationSpec::uniform(0.6, 1.0).unwrap(),
        )
        .unwrap();
        let g = two_wells(2.0, pair);
        let streams = Streams::from_seed(13);
        let runs = 200_000;
        let est = branch_frequency_mc(&g, 2, eps, 50.0, runs, 1_000_000, &streams, 0).unwrap();
        let target = 0.3 / 1.1;
        assert!(
            (est.p_left - target).abs() < 3.0 * est.se + 2e-3,
            "p_left = {} vs {target} (se {})",
            est.p_left,
            est.se
        );
    }

    #[test]
    fn no_decision_when_budget_too_small() {
        let eps = 1e-4;
        let g = two_wells(2.0, constant_pair(0.01, 0.01));
        let mut s = Streams::from_seed(5).stream(0);
        let r = first_branch(&g, 3.0, 1.5, eps, 10, &mut s);
        assert!(matches!(r, Err(Error::NoDecision(10))));
    }
}
