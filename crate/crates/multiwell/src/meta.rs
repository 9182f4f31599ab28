//! Metastable structure of a well graph on exponential timescales: W-graph
//! minimization over the exterior (stable) vertices, the hierarchy of
//! cycles with their exit exponents, exit landing distributions through
//! interior gates, and the timeline of metastable distributions.
//!
//! Scales are quasi-potential exponents: an event with exponent `C` takes
//! time of order `exp(C / epsilon)`. At observation exponent `s`, every
//! cycle of states with exit exponent at most `s` has already equilibrated
//! and drained through its exit gate, while cycles with larger exponents
//! hold their mass. The timeline records the resulting distribution for
//! each threshold between consecutive exponents.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rate::{pairwise_quasipotential, PairwiseV, RateTable};
use crate::topology::WellGraph;

/// Exhaustive-enumeration bound for W-graph minimization.
const MAX_WGRAPH_STATES: usize = 12;
/// Largest number of tie-resolution combinations explored before the
/// hierarchy gives up and reports the tie.
const MAX_TIE_COMBOS: usize = 20_000;
/// Cap on the number of minimizing graphs retained.
const MAX_MINIMIZERS: usize = 10_000;

/// Left/right descent probabilities for every interior vertex.
#[derive(Debug, Clone, Serialize)]
pub struct BranchTable {
    leaf_count: usize,
    /// p_left per interior vertex, in ascending vertex index order.
    p_left: Vec<f64>,
}

impl BranchTable {
    /// `p_left[k]` is the probability of descending into the left child of
    /// interior vertex `leaf_count + k`.
    pub fn new(graph: &WellGraph, p_left: Vec<f64>) -> Result<BranchTable> {
        let interior = graph.edge_count() - graph.leaf_count();
        if p_left.len() != interior {
            return Err(Error::Config(format!(
                "expected {interior} branch probabilities (one per interior \
                 vertex), got {}",
                p_left.len()
            )));
        }
        for (k, &p) in p_left.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "branch probability {p} for {} is outside [0, 1]",
                    graph.vertex_label(graph.leaf_count() + k)
                )));
            }
        }
        Ok(BranchTable {
            leaf_count: graph.leaf_count(),
            p_left,
        })
    }

    /// Fifty-fifty descent at every interior vertex.
    pub fn even(graph: &WellGraph) -> BranchTable {
        BranchTable {
            leaf_count: graph.leaf_count(),
            p_left: vec![0.5; graph.edge_count() - graph.leaf_count()],
        }
    }

    /// (p_left, p_right) of an interior vertex.
    pub fn pair(&self, vertex: usize) -> Result<(f64, f64)> {
        if vertex < self.leaf_count || vertex - self.leaf_count >= self.p_left.len() {
            return Err(Error::Config(format!(
                "vertex {vertex} is not an interior vertex"
            )));
        }
        let p = self.p_left[vertex - self.leaf_count];
        Ok((p, 1.0 - p))
    }
}

/// Probability of reaching each exterior vertex by repeatedly descending
/// from `vertex`, choosing children according to the branch table. Zero
/// outside the subtree.
pub fn descend_distribution(
    graph: &WellGraph,
    vertex: usize,
    branch: &BranchTable,
) -> Result<Vec<f64>> {
    if graph.edge(vertex).is_leaf() {
        return Err(Error::Config(format!(
            "{} is exterior; descent starts from an interior vertex",
            graph.vertex_label(vertex)
        )));
    }
    let mut out = vec![0.0; graph.leaf_count()];
    let mut stack = vec![(vertex, 1.0f64)];
    while let Some((e, p)) = stack.pop() {
        match graph.edge(e).children {
            None => out[e] += p,
            Some((l, r)) => {
                let (pl, pr) = branch.pair(e)?;
                stack.push((l, p * pl));
                stack.push((r, p * pr));
            }
        }
    }
    Ok(out)
}

/// All-pairs quasi-potential matrix restricted to the exterior vertices.
pub fn exterior_v(graph: &WellGraph, table: &RateTable) -> Result<Vec<Vec<f64>>> {
    let pv = pairwise_quasipotential(graph, table)?;
    let n = graph.leaf_count();
    Ok((0..n)
        .map(|i| (0..n).map(|j| pv.value(i, j)).collect())
        .collect())
}

/// Minimal W-graph sum and the set of minimizing graphs. Each graph lists
/// its arrows as (from, to) state pairs sorted by source.
#[derive(Debug, Clone)]
pub struct WGraphOutcome {
    pub value: f64,
    pub graphs: Vec<Vec<(usize, usize)>>,
    /// True when the minimizer set was cut off at the retention cap; the
    /// value is still exact.
    pub truncated: bool,
}

/// Minimize the arrow-cost sum over graphs that map every non-sink state
/// to another state with all chains of arrows ending in `sinks`.
/// Exhaustive branch-and-bound; exact ties are all retained.
pub fn w_graph_min<F>(states: &[usize], cost: F, sinks: &[usize]) -> Result<WGraphOutcome>
where
    F: Fn(usize, usize) -> f64,
{
    if states.is_empty() || states.len() > MAX_WGRAPH_STATES {
        return Err(Error::Config(format!(
            "W-graph minimization handles 1..={MAX_WGRAPH_STATES} states, got {}",
            states.len()
        )));
    }
    let state_set: BTreeSet<usize> = states.iter().copied().collect();
    if state_set.len() != states.len() {
        return Err(Error::Config("duplicate states in W-graph input".into()));
    }
    let sink_set: BTreeSet<usize> = sinks.iter().copied().collect();
    if !sink_set.is_subset(&state_set) {
        return Err(Error::Config("sink set must be a subset of the states".into()));
    }
    let movers: Vec<usize> = states
        .iter()
        .copied()
        .filter(|s| !sink_set.contains(s))
        .collect();
    if movers.is_empty() {
        return Ok(WGraphOutcome {
            value: 0.0,
            graphs: vec![Vec::new()],
            truncated: false,
        });
    }
    // Finite candidate arrows per mover, cheapest-first for tighter bounds.
    let mut arrows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(movers.len());
    for &u in &movers {
        let mut row: Vec<(usize, f64)> = states
            .iter()
            .copied()
            .filter(|&w| w != u)
            .map(|w| (w, cost(u, w)))
            .filter(|&(_, c)| c.is_finite())
            .collect();
        for &(_, c) in &row {
            if c.is_nan() {
                return Err(Error::Config("W-graph costs must not be NaN".into()));
            }
        }
        row.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"));
        arrows.push(row);
    }
    if arrows.iter().any(|row| row.is_empty()) {
        // Some state has no finite outgoing cost at all.
        return Ok(WGraphOutcome {
            value: f64::INFINITY,
            graphs: Vec::new(),
            truncated: false,
        });
    }
    let tail_bound: Vec<f64> = {
        // tail_bound[i] = sum of per-mover minima from mover i on.
        let mut tb = vec![0.0; movers.len() + 1];
        for i in (0..movers.len()).rev() {
            tb[i] = tb[i + 1] + arrows[i][0].1;
        }
        tb
    };
    struct Search<'a> {
        movers: &'a [usize],
        arrows: &'a [Vec<(usize, f64)>],
        tail_bound: &'a [f64],
        chosen: Vec<usize>,
        best: f64,
        graphs: Vec<Vec<(usize, usize)>>,
        truncated: bool,
    }
    impl Search<'_> {
        fn mover_pos(&self, state: usize) -> Option<usize> {
            self.movers.iter().position(|&m| m == state)
        }
        /// Would assigning `u -> w` close a directed loop through the
        /// arrows chosen so far?
        fn creates_cycle(&self, u: usize, mut w: usize, depth: usize) -> bool {
            loop {
                if w == u {
                    return true;
                }
                match self.mover_pos(w) {
                    Some(p) if p < depth => w = self.chosen[p],
                    _ => return false,
                }
            }
        }
        fn recurse(&mut self, depth: usize, partial: f64) {
            if depth == self.movers.len() {
                if partial < self.best {
                    self.best = partial;
                    self.graphs.clear();
                    self.truncated = false;
                }
                if partial == self.best {
                    if self.graphs.len() < MAX_MINIMIZERS {
                        self.graphs.push(
                            self.movers
                                .iter()
                                .copied()
                                .zip(self.chosen.iter().copied())
                                .collect(),
                        );
                    } else {
                        self.truncated = true;
                    }
                }
                return;
            }
            let u = self.movers[depth];
            for k in 0..self.arrows[depth].len() {
                let (w, c) = self.arrows[depth][k];
                // Cheapest-first ordering makes this bound monotone in k.
                if partial + c + self.tail_bound[depth + 1] > self.best {
                    break;
                }
                if self.creates_cycle(u, w, depth) {
                    continue;
                }
                self.chosen.push(w);
                self.recurse(depth + 1, partial + c);
                self.chosen.pop();
            }
        }
    }
    let mut search = Search {
        movers: &movers,
        arrows: &arrows,
        tail_bound: &tail_bound,
        chosen: Vec::with_capacity(movers.len()),
        best: f64::INFINITY,
        graphs: Vec::new(),
        truncated: false,
    };
    search.recurse(0, 0.0);
    if search.graphs.is_empty() {
        // All complete assignments were cyclic (possible only when finite
        // arrows never reach the sinks).
        return Ok(WGraphOutcome {
            value: f64::INFINITY,
            graphs: Vec::new(),
            truncated: false,
        });
    }
    Ok(WGraphOutcome {
        value: search.best,
        graphs: search.graphs,
        truncated: search.truncated,
    })
}

/// One cycle of the hierarchy.
#[derive(Debug, Clone, Serialize)]
pub struct Cycle {
    /// Exterior states inside the cycle, ascending.
    pub members: Vec<usize>,
    pub rank: usize,
    /// Indices into the hierarchy's cycle list; empty for singletons.
    pub children: Vec<usize>,
    #[serde(skip)]
    pub parent: Option<usize>,
    /// Minimal W-graph sum with sinks outside the cycle.
    pub a: f64,
    /// Exit exponent: `a` minus the cheapest internal W-graph sum.
    pub c: f64,
    /// Arrows leaving the cycle in the minimizing W-graphs.
    pub exit_arrows: Vec<(usize, usize)>,
}

/// The full cycle hierarchy over a set of exterior states.
#[derive(Debug, Clone, Serialize)]
pub struct CycleHierarchy {
    pub states: Vec<usize>,
    pub cycles: Vec<Cycle>,
    pub root: usize,
}

impl CycleHierarchy {
    /// Index of the singleton cycle of a state.
    pub fn singleton(&self, state: usize) -> Option<usize> {
        self.cycles
            .iter()
            .position(|c| c.rank == 0 && c.members == [state])
    }
}

fn a_and_exits<F>(states: &[usize], cost: &F, members: &[usize]) -> Result<(f64, Vec<(usize, usize)>)>
where
    F: Fn(usize, usize) -> f64,
{
    let member_set: BTreeSet<usize> = members.iter().copied().collect();
    let sinks: Vec<usize> = states
        .iter()
        .copied()
        .filter(|s| !member_set.contains(s))
        .collect();
    let out = w_graph_min(states, cost, &sinks)?;
    let mut exits: BTreeSet<(usize, usize)> = BTreeSet::new();
    for g in &out.graphs {
        for &(u, w) in g {
            if !member_set.contains(&w) {
                exits.insert((u, w));
            }
        }
    }
    Ok((out.value, exits.into_iter().collect()))
}

fn internal_min<F>(cost: &F, members: &[usize]) -> Result<f64>
where
    F: Fn(usize, usize) -> f64,
{
    let mut best = f64::INFINITY;
    if members.len() == 1 {
        return Ok(0.0);
    }
    for &i in members {
        let out = w_graph_min(members, cost, &[i])?;
        if out.value < best {
            best = out.value;
        }
    }
    Ok(best)
}

/// Loops of a partial functional graph: groups of node indices that map
/// onto each other cyclically under `succ`.
fn functional_loops(succ: &[Option<usize>]) -> Vec<Vec<usize>> {
    let n = succ.len();
    // Peel nodes with no incoming arrows until only loop members remain.
    let mut alive = vec![true; n];
    loop {
        let mut indeg = vec![0usize; n];
        for (i, s) in succ.iter().enumerate() {
            if alive[i] {
                if let Some(j) = *s {
                    if alive[j] {
                        indeg[j] += 1;
                    }
                }
            }
        }
        let mut changed = false;
        for i in 0..n {
            if alive[i] && (indeg[i] == 0 || succ[i].is_none()) {
                alive[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut seen = vec![false; n];
    let mut loops = Vec::new();
    for start in 0..n {
        if !alive[start] || seen[start] {
            continue;
        }
        let mut cur = start;
        let mut group = Vec::new();
        while !seen[cur] {
            seen[cur] = true;
            group.push(cur);
            cur = succ[cur].expect("alive nodes have successors");
        }
        group.sort_unstable();
        loops.push(group);
    }
    loops.sort();
    loops
}

/// Build the cycle hierarchy of a quasi-potential matrix over exterior
/// states: singleton cycles merge along the rotation of minimal exits,
/// repeatedly, until a single root cycle remains. Ties are reported only
/// when they change which cycles merge.
pub fn cycle_hierarchy<F>(states: &[usize], cost: F) -> Result<CycleHierarchy>
where
    F: Fn(usize, usize) -> f64,
{
    if states.is_empty() || states.len() > MAX_WGRAPH_STATES {
        return Err(Error::Config(format!(
            "cycle hierarchy handles 1..={MAX_WGRAPH_STATES} states, got {}",
            states.len()
        )));
    }
    let mut cycles: Vec<Cycle> = Vec::new();
    let mut active: Vec<usize> = Vec::new();
    for &s in states {
        let (a, exit_arrows) = a_and_exits(states, &cost, &[s])?;
        let c = if a.is_infinite() { f64::INFINITY } else { a };
        active.push(cycles.len());
        cycles.push(Cycle {
            members: vec![s],
            rank: 0,
            children: Vec::new(),
            parent: None,
            a,
            c,
            exit_arrows,
        });
    }
    while active.len() > 1 {
        // Destination cycles reachable from each active cycle's exits.
        let dests: Vec<Vec<usize>> = active
            .iter()
            .map(|&ci| {
                let mut d: BTreeSet<usize> = BTreeSet::new();
                for &(_, w) in &cycles[ci].exit_arrows {
                    let holder = active
                        .iter()
                        .position(|&cj| cycles[cj].members.contains(&w))
                        .expect("states are partitioned by active cycles");
                    d.insert(holder);
                }
                d.into_iter().collect()
            })
            .collect();
        let combos: usize = dests
            .iter()
            .map(|d| d.len().max(1))
            .try_fold(1usize, |acc, k| acc.checked_mul(k))
            .filter(|&c| c <= MAX_TIE_COMBOS)
            .ok_or_else(|| {
                Error::Tie("too many tied exit destinations to resolve the hierarchy".into())
            })?;
        // Loops must not depend on how cross-cycle exit ties are resolved.
        let mut partition: Option<Vec<Vec<usize>>> = None;
        for combo in 0..combos {
            let mut rem = combo;
            let succ: Vec<Option<usize>> = dests
                .iter()
                .map(|d| {
                    if d.is_empty() {
                        None
                    } else {
                        let pick = rem % d.len();
                        rem /= d.len();
                        Some(d[pick])
                    }
                })
                .collect();
            let loops = functional_loops(&succ);
            match &partition {
                None => partition = Some(loops),
                Some(p) if *p == loops => {}
                Some(p) => {
                    let tied = dests
                        .iter()
                        .enumerate()
                        .filter(|(_, d)| d.len() > 1)
                        .map(|(i, d)| {
                            format!(
                                "cycle {:?} exits toward {:?}",
                                cycles[active[i]].members,
                                d.iter()
                                    .map(|&j| cycles[active[j]].members.clone())
                                    .collect::<Vec<_>>()
                            )
                        })
                        .collect::<Vec<_>>()
                        .join("; ");
                    let _ = p;
                    return Err(Error::Tie(format!(
                        "tied exit destinations change the cycle structure: {tied}"
                    )));
                }
            }
        }
        let loops = partition.expect("at least one combo");
        let merge_all = loops.is_empty();
        let groups: Vec<Vec<usize>> = if merge_all {
            // No finite rotation anywhere: the remaining cycles never
            // exchange mass; close the hierarchy with one root.
            vec![(0..active.len()).collect()]
        } else {
            loops
        };
        let mut merged: BTreeSet<usize> = BTreeSet::new();
        let mut next_active: Vec<usize> = Vec::new();
        for group in &groups {
            let child_idx: Vec<usize> = group.iter().map(|&g| active[g]).collect();
            let mut members: Vec<usize> = child_idx
                .iter()
                .flat_map(|&ci| cycles[ci].members.iter().copied())
                .collect();
            members.sort_unstable();
            let (a, exit_arrows) = a_and_exits(states, &cost, &members)?;
            let internal = internal_min(&cost, &members)?;
            let c = if a.is_infinite() {
                f64::INFINITY
            } else {
                a - internal
            };
            let rank = 1 + child_idx.iter().map(|&ci| cycles[ci].rank).max().unwrap();
            for &ci in &child_idx {
                if c <= cycles[ci].c && !merge_all {
                    return Err(Error::Tie(format!(
                        "exit exponent {} of merged cycle {:?} does not exceed \
                         its child's {}",
                        c, members, cycles[ci].c
                    )));
                }
            }
            let new_idx = cycles.len();
            for &ci in &child_idx {
                cycles[ci].parent = Some(new_idx);
            }
            cycles.push(Cycle {
                members,
                rank,
                children: child_idx,
                parent: None,
                a,
                c,
                exit_arrows,
            });
            next_active.push(new_idx);
            merged.extend(group.iter().copied());
        }
        for (pos, &ci) in active.iter().enumerate() {
            if !merged.contains(&pos) {
                next_active.push(ci);
            }
        }
        next_active.sort_unstable();
        active = next_active;
    }
    Ok(CycleHierarchy {
        states: states.to_vec(),
        root: active[0],
        cycles,
    })
}

/// Exit exponent and landing distribution(s) of one cycle. A landing is
/// the exterior distribution obtained by descending from the exit gate:
/// the first interior vertex, along the minimizing exit route, whose
/// subtree is not contained in the cycle.
#[derive(Debug, Clone, Serialize)]
pub struct ExitProfile {
    pub exponent: f64,
    /// Distinct landing distributions over exterior vertices; empty when
    /// every exit is infinitely costly.
    pub landings: Vec<Vec<f64>>,
    /// Gate vertex per landing, aligned with `landings`.
    pub gates: Vec<usize>,
}

fn exit_gate(graph: &WellGraph, pv: &PairwiseV, from: usize, to: usize, members: &[usize]) -> Result<usize> {
    let route = pv.route(from, to).ok_or_else(|| {
        Error::Numeric(format!(
            "no finite route from {} to {}",
            graph.vertex_label(from),
            graph.vertex_label(to)
        ))
    })?;
    let member_set: BTreeSet<usize> = members.iter().copied().collect();
    for &v in route.iter().skip(1) {
        if graph.edge(v).is_leaf() {
            continue;
        }
        let under = graph.leaves_under(v);
        if !under.iter().all(|l| member_set.contains(l)) {
            return Ok(v);
        }
    }
    Err(Error::Invariant(format!(
        "exit route from {} to {} never leaves the cycle",
        graph.vertex_label(from),
        graph.vertex_label(to)
    )))
}

/// Exit profile of `cycle` (an index into the hierarchy's cycle list).
pub fn exit_profile(
    graph: &WellGraph,
    pv: &PairwiseV,
    hierarchy: &CycleHierarchy,
    cycle: usize,
    branch: &BranchTable,
) -> Result<ExitProfile> {
    let cy = &hierarchy.cycles[cycle];
    let mut landings: Vec<Vec<f64>> = Vec::new();
    let mut gates: Vec<usize> = Vec::new();
    for &(u, w) in &cy.exit_arrows {
        let gate = exit_gate(graph, pv, u, w, &cy.members)?;
        if gates.contains(&gate) {
            continue;
        }
        let dist = descend_distribution(graph, gate, branch)?;
        gates.push(gate);
        landings.push(dist);
    }
    Ok(ExitProfile {
        exponent: cy.c,
        landings,
        gates,
    })
}

/// One recorded step of the metastable timeline: the distribution over
/// exterior vertices observed at timescale exponents just above
/// `threshold` (up to the next entry's threshold).
#[derive(Debug, Clone, Serialize)]
pub struct TimelineEntry {
    pub threshold: f64,
    pub distribution: Vec<f64>,
    /// False when this threshold's transitions left the distribution
    /// unchanged.
    pub changed: bool,
}

/// Solve (I - Q) X = B for X by Gaussian elimination with partial
/// pivoting; Q is substochastic so the system is well conditioned.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).expect("finite"))
            .expect("nonempty");
        if a[pivot][col].abs() < 1e-14 {
            return Err(Error::Numeric(
                "singular settle system; the jump chain does not absorb".into(),
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            for k in 0..b[row].len() {
                b[row][k] -= f * b[col][k];
            }
        }
    }
    for col in (0..n).rev() {
        for k in 0..b[col].len() {
            let mut v = b[col][k];
            for j in (col + 1)..n {
                v -= a[col][j] * b[j][k];
            }
            b[col][k] = v / a[col][col];
        }
    }
    Ok(b)
}

/// The deepest maximal-exponent descendant: where mass inside `cycle`
/// concentrates when nothing escapes it.
fn rest_state(hierarchy: &CycleHierarchy, cycle: usize) -> Result<usize> {
    let mut at = cycle;
    loop {
        let cy = &hierarchy.cycles[at];
        if cy.children.is_empty() {
            return Ok(cy.members[0]);
        }
        let mut best = cy.children[0];
        for &ch in &cy.children[1..] {
            let (a, b) = (hierarchy.cycles[ch].c, hierarchy.cycles[best].c);
            if a == b {
                return Err(Error::Tie(format!(
                    "children {:?} and {:?} share exit exponent {}",
                    hierarchy.cycles[ch].members, hierarchy.cycles[best].members, a
                )));
            }
            if a > b {
                best = ch;
            }
        }
        at = best;
    }
}

/// Landing row of a cycle conditioned on leaving it, for the timeline
/// composition. Requires a single unambiguous landing.
fn conditioned_landing(
    graph: &WellGraph,
    pv: &PairwiseV,
    hierarchy: &CycleHierarchy,
    cycle: usize,
    branch: &BranchTable,
) -> Result<Vec<f64>> {
    let profile = exit_profile(graph, pv, hierarchy, cycle, branch)?;
    let members = &hierarchy.cycles[cycle].members;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for landing in &profile.landings {
        let mut row = landing.clone();
        for &m in members {
            row[m] = 0.0;
        }
        let mass: f64 = row.iter().sum();
        if mass <= 0.0 {
            return Err(Error::Numeric(format!(
                "exit landing of cycle {members:?} puts no mass outside it"
            )));
        }
        for v in row.iter_mut() {
            *v /= mass;
        }
        if !rows
            .iter()
            .any(|r: &Vec<f64>| r.iter().zip(&row).all(|(a, b)| (a - b).abs() <= 1e-12))
        {
            rows.push(row);
        }
    }
    match rows.len() {
        0 => Err(Error::Numeric(format!(
            "cycle {members:?} has no finite exit landing"
        ))),
        1 => Ok(rows.pop().expect("one row")),
        _ => Err(Error::Tie(format!(
            "cycle {members:?} has multiple distinct exit landings"
        ))),
    }
}

/// Redistribution of mass once every transition with exponent at most `s`
/// has equilibrated: rows indexed by exterior vertex.
fn settle_matrix(
    hierarchy: &CycleHierarchy,
    landing: &[Option<Vec<f64>>],
    s: f64,
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    // Jumping super-node of each state: the highest ancestor cycle in the
    // chain from the singleton upward whose exponents are all <= s.
    let mut super_of: Vec<Option<usize>> = vec![None; n];
    for v in 0..n {
        let mut at = hierarchy
            .singleton(v)
            .ok_or_else(|| Error::Invariant(format!("state {v} has no singleton cycle")))?;
        if hierarchy.cycles[at].c > s {
            continue;
        }
        while let Some(p) = hierarchy.cycles[at].parent {
            if hierarchy.cycles[p].c <= s {
                at = p;
            } else {
                break;
            }
        }
        super_of[v] = Some(at);
    }
    let supers: Vec<usize> = {
        let set: BTreeSet<usize> = super_of.iter().flatten().copied().collect();
        set.into_iter().collect()
    };
    let pos_of = |cy: usize| supers.iter().position(|&x| x == cy).expect("listed");
    // Super-node digraph for recurrence detection.
    let m = supers.len();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); m];
    let mut to_absorbing: Vec<bool> = vec![false; m];
    for (i, &cy) in supers.iter().enumerate() {
        let row = landing[cy]
            .as_ref()
            .ok_or_else(|| Error::Invariant("missing landing for a jumping cycle".into()))?;
        for (w, &p) in row.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            match super_of[w] {
                Some(k) => {
                    adj[i].insert(pos_of(k));
                }
                None => to_absorbing[i] = true,
            }
        }
    }
    // A recurrent class is a strongly connected set with no way out; find
    // them by checking whether absorption is reachable from each node.
    let mut reaches_absorbing = to_absorbing.clone();
    loop {
        let mut changed = false;
        for i in 0..m {
            if !reaches_absorbing[i] && adj[i].iter().any(|&j| reaches_absorbing[j]) {
                reaches_absorbing[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    // Nodes that never reach absorption concentrate at the rest state of
    // the smallest enclosing cycle with exponent above the threshold.
    let mut outputs: Vec<Option<usize>> = vec![None; m];
    {
        let trapped: Vec<usize> = (0..m).filter(|&i| !reaches_absorbing[i]).collect();
        let mut assigned: Vec<bool> = vec![false; m];
        for &start in &trapped {
            if assigned[start] {
                continue;
            }
            // The closed communicating group containing `start`.
            let mut group = vec![start];
            let mut frontier = vec![start];
            let mut in_group = vec![false; m];
            in_group[start] = true;
            while let Some(i) = frontier.pop() {
                for &j in &adj[i] {
                    if !in_group[j] {
                        in_group[j] = true;
                        group.push(j);
                        frontier.push(j);
                    }
                }
            }
            // Smallest ancestor cycle containing the whole group with
            // exponent above the threshold.
            let mut at = supers[group[0]];
            let contains_all = |cy: usize| -> bool {
                let members = &hierarchy.cycles[cy].members;
                group.iter().all(|&g| {
                    hierarchy.cycles[supers[g]]
                        .members
                        .iter()
                        .all(|w| members.contains(w))
                })
            };
            loop {
                if hierarchy.cycles[at].c > s && contains_all(at) {
                    break;
                }
                at = hierarchy.cycles[at]
                    .parent
                    .ok_or_else(|| Error::Invariant("trapped mass above the root".into()))?;
            }
            let rest = rest_state(hierarchy, at)?;
            for &g in &group {
                outputs[g] = Some(rest);
                assigned[g] = true;
            }
        }
    }
    // Absorbing solve for the remaining transient super-nodes.
    let transient: Vec<usize> = (0..m).filter(|&i| outputs[i].is_none()).collect();
    let t = transient.len();
    let tpos = |i: usize| transient.iter().position(|&x| x == i);
    let mut a = vec![vec![0.0; t]; t];
    let mut b = vec![vec![0.0; n]; t];
    for (row, &i) in transient.iter().enumerate() {
        a[row][row] = 1.0;
        let cy = supers[i];
        let land = landing[cy].as_ref().expect("checked above");
        for (w, &p) in land.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            match super_of[w] {
                None => b[row][w] += p,
                Some(k) => {
                    let kp = pos_of(k);
                    match tpos(kp) {
                        Some(col) => a[row][col] -= p,
                        None => {
                            let rest = outputs[kp].expect("trapped classes were assigned");
                            b[row][rest] += p;
                        }
                    }
                }
            }
        }
    }
    let x = if t > 0 {
        solve_linear(a, b)?
    } else {
        Vec::new()
    };
    let mut settle = vec![vec![0.0; n]; n];
    for (v, row) in settle.iter_mut().enumerate() {
        match super_of[v] {
            None => row[v] = 1.0,
            Some(cy) => {
                let i = pos_of(cy);
                match tpos(i) {
                    Some(tr) => row.copy_from_slice(&x[tr]),
                    None => row[outputs[i].expect("assigned")] = 1.0,
                }
            }
        }
    }
    Ok(settle)
}

/// Metastable distributions at every exit-exponent threshold: entry 0 is
/// the start distribution; each later entry holds after all transitions
/// with exponent at most its threshold have run their course.
pub fn metastable_timeline(
    graph: &WellGraph,
    table: &RateTable,
    branch: &BranchTable,
    u0: &[f64],
) -> Result<Vec<TimelineEntry>> {
    let n = graph.leaf_count();
    if u0.len() != n {
        return Err(Error::Config(format!(
            "start distribution has {} entries for {} exterior vertices",
            u0.len(),
            n
        )));
    }
    let total: f64 = u0.iter().sum();
    if u0.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(
            "start distribution must be a probability vector over exterior vertices".into(),
        ));
    }
    let pv = pairwise_quasipotential(graph, table)?;
    let v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| pv.value(i, j)).collect())
        .collect();
    let states: Vec<usize> = (0..n).collect();
    let hierarchy = cycle_hierarchy(&states, |i, j| v[i][j])?;
    // One conditioned landing per exiting cycle.
    let mut landing: Vec<Option<Vec<f64>>> = vec![None; hierarchy.cycles.len()];
    for (i, cy) in hierarchy.cycles.iter().enumerate() {
        if cy.c.is_finite() {
            landing[i] = Some(conditioned_landing(graph, &pv, &hierarchy, i, branch)?);
        }
    }
    let mut thresholds: Vec<f64> = hierarchy
        .cycles
        .iter()
        .map(|c| c.c)
        .filter(|c| c.is_finite())
        .collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    for w in thresholds.windows(2) {
        if w[0] == w[1] {
            return Err(Error::Tie(format!(
                "two cycles share the exit exponent {}",
                w[0]
            )));
        }
    }
    let mut u: Vec<f64> = u0.iter().map(|&p| p / total).collect();
    let mut timeline = vec![TimelineEntry {
        threshold: 0.0,
        distribution: u.clone(),
        changed: true,
    }];
    for &s in &thresholds {
        let settle = settle_matrix(&hierarchy, &landing, s, n)?;
        let mut next = vec![0.0; n];
        for (v0, &mass) in u.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (w, &p) in settle[v0].iter().enumerate() {
                next[w] += mass * p;
            }
        }
        let changed = next
            .iter()
            .zip(&u)
            .any(|(a, b)| (a - b).abs() > 1e-12);
        u = next;
        timeline.push(TimelineEntry {
            threshold: s,
            distribution: u.clone(),
            changed,
        });
    }
    Ok(timeline)
}

/// Everything the metastability analysis produces for one system: the
/// cycles with their exponents and landings, and the timeline.
#[derive(Debug, Clone, Serialize)]
pub struct CycleSummary {
    pub members: Vec<String>,
    /// Interior vertices whose whole subtree lies inside the cycle.
    pub interior: Vec<String>,
    pub rank: usize,
    pub a: f64,
    pub c: f64,
    pub landings: Vec<Vec<f64>>,
    pub gates: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CycleReport {
    /// Exterior vertex labels, aligned with every distribution.
    pub labels: Vec<String>,
    pub cycles: Vec<CycleSummary>,
    pub timeline: Vec<TimelineEntry>,
}

/// Run the full metastability analysis.
pub fn cycle_report(
    graph: &WellGraph,
    table: &RateTable,
    branch: &BranchTable,
    u0: &[f64],
) -> Result<CycleReport> {
    let n = graph.leaf_count();
    let pv = pairwise_quasipotential(graph, table)?;
    let states: Vec<usize> = (0..n).collect();
    let hierarchy = cycle_hierarchy(&states, |i, j| pv.value(i, j))?;
    let mut cycles = Vec::new();
    for i in 0..hierarchy.cycles.len() {
        let cy = &hierarchy.cycles[i];
        let profile = exit_profile(graph, &pv, &hierarchy, i, branch)?;
        let interior: Vec<String> = (n..graph.edge_count())
            .filter(|&v| {
                graph
                    .leaves_under(v)
                    .iter()
                    .all(|l| cy.members.contains(l))
            })
            .map(|v| graph.vertex_label(v))
            .collect();
        cycles.push(CycleSummary {
            members: cy.members.iter().map(|&m| graph.vertex_label(m)).collect(),
            interior,
            rank: cy.rank,
            a: cy.a,
            c: cy.c,
            landings: profile.landings,
            gates: profile.gates.iter().map(|&g| graph.vertex_label(g)).collect(),
        });
    }
    Ok(CycleReport {
        labels: (0..n).map(|i| graph.vertex_label(i)).collect(),
        cycles,
        timeline: metastable_timeline(graph, table, branch, u0)?,
    })
}
