//! The experiment subcommands: each one loads a config, drives the library,
//! and writes series/report artifacts plus a manifest into the output
//! directory.

use std::fs;
use std::path::Path;

use multiwell::averaging::{self, ChildSide};
use multiwell::config::{parse_config, vertex_index, ParsedConfig};
use multiwell::ladder::{branching_probabilities, BranchMethod};
use multiwell::meta::{cycle_report, descend_distribution, BranchTable};
use multiwell::microsim;
use multiwell::rate::{
    hamiltonian, hamiltonian_beta_derivs, legendre, pairwise_quasipotential,
    rare_event_probability, EdgeHamiltonian, PairwiseV, RareMethod, RateTable,
};
use multiwell::stream::Streams;
use multiwell::topology::{build_graph, WellGraph};
use multiwell::{Error, Result};
use serde_json::{json, Value};

use crate::artifacts::Artifacts;

/// (manifest params, value echoed on stdout under `--json`).
pub type RunResult = Result<(Value, Value)>;

/// Stream id layout: each purpose owns a wide block so no two estimators
/// ever draw from the same stream.
const SIM_BASE: u64 = 0;
const BRANCH_BASE: u64 = 1 << 32;
const BRANCH_SPAN: u64 = 16;
const RARE_BASE: u64 = 1 << 33;
const RARE_SPAN: u64 = 1 << 30;

/// Everything a subcommand needs from disk, parsed once.
pub struct Loaded {
    pub config_text: String,
    pub parsed: ParsedConfig,
    pub graph: WellGraph,
}

pub fn load(config: &Path) -> Result<Loaded> {
    let config_text = fs::read_to_string(config)?;
    let parsed = parse_config(&config_text)?;
    let graph = build_graph(&parsed.system)?;
    Ok(Loaded {
        config_text,
        parsed,
        graph,
    })
}

fn fmt(x: f64) -> String {
    if x != 0.0 && x.is_finite() && (x.abs() < 1e-4 || x.abs() >= 1e15) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

/// Starting state: the configured `start LABEL H`, or the middle of the
/// root edge's energy interval. The spatial coordinate is the midpoint of
/// the leftmost leaf well below the start edge, which locates to that edge
/// at the chosen energy.
fn start_point(graph: &WellGraph, parsed: &ParsedConfig) -> Result<(usize, f64, f64)> {
    let (edge, h0) = match &parsed.sim.start {
        Some((label, h)) => {
            let edge = vertex_index(label, graph.leaf_count(), graph.edge_count())?;
            let e = graph.edge(edge);
            if !(*h >= e.h_bot && *h <= e.h_top) {
                return Err(Error::Config(format!(
                    "start energy {h} lies outside the {label} interval [{}, {}]",
                    e.h_bot, e.h_top
                )));
            }
            (edge, *h)
        }
        None => {
            let root = graph.root();
            let e = graph.edge(root);
            (root, 0.5 * (e.h_bot + e.h_top))
        }
    };
    let leaf = graph.leaves_under(edge)[0];
    let le = graph.edge(leaf);
    Ok((edge, h0, 0.5 * (le.x_left + le.x_right)))
}

fn under(graph: &WellGraph, node: usize, ancestor: usize) -> bool {
    let mut at = node;
    loop {
        if at == ancestor {
            return true;
        }
        match graph.edge(at).parent {
            Some(p) => at = p,
            None => return false,
        }
    }
}

/// Branch choices steering a limit path from `start` toward the subtree
/// holding `target`, padded with `Left` once the target is no longer below
/// (so the path always reaches a leaf).
fn decisions_toward(graph: &WellGraph, start: usize, target: usize) -> Vec<ChildSide> {
    let mut out = Vec::new();
    let mut edge = start;
    while let Some((l, r)) = graph.edge(edge).children {
        let side = if under(graph, target, l) {
            ChildSide::Left
        } else if under(graph, target, r) {
            ChildSide::Right
        } else {
            ChildSide::Left
        };
        out.push(side);
        edge = match side {
            ChildSide::Left => l,
            ChildSide::Right => r,
        };
    }
    out
}

/// Index of the entry at quantile `q` of an ascending-sorted sample.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

const PLOT_SIMULATE: &str = "\
# Render with: gnuplot plot.gnuplot
set datafile separator ','
set key autotitle columnhead
set xlabel 't (rescaled)'
set ylabel 'energy'
set terminal svg
set output 'trajectory.svg'
plot 'trajectory.csv' using 1:3 with lines title 'H-hat', \\
     'trajectory.csv' using 1:2 with steps title 'H-step'
";

const PLOT_AVERAGE: &str = "\
# Render with: gnuplot plot.gnuplot
set datafile separator ','
set key autotitle columnhead
set xlabel 't (rescaled)'
set ylabel 'energy'
set terminal svg
set output 'average.svg'
plot 'trajectory0.csv' using 1:2 with lines title 'replica 0', \\
     'limit_path.csv' using 1:2 with linespoints title 'limit path'
";

const PLOT_TIMELINE: &str = "\
# Render with: gnuplot plot.gnuplot
set datafile separator ','
set key autotitle columnhead
set xlabel 'exit exponent threshold'
set ylabel 'mass'
set yrange [0:1]
set terminal svg
set output 'timeline.svg'
plot for [col=3:*] 'timeline.csv' using 1:col with steps
";

/// Run collision-by-collision trajectories; the first replica's grid and
/// collision log are written as CSV series.
pub fn simulate(
    loaded: &Loaded,
    art: &mut Artifacts,
    seed: u64,
    replicas: u64,
    epsilon: f64,
) -> RunResult {
    let sim = &loaded.parsed.sim;
    let graph = &loaded.graph;
    let (edge0, h0, q0) = start_point(graph, &loaded.parsed)?;
    let streams = Streams::from_seed(seed);
    let mut runs = Vec::new();
    for r in 0..replicas {
        let mut stream = streams.stream(SIM_BASE + r);
        let rec = microsim::run(graph, h0, q0, epsilon, sim.horizon, sim.grid_dt, &mut stream)?;
        if r == 0 {
            let rows: Vec<Vec<String>> = rec
                .grid
                .iter()
                .map(|g| {
                    vec![
                        fmt(g.t),
                        fmt(g.h_step),
                        fmt(g.h_hat),
                        g.edge.to_string(),
                        graph.vertex_label(g.edge),
                    ]
                })
                .collect();
            art.write_csv("trajectory.csv", "t,h_step,h_hat,edge,vertex", &rows)?;
            let rows: Vec<Vec<String>> = rec
                .events
                .iter()
                .map(|e| {
                    vec![
                        fmt(e.t),
                        e.side.as_str().to_string(),
                        fmt(e.kick),
                        fmt(e.h_pre),
                        fmt(e.h_post),
                        e.edge.to_string(),
                        e.edge_after.to_string(),
                    ]
                })
                .collect();
            art.write_csv("events.csv", "t,side,kick,h_pre,h_post,edge,edge_after", &rows)?;
            art.write_text("plot.gnuplot", PLOT_SIMULATE)?;
        }
        runs.push(json!({
            "replica": r,
            "collisions": rec.events.len(),
            "final_vertex": graph.vertex_label(rec.final_state.edge),
            "final_h": rec.final_state.h,
            "natural_time": rec.final_state.natural_time,
            "max_step_jump": rec.sup_hat_step_distance(),
        }));
    }
    let summary = json!({
        "start": { "vertex": graph.vertex_label(edge0), "h0": h0, "q0": q0 },
        "epsilon": epsilon,
        "horizon": sim.horizon,
        "grid_dt": sim.grid_dt,
        "replicas": replicas,
        "runs": runs,
    });
    art.write_json("summary.json", &summary)?;
    let params = json!({
        "epsilon": epsilon,
        "horizon": sim.horizon,
        "grid_dt": sim.grid_dt,
        "replicas": replicas,
        "start": { "vertex": graph.vertex_label(edge0), "h0": h0 },
    });
    Ok((params, summary))
}

/// Compare simulated trajectories against the deterministic limit path
/// coupled to each replica's realized branch choices; report the
/// distribution of the sup-distance over replicas.
pub fn average(
    loaded: &Loaded,
    art: &mut Artifacts,
    seed: u64,
    replicas: u64,
    epsilon: f64,
) -> RunResult {
    let sim = &loaded.parsed.sim;
    let graph = &loaded.graph;
    let (edge0, h0, q0) = start_point(graph, &loaded.parsed)?;
    let streams = Streams::from_seed(seed);
    let mut sups = Vec::with_capacity(replicas as usize);
    let mut env_rows = Vec::new();
    for r in 0..replicas {
        let mut stream = streams.stream(SIM_BASE + r);
        let rec = microsim::run(graph, h0, q0, epsilon, sim.horizon, sim.grid_dt, &mut stream)?;
        let decisions = decisions_toward(graph, edge0, rec.final_state.edge);
        let path = averaging::limit_path(graph, edge0, h0, &decisions)?;
        let report = averaging::compare(&rec, &path);
        let mut sup = report.sup_before_first_vertex;
        for seg in &report.per_edge {
            if let Some(d) = seg.sup_distance {
                sup = sup.max(d);
            }
        }
        if r == 0 {
            let rows: Vec<Vec<String>> = path
                .breakpoints()
                .iter()
                .map(|&(t, h)| vec![fmt(t), fmt(h)])
                .collect();
            art.write_csv("limit_path.csv", "t,h", &rows)?;
            let rows: Vec<Vec<String>> = rec
                .grid
                .iter()
                .map(|g| vec![fmt(g.t), fmt(g.h_hat)])
                .collect();
            art.write_csv("trajectory0.csv", "t,h_hat", &rows)?;
            art.write_text("plot.gnuplot", PLOT_AVERAGE)?;
        }
        env_rows.push(vec![
            r.to_string(),
            fmt(sup),
            graph.vertex_label(rec.final_state.edge),
        ]);
        sups.push(sup);
    }
    art.write_csv("envelope.csv", "replica,sup_error,final_vertex", &env_rows)?;
    let mut sorted = sups.clone();
    sorted.sort_by(f64::total_cmp);
    let summary = json!({
        "start": { "vertex": graph.vertex_label(edge0), "h0": h0 },
        "epsilon": epsilon,
        "horizon": sim.horizon,
        "replicas": replicas,
        "sup_error": {
            "median": percentile(&sorted, 0.50),
            "q95": percentile(&sorted, 0.95),
            "max": sorted.last().copied().unwrap_or(f64::NAN),
            "mean": sups.iter().sum::<f64>() / sups.len().max(1) as f64,
        },
    });
    art.write_json("summary.json", &summary)?;
    let params = json!({
        "epsilon": epsilon,
        "horizon": sim.horizon,
        "grid_dt": sim.grid_dt,
        "replicas": replicas,
        "start": { "vertex": graph.vertex_label(edge0), "h0": h0 },
    });
    Ok((params, summary))
}

/// Estimate the branching probabilities at every interior vertex with one
/// or all of the estimation methods.
pub fn branching(
    loaded: &Loaded,
    art: &mut Artifacts,
    seed: u64,
    method: Option<BranchMethod>,
    epsilon: f64,
) -> RunResult {
    let graph = &loaded.graph;
    let an = &loaded.parsed.analysis;
    let streams = Streams::from_seed(seed);
    let methods = match method {
        Some(m) => vec![m],
        None => vec![BranchMethod::Mc, BranchMethod::Ladder, BranchMethod::Grid],
    };
    let mut rows = Vec::new();
    let mut entries = Vec::new();
    let mut slot = 0u64;
    for e in graph.edges() {
        if e.children.is_none() {
            continue;
        }
        for &m in &methods {
            let budget = match m {
                BranchMethod::Mc => an.epochs,
                BranchMethod::Ladder => an.ladder_epochs,
                BranchMethod::Grid => an.grid_points as u64,
            };
            let out = branching_probabilities(
                graph,
                e.index,
                m,
                budget,
                epsilon,
                &streams,
                BRANCH_BASE + slot * BRANCH_SPAN,
            )?;
            slot += 1;
            rows.push(vec![
                graph.vertex_label(e.index),
                m.to_string(),
                budget.to_string(),
                fmt(out.p_left),
                fmt(out.p_right),
                out.ci95.map(fmt).unwrap_or_default(),
                out.fell_back_to_parity_chain.to_string(),
            ]);
            entries.push(json!({
                "vertex": graph.vertex_label(e.index),
                "method": m.to_string(),
                "budget": budget,
                "p_left": out.p_left,
                "p_right": out.p_right,
                "ci95": out.ci95,
                "fell_back_to_parity_chain": out.fell_back_to_parity_chain,
            }));
        }
    }
    art.write_csv(
        "branching.csv",
        "vertex,method,budget,p_left,p_right,ci95,fell_back",
        &rows,
    )?;
    let report = Value::Array(entries);
    art.write_json("branching.json", &report)?;
    let params = json!({
        "methods": methods.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
        "epochs": an.epochs,
        "ladder_epochs": an.ladder_epochs,
        "grid_points": an.grid_points,
        "epsilon": epsilon,
    });
    Ok((params, report))
}

/// Compute the adjacent climb costs and the all-pairs quasi-potential
/// table, with minimizing routes between leaf vertices.
pub fn rate(loaded: &Loaded, art: &mut Artifacts) -> RunResult {
    let graph = &loaded.graph;
    let table = RateTable::compute(graph)?;
    let pv = pairwise_quasipotential(graph, &table)?;
    art.write_json("rate_table.json", &table)?;
    let mut rows = Vec::new();
    for (i, row) in pv.v.iter().enumerate() {
        let mut cells = vec![pv.labels[i].clone()];
        cells.extend(row.iter().map(|&x| fmt(x)));
        rows.push(cells);
    }
    let header = format!("from,{}", pv.labels.join(","));
    art.write_csv("pairwise_v.csv", &header, &rows)?;
    let mut routes = Vec::new();
    for i in 0..graph.leaf_count() {
        for j in 0..graph.leaf_count() {
            if i == j {
                continue;
            }
            if let Some(route) = pv.route(i, j) {
                routes.push(json!({
                    "from": pv.labels[i],
                    "to": pv.labels[j],
                    "value": pv.v[i][j],
                    "route": route.iter().map(|&k| pv.labels[k].clone()).collect::<Vec<_>>(),
                }));
            }
        }
    }
    let report = json!({
        "labels": pv.labels,
        "v": pv.v,
        "leaf_routes": routes,
    });
    art.write_json("pairwise_v.json", &report)?;
    Ok((json!({}), report))
}

/// Estimate the probability of climbing `delta_h` above the start energy
/// before the horizon, by naive counting and by tilted importance
/// sampling.
pub fn rare(
    loaded: &Loaded,
    art: &mut Artifacts,
    seed: u64,
    replicas: u64,
    epsilon: f64,
) -> RunResult {
    let graph = &loaded.graph;
    let sim = &loaded.parsed.sim;
    let an = &loaded.parsed.analysis;
    let (edge0, h0, _) = start_point(graph, &loaded.parsed)?;
    let streams = Streams::from_seed(seed);
    let mut estimates = Vec::new();
    for (mi, method) in [RareMethod::Naive, RareMethod::Tilted].into_iter().enumerate() {
        let est = rare_event_probability(
            graph,
            edge0,
            h0,
            an.delta_h,
            sim.horizon,
            epsilon,
            method,
            replicas,
            an.max_collisions,
            &streams,
            RARE_BASE + mi as u64 * RARE_SPAN,
        )?;
        estimates.push(est);
    }
    let rows: Vec<Vec<String>> = estimates
        .iter()
        .map(|e| {
            vec![
                e.method.to_string(),
                fmt(e.probability),
                fmt(e.se),
                fmt(e.ci_lo),
                fmt(e.ci_hi),
                fmt(e.log_rate),
                e.hits.to_string(),
                e.replicas.to_string(),
                fmt(e.mean_collisions),
            ]
        })
        .collect();
    art.write_csv(
        "rare.csv",
        "method,probability,se,ci_lo,ci_hi,log_rate,hits,replicas,mean_collisions",
        &rows,
    )?;
    let report = serde_json::to_value(&estimates)
        .map_err(|e| Error::Config(format!("serializing rare estimates: {e}")))?;
    art.write_json("rare.json", &report)?;
    let params = json!({
        "delta_h": an.delta_h,
        "epsilon": epsilon,
        "horizon": sim.horizon,
        "replicas": replicas,
        "max_collisions": an.max_collisions,
        "start": { "vertex": graph.vertex_label(edge0), "h0": h0 },
    });
    Ok((params, report))
}

/// Parse a `FROM TO VALUE` quasi-potential table file; `#` starts a
/// comment. Climb entries must all be present; descents default to zero.
fn load_v_table(path: &Path, graph: &WellGraph) -> Result<RateTable> {
    let text = fs::read_to_string(path)?;
    let mut table = RateTable::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(Error::Config(format!(
                "v-table line {}: expected `FROM TO VALUE`, got `{line}`",
                idx + 1
            )));
        }
        let from = vertex_index(toks[0], graph.leaf_count(), graph.edge_count())?;
        let to = vertex_index(toks[1], graph.leaf_count(), graph.edge_count())?;
        let value: f64 = toks[2].parse().map_err(|_| {
            Error::Config(format!(
                "v-table line {}: expected a number, got `{}`",
                idx + 1,
                toks[2]
            ))
        })?;
        table.set(graph, from, to, value)?;
    }
    for e in graph.edges() {
        let Some(p) = e.parent else { continue };
        if table.get(p, e.index).is_none() {
            table.set(graph, p, e.index, 0.0)?;
        }
        if table.get(e.index, p).is_none() {
            return Err(Error::Config(format!(
                "v-table is missing the climb {} -> {}",
                graph.vertex_label(e.index),
                graph.vertex_label(p)
            )));
        }
    }
    Ok(table)
}

fn parse_branch_flag(graph: &WellGraph, flag: Option<&str>) -> Result<(BranchTable, Vec<f64>)> {
    let interior = graph.edge_count() - graph.leaf_count();
    let p_left = match flag {
        Some(s) => {
            let mut v = Vec::new();
            for tok in s.split(',') {
                let p: f64 = tok.trim().parse().map_err(|_| {
                    Error::Config(format!("--branch: expected a number, got `{tok}`"))
                })?;
                v.push(p);
            }
            v
        }
        None => vec![0.5; interior],
    };
    let table = BranchTable::new(graph, p_left.clone())?;
    Ok((table, p_left))
}

/// Initial leaf mass: a point mass at a configured leaf start, the descent
/// distribution from a configured interior start, or the descent
/// distribution from the root when no start is configured.
fn start_mass(graph: &WellGraph, parsed: &ParsedConfig, branch: &BranchTable) -> Result<Vec<f64>> {
    let edge = match &parsed.sim.start {
        Some((label, _)) => vertex_index(label, graph.leaf_count(), graph.edge_count())?,
        None => graph.root(),
    };
    if graph.edge(edge).is_leaf() {
        let mut u = vec![0.0; graph.leaf_count()];
        u[edge] = 1.0;
        Ok(u)
    } else {
        descend_distribution(graph, edge, branch)
    }
}

/// Build the cycle hierarchy and metastable timeline, from computed climb
/// costs or a user-supplied quasi-potential table.
pub fn metastable(
    loaded: &Loaded,
    art: &mut Artifacts,
    v_table: Option<&Path>,
    branch_flag: Option<&str>,
) -> RunResult {
    let graph = &loaded.graph;
    let table = match v_table {
        Some(p) => load_v_table(p, graph)?,
        None => RateTable::compute(graph)?,
    };
    let (branch, p_left) = parse_branch_flag(graph, branch_flag)?;
    let u0 = start_mass(graph, &loaded.parsed, &branch)?;
    let report = cycle_report(graph, &table, &branch, &u0)?;
    let mut rows = Vec::new();
    for entry in &report.timeline {
        let mut cells = vec![fmt(entry.threshold), entry.changed.to_string()];
        cells.extend(entry.distribution.iter().map(|&x| fmt(x)));
        rows.push(cells);
    }
    let leaf_labels: Vec<String> = (0..graph.leaf_count())
        .map(|i| graph.vertex_label(i))
        .collect();
    let header = format!("threshold,changed,{}", leaf_labels.join(","));
    art.write_csv("timeline.csv", &header, &rows)?;
    art.write_text("plot.gnuplot", PLOT_TIMELINE)?;
    let report_value = serde_json::to_value(&report)
        .map_err(|e| Error::Config(format!("serializing cycle report: {e}")))?;
    art.write_json("report.json", &report_value)?;
    let params = json!({
        "v_table": v_table.map(|p| p.display().to_string()),
        "branch": p_left,
        "u0": u0,
    });
    Ok((params, report_value))
}

type CheckResult = std::result::Result<(), String>;

fn check_all<I>(name: &str, items: I) -> CheckResult
where
    I: IntoIterator<Item = Option<String>>,
{
    for item in items {
        if let Some(msg) = item {
            return Err(format!("{name}: {msg}"));
        }
    }
    Ok(())
}

fn checks_on_graph(loaded: &Loaded) -> Vec<(&'static str, CheckResult)> {
    let graph = &loaded.graph;
    let sim = &loaded.parsed.sim;
    let mut checks: Vec<(&'static str, CheckResult)> = Vec::new();

    checks.push((
        "tree-shape",
        (|| {
            if graph.edge_count() != 2 * graph.leaf_count() - 1 {
                return Err(format!(
                    "{} edges for {} leaves",
                    graph.edge_count(),
                    graph.leaf_count()
                ));
            }
            let roots = graph.edges().iter().filter(|e| e.parent.is_none()).count();
            if roots != 1 {
                return Err(format!("{roots} parentless edges"));
            }
            Ok(())
        })(),
    ));

    checks.push((
        "interval-nesting",
        check_all(
            "child top must equal parent bottom",
            graph.edges().iter().map(|e| {
                let Some(p) = e.parent else { return None };
                let pe = graph.edge(p);
                (e.h_top != pe.h_bot).then(|| {
                    format!(
                        "{}: {} vs {}",
                        graph.vertex_label(e.index),
                        e.h_top,
                        pe.h_bot
                    )
                })
            }),
        ),
    ));

    checks.push((
        "width-additivity",
        check_all(
            "merged width must be the sum of child widths",
            graph.edges().iter().map(|e| {
                let Some((l, r)) = e.children else { return None };
                let sum = graph.edge(l).width() + graph.edge(r).width();
                ((e.width() - sum).abs() > 1e-9 * e.width().max(1.0)).then(|| {
                    format!("{}: {} vs {}", graph.vertex_label(e.index), e.width(), sum)
                })
            }),
        ),
    ));

    checks.push((
        "cap-above-interior-walls",
        check_all(
            "every merge level must sit below the cap",
            graph.edges().iter().map(|e| {
                (!e.is_leaf() && e.h_bot >= graph.energy_cap()).then(|| {
                    format!(
                        "{} at {} vs cap {}",
                        graph.vertex_label(e.index),
                        e.h_bot,
                        graph.energy_cap()
                    )
                })
            }),
        ),
    ));

    checks.push((
        "leaf-floors-below-merge-levels",
        check_all(
            "leaf floor must sit below its merge level",
            graph.edges().iter().map(|e| {
                let Some(p) = e.parent else { return None };
                (e.is_leaf() && e.h_bot >= graph.edge(p).h_bot).then(|| {
                    format!(
                        "{} floor {} vs {} at {}",
                        graph.vertex_label(e.index),
                        e.h_bot,
                        graph.vertex_label(p),
                        graph.edge(p).h_bot
                    )
                })
            }),
        ),
    ));

    checks.push((
        "kick-support-bounded",
        check_all(
            "kick supports must be bounded",
            graph.edges().iter().map(|e| {
                let (lo, hi) = graph.kick(e.index).support_sum();
                (!lo.is_finite() || !hi.is_finite())
                    .then(|| format!("well {}: support ({lo}, {hi})", e.index + 1))
            }),
        ),
    ));

    checks.push((
        "kick-mean-loss-positive",
        check_all(
            "mean energy loss per collision pair must be positive",
            graph.edges().iter().map(|e| {
                let m = graph.kick(e.index).mean_sum();
                (!(m > 0.0)).then(|| format!("well {}: mean loss {m}", e.index + 1))
            }),
        ),
    ));

    checks.push((
        "kick-scale-vs-energy-gaps",
        microsim::validate_kick_scale(graph, sim.epsilon).map_err(|e| e.to_string()),
    ));

    checks.push((
        "hamiltonian-vanishes-at-zero-tilt",
        check_all(
            "H(h, 0) must be exactly zero",
            graph.edges().iter().map(|e| {
                let h = 0.5 * (e.h_bot + e.h_top);
                let eh = EdgeHamiltonian::interior(graph, e.index);
                match hamiltonian(&eh, h, 0.0) {
                    Ok(v) if v == 0.0 => None,
                    Ok(v) => Some(format!("{}: {v}", graph.vertex_label(e.index))),
                    Err(err) => Some(format!("{}: {err}", graph.vertex_label(e.index))),
                }
            }),
        ),
    ));

    checks.push((
        "legendre-vanishes-at-drift-slope",
        check_all(
            "L(h, drift) must vanish",
            graph.edges().iter().map(|e| {
                let h = 0.5 * (e.h_bot + e.h_top);
                let run = || -> Result<f64> {
                    let eh = EdgeHamiltonian::interior(graph, e.index);
                    let (drift, _) = hamiltonian_beta_derivs(&eh, h, 0.0)?;
                    Ok(legendre(&eh, h, drift)?.0)
                };
                match run() {
                    Ok(l) if l.abs() <= 1e-10 => None,
                    Ok(l) => Some(format!("{}: L = {l}", graph.vertex_label(e.index))),
                    Err(err) => Some(format!("{}: {err}", graph.vertex_label(e.index))),
                }
            }),
        ),
    ));

    checks
}

fn checks_on_rates(loaded: &Loaded) -> Vec<(&'static str, CheckResult)> {
    let graph = &loaded.graph;
    let mut checks: Vec<(&'static str, CheckResult)> = Vec::new();
    let table = match RateTable::compute(graph) {
        Ok(t) => t,
        Err(e) => {
            checks.push(("rate-table-computable", Err(e.to_string())));
            return checks;
        }
    };
    checks.push(("rate-table-computable", Ok(())));

    checks.push((
        "descent-costs-zero",
        check_all(
            "descending entries must be exactly zero",
            table.entries.iter().map(|e| {
                let descend = graph.edge(e.to).parent == Some(e.from);
                (descend && e.value != 0.0)
                    .then(|| format!("{} -> {}: {}", e.from_label, e.to_label, e.value))
            }),
        ),
    ));

    checks.push((
        "climb-costs-nonnegative",
        check_all(
            "climbing entries must be nonnegative",
            table.entries.iter().map(|e| {
                (e.value < 0.0 || e.value.is_nan())
                    .then(|| format!("{} -> {}: {}", e.from_label, e.to_label, e.value))
            }),
        ),
    ));

    let pv = match pairwise_quasipotential(graph, &table) {
        Ok(pv) => pv,
        Err(e) => {
            checks.push(("pairwise-quasipotential", Err(e.to_string())));
            return checks;
        }
    };
    checks.push(("pairwise-quasipotential", Ok(())));
    checks.push(("pairwise-diagonal-zero", check_diagonal(&pv)));
    checks.push(("pairwise-triangle-inequality", check_triangle(&pv)));
    checks.push((
        "interior-vertex-instability",
        check_all(
            "every merge vertex must reach some leaf for free",
            graph.edges().iter().map(|e| {
                if e.is_leaf() {
                    return None;
                }
                (0..graph.leaf_count())
                    .all(|k| pv.value(e.index, k) != 0.0)
                    .then(|| graph.vertex_label(e.index))
            }),
        ),
    ));

    let timeline = (|| -> Result<Vec<multiwell::meta::TimelineEntry>> {
        let branch = BranchTable::even(graph);
        let u0 = if graph.edge(graph.root()).is_leaf() {
            vec![1.0]
        } else {
            descend_distribution(graph, graph.root(), &branch)?
        };
        Ok(cycle_report(graph, &table, &branch, &u0)?.timeline)
    })();
    match timeline {
        Ok(timeline) => {
            checks.push((
                "timeline-rows-normalized",
                check_all(
                    "each timeline row must be a distribution",
                    timeline.iter().map(|entry| {
                        let sum: f64 = entry.distribution.iter().sum();
                        let bad = (sum - 1.0).abs() > 1e-12
                            || entry.distribution.iter().any(|&x| x < 0.0);
                        bad.then(|| format!("threshold {}: sum {sum}", entry.threshold))
                    }),
                ),
            ));
            checks.push((
                "ground-mass-monotone",
                (|| {
                    let Some(last) = timeline.last() else { return Ok(()) };
                    let ground = last
                        .distribution
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(i, _)| i)
                        .unwrap_or(0);
                    let mut prev = f64::NEG_INFINITY;
                    for entry in &timeline {
                        let m = entry.distribution[ground];
                        if m + 1e-12 < prev {
                            return Err(format!(
                                "mass at {} drops from {prev} to {m} at threshold {}",
                                graph.vertex_label(ground),
                                entry.threshold
                            ));
                        }
                        prev = m;
                    }
                    Ok(())
                })(),
            ));
        }
        Err(e) => checks.push(("metastable-timeline", Err(e.to_string()))),
    }
    checks
}

fn check_diagonal(pv: &PairwiseV) -> CheckResult {
    for (i, row) in pv.v.iter().enumerate() {
        if row[i] != 0.0 {
            return Err(format!("V({0}, {0}) = {1}", pv.labels[i], row[i]));
        }
    }
    Ok(())
}

fn check_triangle(pv: &PairwiseV) -> CheckResult {
    let n = pv.v.len();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if pv.v[i][k] > pv.v[i][j] + pv.v[j][k] + 1e-9 {
                    return Err(format!(
                        "V({}, {}) = {} exceeds {} + {}",
                        pv.labels[i], pv.labels[k], pv.v[i][k], pv.v[i][j], pv.v[j][k]
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Run the whole invariant suite on the configured system, print one line
/// per check, and fail (exit class: invariant) if any check fails.
pub fn validate(loaded: &Loaded, art: &mut Artifacts, echo_json: bool) -> RunResult {
    let mut checks = checks_on_graph(loaded);
    checks.extend(checks_on_rates(loaded));

    let mut lines = Vec::new();
    let mut failed = 0usize;
    for (name, outcome) in &checks {
        match outcome {
            Ok(()) => lines.push(format!("ok   {name}")),
            Err(msg) => {
                failed += 1;
                lines.push(format!("FAIL {name}: {msg}"));
            }
        }
    }
    lines.push(format!("{} checks, {failed} failed", checks.len()));
    let text = lines.join("\n") + "\n";
    if !echo_json {
        print!("{text}");
    }
    art.write_text("validate.txt", &text)?;
    let report = json!({
        "checks": checks
            .iter()
            .map(|(name, outcome)| {
                json!({
                    "name": name,
                    "passed": outcome.is_ok(),
                    "message": outcome.as_ref().err(),
                })
            })
            .collect::<Vec<_>>(),
        "failed": failed,
    });
    art.write_json("validate.json", &report)?;
    if failed > 0 {
        return Err(Error::Invariant(format!(
            "{failed} invariant check(s) failed"
        )));
    }
    Ok((json!({ "checks": checks.len() }), report))
}
