//! Plain-text run configuration.
//!
//! A config file is line oriented and diff friendly: five sections hold the
//! wall geometry, the leaf floors, the per-well kick distributions, the
//! simulation parameters, and the analysis budgets. `#` starts a comment.
//!
//! ```text
//! [walls]
//! 0.0            # end walls carry no height: they are infinitely high
//! 1.0  1.0       # interior walls are "position height" pairs
//! 2.0
//! cap 9.0        # abort energy standing in for the infinite ends
//!
//! [floors]
//! 0.5
//! 0.6
//!
//! [kicks]
//! uniform(-0.25,0.35)  uniform(-0.2,0.3)    # well 1: left and right kick
//! uniform(-0.25,0.35)  uniform(-0.2,0.3)    # well 2
//! uniform(-0.25,0.35)  uniform(-0.2,0.3)    # merged well 3
//!
//! [sim]
//! epsilon 0.001
//! horizon 4.0
//! grid_dt 0.01
//! replicas 200
//! seed 7
//! start O3 2.4   # vertex label and energy; defaults to mid-root
//!
//! [analysis]
//! epochs 1000000
//! ```
//!
//! Kick lines follow well numbering: leaves left to right, then merged
//! wells in ascending order of their separating wall height. The
//! distribution grammar is `family(arg,...)` with families `uniform(a,b)`,
//! `two_point(x1,p1,x2)`, `truncated_normal(mu,sigma,lo,hi)` and
//! `scaled_beta(alpha,beta,lo,hi)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{KickPair, PerturbationSpec};
use crate::topology::WellSystem;

/// Simulation block with defaults for every omitted key.
#[derive(Debug, Clone, Serialize)]
pub struct SimParams {
    pub epsilon: f64,
    pub horizon: f64,
    pub grid_dt: f64,
    pub replicas: u64,
    pub seed: u64,
    /// Starting vertex label and energy; `None` means the middle of the
    /// root interval.
    pub start: Option<(String, f64)>,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            epsilon: 0.01,
            horizon: 10.0,
            grid_dt: 0.01,
            replicas: 100,
            seed: 1,
            start: None,
        }
    }
}

/// Analysis budgets and targets with defaults for every omitted key.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisParams {
    /// Monte Carlo epochs for branching estimators.
    pub epochs: u64,
    /// Epochs for the ladder-statistics estimator.
    pub ladder_epochs: u64,
    /// Cells for the grid estimator.
    pub grid_points: usize,
    /// Collision budget per rare-event replica.
    pub max_collisions: u64,
    /// Rare-event climb target above the start energy.
    pub delta_h: f64,
    /// Rare-event replicas.
    pub rare_replicas: u64,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        AnalysisParams {
            epochs: 1_000_000,
            ladder_epochs: 10_000_000,
            grid_points: 4096,
            max_collisions: 10_000_000,
            delta_h: 0.3,
            rare_replicas: 20_000,
        }
    }
}

/// Everything a config file defines.
#[derive(Debug, Clone)]
pub struct ParsedConfig {
    pub system: WellSystem,
    pub sim: SimParams,
    pub analysis: AnalysisParams,
    /// Kick spec strings exactly as written, (left, right) per well.
    pub kick_text: Vec<(String, String)>,
}

fn grammar(line: usize, col: usize, msg: impl AsRef<str>) -> Error {
    Error::Config(format!("line {line}, column {col}: {}", msg.as_ref()))
}

fn parse_number(tok: &str, line: usize, col: usize, what: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| grammar(line, col, format!("expected a number for {what}, got `{tok}`")))
}

/// Parse one `family(arg,...)` distribution token.
pub fn parse_spec(tok: &str, line: usize, col: usize) -> Result<PerturbationSpec> {
    let open = tok
        .find('(')
        .ok_or_else(|| grammar(line, col, format!("expected `(` in distribution `{tok}`")))?;
    if !tok.ends_with(')') {
        return Err(grammar(
            line,
            col + tok.len(),
            format!("expected `)` closing distribution `{tok}`"),
        ));
    }
    let name = &tok[..open];
    let args: Vec<f64> = {
        let body = &tok[open + 1..tok.len() - 1];
        let mut vals = Vec::new();
        for (k, piece) in body.split(',').enumerate() {
            vals.push(parse_number(
                piece.trim(),
                line,
                col + open + 1,
                &format!("argument {} of {name}", k + 1),
            )?);
        }
        vals
    };
    let arity = |n: usize| -> Result<()> {
        if args.len() == n {
            Ok(())
        } else {
            Err(grammar(
                line,
                col,
                format!("{name} takes {n} arguments, got {}", args.len()),
            ))
        }
    };
    match name {
        "uniform" => {
            arity(2)?;
            PerturbationSpec::uniform(args[0], args[1])
        }
        "two_point" => {
            arity(3)?;
            PerturbationSpec::two_point(args[0], args[1], args[2])
        }
        "truncated_normal" => {
            arity(4)?;
            PerturbationSpec::truncated_normal(args[0], args[1], args[2], args[3])
        }
        "scaled_beta" => {
            arity(4)?;
            PerturbationSpec::scaled_beta(args[0], args[1], args[2], args[3])
        }
        other => Err(grammar(
            line,
            col,
            format!(
                "unknown distribution family `{other}` (uniform, two_point, \
                 truncated_normal, scaled_beta)"
            ),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Walls,
    Floors,
    Kicks,
    Sim,
    Analysis,
}

/// One non-empty content line: number, column of first content byte, text
/// with comments stripped.
struct Line<'a> {
    no: usize,
    col: usize,
    text: &'a str,
}

fn content_lines(text: &str) -> Vec<(Line<'_>, Option<Section>)> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let stripped = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let trimmed = stripped.trim();
        if trimmed.is_empty() {
            continue;
        }
        let col = stripped.find(|c: char| !c.is_whitespace()).unwrap_or(0) + 1;
        let section = match trimmed {
            "[walls]" => Some(Section::Walls),
            "[floors]" => Some(Section::Floors),
            "[kicks]" => Some(Section::Kicks),
            "[sim]" => Some(Section::Sim),
            "[analysis]" => Some(Section::Analysis),
            _ => None,
        };
        out.push((
            Line {
                no: i + 1,
                col,
                text: trimmed,
            },
            section,
        ));
    }
    out
}

/// Parse a config file into a validated well system plus parameters.
pub fn parse_config(text: &str) -> Result<ParsedConfig> {
    let mut walls: Vec<(f64, Option<f64>, usize)> = Vec::new();
    let mut cap: Option<f64> = None;
    let mut floors: Vec<f64> = Vec::new();
    let mut kick_pairs: Vec<KickPair> = Vec::new();
    let mut kick_text: Vec<(String, String)> = Vec::new();
    let mut sim = SimParams::default();
    let mut analysis = AnalysisParams::default();
    let mut seen_keys: Vec<String> = Vec::new();
    let mut section: Option<Section> = None;
    for (line, header) in content_lines(text) {
        if line.text.starts_with('[') {
            section = Some(header.ok_or_else(|| {
                grammar(
                    line.no,
                    line.col,
                    format!(
                        "unknown section `{}` ([walls], [floors], [kicks], [sim], [analysis])",
                        line.text
                    ),
                )
            })?);
            continue;
        }
        let tokens: Vec<&str> = line.text.split_whitespace().collect();
        match section {
            None => {
                return Err(grammar(
                    line.no,
                    line.col,
                    "content before the first section header",
                ));
            }
            Some(Section::Walls) => {
                if tokens[0] == "cap" {
                    if tokens.len() != 2 {
                        return Err(grammar(line.no, line.col, "cap takes one value"));
                    }
                    if cap.is_some() {
                        return Err(grammar(line.no, line.col, "duplicate cap"));
                    }
                    cap = Some(parse_number(tokens[1], line.no, line.col, "cap")?);
                } else {
                    let x = parse_number(tokens[0], line.no, line.col, "wall position")?;
                    let h = match tokens.len() {
                        1 => None,
                        2 => Some(parse_number(tokens[1], line.no, line.col, "wall height")?),
                        _ => {
                            return Err(grammar(
                                line.no,
                                line.col,
                                "a wall line is `position` or `position height`",
                            ));
                        }
                    };
                    walls.push((x, h, line.no));
                }
            }
            Some(Section::Floors) => {
                if tokens.len() != 1 {
                    return Err(grammar(line.no, line.col, "a floor line is one energy"));
                }
                floors.push(parse_number(tokens[0], line.no, line.col, "floor energy")?);
            }
            Some(Section::Kicks) => {
                if tokens.len() != 2 {
                    return Err(grammar(
                        line.no,
                        line.col,
                        "a kick line is two distributions: left-wall kick, right-wall kick",
                    ));
                }
                let col_eta = line.text.rfind(tokens[1]).unwrap_or(0) + line.col;
                let xi = parse_spec(tokens[0], line.no, line.col)?;
                let eta = parse_spec(tokens[1], line.no, col_eta)?;
                kick_pairs.push(KickPair::new(xi, eta)?);
                kick_text.push((tokens[0].to_string(), tokens[1].to_string()));
            }
            Some(sec @ (Section::Sim | Section::Analysis)) => {
                let key = tokens[0];
                let qualified = format!("{sec:?}::{key}");
                if seen_keys.contains(&qualified) {
                    return Err(grammar(line.no, line.col, format!("duplicate key `{key}`")));
                }
                seen_keys.push(qualified);
                let one = || -> Result<f64> {
                    if tokens.len() != 2 {
                        return Err(grammar(
                            line.no,
                            line.col,
                            format!("{key} takes one value"),
                        ));
                    }
                    parse_number(tokens[1], line.no, line.col, key)
                };
                match (sec, key) {
                    (Section::Sim, "epsilon") => sim.epsilon = one()?,
                    (Section::Sim, "horizon") => sim.horizon = one()?,
                    (Section::Sim, "grid_dt") => sim.grid_dt = one()?,
                    (Section::Sim, "replicas") => sim.replicas = one()? as u64,
                    (Section::Sim, "seed") => sim.seed = one()? as u64,
                    (Section::Sim, "start") => {
                        if tokens.len() != 3 {
                            return Err(grammar(
                                line.no,
                                line.col,
                                "start takes a vertex label and an energy",
                            ));
                        }
                        let h = parse_number(tokens[2], line.no, line.col, "start energy")?;
                        sim.start = Some((tokens[1].to_string(), h));
                    }
                    (Section::Analysis, "epochs") => analysis.epochs = one()? as u64,
                    (Section::Analysis, "ladder_epochs") => analysis.ladder_epochs = one()? as u64,
                    (Section::Analysis, "grid_points") => analysis.grid_points = one()? as usize,
                    (Section::Analysis, "max_collisions") => {
                        analysis.max_collisions = one()? as u64
                    }
                    (Section::Analysis, "delta_h") => analysis.delta_h = one()?,
                    (Section::Analysis, "rare_replicas") => analysis.rare_replicas = one()? as u64,
                    _ => {
                        return Err(grammar(
                            line.no,
                            line.col,
                            format!("unknown {sec:?} key `{key}`").to_lowercase(),
                        ));
                    }
                }
            }
        }
    }
    if walls.len() < 2 {
        return Err(Error::Config(format!(
            "[walls] needs at least the two end walls, got {}",
            walls.len()
        )));
    }
    for (i, &(x, h, no)) in walls.iter().enumerate() {
        let is_end = i == 0 || i == walls.len() - 1;
        if is_end && h.is_some() {
            return Err(grammar(
                no,
                1,
                format!("end wall at x = {x} is infinitely high and takes no height"),
            ));
        }
        if !is_end && h.is_none() {
            return Err(grammar(no, 1, format!("interior wall at x = {x} needs a height")));
        }
    }
    let cap = cap.ok_or_else(|| Error::Config("[walls] is missing the cap line".into()))?;
    let wells = walls.len() - 1;
    let expected_kicks = 2 * wells - 1;
    if kick_pairs.len() != expected_kicks {
        return Err(Error::Config(format!(
            "[kicks] needs one line per well: {wells} leaves plus {} merged = \
             {expected_kicks}, got {}",
            wells - 1,
            kick_pairs.len()
        )));
    }
    let system = WellSystem::new(
        walls.iter().map(|&(x, _, _)| x).collect(),
        walls[1..walls.len() - 1]
            .iter()
            .map(|&(_, h, _)| h.expect("checked above"))
            .collect(),
        floors,
        cap,
        kick_pairs,
    )?;
    Ok(ParsedConfig {
        system,
        sim,
        analysis,
        kick_text,
    })
}

/// Map a vertex label (`V3`, `O5`) to its edge index on a graph with
/// `leaf_count` leaves and `edge_count` edges.
pub fn vertex_index(label: &str, leaf_count: usize, edge_count: usize) -> Result<usize> {
    let (kind, digits) = label.split_at(1);
    let k: usize = digits
        .parse()
        .map_err(|_| Error::Config(format!("malformed vertex label `{label}`")))?;
    let idx = k
        .checked_sub(1)
        .ok_or_else(|| Error::Config(format!("vertex numbers start at 1: `{label}`")))?;
    match kind {
        "V" if idx < leaf_count => Ok(idx),
        "O" if idx >= leaf_count && idx < edge_count => Ok(idx),
        "V" | "O" => Err(Error::Config(format!(
            "vertex `{label}` does not exist (wells are V1..V{leaf_count}, \
             merge levels O{}..O{edge_count})",
            leaf_count + 1
        ))),
        _ => Err(Error::Config(format!(
            "vertex label `{label}` must start with V or O"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::build_graph;

    const SINGLE: &str = "\
[walls]
0.0
1.0
cap 10.0

[floors]
0.2

[kicks]
uniform(-0.25,0.35) uniform(-0.2,0.3)
";

    fn four_well_text() -> String {
        let kick = "uniform(-0.1,0.2) uniform(0.05,0.3)";
        format!(
            "# four wells
[walls]
0.0
1.0 1.0
2.3 2.0
3.9 3.0
5.8
cap 6.0

[floors]
0.2
0.3
0.5
0.4

[kicks]
{}

[sim]
epsilon 0.002
seed 9
start V1 0.8

[analysis]
epochs 50000
",
            vec![kick; 7].join("\n")
        )
    }

    #[test]
    fn minimal_single_well_parses() {
        let parsed = parse_config(SINGLE).unwrap();
        let graph = build_graph(&parsed.system).unwrap();
        assert_eq!(graph.edge_count(), 1);
        assert_eq!(graph.leaf_count(), 1);
        assert_eq!(parsed.sim.replicas, 100);
        assert_eq!(parsed.analysis.grid_points, 4096);
    }

    #[test]
    fn four_well_config_parses_with_additive_widths() {
        let parsed = parse_config(&four_well_text()).unwrap();
        let graph = build_graph(&parsed.system).unwrap();
        assert_eq!(graph.edge_count(), 7);
        // The width of every merged well is the sum of its children's.
        for e in graph.edges() {
            if let Some((l, r)) = e.children {
                let sum = graph.edge(l).width() + graph.edge(r).width();
                assert!((e.width() - sum).abs() <= 1e-12);
            }
        }
        assert_eq!(parsed.sim.epsilon, 0.002);
        assert_eq!(parsed.sim.seed, 9);
        assert_eq!(parsed.sim.start, Some(("V1".to_string(), 0.8)));
        assert_eq!(parsed.analysis.epochs, 50_000);
        assert_eq!(parsed.analysis.ladder_epochs, 10_000_000);
    }

    #[test]
    fn tied_wall_heights_name_both_walls() {
        let text = four_well_text().replace("3.9 3.0", "3.9 1.0");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("x = 1") && err.contains("x = 3.9"), "{err}");
    }

    #[test]
    fn unknown_section_is_rejected_with_line_number() {
        let text = SINGLE.replace("[floors]", "[bottoms]");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("line 6") && err.contains("[bottoms]"), "{err}");
    }

    #[test]
    fn malformed_distribution_reports_line_and_column() {
        let text = SINGLE.replace("uniform(-0.2,0.3)", "uniform(-0.2;0.3)");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("line 10"), "{err}");
        // Column of the offending argument inside the second spec token.
        assert!(err.contains("column 29"), "{err}");
    }

    #[test]
    fn unknown_family_is_rejected() {
        let text = SINGLE.replace("uniform(-0.25,0.35)", "gaussian(0,1)");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("gaussian"), "{err}");
    }

    #[test]
    fn wrong_floor_count_is_rejected() {
        let text = SINGLE.replace("0.2\n", "0.2\n0.4\n");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("floors"), "{err}");
    }

    #[test]
    fn end_wall_height_is_rejected() {
        let text = SINGLE.replace("[walls]\n0.0", "[walls]\n0.0 5.0");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("infinitely high"), "{err}");
    }

    #[test]
    fn missing_cap_is_rejected() {
        let text = SINGLE.replace("cap 10.0\n", "");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("cap"), "{err}");
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        let text = format!("{SINGLE}\n[sim]\nwarp 9\n");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("warp"), "{err}");
        let text = format!("{SINGLE}\n[sim]\nseed 1\nseed 2\n");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("duplicate key"), "{err}");
    }

    #[test]
    fn kick_lines_need_exactly_two_specs() {
        let text = SINGLE.replace(
            "uniform(-0.25,0.35) uniform(-0.2,0.3)",
            "uniform(-0.25,0.35)",
        );
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("two distributions"), "{err}");
    }

    #[test]
    fn wrong_kick_count_is_rejected() {
        let text = four_well_text();
        let chopped: String = {
            let mut lines: Vec<&str> = text.lines().collect();
            let last_kick = lines
                .iter()
                .rposition(|l| l.starts_with("uniform"))
                .unwrap();
            lines.remove(last_kick);
            lines.join("\n")
        };
        let err = parse_config(&chopped).unwrap_err().to_string();
        assert!(err.contains("7"), "{err}");
    }

    #[test]
    fn kick_text_is_retained_verbatim() {
        let parsed = parse_config(SINGLE).unwrap();
        assert_eq!(
            parsed.kick_text,
            vec![("uniform(-0.25,0.35)".to_string(), "uniform(-0.2,0.3)".to_string())]
        );
    }

    #[test]
    fn all_families_parse() {
        let text = SINGLE.replace(
            "uniform(-0.25,0.35) uniform(-0.2,0.3)",
            "two_point(1.0,0.75,-1.0) truncated_normal(0.1,0.2,-0.4,0.6)",
        );
        parse_config(&text).unwrap();
        let text = SINGLE.replace(
            "uniform(-0.25,0.35) uniform(-0.2,0.3)",
            "scaled_beta(2.0,3.0,-0.3,0.5) uniform(0.0,0.0)",
        );
        parse_config(&text).unwrap();
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = format!("# header\n\n{}\n# trailing\n", SINGLE.replace("[sim]", "[sim] # x"));
        parse_config(&text).unwrap();
    }

    #[test]
    fn content_before_a_section_is_rejected() {
        let err = parse_config("0.0\n[walls]\n").unwrap_err().to_string();
        assert!(err.contains("before the first section"), "{err}");
    }

    #[test]
    fn vertex_labels_map_to_edges() {
        assert_eq!(vertex_index("V1", 4, 7).unwrap(), 0);
        assert_eq!(vertex_index("V4", 4, 7).unwrap(), 3);
        assert_eq!(vertex_index("O5", 4, 7).unwrap(), 4);
        assert_eq!(vertex_index("O7", 4, 7).unwrap(), 6);
        assert!(vertex_index("O4", 4, 7).is_err());
        assert!(vertex_index("V5", 4, 7).is_err());
        assert!(vertex_index("W2", 4, 7).is_err());
        assert!(vertex_index("V0", 4, 7).is_err());
    }
}
