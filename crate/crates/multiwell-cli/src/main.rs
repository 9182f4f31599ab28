//! `multiwell`: experiment driver for a particle bouncing in a chain of
//! potential wells with small random energy kicks at every wall collision.
//!
//! Each subcommand reads a plain-text config, runs one experiment, and
//! writes its artifacts (CSV series, JSON reports, a gnuplot script where a
//! picture makes sense) plus a `manifest.json` into the output directory.
//! Reruns with the same config, seed, and flags reproduce every output byte
//! except the manifest's wall-clock field.

mod artifacts;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use multiwell::ladder::BranchMethod;
use multiwell::{Error, ErrorClass};

#[derive(Parser)]
#[command(
    name = "multiwell",
    version,
    about = "Simulate and analyze energy cascades in a chain of potential wells"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config's [sim] seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to $MULTIWELL_OUT, then ./out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Echo the main report as JSON on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run collision-by-collision trajectories and record them.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Trajectories to run (the first one is written as CSV).
        #[arg(long)]
        replicas: Option<u64>,
        /// Kick scale; overrides the config's [sim] epsilon.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Compare trajectories against the small-kick limit path.
    Average {
        #[command(flatten)]
        common: Common,
        /// Replicas; overrides the config's [sim] replicas.
        #[arg(long)]
        replicas: Option<u64>,
        /// Kick scale; overrides the config's [sim] epsilon.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Estimate branching probabilities at the interior vertices.
    Branching {
        #[command(flatten)]
        common: Common,
        /// Estimator: mc, ladder, or grid; default runs all three.
        #[arg(long)]
        method: Option<String>,
        /// Kick scale; overrides the config's [sim] epsilon.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Compute climb costs and the all-pairs quasi-potential table.
    Rate {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the probability of a rare energy climb.
    Rare {
        #[command(flatten)]
        common: Common,
        /// Replicas; overrides the config's [analysis] rare_replicas.
        #[arg(long)]
        replicas: Option<u64>,
        /// Kick scale; overrides the config's [sim] epsilon.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Cycle hierarchy, exit exponents, and the metastable timeline.
    Metastable {
        #[command(flatten)]
        common: Common,
        /// Quasi-potential table file (`FROM TO VALUE` lines) replacing the
        /// computed climb costs.
        #[arg(long, value_name = "PATH")]
        v_table: Option<PathBuf>,
        /// Comma-separated left-branch probabilities, one per interior
        /// vertex in ascending index order; default 0.5 each.
        #[arg(long, value_name = "P,P,...")]
        branch: Option<String>,
    },
    /// Run every structural invariant check and report pass/fail.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2u8,
                ErrorClass::Hypothesis => 3,
                ErrorClass::Numeric => 4,
                ErrorClass::Invariant => 5,
            })
        }
    }
}

fn dispatch(cli: Cli) -> multiwell::Result<()> {
    let (name, common): (&str, &Common) = match &cli.command {
        Cmd::Simulate { common, .. } => ("simulate", common),
        Cmd::Average { common, .. } => ("average", common),
        Cmd::Branching { common, .. } => ("branching", common),
        Cmd::Rate { common } => ("rate", common),
        Cmd::Rare { common, .. } => ("rare", common),
        Cmd::Metastable { common, .. } => ("metastable", common),
        Cmd::Validate { common } => ("validate", common),
    };
    let loaded = run::load(&common.config)?;
    let seed = common.seed.unwrap_or(loaded.parsed.sim.seed);
    let mut art = artifacts::Artifacts::create(artifacts::resolve_out_dir(
        common.out.as_deref(),
    ))?;

    let sim = &loaded.parsed.sim;
    let (params, echo) = match &cli.command {
        Cmd::Simulate {
            replicas, epsilon, ..
        } => run::simulate(
            &loaded,
            &mut art,
            seed,
            replicas.unwrap_or(1),
            epsilon.unwrap_or(sim.epsilon),
        )?,
        Cmd::Average {
            replicas, epsilon, ..
        } => run::average(
            &loaded,
            &mut art,
            seed,
            replicas.unwrap_or(sim.replicas),
            epsilon.unwrap_or(sim.epsilon),
        )?,
        Cmd::Branching {
            method, epsilon, ..
        } => {
            let method = method
                .as_deref()
                .map(str::parse::<BranchMethod>)
                .transpose()?;
            run::branching(
                &loaded,
                &mut art,
                seed,
                method,
                epsilon.unwrap_or(sim.epsilon),
            )?
        }
        Cmd::Rate { .. } => run::rate(&loaded, &mut art)?,
        Cmd::Rare {
            replicas, epsilon, ..
        } => run::rare(
            &loaded,
            &mut art,
            seed,
            replicas.unwrap_or(loaded.parsed.analysis.rare_replicas),
            epsilon.unwrap_or(sim.epsilon),
        )?,
        Cmd::Metastable {
            v_table, branch, ..
        } => run::metastable(&loaded, &mut art, v_table.as_deref(), branch.as_deref())?,
        Cmd::Validate { common } => run::validate(&loaded, &mut art, common.json)?,
    };

    let manifest = art.finish(name, &loaded.config_text, seed, params)?;
    if common.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&echo)
                .map_err(|e| Error::Config(format!("serializing stdout report: {e}")))?
        );
    } else {
        eprintln!("wrote {}", manifest.display());
    }
    Ok(())
}
