//! Simulation and analysis toolkit for a particle bouncing in a chain of
//! potential wells, losing or gaining a small random amount of energy at
//! every wall collision.
//!
//! The energy landscape is a row of wells separated by walls of different
//! heights. Above a wall the particle sweeps the merged region; below it the
//! two sides are separate wells. Merging wells bottom-up by wall height
//! yields a binary tree of "effective wells", each carrying its own pair of
//! kick distributions. The crate covers:
//!
//! - [`kernels`]: bounded kick distributions and their moments, cumulant
//!   transforms and density grids;
//! - [`topology`]: the well tree and the identification of a phase point
//!   with an edge of that tree;
//! - [`microsim`]: the event-driven collision-by-collision simulator;
//! - [`averaging`]: the deterministic small-kick limit of the energy motion;
//! - [`ladder`]: which side of a submerging wall the particle falls into,
//!   via random-walk ladder statistics;
//! - [`rate`]: large-deviation rate functions, climb costs, and tilted
//!   rare-event sampling;
//! - [`meta`]: exponential-timescale metastability analysis (minimal
//!   spanning arrow-graphs, cycle hierarchy, metastable timeline);
//! - [`config`]: the plain-text run configuration format.
//!
//! All randomness flows through explicitly seeded counter-style streams
//! ([`stream`]), so every result is reproducible bit for bit from
//! `(config, seed)`.

pub mod averaging;
pub mod config;
pub mod error;
pub mod kernels;
pub mod ladder;
pub mod meta;
pub mod microsim;
pub mod quad;
pub mod rate;
pub mod stream;
pub mod topology;

pub use error::{Error, ErrorClass, Result};
