//! A desk-scale 1D3V particle-in-cell / Monte Carlo plasma code with
//! built-in phase, communication, trace and I/O instrumentation.
//!
//! Units are normalized: lengths in Debye lengths, times in inverse plasma
//! periods, charges and masses in electron units.

pub mod collisions;
pub mod config;
pub mod domain;
pub mod error;
pub mod field;
pub mod instrument;
pub mod io;
pub mod mover;
pub mod particles;
pub mod rng;
pub mod runtime;
pub mod sim;
pub mod sorter;

pub use config::{load_config, parse_config, write_config, ScenarioConfig};
pub use error::{Error, Result};
pub use sim::{run, RankState, RunOptions, RunReport};
