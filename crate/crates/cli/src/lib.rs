//! Command-line harness for the `ddalm` solvers: PGM input/output, corruption
//! synthesis, solver orchestration and CSV metrics.

pub mod cli;
pub mod metrics;
pub mod pgm;
pub mod run;
