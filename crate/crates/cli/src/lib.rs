//! Command-line front end: dataset generation, training, evaluation and
//! diagnostics over the `cylpose` library.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod plot;
