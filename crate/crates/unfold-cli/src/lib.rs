//! Command-line front end for the unfolding toolkit: configuration
//! loading, the randomized identity suite, and the subcommand bodies.
//! The binary in `main.rs` is a thin argument-parsing shell over this
//! crate so integration tests can drive the same code paths in-process.

pub mod commands;
pub mod config;
pub mod verify;
