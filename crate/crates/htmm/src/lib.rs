//! File formats, run manifests, the verification suite and the command
//! implementations behind the `htmm` binary.

pub use htmm_core;

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod models;
pub mod verify;

pub use error::{Error, Result};
