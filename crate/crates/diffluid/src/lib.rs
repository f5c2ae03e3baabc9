//! Host-side companion of `diffluid-core`: built-in task scenes, validation
//! suites, TOML scene files, run artifacts and the command-line driver.

pub mod artifacts;
pub mod cli;
pub mod scenefile;
pub mod tasks;
pub mod validate;
