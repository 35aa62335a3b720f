//! Files: run configuration, PGM/PPM images and model checkpoints.

pub mod checkpoint;
pub mod config;
pub mod pnm;
