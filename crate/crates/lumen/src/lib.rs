//! Unpaired OC <-> VC image translation with an enforced shared latent
//! space, a synthetic fold-tube data pipeline with exact missed-surface
//! ground truth, and an evaluation harness.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pool;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
