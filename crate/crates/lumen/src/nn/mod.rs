//! Minimal reverse-mode tensor engine backing the translation model.

pub mod adam;
pub mod graph;
pub mod params;
pub mod scalar;

pub use adam::Adam;
pub use graph::{Graph, NodeId, LOG_EPS};
pub use params::{GradStore, Param, ParamId, ParamStore};
pub use scalar::Scalar;
