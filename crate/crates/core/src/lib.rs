//! Brain-age regression from volumetric scans treated as bags of slice-stack
//! instances, pooled by dual graph-attention aggregators with a
//! feature-disentanglement branch.

pub mod ablate;
pub mod aggregator;
pub mod autograd;
pub mod backbone;
pub mod bagging;
pub mod checkpoint;
pub mod container;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod gat;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor;
