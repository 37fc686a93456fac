pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod seed;
pub mod tensor;
pub mod train;

pub use autograd::{BlockMask, Graph, Var};
pub use data::{DomainSpec, PointPrompt, PromptRole, Provenance, Sample};
pub use error::{Error, Result};
pub use grid::{Grid, Point};
pub use params::{BoundParams, ParamId, ParamSet};
pub use tensor::Tensor;
