pub mod bcn;
pub mod bilateral;
pub mod checkpoint;
pub mod checks;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod manifest;
pub mod metrics;
pub mod mfrm;
pub mod model;
pub mod optim;
pub mod params;
pub mod supervision;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use model::ModelConfig;
pub use params::ModelParams;
pub use tensor::{Scalar, Tape, Tensor, Var};
