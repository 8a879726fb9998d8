pub mod checkpoint;
pub mod config;
pub mod crbm;
pub mod error;
pub mod eval;
pub mod head;
pub mod io;
pub mod loss;
pub mod mining;
pub mod optim;
pub mod pipeline;
pub mod preproc;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
pub mod workflow;
