pub mod allan;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod nav;
pub mod sampler;
pub mod schedule;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
pub use vimu_autodiff as autodiff;
