pub mod autodiff;
pub mod codec;
pub mod config;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod io;
pub mod layers;
pub mod lora;
pub mod model;
pub mod optim;
pub mod sdft;
pub mod train;
pub mod vocoder;

pub use error::{Error, Result};
