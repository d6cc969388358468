pub mod codec_sim;
pub mod config;
pub mod dpn;
pub mod error;
pub mod evaluation;
pub mod fen;
pub mod loss;
pub mod numerics;
pub mod preanalysis;
pub mod training;
pub mod video_io;
pub mod workers;

pub use error::{Error, Result};
