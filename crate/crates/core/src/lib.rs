pub mod autograd;
pub mod baseline;
pub mod commands;
pub mod engine;
pub mod error;
pub mod flops;
pub mod io;
pub mod losses;
pub mod params;
pub mod predictor;
pub mod selection;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod vit;
