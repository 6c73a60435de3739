//! Optimization, synthetic data and the pretrain/fine-tune loop.

pub mod data;
pub mod optim;
pub mod trainer;
