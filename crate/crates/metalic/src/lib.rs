pub mod autodiff;
pub mod config;
pub mod adapt;
pub mod data;
pub mod embed;
pub mod eval;
pub mod objective;
pub mod landscapes;
pub mod model;
pub mod rng;
pub mod train;
pub mod tasks;
pub mod tensor;
