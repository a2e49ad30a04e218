pub mod autodiff;
pub mod config;
mod container;
pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod sequence;
pub mod store;
pub mod synthetic;
pub mod train;
