pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod fasm;
pub mod nn;
pub mod uiapm;
pub mod ram;
pub mod objectives;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod config;
pub mod dataset;
pub mod checkpoint;
pub mod train;
pub mod eval;
pub mod ablate;
pub mod synthesize;
