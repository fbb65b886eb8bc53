pub mod archive;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod network;
pub mod optim;
pub mod pwl;
pub mod seed;
pub mod tensor;
pub mod train;
