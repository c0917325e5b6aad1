pub mod autodiff;
pub mod data;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod regularizers;
pub mod theory;
pub mod variational;
pub mod vi;
pub mod harness;
