pub mod checkpoint;
pub mod data;
pub mod error;
pub mod grad;
pub mod interp;
pub mod intervene;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod sae;
pub mod train;
