pub mod baselines;
pub mod bench;
pub mod dgp;
pub mod error;
pub mod gcomp;
pub mod lattice;
pub mod nets;

pub use error::{Error, Result};
