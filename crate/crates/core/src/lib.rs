pub mod error;
pub mod experiment;
pub mod exec;
pub mod linalg;
pub mod mcmc;
pub mod models;
pub mod optim;
pub mod rng;
pub mod saem;
pub mod smc;
pub mod stats;
pub mod synlik;

pub use error::{Error, Result};
