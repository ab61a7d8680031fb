pub mod analysis;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gating;
pub mod inference;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
