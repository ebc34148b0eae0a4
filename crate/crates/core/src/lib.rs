//! Object-centric masked latent world model with object-level masking,
//! latent planning and influence-neighborhood oracles.

mod binio;
pub mod encoder;
pub mod error;
pub mod influence;
pub mod masking;
pub mod numerics;
pub mod planner;
pub mod predictor;
pub mod worldsim;

pub use error::{Error, Result};
