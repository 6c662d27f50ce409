pub mod autograd;
pub mod corpus;
pub mod disentangle;
pub mod encoders;
pub mod evaluation;
pub mod error;
pub mod generator;
pub mod layers;
pub mod model;
pub mod params;
pub mod polish;
pub mod retrieval;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
