pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod geometry;
pub mod operator;
pub mod solvers;
pub mod turbulence;

pub use error::{Result, TomoError};
