pub mod agent;
pub mod augment;
pub mod data;
pub mod envs;
pub mod error;
pub mod harness;
pub mod nn;
pub mod tdm;

pub use error::{Error, Result};
