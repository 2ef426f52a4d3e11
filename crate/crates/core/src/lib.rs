pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod fsio;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod params;
pub mod pooler;
pub mod search;
pub mod sts;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
