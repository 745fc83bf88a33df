//! Joint reinforcement-learning search over label-noise cleaning, margin
//! softmax loss design and backbone width/depth scaling for an embedding
//! verification task.

pub mod agent;
pub mod backbone;
pub mod cleaner;
pub mod cli;
pub mod error;
pub mod marginloss;
pub mod pipeline;
pub mod searchspace;
pub mod synthdata;
pub mod traineval;
pub mod util;

pub use error::{Error, Result};
