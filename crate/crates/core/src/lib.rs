pub mod corpus;
pub mod directeval;
pub mod error;
pub mod experiment;
pub mod finetune;
pub mod grammar;
pub mod io;
pub mod neural;
pub mod opacity;
pub mod probe;
pub mod rng;
pub mod semantics;
pub mod stats;

pub use error::{Error, Result};
