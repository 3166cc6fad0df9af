pub mod aloha;
pub mod amp;
pub mod embedded;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod pilots;
pub mod rng;
pub mod state_evolution;

pub use error::{Error, Result};
