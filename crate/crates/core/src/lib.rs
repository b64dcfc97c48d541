pub mod error;
pub mod feeder;
pub mod formulation;
pub mod metrics;
pub mod oracle;
pub mod recovery;
pub mod scenario;
pub mod strategies;

pub use error::{OidError, Result};
