pub mod encoder;
pub mod error;
pub mod eval;
pub mod hetgraph;
pub mod objective;
pub mod par;
pub mod tape;
pub mod transport;

pub use error::{HgotError, Result};
