pub mod bench;
pub mod blockops;
pub mod cli;
pub mod error;
pub mod model;
pub mod oracle;
pub mod presets;
pub mod qp;
pub mod simulate;
pub mod synthesis;

pub use error::{Error, Result};
