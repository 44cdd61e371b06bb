pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod persist;
pub mod topk;
pub mod trainer;

pub use error::{Error, Result};
