//! cardcomp: compositional cardinality estimation over relational schemas.
//!
//! The engine learns per-table selectivity models and per-join-key
//! distribution sketches from a labeled query workload — never from the
//! data itself — and composes them to estimate the cardinality of any
//! join query over the schema, including join shapes that never appeared
//! during training.

pub mod autodiff;
pub mod checkpoint;
pub mod composer;
pub mod encoding;
pub mod error;
pub mod evaluator;
pub mod models;
pub mod oracle;
pub mod query;
pub mod schema;
pub mod template;
pub mod trainer;
pub mod util;
pub mod workload;

pub use error::{Error, Result};
