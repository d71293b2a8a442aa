pub mod checkpoint;
pub mod config;
pub mod datamodel;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod ndiff;
pub mod objectives;
pub mod oracle;
pub mod prediction;
pub mod selftest;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
