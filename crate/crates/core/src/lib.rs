//! FocusTrack: a small-target single-object tracker with adaptive search
//! regions, attention-derived target masks and the tooling around it.

pub mod atm;
pub mod autodiff;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod losses;
pub mod macs;
pub mod model;
pub mod ntc1;
pub mod sampling;
pub mod sra;
pub mod synthdata;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
pub use sampling::BoundingBox;
