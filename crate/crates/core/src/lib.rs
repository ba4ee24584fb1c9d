//! Continual semantic segmentation with class-independent heads and
//! accumulative distillation.

pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod schedule;
pub mod synthdata;

pub use error::{Error, Result};
