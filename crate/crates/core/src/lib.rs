pub mod augment;
pub mod autodiff;
mod codec;
pub mod datamodel;
pub mod error;
pub mod localize;
pub mod losses;
pub mod network;
pub mod trainer;

pub use error::{Error, Result};
