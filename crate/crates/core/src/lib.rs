pub mod autodiff;
pub mod dataio;
pub mod deformation;
pub mod error;
pub mod headmodel;
pub mod model;
pub mod nn;
pub mod radiance;
pub mod rendering;
pub mod training;

pub use error::{Error, Result};
