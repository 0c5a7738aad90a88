pub mod error;
pub mod linalg;
pub mod model;
pub mod quad;
pub mod rng;
pub mod amp;
pub mod maxmin;
pub mod se;
pub mod svg;
pub mod sf;
pub mod tap;

pub use error::{Error, Result};
