pub mod archive;
pub mod ast;
pub mod backbone;
pub mod cyclegan;
pub mod error;
pub mod gatys;
pub mod graph;
pub mod image;
pub mod params;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
