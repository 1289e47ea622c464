pub mod alm;
pub mod checkpoint;
pub mod counting;
pub mod datagen;
pub mod density;
pub mod error;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod supervisor;
pub mod training;

pub use error::{Error, Result};
