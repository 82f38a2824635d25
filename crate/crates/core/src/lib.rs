pub mod baseline;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod harness;
pub mod octomap;
pub mod perception;
pub mod planner;
pub mod ply;
pub mod scene;
pub mod splat;
pub mod target;

pub use error::{Error, Result};
