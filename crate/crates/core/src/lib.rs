pub mod assembly;
pub mod basis;
pub mod coefficients;
mod compensated;
pub mod error;
pub mod expr;
pub mod fe_space;
pub mod hjb;
pub mod field;
pub mod lifting;
pub mod mesh;
pub mod norms;
pub mod problem;
pub mod quadrature;
pub mod report;
pub mod sparse;
pub mod verify;

pub use error::{FemError, Result};
