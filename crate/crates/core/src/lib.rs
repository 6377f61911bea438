pub mod assembly;
pub mod ddeim;
pub mod decsw;
pub mod dofs;
pub mod dpod;
pub mod error;
pub mod format;
pub mod linalg;
pub mod material;
pub mod mesh;
pub mod metrics;
pub mod solver;
pub mod tensor;

pub use error::{Error, MaterialError, Result};
