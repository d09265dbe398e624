//! Reduced-order Monodomain modelling with POD-DEIM and conductivity estimation.

pub mod archive;
pub mod deim;
pub mod error;
pub mod forward;
pub mod inverse;
pub mod ionic;
pub mod linsolve;
pub mod measure;
pub mod mesh;
pub mod pod;
pub mod quadrature;
pub mod rom;
pub mod sampling;
pub mod sparse;

pub use error::{Error, Result};
pub use forward::{Conductivity, SolveConfig};
pub use ionic::IonicParams;
