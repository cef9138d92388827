pub mod error;
pub mod field;
pub mod optics;
pub mod linalg;
pub mod eigen;
pub mod algebra;
pub mod sparse;
pub mod fock;
pub mod decay;
pub mod scenario;
pub mod pipeline;
