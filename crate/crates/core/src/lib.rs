pub mod attention;
pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod probe;
pub mod relation;
pub mod rng;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default real type for training, checkpoints and evaluation.
pub type Real = f64;
pub type Tape = numeric::Tape<Real>;
pub type Array = numeric::DiffArray<Real>;
pub type Params = numeric::ParamSet<Real>;
pub type Relation = relation::RelationMatrix<Real>;
