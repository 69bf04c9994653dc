//! Dense arrays, a reverse-mode tape and a finite-difference gradient oracle.

pub mod array;
pub mod gradcheck;
pub mod params;
pub mod tape;

pub use array::DenseArray;
pub use gradcheck::finite_difference_check;
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{logsumexp, Gradients, Tape, Var};

/// `ln(2π)`, correctly rounded.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
