//! Double-precision tensors with a tape-based reverse mode.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{gradcheck, gradcheck_many, rel_err, GradcheckReport};
pub use ops::{argmax_first, ConvMode};
pub use params::{Bindings, Parameter, ParameterStore, Scope};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
