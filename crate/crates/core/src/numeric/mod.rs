//! Dense tensor arithmetic with reverse-mode differentiation.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod param;
pub mod tensor;

pub use conv::avgpool2;
pub use gradcheck::{finite_diff_check, FdOptions, FdReport};
pub use graph::{Activation, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use param::{ParamGroup, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
