//! Reverse-mode differentiation over the layer set of the SELD network.

mod conv;
mod gradcheck;
mod graph;
mod gru;
mod param;
mod tensor;

pub use gradcheck::{
    analytic_grads, grad_check, grad_check_against, rel_error, GradCheckReport, REL_FLOOR,
};
pub use graph::{BatchStats, Graph, GruVars, Var};
pub use param::{glorot, glorot_bound, AdamConfig, Bound, ParamSet, Parameter};
pub use tensor::{Real, Tensor};
