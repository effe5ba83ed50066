//! Differentiable building blocks: a matrix tape, AdamW, cosine schedule and
//! parameter initialization.

mod optim;
mod tape;

pub use optim::{cosine_lr, softplus, xavier_uniform, AdamW, LrSchedule, ParamStore};
pub use tape::{smoothed_target, Gradients, Mat, Tape, Var, LN_EPS};
