//! Dense numerics with reverse-mode differentiation, the layers built on it,
//! Adam with cosine annealing, and finite-difference gradient checking.

mod gradcheck;
mod layers;
mod optim;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, relative_error, GradCheckReport, ParamCheck, RELATIVE_FLOOR};
pub use layers::{
    Activation, AttentionBlock, Bound, CausalTransformer, LayerNorm, Linear, Mlp, ParamId, ParamSet, ResidualBlock,
};
pub use optim::{cosine_lr, Adam, AdamConfig};
pub use real::{DType, Real};
pub use tape::{softmax_rows, CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;


