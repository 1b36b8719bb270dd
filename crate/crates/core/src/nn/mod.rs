//! Minimal differentiable numeric core.

pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_input_gradient, check_param_gradients, check_param_gradients_sampled, finite_difference_check, GradCheck};
pub use layers::{pooled_stats, LayerNorm, Linear, Mlp, Pool, LAYER_NORM_EPS};
pub use params::{Init, Param, ParamStore};
pub use tape::{Activation, Grads, Tape, Var};
pub use tensor::{Real, Tensor};
