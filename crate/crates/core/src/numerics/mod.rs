//! Double-precision tensor engine: eager ops recorded on a tape for
//! reverse-mode gradients, AdamW, a counter-based RNG and a finite-difference
//! gradient checker.

pub mod conv;
pub mod gradcheck;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use conv::conv_out_len;
pub use gradcheck::{analytic_gradient, finite_diff_check, max_relative_error, numeric_gradient, relative_error};
pub use optim::{adamw_step, AdamState, AdamWConfig};
pub use rng::Rng;
pub use tape::{attention_weights, mean_pool, nearest_upsample, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
