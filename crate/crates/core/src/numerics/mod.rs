//! Dense-array math with a verified gradient contract.

pub mod autograd;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use autograd::{Graph, Var};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use ops::{
    bilinear_sample, bilinear_weights, cross_entropy, ema_update, entropy, resize_bilinear,
    softmax_t, CE_LOG_EPS,
};
pub use optim::{optimizer_step, AdamWConfig, AdamWState, CosineSchedule};
pub use params::ParamSet;
pub use rng::SeededRng;
pub use tensor::Tensor;
