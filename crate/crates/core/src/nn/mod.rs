//! Parameters, layers, optimisation and checkpoints.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod params;

pub use checkpoint::Checkpoint;
pub use layers::{causal_mask, sinusoidal, Activation, Attention, BatchNorm, FeedForward, LayerNorm, Linear, BN_MOMENTUM, NORM_EPS};
pub use optim::{clip_global_norm, lr_schedule, Adam};
pub use params::{apply_bn_observations, ParamBuilder, ParamId, ParamKind, ParamStore, Session};
