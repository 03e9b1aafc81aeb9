//! Parameters, initialization, the Adam optimizer, losses and checkpoints.

mod adam;
pub mod checkpoint;
mod loss;
mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{
    auto_pos_weight, bce_loss, bce_value, focal_bce_loss, focal_value, l2_penalty, LossConfig, PROB_EPS,
};
pub use params::{derive_seed, glorot_bound, glorot_init, is_bias, BoundParams, ParamStore};
