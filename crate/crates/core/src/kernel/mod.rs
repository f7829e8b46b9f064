//! Numeric substrate: attention forward/backward, RoPE, losses and the
//! optimizer. Every routine is a pure function of its inputs with a fixed
//! accumulation order, so repeated runs are bit-identical.

pub mod attention;
pub mod aux_mem;
mod fastexp;
pub mod loss;
pub mod optim;
pub mod rope;

pub use attention::{
    attend_row, attention_grad_kv, attention_grad_kv_with_stats, causal_attention,
    causal_attention_with_stats, AttentionGeometry, AttentionStats, KEY_CHUNK,
};
pub use loss::{mse, mse_grad, qk_kl_loss, qk_kl_loss_and_grad, KL_EPS};
pub use optim::{adamw_step, cosine_lr, AdamWParams, Moments};
pub use rope::{rope_apply, rope_apply_signed, rope_inverse, DEFAULT_ROPE_BASE};
