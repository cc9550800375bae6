//! Minimal differentiable building blocks for volumetric networks.
//!
//! Everything runs in `f64` on the CPU. A forward pass is recorded on a
//! [`Graph`]; parameters live in a [`ParamStore`] addressed by [`ParamId`].

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{sigmoid, softmax_in_place, BufferUpdate, Graph, Grads, Var};
pub use layers::{AttentionOutput, BatchNorm, BiLstm, Conv3d, Linear, LstmCell, MultiHeadAttention};
pub use optim::AdamW;
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Applies buffer updates recorded during a training-mode forward pass.
pub fn apply_buffer_updates(ps: &mut ParamStore, updates: Vec<BufferUpdate>) -> Result<()> {
    for u in updates {
        ps.set(u.id, u.value)?;
    }
    Ok(())
}
