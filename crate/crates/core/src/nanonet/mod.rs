//! Small differentiable network: frozen dense layers, sparse block overlays and a
//! hand-written backward pass.

mod attention;
mod gradcheck;
mod model;
pub mod snapshot;

pub use attention::{
    attention_grad_profile, attention_grad_profile_with, projection_gradients, AttentionProfileConfig,
    GradientReport, Projection,
};
pub use gradcheck::{finite_diff_check, GradCheck};
pub use model::{argmax, forward, loss_and_grad, ActiveSet, Activation, BaseModel, DeltaOverlay, Gradients, Session, Target};
