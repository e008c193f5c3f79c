//! Double-precision reference implementation of one MoE block: softmax
//! router, Top-K gating, SwiGLU experts, shared expert, load-balance loss
//! and a hand-written backward pass.

mod balance;
mod block;
mod checkpoint;
mod expert;
mod gate;
mod gradcheck;
mod linalg;
mod loss;

pub use balance::{balance_stats, load_cv, BalanceStats};
pub use block::{moe_block_forward, BlockDims, BlockForward, BlockGrads, MoeParams};
pub use checkpoint::{Checkpoint, TensorEntry};
pub use expert::SwiGluExpert;
pub use gate::{
    gate_forward, gate_from_logits, softmax, top_k_indices, GateOutput, GateParams, Routing,
    TIE_EPS,
};
pub use gradcheck::{
    grad_check, probe_gradient, probe_objective, relative_error, GradCheckConfig, GradCheckReport,
    ProbeBatch, FD_MARGIN, REL_ERR_FLOOR,
};
pub use linalg::{axpy, dot, Mat};
pub use loss::{
    token_cross_entropy, token_cross_entropy_grad, total_loss, LossBundle, DEFAULT_BALANCE_WEIGHT,
};
