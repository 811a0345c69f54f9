//! Dense `f64` tensors and a reverse-mode differentiation tape.

mod dense;
mod gradcheck;
mod kernels;
mod ops;
mod tape;

pub use dense::Tensor;
pub use gradcheck::{finite_diff_check, finite_diff_check_many};
pub use ops::{concat_last_axis, edge_history_attention, max_of, scaled_dot_attention, EdgeAttentionOptions};
pub use tape::{Gradients, Tape, Var};

pub(crate) use ops::check_dropout_rate;
pub(crate) use tape::Op;
