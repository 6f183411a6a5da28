//! Dense tensors, reverse-mode differentiation and the AdamW optimizer.

mod adamw;
pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use gradcheck::{
    check_graph, check_ops, finite_diff_grad, max_rel_error, op_cases, random_tensor, GradCheckResult, GraphFn, FD_STEP,
    REL_ERROR_FLOOR,
};
pub use tape::{AttnLayout, AttnSegment, Gradients, OpKind, Tape, Var, MASK_OFFSET};
pub use tensor::Tensor;

use crate::error::Result;
use crate::scalar::Scalar;

// Eager forms of the tape ops, for callers that do not need gradients.

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(a, b)?;
    Ok(tape.value(out).clone())
}

pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(x.clone());
    let out = tape.softmax(x, axis)?;
    Ok(tape.value(out).clone())
}

pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(x.clone());
    let g = tape.constant(gain.clone());
    let b = tape.constant(bias.clone());
    let out = tape.layer_norm(x, g, b, eps)?;
    Ok(tape.value(out).clone())
}

/// Single-sequence multi-head attention without projections.
/// `key_mask[j] == true` forbids attending to key `j`.
pub fn multi_head_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let layout = AttnLayout {
        heads,
        segments: vec![AttnSegment {
            q_start: 0,
            q_len: q.rows(),
            k_start: 0,
            k_len: k.rows(),
        }],
        key_mask: key_mask.map(<[bool]>::to_vec),
    };
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = tape.attention(q, k, v, layout)?;
    Ok(tape.value(out).clone())
}
