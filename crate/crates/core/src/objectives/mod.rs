//! Contrastive alignment, transcript-sort and proxy losses, and their
//! weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::scalar::Scalar;
use crate::sortformer::perm::{check_bijection, inverse, lex_rank, slot_pairs};

/// Default contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.05;
/// Default sort-loss weight.
pub const DEFAULT_LAMBDA: f64 = 2.0;

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be > 0, got {tau}")))
    }
}

/// Mean over rows of `−log softmax(q_b · kᵀ / τ)[b]`; positives on the diagonal.
pub fn info_nce<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    if tape.shape(q) != tape.shape(k) {
        return Err(Error::dim("info_nce", tape.shape(q), tape.shape(k)));
    }
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, T::lit(1.0 / tau));
    let diag: Vec<usize> = (0..tape.value(q).rows()).collect();
    tape.cross_entropy(s, &diag)
}

/// `NCE(t̂, v̂) + NCE(v̂, t̂)`, sharing one similarity matrix.
pub fn align_loss<T: Scalar>(tape: &mut Tape<T>, v_hat: Var, t_hat: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    if tape.shape(v_hat) != tape.shape(t_hat) {
        return Err(Error::dim("align_loss", tape.shape(v_hat), tape.shape(t_hat)));
    }
    let vt = tape.transpose(v_hat)?;
    let s = tape.matmul(t_hat, vt)?;
    let s = tape.scale(s, T::lit(1.0 / tau));
    let st = tape.transpose(s)?;
    let diag: Vec<usize> = (0..tape.value(v_hat).rows()).collect();
    let t2v = tape.cross_entropy(s, &diag)?;
    let v2t = tape.cross_entropy(st, &diag)?;
    tape.add(t2v, v2t)
}

/// Mean NLL of each shuffled slot's true position. `orders[b][i]` is the
/// true position of slot `i` in sample `b`; logits are `[B·K × K]`.
pub fn sort_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, orders: &[Vec<usize>]) -> Result<Var> {
    let mut targets = Vec::new();
    for o in orders {
        check_bijection(o)?;
        targets.extend_from_slice(o);
    }
    tape.cross_entropy(logits, &targets)
}

/// 2-way targets for every slot pair: 1 iff slot `i` truly precedes slot `j`.
pub fn pair_targets(orders: &[Vec<usize>]) -> Result<Vec<usize>> {
    let mut targets = Vec::new();
    for o in orders {
        check_bijection(o)?;
        targets.extend(slot_pairs(o.len()).into_iter().map(|(i, j)| usize::from(o[i] < o[j])));
    }
    Ok(targets)
}

pub fn pair_sort_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, orders: &[Vec<usize>]) -> Result<Var> {
    let targets = pair_targets(orders)?;
    tape.cross_entropy(logits, &targets)
}

/// Lexicographic rank of the permutation that restores true order.
pub fn factorial_target(order: &[usize]) -> Result<usize> {
    check_bijection(order)?;
    Ok(lex_rank(&inverse(order)))
}

pub fn factorial_sort_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, orders: &[Vec<usize>]) -> Result<Var> {
    let targets = orders.iter().map(|o| factorial_target(o)).collect::<Result<Vec<_>>>()?;
    tape.cross_entropy(logits, &targets)
}

/// Mean NLL of each shuffled slice's true position; `slice_perms[b][s]`
/// is the true slice shown in slot `s`.
pub fn video_sort_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, slice_perms: &[Vec<usize>]) -> Result<Var> {
    sort_loss(tape, logits, slice_perms)
}

/// Loss values of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_align: f64,
    pub l_sort: f64,
    pub l_total: f64,
    pub lambda: f64,
    /// Gradient norms of each component, when computed.
    pub grad_norm_align: Option<f64>,
    pub grad_norm_sort: Option<f64>,
}

/// `L_align + λ·L_sort`; without a sort term the total is `L_align`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, align: Var, sort: Option<Var>, lambda: f64) -> Result<(Var, LossReport)> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let total = match sort {
        Some(s) => {
            let w = tape.scale(s, T::lit(lambda));
            tape.add(align, w)?
        }
        None => align,
    };
    let report = LossReport {
        l_align: tape.value(align).item().as_f64(),
        l_sort: sort.map_or(0.0, |s| tape.value(s).item().as_f64()),
        l_total: tape.value(total).item().as_f64(),
        lambda,
        grad_norm_align: None,
        grad_norm_sort: None,
    };
    Ok((total, report))
}
