use crate::error::Result;
use crate::numerics::{Tape, Var};
use crate::params::{Bound, Init, ParamStore};
use crate::scalar::Scalar;

use super::layers::Linear;

/// Added to the norm before dividing, so a zero projection stays finite.
pub const NORM_EPS: f64 = 1e-12;

/// Bias-free linear map into the contrastive space followed by L2
/// normalization.
#[derive(Clone, Debug)]
pub struct Projection {
    pub lin: Linear,
}

impl Projection {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &Init, name: &str, d_h: usize, d: usize) -> Self {
        Projection {
            lin: Linear::new(store, init, name, d_h, d, false),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.lin.forward(tape, p, x)?;
        Ok(tape.l2_normalize_rows(y, T::lit(NORM_EPS)))
    }
}
