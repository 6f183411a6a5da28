//! Parameterized building blocks shared by the encoders and sort heads.

use crate::error::Result;
use crate::numerics::{AttnLayout, Tape, Tensor, Var};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &Init, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), init.normal(&format!("{name}.w"), &[din, dout]), true);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[dout]), false));
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => tape.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[d], T::one()), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]), false),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias), T::lit(LN_EPS))
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`
/// with a GELU MLP of expansion 4.
#[derive(Clone, Debug)]
pub struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
    pub heads: usize,
}

impl Block {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &Init, name: &str, d: usize, heads: usize) -> Self {
        Block {
            ln1: Norm::new(store, &format!("{name}.ln1"), d),
            q: Linear::new(store, init, &format!("{name}.attn.q"), d, d, true),
            k: Linear::new(store, init, &format!("{name}.attn.k"), d, d, true),
            v: Linear::new(store, init, &format!("{name}.attn.v"), d, d, true),
            o: Linear::new(store, init, &format!("{name}.attn.o"), d, d, true),
            ln2: Norm::new(store, &format!("{name}.ln2"), d),
            fc1: Linear::new(store, init, &format!("{name}.mlp.fc1"), d, 4 * d, true),
            fc2: Linear::new(store, init, &format!("{name}.mlp.fc2"), 4 * d, d, true),
            heads,
        }
    }

    /// `segments` partitions the rows into independent sequences;
    /// `key_mask` marks rows no query may attend to.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, layout: &AttnLayout) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let q = self.q.forward(tape, p, h)?;
        let k = self.k.forward(tape, p, h)?;
        let v = self.v.forward(tape, p, h)?;
        let a = tape.attention(q, k, v, layout.clone())?;
        let a = self.o.forward(tape, p, a)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Runs a stack of blocks over packed sequences.
pub fn run_stack<T: Scalar>(blocks: &[Block], tape: &mut Tape<T>, p: &Bound, mut x: Var, layout: &AttnLayout) -> Result<Var> {
    for b in blocks {
        x = b.forward(tape, p, x, layout)?;
    }
    Ok(x)
}
