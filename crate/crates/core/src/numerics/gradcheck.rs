//! Central finite differences, the independent oracle for every gradient rule.

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};

use super::tape::{AttnLayout, AttnSegment, OpKind, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::derived_rng;
use crate::scalar::Scalar;

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, h: T) -> Tensor<T> {
    let mut probe = x.clone();
    let two_h = h + h;
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / two_h);
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// Below this magnitude, relative error degrades to absolute error scaled
/// by the floor; keeps near-zero gradient entries from dominating the
/// comparison with finite-difference rounding noise.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Largest element-wise `|a − b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn max_rel_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR)
        })
        .fold(0.0, f64::max)
}

/// Step used by the finite-difference checks.
pub const FD_STEP: f64 = 1e-6;

/// Worst relative error of one checked graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

/// A graph builder over parameter leaves; returns the node to check.
pub type GraphFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Standard-normal tensor drawn from `(seed, salt)`.
pub fn random_tensor(shape: &[usize], seed: u64, salt: u64) -> Tensor<f64> {
    let mut rng = derived_rng(seed, &[salt]);
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
}

/// Reduces a non-scalar output to `sum(out ⊙ R)` with a fixed random `R`,
/// so every output element carries a distinct weight.
fn scalarize(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let r = tape.constant(random_tensor(tape.shape(out), seed, 0x5ca1));
    let m = tape.mul(out, r)?;
    Ok(tape.sum(m))
}

/// Compares backward against central differences for every input entry,
/// or for `coords` random entries per input when given.
pub fn check_graph(
    inputs: &[Tensor<f64>],
    f: &GraphFn<'_>,
    seed: u64,
    coords: Option<usize>,
    fault: Option<OpKind>,
) -> Result<f64> {
    let eval = |vals: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        if let Some(k) = fault {
            tape.inject_gradient_fault(k);
        }
        let vars: Vec<Var> = vals.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = scalarize(&mut tape, out, seed)?;
        let value = tape.value(loss).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| g.get(v).expect("tracked").clone()).collect()))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut worst: f64 = 0.0;
    let mut vals = inputs.to_vec();
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        let picks: Vec<usize> = match coords {
            Some(c) if c < n => sample(&mut derived_rng(seed, &[0xc0, i as u64]), n, c).into_vec(),
            _ => (0..n).collect(),
        };
        for j in picks {
            let orig = inputs[i].data()[j];
            vals[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&vals, false)?.0;
            vals[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&vals, false)?.0;
            vals[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i].data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR));
        }
    }
    Ok(worst)
}

/// One small graph per differentiable op, named by [`OpKind::name`].
pub fn op_cases() -> Vec<(OpKind, Vec<Vec<usize>>, Box<GraphFn<'static>>)> {
    let attn = AttnLayout {
        heads: 2,
        segments: vec![
            AttnSegment::square(0, 3),
            AttnSegment {
                q_start: 3,
                q_len: 2,
                k_start: 0,
                k_len: 5,
            },
        ],
        key_mask: Some(vec![false, false, true, false, false]),
    };
    vec![
        (OpKind::MatMul, vec![vec![3, 4], vec![4, 5]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        (OpKind::Transpose, vec![vec![3, 4]], Box::new(|t, v| t.transpose(v[0]))),
        (OpKind::Add, vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.add(v[0], v[1]))),
        (OpKind::Sub, vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.sub(v[0], v[1]))),
        (OpKind::Mul, vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.mul(v[0], v[1]))),
        (OpKind::Scale, vec![vec![2, 3]], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        (OpKind::AddRow, vec![vec![4, 3], vec![3]], Box::new(|t, v| t.add_row(v[0], v[1]))),
        (OpKind::Gelu, vec![vec![3, 5]], Box::new(|t, v| Ok(t.gelu(v[0])))),
        (
            OpKind::LayerNorm,
            vec![vec![4, 6], vec![6], vec![6]],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (OpKind::Softmax, vec![vec![3, 4]], Box::new(|t, v| t.softmax(v[0], 0))),
        (OpKind::LogSoftmax, vec![vec![3, 4]], Box::new(|t, v| t.log_softmax(v[0]))),
        (OpKind::Sum, vec![vec![3, 4]], Box::new(|t, v| Ok(t.sum(v[0])))),
        (OpKind::Mean, vec![vec![3, 4]], Box::new(|t, v| Ok(t.mean(v[0])))),
        (OpKind::SelectRows, vec![vec![4, 3]], Box::new(|t, v| t.select_rows(v[0], &[2, 0, 2]))),
        (OpKind::Gather, vec![vec![2, 3]], Box::new(|t, v| t.gather(v[0], vec![5, 0, 0, 3], &[2, 2]))),
        (
            OpKind::ConcatRows,
            vec![vec![2, 3], vec![1, 3]],
            Box::new(|t, v| t.concat_rows(&[v[0], v[1], v[0]])),
        ),
        (
            OpKind::Attention,
            vec![vec![5, 4], vec![5, 4], vec![5, 4]],
            Box::new(move |t, v| t.attention(v[0], v[1], v[2], attn.clone())),
        ),
        (OpKind::L2Normalize, vec![vec![3, 4]], Box::new(|t, v| Ok(t.l2_normalize_rows(v[0], 1e-12)))),
        (
            OpKind::SegmentMean,
            vec![vec![5, 3]],
            Box::new(|t, v| t.segment_mean(v[0], &[(0, 2), (2, 3), (1, 1)])),
        ),
        (OpKind::CrossEntropy, vec![vec![4, 5]], Box::new(|t, v| t.cross_entropy(v[0], &[0, 4, 2, 2]))),
    ]
}

/// Runs every op case at `seed`.
pub fn check_ops(seed: u64, fault: Option<OpKind>) -> Result<Vec<GradCheckResult>> {
    op_cases()
        .into_iter()
        .map(|(kind, shapes, f)| {
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| random_tensor(s, seed, i as u64))
                .collect();
            Ok(GradCheckResult {
                name: kind.name().to_string(),
                max_rel_error: check_graph(&inputs, f.as_ref(), seed, None, fault)?,
            })
        })
        .collect()
}
