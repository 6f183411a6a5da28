//! Finite-difference verification of every op and of the full composed
//! pre-training loss at tiny dimensions.

use serde::Serialize;

use super::batch::{assemble_batch, EpochSampler};
use super::config::TrainConfig;
use super::model::TvtsModel;
use super::step::forward;
use crate::corpus::{generate, GenConfig, Vocab};
use crate::encoders::EncoderConfig;
use crate::error::Result;
use crate::numerics::{check_ops, GradCheckResult, OpKind, Tape, FD_STEP, REL_ERROR_FLOOR};
use crate::rng::derived_rng;
use crate::sortformer::Proxy;

/// Pass threshold on the maximum relative error.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// Entries checked per parameter tensor of the composed model.
pub const COMPOSED_COORDS: usize = 6;

/// Tiny model and corpus for the composed check.
pub fn grad_check_config(proxy: Proxy, seed: u64) -> TrainConfig {
    TrainConfig {
        gen: GenConfig {
            count: 6,
            height: 16,
            width: 16,
            ..GenConfig::default()
        },
        data_seed: seed,
        holdout_every: 0,
        k: 3,
        l: 2.0,
        batch_size: 3,
        crop_scale: 1.15,
        seed,
        proxy,
        encoder: EncoderConfig {
            d_h: 8,
            depth: 2,
            text_depth: 1,
            heads: 2,
            patch: 8,
            tubelet: 2,
            frames: 4,
            height: 16,
            width: 16,
            max_text_len: 8,
            d_common: 4,
            ..EncoderConfig::default()
        },
        dtype: "f64".into(),
        ..TrainConfig::default()
    }
}

/// Checks `L_total` against central differences on a random subset of
/// every parameter tensor.
pub fn composed_grad_check(proxy: Proxy, seed: u64, fault: Option<OpKind>) -> Result<GradCheckResult> {
    let cfg = grad_check_config(proxy, seed);
    let corpus = generate(&cfg.gen, cfg.data_seed)?;
    let mut sampler = EpochSampler::new((0..corpus.len()).collect(), seed);
    let batch = assemble_batch(&corpus, &mut sampler, &cfg, 0)?;
    let vocab = Vocab::synthetic();
    let mut model = TvtsModel::<f64>::new(&cfg.encoder, cfg.k, proxy, seed)?;
    // Perturb the zero-initialized biases and norms so every rule is exercised
    // away from its initial point.
    for (i, t) in model.store.values_mut().into_iter().enumerate() {
        let noise = crate::numerics::random_tensor(t.shape(), seed, 0xb1a5 + i as u64);
        for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *x += 0.1 * n;
        }
    }

    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_gradient_fault(k);
    }
    let p = model.store.bind(&mut tape);
    let fwd = forward(&model, &mut tape, &p, &batch, &cfg, &vocab)?;
    let grads = tape.backward(fwd.total)?;
    let analytic: Vec<_> = p.vars().iter().map(|&v| grads.get(v).expect("tracked").clone()).collect();
    drop(tape);

    let loss = |m: &TvtsModel<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let p = m.store.bind_frozen(&mut tape);
        Ok(forward(m, &mut tape, &p, &batch, &cfg, &vocab)?.report.l_total)
    };
    let mut worst: f64 = 0.0;
    let mut rng = derived_rng(seed, &[0xfd]);
    for (i, a) in analytic.iter().enumerate() {
        let n = a.len();
        let picks = rand::seq::index::sample(&mut rng, n, COMPOSED_COORDS.min(n));
        for j in picks {
            let orig = model.store.values_mut()[i].data()[j];
            model.store.values_mut()[i].data_mut()[j] = orig + FD_STEP;
            let up = loss(&model)?;
            model.store.values_mut()[i].data_mut()[j] = orig - FD_STEP;
            let down = loss(&model)?;
            model.store.values_mut()[i].data_mut()[j] = orig;
            let num = (up - down) / (2.0 * FD_STEP);
            let an = a.data()[j];
            worst = worst.max((an - num).abs() / an.abs().max(num.abs()).max(REL_ERROR_FLOOR));
        }
    }
    Ok(GradCheckResult {
        name: format!("L_total[{proxy}]"),
        max_rel_error: worst,
    })
}

/// Worst error per checked graph over all seeds.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub seeds: u64,
    pub tolerance: f64,
    pub results: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn failures(&self) -> Vec<&str> {
        self.results
            .iter()
            .filter(|(_, e)| !(*e < self.tolerance))
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// Every op plus the composed loss for every proxy, over seeds `0..seeds`.
pub fn grad_check_suite(seeds: u64, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let mut results: Vec<(String, f64)> = Vec::new();
    let mut record = |r: GradCheckResult| match results.iter_mut().find(|(n, _)| *n == r.name) {
        Some((_, e)) => *e = e.max(r.max_rel_error),
        None => results.push((r.name, r.max_rel_error)),
    };
    for seed in 0..seeds {
        for r in check_ops(seed, fault)? {
            record(r);
        }
        for proxy in Proxy::ALL {
            record(composed_grad_check(proxy, seed, fault)?);
        }
    }
    Ok(GradCheckReport {
        seeds,
        tolerance: GRAD_CHECK_TOLERANCE,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composed_loss_matches_finite_differences() {
        for proxy in Proxy::ALL {
            let r = composed_grad_check(proxy, 1, None).unwrap();
            assert!(r.max_rel_error < GRAD_CHECK_TOLERANCE, "{}: {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn fault_in_attention_fails_the_composed_check() {
        let r = composed_grad_check(Proxy::Kway, 2, Some(OpKind::Attention)).unwrap();
        assert!(r.max_rel_error > GRAD_CHECK_TOLERANCE);
    }
}
