use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::extract::{extract_embeddings, Benchmark};
use crate::error::{Error, Result};
use crate::rng::derived_rng;
use crate::scalar::Scalar;
use crate::trainer::TvtsModel;

/// Plain minibatch SGD on a softmax classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 0.1,
            epochs: 100,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub classes: usize,
    pub encoder_digest: String,
}

struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[Vec<f64>]) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in x {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let inv_std = var.iter().map(|v| 1.0 / v.sqrt().max(1e-8)).collect();
        Standardizer { mean, inv_std }
    }

    fn apply(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| r.iter().zip(&self.mean).zip(&self.inv_std).map(|((v, m), s)| (v - m) * s).collect())
            .collect()
    }
}

struct Softmax {
    w: Vec<f64>,
    b: Vec<f64>,
    d: usize,
    c: usize,
}

impl Softmax {
    fn probs(&self, x: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = (0..self.c)
            .map(|j| self.b[j] + x.iter().enumerate().map(|(i, v)| v * self.w[i * self.c + j]).sum::<f64>())
            .collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in z.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        z.iter_mut().for_each(|v| *v /= s);
        z
    }

    fn predict(&self, x: &[f64]) -> usize {
        let p = self.probs(x);
        (0..self.c).fold(0, |best, j| if p[j] > p[best] { j } else { best })
    }

    fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let hits = x.iter().zip(y).filter(|(r, &l)| self.predict(r) == l).count();
        hits as f64 / y.len() as f64
    }
}

/// Trains a linear softmax classifier on standardized features and
/// returns `(train accuracy, test accuracy)`.
pub fn train_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<(f64, f64)> {
    if train_x.is_empty() || test_x.is_empty() {
        return Err(Error::Contract("linear probe needs nonempty train and test sets".into()));
    }
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::Contract("features and labels differ in length".into()));
    }
    if let Some(&bad) = train_y.iter().chain(test_y).find(|&&l| l >= classes) {
        return Err(Error::Label(format!("label {bad} >= {classes} classes")));
    }
    let d = train_x[0].len();
    if train_x.iter().chain(test_x).any(|r| r.len() != d) {
        return Err(Error::Contract("feature rows differ in width".into()));
    }
    let st = Standardizer::fit(train_x);
    let (xtr, xte) = (st.apply(train_x), st.apply(test_x));
    let mut model = Softmax {
        w: vec![0.0; d * classes],
        b: vec![0.0; classes],
        d,
        c: classes,
    };
    let mut rng = derived_rng(cfg.seed, &[0x7072_6f62]);
    let mut order: Vec<usize> = (0..xtr.len()).collect();
    let bs = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let mut gw = vec![0.0; d * classes];
            let mut gb = vec![0.0; classes];
            for &i in chunk {
                let mut p = model.probs(&xtr[i]);
                p[train_y[i]] -= 1.0;
                for (f, xv) in xtr[i].iter().enumerate() {
                    for (j, pj) in p.iter().enumerate() {
                        gw[f * classes + j] += xv * pj;
                    }
                }
                for (g, pj) in gb.iter_mut().zip(&p) {
                    *g += pj;
                }
            }
            let step = cfg.lr / chunk.len() as f64;
            for (w, g) in model.w.iter_mut().zip(&gw) {
                *w -= step * g;
            }
            for (b, g) in model.b.iter_mut().zip(&gb) {
                *b -= step * g;
            }
        }
    }
    debug_assert_eq!(model.w.len(), model.d * model.c);
    Ok((model.accuracy(&xtr, train_y), model.accuracy(&xte, test_y)))
}

/// Linear probe on raw `v_0` features of a frozen video encoder. The
/// encoder parameters are hashed before and after; any change is an
/// invariant violation.
pub fn linear_probe<T: Scalar>(
    model: &TvtsModel<T>,
    bench: &Benchmark,
    k: usize,
    l: f64,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let before = model.video_digest();
    let train = extract_embeddings(model, &bench.corpus, &bench.train, k, l)?;
    let test = extract_embeddings(model, &bench.corpus, &bench.test, k, l)?;
    let classes = bench.classes();
    let (train_accuracy, test_accuracy) = train_probe(
        &train.features,
        &train.labels,
        &test.features,
        &test.labels,
        classes,
        cfg,
    )?;
    let after = model.video_digest();
    if before != after {
        return Err(Error::Invariant(format!(
            "video encoder changed during linear probe: {before} -> {after}"
        )));
    }
    Ok(ProbeReport {
        train_accuracy,
        test_accuracy,
        classes,
        encoder_digest: after,
    })
}
