//! End-to-end pre-training: batch assembly, combined loss, AdamW updates,
//! metrics logging and checkpointing.

mod batch;
mod checkpoint;
mod config;
mod gradcheck;
mod model;
mod step;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use batch::{assemble_batch, make_sample, Batch, EpochSampler, Sample};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_header, save_checkpoint, Checkpoint, Header, RngState,
    TensorEntry, FORMAT_VERSION, MAGIC,
};
pub use config::{kv_text, parse_kv, TrainConfig};
pub use gradcheck::{
    composed_grad_check, grad_check_config, grad_check_suite, GradCheckReport, COMPOSED_COORDS, GRAD_CHECK_TOLERANCE,
};
pub use model::{TvtsModel, VIDEO_PREFIX};
pub use step::{forward, predict_orders, train_step, ForwardPass, StepOutput};

use crate::corpus::{generate, load_corpus, Corpus, Vocab};
use crate::error::{Error, Result};
use crate::numerics::AdamWState;
use crate::rng::derived_rng;
use crate::scalar::Scalar;

const EVAL_TAG: u64 = 0x6576_616c;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    #[serde(rename = "L_align")]
    pub l_align: f64,
    #[serde(rename = "L_sort")]
    pub l_sort: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub sort_acc: Option<f64>,
    pub wallclock_ms: u64,
}

impl MetricsRecord {
    /// JSON line without the wall-clock field, for run-to-run comparison.
    pub fn deterministic_line(&self) -> String {
        let mut v = serde_json::to_value(self).expect("record serializes");
        v.as_object_mut().expect("object").remove("wallclock_ms");
        v.to_string()
    }
}

/// Loads `cfg.corpus` or generates the configured corpus in memory.
pub fn open_corpus(cfg: &TrainConfig) -> Result<Corpus> {
    match &cfg.corpus {
        Some(dir) => load_corpus(Path::new(dir)),
        None => generate(&cfg.gen, cfg.data_seed),
    }
}

/// Training and held-out video indices.
pub fn split_corpus(corpus: &Corpus, cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    if cfg.holdout_every < 2 {
        return ((0..corpus.len()).collect(), Vec::new());
    }
    corpus.split(cfg.holdout_every)
}

/// Mutable state of a run.
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub model: TvtsModel<T>,
    pub opt: AdamWState<T>,
    pub step: u64,
    pub vocab: Vocab,
    sampler: EpochSampler,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &TrainConfig, corpus: &Corpus) -> Result<Self> {
        cfg.validate()?;
        let model = TvtsModel::new(&cfg.encoder, cfg.k, cfg.proxy, cfg.seed)?;
        Self::assemble(cfg, corpus, model, None, 0)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>, corpus: &Corpus) -> Result<Self> {
        let cfg = &ckpt.config;
        cfg.validate()?;
        let model = TvtsModel::from_checkpoint(ckpt)?;
        Self::assemble(cfg, corpus, model, Some(ckpt.opt.clone()), ckpt.step)
    }

    fn assemble(cfg: &TrainConfig, corpus: &Corpus, model: TvtsModel<T>, opt: Option<AdamWState<T>>, step: u64) -> Result<Self> {
        let (train, _) = split_corpus(corpus, cfg);
        let opt = opt.unwrap_or_else(|| AdamWState::new(model.store.entries().iter().map(|e| e.value.shape())));
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            opt,
            step,
            vocab: Vocab::synthetic(),
            sampler: EpochSampler::new(train, cfg.seed),
        })
    }

    pub fn next_batch(&mut self, corpus: &Corpus) -> Result<Batch> {
        assemble_batch(corpus, &mut self.sampler, &self.cfg, self.step)
    }

    /// Runs one step on batch number `self.step`.
    pub fn run_step(&mut self, corpus: &Corpus) -> Result<StepOutput> {
        let batch = self.next_batch(corpus)?;
        let out = train_step(&mut self.model, &mut self.opt, &batch, &self.cfg, &self.vocab, self.step)?;
        self.step += 1;
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            params: self.model.store.clone(),
            opt: self.opt.clone(),
            step: self.step,
            config: self.cfg.clone(),
            rng: RngState {
                seed: self.cfg.seed,
                next_batch: self.step,
            },
        }
    }
}

/// Result of [`pretrain`].
pub struct PretrainOutput<T> {
    pub checkpoint: Checkpoint<T>,
    pub metrics: Vec<MetricsRecord>,
}

/// Runs `trainer` until `trainer.cfg.steps`, writing `metrics.jsonl` and
/// checkpoints into `out` when given. `on_step` sees every record.
pub fn run_to_end<T: Scalar>(
    trainer: &mut Trainer<T>,
    corpus: &Corpus,
    out: Option<&Path>,
    mut on_step: impl FnMut(&MetricsRecord),
) -> Result<Vec<MetricsRecord>> {
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("metrics.jsonl");
            let f = fs::OpenOptions::new()
                .create(true)
                .append(trainer.step > 0)
                .write(true)
                .truncate(trainer.step == 0)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Some((BufWriter::new(f), p))
        }
        None => None,
    };
    let started = Instant::now();
    let mut records = Vec::new();
    while trainer.step < trainer.cfg.steps {
        let out_step = trainer.run_step(corpus)?;
        let rec = MetricsRecord {
            step: trainer.step,
            l_align: out_step.report.l_align,
            l_sort: out_step.report.l_sort,
            l_total: out_step.report.l_total,
            sort_acc: out_step.sort_acc,
            wallclock_ms: started.elapsed().as_millis() as u64,
        };
        if let Some((w, p)) = log.as_mut() {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        on_step(&rec);
        records.push(rec);
        let every = trainer.cfg.checkpoint_every;
        if let Some(dir) = out {
            if every > 0 && trainer.step % every == 0 && trainer.step < trainer.cfg.steps {
                save_checkpoint(&trainer.checkpoint(), &checkpoint_path(dir, trainer.step))?;
            }
        }
    }
    if let Some((mut w, p)) = log {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    if let Some(dir) = out {
        save_checkpoint(&trainer.checkpoint(), &dir.join("final.ckpt"))?;
    }
    Ok(records)
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:06}.ckpt"))
}

/// Fresh run from `cfg` on `corpus`.
pub fn pretrain<T: Scalar>(
    cfg: &TrainConfig,
    corpus: &Corpus,
    out: Option<&Path>,
    on_step: impl FnMut(&MetricsRecord),
) -> Result<PretrainOutput<T>> {
    let mut trainer = Trainer::<T>::new(cfg, corpus)?;
    let metrics = run_to_end(&mut trainer, corpus, out, on_step)?;
    Ok(PretrainOutput {
        checkpoint: trainer.checkpoint(),
        metrics,
    })
}

/// K-way sort accuracy on the given videos: one unaugmented window per
/// video per round, drawn from a dedicated evaluation stream.
pub fn evaluate_sort<T: Scalar>(
    model: &TvtsModel<T>,
    corpus: &Corpus,
    videos: &[usize],
    cfg: &TrainConfig,
    rounds: usize,
    eval_seed: u64,
) -> Result<f64> {
    let vocab = Vocab::synthetic();
    let mut hits = 0usize;
    let mut total = 0usize;
    for round in 0..rounds {
        for (c, chunk) in videos.chunks(cfg.batch_size.max(2)).enumerate() {
            let mut samples = Vec::new();
            for &v in chunk {
                let mut rng = derived_rng(eval_seed, &[EVAL_TAG, round as u64, v as u64]);
                if let Some(s) = make_sample(corpus, v, cfg, false, &mut rng)? {
                    samples.push(s);
                }
            }
            if samples.is_empty() {
                continue;
            }
            let batch = Batch {
                id: c as u64,
                samples,
            };
            let pred = predict_orders(model, &batch, cfg, &vocab)?;
            let truth = batch.orders().concat();
            hits += pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
            total += truth.len();
        }
    }
    if total == 0 {
        return Err(Error::Data("no held-out samples to evaluate".into()));
    }
    Ok(hits as f64 / total as f64)
}
