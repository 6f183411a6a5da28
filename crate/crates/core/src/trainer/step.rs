use super::batch::Batch;
use super::config::TrainConfig;
use super::model::TvtsModel;
use crate::corpus::{tokenize, unshuffle_transcripts, Vocab};
use crate::encoders::VisibleCubes;
use crate::error::{Error, Result};
use crate::numerics::{adamw_step, AdamWState, Tape, Var};
use crate::objectives::{
    align_loss, factorial_sort_loss, factorial_target, pair_sort_loss, pair_targets, sort_loss, total_loss,
    video_sort_loss, LossReport,
};
use crate::params::Bound;
use crate::scalar::Scalar;
use crate::sortformer::{argmax_rows, row_accuracy, Proxy, VideoRows};

/// Graph handles and values of one forward pass.
pub struct ForwardPass {
    pub total: Var,
    pub align: Var,
    pub sort: Option<Var>,
    /// Raw sort-head logits.
    pub logits: Option<Var>,
    pub v_hat: Var,
    pub t_hat: Var,
    pub report: LossReport,
    pub sort_acc: Option<f64>,
}

/// Forward through both encoders, the projections and the configured
/// sort head; builds the combined loss.
pub fn forward<T: Scalar>(
    model: &TvtsModel<T>,
    tape: &mut Tape<T>,
    p: &Bound,
    batch: &Batch,
    cfg: &TrainConfig,
    vocab: &Vocab,
) -> Result<ForwardPass> {
    let enc = &model.encoder;
    let k = cfg.k;
    let proxy = model.sort.proxy;
    let mut ids = Vec::with_capacity(batch.samples.len() * k);
    let mut vis = VisibleCubes::<T>::default();
    for s in &batch.samples {
        let window = if proxy == Proxy::Videosort {
            unshuffle_transcripts(&s.window)
        } else {
            s.window.clone()
        };
        for slot in 0..k {
            ids.push(tokenize(&window.text(slot), vocab, enc.max_text_len));
        }
        vis.push(&s.clip, &s.mask, s.slice_perm.as_deref(), enc)?;
    }
    let t_cls = model.text.encode_text(tape, p, &ids)?;
    let cubes = tape.constant(vis.tensor(enc.cube_dim())?);
    let (v_all, starts) = model.video.encode_visible(tape, p, cubes, &vis)?;
    let lens: Vec<usize> = vis.lengths.iter().map(|n| n + 1).collect();

    let v0 = tape.select_rows(v_all, &starts)?;
    let v0 = model.video_norm.forward(tape, p, v0)?;
    let v_hat = model.video_proj.forward(tape, p, v0)?;
    let groups: Vec<(usize, usize)> = (0..batch.samples.len()).map(|b| (b * k, k)).collect();
    let t_mean = tape.segment_mean(t_cls, &groups)?;
    let t_mean = model.text_norm.forward(tape, p, t_mean)?;
    let t_hat = model.text_proj.forward(tape, p, t_mean)?;
    let align = align_loss(tape, v_hat, t_hat, cfg.tau)?;

    let rows = VideoRows {
        tokens: v_all,
        starts: &starts,
        lens: &lens,
    };
    let orders = batch.orders();
    let (sort, logits, sort_acc) = match proxy {
        Proxy::None => (None, None, None),
        Proxy::Kway => {
            let lg = model.sort.sort_forward(tape, p, t_cls, &rows)?;
            let targets: Vec<usize> = orders.concat();
            let acc = row_accuracy(tape.value(lg), &targets);
            (Some(sort_loss(tape, lg, &orders)?), Some(lg), Some(acc))
        }
        Proxy::Pair => {
            let lg = model.sort.pair_sort_forward(tape, p, t_cls, &rows)?;
            let acc = row_accuracy(tape.value(lg), &pair_targets(&orders)?);
            (Some(pair_sort_loss(tape, lg, &orders)?), Some(lg), Some(acc))
        }
        Proxy::Factorial => {
            let lg = model.sort.factorial_sort_forward(tape, p, t_cls, &rows)?;
            let targets = orders.iter().map(|o| factorial_target(o)).collect::<Result<Vec<_>>>()?;
            let acc = row_accuracy(tape.value(lg), &targets);
            (Some(factorial_sort_loss(tape, lg, &orders)?), Some(lg), Some(acc))
        }
        Proxy::Videosort => {
            let perms: Vec<Vec<usize>> = batch
                .samples
                .iter()
                .map(|s| s.slice_perm.clone().ok_or_else(|| Error::Contract("missing slice permutation".into())))
                .collect::<Result<_>>()?;
            let slice_lens: Vec<Vec<usize>> = batch
                .samples
                .iter()
                .map(|s| s.mask.visible.iter().map(Vec::len).collect())
                .collect();
            let lg = model.sort.video_sort_forward(tape, p, t_cls, &rows, &slice_lens)?;
            let acc = row_accuracy(tape.value(lg), &perms.concat());
            (Some(video_sort_loss(tape, lg, &perms)?), Some(lg), Some(acc))
        }
    };
    let (total, report) = total_loss(tape, align, sort, cfg.lambda)?;
    Ok(ForwardPass {
        total,
        align,
        sort,
        logits,
        v_hat,
        t_hat,
        report,
        sort_acc,
    })
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub report: LossReport,
    pub sort_acc: Option<f64>,
    pub grad_norm: f64,
}

/// Forward, backward, optional clipping and one AdamW update at `step`.
pub fn train_step<T: Scalar>(
    model: &mut TvtsModel<T>,
    opt: &mut AdamWState<T>,
    batch: &Batch,
    cfg: &TrainConfig,
    vocab: &Vocab,
    step: u64,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let fwd = forward(model, &mut tape, &p, batch, cfg, vocab)?;
    if !fwd.report.l_total.is_finite() {
        let videos: Vec<usize> = batch.samples.iter().map(|s| s.video).collect();
        return Err(Error::NonFiniteLoss {
            batch_id: batch.id,
            detail: format!(
                "L_align={} L_sort={} videos={videos:?}",
                fwd.report.l_align, fwd.report.l_sort
            ),
        });
    }
    let mut grads = tape.backward(fwd.total)?;
    let mut gs: Vec<_> = p
        .vars()
        .iter()
        .map(|&v| grads.take(v).expect("every parameter is a tracked leaf"))
        .collect();
    drop(tape);
    let sq: f64 = gs.iter().map(|g| g.sq_norm()).sum();
    let grad_norm = sq.sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            batch_id: batch.id,
            detail: "non-finite gradient".into(),
        });
    }
    if let Some(max) = cfg.clip_grad {
        if grad_norm > max {
            let f = T::lit(max / grad_norm);
            for g in gs.iter_mut() {
                for x in g.data_mut() {
                    *x *= f;
                }
            }
        }
    }
    let decay = model.store.decay_flags();
    let grefs: Vec<_> = gs.iter().collect();
    let mut params = model.store.values_mut();
    adamw_step(&mut params, &grefs, &decay, opt, &cfg.adamw(), cfg.lr_at(step))?;
    Ok(StepOutput {
        report: fwd.report,
        sort_acc: fwd.sort_acc,
        grad_norm,
    })
}

/// Per-slot K-way predictions for a batch without recording gradients.
pub fn predict_orders<T: Scalar>(model: &TvtsModel<T>, batch: &Batch, cfg: &TrainConfig, vocab: &Vocab) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let p = model.store.bind_frozen(&mut tape);
    let fwd = forward(model, &mut tape, &p, batch, cfg, vocab)?;
    let lg = fwd
        .logits
        .ok_or_else(|| Error::Config("no sort head to predict with".into()))?;
    Ok(argmax_rows(tape.value(lg)))
}
