use crate::corpus::{
    clip_from_indices, generate, sample_frame_indices, sample_transcript_window, tokenize, Corpus, GenConfig, MaskPattern, NarratedVideo,
    TranscriptWindow, Vocab,
};
use crate::encoders::VisibleCubes;
use crate::error::{Error, Result};
use crate::numerics::Tape;
use crate::scalar::Scalar;
use crate::trainer::TvtsModel;

const EXTRACT_BATCH: usize = 32;

/// Held-out classification set with a category-stratified split.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub corpus: Corpus,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Benchmark {
    /// Fresh corpus from `gen` and `seed`; every `test_every`-th video of
    /// each category is a test item.
    pub fn generate(gen: &GenConfig, seed: u64, test_every: usize) -> Result<Self> {
        Self::from_corpus(generate(gen, seed)?, test_every)
    }

    pub fn from_corpus(corpus: Corpus, test_every: usize) -> Result<Self> {
        if test_every < 2 {
            return Err(Error::Config("test_every must be >= 2".into()));
        }
        let (train, test) = corpus.split(test_every);
        if train.is_empty() || test.is_empty() {
            return Err(Error::Data(format!(
                "benchmark split of {} videos leaves an empty side",
                corpus.len()
            )));
        }
        Ok(Benchmark { corpus, train, test })
    }

    pub fn classes(&self) -> usize {
        self.corpus.videos.iter().map(|v| v.category + 1).max().unwrap_or(0)
    }
}

/// Evaluation window: the `k`-transcript span centered in the video.
pub fn center_window(video: &NarratedVideo, k: usize, l: f64) -> Result<TranscriptWindow> {
    let span = TranscriptWindow::total_span(k, l);
    let s_begin = ((video.duration_s - span) / 2.0).max(0.0);
    sample_transcript_window(&video.stream(), s_begin, k, l)
}

/// Per-video outputs of a frozen model on unmasked, center-sampled clips.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipEmbeddings {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    /// Raw video `[CLS]` vectors, `D_h` wide.
    pub features: Vec<Vec<f64>>,
    /// Projected unit-norm video embeddings.
    pub video: Vec<Vec<f64>>,
    /// Projected unit-norm embeddings of the window's transcripts in order.
    pub text: Vec<Vec<f64>>,
}

fn rows<T: Scalar>(t: &crate::Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).iter().map(|v| v.as_f64()).collect()).collect()
}

/// Runs the video and text towers over the centered window of each video.
/// Frames are the middle candidate of each TSN segment; nothing is masked.
pub fn extract_embeddings<T: Scalar>(
    model: &TvtsModel<T>,
    corpus: &Corpus,
    videos: &[usize],
    k: usize,
    l: f64,
) -> Result<ClipEmbeddings> {
    let enc = &model.encoder;
    let vocab = Vocab::synthetic();
    let mut out = ClipEmbeddings {
        ids: Vec::new(),
        labels: Vec::new(),
        features: Vec::new(),
        video: Vec::new(),
        text: Vec::new(),
    };
    for chunk in videos.chunks(EXTRACT_BATCH) {
        let mut vis = VisibleCubes::<T>::default();
        let mut ids = Vec::new();
        for &i in chunk {
            let v = &corpus.videos[i];
            let window = center_window(v, k, l)?;
            let (start, end) = window.extent();
            let idx = sample_frame_indices(v.fps, v.frame_count(), start, end, enc.frames, None)?;
            let clip = clip_from_indices(v, &idx);
            let mask = MaskPattern::full(enc.tokens_per_slice(), enc.num_slices());
            vis.push(&clip, &mask, None, enc)?;
            for slot in 0..k {
                ids.push(tokenize(&window.text(slot), &vocab, enc.max_text_len));
            }
            out.ids.push(v.id.clone());
            out.labels.push(v.category);
        }
        let mut tape = Tape::new();
        let p = model.store.bind_frozen(&mut tape);
        let cubes = tape.constant(vis.tensor(enc.cube_dim())?);
        let (v_all, starts) = model.video.encode_visible(&mut tape, &p, cubes, &vis)?;
        let v0 = tape.select_rows(v_all, &starts)?;
        let vn = model.video_norm.forward(&mut tape, &p, v0)?;
        let v_hat = model.video_proj.forward(&mut tape, &p, vn)?;
        let t_cls = model.text.encode_text(&mut tape, &p, &ids)?;
        let groups: Vec<(usize, usize)> = (0..chunk.len()).map(|b| (b * k, k)).collect();
        let t_mean = tape.segment_mean(t_cls, &groups)?;
        let tn = model.text_norm.forward(&mut tape, &p, t_mean)?;
        let t_hat = model.text_proj.forward(&mut tape, &p, tn)?;
        out.features.extend(rows(tape.value(v0)));
        out.video.extend(rows(tape.value(v_hat)));
        out.text.extend(rows(tape.value(t_hat)));
    }
    Ok(out)
}
