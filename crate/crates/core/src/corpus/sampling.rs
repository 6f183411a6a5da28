use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{NarratedVideo, TimedWord};
use crate::error::{Error, Result};

/// Silence between adjacent transcripts, in seconds.
pub const TRANSCRIPT_GAP_S: f64 = 1.0;
/// Window draws per video before the video is skipped.
pub const MAX_WINDOW_RETRIES: usize = 10;

/// A video's word-level timestamped narration.
#[derive(Clone, Debug, PartialEq)]
pub struct TimedTranscriptStream {
    pub words: Vec<TimedWord>,
    pub duration_s: f64,
}

/// `K` consecutive transcripts cut from one stream, possibly shuffled.
///
/// `order` is 0-based: shuffled slot `i` holds true transcript `order[i]`.
/// `spans` always describe true chronological order.
#[derive(Clone, Debug, PartialEq)]
pub struct TranscriptWindow {
    pub s_begin: f64,
    pub l: f64,
    pub spans: Vec<(f64, f64)>,
    pub texts: Vec<Vec<String>>,
    pub order: Vec<usize>,
}

impl TranscriptWindow {
    pub fn k(&self) -> usize {
        self.spans.len()
    }

    /// `[S_1, E_K]`.
    pub fn extent(&self) -> (f64, f64) {
        (self.spans[0].0, self.spans[self.k() - 1].1)
    }

    pub fn text(&self, slot: usize) -> String {
        self.texts[slot].join(" ")
    }

    /// Total span of `k` transcripts of length `l`.
    pub fn total_span(k: usize, l: f64) -> f64 {
        k as f64 * l + (k as f64 - 1.0) * TRANSCRIPT_GAP_S
    }
}

/// Start of the `k`-th (0-based) transcript.
pub fn span_start(s_begin: f64, k: usize, l: f64) -> f64 {
    s_begin + k as f64 * (l + TRANSCRIPT_GAP_S)
}

/// Cuts `k` transcripts of length `l` starting at `s_begin`, in true order.
pub fn sample_transcript_window(stream: &TimedTranscriptStream, s_begin: f64, k: usize, l: f64) -> Result<TranscriptWindow> {
    if k < 2 {
        return Err(Error::Config(format!("K must be >= 2, got {k}")));
    }
    if !(l > 0.0) {
        return Err(Error::Config(format!("transcript length l must be > 0, got {l}")));
    }
    let end = s_begin + TranscriptWindow::total_span(k, l);
    if s_begin < 0.0 || end > stream.duration_s + 1e-9 {
        return Err(Error::Range {
            start: s_begin,
            end,
            duration: stream.duration_s,
        });
    }
    let spans: Vec<(f64, f64)> = (0..k)
        .map(|i| {
            let s = span_start(s_begin, i, l);
            (s, s + l)
        })
        .collect();
    let mut texts = Vec::with_capacity(k);
    for (i, &(s, e)) in spans.iter().enumerate() {
        let words: Vec<String> = stream
            .words
            .iter()
            .filter(|w| s <= w.time && w.time <= e)
            .map(|w| w.word.clone())
            .collect();
        if words.is_empty() {
            return Err(Error::EmptyTranscript { index: i, s_begin });
        }
        texts.push(words);
    }
    Ok(TranscriptWindow {
        s_begin,
        l,
        spans,
        texts,
        order: (0..k).collect(),
    })
}

/// Draws `s_begin` uniformly until every transcript is nonempty, giving up
/// after [`MAX_WINDOW_RETRIES`] attempts.
pub fn sample_window_with_retries(
    stream: &TimedTranscriptStream,
    k: usize,
    l: f64,
    rng: &mut impl Rng,
) -> Result<Option<TranscriptWindow>> {
    let slack = stream.duration_s - TranscriptWindow::total_span(k, l);
    if slack < 0.0 {
        return Err(Error::Range {
            start: 0.0,
            end: TranscriptWindow::total_span(k, l),
            duration: stream.duration_s,
        });
    }
    for _ in 0..MAX_WINDOW_RETRIES {
        let s_begin = if slack > 0.0 { rng.gen_range(0.0..slack) } else { 0.0 };
        match sample_transcript_window(stream, s_begin, k, l) {
            Ok(w) => return Ok(Some(w)),
            Err(Error::EmptyTranscript { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Applies a uniformly random permutation to the transcript slots.
pub fn shuffle_transcripts(window: &TranscriptWindow, rng: &mut impl Rng) -> TranscriptWindow {
    let mut perm: Vec<usize> = (0..window.k()).collect();
    perm.shuffle(rng);
    permute_transcripts(window, &perm)
}

/// Puts current slot `perm[i]` into slot `i`.
pub fn permute_transcripts(window: &TranscriptWindow, perm: &[usize]) -> TranscriptWindow {
    TranscriptWindow {
        s_begin: window.s_begin,
        l: window.l,
        spans: window.spans.clone(),
        texts: perm.iter().map(|&p| window.texts[p].clone()).collect(),
        order: perm.iter().map(|&p| window.order[p]).collect(),
    }
}

/// Restores true order using the window's own permutation.
pub fn unshuffle_transcripts(window: &TranscriptWindow) -> TranscriptWindow {
    let mut inverse = vec![0; window.k()];
    for (slot, &truth) in window.order.iter().enumerate() {
        inverse[truth] = slot;
    }
    permute_transcripts(window, &inverse)
}

/// `M` frames drawn one per TSN segment, pixels scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFrames {
    pub height: usize,
    pub width: usize,
    /// Row-major `M×H×W×3`.
    pub pixels: Vec<f32>,
    pub times: Vec<f64>,
}

impl ClipFrames {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn frame(&self, j: usize) -> &[f32] {
        let n = self.height * self.width * 3;
        &self.pixels[j * n..(j + 1) * n]
    }

    pub fn from_bytes(height: usize, width: usize, frames: &[&[u8]], times: Vec<f64>) -> Self {
        let pixels = frames.iter().flat_map(|f| f.iter().map(|&b| f32::from(b) / 255.0)).collect();
        ClipFrames {
            height,
            width,
            pixels,
            times,
        }
    }

    pub fn zeroed(&self) -> Self {
        ClipFrames {
            pixels: vec![0.0; self.pixels.len()],
            ..self.clone()
        }
    }
}

/// Stored-frame indices chosen by TSN sampling over `[start, end]`.
/// With `rng = None` the middle candidate of each segment is taken.
pub fn sample_frame_indices(
    fps: f64,
    frame_count: usize,
    start: f64,
    end: f64,
    m: usize,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Vec<usize>> {
    if !(end > start) || m == 0 {
        return Err(Error::Config(format!("TSN needs end > start and M >= 1, got [{start}, {end}], M={m}")));
    }
    let seg = (end - start) / m as f64;
    let mut rng = rng;
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let a = start + j as f64 * seg;
        let b = if j + 1 == m { end } else { start + (j + 1) as f64 * seg };
        let last = j + 1 == m;
        let candidates: Vec<usize> = (0..frame_count)
            .filter(|&i| {
                let t = i as f64 / fps;
                a <= t && (t < b || (last && t <= b))
            })
            .collect();
        if candidates.is_empty() {
            return Err(Error::Sampling { segment: j, start: a, end: b });
        }
        let pick = match rng.as_deref_mut() {
            Some(r) => candidates[r.gen_range(0..candidates.len())],
            None => candidates[candidates.len() / 2],
        };
        out.push(pick);
    }
    Ok(out)
}

/// TSN sampling: `[start, end]` split into `m` equal segments, one stored
/// frame drawn uniformly from each.
pub fn sample_clip_frames(video: &NarratedVideo, start: f64, end: f64, m: usize, rng: &mut impl Rng) -> Result<ClipFrames> {
    let idx = sample_frame_indices(video.fps, video.frame_count(), start, end, m, Some(rng))?;
    Ok(clip_from_indices(video, &idx))
}

/// Clip of the stored frames at `idx`.
pub fn clip_from_indices(video: &NarratedVideo, idx: &[usize]) -> ClipFrames {
    let frames: Vec<_> = idx.iter().map(|&i| video.frame(i)).collect();
    let refs: Vec<&[u8]> = frames.iter().map(|f| f.as_ref()).collect();
    ClipFrames::from_bytes(
        video.height,
        video.width,
        &refs,
        idx.iter().map(|&i| video.frame_time(i)).collect(),
    )
}

/// Visible spatial positions per temporal slice.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPattern {
    pub tokens_per_slice: usize,
    pub ratio: f64,
    /// Sorted visible indices, one list per slice.
    pub visible: Vec<Vec<usize>>,
}

impl MaskPattern {
    pub fn full(tokens_per_slice: usize, num_slices: usize) -> Self {
        MaskPattern {
            tokens_per_slice,
            ratio: 0.0,
            visible: vec![(0..tokens_per_slice).collect(); num_slices],
        }
    }

    pub fn num_slices(&self) -> usize {
        self.visible.len()
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().map(Vec::len).sum()
    }

    /// Visible tokens as `slice * tokens_per_slice + position`, in grid order.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.visible
            .iter()
            .enumerate()
            .flat_map(|(s, v)| v.iter().map(move |&p| s * self.tokens_per_slice + p))
            .collect()
    }
}

/// Visible tokens per slice, rounding half to even.
pub fn visible_per_slice(tokens_per_slice: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio must lie in [0, 1), got {ratio}")));
    }
    let n = ((1.0 - ratio) * tokens_per_slice as f64).round_ties_even() as usize;
    if n == 0 {
        return Err(Error::Config(format!(
            "mask ratio {ratio} leaves no visible token out of {tokens_per_slice}"
        )));
    }
    Ok(n.min(tokens_per_slice))
}

/// Independent uniform choice of visible tokens in each temporal slice.
pub fn build_mask(tokens_per_slice: usize, num_slices: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPattern> {
    let n = visible_per_slice(tokens_per_slice, ratio)?;
    let visible = (0..num_slices)
        .map(|_| {
            let mut v = index::sample(rng, tokens_per_slice, n).into_vec();
            v.sort_unstable();
            v
        })
        .collect();
    Ok(MaskPattern {
        tokens_per_slice,
        ratio,
        visible,
    })
}
