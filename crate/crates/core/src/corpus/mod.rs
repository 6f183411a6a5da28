//! Synthetic narrated videos and the sampling procedures that turn them
//! into transcript-sorting examples.

mod augment;
mod generate;
mod io;
mod sampling;
pub mod scene;
mod vocab;

use std::borrow::Cow;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use augment::random_crop_resize;
pub use generate::{generate, video_id, vocabulary_words, GenConfig};
pub use io::{generate_corpus, load_corpus, manifest_digest, write_corpus, Manifest, ManifestEntry, TranscriptRecord};
pub use sampling::{
    build_mask, clip_from_indices, permute_transcripts, sample_clip_frames, sample_frame_indices,
    sample_transcript_window, sample_window_with_retries, shuffle_transcripts, span_start, unshuffle_transcripts,
    visible_per_slice, ClipFrames, MaskPattern, TimedTranscriptStream, TranscriptWindow,
    MAX_WINDOW_RETRIES, TRANSCRIPT_GAP_S,
};
pub use scene::Scene;
pub use vocab::{detokenize, tokenize, Vocab, CLS, PAD, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedWord {
    #[serde(rename = "w")]
    pub word: String,
    /// Seconds from the start of the video.
    #[serde(rename = "s")]
    pub time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FrameSource {
    /// Rendered on demand from the scene description.
    Procedural(Scene),
    /// Decoded frame archive, `count×h×w×3` bytes.
    Stored(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NarratedVideo {
    pub id: String,
    /// Used only by evaluation.
    pub category: usize,
    pub duration_s: f64,
    pub fps: f64,
    pub height: usize,
    pub width: usize,
    pub frames: FrameSource,
    pub transcript: Vec<TimedWord>,
}

impl NarratedVideo {
    pub fn frame_count(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }

    pub fn frame_time(&self, index: usize) -> f64 {
        index as f64 / self.fps
    }

    /// Row-major `h×w×3` bytes of one stored frame.
    pub fn frame(&self, index: usize) -> Cow<'_, [u8]> {
        let n = self.height * self.width * 3;
        match &self.frames {
            FrameSource::Procedural(scene) => Cow::Owned(scene.render(self.frame_time(index), self.height, self.width)),
            FrameSource::Stored(bytes) => Cow::Borrowed(&bytes[index * n..(index + 1) * n]),
        }
    }

    pub fn stream(&self) -> TimedTranscriptStream {
        TimedTranscriptStream {
            words: self.transcript.clone(),
            duration_s: self.duration_s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Corpus {
    pub videos: Vec<NarratedVideo>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// Deterministic stratified split: within each category, every
    /// `holdout_every`-th video goes to the second part. `0` holds out nothing.
    pub fn split(&self, holdout_every: usize) -> (Vec<usize>, Vec<usize>) {
        let mut seen: HashMap<usize, usize> = HashMap::new();
        let mut keep = Vec::new();
        let mut held = Vec::new();
        for (i, v) in self.videos.iter().enumerate() {
            let j = seen.entry(v.category).or_default();
            if holdout_every > 0 && *j % holdout_every == holdout_every - 1 {
                held.push(i);
            } else {
                keep.push(i);
            }
            *j += 1;
        }
        (keep, held)
    }
}
