use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::config::TrainConfig;
use crate::corpus::{
    build_mask, random_crop_resize, sample_clip_frames, sample_window_with_retries, shuffle_transcripts, ClipFrames,
    Corpus, MaskPattern, NarratedVideo, TranscriptWindow,
};
use crate::error::{Error, Result};
use crate::rng::derived_rng;

const EPOCH_TAG: u64 = 0x6570_6f63;
const BATCH_TAG: u64 = 0x6261_7463;

/// One training example.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Index into the corpus.
    pub video: usize,
    /// Shuffled window; `window.order` holds the targets.
    pub window: TranscriptWindow,
    pub clip: ClipFrames,
    pub mask: MaskPattern,
    /// Slot `s` of the clip shows slice `slice_perm[s]` (video-sort proxy).
    pub slice_perm: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub id: u64,
    pub samples: Vec<Sample>,
}

impl Batch {
    pub fn orders(&self) -> Vec<Vec<usize>> {
        self.samples.iter().map(|s| s.window.order.clone()).collect()
    }
}

/// Visits the pool in a fresh random order every epoch. Position `n` of
/// the endless visiting sequence is a pure function of the seed.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    seed: u64,
    pool: Vec<usize>,
    cache: HashMap<u64, Vec<usize>>,
}

impl EpochSampler {
    pub fn new(pool: Vec<usize>, seed: u64) -> Self {
        EpochSampler {
            seed,
            pool,
            cache: HashMap::new(),
        }
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    pub fn at(&mut self, position: u64) -> usize {
        let n = self.pool.len() as u64;
        let epoch = position / n;
        let (seed, pool) = (self.seed, &self.pool);
        let perm = self.cache.entry(epoch).or_insert_with(|| {
            let mut p = pool.clone();
            p.shuffle(&mut derived_rng(seed, &[EPOCH_TAG, epoch]));
            p
        });
        let v = perm[(position % n) as usize];
        if self.cache.len() > 4 {
            self.cache.retain(|&e, _| e + 2 >= epoch);
        }
        v
    }
}

/// Window → shuffle → TSN clip → mask for one video. `None` when no
/// window with nonempty transcripts was found.
pub fn make_sample(
    corpus: &Corpus,
    video: usize,
    cfg: &TrainConfig,
    augment: bool,
    rng: &mut impl Rng,
) -> Result<Option<Sample>> {
    let v: &NarratedVideo = &corpus.videos[video];
    let l = match cfg.l_max {
        Some(hi) if hi > cfg.l => rng.gen_range(cfg.l..=hi),
        _ => cfg.l,
    };
    let Some(window) = sample_window_with_retries(&v.stream(), cfg.k, l, rng)? else {
        return Ok(None);
    };
    let window = shuffle_transcripts(&window, rng);
    let (start, end) = window.extent();
    let mut clip = sample_clip_frames(v, start, end, cfg.encoder.frames, rng)?;
    if augment && cfg.crop_scale > 1.0 {
        clip = random_crop_resize(&clip, cfg.crop_scale, rng);
    }
    if cfg.zero_frames {
        clip = clip.zeroed();
    }
    let mask = build_mask(
        cfg.encoder.tokens_per_slice(),
        cfg.encoder.num_slices(),
        cfg.mask_ratio,
        rng,
    )?;
    let slice_perm = (cfg.proxy == crate::sortformer::Proxy::Videosort).then(|| {
        let mut p: Vec<usize> = (0..cfg.encoder.num_slices()).collect();
        p.shuffle(rng);
        p
    });
    Ok(Some(Sample {
        video,
        window,
        clip,
        mask,
        slice_perm,
    }))
}

/// Batch `id`: walks the epoch sequence from position `id·B`, skipping
/// unusable videos and repeats, until `B` distinct videos are collected.
pub fn assemble_batch(corpus: &Corpus, sampler: &mut EpochSampler, cfg: &TrainConfig, id: u64) -> Result<Batch> {
    let b = cfg.batch_size;
    let pool = sampler.pool().len();
    if pool < b {
        return Err(Error::Data(format!("{pool} usable videos for batch size {b}")));
    }
    let mut samples = Vec::with_capacity(b);
    let mut seen = std::collections::HashSet::new();
    let mut pos = id * b as u64;
    let limit = pos + 2 * pool as u64 + b as u64;
    while samples.len() < b {
        if pos >= limit {
            return Err(Error::Data(format!("could not fill batch {id} with {b} usable videos")));
        }
        let video = sampler.at(pos);
        let mut rng = derived_rng(cfg.seed, &[BATCH_TAG, id, pos]);
        pos += 1;
        if !seen.insert(video) {
            continue;
        }
        if let Some(s) = make_sample(corpus, video, cfg, true, &mut rng)? {
            samples.push(s);
        }
    }
    Ok(Batch { id, samples })
}
