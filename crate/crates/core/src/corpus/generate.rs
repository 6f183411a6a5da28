use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{self, Scene, MOTIONS, PALETTE, SHAPES};
use super::{Corpus, FrameSource, NarratedVideo, TimedWord};
use crate::error::{Error, Result};
use crate::rng::derived_rng;

/// Knobs of the synthetic narrated-video generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub count: usize,
    pub duration_s: f64,
    pub fps: f64,
    pub height: usize,
    pub width: usize,
    /// Patch side the frames must tile into.
    pub patch: usize,
    /// Shape extent as a fraction of the frame side.
    pub shape_size: f64,
    pub amplitude: f64,
    pub period_range: (f64, f64),
    /// Range of seconds between consecutive color changes.
    pub color_interval: (f64, f64),
    /// A new color never repeats any of this many most recent colors.
    pub color_memory: usize,
    /// Background tint toward the current shape color, 0 disables.
    pub tint: f64,
    /// Seconds between consecutive spoken words.
    pub word_gap: f64,
    /// Minimum word count of any transcript window of length `min_words_span`.
    pub min_words: usize,
    pub min_words_span: f64,
    /// Narrate direction reversals and add filler phrases naming the
    /// current direction of travel.
    pub narrate_direction: bool,
    /// Probability that a filler slot names the direction of travel.
    pub direction_rate: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 100,
            duration_s: 32.0,
            fps: 2.0,
            height: 32,
            width: 32,
            patch: 8,
            shape_size: 0.45,
            amplitude: 0.26,
            period_range: (6.0, 10.0),
            color_interval: (4.0, 6.0),
            color_memory: 5,
            tint: 0.4,
            word_gap: 0.3,
            min_words: 2,
            min_words_span: 3.0,
            narrate_direction: true,
            direction_rate: 0.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.count == 0 {
            return fail("count must be >= 1".into());
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return fail(format!(
                "resolution {}x{} must be divisible by patch size {}",
                self.height, self.width, self.patch
            ));
        }
        if !(self.fps > 0.0 && self.duration_s > 0.0) {
            return fail("fps and duration must be > 0".into());
        }
        let frames = self.duration_s * self.fps;
        if (frames - frames.round()).abs() > 1e-9 {
            return fail(format!("duration x fps = {frames} is not a whole frame count"));
        }
        let (lo, hi) = self.color_interval;
        if !(lo > 0.0 && hi >= lo) {
            return fail("color_interval must satisfy 0 < lo <= hi".into());
        }
        if !(0.0..=1.0).contains(&self.direction_rate) {
            return fail(format!("direction_rate must lie in [0, 1], got {}", self.direction_rate));
        }
        if self.color_memory >= PALETTE.len() {
            return fail(format!("color_memory must be < palette size {}", PALETTE.len()));
        }
        if self.shape_size / 2.0 + self.amplitude > 0.5 + 1e-9 {
            return fail("shape would leave the frame: shape_size/2 + amplitude > 0.5".into());
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }
}

/// Stable id of the `index`-th generated video.
pub fn video_id(index: usize) -> String {
    format!("vid{index:06}")
}

/// Generates the corpus in memory; frames are rendered on demand.
pub fn generate(cfg: &GenConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let categories = scene::num_categories();
    let videos = (0..cfg.count)
        .map(|i| {
            let mut rng = derived_rng(seed, &[0x6765_6e, i as u64]);
            let scene = sample_scene(cfg, i % categories, &mut rng);
            let transcript = narrate(cfg, &scene, &mut rng);
            NarratedVideo {
                id: video_id(i),
                category: scene.category(),
                duration_s: cfg.duration_s,
                fps: cfg.fps,
                height: cfg.height,
                width: cfg.width,
                frames: FrameSource::Procedural(scene),
                transcript,
            }
        })
        .collect();
    Ok(Corpus { videos })
}

fn sample_scene(cfg: &GenConfig, category: usize, rng: &mut impl Rng) -> Scene {
    let mut events = Vec::new();
    let mut recent: Vec<usize> = Vec::new();
    let mut t = 0.0;
    while t < cfg.duration_s {
        let choices: Vec<usize> = (0..PALETTE.len()).filter(|c| !recent.contains(c)).collect();
        let color = *choices.choose(rng).expect("palette larger than memory");
        events.push((t, color));
        recent.push(color);
        if recent.len() > cfg.color_memory {
            recent.remove(0);
        }
        let (lo, hi) = cfg.color_interval;
        t += if hi > lo { rng.gen_range(lo..hi) } else { lo };
    }
    let (plo, phi) = cfg.period_range;
    Scene {
        shape: category / MOTIONS.len(),
        motion: category % MOTIONS.len(),
        size: cfg.shape_size,
        amplitude: cfg.amplitude,
        period: if phi > plo { rng.gen_range(plo..phi) } else { plo },
        phase: rng.gen_range(0.0..1.0),
        handedness: if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
        offset: rng.gen_range(-0.04..0.04),
        tint: cfg.tint,
        color_events: events,
    }
}

const FILLERS: [&[&str]; 8] = [
    &["look", "at", "the", "{shape}"],
    &["the", "{shape}", "keeps", "moving"],
    &["watch", "the", "{shape}"],
    &["okay"],
    &["and", "now"],
    &["so"],
    &["here", "we", "go"],
    &["then"],
];

/// Words the generator can ever emit.
pub fn vocabulary_words() -> Vec<String> {
    let mut words: Vec<String> = vec!["it", "is", "turns", "now", "around", "goes", "left", "right", "up", "down"]
        .into_iter()
        .map(String::from)
        .collect();
    words.extend(SHAPES.iter().map(|s| s.to_string()));
    words.extend(PALETTE.iter().map(|(n, _)| n.to_string()));
    for f in FILLERS {
        words.extend(f.iter().filter(|w| !w.starts_with('{')).map(|w| w.to_string()));
    }
    let mut seen = std::collections::HashSet::new();
    words.retain(|w| seen.insert(w.clone()));
    words
}

/// Direction of travel at `t`; diagonal motion gets a vertical and a
/// horizontal word.
fn direction_words(scene: &Scene, t: f64) -> Vec<&'static str> {
    let (x0, y0) = scene.position(t - 0.1);
    let (x1, y1) = scene.position(t + 0.1);
    let (dx, dy) = (x1 - x0, y1 - y0);
    let horizontal = if dx >= 0.0 { "right" } else { "left" };
    let vertical = if dy >= 0.0 { "down" } else { "up" };
    let (ax, ay) = (dx.abs(), dy.abs());
    if ax.min(ay) > 0.5 * ax.max(ay) {
        vec![vertical, horizontal]
    } else if ax >= ay {
        vec![horizontal]
    } else {
        vec![vertical]
    }
}

/// Times at which the shape's travel direction flips to its opposite.
pub fn reversal_times(scene: &Scene, duration: f64) -> Vec<f64> {
    const STEP: f64 = 0.05;
    let velocity = |t: f64| {
        let (x0, y0) = scene.position(t);
        let (x1, y1) = scene.position(t + STEP);
        (x1 - x0, y1 - y0)
    };
    let mut out = Vec::new();
    let mut prev = velocity(0.0);
    let mut t = STEP;
    while t < duration {
        let v = velocity(t);
        let dot = prev.0 * v.0 + prev.1 * v.1;
        let norms = (prev.0.hypot(prev.1) * v.0.hypot(v.1)).max(1e-12);
        if dot / norms < -0.5 {
            out.push(t);
        }
        prev = v;
        t += STEP;
    }
    out
}

/// Produces the timed transcript. Color changes and direction reversals
/// are narrated right after they happen; the rest is filled with phrases
/// naming the shape or the current direction, or carrying nothing.
fn narrate(cfg: &GenConfig, scene: &Scene, rng: &mut impl Rng) -> Vec<TimedWord> {
    let gap = cfg.word_gap;
    let shape = SHAPES[scene.shape];
    // (start time, words, names a color); fillers go between these.
    let mut anchored: Vec<(f64, Vec<String>, bool)> = Vec::new();
    for (i, &(te, color)) in scene.color_events.iter().enumerate() {
        let verb = if i == 0 { "is" } else { "turns" };
        let words = vec!["it".to_string(), verb.to_string(), PALETTE[color].0.to_string()];
        anchored.push((te + 0.15 - 2.0 * gap, words, true));
    }
    if cfg.narrate_direction {
        for t in reversal_times(scene, cfg.duration_s) {
            let words = ["now", "it", "turns", "around"].map(String::from).to_vec();
            anchored.push((t + 0.15, words, false));
        }
    }
    anchored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let span = |p: &(f64, Vec<String>, bool)| p.0 + gap * (p.1.len() - 1) as f64;
    let mut kept: Vec<(f64, Vec<String>, bool)> = Vec::new();
    for p in anchored {
        // On overlap a reversal phrase yields to a color phrase.
        match kept.last() {
            Some(last) if p.0 < span(last) + gap + 0.2 => {
                if p.2 && !last.2 {
                    kept.pop();
                    kept.push(p);
                }
            }
            _ => kept.push(p),
        }
    }
    let mut words = Vec::new();
    let push = |w: &str, t: f64, words: &mut Vec<TimedWord>| {
        if (0.0..=cfg.duration_s).contains(&t) {
            words.push(TimedWord {
                word: w.to_string(),
                time: (t * 1000.0).round() / 1000.0,
            });
        }
    };
    for (i, phrase) in kept.iter().enumerate() {
        for (j, w) in phrase.1.iter().enumerate() {
            push(w, phrase.0 + gap * j as f64, &mut words);
        }
        let stop = kept.get(i + 1).map_or(cfg.duration_s, |next| next.0 - gap - 0.2);
        let mut t = span(phrase) + gap + 0.2;
        loop {
            let filler: Vec<String> = if cfg.narrate_direction && rng.gen_bool(cfg.direction_rate) {
                let mut f = vec!["it".to_string(), "goes".to_string()];
                f.extend(direction_words(scene, t + 2.0 * gap).into_iter().map(String::from));
                f
            } else {
                FILLERS
                    .choose(rng)
                    .expect("fillers")
                    .iter()
                    .map(|w| if *w == "{shape}" { shape.to_string() } else { w.to_string() })
                    .collect()
            };
            let end = t + gap * (filler.len() - 1) as f64;
            if end > stop {
                break;
            }
            for (j, w) in filler.iter().enumerate() {
                push(w, t + gap * j as f64, &mut words);
            }
            t = end + gap + 0.2;
        }
    }
    words.sort_by(|a, b| a.time.total_cmp(&b.time));
    words
}
