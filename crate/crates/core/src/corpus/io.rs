//! On-disk corpus layout:
//!
//! ```text
//! DIR/manifest.json          generator config, seed, one entry per video
//! DIR/transcripts.jsonl      one transcript record per line
//! DIR/frames/<id>/<i>.rgb    raw H×W×3 bytes, file name = zero-padded index
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generate::{generate, GenConfig};
use super::{Corpus, FrameSource, NarratedVideo, TimedWord};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const TRANSCRIPTS: &str = "transcripts.jsonl";
pub const FRAMES: &str = "frames";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub fps: f64,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub category: usize,
    pub frames_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub gen_config: GenConfig,
    pub videos: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub video_id: String,
    pub duration_s: f64,
    pub category: usize,
    pub words: Vec<TimedWord>,
}

/// Generates and writes a corpus, returning its manifest.
pub fn generate_corpus(cfg: &GenConfig, seed: u64, dir: &Path) -> Result<Manifest> {
    let corpus = generate(cfg, seed)?;
    write_corpus(&corpus, cfg, seed, dir)
}

pub fn write_corpus(corpus: &Corpus, cfg: &GenConfig, seed: u64, dir: &Path) -> Result<Manifest> {
    let frames_root = dir.join(FRAMES);
    fs::create_dir_all(&frames_root).map_err(|e| Error::io(&frames_root, e))?;
    let mut entries = Vec::with_capacity(corpus.len());
    let tpath = dir.join(TRANSCRIPTS);
    let file = fs::File::create(&tpath).map_err(|e| Error::io(&tpath, e))?;
    let mut transcripts = BufWriter::new(file);
    for v in &corpus.videos {
        let vdir = frames_root.join(&v.id);
        fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        let mut hasher = Sha256::new();
        for i in 0..v.frame_count() {
            let bytes = v.frame(i);
            hasher.update(bytes.as_ref());
            let p = vdir.join(format!("{i:06}.rgb"));
            fs::write(&p, bytes.as_ref()).map_err(|e| Error::io(&p, e))?;
        }
        let record = TranscriptRecord {
            video_id: v.id.clone(),
            duration_s: v.duration_s,
            category: v.category,
            words: v.transcript.clone(),
        };
        let line = serde_json::to_string(&record).expect("transcript record serializes");
        writeln!(transcripts, "{line}").map_err(|e| Error::io(&tpath, e))?;
        entries.push(ManifestEntry {
            id: v.id.clone(),
            fps: v.fps,
            height: v.height,
            width: v.width,
            count: v.frame_count(),
            category: v.category,
            frames_sha256: hex::encode(hasher.finalize()),
        });
    }
    transcripts.flush().map_err(|e| Error::io(&tpath, e))?;
    let manifest = Manifest {
        seed,
        gen_config: cfg.clone(),
        videos: entries,
    };
    let mpath = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// SHA-256 of the manifest file, which covers every frame through the
/// per-video digests.
pub fn manifest_digest(dir: &Path) -> Result<String> {
    let p = dir.join(MANIFEST);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Reads a corpus written by [`write_corpus`], frames fully in memory.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: mpath.clone(),
        message: e.to_string(),
    })?;
    let tpath = dir.join(TRANSCRIPTS);
    let file = fs::File::open(&tpath).map_err(|e| Error::io(&tpath, e))?;
    let mut records = std::collections::HashMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&tpath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TranscriptRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: tpath.clone(),
            message: format!("line {}: {e}", n + 1),
        })?;
        records.insert(r.video_id.clone(), r);
    }
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let record = records.remove(&entry.id).ok_or_else(|| Error::Parse {
            path: tpath.clone(),
            message: format!("no transcript for {}", entry.id),
        })?;
        let frame_len = entry.height * entry.width * 3;
        let mut bytes = Vec::with_capacity(frame_len * entry.count);
        for i in 0..entry.count {
            let p = dir.join(FRAMES).join(&entry.id).join(format!("{i:06}.rgb"));
            let f = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if f.len() != frame_len {
                return Err(Error::Parse {
                    path: p,
                    message: format!("expected {frame_len} bytes, found {}", f.len()),
                });
            }
            bytes.extend_from_slice(&f);
        }
        videos.push(NarratedVideo {
            id: entry.id.clone(),
            category: entry.category,
            duration_s: record.duration_s,
            fps: entry.fps,
            height: entry.height,
            width: entry.width,
            frames: FrameSource::Stored(bytes),
            transcript: record.words,
        });
    }
    Ok(Corpus { videos })
}
