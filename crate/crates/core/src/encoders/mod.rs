//! Video and text encoders plus the projection heads into the shared
//! contrastive space.

pub mod layers;
mod project;
mod text;
mod video;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};

pub use layers::{Linear, Norm};
pub use project::Projection;
pub use text::TextEncoder;
pub use video::{cubify, visible_cubes, ClipTokens, VideoEncoder, VisibleCubes};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Hidden width of every transformer.
    pub d_h: usize,
    /// Video encoder depth.
    pub depth: usize,
    pub text_depth: usize,
    pub heads: usize,
    /// Patch side `P`.
    pub patch: usize,
    /// Frames per cube.
    pub tubelet: usize,
    /// Frames per clip `M`.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    /// Width `D` of the contrastive space.
    pub d_common: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_h: 64,
            depth: 4,
            text_depth: 2,
            heads: 4,
            patch: 8,
            tubelet: 2,
            frames: 8,
            height: 32,
            width: 32,
            max_text_len: 16,
            vocab_size: Vocab::synthetic().len(),
            d_common: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return fail(format!(
                "resolution {}x{} must be divisible by patch size {}",
                self.height, self.width, self.patch
            ));
        }
        if self.tubelet == 0 || self.frames == 0 || self.frames % self.tubelet != 0 {
            return fail(format!("frame count {} must be a positive multiple of tubelet {}", self.frames, self.tubelet));
        }
        if self.heads == 0 || self.d_h == 0 || self.d_h % self.heads != 0 {
            return fail(format!("hidden width {} is not divisible by {} heads", self.d_h, self.heads));
        }
        if self.max_text_len < 1 || self.vocab_size < 3 || self.d_common == 0 {
            return fail("max_text_len, vocab_size and d_common must be positive".into());
        }
        Ok(())
    }

    pub fn num_slices(&self) -> usize {
        self.frames / self.tubelet
    }

    pub fn tokens_per_slice(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Tokens before masking, excluding CLS.
    pub fn num_tokens(&self) -> usize {
        self.num_slices() * self.tokens_per_slice()
    }

    /// Length of one flattened cube.
    pub fn cube_dim(&self) -> usize {
        self.tubelet * self.patch * self.patch * 3
    }
}
