use crate::encoders::{EncoderConfig, Norm, Projection, TextEncoder, VideoEncoder};
use super::checkpoint::Checkpoint;
use crate::error::{CheckpointError, Error, Result};
use crate::params::{Init, ParamStore};
use crate::scalar::Scalar;
use crate::sortformer::{Proxy, SortFormer};

/// Parameter-name prefix of the video encoder, the part kept for
/// downstream evaluation.
pub const VIDEO_PREFIX: &str = "video.";

/// All trainable modules and their parameters.
#[derive(Clone, Debug)]
pub struct TvtsModel<T> {
    pub encoder: EncoderConfig,
    pub store: ParamStore<T>,
    pub video: VideoEncoder,
    pub text: TextEncoder,
    /// Normalizes `v_0` before the video projection.
    pub video_norm: Norm,
    pub video_proj: Projection,
    /// Normalizes the mean transcript vector before the text projection.
    pub text_norm: Norm,
    pub text_proj: Projection,
    pub sort: SortFormer,
}

impl<T: Scalar> TvtsModel<T> {
    pub fn new(encoder: &EncoderConfig, k: usize, proxy: Proxy, seed: u64) -> Result<Self> {
        let init = Init::new(seed);
        let mut store = ParamStore::new();
        let video = VideoEncoder::new(&mut store, &init, encoder)?;
        let text = TextEncoder::new(&mut store, &init, encoder)?;
        let video_norm = Norm::new(&mut store, "proj.video.norm", encoder.d_h);
        let video_proj = Projection::new(&mut store, &init, "proj.video", encoder.d_h, encoder.d_common);
        let text_norm = Norm::new(&mut store, "proj.text.norm", encoder.d_h);
        let text_proj = Projection::new(&mut store, &init, "proj.text", encoder.d_h, encoder.d_common);
        let sort = SortFormer::new(
            &mut store,
            &init,
            encoder.d_h,
            encoder.heads,
            k,
            encoder.num_slices(),
            proxy,
        )?;
        Ok(TvtsModel {
            encoder: encoder.clone(),
            store,
            video,
            text,
            video_norm,
            video_proj,
            text_norm,
            text_proj,
            sort,
        })
    }

    /// Rebuilds the model described by a checkpoint's config and loads
    /// every tensor; a missing or extra tensor is an error.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let cfg = &ckpt.config;
        let mut model = Self::new(&cfg.encoder, cfg.k, cfg.proxy, cfg.seed)?;
        let copied = model.store.load_matching(&ckpt.params, "")?;
        if copied != model.store.len() || copied != ckpt.params.len() {
            return Err(Error::Checkpoint(CheckpointError::Missing(format!(
                "checkpoint holds {} of {} model tensors",
                copied,
                model.store.len()
            ))));
        }
        Ok(model)
    }

    /// SHA-256 of the video encoder parameters.
    pub fn video_digest(&self) -> String {
        self.store.digest_prefix(VIDEO_PREFIX)
    }
}
