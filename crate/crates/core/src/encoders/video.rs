use crate::corpus::{ClipFrames, MaskPattern};
use crate::error::{Error, Result};
use crate::numerics::{AttnLayout, Tape, Tensor, Var};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::scalar::Scalar;

use super::layers::{run_stack, Block, Linear};
use super::EncoderConfig;

/// Token rows of one clip. Row 0 is CLS; row `i + 1` is the cube at
/// temporal slice `slices[i]` and spatial position `positions[i]`.
#[derive(Clone, Debug)]
pub struct ClipTokens {
    pub tokens: Var,
    pub slices: Vec<usize>,
    pub positions: Vec<usize>,
}

impl ClipTokens {
    pub fn len(&self) -> usize {
        self.slices.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn check_clip(clip: &ClipFrames, cfg: &EncoderConfig) -> Result<()> {
    cfg.validate()?;
    if clip.len() != cfg.frames || clip.height != cfg.height || clip.width != cfg.width {
        return Err(Error::Config(format!(
            "clip {}x{}x{} does not match encoder {}x{}x{}",
            clip.len(),
            clip.height,
            clip.width,
            cfg.frames,
            cfg.height,
            cfg.width
        )));
    }
    Ok(())
}

fn push_cube<T: Scalar>(clip: &ClipFrames, cfg: &EncoderConfig, slice: usize, pos: usize, out: &mut Vec<T>) {
    let p = cfg.patch;
    let gw = cfg.width / p;
    let (gy, gx) = (pos / gw, pos % gw);
    for dt in 0..cfg.tubelet {
        let f = clip.frame(slice * cfg.tubelet + dt);
        for y in 0..p {
            let start = ((gy * p + y) * cfg.width + gx * p) * 3;
            out.extend(f[start..start + p * 3].iter().map(|&v| T::lit(f64::from(v))));
        }
    }
}

/// Every cube of the clip flattened as `(frame, row, column, channel)`,
/// one row per cube in `(slice, row, column)` grid order.
pub fn cubify<T: Scalar>(clip: &ClipFrames, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    check_clip(clip, cfg)?;
    let mut data = Vec::with_capacity(cfg.num_tokens() * cfg.cube_dim());
    for s in 0..cfg.num_slices() {
        for pos in 0..cfg.tokens_per_slice() {
            push_cube(clip, cfg, s, pos, &mut data);
        }
    }
    Tensor::new(vec![cfg.num_tokens(), cfg.cube_dim()], data)
}

/// Visible cubes of several clips stacked for one batched forward pass.
#[derive(Clone, Debug)]
pub struct VisibleCubes<T> {
    pub data: Vec<T>,
    /// Temporal index used for the position embedding of each row.
    pub slices: Vec<usize>,
    pub positions: Vec<usize>,
    /// Visible rows per clip.
    pub lengths: Vec<usize>,
}

impl<T: Scalar> Default for VisibleCubes<T> {
    fn default() -> Self {
        VisibleCubes {
            data: Vec::new(),
            slices: Vec::new(),
            positions: Vec::new(),
            lengths: Vec::new(),
        }
    }
}

impl<T: Scalar> VisibleCubes<T> {
    /// Appends one clip. With `slot_order`, temporal slot `s` is filled by
    /// slice `slot_order[s]` and embedded as slot `s`.
    pub fn push(&mut self, clip: &ClipFrames, mask: &MaskPattern, slot_order: Option<&[usize]>, cfg: &EncoderConfig) -> Result<()> {
        check_clip(clip, cfg)?;
        if mask.tokens_per_slice != cfg.tokens_per_slice() || mask.num_slices() != cfg.num_slices() {
            return Err(Error::Contract(format!(
                "mask grid {}x{} does not match token grid {}x{}",
                mask.num_slices(),
                mask.tokens_per_slice,
                cfg.num_slices(),
                cfg.tokens_per_slice()
            )));
        }
        let mut n = 0;
        for (slot, visible) in mask.visible.iter().enumerate() {
            let src = slot_order.map_or(slot, |o| o[slot]);
            for &pos in visible {
                push_cube(clip, cfg, src, pos, &mut self.data);
                self.slices.push(slot);
                self.positions.push(pos);
                n += 1;
            }
        }
        self.lengths.push(n);
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.slices.len()
    }

    pub fn tensor(&self, cube_dim: usize) -> Result<Tensor<T>> {
        Tensor::new(vec![self.rows(), cube_dim], self.data.clone())
    }
}

/// Convenience wrapper around [`VisibleCubes::push`] for a single clip.
pub fn visible_cubes<T: Scalar>(clip: &ClipFrames, mask: &MaskPattern, cfg: &EncoderConfig) -> Result<VisibleCubes<T>> {
    let mut v = VisibleCubes::default();
    v.push(clip, mask, None, cfg)?;
    Ok(v)
}

/// Cube embedding, divided space-time positions, CLS token and a stack of
/// joint space-time attention blocks.
#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub cfg: EncoderConfig,
    embed: Linear,
    cls: ParamId,
    cls_pos: ParamId,
    time_pos: ParamId,
    space_pos: ParamId,
    blocks: Vec<Block>,
}

impl VideoEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &Init, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_h;
        let mut normal = |name: &str, shape: &[usize], decay: bool| store.add(name, init.normal(name, shape), decay);
        let cls = normal("video.cls", &[1, d], false);
        let cls_pos = normal("video.pos.cls", &[1, d], false);
        let time_pos = normal("video.pos.time", &[cfg.num_slices(), d], false);
        let space_pos = normal("video.pos.space", &[cfg.tokens_per_slice(), d], false);
        let embed = Linear::new(store, init, "video.embed", cfg.cube_dim(), d, true);
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, init, &format!("video.blocks.{i}"), d, cfg.heads))
            .collect();
        Ok(VideoEncoder {
            cfg: cfg.clone(),
            embed,
            cls,
            cls_pos,
            time_pos,
            space_pos,
            blocks,
        })
    }

    /// Linear embedding of every cube, CLS prepended. `cubes` is the output
    /// of [`cubify`], possibly a tracked leaf.
    pub fn cube_embed<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, cubes: Var) -> Result<ClipTokens> {
        let expect = [self.cfg.num_tokens(), self.cfg.cube_dim()];
        if tape.shape(cubes) != expect {
            return Err(Error::dim("cube_embed", tape.shape(cubes), &expect));
        }
        let e = self.embed.forward(tape, p, cubes)?;
        let tokens = tape.concat_rows(&[p.var(self.cls), e])?;
        let tps = self.cfg.tokens_per_slice();
        Ok(ClipTokens {
            tokens,
            slices: (0..self.cfg.num_tokens()).map(|i| i / tps).collect(),
            positions: (0..self.cfg.num_tokens()).map(|i| i % tps).collect(),
        })
    }

    /// Adds the shared temporal and spatial tables, and the CLS position.
    pub fn add_spacetime_pos<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, tokens: &ClipTokens) -> Result<ClipTokens> {
        let addend = self.pos_addend(tape, p, &tokens.slices, &tokens.positions)?;
        let addend = tape.concat_rows(&[p.var(self.cls_pos), addend])?;
        Ok(ClipTokens {
            tokens: tape.add(tokens.tokens, addend)?,
            ..tokens.clone()
        })
    }

    fn pos_addend<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, slices: &[usize], positions: &[usize]) -> Result<Var> {
        let t = tape.select_rows(p.var(self.time_pos), slices)?;
        let s = tape.select_rows(p.var(self.space_pos), positions)?;
        tape.add(t, s)
    }

    /// Drops masked tokens from a full grid; CLS and relative order are kept.
    pub fn apply_mask<T: Scalar>(&self, tape: &mut Tape<T>, tokens: &ClipTokens, mask: &MaskPattern) -> Result<ClipTokens> {
        let (ns, tps) = (self.cfg.num_slices(), self.cfg.tokens_per_slice());
        if mask.tokens_per_slice != tps || mask.num_slices() != ns || tokens.slices.len() != ns * tps {
            return Err(Error::Contract(format!(
                "mask grid {}x{} does not match token grid {ns}x{tps}",
                mask.num_slices(),
                mask.tokens_per_slice
            )));
        }
        let flat = mask.flat_indices();
        let mut rows = Vec::with_capacity(flat.len() + 1);
        rows.push(0);
        rows.extend(flat.iter().map(|&f| f + 1));
        Ok(ClipTokens {
            tokens: tape.select_rows(tokens.tokens, &rows)?,
            slices: flat.iter().map(|&f| tokens.slices[f]).collect(),
            positions: flat.iter().map(|&f| tokens.positions[f]).collect(),
        })
    }

    /// Joint attention over all tokens of one clip; returns `[v_0; v_1..v_N]`.
    pub fn encode_video<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, tokens: &ClipTokens) -> Result<Var> {
        let layout = AttnLayout::packed(self.cfg.heads, &[tokens.len()]);
        run_stack(&self.blocks, tape, p, tokens.tokens, &layout)
    }

    /// Batched equivalent of `cube_embed → add_spacetime_pos → apply_mask →
    /// encode_video` that only embeds visible cubes. Returns the packed
    /// outputs and the row of each clip's CLS token.
    pub fn encode_visible<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, cubes: Var, vis: &VisibleCubes<T>) -> Result<(Var, Vec<usize>)> {
        let e = self.embed.forward(tape, p, cubes)?;
        let pos = self.pos_addend(tape, p, &vis.slices, &vis.positions)?;
        let e = tape.add(e, pos)?;
        let cls = tape.add(p.var(self.cls), p.var(self.cls_pos))?;
        let all = tape.concat_rows(&[cls, e])?;
        let mut rows = Vec::with_capacity(vis.rows() + vis.lengths.len());
        let mut starts = Vec::with_capacity(vis.lengths.len());
        let mut off = 1;
        for &n in &vis.lengths {
            starts.push(rows.len());
            rows.push(0);
            rows.extend(off..off + n);
            off += n;
        }
        let x = tape.select_rows(all, &rows)?;
        let lens: Vec<usize> = vis.lengths.iter().map(|n| n + 1).collect();
        let layout = AttnLayout::packed(self.cfg.heads, &lens);
        Ok((run_stack(&self.blocks, tape, p, x, &layout)?, starts))
    }
}
