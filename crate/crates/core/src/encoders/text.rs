use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::numerics::{AttnLayout, Tape, Var};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::scalar::Scalar;

use super::layers::{run_stack, Block};
use super::EncoderConfig;

/// Token embedding, learned 1-D positions and a transformer stack whose
/// output at the `[CLS]` position represents the transcript.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: EncoderConfig,
    embed: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
}

impl TextEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &Init, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_h;
        let embed = store.add("text.embed", init.normal("text.embed", &[cfg.vocab_size, d]), true);
        let pos = store.add("text.pos", init.normal("text.pos", &[cfg.max_text_len, d]), false);
        let blocks = (0..cfg.text_depth)
            .map(|i| Block::new(store, init, &format!("text.blocks.{i}"), d, cfg.heads))
            .collect();
        Ok(TextEncoder {
            cfg: cfg.clone(),
            embed,
            pos,
            blocks,
        })
    }

    /// One `[CLS]` vector per transcript, `[n × d_h]`. Trailing padding is
    /// dropped before attention; interior padding is masked.
    pub fn encode_text<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, ids: &[Vec<usize>]) -> Result<Var> {
        self.encode(tape, p, ids, true)
    }

    /// Same as [`encode_text`](Self::encode_text) but keeps every padding
    /// position in the sequence and masks it.
    pub fn encode_text_padded<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, ids: &[Vec<usize>]) -> Result<Var> {
        self.encode(tape, p, ids, false)
    }

    fn encode<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, ids: &[Vec<usize>], trim: bool) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Contract("encode_text needs at least one transcript".into()));
        }
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut mask = Vec::new();
        let mut lengths = Vec::with_capacity(ids.len());
        let mut starts = Vec::with_capacity(ids.len());
        for seq in ids {
            if seq.is_empty() || seq.len() > self.cfg.max_text_len {
                return Err(Error::Contract(format!(
                    "token sequence of length {} outside 1..={}",
                    seq.len(),
                    self.cfg.max_text_len
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&i| i >= self.cfg.vocab_size) {
                return Err(Error::Vocab {
                    id: bad,
                    size: self.cfg.vocab_size,
                });
            }
            let len = if trim {
                seq.iter().rposition(|&i| i != PAD).map_or(1, |i| i + 1)
            } else {
                seq.len()
            };
            starts.push(tokens.len());
            tokens.extend_from_slice(&seq[..len]);
            positions.extend(0..len);
            mask.extend(seq[..len].iter().enumerate().map(|(j, &i)| j > 0 && i == PAD));
            lengths.push(len);
        }
        let e = tape.select_rows(p.var(self.embed), &tokens)?;
        let pe = tape.select_rows(p.var(self.pos), &positions)?;
        let x = tape.add(e, pe)?;
        let mut layout = AttnLayout::packed(self.cfg.heads, &lengths);
        if mask.iter().any(|&m| m) {
            layout.key_mask = Some(mask);
        }
        let out = run_stack(&self.blocks, tape, p, x, &layout)?;
        tape.select_rows(out, &starts)
    }
}
