//! The ordering head: transformer blocks over transcript and video
//! representations, with a K-way classifier and three alternative proxies.

pub mod perm;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::layers::{run_stack, Block, Linear, Norm};
use crate::error::{Error, Result};
use crate::numerics::{AttnLayout, Tape, Tensor, Var};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::scalar::Scalar;

use perm::{factorial, slot_pairs, FACTORIAL_MAX_K};

/// Which ordering objective accompanies the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proxy {
    /// Per-slot K-way classification of the true position.
    Kway,
    /// Relative order of every slot pair.
    Pair,
    /// One class per permutation.
    Factorial,
    /// Order shuffled video slices given ordered transcripts.
    Videosort,
    /// Contrastive loss only.
    None,
}

impl Proxy {
    pub const ALL: [Proxy; 5] = [Proxy::Kway, Proxy::Pair, Proxy::Factorial, Proxy::Videosort, Proxy::None];

    pub fn name(self) -> &'static str {
        match self {
            Proxy::Kway => "kway",
            Proxy::Pair => "pair",
            Proxy::Factorial => "factorial",
            Proxy::Videosort => "videosort",
            Proxy::None => "none",
        }
    }
}

impl fmt::Display for Proxy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Proxy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Proxy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown proxy {s:?}; expected kway|pair|factorial|videosort|none")))
    }
}

#[derive(Clone, Debug)]
enum Head {
    Kway { norm: Norm, cls: Linear },
    Pair { norm: Norm, first: Linear, second: Linear },
    Factorial { token: ParamId, norm: Norm, cls: Linear },
    Videosort { slots: ParamId, norm: Norm, cls: Linear },
    None,
}

/// Video tokens of a batch as produced by the video encoder: packed rows,
/// with clip `b` occupying `starts[b]..starts[b] + lens[b]` (CLS first).
#[derive(Clone, Copy, Debug)]
pub struct VideoRows<'a> {
    pub tokens: Var,
    pub starts: &'a [usize],
    pub lens: &'a [usize],
}

impl VideoRows<'_> {
    pub fn batch(&self) -> usize {
        self.starts.len()
    }
}

/// Shared trunk plus the head of the configured proxy.
#[derive(Clone, Debug)]
pub struct SortFormer {
    pub k: usize,
    pub num_slices: usize,
    pub proxy: Proxy,
    pub heads: usize,
    trunk: Vec<Block>,
    head: Head,
}

/// Blocks in the trunk.
pub const TRUNK_DEPTH: usize = 2;

impl SortFormer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &Init,
        d_h: usize,
        heads: usize,
        k: usize,
        num_slices: usize,
        proxy: Proxy,
    ) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("K must be >= 2, got {k}")));
        }
        if proxy == Proxy::Factorial && k > FACTORIAL_MAX_K {
            return Err(Error::Config(format!(
                "factorial proxy supports K <= {FACTORIAL_MAX_K}, got {k}"
            )));
        }
        let trunk = (0..TRUNK_DEPTH)
            .map(|i| Block::new(store, init, &format!("sort.trunk.{i}"), d_h, heads))
            .collect();
        let head = match proxy {
            Proxy::Kway => Head::Kway {
                norm: Norm::new(store, "sort.kway.norm", d_h),
                cls: Linear::new(store, init, "sort.kway.cls", d_h, k, true),
            },
            Proxy::Pair => Head::Pair {
                norm: Norm::new(store, "sort.pair.norm", d_h),
                first: Linear::new(store, init, "sort.pair.first", d_h, 1, true),
                second: Linear::new(store, init, "sort.pair.second", d_h, 1, false),
            },
            Proxy::Factorial => Head::Factorial {
                token: store.add("sort.factorial.token", init.normal("sort.factorial.token", &[1, d_h]), false),
                norm: Norm::new(store, "sort.factorial.norm", d_h),
                cls: Linear::new(store, init, "sort.factorial.cls", d_h, factorial(k), true),
            },
            Proxy::Videosort => Head::Videosort {
                slots: store.add("sort.videosort.slots", init.normal("sort.videosort.slots", &[k, d_h]), false),
                norm: Norm::new(store, "sort.videosort.norm", d_h),
                cls: Linear::new(store, init, "sort.videosort.cls", d_h, num_slices, true),
            },
            Proxy::None => Head::None,
        };
        Ok(SortFormer {
            k,
            num_slices,
            proxy,
            heads,
            trunk,
            head,
        })
    }

    /// Gathers per-sample sequences from `sources` and runs the trunk.
    /// `seqs[b]` lists `(source, row)` pairs. Returns outputs and the first
    /// row of each sequence.
    pub fn trunk<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, sources: &[Var], seqs: &[Vec<(usize, usize)>]) -> Result<(Var, Vec<usize>)> {
        let mut offsets = Vec::with_capacity(sources.len());
        let mut total = 0;
        for &s in sources {
            offsets.push(total);
            total += tape.value(s).rows();
        }
        let cat = if sources.len() == 1 { sources[0] } else { tape.concat_rows(sources)? };
        let mut idx = Vec::new();
        let mut starts = Vec::with_capacity(seqs.len());
        for seq in seqs {
            starts.push(idx.len());
            idx.extend(seq.iter().map(|&(src, row)| offsets[src] + row));
        }
        let x = tape.select_rows(cat, &idx)?;
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let layout = AttnLayout::packed(self.heads, &lens);
        Ok((run_stack(&self.trunk, tape, p, x, &layout)?, starts))
    }

    fn check_inputs<T: Scalar>(&self, tape: &Tape<T>, t: Var, v: &VideoRows<'_>) -> Result<()> {
        if tape.value(t).rows() != v.batch() * self.k || v.lens.len() != v.batch() {
            return Err(Error::dim("sort head", tape.shape(t), &[v.batch() * self.k]));
        }
        Ok(())
    }

    /// `[t_1..t_K, v_0..v_N]` for each sample; transcripts are source 0,
    /// video tokens source 1.
    fn transcript_video_seqs(&self, v: &VideoRows<'_>, extra: bool) -> Vec<Vec<(usize, usize)>> {
        (0..v.batch())
            .map(|b| {
                let mut s = Vec::with_capacity(self.k + v.lens[b] + 1);
                if extra {
                    s.push((2, 0));
                }
                s.extend((0..self.k).map(|i| (0, b * self.k + i)));
                s.extend((0..v.lens[b]).map(|j| (1, v.starts[b] + j)));
                s
            })
            .collect()
    }

    fn transcript_outputs<T: Scalar>(&self, tape: &mut Tape<T>, out: Var, starts: &[usize], skip: usize) -> Result<Var> {
        let rows: Vec<usize> = starts.iter().flat_map(|&s| (0..self.k).map(move |i| s + skip + i)).collect();
        tape.select_rows(out, &rows)
    }

    /// K-way logits `[B·K × K]`: row `b·K + i` scores slot `i` of sample `b`
    /// against every true position. No slot embedding is added, so permuting
    /// the transcripts permutes the rows.
    pub fn sort_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, t: Var, v: &VideoRows<'_>) -> Result<Var> {
        let Head::Kway { norm, cls } = &self.head else {
            return Err(Error::Config(format!("sort_forward needs the kway head, have {}", self.proxy)));
        };
        self.check_inputs(tape, t, v)?;
        let seqs = self.transcript_video_seqs(v, false);
        let (out, starts) = self.trunk(tape, p, &[t, v.tokens], &seqs)?;
        let z = self.transcript_outputs(tape, out, &starts, 0)?;
        let z = norm.forward(tape, p, z)?;
        cls.forward(tape, p, z)
    }

    /// Pair logits `[B·K(K−1)/2 × 2]` over [`slot_pairs`]; column 1 scores
    /// "slot i precedes slot j", column 0 the reverse.
    pub fn pair_sort_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, t: Var, v: &VideoRows<'_>) -> Result<Var> {
        let Head::Pair { norm, first, second } = &self.head else {
            return Err(Error::Config(format!("pair_sort_forward needs the pair head, have {}", self.proxy)));
        };
        self.check_inputs(tape, t, v)?;
        let seqs = self.transcript_video_seqs(v, false);
        let (out, starts) = self.trunk(tape, p, &[t, v.tokens], &seqs)?;
        let z = self.transcript_outputs(tape, out, &starts, 0)?;
        let z = norm.forward(tape, p, z)?;
        let a = first.forward(tape, p, z)?;
        let c = second.forward(tape, p, z)?;
        let s = tape.concat_rows(&[a, c])?;
        let n = v.batch() * self.k;
        let pairs = slot_pairs(self.k);
        let mut lhs = Vec::with_capacity(v.batch() * pairs.len() * 2);
        let mut rhs = Vec::with_capacity(lhs.capacity());
        for b in 0..v.batch() {
            for &(i, j) in &pairs {
                let (i, j) = (b * self.k + i, b * self.k + j);
                // g(x, y) = first(x) + second(y); logits = [g(z_j, z_i), g(z_i, z_j)]
                lhs.extend([j, i]);
                rhs.extend([n + i, n + j]);
            }
        }
        let shape = [v.batch() * pairs.len(), 2];
        let l = tape.gather(s, lhs, &shape)?;
        let r = tape.gather(s, rhs, &shape)?;
        tape.add(l, r)
    }

    /// Permutation logits `[B × K!]` read from an extra ordering token.
    pub fn factorial_sort_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, t: Var, v: &VideoRows<'_>) -> Result<Var> {
        let Head::Factorial { token, norm, cls } = &self.head else {
            return Err(Error::Config(format!(
                "factorial_sort_forward needs the factorial head, have {}",
                self.proxy
            )));
        };
        self.check_inputs(tape, t, v)?;
        let seqs = self.transcript_video_seqs(v, true);
        let (out, starts) = self.trunk(tape, p, &[t, v.tokens, p.var(*token)], &seqs)?;
        let z = tape.select_rows(out, &starts)?;
        let z = norm.forward(tape, p, z)?;
        cls.forward(tape, p, z)
    }

    /// Slice logits `[B·S × S]` for clips whose temporal slices were
    /// shuffled. `t` holds transcripts in true order and receives learned
    /// slot embeddings; `slice_lens[b][s]` counts the tokens of shuffled
    /// slot `s`, which follow CLS contiguously.
    pub fn video_sort_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        t: Var,
        v: &VideoRows<'_>,
        slice_lens: &[Vec<usize>],
    ) -> Result<Var> {
        let Head::Videosort { slots, norm, cls } = &self.head else {
            return Err(Error::Config(format!(
                "video_sort_forward needs the videosort head, have {}",
                self.proxy
            )));
        };
        self.check_inputs(tape, t, v)?;
        let tiled: Vec<usize> = (0..v.batch()).flat_map(|_| 0..self.k).collect();
        let slot_emb = tape.select_rows(p.var(*slots), &tiled)?;
        let t = tape.add(t, slot_emb)?;
        let seqs = self.transcript_video_seqs(v, false);
        let (out, starts) = self.trunk(tape, p, &[t, v.tokens], &seqs)?;
        let mut segments = Vec::with_capacity(v.batch() * self.num_slices);
        for (b, lens) in slice_lens.iter().enumerate() {
            if lens.len() != self.num_slices || lens.iter().sum::<usize>() + 1 != v.lens[b] {
                return Err(Error::Contract(format!("slice lengths {lens:?} do not cover clip {b}")));
            }
            let mut row = starts[b] + self.k + 1;
            for &n in lens {
                segments.push((row, n));
                row += n;
            }
        }
        let pooled = tape.segment_mean(out, &segments)?;
        let z = norm.forward(tape, p, pooled)?;
        cls.forward(tape, p, z)
    }
}

/// Row-wise argmax, first maximum wins.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax equals the target.
pub fn row_accuracy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> f64 {
    let hits = argmax_rows(logits).iter().zip(targets).filter(|(a, b)| a == b).count();
    hits as f64 / targets.len().max(1) as f64
}
