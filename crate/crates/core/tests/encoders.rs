use proptest::prelude::*;
use rand::Rng;

use tvts::corpus::{build_mask, ClipFrames, MaskPattern, CLS, PAD};
use tvts::encoders::{cubify, visible_cubes, EncoderConfig, Projection, TextEncoder, VideoEncoder};
use tvts::params::{Init, ParamStore};
use tvts::rng::derived_rng;
use tvts::{Tape, Tensor};

fn tiny() -> EncoderConfig {
    EncoderConfig {
        d_h: 8,
        depth: 2,
        text_depth: 1,
        heads: 2,
        patch: 8,
        tubelet: 2,
        frames: 4,
        height: 16,
        width: 16,
        max_text_len: 8,
        d_common: 4,
        ..EncoderConfig::default()
    }
}

fn random_clip(cfg: &EncoderConfig, seed: u64) -> ClipFrames {
    let mut rng = derived_rng(seed, &[1]);
    let n = cfg.frames * cfg.height * cfg.width * 3;
    ClipFrames {
        height: cfg.height,
        width: cfg.width,
        pixels: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        times: (0..cfg.frames).map(|i| i as f64).collect(),
    }
}

fn video(cfg: &EncoderConfig, seed: u64) -> (ParamStore<f64>, VideoEncoder) {
    let mut store = ParamStore::new();
    let enc = VideoEncoder::new(&mut store, &Init::new(seed), cfg).unwrap();
    (store, enc)
}

#[test]
fn token_count_algebra() {
    let cfg = EncoderConfig {
        frames: 16,
        height: 224,
        width: 224,
        patch: 16,
        ..EncoderConfig::default()
    };
    assert_eq!(cfg.num_tokens(), 1568);
    let cfg = EncoderConfig {
        frames: 2,
        height: 16,
        width: 16,
        patch: 16,
        ..EncoderConfig::default()
    };
    assert_eq!(cfg.num_tokens(), 1);
    let mask = build_mask(196, 8, 0.75, &mut derived_rng(0, &[])).unwrap();
    assert_eq!(mask.visible_count(), 392);
}

#[test]
fn config_rejects_bad_grids() {
    for cfg in [
        EncoderConfig { height: 33, ..tiny() },
        EncoderConfig { frames: 3, ..tiny() },
        EncoderConfig { heads: 3, ..tiny() },
    ] {
        assert!(matches!(cfg.validate(), Err(tvts::Error::Config(_))));
    }
}

#[test]
fn zero_frames_give_zero_tokens_and_keep_cls() {
    let cfg = tiny();
    let (store, enc) = video(&cfg, 0);
    let clip = ClipFrames {
        pixels: vec![0.0; cfg.frames * cfg.height * cfg.width * 3],
        ..random_clip(&cfg, 0)
    };
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let cubes = tape.constant(cubify::<f64>(&clip, &cfg).unwrap());
    let toks = enc.cube_embed(&mut tape, &p, cubes).unwrap();
    let out = tape.value(toks.tokens);
    assert_eq!(out.rows(), cfg.num_tokens() + 1);
    assert_eq!(out.row(0), store.by_name("video.cls").unwrap().data());
    assert!((1..out.rows()).all(|r| out.row(r).iter().all(|&x| x == 0.0)));
}

#[test]
fn divided_position_sharing() {
    let cfg = tiny();
    let (store, enc) = video(&cfg, 1);
    let clip = ClipFrames {
        pixels: vec![0.0; cfg.frames * cfg.height * cfg.width * 3],
        ..random_clip(&cfg, 0)
    };
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let cubes = tape.constant(cubify::<f64>(&clip, &cfg).unwrap());
    let toks = enc.cube_embed(&mut tape, &p, cubes).unwrap();
    let with = enc.add_spacetime_pos(&mut tape, &p, &toks).unwrap();
    let out = tape.value(with.tokens);
    let time = store.by_name("video.pos.time").unwrap();
    let space = store.by_name("video.pos.space").unwrap();
    let tps = cfg.tokens_per_slice();
    for i in 0..cfg.num_tokens() {
        let (s, pos) = (i / tps, i % tps);
        for c in 0..cfg.d_h {
            let expect = time.at(s, c) + space.at(pos, c);
            assert!((out.at(i + 1, c) - expect).abs() < 1e-15);
        }
    }
    // Same slice: the temporal addend is shared; same position: spatial.
    let a = |i: usize, c: usize| out.at(i + 1, c) - space.at(i % tps, c);
    let b = |i: usize, c: usize| out.at(i + 1, c) - time.at(i / tps, c);
    for c in 0..cfg.d_h {
        assert!((a(0, c) - a(1, c)).abs() < 1e-15);
        assert!((b(0, c) - b(tps, c)).abs() < 1e-15);
    }
}

#[test]
fn zero_position_tables_are_identity() {
    let cfg = tiny();
    let (mut store, enc) = video(&cfg, 2);
    for name in ["video.pos.time", "video.pos.space", "video.pos.cls"] {
        store.by_name_mut(name).unwrap().data_mut().fill(0.0);
    }
    let clip = random_clip(&cfg, 3);
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let cubes = tape.constant(cubify::<f64>(&clip, &cfg).unwrap());
    let toks = enc.cube_embed(&mut tape, &p, cubes).unwrap();
    let with = enc.add_spacetime_pos(&mut tape, &p, &toks).unwrap();
    assert_eq!(tape.value(with.tokens), tape.value(toks.tokens));
}

#[test]
fn masking_removes_tokens_and_preserves_kept_vectors() {
    let cfg = tiny();
    let (store, enc) = video(&cfg, 4);
    let clip = random_clip(&cfg, 5);
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let cubes = tape.constant(cubify::<f64>(&clip, &cfg).unwrap());
    let toks = enc.cube_embed(&mut tape, &p, cubes).unwrap();
    let toks = enc.add_spacetime_pos(&mut tape, &p, &toks).unwrap();

    let full = MaskPattern::full(cfg.tokens_per_slice(), cfg.num_slices());
    let same = enc.apply_mask(&mut tape, &toks, &full).unwrap();
    assert_eq!(tape.value(same.tokens), tape.value(toks.tokens));

    let mask = build_mask(cfg.tokens_per_slice(), cfg.num_slices(), 0.5, &mut derived_rng(9, &[])).unwrap();
    let kept = enc.apply_mask(&mut tape, &toks, &mask).unwrap();
    assert_eq!(kept.len(), mask.visible_count() + 1);
    let all = tape.value(toks.tokens).clone();
    let got = tape.value(kept.tokens);
    assert_eq!(got.row(0), all.row(0));
    for (j, (&s, &pos)) in kept.slices.iter().zip(&kept.positions).enumerate() {
        let flat = s * cfg.tokens_per_slice() + pos;
        assert_eq!(got.row(j + 1), all.row(flat + 1));
    }

    let wrong = MaskPattern::full(cfg.tokens_per_slice() + 1, cfg.num_slices());
    assert!(matches!(enc.apply_mask(&mut tape, &toks, &wrong), Err(tvts::Error::Contract(_))));
}

#[test]
fn batched_visible_path_matches_step_by_step_path() {
    let cfg = tiny();
    let (store, enc) = video(&cfg, 6);
    let clip = random_clip(&cfg, 7);
    let mask = build_mask(cfg.tokens_per_slice(), cfg.num_slices(), 0.5, &mut derived_rng(3, &[])).unwrap();
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let cubes = tape.constant(cubify::<f64>(&clip, &cfg).unwrap());
    let toks = enc.cube_embed(&mut tape, &p, cubes).unwrap();
    let toks = enc.add_spacetime_pos(&mut tape, &p, &toks).unwrap();
    let toks = enc.apply_mask(&mut tape, &toks, &mask).unwrap();
    let slow = enc.encode_video(&mut tape, &p, &toks).unwrap();

    let vis = visible_cubes::<f64>(&clip, &mask, &cfg).unwrap();
    let vc = tape.constant(vis.tensor(cfg.cube_dim()).unwrap());
    let (fast, starts) = enc.encode_visible(&mut tape, &p, vc, &vis).unwrap();
    assert_eq!(starts, vec![0]);
    assert!(tape.value(slow).max_abs_diff(tape.value(fast)) < 1e-12);
}

#[test]
fn depth_zero_is_identity() {
    let cfg = EncoderConfig { depth: 0, ..tiny() };
    let (store, enc) = video(&cfg, 8);
    let clip = random_clip(&cfg, 9);
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let cubes = tape.constant(cubify::<f64>(&clip, &cfg).unwrap());
    let toks = enc.cube_embed(&mut tape, &p, cubes).unwrap();
    let out = enc.encode_video(&mut tape, &p, &toks).unwrap();
    assert_eq!(tape.value(out), tape.value(toks.tokens));
}

#[test]
fn encoding_is_deterministic() {
    let cfg = tiny();
    let run = || {
        let (store, enc) = video(&cfg, 10);
        let clip = random_clip(&cfg, 11);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let cubes = tape.constant(cubify::<f64>(&clip, &cfg).unwrap());
        let toks = enc.cube_embed(&mut tape, &p, cubes).unwrap();
        let toks = enc.add_spacetime_pos(&mut tape, &p, &toks).unwrap();
        let out = enc.encode_video(&mut tape, &p, &toks).unwrap();
        tape.value(out).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn masked_cubes_get_zero_gradient() {
    let cfg = tiny();
    let (store, enc) = video(&cfg, 12);
    let clip = random_clip(&cfg, 13);
    let mask = build_mask(cfg.tokens_per_slice(), cfg.num_slices(), 0.5, &mut derived_rng(5, &[])).unwrap();
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let cubes = tape.param(cubify::<f64>(&clip, &cfg).unwrap());
    let toks = enc.cube_embed(&mut tape, &p, cubes).unwrap();
    let toks = enc.add_spacetime_pos(&mut tape, &p, &toks).unwrap();
    let toks = enc.apply_mask(&mut tape, &toks, &mask).unwrap();
    let out = enc.encode_video(&mut tape, &p, &toks).unwrap();
    let loss = tape.sum(out);
    let g = tape.backward(loss).unwrap();
    let g = g.get(cubes).unwrap();
    let visible: Vec<usize> = mask.flat_indices();
    for r in 0..cfg.num_tokens() {
        let nz = g.row(r).iter().any(|&x| x != 0.0);
        assert_eq!(nz, visible.contains(&r), "cube {r}");
    }
}

fn text(cfg: &EncoderConfig, seed: u64) -> (ParamStore<f64>, TextEncoder) {
    let mut store = ParamStore::new();
    let enc = TextEncoder::new(&mut store, &Init::new(seed), cfg).unwrap();
    (store, enc)
}

#[test]
fn text_identical_ids_identical_vectors_and_pad_invariance() {
    let cfg = tiny();
    let (store, enc) = text(&cfg, 14);
    let a = vec![1, 5, 6, 7];
    let mut padded = a.clone();
    padded.extend([PAD; 3]);
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let t = enc.encode_text(&mut tape, &p, &[a.clone(), a.clone(), padded.clone()]).unwrap();
    let t = tape.value(t).clone();
    assert_eq!(t.row(0), t.row(1));
    assert!(t.row(0).iter().zip(t.row(2)).all(|(x, y)| (x - y).abs() < 1e-12));
    let tp = enc.encode_text_padded(&mut tape, &p, &[a, padded]).unwrap();
    let tp = tape.value(tp);
    assert!(tp.row(0).iter().zip(tp.row(1)).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn text_depth_zero_zero_positions_is_cls_embedding() {
    let cfg = EncoderConfig { text_depth: 0, ..tiny() };
    let (mut store, enc) = text(&cfg, 15);
    store.by_name_mut("text.pos").unwrap().data_mut().fill(0.0);
    let cls = CLS;
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let t = enc.encode_text(&mut tape, &p, &[vec![cls, 8, 9]]).unwrap();
    assert_eq!(tape.value(t).row(0), store.by_name("text.embed").unwrap().row(cls));
}

#[test]
fn text_rejects_out_of_range_ids() {
    let cfg = tiny();
    let (store, enc) = text(&cfg, 16);
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let err = enc.encode_text(&mut tape, &p, &[vec![1, cfg.vocab_size]]).unwrap_err();
    assert!(matches!(err, tvts::Error::Vocab { .. }));
}

#[test]
fn projection_closed_form_and_scale_invariance() {
    let mut store = ParamStore::<f64>::new();
    let proj = Projection::new(&mut store, &Init::new(0), "p", 2, 2);
    *store.by_name_mut("p.w").unwrap() = Tensor::identity(2);
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![6.0, 8.0], vec![0.0, 0.0]]).unwrap());
    let y = proj.forward(&mut tape, &p, x).unwrap();
    let y = tape.value(y);
    assert!((y.at(0, 0) - 0.6).abs() < 1e-9 && (y.at(0, 1) - 0.8).abs() < 1e-9);
    assert!((y.at(0, 0) - y.at(1, 0)).abs() < 1e-9 && (y.at(0, 1) - y.at(1, 1)).abs() < 1e-9);
    assert!(y.row(2).iter().all(|v| v.is_finite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn projection_output_is_unit_norm(seed in 0u64..1000, scale in 1e-3f64..1e3) {
        let mut store = ParamStore::<f64>::new();
        let proj = Projection::new(&mut store, &Init::new(seed), "p", 8, 4);
        let mut rng = derived_rng(seed, &[2]);
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..8).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let y = proj.forward(&mut tape, &p, x).unwrap();
        for r in 0..5 {
            let n: f64 = tape.value(y).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cls_output_ignores_token_order(seed in 0u64..1000) {
        let cfg = tiny();
        let (store, enc) = video(&cfg, seed);
        let clip = random_clip(&cfg, seed + 1);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let cubes = tape.constant(cubify::<f64>(&clip, &cfg).unwrap());
        let toks = enc.cube_embed(&mut tape, &p, cubes).unwrap();
        let toks = enc.add_spacetime_pos(&mut tape, &p, &toks).unwrap();
        let out = enc.encode_video(&mut tape, &p, &toks).unwrap();

        let n = toks.len() - 1;
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut derived_rng(seed, &[3]));
        let mut rows = vec![0];
        rows.extend(perm.iter().map(|&i| i + 1));
        let shuffled = tape.select_rows(toks.tokens, &rows).unwrap();
        let shuffled = tvts::encoders::ClipTokens { tokens: shuffled, ..toks.clone() };
        let out2 = enc.encode_video(&mut tape, &p, &shuffled).unwrap();
        let (a, b) = (tape.value(out), tape.value(out2));
        prop_assert_eq!(a.row(0), b.row(0));
        for (j, &i) in perm.iter().enumerate() {
            for (x, y) in a.row(i + 1).iter().zip(b.row(j + 1)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
