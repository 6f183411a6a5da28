//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! The learnability criteria train eleven desk-scale models, so a full run
//! takes tens of minutes on one core.

mod common;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use tvts::corpus::{generate, GenConfig};
use tvts::evalkit::{
    linear_probe, median_rank, text_to_video_retrieval, zero_shot_video_retrieval, Benchmark, EmbeddingIndex,
    ProbeConfig, TextQuery,
};
use tvts::objectives::{info_nce, sort_loss};
use tvts::params::{Init, ParamStore};
use tvts::rng::derived_rng;
use tvts::sortformer::{Proxy, SortFormer, VideoRows};
use tvts::trainer::{
    decode_checkpoint, encode_checkpoint, evaluate_sort, grad_check_config, grad_check_suite, pretrain,
    run_to_end, split_corpus, Checkpoint, TrainConfig, Trainer, TvtsModel,
};
use tvts::{Tape, Tensor};

/// Pre-training steps for every learnability run.
const STEPS: u64 = 1500;
const SEEDS: [u64; 3] = [0, 1, 2];
const SORT_ROUNDS: usize = 2;
const SORT_EVAL_SEED: u64 = 99;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_perm(k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..k).collect();
    p.shuffle(rng);
    p
}

fn unit(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("v{i:04}")).collect()
}

fn loss_value(logits: &[Vec<f64>], order: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::from_rows(logits).unwrap());
    let loss = sort_loss(&mut tape, l, &[order.to_vec()]).unwrap();
    tape.value(loss).item()
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let report = grad_check_suite(10, None).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let worst = report.results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    check(
        report.passed() && secs < 120.0,
        format!(
            "{} graphs, worst rel err {worst:.2e}, failures {:?}, {secs:.0}s",
            report.results.len(),
            report.failures()
        ),
    )
}

fn windows() -> Outcome {
    let (checked, bad) = common::window_violations(1000, &mut derived_rng(2024, &[]));
    check(bad.is_empty(), format!("{checked} windows, {} violations {:?}", bad.len(), bad.first()))
}

fn closed_forms() -> Outcome {
    let mut worst_uniform: f64 = 0.0;
    for k in 2..=6 {
        let order = random_perm(k, &mut derived_rng(k as u64, &[]));
        worst_uniform = worst_uniform.max((loss_value(&vec![vec![0.3; k]; k], &order) - (k as f64).ln()).abs());
    }
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap());
    let single = info_nce(&mut tape, q, q, 0.05).map_err(|e| e.to_string())?;
    let single = tape.value(single).item().abs();
    let eye = tape.constant(Tensor::identity(2));
    let pair = info_nce(&mut tape, eye, eye, 1.0).map_err(|e| e.to_string())?;
    let pair = (tape.value(pair).item() - (1.0 + (-1.0f64).exp()).ln()).abs();
    check(
        worst_uniform <= 1e-9 && single <= 1e-12 && pair <= 1e-6,
        format!("uniform {worst_uniform:.1e}, B=1 {single:.1e}, B=2 {pair:.1e}"),
    )
}

fn equivariance() -> Outcome {
    const D: usize = 8;
    let mut worst_rows: f64 = 0.0;
    let mut worst_labels: f64 = 0.0;
    for trial in 0..100u64 {
        let mut rng = derived_rng(trial, &[4]);
        let k = rng.gen_range(2..7);
        let mut store = ParamStore::<f64>::new();
        let sf = SortFormer::new(&mut store, &Init::new(trial), D, 2, k, 4, Proxy::Kway).map_err(|e| e.to_string())?;
        let rows = |n: usize, rng: &mut tvts::rng::Rng| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..D).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        let t = rows(k, &mut rng);
        let n = rng.gen_range(1..8);
        let v = rows(n, &mut rng);
        let pi = random_perm(k, &mut rng);
        let logits = |t: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let tv = tape.constant(Tensor::from_rows(t).unwrap());
            let vv = tape.constant(Tensor::from_rows(&v).unwrap());
            let out = sf
                .sort_forward(&mut tape, &p, tv, &VideoRows { tokens: vv, starts: &[0], lens: &[n] })
                .unwrap();
            tape.value(out).clone()
        };
        let base = logits(&t);
        let permuted: Vec<Vec<f64>> = pi.iter().map(|&i| t[i].clone()).collect();
        let out = logits(&permuted);
        for (row, &src) in pi.iter().enumerate() {
            for j in 0..k {
                worst_rows = worst_rows.max((out.at(row, j) - base.at(src, j)).abs());
            }
        }

        let scores: Vec<Vec<f64>> = (0..k).map(|r| base.row(r).to_vec()).collect();
        let order = random_perm(k, &mut rng);
        let moved: Vec<Vec<f64>> = pi.iter().map(|&p| scores[p].clone()).collect();
        let labels: Vec<usize> = pi.iter().map(|&p| order[p]).collect();
        let a = loss_value(&scores, &order);
        worst_labels = worst_labels.max((a - loss_value(&moved, &labels)).abs() / a.abs().max(1.0));
    }
    // Attention sums keys in a different order after permutation, so the
    // agreement is to rounding rather than bitwise.
    check(
        worst_rows <= 1e-12 && worst_labels <= 1e-12,
        format!("100 triples, row deviation {worst_rows:.1e}, label identity {worst_labels:.1e}"),
    )
}

fn retrieval() -> Outcome {
    let mut problems = Vec::new();
    for trial in 0..50u64 {
        let mut rng = derived_rng(trial, &[9]);
        let n = rng.gen_range(6..60);
        let d = 8;
        let labels: Vec<usize> = (0..n).map(|i| i % rng.gen_range(2..6)).collect();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| unit(d, &mut rng)).collect();
        let index = EmbeddingIndex::new(ids(n), labels.clone(), rows.clone()).unwrap();
        let zs = zero_shot_video_retrieval(&index).unwrap();
        let texts: Vec<TextQuery> =
            ids(n).into_iter().map(|video_id| TextQuery { video_id, embedding: unit(d, &mut rng) }).collect();
        let tv = text_to_video_retrieval(&index, &texts).unwrap();
        for r in [&zs, &tv] {
            if !(r.r1 <= r.r5 && r.r5 <= r.r10 && r.r10 <= 1.0) {
                problems.push(format!("recall not monotone in trial {trial}"));
            }
        }

        // An orthogonal map keeps every cosine, hence every ranking.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for u in &basis {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let turn = |x: &[f64]| -> Vec<f64> { basis.iter().map(|b| b.iter().zip(x).map(|(a, c)| a * c).sum()).collect() };
        let turned: Vec<Vec<f64>> = rows.iter().map(|r| turn(r)).collect();
        let rotated = EmbeddingIndex::new(ids(n), labels, turned.clone()).unwrap();
        if (0..n).any(|q| index.rank(&rows[q], Some(q)) != rotated.rank(&turned[q], Some(q))) {
            problems.push(format!("rotation changed a ranking in trial {trial}"));
        }

        let ranks: Vec<usize> = (0..rng.gen_range(1..40)).map(|_| rng.gen_range(1..500)).collect();
        let m = median_rank(&ranks).unwrap();
        let below = ranks.iter().filter(|&&r| r as f64 <= m).count();
        let above = ranks.iter().filter(|&&r| r as f64 >= m).count();
        if 2 * below < ranks.len() || 2 * above < ranks.len() {
            problems.push(format!("median {m} does not split {ranks:?}"));
        }
    }

    let (n, classes) = (100, 10);
    let (mut r1, mut medr) = (0.0, 0.0);
    for seed in 0..20u64 {
        let mut rng = derived_rng(seed, &[10]);
        let labels = (0..n).map(|i| i % classes).collect();
        let index = EmbeddingIndex::new(ids(n), labels, (0..n).map(|_| unit(16, &mut rng)).collect()).unwrap();
        r1 += zero_shot_video_retrieval(&index).unwrap().r1 / 20.0;
        let texts: Vec<TextQuery> =
            ids(n).into_iter().map(|video_id| TextQuery { video_id, embedding: unit(16, &mut rng) }).collect();
        medr += text_to_video_retrieval(&index, &texts).unwrap().medr / 20.0;
    }
    let chance = (n / classes - 1) as f64 / (n - 1) as f64;
    if (r1 - chance).abs() > 0.03 {
        problems.push(format!("zero-shot R@1 {r1:.3} vs chance {chance:.3}"));
    }
    if (medr - n as f64 / 2.0).abs() > n as f64 / 10.0 {
        problems.push(format!("text MedR {medr:.1} vs chance {}", n / 2));
    }
    check(
        problems.is_empty(),
        format!("50 random indices, chance R@1 {r1:.3}, chance MedR {medr:.1} {problems:?}"),
    )
}

fn determinism() -> Outcome {
    let mut cfg = grad_check_config(Proxy::Kway, 0);
    cfg.gen.count = 12;
    cfg.dtype = "f32".into();
    cfg.steps = 6;
    let corpus = generate(&cfg.gen, cfg.data_seed).map_err(|e| e.to_string())?;
    let run = || pretrain::<f32>(&cfg, &corpus, None, |_| {}).unwrap();
    let straight = run();
    let again = run();

    let bytes = encode_checkpoint(&straight.checkpoint);
    let back: Checkpoint<f32> = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
    let round_trip = back == straight.checkpoint && encode_checkpoint(&back) == bytes;

    let mut first = Trainer::<f32>::new(&TrainConfig { steps: 3, ..cfg.clone() }, &corpus).unwrap();
    run_to_end(&mut first, &corpus, None, |_| {}).unwrap();
    let mut ckpt: Checkpoint<f32> = decode_checkpoint(&encode_checkpoint(&first.checkpoint())).unwrap();
    ckpt.config.steps = 6;
    let mut resumed = Trainer::<f32>::from_checkpoint(&ckpt, &corpus).unwrap();
    let tail = run_to_end(&mut resumed, &corpus, None, |_| {}).unwrap();
    let lines = |m: &[tvts::trainer::MetricsRecord]| m.iter().map(|r| r.deterministic_line()).collect::<Vec<_>>();
    let resume = resumed.model.store == straight.checkpoint.params
        && resumed.opt == straight.checkpoint.opt
        && lines(&straight.metrics[3..]) == lines(&tail);
    let logs = lines(&straight.metrics) == lines(&again.metrics);
    check(
        round_trip && resume && logs,
        format!("round trip {round_trip}, resume {resume}, identical logs {logs}"),
    )
}

/// Learnability runs shared by the training criteria.
struct Runs {
    bench: Benchmark,
    kway_sort: Vec<f64>,
    zero_sort: f64,
    probes: Vec<(&'static str, Vec<f64>)>,
}

impl Runs {
    fn probe(&self, name: &str) -> &[f64] {
        &self.probes.iter().find(|(n, _)| *n == name).expect("probed").1
    }

    fn mean(&self, name: &str) -> f64 {
        let p = self.probe(name);
        p.iter().sum::<f64>() / p.len() as f64
    }
}

fn base_config() -> TrainConfig {
    TrainConfig { steps: STEPS, ..TrainConfig::default() }
}

fn train(cfg: &TrainConfig) -> TvtsModel<f32> {
    let t0 = Instant::now();
    let corpus = generate(&cfg.gen, cfg.data_seed).unwrap();
    let out = pretrain::<f32>(cfg, &corpus, None, |_| {}).unwrap();
    let last = out.metrics.last().map(|m| m.l_total).unwrap_or(f64::NAN);
    println!(
        "  trained {} seed {}{} in {:.0}s, final loss {last:.3}",
        cfg.proxy,
        cfg.seed,
        if cfg.zero_frames { " on zero frames" } else { "" },
        t0.elapsed().as_secs_f64()
    );
    TvtsModel::from_checkpoint(&out.checkpoint).unwrap()
}

fn held_out_sort(model: &TvtsModel<f32>, cfg: &TrainConfig) -> f64 {
    let corpus = generate(&cfg.gen, cfg.data_seed).unwrap();
    let (_, held) = split_corpus(&corpus, cfg);
    evaluate_sort(model, &corpus, &held, cfg, SORT_ROUNDS, SORT_EVAL_SEED).unwrap()
}

fn learnability_runs() -> Runs {
    let base = base_config();
    let bench = Benchmark::generate(&GenConfig { count: 500, ..base.gen.clone() }, 1234, 5).unwrap();
    let probe_cfg = ProbeConfig::default();
    let probe = |m: &TvtsModel<f32>| linear_probe(m, &bench, base.k, base.l, &probe_cfg).unwrap().test_accuracy;

    let mut kway_sort = Vec::new();
    let mut probes: Vec<(&'static str, Vec<f64>)> = Vec::new();
    for (name, proxy) in [("kway", Proxy::Kway), ("none", Proxy::None), ("videosort", Proxy::Videosort)] {
        let mut accs = Vec::new();
        for seed in SEEDS {
            let cfg = TrainConfig { proxy, seed, ..base.clone() };
            let model = train(&cfg);
            if proxy == Proxy::Kway {
                kway_sort.push(held_out_sort(&model, &cfg));
            }
            accs.push(probe(&model));
        }
        probes.push((name, accs));
    }
    let random = SEEDS
        .iter()
        .map(|&seed| probe(&TvtsModel::new(&base.encoder, base.k, Proxy::Kway, seed).unwrap()))
        .collect();
    probes.push(("random-init", random));

    let zero = TrainConfig { zero_frames: true, ..base.clone() };
    let zero_sort = held_out_sort(&train(&zero), &zero);
    Runs { bench, kway_sort, zero_sort, probes }
}

fn learnability(runs: &Runs) -> Outcome {
    let acc = runs.kway_sort[0];
    check(
        acc >= 0.90,
        format!("held-out sort {acc:.3} after {STEPS} steps (seeds {:?}: {:.3?})", SEEDS, runs.kway_sort),
    )
}

fn video_necessity(runs: &Runs) -> Outcome {
    check(runs.zero_sort <= 0.40, format!("zero-frame held-out sort {:.3}", runs.zero_sort))
}

fn ablation(runs: &Runs) -> Outcome {
    let [kway, none, random, video] = ["kway", "none", "random-init", "videosort"].map(|n| runs.mean(n));
    let per_seed: Vec<String> = runs.probes.iter().map(|(n, p)| format!("{n} {p:.3?}")).collect();
    check(
        kway - none >= 0.05 && none - random >= 0.05 && video < kway,
        format!(
            "means kway {kway:.3} none {none:.3} random {random:.3} videosort {video:.3} on {} classes; {}",
            runs.bench.classes(),
            per_seed.join(", ")
        ),
    )
}

fn transfer(runs: &Runs) -> Outcome {
    let [kway, random] = ["kway", "random-init"].map(|n| runs.mean(n));
    check(
        kway - random >= 0.25,
        format!("kway probe {kway:.3} vs random-init {random:.3}, gap {:.3}", kway - random),
    )
}

fn main() {
    let t0 = Instant::now();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {tag} {name}: {detail} [{:.0}s]", t0.elapsed().as_secs_f64());
    };

    report(1, "gradient check", gradients());
    report(2, "window exactness", windows());
    report(3, "closed-form losses", closed_forms());
    report(4, "equivariance", equivariance());
    report(9, "retrieval metrics", retrieval());
    report(10, "determinism and persistence", determinism());
    let runs = learnability_runs();
    report(5, "sort learnability", learnability(&runs));
    report(6, "video necessity", video_necessity(&runs));
    report(7, "ablation ordering", ablation(&runs));
    report(8, "probe transfer", transfer(&runs));

    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
