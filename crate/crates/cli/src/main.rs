//! `tvts` command line: data generation, pre-training, evaluation,
//! gradient checking and metric plots.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tvts::corpus::{generate_corpus, load_corpus, manifest_digest, GenConfig};
use tvts::evalkit::{
    extract_embeddings, linear_probe, text_to_video_retrieval, zero_shot_video_retrieval, Benchmark, EmbeddingIndex,
    ProbeConfig, TextQuery,
};
use tvts::numerics::OpKind;
use tvts::sortformer::Proxy;
use tvts::trainer::{
    grad_check_suite, kv_text, load_checkpoint, open_corpus, read_header, run_to_end, save_checkpoint, TrainConfig,
    Trainer, TvtsModel,
};
use tvts::Scalar;

const CONFIG_ENV: &str = "TVTS_CONFIG";

/// Exit statuses shared by every subcommand.
mod exit {
    pub const FAILURE: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const NON_FINITE: u8 = 4;
    pub const CHECKPOINT: u8 = 5;
    pub const GRAD_CHECK: u8 = 6;
}

#[derive(Parser)]
#[command(name = "tvts", version, about = "Transcript-sorting video pre-training on synthetic narrated videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic narrated-video corpus to disk.
    GenData(GenDataArgs),
    /// Pre-train the encoders with the contrastive and sorting losses.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint on a held-out category benchmark.
    Eval(EvalArgs),
    /// Compare every gradient rule and the composed loss with finite differences.
    GradCheck(GradCheckArgs),
    /// Draw one SVG per metric from a metrics log.
    Plot(PlotArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, env = CONFIG_ENV, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set encoder.d_h=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    /// Defaults, then the file, then `--set` pairs.
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| tvts::Error::Io {
                path: path.clone(),
                source: e,
            })?;
            cfg = cfg.with_kv_text(&text)?;
        }
        let mut pairs = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| tvts::Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
            pairs.push((k.trim(), v.trim()));
        }
        Ok(cfg.with_overrides(pairs)?)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    count: Option<usize>,
    /// Generator seed; defaults to `data_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Frame resolution as `HxW`.
    #[arg(long, value_parser = parse_res)]
    res: Option<(usize, usize)>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    proxy: Option<Proxy>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus directory written by `gen-data`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Continue from a checkpoint; its config replaces the file and `--set`.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    /// Run directory for `metrics.jsonl` and checkpoints.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum Task {
    Zeroshot,
    Probe,
    T2v,
}

impl Task {
    fn name(self) -> &'static str {
        match self {
            Task::Zeroshot => "zeroshot",
            Task::Probe => "probe",
            Task::T2v => "t2v",
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    /// Evaluations to run. Repeatable.
    #[arg(long = "task", value_enum, required = true)]
    tasks: Vec<Task>,
    /// Benchmark corpus directory; generated when absent.
    #[arg(long)]
    bench: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    bench_count: usize,
    #[arg(long, default_value_t = 1234)]
    bench_seed: u64,
    /// Every n-th video of each category is a test item.
    #[arg(long, default_value_t = 5)]
    test_every: usize,
    #[arg(long, default_value_t = 100)]
    probe_epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    probe_lr: f64,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Corrupt the backward rule of one op (self-test of the checker).
    #[arg(long, value_name = "OP", value_parser = parse_op)]
    inject_fault: Option<OpKind>,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// `metrics.jsonl` written by `pretrain`.
    #[arg(long)]
    log: PathBuf,
    /// Output directory for the SVG files.
    #[arg(long)]
    out: PathBuf,
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

fn parse_op(s: &str) -> Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| {
        let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown op {s:?}; expected one of {}", names.join(", "))
    })
}

fn print_config(title: &str, text: &str) {
    println!("# resolved {title}");
    print!("{text}");
    println!("# end");
}

fn cmd_gen_data(a: &GenDataArgs) -> anyhow::Result<()> {
    let base = a.config.resolve()?;
    let mut gen = GenConfig { ..base.gen };
    if let Some(c) = a.count {
        gen.count = c;
    }
    if let Some((h, w)) = a.res {
        gen.height = h;
        gen.width = w;
    }
    let seed = a.seed.unwrap_or(base.data_seed);
    print_config("gen-data config", &kv_text(&json!({ "gen": gen, "seed": seed, "out": a.out })));
    let manifest = generate_corpus(&gen, seed, &a.out)?;
    println!("videos {}", manifest.videos.len());
    println!("manifest sha256 {}", manifest_digest(&a.out)?);
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs) -> anyhow::Result<()> {
    match &a.resume {
        Some(path) => {
            let header = read_header(path).map_err(checkpoint_failure)?;
            if header.dtype == "f64" {
                resume::<f64>(a, path)
            } else {
                resume::<f32>(a, path)
            }
        }
        None => {
            let mut cfg = a.config.resolve()?;
            if let Some(p) = a.proxy {
                cfg.proxy = p;
            }
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(c) = &a.corpus {
                cfg.corpus = Some(c.display().to_string());
            }
            cfg.validate()?;
            print_config("pretrain config", &cfg.to_kv_text());
            let corpus = open_corpus(&cfg)?;
            if cfg.dtype == "f64" {
                train(Trainer::<f64>::new(&cfg, &corpus)?, &corpus, &a.out)
            } else {
                train(Trainer::<f32>::new(&cfg, &corpus)?, &corpus, &a.out)
            }
        }
    }
}

fn resume<T: Scalar>(a: &PretrainArgs, path: &Path) -> anyhow::Result<()> {
    let mut ckpt = load_checkpoint::<T>(path).map_err(checkpoint_failure)?;
    if let Some(s) = a.steps {
        ckpt.config.steps = s;
    }
    print_config("pretrain config", &ckpt.config.to_kv_text());
    let corpus = open_corpus(&ckpt.config)?;
    let trainer = Trainer::from_checkpoint(&ckpt, &corpus).map_err(checkpoint_failure)?;
    println!("resuming at step {}", trainer.step);
    train(trainer, &corpus, &a.out)
}

fn train<T: Scalar>(mut trainer: Trainer<T>, corpus: &tvts::corpus::Corpus, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).map_err(|e| tvts::Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, trainer.cfg.to_kv_text()).map_err(|e| tvts::Error::Io { path: cfg_path, source: e })?;
    let total = trainer.cfg.steps;
    let records = run_to_end(&mut trainer, corpus, Some(out), |r| {
        if r.step % 100 == 0 || r.step == total {
            log::info!(
                "step {} L_total {:.4} L_align {:.4} L_sort {:.4} sort_acc {}",
                r.step,
                r.l_total,
                r.l_align,
                r.l_sort,
                r.sort_acc.map_or("-".into(), |a| format!("{a:.3}"))
            );
        }
    })?;
    if trainer.cfg.steps == 0 {
        save_checkpoint(&trainer.checkpoint(), &out.join("final.ckpt"))?;
    }
    println!("steps run {}", records.len());
    println!("checkpoint {}", out.join("final.ckpt").display());
    Ok(())
}

/// Marks any failure while reading a checkpoint for exit status 5.
#[derive(Debug)]
struct CheckpointFailure(tvts::Error);

impl std::fmt::Display for CheckpointFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "cannot load checkpoint: {}", self.0)
    }
}

impl std::error::Error for CheckpointFailure {}

fn checkpoint_failure(e: tvts::Error) -> anyhow::Error {
    anyhow::Error::new(CheckpointFailure(e))
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let header = read_header(&a.checkpoint).map_err(checkpoint_failure)?;
    if header.dtype == "f64" {
        eval::<f64>(a)
    } else {
        eval::<f32>(a)
    }
}

fn eval<T: Scalar>(a: &EvalArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint::<T>(&a.checkpoint).map_err(checkpoint_failure)?;
    let model = TvtsModel::from_checkpoint(&ckpt).map_err(checkpoint_failure)?;
    let cfg = &ckpt.config;
    let probe_cfg = ProbeConfig {
        lr: a.probe_lr,
        epochs: a.probe_epochs,
        ..ProbeConfig::default()
    };
    let mut tasks = a.tasks.clone();
    tasks.dedup();
    let settings = json!({
        "checkpoint": a.checkpoint,
        "step": ckpt.step,
        "dtype": T::DTYPE,
        "tasks": tasks.iter().map(|t| t.name()).collect::<Vec<_>>(),
        "bench": a.bench,
        "bench_count": a.bench_count,
        "bench_seed": a.bench_seed,
        "test_every": a.test_every,
        "k": cfg.k,
        "l": cfg.l,
        "probe": probe_cfg,
    });
    print_config("eval config", &kv_text(&settings));

    let bench = match &a.bench {
        Some(dir) => Benchmark::from_corpus(load_corpus(dir)?, a.test_every)?,
        None => {
            let gen = GenConfig {
                count: a.bench_count,
                ..cfg.gen.clone()
            };
            Benchmark::generate(&gen, a.bench_seed, a.test_every)?
        }
    };
    let before = model.video_digest();
    let mut report = serde_json::Map::new();
    report.insert("checkpoint".into(), json!(a.checkpoint));
    report.insert("step".into(), json!(ckpt.step));
    report.insert("proxy".into(), json!(cfg.proxy));
    report.insert("encoder_sha256".into(), json!(before));
    let needs_embeddings = tasks.iter().any(|t| *t != Task::Probe);
    let test = if needs_embeddings {
        Some(extract_embeddings(&model, &bench.corpus, &bench.test, cfg.k, cfg.l)?)
    } else {
        None
    };
    for task in &tasks {
        match task {
            Task::Probe => {
                let r = linear_probe(&model, &bench, cfg.k, cfg.l, &probe_cfg)?;
                println!("probe top-1 {:.4} (train {:.4}, {} classes)", r.test_accuracy, r.train_accuracy, r.classes);
                report.insert("probe".into(), serde_json::to_value(&r)?);
            }
            Task::Zeroshot => {
                let e = test.as_ref().expect("extracted");
                let index = EmbeddingIndex::new(e.ids.clone(), e.labels.clone(), e.video.clone())?;
                let r = zero_shot_video_retrieval(&index)?;
                println!("zeroshot R@1 {:.4} R@5 {:.4} R@10 {:.4} MedR {}", r.r1, r.r5, r.r10, r.medr);
                report.insert("zeroshot".into(), serde_json::to_value(&r)?);
            }
            Task::T2v => {
                let e = test.as_ref().expect("extracted");
                let index = EmbeddingIndex::new(e.ids.clone(), e.labels.clone(), e.video.clone())?;
                let queries: Vec<TextQuery> = e
                    .ids
                    .iter()
                    .zip(&e.text)
                    .map(|(id, t)| TextQuery {
                        video_id: id.clone(),
                        embedding: t.clone(),
                    })
                    .collect();
                let r = text_to_video_retrieval(&index, &queries)?;
                println!("t2v R@1 {:.4} R@5 {:.4} R@10 {:.4} MedR {}", r.r1, r.r5, r.r10, r.medr);
                report.insert("t2v".into(), serde_json::to_value(&r)?);
            }
        }
    }
    let after = model.video_digest();
    if before != after {
        return Err(anyhow!("video encoder changed during evaluation: {before} -> {after}"));
    }
    println!("encoder sha256 unchanged {after}");
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(report))? + "\n";
    match &a.out {
        Some(path) => fs::write(path, text).map_err(|e| tvts::Error::Io {
            path: path.clone(),
            source: e,
        })?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_grad_check(a: &GradCheckArgs) -> anyhow::Result<u8> {
    let settings = json!({
        "seeds": a.seeds,
        "inject_fault": a.inject_fault.map(|k| k.name()),
        "tolerance": tvts::trainer::GRAD_CHECK_TOLERANCE,
        "tiny": tvts::trainer::grad_check_config(Proxy::Kway, 0).encoder,
    });
    print_config("grad-check config", &kv_text(&settings));
    let report = grad_check_suite(a.seeds, a.inject_fault)?;
    for (name, err) in &report.results {
        let verdict = if *err < report.tolerance { "ok" } else { "FAIL" };
        println!("{name:<24} max_rel_error {err:.3e} {verdict}");
    }
    if let Some(path) = &a.out {
        let text = serde_json::to_string_pretty(&report)? + "\n";
        fs::write(path, text).map_err(|e| tvts::Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    let failures = report.failures();
    if failures.is_empty() {
        println!("grad-check passed");
        Ok(0)
    } else {
        eprintln!("grad-check failed for: {}", failures.join(", "));
        Ok(exit::GRAD_CHECK)
    }
}

fn cmd_plot(a: &PlotArgs) -> anyhow::Result<()> {
    print_config("plot config", &kv_text(&json!({ "log": a.log, "out": a.out })));
    let text = fs::read_to_string(&a.log).map_err(|e| tvts::Error::Io {
        path: a.log.clone(),
        source: e,
    })?;
    let records = plot::parse_log(&text).map_err(|m| tvts::Error::Parse {
        path: a.log.clone(),
        message: m,
    })?;
    let written = plot::write_plots(&records, &a.out).with_context(|| format!("writing plots to {}", a.out.display()))?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<CheckpointFailure>().is_some() {
        return exit::CHECKPOINT;
    }
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<tvts::Error>() {
            return match err {
                tvts::Error::Config(_) => exit::CONFIG,
                tvts::Error::Io { .. } | tvts::Error::Parse { .. } => exit::IO,
                tvts::Error::NonFiniteLoss { .. } => exit::NON_FINITE,
                tvts::Error::Checkpoint(_) => exit::CHECKPOINT,
                _ => exit::FAILURE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::IO;
        }
    }
    exit::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a).map(|_| 0),
        Command::Pretrain(a) => cmd_pretrain(a).map(|_| 0),
        Command::Eval(a) => cmd_eval(a).map(|_| 0),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::Plot(a) => cmd_plot(a).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
