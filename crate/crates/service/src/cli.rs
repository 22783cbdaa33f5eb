//! `adrag` subcommands. Each run writes a `manifest.json` next to its
//! outputs: config hash, seeds, and content hashes of inputs and outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use adrag_core::corpus::{guard_corpus, GuardCorpusConfig};
use adrag_core::dataset::{load_dataset, write_dataset, Dataset, Example};
use adrag_core::ekb::{stage_synthetic, synth_generate, PolicySpec, TemplateGenerator};
use adrag_core::eval::{analyze_context_distribution, context_coverage_ratio, evaluate, ContextDistribution, EvalMetrics};
use adrag_core::guard::{FeatureLayout, GuardParams};
use adrag_core::kb::{KbSnapshot, KnowledgeBase, NewEntry};
use adrag_core::par::ExecMode;
use adrag_core::perturbation::{PerturbationContext, RuleBasedAttacker, VariantRetriever};
use adrag_core::training::{
    build_training_kb, featurize, prepare_examples, raft_train, skd_train, supervised_contextual_finetune, Featurized,
    TrainReport,
};
use adrag_core::types::sha256_hex;
use adrag_core::Source;
use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{load_config, AppConfig};
use crate::http;
use crate::loadgen::{self, LoadConfig};
use crate::state::ServiceState;

#[derive(Debug, Parser)]
#[command(name = "adrag", version, about = "Retrieval-augmented guard: training, evaluation and serving")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value: `section.key=value`. Repeatable; wins over
    /// environment variables and the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Adversarial contextual training of the teacher (λ from training.lambda).
    Train(TrainArgs),
    /// Scheduled teacher/student distillation.
    Distill(OutArgs),
    /// Weighted F1 and per-class metrics of a checkpoint.
    Eval(EvalArgs),
    /// Context label agreement and coverage diagnostics.
    Analyze(AnalyzeArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
    /// Open-loop load test against a running service.
    Bench(BenchArgs),
    /// Knowledge-base maintenance.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Write the synthetic planted guard corpus as a dataset file.
    Corpus(CorpusArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TrainKind {
    Raft,
    Sft,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "raft")]
    pub kind: TrainKind,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Similarity threshold for the label-agreement grid.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Thresholds for the coverage ratio.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.3, 0.5, 0.7, 0.9])]
    pub coverage: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Overrides service.bind.
    #[arg(long)]
    pub bind: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    pub url: String,
    #[arg(long, default_value_t = 300.0)]
    pub qps: f64,
    /// Seconds.
    #[arg(long, default_value_t = 60.0)]
    pub duration: f64,
    /// Queries, one per line or JSONL with a `text` field.
    #[arg(long, required_unless_present = "from_samples")]
    pub queries: Option<PathBuf>,
    /// Recompute the report from an existing sample dump instead of
    /// generating load.
    #[arg(long, conflicts_with = "queries")]
    pub from_samples: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum KbCommand {
    /// Build a KB file from a dataset.
    Import {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Import every row instead of only the training split.
        #[arg(long)]
        all: bool,
    },
    /// Write a KB file's entries as JSONL.
    Export {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Entry counts by label and source.
    Stats {
        #[arg(long)]
        kb: PathBuf,
    },
    /// Generate synthetic entries from a policy file into a KB file.
    Synth {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Publish staged entries on a running service.
    Refresh {
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        url: String,
    },
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub families: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also write the planted misleading entries to this file.
    #[arg(long)]
    pub plants: Option<PathBuf>,
}

/// Git-style object hash: SHA-256 over `blob <len>\0<bytes>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut framed = format!("blob {}\0", bytes.len()).into_bytes();
    framed.extend_from_slice(bytes);
    sha256_hex(&framed)
}

fn file_hash(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(content_hash(&bytes))
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    version: &'static str,
    config_hash: String,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

struct Run<'a> {
    command: &'static str,
    cfg: &'a AppConfig,
    config_file: Option<&'a Path>,
    inputs: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
}

impl<'a> Run<'a> {
    fn new(command: &'static str, cfg: &'a AppConfig, config_file: Option<&'a Path>) -> Self {
        Run {
            command,
            cfg,
            config_file,
            inputs: Vec::new(),
            seeds: BTreeMap::new(),
        }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn seed(&mut self, name: &str, v: u64) {
        self.seeds.insert(name.into(), v);
    }

    fn finish(self, out: &Path, outputs: &[&str]) -> anyhow::Result<()> {
        let mut inputs = BTreeMap::new();
        for p in self.config_file.iter().map(|p| p.to_path_buf()).chain(self.inputs) {
            inputs.insert(p.display().to_string(), file_hash(&p)?);
        }
        let mut outs = BTreeMap::new();
        for name in outputs {
            outs.insert(name.to_string(), file_hash(&out.join(name))?);
        }
        let m = Manifest {
            command: self.command.into(),
            version: env!("CARGO_PKG_VERSION"),
            config_hash: self.cfg.hash(),
            seeds: self.seeds,
            inputs,
            outputs: outs,
        };
        write_json(&out.join("manifest.json"), &m)
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(p: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn dataset(cfg: &AppConfig, run: &mut Run) -> anyhow::Result<Dataset> {
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| anyhow!("no dataset configured; set data.path"))?;
    let ds = load_dataset(path, &cfg.data.options)?;
    run.input(path);
    run.seed("split_seed", cfg.data.options.split_seed);
    Ok(ds)
}

fn split<'d>(ds: &'d Dataset, s: SplitArg) -> &'d [Example] {
    match s {
        SplitArg::Train => &ds.train,
        SplitArg::Test => &ds.test,
    }
}

/// The configured KB file, or one built from the training split.
fn knowledge_base(cfg: &AppConfig, ds: &Dataset, run: &mut Run) -> anyhow::Result<KnowledgeBase> {
    match &cfg.kb.path {
        Some(p) => {
            run.input(p);
            Ok(KnowledgeBase::load(p, cfg.encoder.clone())?)
        }
        None => Ok(build_training_kb(&ds.train, cfg.encoder.clone())?),
    }
}

fn training_features(cfg: &AppConfig, ds: &Dataset, snap: &KbSnapshot) -> anyhow::Result<(FeatureLayout, Vec<Featurized>)> {
    if ds.train.is_empty() {
        bail!("dataset has no training rows");
    }
    let mode = ExecMode::default();
    let variants = VariantRetriever::build(snap, &cfg.perturbation.encoder_variants)?;
    let attacker = RuleBasedAttacker;
    let pc = PerturbationContext {
        snapshot: snap,
        variants: &variants,
        attacker: &attacker,
        cfg: &cfg.perturbation,
        k: cfg.model.k,
    };
    let prepared = prepare_examples(&ds.train, snap, cfg.model.retrieval(), Some(&pc), cfg.perturbation.rng_seed, mode)?;
    let layout = FeatureLayout::new(cfg.encoder.dimension, cfg.model.k);
    Ok((layout, featurize(&prepared, snap, layout, mode)?))
}

fn eval_split(params: &GuardParams, data: &[Example], snap: &KbSnapshot, eps: f64) -> anyhow::Result<Option<EvalMetrics>> {
    if data.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate(params, data, snap, eps, ExecMode::default())?))
}

fn report_meta(r: &TrainReport) -> serde_json::Value {
    json!({ "kind": r.kind, "config_hash": r.config_hash, "report_hash": r.content_hash() })
}

fn train(cfg: &AppConfig, file: Option<&Path>, args: &TrainArgs) -> anyhow::Result<()> {
    let mut run = Run::new("train", cfg, file);
    let ds = dataset(cfg, &mut run)?;
    out_dir(&args.out)?;
    let kb = knowledge_base(cfg, &ds, &mut run)?;
    let snap = kb.snapshot();
    let (layout, feats) = training_features(cfg, &ds, &snap)?;
    let init = GuardParams::init(cfg.model.teacher, layout, cfg.model.init_seed)?;
    run.seed("init_seed", cfg.model.init_seed);
    run.seed("train_seed", cfg.training.train.seed);
    run.seed("perturbation_seed", cfg.perturbation.rng_seed);
    let mode = ExecMode::default();
    let (params, mut report) = match args.kind {
        TrainKind::Raft => raft_train(init, &feats, &cfg.training.train, mode)?,
        TrainKind::Sft => supervised_contextual_finetune(init, &feats, &cfg.training.train, mode)?,
    };
    let metrics = eval_split(&params, &ds.test, &snap, cfg.model.epsilon)?;
    report.teacher_metrics = metrics.clone();
    params.save(args.out.join("model.bin"), &report_meta(&report))?;
    write_json(&args.out.join("report.json"), &report)?;
    write_json(&args.out.join("metrics.json"), &json!({ "test": metrics }))?;
    kb.persist(args.out.join("kb.jsonl"))?;
    run.finish(&args.out, &["model.bin", "model.json", "report.json", "metrics.json", "kb.jsonl"])?;
    if let Some(m) = metrics {
        println!("test weighted F1 {:.4} (n = {})", m.weighted_f1, m.n);
    }
    Ok(())
}

fn distill(cfg: &AppConfig, file: Option<&Path>, args: &OutArgs) -> anyhow::Result<()> {
    let mut run = Run::new("distill", cfg, file);
    let ds = dataset(cfg, &mut run)?;
    out_dir(&args.out)?;
    let kb = knowledge_base(cfg, &ds, &mut run)?;
    let snap = kb.snapshot();
    let (layout, feats) = training_features(cfg, &ds, &snap)?;
    let student_seed = cfg.model.init_seed.wrapping_add(1000);
    let teacher = GuardParams::init(cfg.model.teacher, layout, cfg.model.init_seed)?;
    let student = GuardParams::init(cfg.model.student, layout, student_seed)?;
    run.seed("init_seed", cfg.model.init_seed);
    run.seed("student_init_seed", student_seed);
    run.seed("train_seed", cfg.training.train.seed);
    run.seed("perturbation_seed", cfg.perturbation.rng_seed);
    let schedule = cfg.training.schedule()?;
    let mut out = skd_train(teacher, student, &feats, &schedule, &cfg.training.skd(), ExecMode::default())?;
    out.report
        .audit_modes()
        .map_err(|e| anyhow!("mode audit failed: {e}"))?;
    let eps = cfg.model.epsilon;
    let t = eval_split(&out.teacher, &ds.test, &snap, eps)?;
    let s = eval_split(&out.student, &ds.test, &snap, eps)?;
    out.report.teacher_metrics = t.clone();
    out.report.student_metrics = s.clone();
    let meta = report_meta(&out.report);
    out.teacher.save(args.out.join("teacher.bin"), &meta)?;
    out.student.save(args.out.join("student.bin"), &meta)?;
    write_json(&args.out.join("report.json"), &out.report)?;
    let retention = match (&t, &s) {
        (Some(t), Some(s)) if t.weighted_f1 > 0.0 => Some(s.weighted_f1 / t.weighted_f1),
        _ => None,
    };
    write_json(
        &args.out.join("metrics.json"),
        &json!({
            "teacher": t,
            "student": s,
            "retention": retention,
            "teacher_params": out.teacher.num_params(),
            "student_params": out.student.num_params(),
        }),
    )?;
    kb.persist(args.out.join("kb.jsonl"))?;
    run.finish(
        &args.out,
        &["teacher.bin", "teacher.json", "student.bin", "student.json", "report.json", "metrics.json", "kb.jsonl"],
    )?;
    if let Some(r) = retention {
        println!("student/teacher weighted F1 retention {r:.4}");
    }
    Ok(())
}

fn eval(cfg: &AppConfig, file: Option<&Path>, args: &EvalArgs) -> anyhow::Result<()> {
    let mut run = Run::new("eval", cfg, file);
    let ds = dataset(cfg, &mut run)?;
    let params = GuardParams::load(&args.params)?;
    run.input(&args.params);
    out_dir(&args.out)?;
    let kb = knowledge_base(cfg, &ds, &mut run)?;
    let data = split(&ds, args.split);
    let m = evaluate(&params, data, &kb.snapshot(), cfg.model.epsilon, ExecMode::default())?;
    write_json(&args.out.join("metrics.json"), &m)?;
    run.finish(&args.out, &["metrics.json"])?;
    println!("weighted F1 {:.4} accuracy {:.4} (n = {})", m.weighted_f1, m.accuracy, m.n);
    Ok(())
}

#[derive(Serialize)]
struct Analysis {
    threshold: f64,
    distribution: ContextDistribution,
    mismatch: f64,
    coverage: Vec<(f64, f64)>,
}

fn analyze(cfg: &AppConfig, file: Option<&Path>, args: &AnalyzeArgs) -> anyhow::Result<()> {
    let mut run = Run::new("analyze", cfg, file);
    let ds = dataset(cfg, &mut run)?;
    out_dir(&args.out)?;
    let kb = knowledge_base(cfg, &ds, &mut run)?;
    let snap = kb.snapshot();
    let data = split(&ds, args.split);
    let mode = ExecMode::default();
    let distribution = analyze_context_distribution(data, &snap, args.threshold, mode)?;
    let coverage = args
        .coverage
        .iter()
        .map(|&t| (t, context_coverage_ratio(data, &snap, t, mode)))
        .collect();
    let a = Analysis {
        threshold: args.threshold,
        mismatch: distribution.mismatch(),
        distribution,
        coverage,
    };
    write_json(&args.out.join("analysis.json"), &a)?;
    run.finish(&args.out, &["analysis.json"])?;
    println!("mismatch {:.4} over {} queries with context", a.mismatch, distribution.with_context);
    Ok(())
}

fn runtime() -> anyhow::Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn serve(cfg: &AppConfig, args: &ServeArgs) -> anyhow::Result<()> {
    let bind = args.bind.clone().unwrap_or_else(|| cfg.service.bind.clone());
    let state = Arc::new(ServiceState::from_config(cfg)?);
    let rt = runtime()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .with_context(|| format!("binding {bind}"))?;
        let addr = listener.local_addr()?;
        println!("listening on http://{addr}");
        tracing::info!(%addr, entries = state.kb.snapshot().len(), model = state.model().is_some(), "serving");
        http::serve(state, listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}

fn bench(cfg: &AppConfig, file: Option<&Path>, args: &BenchArgs) -> anyhow::Result<()> {
    let mut run = Run::new("bench", cfg, file);
    out_dir(&args.out)?;
    let report_path = args.out.join("report.json");
    if let Some(dump) = &args.from_samples {
        let (header, samples) = loadgen::read_samples(dump)?;
        run.input(dump);
        loadgen::write_report(&report_path, &loadgen::report_from_samples(&header, &samples))?;
        return run.finish(&args.out, &["report.json"]);
    }
    let qpath = args.queries.as_ref().expect("clap requires queries");
    run.input(qpath);
    let lc = LoadConfig {
        url: args.url.clone(),
        qps: args.qps,
        duration: Duration::from_secs_f64(args.duration),
        queries: loadgen::read_queries(qpath)?,
        timeout: Duration::from_secs(10),
    };
    let (header, samples) = runtime()?.block_on(loadgen::run(&lc))?;
    let report = loadgen::report_from_samples(&header, &samples);
    loadgen::write_samples(&args.out.join("samples.jsonl"), &header, &samples)?;
    loadgen::write_report(&report_path, &report)?;
    run.finish(&args.out, &["report.json", "samples.jsonl"])?;
    println!(
        "achieved {:.1} qps; server total p50 {:.3} ms p99 {:.3} ms; client p99 {:.3} ms{}",
        report.achieved_qps,
        report.server.total.p50_ms,
        report.server.total.p99_ms,
        report.client.p99_ms,
        if report.saturated { " (saturated)" } else { "" }
    );
    if report.aborted {
        bail!("load generation aborted after a connection failure; partial report written");
    }
    Ok(())
}

fn kb_cmd(cfg: &AppConfig, cmd: &KbCommand) -> anyhow::Result<()> {
    match cmd {
        KbCommand::Import { dataset, out, all } => {
            let ds = load_dataset(dataset, &cfg.data.options)?;
            let kb = KnowledgeBase::new(cfg.encoder.clone())?;
            let rows: Vec<&Example> = if *all { ds.train.iter().chain(&ds.test).collect() } else { ds.train.iter().collect() };
            kb.insert_many(rows.iter().map(|e| NewEntry::new(e.text.clone(), e.label).timestamp(0)))?;
            kb.publish_snapshot();
            kb.persist(out)?;
            println!("imported {} entries", rows.len());
        }
        KbCommand::Export { kb, out } => {
            let kb = KnowledgeBase::load(kb, cfg.encoder.clone())?;
            let mut text = String::new();
            for e in kb.snapshot().entries() {
                text.push_str(&serde_json::to_string(&json!({
                    "id": e.id, "text": e.text, "label": e.label,
                    "source": e.meta.source, "timestamp": e.meta.timestamp, "confidence": e.meta.confidence,
                }))?);
                text.push('\n');
            }
            std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
        }
        KbCommand::Stats { kb } => {
            let kb = KnowledgeBase::load(kb, cfg.encoder.clone())?;
            let mut by: BTreeMap<String, usize> = BTreeMap::new();
            for e in kb.snapshot().entries() {
                *by.entry(format!("label.{}", e.label)).or_default() += 1;
                *by.entry(format!("source.{}", source_name(e.meta.source))).or_default() += 1;
            }
            println!("{}", serde_json::to_string_pretty(&json!({ "entries": kb.snapshot().len(), "counts": by }))?);
        }
        KbCommand::Synth { kb, policy, n, seed } => {
            let spec = PolicySpec::load(policy)?;
            let base = KnowledgeBase::load(kb, cfg.encoder.clone())?;
            let pairs = synth_generate(&spec, &TemplateGenerator, *n, &mut ChaCha8Rng::seed_from_u64(*seed))?;
            let ids = stage_synthetic(&base, &pairs)?;
            base.publish_snapshot();
            base.persist(kb)?;
            println!("added {} synthetic entries for policy {}", ids.len(), spec.policy_id);
        }
        KbCommand::Refresh { url } => {
            let url = format!("{}/v1/kb/refresh", url.trim_end_matches('/'));
            let body: serde_json::Value = runtime()?.block_on(async {
                let resp = reqwest::Client::new().post(&url).send().await?.error_for_status()?;
                resp.json().await
            })?;
            println!("{body}");
        }
    }
    Ok(())
}

fn source_name(s: Source) -> &'static str {
    match s {
        Source::Seed => "seed",
        Source::Feedback => "feedback",
        Source::Synthetic => "synthetic",
        Source::Adversarial => "adversarial",
    }
}

fn corpus(args: &CorpusArgs) -> anyhow::Result<()> {
    let c = guard_corpus(&GuardCorpusConfig {
        families: args.families,
        seed: args.seed,
        cue_vocab: 6,
        plants_per_query: 4,
        ..Default::default()
    });
    write_dataset(
        &args.out,
        &Dataset {
            train: c.train,
            test: c.test,
        },
    )?;
    if let Some(p) = &args.plants {
        write_dataset(
            p,
            &Dataset {
                train: c.plants,
                test: Vec::new(),
            },
        )?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let file = cli.config.as_deref();
    let cfg = load_config(file, std::env::vars(), &cli.sets)?;
    match &cli.command {
        Command::Train(a) => train(&cfg, file, a),
        Command::Distill(a) => distill(&cfg, file, a),
        Command::Eval(a) => eval(&cfg, file, a),
        Command::Analyze(a) => analyze(&cfg, file, a),
        Command::Serve(a) => serve(&cfg, a),
        Command::Bench(a) => bench(&cfg, file, a),
        Command::Kb(c) => kb_cmd(&cfg, c),
        Command::Corpus(a) => corpus(a),
    }
}

