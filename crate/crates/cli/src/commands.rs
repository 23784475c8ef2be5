//! Command-line surface. Every subcommand reads the same TOML config;
//! `--seed` overrides the configured seed.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ffkv_core::alignment::{align_coders, AlignmentReport};
use ffkv_core::checkpoint::{load_coder, load_model, save_coder, save_model};
use ffkv_core::coders::{CoderKind, FeatureCoder};
use ffkv_core::datasets::{load_corpus, write_jsonl, CorpusFormat};
use ffkv_core::harvest::{harvest, write_dossiers_jsonl};
use ffkv_core::lm::{train_lm, Model};
use ffkv_core::numerics::RngStream;

use crate::config::WorkbenchConfig;
use crate::error::{CliError, Result, StageContext};
use crate::evaluate::{evaluate, explainer, EvalContext, MetricSet, SiteCaptures, Tasks};
use crate::pipeline::{ffkv_coder, run_pipeline, version_string, Corpus};
use crate::report::cmd_report;
use crate::sweep::{parse_values, run_sweep, SweepParam};

#[derive(Debug, Parser)]
#[command(name = "ffkv", version, about = "Feed-forward key-value interpretability workbench")]
pub struct Cli {
    /// TOML configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `output_dir` from the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Start from the seconds-scale smoke preset instead of the defaults.
    #[arg(long, global = true, conflicts_with = "config")]
    pub smoke: bool,
    /// Repeat for more logging.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the language model on the configured corpus.
    TrainLm,
    /// Train a sparse coder, or bind an FF-KV coder to a layer.
    TrainCoder(TrainCoderArgs),
    /// Record coder activations over a corpus and write dossiers.
    Harvest(HarvestArgs),
    /// Run metric groups on one coder.
    Eval(EvalArgs),
    /// Max-cosine alignment between two coders.
    Align(AlignArgs),
    /// Sweep one parameter through the whole pipeline.
    Sweep(SweepArgs),
    /// Serve the annotation API.
    Serve(ServeArgs),
    /// Pool completed runs into Markdown and CSV tables.
    Report(ReportArgs),
    /// Corpus, LM, coders, metrics, alignment and summary in one go.
    Pipeline,
    /// Print the resolved configuration.
    Config,
}

#[derive(Debug, Args)]
pub struct ModelArg {
    /// Model checkpoint; defaults to `<out>/model.ckpt`.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainCoderArgs {
    /// ffkv, topk_ffkv, norm_ffkv, topk_norm_ffkv, sae or transcoder.
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub layer: usize,
    #[command(flatten)]
    pub model: ModelArg,
}

#[derive(Debug, Args)]
pub struct HarvestArgs {
    #[arg(long)]
    pub coder: PathBuf,
    /// Corpus file; the configured corpus when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "jsonl")]
    pub format: String,
    /// Token budget; `metrics.autointerp_tokens` when absent.
    #[arg(long)]
    pub tokens: Option<usize>,
    #[command(flatten)]
    pub model: ModelArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub coder: PathBuf,
    /// Comma-separated metric groups, or `all`.
    #[arg(long, default_value = "all")]
    pub metrics: String,
    /// Row label in the report; the coder kind when absent.
    #[arg(long)]
    pub label: Option<String>,
    #[command(flatten)]
    pub model: ModelArg,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[command(flatten)]
    pub model: ModelArg,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// `k` or `d_ff`.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values.
    #[arg(long)]
    pub values: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Append-only annotation log; `<out>/annotations.jsonl` when absent.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Completed run directories.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
}

/// Configuration after applying the file and the command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<WorkbenchConfig> {
    let mut cfg = match &cli.config {
        Some(p) => WorkbenchConfig::load(p).stage("config", p)?,
        None if cli.smoke => WorkbenchConfig::smoke(),
        None => WorkbenchConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_path(cfg: &WorkbenchConfig, arg: &ModelArg) -> PathBuf {
    arg.model.clone().unwrap_or_else(|| cfg.output_dir.join("model.ckpt"))
}

fn open_model(cfg: &WorkbenchConfig, arg: &ModelArg) -> Result<Model> {
    let p = model_path(cfg, arg);
    load_model(&p).stage("load-model", &p)
}

fn open_coder(path: &Path, model: &Model) -> Result<FeatureCoder> {
    load_coder(path, Some(model)).stage("load-coder", path)
}

/// The configured corpus (or `path`) tokenized with the model's vocabulary.
fn corpus_for(cfg: &WorkbenchConfig, model: &Model, path: Option<(&Path, CorpusFormat)>) -> Result<Corpus> {
    let docs = match path {
        Some((p, f)) => load_corpus(p, f, None).stage("corpus", p)?,
        None => match &cfg.corpus.path {
            Some(p) => load_corpus(p, cfg.corpus.format, None).stage("corpus", p)?,
            None => ffkv_core::datasets::desk_corpus(&cfg.desk_corpus())?,
        },
    };
    Ok(Corpus::with_tokenizer(docs, model.tokenizer.clone()))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn stamp(cfg: &WorkbenchConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()?)?;
    std::fs::write(cfg.output_dir.join("VERSION"), version_string() + "\n")?;
    Ok(())
}

fn coder_file(kind: CoderKind, layer: usize) -> String {
    format!("{kind}.L{layer}.ckpt")
}

pub fn cmd_train_lm(cfg: &WorkbenchConfig) -> Result<PathBuf> {
    stamp(cfg)?;
    let corpus = Corpus::load(cfg)?;
    let mc = cfg.model_config(corpus.tokenizer.vocab_size())?;
    let path = cfg.output_dir.join("model.ckpt");
    let (model, log) = train_lm(&mc, corpus.tokenizer.clone(), &corpus.tokens.tokens, &cfg.train_config()).stage("train-lm", &path)?;
    save_model(&path, &model)?;
    write_json(&cfg.output_dir.join("train_log.json"), &log)?;
    if cfg.corpus.path.is_none() {
        write_jsonl(&cfg.output_dir.join("corpus.jsonl"), &corpus.docs)?;
    }
    println!("model: {} (final loss {:.4})", path.display(), log.losses.last().copied().unwrap_or(f64::NAN));
    Ok(path)
}

pub fn cmd_train_coder(cfg: &WorkbenchConfig, args: &TrainCoderArgs) -> Result<PathBuf> {
    stamp(cfg)?;
    let kind: CoderKind = args.kind.parse()?;
    let model = open_model(cfg, &args.model)?;
    let path = cfg.output_dir.join(coder_file(kind, args.layer));
    let source = model_path(cfg, &args.model).display().to_string();
    let coder = if kind.is_ffkv() {
        ffkv_coder(cfg, kind.as_str(), &model, &source, args.layer)?
    } else {
        let corpus = corpus_for(cfg, &model, None)?;
        let section = if kind == CoderKind::Sae { &cfg.sae } else { &cfg.transcoder };
        let hyper = section.to_core(cfg.derive(&format!("{kind}/{}", args.layer)));
        let (coder, log) = ffkv_core::coders::train_sparse_coder(
            kind,
            &model,
            args.layer,
            &corpus.tokens.tokens,
            section.train_tokens,
            &hyper,
        )
        .stage(&format!("train-{kind}"), &path)?;
        write_json(&path.with_extension("log.json"), &log)?;
        coder.with_source(path.display().to_string())
    };
    save_coder(&path, &coder, Some(&model))?;
    println!("coder: {}", path.display());
    Ok(path)
}

pub fn cmd_harvest(cfg: &WorkbenchConfig, args: &HarvestArgs) -> Result<PathBuf> {
    stamp(cfg)?;
    let model = open_model(cfg, &args.model)?;
    let coder = open_coder(&args.coder, &model)?;
    let format: CorpusFormat = args.format.parse()?;
    let corpus = corpus_for(cfg, &model, args.corpus.as_deref().map(|p| (p, format)))?;
    let limit = args.tokens.unwrap_or(cfg.metrics.autointerp_tokens);
    let stem = args.coder.file_stem().and_then(|s| s.to_str()).unwrap_or("coder").to_string();
    let dir = cfg.output_dir.join("harvest").join(&stem);
    let history = harvest(&model, &coder, &corpus.tokens, limit).stage("harvest", &dir)?;
    history.save(&dir)?;
    let m = &cfg.metrics;
    let alive: Vec<usize> = (0..history.d_coder())
        .filter(|&f| history.activations.column(f).iter().any(|&v| v > 0.0))
        .collect();
    let mut rng = RngStream::new(cfg.derive(&format!("features/{stem}")), 0);
    let mut picked: Vec<usize> = rng
        .sample_indices(alive.len(), m.autointerp_features.min(alive.len()))
        .into_iter()
        .map(|i| alive[i])
        .collect();
    picked.sort_unstable();
    let dossiers = picked
        .iter()
        .map(|&f| history.top_contexts(f, m.dossier_size, m.dossier_window, &model.tokenizer))
        .collect::<ffkv_core::Result<Vec<_>>>()?;
    write_dossiers_jsonl(&dir.join("dossiers.jsonl"), &dossiers)?;
    println!(
        "harvest: {} rows, {} of {} features alive, {} dossiers in {}",
        history.rows(),
        alive.len(),
        history.d_coder(),
        dossiers.len(),
        dir.display()
    );
    Ok(dir)
}

pub fn cmd_eval(cfg: &WorkbenchConfig, args: &EvalArgs) -> Result<PathBuf> {
    stamp(cfg)?;
    let metrics = MetricSet::parse(&args.metrics)?;
    let model = open_model(cfg, &args.model)?;
    let coder = open_coder(&args.coder, &model)?;
    let label = args.label.clone().unwrap_or_else(|| coder.kind().as_str().to_string());
    let corpus = corpus_for(cfg, &model, None)?;
    let tasks = Tasks::generate(cfg)?;
    let client = explainer(cfg)?;
    let caps = if metrics.has("feature_alive") || metrics.has("explained_variance") {
        let limit = cfg.metrics.alive_tokens.max(cfg.metrics.ev_tokens);
        Some(SiteCaptures::capture(&model, coder.layer(), &corpus.tokens.tokens, limit)?)
    } else {
        None
    };
    let ctx = EvalContext {
        cfg,
        model: &model,
        corpus: &corpus.tokens,
        tasks: &tasks,
        client: client.as_ref(),
        provenance: serde_json::json!({ "coder": args.coder }),
    };
    let name = format!("{label}.L{}", coder.layer());
    let path = cfg.output_dir.join("reports").join(format!("{name}.json"));
    let out = evaluate(&ctx, &label, &coder, caps.as_ref(), &metrics).stage("eval", &path)?;
    write_json(&path, &out.report)?;
    if !out.dossiers.is_empty() {
        write_dossiers_jsonl(&cfg.output_dir.join("dossiers").join(format!("{name}.jsonl")), &out.dossiers)?;
    }
    for (k, v) in &out.report.metrics {
        match v.value {
            Some(x) => println!("{k}: {x:.4}"),
            None => println!("{k}: undefined ({})", v.note.as_deref().unwrap_or("")),
        }
    }
    Ok(path)
}

pub fn cmd_align(cfg: &WorkbenchConfig, args: &AlignArgs) -> Result<PathBuf> {
    stamp(cfg)?;
    let model = open_model(cfg, &args.model)?;
    let a = open_coder(&args.a, &model)?;
    let b = open_coder(&args.b, &model)?;
    let al = &cfg.alignment;
    let path = cfg.output_dir.join("alignment").join("alignment.json");
    let rep = (|| -> ffkv_core::Result<AlignmentReport> {
        AlignmentReport::build(align_coders(&a, &b)?, align_coders(&b, &a)?, al.low, al.high, al.bins)
    })()
    .stage("align", &path)?;
    write_json(&path, &rep)?;
    std::fs::write(path.with_extension("forward.csv"), rep.forward.to_csv())?;
    std::fs::write(path.with_extension("reverse.csv"), rep.reverse.to_csv())?;
    for p in &rep.partitions {
        println!(
            "{}: aligned {} / middle {} / unaligned {} of {}",
            p.direction,
            p.aligned.len(),
            p.middle.len(),
            p.unaligned.len(),
            p.total
        );
    }
    Ok(path)
}

pub fn cmd_serve(cfg: &WorkbenchConfig, args: &ServeArgs) -> Result<()> {
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address {}:{}: {e}", args.host, args.port)))?;
    let log = args.log.clone().unwrap_or_else(|| cfg.output_dir.join("annotations.jsonl"));
    if let Some(d) = log.parent() {
        std::fs::create_dir_all(d)?;
    }
    log::info!("serving on http://{addr}, log {}", log.display());
    ffkv_service::serve(addr, &log).stage("serve", &log)?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::TrainLm => cmd_train_lm(&cfg).map(drop),
        Command::TrainCoder(a) => cmd_train_coder(&cfg, a).map(drop),
        Command::Harvest(a) => cmd_harvest(&cfg, a).map(drop),
        Command::Eval(a) => cmd_eval(&cfg, a).map(drop),
        Command::Align(a) => cmd_align(&cfg, a).map(drop),
        Command::Sweep(a) => {
            let param: SweepParam = a.param.parse()?;
            let values = parse_values(&a.values)?;
            let r = run_sweep(&cfg, param, &values)?;
            println!("sweep: {} points, curves in {}", r.values.len(), cfg.output_dir.join("sweep.csv").display());
            Ok(())
        }
        Command::Serve(a) => cmd_serve(&cfg, a),
        Command::Report(a) => {
            let (_, md) = cmd_report(&a.dirs, cli.out.as_deref())?;
            print!("{md}");
            Ok(())
        }
        Command::Pipeline => {
            run_pipeline(&cfg)?;
            println!("{}", std::fs::read_to_string(cfg.output_dir.join("summary.md"))?);
            Ok(())
        }
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}
