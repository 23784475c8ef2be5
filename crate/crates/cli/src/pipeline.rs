//! End-to-end desk run: corpus → LM → sparse coders → eight metrics for
//! seven coders on every layer → alignment → Table-1-shaped summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ffkv_core::alignment::{align_coders, sample_pairs_for_annotation, AlignmentReport, Histogram, PartitionReport};
use ffkv_core::checkpoint::{load_coder, load_model, save_coder, save_model};
use ffkv_core::coders::{train_sparse_coder, CoderKind, FeatureCoder, TrainingLog};
use ffkv_core::datasets::{desk_corpus, fingerprint_documents, load_corpus, write_jsonl, Document};
use ffkv_core::harvest::{write_dossiers_jsonl, TokenizedCorpus};
use ffkv_core::lm::{train_lm, Model, Tokenizer, TrainLog};
use ffkv_core::metrics::MetricReport;
use serde::{Deserialize, Serialize};

use crate::config::{WorkbenchConfig, PIPELINE_CODERS};
use crate::error::{CliError, Result, StageContext};
use crate::evaluate::{evaluate, explainer, EvalContext, EvalOutput, MetricSet, SiteCaptures, Tasks};
use crate::report::{render_csv, render_markdown, Pooled};
use crate::store::{key, Store};

/// Bumped whenever `summary.json` changes shape.
pub const SCHEMA_VERSION: u32 = 1;

pub fn version_string() -> String {
    format!("{} ({})", env!("CARGO_PKG_VERSION"), env!("FFKV_GIT_DESCRIBE"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprints {
    pub corpus: String,
    pub corpus_docs: usize,
    pub corpus_tokens: usize,
    pub vocab_size: usize,
    pub model: String,
    pub datasets: BTreeMap<String, String>,
}

/// Partitions and histograms of one directed dictionary pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub layer: usize,
    pub partitions: [PartitionReport; 2],
    pub histograms: [Histogram; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub summary_layer: usize,
    pub layers: Vec<usize>,
    pub coders: Vec<String>,
    pub fingerprints: Fingerprints,
    pub reports: Vec<MetricReport>,
    pub alignment: Vec<AlignmentSummary>,
}

impl RunSummary {
    pub fn report(&self, label: &str, layer: usize) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.label == label && r.coder.layer == layer)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("summary.json");
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path)?)?;
        let found = v.get("schema_version").and_then(|s| s.as_u64()).unwrap_or(0) as u32;
        if found != SCHEMA_VERSION {
            return Err(CliError::Schema {
                path,
                found,
                expected: SCHEMA_VERSION,
            });
        }
        Ok(serde_json::from_value(v)?)
    }
}

/// Corpus documents, the tokenizer built from them, and their token ids.
pub struct Corpus {
    pub docs: Vec<Document>,
    pub tokenizer: Tokenizer,
    pub tokens: TokenizedCorpus,
    pub fingerprint: String,
}

impl Corpus {
    pub fn load(cfg: &WorkbenchConfig) -> Result<Self> {
        let docs = match &cfg.corpus.path {
            Some(p) => load_corpus(p, cfg.corpus.format, None).stage("corpus", p)?,
            None => desk_corpus(&cfg.desk_corpus())?,
        };
        let tokenizer = Tokenizer::word_level(docs.iter().map(|d| d.text.as_str()));
        Ok(Self::with_tokenizer(docs, tokenizer))
    }

    pub fn with_tokenizer(docs: Vec<Document>, tokenizer: Tokenizer) -> Self {
        let tokens = TokenizedCorpus::new(docs.iter().map(|d| (d.id.as_str(), d.text.as_str())), &tokenizer);
        let fingerprint = fingerprint_documents(&docs);
        Self {
            docs,
            tokenizer,
            tokens,
            fingerprint,
        }
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Store key and the trained LM, built or reused.
pub fn trained_model(cfg: &WorkbenchConfig, store: &Store, corpus: &Corpus) -> Result<(String, Model)> {
    let mc = cfg.model_config(corpus.tokenizer.vocab_size())?;
    let tc = cfg.train_config();
    let k = key("lm", &(&corpus.fingerprint, &mc, &tc))?;
    let model = store
        .get_or_build(
            &k,
            |dir| {
                log::info!("training LM ({} steps)", tc.steps);
                let (model, log) = train_lm(&mc, corpus.tokenizer.clone(), &corpus.tokens.tokens, &tc)?;
                save_model(&dir.join("model.ckpt"), &model)?;
                write_json(&dir.join("train_log.json"), &log)?;
                Ok(model)
            },
            |dir| Ok(load_model(&dir.join("model.ckpt"))?),
        )
        .stage("train-lm", store.dir(&k))?;
    Ok((k, model))
}

pub fn lm_log(store: &Store, model_key: &str) -> Result<TrainLog> {
    read_json(&store.dir(model_key).join("train_log.json"))
}

/// The untrained baseline: same shape and tokenizer, its own seed.
pub fn random_model(cfg: &WorkbenchConfig, tokenizer: &Tokenizer) -> Result<(String, Model)> {
    let mut mc = cfg.model_config(tokenizer.vocab_size())?;
    mc.seed = cfg.derive("random_model");
    let k = key("random-lm", &mc)?;
    Ok((k, Model::random_init(&mc, tokenizer.clone())?))
}

/// A trained SAE or transcoder for one layer, built or reused.
pub fn trained_coder(
    cfg: &WorkbenchConfig,
    store: &Store,
    model_key: &str,
    model: &Model,
    kind: CoderKind,
    layer: usize,
    corpus: &Corpus,
) -> Result<(String, FeatureCoder)> {
    let section = match kind {
        CoderKind::Sae => &cfg.sae,
        CoderKind::Transcoder => &cfg.transcoder,
        other => return Err(CliError::Usage(format!("{other} coders are not trained"))),
    };
    let hyper = section.to_core(cfg.derive(&format!("{kind}/{layer}")));
    let k = key(kind.as_str(), &(model_key, layer, &hyper, section.train_tokens))?;
    let stage = format!("train-{kind}-L{layer}");
    let coder = store
        .get_or_build(
            &k,
            |dir| {
                log::info!("training {kind} on layer {layer}");
                let (coder, log) =
                    train_sparse_coder(kind, model, layer, &corpus.tokens.tokens, section.train_tokens, &hyper)?;
                let coder = coder.with_source(format!("store:{k}"));
                save_coder(&dir.join("coder.ckpt"), &coder, None)?;
                write_json(&dir.join("train_log.json"), &log)?;
                Ok(coder)
            },
            |dir| Ok(load_coder(&dir.join("coder.ckpt"), None)?),
        )
        .stage(&stage, store.dir(&k))?;
    Ok((k, coder))
}

/// Build the FF-KV family coder named `label` from `model`.
pub fn ffkv_coder(cfg: &WorkbenchConfig, label: &str, model: &Model, model_key: &str, layer: usize) -> Result<FeatureCoder> {
    let topk = cfg.topk.to_core();
    let c = match label {
        "ffkv" | "random_ffkv" => FeatureCoder::ffkv(model, layer)?,
        "topk_ffkv" => FeatureCoder::topk_ffkv(model, layer, topk)?,
        "norm_ffkv" => FeatureCoder::norm_ffkv(model, layer)?,
        "topk_norm_ffkv" => FeatureCoder::topk_norm_ffkv(model, layer, topk)?,
        other => return Err(CliError::Usage(format!("{other} is not an FF-KV coder"))),
    };
    Ok(c.with_source(format!("store:{model_key}")))
}

struct Prepared {
    label: String,
    layer: usize,
    random: bool,
    coder: FeatureCoder,
    coder_key: String,
}

fn artifact_name(label: &str, layer: usize) -> String {
    format!("{label}.L{layer}")
}

/// Run the full pipeline into `cfg.output_dir`.
pub fn run_pipeline(cfg: &WorkbenchConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    for sub in ["reports", "dossiers", "alignment", "training"] {
        std::fs::create_dir_all(out.join(sub))?;
    }
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    std::fs::write(out.join("VERSION"), version_string() + "\n")?;
    let store = Store::open(cfg.store_dir())?;
    let mut timings: BTreeMap<String, f64> = BTreeMap::new();
    let mut tick = Instant::now();
    let mut lap = |name: &str, timings: &mut BTreeMap<String, f64>| {
        timings.insert(name.to_string(), tick.elapsed().as_secs_f64());
        tick = Instant::now();
    };

    let corpus = Corpus::load(cfg)?;
    let tasks = Tasks::generate(cfg)?;
    if cfg.corpus.path.is_none() {
        write_jsonl(&out.join("training").join("corpus.jsonl"), &corpus.docs)?;
    }
    lap("corpus", &mut timings);

    let (model_key, model) = trained_model(cfg, &store, &corpus)?;
    write_json(&out.join("training").join("lm.json"), &lm_log(&store, &model_key)?)?;
    let (random_key, random) = random_model(cfg, &corpus.tokenizer)?;
    lap("train-lm", &mut timings);

    let fingerprints = Fingerprints {
        corpus: corpus.fingerprint.clone(),
        corpus_docs: corpus.docs.len(),
        corpus_tokens: corpus.tokens.total_tokens(),
        vocab_size: corpus.tokenizer.vocab_size(),
        model: model_key.clone(),
        datasets: tasks.fingerprints()?,
    };
    write_json(&out.join("fingerprints.json"), &fingerprints)?;

    let layers = cfg.layers();
    let mut prepared: Vec<Prepared> = Vec::new();
    for &layer in &layers {
        for label in PIPELINE_CODERS.iter().filter(|l| cfg.coders.iter().any(|c| c == *l)) {
            let random_row = *label == "random_ffkv";
            let (coder, coder_key) = match *label {
                "sae" | "transcoder" => {
                    let kind = if *label == "sae" { CoderKind::Sae } else { CoderKind::Transcoder };
                    let (k, c) = trained_coder(cfg, &store, &model_key, &model, kind, layer, &corpus)?;
                    let log: TrainingLog = read_json(&store.dir(&k).join("train_log.json"))?;
                    write_json(&out.join("training").join(format!("{}.json", artifact_name(label, layer))), &log)?;
                    (c, k)
                }
                _ => {
                    let (m, mk) = if random_row { (&random, &random_key) } else { (&model, &model_key) };
                    let c = ffkv_coder(cfg, label, m, mk, layer)?;
                    (c, mk.clone())
                }
            };
            prepared.push(Prepared {
                label: label.to_string(),
                layer,
                random: random_row,
                coder,
                coder_key,
            });
        }
    }
    lap("train-coders", &mut timings);

    let client = explainer(cfg)?;
    let metrics = MetricSet::all();
    let metric_seeds = (cfg.data_seed(), cfg.probe().seed, cfg.ravel().seed, cfg.autointerp().seed);
    let mut reports = Vec::new();
    for &layer in &layers {
        let mut caps: [Option<SiteCaptures>; 2] = [None, None];
        for p in prepared.iter().filter(|p| p.layer == layer) {
            let (m, mk) = if p.random { (&random, &random_key) } else { (&model, &model_key) };
            let ek = key(
                "eval",
                &(
                    mk,
                    &p.label,
                    layer,
                    &p.coder_key,
                    p.coder.topk(),
                    &cfg.metrics,
                    metric_seeds,
                    &cfg.explainer.kind,
                    &fingerprints.datasets,
                    &corpus.fingerprint,
                ),
            )?;
            let stage = format!("eval-{}", artifact_name(&p.label, layer));
            let ctx = EvalContext {
                cfg,
                model: m,
                corpus: &corpus.tokens,
                tasks: &tasks,
                client: client.as_ref(),
                provenance: serde_json::json!({ "model": mk, "coder": p.coder_key }),
            };
            let slot = &mut caps[p.random as usize];
            let output: EvalOutput = store
                .get_or_build(
                    &ek,
                    |dir| {
                        if slot.is_none() {
                            let limit = cfg.metrics.alive_tokens.max(cfg.metrics.ev_tokens);
                            *slot = Some(SiteCaptures::capture(m, layer, &corpus.tokens.tokens, limit)?);
                        }
                        let o = evaluate(&ctx, &p.label, &p.coder, slot.as_ref(), &metrics)?;
                        write_json(&dir.join("eval.json"), &o)?;
                        Ok(o)
                    },
                    |dir| read_json(&dir.join("eval.json")),
                )
                .stage(&stage, store.dir(&ek))?;
            let name = artifact_name(&p.label, layer);
            write_json(&out.join("reports").join(format!("{name}.json")), &output.report)?;
            write_dossiers_jsonl(&out.join("dossiers").join(format!("{name}.jsonl")), &output.dossiers)?;
            reports.push(output.report);
        }
    }
    lap("evaluate", &mut timings);

    let mut alignment = Vec::new();
    for &layer in &layers {
        let find = |l: &str| prepared.iter().find(|p| p.layer == layer && p.label == l);
        if let (Some(a), Some(b)) = (find("ffkv"), find("transcoder")) {
            let path = out.join("alignment").join(format!("ffkv-transcoder.L{layer}.json"));
            let build = || -> Result<AlignmentReport> {
                let fwd = align_coders(&a.coder, &b.coder)?;
                let rev = align_coders(&b.coder, &a.coder)?;
                let al = &cfg.alignment;
                Ok(AlignmentReport::build(fwd, rev, al.low, al.high, al.bins)?)
            };
            let rep = build().stage(&format!("align-L{layer}"), &path)?;
            let pairs = sample_pairs_for_annotation(
                &rep.forward,
                cfg.alignment.bins,
                cfg.alignment.pairs_per_bin,
                cfg.derive(&format!("pairs/{layer}")),
            )?;
            write_json(&path, &rep)?;
            let stem = out.join("alignment").join(format!("ffkv-transcoder.L{layer}"));
            std::fs::write(stem.with_extension("forward.csv"), rep.forward.to_csv())?;
            std::fs::write(stem.with_extension("reverse.csv"), rep.reverse.to_csv())?;
            write_json(&stem.with_extension("pairs.json"), &pairs)?;
            alignment.push(AlignmentSummary {
                layer,
                partitions: rep.partitions,
                histograms: rep.histograms,
            });
        }
    }
    lap("align", &mut timings);

    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        summary_layer: cfg.summary_layer(),
        layers: layers.clone(),
        coders: prepared
            .iter()
            .filter(|p| p.layer == layers[0])
            .map(|p| p.label.clone())
            .collect(),
        fingerprints,
        reports,
        alignment,
    };
    write_json(&out.join("summary.json"), &summary)?;
    let pooled = Pooled::from_runs(&[(PathBuf::from("."), summary.clone())]);
    std::fs::write(out.join("summary.md"), render_markdown(&pooled, summary.summary_layer))?;
    std::fs::write(out.join("summary.csv"), render_csv(&pooled))?;
    lap("report", &mut timings);
    write_json(&out.join("timings.json"), &timings)?;
    Ok(summary)
}
