//! The eight-metric suite for one coder, with the soft-failure policy:
//! metrics that abort or hit a degenerate case become undefined cells with
//! a note, every other error halts the run.

use std::collections::{BTreeMap, BTreeSet};

use ffkv_core::coders::FeatureCoder;
use ffkv_core::datasets::{
    gen_binary_concepts, gen_entity_world, gen_first_letter, gen_multiclass, gen_spurious_pairs,
    EntityAttributeWorld, FirstLetterTask, LabeledTextSet,
};
use ffkv_core::harvest::{capture_sites, harvest, FeatureDossier, TokenizedCorpus, ZERO_EPS};
use ffkv_core::lm::{HookPoint, HookSite, Model};
use ffkv_core::metrics::autointerp::HttpExplainer;
use ffkv_core::metrics::{
    absorption_eval, alive_rate_from_maxima, autointerp_eval, explained_variance, pooled_features,
    ravel_eval, scr_eval_grid, sparse_probing_eval, tpp_eval, ConceptData, ExplainerClient,
    MetricReport, MetricValue, RavelIntervention, Splice, SplicedTexts, SpliceMode, METRIC_KEYS,
};
use ffkv_core::numerics::{Matrix, RngStream};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExplainerKind, WorkbenchConfig};
use crate::error::{CliError, Result};

/// Metric groups selectable on the command line. `ravel` yields both
/// RAVEL columns; `tpp` is reported under extras.
pub const METRIC_GROUPS: [&str; 9] = [
    "feature_alive",
    "explained_variance",
    "absorption",
    "sparse_probing",
    "autointerp",
    "ravel",
    "scr",
    "tpp",
    "alignment",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetricSet(BTreeSet<&'static str>);

impl MetricSet {
    pub fn all() -> Self {
        Self(METRIC_GROUPS.iter().copied().filter(|g| *g != "alignment").collect())
    }

    /// Comma-separated groups, or `all`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut set = BTreeSet::new();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if item == "all" {
                return Ok(Self::all());
            }
            let name = match item {
                "alive" => "feature_alive",
                "ev" => "explained_variance",
                "probing" => "sparse_probing",
                "ravel_isolation" | "ravel_causality" => "ravel",
                other => other,
            };
            let g = METRIC_GROUPS
                .iter()
                .find(|g| **g == name && **g != "alignment")
                .ok_or_else(|| CliError::Usage(format!("unknown metric {item:?}")))?;
            set.insert(*g);
        }
        if set.is_empty() {
            return Err(CliError::Usage("no metrics requested".into()));
        }
        Ok(Self(set))
    }

    pub fn has(&self, g: &str) -> bool {
        self.0.contains(g)
    }
}

/// The synthetic evaluation datasets, all drawn from the corpus lexicon.
#[derive(Clone, Debug)]
pub struct Tasks {
    pub first_letter: FirstLetterTask,
    pub world: EntityAttributeWorld,
    pub concepts: Vec<LabeledTextSet>,
    pub spurious: Vec<LabeledTextSet>,
    pub multiclass: LabeledTextSet,
}

fn json_fingerprint(v: &impl Serialize) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(v)?)))
}

impl Tasks {
    pub fn generate(cfg: &WorkbenchConfig) -> Result<Self> {
        let seed = cfg.data_seed();
        let m = &cfg.metrics;
        let spurious = m
            .scr_families
            .iter()
            .map(|f| gen_spurious_pairs([f[0], f[1]], [f[2], f[3]], m.scr_bias, m.scr_train, m.scr_eval, seed))
            .collect::<ffkv_core::Result<_>>()?;
        Ok(Self {
            first_letter: gen_first_letter(seed),
            world: gen_entity_world(cfg.corpus.n_entities, cfg.corpus.n_attributes, seed)?,
            concepts: gen_binary_concepts(m.n_concepts, m.concept_size, seed)?,
            spurious,
            multiclass: gen_multiclass(&m.tpp_families, m.tpp_per_class, seed)?,
        })
    }

    pub fn fingerprints(&self) -> Result<BTreeMap<String, String>> {
        let mut f = BTreeMap::new();
        f.insert("first_letter".into(), json_fingerprint(&self.first_letter)?);
        f.insert("entity_world".into(), json_fingerprint(&self.world)?);
        for s in self.concepts.iter().chain(&self.spurious).chain([&self.multiclass]) {
            f.insert(s.name.clone(), s.fingerprint());
        }
        Ok(f)
    }
}

/// Raw sublayer input and output of one layer over the head of the corpus.
pub struct SiteCaptures {
    pub ff_in: Matrix,
    pub ff_out: Matrix,
}

impl SiteCaptures {
    pub fn capture(model: &Model, layer: usize, tokens: &[Vec<u32>], limit: usize) -> Result<Self> {
        let hooks = [
            HookPoint::new(layer, HookSite::FfIn),
            HookPoint::new(layer, HookSite::FfOut),
        ];
        let mut caps = capture_sites(model, &hooks, tokens, limit)?;
        let ff_out = caps.pop().expect("two hooks");
        let ff_in = caps.pop().expect("two hooks");
        Ok(Self { ff_in, ff_out })
    }

    fn site(&self, site: HookSite) -> &Matrix {
        match site {
            HookSite::FfOut => &self.ff_out,
            _ => &self.ff_in,
        }
    }
}

const CHUNK: usize = 4096;

/// Alive rate over the first `rows` captured tokens, with the same
/// denoising threshold as stored histories.
pub fn alive_rate(coder: &FeatureCoder, caps: &SiteCaptures, rows: usize) -> ffkv_core::Result<f64> {
    let x = caps.site(coder.input_site());
    let rows = rows.min(x.rows());
    let mut max = vec![0.0f32; coder.d_coder()];
    for start in (0..rows).step_by(CHUNK) {
        let a = coder.encode(&x.slice_rows(start, (start + CHUNK).min(rows)))?;
        for row in a.row_iter() {
            for (m, &v) in max.iter_mut().zip(row) {
                if v >= ZERO_EPS && v > *m {
                    *m = v;
                }
            }
        }
    }
    if rows == 0 {
        return Err(ffkv_core::Error::Empty("captured tokens"));
    }
    alive_rate_from_maxima(&max)
}

pub fn coder_ev(coder: &FeatureCoder, caps: &SiteCaptures, rows: usize) -> ffkv_core::Result<f64> {
    let x = caps.site(coder.input_site());
    let y = caps.site(coder.target_site());
    let rows = rows.min(x.rows());
    let mut recon = Vec::with_capacity(rows * coder.d_out());
    for start in (0..rows).step_by(CHUNK) {
        recon.extend(coder.forward(&x.slice_rows(start, (start + CHUNK).min(rows)))?.into_vec());
    }
    let recon = Matrix::from_vec(rows, coder.d_out(), recon)?;
    explained_variance(&y.slice_rows(0, rows), &recon)
}

/// `Ok(Err(note))` for errors that leave a metric undefined.
fn soften<T>(r: ffkv_core::Result<T>) -> Result<std::result::Result<T, String>> {
    use ffkv_core::Error as E;
    match r {
        Ok(v) => Ok(Ok(v)),
        Err(e @ (E::Aborted(_) | E::Degenerate(_) | E::Empty(_))) => Ok(Err(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

pub fn explainer(cfg: &WorkbenchConfig) -> Result<Box<dyn ExplainerClient>> {
    Ok(match cfg.explainer.kind {
        ExplainerKind::Keyword => Box::new(ffkv_core::metrics::autointerp::KeywordClient),
        ExplainerKind::Http => {
            let url = std::env::var("FFKV_EXPLAINER_URL")
                .map_err(|_| CliError::Config("explainer.kind = \"http\" needs FFKV_EXPLAINER_URL".into()))?;
            let mut c = HttpExplainer::new(url, cfg.explainer.max_in_flight);
            if let Ok(k) = std::env::var("FFKV_EXPLAINER_KEY") {
                c = c.with_key(k);
            }
            c.model = std::env::var("FFKV_EXPLAINER_MODEL").ok();
            Box::new(c)
        }
    })
}

/// Everything the suite produces for one coder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub report: MetricReport,
    pub dossiers: Vec<FeatureDossier>,
}

pub struct EvalContext<'a> {
    pub cfg: &'a WorkbenchConfig,
    pub model: &'a Model,
    pub corpus: &'a TokenizedCorpus,
    pub tasks: &'a Tasks,
    pub client: &'a dyn ExplainerClient,
    /// Provenance recorded in the report's config snapshot.
    pub provenance: serde_json::Value,
}

fn insert(report: &mut MetricReport, key: &str, v: std::result::Result<MetricValue, String>) {
    report.insert(key, v.unwrap_or_else(MetricValue::undefined));
}

fn per_attribute(log: &[ffkv_core::metrics::RavelLogEntry], n_attr: usize) -> (Vec<f64>, Vec<f64>) {
    let mut iso = Vec::new();
    let mut cau = Vec::new();
    for a in 0..n_attr {
        let rows: Vec<_> = log.iter().filter(|e| e.attribute == a).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        iso.push(rows.iter().filter(|e| e.isolated).count() as f64 / n);
        cau.push(rows.iter().filter(|e| e.caused).count() as f64 / n);
    }
    (iso, cau)
}

/// Run the selected metric groups on `coder`. `caps` must come from the
/// coder's model and layer whenever alive rate or EV is requested.
pub fn evaluate(
    ctx: &EvalContext<'_>,
    label: &str,
    coder: &FeatureCoder,
    caps: Option<&SiteCaptures>,
    metrics: &MetricSet,
) -> Result<EvalOutput> {
    let cfg = ctx.cfg;
    let m = &cfg.metrics;
    let model = ctx.model;
    let layer = coder.layer();
    let probe = cfg.probe();
    let mut report = MetricReport::new(
        label,
        coder.handle(),
        serde_json::json!({
            "metrics": m,
            "topk": coder.topk(),
            "seeds": {
                "global": cfg.seed,
                "data": cfg.data_seed(),
                "probe": probe.seed,
                "ravel": cfg.ravel().seed,
                "autointerp": cfg.autointerp().seed,
            },
            "explainer": cfg.explainer.kind,
            "datasets": ctx.tasks.fingerprints()?,
            "provenance": ctx.provenance,
        }),
    );
    let mut dossiers = Vec::new();

    if metrics.has("feature_alive") || metrics.has("explained_variance") {
        let caps = caps.ok_or_else(|| CliError::Usage("alive rate and EV need captured activations".into()))?;
        if metrics.has("feature_alive") {
            log::info!("{label} L{layer}: alive rate");
            insert(&mut report, "feature_alive", soften(alive_rate(coder, caps, m.alive_tokens))?.map(MetricValue::exact));
        }
        if metrics.has("explained_variance") {
            log::info!("{label} L{layer}: explained variance");
            insert(&mut report, "explained_variance", soften(coder_ev(coder, caps, m.ev_tokens))?.map(MetricValue::exact));
        }
    }

    if metrics.has("absorption") {
        log::info!("{label} L{layer}: absorption");
        let r = soften(absorption_eval(model, coder, &ctx.tasks.first_letter, &cfg.absorption()))?;
        if let Ok(r) = &r {
            report.extras.insert(
                "absorption".into(),
                serde_json::json!({
                    "probe_accuracy": r.probe_accuracy,
                    "words_scored": r.per_letter.iter().map(|l| l.words_scored).sum::<usize>(),
                    "words_absorbed": r.per_letter.iter().map(|l| l.words_absorbed).sum::<usize>(),
                    "skipped_letters": r.skipped,
                    "per_letter": r.per_letter,
                }),
            );
        }
        insert(
            &mut report,
            "absorption",
            r.and_then(|r| {
                let subs: Vec<f64> = r.per_letter.iter().filter(|l| l.words_scored > 0).map(|l| l.mean).collect();
                if subs.is_empty() {
                    Err("no letter had a correctly probed word".into())
                } else {
                    Ok(MetricValue::from_sub_runs(subs))
                }
            }),
        );
    }

    if metrics.has("sparse_probing") {
        log::info!("{label} L{layer}: sparse probing");
        let splice = Splice::new(model, coder)?;
        let concepts: Vec<ConceptData> = ctx
            .tasks
            .concepts
            .iter()
            .map(|s| ConceptData::from_set(s, &pooled_features(&splice, &s.texts)?))
            .collect::<ffkv_core::Result<_>>()?;
        let mut per_k = BTreeMap::new();
        let mut headline = None;
        for (i, &k) in m.probing_k.iter().enumerate() {
            let r = soften(sparse_probing_eval(&concepts, k, &probe))?;
            per_k.insert(
                k.to_string(),
                match &r {
                    Ok(r) => serde_json::json!({
                        "accuracy": r.accuracy,
                        "per_concept": r.per_concept.iter().map(|o| o.accuracy).collect::<Vec<_>>(),
                    }),
                    Err(note) => serde_json::json!({ "note": note }),
                },
            );
            if i == 0 {
                headline = Some(r.map(|r| MetricValue::from_sub_runs(r.per_concept.iter().map(|o| o.accuracy).collect())));
            }
        }
        report.extras.insert("sparse_probing_k".into(), serde_json::to_value(per_k)?);
        insert(&mut report, "sparse_probing", headline.expect("nonempty K list"));
    }

    let need_history = metrics.has("autointerp");
    if need_history {
        log::info!("{label} L{layer}: auto-interp");
        let history = harvest(model, coder, ctx.corpus, m.autointerp_tokens)?;
        let alive: Vec<usize> = (0..history.d_coder())
            .filter(|&f| history.activations.column(f).iter().any(|&v| v > 0.0))
            .collect();
        let mut rng = RngStream::new(cfg.derive(&format!("features/{label}/{layer}")), 0);
        let mut picked: Vec<usize> = rng
            .sample_indices(alive.len(), m.autointerp_features.min(alive.len()))
            .into_iter()
            .map(|i| alive[i])
            .collect();
        picked.sort_unstable();
        dossiers = picked
            .iter()
            .map(|&f| history.top_contexts(f, m.dossier_size, m.dossier_window, &ctx.model.tokenizer))
            .collect::<ffkv_core::Result<_>>()?;
        let r = soften(autointerp_eval(&dossiers, &history, &ctx.model.tokenizer, ctx.client, &cfg.autointerp()))?;
        let v = match r {
            Ok(r) => {
                report.extras.insert(
                    "autointerp".into(),
                    serde_json::json!({
                        "features": picked,
                        "scored": r.per_feature.len(),
                        "skipped": r.skipped,
                        "failures": r.failures.len(),
                        "per_feature": r.per_feature,
                    }),
                );
                if r.per_feature.is_empty() {
                    Err(format!(
                        "no feature could be scored ({} skipped, {} failed)",
                        r.skipped.len(),
                        r.failures.len()
                    ))
                } else {
                    let v = MetricValue::from_sub_runs(r.per_feature.iter().map(|f| f.score).collect());
                    Ok(if r.failures.is_empty() {
                        v
                    } else {
                        v.with_note(format!("{} features failed in the explainer", r.failures.len()))
                    })
                }
            }
            Err(e) => Err(e),
        };
        insert(&mut report, "autointerp", v);
    }

    if metrics.has("ravel") {
        log::info!("{label} L{layer}: RAVEL");
        let r = soften(ravel_eval(
            model,
            coder,
            &ctx.tasks.world,
            RavelIntervention::FeaturePatch { k: m.ravel_k },
            &cfg.ravel(),
        ))?;
        match r {
            Ok(r) => {
                let (iso, cau) = per_attribute(&r.log, ctx.tasks.world.n_attributes());
                report.extras.insert(
                    "ravel".into(),
                    serde_json::json!({
                        "k": m.ravel_k,
                        "recall": r.recall,
                        "isolation": r.isolation,
                        "causality": r.causality,
                    }),
                );
                report.insert("ravel_isolation", MetricValue::from_sub_runs(iso));
                report.insert("ravel_causality", MetricValue::from_sub_runs(cau));
            }
            Err(note) => {
                report.insert("ravel_isolation", MetricValue::undefined(note.clone()));
                report.insert("ravel_causality", MetricValue::undefined(note));
            }
        }
    }

    if metrics.has("scr") || metrics.has("tpp") {
        let mut grid = m.scr_grid.clone();
        if !grid.contains(&m.scr_k) {
            grid.push(m.scr_k);
        }
        if metrics.has("scr") {
            log::info!("{label} L{layer}: SCR");
            let mut subs = Vec::new();
            let mut notes = Vec::new();
            let mut series = Vec::new();
            for set in &ctx.tasks.spurious {
                let target = SplicedTexts::new(Splice::new(model, coder)?, set.texts.clone(), SpliceMode::Reconstruct)?;
                match soften(scr_eval_grid(&target, set, &grid, &probe))? {
                    Ok(rs) => {
                        let head = rs.iter().find(|r| r.k == m.scr_k).expect("headline K is in the grid");
                        match head.score {
                            Some(s) => subs.push(s),
                            None => notes.push(format!("{}: oracle probe does not beat the base probe", set.name)),
                        }
                        series.push(serde_json::json!({
                            "dataset": set.name,
                            "a_base": head.a_base,
                            "a_oracle": head.a_oracle,
                            "grid": rs.iter().map(|r| serde_json::json!({"k": r.k, "a_abl": r.a_abl, "score": r.score})).collect::<Vec<_>>(),
                        }));
                    }
                    Err(note) => notes.push(format!("{}: {note}", set.name)),
                }
            }
            report.extras.insert("scr".into(), serde_json::json!({ "k": m.scr_k, "datasets": series }));
            let v = if subs.is_empty() {
                Err(if notes.is_empty() { "no SCR dataset".to_string() } else { notes.join("; ") })
            } else {
                let v = MetricValue::from_sub_runs(subs);
                Ok(if notes.is_empty() { v } else { v.with_note(notes.join("; ")) })
            };
            insert(&mut report, "scr", v);
        }
        if metrics.has("tpp") {
            log::info!("{label} L{layer}: TPP");
            let set = &ctx.tasks.multiclass;
            let target = SplicedTexts::new(Splice::new(model, coder)?, set.texts.clone(), SpliceMode::Reconstruct)?;
            let v = match soften(tpp_eval(&target, set, m.tpp_k, &probe))? {
                Ok(r) => serde_json::to_value(&r)?,
                Err(note) => serde_json::json!({ "note": note }),
            };
            report.extras.insert("tpp".into(), v);
        }
    }

    debug_assert!(report.metrics.keys().all(|k| METRIC_KEYS.contains(&k.as_str())));
    Ok(EvalOutput { report, dossiers })
}
