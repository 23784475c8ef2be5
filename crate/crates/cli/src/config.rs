//! Workbench configuration. A TOML file; every field has a desk-scale
//! default, so an empty file is a valid config. All stage seeds derive from
//! the single global `seed`.

use std::path::{Path, PathBuf};

use ffkv_core::coders::{SparseActivationKind, SparseCoderHyper, TopKConfig};
use ffkv_core::datasets::{CorpusFormat, DeskCorpusConfig};
use ffkv_core::lm::{ActivationKind, ModelConfig, TrainConfig};
use ffkv_core::metrics::{AbsorptionConfig, AutoInterpConfig, RavelConfig, SCR_K_GRID};
use ffkv_core::numerics::ProbeConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// The seven coders of a full pipeline, in table order.
pub const PIPELINE_CODERS: [&str; 7] = [
    "ffkv",
    "topk_ffkv",
    "norm_ffkv",
    "topk_norm_ffkv",
    "sae",
    "transcoder",
    "random_ffkv",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkbenchConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Content-addressed stage cache; defaults to `<output_dir>/store`.
    pub store_dir: Option<PathBuf>,
    /// Layers to evaluate; empty means all.
    pub layers: Vec<usize>,
    /// Layer of the headline table; defaults to `n_layers / 2`.
    pub summary_layer: Option<usize>,
    /// Coder labels to evaluate, from [`PIPELINE_CODERS`].
    pub coders: Vec<String>,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub topk: TopKSection,
    pub sae: SparseSection,
    pub transcoder: SparseSection,
    pub metrics: MetricSection,
    pub alignment: AlignmentSection,
    pub explainer: ExplainerSection,
}

impl Default for WorkbenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            store_dir: None,
            layers: Vec::new(),
            summary_layer: None,
            coders: PIPELINE_CODERS.iter().map(|s| s.to_string()).collect(),
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            topk: TopKSection::default(),
            sae: SparseSection::default(),
            transcoder: SparseSection::default(),
            metrics: MetricSection::default(),
            alignment: AlignmentSection::default(),
            explainer: ExplainerSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// External corpus replacing the synthetic one. The synthetic tasks
    /// still draw on the desk lexicon, so most of their words will be
    /// unknown to a tokenizer built from another corpus.
    pub path: Option<PathBuf>,
    pub format: CorpusFormat,
    pub topic_docs: usize,
    pub n_entities: usize,
    pub n_attributes: usize,
    pub fact_repeats: usize,
    pub spelling_repeats: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let d = DeskCorpusConfig::default();
        Self {
            path: None,
            format: CorpusFormat::Jsonl,
            topic_docs: d.topic_docs,
            n_entities: d.n_entities,
            n_attributes: d.n_attributes,
            fact_repeats: d.fact_repeats,
            spelling_repeats: d.spelling_repeats,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub context_length: usize,
    pub activation: ActivationKind,
    pub post_ff_norm: bool,
    pub key_bias: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(2);
        Self {
            n_layers: d.n_layers,
            d_model: d.d_model,
            d_ff: d.d_ff,
            n_heads: d.n_heads,
            context_length: d.context_length,
            activation: d.activation,
            post_ff_norm: d.post_ff_norm,
            key_bias: d.key_bias,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            warmup_steps: d.warmup_steps,
            grad_clip: d.grad_clip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopKSection {
    pub k: usize,
    pub signed: bool,
    pub norm_before_topk: bool,
}

impl Default for TopKSection {
    fn default() -> Self {
        let d = TopKConfig::default();
        Self {
            k: d.k,
            signed: d.signed,
            norm_before_topk: d.norm_before_topk,
        }
    }
}

impl TopKSection {
    pub fn to_core(&self) -> TopKConfig {
        TopKConfig {
            k: self.k,
            signed: self.signed,
            norm_before_topk: self.norm_before_topk,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparseSection {
    pub width: usize,
    pub activation: SparseActivationKind,
    pub topk_k: usize,
    pub l1: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub resample_dead: bool,
    pub jump_bandwidth: f64,
    /// Training rows harvested from the head of the corpus.
    pub train_tokens: usize,
}

impl Default for SparseSection {
    fn default() -> Self {
        let d = SparseCoderHyper::default();
        Self {
            width: d.width,
            activation: d.activation,
            topk_k: d.topk_k,
            l1: d.l1,
            epochs: 8,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            resample_dead: d.resample_dead,
            jump_bandwidth: d.jump_bandwidth,
            train_tokens: 60_000,
        }
    }
}

impl SparseSection {
    pub fn to_core(&self, seed: u64) -> SparseCoderHyper {
        SparseCoderHyper {
            width: self.width,
            activation: self.activation,
            topk_k: self.topk_k,
            l1: self.l1,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            resample_dead: self.resample_dead,
            jump_bandwidth: self.jump_bandwidth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSection {
    pub alive_tokens: usize,
    pub ev_tokens: usize,
    /// Probing budgets; the first is the headline.
    pub probing_k: Vec<usize>,
    pub n_concepts: usize,
    pub concept_size: usize,
    pub scr_k: usize,
    pub scr_grid: Vec<usize>,
    pub scr_bias: f64,
    pub scr_train: usize,
    pub scr_eval: usize,
    /// Family pairs `[a0, a1, b0, b1]`, one SCR dataset each.
    pub scr_families: Vec<[usize; 4]>,
    pub tpp_k: usize,
    pub tpp_families: Vec<usize>,
    pub tpp_per_class: usize,
    pub ravel_k: usize,
    pub ravel_samples: usize,
    pub ravel_recall: f64,
    pub autointerp_features: usize,
    pub autointerp_tokens: usize,
    pub autointerp_window: usize,
    pub dossier_size: usize,
    pub dossier_window: usize,
    pub absorption_main: usize,
    pub absorption_max_absorbing: usize,
    pub absorption_cos: f64,
    pub probe_lr: f64,
    pub probe_epochs: usize,
    pub probe_l2: f64,
}

impl Default for MetricSection {
    fn default() -> Self {
        let abs = AbsorptionConfig::default();
        let probe = ProbeConfig::default();
        let ai = AutoInterpConfig::default();
        Self {
            alive_tokens: 200_000,
            ev_tokens: 50_000,
            probing_k: vec![1, 2, 5],
            n_concepts: 6,
            concept_size: 200,
            scr_k: 20,
            scr_grid: SCR_K_GRID.to_vec(),
            scr_bias: 0.95,
            scr_train: 400,
            scr_eval: 200,
            scr_families: vec![[0, 1, 2, 3], [4, 5, 6, 7]],
            tpp_k: 20,
            tpp_families: vec![8, 9, 10, 11],
            tpp_per_class: 60,
            ravel_k: 20,
            ravel_samples: RavelConfig::default().n_samples,
            ravel_recall: RavelConfig::default().recall_threshold,
            autointerp_features: 32,
            autointerp_tokens: 30_000,
            autointerp_window: ai.window,
            dossier_size: 10,
            dossier_window: 16,
            absorption_main: abs.main_features,
            absorption_max_absorbing: abs.max_absorbing,
            absorption_cos: abs.cos_threshold,
            probe_lr: probe.learning_rate,
            probe_epochs: probe.epochs,
            probe_l2: probe.l2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentSection {
    pub low: f64,
    pub high: f64,
    pub bins: usize,
    /// Pairs sampled per similarity bin for the pair-annotation task.
    pub pairs_per_bin: usize,
}

impl Default for AlignmentSection {
    fn default() -> Self {
        Self {
            low: ffkv_core::alignment::DEFAULT_LOW,
            high: ffkv_core::alignment::DEFAULT_HIGH,
            bins: 10,
            pairs_per_bin: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainerKind {
    /// Deterministic keyword explainer and judge.
    Keyword,
    /// External HTTP endpoint configured through environment variables.
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerSection {
    pub kind: ExplainerKind,
    pub max_in_flight: usize,
}

impl Default for ExplainerSection {
    fn default() -> Self {
        Self {
            kind: ExplainerKind::Keyword,
            max_in_flight: 4,
        }
    }
}

/// First eight bytes of `sha256(seed ‖ tag)`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

impl WorkbenchConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// A seconds-scale configuration for smoke runs and tests.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.corpus.topic_docs = 300;
        c.corpus.n_entities = 4;
        c.corpus.n_attributes = 2;
        c.corpus.fact_repeats = 4;
        c.corpus.spelling_repeats = 2;
        c.model.d_model = 16;
        c.model.d_ff = 32;
        c.model.n_heads = 2;
        c.model.context_length = 16;
        c.train.steps = 20;
        c.train.warmup_steps = 2;
        for s in [&mut c.sae, &mut c.transcoder] {
            s.width = 48;
            s.epochs = 1;
            s.train_tokens = 2_000;
        }
        c.topk.k = 4;
        let m = &mut c.metrics;
        m.alive_tokens = 3_000;
        m.ev_tokens = 2_000;
        m.n_concepts = 2;
        m.concept_size = 40;
        m.scr_train = 60;
        m.scr_eval = 40;
        m.scr_families = vec![[0, 1, 2, 3]];
        m.tpp_per_class = 12;
        m.tpp_families = vec![8, 9, 10];
        m.ravel_samples = 8;
        m.autointerp_features = 4;
        m.autointerp_tokens = 2_000;
        m.probe_epochs = 40;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if let Some(l) = self.coders.iter().find(|l| !PIPELINE_CODERS.contains(&l.as_str())) {
            return bad(format!("unknown coder {l:?}; expected one of {PIPELINE_CODERS:?}"));
        }
        if self.coders.is_empty() {
            return bad("no coders selected".into());
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l >= self.model.n_layers) {
            return bad(format!("layer {l} does not exist in a {}-layer model", self.model.n_layers));
        }
        if self.summary_layer.is_some_and(|l| l >= self.model.n_layers) {
            return bad("summary layer is out of range".into());
        }
        if self.metrics.probing_k.is_empty() || self.metrics.probing_k.contains(&0) {
            return bad("probing_k must be a nonempty list of positive budgets".into());
        }
        if self.topk.k == 0 {
            return bad("topk.k must be positive".into());
        }
        if !(self.alignment.low < self.alignment.high) {
            return bad("alignment thresholds must be increasing".into());
        }
        self.model_config(2)?.validate()?;
        Ok(())
    }

    pub fn derive(&self, tag: &str) -> u64 {
        derive_seed(self.seed, tag)
    }

    /// Seed shared by the corpus and every synthetic task, so that task
    /// words come from the lexicon the model was trained on.
    pub fn data_seed(&self) -> u64 {
        self.derive("data")
    }

    pub fn layers(&self) -> Vec<usize> {
        if self.layers.is_empty() {
            (0..self.model.n_layers).collect()
        } else {
            let mut l = self.layers.clone();
            l.sort_unstable();
            l.dedup();
            l
        }
    }

    pub fn summary_layer(&self) -> usize {
        self.summary_layer.unwrap_or(self.model.n_layers / 2)
    }

    pub fn store_dir(&self) -> PathBuf {
        self.store_dir.clone().unwrap_or_else(|| self.output_dir.join("store"))
    }

    pub fn desk_corpus(&self) -> DeskCorpusConfig {
        DeskCorpusConfig {
            seed: self.data_seed(),
            topic_docs: self.corpus.topic_docs,
            n_entities: self.corpus.n_entities,
            n_attributes: self.corpus.n_attributes,
            fact_repeats: self.corpus.fact_repeats,
            spelling_repeats: self.corpus.spelling_repeats,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            d_ff: m.d_ff,
            n_heads: m.n_heads,
            vocab_size,
            context_length: m.context_length,
            activation: m.activation,
            post_ff_norm: m.post_ff_norm,
            key_bias: m.key_bias,
            seed: self.derive("model"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            warmup_steps: t.warmup_steps,
            grad_clip: t.grad_clip,
            seed: self.derive("train"),
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            learning_rate: self.metrics.probe_lr,
            epochs: self.metrics.probe_epochs,
            l2: self.metrics.probe_l2,
            seed: self.derive("probe"),
        }
    }

    pub fn absorption(&self) -> AbsorptionConfig {
        AbsorptionConfig {
            main_features: self.metrics.absorption_main,
            max_absorbing: self.metrics.absorption_max_absorbing,
            cos_threshold: self.metrics.absorption_cos,
            probe: self.probe(),
        }
    }

    pub fn ravel(&self) -> RavelConfig {
        RavelConfig {
            n_samples: self.metrics.ravel_samples,
            recall_threshold: self.metrics.ravel_recall,
            seed: self.derive("ravel"),
        }
    }

    pub fn autointerp(&self) -> AutoInterpConfig {
        AutoInterpConfig {
            window: self.metrics.autointerp_window,
            seed: self.derive("autointerp"),
            ..AutoInterpConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        let c: WorkbenchConfig = toml::from_str("").unwrap();
        assert_eq!(c, WorkbenchConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let c = WorkbenchConfig::smoke();
        let back: WorkbenchConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c: WorkbenchConfig = toml::from_str("seed = 3\n[model]\nd_ff = 512\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.d_ff, 512);
        assert_eq!(c.model.d_model, 64);
        assert_eq!(c.topk.k, 10);
    }

    #[test]
    fn unknown_keys_and_coders_are_rejected() {
        assert!(toml::from_str::<WorkbenchConfig>("sede = 3\n").is_err());
        let c = WorkbenchConfig {
            coders: vec!["pca".into()],
            ..WorkbenchConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn sub_seeds_follow_the_global_seed() {
        let a = WorkbenchConfig::default();
        let b = WorkbenchConfig {
            seed: 1,
            ..WorkbenchConfig::default()
        };
        assert_ne!(a.data_seed(), b.data_seed());
        assert_ne!(a.derive("model"), a.derive("train"));
        assert_eq!(a.derive("model"), WorkbenchConfig::default().derive("model"));
    }

    #[test]
    fn summary_layer_defaults_to_the_middle() {
        let mut c = WorkbenchConfig::default();
        assert_eq!(c.summary_layer(), 1);
        c.model.n_layers = 5;
        assert_eq!(c.summary_layer(), 2);
    }
}
