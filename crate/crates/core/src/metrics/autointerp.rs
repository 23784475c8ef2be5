//! Auto-interpretation: an explainer describes a feature from its top
//! contexts, then a judge labels a 14-text set holding exactly 2 held-out
//! activating texts. The per-feature score is label accuracy.
//!
//! Clients implement [`ExplainerClient`]. The mocks here are pure; the HTTP
//! client reads its endpoint from the environment:
//!
//! | variable | meaning |
//! |---|---|
//! | `FFKV_EXPLAINER_URL` | endpoint receiving `POST {prompt, max_tokens[, model]}` |
//! | `FFKV_EXPLAINER_MODEL` | optional model name forwarded in the body |
//! | `FFKV_EXPLAINER_KEY` | optional bearer token |
//! | `FFKV_EXPLAINER_MAX_INFLIGHT` | concurrent request limit (default 4) |

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harvest::{ActivationHistory, FeatureDossier};
use crate::lm::Tokenizer;
use crate::numerics::RngStream;

/// One activating context shown to the explainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedExample {
    pub tokens: Vec<String>,
    pub activations: Vec<f32>,
}

pub trait ExplainerClient: Sync {
    fn explain(&self, examples: &[AnnotatedExample]) -> Result<String>;
    /// One prediction per text: does the explanation say it activates?
    fn judge(&self, explanation: &str, texts: &[String]) -> Result<Vec<bool>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoInterpConfig {
    pub n_positive: usize,
    pub n_negative: usize,
    /// Held-out positives are drawn from this many next-best texts.
    pub positive_pool: usize,
    /// Texts whose peak is at most this fraction of the feature maximum
    /// count as not activating.
    pub negative_fraction: f32,
    /// Tokens kept on each side of a text's peak.
    pub window: usize,
    pub seed: u64,
}

impl Default for AutoInterpConfig {
    fn default() -> Self {
        Self {
            n_positive: 2,
            n_negative: 12,
            positive_pool: 20,
            negative_fraction: 0.1,
            window: 8,
            seed: 0,
        }
    }
}

/// The labeled texts the judge sees for one feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringSet {
    pub feature: usize,
    pub texts: Vec<String>,
    pub labels: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureInterp {
    pub feature: usize,
    pub explanation: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoInterpResult {
    pub mean: Option<f64>,
    pub per_feature: Vec<FeatureInterp>,
    /// Features lacking enough activating or non-activating texts.
    pub skipped: Vec<usize>,
    /// Features whose client call failed, with the error.
    pub failures: Vec<(usize, String)>,
}

fn text_peaks(history: &ActivationHistory, feature: usize) -> Vec<(f32, usize)> {
    // (peak, row of the peak) per text
    let mut out = vec![(f32::NEG_INFINITY, 0usize); history.n_texts()];
    for r in 0..history.rows() {
        let (t, _) = history.index.get(r).expect("row in range");
        let v = history.activations.get(r, feature);
        if v > out[t].0 {
            out[t] = (v, r);
        }
    }
    out
}

fn window_text(history: &ActivationHistory, tokenizer: &Tokenizer, row: usize, window: usize) -> String {
    let (t, _) = history.index.get(row).expect("row in range");
    let rows = history.index.text_rows(t);
    let lo = row.saturating_sub(window).max(rows.start);
    let hi = (row + window + 1).min(rows.end);
    (lo..hi)
        .map(|r| tokenizer.display_token(history.token_ids[r]))
        .collect::<Vec<_>>()
        .join(" ")
}

/// The 14-text scoring set of every dossier feature, or the feature id when
/// the history cannot supply enough texts.
pub fn build_scoring_sets(
    dossiers: &[FeatureDossier],
    history: &ActivationHistory,
    tokenizer: &Tokenizer,
    cfg: &AutoInterpConfig,
) -> Result<Vec<std::result::Result<ScoringSet, usize>>> {
    let root = RngStream::new(cfg.seed, 0xa171);
    dossiers
        .iter()
        .map(|d| {
            let f = d.feature;
            if f >= history.d_coder() {
                return Err(Error::OutOfRange {
                    index: f,
                    len: history.d_coder(),
                });
            }
            let peaks = text_peaks(history, f);
            let max = peaks.iter().map(|p| p.0).fold(f32::NEG_INFINITY, f32::max);
            if max <= 0.0 {
                return Ok(Err(f));
            }
            let shown: BTreeSet<usize> = d.contexts.iter().map(|c| c.text_id).collect();
            let mut ranked: Vec<usize> = (0..peaks.len()).filter(|&t| peaks[t].0 > 0.0).collect();
            ranked.sort_by(|&a, &b| peaks[b].0.total_cmp(&peaks[a].0).then(a.cmp(&b)));
            let mut pool: Vec<usize> = ranked
                .iter()
                .copied()
                .filter(|t| !shown.contains(t))
                .take(cfg.positive_pool)
                .collect();
            if pool.len() < cfg.n_positive {
                pool = ranked.iter().copied().take(cfg.positive_pool).collect();
            }
            let negatives: Vec<usize> = (0..peaks.len())
                .filter(|&t| peaks[t].0 <= cfg.negative_fraction * max)
                .collect();
            if pool.len() < cfg.n_positive || negatives.len() < cfg.n_negative {
                return Ok(Err(f));
            }
            let mut rng = root.fork(f as u64);
            let pos: Vec<usize> = rng
                .sample_indices(pool.len(), cfg.n_positive)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            let neg: Vec<usize> = rng
                .sample_indices(negatives.len(), cfg.n_negative)
                .into_iter()
                .map(|i| negatives[i])
                .collect();
            let mut items: Vec<(String, bool)> = pos
                .iter()
                .map(|&t| (t, true))
                .chain(neg.iter().map(|&t| (t, false)))
                .map(|(t, l)| (window_text(history, tokenizer, peaks[t].1, cfg.window), l))
                .collect();
            rng.shuffle(&mut items);
            Ok(Ok(ScoringSet {
                feature: f,
                texts: items.iter().map(|i| i.0.clone()).collect(),
                labels: items.iter().map(|i| i.1).collect(),
            }))
        })
        .collect()
}

fn examples_of(d: &FeatureDossier) -> Vec<AnnotatedExample> {
    d.contexts
        .iter()
        .map(|c| AnnotatedExample {
            tokens: c.tokens.clone(),
            activations: c.activations.clone(),
        })
        .collect()
}

/// Explain every dossier feature, judge its scoring set, average accuracy.
pub fn autointerp_eval(
    dossiers: &[FeatureDossier],
    history: &ActivationHistory,
    tokenizer: &Tokenizer,
    client: &dyn ExplainerClient,
    cfg: &AutoInterpConfig,
) -> Result<AutoInterpResult> {
    let sets = build_scoring_sets(dossiers, history, tokenizer, cfg)?;
    let outcomes: Vec<std::result::Result<FeatureInterp, (usize, String)>> = dossiers
        .par_iter()
        .zip(&sets)
        .filter_map(|(d, s)| s.as_ref().ok().map(|s| (d, s)))
        .map(|(d, set)| {
            let run = || -> Result<FeatureInterp> {
                let explanation = client.explain(&examples_of(d))?;
                let preds = client.judge(&explanation, &set.texts)?;
                if preds.len() != set.labels.len() {
                    return Err(Error::Transport(format!(
                        "judge returned {} labels for {} texts",
                        preds.len(),
                        set.texts.len()
                    )));
                }
                let hits = preds.iter().zip(&set.labels).filter(|(p, l)| p == l).count();
                Ok(FeatureInterp {
                    feature: set.feature,
                    explanation,
                    score: hits as f64 / set.labels.len() as f64,
                })
            };
            run().map_err(|e| (set.feature, e.to_string()))
        })
        .collect();
    let mut per_feature = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(f) => per_feature.push(f),
            Err(e) => {
                log::warn!("auto-interp feature {} failed: {}", e.0, e.1);
                failures.push(e)
            }
        }
    }
    let skipped: Vec<usize> = sets.iter().filter_map(|s| s.as_ref().err().copied()).collect();
    let mean = if per_feature.is_empty() {
        None
    } else {
        Some(per_feature.iter().map(|f| f.score).sum::<f64>() / per_feature.len() as f64)
    };
    Ok(AutoInterpResult {
        mean,
        per_feature,
        skipped,
        failures,
    })
}

/// Judge that knows the ground truth of a fixed collection of scoring sets.
pub struct OracleClient {
    truth: BTreeMap<Vec<String>, Vec<bool>>,
}

impl OracleClient {
    pub fn new(sets: &[ScoringSet]) -> Self {
        Self {
            truth: sets.iter().map(|s| (s.texts.clone(), s.labels.clone())).collect(),
        }
    }
}

impl ExplainerClient for OracleClient {
    fn explain(&self, _examples: &[AnnotatedExample]) -> Result<String> {
        Ok("oracle".into())
    }

    fn judge(&self, _explanation: &str, texts: &[String]) -> Result<Vec<bool>> {
        self.truth
            .get(texts)
            .cloned()
            .ok_or_else(|| Error::invalid("oracle judge saw an unknown scoring set"))
    }
}

/// Judge that never predicts activation.
pub struct ConstantNegativeClient;

impl ExplainerClient for ConstantNegativeClient {
    fn explain(&self, _examples: &[AnnotatedExample]) -> Result<String> {
        Ok("nothing".into())
    }

    fn judge(&self, _explanation: &str, texts: &[String]) -> Result<Vec<bool>> {
        Ok(vec![false; texts.len()])
    }
}

/// Explains with the most frequent peak token; judges by token membership.
pub struct KeywordClient;

impl ExplainerClient for KeywordClient {
    fn explain(&self, examples: &[AnnotatedExample]) -> Result<String> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for ex in examples {
            if let Some(i) = (0..ex.activations.len())
                .max_by(|&a, &b| ex.activations[a].total_cmp(&ex.activations[b]).then(b.cmp(&a)))
            {
                *counts.entry(ex.tokens[i].as_str()).or_default() += 1;
            }
        }
        // BTreeMap order makes ties resolve to the smallest token
        let best = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)));
        Ok(best.map(|(t, _)| t.to_string()).unwrap_or_default())
    }

    fn judge(&self, explanation: &str, texts: &[String]) -> Result<Vec<bool>> {
        Ok(texts
            .iter()
            .map(|t| !explanation.is_empty() && t.split_whitespace().any(|w| w == explanation))
            .collect())
    }
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().expect("gate lock");
            while *free == 0 {
                free = self.cv.wait(free).expect("gate lock");
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock().expect("gate lock") += 1;
        self.cv.notify_one();
        out
    }
}

/// HTTP explainer. Requests are idempotent, so failures on transport or
/// 5xx responses are retried with exponential backoff.
pub struct HttpExplainer {
    pub endpoint: String,
    pub model: Option<String>,
    api_key: Option<String>,
    pub max_tokens: usize,
    pub timeout: Duration,
    pub max_retries: usize,
    pub backoff: Duration,
    gate: Gate,
}

#[derive(Serialize)]
struct RequestBody<'a> {
    prompt: &'a str,
    max_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
}

impl HttpExplainer {
    pub fn new(endpoint: impl Into<String>, max_in_flight: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: None,
            api_key: None,
            max_tokens: 256,
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff: Duration::from_millis(250),
            gate: Gate::new(max_in_flight),
        }
    }

    pub fn with_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn from_env() -> Result<Self> {
        let url = std::env::var("FFKV_EXPLAINER_URL")
            .map_err(|_| Error::invalid("FFKV_EXPLAINER_URL is not set"))?;
        let limit = match std::env::var("FFKV_EXPLAINER_MAX_INFLIGHT") {
            Ok(v) => v
                .parse()
                .map_err(|_| Error::invalid(format!("FFKV_EXPLAINER_MAX_INFLIGHT={v:?} is not a count")))?,
            Err(_) => 4,
        };
        let mut c = Self::new(url, limit);
        c.model = std::env::var("FFKV_EXPLAINER_MODEL").ok();
        c.api_key = std::env::var("FFKV_EXPLAINER_KEY").ok();
        Ok(c)
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let body = RequestBody {
            prompt,
            max_tokens: self.max_tokens,
            model: self.model.as_deref(),
        };
        let body = serde_json::to_value(&body)?;
        self.gate.run(|| {
            let mut last = String::new();
            for attempt in 0..=self.max_retries {
                if attempt > 0 {
                    std::thread::sleep(self.backoff * (1u32 << (attempt - 1)));
                }
                let mut req = ureq::post(&self.endpoint).timeout(self.timeout);
                if let Some(k) = &self.api_key {
                    req = req.set("Authorization", &format!("Bearer {k}"));
                }
                match req.send_json(body.clone()) {
                    Ok(resp) => {
                        let v: serde_json::Value = resp
                            .into_json()
                            .map_err(|e| Error::Transport(format!("unreadable response: {e}")))?;
                        return extract_text(&v)
                            .ok_or_else(|| Error::Transport("response carries no text".into()));
                    }
                    Err(ureq::Error::Status(code, _)) if code < 500 => {
                        return Err(Error::Transport(format!("endpoint answered {code}")));
                    }
                    Err(e) => last = e.to_string(),
                }
            }
            Err(Error::Transport(format!(
                "gave up after {} attempts: {last}",
                self.max_retries + 1
            )))
        })
    }
}

fn extract_text(v: &serde_json::Value) -> Option<String> {
    let s = v
        .get("text")
        .or_else(|| v.get("completion"))
        .or_else(|| v.pointer("/choices/0/text"))
        .or_else(|| v.pointer("/choices/0/message/content"))?;
    s.as_str().map(str::to_string)
}

pub fn explain_prompt(examples: &[AnnotatedExample]) -> String {
    let mut p = String::from(
        "Each line below is a text excerpt; tokens where a model feature fires are marked <<token>>.\n\
         Describe in a few words what the feature responds to.\n\n",
    );
    for (i, ex) in examples.iter().enumerate() {
        let max = ex.activations.iter().cloned().fold(0.0f32, f32::max);
        let line: Vec<String> = ex
            .tokens
            .iter()
            .zip(&ex.activations)
            .map(|(t, &a)| if max > 0.0 && a > 0.5 * max { format!("<<{t}>>") } else { t.clone() })
            .collect();
        p.push_str(&format!("{}. {}\n", i + 1, line.join(" ")));
    }
    p
}

pub fn judge_prompt(explanation: &str, texts: &[String]) -> String {
    let mut p = format!(
        "A model feature is described as: {explanation}\n\
         Which of the numbered texts below would activate it? Reply with the numbers only, comma separated, or 'none'.\n\n"
    );
    for (i, t) in texts.iter().enumerate() {
        p.push_str(&format!("{}. {t}\n", i + 1));
    }
    p
}

/// 1-based indices found in a judge reply.
pub fn parse_judgement(reply: &str, n: usize) -> Vec<bool> {
    let mut out = vec![false; n];
    for tok in reply.split(|c: char| !c.is_ascii_digit()) {
        if let Ok(i) = tok.parse::<usize>() {
            if (1..=n).contains(&i) {
                out[i - 1] = true;
            }
        }
    }
    out
}

impl ExplainerClient for HttpExplainer {
    fn explain(&self, examples: &[AnnotatedExample]) -> Result<String> {
        Ok(self.complete(&explain_prompt(examples))?.trim().to_string())
    }

    fn judge(&self, explanation: &str, texts: &[String]) -> Result<Vec<bool>> {
        let reply = self.complete(&judge_prompt(explanation, texts))?;
        Ok(parse_judgement(&reply, texts.len()))
    }
}
