//! Streaming a corpus through a model and coder into an activation history
//! `A` (tokens × features) with its token index map, plus per-feature
//! dossiers of top-activating contexts.

mod shard;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coders::{FeatureCoder, FeatureCoderHandle};
use crate::error::{Error, Result};
use crate::lm::{HookPoint, Model, Tokenizer};
use crate::numerics::Matrix;

pub use shard::{read_shard, write_shard, ShardHeader, SHARD_ROWS};

/// Activations with magnitude below this are stored as exact zeros.
pub const ZERO_EPS: f32 = 1e-8;

/// Documents already mapped to token ids (without the BOS marker).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedCorpus {
    pub ids: Vec<String>,
    pub tokens: Vec<Vec<u32>>,
}

impl TokenizedCorpus {
    pub fn new<'a>(
        docs: impl IntoIterator<Item = (&'a str, &'a str)>,
        tokenizer: &Tokenizer,
    ) -> Self {
        let (ids, tokens) = docs
            .into_iter()
            .map(|(id, text)| (id.to_string(), tokenizer.encode(text)))
            .unzip();
        Self { ids, tokens }
    }

    pub fn from_tokens(tokens: Vec<Vec<u32>>) -> Self {
        let ids = (0..tokens.len()).map(|i| i.to_string()).collect();
        Self { ids, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.iter().map(Vec::len).sum()
    }
}

/// The map σ from flat row index to (text id, position), both 0-based.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenIndexMap {
    pub entries: Vec<(u32, u32)>,
    /// Source document reference per text id.
    pub doc_refs: Vec<String>,
}

impl TokenIndexMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, row: usize) -> Option<(usize, usize)> {
        self.entries.get(row).map(|&(t, p)| (t as usize, p as usize))
    }

    /// Row range occupied by one text.
    pub fn text_rows(&self, text: usize) -> std::ops::Range<usize> {
        let t = text as u32;
        let start = self.entries.partition_point(|e| e.0 < t);
        let end = self.entries.partition_point(|e| e.0 <= t);
        start..end
    }
}

/// Which rows of a corpus a token budget covers: for each document, the
/// number of its tokens included.
fn budget_plan(corpus: &TokenizedCorpus, limit: usize) -> Vec<usize> {
    let mut left = limit;
    let mut plan = Vec::new();
    for doc in &corpus.tokens {
        if left == 0 {
            break;
        }
        let take = doc.len().min(left);
        plan.push(take);
        left -= take;
    }
    plan
}

/// Run one document (its first `take` tokens) through the model in
/// BOS-prefixed context-sized chunks and return the captured tensors for
/// every hook, BOS rows removed.
fn run_document(
    model: &Model,
    doc: &[u32],
    hooks: &[HookPoint],
) -> Result<Vec<Matrix>> {
    let chunk = model.config.context_length - 1;
    let mut out: Vec<Matrix> = hooks
        .iter()
        .map(|h| Matrix::zeros(0, model.site_width(h.site)))
        .collect();
    for piece in doc.chunks(chunk) {
        let mut seq = Vec::with_capacity(piece.len() + 1);
        seq.push(model.tokenizer.bos());
        seq.extend_from_slice(piece);
        let fwd = model.forward_with_hooks(&seq, hooks, None)?;
        for (o, h) in out.iter_mut().zip(hooks) {
            let m = &fwd.captures[h];
            for r in 1..m.rows() {
                o.push_row(m.row(r))?;
            }
        }
    }
    Ok(out)
}

fn concat_rows(parts: Vec<Matrix>, cols: usize) -> Matrix {
    let rows = parts.iter().map(Matrix::rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend(p.into_vec());
    }
    Matrix::from_vec(rows, cols, data).expect("row widths agree")
}

/// Capture raw hook tensors over the first `limit` tokens of `docs`.
pub fn capture_sites(
    model: &Model,
    hooks: &[HookPoint],
    docs: &[Vec<u32>],
    limit: usize,
) -> Result<Vec<Matrix>> {
    if limit == 0 {
        return Err(Error::invalid("token budget must be positive"));
    }
    for &h in hooks {
        model.validate_hook(h)?;
    }
    let corpus = TokenizedCorpus::from_tokens(docs.to_vec());
    let plan = budget_plan(&corpus, limit);
    if plan.iter().sum::<usize>() == 0 {
        return Err(Error::Empty("corpus"));
    }
    let per_doc: Vec<Vec<Matrix>> = plan
        .par_iter()
        .enumerate()
        .map(|(i, &take)| run_document(model, &docs[i][..take], hooks))
        .collect::<Result<_>>()?;
    let mut columns: Vec<Vec<Matrix>> = hooks.iter().map(|_| Vec::new()).collect();
    for doc in per_doc {
        for (c, m) in columns.iter_mut().zip(doc) {
            c.push(m);
        }
    }
    Ok(columns
        .into_iter()
        .zip(hooks)
        .map(|(parts, h)| concat_rows(parts, model.site_width(h.site)))
        .collect())
}

fn denoise(a: &mut Matrix) {
    a.data_mut().iter_mut().for_each(|v| {
        if v.abs() < ZERO_EPS {
            *v = 0.0;
        }
    });
}

/// Encode a batch of documents; calls `sink` once per document in corpus order.
fn harvest_stream(
    model: &Model,
    coder: &FeatureCoder,
    corpus: &TokenizedCorpus,
    limit: usize,
    mut sink: impl FnMut(usize, Matrix) -> Result<()>,
) -> Result<()> {
    if limit == 0 {
        return Err(Error::invalid("token budget must be positive"));
    }
    let hook = HookPoint::new(coder.layer(), coder.input_site());
    model.validate_hook(hook)?;
    if model.site_width(hook.site) != coder.d_in() {
        return Err(Error::shape(format!(
            "coder expects width {}, {hook} has {}",
            coder.d_in(),
            model.site_width(hook.site)
        )));
    }
    let plan = budget_plan(corpus, limit);
    // bounded batches keep memory flat over long corpora
    const BATCH: usize = 64;
    for start in (0..plan.len()).step_by(BATCH) {
        let end = (start + BATCH).min(plan.len());
        let encoded: Vec<Matrix> = (start..end)
            .into_par_iter()
            .map(|i| {
                let mut caps = run_document(model, &corpus.tokens[i][..plan[i]], &[hook])?;
                let mut a = coder.encode(&caps.pop().expect("one hook"))?;
                denoise(&mut a);
                Ok(a)
            })
            .collect::<Result<_>>()?;
        for (off, a) in encoded.into_iter().enumerate() {
            sink(start + off, a)?;
        }
    }
    Ok(())
}

/// The activation history `A` of one coder over a corpus slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationHistory {
    pub coder: FeatureCoderHandle,
    pub activations: Matrix,
    pub index: TokenIndexMap,
    /// Token id at every row.
    pub token_ids: Vec<u32>,
    pub corpus_fingerprint: String,
}

pub fn harvest(
    model: &Model,
    coder: &FeatureCoder,
    corpus: &TokenizedCorpus,
    limit: usize,
) -> Result<ActivationHistory> {
    let mut activations = Matrix::zeros(0, coder.d_coder());
    let mut parts = Vec::new();
    let mut index = TokenIndexMap {
        entries: Vec::new(),
        doc_refs: Vec::new(),
    };
    let mut token_ids = Vec::new();
    harvest_stream(model, coder, corpus, limit, |doc, a| {
        index.doc_refs.push(corpus.ids[doc].clone());
        for pos in 0..a.rows() {
            index.entries.push((doc as u32, pos as u32));
            token_ids.push(corpus.tokens[doc][pos]);
        }
        parts.push(a);
        Ok(())
    })?;
    if !parts.is_empty() {
        activations = concat_rows(parts, coder.d_coder());
    }
    if activations.rows() == 0 {
        return Err(Error::Empty("corpus"));
    }
    Ok(ActivationHistory {
        coder: coder.handle(),
        activations,
        index,
        token_ids,
        corpus_fingerprint: corpus_fingerprint(corpus),
    })
}

/// Per-feature maximum activation over the first `limit` tokens without
/// materializing the full history.
pub fn column_maxima(
    model: &Model,
    coder: &FeatureCoder,
    corpus: &TokenizedCorpus,
    limit: usize,
) -> Result<Vec<f32>> {
    let mut max = vec![f32::NEG_INFINITY; coder.d_coder()];
    let mut seen = 0usize;
    harvest_stream(model, coder, corpus, limit, |_, a| {
        seen += a.rows();
        for r in 0..a.rows() {
            for (m, &v) in max.iter_mut().zip(a.row(r)) {
                if v > *m {
                    *m = v;
                }
            }
        }
        Ok(())
    })?;
    if seen == 0 {
        return Err(Error::Empty("corpus"));
    }
    Ok(max)
}

/// Stable content hash of a tokenized corpus.
pub fn corpus_fingerprint(corpus: &TokenizedCorpus) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (id, toks) in corpus.ids.iter().zip(&corpus.tokens) {
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
        h.update((toks.len() as u64).to_le_bytes());
        for t in toks {
            h.update(t.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct HistoryManifest {
    version: u32,
    coder: FeatureCoderHandle,
    rows: usize,
    d_coder: usize,
    shards: Vec<String>,
    index: TokenIndexMap,
    token_ids: Vec<u32>,
    corpus_fingerprint: String,
}

const MANIFEST_VERSION: u32 = 1;

impl ActivationHistory {
    pub fn rows(&self) -> usize {
        self.activations.rows()
    }

    pub fn d_coder(&self) -> usize {
        self.activations.cols()
    }

    pub fn n_texts(&self) -> usize {
        self.index.doc_refs.len()
    }

    fn check_feature(&self, p: usize) -> Result<()> {
        if p >= self.d_coder() {
            return Err(Error::OutOfRange {
                index: p,
                len: self.d_coder(),
            });
        }
        Ok(())
    }

    /// Texts containing at least one token where feature `p` is positive.
    pub fn text_subset(&self, p: usize) -> Result<BTreeSet<usize>> {
        self.check_feature(p)?;
        let mut out = BTreeSet::new();
        for (r, &(t, _)) in self.index.entries.iter().enumerate() {
            if self.activations.get(r, p) > 0.0 {
                out.insert(t as usize);
            }
        }
        Ok(out)
    }

    /// Write the history as fixed-size shards plus a manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut shards = Vec::new();
        for (i, start) in (0..self.rows()).step_by(SHARD_ROWS).enumerate() {
            let end = (start + SHARD_ROWS).min(self.rows());
            let name = format!("shard-{i:05}.bin");
            let header = ShardHeader {
                coder: self.coder.clone(),
                d_coder: self.d_coder(),
                row_start: start,
                row_end: end,
            };
            write_shard(&dir.join(&name), &header, &self.activations.slice_rows(start, end))?;
            shards.push(name);
        }
        let manifest = HistoryManifest {
            version: MANIFEST_VERSION,
            coder: self.coder.clone(),
            rows: self.rows(),
            d_coder: self.d_coder(),
            shards,
            index: self.index.clone(),
            token_ids: self.token_ids.clone(),
            corpus_fingerprint: self.corpus_fingerprint.clone(),
        };
        std::fs::write(dir.join("history.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("history.json");
        let manifest: HistoryManifest = serde_json::from_slice(&std::fs::read(&path)?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: manifest.version,
                expected: MANIFEST_VERSION,
            });
        }
        let mut data = Vec::with_capacity(manifest.rows * manifest.d_coder);
        let mut next = 0;
        for name in &manifest.shards {
            let (header, block) = read_shard(&dir.join(name))?;
            if header.row_start != next || header.d_coder != manifest.d_coder {
                return Err(Error::Corrupt {
                    path: dir.join(name),
                    reason: "shard out of sequence".into(),
                });
            }
            next = header.row_end;
            data.extend(block.into_vec());
        }
        if next != manifest.rows || manifest.index.len() != manifest.rows {
            return Err(Error::Corrupt {
                path,
                reason: "row count does not match shards".into(),
            });
        }
        Ok(Self {
            coder: manifest.coder,
            activations: Matrix::from_vec(manifest.rows, manifest.d_coder, data)?,
            index: manifest.index,
            token_ids: manifest.token_ids,
            corpus_fingerprint: manifest.corpus_fingerprint,
        })
    }

    /// Up to `m` texts with the highest peak activation of feature `p`, each
    /// shown as a window of ±`window` tokens around its peak.
    pub fn top_contexts(
        &self,
        p: usize,
        m: usize,
        window: usize,
        tokenizer: &Tokenizer,
    ) -> Result<FeatureDossier> {
        self.check_feature(p)?;
        if m == 0 {
            return Err(Error::invalid("dossier size must be at least 1"));
        }
        let col = self.activations.column(p);
        let mut peaks: Vec<(f32, usize, usize)> = Vec::new(); // (peak, text, row)
        for text in 0..self.n_texts() {
            let rows = self.index.text_rows(text);
            let mut best: Option<(f32, usize)> = None;
            for r in rows {
                if col[r] > 0.0 && best.is_none_or(|(b, _)| col[r] > b) {
                    best = Some((col[r], r));
                }
            }
            if let Some((v, r)) = best {
                peaks.push((v, text, r));
            }
        }
        peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        peaks.truncate(m);

        let contexts = peaks
            .into_iter()
            .map(|(peak, text, row)| {
                let rows = self.index.text_rows(text);
                let lo = row.saturating_sub(window).max(rows.start);
                let hi = (row + window + 1).min(rows.end);
                let token_ids = self.token_ids[lo..hi].to_vec();
                DossierContext {
                    text_id: text,
                    doc_ref: self.index.doc_refs[text].clone(),
                    tokens: token_ids.iter().map(|&t| tokenizer.display_token(t)).collect(),
                    token_ids,
                    activations: col[lo..hi].to_vec(),
                    peak_offset: row - lo,
                    peak_position: self.index.entries[row].1 as usize,
                    peak,
                }
            })
            .collect();

        let nonzero: Vec<f32> = col.iter().copied().filter(|v| *v != 0.0).collect();
        let stats = FeatureStats {
            max: col.iter().copied().fold(f32::NEG_INFINITY, f32::max),
            mean_nonzero: if nonzero.is_empty() {
                0.0
            } else {
                (nonzero.iter().map(|&v| v as f64).sum::<f64>() / nonzero.len() as f64) as f32
            },
            nonzero_count: nonzero.len(),
        };
        Ok(FeatureDossier {
            feature: p,
            contexts,
            stats,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DossierContext {
    pub text_id: usize,
    pub doc_ref: String,
    pub tokens: Vec<String>,
    pub token_ids: Vec<u32>,
    pub activations: Vec<f32>,
    /// Index of the peak inside the window.
    pub peak_offset: usize,
    /// Position of the peak inside its text.
    pub peak_position: usize,
    pub peak: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub max: f32,
    pub mean_nonzero: f32,
    pub nonzero_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDossier {
    pub feature: usize,
    pub contexts: Vec<DossierContext>,
    pub stats: FeatureStats,
}

/// One JSON object per line.
pub fn write_dossiers_jsonl(path: &Path, dossiers: &[FeatureDossier]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in dossiers {
        serde_json::to_writer(&mut f, d)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_dossiers_jsonl(path: &Path) -> Result<Vec<FeatureDossier>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
