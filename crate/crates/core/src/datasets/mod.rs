//! Corpus ingestion and deterministic synthetic task generators.

mod synthetic;

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use synthetic::{
    desk_corpus, gen_binary_concepts, gen_entity_world, gen_first_letter, gen_multiclass,
    gen_spurious_pairs, ConceptFamily, DeskCorpusConfig, EntityAttributeWorld, FirstLetterTask,
    Lexicon, ATTRIBUTE_NAMES,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// One document per non-empty line.
    Plain,
    /// One `{"id": string, "text": string}` object per line.
    Jsonl,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" | "txt" => Ok(CorpusFormat::Plain),
            "jsonl" => Ok(CorpusFormat::Jsonl),
            _ => Err(Error::invalid(format!("unknown corpus format {s:?}"))),
        }
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: Option<String>,
    text: String,
}

/// Read a corpus in file order. With `limit`, reading stops after the
/// document that contains the `limit`-th whitespace token.
pub fn load_corpus(path: &Path, format: CorpusFormat, limit: Option<usize>) -> Result<Vec<Document>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut docs = Vec::new();
    let mut tokens = 0usize;
    for (i, line) in file.split(b'\n').enumerate() {
        if limit.is_some_and(|l| tokens >= l) {
            break;
        }
        let bytes = line?;
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let line = String::from_utf8(bytes).map_err(|e| parse_err(format!("invalid UTF-8: {e}")))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let doc = match format {
            CorpusFormat::Plain => Document {
                id: format!("line-{}", i + 1),
                text: line.to_string(),
            },
            CorpusFormat::Jsonl => {
                let rec: JsonlRecord =
                    serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
                Document {
                    id: rec.id.unwrap_or_else(|| format!("line-{}", i + 1)),
                    text: rec.text,
                }
            }
        };
        tokens += doc.text.split_whitespace().count();
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_jsonl(path: &Path, docs: &[Document]) -> Result<()> {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Content hash over ids and texts, independent of platform.
pub fn fingerprint_documents(docs: &[Document]) -> String {
    let mut h = Sha256::new();
    for d in docs {
        for part in [&d.id, &d.text] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// Labeled texts with a train/eval split and an optional second label
/// channel carrying a spurious concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledTextSet {
    pub name: String,
    pub texts: Vec<String>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub splits: Vec<Split>,
    pub spurious: Option<Vec<usize>>,
    /// Fraction of train rows where the two channels agree.
    pub bias: Option<f64>,
}

impl LabeledTextSet {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn fingerprint(&self) -> String {
        let docs: Vec<Document> = self
            .texts
            .iter()
            .zip(&self.labels)
            .map(|(t, l)| Document {
                id: l.to_string(),
                text: t.clone(),
            })
            .collect();
        fingerprint_documents(&docs)
    }
}

/// Provenance record written beside generated datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub generator: String,
    pub params: serde_json::Value,
    pub seed: u64,
    pub fingerprint: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "").unwrap();
        assert!(load_corpus(&p, CorpusFormat::Plain, None).unwrap().is_empty());
    }

    #[test]
    fn jsonl_keeps_file_order_and_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"a\",\"text\":\"one\"}\n{\"id\":\"b\",\"text\":\"two\"}\n{\"id\":\"c\",\"text\":\"three\"}\n",
        )
        .unwrap();
        let docs = load_corpus(&p, CorpusFormat::Jsonl, None).unwrap();
        let ids: Vec<&str> = docs.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);

        std::fs::write(&p, "{\"id\":\"a\",\"text\":\"one\"}\n{oops\n").unwrap();
        match load_corpus(&p, CorpusFormat::Jsonl, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_utf8_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, b"fine\n\xff\xfe\n").unwrap();
        assert!(matches!(
            load_corpus(&p, CorpusFormat::Plain, None),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn limit_stops_at_document_containing_the_token() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        // 4 + 4 + 4 + 4 tokens; token 10 is in the third line
        std::fs::write(&p, "a b c d\ne f g h\ni j k l\nm n o p\n").unwrap();
        let docs = load_corpus(&p, CorpusFormat::Plain, Some(10)).unwrap();
        assert_eq!(docs.len(), 3);
        let docs = load_corpus(&p, CorpusFormat::Plain, Some(8)).unwrap();
        assert_eq!(docs.len(), 2);
    }

    #[test]
    fn fingerprint_is_content_sensitive() {
        let a = vec![Document {
            id: "1".into(),
            text: "x y".into(),
        }];
        let mut b = a.clone();
        assert_eq!(fingerprint_documents(&a), fingerprint_documents(&b));
        b[0].text.push('z');
        assert_ne!(fingerprint_documents(&a), fingerprint_documents(&b));
    }
}
