//! Wire types. Everything serialized to a client before a session is
//! revealed lives here and carries no provenance.

use std::fmt;

use ffkv_core::harvest::{DossierContext, FeatureDossier};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Categorize,
    Origin,
    PairAlign,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Superficial,
    Conceptual,
    Uninterpretable,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Superficial, Category::Conceptual, Category::Uninterpretable];

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Superficial => "superficial",
            Category::Conceptual => "conceptual",
            Category::Uninterpretable => "uninterpretable",
        }
    }
}

/// The four origins an annotator may guess.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Ffkv,
    TopkFfkv,
    Sae,
    Transcoder,
}

impl Origin {
    pub const ALL: [Origin; 4] = [Origin::Ffkv, Origin::TopkFfkv, Origin::Sae, Origin::Transcoder];

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.as_str() == s)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Ffkv => "ffkv",
            Origin::TopkFfkv => "topk_ffkv",
            Origin::Sae => "sae",
            Origin::Transcoder => "transcoder",
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Matched,
    Unmatched,
}

impl Verdict {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "matched" => Some(Verdict::Matched),
            "unmatched" => Some(Verdict::Unmatched),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Category(Category),
    Origin(Origin),
    Verdict(Verdict),
}

impl Answer {
    pub fn task(self) -> TaskKind {
        match self {
            Answer::Category(_) => TaskKind::Categorize,
            Answer::Origin(_) => TaskKind::Origin,
            Answer::Verdict(_) => TaskKind::PairAlign,
        }
    }
}

/// Dossiers of one hidden origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DossierSet {
    pub provenance: String,
    pub dossiers: Vec<FeatureDossier>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DossierPair {
    pub left: FeatureDossier,
    pub right: FeatureDossier,
    #[serde(default)]
    pub score: Option<f64>,
}

/// Dossier pairs of one hidden group, e.g. one similarity bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    pub provenance: String,
    pub pairs: Vec<DossierPair>,
}

/// `POST /sessions`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub task: TaskKind,
    pub seed: u64,
    /// Items sampled from every set.
    pub sample_size: usize,
    #[serde(default)]
    pub raw_display: bool,
    #[serde(default)]
    pub sets: Vec<DossierSet>,
    #[serde(default)]
    pub pair_sets: Vec<PairSet>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub task: TaskKind,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardEntry {
    pub opaque_id: String,
    pub position: usize,
    pub annotated: bool,
}

/// `GET /sessions/{id}/cards`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardList {
    pub session_id: String,
    pub task: TaskKind,
    pub total: usize,
    pub annotated: usize,
    pub complete: bool,
    pub cards: Vec<CardEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Display {
    /// Activations divided by the largest magnitude on the card.
    MaxNormalized,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub tokens: Vec<String>,
    pub activations: Vec<f32>,
    pub peak_offset: usize,
}

/// `GET /cards/{opaque}`. Single-feature tasks have one panel, pair tasks two.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCard {
    pub opaque_id: String,
    pub session_id: String,
    pub task: TaskKind,
    pub display: Display,
    pub panels: Vec<Vec<Snippet>>,
    /// Pair tasks: number of texts shown in both panels.
    pub shared_texts: Option<usize>,
}

impl FeatureCard {
    pub(crate) fn panel(contexts: &[DossierContext], display: Display) -> Vec<Snippet> {
        let scale = match display {
            Display::Raw => 1.0,
            Display::MaxNormalized => {
                let m = contexts
                    .iter()
                    .flat_map(|c| c.activations.iter())
                    .fold(0.0f32, |m, v| m.max(v.abs()));
                if m > 0.0 {
                    m
                } else {
                    1.0
                }
            }
        };
        contexts
            .iter()
            .map(|c| Snippet {
                tokens: c.tokens.clone(),
                activations: c.activations.iter().map(|v| v / scale).collect(),
                peak_offset: c.peak_offset,
            })
            .collect()
    }
}

/// `POST /annotations`. Exactly one answer field must be set, matching the
/// session's task.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub session_id: String,
    pub opaque_id: String,
    #[serde(default)]
    pub category: Option<String>,
    #[serde(default)]
    pub origin: Option<String>,
    #[serde(default)]
    pub verdict: Option<String>,
    #[serde(default)]
    pub annotator: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationAck {
    pub accepted: bool,
    /// Same answer as the current one for this card.
    pub duplicate: bool,
    pub annotated: usize,
    pub total: usize,
    pub complete: bool,
}

/// Appended once per accepted submission.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub session_id: String,
    pub opaque_id: String,
    pub answer: Answer,
    pub annotator: String,
    pub timestamp_ms: u64,
}

/// Table-2 shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub origin: String,
    pub superficial: usize,
    pub conceptual: usize,
    pub uninterpretable: usize,
    pub unannotated: usize,
}

/// Table-3 shape: accuracy of each guessed origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginRow {
    pub origin: Origin,
    pub correct: usize,
    pub guessed: usize,
    /// `correct / guessed`; absent when never guessed.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionRow {
    pub truth: String,
    /// Guess counts in [`Origin::ALL`] order.
    pub guesses: Vec<usize>,
    pub unannotated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginStats {
    pub rows: Vec<OriginRow>,
    pub confusion: Vec<ConfusionRow>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRow {
    pub group: String,
    pub matched: usize,
    pub unmatched: usize,
    pub unannotated: usize,
}

/// `GET /sessions/{id}/stats`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub session_id: String,
    pub task: TaskKind,
    pub complete: bool,
    pub annotated: usize,
    pub total: usize,
    pub categories: Option<Vec<CategoryRow>>,
    pub origins: Option<OriginStats>,
    pub pairs: Option<Vec<PairRow>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevealedCard {
    pub opaque_id: String,
    pub provenance: String,
    /// Feature index, or both indices for a pair.
    pub features: Vec<usize>,
    pub score: Option<f64>,
    pub answer: Option<Answer>,
}

/// `GET /sessions/{id}/reveal`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reveal {
    pub session_id: String,
    pub task: TaskKind,
    pub cards: Vec<RevealedCard>,
}
