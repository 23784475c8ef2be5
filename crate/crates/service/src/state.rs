//! Sessions, annotations and stats, independent of transport.

use std::collections::{BTreeMap, HashMap};

use ffkv_core::harvest::FeatureDossier;
use ffkv_core::numerics::RngStream;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, ServiceError};
use crate::types::*;

const SHUFFLE_STREAM: u64 = 0x5bff1e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CardContent {
    Single(FeatureDossier),
    Pair {
        left: FeatureDossier,
        right: FeatureDossier,
        score: Option<f64>,
    },
}

/// A card with its hidden origin. Never serialized to clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenCard {
    pub opaque_id: String,
    pub provenance: String,
    pub content: CardContent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub session_id: String,
    pub task: TaskKind,
    pub seed: u64,
    pub raw_display: bool,
    /// Set names in creation order; stats rows follow it.
    pub groups: Vec<String>,
    /// Cards in presentation order.
    pub cards: Vec<HiddenCard>,
}

/// One line of the append-only log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    SessionCreated { manifest: SessionManifest },
    Annotation { record: AnnotationRecord },
    Revealed { session_id: String },
}

#[derive(Clone, Debug)]
struct Session {
    manifest: SessionManifest,
    /// Latest answer per card position.
    answers: Vec<Option<Answer>>,
    history: usize,
    closed: bool,
}

impl Session {
    fn annotated(&self) -> usize {
        self.answers.iter().filter(|a| a.is_some()).count()
    }

    fn complete(&self) -> bool {
        self.answers.iter().all(Option::is_some)
    }
}

/// In-memory state, rebuilt by replaying log records in order.
#[derive(Clone, Debug, Default)]
pub struct ServiceState {
    sessions: BTreeMap<String, Session>,
    cards: HashMap<String, (String, usize)>,
}

fn short_hash(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(&h.finalize()[..8])
}

/// Opaque card id: a hash of session, seed and presentation index.
pub fn opaque_id(session_id: &str, seed: u64, index: usize) -> String {
    short_hash(&[session_id.as_bytes(), &seed.to_le_bytes(), &(index as u64).to_le_bytes()])
}

fn shared_texts(a: &FeatureDossier, b: &FeatureDossier) -> usize {
    let left: std::collections::BTreeSet<usize> = a.contexts.iter().map(|c| c.text_id).collect();
    b.contexts
        .iter()
        .map(|c| c.text_id)
        .collect::<std::collections::BTreeSet<_>>()
        .intersection(&left)
        .count()
}

impl ServiceState {
    /// Build the manifest for a request without touching state.
    pub fn plan_session(&self, req: &CreateSession) -> Result<SessionManifest> {
        if req.sample_size == 0 {
            return Err(ServiceError::BadRequest("sample_size must be positive".into()));
        }
        let pools: Vec<(String, Vec<CardContent>)> = match req.task {
            TaskKind::Categorize | TaskKind::Origin => {
                if req.sets.is_empty() || !req.pair_sets.is_empty() {
                    return Err(ServiceError::BadRequest(
                        "single-feature tasks take `sets` and no `pair_sets`".into(),
                    ));
                }
                req.sets
                    .iter()
                    .map(|s| {
                        (
                            s.provenance.clone(),
                            s.dossiers.iter().cloned().map(CardContent::Single).collect(),
                        )
                    })
                    .collect()
            }
            TaskKind::PairAlign => {
                if req.pair_sets.is_empty() || !req.sets.is_empty() {
                    return Err(ServiceError::BadRequest("pair tasks take `pair_sets` and no `sets`".into()));
                }
                req.pair_sets
                    .iter()
                    .map(|s| {
                        let cards = s
                            .pairs
                            .iter()
                            .map(|p| CardContent::Pair {
                                left: p.left.clone(),
                                right: p.right.clone(),
                                score: p.score,
                            })
                            .collect();
                        (s.provenance.clone(), cards)
                    })
                    .collect()
            }
        };
        let mut groups = Vec::new();
        for (name, pool) in &pools {
            if groups.contains(name) {
                return Err(ServiceError::BadRequest(format!("pool '{name}' is listed twice")));
            }
            if req.task == TaskKind::Origin && Origin::parse(name).is_none() {
                return Err(ServiceError::BadRequest(format!(
                    "origin sessions need pools named after a guessable origin; got '{name}'"
                )));
            }
            if pool.is_empty() {
                return Err(ServiceError::BadRequest(format!("pool '{name}' is empty")));
            }
            if req.sample_size > pool.len() {
                return Err(ServiceError::BadRequest(format!(
                    "pool '{name}' holds {} items; {} requested",
                    pool.len(),
                    req.sample_size
                )));
            }
            groups.push(name.clone());
        }

        let mut drawn: Vec<(String, CardContent)> = Vec::new();
        for (i, (name, pool)) in pools.into_iter().enumerate() {
            let mut rng = RngStream::new(req.seed, i as u64);
            let mut pool: Vec<Option<CardContent>> = pool.into_iter().map(Some).collect();
            for j in rng.sample_indices(pool.len(), req.sample_size) {
                drawn.push((name.clone(), pool[j].take().expect("indices are distinct")));
            }
        }
        RngStream::new(req.seed, SHUFFLE_STREAM).shuffle(&mut drawn);

        let body = serde_json::to_vec(req)?;
        let seq = (self.sessions.len() as u64).to_le_bytes();
        let session_id = short_hash(&[b"session", &seq, &req.seed.to_le_bytes(), &body]);
        let cards = drawn
            .into_iter()
            .enumerate()
            .map(|(i, (provenance, content))| HiddenCard {
                opaque_id: opaque_id(&session_id, req.seed, i),
                provenance,
                content,
            })
            .collect();
        Ok(SessionManifest {
            session_id,
            task: req.task,
            seed: req.seed,
            raw_display: req.raw_display,
            groups,
            cards,
        })
    }

    /// Check a submission and turn it into a record.
    pub fn plan_annotation(&self, req: &AnnotationRequest, timestamp_ms: u64) -> Result<(AnnotationRecord, bool)> {
        let s = self.session(&req.session_id)?;
        if s.closed {
            return Err(ServiceError::Conflict("session is closed".into()));
        }
        let &(ref sid, pos) = self
            .cards
            .get(&req.opaque_id)
            .ok_or_else(|| ServiceError::NotFound(format!("card {}", req.opaque_id)))?;
        if sid != &req.session_id {
            return Err(ServiceError::NotFound(format!("card {} in this session", req.opaque_id)));
        }
        let given = [&req.category, &req.origin, &req.verdict]
            .iter()
            .filter(|f| f.is_some())
            .count();
        if given != 1 {
            return Err(ServiceError::BadRequest(
                "exactly one of category, origin or verdict must be set".into(),
            ));
        }
        let answer = match (s.manifest.task, &req.category, &req.origin, &req.verdict) {
            (TaskKind::Categorize, Some(c), _, _) => Answer::Category(
                Category::parse(c).ok_or_else(|| ServiceError::BadRequest("invalid category".into()))?,
            ),
            (TaskKind::Origin, _, Some(o), _) => Answer::Origin(
                Origin::parse(o).ok_or_else(|| ServiceError::BadRequest("invalid origin guess".into()))?,
            ),
            (TaskKind::PairAlign, _, _, Some(v)) => Answer::Verdict(
                Verdict::parse(v).ok_or_else(|| ServiceError::BadRequest("invalid verdict".into()))?,
            ),
            (task, ..) => {
                return Err(ServiceError::BadRequest(format!(
                    "answer does not fit a {} session",
                    serde_json::to_value(task)?.as_str().unwrap_or("?")
                )))
            }
        };
        let duplicate = s.answers[pos] == Some(answer);
        Ok((
            AnnotationRecord {
                session_id: req.session_id.clone(),
                opaque_id: req.opaque_id.clone(),
                answer,
                annotator: req.annotator.clone().unwrap_or_default(),
                timestamp_ms,
            },
            duplicate,
        ))
    }

    /// Apply one logged record. Records are trusted: they were validated
    /// before being written.
    pub fn apply(&mut self, rec: &LogRecord) -> Result<()> {
        match rec {
            LogRecord::SessionCreated { manifest } => {
                if self.sessions.contains_key(&manifest.session_id) {
                    return Err(ServiceError::Conflict(format!("session {} exists", manifest.session_id)));
                }
                for (i, c) in manifest.cards.iter().enumerate() {
                    self.cards.insert(c.opaque_id.clone(), (manifest.session_id.clone(), i));
                }
                self.sessions.insert(
                    manifest.session_id.clone(),
                    Session {
                        answers: vec![None; manifest.cards.len()],
                        manifest: manifest.clone(),
                        history: 0,
                        closed: false,
                    },
                );
            }
            LogRecord::Annotation { record } => {
                let &(_, pos) = self
                    .cards
                    .get(&record.opaque_id)
                    .ok_or_else(|| ServiceError::NotFound(format!("card {}", record.opaque_id)))?;
                let s = self.session_mut(&record.session_id)?;
                s.answers[pos] = Some(record.answer);
                s.history += 1;
            }
            LogRecord::Revealed { session_id } => self.session_mut(session_id)?.closed = true,
        }
        Ok(())
    }

    fn session(&self, id: &str) -> Result<&Session> {
        self.sessions
            .get(id)
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    fn session_mut(&mut self, id: &str) -> Result<&mut Session> {
        self.sessions
            .get_mut(id)
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    pub fn created(&self, id: &str) -> Result<SessionCreated> {
        let s = self.session(id)?;
        Ok(SessionCreated {
            session_id: id.to_string(),
            task: s.manifest.task,
            total: s.manifest.cards.len(),
        })
    }

    pub fn ack(&self, id: &str, duplicate: bool) -> Result<AnnotationAck> {
        let s = self.session(id)?;
        Ok(AnnotationAck {
            accepted: true,
            duplicate,
            annotated: s.annotated(),
            total: s.answers.len(),
            complete: s.complete(),
        })
    }

    pub fn is_complete(&self, id: &str) -> Result<bool> {
        Ok(self.session(id)?.complete())
    }

    /// Total annotation submissions, including superseded ones.
    pub fn history_len(&self, id: &str) -> Result<usize> {
        Ok(self.session(id)?.history)
    }

    pub fn card_list(&self, id: &str) -> Result<CardList> {
        let s = self.session(id)?;
        Ok(CardList {
            session_id: id.to_string(),
            task: s.manifest.task,
            total: s.answers.len(),
            annotated: s.annotated(),
            complete: s.complete(),
            cards: s
                .manifest
                .cards
                .iter()
                .zip(&s.answers)
                .enumerate()
                .map(|(i, (c, a))| CardEntry {
                    opaque_id: c.opaque_id.clone(),
                    position: i,
                    annotated: a.is_some(),
                })
                .collect(),
        })
    }

    pub fn card(&self, opaque: &str) -> Result<FeatureCard> {
        let (sid, pos) = self
            .cards
            .get(opaque)
            .ok_or_else(|| ServiceError::NotFound(format!("card {opaque}")))?;
        let s = self.session(sid)?;
        if s.closed {
            return Err(ServiceError::Conflict(
                "session is closed; cards are available through the reveal endpoint".into(),
            ));
        }
        let display = if s.manifest.raw_display {
            Display::Raw
        } else {
            Display::MaxNormalized
        };
        let card = &s.manifest.cards[*pos];
        let (panels, shared) = match &card.content {
            CardContent::Single(d) => (vec![FeatureCard::panel(&d.contexts, display)], None),
            CardContent::Pair { left, right, .. } => (
                vec![
                    FeatureCard::panel(&left.contexts, display),
                    FeatureCard::panel(&right.contexts, display),
                ],
                Some(shared_texts(left, right)),
            ),
        };
        Ok(FeatureCard {
            opaque_id: opaque.to_string(),
            session_id: sid.clone(),
            task: s.manifest.task,
            display,
            panels,
            shared_texts: shared,
        })
    }

    pub fn stats(&self, id: &str, partial: bool) -> Result<SessionStats> {
        let s = self.session(id)?;
        if !s.complete() && !partial {
            return Err(ServiceError::Conflict(format!(
                "{} of {} cards annotated; pass partial=true for interim stats",
                s.annotated(),
                s.answers.len()
            )));
        }
        let group_of = |i: usize| {
            s.manifest
                .groups
                .iter()
                .position(|g| *g == s.manifest.cards[i].provenance)
                .expect("card provenance is a group")
        };
        let mut stats = SessionStats {
            session_id: id.to_string(),
            task: s.manifest.task,
            complete: s.complete(),
            annotated: s.annotated(),
            total: s.answers.len(),
            categories: None,
            origins: None,
            pairs: None,
        };
        match s.manifest.task {
            TaskKind::Categorize => {
                let mut rows: Vec<CategoryRow> = s
                    .manifest
                    .groups
                    .iter()
                    .map(|g| CategoryRow {
                        origin: g.clone(),
                        superficial: 0,
                        conceptual: 0,
                        uninterpretable: 0,
                        unannotated: 0,
                    })
                    .collect();
                for (i, a) in s.answers.iter().enumerate() {
                    let r = &mut rows[group_of(i)];
                    match a {
                        Some(Answer::Category(Category::Superficial)) => r.superficial += 1,
                        Some(Answer::Category(Category::Conceptual)) => r.conceptual += 1,
                        Some(Answer::Category(Category::Uninterpretable)) => r.uninterpretable += 1,
                        _ => r.unannotated += 1,
                    }
                }
                stats.categories = Some(rows);
            }
            TaskKind::Origin => {
                let mut confusion: Vec<ConfusionRow> = s
                    .manifest
                    .groups
                    .iter()
                    .map(|g| ConfusionRow {
                        truth: g.clone(),
                        guesses: vec![0; Origin::ALL.len()],
                        unannotated: 0,
                    })
                    .collect();
                let mut correct = [0usize; 4];
                let mut guessed = [0usize; 4];
                for (i, a) in s.answers.iter().enumerate() {
                    let row = &mut confusion[group_of(i)];
                    match a {
                        Some(Answer::Origin(o)) => {
                            let k = Origin::ALL.iter().position(|x| x == o).expect("known origin");
                            row.guesses[k] += 1;
                            guessed[k] += 1;
                            if o.as_str() == s.manifest.cards[i].provenance {
                                correct[k] += 1;
                            }
                        }
                        _ => row.unannotated += 1,
                    }
                }
                let rows = Origin::ALL
                    .iter()
                    .enumerate()
                    .map(|(k, &origin)| OriginRow {
                        origin,
                        correct: correct[k],
                        guessed: guessed[k],
                        accuracy: (guessed[k] > 0).then(|| correct[k] as f64 / guessed[k] as f64),
                    })
                    .collect();
                stats.origins = Some(OriginStats { rows, confusion });
            }
            TaskKind::PairAlign => {
                let mut rows: Vec<PairRow> = s
                    .manifest
                    .groups
                    .iter()
                    .map(|g| PairRow {
                        group: g.clone(),
                        matched: 0,
                        unmatched: 0,
                        unannotated: 0,
                    })
                    .collect();
                for (i, a) in s.answers.iter().enumerate() {
                    let r = &mut rows[group_of(i)];
                    match a {
                        Some(Answer::Verdict(Verdict::Matched)) => r.matched += 1,
                        Some(Answer::Verdict(Verdict::Unmatched)) => r.unmatched += 1,
                        _ => r.unannotated += 1,
                    }
                }
                stats.pairs = Some(rows);
            }
        }
        Ok(stats)
    }

    /// Provenance of every card. Only allowed once all cards are annotated.
    pub fn reveal(&self, id: &str) -> Result<Reveal> {
        let s = self.session(id)?;
        if !s.complete() {
            return Err(ServiceError::Conflict(format!(
                "reveal is only available after completion ({} of {} annotated)",
                s.annotated(),
                s.answers.len()
            )));
        }
        Ok(Reveal {
            session_id: id.to_string(),
            task: s.manifest.task,
            cards: s
                .manifest
                .cards
                .iter()
                .zip(&s.answers)
                .map(|(c, a)| {
                    let (features, score) = match &c.content {
                        CardContent::Single(d) => (vec![d.feature], None),
                        CardContent::Pair { left, right, score } => (vec![left.feature, right.feature], *score),
                    };
                    RevealedCard {
                        opaque_id: c.opaque_id.clone(),
                        provenance: c.provenance.clone(),
                        features,
                        score,
                        answer: *a,
                    }
                })
                .collect(),
        })
    }

    pub fn is_closed(&self, id: &str) -> Result<bool> {
        Ok(self.session(id)?.closed)
    }
}
