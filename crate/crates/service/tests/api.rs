use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use ffkv_core::coders::{CoderKind, FeatureCoderHandle};
use ffkv_core::harvest::{ActivationHistory, FeatureDossier, TokenIndexMap};
use ffkv_core::lm::Tokenizer;
use ffkv_core::numerics::{Matrix, RngStream};
use ffkv_service::fixtures::{dossier, request};
use ffkv_service::log::read_log;
use ffkv_service::*;
use http_body_util::BodyExt;
use proptest::prelude::*;
use serde_json::Value;
use tower::ServiceExt;

/// Every string that would identify a coder kind to an annotator.
const KIND_MARKERS: [&str; 10] = [
    "ffkv",
    "ff-kv",
    "ff_kv",
    "topk",
    "norm_",
    "sae",
    "transcoder",
    "random_",
    "provenance",
    "origin\":\"",
];

struct Client {
    app: Router,
    bodies: Vec<String>,
}

impl Client {
    fn new(log: &Path) -> Self {
        Self {
            app: router(Arc::new(Service::open(log).unwrap())),
            bodies: Vec::new(),
        }
    }

    fn call(&mut self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value, String) {
        let rt = tokio::runtime::Builder::new_current_thread().build().unwrap();
        let mut req = Request::builder().method(method).uri(uri);
        let body = match body {
            Some(v) => {
                req = req.header("content-type", "application/json");
                Body::from(serde_json::to_vec(&v).unwrap())
            }
            None => Body::empty(),
        };
        let resp = rt.block_on(self.app.clone().oneshot(req.body(body).unwrap())).unwrap();
        let status = resp.status();
        let bytes = rt.block_on(resp.into_body().collect()).unwrap().to_bytes();
        let text = String::from_utf8(bytes.to_vec()).unwrap();
        self.bodies.push(text.clone());
        (status, serde_json::from_str(&text).unwrap_or(Value::Null), text)
    }

    fn get(&mut self, uri: &str) -> (StatusCode, Value, String) {
        self.call(Method::GET, uri, None)
    }

    fn post(&mut self, uri: &str, body: Value) -> (StatusCode, Value, String) {
        self.call(Method::POST, uri, Some(body))
    }

    fn create(&mut self, req: &CreateSession) -> String {
        let (st, v, _) = self.post("/sessions", serde_json::to_value(req).unwrap());
        assert_eq!(st, StatusCode::OK, "{v}");
        v["session_id"].as_str().unwrap().to_string()
    }

    fn card_ids(&mut self, session: &str) -> Vec<String> {
        let (_, v, _) = self.get(&format!("/sessions/{session}/cards"));
        v["cards"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c["opaque_id"].as_str().unwrap().to_string())
            .collect()
    }

    fn annotate(&mut self, session: &str, card: &str, field: &str, value: &str) -> (StatusCode, Value) {
        let (st, v, _) = self.post(
            "/annotations",
            serde_json::json!({"session_id": session, "opaque_id": card, field: value, "annotator": "a1"}),
        );
        (st, v)
    }
}

fn leaks(bodies: &[String]) -> Vec<(usize, &'static str)> {
    let mut out = Vec::new();
    for (i, b) in bodies.iter().enumerate() {
        let lower = b.to_lowercase();
        for m in KIND_MARKERS {
            if lower.contains(m) {
                out.push((i, m));
            }
        }
    }
    out
}

const ORIGINS: [&str; 4] = ["ffkv", "topk_ffkv", "sae", "transcoder"];

/// Full reveal map: opaque id → provenance.
fn provenance(log: &Path, session: &str) -> Vec<(String, String)> {
    let st = ffkv_service::log::replay(log).unwrap();
    let m = read_log(log).unwrap();
    let _ = st;
    for r in m {
        if let ffkv_service::state::LogRecord::SessionCreated { manifest } = r {
            if manifest.session_id == session {
                return manifest
                    .cards
                    .into_iter()
                    .map(|c| (c.opaque_id, c.provenance))
                    .collect();
            }
        }
    }
    panic!("session not in log");
}

#[test]
fn blinding_crawl_over_200_cards() {
    for (task, field) in [(TaskKind::Origin, "origin"), (TaskKind::Categorize, "category")] {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("log.jsonl");
        let mut c = Client::new(&log);
        let id = c.create(&request(task, &ORIGINS, 60, 50, 11));
        c.bodies.clear();

        let cards = c.card_ids(&id);
        assert_eq!(cards.len(), 200);
        assert_eq!(c.get(&format!("/sessions/{id}/stats")).0, StatusCode::CONFLICT);
        assert_eq!(c.get(&format!("/sessions/{id}/reveal")).0, StatusCode::CONFLICT);
        assert_eq!(c.get("/cards/0123456789abcdef").0, StatusCode::NOT_FOUND);
        assert_eq!(c.annotate(&id, &cards[0], field, "nonsense").0, StatusCode::BAD_REQUEST);
        for (i, card) in cards.iter().enumerate() {
            let (st, v, _) = c.get(&format!("/cards/{card}"));
            assert_eq!(st, StatusCode::OK);
            assert_eq!(v["panels"][0].as_array().unwrap().len(), 10);
            let value = match task {
                TaskKind::Origin => ORIGINS[i % 4],
                _ => "conceptual",
            };
            let (st, ack) = c.annotate(&id, card, field, value);
            assert_eq!(st, StatusCode::OK);
            assert_eq!(ack["complete"], i == 199);
            c.get(&format!("/sessions/{id}/cards"));
        }
        assert!(c.bodies.len() > 600);
        assert_eq!(leaks(&c.bodies), vec![], "pre-completion payload names a coder kind");

        // after completion the tables do name the origins
        let (st, _, text) = c.get(&format!("/sessions/{id}/stats"));
        assert_eq!(st, StatusCode::OK);
        assert!(text.contains("transcoder"));
    }
}

#[test]
fn partial_stats_and_reveal_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let mut c = Client::new(&log);
    let id = c.create(&request(TaskKind::Categorize, &["ffkv", "sae"], 4, 2, 0));
    let cards = c.card_ids(&id);
    c.annotate(&id, &cards[0], "category", "superficial");
    let (st, v, _) = c.get(&format!("/sessions/{id}/stats?partial=true"));
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["annotated"], 1);
    assert_eq!(v["complete"], false);
    for card in &cards {
        c.annotate(&id, card, "category", "uninterpretable");
    }
    let (st, v, _) = c.get(&format!("/sessions/{id}/reveal"));
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["cards"].as_array().unwrap().len(), 4);
    // closed: no more edits, cards only through reveal
    assert_eq!(c.annotate(&id, &cards[0], "category", "conceptual").0, StatusCode::CONFLICT);
    assert_eq!(c.get(&format!("/cards/{}", cards[0])).0, StatusCode::CONFLICT);
    assert_eq!(c.get(&format!("/sessions/{id}/reveal")).0, StatusCode::OK);
}

#[test]
fn duplicates_are_one_answer_and_two_lines() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let mut c = Client::new(&log);
    let id = c.create(&request(TaskKind::Categorize, &["ffkv"], 3, 3, 2));
    let cards = c.card_ids(&id);
    let (_, a) = c.annotate(&id, &cards[0], "category", "conceptual");
    assert_eq!(a["duplicate"], false);
    let (_, b) = c.annotate(&id, &cards[0], "category", "conceptual");
    assert_eq!(b["duplicate"], true);
    assert_eq!(b["annotated"], 1);
    assert_eq!(read_log(&log).unwrap().len(), 3);
    // a later answer supersedes, history stays in the log
    c.annotate(&id, &cards[0], "category", "superficial");
    let (_, v, _) = c.get(&format!("/sessions/{id}/stats?partial=true"));
    assert_eq!(v["categories"][0]["superficial"], 1);
    assert_eq!(v["categories"][0]["conceptual"], 0);
    assert_eq!(read_log(&log).unwrap().len(), 4);
}

#[test]
fn task_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Client::new(&dir.path().join("log.jsonl"));
    let id = c.create(&request(TaskKind::Categorize, &["ffkv"], 3, 3, 2));
    let cards = c.card_ids(&id);
    assert_eq!(c.annotate(&id, &cards[0], "origin", "sae").0, StatusCode::BAD_REQUEST);
    let (st, v, _) = c.post(
        "/sessions",
        serde_json::to_value(request(TaskKind::Categorize, &["ffkv"], 3, 5, 0)).unwrap(),
    );
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("'ffkv'"));
}

/// Guess matrix with rows = true origin, columns = guessed origin.
const SCRIPTED_CONFUSION: [[usize; 4]; 4] = [[43, 2, 3, 2], [2, 13, 21, 14], [3, 15, 7, 25], [2, 16, 23, 9]];

#[test]
fn scripted_annotator_reproduces_origin_accuracies() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let mut c = Client::new(&log);
    let id = c.create(&request(TaskKind::Origin, &ORIGINS, 50, 50, 5));
    let truth = provenance(&log, &id);
    let mut remaining = SCRIPTED_CONFUSION;
    for (card, prov) in &truth {
        let row = ORIGINS.iter().position(|o| o == prov).unwrap();
        let col = (0..4).find(|&g| remaining[row][g] > 0).unwrap();
        remaining[row][col] -= 1;
        assert_eq!(c.annotate(&id, card, "origin", ORIGINS[col]).0, StatusCode::OK);
    }
    let (st, v, _) = c.get(&format!("/sessions/{id}/stats"));
    assert_eq!(st, StatusCode::OK);
    let rows = v["origins"]["rows"].as_array().unwrap();
    let got: Vec<(u64, u64)> = rows
        .iter()
        .map(|r| (r["correct"].as_u64().unwrap(), r["guessed"].as_u64().unwrap()))
        .collect();
    assert_eq!(got, vec![(43, 50), (13, 46), (7, 54), (9, 50)]);
    let acc: Vec<f64> = rows.iter().map(|r| r["accuracy"].as_f64().unwrap()).collect();
    assert_eq!(acc, vec![43.0 / 50.0, 13.0 / 46.0, 7.0 / 54.0, 9.0 / 50.0]);
    let two_dp: Vec<String> = acc.iter().map(|a| format!("{a:.2}")).collect();
    assert_eq!(two_dp, ["0.86", "0.28", "0.13", "0.18"]);
    let confusion = v["origins"]["confusion"].as_array().unwrap();
    for (r, row) in confusion.iter().enumerate() {
        let g: Vec<usize> = row["guesses"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as usize).collect();
        assert_eq!(g, SCRIPTED_CONFUSION[r]);
    }
}

#[test]
fn perfect_origin_guesses_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let mut c = Client::new(&log);
    let id = c.create(&request(TaskKind::Origin, &ORIGINS, 12, 10, 8));
    for (card, prov) in provenance(&log, &id) {
        c.annotate(&id, &card, "origin", &prov);
    }
    let (_, v, _) = c.get(&format!("/sessions/{id}/stats"));
    for r in v["origins"]["rows"].as_array().unwrap() {
        assert_eq!(r["accuracy"], 1.0);
    }
}

#[test]
fn log_replay_rebuilds_stats_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let (id, live) = {
        let mut c = Client::new(&log);
        let id = c.create(&request(TaskKind::Categorize, &ORIGINS, 60, 50, 3));
        let other = c.create(&request(TaskKind::Origin, &ORIGINS, 10, 5, 3));
        let mut rng = RngStream::new(4, 0);
        let cats = ["superficial", "conceptual", "uninterpretable"];
        for card in c.card_ids(&id) {
            // some cards are answered twice; the later answer wins
            for _ in 0..1 + rng.below(2) {
                c.annotate(&id, &card, "category", cats[rng.below(3)]);
            }
        }
        for card in c.card_ids(&other).into_iter().take(7) {
            c.annotate(&other, &card, "origin", "sae");
        }
        let a = c.get(&format!("/sessions/{id}/stats")).2;
        let b = c.get(&format!("/sessions/{other}/stats?partial=true")).2;
        (id, (a, b, other))
    };
    let mut fresh = Client::new(&log);
    assert_eq!(fresh.get(&format!("/sessions/{id}/stats")).2, live.0);
    assert_eq!(fresh.get(&format!("/sessions/{}/stats?partial=true", live.2)).2, live.1);
    // and the state machine agrees without HTTP in between
    let st = ffkv_service::log::replay(&log).unwrap();
    assert_eq!(serde_json::to_string(&st.stats(&id, false).unwrap()).unwrap(), live.0);
}

#[test]
fn corrupt_log_line_is_reported_with_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    {
        let mut c = Client::new(&log);
        c.create(&request(TaskKind::Categorize, &["ffkv"], 3, 3, 2));
    }
    let mut text = std::fs::read_to_string(&log).unwrap();
    text.push_str("{not json\n");
    std::fs::write(&log, text).unwrap();
    match Service::open(&log) {
        Err(ServiceError::Log { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a log error, got {:?}", other.err()),
    }
}

/// Dossier of a feature that fires only on the token `kw`.
fn planted_keyword_dossier() -> FeatureDossier {
    let texts: Vec<String> = (0..14)
        .map(|i| {
            let mut w = vec!["bolu", "kemi", "rado", "suna", "tavi", "lemo"];
            if i < 12 {
                w.insert(i % 6, "kw");
            }
            w.join(" ")
        })
        .collect();
    let tok = Tokenizer::word_level(texts.iter().map(String::as_str));
    let kw = tok.word_id("kw").unwrap();
    let mut rows = Vec::new();
    let mut entries = Vec::new();
    let mut token_ids = Vec::new();
    for (t, text) in texts.iter().enumerate() {
        for (p, id) in tok.encode(text).into_iter().enumerate() {
            let fire = if id == kw { 1.0 + t as f32 / 10.0 } else { 0.0 };
            rows.push(vec![fire, 0.3]);
            entries.push((t as u32, p as u32));
            token_ids.push(id);
        }
    }
    let history = ActivationHistory {
        coder: FeatureCoderHandle {
            kind: CoderKind::Sae,
            layer: 0,
            d_in: 4,
            d_coder: 2,
            d_out: 4,
            source: String::new(),
        },
        activations: Matrix::from_rows(&rows).unwrap(),
        index: TokenIndexMap {
            entries,
            doc_refs: (0..texts.len()).map(|i| format!("t{i}")).collect(),
        },
        token_ids,
        corpus_fingerprint: String::new(),
    };
    history.top_contexts(0, 10, 3, &tok).unwrap()
}

#[test]
fn planted_keyword_card_marks_the_keyword() {
    let d = planted_keyword_dossier();
    assert_eq!(d.contexts.len(), 10);
    let dir = tempfile::tempdir().unwrap();
    let mut c = Client::new(&dir.path().join("log.jsonl"));
    let req = CreateSession {
        task: TaskKind::Categorize,
        seed: 0,
        sample_size: 1,
        raw_display: false,
        sets: vec![DossierSet {
            provenance: "sae".into(),
            dossiers: vec![d.clone()],
        }],
        pair_sets: vec![],
    };
    let id = c.create(&req);
    let card = c.card_ids(&id)[0].clone();
    let (_, v, _) = c.get(&format!("/cards/{card}"));
    let card: FeatureCard = serde_json::from_value(v).unwrap();
    assert_eq!(card.display, Display::MaxNormalized);
    let panel = &card.panels[0];
    assert_eq!(panel.len(), 10);
    for (s, ctx) in panel.iter().zip(&d.contexts) {
        assert_eq!(s.tokens[s.peak_offset], "kw");
        assert_eq!(s.tokens, ctx.tokens);
    }
    // texts keep the dossier's order: strongest first
    assert_eq!(panel[0].activations[panel[0].peak_offset], 1.0);
}

#[test]
fn pair_sessions_count_shared_texts() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let mut c = Client::new(&log);
    let a = dossier(0, 1);
    let mut b = dossier(1, 2);
    for (i, ctx) in b.contexts.iter_mut().enumerate() {
        ctx.text_id = if i < 8 { a.contexts[i].text_id } else { 10_000 + i };
    }
    let req = CreateSession {
        task: TaskKind::PairAlign,
        seed: 0,
        sample_size: 1,
        raw_display: true,
        sets: vec![],
        pair_sets: vec![
            PairSet {
                provenance: "bin-9".into(),
                pairs: vec![DossierPair {
                    left: a.clone(),
                    right: b,
                    score: Some(0.95),
                }],
            },
            PairSet {
                provenance: "bin-1".into(),
                pairs: vec![DossierPair {
                    left: a.clone(),
                    right: dossier(5, 3),
                    score: Some(0.12),
                }],
            },
        ],
    };
    let id = c.create(&req);
    let truth = provenance(&log, &id);
    for (card, prov) in &truth {
        let (_, v, _) = c.get(&format!("/cards/{card}"));
        assert_eq!(v["display"], "raw");
        assert_eq!(v["panels"].as_array().unwrap().len(), 2);
        if prov == "bin-9" {
            assert!(v["shared_texts"].as_u64().unwrap() >= 8);
            c.annotate(&id, card, "verdict", "matched");
        } else {
            c.annotate(&id, card, "verdict", "unmatched");
        }
    }
    let (_, v, _) = c.get(&format!("/sessions/{id}/stats"));
    let pairs = v["pairs"].as_array().unwrap();
    assert_eq!(pairs[0]["group"], "bin-9");
    assert_eq!(pairs[0]["matched"], 1);
    assert_eq!(pairs[1]["unmatched"], 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Any interleaving of pre-completion reads and writes stays blind.
    #[test]
    fn random_request_sequences_stay_blind(seed in 0u64..1000, ops in prop::collection::vec(0u8..5, 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Client::new(&dir.path().join("log.jsonl"));
        let id = c.create(&request(TaskKind::Origin, &ORIGINS, 6, 3, seed));
        c.bodies.clear();
        let cards = c.card_ids(&id);
        for (i, op) in ops.iter().enumerate() {
            let card = &cards[i % (cards.len() - 1)];
            match op {
                0 => { c.get(&format!("/cards/{card}")); }
                1 => { c.annotate(&id, card, "origin", ORIGINS[i % 4]); }
                2 => { c.get(&format!("/sessions/{id}/cards")); }
                3 => { c.get(&format!("/sessions/{id}/stats")); }
                _ => { c.get(&format!("/sessions/{id}/reveal")); }
            }
        }
        prop_assert!(leaks(&c.bodies).is_empty());
    }
}
