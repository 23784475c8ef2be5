//! Template-based synthetic text over a pseudo-word lexicon. Every
//! generator is a pure function of its parameters and seed.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Document, LabeledTextSet, Split};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub const ATTRIBUTE_NAMES: [&str; 6] = ["color", "city", "food", "animal", "metal", "sport"];

const FILLER_WORDS: usize = 48;
const FAMILIES: usize = 16;
const FAMILY_SIZE: usize = 5;
const WORDS_PER_LETTER: usize = 8;
const ENTITY_POOL: usize = 64;
const VALUE_POOL: usize = 64;
const SENTENCE_FILLER: usize = 8;

const RESERVED: [&str; 6] = ["the", "of", "has", "first", "letter:", "."];
const VOWELS: &[u8] = b"aeiou";
const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptFamily {
    pub name: String,
    pub words: Vec<String>,
}

/// All pseudo-words used by the generators, disjoint across categories.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub filler: Vec<String>,
    pub families: Vec<ConceptFamily>,
    /// Index 0 is 'a'.
    pub letter_words: Vec<Vec<String>>,
    pub entities: Vec<String>,
    /// One value pool per entry of [`ATTRIBUTE_NAMES`].
    pub values: Vec<Vec<String>>,
}

struct WordMaker {
    rng: RngStream,
    used: BTreeSet<String>,
}

impl WordMaker {
    fn word(&mut self, first: Option<u8>) -> String {
        loop {
            let len = 4 + self.rng.below(3);
            let mut w = Vec::with_capacity(len);
            let first = first.unwrap_or_else(|| b'a' + self.rng.below(26) as u8);
            w.push(first);
            let mut vowel = !VOWELS.contains(&first);
            while w.len() < len {
                let pool = if vowel { VOWELS } else { CONSONANTS };
                w.push(pool[self.rng.below(pool.len())]);
                vowel = !vowel;
            }
            let w = String::from_utf8(w).expect("ascii");
            if !RESERVED.contains(&w.as_str()) && self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn words(&mut self, n: usize) -> Vec<String> {
        (0..n).map(|_| self.word(None)).collect()
    }
}

impl Lexicon {
    pub fn new(seed: u64) -> Self {
        let mut m = WordMaker {
            rng: RngStream::new(seed, 0x1e41),
            used: BTreeSet::new(),
        };
        let filler = m.words(FILLER_WORDS);
        let families = (0..FAMILIES)
            .map(|i| ConceptFamily {
                name: format!("topic{i}"),
                words: m.words(FAMILY_SIZE),
            })
            .collect();
        let letter_words = (0..26u8)
            .map(|l| (0..WORDS_PER_LETTER).map(|_| m.word(Some(b'a' + l))).collect())
            .collect();
        let entities = m.words(ENTITY_POOL);
        let values = ATTRIBUTE_NAMES.iter().map(|_| m.words(VALUE_POOL)).collect();
        Self {
            filler,
            families,
            letter_words,
            entities,
            values,
        }
    }

    fn family(&self, i: usize) -> Result<&ConceptFamily> {
        self.families.get(i).ok_or(Error::OutOfRange {
            index: i,
            len: self.families.len(),
        })
    }

    /// A filler sentence with `keywords` placed at random positions.
    fn sentence(&self, rng: &mut RngStream, keywords: &[&str]) -> String {
        let mut words: Vec<&str> = (0..SENTENCE_FILLER)
            .map(|_| self.filler[rng.below(self.filler.len())].as_str())
            .collect();
        for k in keywords {
            let at = rng.below(words.len() + 1);
            words.insert(at, k);
        }
        words.join(" ")
    }
}

fn pick<'a>(rng: &mut RngStream, words: &'a [String]) -> &'a str {
    words[rng.below(words.len())].as_str()
}

/// Binary keyword-family concepts: positives contain two words of the
/// concept's family, negatives two words of other families.
pub fn gen_binary_concepts(n_concepts: usize, size: usize, seed: u64) -> Result<Vec<LabeledTextSet>> {
    if size % 2 != 0 || size < 4 {
        return Err(Error::invalid(format!("concept set size {size} must be even and at least 4")));
    }
    let lex = Lexicon::new(seed);
    if n_concepts > lex.families.len() {
        return Err(Error::invalid(format!(
            "at most {} concepts available",
            lex.families.len()
        )));
    }
    let per_class = size / 2;
    let eval_per_class = (per_class * 3 / 10).max(1);
    (0..n_concepts)
        .map(|c| {
            let mut rng = RngStream::new(seed, 0xb1c0 + c as u64);
            let fam = lex.family(c)?;
            let mut texts = Vec::with_capacity(size);
            let mut labels = Vec::with_capacity(size);
            let mut splits = Vec::with_capacity(size);
            for i in 0..size {
                let label = i % 2;
                let kw: Vec<&str> = if label == 1 {
                    (0..2).map(|_| pick(&mut rng, &fam.words)).collect()
                } else {
                    (0..2)
                        .map(|_| {
                            let mut other = rng.below(lex.families.len() - 1);
                            if other >= c {
                                other += 1;
                            }
                            pick(&mut rng, &lex.families[other].words)
                        })
                        .collect()
                };
                texts.push(lex.sentence(&mut rng, &kw));
                labels.push(label);
                splits.push(if i / 2 < per_class - eval_per_class {
                    Split::Train
                } else {
                    Split::Eval
                });
            }
            Ok(LabeledTextSet {
                name: fam.name.clone(),
                texts,
                labels,
                n_classes: 2,
                splits,
                spurious: None,
                bias: None,
            })
        })
        .collect()
}

/// Two binary concepts, each a choice between two keyword families. Train
/// rows agree across channels at rate `bias`; eval rows fill the four
/// quadrants exactly equally.
pub fn gen_spurious_pairs(
    concept_a: [usize; 2],
    concept_b: [usize; 2],
    bias: f64,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<LabeledTextSet> {
    if !(bias > 0.5 && bias <= 1.0) {
        return Err(Error::invalid(format!("bias {bias} must lie in (0.5, 1]")));
    }
    if n_eval % 4 != 0 || n_eval == 0 || n_train == 0 {
        return Err(Error::invalid("eval size must be a positive multiple of 4"));
    }
    let lex = Lexicon::new(seed);
    let fa = [lex.family(concept_a[0])?, lex.family(concept_a[1])?];
    let fb = [lex.family(concept_b[0])?, lex.family(concept_b[1])?];
    let mut rng = RngStream::new(seed, 0x5c12);
    let agree = (bias * n_train as f64).round() as usize;
    let mut rows: Vec<(usize, usize, Split)> = Vec::new();
    for i in 0..n_train {
        let a = i % 2;
        let b = if i < agree { a } else { 1 - a };
        rows.push((a, b, Split::Train));
    }
    for i in 0..n_eval {
        rows.push((i % 2, (i / 2) % 2, Split::Eval));
    }
    let mut texts = Vec::with_capacity(rows.len());
    for &(a, b, _) in &rows {
        let kw = [pick(&mut rng, &fa[a].words), pick(&mut rng, &fb[b].words)];
        texts.push(lex.sentence(&mut rng, &kw));
    }
    Ok(LabeledTextSet {
        name: format!("{}-vs-{}", fa[0].name, fa[1].name),
        texts,
        labels: rows.iter().map(|r| r.0).collect(),
        n_classes: 2,
        splits: rows.iter().map(|r| r.2).collect(),
        spurious: Some(rows.iter().map(|r| r.1).collect()),
        bias: Some(agree as f64 / n_train as f64),
    })
}

/// m-way classification over the given keyword families.
pub fn gen_multiclass(families: &[usize], per_class: usize, seed: u64) -> Result<LabeledTextSet> {
    if families.len() < 2 || per_class < 2 {
        return Err(Error::invalid("need at least 2 classes with at least 2 texts each"));
    }
    let lex = Lexicon::new(seed);
    let fams: Vec<&ConceptFamily> = families.iter().map(|&f| lex.family(f)).collect::<Result<_>>()?;
    let mut rng = RngStream::new(seed, 0x3c1a);
    let eval_per_class = (per_class * 3 / 10).max(1);
    let mut texts = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for i in 0..per_class {
        for (c, fam) in fams.iter().enumerate() {
            let kw = [pick(&mut rng, &fam.words), pick(&mut rng, &fam.words)];
            texts.push(lex.sentence(&mut rng, &kw));
            labels.push(c);
            splits.push(if i < per_class - eval_per_class {
                Split::Train
            } else {
                Split::Eval
            });
        }
    }
    Ok(LabeledTextSet {
        name: format!("multiclass-{}", families.len()),
        texts,
        labels,
        n_classes: families.len(),
        splits,
        spurious: None,
        bias: None,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityAttributeWorld {
    pub entities: Vec<String>,
    pub attributes: Vec<String>,
    /// `values[e][a]`.
    pub values: Vec<Vec<String>>,
}

impl EntityAttributeWorld {
    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_attributes(&self) -> usize {
        self.attributes.len()
    }

    /// Prompt ending on the entity token; the next token is the value.
    pub fn query(&self, entity: usize, attribute: usize) -> String {
        format!("the {} of {}", self.attributes[attribute], self.entities[entity])
    }

    pub fn fact(&self, entity: usize, attribute: usize) -> String {
        format!("{} {} .", self.query(entity, attribute), self.values[entity][attribute])
    }

    pub fn facts(&self) -> Vec<String> {
        (0..self.n_entities())
            .flat_map(|e| (0..self.n_attributes()).map(move |a| (e, a)))
            .map(|(e, a)| self.fact(e, a))
            .collect()
    }
}

pub fn gen_entity_world(n_entities: usize, n_attributes: usize, seed: u64) -> Result<EntityAttributeWorld> {
    if n_entities == 0 || n_attributes == 0 {
        return Err(Error::Empty("entity world"));
    }
    if n_attributes > ATTRIBUTE_NAMES.len() || n_entities > ENTITY_POOL.min(VALUE_POOL) {
        return Err(Error::invalid(format!(
            "vocabulary exhausted: at most {} entities and {} attributes",
            ENTITY_POOL.min(VALUE_POOL),
            ATTRIBUTE_NAMES.len()
        )));
    }
    let lex = Lexicon::new(seed);
    let mut rng = RngStream::new(seed, 0xe471);
    let entities = lex.entities[..n_entities].to_vec();
    let mut values = vec![Vec::with_capacity(n_attributes); n_entities];
    for a in 0..n_attributes {
        let chosen = rng.sample_indices(VALUE_POOL, n_entities);
        for (e, &v) in chosen.iter().enumerate() {
            values[e].push(lex.values[a][v].clone());
        }
    }
    Ok(EntityAttributeWorld {
        entities,
        attributes: ATTRIBUTE_NAMES[..n_attributes].iter().map(|s| s.to_string()).collect(),
        values,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirstLetterTask {
    /// (letter, words starting with it), in alphabetical order.
    pub words: Vec<(char, Vec<String>)>,
}

impl FirstLetterTask {
    pub fn prompt(word: &str) -> String {
        format!("{word} has the first letter:")
    }

    pub fn statement(word: &str) -> String {
        let first = word.chars().next().unwrap_or('?');
        format!("{} {first} .", Self::prompt(word))
    }

    /// Fails listing the letters with no words.
    pub fn validate(&self) -> Result<()> {
        let missing: Vec<char> = ('a'..='z')
            .filter(|l| !self.words.iter().any(|(c, w)| c == l && !w.is_empty()))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!("first-letter task lacks letters {missing:?}")))
        }
    }

    pub fn all_words(&self) -> impl Iterator<Item = (usize, &str)> {
        self.words
            .iter()
            .enumerate()
            .flat_map(|(i, (_, ws))| ws.iter().map(move |w| (i, w.as_str())))
    }
}

pub fn gen_first_letter(seed: u64) -> FirstLetterTask {
    let lex = Lexicon::new(seed);
    FirstLetterTask {
        words: lex
            .letter_words
            .into_iter()
            .enumerate()
            .map(|(i, ws)| ((b'a' + i as u8) as char, ws))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskCorpusConfig {
    pub seed: u64,
    pub topic_docs: usize,
    pub n_entities: usize,
    pub n_attributes: usize,
    /// Times each fact appears.
    pub fact_repeats: usize,
    /// Times each spelling statement appears.
    pub spelling_repeats: usize,
}

impl Default for DeskCorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            topic_docs: 6000,
            n_entities: 20,
            n_attributes: 3,
            fact_repeats: 80,
            spelling_repeats: 40,
        }
    }
}

const STATEMENTS_PER_DOC: usize = 4;

/// Training corpus for the desk LM: keyword-topic prose, entity facts and
/// spelling statements, shuffled together.
pub fn desk_corpus(cfg: &DeskCorpusConfig) -> Result<Vec<Document>> {
    let lex = Lexicon::new(cfg.seed);
    let world = gen_entity_world(cfg.n_entities, cfg.n_attributes, cfg.seed)?;
    let letters = gen_first_letter(cfg.seed);
    let mut rng = RngStream::new(cfg.seed, 0xc0de);
    let mut texts: Vec<String> = Vec::new();

    for _ in 0..cfg.topic_docs {
        let fam = &lex.families[rng.below(lex.families.len())];
        let n_sent = 1 + rng.below(2);
        let sents: Vec<String> = (0..n_sent)
            .map(|_| {
                let n_kw = 1 + rng.below(2);
                let kw: Vec<&str> = (0..n_kw).map(|_| pick(&mut rng, &fam.words)).collect();
                lex.sentence(&mut rng, &kw)
            })
            .collect();
        texts.push(sents.join(" . "));
    }

    let grouped = |mut pool: Vec<String>, rng: &mut RngStream| {
        rng.shuffle(&mut pool);
        pool.chunks(STATEMENTS_PER_DOC)
            .map(|c| c.join(" "))
            .collect::<Vec<_>>()
    };
    let mut facts = Vec::new();
    for _ in 0..cfg.fact_repeats {
        facts.extend(world.facts());
    }
    texts.extend(grouped(facts, &mut rng));
    let mut spelling = Vec::new();
    for _ in 0..cfg.spelling_repeats {
        spelling.extend(letters.all_words().map(|(_, w)| FirstLetterTask::statement(w)));
    }
    texts.extend(grouped(spelling, &mut rng));

    rng.shuffle(&mut texts);
    Ok(texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| Document {
            id: format!("desk-{i}"),
            text,
        })
        .collect())
}
