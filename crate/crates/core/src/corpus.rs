//! Synthetic fact-based corpus with exact entity and faithfulness ground
//! truth.
//!
//! Every document is a list of templated fact sentences
//! `"<personA> <verb> <personB> in <place> ."`; the reference summary
//! restates a lead-biased subset of those facts through paraphrase
//! templates. Because facts are structured, entity mentions, answerable
//! questions, and faithfulness are all checkable by construction.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::qa::QAPair;
use crate::vocab::Vocabulary;

/// Half-open token range `[start, end)`.
pub type Span = (usize, usize);

pub const FUNCTION_WORDS: [&str; 10] =
    ["in", ".", "?", ",", "who", "whom", "did", "where", "it", "was"];
pub const VERBS: [&str; 12] = [
    "met", "visited", "joined", "thanked", "praised", "fought", "helped", "followed", "greeted",
    "hosted", "taught", "hired",
];
const SURNAMES: [&str; 8] = ["stone", "brook", "vale", "marsh", "frost", "hale", "quill", "ash"];
const CONSONANTS: [&str; 14] =
    ["b", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Every fourth person gets a two-token name, so answer-level EM and
/// token F1 can disagree.
const TWO_TOKEN_PERSON_PERIOD: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub num_docs: usize,
    pub vocab_size: usize,
    /// Inclusive range of fact sentences per document.
    pub sentences_per_doc: (usize, usize),
    /// Inclusive range of distinct entities per document.
    pub entities_per_doc: (usize, usize),
    /// Facts restated by the reference summary.
    pub facts_per_summary: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_docs: 500,
            vocab_size: 200,
            sentences_per_doc: (4, 8),
            entities_per_doc: (5, 10),
            facts_per_summary: 2,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Entity {
    /// Surface form, possibly multi-token ("kemo stone").
    pub text: String,
    /// All mention spans in the document body, sorted by position.
    pub mentions: Vec<Span>,
}

/// Structured provenance of one fact sentence: indices into the document's
/// canonical (alphabetical) entity list plus the verb token.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Fact {
    pub sentence: usize,
    pub subj: usize,
    pub verb: u32,
    pub obj: usize,
    pub place: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub id: u64,
    pub tokens: Vec<u32>,
    /// Non-overlapping, sorted sentence spans covering all tokens.
    pub sentences: Vec<Span>,
    /// Canonical entities, alphabetically sorted by surface text.
    pub entities: Vec<Entity>,
    pub summary: Vec<u32>,
    pub qa_pairs: Vec<QAPair>,
    pub facts: Vec<Fact>,
}

impl Document {
    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_sentences(&self) -> usize {
        self.sentences.len()
    }

    /// Index of the sentence containing token position `pos`.
    pub fn sentence_of(&self, pos: usize) -> Option<usize> {
        self.sentences.iter().position(|&(s, e)| pos >= s && pos < e)
    }

    /// Checks the structural invariants every trainable document must hold.
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.entities.is_empty() || self.sentences.is_empty() {
            return Err(CoreError::Structural(format!(
                "document {} lacks entities or sentences",
                self.id
            )));
        }
        let mut cursor = 0usize;
        for &(start, end) in &self.sentences {
            if start != cursor || end <= start {
                return Err(CoreError::Structural(format!(
                    "document {}: sentence spans must be sorted, non-overlapping, covering",
                    self.id
                )));
            }
            cursor = end;
        }
        if cursor != self.tokens.len() {
            return Err(CoreError::Structural(format!(
                "document {}: sentence spans do not cover all tokens",
                self.id
            )));
        }
        for (i, entity) in self.entities.iter().enumerate() {
            if entity.mentions.is_empty() {
                return Err(CoreError::Structural(format!(
                    "document {}: entity `{}` has no mentions",
                    self.id, entity.text
                )));
            }
            for &(start, end) in &entity.mentions {
                if end > self.tokens.len() || start >= end {
                    return Err(CoreError::Structural(format!(
                        "document {}: bad mention span for entity {i}",
                        self.id
                    )));
                }
                let inside_one = self
                    .sentences
                    .iter()
                    .filter(|&&(s, e)| start >= s && end <= e)
                    .count();
                if inside_one != 1 {
                    return Err(CoreError::Structural(format!(
                        "document {}: mention of entity {i} crosses sentence boundaries",
                        self.id
                    )));
                }
            }
        }
        if self.entities.windows(2).any(|w| w[0].text >= w[1].text) {
            return Err(CoreError::Structural(format!(
                "document {}: entities are not sorted alphabetically",
                self.id
            )));
        }
        for fact in &self.facts {
            let n = self.entities.len();
            if fact.subj >= n || fact.obj >= n || fact.place >= n || fact.sentence >= self.sentences.len() {
                return Err(CoreError::Structural(format!(
                    "document {}: fact references out-of-range entity or sentence",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// The word pools a generated vocabulary is partitioned into.
#[derive(Debug, Clone)]
pub struct WordPools {
    pub persons: Vec<String>,
    pub places: Vec<String>,
}

fn syllable_name(i: usize) -> String {
    let nc = CONSONANTS.len();
    let nv = VOWELS.len();
    let d = i % nv;
    let c2 = (i / nv) % nc;
    let b = (i / (nv * nc)) % nv;
    let a = i / (nv * nc * nv);
    format!("{}{}{}{}", CONSONANTS[a % nc], VOWELS[b], CONSONANTS[c2], VOWELS[d])
}

/// Builds the vocabulary and the person/place entity pools for a spec.
/// Errors if the requested vocabulary is too small to host the entities.
pub fn build_vocabulary(spec: &CorpusSpec) -> Result<(Vocabulary, WordPools), CoreError> {
    let fixed = 4 + FUNCTION_WORDS.len() + VERBS.len() + SURNAMES.len();
    if spec.vocab_size <= fixed + 8 {
        return Err(CoreError::Config(format!(
            "vocab size {} cannot host entities ({} slots are fixed)",
            spec.vocab_size, fixed
        )));
    }
    let budget = spec.vocab_size - fixed;
    let n_place_tokens = (budget / 3).max(2);
    let n_person_tokens = budget - n_place_tokens;

    let mut words: Vec<String> = Vec::with_capacity(spec.vocab_size - 4);
    words.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
    words.extend(VERBS.iter().map(|s| s.to_string()));
    words.extend(SURNAMES.iter().map(|s| s.to_string()));

    let mut persons = Vec::with_capacity(n_person_tokens);
    for i in 0..n_person_tokens {
        let first = syllable_name(i);
        words.push(first.clone());
        if i % TWO_TOKEN_PERSON_PERIOD == TWO_TOKEN_PERSON_PERIOD - 1 {
            let surname = SURNAMES[(i / TWO_TOKEN_PERSON_PERIOD) % SURNAMES.len()];
            persons.push(format!("{first} {surname}"));
        } else {
            persons.push(first);
        }
    }
    let mut places = Vec::with_capacity(n_place_tokens);
    for i in 0..n_place_tokens {
        let place = format!("{}ton", syllable_name(i));
        words.push(place.clone());
        places.push(place);
    }

    let vocab = Vocabulary::new(words)?;
    debug_assert_eq!(vocab.size(), spec.vocab_size);

    let per_doc = doc_entity_requirements(spec.entities_per_doc.1);
    if per_doc.0 > persons.len() || per_doc.1 > places.len() {
        return Err(CoreError::Config(format!(
            "vocab size {} yields {} persons / {} places, but documents need up to {} / {}",
            spec.vocab_size,
            persons.len(),
            places.len(),
            per_doc.0,
            per_doc.1
        )));
    }
    Ok((vocab, WordPools { persons, places }))
}

/// Persons/places needed for a document with `n_e` entities: roughly two
/// thirds persons, at least two persons and one place.
fn doc_entity_requirements(n_e: usize) -> (usize, usize) {
    let persons = (2 * n_e).div_ceil(3).max(2).min(n_e - 1);
    (persons, n_e - persons)
}

fn validate_spec(spec: &CorpusSpec) -> Result<(), CoreError> {
    if spec.num_docs == 0 || spec.facts_per_summary == 0 {
        return Err(CoreError::Config("document and summary fact counts must be positive".into()));
    }
    let (s_min, s_max) = spec.sentences_per_doc;
    let (e_min, e_max) = spec.entities_per_doc;
    if s_min == 0 || s_min > s_max || e_min > e_max {
        return Err(CoreError::Config("empty or inverted per-document ranges".into()));
    }
    if e_min < 3 {
        return Err(CoreError::Config(
            "documents need at least 3 entities (two persons and a place)".into(),
        ));
    }
    let (p_max, pl_max) = doc_entity_requirements(e_max);
    if p_max > 2 * s_min || pl_max > s_min {
        return Err(CoreError::Config(format!(
            "{} sentences cannot mention {} entities; raise the sentence range",
            s_min, e_max
        )));
    }
    Ok(())
}

/// Generates the full corpus deterministically from the spec seed.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<(Vocabulary, Vec<Document>), CoreError> {
    validate_spec(spec)?;
    let (vocab, pools) = build_vocabulary(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut docs = Vec::with_capacity(spec.num_docs);
    for id in 0..spec.num_docs {
        let doc = generate_document(id as u64, spec, &vocab, &pools, &mut rng)?;
        debug_assert!(doc.validate().is_ok());
        docs.push(doc);
    }
    Ok((vocab, docs))
}

fn generate_document(
    id: u64,
    spec: &CorpusSpec,
    vocab: &Vocabulary,
    pools: &WordPools,
    rng: &mut ChaCha8Rng,
) -> Result<Document, CoreError> {
    let n_s = rng.gen_range(spec.sentences_per_doc.0..=spec.sentences_per_doc.1);
    let n_e = rng.gen_range(spec.entities_per_doc.0..=spec.entities_per_doc.1);
    let (n_p, n_pl) = doc_entity_requirements(n_e);

    let person_texts: Vec<&String> = rand::seq::index::sample(rng, pools.persons.len(), n_p)
        .into_iter()
        .map(|i| &pools.persons[i])
        .collect();
    let place_texts: Vec<&String> = rand::seq::index::sample(rng, pools.places.len(), n_pl)
        .into_iter()
        .map(|i| &pools.places[i])
        .collect();

    // Raw facts name local pool slots; canonical entity indices come later.
    let mut uncovered_p: Vec<usize> = (0..n_p).collect();
    uncovered_p.shuffle(rng);
    let mut uncovered_pl: Vec<usize> = (0..n_pl).collect();
    uncovered_pl.shuffle(rng);

    let mut raw_facts: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(n_s); // (subj, verb, obj, place)
    let mut seen = HashSet::new();
    for _ in 0..n_s {
        let subj = uncovered_p.pop().unwrap_or_else(|| rng.gen_range(0..n_p));
        let mut obj = uncovered_p.pop().unwrap_or_else(|| rng.gen_range(0..n_p));
        while obj == subj {
            obj = rng.gen_range(0..n_p);
        }
        let place = uncovered_pl.pop().unwrap_or_else(|| rng.gen_range(0..n_pl));
        let mut verb = rng.gen_range(0..VERBS.len());
        let mut tries = 0;
        while !seen.insert((subj, verb, obj, place)) {
            verb = rng.gen_range(0..VERBS.len());
            tries += 1;
            if tries > 200 {
                return Err(CoreError::Structural(format!(
                    "document {id}: cannot generate distinct facts; pools too small"
                )));
            }
        }
        raw_facts.push((subj, verb, obj, place));
    }

    // Canonical entity order is alphabetical over surface text.
    let mut entity_texts: Vec<String> =
        person_texts.iter().chain(place_texts.iter()).map(|s| s.to_string()).collect();
    entity_texts.sort();
    let canon = |text: &str| entity_texts.iter().position(|t| t == text).expect("known entity");

    let must_id = |w: &str| vocab.id(w).expect("generator word in vocab");
    let mut tokens: Vec<u32> = Vec::new();
    let mut sentences: Vec<Span> = Vec::new();
    let mut entities: Vec<Entity> =
        entity_texts.iter().map(|t| Entity { text: t.clone(), mentions: Vec::new() }).collect();
    let mut facts: Vec<Fact> = Vec::with_capacity(n_s);

    for (s_idx, &(subj, verb, obj, place)) in raw_facts.iter().enumerate() {
        let start = tokens.len();
        let push_entity = |tokens: &mut Vec<u32>, entities: &mut Vec<Entity>, text: &str| {
            let begin = tokens.len();
            for w in text.split_whitespace() {
                tokens.push(must_id(w));
            }
            let idx = canon(text);
            entities[idx].mentions.push((begin, tokens.len()));
            idx
        };
        let subj_idx = push_entity(&mut tokens, &mut entities, person_texts[subj]);
        let verb_id = must_id(VERBS[verb]);
        tokens.push(verb_id);
        let obj_idx = push_entity(&mut tokens, &mut entities, person_texts[obj]);
        tokens.push(must_id("in"));
        let place_idx = push_entity(&mut tokens, &mut entities, place_texts[place]);
        tokens.push(must_id("."));
        sentences.push((start, tokens.len()));
        facts.push(Fact { sentence: s_idx, subj: subj_idx, verb: verb_id, obj: obj_idx, place: place_idx });
    }

    let summary = render_summary(spec, vocab, &entity_texts, &facts, rng);

    Ok(Document { id, tokens, sentences, entities, summary, qa_pairs: Vec::new(), facts })
}

/// Picks a lead-biased subset of facts (weight ∝ 1/(1+i)²) and restates
/// them through one of four paraphrase templates.
fn render_summary(
    spec: &CorpusSpec,
    vocab: &Vocabulary,
    entity_texts: &[String],
    facts: &[Fact],
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let k = spec.facts_per_summary.min(facts.len());
    let mut weights: Vec<f64> =
        (0..facts.len()).map(|i| 1.0 / ((1 + i) as f64 * (1 + i) as f64)).collect();
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = weights.iter().sum();
        let mut draw = rng.gen_range(0.0..total);
        let mut pick = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if draw < w {
                pick = i;
                break;
            }
            draw -= w;
            pick = i;
        }
        chosen.push(pick);
        weights[pick] = 0.0;
    }
    chosen.sort_unstable();

    let must_id = |w: &str| vocab.id(w).expect("generator word in vocab");
    let mut out = Vec::new();
    for &fi in &chosen {
        let f = &facts[fi];
        let subj = entity_texts[f.subj].as_str();
        let obj = entity_texts[f.obj].as_str();
        let place = entity_texts[f.place].as_str();
        let push_words = |out: &mut Vec<u32>, text: &str| {
            for w in text.split_whitespace() {
                out.push(must_id(w));
            }
        };
        match rng.gen_range(0..4) {
            0 => {
                push_words(&mut out, subj);
                out.push(f.verb);
                push_words(&mut out, obj);
                out.push(must_id("in"));
                push_words(&mut out, place);
                out.push(must_id("."));
            }
            1 => {
                out.push(must_id("in"));
                push_words(&mut out, place);
                out.push(must_id(","));
                push_words(&mut out, subj);
                out.push(f.verb);
                push_words(&mut out, obj);
                out.push(must_id("."));
            }
            2 => {
                push_words(&mut out, subj);
                out.push(f.verb);
                push_words(&mut out, obj);
                out.push(must_id("."));
            }
            _ => {
                out.push(must_id("it"));
                out.push(must_id("was"));
                push_words(&mut out, subj);
                out.push(must_id("who"));
                out.push(f.verb);
                push_words(&mut out, obj);
                out.push(must_id("in"));
                push_words(&mut out, place);
                out.push(must_id("."));
            }
        }
    }
    out
}

// ── corpus file I/O ─────────────────────────────────────────────────────

/// Writes one JSON object per line.
pub fn save_jsonl(path: &Path, docs: &[Document]) -> Result<(), CoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    for doc in docs {
        serde_json::to_writer(&mut w, doc)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Document>, CoreError> {
    let file = File::open(path)
        .map_err(|e| CoreError::Data(format!("cannot open corpus {}: {e}", path.display())))?;
    let mut docs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| {
            CoreError::Data(format!("{}:{}: bad document: {e}", path.display(), lineno + 1))
        })?;
        doc.validate()?;
        docs.push(doc);
    }
    if docs.is_empty() {
        return Err(CoreError::Data(format!("corpus {} is empty", path.display())));
    }
    Ok(docs)
}

/// Deterministic train/val/test split by document order.
pub fn split_corpus(
    docs: Vec<Document>,
    train_frac: f64,
    val_frac: f64,
) -> Result<(Vec<Document>, Vec<Document>, Vec<Document>), CoreError> {
    if !(0.0..1.0).contains(&train_frac) && train_frac != 1.0 {
        return Err(CoreError::Config("train fraction must lie in (0, 1]".into()));
    }
    if train_frac + val_frac > 1.0 {
        return Err(CoreError::Config("split fractions exceed 1".into()));
    }
    let n = docs.len();
    let n_train = ((n as f64) * train_frac).round() as usize;
    let n_val = ((n as f64) * val_frac).round() as usize;
    let mut docs = docs;
    let test = docs.split_off((n_train + n_val).min(n));
    let val = docs.split_off(n_train.min(docs.len()));
    Ok((docs, val, test))
}

/// Heuristic entity annotation for externally supplied raw text: longest
/// match against a lexicon of known entity surface forms.
pub fn extract_entities_heuristic(
    tokens: &[u32],
    vocab: &Vocabulary,
    lexicon: &HashSet<String>,
) -> Vec<Entity> {
    let words: Vec<&str> = tokens.iter().map(|&t| vocab.word(t).unwrap_or("")).collect();
    let max_len = lexicon.iter().map(|e| e.split_whitespace().count()).max().unwrap_or(0);
    let mut found: Vec<(String, Span)> = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let mut matched = 0;
        for len in (1..=max_len.min(words.len() - i)).rev() {
            let candidate = words[i..i + len].join(" ");
            if lexicon.contains(&candidate) {
                found.push((candidate, (i, i + len)));
                matched = len;
                break;
            }
        }
        i += matched.max(1);
    }
    let mut texts: Vec<String> = found.iter().map(|(t, _)| t.clone()).collect();
    texts.sort();
    texts.dedup();
    texts
        .into_iter()
        .map(|text| Entity {
            mentions: found.iter().filter(|(t, _)| *t == text).map(|(_, s)| *s).collect(),
            text,
        })
        .collect()
}
