//! Synthetic multi-page documents with planted evidence.
//!
//! Every page opens with a topic token and carries `key_slots` adjacent
//! (key, value) pairs among filler tokens. A question names a (topic, key)
//! pair, or two of them on different pages, and the answer is the text
//! rendering of the matching values in ascending page order. Distractor pages
//! repeat a query key as a lone token next to their own, different topic.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Length of every query: `[ASK, t_b, k_b, SEP, SEP, SEP, t_a, k_a]`.
pub const QUERY_LEN: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_docs: usize,
    /// The last `n_test` documents form the test split.
    pub n_test: usize,
    pub pages_per_doc: usize,
    pub tokens_per_page: usize,
    pub v_vis: usize,
    pub v_txt: usize,
    pub key_slots: usize,
    pub n_topics: usize,
    pub n_keys: usize,
    pub n_values: usize,
    pub multi_evidence_fraction: f64,
    pub distractor_overlap_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_docs: 2500,
            n_test: 500,
            pages_per_doc: 16,
            tokens_per_page: 16,
            v_vis: 512,
            v_txt: 256,
            key_slots: 4,
            n_topics: 24,
            n_keys: 80,
            n_values: 64,
            multi_evidence_fraction: 0.2,
            distractor_overlap_fraction: 0.25,
            seed: 42,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_docs", self.n_docs),
            ("pages_per_doc", self.pages_per_doc),
            ("tokens_per_page", self.tokens_per_page),
            ("v_vis", self.v_vis),
            ("v_txt", self.v_txt),
            ("key_slots", self.key_slots),
            ("n_topics", self.n_topics),
            ("n_keys", self.n_keys),
            ("n_values", self.n_values),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("corpus.{name}"), "must be positive"));
            }
        }
        for (name, v) in [
            ("multi_evidence_fraction", self.multi_evidence_fraction),
            ("distractor_overlap_fraction", self.distractor_overlap_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("corpus.{name}"), "must lie in [0, 1]"));
            }
        }
        if self.n_test > self.n_docs {
            return Err(Error::config("corpus.n_test", "exceeds n_docs"));
        }
        if self.tokens_per_page < 1 + 2 * self.key_slots {
            return Err(Error::config(
                "corpus.tokens_per_page",
                format!("needs room for a topic and {} pairs", self.key_slots),
            ));
        }
        if self.n_topics < self.pages_per_doc {
            return Err(Error::config(
                "corpus.n_topics",
                format!("{} topics cannot label {} distinct pages", self.n_topics, self.pages_per_doc),
            ));
        }
        if self.key_slots * self.pages_per_doc > self.n_keys {
            return Err(Error::config(
                "corpus.key_slots",
                format!(
                    "{} slots x {} pages exceeds the key vocabulary of {}",
                    self.key_slots, self.pages_per_doc, self.n_keys
                ),
            ));
        }
        if self.multi_evidence_fraction > 0.0 && self.pages_per_doc < 2 {
            return Err(Error::config(
                "corpus.multi_evidence_fraction",
                "two-page questions need at least two pages",
            ));
        }
        let vocab = Vocab::from_config(self);
        if vocab.text_used() > self.v_txt {
            return Err(Error::config(
                "corpus.v_txt",
                format!("needs at least {} text tokens", vocab.text_used()),
            ));
        }
        if vocab.vis_filler_start() >= self.v_vis {
            return Err(Error::config(
                "corpus.v_vis",
                format!("needs more than {} visual tokens", vocab.vis_filler_start()),
            ));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::from_config(self)
    }
}

/// Role of a text-vocabulary id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextToken {
    Eos,
    Ask,
    Sep,
    None,
    Topic(usize),
    Key(usize),
    Value(usize),
    Unused,
}

/// Role of a visual-vocabulary id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VisToken {
    Topic(usize),
    Key(usize),
    Value(usize),
    Filler(usize),
}

/// Id layout of both vocabularies. Topic, key and value concepts exist in
/// both; the same concept index names the same thing in text and on a page.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub n_topics: usize,
    pub n_keys: usize,
    pub n_values: usize,
    pub v_vis: usize,
    pub v_txt: usize,
}

impl Vocab {
    pub const EOS: usize = 0;
    pub const ASK: usize = 1;
    pub const SEP: usize = 2;
    pub const NONE: usize = 3;
    const N_SPECIAL: usize = 4;

    pub fn from_config(cfg: &CorpusConfig) -> Self {
        Vocab {
            n_topics: cfg.n_topics,
            n_keys: cfg.n_keys,
            n_values: cfg.n_values,
            v_vis: cfg.v_vis,
            v_txt: cfg.v_txt,
        }
    }

    pub fn text_topic(&self, i: usize) -> usize {
        Self::N_SPECIAL + i
    }

    pub fn text_key(&self, i: usize) -> usize {
        Self::N_SPECIAL + self.n_topics + i
    }

    pub fn text_value(&self, i: usize) -> usize {
        Self::N_SPECIAL + self.n_topics + self.n_keys + i
    }

    fn text_used(&self) -> usize {
        Self::N_SPECIAL + self.n_topics + self.n_keys + self.n_values
    }

    pub fn vis_topic(&self, i: usize) -> usize {
        i
    }

    pub fn vis_key(&self, i: usize) -> usize {
        self.n_topics + i
    }

    pub fn vis_value(&self, i: usize) -> usize {
        self.n_topics + self.n_keys + i
    }

    pub fn vis_filler_start(&self) -> usize {
        self.n_topics + self.n_keys + self.n_values
    }

    pub fn n_fillers(&self) -> usize {
        self.v_vis.saturating_sub(self.vis_filler_start())
    }

    pub fn text_kind(&self, id: usize) -> TextToken {
        let t0 = Self::N_SPECIAL;
        let k0 = t0 + self.n_topics;
        let v0 = k0 + self.n_keys;
        match id {
            Self::EOS => TextToken::Eos,
            Self::ASK => TextToken::Ask,
            Self::SEP => TextToken::Sep,
            Self::NONE => TextToken::None,
            _ if id < k0 => TextToken::Topic(id - t0),
            _ if id < v0 => TextToken::Key(id - k0),
            _ if id < v0 + self.n_values => TextToken::Value(id - v0),
            _ => TextToken::Unused,
        }
    }

    pub fn vis_kind(&self, id: usize) -> VisToken {
        let k0 = self.n_topics;
        let v0 = k0 + self.n_keys;
        let f0 = v0 + self.n_values;
        if id < k0 {
            VisToken::Topic(id)
        } else if id < v0 {
            VisToken::Key(id - k0)
        } else if id < f0 {
            VisToken::Value(id - v0)
        } else {
            VisToken::Filler(id - f0)
        }
    }

    /// Display string for a text id. Values render as two-syllable words.
    pub fn text_name(&self, id: usize) -> String {
        match self.text_kind(id) {
            TextToken::Eos => "</s>".into(),
            TextToken::Ask => "<ask>".into(),
            TextToken::Sep => "<sep>".into(),
            TextToken::None => "<none>".into(),
            TextToken::Topic(i) => format!("topic{i}"),
            TextToken::Key(i) => format!("key{i}"),
            TextToken::Value(i) => value_word(i),
            TextToken::Unused => format!("<unused{id}>"),
        }
    }

    /// Space-joined rendering of a token sequence.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&t| self.text_name(t)).collect::<Vec<_>>().join(" ")
    }
}

fn value_word(i: usize) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let syllable = |s: usize| {
        let s = s % (C.len() * V.len());
        format!("{}{}", C[s / V.len()] as char, V[s % V.len()] as char)
    };
    format!("{}{}", syllable(i), syllable(i * 37 + 11))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Page {
    pub page_id: usize,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DocRecord", into = "DocRecord")]
pub struct SyntheticDocument {
    pub doc_id: u64,
    pub pages: Vec<Page>,
    pub query: Vec<usize>,
    /// Answer tokens without the end-of-answer marker.
    pub answer: Vec<usize>,
    /// Ascending page indices.
    pub evidence_pages: Vec<usize>,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocRecord {
    doc_id: u64,
    pages: Vec<Vec<usize>>,
    query: Vec<usize>,
    answer: Vec<usize>,
    evidence_pages: Vec<usize>,
    split: Split,
}

impl TryFrom<DocRecord> for SyntheticDocument {
    type Error = String;

    fn try_from(r: DocRecord) -> std::result::Result<Self, String> {
        if r.pages.is_empty() {
            return Err("document has no pages".into());
        }
        let width = r.pages[0].len();
        if r.pages.iter().any(|p| p.len() != width) {
            return Err("pages differ in length".into());
        }
        if r.evidence_pages.is_empty() || r.evidence_pages.len() > 2 {
            return Err(format!("{} evidence pages, expected 1 or 2", r.evidence_pages.len()));
        }
        if r.evidence_pages.windows(2).any(|w| w[0] >= w[1]) {
            return Err("evidence pages must be strictly ascending".into());
        }
        if r.evidence_pages.iter().any(|&e| e >= r.pages.len()) {
            return Err("evidence page out of range".into());
        }
        if r.query.is_empty() {
            return Err("empty query".into());
        }
        Ok(SyntheticDocument {
            doc_id: r.doc_id,
            pages: r
                .pages
                .into_iter()
                .enumerate()
                .map(|(page_id, tokens)| Page { page_id, tokens })
                .collect(),
            query: r.query,
            answer: r.answer,
            evidence_pages: r.evidence_pages,
            split: r.split,
        })
    }
}

impl From<SyntheticDocument> for DocRecord {
    fn from(d: SyntheticDocument) -> Self {
        DocRecord {
            doc_id: d.doc_id,
            pages: d.pages.into_iter().map(|p| p.tokens).collect(),
            query: d.query,
            answer: d.answer,
            evidence_pages: d.evidence_pages,
            split: d.split,
        }
    }
}

impl SyntheticDocument {
    pub fn n_pages(&self) -> usize {
        self.pages.len()
    }

    pub fn tokens_per_page(&self) -> usize {
        self.pages.first().map_or(0, |p| p.tokens.len())
    }

    /// The same document with its evidence labels removed, for checking that
    /// inference never consults them.
    pub fn without_labels(&self) -> SyntheticDocument {
        SyntheticDocument { evidence_pages: Vec::new(), ..self.clone() }
    }
}

/// Generates the corpus; the output depends only on `cfg`.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<SyntheticDocument>> {
    cfg.validate()?;
    let vocab = cfg.vocab();
    let mut rng = Rng::new(cfg.seed);
    let n_multi = (cfg.multi_evidence_fraction * cfg.n_docs as f64).round() as usize;
    let mut order: Vec<usize> = (0..cfg.n_docs).collect();
    rng.shuffle(&mut order);
    let mut is_multi = vec![false; cfg.n_docs];
    for &i in &order[..n_multi] {
        is_multi[i] = true;
    }
    let n_train = cfg.n_docs - cfg.n_test;
    let docs = (0..cfg.n_docs)
        .map(|i| {
            let split = if i < n_train { Split::Train } else { Split::Test };
            generate_document(cfg, &vocab, i as u64, is_multi[i], split, &mut rng)
        })
        .collect();
    Ok(docs)
}

fn generate_document(
    cfg: &CorpusConfig,
    vocab: &Vocab,
    doc_id: u64,
    multi: bool,
    split: Split,
    rng: &mut Rng,
) -> SyntheticDocument {
    let n = cfg.pages_per_doc;
    let ks = cfg.key_slots;
    let topics = rng.sample_distinct(cfg.n_topics, n);
    let keys = rng.sample_distinct(cfg.n_keys, n * ks);
    let values: Vec<usize> = (0..n * ks).map(|_| rng.below(cfg.n_values)).collect();
    let n_fill = vocab.n_fillers();

    let mut pages = Vec::with_capacity(n);
    let mut filler_slots: Vec<Vec<usize>> = Vec::with_capacity(n);
    for p in 0..n {
        // Arrange `ks` two-token pairs and the remaining single fillers.
        let extra = cfg.tokens_per_page - 1 - 2 * ks;
        let mut items: Vec<Option<usize>> = (0..ks).map(Some).chain((0..extra).map(|_| None)).collect();
        rng.shuffle(&mut items);
        let mut tokens = vec![vocab.vis_topic(topics[p])];
        let mut fillers = Vec::new();
        for item in items {
            match item {
                Some(slot) => {
                    let s = p * ks + slot;
                    tokens.push(vocab.vis_key(keys[s]));
                    tokens.push(vocab.vis_value(values[s]));
                }
                None => {
                    fillers.push(tokens.len());
                    tokens.push(vocab.vis_filler_start() + rng.below(n_fill));
                }
            }
        }
        filler_slots.push(fillers);
        pages.push(Page { page_id: p, tokens });
    }

    let mut evidence = if multi {
        let mut two = rng.sample_distinct(n, 2);
        two.sort_unstable();
        two
    } else {
        vec![rng.below(n)]
    };
    evidence.sort_unstable();
    let picks: Vec<usize> = evidence.iter().map(|&p| p * ks + rng.below(ks)).collect();

    let a = picks[0];
    let (tb, kb) = match picks.get(1) {
        Some(&b) => (vocab.text_topic(topics[b / ks]), vocab.text_key(keys[b])),
        None => (Vocab::NONE, Vocab::NONE),
    };
    let query = vec![
        Vocab::ASK,
        tb,
        kb,
        Vocab::SEP,
        Vocab::SEP,
        Vocab::SEP,
        vocab.text_topic(topics[a / ks]),
        vocab.text_key(keys[a]),
    ];
    let answer = picks.iter().map(|&s| vocab.text_value(values[s])).collect();

    for &s in &picks {
        for p in 0..n {
            if evidence.contains(&p) || !rng.bernoulli(cfg.distractor_overlap_fraction) {
                continue;
            }
            let slots = &mut filler_slots[p];
            if slots.is_empty() {
                continue;
            }
            let pos = slots.swap_remove(rng.below(slots.len()));
            pages[p].tokens[pos] = vocab.vis_key(keys[s]);
        }
    }

    SyntheticDocument { doc_id, pages, query, answer, evidence_pages: evidence, split }
}

/// Reads the planted answer off the given pages: for each (topic, key) named
/// by the query, find the page headed by that topic and return the value that
/// follows the key inside a pair. Returns `None` if some lookup fails.
pub fn planted_answer(pages: &[&Page], query: &[usize], vocab: &Vocab) -> Option<Vec<usize>> {
    if query.len() != QUERY_LEN {
        return None;
    }
    let mut lookups = vec![(query[6], query[7])];
    if query[1] != Vocab::NONE {
        lookups.push((query[1], query[2]));
    }
    let mut found = Vec::new();
    for (t, k) in lookups {
        let (TextToken::Topic(ti), TextToken::Key(ki)) = (vocab.text_kind(t), vocab.text_kind(k))
        else {
            return None;
        };
        let page = pages.iter().find(|p| p.tokens.first() == Some(&vocab.vis_topic(ti)))?;
        let value = page.tokens.windows(2).find_map(|w| match vocab.vis_kind(w[1]) {
            VisToken::Value(v) if w[0] == vocab.vis_key(ki) => Some(v),
            _ => None,
        })?;
        found.push((page.page_id, vocab.text_value(value)));
    }
    found.sort_by_key(|&(p, _)| p);
    Some(found.into_iter().map(|(_, v)| v).collect())
}

/// Visual ids of the concepts a query names (topics and keys).
pub fn query_concepts(query: &[usize], vocab: &Vocab) -> Vec<usize> {
    query
        .iter()
        .filter_map(|&t| match vocab.text_kind(t) {
            TextToken::Topic(i) => Some(vocab.vis_topic(i)),
            TextToken::Key(i) => Some(vocab.vis_key(i)),
            _ => None,
        })
        .collect()
}

pub fn save_corpus(docs: &[SyntheticDocument], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<SyntheticDocument>> {
    let reader = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: SyntheticDocument = serde_json::from_str(&line)
            .map_err(|e| Error::CorpusLine { line: i + 1, reason: e.to_string() })?;
        docs.push(doc);
    }
    Ok(docs)
}
