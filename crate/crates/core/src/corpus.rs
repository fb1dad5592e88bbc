//! Passage corpus, word-level chunking and BM25 lexical retrieval.
//!
//! Scoring follows the usual Okapi form with a non-negative idf:
//!
//! ```text
//! idf(t)      = ln(1 + (N - df(t) + 0.5) / (df(t) + 0.5))
//! score(D, Q) = sum over distinct t in Q of
//!               idf(t) * tf(t, D) * (k1 + 1) / (tf(t, D) + k1 * (1 - b + b * |D| / avgdl))
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate passage id {0}")]
    DuplicateId(u64),
    #[error("query has no searchable terms")]
    EmptyQuery,
    #[error("k must be at least 1")]
    ZeroK,
}

/// A titled chunk of text; the unit of retrieval and citation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: u32,
    pub title: String,
    pub body: String,
    pub word_count: usize,
}

impl Passage {
    pub fn new(id: u32, title: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let word_count = body.split_whitespace().count();
        Self {
            id,
            title: title.into(),
            body,
            word_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub passages: Vec<Passage>,
    pub source_label: String,
}

#[derive(Debug, Deserialize)]
struct PassageRecord {
    id: u64,
    title: String,
    text: String,
}

impl Corpus {
    /// Builds a corpus from (title, body) pairs, numbering passages densely in
    /// input order. Pairs whose body has no words are dropped.
    pub fn from_pairs<I, T, B>(pairs: I, source_label: impl Into<String>) -> Self
    where
        I: IntoIterator<Item = (T, B)>,
        T: Into<String>,
        B: AsRef<str>,
    {
        let mut passages = Vec::new();
        for (title, body) in pairs {
            let body = normalize_ws(body.as_ref());
            if body.is_empty() {
                continue;
            }
            passages.push(Passage::new(passages.len() as u32, title, body));
        }
        Self {
            passages,
            source_label: source_label.into(),
        }
    }

    /// Reads `{"id", "title", "text"}` JSON lines. Source ids must be unique;
    /// passages are renumbered densely in file order.
    pub fn load_jsonl(path: &Path) -> Result<Self, CorpusError> {
        let file = fs::File::open(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut seen = HashSet::new();
        let mut pairs = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| CorpusError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PassageRecord =
                serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            if !seen.insert(rec.id) {
                return Err(CorpusError::DuplicateId(rec.id));
            }
            if rec.text.split_whitespace().next().is_none() {
                return Err(CorpusError::Parse {
                    line: idx + 1,
                    message: "passage text is empty".into(),
                });
            }
            pairs.push((rec.title, rec.text));
        }
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self::from_pairs(pairs, label))
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Passage> {
        self.passages.get(id as usize)
    }
}

fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits each document into consecutive passages of at most `target_words`
/// whitespace-delimited words.
pub fn chunk_documents<T, B>(
    documents: &[(T, B)],
    target_words: usize,
) -> Result<Corpus, CorpusError>
where
    T: AsRef<str>,
    B: AsRef<str>,
{
    if documents.is_empty() {
        return Err(CorpusError::Config("no documents to chunk".into()));
    }
    if target_words == 0 {
        return Err(CorpusError::Config(
            "target_words must be at least 1".into(),
        ));
    }
    let mut pairs = Vec::new();
    for (title, text) in documents {
        let words: Vec<&str> = text.as_ref().split_whitespace().collect();
        for chunk in words.chunks(target_words) {
            pairs.push((title.as_ref().to_string(), chunk.join(" ")));
        }
    }
    Ok(Corpus::from_pairs(pairs, "chunked"))
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Query terms in first-occurrence order, without repeats.
pub fn query_terms(query: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    tokenize(query)
        .into_iter()
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedHit {
    pub passage_id: u32,
    pub score: f64,
}

/// Anything that can serve top-k passages for a query. The lexical index is
/// the only implementation shipped; a dense backend would slot in here.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<RankedHit>, CorpusError>;
    fn passage(&self, id: u32) -> Option<&Passage>;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Posting {
    passage: u32,
    tf: u32,
}

/// Immutable inverted index over a [`Corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Index {
    params: Bm25Params,
    corpus: Corpus,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    postings: BTreeMap<String, Vec<Posting>>,
}

impl Index {
    pub fn build(corpus: Corpus) -> Result<Self, CorpusError> {
        Self::with_params(corpus, Bm25Params::default())
    }

    pub fn with_params(corpus: Corpus, params: Bm25Params) -> Result<Self, CorpusError> {
        if corpus.is_empty() {
            return Err(CorpusError::Config("cannot index an empty corpus".into()));
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        for passage in &corpus.passages {
            let tokens = tokenize(&passage.body);
            doc_lengths.push(tokens.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, tf) in tf {
                postings.entry(term).or_default().push(Posting {
                    passage: passage.id,
                    tf,
                });
            }
        }
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let avg_doc_length = total as f64 / doc_lengths.len() as f64;
        Ok(Self {
            params,
            corpus,
            doc_lengths,
            avg_doc_length,
            postings,
        })
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let json = serde_json::to_string(self).map_err(|e| CorpusError::Config(e.to_string()))?;
        fs::write(path, json).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&raw).map_err(|e| CorpusError::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.corpus.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }
}

impl Retriever for Index {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<RankedHit>, CorpusError> {
        if k == 0 {
            return Err(CorpusError::ZeroK);
        }
        let terms = query_terms(query);
        if terms.is_empty() {
            return Err(CorpusError::EmptyQuery);
        }
        let Bm25Params { k1, b } = self.params;
        let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(list.len());
            for p in list {
                let tf = p.tf as f64;
                let len = self.doc_lengths[p.passage as usize] as f64;
                let norm = tf + k1 * (1.0 - b + b * len / self.avg_doc_length);
                *scores.entry(p.passage).or_insert(0.0) += idf * tf * (k1 + 1.0) / norm;
            }
        }
        let mut hits: Vec<RankedHit> = scores
            .into_iter()
            .map(|(passage_id, score)| RankedHit { passage_id, score })
            .collect();
        hits.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.passage_id.cmp(&b.passage_id))
        });
        hits.truncate(k);
        Ok(hits)
    }

    fn passage(&self, id: u32) -> Option<&Passage> {
        self.corpus.get(id)
    }

    fn len(&self) -> usize {
        self.corpus.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(n: usize, tag: &str) -> String {
        (0..n)
            .map(|i| format!("{tag}{i}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn chunk_250_words_into_100_100_50() {
        let corpus = chunk_documents(&[("Doc", words(250, "w"))], 100).unwrap();
        let counts: Vec<_> = corpus.passages.iter().map(|p| p.word_count).collect();
        assert_eq!(counts, vec![100, 100, 50]);
    }

    #[test]
    fn chunk_exact_size_is_identity() {
        let text = words(100, "w");
        let corpus = chunk_documents(&[("Doc", text.clone())], 100).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.passages[0].body, text);
    }

    #[test]
    fn chunk_two_documents_keeps_order_and_dense_ids() {
        let docs = [("A", words(150, "a")), ("B", words(150, "b"))];
        let corpus = chunk_documents(&docs, 100).unwrap();
        let ids: Vec<_> = corpus.passages.iter().map(|p| p.id).collect();
        let titles: Vec<_> = corpus.passages.iter().map(|p| p.title.as_str()).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        assert_eq!(titles, vec!["A", "A", "B", "B"]);
        assert_eq!(corpus.passages[1].word_count, 50);
        assert!(corpus.passages[2].body.starts_with("b0 "));
    }

    #[test]
    fn chunk_rejects_empty_input() {
        let docs: [(&str, &str); 0] = [];
        assert!(matches!(
            chunk_documents(&docs, 100),
            Err(CorpusError::Config(_))
        ));
        assert!(chunk_documents(&[("a", "b")], 0).is_err());
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(
            tokenize("Field-goal, NFL's 64yd!"),
            vec!["field", "goal", "nfl", "s", "64yd"]
        );
        assert_eq!(query_terms("a b a c b"), vec!["a", "b", "c"]);
    }

    #[test]
    fn document_frequencies_match_hand_count() {
        let corpus = Corpus::from_pairs(
            [
                ("t", "the cat sat"),
                ("t", "the dog sat on the mat"),
                ("t", "a cat and a dog"),
            ],
            "toy",
        );
        let index = Index::build(corpus).unwrap();
        assert_eq!(index.document_frequency("the"), 2);
        assert_eq!(index.document_frequency("cat"), 2);
        assert_eq!(index.document_frequency("dog"), 2);
        assert_eq!(index.document_frequency("sat"), 2);
        assert_eq!(index.document_frequency("mat"), 1);
        assert_eq!(index.document_frequency("a"), 1);
        assert_eq!(index.document_frequency("zebra"), 0);
        assert_eq!(index.vocabulary_size(), 8);
    }

    #[test]
    fn single_passage_is_found() {
        let index = Index::build(Corpus::from_pairs([("t", "unique words here")], "x")).unwrap();
        let hits = index.retrieve("unique", 3).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].passage_id, 0);
    }

    #[test]
    fn oov_query_gives_no_hits() {
        let index = Index::build(Corpus::from_pairs([("t", "alpha beta")], "x")).unwrap();
        assert!(index.retrieve("gamma delta", 3).unwrap().is_empty());
        assert!(matches!(
            index.retrieve("!!", 3),
            Err(CorpusError::EmptyQuery)
        ));
        assert!(matches!(
            index.retrieve("alpha", 0),
            Err(CorpusError::ZeroK)
        ));
    }

    #[test]
    fn k_saturates_at_corpus_size() {
        let index = Index::build(Corpus::from_pairs(
            [("t", "x one"), ("t", "x two"), ("t", "x three")],
            "x",
        ))
        .unwrap();
        let hits = index.retrieve("x", 10).unwrap();
        assert_eq!(hits.len(), 3);
        // equal scores fall back to ascending id
        assert_eq!(
            hits.iter().map(|h| h.passage_id).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn empty_corpus_cannot_be_indexed() {
        let corpus = Corpus::from_pairs(Vec::<(String, String)>::new(), "x");
        assert!(Index::build(corpus).is_err());
    }
}
