//! Benchmark harness: dataset loading, answer metrics, and run reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backends::{BackendSet, EntailmentBackend, Role};
use crate::corpus::{Corpus, Index, Passage};
use crate::mcts::{SearchConfig, SearchEngine, SearchStats};
use crate::protocol::{DatasetTag, PromptTemplate};
use crate::reward::{attribution_scores, EvaluationError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dataset item {index}: {message}")]
    Item { index: usize, message: String },
    #[error("dataset is empty")]
    Empty,
    #[error("cannot write report: {0}")]
    Report(String),
}

/// Gold annotations in the shape each dataset provides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gold {
    /// One alias set per short answer.
    Asqa(Vec<Vec<String>>),
    /// One alias set per gold entity.
    Qampari(Vec<Vec<String>>),
    /// Gold claim sentences.
    Eli5(Vec<String>),
}

impl Gold {
    pub fn tag(&self) -> DatasetTag {
        match self {
            Gold::Asqa(_) => DatasetTag::Asqa,
            Gold::Qampari(_) => DatasetTag::Qampari,
            Gold::Eli5(_) => DatasetTag::Eli5,
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            Gold::Asqa(v) | Gold::Qampari(v) => v.is_empty(),
            Gold::Eli5(v) => v.is_empty(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub question: String,
    pub candidate_passages: Vec<Passage>,
    pub gold: Gold,
}

fn strings(v: &Value) -> Vec<String> {
    match v {
        Value::String(s) => vec![s.clone()],
        Value::Array(a) => a
            .iter()
            .filter_map(|x| x.as_str().map(str::to_string))
            .collect(),
        _ => Vec::new(),
    }
}

fn parse_gold(tag: DatasetTag, obj: &Value) -> Result<Gold, String> {
    match tag {
        DatasetTag::Asqa => {
            let pairs = obj
                .get("qa_pairs")
                .and_then(Value::as_array)
                .ok_or("missing qa_pairs")?;
            let sets = pairs
                .iter()
                .map(|p| p.get("short_answers").map(strings).unwrap_or_default())
                .filter(|s| !s.is_empty())
                .collect();
            Ok(Gold::Asqa(sets))
        }
        DatasetTag::Qampari => {
            let answers = obj
                .get("answers")
                .and_then(Value::as_array)
                .ok_or("missing answers")?;
            Ok(Gold::Qampari(
                answers
                    .iter()
                    .map(strings)
                    .filter(|s| !s.is_empty())
                    .collect(),
            ))
        }
        DatasetTag::Eli5 => {
            let claims = obj.get("claims").ok_or("missing claims")?;
            Ok(Gold::Eli5(strings(claims)))
        }
    }
}

/// Parses a JSON array of `{"question", "docs": [{"title", "text"}], ...}`
/// with gold under `qa_pairs`, `answers` or `claims` depending on `tag`.
pub fn parse_dataset(tag: DatasetTag, text: &str) -> Result<Vec<BenchmarkItem>, EvalError> {
    let value: Value = serde_json::from_str(text)?;
    let items = value.as_array().ok_or(EvalError::Item {
        index: 0,
        message: "top level must be an array".into(),
    })?;
    if items.is_empty() {
        return Err(EvalError::Empty);
    }
    items
        .iter()
        .enumerate()
        .map(|(index, obj)| {
            let err = |message: String| EvalError::Item { index, message };
            let question = obj
                .get("question")
                .and_then(Value::as_str)
                .filter(|q| !q.trim().is_empty())
                .ok_or_else(|| err("missing question".into()))?;
            let docs = obj
                .get("docs")
                .and_then(Value::as_array)
                .ok_or_else(|| err("missing docs".into()))?;
            let pairs = docs.iter().map(|d| {
                (
                    d.get("title")
                        .and_then(Value::as_str)
                        .unwrap_or("")
                        .to_string(),
                    d.get("text")
                        .and_then(Value::as_str)
                        .unwrap_or("")
                        .to_string(),
                )
            });
            let corpus = Corpus::from_pairs(pairs, "dataset");
            if corpus.is_empty() {
                return Err(err("no non-empty docs".into()));
            }
            let gold = parse_gold(tag, obj).map_err(|m| err(m.to_string()))?;
            if gold.is_empty() {
                return Err(err("no gold annotations".into()));
            }
            Ok(BenchmarkItem {
                question: question.to_string(),
                candidate_passages: corpus.passages,
                gold,
            })
        })
        .collect()
}

pub fn load_dataset(tag: DatasetTag, path: &Path) -> Result<Vec<BenchmarkItem>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(tag, &text)
}

/// Lowercases, drops punctuation and English articles, collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn contains_phrase(haystack: &str, needle: &str) -> bool {
    !needle.is_empty() && haystack.contains(needle)
}

/// Fraction of gold alias sets with at least one alias in the answer.
pub fn em_recall(answer: &str, gold: &[Vec<String>]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let norm = normalize_answer(answer);
    let hits = gold
        .iter()
        .filter(|aliases| {
            aliases
                .iter()
                .any(|a| contains_phrase(&norm, &normalize_answer(a)))
        })
        .count();
    hits as f64 / gold.len() as f64
}

fn citation_marker() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[\d+\]").expect("static regex"))
}

/// Splits a list answer into entities: commas first, sentences as fallback.
pub fn parse_entities(answer: &str) -> Vec<String> {
    let stripped = citation_marker().replace_all(answer, "");
    let clean = |s: &str| s.trim().trim_end_matches('.').trim().to_string();
    let mut parts: Vec<String> = stripped
        .split([',', ';'])
        .map(clean)
        .filter(|s| !s.is_empty())
        .collect();
    if parts.len() == 1 && stripped.contains(". ") {
        log::info!("list answer has no commas, splitting on sentences");
        parts = stripped
            .split(". ")
            .map(clean)
            .filter(|s| !s.is_empty())
            .collect();
    }
    parts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ListScores {
    pub recall5: f64,
    pub precision: f64,
}

/// List-answer metrics with normalized exact matching of parsed entities.
pub fn qampari_scores(answer: &str, gold: &[Vec<String>]) -> ListScores {
    let predicted = parse_entities(answer);
    if predicted.is_empty() {
        return ListScores {
            recall5: 0.0,
            precision: 0.0,
        };
    }
    let gold_norm: Vec<BTreeSet<String>> = gold
        .iter()
        .map(|aliases| aliases.iter().map(|a| normalize_answer(a)).collect())
        .collect();
    let mut matched_sets = BTreeSet::new();
    let mut correct = 0usize;
    for entity in &predicted {
        let e = normalize_answer(entity);
        let mut any = false;
        for (i, set) in gold_norm.iter().enumerate() {
            if set.contains(&e) {
                matched_sets.insert(i);
                any = true;
            }
        }
        if any {
            correct += 1;
        }
    }
    ListScores {
        recall5: matched_sets.len().min(5) as f64 / 5.0,
        precision: correct as f64 / predicted.len() as f64,
    }
}

/// Fraction of claims the full answer entails. An empty answer entails nothing.
pub fn claim_recall(
    answer: &str,
    claims: &[String],
    judge: &dyn EntailmentBackend,
) -> Result<f64, EvaluationError> {
    if claims.is_empty() || answer.trim().is_empty() {
        return Ok(0.0);
    }
    let mut entailed = 0usize;
    for claim in claims {
        if judge.entails(answer, claim)? {
            entailed += 1;
        }
    }
    Ok(entailed as f64 / claims.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemReport {
    pub index: usize,
    pub question: String,
    pub status: ItemStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub answer: String,
    /// Cited passage ids per answer sentence.
    pub citations: Vec<Vec<u32>>,
    pub partial: bool,
    pub stats: Option<SearchStats>,
    pub metrics: BTreeMap<String, f64>,
    /// Every backend call made for this item, search and scoring.
    pub calls: BTreeMap<Role, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: DatasetTag,
    pub list_matching: String,
    pub config: Value,
    pub items: Vec<ItemReport>,
    /// Mean of each metric over items that did not fail.
    pub aggregate: BTreeMap<String, f64>,
    pub failed: usize,
    pub calls: BTreeMap<Role, usize>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn metric_names(&self) -> Vec<String> {
        let names: BTreeSet<&String> = self.items.iter().flat_map(|i| i.metrics.keys()).collect();
        names.into_iter().cloned().collect()
    }

    pub fn to_csv(&self) -> Result<String, EvalError> {
        let names = self.metric_names();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["index".to_string(), "status".into(), "question".into()];
        header.extend(names.iter().cloned());
        w.write_record(&header)
            .map_err(|e| EvalError::Report(e.to_string()))?;
        for item in &self.items {
            let mut row = vec![
                item.index.to_string(),
                format!("{:?}", item.status).to_lowercase(),
                item.question.clone(),
            ];
            row.extend(names.iter().map(|n| {
                item.metrics
                    .get(n)
                    .map(|v| v.to_string())
                    .unwrap_or_default()
            }));
            w.write_record(&row)
                .map_err(|e| EvalError::Report(e.to_string()))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| EvalError::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| EvalError::Report(e.to_string()))
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
        fs::create_dir_all(dir).map_err(|e| EvalError::Report(e.to_string()))?;
        let json = dir.join("report.json");
        let csv = dir.join("report.csv");
        fs::write(&json, self.to_json()).map_err(|e| EvalError::Report(e.to_string()))?;
        fs::write(&csv, self.to_csv()?).map_err(|e| EvalError::Report(e.to_string()))?;
        Ok((json, csv))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HarnessOptions {
    pub limit: Option<usize>,
    pub workers: usize,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        Self {
            limit: None,
            workers: 1,
        }
    }
}

fn run_item(
    index: usize,
    item: &BenchmarkItem,
    cfg: &SearchConfig,
    shared: &BackendSet,
    template: &PromptTemplate,
) -> ItemReport {
    let backends = shared.with_fresh_ledger();
    let mut report = ItemReport {
        index,
        question: item.question.clone(),
        status: ItemStatus::Failed,
        error: None,
        answer: String::new(),
        citations: Vec::new(),
        partial: false,
        stats: None,
        metrics: BTreeMap::new(),
        calls: BTreeMap::new(),
    };
    let result = (|| -> Result<(), String> {
        let corpus = Corpus {
            passages: item.candidate_passages.clone(),
            source_label: "dataset".into(),
        };
        let index = Index::build(corpus).map_err(|e| e.to_string())?;
        let engine = SearchEngine::new(&index, &backends, template, cfg.clone())
            .map_err(|e| e.to_string())?;
        let outcome = engine.run(&item.question).map_err(|e| e.to_string())?;
        if outcome.tree.len() == 1 {
            report.stats = Some(outcome.stats.clone());
            return Err(format!(
                "no expansion succeeded ({} failed slots)",
                outcome.stats.failed_slots
            ));
        }
        let answer = &outcome.answer;
        report.answer = answer.text();
        report.citations = answer
            .sentences
            .iter()
            .map(|s| s.citations.clone())
            .collect();
        report.partial = answer.partial;
        report.stats = Some(outcome.stats.clone());

        let clean = answer.clean_text();
        let metrics = &mut report.metrics;
        match &item.gold {
            Gold::Asqa(sets) => {
                metrics.insert("em_recall".into(), em_recall(&clean, sets));
            }
            Gold::Qampari(sets) => {
                let list = answer
                    .sentences
                    .iter()
                    .map(|s| s.clean.trim_end_matches('.'))
                    .collect::<Vec<_>>()
                    .join(", ");
                let s = qampari_scores(&list, sets);
                metrics.insert("recall5".into(), s.recall5);
                metrics.insert("list_precision".into(), s.precision);
            }
            Gold::Eli5(claims) => {
                let r = claim_recall(&clean, claims, &backends).map_err(|e| e.to_string())?;
                metrics.insert("claim_recall".into(), r);
            }
        }
        let cit = attribution_scores(
            &answer.cited_sentences(),
            &backends,
            cfg.premise_word_budget,
        )
        .map_err(|e| e.to_string())?;
        metrics.insert("citation_recall".into(), cit.recall);
        metrics.insert("citation_precision".into(), cit.precision);
        metrics.insert("citation_f1".into(), cit.f1);
        Ok(())
    })();
    match result {
        Ok(()) => report.status = ItemStatus::Ok,
        Err(e) => {
            log::error!("item {index} failed: {e}");
            report.error = Some(e);
            report.metrics.clear();
        }
    }
    report.calls = backends.ledger().summary();
    report
}

/// Runs the search on each item (up to `limit`) across a worker pool and
/// assembles the report in item order.
pub fn run_benchmark(
    dataset: &[BenchmarkItem],
    cfg: &SearchConfig,
    backends: &BackendSet,
    template: &PromptTemplate,
    options: HarnessOptions,
) -> Result<RunReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::Empty);
    }
    let items = &dataset[..options.limit.unwrap_or(dataset.len()).min(dataset.len())];
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<ItemReport>>> = Mutex::new(vec![None; items.len()]);
    std::thread::scope(|scope| {
        for _ in 0..options.workers.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = run_item(i, &items[i], cfg, backends, template);
                results.lock().expect("results poisoned")[i] = Some(r);
            });
        }
    });
    let items: Vec<ItemReport> = results
        .into_inner()
        .expect("results poisoned")
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect();

    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut calls: BTreeMap<Role, usize> = Role::ALL.iter().map(|&r| (r, 0)).collect();
    for item in &items {
        for (role, n) in &item.calls {
            *calls.entry(*role).or_default() += n;
        }
        if item.status == ItemStatus::Ok {
            for (k, v) in &item.metrics {
                let e = sums.entry(k.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    let aggregate = sums
        .into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect();
    Ok(RunReport {
        dataset: template.dataset,
        list_matching: "normalized exact match over comma-separated entities".into(),
        config: serde_json::to_value(cfg).expect("config serializes"),
        failed: items
            .iter()
            .filter(|i| i.status == ItemStatus::Failed)
            .count(),
        items,
        aggregate,
        calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(v: &[&[&str]]) -> Vec<Vec<String>> {
        v.iter()
            .map(|s| s.iter().map(|x| x.to_string()).collect())
            .collect()
    }

    #[test]
    fn em_recall_examples() {
        let gold = sets(&[&["64 yards"], &["69 yards"]]);
        let both = "The record is 64 yards [1], and in college it is 69 yards [2].";
        assert_eq!(em_recall(both, &gold), 1.0);
        assert_eq!(em_recall("No idea.", &gold), 0.0);
        assert_eq!(em_recall("It was 64 Yards.", &gold), 0.5);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("  The  Dog's, bone! "), "dogs bone");
    }

    #[test]
    fn list_scores() {
        let gold = sets(&[
            &["a1"],
            &["b1"],
            &["c1"],
            &["d1"],
            &["e1"],
            &["f1"],
            &["g1"],
        ]);
        let s = qampari_scores("a1 [1], b1 [2], c1, d1, e1.", &gold);
        assert_eq!((s.recall5, s.precision), (1.0, 1.0));
        let s = qampari_scores("a1, zz, b1, yy", &gold);
        assert_eq!((s.recall5, s.precision), (0.4, 0.5));
        let s = qampari_scores("a1, b1, c1, d1, e1, f1, g1", &gold);
        assert_eq!(s.recall5, 1.0);
        let s = qampari_scores("", &gold);
        assert_eq!((s.recall5, s.precision), (0.0, 0.0));
    }

    #[test]
    fn entity_parsing_falls_back_to_sentences() {
        assert_eq!(
            parse_entities("Marazan [7], Stephen Morris [7]."),
            vec!["Marazan", "Stephen Morris"]
        );
        assert_eq!(
            parse_entities("Alpha. Beta gamma."),
            vec!["Alpha", "Beta gamma"]
        );
    }

    #[test]
    fn dataset_parsing() {
        let text = r#"[{"question": "Q?", "docs": [{"title": "T", "text": "body words"}, {"title": "E", "text": ""}],
                       "qa_pairs": [{"short_answers": ["x", "y"]}, {"short_answers": []}]}]"#;
        let items = parse_dataset(DatasetTag::Asqa, text).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].candidate_passages.len(), 1);
        assert_eq!(items[0].gold, Gold::Asqa(sets(&[&["x", "y"]])));
        assert!(matches!(
            parse_dataset(DatasetTag::Asqa, "[]"),
            Err(EvalError::Empty)
        ));
        assert!(matches!(
            parse_dataset(DatasetTag::Eli5, text),
            Err(EvalError::Item { index: 0, .. })
        ));
        assert!(matches!(
            parse_dataset(DatasetTag::Asqa, "{"),
            Err(EvalError::Json(_))
        ));
    }
}
