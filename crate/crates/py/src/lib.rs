//! Python bindings: retrieval, single-question search and the metric helpers.

use std::path::PathBuf;

use citetree::corpus::{Corpus, Index, Retriever};
use citetree::eval::{em_recall, load_dataset, normalize_answer, run_benchmark, HarnessOptions};
use citetree::protocol::{extract_citations as extract, parse_action as parse, Action};
use citetree::reward::{f1 as f1_score, generation_progress_reward, SentenceScore};
use citetree::{AppConfig, BackendSet, PromptTemplate, SearchEngine};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// BM25 index over a passage corpus.
#[pyclass(name = "Index", module = "pycitetree")]
struct PyIndex {
    inner: Index,
}

#[pymethods]
impl PyIndex {
    /// Builds an index from `(title, body)` pairs; passage ids follow list order.
    #[staticmethod]
    fn from_pairs(pairs: Vec<(String, String)>) -> PyResult<Self> {
        let corpus = Corpus::from_pairs(pairs, "python");
        Ok(Self {
            inner: Index::build(corpus).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn from_jsonl(path: PathBuf) -> PyResult<Self> {
        let corpus = Corpus::load_jsonl(&path).map_err(value_err)?;
        Ok(Self {
            inner: Index::build(corpus).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Index::load(&path).map_err(value_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(runtime_err)
    }

    /// Top-`k` passages as `(passage_id, score)`, best first.
    #[pyo3(signature = (query, k = 3))]
    fn search(&self, query: &str, k: usize) -> PyResult<Vec<(u32, f64)>> {
        let hits = self.inner.retrieve(query, k).map_err(value_err)?;
        Ok(hits.into_iter().map(|h| (h.passage_id, h.score)).collect())
    }

    /// `(title, body)` of a passage.
    fn passage(&self, id: u32) -> PyResult<(String, String)> {
        let p = self
            .inner
            .corpus()
            .get(id)
            .ok_or_else(|| value_err(format!("no passage {id}")))?;
        Ok((p.title.clone(), p.body.clone()))
    }

    fn __len__(&self) -> usize {
        self.inner.corpus().len()
    }

    fn __repr__(&self) -> String {
        format!("Index(passages={})", self.inner.corpus().len())
    }
}

/// A configured searcher: corpus, prompt template and model backends loaded
/// from a TOML config file.
#[pyclass(name = "Engine", module = "pycitetree")]
struct PyEngine {
    config: AppConfig,
    index: Index,
    template: PromptTemplate,
    backends: BackendSet,
}

#[pymethods]
impl PyEngine {
    #[new]
    fn new(config_path: PathBuf) -> PyResult<Self> {
        let config = AppConfig::load(&config_path).map_err(value_err)?;
        let index = match (&config.paths.index, &config.paths.corpus) {
            (Some(p), _) => Index::load(p).map_err(value_err)?,
            (None, Some(p)) => {
                Index::build(Corpus::load_jsonl(p).map_err(value_err)?).map_err(value_err)?
            }
            (None, None) => {
                return Err(value_err(
                    "config sets neither paths.index nor paths.corpus",
                ))
            }
        };
        let template = config.template().map_err(value_err)?;
        let backends = config.build_backends().map_err(value_err)?;
        Ok(Self {
            config,
            index,
            template,
            backends,
        })
    }

    /// Answers one question. Returns a dict with `answer`, `clean`,
    /// `partial`, `citations`, `nodes`, `depth`, `calls` and `tree` (JSON).
    #[pyo3(signature = (question, seed = None, iterations = None, no_reflection = false, no_rg = false, no_ra = false, no_search = false))]
    #[allow(clippy::too_many_arguments)]
    fn ask<'py>(
        &self,
        py: Python<'py>,
        question: &str,
        seed: Option<u64>,
        iterations: Option<usize>,
        no_reflection: bool,
        no_rg: bool,
        no_ra: bool,
        no_search: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut cfg = self.config.search.clone();
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(i) = iterations {
            cfg.max_iterations = i;
        }
        cfg.disable_reflection |= no_reflection;
        cfg.disable_rg |= no_rg;
        cfg.disable_ra |= no_ra;
        cfg.disable_search |= no_search;
        let backends = self.backends.with_fresh_ledger();
        let engine =
            SearchEngine::new(&self.index, &backends, &self.template, cfg).map_err(value_err)?;
        let outcome = engine.run(question).map_err(runtime_err)?;

        let d = PyDict::new(py);
        d.set_item("answer", outcome.answer.text())?;
        d.set_item("clean", outcome.answer.clean_text())?;
        d.set_item("partial", outcome.answer.partial)?;
        d.set_item("citations", outcome.answer.cited_ids())?;
        d.set_item("nodes", outcome.tree.len())?;
        d.set_item("depth", outcome.tree.max_depth())?;
        let calls = PyDict::new(py);
        for (role, n) in &outcome.stats.calls {
            calls.set_item(role.as_str(), n)?;
        }
        d.set_item("calls", calls)?;
        d.set_item(
            "tree",
            serde_json::to_string(&outcome.tree.to_dump()).map_err(runtime_err)?,
        )?;
        Ok(d)
    }

    /// Runs the benchmark harness and returns the report as JSON text.
    #[pyo3(signature = (dataset = None, limit = None, workers = None))]
    fn evaluate(
        &self,
        dataset: Option<PathBuf>,
        limit: Option<usize>,
        workers: Option<usize>,
    ) -> PyResult<String> {
        let path = dataset
            .or_else(|| self.config.paths.dataset.clone())
            .ok_or_else(|| value_err("no dataset given and paths.dataset is unset"))?;
        let items = load_dataset(self.config.dataset, &path).map_err(value_err)?;
        let options = HarnessOptions {
            limit,
            workers: workers.unwrap_or(self.config.workers),
        };
        let mut report = run_benchmark(
            &items,
            &self.config.search,
            &self.backends,
            &self.template,
            options,
        )
        .map_err(runtime_err)?;
        report.config = serde_json::to_value(&self.config).map_err(runtime_err)?;
        Ok(report.to_json())
    }
}

/// Selection score of a child with mean value `value`, `visits` visits and a
/// parent with `parent_visits` visits.
#[pyfunction]
fn uct(value: f64, visits: u64, parent_visits: u64, weight: f64) -> f64 {
    citetree::mcts::uct(value, visits, parent_visits, weight)
}

/// Generation reward from `(policy_logprob, reference_logprob, prefix_tokens)` triples.
#[pyfunction]
fn generation_reward(scores: Vec<(f64, f64, usize)>) -> f64 {
    let scores: Vec<SentenceScore> = scores
        .into_iter()
        .map(|(p, r, k)| SentenceScore {
            policy_logprob: p,
            reference_logprob: r,
            prefix_token_count: k,
        })
        .collect();
    generation_progress_reward(&scores)
}

#[pyfunction]
fn f1(recall: f64, precision: f64) -> f64 {
    f1_score(recall, precision)
}

/// `(clean_sentence, citations)` with markers removed and at most three citations.
#[pyfunction]
fn extract_citations(sentence: &str) -> (String, Vec<u32>) {
    let x = extract(sentence);
    (x.clean, x.citations)
}

/// `(keyword, payload)` for one line of model output.
#[pyfunction]
fn parse_action(raw: &str) -> PyResult<(String, Option<String>)> {
    let action = parse(raw).map_err(value_err)?;
    let payload = match &action {
        Action::Search { query } => Some(query.clone()),
        Action::Reflexion { thought } => Some(thought.clone()),
        Action::Output(o) => Some(o.sentence.clone()),
        Action::End => None,
    };
    Ok((action.keyword().to_string(), payload))
}

#[pyfunction]
fn normalize(text: &str) -> String {
    normalize_answer(text)
}

/// Fraction of gold answer groups with any alias contained in `answer`.
#[pyfunction]
fn exact_match_recall(answer: &str, gold: Vec<Vec<String>>) -> f64 {
    em_recall(answer, &gold)
}

#[pymodule]
fn pycitetree(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyIndex>()?;
    m.add_class::<PyEngine>()?;
    m.add_function(wrap_pyfunction!(uct, m)?)?;
    m.add_function(wrap_pyfunction!(generation_reward, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(extract_citations, m)?)?;
    m.add_function(wrap_pyfunction!(parse_action, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match_recall, m)?)?;
    Ok(())
}
