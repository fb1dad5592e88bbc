//! Progress rewards for a partial response.
//!
//! The generation reward sums per-sentence log-likelihood ratios between the
//! preference-aligned policy and its reference model, each weighted by the
//! inverse token length of the text that precedes the sentence:
//!
//! ```text
//! R_g = sum_k w_k * (log pi*(y_{k+1} | x, y_1..k) - log pi_ref(y_{k+1} | x, y_1..k))
//! w_k = 1 / max(1, |y_1..k|)
//! ```
//!
//! The attribution reward is the F1 of citation recall and citation
//! precision as judged by an entailment model.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, BackendSet, ContinuationScore, EntailmentBackend, Role};
use crate::corpus::Passage;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvaluationError {
    #[error("reward backend failed: {0}")]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub policy_logprob: f64,
    pub reference_logprob: f64,
    /// Tokens in all sentences before this one.
    pub prefix_token_count: usize,
}

impl SentenceScore {
    pub fn weight(&self) -> f64 {
        1.0 / self.prefix_token_count.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_g: f64,
    pub r_a: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(r_g: f64, r_a: f64) -> Self {
        Self {
            r_g,
            r_a,
            total: r_g + r_a,
        }
    }
}

pub fn generation_progress_reward(scores: &[SentenceScore]) -> f64 {
    scores
        .iter()
        .map(|s| s.weight() * (s.policy_logprob - s.reference_logprob))
        .sum()
}

/// A citation-free sentence and the passages it cites, in citation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitedSentence {
    pub sentence: String,
    pub passages: Vec<Passage>,
}

/// Joins passages as `Title: <title>. <body>` blocks separated by blank
/// lines. With a word budget, each body is cut from the tail in proportion
/// to its length so the whole premise fits.
pub fn build_premise(passages: &[&Passage], word_budget: Option<usize>) -> String {
    let total: usize = passages.iter().map(|p| p.word_count).sum();
    let keep = |p: &Passage| -> String {
        match word_budget {
            Some(budget) if total > budget => {
                let share = (p.word_count * budget) / total.max(1);
                let words: Vec<&str> = p.body.split_whitespace().take(share.max(1)).collect();
                words.join(" ")
            }
            _ => p.body.clone(),
        }
    };
    if matches!(word_budget, Some(b) if total > b) {
        log::debug!("premise of {total} words truncated to budget");
    }
    passages
        .iter()
        .map(|p| format!("Title: {}. {}", p.title, keep(p)))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn premise_entails(
    judge: &dyn EntailmentBackend,
    passages: &[&Passage],
    hypothesis: &str,
    budget: Option<usize>,
) -> Result<bool, EvaluationError> {
    if passages.is_empty() {
        return Ok(false);
    }
    Ok(judge.entails(&build_premise(passages, budget), hypothesis)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributionScores {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

pub fn f1(recall: f64, precision: f64) -> f64 {
    if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    }
}

/// Recall, precision and F1 in one pass, reusing each sentence's full-set
/// entailment check for both metrics.
pub fn attribution_scores(
    sentences: &[CitedSentence],
    judge: &dyn EntailmentBackend,
    word_budget: Option<usize>,
) -> Result<AttributionScores, EvaluationError> {
    if sentences.is_empty() {
        return Ok(AttributionScores::default());
    }
    let mut supported = 0usize;
    let mut precise = 0usize;
    let mut citations = 0usize;
    for s in sentences {
        let all: Vec<&Passage> = s.passages.iter().collect();
        citations += all.len();
        let full = premise_entails(judge, &all, &s.sentence, word_budget)?;
        if !full {
            continue;
        }
        supported += 1;
        for j in 0..all.len() {
            let rest: Vec<&Passage> = all
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != j)
                .map(|(_, p)| *p)
                .collect();
            if !premise_entails(judge, &rest, &s.sentence, word_budget)? {
                precise += 1;
            }
        }
    }
    let recall = supported as f64 / sentences.len() as f64;
    let precision = if citations == 0 {
        0.0
    } else {
        precise as f64 / citations as f64
    };
    Ok(AttributionScores {
        recall,
        precision,
        f1: f1(recall, precision),
    })
}

pub fn citation_recall(
    sentences: &[CitedSentence],
    judge: &dyn EntailmentBackend,
) -> Result<f64, EvaluationError> {
    if sentences.is_empty() {
        return Ok(0.0);
    }
    let mut supported = 0usize;
    for s in sentences {
        let all: Vec<&Passage> = s.passages.iter().collect();
        if premise_entails(judge, &all, &s.sentence, None)? {
            supported += 1;
        }
    }
    Ok(supported as f64 / sentences.len() as f64)
}

pub fn citation_precision(
    sentences: &[CitedSentence],
    judge: &dyn EntailmentBackend,
) -> Result<f64, EvaluationError> {
    Ok(attribution_scores(sentences, judge, None)?.precision)
}

pub fn attribution_progress_reward(
    sentences: &[CitedSentence],
    judge: &dyn EntailmentBackend,
) -> Result<f64, EvaluationError> {
    Ok(attribution_scores(sentences, judge, None)?.f1)
}

/// Context a sentence is scored against: the question and every earlier
/// sentence of the answer.
pub fn scoring_context(question: &str, previous: &[&str]) -> String {
    let mut ctx = format!("Question: {question}\nAnswer: ");
    for s in previous {
        ctx.push_str(s);
        ctx.push(' ');
    }
    ctx
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardOptions {
    pub disable_rg: bool,
    pub disable_ra: bool,
    /// Clamp R_g into [-clip, clip].
    pub rg_clip: Option<f64>,
    /// Judge input budget in words.
    pub premise_word_budget: Option<usize>,
}

type ScoreKey = (Role, String, String);

/// Evaluates partial responses through a [`BackendSet`], memoizing scorer
/// and judge results so a sentence shared by many paths is scored once.
pub struct RewardEngine<'a> {
    backends: &'a BackendSet,
    options: RewardOptions,
    scores: Mutex<HashMap<ScoreKey, ContinuationScore>>,
    verdicts: Mutex<HashMap<(String, String), bool>>,
}

impl<'a> RewardEngine<'a> {
    pub fn new(backends: &'a BackendSet, options: RewardOptions) -> Self {
        Self {
            backends,
            options,
            scores: Mutex::new(HashMap::new()),
            verdicts: Mutex::new(HashMap::new()),
        }
    }

    pub fn options(&self) -> RewardOptions {
        self.options
    }

    fn score(
        &self,
        role: Role,
        context: &str,
        continuation: &str,
    ) -> Result<ContinuationScore, BackendError> {
        let key = (role, context.to_string(), continuation.to_string());
        if let Some(hit) = self.scores.lock().expect("cache poisoned").get(&key) {
            return Ok(*hit);
        }
        let s = self.backends.score(role, context, continuation)?;
        self.scores.lock().expect("cache poisoned").insert(key, s);
        Ok(s)
    }

    pub fn sentence_scores(
        &self,
        question: &str,
        sentences: &[&str],
    ) -> Result<Vec<SentenceScore>, EvaluationError> {
        let mut out = Vec::with_capacity(sentences.len());
        let mut prefix_tokens = 0usize;
        for (k, sentence) in sentences.iter().enumerate() {
            let ctx = scoring_context(question, &sentences[..k]);
            let policy = self.score(Role::ScorerPolicy, &ctx, sentence)?;
            let reference = self.score(Role::ScorerReference, &ctx, sentence)?;
            log::trace!(
                "sentence {k}: policy {} reference {} over {} tokens",
                policy.logprob,
                reference.logprob,
                policy.token_count
            );
            out.push(SentenceScore {
                policy_logprob: policy.logprob,
                reference_logprob: reference.logprob,
                prefix_token_count: prefix_tokens,
            });
            prefix_tokens += policy.token_count;
        }
        Ok(out)
    }

    pub fn generation_reward(
        &self,
        question: &str,
        sentences: &[CitedSentence],
    ) -> Result<f64, EvaluationError> {
        let texts: Vec<&str> = sentences.iter().map(|s| s.sentence.as_str()).collect();
        let r = generation_progress_reward(&self.sentence_scores(question, &texts)?);
        Ok(match self.options.rg_clip {
            Some(c) => r.clamp(-c, c),
            None => r,
        })
    }

    pub fn attribution(
        &self,
        sentences: &[CitedSentence],
    ) -> Result<AttributionScores, EvaluationError> {
        attribution_scores(sentences, self, self.options.premise_word_budget)
    }

    /// R = R_g + R_a for the partial response, honoring the ablation flags.
    pub fn evaluate(
        &self,
        question: &str,
        sentences: &[CitedSentence],
    ) -> Result<RewardBreakdown, EvaluationError> {
        let r_g = if self.options.disable_rg || sentences.is_empty() {
            0.0
        } else {
            self.generation_reward(question, sentences)?
        };
        let r_a = if self.options.disable_ra {
            0.0
        } else {
            self.attribution(sentences)?.f1
        };
        Ok(RewardBreakdown::new(r_g, r_a))
    }
}

impl EntailmentBackend for RewardEngine<'_> {
    fn entails(&self, premise: &str, hypothesis: &str) -> Result<bool, BackendError> {
        let key = (premise.to_string(), hypothesis.to_string());
        if let Some(&hit) = self.verdicts.lock().expect("cache poisoned").get(&key) {
            return Ok(hit);
        }
        let v = self.backends.entails(premise, hypothesis)?;
        self.verdicts.lock().expect("cache poisoned").insert(key, v);
        Ok(v)
    }
}
