//! Reflection-guided Monte Carlo tree search over cited sentences.
//!
//! Every non-root node holds one think-verbalize-cite step: the searches
//! issued (with any reflections between them) and the cited sentence that
//! followed, or an `End` marker. One iteration runs four phases:
//!
//! 1. **select**: descend from the root by UCT, `V + w * sqrt(ln N(parent) / N)`,
//!    until reaching a node that has not been expanded yet;
//! 2. **expand**: sample up to `max_children` successors from the policy,
//!    reflecting on and reformulating each query while the retrieved
//!    evidence is judged insufficient;
//! 3. **evaluate**: score the partial response ending at each new child with
//!    the progress rewards;
//! 4. **backpropagate**: give the child `N = 1, V = R` and fold `R` into the
//!    running mean of every ancestor.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, BackendSet, GenerationParams, Role};
use crate::corpus::{Passage, Retriever};
use crate::protocol::{
    parse_action, parse_support_judgment, render_prompt, render_support_judgment, rewrite_markers,
    validate_citations, Action, PromptTemplate, ProtocolError, SearchRound, Turn, TurnOutput,
};
use crate::reward::{CitedSentence, EvaluationError, RewardBreakdown, RewardEngine, RewardOptions};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error("every reachable node is terminal")]
    Exhausted,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn default_w() -> f64 {
    0.2
}
fn default_children() -> usize {
    3
}
fn default_depth() -> usize {
    6
}
fn default_iterations() -> usize {
    30
}
fn default_reflections() -> usize {
    10
}
fn default_k() -> usize {
    3
}
fn default_temperature() -> f64 {
    0.7
}
fn default_max_tokens() -> u32 {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "default_w")]
    pub uct_weight: f64,
    #[serde(default = "default_children")]
    pub max_children: usize,
    #[serde(default = "default_depth")]
    pub max_depth: usize,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_reflections")]
    pub max_reflections: usize,
    #[serde(default = "default_k")]
    pub retrieval_k: usize,
    #[serde(default)]
    pub disable_reflection: bool,
    #[serde(default)]
    pub disable_rg: bool,
    #[serde(default)]
    pub disable_ra: bool,
    /// Greedy single-path generation instead of tree search.
    #[serde(default)]
    pub disable_search: bool,
    /// Sampling temperature for child proposals.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rg_clip: Option<f64>,
    #[serde(default)]
    pub premise_word_budget: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            uct_weight: default_w(),
            max_children: default_children(),
            max_depth: default_depth(),
            max_iterations: default_iterations(),
            max_reflections: default_reflections(),
            retrieval_k: default_k(),
            disable_reflection: false,
            disable_rg: false,
            disable_ra: false,
            disable_search: false,
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            seed: 0,
            rg_clip: None,
            premise_word_budget: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let limits = [
            ("max_children", self.max_children),
            ("max_depth", self.max_depth),
            ("max_iterations", self.max_iterations),
            ("max_reflections", self.max_reflections),
            ("retrieval_k", self.retrieval_k),
        ];
        for (name, v) in limits {
            if v == 0 {
                return Err(SearchError::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.uct_weight.is_finite() && self.uct_weight >= 0.0) {
            return Err(SearchError::Config(
                "uct_weight must be finite and >= 0".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(SearchError::Config(
                "temperature must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    fn children_per_expansion(&self) -> usize {
        if self.disable_search {
            1
        } else {
            self.max_children
        }
    }

    fn reward_options(&self) -> RewardOptions {
        RewardOptions {
            disable_rg: self.disable_rg,
            disable_ra: self.disable_ra,
            rg_clip: self.rg_clip,
            premise_word_budget: self.premise_word_budget,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

/// The search state at one node. The root has neither turn nor end marker.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeState {
    pub turn: Option<Turn>,
    pub end: bool,
    pub reflections_used: usize,
}

impl NodeState {
    pub fn step(turn: Turn, reflections_used: usize) -> Self {
        Self {
            turn: Some(turn),
            end: false,
            reflections_used,
        }
    }

    pub fn end() -> Self {
        Self {
            turn: None,
            end: true,
            reflections_used: 0,
        }
    }

    pub fn query(&self) -> &str {
        self.turn.as_ref().map_or("", Turn::query)
    }

    pub fn retrieved(&self) -> &[Passage] {
        self.turn.as_ref().map_or(&[], Turn::retrieved)
    }

    pub fn sentence(&self) -> &str {
        self.turn.as_ref().and_then(Turn::sentence).unwrap_or("")
    }

    /// Cited corpus passage ids.
    pub fn citations(&self) -> &[u32] {
        self.turn
            .as_ref()
            .and_then(|t| t.output.as_ref())
            .map_or(&[], |o| o.cited_passages.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub depth: usize,
    pub state: NodeState,
    pub visit_count: u64,
    pub value: f64,
    pub terminal: bool,
    /// Forced terminal at the depth limit.
    pub truncated: bool,
    /// Expansion produced no children.
    pub failed: bool,
    pub expanded: bool,
    /// Terminal, or expanded with every child exhausted.
    pub exhausted: bool,
    pub reward: Option<RewardBreakdown>,
}

impl TreeNode {
    /// Ends in `End` or at the depth limit.
    pub fn is_finished(&self) -> bool {
        self.state.end || self.truncated
    }
}

/// `V + w * sqrt(ln N(parent) / N)`; unvisited nodes score `+inf`.
pub fn uct(value: f64, visits: u64, parent_visits: u64, w: f64) -> f64 {
    if visits == 0 {
        return f64::INFINITY;
    }
    value + w * ((parent_visits as f64).ln() / visits as f64).sqrt()
}

pub fn uct_score(node: &TreeNode, parent: &TreeNode, w: f64) -> f64 {
    uct(node.value, node.visit_count, parent.visit_count, w)
}

/// Arena-allocated search tree. Node ids are creation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTree {
    pub question: String,
    nodes: Vec<TreeNode>,
}

impl SearchTree {
    pub fn new(question: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            nodes: vec![TreeNode {
                id: NodeId(0),
                parent: None,
                children: Vec::new(),
                depth: 0,
                state: NodeState::default(),
                visit_count: 0,
                value: 0.0,
                terminal: false,
                truncated: false,
                failed: false,
                expanded: false,
                exhausted: false,
                reward: None,
            }],
        }
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn add_child(&mut self, parent: NodeId, state: NodeState) -> NodeId {
        let id = NodeId(self.nodes.len());
        let depth = self.nodes[parent.0].depth + 1;
        let terminal = state.end;
        self.nodes.push(TreeNode {
            id,
            parent: Some(parent),
            children: Vec::new(),
            depth,
            state,
            visit_count: 0,
            value: 0.0,
            terminal,
            truncated: false,
            failed: false,
            expanded: false,
            exhausted: terminal,
            reward: None,
        });
        self.nodes[parent.0].children.push(id);
        id
    }

    pub fn mark_terminal(&mut self, id: NodeId, truncated: bool) {
        let n = &mut self.nodes[id.0];
        n.terminal = true;
        n.truncated |= truncated;
        self.refresh_exhausted(id);
    }

    pub fn mark_expanded(&mut self, id: NodeId) {
        let n = &mut self.nodes[id.0];
        n.expanded = true;
        if n.children.is_empty() {
            n.terminal = true;
            n.failed = true;
        }
        self.refresh_exhausted(id);
    }

    fn refresh_exhausted(&mut self, mut id: NodeId) {
        loop {
            let n = &self.nodes[id.0];
            let exhausted =
                n.terminal || (n.expanded && n.children.iter().all(|c| self.nodes[c.0].exhausted));
            if exhausted == n.exhausted && !exhausted {
                break;
            }
            self.nodes[id.0].exhausted = exhausted;
            match self.nodes[id.0].parent {
                Some(p) if exhausted => id = p,
                _ => break,
            }
        }
    }

    /// Gives a freshly evaluated node `N = 1, V = reward` and updates every
    /// ancestor with `V = (V * N + reward) / (N + 1)`, `N = N + 1`.
    pub fn backpropagate(&mut self, id: NodeId, reward: f64) {
        let node = &mut self.nodes[id.0];
        debug_assert_eq!(node.visit_count, 0, "node evaluated twice");
        node.visit_count = 1;
        node.value = reward;
        let mut cur = node.parent;
        while let Some(p) = cur {
            let n = &mut self.nodes[p.0];
            let old = n.visit_count as f64;
            n.visit_count += 1;
            n.value = (n.value * old + reward) / n.visit_count as f64;
            cur = n.parent;
        }
    }

    pub fn set_reward(&mut self, id: NodeId, reward: RewardBreakdown) {
        self.nodes[id.0].reward = Some(reward);
    }

    /// Descends by UCT from the root to the first node that is not yet
    /// expanded. Exhausted subtrees are skipped; ties go to the earliest
    /// child.
    pub fn select(&self, w: f64) -> Result<NodeId, SearchError> {
        let mut cur = self.root();
        if self.node(cur).exhausted {
            return Err(SearchError::Exhausted);
        }
        loop {
            let node = self.node(cur);
            if !node.expanded && !node.terminal {
                return Ok(cur);
            }
            let mut best: Option<(NodeId, f64)> = None;
            for &c in &node.children {
                let child = self.node(c);
                if child.exhausted {
                    continue;
                }
                let score = uct_score(child, node, w);
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((c, score));
                }
            }
            match best {
                Some((c, _)) => cur = c,
                None => return Err(SearchError::Exhausted),
            }
        }
    }

    /// Root-to-node path.
    pub fn path_to(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = self.node(id).parent;
        while let Some(p) = cur {
            path.push(p);
            cur = self.node(p).parent;
        }
        path.reverse();
        path
    }

    /// Turns along the root-to-node path.
    pub fn history(&self, id: NodeId) -> Vec<Turn> {
        self.path_to(id)
            .into_iter()
            .filter_map(|n| self.node(n).state.turn.clone())
            .collect()
    }

    /// Picks the answer path: finished leaves first, then the highest value,
    /// the most visits, and the earliest creation. Returns the path and
    /// whether it ends at a finished node.
    pub fn extract_best_path(&self) -> (Vec<NodeId>, bool) {
        let leaves: Vec<&TreeNode> = self
            .nodes
            .iter()
            .filter(|n| n.parent.is_some() && n.children.is_empty())
            .collect();
        let finished: Vec<&TreeNode> = leaves.iter().copied().filter(|n| n.is_finished()).collect();
        let (pool, complete) = if finished.is_empty() {
            (leaves, false)
        } else {
            (finished, true)
        };
        let best = pool.into_iter().reduce(|a, b| {
            let better = b.value > a.value || (b.value == a.value && b.visit_count > a.visit_count);
            if better {
                b
            } else {
                a
            }
        });
        match best {
            Some(n) => (self.path_to(n.id), complete),
            None => (vec![self.root()], false),
        }
    }

    pub fn to_dump(&self) -> TreeDump {
        self.dump_node(self.root())
    }

    fn dump_node(&self, id: NodeId) -> TreeDump {
        let n = self.node(id);
        let turn = n.state.turn.as_ref();
        TreeDump {
            id: id.0,
            depth: n.depth,
            state: StateDump {
                queries: turn
                    .map(|t| t.rounds.iter().map(|r| r.query.clone()).collect())
                    .unwrap_or_default(),
                retrieved: n.state.retrieved().iter().map(|p| p.id).collect(),
                reflections: turn.map(|t| t.reflections.clone()).unwrap_or_default(),
                sentence: n.state.sentence().to_string(),
                citations: n.state.citations().to_vec(),
                end: n.state.end,
            },
            n: n.visit_count,
            v: n.value,
            reward: n.reward,
            terminal: n.terminal,
            truncated: n.truncated,
            children: n.children.iter().map(|&c| self.dump_node(c)).collect(),
        }
    }

    pub fn to_dot(&self) -> String {
        self.to_dump().to_dot()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDump {
    pub queries: Vec<String>,
    pub retrieved: Vec<u32>,
    pub reflections: Vec<String>,
    pub sentence: String,
    pub citations: Vec<u32>,
    pub end: bool,
}

/// Nested JSON form of a tree, as written by `--dump-tree`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDump {
    pub id: usize,
    pub depth: usize,
    pub state: StateDump,
    #[serde(rename = "N")]
    pub n: u64,
    #[serde(rename = "V")]
    pub v: f64,
    pub reward: Option<RewardBreakdown>,
    pub terminal: bool,
    pub truncated: bool,
    pub children: Vec<TreeDump>,
}

impl TreeDump {
    pub fn count(&self) -> usize {
        1 + self.children.iter().map(TreeDump::count).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        self.children
            .iter()
            .map(TreeDump::depth)
            .max()
            .map_or(self.depth, |d| d.max(self.depth))
    }

    pub fn max_branching(&self) -> usize {
        self.children
            .iter()
            .map(TreeDump::max_branching)
            .max()
            .unwrap_or(0)
            .max(self.children.len())
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph search {\n  node [shape=box, fontsize=10];\n");
        self.dot_into(&mut out);
        out.push_str("}\n");
        out
    }

    fn dot_into(&self, out: &mut String) {
        let label = if self.depth == 0 {
            "root".to_string()
        } else if self.state.end {
            "End".to_string()
        } else {
            let mut s: String = self.state.sentence.chars().take(60).collect();
            if self.state.sentence.chars().count() > 60 {
                s.push_str("...");
            }
            s
        };
        let label = label.replace('\\', "\\\\").replace('"', "\\\"");
        let _ = writeln!(
            out,
            "  n{} [label=\"{}\\nN={} V={:.3}\"{}];",
            self.id,
            label,
            self.n,
            self.v,
            if self.terminal { ", style=rounded" } else { "" }
        );
        for c in &self.children {
            let _ = writeln!(out, "  n{} -> n{};", self.id, c.id);
            c.dot_into(out);
        }
    }
}

/// Maps each turn's prompt-local citations to the passages they name.
pub fn cited_sentences(turns: &[Turn]) -> Vec<CitedSentence> {
    let mut shown: Vec<&Passage> = Vec::new();
    let mut out = Vec::new();
    for turn in turns {
        shown.extend(turn.rounds.iter().flat_map(|r| r.passages.iter()));
        if let Some(o) = &turn.output {
            let passages = o
                .citations
                .iter()
                .filter_map(|&n| {
                    shown
                        .get((n as usize).wrapping_sub(1))
                        .map(|p| (*p).clone())
                })
                .collect();
            out.push(CitedSentence {
                sentence: crate::protocol::extract_citations(&o.sentence).clean,
                passages,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSentence {
    /// Sentence with markers rewritten to corpus passage ids.
    pub text: String,
    pub clean: String,
    pub citations: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributedAnswer {
    pub sentences: Vec<AnswerSentence>,
    /// No finished path was found; the best unfinished one was used.
    pub partial: bool,
    pub truncated: bool,
    pub turns: Vec<Turn>,
}

impl AttributedAnswer {
    fn from_turns(turns: Vec<Turn>, partial: bool, truncated: bool) -> Self {
        let mut shown: Vec<u32> = Vec::new();
        let mut sentences = Vec::new();
        for turn in &turns {
            shown.extend(
                turn.rounds
                    .iter()
                    .flat_map(|r| r.passages.iter().map(|p| p.id)),
            );
            if let Some(o) = &turn.output {
                let text = rewrite_markers(&o.sentence, |n| {
                    shown.get((n as usize).wrapping_sub(1)).copied()
                });
                sentences.push(AnswerSentence {
                    clean: crate::protocol::extract_citations(&o.sentence).clean,
                    text,
                    citations: o.cited_passages.clone(),
                });
            }
        }
        Self {
            sentences,
            partial,
            truncated,
            turns,
        }
    }

    pub fn text(&self) -> String {
        self.sentences
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn clean_text(&self) -> String {
        self.sentences
            .iter()
            .map(|s| s.clean.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn cited_sentences(&self) -> Vec<CitedSentence> {
        cited_sentences(&self.turns)
    }

    /// Distinct cited passage ids in order of first citation.
    pub fn cited_ids(&self) -> Vec<u32> {
        let mut seen = BTreeSet::new();
        self.sentences
            .iter()
            .flat_map(|s| s.citations.iter().copied())
            .filter(|id| seen.insert(*id))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub iterations: usize,
    pub nodes_created: usize,
    pub expansions: usize,
    pub failed_slots: usize,
    pub evaluation_failures: usize,
    pub evaluations: usize,
    pub reflections_used: usize,
    pub retrievals: usize,
    pub exhausted: bool,
    pub calls: BTreeMap<Role, usize>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub answer: AttributedAnswer,
    pub tree: SearchTree,
    pub best_path: Vec<NodeId>,
    pub stats: SearchStats,
}

/// Why one child slot produced nothing.
#[derive(Debug, Error)]
enum SlotError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("citations name no visible document")]
    Citation,
}

struct Draft {
    state: NodeState,
    retrievals: usize,
}

/// Runs searches for one question at a time against shared backends.
pub struct SearchEngine<'a> {
    retriever: &'a dyn Retriever,
    backends: &'a BackendSet,
    template: &'a PromptTemplate,
    cfg: SearchConfig,
}

const REFLEXION_CUE: &str = "\nReflexion:";

impl<'a> SearchEngine<'a> {
    pub fn new(
        retriever: &'a dyn Retriever,
        backends: &'a BackendSet,
        template: &'a PromptTemplate,
        cfg: SearchConfig,
    ) -> Result<Self, SearchError> {
        cfg.validate()?;
        Ok(Self {
            retriever,
            backends,
            template,
            cfg,
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn run(&self, question: &str) -> Result<SearchOutcome, SearchError> {
        if !self.cfg.disable_rg {
            self.backends.probe()?;
        }
        let calls_before = self.backends.ledger().summary();
        let rewards = RewardEngine::new(self.backends, self.cfg.reward_options());
        let mut tree = SearchTree::new(question);
        let mut stats = SearchStats::default();

        for _ in 0..self.cfg.max_iterations {
            let selected = match tree.select(self.cfg.uct_weight) {
                Ok(id) => id,
                Err(SearchError::Exhausted) => {
                    stats.exhausted = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            stats.iterations += 1;
            stats.expansions += 1;
            let drafts = self.expand(&tree, selected, &mut stats);
            for draft in drafts {
                let mut turns = tree.history(selected);
                if let Some(t) = &draft.state.turn {
                    turns.push(t.clone());
                }
                let reward = match rewards.evaluate(question, &cited_sentences(&turns)) {
                    Ok(r) => r,
                    Err(EvaluationError::Backend(e)) => {
                        log::warn!("evaluation failed, dropping child: {e}");
                        stats.evaluation_failures += 1;
                        continue;
                    }
                };
                stats.evaluations += 1;
                stats.reflections_used += draft.state.reflections_used;
                stats.retrievals += draft.retrievals;
                let end = draft.state.end;
                let child = tree.add_child(selected, draft.state);
                stats.nodes_created += 1;
                if !end && tree.node(child).depth >= self.cfg.max_depth {
                    tree.mark_terminal(child, true);
                }
                tree.set_reward(child, reward);
                tree.backpropagate(child, reward.total);
            }
            tree.mark_expanded(selected);
        }
        if tree.node(tree.root()).exhausted {
            stats.exhausted = true;
        }

        let (best_path, complete) = tree.extract_best_path();
        let leaf = tree.node(*best_path.last().expect("path is never empty"));
        let answer = AttributedAnswer::from_turns(tree.history(leaf.id), !complete, leaf.truncated);
        let after = self.backends.ledger().summary();
        stats.calls = after
            .into_iter()
            .map(|(role, n)| (role, n - calls_before.get(&role).copied().unwrap_or(0)))
            .collect();
        Ok(SearchOutcome {
            answer,
            tree,
            best_path,
            stats,
        })
    }

    fn params(&self, seed: u64, retry: bool) -> GenerationParams {
        let base = if self.cfg.disable_search {
            0.0
        } else {
            self.cfg.temperature
        };
        GenerationParams {
            temperature: if retry { base + 0.3 } else { base },
            max_tokens: self.cfg.max_tokens,
            stop: vec!["\n".into()],
            seed: Some(if retry {
                seed.wrapping_add(1_000_003)
            } else {
                seed
            }),
        }
    }

    /// Asks the policy for an action, re-prompting once (with a jittered
    /// seed and higher temperature) when `accept` rejects the reply.
    fn ask<T>(
        &self,
        role: Role,
        prompt: &str,
        seed: u64,
        accept: impl Fn(&str) -> Result<T, SlotError>,
    ) -> Result<T, SlotError> {
        let first = self
            .backends
            .generate(role, prompt, &self.params(seed, false))?;
        match accept(&first) {
            Ok(v) => Ok(v),
            Err(e @ SlotError::Backend(_)) => Err(e),
            Err(e) => {
                log::debug!("re-prompting after malformed reply ({e}): {first:?}");
                let second = self
                    .backends
                    .generate(role, prompt, &self.params(seed, true))?;
                accept(&second)
            }
        }
    }

    fn search(&self, query: &str) -> Vec<Passage> {
        match self.retriever.retrieve(query, self.cfg.retrieval_k) {
            Ok(hits) => hits
                .iter()
                .filter_map(|h| self.retriever.passage(h.passage_id).cloned())
                .collect(),
            Err(e) => {
                log::debug!("retrieval for {query:?} returned nothing: {e}");
                Vec::new()
            }
        }
    }

    fn expand(&self, tree: &SearchTree, node: NodeId, stats: &mut SearchStats) -> Vec<Draft> {
        let slots = self.cfg.children_per_expansion();
        let mut drafts: Vec<Draft> = Vec::new();
        for slot in 0..slots {
            let seed = self.cfg.seed.wrapping_add((node.0 * slots + slot) as u64);
            match self.expand_slot(tree, node, seed) {
                Ok(d) => {
                    let duplicate = drafts.iter().any(|x| x.state == d.state);
                    if duplicate {
                        log::debug!("slot {slot} duplicated an earlier child");
                    } else {
                        drafts.push(d);
                    }
                }
                Err(e) => {
                    log::warn!("expansion slot {slot} of node {} failed: {e}", node.0);
                    stats.failed_slots += 1;
                }
            }
        }
        drafts
    }

    fn expand_slot(&self, tree: &SearchTree, node: NodeId, seed: u64) -> Result<Draft, SlotError> {
        let question = tree.question.as_str();
        let history = tree.history(node);
        let shown_before: usize = history.iter().map(Turn::document_count).sum();

        // think
        let prompt = render_prompt(self.template, question, &history, None);
        let first = self.ask(Role::Policy, &prompt, seed, |raw| {
            match parse_action(raw)? {
                a @ (Action::Search { .. } | Action::End) => Ok(a),
                other => Err(ProtocolError::Unexpected {
                    expected: "Search or End",
                    got: other.keyword().into(),
                }
                .into()),
            }
        })?;
        let query = match first {
            Action::End => {
                return Ok(Draft {
                    state: NodeState::end(),
                    retrievals: 0,
                })
            }
            Action::Search { query } => query,
            _ => unreachable!(),
        };

        let mut pending = Turn::default();
        let passages = self.search(&query);
        pending.rounds.push(SearchRound { query, passages });
        let mut retrievals = 1;
        let mut reflections_used = 0;

        // reflect while the evidence is judged insufficient
        if !self.cfg.disable_reflection {
            while reflections_used < self.cfg.max_reflections {
                let round = pending.rounds.last().expect("at least one round");
                let supportive = if round.passages.is_empty() {
                    false
                } else {
                    let first_number =
                        (shown_before + pending.document_count() - round.passages.len()) as u32 + 1;
                    let judge_prompt = render_support_judgment(question, round, first_number);
                    let params = GenerationParams {
                        temperature: 0.0,
                        max_tokens: 4,
                        stop: vec!["\n".into()],
                        seed: Some(seed),
                    };
                    parse_support_judgment(&self.backends.generate(
                        Role::Reflector,
                        &judge_prompt,
                        &params,
                    )?)
                };
                if supportive {
                    break;
                }
                let mut reflect_prompt =
                    render_prompt(self.template, question, &history, Some(&pending));
                reflect_prompt.push_str(REFLEXION_CUE);
                let thought = self.ask(Role::Reflector, &reflect_prompt, seed, |raw| {
                    let t = match parse_action(raw) {
                        Ok(Action::Reflexion { thought }) => thought,
                        _ => raw.lines().next().unwrap_or("").trim().to_string(),
                    };
                    if t.is_empty() {
                        Err(ProtocolError::EmptyPayload {
                            keyword: "Reflexion",
                        }
                        .into())
                    } else {
                        Ok(t)
                    }
                });
                let Ok(thought) = thought else {
                    log::debug!("no usable reflection, keeping current evidence");
                    break;
                };
                pending.reflections.push(thought);
                let reform_prompt =
                    render_prompt(self.template, question, &history, Some(&pending));
                let reformulated =
                    self.ask(
                        Role::Policy,
                        &reform_prompt,
                        seed,
                        |raw| match parse_action(raw)? {
                            Action::Search { query } => Ok(query),
                            other => Err(ProtocolError::Unexpected {
                                expected: "Search",
                                got: other.keyword().into(),
                            }
                            .into()),
                        },
                    );
                let Ok(query) = reformulated else {
                    pending.reflections.pop();
                    break;
                };
                let passages = self.search(&query);
                pending.rounds.push(SearchRound { query, passages });
                retrievals += 1;
                reflections_used += 1;
            }
        }

        // verbalize and cite
        let visible: Vec<Passage> = history
            .iter()
            .chain(std::iter::once(&pending))
            .flat_map(|t| t.rounds.iter().flat_map(|r| r.passages.iter().cloned()))
            .collect();
        let visible_numbers: BTreeSet<u32> = (1..=visible.len() as u32).collect();
        let prompt = render_prompt(self.template, question, &history, Some(&pending));
        let action = self.ask(Role::Policy, &prompt, seed, |raw| {
            match parse_action(raw)? {
                Action::Output(out) => validate_citations(&out, &visible_numbers)
                    .map(|v| Action::Output(v.output))
                    .map_err(|_| SlotError::Citation),
                Action::End => Ok(Action::End),
                other => Err(ProtocolError::Unexpected {
                    expected: "Output or End",
                    got: other.keyword().into(),
                }
                .into()),
            }
        })?;
        let out = match action {
            Action::Output(out) => out,
            _ => {
                return Ok(Draft {
                    state: NodeState::end(),
                    retrievals,
                })
            }
        };
        let cited_passages = out
            .citations
            .iter()
            .map(|&n| visible[n as usize - 1].id)
            .collect();
        debug_assert!(out.citations.len() <= crate::protocol::MAX_CITATIONS);
        pending.output = Some(TurnOutput {
            sentence: out.sentence,
            citations: out.citations,
            cited_passages,
        });
        Ok(Draft {
            state: NodeState::step(pending, reflections_used),
            retrievals,
        })
    }
}

/// Convenience wrapper around [`SearchEngine`].
pub fn run_search(
    question: &str,
    retriever: &dyn Retriever,
    backends: &BackendSet,
    template: &PromptTemplate,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    SearchEngine::new(retriever, backends, template, cfg.clone())?.run(question)
}
