#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use citetree::backends::{EntailRule, GenerateRule, Matcher, ScoreRule, ScriptRules};
use citetree::{BackendSet, Corpus, Index, ScriptedBackend};
use rand::rngs::StdRng;
use rand::Rng;

pub const SMOKE_QUESTION: &str = "What is the longest field goal?";

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(rel)
}

pub fn smoke_index() -> Index {
    Index::build(Corpus::load_jsonl(&fixture("smoke/corpus.jsonl")).unwrap()).unwrap()
}

pub fn smoke_backends() -> BackendSet {
    let main = Arc::new(ScriptedBackend::load(&fixture("smoke/policy.json")).unwrap());
    let sp = Arc::new(ScriptedBackend::load(&fixture("smoke/scorer_policy.json")).unwrap());
    let sr = Arc::new(ScriptedBackend::load(&fixture("smoke/scorer_reference.json")).unwrap());
    BackendSet::new(main.clone(), main.clone(), sp, sr, main)
}

/// One sentence node of a generated world. Node 0 is the root and has no
/// sentence.
#[derive(Debug, Clone)]
pub struct WorldNode {
    pub parent: Option<usize>,
    pub depth: usize,
    pub children: Vec<usize>,
    /// Sentence as the policy emits it, with citation markers.
    pub sentence: String,
    /// The sentence with markers stripped.
    pub clean: String,
    pub cited: bool,
    pub entailed: bool,
    pub policy_lp: f64,
    pub reference_lp: f64,
}

/// A deterministic scripted environment whose reachable search tree is
/// known in advance.
pub struct World {
    pub question: String,
    pub nodes: Vec<WorldNode>,
    pub index: Index,
    pub backends: BackendSet,
}

pub struct WorldShape {
    pub max_sentence_depth: usize,
    pub max_leaves: usize,
    pub max_markers: usize,
    /// Score and entail everything with catch-all rules.
    pub uniform_rewards: bool,
}

impl World {
    pub fn generate(rng: &mut StdRng, shape: &WorldShape) -> World {
        loop {
            if let Some(w) = Self::try_generate(rng, shape) {
                return w;
            }
        }
    }

    fn try_generate(rng: &mut StdRng, shape: &WorldShape) -> Option<World> {
        let mut nodes = vec![WorldNode {
            parent: None,
            depth: 0,
            children: vec![],
            sentence: String::new(),
            clean: String::new(),
            cited: false,
            entailed: false,
            policy_lp: 0.0,
            reference_lp: 0.0,
        }];
        let mut frontier = vec![0usize];
        while let Some(n) = frontier.pop() {
            let depth = nodes[n].depth;
            let leaf = n != 0 && (depth >= shape.max_sentence_depth || rng.gen_bool(0.35));
            if leaf {
                continue;
            }
            let k = rng.gen_range(1..=3);
            for _ in 0..k {
                let id = nodes.len();
                let filler = rng.gen_range(1..=6);
                let words: Vec<&str> = std::iter::repeat_n("x", filler).collect();
                let cited = rng.gen_bool(0.8);
                // documents shown so far: one per turn, the parent's is number depth+1
                let visible = depth + 1;
                let markers = if !cited {
                    String::new()
                } else if shape.max_markers <= 1 {
                    format!(" [{visible}]")
                } else {
                    let m = rng.gen_range(1..=shape.max_markers);
                    (0..m)
                        .map(|_| format!("[{}]", rng.gen_range(1..=visible)))
                        .collect::<Vec<_>>()
                        .join("")
                };
                let markers = if markers.is_empty() || markers.starts_with(' ') {
                    markers
                } else {
                    format!(" {markers}")
                };
                let body = format!("Claim {id} {}", words.join(" "));
                nodes.push(WorldNode {
                    parent: Some(n),
                    depth: depth + 1,
                    children: vec![],
                    sentence: format!("{body}{markers}."),
                    clean: format!("{body}."),
                    cited,
                    entailed: rng.gen_bool(0.6),
                    policy_lp: rng.gen_range(-6.0..0.0),
                    reference_lp: rng.gen_range(-6.0..0.0),
                });
                nodes[n].children.push(id);
                frontier.push(id);
            }
        }
        let leaves = nodes
            .iter()
            .skip(1)
            .filter(|n| n.children.is_empty())
            .count();
        if leaves > shape.max_leaves || nodes.len() > 100 {
            return None;
        }

        let question = format!("Which claims hold in world {}?", rng.gen::<u32>());
        let mut generate = vec![
            GenerateRule::new(Matcher::ends_with("Answer:"), ["Yes"]),
            GenerateRule::new(
                Matcher::ends_with("\nReflexion:"),
                ["The results look unrelated."],
            ),
            GenerateRule::new(
                Matcher::ends_with(format!("Question: {question}")),
                ["Search: topic0"],
            ),
        ];
        let mut entail = Vec::new();
        let mut policy_scores = Vec::new();
        let mut reference_scores = Vec::new();
        for (id, node) in nodes.iter().enumerate() {
            if id != 0 {
                let next = if node.children.is_empty() {
                    "End".to_string()
                } else {
                    format!("Search: topic{id}")
                };
                generate.push(GenerateRule::new(
                    Matcher::ends_with(format!("\nOutput: {}", node.sentence)),
                    [next],
                ));
                let parent = node.parent.unwrap();
                entail.push(EntailRule::new(
                    Matcher::contains(format!("topic{parent} evidence")),
                    Matcher::exact(node.clean.clone()),
                    node.entailed,
                ));
                policy_scores.push(ScoreRule::new(
                    Matcher::Any,
                    Matcher::exact(node.clean.clone()),
                    node.policy_lp,
                ));
                reference_scores.push(ScoreRule::new(
                    Matcher::Any,
                    Matcher::exact(node.clean.clone()),
                    node.reference_lp,
                ));
            }
            if !node.children.is_empty() {
                let outputs: Vec<String> = node
                    .children
                    .iter()
                    .map(|&c| format!("Output: {}", nodes[c].sentence))
                    .collect();
                generate.push(GenerateRule::new(
                    Matcher::regex(format!(r"Search: topic{id}\nDocument [^\n]*\z")),
                    outputs,
                ));
            }
        }
        if shape.uniform_rewards {
            entail = vec![EntailRule::new(Matcher::Any, Matcher::Any, true)];
            policy_scores = vec![ScoreRule::new(Matcher::Any, Matcher::Any, -1.0)];
            reference_scores = vec![ScoreRule::new(Matcher::Any, Matcher::Any, -1.5)];
        } else {
            entail.push(EntailRule::new(Matcher::Any, Matcher::Any, false));
        }

        let pairs: Vec<(String, String)> = (0..nodes.len())
            .map(|id| {
                (
                    format!("T{id}"),
                    format!("topic{id} evidence for the claims below node {id}"),
                )
            })
            .collect();
        let index = Index::build(Corpus::from_pairs(pairs, "world")).unwrap();
        let main = Arc::new(
            ScriptedBackend::new(ScriptRules {
                generate,
                score: vec![],
                entail,
            })
            .unwrap(),
        );
        let sp = Arc::new(
            ScriptedBackend::new(ScriptRules {
                score: policy_scores,
                ..Default::default()
            })
            .unwrap(),
        );
        let sr = Arc::new(
            ScriptedBackend::new(ScriptRules {
                score: reference_scores,
                ..Default::default()
            })
            .unwrap(),
        );
        let backends = BackendSet::new(main.clone(), main.clone(), sp, sr, main);
        Some(World {
            question,
            nodes,
            index,
            backends,
        })
    }

    pub fn leaves(&self) -> Vec<usize> {
        (1..self.nodes.len())
            .filter(|&i| self.nodes[i].children.is_empty())
            .collect()
    }

    pub fn path(&self, mut id: usize) -> Vec<usize> {
        let mut p = vec![];
        while id != 0 {
            p.push(id);
            id = self.nodes[id].parent.unwrap();
        }
        p.reverse();
        p
    }

    /// Reward of the answer made of the sentences on the path to `leaf`,
    /// computed directly from the world tables.
    pub fn oracle_reward(&self, leaf: usize) -> f64 {
        let path = self.path(leaf);
        let mut r_g = 0.0;
        let mut prefix_words = 0usize;
        for &n in &path {
            let node = &self.nodes[n];
            r_g += (node.policy_lp - node.reference_lp) / prefix_words.max(1) as f64;
            prefix_words += node.clean.split_whitespace().count();
        }
        let m = path.len() as f64;
        let supported = path
            .iter()
            .filter(|&&n| self.nodes[n].cited && self.nodes[n].entailed)
            .count() as f64;
        let citations = path.iter().filter(|&&n| self.nodes[n].cited).count() as f64;
        let recall = supported / m;
        // one passage per sentence: it is necessary exactly when it suffices
        let precision = if citations == 0.0 {
            0.0
        } else {
            supported / citations
        };
        let f1 = if recall + precision == 0.0 {
            0.0
        } else {
            2.0 * recall * precision / (recall + precision)
        };
        r_g + f1
    }

    /// The leaf with the highest oracle reward, or `None` when the best two
    /// are too close to call.
    pub fn oracle_best(&self) -> Option<usize> {
        let mut scored: Vec<(usize, f64)> = self
            .leaves()
            .into_iter()
            .map(|l| (l, self.oracle_reward(l)))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        if scored.len() > 1 && scored[0].1 - scored[1].1 < 1e-9 {
            return None;
        }
        Some(scored[0].0)
    }

    pub fn internal_count(&self) -> usize {
        self.nodes.len()
    }
}
