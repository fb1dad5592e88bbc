mod common;

use citetree::backends::Role;
use citetree::protocol::{DatasetTag, PromptTemplate, Transcript};
use citetree::{run_search, SearchConfig};
use common::{fixture, smoke_backends, smoke_index, World, WorldShape, SMOKE_QUESTION};
use rand::rngs::StdRng;
use rand::SeedableRng;

#[test]
fn builtin_templates_open_with_the_published_demonstration() {
    for (tag, file) in [
        (DatasetTag::Asqa, "asqa"),
        (DatasetTag::Qampari, "qampari"),
        (DatasetTag::Eli5, "eli5"),
    ] {
        let golden = std::fs::read_to_string(fixture(&format!("golden/{file}.txt"))).unwrap();
        let template = PromptTemplate::builtin(tag);
        assert_eq!(template.demonstrations[0], golden.trim_end(), "{file}");
        for demo in &template.demonstrations {
            let t = Transcript::parse(demo).unwrap();
            assert_eq!(t.render(), *demo);
            let (_, ended) = t.to_turns().unwrap();
            assert!(ended, "{file} demonstration does not end");
        }
    }
}

#[test]
fn smoke_question_reaches_the_scripted_answer() {
    let index = smoke_index();
    let backends = smoke_backends();
    let template = PromptTemplate::builtin(DatasetTag::Asqa);
    let o = run_search(
        SMOKE_QUESTION,
        &index,
        &backends,
        &template,
        &SearchConfig::default(),
    )
    .unwrap();
    assert!(!o.answer.partial);
    let clean = o.answer.clean_text();
    assert!(clean.contains("64 yards"), "{clean}");
    assert!(
        !clean.contains("altitude"),
        "the unsupported branch won: {clean}"
    );
    assert!(o.stats.reflections_used > 0);
    // deduplicated drafts spend reflector calls that no inserted node records
    assert!(o.stats.calls[&Role::Reflector] >= o.stats.reflections_used);
    // the path ends at a finished leaf
    let leaf = *o.best_path.last().unwrap();
    assert!(o.tree.node(leaf).is_finished());
}

#[test]
fn same_seed_same_tree() {
    let index = smoke_index();
    let template = PromptTemplate::builtin(DatasetTag::Asqa);
    let cfg = SearchConfig {
        seed: 3,
        ..Default::default()
    };
    let a = run_search(SMOKE_QUESTION, &index, &smoke_backends(), &template, &cfg).unwrap();
    let b = run_search(SMOKE_QUESTION, &index, &smoke_backends(), &template, &cfg).unwrap();
    assert_eq!(
        serde_json::to_string(&a.tree.to_dump()).unwrap(),
        serde_json::to_string(&b.tree.to_dump()).unwrap()
    );
}

#[test]
fn unscripted_question_fails_every_slot() {
    let index = smoke_index();
    let template = PromptTemplate::builtin(DatasetTag::Asqa);
    let o = run_search(
        "Who holds the longest field goal record in college?",
        &index,
        &smoke_backends(),
        &template,
        &SearchConfig::default(),
    );
    match o {
        Ok(o) => {
            assert_eq!(o.tree.len(), 1);
            assert!(o.stats.failed_slots > 0);
        }
        Err(e) => assert!(
            matches!(
                e,
                citetree::SearchError::Exhausted | citetree::SearchError::Backend(_)
            ),
            "{e}"
        ),
    }
}

#[test]
fn generated_worlds_respect_the_budget() {
    let mut rng = StdRng::seed_from_u64(42);
    let shape = WorldShape {
        max_sentence_depth: 3,
        max_leaves: 10,
        max_markers: 1,
        uniform_rewards: false,
    };
    let template = PromptTemplate::builtin(DatasetTag::Asqa);
    for iters in [1, 2, 5] {
        let world = World::generate(&mut rng, &shape);
        let cfg = SearchConfig {
            max_iterations: iters,
            ..Default::default()
        };
        let o = run_search(
            &world.question,
            &world.index,
            &world.backends,
            &template,
            &cfg,
        )
        .unwrap();
        assert!(o.stats.iterations <= iters);
        assert!(o.stats.expansions <= iters);
    }
}
