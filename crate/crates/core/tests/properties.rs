use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use proptest::prelude::*;

use nllf_core::bsq::{augment, parse_questions, AugmentSources, Bsq, Origin};
use nllf_core::data_model::{load_corpus, split, Corpus, Example, Label, MetricMode, SplitSpec, TaskConfig};
use nllf_core::evaluation::metrics::{Confusion, EvalReport};
use nllf_core::features::expert::{CharClass, Evaluator, ExpertBank, ExpertRule, Output};
use nllf_core::llm::mock::MockBackend;
use nllf_core::llm::{CompletionParams, Gateway, Message, PromptTemplate, Role};
use nllf_core::models::tree::NodeKind;
use nllf_core::models::{DecisionTree, TreeParams};
use nllf_core::nllfg::sigmoid_scores;
use nllf_core::selection::SelectionReport;
use nllf_core::weak_labeler::{extract_answer, LabelMode, Lexicon};

fn corpus_strategy() -> impl Strategy<Value = Corpus> {
    prop::collection::vec(("[a-z][a-z ]{0,29}", "[a-zA-Z0-9 ,.?!]{0,30}", any::<bool>()), 3..40).prop_map(|rows| {
        let examples = rows
            .into_iter()
            .enumerate()
            .map(|(i, (a, b, pos))| {
                let gold = if pos { Label::Positive } else { Label::Negative };
                Example::new(format!("x{i}"), &[("question", &a), ("answer", &b)], Some(gold))
            })
            .collect();
        Corpus::new(examples).unwrap()
    })
}

fn schema() -> Vec<String> {
    vec!["question".into(), "answer".into()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn corpus_round_trips_through_jsonl(c in corpus_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        c.save(&p).unwrap();
        let back = load_corpus(&p, &schema()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn split_is_deterministic_and_partitions(c in corpus_strategy(), seed in any::<u64>()) {
        let spec = SplitSpec::random(0.7, 0.1, 0.2, seed);
        let a = split(&c, &spec).unwrap();
        let b = split(&c, &spec).unwrap();
        prop_assert_eq!(&a, &b);
        let ids = |x: &Corpus| x.examples.iter().map(|e| e.id.clone()).collect::<BTreeSet<_>>();
        let (tr, va, te) = (ids(&a.train), ids(&a.val), ids(&a.test));
        prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        let all: BTreeSet<String> = tr.union(&va).chain(&te).cloned().collect();
        prop_assert_eq!(all, ids(&c));
    }

    #[test]
    fn task_config_validation_matches_invariant(p_q in 0.0f64..1.2, p_l in 0.0f64..1.2, c in 0usize..200, c_plus in 0usize..200) {
        let t = TaskConfig { p_q, p_l, c, c_plus, metric_mode: MetricMode::Macro };
        let ok = 0.0 < p_q && p_q <= p_l && p_l <= 1.0 && c <= c_plus;
        prop_assert_eq!(t.validate().is_ok(), ok);
    }

    #[test]
    fn full_bindings_leave_no_placeholder(a in "[^{}]{0,40}", b in "[^{}]{0,40}") {
        let t = PromptTemplate::new("t", &["a", "b"], vec![(Role::System, "A={{a}}"), (Role::User, "{{b}} then {{a}}")]).unwrap();
        let bind = BTreeMap::from([("a".to_string(), a.clone()), ("b".to_string(), b.clone())]);
        let r = t.render(&bind).unwrap();
        prop_assert!(r.messages.iter().all(|m| !m.content.contains("{{")));
        prop_assert_eq!(&r.messages[1].content, &format!("{b} then {a}"));
    }

    #[test]
    fn cache_invokes_backend_once_per_key(keys in prop::collection::vec(0u8..12, 1..60)) {
        let calls = Arc::new(AtomicUsize::new(0));
        let counter = calls.clone();
        let backend = MockBackend::from_fn(move |m: &[Message]| {
            counter.fetch_add(1, Ordering::SeqCst);
            Ok(format!("echo {}", m[0].content))
        });
        let dir = tempfile::tempdir().unwrap();
        let gw = Gateway::new(Arc::new(backend)).with_cache_dir(dir.path());
        let params = CompletionParams::new("mock");
        for k in &keys {
            let r = gw.complete(&[Message::user(format!("k{k}"))], &params).unwrap();
            prop_assert_eq!(r.text, format!("echo k{k}"));
        }
        let distinct = keys.iter().collect::<BTreeSet<_>>().len();
        prop_assert_eq!(calls.load(Ordering::SeqCst), distinct);
        prop_assert_eq!(gw.stats().backend_calls as usize, distinct);
    }

    #[test]
    fn parsed_questions_are_valid(text in "(([0-9]{1,2}[.)] |- )?[A-Za-z ,]{0,30}\\??\n){0,8}") {
        for q in parse_questions(&text) {
            prop_assert!(!q.trim().is_empty() && q.ends_with('?'));
            prop_assert!(Bsq::new("q", q.clone(), Origin::Llm).is_ok());
        }
    }

    #[test]
    fn augmentation_is_idempotent(words in prop::collection::vec("[a-z]{3,8}", 1..12), extra in prop::collection::vec("[a-z]{3,8}", 0..12)) {
        let mk = |prefix: &str, ws: &[String], origin| ws.iter().enumerate()
            .map(|(i, w)| Bsq::new(format!("{prefix}{i}"), format!("Is there a {w}?"), origin).unwrap())
            .collect::<Vec<_>>();
        let curated = mk("c", &words, Origin::Llm);
        let sources = AugmentSources { human: mk("h", &extra, Origin::Human), ..Default::default() };
        let once = augment(&curated, &sources).unwrap();
        let twice = augment(&once, &sources).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.len() >= curated.iter().map(|b| b.text.clone()).collect::<BTreeSet<_>>().len());
    }

    #[test]
    fn answer_extraction_is_total_and_pure(raw in ".{0,80}", cot in any::<bool>()) {
        let mode = if cot { LabelMode::Cot } else { LabelMode::Direct };
        let lex = Lexicon::english();
        prop_assert_eq!(extract_answer(&raw, mode, &lex), extract_answer(&raw, mode, &lex));
    }

    #[test]
    fn scores_stay_inside_the_unit_interval(a in -1e300f64..1e300, b in -1e300f64..1e300) {
        let (y, n) = sigmoid_scores(&[a, b]);
        prop_assert!(y > 0.0 && y < 1.0 && n > 0.0 && n < 1.0);
    }

    #[test]
    fn expert_rules_are_total_and_pure(text in ".{0,60}", other in ".{0,60}") {
        let rules = vec![
            ExpertRule { id: "v".into(), category: "traditional".into(), name: "vowels".into(), field: Some("answer".into()), evaluator: Evaluator::CharProportion { class: CharClass::Vowel } },
            ExpertRule { id: "r".into(), category: "traditional".into(), name: "run".into(), field: Some("answer".into()), evaluator: Evaluator::MaxRun { class: CharClass::Consonant } },
            ExpertRule { id: "n".into(), category: "traditional".into(), name: "numbers".into(), field: Some("answer".into()), evaluator: Evaluator::LongestNumber },
            ExpertRule { id: "k".into(), category: "keyword".into(), name: "kw".into(), field: None, evaluator: Evaluator::Regex { pattern: r"\bno\b".into(), output: Output::Count } },
            ExpertRule { id: "o".into(), category: "contextual".into(), name: "overlap".into(), field: Some("answer".into()), evaluator: Evaluator::WordOverlap { other_field: "question".into(), only: vec![] } },
        ];
        let bank = ExpertBank::new(rules).unwrap();
        let fields = BTreeMap::from([("question".to_string(), other.clone()), ("answer".to_string(), text.clone())]);
        let a = bank.evaluate(&fields, &schema());
        prop_assert!(a.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert_eq!(&a, &bank.evaluate(&fields, &schema()));
    }

    #[test]
    fn threshold_is_monotone(counts in prop::collection::vec(0usize..=15, 1..30), t1 in 0usize..16, t2 in 0usize..16) {
        let report = SelectionReport {
            feature_ids: (0..counts.len()).map(|i| format!("f{i}")).collect(),
            selected: counts.iter().map(|&c| c >= 5).collect(),
            counts: counts.clone(),
            folds: 15,
            threshold: 5,
            ga: Default::default(),
            mode: MetricMode::PositiveClass,
            fitness: "test".into(),
            fold_results: Vec::new(),
        };
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let a: BTreeSet<String> = report.with_threshold(lo).selected_ids().into_iter().collect();
        let b: BTreeSet<String> = report.with_threshold(hi).selected_ids().into_iter().collect();
        prop_assert!(b.is_subset(&a));
        for (i, id) in report.feature_ids.iter().enumerate() {
            prop_assert_eq!(a.contains(id), counts[i] >= lo);
        }
    }

    #[test]
    fn metrics_match_confusion_counts(tp in 0usize..200, fp in 0usize..200, tn in 0usize..200, fn_ in 0usize..200) {
        prop_assume!(tp + fp + tn + fn_ > 0);
        let c = Confusion { tp, fp, tn, fn_ };
        let r = EvalReport::from_confusion(c, MetricMode::Macro);
        let d = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        prop_assert_eq!(r.positive.precision, d(tp, tp + fp));
        prop_assert_eq!(r.negative.recall, d(tn, tn + fp));
        prop_assert_eq!(r.accuracy, d(tp + tn, tp + fp + tn + fn_));
        prop_assert_eq!(r.headline.2, (r.positive.f1 + r.negative.f1) / 2.0);
        let p = EvalReport::from_confusion(c, MetricMode::PositiveClass);
        prop_assert_eq!(p.headline.2, p.positive.f1);
    }
}

fn tree_data() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, usize)> {
    (4usize..60, 1usize..5, 1usize..7).prop_flat_map(|(n, width, depth)| {
        (
            prop::collection::vec(prop::collection::vec((0u8..8).prop_map(|v| v as f64 / 4.0), width), n),
            prop::collection::vec(0usize..2, n),
            Just(depth),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trees_respect_structure_and_replay((rows, y, depth) in tree_data(), probe in prop::collection::vec(-1.0f64..3.0, 8)) {
        let width = rows[0].len();
        let ids: Vec<String> = (0..width).map(|j| format!("f{j}")).collect();
        let params = TreeParams { max_depth: depth, ..TreeParams::default() };
        let t = DecisionTree::fit(&rows, &y, &ids, &ids, &params).unwrap();
        prop_assert!(t.depth() <= depth);
        for node in &t.nodes {
            if let NodeKind::Split { feature, left, right, .. } = node.kind {
                prop_assert!(feature < width);
                let (l, r) = (&t.nodes[left].counts, &t.nodes[right].counts);
                prop_assert_eq!([l[0] + r[0], l[1] + r[1]], node.counts);
            }
        }
        let row: Vec<f64> = probe[..width].to_vec();
        let path = t.decision_path(&row);
        prop_assert_eq!(t.replay(&path), Some(t.predict(&row)));
        for s in &path.steps {
            prop_assert_eq!(s.went_left, row[s.feature] <= s.threshold);
        }
    }

    #[test]
    fn permuting_columns_keeps_predictions((rows, y, depth) in tree_data(), probes in prop::collection::vec(prop::collection::vec(-1.0f64..3.0, 4), 10)) {
        let width = rows[0].len();
        let ids: Vec<String> = (0..width).map(|j| format!("f{j}")).collect();
        let params = TreeParams { max_depth: depth, ..TreeParams::default() };
        let perm: Vec<usize> = (0..width).rev().collect();
        let permuted: Vec<Vec<f64>> = rows.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
        let pids: Vec<String> = perm.iter().map(|&j| ids[j].clone()).collect();
        let a = DecisionTree::fit(&rows, &y, &ids, &ids, &params).unwrap();
        let b = DecisionTree::fit(&permuted, &y, &pids, &pids, &params).unwrap();
        for p in &probes {
            let row = &p[..width];
            let prow: Vec<f64> = perm.iter().map(|&j| row[j]).collect();
            prop_assert_eq!(a.predict(row), b.predict(&prow));
        }
    }
}
