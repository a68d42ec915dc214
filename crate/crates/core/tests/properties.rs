//! Invariants of the data model checked as properties.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use agora::audit::{chain_digest, verify_log, EventLog, LogVerdict, GENESIS_DIGEST};
use agora::evaluator::{assemble_report, define_suite, EvalCase, Metric};
use agora::gateway::{count_tokens, Gateway, ModelRequest, ModelSession, ScriptedBackend, ScriptedRule, UsageMeter};
use agora::goal::{DetectorEvent, GoalCreator, Modality, Origin};
use agora::guardrails::{GuardModality, GuardPipeline, GuardRule, GuardVerdict, Scope};
use agora::memory::{embed, Document, KnowledgeBase};
use agora::planning::{validate_plan, Plan, StepSpec};

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,8}"
}

fn sentence(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..=max).prop_map(|w| w.join(" "))
}

fn priced_gateway(price: f64) -> (Gateway, std::sync::Arc<ScriptedBackend>) {
    let backend = std::sync::Arc::new(
        ScriptedBackend::new(vec![
            ScriptedRule::new("short", 1, "re:^a", vec!["x".into(), "x y z".into()]).unwrap(),
            ScriptedRule::new("any", 0, "*", vec!["one two".into()]).unwrap(),
        ])
        .unwrap()
        .with_unit_price(price),
    );
    (Gateway::new(backend.clone()), backend)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // ---- gateway ----------------------------------------------------------

    #[test]
    fn usage_follows_token_counts_and_price(prompts in prop::collection::vec(sentence(12), 1..8), price in 0.0f64..3.0) {
        let (gw, backend) = priced_gateway(price);
        for (i, p) in prompts.iter().enumerate() {
            let r = gw.one_shot_query(&ModelRequest::new(p.clone(), "actor").with_seed(i as u64)).unwrap();
            prop_assert_eq!(r.usage.prompt_tokens, count_tokens(p));
            prop_assert_eq!(r.usage.completion_tokens, count_tokens(&r.text));
            let expected = (r.usage.prompt_tokens + r.usage.completion_tokens) as f64 * price;
            prop_assert!((r.cost_units - expected).abs() <= 1e-9 * expected.max(1.0));
        }
        use agora::gateway::ModelBackend;
        prop_assert_eq!(gw.usage(), UsageMeter::replay(&backend.call_log()));
    }

    #[test]
    fn meter_totals_are_sums_and_monotone(calls in prop::collection::vec((0usize..4, sentence(6)), 1..20)) {
        let (gw, _) = priced_gateway(0.5);
        let mut last = 0u64;
        for (actor, prompt) in calls {
            gw.one_shot_query(&ModelRequest::new(prompt, format!("a{actor}"))).unwrap();
            let m = gw.usage();
            let prompt_sum: u64 = m.per_actor.values().map(|t| t.prompt_tokens).sum();
            let completion_sum: u64 = m.per_actor.values().map(|t| t.completion_tokens).sum();
            prop_assert_eq!(prompt_sum, m.total.prompt_tokens);
            prop_assert_eq!(completion_sum, m.total.completion_tokens);
            let now = m.total.prompt_tokens + m.total.completion_tokens;
            prop_assert!(now >= last);
            last = now;
        }
    }

    #[test]
    fn incremental_session_counts_one_call_per_increment(
        increments in prop::collection::vec(sentence(10), 1..12),
        window in 8usize..60,
    ) {
        let (gw, backend) = priced_gateway(0.0);
        let mut session = ModelSession::new("s", "planner", window, 2).unwrap();
        use agora::gateway::ModelBackend;
        let before = backend.call_count();
        let mut sent = 0;
        for inc in &increments {
            if count_tokens(inc) > session.increment_capacity() {
                prop_assert!(gw.incremental_query(&mut session, inc).is_err());
                continue;
            }
            gw.incremental_query(&mut session, inc).unwrap();
            sent += 1;
        }
        prop_assert_eq!(backend.call_count() - before, sent);
        prop_assert_eq!(session.query_count, session.history.len());
        prop_assert_eq!(session.query_count, sent);
        prop_assert!(session.history.iter().all(|t| count_tokens(&t.request.prompt_text) <= window));
    }

    // ---- goals ------------------------------------------------------------

    #[test]
    fn proactive_origin_iff_detector_context(
        confidences in prop::collection::vec(0.0f64..=1.0, 0..5),
        threshold in 0.0f64..=1.0,
        utterance in prop::option::of(sentence(5)),
    ) {
        let events: Vec<DetectorEvent> = confidences
            .iter()
            .enumerate()
            .map(|(i, c)| DetectorEvent::new(&format!("d{i}"), Modality::Gesture, &format!("seen {i}"), *c))
            .collect();
        let mut creator = GoalCreator::new();
        match creator.create_goal_proactive(utterance.as_deref(), &events, &KnowledgeBase::new(), threshold, 0) {
            Ok((goal, note)) => {
                prop_assert_eq!(goal.origin == Origin::Proactive, goal.has_detector_context());
                prop_assert!(!goal.description.trim().is_empty());
                let admitted = confidences.iter().filter(|c| **c >= threshold).count();
                prop_assert_eq!(note.captured.len(), admitted);
                let stamps: Vec<u64> = goal.context.iter().map(|c| c.timestamp).collect();
                prop_assert!(stamps.windows(2).all(|w| w[0] <= w[1]));
                for c in &goal.context {
                    prop_assert!((0.0..=1.0).contains(&c.confidence));
                }
            }
            Err(_) => {
                prop_assert!(utterance.is_none());
                prop_assert!(confidences.iter().all(|c| *c < threshold));
            }
        }
    }

    // ---- memory -----------------------------------------------------------

    #[test]
    fn embeddings_are_unit_or_zero(text in "[a-zA-Z ]{0,60}") {
        let e = embed(&text);
        if text.split_whitespace().next().is_none() {
            prop_assert!(e.0.iter().all(|x| *x == 0.0));
        } else {
            prop_assert!((e.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stored_embeddings_are_recomputable(docs in prop::collection::vec(sentence(8), 1..30)) {
        let mut kb = KnowledgeBase::new();
        for (i, d) in docs.iter().enumerate() {
            kb.index(Document::new(format!("d{i}"), d.clone())).unwrap();
        }
        prop_assert!(kb.embeddings_consistent());
        for (i, d) in docs.iter().enumerate() {
            prop_assert_eq!(kb.embedding(&format!("d{i}")).unwrap(), &embed(d));
        }
        prop_assert!(kb.index(Document::new("d0", "again")).is_err());
    }

    #[test]
    fn retrieval_prefixes_and_order(docs in prop::collection::vec(sentence(8), 1..30), query in sentence(4)) {
        let mut kb = KnowledgeBase::new();
        for (i, d) in docs.iter().enumerate() {
            kb.index(Document::new(format!("d{i:02}"), d.clone())).unwrap();
        }
        let all = kb.retrieve(&query, docs.len(), None);
        prop_assert_eq!(all.len(), docs.len());
        prop_assert!(all.windows(2).all(|w| w[0].similarity >= w[1].similarity - 1e-12));
        for k in 0..=docs.len() {
            let ids: Vec<_> = kb.retrieve(&query, k, None).into_iter().map(|r| r.doc_id).collect();
            let prefix: Vec<_> = all[..k].iter().map(|r| r.doc_id.clone()).collect();
            prop_assert_eq!(ids, prefix);
        }
    }

    // ---- planning ---------------------------------------------------------

    #[test]
    fn linear_plans_obey_the_chain_law(descs in prop::collection::vec(sentence(4), 1..10)) {
        let specs: Vec<StepSpec> = descs.iter().map(|d| StepSpec::new(d, None)).collect();
        let plan = Plan::linear("p", "g", &specs);
        prop_assert!(validate_plan(&plan).is_ok());
        let ids: BTreeSet<_> = plan.steps.iter().map(|s| s.step_id.clone()).collect();
        let depended: BTreeSet<_> = plan.steps.iter().flat_map(|s| s.depends_on.iter().cloned()).collect();
        prop_assert_eq!(ids.difference(&depended).count(), 1);
    }

    #[test]
    fn extra_dependencies_break_single_path(n in 3usize..10, a in 0usize..10, b in 0usize..10) {
        let specs: Vec<StepSpec> = (0..n).map(|i| StepSpec::new(&format!("step {i}"), None)).collect();
        let mut plan = Plan::linear("p", "g", &specs);
        let (from, to) = (a % n, b % n);
        prop_assume!(from != to && from != to + 1);
        let target = plan.steps[to].step_id.clone();
        plan.steps[from].depends_on.insert(target);
        prop_assert!(validate_plan(&plan).is_err());
    }

    // ---- guardrails -------------------------------------------------------

    #[test]
    fn pass_is_identity_and_transform_changes(text in "[a-z0-9 @.+-]{0,80}") {
        let pipeline = GuardPipeline::from_rules(vec![
            GuardRule::keyword_block("kw", Scope::Both, &["forbidden"], 0),
            GuardRule::redact("email", Scope::Both, "EMAIL", "EMAIL", 1),
        ]).unwrap();
        let d = pipeline.check_output(&text, GuardModality::Text);
        match d.verdict {
            GuardVerdict::Pass => prop_assert_eq!(d.content_out.as_deref().unwrap_or(&text), text.as_str()),
            GuardVerdict::Transform => {
                prop_assert_ne!(d.content_out.as_deref(), Some(text.as_str()));
                prop_assert!(!d.fired_rules.contains(&"kw".to_string()));
            }
            GuardVerdict::Block => prop_assert!(text.contains("forbidden")),
        }
    }

    // ---- evaluator --------------------------------------------------------

    #[test]
    fn aggregate_is_mean_and_flags_follow_thresholds(
        scores in prop::collection::vec(prop::bool::ANY, 1..20),
        pass in 0.1f64..=1.0,
    ) {
        let cases: Vec<EvalCase> = (0..scores.len())
            .map(|i| EvalCase::new(&format!("c{i:02}"), "x", serde_json::json!("y"), Metric::exact()))
            .collect();
        let suite = define_suite("s", cases, pass, None).unwrap();
        let results: BTreeMap<String, (f64, Option<String>, Option<String>)> = scores
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("c{i:02}"), (if *s { 1.0 } else { 0.0 }, None, None)))
            .collect();
        let report = assemble_report(&suite, results);
        let hits = scores.iter().filter(|s| **s).count() as f64;
        prop_assert!((report.aggregate - hits / scores.len() as f64).abs() < 1e-12);
        for c in report.per_case.values() {
            prop_assert_eq!(c.passed, c.score >= suite.pass_threshold);
            prop_assert_eq!(c.near_miss, !c.passed && c.score >= suite.near_miss_threshold);
        }
        let passed = report.per_case.values().filter(|c| c.passed).count() as f64;
        prop_assert!((report.pass_rate - passed / scores.len() as f64).abs() < 1e-12);
    }

    // ---- accountability ---------------------------------------------------

    #[test]
    fn digests_chain_from_genesis(payloads in prop::collection::vec(sentence(5), 1..40)) {
        let log = EventLog::new();
        for p in &payloads {
            log.append("actor", "note", &serde_json::json!({"text": p}));
        }
        let records = log.records();
        let mut prev = GENESIS_DIGEST;
        for (i, r) in records.iter().enumerate() {
            prop_assert_eq!(r.seq, i as u64 + 1);
            let d = chain_digest(r.seq, &r.actor_id, &r.event_type, &r.payload, &prev);
            prop_assert_eq!(hex::encode(d), r.digest.clone());
            prev = d;
        }
        prop_assert_eq!(verify_log(&records), LogVerdict::Intact);
        if records.len() > 1 {
            let mut dropped = records.clone();
            dropped.remove(0);
            prop_assert_ne!(verify_log(&dropped), LogVerdict::Intact);
        }
    }
}
