use std::collections::BTreeMap;
use std::path::PathBuf;

use dillema::consensus::{
    analyze, consensus, filter_workers, parse_control_key, read_responses, Answer, ConsensusError, ControlKey,
    DiscardReason, Verdict, WorkerResponse, WorkerThresholds,
};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/consensus").join(name)
}

fn load() -> (Vec<WorkerResponse>, ControlKey) {
    let responses = read_responses(std::fs::File::open(fixture("responses.csv")).unwrap()).unwrap();
    let key = parse_control_key(&std::fs::read_to_string(fixture("control_key.json")).unwrap()).unwrap();
    (responses, key)
}

#[test]
fn fixture_filters_to_expected_count_and_rates() {
    let (responses, key) = load();
    assert_eq!(responses.len(), 2500);
    let report = analyze(&responses, &WorkerThresholds::default(), &key).unwrap();
    assert_eq!(report.kept_responses, 2380);
    assert_eq!(report.discarded_responses, 120);
    assert_eq!(report.discarded_workers.len(), 6);

    let shown: BTreeMap<&str, String> = report.by_type.iter().map(|(t, r)| (t.as_str(), r.percent_display())).collect();
    assert_eq!(shown["classification"], "99.7%");
    assert_eq!(shown["road"], "98.9%");
    assert_eq!(shown["vehicle"], "100.0%");
    assert_eq!(shown["pedestrian"], "84.6%");
    assert!(!shown.contains_key("control"));

    let overall = report.overall.as_ref().unwrap();
    assert_eq!(overall.valid + overall.invalid + overall.discarded, report.questions.len());
    let per_type: usize = report.by_type.values().map(|r| r.valid + r.invalid + r.discarded).sum();
    assert_eq!(per_type, report.questions.len());

    let road = &report.by_type["road"];
    assert_eq!((road.valid, road.invalid, road.discarded), (92, 1, 7));
}

#[test]
fn each_filter_rule_catches_its_worker() {
    let (responses, key) = load();
    let filtered = filter_workers(&responses, &WorkerThresholds::default(), &key).unwrap();
    let reasons = |w: &str| filtered.reasons.get(w).cloned().unwrap_or_default();
    assert!(reasons("x-low-approval").iter().any(|r| matches!(r, DiscardReason::Approval { .. })));
    assert!(reasons("x-lower-approval").iter().any(|r| matches!(r, DiscardReason::Approval { .. })));
    assert!(reasons("x-few-tasks").iter().any(|r| matches!(r, DiscardReason::Tasks { .. })));
    for w in ["x-control-1", "x-control-2", "x-control-3"] {
        assert!(reasons(w).iter().any(|r| matches!(r, DiscardReason::Control { .. })), "{w}");
    }
}

/// Straight re-derivation of the verdict counts, independent of `analyze`.
#[test]
fn verdicts_match_independent_tally() {
    let (responses, key) = load();
    let mut bad_workers = std::collections::BTreeSet::new();
    for r in &responses {
        let control_failed = r.is_control && key.get(&r.question_id) != Some(&r.answer);
        if r.approval_rate <= 0.95 || r.completed_tasks < 50 || control_failed {
            bad_workers.insert(r.worker_id.clone());
        }
    }
    let mut votes: BTreeMap<&str, (u32, u32)> = BTreeMap::new();
    for r in responses.iter().filter(|r| !r.is_control) {
        let e = votes.entry(&r.question_id).or_default();
        if !bad_workers.contains(&r.worker_id) {
            match r.answer {
                Answer::Yes => e.0 += 1,
                Answer::No => e.1 += 1,
            }
        }
    }
    let report = analyze(&responses, &WorkerThresholds::default(), &key).unwrap();
    assert_eq!(report.questions.len(), votes.len());
    for q in &report.questions {
        let (yes, no) = votes[q.outcome.question_id.as_str()];
        let expected = if yes >= 4 {
            Verdict::Valid
        } else if no >= 4 {
            Verdict::Invalid
        } else {
            Verdict::Discarded
        };
        assert_eq!(q.outcome.verdict, expected, "{}", q.outcome.question_id);
    }
}

#[test]
fn approval_threshold_is_strict_and_task_threshold_inclusive() {
    let key = ControlKey::new();
    let r = |worker: &str, approval: f64, tasks: u32| WorkerResponse {
        worker_id: worker.into(),
        question_id: "q".into(),
        question_type: "t".into(),
        answer: Answer::Yes,
        is_control: false,
        approval_rate: approval,
        completed_tasks: tasks,
    };
    let responses = vec![r("at", 0.95, 100), r("above", 0.951, 100), r("few", 0.99, 49), r("enough", 0.99, 50)];
    let filtered = filter_workers(&responses, &WorkerThresholds::default(), &key).unwrap();
    let kept: Vec<&str> = filtered.kept.iter().map(|r| r.worker_id.as_str()).collect();
    assert_eq!(kept, ["above", "enough"]);
}

#[test]
fn unknown_control_question_is_an_error() {
    let responses = vec![WorkerResponse {
        worker_id: "w".into(),
        question_id: "ctrl-missing".into(),
        question_type: "control".into(),
        answer: Answer::No,
        is_control: true,
        approval_rate: 0.99,
        completed_tasks: 100,
    }];
    let err = analyze(&responses, &WorkerThresholds::default(), &ControlKey::new()).unwrap_err();
    assert!(matches!(err, ConsensusError::UnknownControlQuestion { .. }), "{err:?}");
}

#[test]
fn malformed_csv_reports_a_line() {
    let text = "worker_id,question_id,question_type,answer,is_control,approval_rate,completed_tasks\n\
                w1,q1,road,yes,false,0.99,80\n\
                w2,q1,road,maybe,false,0.99,80\n";
    let err = read_responses(text.as_bytes()).unwrap_err();
    assert!(matches!(err, ConsensusError::Csv { line: 3, .. }), "{err:?}");
}

fn answers() -> impl Strategy<Value = Vec<Answer>> {
    prop::collection::vec(prop_oneof![Just(Answer::Yes), Just(Answer::No)], 0..=5)
}

proptest! {
    #[test]
    fn verdict_ignores_vote_order(mut votes in answers(), seed in any::<u64>()) {
        let before = consensus("q", &votes);
        let n = votes.len();
        if n > 1 {
            votes.rotate_left((seed as usize) % n);
            votes.reverse();
        }
        prop_assert_eq!(consensus("q", &votes), before);
    }

    #[test]
    fn four_agreeing_votes_decide(votes in answers()) {
        let out = consensus("q", &votes);
        prop_assert_eq!(out.yes + out.no, votes.len());
        let expected = match (out.yes >= 4, out.no >= 4) {
            (true, _) => Verdict::Valid,
            (_, true) => Verdict::Invalid,
            _ => Verdict::Discarded,
        };
        prop_assert_eq!(out.verdict, expected);
        if votes.len() <= 3 {
            prop_assert_eq!(out.verdict, Verdict::Discarded);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn analysis_is_order_invariant_and_filtering_idempotent(seed in any::<u64>()) {
        let (mut responses, key) = load();
        let base = analyze(&responses, &WorkerThresholds::default(), &key).unwrap();
        let n = responses.len();
        let mut state = seed | 1;
        for i in (1..n).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            responses.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let shuffled = analyze(&responses, &WorkerThresholds::default(), &key).unwrap();
        prop_assert_eq!(&shuffled.questions, &base.questions);
        prop_assert_eq!(&shuffled.by_type, &base.by_type);

        let once = filter_workers(&responses, &WorkerThresholds::default(), &key).unwrap();
        let twice = filter_workers(&once.kept, &WorkerThresholds::default(), &key).unwrap();
        prop_assert_eq!(twice.kept, once.kept);
        prop_assert!(twice.discarded.is_empty());
    }
}
