//! Property tests for records, parsers, retries, plans, manifests and edge maps.

mod common;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use common::random_scene;
use dillema::backend::{BackendClient, BackendError, LanguageModel, MockConfig, MockTransport, Role, Transport};
use dillema::conditioning::{canny, CannyParams, EdgeMap, LumaGrid};
use dillema::dataset::{load_manifest, make_plan, write_manifest, DatasetManifest, ManifestEntry, SamplingPlan};
use dillema::hash::sha256_hex;
use dillema::model::{
    advance, new_record, AlternativeMap, Augmentation, Caption, CaptionSource, ConditioningRef, EditBudget,
    GroundTruth, ImageRef, KeywordSet, MetamorphicRecord, Stage, StagePayload, TaskDescription, TaskKind, TestCase,
};
use dillema::prompt::{
    format_string_list, parse_keywords, parse_stage_response_bytes, run_with_retry, select_edits, PromptStage,
    RetryPolicy,
};
use indexmap::IndexMap;
use proptest::prelude::*;
use serde_json::json;

const WORDS: [&str; 8] = ["red", "blue", "sunny", "foggy", "night", "city", "forest", "wooden"];
const ALTS: [&str; 6] = ["green", "snowy", "dusk", "rainy", "desert", "metal"];

/// Every payload of a pipeline-shaped record, in stage order.
fn payloads(
    keywords: &[&str],
    alt_picks: &[(usize, usize)],
    budget: EditBudget,
    seed: u64,
    augs: u32,
) -> Vec<StagePayload> {
    let text = format!("A {} scene. It looks calm.", keywords.join(" "));
    let caption = Caption::from_text(&text, CaptionSource::Captioner).unwrap();
    let kws = KeywordSet::new(keywords.iter().map(|k| k.to_string()).collect()).unwrap();
    let entries: IndexMap<String, Vec<String>> = keywords
        .iter()
        .zip(alt_picks)
        .map(|(k, (a, b))| {
            let mut alts = vec![ALTS[*a].to_string()];
            if b != a {
                alts.push(ALTS[*b].to_string());
            }
            (k.to_string(), alts)
        })
        .collect();
    let alternatives = AlternativeMap::new(entries).unwrap();
    let edits = select_edits(&alternatives, budget, seed);
    let mut counter = text.clone();
    for e in &edits.applied {
        counter = counter.replace(&e.keyword, &e.alternative);
    }
    let counterfactual = Caption::from_text(&counter, CaptionSource::Counterfactual).unwrap();
    let conditioning =
        ConditioningRef { image_ref: ImageRef::content(sha256_hex(text.as_bytes())), params: CannyParams::default() };
    let mut out = vec![
        StagePayload::Caption(caption),
        StagePayload::Keywords(kws),
        StagePayload::Alternatives(alternatives),
        StagePayload::Edits(edits),
        StagePayload::Counterfactual(counterfactual),
        StagePayload::Conditioning(conditioning),
    ];
    for i in 0..augs {
        let image = ImageRef::content(sha256_hex(format!("{seed}/{i}").as_bytes()));
        out.push(StagePayload::Augmentation(Augmentation::inherited(i, seed.wrapping_add(i as u64), image)));
    }
    out
}

fn base_record(label: u32) -> MetamorphicRecord {
    let case = TestCase {
        id: format!("case-{label}"),
        image_ref: ImageRef::Path(format!("images/{label}.png")),
        ground_truth: GroundTruth::Classification { label_id: label, label_name: format!("class {label}") },
    };
    new_record(case, TaskDescription::default_for(TaskKind::Classification))
}

fn budget() -> impl Strategy<Value = EditBudget> {
    prop_oneof![(0u32..4).prop_map(EditBudget::Limit), Just(EditBudget::All)]
}

/// Keywords, alternative picks, budget, seed, augmentation count, payloads to apply.
type RecordInputs = (Vec<&'static str>, Vec<(usize, usize)>, EditBudget, u64, u32, usize);

fn record_inputs() -> impl Strategy<Value = RecordInputs> {
    (
        prop::sample::subsequence(WORDS.to_vec(), 1..=4),
        prop::collection::vec((0..ALTS.len(), 0..ALTS.len()), 4),
        budget(),
        any::<u64>(),
        0u32..5,
        0usize..=11,
    )
}

proptest! {
    #[test]
    fn ledger_line_round_trips((kw, picks, budget, seed, augs, len) in record_inputs(), label in 0u32..1000) {
        let mut record = base_record(label);
        for p in payloads(&kw, &picks, budget, seed, augs).into_iter().take(len) {
            record = advance(&record, p).unwrap();
        }
        let line = serde_json::to_string(&record).unwrap();
        prop_assert!(!line.contains('\n'));
        let back: MetamorphicRecord = serde_json::from_str(&line).unwrap();
        prop_assert_eq!(&back, &record);
        prop_assert!(back.validate().is_ok());
    }

    #[test]
    fn populated_stages_only_grow_in_order((kw, picks, budget, seed, augs, _) in record_inputs(), skip in 0usize..6) {
        let all = payloads(&kw, &picks, budget, seed, augs);
        let mut record = base_record(0);
        let mut previous: Vec<Stage> = Vec::new();
        for (i, p) in all.iter().enumerate() {
            // Any payload other than the expected one is refused and leaves the record untouched.
            if let Some(wrong) = all.iter().skip(skip).find(|q| q.stage() != record.next_stage()) {
                prop_assert!(advance(&record, wrong.clone()).is_err());
            }
            let next = advance(&record, p.clone()).unwrap();
            let stages = next.populated_stages();
            prop_assert!(previous.iter().all(|s| stages.contains(s)));
            prop_assert_eq!(&stages[..], &Stage::ALL[..stages.len()]);
            prop_assert!(stages.len() == (i + 1).min(Stage::ALL.len()));
            previous = stages;
            record = next;
        }
    }

    #[test]
    fn stage_parsers_are_total(bytes in prop::collection::vec(any::<u8>(), 0..300)) {
        for stage in PromptStage::ALL {
            let _ = parse_stage_response_bytes(stage, &bytes);
        }
    }

    #[test]
    fn stage_parsers_are_total_on_marker_lines(body in "[ -~]{0,80}", stage_index in 0usize..3) {
        let stage = PromptStage::ALL[stage_index];
        for raw in [format!("{}{body}", stage.marker()), format!("noise\n{} {body}\nmore", stage.marker())] {
            let _ = parse_stage_response_bytes(stage, raw.as_bytes());
        }
    }

    #[test]
    fn keyword_lines_round_trip(words in prop::collection::vec("[a-z]{1,8}( [a-z]{1,8})?", 1..6)) {
        let mut seen = std::collections::BTreeSet::new();
        let words: Vec<String> = words.into_iter().filter(|w| seen.insert(w.clone())).collect();
        let parsed = parse_keywords(&format!("KEYWORDS: {}", format_string_list(&words))).unwrap();
        prop_assert_eq!(parsed.keywords, words);
    }
}

/// Fails the parse for seeds divisible by three.
struct Picky {
    calls: AtomicU32,
}

impl LanguageModel for Picky {
    fn complete(&self, _prompt: &str, seed: u64, _t: f64) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(if seed.is_multiple_of(3) { "no marker here".into() } else { format!("KEYWORDS: [\"k{}\"]", seed % 7) })
    }
}

proptest! {
    #[test]
    fn retry_is_deterministic(seed in any::<u64>(), attempts in 1u32..6) {
        let policy = RetryPolicy { max_attempts: attempts, ..RetryPolicy::new(seed) };
        let run = || {
            let llm = Picky { calls: AtomicU32::new(0) };
            let result = run_with_retry("prompt", parse_keywords, &policy, &llm);
            (result, llm.calls.load(Ordering::SeqCst))
        };
        let (a, calls_a) = run();
        let (b, calls_b) = run();
        prop_assert_eq!(calls_a, calls_b);
        match (a, b) {
            (Ok(x), Ok(y)) => {
                prop_assert_eq!(x.payload, y.payload);
                prop_assert_eq!(x.transcript, y.transcript);
                prop_assert_eq!(x.attempts_used, calls_a);
            }
            (Err(x), Err(y)) => {
                prop_assert_eq!(x, y);
                prop_assert_eq!(calls_a, attempts);
            }
            _ => prop_assert!(false, "runs disagree"),
        }
    }

    #[test]
    fn mock_llm_is_pure_under_concurrency(seed in any::<u64>(), rate in 0.0f64..1.0) {
        let mock = MockTransport::new(MockConfig { format_failure_rate: rate, ..Default::default() });
        let body = json!({ "prompt": "### Query\ncaption: \"A red car.\"\n### Output format\nKEYWORDS: [...]", "seed": seed, "temperature": 0.7, "max_tokens": 64 });
        let first = mock.post(Role::Llm, &body).unwrap();
        let replies: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..4).map(|_| s.spawn(|| mock.post(Role::Llm, &body).unwrap())).collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        prop_assert!(replies.iter().all(|r| *r == first));
        let client = BackendClient::new(std::sync::Arc::new(MockTransport::new(MockConfig::default())));
        prop_assert_eq!(client.complete("x", seed, 0.0).unwrap(), client.complete("x", seed, 0.0).unwrap());
    }
}

fn classification_manifest(labels: &[u32], classes: u32) -> DatasetManifest {
    let entries = labels
        .iter()
        .enumerate()
        .map(|(i, l)| ManifestEntry::labeled(format!("e{i}"), format!("img/{i}.png"), *l))
        .collect();
    DatasetManifest::in_memory("p", TaskDescription::default_for(TaskKind::Classification), classes, entries).unwrap()
}

proptest! {
    #[test]
    fn plans_are_balanced_and_repeatable(
        labels in prop::collection::vec(0u32..4, 1..80),
        per_class in 1u32..4,
        augs in 1u32..4,
        seed in any::<u64>(),
    ) {
        let manifest = classification_manifest(&labels, 4);
        let plan = SamplingPlan { per_class, augmentations_per_image: augs, seed };
        // Every declared class needs support, including ones with no entries.
        let mut support: BTreeMap<u32, u32> = (0..4).map(|c| (c, 0)).collect();
        for l in &labels {
            *support.entry(*l).or_default() += 1;
        }
        let result = make_plan(&manifest, &plan);
        if support.values().any(|n| *n < per_class) {
            prop_assert!(result.is_err());
            return Ok(());
        }
        let items = result.unwrap();
        prop_assert_eq!(&make_plan(&manifest, &plan).unwrap(), &items);
        let mut per: BTreeMap<u32, u32> = BTreeMap::new();
        for item in &items {
            *per.entry(labels[item.entry]).or_default() += 1;
        }
        for class in support.keys() {
            prop_assert_eq!(per[class], per_class * augs);
        }
    }

    #[test]
    fn manifest_write_then_load(labels in prop::collection::vec(0u32..5, 1..20)) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("img")).unwrap();
        let manifest = classification_manifest(&labels, 5);
        for e in &manifest.entries {
            std::fs::write(dir.path().join(&e.image), b"").unwrap();
        }
        let path = dir.path().join("m.jsonl");
        write_manifest(&path, &manifest.header(), &manifest.entries).unwrap();
        let loaded = load_manifest(&path).unwrap();
        prop_assert_eq!(loaded.entries, manifest.entries);
        prop_assert_eq!(loaded.class_count, 5);
    }
}

#[test]
fn threshold_monotonicity_on_fifty_images() {
    for seed in 0..50u64 {
        let grid = random_scene(seed * 7919 + 1, 40, 32);
        let loose = canny(&grid, &CannyParams { low_threshold: 0.05, high_threshold: 0.1, blur_sigma: 1.4 }).unwrap();
        let strict = canny(&grid, &CannyParams { low_threshold: 0.15, high_threshold: 0.3, blur_sigma: 1.4 }).unwrap();
        assert!(strict.is_subset_of(&loose), "seed {seed}");
        assert!(strict.edge_count() <= loose.edge_count());
    }
}

fn shifted_edges(map: &EdgeMap, dx: usize, dy: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..map.height() {
        for x in 0..map.width() {
            if map.is_edge(x, y) {
                out.push((x + dx, y + dy));
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn edge_map_keeps_dimensions(w in 1usize..48, h in 1usize..48, seed in any::<u64>(), sigma in 0.5f64..3.0) {
        let grid = random_scene(seed, w, h);
        let map = canny(&grid, &CannyParams { blur_sigma: sigma, ..CannyParams::default() }).unwrap();
        prop_assert_eq!((map.width(), map.height()), (w, h));
    }

    #[test]
    fn raising_thresholds_never_adds_edges(seed in any::<u64>(), low in 0.01f64..0.3, gap in 0.0f64..0.3, raise in 0.0f64..0.3) {
        let grid = random_scene(seed, 32, 32);
        let a = canny(&grid, &CannyParams { low_threshold: low, high_threshold: low + gap, blur_sigma: 1.4 }).unwrap();
        let b = canny(&grid, &CannyParams { low_threshold: low + raise, high_threshold: low + gap + raise, blur_sigma: 1.4 }).unwrap();
        prop_assert!(b.is_subset_of(&a));
    }

    #[test]
    fn interior_edges_follow_translation(x0 in 10usize..16, y0 in 10usize..16, dx in 0usize..6, dy in 0usize..6, level in 0.7f64..1.0) {
        let (w, h) = (56, 56);
        let scene = |ox: usize, oy: usize| {
            LumaGrid::from_fn(w, h, move |x, y| {
                if (ox..ox + 14).contains(&x) && (oy..oy + 12).contains(&y) { level } else { 0.0 }
            })
        };
        let base = canny(&scene(x0, y0), &CannyParams::default()).unwrap();
        let moved = canny(&scene(x0 + dx, y0 + dy), &CannyParams::default()).unwrap();
        prop_assert!(base.edge_count() > 0);
        prop_assert_eq!(shifted_edges(&base, dx, dy), shifted_edges(&moved, 0, 0));
    }
}

#[test]
fn edge_maps_agree_across_threads() {
    let grid = random_scene(99, 64, 48);
    let reference = canny(&grid, &CannyParams::default()).unwrap();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..8).map(|_| s.spawn(|| canny(&grid, &CannyParams::default()).unwrap())).collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), reference);
        }
    });
}
