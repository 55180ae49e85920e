//! The augmentation runner and the evaluation driver.
//!
//! Output layout of an augmentation run:
//!
//! ```text
//! <out>/ledger.jsonl            one MetamorphicRecord per line, in plan order
//! <out>/images/<sha256>.png     generated images
//! <out>/conditioning/<sha>.png  edge maps
//! <out>/summary.json            produced / failed / skipped
//! <out>/augmented.jsonl         manifest of the generated images
//! <out>/combined.jsonl          originals plus generated images
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use image::DynamicImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    encode_png, BackendClient, BackendError, CacheMode, Endpoint, GenerationRequest, HttpTransport, MockConfig,
    MockTransport, ReplayCache, Role, RoutedTransport, ThrottledTransport, Transport,
};
use crate::conditioning::canny_image;
use crate::config::{AugmentationMode, ConfigError, RunConfig};
use crate::dataset::{
    make_plan, write_augmented_manifest, DatasetError, DatasetManifest, LockFile, ManifestMode, ManifestSummary,
    SamplingPlan,
};
use crate::evaluation::{CaseOutcome, EvalError, EvaluationReport};
use crate::hash::{item_seed, scoped_seed, sha256_hex};
use crate::model::{
    advance, new_record, Augmentation, CaptionSource, ConditioningRef, ImageRef, MetamorphicRecord, ModelError,
    Provenance, StagePayload, TaskDescription,
};
use crate::prompt::grammar::{parse_alternatives, parse_caption, parse_keywords};
use crate::prompt::{
    detect_edits, render_alternatives_prompt, render_counterfactual_prompt, render_keywords_prompt, run_with_retry,
    select_edits, ParseError, RetryError, RetryPolicy, TemplateError, TemplateSet,
};

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const IMAGES_DIR: &str = "images";
pub const CONDITIONING_DIR: &str = "conditioning";
pub const AUGMENTED_MANIFEST: &str = "augmented.jsonl";
pub const COMBINED_MANIFEST: &str = "combined.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("ledger line {line}: {message}")]
    Ledger { line: usize, message: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Why one work item produced no record.
#[derive(Debug, Error)]
pub enum ItemError {
    #[error("{stage}: {source}")]
    Retry { stage: &'static str, source: RetryError },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Image(String),
}

impl ItemError {
    pub fn kind(&self) -> &'static str {
        match self {
            ItemError::Retry { source: RetryError::RetriesExhausted { .. }, .. } => "RetriesExhausted",
            ItemError::Retry { source: RetryError::Backend(_), .. } | ItemError::Backend(_) => "BackendError",
            ItemError::Retry { .. } => "RetryPolicy",
            ItemError::Template(_) => "TemplateError",
            ItemError::Model(_) => "InvariantViolation",
            ItemError::Dataset(_) => "DatasetError",
            ItemError::Image(_) => "ImageError",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedItem {
    pub id: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub planned: usize,
    /// Records already in the ledger before this run started.
    pub resumed: usize,
    pub produced: Vec<String>,
    pub failed: Vec<FailedItem>,
    pub skipped: Vec<SkippedItem>,
    pub augmentations: usize,
    pub ledger_records: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmented_manifest: Option<ManifestSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combined_manifest: Option<ManifestSummary>,
    /// Set when the run stopped early because of `limit`.
    pub interrupted: bool,
}

/// One ledger record's worth of work.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub record_id: String,
    pub entry: usize,
    pub case_id: String,
    /// `(augmentation index, generator seed)` pairs.
    pub augmentations: Vec<(u32, u64)>,
    /// Key the LLM-stage seeds derive from.
    pub seed_key: String,
}

/// Groups plan items into jobs, keeping plan order.
pub fn build_jobs(manifest: &DatasetManifest, config: &RunConfig) -> Result<Vec<Job>, DatasetError> {
    let items = match config.per_class {
        Some(per_class) => make_plan(
            manifest,
            &SamplingPlan { per_class, augmentations_per_image: config.augmentations, seed: config.seed },
        )?,
        None => manifest
            .entries
            .iter()
            .enumerate()
            .flat_map(|(entry, e)| {
                (0..config.augmentations).map(move |a| crate::dataset::PlanItem {
                    entry,
                    case_id: e.id.clone(),
                    augmentation_index: a,
                    seed: item_seed(config.seed, &e.id, a),
                })
            })
            .collect(),
    };
    let mut jobs: Vec<Job> = Vec::new();
    for item in items {
        match config.mode {
            AugmentationMode::SameCaption => match jobs.last_mut() {
                Some(job) if job.entry == item.entry => job.augmentations.push((item.augmentation_index, item.seed)),
                _ => jobs.push(Job {
                    record_id: item.case_id.clone(),
                    entry: item.entry,
                    seed_key: item.case_id.clone(),
                    case_id: item.case_id,
                    augmentations: vec![(item.augmentation_index, item.seed)],
                }),
            },
            AugmentationMode::PerAugmentation => {
                let id = format!("{}#{}", item.case_id, item.augmentation_index);
                jobs.push(Job {
                    record_id: id.clone(),
                    entry: item.entry,
                    seed_key: id,
                    case_id: item.case_id,
                    augmentations: vec![(item.augmentation_index, item.seed)],
                });
            }
        }
    }
    Ok(jobs)
}

/// Builds the transport stack: base (mock or HTTP), then cache, then throttle.
pub fn build_transport(config: &RunConfig, class_count: u32) -> Result<Arc<dyn Transport>, PipelineError> {
    let base: Box<dyn Transport> = if config.mock {
        Box::new(MockTransport::new(MockConfig { class_count, ..Default::default() }))
    } else {
        let mut routed = RoutedTransport::new();
        for role in Role::ALL {
            let endpoint = match config.endpoints.get(role.as_str()) {
                Some(url) => Endpoint::new(url.clone(), config.timeout_secs, token_from_env(role))?,
                None => match Endpoint::from_env(role, config.timeout_secs) {
                    Ok(e) => e,
                    Err(BackendError::NotConfigured { .. }) => continue,
                    Err(e) => return Err(e.into()),
                },
            };
            routed = routed.route(role, Box::new(HttpTransport::single(role, endpoint)?));
        }
        Box::new(routed)
    };
    let cached: Box<dyn Transport> = match &config.cache_dir {
        Some(dir) => {
            let mode = if config.replay_only { CacheMode::ReplayOnly } else { CacheMode::ReadWrite };
            Box::new(ReplayCache::new(base, dir, mode)?)
        }
        None => base,
    };
    Ok(Arc::new(ThrottledTransport::new(cached, config.in_flight)))
}

fn token_from_env(role: Role) -> Option<String> {
    std::env::var(format!("DILLEMA_{}_TOKEN", role.as_str().to_ascii_uppercase())).ok().filter(|t| !t.is_empty())
}

pub fn load_image(path: &Path) -> Result<DynamicImage, ItemError> {
    image::open(path).map_err(|e| ItemError::Image(format!("{}: {e}", path.display())))
}

/// Writes `bytes` to `<dir>/<sha256>.png` unless already present.
fn store_content(dir: &Path, bytes: &[u8]) -> Result<ImageRef, ItemError> {
    let digest = sha256_hex(bytes);
    let path = dir.join(format!("{digest}.png"));
    if !path.exists() {
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| ItemError::Image(e.to_string()))?;
        tmp.write_all(bytes).map_err(|e| ItemError::Image(e.to_string()))?;
        tmp.persist(&path).map_err(|e| ItemError::Image(e.to_string()))?;
    }
    Ok(ImageRef::content(digest))
}

struct Context<'a> {
    manifest: &'a DatasetManifest,
    config: &'a RunConfig,
    task: TaskDescription,
    templates: TemplateSet,
    client: BackendClient,
    config_hash: String,
    images_dir: PathBuf,
    conditioning_dir: PathBuf,
}

enum JobResult {
    Record(Box<MetamorphicRecord>),
    Skipped(String),
}

fn keywords_outside(
    alternatives: &crate::model::AlternativeMap,
    keywords: &crate::model::KeywordSet,
) -> Option<String> {
    alternatives.entries.keys().find(|k| !keywords.contains(k)).cloned()
}

fn process(ctx: &Context<'_>, job: &Job) -> Result<JobResult, ItemError> {
    let entry = &ctx.manifest.entries[job.entry];
    let test_case = ctx.manifest.test_case(job.entry)?;
    let image = load_image(&ctx.manifest.resolve(&entry.image))?;
    let master = ctx.config.seed;
    let policy_for = |stage: &str| RetryPolicy {
        max_attempts: ctx.config.max_attempts,
        base_seed: scoped_seed(master, stage, &job.seed_key),
        temperature: ctx.config.temperature,
    };
    let mut provenance = Provenance {
        config_hash: ctx.config_hash.clone(),
        template_hashes: ctx.templates.hashes(),
        ..Default::default()
    };

    let mut record = new_record(test_case, ctx.task.clone()).with_id(job.record_id.clone());
    let caption = ctx.client.caption_image(&image)?;
    record = advance(&record, StagePayload::Caption(caption.clone()))?;

    let policy = policy_for("keywords");
    let prompt = render_keywords_prompt(&ctx.task, &caption, &ctx.templates.keywords)?;
    let out = run_with_retry(&prompt, parse_keywords, &policy, &ctx.client)
        .map_err(|source| ItemError::Retry { stage: "keywords", source })?;
    provenance.seeds.insert("keywords".into(), policy.base_seed);
    provenance.attempts.insert("keywords".into(), out.attempts_used);
    let keywords = out.payload;
    record = advance(&record, StagePayload::Keywords(keywords.clone()))?;

    let policy = policy_for("alternatives");
    let prompt = render_alternatives_prompt(&ctx.task, &caption, &keywords, &ctx.templates.alternatives)?;
    let parse = |raw: &str| {
        let alts = parse_alternatives(raw)?;
        match keywords_outside(&alts, &keywords) {
            Some(k) => Err(ParseError::new(0, format!("alternatives only for listed keywords, not `{k}`"))),
            None => Ok(alts),
        }
    };
    let out = run_with_retry(&prompt, parse, &policy, &ctx.client)
        .map_err(|source| ItemError::Retry { stage: "alternatives", source })?;
    provenance.seeds.insert("alternatives".into(), policy.base_seed);
    provenance.attempts.insert("alternatives".into(), out.attempts_used);
    let alternatives = out.payload;
    record = advance(&record, StagePayload::Alternatives(alternatives.clone()))?;

    let edit_seed = scoped_seed(master, "edits", &job.seed_key);
    provenance.seeds.insert("edits".into(), edit_seed);
    let edits = select_edits(&alternatives, ctx.config.budget, edit_seed);
    if edits.applied.is_empty() {
        return Ok(JobResult::Skipped("edit budget selects no edits".into()));
    }
    record = advance(&record, StagePayload::Edits(edits.clone()))?;

    let policy = policy_for("counterfactual");
    let prompt = render_counterfactual_prompt(&ctx.task, &caption, &edits, &ctx.templates.counterfactual)?;
    let parse = |raw: &str| {
        let cf = parse_caption(raw)?;
        if cf.same_text(&caption) {
            Err(ParseError::new(0, "a caption that differs from the original"))
        } else {
            Ok(cf)
        }
    };
    let out = run_with_retry(&prompt, parse, &policy, &ctx.client)
        .map_err(|source| ItemError::Retry { stage: "counterfactual", source })?;
    provenance.seeds.insert("counterfactual".into(), policy.base_seed);
    provenance.attempts.insert("counterfactual".into(), out.attempts_used);
    let counterfactual = out.payload;
    debug_assert_eq!(counterfactual.source, CaptionSource::Counterfactual);
    provenance.detected_edits = detect_edits(&edits, &counterfactual);
    record = advance(&record, StagePayload::Counterfactual(counterfactual.clone()))?;

    let edges = canny_image(&image, &ctx.config.canny).map_err(|e| ItemError::Image(e.to_string()))?;
    let edge_png = edges.to_png().map_err(|e| ItemError::Image(e.to_string()))?;
    let edge_ref = store_content(&ctx.conditioning_dir, &edge_png)?;
    record = advance(
        &record,
        StagePayload::Conditioning(ConditioningRef { image_ref: edge_ref, params: ctx.config.canny }),
    )?;

    for (index, seed) in &job.augmentations {
        let request = GenerationRequest {
            caption: counterfactual.text(),
            conditioning: edges.clone(),
            seed: *seed,
            guidance: ctx.config.guidance,
        };
        let generated = ctx.client.generate_image(&request)?;
        let image_ref = store_content(&ctx.images_dir, &encode_png(&generated)?)?;
        provenance.seeds.insert(format!("augmentation/{index}"), *seed);
        record = advance(&record, StagePayload::Augmentation(Augmentation::inherited(*index, *seed, image_ref)))?;
    }
    Ok(JobResult::Record(Box::new(record.with_provenance(provenance))))
}

/// Reads the ledger, dropping a torn final line. Returns the records and
/// the byte length of the intact prefix.
pub fn read_ledger(path: &Path) -> Result<(Vec<MetamorphicRecord>, u64), PipelineError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(io_err(path, e)),
    };
    let mut reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut good_len = 0u64;
    let mut line = String::new();
    let mut number = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| io_err(path, e))?;
        if n == 0 {
            break;
        }
        number += 1;
        let complete = line.ends_with('\n');
        match serde_json::from_str::<MetamorphicRecord>(line.trim_end()) {
            Ok(r) if complete => {
                records.push(r);
                good_len += n as u64;
            }
            Ok(_) => break,
            Err(_) if !complete => break,
            Err(e) => return Err(PipelineError::Ledger { line: number, message: e.to_string() }),
        }
    }
    Ok((records, good_len))
}

fn truncate_to(path: &Path, len: u64) -> Result<(), PipelineError> {
    if let Ok(meta) = std::fs::metadata(path) {
        if meta.len() != len {
            let f = OpenOptions::new().write(true).open(path).map_err(|e| io_err(path, e))?;
            f.set_len(len).map_err(|e| io_err(path, e))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop after this many jobs have been attempted; simulates an interruption.
    pub limit: Option<usize>,
}

/// Runs the five-step pipeline for every job not already in the ledger.
pub fn run_augment(
    config: &RunConfig,
    manifest: &DatasetManifest,
    transport: Arc<dyn Transport>,
    options: RunOptions,
) -> Result<RunSummary, PipelineError> {
    if config.parallelism == 0 {
        return Err(ConfigError::Invalid("parallelism must be at least 1".into()).into());
    }
    let out_dir = config.output_dir.clone().ok_or_else(|| ConfigError::Invalid("no output directory".into()))?;
    let images_dir = out_dir.join(IMAGES_DIR);
    let conditioning_dir = out_dir.join(CONDITIONING_DIR);
    for d in [&out_dir, &images_dir, &conditioning_dir] {
        std::fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    let templates = match &config.templates_dir {
        Some(dir) => TemplateSet::from_dir(dir, manifest.task.kind)?,
        None => TemplateSet::builtin(manifest.task.kind),
    };
    let task = match &config.task_text {
        Some(text) => {
            TaskDescription::new(manifest.task.kind, text.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?
        }
        None => manifest.task.clone(),
    };
    let ledger_path = out_dir.join(LEDGER_FILE);
    let _lock = LockFile::acquire(&ledger_path)?;
    let (existing, intact) = read_ledger(&ledger_path)?;
    truncate_to(&ledger_path, intact)?;
    let done: BTreeSet<String> = existing.iter().map(|r| r.id.clone()).collect();

    let jobs = build_jobs(manifest, config)?;
    let planned = jobs.len();
    let mut pending: Vec<(usize, &Job)> = jobs.iter().filter(|j| !done.contains(&j.record_id)).enumerate().collect();
    let interrupted = options.limit.is_some_and(|l| l < pending.len());
    if let Some(limit) = options.limit {
        pending.truncate(limit);
    }

    let ctx = Context {
        manifest,
        config,
        task,
        templates,
        client: BackendClient::new(transport),
        config_hash: config.config_hash(),
        images_dir,
        conditioning_dir,
    };
    let mut ledger =
        OpenOptions::new().create(true).append(true).open(&ledger_path).map_err(|e| io_err(&ledger_path, e))?;

    let mut produced = Vec::new();
    let mut failed = Vec::new();
    let mut skipped = Vec::new();
    let mut augmentations = 0;
    let next = AtomicUsize::new(0);
    let workers = config.parallelism.min(pending.len()).max(1);
    let write_result: Result<(), PipelineError> = std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, Result<JobResult, ItemError>)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (ctx, pending, next) = (&ctx, &pending, &next);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((order, job)) = pending.get(i) else { break };
                if tx.send((*order, process(ctx, job))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // Single writer: hold results until every earlier job has reported.
        let mut waiting: BTreeMap<usize, Result<JobResult, ItemError>> = BTreeMap::new();
        let mut cursor = 0;
        for (order, result) in rx {
            waiting.insert(order, result);
            while let Some(result) = waiting.remove(&cursor) {
                let job = pending[cursor].1;
                match result {
                    Ok(JobResult::Record(record)) => {
                        let line = serde_json::to_string(&*record).expect("record serializes");
                        writeln!(ledger, "{line}").and_then(|_| ledger.flush()).map_err(|e| io_err(&ledger_path, e))?;
                        augmentations += record.augmentations.len();
                        produced.push(record.id.clone());
                    }
                    Ok(JobResult::Skipped(reason)) => skipped.push(SkippedItem { id: job.record_id.clone(), reason }),
                    Err(e) => failed.push(FailedItem {
                        id: job.record_id.clone(),
                        kind: e.kind().to_string(),
                        message: e.to_string(),
                    }),
                }
                cursor += 1;
            }
        }
        Ok(())
    });
    write_result?;
    drop(ledger);

    let (all_records, _) = read_ledger(&ledger_path)?;
    let mut summary = RunSummary {
        config_hash: ctx.config_hash.clone(),
        planned,
        resumed: existing.len(),
        produced,
        failed,
        skipped,
        augmentations,
        ledger_records: all_records.len(),
        augmented_manifest: None,
        combined_manifest: None,
        interrupted,
    };
    if !all_records.is_empty() {
        summary.augmented_manifest = Some(write_augmented_manifest(
            &all_records,
            manifest,
            &ctx.images_dir,
            &out_dir.join(AUGMENTED_MANIFEST),
            ManifestMode::AugmentedOnly,
        )?);
        summary.combined_manifest = Some(write_augmented_manifest(
            &all_records,
            manifest,
            &ctx.images_dir,
            &out_dir.join(COMBINED_MANIFEST),
            ManifestMode::Combined,
        )?);
    }
    let summary_path = out_dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&summary_path, text + "\n").map_err(|e| io_err(&summary_path, e))?;
    Ok(summary)
}

#[derive(Debug)]
pub struct EvaluateOutcome {
    pub report: Option<EvaluationReport>,
    pub errors: Vec<FailedItem>,
}

/// Predicts every manifest entry and scores it against its ground truth.
pub fn run_evaluate(
    manifest: &DatasetManifest,
    client: &BackendClient,
    model_name: &str,
    parallelism: usize,
) -> Result<EvaluateOutcome, PipelineError> {
    let n = manifest.entries.len();
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<CaseOutcome, ItemError>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel();
        for _ in 0..parallelism.clamp(1, n.max(1)) {
            let (tx, next) = (tx.clone(), &next);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let outcome = (|| {
                    let entry = &manifest.entries[i];
                    let case = manifest.test_case(i)?;
                    let image = load_image(&manifest.resolve(&entry.image))?;
                    let prediction = client.predict(&image, manifest.task.kind)?;
                    CaseOutcome::score(entry.id.clone(), entry.augmentation, &case.ground_truth, &prediction)
                        .map_err(|e| ItemError::Image(e.to_string()))
                })();
                if tx.send((i, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, outcome) in rx {
            slots[i] = Some(outcome);
        }
    });
    let mut cases = Vec::new();
    let mut errors = Vec::new();
    for (i, slot) in slots.into_iter().enumerate() {
        match slot.expect("every entry reported") {
            Ok(c) => cases.push(c),
            Err(e) => errors.push(FailedItem {
                id: manifest.entries[i].id.clone(),
                kind: e.kind().to_string(),
                message: e.to_string(),
            }),
        }
    }
    let class_names = manifest.class_labels();
    let report = if cases.is_empty() {
        None
    } else {
        Some(EvaluationReport::from_cases(&manifest.name, model_name, manifest.task.kind, class_names, cases)?)
    };
    Ok(EvaluateOutcome { report, errors })
}
