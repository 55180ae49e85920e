use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dillema::backend::{BackendClient, Endpoint, HttpTransport, Role};
use dillema::config::{AugmentationMode, RunConfig};
use dillema::consensus::{analyze, parse_control_key, read_responses, verdicts_csv, WorkerThresholds};
use dillema::dataset::{convert_image_tree, load_manifest};
use dillema::evaluation::{
    compare_effectiveness, compare_rates, failure_histogram, normalized_csv, read_predictions, render_table,
    retraining_delta, EffectivenessComparison, EvaluationReport,
};
use dillema::model::EditBudget;
use dillema::pipeline::{build_transport, run_augment, run_evaluate, RunOptions};

#[derive(Parser)]
#[command(name = "dillema", version, about = "Metamorphic test generation for image models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Caption, rewrite and regenerate every manifest image.
    Augment(AugmentArgs),
    /// Run the model under test over a manifest and write a report.
    Evaluate(EvaluateArgs),
    /// Compare error rates of an original and an augmented suite.
    Compare(CompareArgs),
    /// Score a human validation study.
    Consensus(ConsensusArgs),
    /// Print report tables and write normalized confusion CSVs.
    Report(ReportArgs),
    /// Build a manifest from a `<root>/<class>/<image>` tree.
    ConvertManifest(ConvertArgs),
}

#[derive(Args)]
struct BackendArgs {
    /// Use the in-process mock backends.
    #[arg(long)]
    mock: bool,
    /// Record/replay cache directory.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Fail instead of calling a backend on a cache miss.
    #[arg(long)]
    replay_only: bool,
}

#[derive(Args)]
struct AugmentArgs {
    /// TOML config; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long = "out")]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Edits per counterfactual: a number or `all`.
    #[arg(long)]
    budget: Option<EditBudget>,
    #[arg(long)]
    augmentations: Option<u32>,
    #[arg(long)]
    per_class: Option<u32>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long, value_parser = ["same_caption", "per_augmentation"])]
    mode: Option<String>,
    #[arg(long)]
    max_attempts: Option<u32>,
    #[arg(long)]
    task_text: Option<String>,
    #[arg(long)]
    templates_dir: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
    /// Stop after N work items (for testing resumption).
    #[arg(long, hide = true)]
    limit: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the report JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "model")]
    model: String,
    /// Score stored predictions (`case_id,augmentation,truth,predicted[,pixels]`)
    /// instead of calling a predictor.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Predictor base URL; defaults to DILLEMA_PREDICTOR_URL.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    #[arg(long, default_value_t = dillema::backend::DEFAULT_TIMEOUT_SECS)]
    timeout_secs: f64,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct CompareArgs {
    /// Report of the original suite.
    #[arg(long, required_unless_present = "original_error")]
    original: Option<PathBuf>,
    /// Report of the generated suite.
    #[arg(long, required_unless_present = "augmented_error")]
    augmented: Option<PathBuf>,
    #[arg(long, conflicts_with = "original")]
    original_error: Option<f64>,
    #[arg(long, conflicts_with = "augmented")]
    augmented_error: Option<f64>,
    /// Share of generated cases judged valid by humans.
    #[arg(long)]
    validity: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConsensusArgs {
    /// CSV of worker responses.
    responses: PathBuf,
    /// JSON object mapping control question ids to `yes`/`no`.
    #[arg(long)]
    control_key: PathBuf,
    #[arg(long, default_value_t = dillema::consensus::DEFAULT_MIN_APPROVAL)]
    min_approval: f64,
    #[arg(long, default_value_t = dillema::consensus::DEFAULT_MIN_TASKS)]
    min_tasks: u32,
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV with one verdict per question.
    #[arg(long)]
    verdicts: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Write `<report stem>.confusion.csv` files here.
    #[arg(long)]
    csv_dir: Option<PathBuf>,
    /// Earlier report on the same suite; prints the change per metric.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    /// Root directory with one subdirectory per class.
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "dataset")]
    name: String,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn percent(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

fn augment(args: AugmentArgs) -> Result<ExitCode> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { config.$field = v; })* };
    }
    set!(seed, budget, augmentations, parallelism, max_attempts);
    macro_rules! set_opt {
        ($($field:ident),*) => { $(if args.$field.is_some() { config.$field = args.$field; })* };
    }
    set_opt!(manifest, output_dir, per_class, task_text, templates_dir);
    if let Some(mode) = args.mode.as_deref() {
        config.mode =
            if mode == "per_augmentation" { AugmentationMode::PerAugmentation } else { AugmentationMode::SameCaption };
    }
    if args.backend.cache_dir.is_some() {
        config.cache_dir = args.backend.cache_dir;
    }
    config.mock |= args.backend.mock;
    config.replay_only |= args.backend.replay_only;
    config.validate()?;

    let manifest = load_manifest(config.manifest.as_ref().expect("validated"))?;
    let transport = build_transport(&config, manifest.class_count)?;
    let summary = run_augment(&config, &manifest, transport, RunOptions { limit: args.limit })?;
    println!(
        "planned {}  produced {}  failed {}  skipped {}  resumed {}  augmentations {}",
        summary.planned,
        summary.produced.len(),
        summary.failed.len(),
        summary.skipped.len(),
        summary.resumed,
        summary.augmentations
    );
    for f in &summary.failed {
        println!("failed {} ({}): {}", f.id, f.kind, f.message);
    }
    println!("ledger {}", config.output_dir.expect("validated").join(dillema::pipeline::LEDGER_FILE).display());
    Ok(ExitCode::SUCCESS)
}

fn evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let manifest = load_manifest(&args.manifest)?;
    if let Some(path) = &args.predictions {
        let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let cases = read_predictions(file, manifest.task.kind)?;
        let report = EvaluationReport::from_cases(
            &manifest.name,
            &args.model,
            manifest.task.kind,
            manifest.class_labels(),
            cases,
        )?;
        write_json(&args.out, &report)?;
        print!("{}", render_table(&report));
        return Ok(ExitCode::SUCCESS);
    }
    let client = if args.backend.mock || args.backend.cache_dir.is_some() || args.endpoint.is_none() {
        let mut config = RunConfig {
            mock: args.backend.mock,
            cache_dir: args.backend.cache_dir.clone(),
            replay_only: args.backend.replay_only,
            timeout_secs: args.timeout_secs,
            ..Default::default()
        };
        if let Some(url) = &args.endpoint {
            config.endpoints.insert(Role::Predictor.as_str().to_string(), url.clone());
        }
        BackendClient::new(build_transport(&config, manifest.class_count)?)
    } else {
        let endpoint = Endpoint::new(args.endpoint.clone().expect("checked"), args.timeout_secs, None)?;
        BackendClient::new(Arc::new(HttpTransport::single(Role::Predictor, endpoint)?))
    };
    let outcome = run_evaluate(&manifest, &client, &args.model, args.parallelism)?;
    for e in &outcome.errors {
        eprintln!("error {} ({}): {}", e.id, e.kind, e.message);
    }
    match &outcome.report {
        Some(report) => {
            write_json(&args.out, report)?;
            print!("{}", render_table(report));
        }
        None => bail!("no entry could be scored"),
    }
    Ok(if outcome.errors.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn print_comparison(c: &EffectivenessComparison) {
    println!("original error   {}", percent(c.original_error));
    println!("augmented error  {}", percent(c.augmented_error));
    match c.ratio {
        Some(r) => println!("ratio            {r:.2}x"),
        None => println!("ratio            undefined (original suite has no failures)"),
    }
    if let (Some(v), Some(adjusted)) = (c.validity_rate, c.validity_adjusted_error) {
        println!("validity         {}", percent(v));
        println!("adjusted error   {}", percent(adjusted));
    }
    if let Some(shift) = c.largest_degradation() {
        println!(
            "largest drop     {} ({} -> {})",
            shift.name,
            percent(shift.original_recall),
            percent(shift.augmented_recall)
        );
    }
}

fn compare(args: CompareArgs) -> Result<ExitCode> {
    if let Some(v) = args.validity {
        if !(0.0..=1.0).contains(&v) {
            bail!("validity must be within [0, 1]");
        }
    }
    let comparison = match (&args.original, &args.augmented, args.original_error, args.augmented_error) {
        (Some(o), Some(a), None, None) => {
            let original: EvaluationReport = read_json(o)?;
            let augmented: EvaluationReport = read_json(a)?;
            compare_effectiveness(&original, &augmented, args.validity)
        }
        (None, None, Some(o), Some(a)) => {
            for x in [o, a] {
                if !(0.0..=1.0).contains(&x) {
                    bail!("error rates must be within [0, 1]");
                }
            }
            compare_rates(o, a, args.validity)
        }
        _ => bail!("give either two reports or two error rates"),
    };
    print_comparison(&comparison);
    if let Some(out) = &args.out {
        write_json(out, &comparison)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn consensus(args: ConsensusArgs) -> Result<ExitCode> {
    let file = std::fs::File::open(&args.responses).with_context(|| format!("opening {}", args.responses.display()))?;
    let responses = read_responses(file)?;
    let key = parse_control_key(&std::fs::read_to_string(&args.control_key)?)?;
    let thresholds = WorkerThresholds { min_approval: args.min_approval, min_tasks: args.min_tasks };
    let report = analyze(&responses, &thresholds, &key)?;
    println!(
        "responses {}  kept {}  discarded {} ({} workers)",
        report.total_responses,
        report.kept_responses,
        report.discarded_responses,
        report.discarded_workers.len()
    );
    for (kind, rate) in &report.by_type {
        println!(
            "{kind:<16} {:>6}  valid {}  invalid {}  discarded {}",
            rate.percent_display(),
            rate.valid,
            rate.invalid,
            rate.discarded
        );
    }
    if let Some(overall) = &report.overall {
        println!("{:<16} {:>6}", "overall", overall.percent_display());
    }
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    if let Some(path) = &args.verdicts {
        std::fs::write(path, verdicts_csv(&report)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn report(args: ReportArgs) -> Result<ExitCode> {
    let baseline: Option<EvaluationReport> = args.baseline.as_deref().map(read_json).transpose()?;
    if let Some(dir) = &args.csv_dir {
        std::fs::create_dir_all(dir)?;
    }
    for path in &args.reports {
        let stored: EvaluationReport = read_json(path)?;
        let report = stored.recompute()?;
        if (report.value - stored.value).abs() > 1e-12 {
            eprintln!("warning: stored aggregate in {} differs from its cases", path.display());
        }
        println!("== {}", path.display());
        print!("{}", render_table(&report));
        let groups = report.failure_groups();
        if report.cases.iter().any(|c| c.augmentation.is_some()) {
            match failure_histogram(&groups) {
                Ok(h) => println!(
                    "all augmentations fail {}  none fail {}  ({} images x {})",
                    percent(h.fraction_all_fail),
                    percent(h.fraction_none_fail),
                    h.images,
                    h.augmentations_per_image
                ),
                Err(e) => println!("failure histogram unavailable: {e}"),
            }
        }
        if let Some(before) = &baseline {
            for d in retraining_delta(before, &report)? {
                let relative = d.relative.map_or("n/a".to_string(), percent);
                println!(
                    "{:<10} {} -> {}  ({:+.4}, {relative})",
                    d.metric,
                    percent(d.before),
                    percent(d.after),
                    d.absolute
                );
            }
        }
        if let Some(dir) = &args.csv_dir {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            let out = dir.join(format!("{stem}.confusion.csv"));
            std::fs::write(&out, normalized_csv(&report.confusion))?;
            println!("wrote {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn convert(args: ConvertArgs) -> Result<ExitCode> {
    let summary = convert_image_tree(&args.tree, &args.out, &args.name)?;
    println!("wrote {} entries to {}", summary.total, args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Augment(a) => augment(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Compare(a) => compare(a),
        Command::Consensus(a) => consensus(a),
        Command::Report(a) => report(a),
        Command::ConvertManifest(a) => convert(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
