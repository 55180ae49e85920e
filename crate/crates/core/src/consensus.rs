//! Human-study analysis: worker filtering, the 4-of-5 agreement rule and
//! validity rates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use num::{BigInt, BigRational, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MIN_APPROVAL: f64 = 0.95;
pub const DEFAULT_MIN_TASKS: u32 = 50;
pub const VOTES_PER_QUESTION: usize = 5;
pub const AGREEMENT: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsensusError {
    #[error("responses line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("control question `{question_id}` (answered by {worker_id}) is not in the control key")]
    UnknownControlQuestion { question_id: String, worker_id: String },
    #[error("question `{question_id}` has {votes} votes after filtering; at most {VOTES_PER_QUESTION} are allowed")]
    TooManyVotes { question_id: String, votes: usize },
    #[error("no outcomes to rate")]
    Empty,
    #[error("every question was discarded")]
    AllDiscarded,
    #[error("control key: {0}")]
    ControlKey(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl FromStr for Answer {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "yes" | "y" | "true" | "1" => Ok(Answer::Yes),
            "no" | "n" | "false" | "0" => Ok(Answer::No),
            other => Err(format!("`{other}` is not a yes/no answer")),
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Answer::Yes => "yes",
            Answer::No => "no",
        })
    }
}

fn parse_flag(s: &str) -> Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "y" => Ok(true),
        "false" | "0" | "no" | "n" | "" => Ok(false),
        other => Err(format!("`{other}` is not a boolean")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerResponse {
    pub worker_id: String,
    pub question_id: String,
    pub question_type: String,
    pub answer: Answer,
    pub is_control: bool,
    pub approval_rate: f64,
    pub completed_tasks: u32,
}

#[derive(Deserialize)]
struct CsvRow {
    worker_id: String,
    question_id: String,
    question_type: String,
    answer: String,
    is_control: String,
    approval_rate: f64,
    completed_tasks: u32,
}

/// Reads `worker_id, question_id, question_type, answer, is_control, approval_rate, completed_tasks`.
pub fn read_responses<R: Read>(reader: R) -> Result<Vec<WorkerResponse>, ConsensusError> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in csv.deserialize::<CsvRow>() {
        let row = row
            .map_err(|e| ConsensusError::Csv { line: e.position().map_or(0, |p| p.line()), message: e.to_string() })?;
        let line = out.len() as u64 + 2;
        let bad = |message: String| ConsensusError::Csv { line, message };
        if !(0.0..=1.0).contains(&row.approval_rate) {
            return Err(bad(format!("approval rate {} outside [0, 1]", row.approval_rate)));
        }
        out.push(WorkerResponse {
            answer: row.answer.parse().map_err(bad)?,
            is_control: parse_flag(&row.is_control).map_err(bad)?,
            worker_id: row.worker_id,
            question_id: row.question_id,
            question_type: row.question_type,
            approval_rate: row.approval_rate,
            completed_tasks: row.completed_tasks,
        });
    }
    Ok(out)
}

pub type ControlKey = BTreeMap<String, Answer>;

pub fn parse_control_key(json: &str) -> Result<ControlKey, ConsensusError> {
    serde_json::from_str(json).map_err(|e| ConsensusError::ControlKey(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkerThresholds {
    /// Workers need an approval rate strictly above this.
    pub min_approval: f64,
    /// Workers need at least this many completed tasks.
    pub min_tasks: u32,
}

impl Default for WorkerThresholds {
    fn default() -> Self {
        Self { min_approval: DEFAULT_MIN_APPROVAL, min_tasks: DEFAULT_MIN_TASKS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DiscardReason {
    Approval { rate: f64 },
    Tasks { completed: u32 },
    Control { question_id: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterResult {
    pub kept: Vec<WorkerResponse>,
    pub discarded: Vec<WorkerResponse>,
    pub reasons: BTreeMap<String, Vec<DiscardReason>>,
}

/// Drops every response of a worker who misses a threshold or answers any
/// control question wrongly.
pub fn filter_workers(
    responses: &[WorkerResponse],
    thresholds: &WorkerThresholds,
    control_key: &ControlKey,
) -> Result<FilterResult, ConsensusError> {
    let mut reasons: BTreeMap<String, Vec<DiscardReason>> = BTreeMap::new();
    let mut profile_checked = BTreeSet::new();
    for r in responses {
        if profile_checked.insert(r.worker_id.as_str()) {
            if r.approval_rate <= thresholds.min_approval {
                reasons.entry(r.worker_id.clone()).or_default().push(DiscardReason::Approval { rate: r.approval_rate });
            }
            if r.completed_tasks < thresholds.min_tasks {
                reasons
                    .entry(r.worker_id.clone())
                    .or_default()
                    .push(DiscardReason::Tasks { completed: r.completed_tasks });
            }
        }
        if r.is_control {
            let expected = control_key.get(&r.question_id).ok_or_else(|| ConsensusError::UnknownControlQuestion {
                question_id: r.question_id.clone(),
                worker_id: r.worker_id.clone(),
            })?;
            if *expected != r.answer {
                reasons
                    .entry(r.worker_id.clone())
                    .or_default()
                    .push(DiscardReason::Control { question_id: r.question_id.clone() });
            }
        }
    }
    let (discarded, kept) = responses.iter().cloned().partition(|r| reasons.contains_key(&r.worker_id));
    Ok(FilterResult { kept, discarded, reasons })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Valid,
    Invalid,
    Discarded,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Valid => "valid",
            Verdict::Invalid => "invalid",
            Verdict::Discarded => "discarded",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusOutcome {
    pub question_id: String,
    pub verdict: Verdict,
    pub yes: usize,
    pub no: usize,
}

/// Valid with at least four yes votes, Invalid with at least four no votes,
/// Discarded otherwise (which covers any question left with three or fewer votes).
pub fn consensus(question_id: &str, votes: &[Answer]) -> ConsensusOutcome {
    let yes = votes.iter().filter(|a| **a == Answer::Yes).count();
    let no = votes.len() - yes;
    let verdict = if yes >= AGREEMENT {
        Verdict::Valid
    } else if no >= AGREEMENT {
        Verdict::Invalid
    } else {
        Verdict::Discarded
    };
    ConsensusOutcome { question_id: question_id.to_string(), verdict, yes, no }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityRate {
    pub valid: usize,
    pub invalid: usize,
    pub discarded: usize,
    /// `valid / (valid + invalid)`.
    pub rate: f64,
}

impl ValidityRate {
    pub fn percent_display(&self) -> String {
        format!("{:.1}%", self.rate * 100.0)
    }
}

pub fn validity_rate<'a>(
    outcomes: impl IntoIterator<Item = &'a ConsensusOutcome>,
) -> Result<ValidityRate, ConsensusError> {
    let (mut valid, mut invalid, mut discarded) = (0, 0, 0);
    for o in outcomes {
        match o.verdict {
            Verdict::Valid => valid += 1,
            Verdict::Invalid => invalid += 1,
            Verdict::Discarded => discarded += 1,
        }
    }
    if valid + invalid + discarded == 0 {
        return Err(ConsensusError::Empty);
    }
    if valid + invalid == 0 {
        return Err(ConsensusError::AllDiscarded);
    }
    let rate = BigRational::new(BigInt::from(valid), BigInt::from(valid + invalid)).to_f64().expect("bounded ratio");
    Ok(ValidityRate { valid, invalid, discarded, rate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub question_type: String,
    #[serde(flatten)]
    pub outcome: ConsensusOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub total_responses: usize,
    pub kept_responses: usize,
    pub discarded_responses: usize,
    pub discarded_workers: BTreeMap<String, Vec<DiscardReason>>,
    pub questions: Vec<QuestionOutcome>,
    /// Rates per question type; types where every question was discarded are omitted.
    pub by_type: BTreeMap<String, ValidityRate>,
    pub overall: Option<ValidityRate>,
}

/// Filters workers, tallies non-control votes per question and applies the
/// agreement rule. Questions are reported in id order.
pub fn analyze(
    responses: &[WorkerResponse],
    thresholds: &WorkerThresholds,
    control_key: &ControlKey,
) -> Result<ConsensusReport, ConsensusError> {
    let filtered = filter_workers(responses, thresholds, control_key)?;
    let mut tallies: BTreeMap<&str, (&str, Vec<Answer>)> = BTreeMap::new();
    // Questions whose every vote was filtered still count, as discarded.
    for r in responses.iter().filter(|r| !r.is_control) {
        tallies.entry(&r.question_id).or_insert((&r.question_type, Vec::new()));
    }
    for r in filtered.kept.iter().filter(|r| !r.is_control) {
        tallies.get_mut(r.question_id.as_str()).expect("registered above").1.push(r.answer);
    }
    let mut questions = Vec::with_capacity(tallies.len());
    for (question_id, (question_type, votes)) in tallies {
        if votes.len() > VOTES_PER_QUESTION {
            return Err(ConsensusError::TooManyVotes { question_id: question_id.to_string(), votes: votes.len() });
        }
        questions.push(QuestionOutcome {
            question_type: question_type.to_string(),
            outcome: consensus(question_id, &votes),
        });
    }
    let mut types: BTreeMap<&str, Vec<&ConsensusOutcome>> = BTreeMap::new();
    for q in &questions {
        types.entry(&q.question_type).or_default().push(&q.outcome);
    }
    let by_type =
        types.into_iter().filter_map(|(t, outs)| validity_rate(outs).ok().map(|r| (t.to_string(), r))).collect();
    let overall = validity_rate(questions.iter().map(|q| &q.outcome)).ok();
    Ok(ConsensusReport {
        total_responses: responses.len(),
        kept_responses: filtered.kept.len(),
        discarded_responses: filtered.discarded.len(),
        discarded_workers: filtered.reasons,
        questions,
        by_type,
        overall,
    })
}

/// CSV with one row per question: `question_id, question_type, verdict, yes, no`.
pub fn verdicts_csv(report: &ConsensusReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["question_id", "question_type", "verdict", "yes", "no"]).expect("in-memory csv");
    for q in &report.questions {
        w.write_record([
            q.outcome.question_id.as_str(),
            q.question_type.as_str(),
            &q.outcome.verdict.to_string(),
            &q.outcome.yes.to_string(),
            &q.outcome.no.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}
