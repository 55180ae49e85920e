//! Accuracy, confusion matrices, IoU, effectiveness comparisons, failure
//! histograms and retraining deltas.
//!
//! Counts are integers and ratios are reduced as exact rationals; floats
//! appear only in the returned values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;

use num::{BigInt, BigRational, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ClassMap, GroundTruth, TaskKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("length mismatch: {left} predictions vs {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("nothing to score")]
    EmptyInput,
    #[error("class id {class} is out of range for {class_count} classes")]
    ClassOutOfRange { class: u32, class_count: usize },
    #[error("map shapes differ: {0}x{1} vs {2}x{3}")]
    Shape(u32, u32, u32, u32),
    #[error("image `{group}` has {found} outcomes, expected {expected}")]
    RaggedGroups { group: String, expected: usize, found: usize },
    #[error("reports are not from the same suite: {0}")]
    SuiteMismatch(String),
    #[error("prediction kind does not match ground truth for case `{0}`")]
    KindMismatch(String),
    #[error("predictions line {line}: {message}")]
    Predictions { line: u64, message: String },
}

fn ratio(num: u64, den: u64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

pub fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().expect("bounded rational converts to f64")
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[u32], labels: &[u32]) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch { left: predictions.len(), right: labels.len() });
    }
    if predictions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(to_f64(&ratio(correct as u64, predictions.len() as u64)))
}

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedConfusion {
    pub class_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// `true` where the ground-truth class never occurs; that row is all zero.
    pub zero_support: Vec<bool>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize, class_names: Vec<String>) -> Self {
        let mut names = class_names;
        names.resize_with(class_count.max(names.len()), Default::default);
        for (i, n) in names.iter_mut().enumerate() {
            if n.is_empty() {
                *n = i.to_string();
            }
        }
        let size = names.len();
        Self { class_names: names, counts: vec![vec![0; size]; size] }
    }

    pub fn size(&self) -> usize {
        self.counts.len()
    }

    fn check(&self, class: u32) -> Result<usize, EvalError> {
        let c = class as usize;
        if c >= self.size() {
            return Err(EvalError::ClassOutOfRange { class, class_count: self.size() });
        }
        Ok(c)
    }

    pub fn add(&mut self, truth: u32, predicted: u32, n: u64) -> Result<(), EvalError> {
        let (t, p) = (self.check(truth)?, self.check(predicted)?);
        self.counts[t][p] += n;
        Ok(())
    }

    /// Pixel-weighted accumulation of one map pair.
    pub fn add_maps(&mut self, truth: &ClassMap, predicted: &ClassMap) -> Result<(), EvalError> {
        for (t, p, n) in pixel_pairs(truth, predicted)? {
            self.add(t as u32, p as u32, n)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), EvalError> {
        if other.size() != self.size() {
            return Err(EvalError::ClassOutOfRange { class: other.size() as u32, class_count: self.size() });
        }
        for (row, other_row) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in row.iter_mut().zip(other_row) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.size()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn column_support(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    /// Correct over total, or `None` for an empty matrix.
    pub fn accuracy_exact(&self) -> Option<BigRational> {
        let total = self.total();
        (total > 0).then(|| ratio(self.correct(), total))
    }

    /// Per-class IoU as `tp / (tp + fp + fn)`; `None` for classes absent
    /// from both ground truth and predictions.
    pub fn iou_exact(&self) -> Vec<Option<BigRational>> {
        (0..self.size())
            .map(|c| {
                let tp = self.counts[c][c];
                let union = self.row_support(c) + self.column_support(c) - tp;
                (union > 0).then(|| ratio(tp, union))
            })
            .collect()
    }

    /// Mean of per-class IoU over classes present in ground truth or predictions.
    pub fn mean_iou_exact(&self) -> Option<BigRational> {
        mean_present(&self.iou_exact())
    }

    pub fn mean_iou(&self) -> Option<f64> {
        self.mean_iou_exact().as_ref().map(to_f64)
    }

    pub fn recall(&self) -> Vec<Option<f64>> {
        (0..self.size())
            .map(|c| {
                let support = self.row_support(c);
                (support > 0).then(|| to_f64(&ratio(self.counts[c][c], support)))
            })
            .collect()
    }
}

fn mean_present(values: &[Option<BigRational>]) -> Option<BigRational> {
    let present: Vec<&BigRational> = values.iter().flatten().collect();
    if present.is_empty() {
        return None;
    }
    let sum = present.iter().fold(BigRational::zero(), |acc, v| acc + *v);
    Some(sum / BigRational::from_integer(BigInt::from(present.len())))
}

pub fn confusion(predictions: &[u32], truths: &[u32], class_count: usize) -> Result<ConfusionMatrix, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch { left: predictions.len(), right: truths.len() });
    }
    let mut m = ConfusionMatrix::new(class_count, Vec::new());
    for (p, t) in predictions.iter().zip(truths) {
        m.add(*t, *p, 1)?;
    }
    Ok(m)
}

pub fn row_normalize(matrix: &ConfusionMatrix) -> NormalizedConfusion {
    let mut rows = Vec::with_capacity(matrix.size());
    let mut zero_support = Vec::with_capacity(matrix.size());
    for row in &matrix.counts {
        let support: u64 = row.iter().sum();
        zero_support.push(support == 0);
        rows.push(row.iter().map(|n| if support == 0 { 0.0 } else { to_f64(&ratio(*n, support)) }).collect());
    }
    NormalizedConfusion { class_names: matrix.class_names.clone(), rows, zero_support }
}

/// `(truth, prediction, pixel count)` triples in class order.
fn pixel_pairs(truth: &ClassMap, predicted: &ClassMap) -> Result<Vec<(u8, u8, u64)>, EvalError> {
    if (truth.width(), truth.height()) != (predicted.width(), predicted.height()) {
        return Err(EvalError::Shape(truth.width(), truth.height(), predicted.width(), predicted.height()));
    }
    let mut counts: BTreeMap<(u8, u8), u64> = BTreeMap::new();
    for (t, p) in truth.data().iter().zip(predicted.data()) {
        *counts.entry((*t, *p)).or_default() += 1;
    }
    Ok(counts.into_iter().map(|((t, p), n)| (t, p, n)).collect())
}

fn map_confusion(pred: &ClassMap, truth: &ClassMap, class_count: usize) -> Result<ConfusionMatrix, EvalError> {
    let mut m = ConfusionMatrix::new(class_count, Vec::new());
    m.add_maps(truth, pred)?;
    Ok(m)
}

pub fn iou_per_class_exact(
    pred: &ClassMap,
    truth: &ClassMap,
    class_count: usize,
) -> Result<Vec<Option<BigRational>>, EvalError> {
    Ok(map_confusion(pred, truth, class_count)?.iou_exact())
}

pub fn iou_per_class(pred: &ClassMap, truth: &ClassMap, class_count: usize) -> Result<Vec<Option<f64>>, EvalError> {
    Ok(iou_per_class_exact(pred, truth, class_count)?.iter().map(|v| v.as_ref().map(to_f64)).collect())
}

pub fn mean_iou_exact(pred: &ClassMap, truth: &ClassMap, class_count: usize) -> Result<BigRational, EvalError> {
    mean_present(&iou_per_class_exact(pred, truth, class_count)?).ok_or(EvalError::EmptyInput)
}

pub fn mean_iou(pred: &ClassMap, truth: &ClassMap, class_count: usize) -> Result<f64, EvalError> {
    Ok(to_f64(&mean_iou_exact(pred, truth, class_count)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CasePrediction {
    Label {
        truth: u32,
        predicted: u32,
    },
    /// Sparse pixel confusion: `[truth, predicted, count]`.
    Mask {
        pixels: Vec<[u64; 3]>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<u32>,
    pub correct: bool,
    pub prediction: CasePrediction,
}

impl CaseOutcome {
    pub fn label(case_id: impl Into<String>, augmentation: Option<u32>, truth: u32, predicted: u32) -> Self {
        Self {
            case_id: case_id.into(),
            augmentation,
            correct: truth == predicted,
            prediction: CasePrediction::Label { truth, predicted },
        }
    }

    /// A segmentation case counts as correct only if every pixel matches.
    pub fn mask(
        case_id: impl Into<String>,
        augmentation: Option<u32>,
        truth: &ClassMap,
        predicted: &ClassMap,
    ) -> Result<Self, EvalError> {
        let pixels: Vec<[u64; 3]> =
            pixel_pairs(truth, predicted)?.into_iter().map(|(t, p, n)| [t as u64, p as u64, n]).collect();
        let correct = pixels.iter().all(|[t, p, _]| t == p);
        Ok(Self { case_id: case_id.into(), augmentation, correct, prediction: CasePrediction::Mask { pixels } })
    }

    pub fn score(
        case_id: impl Into<String>,
        augmentation: Option<u32>,
        truth: &GroundTruth,
        predicted: &crate::backend::Prediction,
    ) -> Result<Self, EvalError> {
        use crate::backend::Prediction;
        let case_id = case_id.into();
        match (truth, predicted) {
            (GroundTruth::Classification { label_id, .. }, Prediction::Label(p)) => {
                Ok(Self::label(case_id, augmentation, *label_id, *p))
            }
            (GroundTruth::Segmentation { map, .. }, Prediction::Mask(p)) => Self::mask(case_id, augmentation, map, p),
            _ => Err(EvalError::KindMismatch(case_id)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MeanIou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub suite_name: String,
    pub model: String,
    pub task: TaskKind,
    pub metric: Metric,
    /// Accuracy for classification, mIoU for segmentation.
    pub value: f64,
    pub accuracy: f64,
    pub error_rate: f64,
    /// How classes absent from both truth and prediction are treated in mIoU.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miou_classes: Option<String>,
    pub confusion: ConfusionMatrix,
    pub cases: Vec<CaseOutcome>,
}

pub const MIOU_CLASS_RULE: &str = "mean over classes present in ground truth or prediction";

impl EvaluationReport {
    pub fn from_cases(
        suite_name: impl Into<String>,
        model: impl Into<String>,
        task: TaskKind,
        class_names: Vec<String>,
        cases: Vec<CaseOutcome>,
    ) -> Result<Self, EvalError> {
        if cases.is_empty() {
            return Err(EvalError::EmptyInput);
        }
        let mut confusion = ConfusionMatrix::new(class_names.len(), class_names);
        for case in &cases {
            match &case.prediction {
                CasePrediction::Label { truth, predicted } => confusion.add(*truth, *predicted, 1)?,
                CasePrediction::Mask { pixels } => {
                    for [t, p, n] in pixels {
                        confusion.add(*t as u32, *p as u32, *n)?;
                    }
                }
            }
        }
        let correct = cases.iter().filter(|c| c.correct).count() as u64;
        let total = cases.len() as u64;
        let accuracy = to_f64(&ratio(correct, total));
        let error_rate = to_f64(&ratio(total - correct, total));
        let (metric, value, miou_classes) = match task {
            TaskKind::Classification => (Metric::Accuracy, accuracy, None),
            TaskKind::SemanticSegmentation => {
                (Metric::MeanIou, confusion.mean_iou().ok_or(EvalError::EmptyInput)?, Some(MIOU_CLASS_RULE.to_string()))
            }
        };
        Ok(Self {
            suite_name: suite_name.into(),
            model: model.into(),
            task,
            metric,
            value,
            accuracy,
            error_rate,
            miou_classes,
            confusion,
            cases,
        })
    }

    /// Rebuilds every aggregate from the stored per-case outcomes.
    pub fn recompute(&self) -> Result<Self, EvalError> {
        Self::from_cases(
            self.suite_name.clone(),
            self.model.clone(),
            self.task,
            self.confusion.class_names.clone(),
            self.cases.clone(),
        )
    }

    /// Fraction of failing test cases; for segmentation, `1 - mIoU`.
    pub fn error_exact(&self) -> BigRational {
        match self.task {
            TaskKind::Classification => {
                let total = self.cases.len() as u64;
                ratio(total - self.cases.iter().filter(|c| c.correct).count() as u64, total)
            }
            TaskKind::SemanticSegmentation => {
                BigRational::from_integer(BigInt::from(1)) - self.confusion.mean_iou_exact().unwrap_or_default()
            }
        }
    }

    pub fn error(&self) -> f64 {
        to_f64(&self.error_exact())
    }

    pub fn metric_exact(&self) -> BigRational {
        match self.task {
            TaskKind::Classification => self.confusion.accuracy_exact().unwrap_or_default(),
            TaskKind::SemanticSegmentation => self.confusion.mean_iou_exact().unwrap_or_default(),
        }
    }

    /// Outcomes grouped per original image, in first-appearance order.
    pub fn failure_groups(&self) -> Vec<(String, Vec<bool>)> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
        for case in &self.cases {
            let key = case.case_id.split('#').next().unwrap_or(&case.case_id);
            if !groups.contains_key(key) {
                order.push(key.to_string());
            }
            groups.entry(key).or_default().push(!case.correct);
        }
        order
            .into_iter()
            .map(|k| {
                let v = groups[k.as_str()].clone();
                (k, v)
            })
            .collect()
    }
}

#[derive(Deserialize)]
struct PredictionRow {
    case_id: String,
    #[serde(default)]
    augmentation: Option<u32>,
    truth: u32,
    predicted: u32,
    #[serde(default)]
    pixels: Option<u64>,
}

/// Reads stored predictions with columns `case_id, augmentation, truth, predicted`
/// and, for segmentation, `pixels`. A segmentation row is one confusion cell;
/// rows sharing `(case_id, augmentation)` form one case. Cases keep
/// first-appearance order.
pub fn read_predictions<R: Read>(reader: R, task: TaskKind) -> Result<Vec<CaseOutcome>, EvalError> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut cases: Vec<CaseOutcome> = Vec::new();
    let mut index: BTreeMap<(String, Option<u32>), usize> = BTreeMap::new();
    for row in csv.deserialize::<PredictionRow>() {
        let row = row.map_err(|e| EvalError::Predictions {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        match task {
            TaskKind::Classification => {
                cases.push(CaseOutcome::label(row.case_id, row.augmentation, row.truth, row.predicted));
            }
            TaskKind::SemanticSegmentation => {
                let Some(n) = row.pixels else {
                    return Err(EvalError::Predictions {
                        line: cases.len() as u64 + 2,
                        message: "segmentation rows need a `pixels` count".into(),
                    });
                };
                let key = (row.case_id.clone(), row.augmentation);
                let i = *index.entry(key).or_insert_with(|| {
                    cases.push(CaseOutcome {
                        case_id: row.case_id,
                        augmentation: row.augmentation,
                        correct: true,
                        prediction: CasePrediction::Mask { pixels: Vec::new() },
                    });
                    cases.len() - 1
                });
                let case = &mut cases[i];
                if let CasePrediction::Mask { pixels } = &mut case.prediction {
                    pixels.push([row.truth as u64, row.predicted as u64, n]);
                }
                case.correct &= row.truth == row.predicted || n == 0;
            }
        }
    }
    Ok(cases)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassShift {
    pub class: usize,
    pub name: String,
    pub original_recall: f64,
    pub augmented_recall: f64,
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectivenessComparison {
    pub original_error: f64,
    pub augmented_error: f64,
    /// `augmented_error / original_error`; absent when the original suite has no failures.
    pub ratio: Option<f64>,
    pub ratio_undefined: bool,
    pub validity_rate: Option<f64>,
    pub validity_adjusted_error: Option<f64>,
    /// Per-class recall drops, largest first.
    pub class_shifts: Vec<ClassShift>,
}

impl EffectivenessComparison {
    pub fn largest_degradation(&self) -> Option<&ClassShift> {
        self.class_shifts.first().filter(|s| s.drop > 0.0)
    }
}

fn rational_of(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite fraction")
}

/// Comparison from raw error fractions.
pub fn compare_rates(original_error: f64, augmented_error: f64, validity_rate: Option<f64>) -> EffectivenessComparison {
    compare_exact(&rational_of(original_error), &rational_of(augmented_error), validity_rate)
}

fn compare_exact(
    original: &BigRational,
    augmented: &BigRational,
    validity_rate: Option<f64>,
) -> EffectivenessComparison {
    let ratio = (!original.is_zero()).then(|| to_f64(&(augmented / original)));
    EffectivenessComparison {
        original_error: to_f64(original),
        augmented_error: to_f64(augmented),
        ratio,
        ratio_undefined: ratio.is_none(),
        validity_rate,
        validity_adjusted_error: validity_rate.map(|v| to_f64(&(augmented * rational_of(v)))),
        class_shifts: Vec::new(),
    }
}

/// `augmented error / original error` as an exact fraction; `None` when the
/// original suite has no failures.
pub fn error_ratio_exact(original: &EvaluationReport, augmented: &EvaluationReport) -> Option<BigRational> {
    let before = original.error_exact();
    (!before.is_zero()).then(|| augmented.error_exact() / before)
}

pub fn compare_effectiveness(
    original: &EvaluationReport,
    augmented: &EvaluationReport,
    validity_rate: Option<f64>,
) -> EffectivenessComparison {
    let mut cmp = compare_exact(&original.error_exact(), &augmented.error_exact(), validity_rate);
    if original.confusion.size() == augmented.confusion.size() {
        let before = original.confusion.recall();
        let after = augmented.confusion.recall();
        let mut shifts: Vec<ClassShift> = before
            .iter()
            .zip(&after)
            .enumerate()
            .filter_map(|(class, (b, a))| {
                let (b, a) = ((*b)?, (*a)?);
                Some(ClassShift {
                    class,
                    name: original.confusion.class_names[class].clone(),
                    original_recall: b,
                    augmented_recall: a,
                    drop: b - a,
                })
            })
            .collect();
        shifts.sort_by(|x, y| y.drop.total_cmp(&x.drop).then(x.class.cmp(&y.class)));
        cmp.class_shifts = shifts;
    }
    cmp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureHistogram {
    pub images: usize,
    pub augmentations_per_image: usize,
    pub fraction_all_fail: f64,
    pub fraction_none_fail: f64,
    /// `counts[k]` = images with exactly `k` failing augmentations.
    pub counts: Vec<u64>,
    pub distribution: Vec<f64>,
}

impl FailureHistogram {
    pub fn distribution_exact(&self) -> Vec<BigRational> {
        self.counts.iter().map(|c| ratio(*c, self.images as u64)).collect()
    }
}

/// Each group holds one image's outcomes; `true` marks a failure.
pub fn failure_histogram<S: AsRef<str>>(groups: &[(S, Vec<bool>)]) -> Result<FailureHistogram, EvalError> {
    let (_, first) = groups.first().ok_or(EvalError::EmptyInput)?;
    let n = first.len();
    let mut counts = vec![0u64; n + 1];
    for (name, outcomes) in groups {
        if outcomes.len() != n {
            return Err(EvalError::RaggedGroups {
                group: name.as_ref().to_string(),
                expected: n,
                found: outcomes.len(),
            });
        }
        counts[outcomes.iter().filter(|f| **f).count()] += 1;
    }
    let images = groups.len() as u64;
    Ok(FailureHistogram {
        images: groups.len(),
        augmentations_per_image: n,
        fraction_all_fail: to_f64(&ratio(counts[n], images)),
        fraction_none_fail: to_f64(&ratio(counts[0], images)),
        distribution: counts.iter().map(|c| to_f64(&ratio(*c, images))).collect(),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub before: f64,
    pub after: f64,
    pub absolute: f64,
    /// `(after - before) / before`; absent when `before` is zero.
    pub relative: Option<f64>,
}

fn delta(metric: &str, before: &BigRational, after: &BigRational) -> MetricDelta {
    let diff = after - before;
    MetricDelta {
        metric: metric.to_string(),
        before: to_f64(before),
        after: to_f64(after),
        absolute: to_f64(&diff),
        relative: (!before.is_zero()).then(|| to_f64(&(&diff / before))),
    }
}

pub fn metric_delta(metric: &str, before: f64, after: f64) -> MetricDelta {
    delta(metric, &rational_of(before), &rational_of(after))
}

pub fn retraining_delta(before: &EvaluationReport, after: &EvaluationReport) -> Result<Vec<MetricDelta>, EvalError> {
    if before.suite_name != after.suite_name {
        return Err(EvalError::SuiteMismatch(format!("`{}` vs `{}`", before.suite_name, after.suite_name)));
    }
    let ids = |r: &EvaluationReport| r.cases.iter().map(|c| (c.case_id.clone(), c.augmentation)).collect::<Vec<_>>();
    if ids(before) != ids(after) {
        return Err(EvalError::SuiteMismatch("case lists differ".into()));
    }
    let name = match before.metric {
        Metric::Accuracy => "accuracy",
        Metric::MeanIou => "mean_iou",
    };
    let mut out = vec![delta(name, &before.metric_exact(), &after.metric_exact())];
    out.push(delta("error", &before.error_exact(), &after.error_exact()));
    Ok(out)
}

/// Plain-text summary with the row-normalized confusion matrix in percent.
pub fn render_table(report: &EvaluationReport) -> String {
    let mut out = String::new();
    let metric = match report.metric {
        Metric::Accuracy => "accuracy",
        Metric::MeanIou => "mIoU",
    };
    let _ = writeln!(out, "suite {}  model {}  cases {}", report.suite_name, report.model, report.cases.len());
    let _ = writeln!(out, "{metric} {:.2}%  error {:.2}%", report.value * 100.0, report.error() * 100.0);
    let norm = row_normalize(&report.confusion);
    let width = norm.class_names.iter().map(String::len).max().unwrap_or(4).max(6);
    let _ = write!(out, "{:width$}", "");
    for name in &norm.class_names {
        let _ = write!(out, " {name:>width$}");
    }
    out.push('\n');
    for (i, row) in norm.rows.iter().enumerate() {
        let _ = write!(out, "{:width$}", norm.class_names[i]);
        for v in row {
            let _ = write!(out, " {:>width$}", format!("{:.1}", v * 100.0));
        }
        if norm.zero_support[i] {
            out.push_str("  (no support)");
        }
        out.push('\n');
    }
    out
}

/// CSV of the normalized confusion matrix at full precision.
pub fn normalized_csv(matrix: &ConfusionMatrix) -> String {
    let norm = row_normalize(matrix);
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["truth".to_string()];
    header.extend(norm.class_names.iter().cloned());
    writer.write_record(&header).expect("in-memory csv");
    for (name, row) in norm.class_names.iter().zip(&norm.rows) {
        let mut record = vec![name.clone()];
        record.extend(row.iter().map(|v| v.to_string()));
        writer.write_record(&record).expect("in-memory csv");
    }
    String::from_utf8(writer.into_inner().expect("in-memory csv")).expect("utf-8")
}
