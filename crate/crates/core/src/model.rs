//! Domain types and the metamorphic record.
//!
//! A [`MetamorphicRecord`] carries one test case through every pipeline stage.
//! Records are values: [`advance`] validates a stage payload and returns a new
//! record, leaving the input untouched. Augmentations never carry their own
//! label; they resolve to the original's ground truth unless a record was
//! explicitly built with an override, which [`assert_metamorphic`] rejects.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use base64::Engine as _;
use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::conditioning::CannyParams;

pub const LEDGER_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("stage {got} supplied out of order (next expected stage: {expected})")]
    OutOfOrderStage { expected: Stage, got: Stage },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

fn violation(msg: impl Into<String>) -> ModelError {
    ModelError::InvariantViolation(msg.into())
}

/// Lowercases and collapses whitespace; the matching rule for keywords.
pub fn normalize_phrase(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    SemanticSegmentation,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::SemanticSegmentation => "semantic_segmentation",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "classification" => Ok(TaskKind::Classification),
            "semantic_segmentation" | "segmentation" => Ok(TaskKind::SemanticSegmentation),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

/// The task statement substituted for `{{TASK}}` in every prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescription {
    pub kind: TaskKind,
    pub text: String,
}

impl TaskDescription {
    pub fn new(kind: TaskKind, text: impl Into<String>) -> Result<Self, ModelError> {
        let task = Self { kind, text: text.into() };
        task.validate()?;
        Ok(task)
    }

    /// Default statement for a task kind.
    pub fn default_for(kind: TaskKind) -> Self {
        let text = match kind {
            TaskKind::Classification => "image classification: the main object of the image must keep its class",
            TaskKind::SemanticSegmentation => {
                "semantic segmentation for autonomous driving: roads, vehicles and pedestrians \
                 must stay in place"
            }
        };
        Self { kind, text: text.to_string() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.text.trim().is_empty() {
            return Err(violation("task text is empty"));
        }
        Ok(())
    }
}

/// An H×W grid of 8-bit class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl ClassMap {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ModelError> {
        if data.len() != width as usize * height as usize {
            return Err(violation(format!("class map has {} values for {width}x{height}", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self, ModelError> {
        let height = rows.len() as u32;
        let width = rows.first().map_or(0, |r| r.len()) as u32;
        if rows.iter().any(|r| r.len() as u32 != width) {
            return Err(violation("ragged class map rows"));
        }
        Self::new(width, height, rows.concat())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[(y * self.width + x) as usize]
    }
}

#[derive(Serialize, Deserialize)]
struct ClassMapWire {
    width: u32,
    height: u32,
    data_b64: String,
}

impl Serialize for ClassMap {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        ClassMapWire {
            width: self.width,
            height: self.height,
            data_b64: base64::engine::general_purpose::STANDARD.encode(&self.data),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ClassMap {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = ClassMapWire::deserialize(deserializer)?;
        let data = base64::engine::general_purpose::STANDARD.decode(wire.data_b64).map_err(serde::de::Error::custom)?;
        ClassMap::new(wire.width, wire.height, data).map_err(serde::de::Error::custom)
    }
}

/// Class id → class name.
pub type Palette = BTreeMap<u8, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundTruth {
    Classification { label_id: u32, label_name: String },
    Segmentation { map: ClassMap, palette: Palette },
}

impl GroundTruth {
    pub fn validate(&self) -> Result<(), ModelError> {
        if let GroundTruth::Segmentation { map, palette } = self {
            if let Some(v) = map.data().iter().find(|v| !palette.contains_key(v)) {
                return Err(violation(format!("class id {v} has no palette entry")));
            }
        }
        Ok(())
    }
}

/// Either a path (relative to the dataset root) or a `sha256:<hex>` content address.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ImageRef {
    Path(String),
    Sha256(String),
}

impl ImageRef {
    pub fn content(hex_digest: impl Into<String>) -> Self {
        ImageRef::Sha256(hex_digest.into())
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageRef::Path(p) => f.write_str(p),
            ImageRef::Sha256(h) => write!(f, "sha256:{h}"),
        }
    }
}

impl FromStr for ImageRef {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(hex_digest) = s.strip_prefix("sha256:") {
            if hex_digest.len() != 64 || !hex_digest.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(format!("malformed content address `{s}`"));
            }
            Ok(ImageRef::Sha256(hex_digest.to_ascii_lowercase()))
        } else if s.is_empty() {
            Err("empty image reference".into())
        } else {
            Ok(ImageRef::Path(s.to_string()))
        }
    }
}

impl Serialize for ImageRef {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ImageRef {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub image_ref: ImageRef,
    pub ground_truth: GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    Captioner,
    Counterfactual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub sentences: Vec<String>,
    pub source: CaptionSource,
}

impl Caption {
    pub fn new(sentences: Vec<String>, source: CaptionSource) -> Result<Self, ModelError> {
        let caption = Self { sentences, source };
        caption.validate()?;
        Ok(caption)
    }

    /// Splits free text into sentences at `.`, `!` or `?` followed by whitespace.
    pub fn from_text(text: &str, source: CaptionSource) -> Result<Self, ModelError> {
        let mut sentences = Vec::new();
        let mut current = String::new();
        let mut chars = text.chars().peekable();
        while let Some(c) = chars.next() {
            current.push(c);
            let at_boundary = matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace());
            if at_boundary {
                let s = current.trim();
                if !s.is_empty() {
                    sentences.push(s.to_string());
                }
                current.clear();
            }
        }
        let tail = current.trim();
        if !tail.is_empty() {
            sentences.push(tail.to_string());
        }
        Self::new(sentences, source)
    }

    pub fn text(&self) -> String {
        self.sentences.join(" ")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.sentences.is_empty() {
            return Err(violation("caption has no sentences"));
        }
        if self.sentences.iter().any(|s| s.trim().is_empty()) {
            return Err(violation("caption contains an empty sentence"));
        }
        Ok(())
    }

    /// Compares sentence text only, ignoring the caption source.
    pub fn same_text(&self, other: &Caption) -> bool {
        normalize_phrase(&self.text()) == normalize_phrase(&other.text())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSet {
    pub keywords: Vec<String>,
}

impl KeywordSet {
    pub fn new(keywords: Vec<String>) -> Result<Self, ModelError> {
        let set = Self { keywords };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.keywords.is_empty() {
            return Err(violation("keyword set is empty"));
        }
        let mut seen = std::collections::HashSet::new();
        for k in &self.keywords {
            let norm = normalize_phrase(k);
            if norm.is_empty() {
                return Err(violation("empty keyword"));
            }
            if !seen.insert(norm) {
                return Err(violation(format!("duplicate keyword `{k}`")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, keyword: &str) -> bool {
        let norm = normalize_phrase(keyword);
        self.keywords.iter().any(|k| normalize_phrase(k) == norm)
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlternativeMap {
    pub entries: IndexMap<String, Vec<String>>,
}

impl AlternativeMap {
    pub fn new(entries: IndexMap<String, Vec<String>>) -> Result<Self, ModelError> {
        let map = Self { entries };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.entries.is_empty() {
            return Err(violation("alternative map is empty"));
        }
        let mut seen = std::collections::HashSet::new();
        for (keyword, alternatives) in &self.entries {
            let norm = normalize_phrase(keyword);
            if norm.is_empty() {
                return Err(violation("empty keyword in alternative map"));
            }
            if !seen.insert(norm.clone()) {
                return Err(violation(format!("duplicate keyword `{keyword}`")));
            }
            if alternatives.is_empty() {
                return Err(violation(format!("no alternatives for `{keyword}`")));
            }
            for alt in alternatives {
                let alt_norm = normalize_phrase(alt);
                if alt_norm.is_empty() {
                    return Err(violation(format!("empty alternative for `{keyword}`")));
                }
                if alt_norm == norm {
                    return Err(violation(format!("alternative `{alt}` equals its keyword `{keyword}`")));
                }
            }
        }
        Ok(())
    }

    /// Looks up the alternatives of a keyword under the normalized matching rule.
    pub fn get(&self, keyword: &str) -> Option<&[String]> {
        let norm = normalize_phrase(keyword);
        self.entries.iter().find(|(k, _)| normalize_phrase(k) == norm).map(|(_, v)| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Maximum number of keyword substitutions per counterfactual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditBudget {
    Limit(u32),
    All,
}

impl Default for EditBudget {
    fn default() -> Self {
        EditBudget::Limit(1)
    }
}

impl EditBudget {
    pub fn cap(self, available: usize) -> usize {
        match self {
            EditBudget::Limit(n) => (n as usize).min(available),
            EditBudget::All => available,
        }
    }
}

impl fmt::Display for EditBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EditBudget::Limit(n) => write!(f, "{n}"),
            EditBudget::All => f.write_str("all"),
        }
    }
}

impl FromStr for EditBudget {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(EditBudget::All);
        }
        match s.parse::<u32>() {
            Ok(n) => Ok(EditBudget::Limit(n)),
            Err(_) => Err(format!("edit budget must be a count or `all`, got `{s}`")),
        }
    }
}

impl Serialize for EditBudget {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            EditBudget::All => serializer.serialize_str("all"),
            EditBudget::Limit(n) => serializer.serialize_u32(*n),
        }
    }
}

impl<'de> Deserialize<'de> for EditBudget {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u32),
            Word(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Count(n) => Ok(EditBudget::Limit(n)),
            Raw::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub keyword: String,
    pub alternative: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSelection {
    pub applied: Vec<Edit>,
    pub budget: EditBudget,
}

impl EditSelection {
    pub fn validate_against(&self, alternatives: &AlternativeMap) -> Result<(), ModelError> {
        let expected = self.budget.cap(alternatives.len());
        if self.applied.len() != expected {
            return Err(violation(format!(
                "edit selection has {} edits, budget {} over {} keywords requires {expected}",
                self.applied.len(),
                self.budget,
                alternatives.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for edit in &self.applied {
            let options = alternatives
                .get(&edit.keyword)
                .ok_or_else(|| violation(format!("edit keyword `{}` not in alternatives", edit.keyword)))?;
            let alt = normalize_phrase(&edit.alternative);
            if !options.iter().any(|o| normalize_phrase(o) == alt) {
                return Err(violation(format!("`{}` is not an alternative of `{}`", edit.alternative, edit.keyword)));
            }
            if !seen.insert(normalize_phrase(&edit.keyword)) {
                return Err(violation(format!("keyword `{}` edited twice", edit.keyword)));
            }
        }
        Ok(())
    }
}

/// The edge map an augmentation was conditioned on, plus its extraction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningRef {
    pub image_ref: ImageRef,
    pub params: CannyParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmentation {
    pub index: u32,
    pub seed: u64,
    pub image_ref: ImageRef,
    /// Absent for every augmentation the pipeline produces: the label is the original's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_override: Option<GroundTruth>,
}

impl Augmentation {
    pub fn inherited(index: u32, seed: u64, image_ref: ImageRef) -> Self {
        Self { index, seed, image_ref, ground_truth_override: None }
    }
}

/// Reproducibility metadata written by the pipeline runner.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub template_hashes: BTreeMap<String, String>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub attempts: BTreeMap<String, u32>,
    /// Keywords whose chosen alternative appears in the counterfactual text.
    #[serde(default)]
    pub detected_edits: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Caption,
    Keywords,
    Alternatives,
    Edits,
    Counterfactual,
    Conditioning,
    Augmentation,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Caption,
        Stage::Keywords,
        Stage::Alternatives,
        Stage::Edits,
        Stage::Counterfactual,
        Stage::Conditioning,
        Stage::Augmentation,
    ];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Caption => "caption",
            Stage::Keywords => "keywords",
            Stage::Alternatives => "alternatives",
            Stage::Edits => "edits",
            Stage::Counterfactual => "counterfactual",
            Stage::Conditioning => "conditioning",
            Stage::Augmentation => "augmentation",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StagePayload {
    Caption(Caption),
    Keywords(KeywordSet),
    Alternatives(AlternativeMap),
    Edits(EditSelection),
    Counterfactual(Caption),
    Conditioning(ConditioningRef),
    Augmentation(Augmentation),
}

impl StagePayload {
    pub fn stage(&self) -> Stage {
        match self {
            StagePayload::Caption(_) => Stage::Caption,
            StagePayload::Keywords(_) => Stage::Keywords,
            StagePayload::Alternatives(_) => Stage::Alternatives,
            StagePayload::Edits(_) => Stage::Edits,
            StagePayload::Counterfactual(_) => Stage::Counterfactual,
            StagePayload::Conditioning(_) => Stage::Conditioning,
            StagePayload::Augmentation(_) => Stage::Augmentation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetamorphicRecord {
    pub schema_version: u32,
    pub id: String,
    pub task: TaskDescription,
    pub original: TestCase,
    #[serde(default)]
    pub caption: Option<Caption>,
    #[serde(default)]
    pub keywords: Option<KeywordSet>,
    #[serde(default)]
    pub alternatives: Option<AlternativeMap>,
    #[serde(default)]
    pub edits: Option<EditSelection>,
    #[serde(default)]
    pub counterfactual: Option<Caption>,
    #[serde(default)]
    pub conditioning: Option<ConditioningRef>,
    #[serde(default)]
    pub augmentations: Vec<Augmentation>,
    #[serde(default)]
    pub provenance: Provenance,
}

/// Creates a record holding only the original test case and task.
pub fn new_record(test_case: TestCase, task: TaskDescription) -> MetamorphicRecord {
    MetamorphicRecord {
        schema_version: LEDGER_SCHEMA_VERSION,
        id: test_case.id.clone(),
        task,
        original: test_case,
        caption: None,
        keywords: None,
        alternatives: None,
        edits: None,
        counterfactual: None,
        conditioning: None,
        augmentations: Vec::new(),
        provenance: Provenance::default(),
    }
}

impl MetamorphicRecord {
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn is_populated(&self, stage: Stage) -> bool {
        match stage {
            Stage::Caption => self.caption.is_some(),
            Stage::Keywords => self.keywords.is_some(),
            Stage::Alternatives => self.alternatives.is_some(),
            Stage::Edits => self.edits.is_some(),
            Stage::Counterfactual => self.counterfactual.is_some(),
            Stage::Conditioning => self.conditioning.is_some(),
            Stage::Augmentation => !self.augmentations.is_empty(),
        }
    }

    pub fn populated_stages(&self) -> Vec<Stage> {
        Stage::ALL.into_iter().filter(|s| self.is_populated(*s)).collect()
    }

    /// The stage the next payload must belong to. Augmentations may repeat.
    pub fn next_stage(&self) -> Stage {
        Stage::ALL.into_iter().find(|s| !self.is_populated(*s)).unwrap_or(Stage::Augmentation)
    }

    /// Ground truth an augmentation is expected to carry.
    pub fn ground_truth_of<'a>(&'a self, augmentation: &'a Augmentation) -> &'a GroundTruth {
        augmentation.ground_truth_override.as_ref().unwrap_or(&self.original.ground_truth)
    }

    /// Re-checks every populated stage, e.g. after deserialization.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.task.validate()?;
        self.original.ground_truth.validate()?;
        let populated = self.populated_stages();
        for (i, stage) in populated.iter().enumerate() {
            if Stage::ALL[i] != *stage {
                return Err(ModelError::OutOfOrderStage { expected: Stage::ALL[i], got: *stage });
            }
        }
        let mut replay = new_record(self.original.clone(), self.task.clone());
        let payloads = [
            self.caption.clone().map(StagePayload::Caption),
            self.keywords.clone().map(StagePayload::Keywords),
            self.alternatives.clone().map(StagePayload::Alternatives),
            self.edits.clone().map(StagePayload::Edits),
            self.counterfactual.clone().map(StagePayload::Counterfactual),
            self.conditioning.clone().map(StagePayload::Conditioning),
        ];
        for payload in payloads.into_iter().flatten() {
            replay = advance(&replay, payload)?;
        }
        let mut indices = std::collections::HashSet::new();
        for aug in &self.augmentations {
            if !indices.insert(aug.index) {
                return Err(violation(format!("duplicate augmentation index {}", aug.index)));
            }
        }
        Ok(())
    }
}

/// Fills the next stage of `record`, returning a new record.
pub fn advance(record: &MetamorphicRecord, payload: StagePayload) -> Result<MetamorphicRecord, ModelError> {
    let expected = record.next_stage();
    let got = payload.stage();
    if got != expected {
        return Err(ModelError::OutOfOrderStage { expected, got });
    }
    let mut next = record.clone();
    match payload {
        StagePayload::Caption(caption) => {
            caption.validate()?;
            if caption.source != CaptionSource::Captioner {
                return Err(violation("original caption must come from the captioner"));
            }
            next.caption = Some(caption);
        }
        StagePayload::Keywords(keywords) => {
            keywords.validate()?;
            next.keywords = Some(keywords);
        }
        StagePayload::Alternatives(alternatives) => {
            alternatives.validate()?;
            let keywords = record.keywords.as_ref().expect("stage order checked");
            if let Some(k) = alternatives.entries.keys().find(|k| !keywords.contains(k)) {
                return Err(violation(format!("alternative key `{k}` is not a keyword")));
            }
            next.alternatives = Some(alternatives);
        }
        StagePayload::Edits(edits) => {
            edits.validate_against(record.alternatives.as_ref().expect("stage order checked"))?;
            next.edits = Some(edits);
        }
        StagePayload::Counterfactual(counterfactual) => {
            counterfactual.validate()?;
            if counterfactual.source != CaptionSource::Counterfactual {
                return Err(violation("counterfactual caption has the wrong source"));
            }
            let caption = record.caption.as_ref().expect("stage order checked");
            let edited = !record.edits.as_ref().expect("stage order checked").applied.is_empty();
            let differs = !counterfactual.same_text(caption);
            if edited != differs {
                return Err(violation(if edited {
                    "counterfactual is identical to the original caption despite edits"
                } else {
                    "counterfactual differs from the original caption without edits"
                }));
            }
            next.counterfactual = Some(counterfactual);
        }
        StagePayload::Conditioning(conditioning) => {
            next.conditioning = Some(conditioning);
        }
        StagePayload::Augmentation(augmentation) => {
            if augmentation.ground_truth_override.is_some() {
                return Err(violation("augmentations inherit the original ground truth"));
            }
            if record.augmentations.iter().any(|a| a.index == augmentation.index) {
                return Err(violation(format!("augmentation index {} already present", augmentation.index)));
            }
            next.augmentations.push(augmentation);
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum MetamorphicVerdict {
    Pass,
    /// Augmentation indices whose ground truth differs from the original.
    Fail {
        relabeled: Vec<u32>,
    },
    NoAugmentations,
}

impl MetamorphicVerdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, MetamorphicVerdict::Pass)
    }
}

/// Checks that every augmentation carries the original's ground truth.
pub fn assert_metamorphic(record: &MetamorphicRecord) -> MetamorphicVerdict {
    if record.augmentations.is_empty() {
        return MetamorphicVerdict::NoAugmentations;
    }
    let relabeled: Vec<u32> = record
        .augmentations
        .iter()
        .filter(|a| *record.ground_truth_of(a) != record.original.ground_truth)
        .map(|a| a.index)
        .collect();
    if relabeled.is_empty() {
        MetamorphicVerdict::Pass
    } else {
        MetamorphicVerdict::Fail { relabeled }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bird_case(id: &str) -> TestCase {
        TestCase {
            id: id.to_string(),
            image_ref: ImageRef::Path(format!("images/{id}.png")),
            ground_truth: GroundTruth::Classification { label_id: 14, label_name: "bird".into() },
        }
    }

    fn classification_task() -> TaskDescription {
        TaskDescription::default_for(TaskKind::Classification)
    }

    fn caption(text: &str) -> Caption {
        Caption::from_text(text, CaptionSource::Captioner).unwrap()
    }

    fn keywords(words: &[&str]) -> KeywordSet {
        KeywordSet::new(words.iter().map(|w| w.to_string()).collect()).unwrap()
    }

    fn alternatives(pairs: &[(&str, &[&str])]) -> AlternativeMap {
        AlternativeMap::new(
            pairs.iter().map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect())).collect(),
        )
        .unwrap()
    }

    fn conditioning() -> ConditioningRef {
        ConditioningRef { image_ref: ImageRef::content("a".repeat(64)), params: CannyParams::default() }
    }

    pub(crate) fn full_record(aug_count: u32) -> MetamorphicRecord {
        let mut r = new_record(bird_case("7"), classification_task());
        r = advance(&r, StagePayload::Caption(caption("A gray car driving down a foggy street."))).unwrap();
        r = advance(&r, StagePayload::Keywords(keywords(&["gray", "foggy"]))).unwrap();
        r = advance(&r, StagePayload::Alternatives(alternatives(&[("gray", &["red"]), ("foggy", &["snowy"])])))
            .unwrap();
        r = advance(
            &r,
            StagePayload::Edits(EditSelection {
                applied: vec![Edit { keyword: "foggy".into(), alternative: "snowy".into() }],
                budget: EditBudget::Limit(1),
            }),
        )
        .unwrap();
        r = advance(
            &r,
            StagePayload::Counterfactual(
                Caption::from_text("A gray car driving down a snowy street.", CaptionSource::Counterfactual).unwrap(),
            ),
        )
        .unwrap();
        r = advance(&r, StagePayload::Conditioning(conditioning())).unwrap();
        for i in 0..aug_count {
            r = advance(
                &r,
                StagePayload::Augmentation(Augmentation::inherited(
                    i,
                    i as u64,
                    ImageRef::content(format!("{i:064x}")),
                )),
            )
            .unwrap();
        }
        r
    }

    #[test]
    fn new_record_has_only_original() {
        let r = new_record(bird_case("7"), classification_task());
        assert_eq!(r.original.id, "7");
        assert!(r.populated_stages().is_empty());
        assert_eq!(r.next_stage(), Stage::Caption);
    }

    #[test]
    fn new_record_keeps_segmentation_map() {
        let map = ClassMap::from_rows(&[vec![0, 0], vec![1, 1]]).unwrap();
        let palette: Palette = [(0, "Road".to_string()), (1, "Vehicle".to_string())].into();
        let case = TestCase {
            id: "s".into(),
            image_ref: ImageRef::Path("s.png".into()),
            ground_truth: GroundTruth::Segmentation { map: map.clone(), palette },
        };
        let r = new_record(case, TaskDescription::default_for(TaskKind::SemanticSegmentation));
        match &r.original.ground_truth {
            GroundTruth::Segmentation { map: m, .. } => assert_eq!(m, &map),
            _ => panic!("expected segmentation ground truth"),
        }
    }

    #[test]
    fn record_ids_follow_cases() {
        let ids: std::collections::HashSet<_> =
            (0..10).map(|i| new_record(bird_case(&i.to_string()), classification_task()).id).collect();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn advance_fills_keywords_and_leaves_input() {
        let r = new_record(bird_case("7"), classification_task());
        let r = advance(&r, StagePayload::Caption(caption("A gray car driving down a foggy street."))).unwrap();
        let before = r.clone();
        let next = advance(&r, StagePayload::Keywords(keywords(&["gray", "foggy"]))).unwrap();
        assert_eq!(r, before);
        assert_eq!(next.keywords.unwrap().keywords, vec!["gray", "foggy"]);
    }

    #[test]
    fn keywords_before_caption_is_out_of_order() {
        let r = new_record(bird_case("7"), classification_task());
        let err = advance(&r, StagePayload::Keywords(keywords(&["gray"]))).unwrap_err();
        assert_eq!(err, ModelError::OutOfOrderStage { expected: Stage::Caption, got: Stage::Keywords });
    }

    #[test]
    fn alternative_for_unknown_keyword_is_rejected() {
        let r = new_record(bird_case("7"), classification_task());
        let r = advance(&r, StagePayload::Caption(caption("A gray car."))).unwrap();
        let r = advance(&r, StagePayload::Keywords(keywords(&["gray"]))).unwrap();
        let err = advance(&r, StagePayload::Alternatives(alternatives(&[("snow", &["rain"])]))).unwrap_err();
        assert!(matches!(err, ModelError::InvariantViolation(_)));
    }

    #[test]
    fn keyword_matching_is_case_and_space_insensitive() {
        let r = new_record(bird_case("7"), classification_task());
        let r = advance(&r, StagePayload::Caption(caption("A gray car."))).unwrap();
        let r = advance(&r, StagePayload::Keywords(keywords(&["Gray  Car"]))).unwrap();
        assert!(advance(&r, StagePayload::Alternatives(alternatives(&[("gray car", &["red car"])]))).is_ok());
    }

    #[test]
    fn counterfactual_must_differ_when_edited() {
        let r = full_record(0);
        let mut r2 = r.clone();
        r2.counterfactual = None;
        r2.conditioning = None;
        let same =
            Caption::from_text("A gray car driving down a foggy street.", CaptionSource::Counterfactual).unwrap();
        assert!(advance(&r2, StagePayload::Counterfactual(same)).is_err());
    }

    #[test]
    fn empty_edits_require_identical_counterfactual() {
        let r = new_record(bird_case("7"), classification_task());
        let r = advance(&r, StagePayload::Caption(caption("A gray car."))).unwrap();
        let r = advance(&r, StagePayload::Keywords(keywords(&["gray"]))).unwrap();
        let r = advance(&r, StagePayload::Alternatives(alternatives(&[("gray", &["red"])]))).unwrap();
        let r =
            advance(&r, StagePayload::Edits(EditSelection { applied: vec![], budget: EditBudget::Limit(0) })).unwrap();
        let changed = Caption::from_text("A red car.", CaptionSource::Counterfactual).unwrap();
        assert!(advance(&r, StagePayload::Counterfactual(changed)).is_err());
        let same = Caption::from_text("A gray car.", CaptionSource::Counterfactual).unwrap();
        assert!(advance(&r, StagePayload::Counterfactual(same)).is_ok());
    }

    #[test]
    fn edit_count_must_match_budget() {
        let r = new_record(bird_case("7"), classification_task());
        let r = advance(&r, StagePayload::Caption(caption("A gray car."))).unwrap();
        let r = advance(&r, StagePayload::Keywords(keywords(&["gray", "car"]))).unwrap();
        let r =
            advance(&r, StagePayload::Alternatives(alternatives(&[("gray", &["red"]), ("car", &["van"])]))).unwrap();
        let one = EditSelection {
            applied: vec![Edit { keyword: "gray".into(), alternative: "red".into() }],
            budget: EditBudget::All,
        };
        assert!(advance(&r, StagePayload::Edits(one)).is_err());
    }

    #[test]
    fn metamorphic_passes_for_inherited_labels() {
        assert_eq!(assert_metamorphic(&full_record(5)), MetamorphicVerdict::Pass);
    }

    #[test]
    fn metamorphic_fails_for_relabeled_augmentation() {
        let mut r = full_record(5);
        r.augmentations[3].ground_truth_override =
            Some(GroundTruth::Classification { label_id: 15, label_name: "frog".into() });
        assert_eq!(assert_metamorphic(&r), MetamorphicVerdict::Fail { relabeled: vec![3] });
    }

    #[test]
    fn metamorphic_needs_augmentations() {
        assert_eq!(assert_metamorphic(&full_record(0)), MetamorphicVerdict::NoAugmentations);
    }

    #[test]
    fn advance_rejects_relabeled_augmentation() {
        let r = full_record(0);
        let mut aug = Augmentation::inherited(0, 0, ImageRef::content("b".repeat(64)));
        aug.ground_truth_override = Some(GroundTruth::Classification { label_id: 1, label_name: "x".into() });
        assert!(advance(&r, StagePayload::Augmentation(aug)).is_err());
    }

    #[test]
    fn validate_accepts_pipeline_shaped_record() {
        full_record(3).validate().unwrap();
    }

    #[test]
    fn caption_sentence_splitting() {
        let c = Caption::from_text("A road. Two cars!  Cloudy weather", CaptionSource::Captioner).unwrap();
        assert_eq!(c.sentences, vec!["A road.", "Two cars!", "Cloudy weather"]);
        assert!(Caption::from_text("   ", CaptionSource::Captioner).is_err());
        assert_eq!(Caption::from_text("Version 2.5 is out.", CaptionSource::Captioner).unwrap().sentences.len(), 1);
    }

    #[test]
    fn keyword_duplicates_are_case_insensitive() {
        assert!(KeywordSet::new(vec!["Foggy".into(), "foggy".into()]).is_err());
        assert!(KeywordSet::new(vec![]).is_err());
    }

    #[test]
    fn alternative_equal_to_keyword_is_rejected() {
        let mut m = IndexMap::new();
        m.insert("foggy".to_string(), vec!["Foggy".to_string()]);
        assert!(AlternativeMap::new(m).is_err());
    }

    #[test]
    fn image_ref_parsing() {
        let h = "ab".repeat(32);
        assert_eq!(format!("sha256:{h}").parse::<ImageRef>().unwrap(), ImageRef::Sha256(h));
        assert!("sha256:xyz".parse::<ImageRef>().is_err());
        assert_eq!("a/b.png".parse::<ImageRef>().unwrap(), ImageRef::Path("a/b.png".into()));
    }

    #[test]
    fn budget_parsing() {
        assert_eq!("all".parse::<EditBudget>().unwrap(), EditBudget::All);
        assert_eq!("1".parse::<EditBudget>().unwrap(), EditBudget::Limit(1));
        assert_eq!("3".parse::<EditBudget>().unwrap(), EditBudget::Limit(3));
        assert_eq!(EditBudget::Limit(5).cap(2), 2);
        assert_eq!(EditBudget::Limit(0).cap(2), 0);
    }
}
