//! JSONL manifests, sampling plans, segmentation maps and manifest export.
//!
//! A manifest is one JSON object per line. An optional first line of the
//! form `{"dataset": {...}}` carries the dataset name, task and class
//! count; every other line is an entry:
//!
//! ```text
//! {"dataset": {"name": "toy", "task": "classification", "class_count": 2, "class_names": ["dark", "bright"]}}
//! {"id": "dark-0", "image": "images/dark-0.png", "label": 0}
//! {"id": "dark-0#0", "image": "aug/1f.png", "label": 0, "source": "augmented", "origin_id": "dark-0", "augmentation": 0}
//! ```
//!
//! Segmentation entries use `"mask": "<path to 8-bit PNG>"` instead of
//! `label`, and the header names a palette file (`{"0": "Road", ...}`).
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{derive_seed, item_seed};
use crate::model::{
    assert_metamorphic, ClassMap, GroundTruth, ImageRef, MetamorphicRecord, MetamorphicVerdict, Palette,
    TaskDescription, TaskKind, TestCase,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("manifest line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("manifest line {line}: missing file {path}")]
    MissingFile { line: usize, path: String },
    #[error("manifest line {line}: label {label} is out of range for {class_count} classes")]
    LabelOutOfRange { line: usize, label: u32, class_count: u32 },
    #[error("manifest has no entries")]
    Empty,
    #[error("class id {value} at ({x}, {y}) has no palette entry")]
    UnknownClassId { value: u8, x: u32, y: u32 },
    #[error("class {class} has {available} entries, plan needs {required}")]
    InsufficientClassSupport { class: u32, available: usize, required: u32 },
    #[error("invalid sampling plan: {0}")]
    InvalidPlan(String),
    #[error("record {id} breaks the metamorphic relation: {reason}")]
    InvariantViolation { id: String, reason: String },
    #[error("{path} is locked by another writer (remove {path}.lock if stale)")]
    Locked { path: String },
    #[error("mask {path} is {got_width}x{got_height}, image is {width}x{height}")]
    MaskSize { path: String, width: u32, height: u32, got_width: u32, got_height: u32 },
    #[error("unsupported mask {path}: {reason}")]
    BadMask { path: String, reason: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrySource {
    #[default]
    Original,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub name: String,
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_text: Option<String>,
    pub class_count: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palette: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    dataset: ManifestHeader,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "is_original")]
    pub source: EntrySource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<u32>,
}

fn is_original(source: &EntrySource) -> bool {
    *source == EntrySource::Original
}

impl ManifestEntry {
    pub fn labeled(id: impl Into<String>, image: impl Into<String>, label: u32) -> Self {
        Self {
            id: id.into(),
            image: image.into(),
            label: Some(label),
            mask: None,
            source: EntrySource::Original,
            origin_id: None,
            augmentation: None,
        }
    }

    pub fn masked(id: impl Into<String>, image: impl Into<String>, mask: impl Into<String>) -> Self {
        Self { label: None, mask: Some(mask.into()), ..Self::labeled(id, image, 0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub task: TaskDescription,
    pub class_count: u32,
    pub class_names: Vec<String>,
    pub palette: Option<Palette>,
    /// Directory that relative paths resolve against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Builds a manifest in memory; no files are touched.
    pub fn in_memory(
        name: impl Into<String>,
        task: TaskDescription,
        class_count: u32,
        entries: Vec<ManifestEntry>,
    ) -> Result<Self, DatasetError> {
        let manifest = Self {
            name: name.into(),
            task,
            class_count,
            class_names: Vec::new(),
            palette: None,
            root: PathBuf::from("."),
            entries,
        };
        manifest.validate_entries()?;
        Ok(manifest)
    }

    fn validate_entries(&self) -> Result<(), DatasetError> {
        if self.entries.is_empty() {
            return Err(DatasetError::Empty);
        }
        let mut ids = HashSet::new();
        for (i, entry) in self.entries.iter().enumerate() {
            let line = i + 1;
            if !ids.insert(entry.id.as_str()) {
                return Err(DatasetError::Parse { line, reason: format!("duplicate id `{}`", entry.id) });
            }
            match self.task.kind {
                TaskKind::Classification => {
                    let label = entry.label.ok_or_else(|| DatasetError::Parse {
                        line,
                        reason: "classification entry needs `label`".into(),
                    })?;
                    if label >= self.class_count {
                        return Err(DatasetError::LabelOutOfRange { line, label, class_count: self.class_count });
                    }
                }
                TaskKind::SemanticSegmentation => {
                    if entry.mask.is_none() {
                        return Err(DatasetError::Parse { line, reason: "segmentation entry needs `mask`".into() });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn label_name(&self, label: u32) -> String {
        self.class_names.get(label as usize).cloned().unwrap_or_else(|| label.to_string())
    }

    /// One name per class id; unnamed classes use their id.
    pub fn class_labels(&self) -> Vec<String> {
        (0..self.class_count).map(|c| self.label_name(c)).collect()
    }

    pub fn header(&self) -> ManifestHeader {
        ManifestHeader {
            name: self.name.clone(),
            task: self.task.kind,
            task_text: Some(self.task.text.clone()),
            class_count: self.class_count,
            class_names: self.class_names.clone(),
            palette: None,
        }
    }

    /// The test case for entry `index`, loading its mask when segmenting.
    pub fn test_case(&self, index: usize) -> Result<TestCase, DatasetError> {
        let entry = &self.entries[index];
        let ground_truth = match self.task.kind {
            TaskKind::Classification => {
                let label = entry.label.expect("validated at load");
                GroundTruth::Classification { label_id: label, label_name: self.label_name(label) }
            }
            TaskKind::SemanticSegmentation => {
                let mask_path = self.resolve(entry.mask.as_deref().expect("validated at load"));
                let palette = self
                    .palette
                    .clone()
                    .unwrap_or_else(|| (0..self.class_count.min(256)).map(|c| (c as u8, self.label_name(c))).collect());
                let gt = load_segmentation_map(&mask_path, &palette)?;
                let image_path = self.resolve(&entry.image);
                let (width, height) = image::image_dimensions(&image_path).map_err(|e| io_err(&image_path, e))?;
                if let GroundTruth::Segmentation { map, .. } = &gt {
                    if (map.width(), map.height()) != (width, height) {
                        return Err(DatasetError::MaskSize {
                            path: mask_path.display().to_string(),
                            width,
                            height,
                            got_width: map.width(),
                            got_height: map.height(),
                        });
                    }
                }
                gt
            }
        };
        let image_ref =
            entry.image.parse::<ImageRef>().map_err(|reason| DatasetError::Parse { line: index + 1, reason })?;
        Ok(TestCase { id: entry.id.clone(), image_ref, ground_truth })
    }
}

fn parse_palette(path: &Path) -> Result<Palette, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, format!("invalid palette: {e}")))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut header: Option<ManifestHeader> = None;
    let mut entries = Vec::new();
    let mut entry_lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if entries.is_empty() && header.is_none() && line.trim_start().starts_with("{\"dataset\"") {
            let parsed: HeaderLine = serde_json::from_str(&line)
                .map_err(|e| DatasetError::Parse { line: line_no, reason: e.to_string() })?;
            header = Some(parsed.dataset);
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| DatasetError::Parse { line: line_no, reason: e.to_string() })?;
        entries.push(entry);
        entry_lines.push(line_no);
    }
    let header = match header {
        Some(h) => h,
        None => infer_header(path, &entries)?,
    };
    let task = match &header.task_text {
        Some(text) => TaskDescription::new(header.task, text.clone())
            .map_err(|e| DatasetError::Parse { line: 1, reason: e.to_string() })?,
        None => TaskDescription::default_for(header.task),
    };
    let palette = match &header.palette {
        Some(p) => {
            let full = if Path::new(p).is_absolute() { PathBuf::from(p) } else { root.join(p) };
            Some(parse_palette(&full)?)
        }
        None => None,
    };
    let manifest = DatasetManifest {
        name: header.name,
        task,
        class_count: header.class_count,
        class_names: header.class_names,
        palette,
        root,
        entries,
    };
    manifest.validate_entries().map_err(|e| renumber(e, &entry_lines))?;
    for (entry, line) in manifest.entries.iter().zip(&entry_lines) {
        let mut files = vec![&entry.image];
        files.extend(entry.mask.as_ref());
        for file in files {
            if file.starts_with("sha256:") {
                continue;
            }
            let full = manifest.resolve(file);
            if !full.is_file() {
                return Err(DatasetError::MissingFile { line: *line, path: full.display().to_string() });
            }
        }
    }
    Ok(manifest)
}

/// Maps entry positions in validation errors back to file line numbers.
fn renumber(e: DatasetError, lines: &[usize]) -> DatasetError {
    let fix = |n: usize| lines.get(n - 1).copied().unwrap_or(n);
    match e {
        DatasetError::Parse { line, reason } => DatasetError::Parse { line: fix(line), reason },
        DatasetError::LabelOutOfRange { line, label, class_count } => {
            DatasetError::LabelOutOfRange { line: fix(line), label, class_count }
        }
        other => other,
    }
}

fn infer_header(path: &Path, entries: &[ManifestEntry]) -> Result<ManifestHeader, DatasetError> {
    let first = entries.first().ok_or(DatasetError::Empty)?;
    let task = if first.mask.is_some() { TaskKind::SemanticSegmentation } else { TaskKind::Classification };
    let class_count = entries.iter().filter_map(|e| e.label).max().map_or(0, |m| m + 1);
    Ok(ManifestHeader {
        name: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        task,
        task_text: None,
        class_count: if task == TaskKind::SemanticSegmentation { 256 } else { class_count },
        class_names: Vec::new(),
        palette: None,
    })
}

/// Writes a manifest with a header line. Paths are written as given.
pub fn write_manifest(path: &Path, header: &ManifestHeader, entries: &[ManifestEntry]) -> Result<(), DatasetError> {
    let _lock = LockFile::acquire(path)?;
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write_line = |value: String| writeln!(out, "{value}").map_err(|e| io_err(path, e));
    write_line(serde_json::to_string(&HeaderLine { dataset: header.clone() }).expect("header serializes"))?;
    for entry in entries {
        write_line(serde_json::to_string(entry).expect("entry serializes"))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Exclusive `<path>.lock` marker, removed on drop.
#[derive(Debug)]
pub struct LockFile {
    path: PathBuf,
}

impl LockFile {
    pub fn acquire(target: &Path) -> Result<Self, DatasetError> {
        let mut name = target.as_os_str().to_owned();
        name.push(".lock");
        let path = PathBuf::from(name);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(DatasetError::Locked { path: target.display().to_string() })
            }
            Err(e) => Err(io_err(&path, e)),
        }
    }
}

impl Drop for LockFile {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub per_class: u32,
    pub augmentations_per_image: u32,
    pub seed: u64,
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.per_class == 0 {
            return Err(DatasetError::InvalidPlan("per_class must be at least 1".into()));
        }
        if self.augmentations_per_image == 0 {
            return Err(DatasetError::InvalidPlan("augmentations_per_image must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanItem {
    /// Index into the manifest's entries.
    pub entry: usize,
    pub case_id: String,
    pub augmentation_index: u32,
    pub seed: u64,
}

/// Work items ordered by class, then manifest order, then augmentation
/// index. Segmentation manifests form a single stratum.
pub fn make_plan(manifest: &DatasetManifest, plan: &SamplingPlan) -> Result<Vec<PlanItem>, DatasetError> {
    plan.validate()?;
    let strata: Vec<(u32, Vec<usize>)> = match manifest.task.kind {
        TaskKind::Classification => {
            let mut by_class: BTreeMap<u32, Vec<usize>> = (0..manifest.class_count).map(|c| (c, Vec::new())).collect();
            for (i, entry) in manifest.entries.iter().enumerate() {
                by_class.entry(entry.label.expect("validated")).or_default().push(i);
            }
            by_class.into_iter().collect()
        }
        TaskKind::SemanticSegmentation => vec![(0, (0..manifest.entries.len()).collect())],
    };
    let mut items = Vec::with_capacity(strata.len() * plan.per_class as usize * plan.augmentations_per_image as usize);
    for (class, members) in strata {
        if members.len() < plan.per_class as usize {
            return Err(DatasetError::InsufficientClassSupport {
                class,
                available: members.len(),
                required: plan.per_class,
            });
        }
        let stratum_seed = derive_seed(&[b"plan", &plan.seed.to_le_bytes(), &class.to_le_bytes()]);
        let mut rng = ChaCha8Rng::seed_from_u64(stratum_seed);
        let mut chosen = sample(&mut rng, members.len(), plan.per_class as usize).into_vec();
        chosen.sort_unstable();
        for pick in chosen {
            let entry = members[pick];
            let case_id = &manifest.entries[entry].id;
            for augmentation_index in 0..plan.augmentations_per_image {
                items.push(PlanItem {
                    entry,
                    case_id: case_id.clone(),
                    augmentation_index,
                    seed: item_seed(plan.seed, case_id, augmentation_index),
                });
            }
        }
    }
    Ok(items)
}

/// Reads an 8-bit grayscale or indexed PNG whose sample values are class ids.
pub fn load_segmentation_map(path: &Path, palette: &Palette) -> Result<GroundTruth, DatasetError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let map = decode_class_ids(&bytes)
        .map_err(|reason| DatasetError::BadMask { path: path.display().to_string(), reason })?;
    segmentation_truth(map, palette)
}

pub fn segmentation_truth(map: ClassMap, palette: &Palette) -> Result<GroundTruth, DatasetError> {
    for y in 0..map.height() {
        for x in 0..map.width() {
            let value = map.get(x, y);
            if !palette.contains_key(&value) {
                return Err(DatasetError::UnknownClassId { value, x, y });
            }
        }
    }
    Ok(GroundTruth::Segmentation { map, palette: palette.clone() })
}

/// Raw sample values of an 8-bit single-channel PNG, palette indices included.
pub fn decode_class_ids(bytes: &[u8]) -> Result<ClassMap, String> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Grayscale | png::ColorType::Indexed)
    {
        return Err(format!("expected 8-bit grayscale or indexed, got {:?} {:?}", info.color_type, info.bit_depth));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h);
    for row in buf.chunks(info.line_size).take(h) {
        data.extend_from_slice(&row[..w]);
    }
    ClassMap::new(info.width, info.height, data).map_err(|e| e.to_string())
}

/// Encodes a class map as an 8-bit grayscale PNG.
pub fn encode_class_ids(map: &ClassMap) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, map.width(), map.height());
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(|e| e.to_string())?;
        writer.write_image_data(map.data()).map_err(|e| e.to_string())?;
        writer.finish().map_err(|e| e.to_string())?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestMode {
    AugmentedOnly,
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub original_entries: usize,
    pub augmented_entries: usize,
    pub total: usize,
}

fn relative_to(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Exports augmentations as manifest entries carrying their original's
/// label or mask. Content-addressed images are looked up as
/// `<images_dir>/<sha>.png`.
pub fn write_augmented_manifest(
    records: &[MetamorphicRecord],
    original: &DatasetManifest,
    images_dir: &Path,
    out_path: &Path,
    mode: ManifestMode,
) -> Result<ManifestSummary, DatasetError> {
    let out_dir = out_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let by_id: BTreeMap<&str, &ManifestEntry> = original.entries.iter().map(|e| (e.id.as_str(), e)).collect();
    let original_path = |entry_path: &str| {
        if entry_path.starts_with("sha256:") {
            entry_path.to_string()
        } else {
            relative_to(&original.resolve(entry_path), &out_dir)
        }
    };
    let mut entries = Vec::new();
    if mode == ManifestMode::Combined {
        for e in &original.entries {
            entries.push(ManifestEntry {
                image: original_path(&e.image),
                mask: e.mask.as_deref().map(original_path),
                ..e.clone()
            });
        }
    }
    let original_count = entries.len();
    for record in records {
        if let MetamorphicVerdict::Fail { relabeled } = assert_metamorphic(record) {
            return Err(DatasetError::InvariantViolation {
                id: record.id.clone(),
                reason: format!("augmentations {relabeled:?} carry their own ground truth"),
            });
        }
        let origin = by_id.get(record.original.id.as_str()).ok_or_else(|| DatasetError::InvariantViolation {
            id: record.id.clone(),
            reason: format!("original `{}` is not in the manifest", record.original.id),
        })?;
        for aug in &record.augmentations {
            let image = match &aug.image_ref {
                ImageRef::Sha256(h) => relative_to(&images_dir.join(format!("{h}.png")), &out_dir),
                ImageRef::Path(p) => p.clone(),
            };
            let label = match &record.original.ground_truth {
                GroundTruth::Classification { label_id, .. } => Some(*label_id),
                GroundTruth::Segmentation { .. } => None,
            };
            entries.push(ManifestEntry {
                id: format!("{}#{}", record.original.id, aug.index),
                image,
                label,
                mask: origin.mask.as_deref().map(original_path),
                source: EntrySource::Augmented,
                origin_id: Some(record.original.id.clone()),
                augmentation: Some(aug.index),
            });
        }
    }
    let mut header = original.header();
    header.name = match mode {
        ManifestMode::AugmentedOnly => format!("{}-augmented", original.name),
        ManifestMode::Combined => format!("{}-combined", original.name),
    };
    if let Some(palette) = &original.palette {
        let palette_path = out_dir.join(format!("{}.palette.json", header.name));
        let text = serde_json::to_string_pretty(palette).expect("palette serializes");
        std::fs::write(&palette_path, text).map_err(|e| io_err(&palette_path, e))?;
        header.palette = Some(relative_to(&palette_path, &out_dir));
    }
    let summary = ManifestSummary {
        original_entries: original_count,
        augmented_entries: entries.len() - original_count,
        total: entries.len(),
    };
    write_manifest(out_path, &header, &entries)?;
    Ok(summary)
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Converts a `<root>/<class>/<image>` tree into a classification manifest.
/// Classes are numbered in sorted directory-name order.
pub fn convert_image_tree(root: &Path, out_path: &Path, name: &str) -> Result<ManifestSummary, DatasetError> {
    let mut classes: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| io_err(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    let out_dir = out_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let class_name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut images: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| io_err(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .map(|x| IMAGE_EXTENSIONS.contains(&x.to_string_lossy().to_ascii_lowercase().as_str()))
                    .unwrap_or(false)
            })
            .collect();
        images.sort();
        for image in images {
            let stem = image.file_stem().unwrap_or_default().to_string_lossy();
            let abs = std::fs::canonicalize(&image).unwrap_or(image.clone());
            let out_abs = std::fs::canonicalize(&out_dir).unwrap_or(out_dir.clone());
            entries.push(ManifestEntry::labeled(
                format!("{class_name}/{stem}"),
                relative_to(&abs, &out_abs),
                label as u32,
            ));
        }
        class_names.push(class_name);
    }
    if entries.is_empty() {
        return Err(DatasetError::Empty);
    }
    let header = ManifestHeader {
        name: name.to_string(),
        task: TaskKind::Classification,
        task_text: None,
        class_count: class_names.len() as u32,
        class_names,
        palette: None,
    };
    write_manifest(out_path, &header, &entries)?;
    Ok(ManifestSummary { original_entries: entries.len(), augmented_entries: 0, total: entries.len() })
}
