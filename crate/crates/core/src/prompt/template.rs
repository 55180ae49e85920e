//! Prompt templates with one-shot examples.
//!
//! A template file is UTF-8 text split into `[section]` blocks. `[prompt]`
//! holds the body with `{{TASK}}`-style placeholders; `[example.*]` blocks
//! hold the one-shot fill and the expected formatted answer. Rendering
//! produces three parts: the worked example, the query, and the output
//! format instruction.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use super::grammar::{self, format_string_list, quote, PromptStage};
use crate::hash::sha256_hex;
use crate::model::{Caption, EditSelection, KeywordSet, TaskDescription, TaskKind};

pub const EXAMPLE_HEADER: &str = "### Example";
pub const QUERY_HEADER: &str = "### Query";
pub const FORMAT_HEADER: &str = "### Output format";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("{stage} template is missing placeholder {{{{{placeholder}}}}}")]
    MissingPlaceholder { stage: PromptStage, placeholder: &'static str },
    #[error("{stage} template uses placeholder {{{{{placeholder}}}}}, which that stage does not fill")]
    UnexpectedPlaceholder { stage: PromptStage, placeholder: String },
    #[error("{stage} template is missing section [{section}]")]
    MissingSection { stage: PromptStage, section: String },
    #[error("{stage} template: malformed section [{section}]: {reason}")]
    BadSection { stage: PromptStage, section: String, reason: String },
    #[error("{stage} one-shot output does not parse: {source}")]
    BadExample { stage: PromptStage, source: grammar::ParseError },
    #[error("template for {expected} used to render {got}")]
    WrongStage { expected: PromptStage, got: PromptStage },
    #[error("cannot render with an empty {0}")]
    EmptyFill(&'static str),
    #[error("could not read template {path}: {message}")]
    Io { path: String, message: String },
}

const TASK: &str = "TASK";
const CAPTION: &str = "CAPTION";
const KEYWORDS: &str = "KEYWORDS";
const ALTERNATIVES: &str = "ALTERNATIVES";

fn required_placeholders(stage: PromptStage) -> &'static [&'static str] {
    match stage {
        PromptStage::Keywords => &[TASK, CAPTION],
        PromptStage::Alternatives => &[TASK, CAPTION, KEYWORDS],
        PromptStage::Counterfactual => &[TASK, CAPTION, ALTERNATIVES],
    }
}

pub fn format_instruction(stage: PromptStage) -> &'static str {
    match stage {
        PromptStage::Keywords => {
            "Answer with one line of the form KEYWORDS: [\"keyword\", \"another keyword\"]. \
             Copy each keyword from the caption. Use double quotes and escape quotes inside \
             a keyword with a backslash."
        }
        PromptStage::Alternatives => {
            "Answer with one line of the form ALTERNATIVES: {\"keyword\": [\"alternative\", \
             \"another alternative\"]}. Give at least one alternative per keyword and never \
             repeat the keyword itself. Use double quotes and escape quotes with a backslash."
        }
        PromptStage::Counterfactual => {
            "Answer with one line of the form CAPTION: \"the modified caption\". Escape quotes \
             inside the caption with a backslash."
        }
    }
}

/// Example inputs and the answer the model is shown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneShot {
    pub task: String,
    pub caption: String,
    pub keywords: Option<Vec<String>>,
    pub edits: Option<IndexMap<String, String>>,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    stage: PromptStage,
    body: String,
    one_shot: OneShot,
    source_hash: String,
}

fn split_sections(text: &str) -> BTreeMap<String, String> {
    let mut sections: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with('[') && trimmed.ends_with(']') && !trimmed.contains(' ') {
            let name = trimmed[1..trimmed.len() - 1].to_string();
            sections.entry(name.clone()).or_default();
            current = Some(name);
            continue;
        }
        // Lines before the first section are preamble comments.
        if let Some(name) = &current {
            sections.get_mut(name).expect("section inserted").push(line);
        }
    }
    sections.into_iter().map(|(k, v)| (k, v.join("\n").trim().to_string())).collect()
}

fn placeholders_in(body: &str) -> BTreeSet<String> {
    let mut found = BTreeSet::new();
    let mut rest = body;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                found.insert(after[..end].to_string());
                rest = &after[end + 2..];
            }
            None => break,
        }
    }
    found
}

impl PromptTemplate {
    pub fn parse(stage: PromptStage, text: &str) -> Result<Self, TemplateError> {
        let sections = split_sections(text);
        let section = |name: &str| -> Result<String, TemplateError> {
            sections
                .get(name)
                .filter(|s| !s.is_empty())
                .cloned()
                .ok_or_else(|| TemplateError::MissingSection { stage, section: name.to_string() })
        };
        let body = section("prompt")?;
        let used = placeholders_in(&body);
        let required = required_placeholders(stage);
        for placeholder in required {
            if !used.contains(*placeholder) {
                return Err(TemplateError::MissingPlaceholder { stage, placeholder });
            }
        }
        if let Some(extra) = used.iter().find(|p| !required.contains(&p.as_str())) {
            return Err(TemplateError::UnexpectedPlaceholder { stage, placeholder: extra.clone() });
        }
        let bad =
            |section: &str, reason: String| TemplateError::BadSection { stage, section: section.to_string(), reason };
        let keywords = match stage {
            PromptStage::Alternatives => {
                let raw = section("example.keywords")?;
                Some(serde_json::from_str::<Vec<String>>(&raw).map_err(|e| bad("example.keywords", e.to_string()))?)
            }
            _ => None,
        };
        let edits = match stage {
            PromptStage::Counterfactual => {
                let raw = section("example.edits")?;
                let edits: IndexMap<String, String> =
                    serde_json::from_str(&raw).map_err(|e| bad("example.edits", e.to_string()))?;
                if edits.is_empty() {
                    return Err(bad("example.edits", "no edits".into()));
                }
                Some(edits)
            }
            _ => None,
        };
        let one_shot = OneShot {
            task: section("example.task")?,
            caption: section("example.caption")?,
            keywords,
            edits,
            output: section("example.output")?,
        };
        grammar::parse_stage_response(stage, &one_shot.output)
            .map_err(|source| TemplateError::BadExample { stage, source })?;
        Ok(Self { stage, body, one_shot, source_hash: sha256_hex(text.as_bytes()) })
    }

    pub fn load(stage: PromptStage, path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TemplateError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::parse(stage, &text)
    }

    pub fn stage(&self) -> PromptStage {
        self.stage
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn one_shot(&self) -> &OneShot {
        &self.one_shot
    }

    /// sha256 of the template file text.
    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    fn fill(&self, values: &[(&str, &str)]) -> String {
        let mut out = self.body.clone();
        for (name, value) in values {
            out = out.replace(&format!("{{{{{name}}}}}"), value);
        }
        out
    }

    fn example_values(&self) -> Vec<(&'static str, String)> {
        let shot = &self.one_shot;
        let mut values = vec![(TASK, shot.task.clone()), (CAPTION, quote(&shot.caption))];
        if let Some(k) = &shot.keywords {
            values.push((KEYWORDS, format_string_list(k)));
        }
        if let Some(e) = &shot.edits {
            values.push((ALTERNATIVES, format_edit_pairs(e.iter())));
        }
        values
    }

    fn assemble(&self, values: &[(&str, String)]) -> String {
        let owned = self.example_values();
        let example: Vec<(&str, &str)> = owned.iter().map(|(k, v)| (*k, v.as_str())).collect();
        let example_text = self.fill(&example);
        let query: Vec<(&str, &str)> = values.iter().map(|(k, v)| (*k, v.as_str())).collect();
        format!(
            "{EXAMPLE_HEADER}\n{example_text}\n{}\n\n{QUERY_HEADER}\n{}\n\n{FORMAT_HEADER}\n{}\n",
            self.one_shot.output,
            self.fill(&query),
            format_instruction(self.stage)
        )
    }

    fn check_stage(&self, want: PromptStage) -> Result<(), TemplateError> {
        if self.stage != want {
            return Err(TemplateError::WrongStage { expected: self.stage, got: want });
        }
        Ok(())
    }
}

/// Renders keyword → alternative pairs as a JSON-style object.
pub fn format_edit_pairs<'a>(pairs: impl Iterator<Item = (&'a String, &'a String)>) -> String {
    let parts: Vec<String> = pairs.map(|(k, v)| format!("{}: {}", quote(k), quote(v))).collect();
    format!("{{{}}}", parts.join(", "))
}

fn task_text(task: &TaskDescription) -> Result<String, TemplateError> {
    task.validate().map_err(|_| TemplateError::EmptyFill("task"))?;
    Ok(task.text.clone())
}

fn caption_text(caption: &Caption) -> Result<String, TemplateError> {
    caption.validate().map_err(|_| TemplateError::EmptyFill("caption"))?;
    Ok(quote(&caption.text()))
}

pub fn render_keywords_prompt(
    task: &TaskDescription,
    caption: &Caption,
    template: &PromptTemplate,
) -> Result<String, TemplateError> {
    template.check_stage(PromptStage::Keywords)?;
    Ok(template.assemble(&[(TASK, task_text(task)?), (CAPTION, caption_text(caption)?)]))
}

pub fn render_alternatives_prompt(
    task: &TaskDescription,
    caption: &Caption,
    keywords: &KeywordSet,
    template: &PromptTemplate,
) -> Result<String, TemplateError> {
    template.check_stage(PromptStage::Alternatives)?;
    if keywords.validate().is_err() {
        return Err(TemplateError::EmptyFill("keyword set"));
    }
    Ok(template.assemble(&[
        (TASK, task_text(task)?),
        (CAPTION, caption_text(caption)?),
        (KEYWORDS, format_string_list(&keywords.keywords)),
    ]))
}

pub fn render_counterfactual_prompt(
    task: &TaskDescription,
    caption: &Caption,
    edits: &EditSelection,
    template: &PromptTemplate,
) -> Result<String, TemplateError> {
    template.check_stage(PromptStage::Counterfactual)?;
    if edits.applied.is_empty() {
        return Err(TemplateError::EmptyFill("edit selection"));
    }
    let pairs = format_edit_pairs(edits.applied.iter().map(|e| (&e.keyword, &e.alternative)));
    Ok(template.assemble(&[(TASK, task_text(task)?), (CAPTION, caption_text(caption)?), (ALTERNATIVES, pairs)]))
}

/// The three stage templates for one task kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub keywords: PromptTemplate,
    pub alternatives: PromptTemplate,
    pub counterfactual: PromptTemplate,
}

fn builtin_text(kind: TaskKind, stage: PromptStage) -> &'static str {
    match (kind, stage) {
        (TaskKind::Classification, PromptStage::Keywords) => {
            include_str!("../../templates/classification/keywords.txt")
        }
        (TaskKind::Classification, PromptStage::Alternatives) => {
            include_str!("../../templates/classification/alternatives.txt")
        }
        (TaskKind::Classification, PromptStage::Counterfactual) => {
            include_str!("../../templates/classification/counterfactual.txt")
        }
        (TaskKind::SemanticSegmentation, PromptStage::Keywords) => {
            include_str!("../../templates/semantic_segmentation/keywords.txt")
        }
        (TaskKind::SemanticSegmentation, PromptStage::Alternatives) => {
            include_str!("../../templates/semantic_segmentation/alternatives.txt")
        }
        (TaskKind::SemanticSegmentation, PromptStage::Counterfactual) => {
            include_str!("../../templates/semantic_segmentation/counterfactual.txt")
        }
    }
}

impl TemplateSet {
    pub fn builtin(kind: TaskKind) -> Self {
        let load =
            |stage| PromptTemplate::parse(stage, builtin_text(kind, stage)).expect("built-in templates are valid");
        Self {
            keywords: load(PromptStage::Keywords),
            alternatives: load(PromptStage::Alternatives),
            counterfactual: load(PromptStage::Counterfactual),
        }
    }

    /// Loads `<dir>/<task kind>/<stage>.txt`, falling back to the built-in
    /// template for any file that is absent.
    pub fn from_dir(dir: &Path, kind: TaskKind) -> Result<Self, TemplateError> {
        let load = |stage: PromptStage| {
            let path = dir.join(kind.as_str()).join(format!("{}.txt", stage.name()));
            if path.exists() {
                PromptTemplate::load(stage, &path)
            } else {
                PromptTemplate::parse(stage, builtin_text(kind, stage))
            }
        };
        Ok(Self {
            keywords: load(PromptStage::Keywords)?,
            alternatives: load(PromptStage::Alternatives)?,
            counterfactual: load(PromptStage::Counterfactual)?,
        })
    }

    pub fn hashes(&self) -> BTreeMap<String, String> {
        [&self.keywords, &self.alternatives, &self.counterfactual]
            .into_iter()
            .map(|t| (t.stage().name().to_string(), t.source_hash().to_string()))
            .collect()
    }
}
