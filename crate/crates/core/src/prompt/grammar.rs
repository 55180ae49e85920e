//! Marker-line grammars for LLM responses.
//!
//! A response must contain exactly one line starting with the stage marker
//! (`KEYWORDS:`, `ALTERNATIVES:` or `CAPTION:`), followed by a bracketed
//! value. Other lines are ignored. Values use double-quoted strings with
//! JSON escapes:
//!
//! ```text
//! KEYWORDS: ["gray", "foggy"]
//! ALTERNATIVES: {"foggy": ["rainy", "snowy"]}
//! CAPTION: "A red car driving down a snowy street."
//! ```
//!
//! The value may continue onto following lines until its brackets close,
//! but nothing except whitespace may follow it on its last line.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AlternativeMap, Caption, CaptionSource, KeywordSet};

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[error("parse error at byte {offset}: expected {expected}")]
pub struct ParseError {
    pub offset: usize,
    pub expected: String,
}

impl ParseError {
    pub fn new(offset: usize, expected: impl Into<String>) -> Self {
        Self { offset, expected: expected.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStage {
    Keywords,
    Alternatives,
    Counterfactual,
}

impl PromptStage {
    pub const ALL: [PromptStage; 3] = [PromptStage::Keywords, PromptStage::Alternatives, PromptStage::Counterfactual];

    pub fn marker(self) -> &'static str {
        match self {
            PromptStage::Keywords => "KEYWORDS:",
            PromptStage::Alternatives => "ALTERNATIVES:",
            PromptStage::Counterfactual => "CAPTION:",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PromptStage::Keywords => "keywords",
            PromptStage::Alternatives => "alternatives",
            PromptStage::Counterfactual => "counterfactual",
        }
    }
}

impl std::fmt::Display for PromptStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageResponse {
    Keywords(KeywordSet),
    Alternatives(AlternativeMap),
    Caption(Caption),
}

pub fn parse_stage_response(stage: PromptStage, raw: &str) -> Result<StageResponse, ParseError> {
    match stage {
        PromptStage::Keywords => parse_keywords(raw).map(StageResponse::Keywords),
        PromptStage::Alternatives => parse_alternatives(raw).map(StageResponse::Alternatives),
        PromptStage::Counterfactual => parse_caption(raw).map(StageResponse::Caption),
    }
}

/// Byte-level entry point; invalid UTF-8 is a parse error, not a panic.
pub fn parse_stage_response_bytes(stage: PromptStage, raw: &[u8]) -> Result<StageResponse, ParseError> {
    let text = std::str::from_utf8(raw).map_err(|e| ParseError::new(e.valid_up_to(), "valid UTF-8"))?;
    parse_stage_response(stage, text)
}

pub fn parse_keywords(raw: &str) -> Result<KeywordSet, ParseError> {
    let mut cursor = Cursor::at_marker(raw, PromptStage::Keywords)?;
    let start = cursor.pos;
    let items = cursor.string_array()?;
    cursor.end_of_line()?;
    KeywordSet::new(items).map_err(|e| ParseError::new(start, format!("a valid keyword list ({e})")))
}

pub fn parse_alternatives(raw: &str) -> Result<AlternativeMap, ParseError> {
    let mut cursor = Cursor::at_marker(raw, PromptStage::Alternatives)?;
    let start = cursor.pos;
    let entries = cursor.alternatives_object()?;
    cursor.end_of_line()?;
    AlternativeMap::new(entries).map_err(|e| ParseError::new(start, format!("a valid alternative map ({e})")))
}

pub fn parse_caption(raw: &str) -> Result<Caption, ParseError> {
    let mut cursor = Cursor::at_marker(raw, PromptStage::Counterfactual)?;
    let start = cursor.pos;
    let text = cursor.string()?;
    cursor.end_of_line()?;
    Caption::from_text(&text, CaptionSource::Counterfactual).map_err(|_| ParseError::new(start, "a non-empty caption"))
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn at_marker(raw: &'a str, stage: PromptStage) -> Result<Self, ParseError> {
        let marker = stage.marker();
        let mut found = None;
        let mut line_start = 0;
        for line in raw.split_inclusive('\n') {
            let indent = line.len() - line.trim_start().len();
            if line[indent..].starts_with(marker) {
                if found.is_some() {
                    return Err(ParseError::new(line_start + indent, format!("a single `{marker}` line")));
                }
                found = Some(line_start + indent + marker.len());
            }
            line_start += line.len();
        }
        match found {
            Some(pos) => Ok(Self { src: raw, pos }),
            None => Err(ParseError::new(0, format!("a line starting with `{marker}`"))),
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn expect(&mut self, want: char, what: &str) -> Result<(), ParseError> {
        self.skip_ws();
        match self.peek() {
            Some(c) if c == want => {
                self.bump();
                Ok(())
            }
            _ => Err(ParseError::new(self.pos, what)),
        }
    }

    fn end_of_line(&mut self) -> Result<(), ParseError> {
        while let Some(c) = self.peek() {
            match c {
                '\n' => return Ok(()),
                c if c.is_whitespace() => {
                    self.bump();
                }
                _ => return Err(ParseError::new(self.pos, "end of line after value")),
            }
        }
        Ok(())
    }

    fn string(&mut self) -> Result<String, ParseError> {
        self.expect('"', "`\"`")?;
        let mut out = String::new();
        loop {
            let at = self.pos;
            match self.bump() {
                None => return Err(ParseError::new(at, "closing `\"`")),
                Some('"') => return Ok(out),
                Some('\\') => out.push(self.escape()?),
                Some(c) if (c as u32) < 0x20 => {
                    return Err(ParseError::new(at, "escaped control character"));
                }
                Some(c) => out.push(c),
            }
        }
    }

    fn escape(&mut self) -> Result<char, ParseError> {
        let at = self.pos;
        match self.bump() {
            Some('"') => Ok('"'),
            Some('\\') => Ok('\\'),
            Some('/') => Ok('/'),
            Some('b') => Ok('\u{8}'),
            Some('f') => Ok('\u{c}'),
            Some('n') => Ok('\n'),
            Some('r') => Ok('\r'),
            Some('t') => Ok('\t'),
            Some('u') => {
                let high = self.hex4()?;
                if (0xD800..0xDC00).contains(&high) {
                    if self.bump() != Some('\\') || self.bump() != Some('u') {
                        return Err(ParseError::new(at, "low surrogate escape"));
                    }
                    let low = self.hex4()?;
                    if !(0xDC00..0xE000).contains(&low) {
                        return Err(ParseError::new(at, "low surrogate escape"));
                    }
                    let code = 0x10000 + ((high - 0xD800) << 10) + (low - 0xDC00);
                    char::from_u32(code).ok_or_else(|| ParseError::new(at, "valid code point"))
                } else {
                    char::from_u32(high).ok_or_else(|| ParseError::new(at, "valid code point"))
                }
            }
            _ => Err(ParseError::new(at, "escape sequence")),
        }
    }

    fn hex4(&mut self) -> Result<u32, ParseError> {
        let at = self.pos;
        let digits = self
            .src
            .get(self.pos..self.pos + 4)
            .filter(|d| d.bytes().all(|b| b.is_ascii_hexdigit()))
            .ok_or_else(|| ParseError::new(at, "four hex digits"))?;
        self.pos += 4;
        Ok(u32::from_str_radix(digits, 16).expect("checked hex digits"))
    }

    fn string_array(&mut self) -> Result<Vec<String>, ParseError> {
        self.expect('[', "`[`")?;
        let mut items = Vec::new();
        self.skip_ws();
        if self.peek() == Some(']') {
            self.bump();
            return Ok(items);
        }
        loop {
            items.push(self.string()?);
            self.skip_ws();
            match self.peek() {
                Some(',') => {
                    self.bump();
                }
                Some(']') => {
                    self.bump();
                    return Ok(items);
                }
                _ => return Err(ParseError::new(self.pos, "`,` or `]`")),
            }
        }
    }

    fn alternatives_object(&mut self) -> Result<IndexMap<String, Vec<String>>, ParseError> {
        self.expect('{', "`{`")?;
        let mut entries = IndexMap::new();
        self.skip_ws();
        if self.peek() == Some('}') {
            self.bump();
            return Ok(entries);
        }
        loop {
            self.skip_ws();
            let key_at = self.pos;
            let key = self.string()?;
            self.expect(':', "`:`")?;
            let values = self.string_array()?;
            if entries.insert(key, values).is_some() {
                return Err(ParseError::new(key_at, "a key not already present"));
            }
            self.skip_ws();
            match self.peek() {
                Some(',') => {
                    self.bump();
                }
                Some('}') => {
                    self.bump();
                    return Ok(entries);
                }
                _ => return Err(ParseError::new(self.pos, "`,` or `}`")),
            }
        }
    }
}

/// Renders a string in the grammar's quoting.
pub fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

pub fn format_string_list(items: &[String]) -> String {
    let quoted: Vec<String> = items.iter().map(|s| quote(s)).collect();
    format!("[{}]", quoted.join(", "))
}
