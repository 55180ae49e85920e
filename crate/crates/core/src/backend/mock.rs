//! Deterministic in-process stand-ins for the four services.
//!
//! Every reply is a pure function of the request body, so results never
//! depend on scheduling or on how many workers share the mock.

use std::collections::BTreeMap;

use image::{DynamicImage, GenericImageView, Rgb, RgbImage};
use serde_json::{json, Value};

use super::{b64, decode_image, encode_class_map, encode_png, BackendError, Role, Transport};
use crate::conditioning::to_grayscale;
use crate::hash::{derive_seed, sha256_hex};
use crate::model::ClassMap;
use crate::prompt::{FORMAT_HEADER, QUERY_HEADER};

const SUBJECTS: &[&str] = &["car", "dog", "bird", "truck", "bicycle", "cat", "bus", "horse"];
const PLACES: &[&str] = &["street", "field", "beach", "road", "park", "bridge"];
const COLORS: &[&str] = &["red", "blue", "green", "yellow", "white", "black", "gray", "brown", "orange"];
const WEATHER: &[&str] = &["sunny", "cloudy", "foggy", "rainy", "snowy", "overcast"];
const TIMES: &[&str] = &["morning", "afternoon", "evening", "night", "dusk", "dawn"];

const PROSE: &str = "Let me think about this caption. The most important parts are the objects in the scene.";

fn color_rgb(name: &str) -> Option<[u8; 3]> {
    Some(match name {
        "red" => [200, 30, 30],
        "blue" => [30, 60, 200],
        "green" => [40, 160, 60],
        "yellow" => [230, 210, 40],
        "white" => [235, 235, 235],
        "black" => [20, 20, 20],
        "gray" => [128, 128, 128],
        "brown" => [120, 80, 40],
        "orange" => [240, 140, 30],
        _ => return None,
    })
}

fn vocabulary_group(word: &str) -> Option<&'static [&'static str]> {
    [COLORS, WEATHER, TIMES].into_iter().find(|g| g.contains(&word))
}

/// sha256 over the dimensions and RGB8 pixels; keys the lookup tables.
pub fn pixel_hash(image: &DynamicImage) -> String {
    let rgb = image.to_rgb8();
    let mut bytes = Vec::with_capacity(8 + rgb.as_raw().len());
    bytes.extend_from_slice(&rgb.width().to_le_bytes());
    bytes.extend_from_slice(&rgb.height().to_le_bytes());
    bytes.extend_from_slice(rgb.as_raw());
    sha256_hex(&bytes)
}

fn pick<'a>(items: &[&'a str], seed: u64, salt: u64) -> &'a str {
    let h = derive_seed(&[&seed.to_le_bytes(), &salt.to_le_bytes()]);
    items[(h % items.len() as u64) as usize]
}

#[derive(Debug, Clone, Default)]
pub struct MockConfig {
    /// Captions keyed by [`pixel_hash`].
    pub captions: BTreeMap<String, Vec<String>>,
    /// Classifier labels keyed by [`pixel_hash`].
    pub labels: BTreeMap<String, u32>,
    /// Segmenter outputs keyed by [`pixel_hash`].
    pub masks: BTreeMap<String, ClassMap>,
    /// Classes the luma-threshold predictor spreads over; 0 means 2.
    pub class_count: u32,
    /// Exact completions keyed by (sha256 of prompt, seed).
    pub scripted: BTreeMap<(String, u64), String>,
    /// Prompts containing any of these substrings get an unparsable reply.
    pub poison: Vec<String>,
    /// Fraction of (prompt, seed) pairs answered with unparsable prose.
    pub format_failure_rate: f64,
}

impl MockConfig {
    pub fn script(&mut self, prompt: &str, seed: u64, reply: impl Into<String>) {
        self.scripted.insert((sha256_hex(prompt.as_bytes()), seed), reply.into());
    }

    fn classes(&self) -> u32 {
        if self.class_count == 0 {
            2
        } else {
            self.class_count
        }
    }
}

pub struct MockTransport {
    config: MockConfig,
}

impl MockTransport {
    pub fn new(config: MockConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    fn image_field(role: Role, body: &Value, name: &str) -> Result<DynamicImage, BackendError> {
        use base64::Engine;
        let text = body
            .get(name)
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::protocol(role, format!("request lacks `{name}`")))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(text)
            .map_err(|e| BackendError::protocol(role, e.to_string()))?;
        decode_image(&bytes)
    }

    fn caption(&self, body: &Value) -> Result<Value, BackendError> {
        let image = Self::image_field(Role::Captioner, body, "image_b64")?;
        let key = pixel_hash(&image);
        if let Some(sentences) = self.config.captions.get(&key) {
            return Ok(json!({ "sentences": sentences }));
        }
        let seed = derive_seed(&[key.as_bytes()]);
        let first = format!(
            "A {} {} on a {} {}.",
            pick(COLORS, seed, 0),
            pick(SUBJECTS, seed, 1),
            pick(WEATHER, seed, 2),
            pick(PLACES, seed, 3)
        );
        let second = format!("The picture was taken in the {}.", pick(TIMES, seed, 4));
        Ok(json!({ "sentences": [first, second] }))
    }

    fn complete(&self, body: &Value) -> Result<Value, BackendError> {
        let role = Role::Llm;
        let prompt = body
            .get("prompt")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::protocol(role, "request lacks `prompt`"))?;
        let seed = body
            .get("seed")
            .and_then(Value::as_u64)
            .ok_or_else(|| BackendError::protocol(role, "request lacks `seed`"))?;
        let text = mock_completion(&self.config, prompt, seed);
        Ok(json!({ "text": text }))
    }

    fn generate(&self, body: &Value) -> Result<Value, BackendError> {
        let role = Role::Generator;
        let caption = body
            .get("caption")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::protocol(role, "request lacks `caption`"))?;
        let seed = body
            .get("seed")
            .and_then(Value::as_u64)
            .ok_or_else(|| BackendError::protocol(role, "request lacks `seed`"))?;
        let edges = Self::image_field(role, body, "conditioning_b64")?.to_luma8();
        let h = derive_seed(&[caption.as_bytes(), &seed.to_le_bytes()]).to_le_bytes();
        let named = caption.split(|c: char| !c.is_alphanumeric()).find_map(|w| color_rgb(&w.to_ascii_lowercase()));
        let jitter = |base: u8, j: u8| base.saturating_add(j % 24).saturating_sub(12);
        let background = match named {
            Some(c) => [jitter(c[0], h[0]), jitter(c[1], h[1]), jitter(c[2], h[2])],
            None => [h[0], h[1], h[2]],
        };
        let foreground = background.map(|v| 255 - v);
        let out = RgbImage::from_fn(edges.width(), edges.height(), |x, y| {
            if edges.get_pixel(x, y).0[0] > 127 {
                Rgb(foreground)
            } else {
                Rgb(background)
            }
        });
        Ok(json!({ "image_b64": b64(&encode_png(&DynamicImage::ImageRgb8(out))?) }))
    }

    fn predict(&self, body: &Value) -> Result<Value, BackendError> {
        let role = Role::Predictor;
        let image = Self::image_field(role, body, "image_b64")?;
        let task = body.get("task").and_then(Value::as_str).unwrap_or("classification");
        let key = pixel_hash(&image);
        let classes = self.config.classes();
        let luma = to_grayscale(&image);
        let bucket = |v: f64| ((v * classes as f64) as u32).min(classes - 1);
        match task {
            "classification" => {
                let label = match self.config.labels.get(&key) {
                    Some(l) => *l,
                    None => {
                        let data = luma.data();
                        bucket(data.iter().sum::<f64>() / data.len().max(1) as f64)
                    }
                };
                Ok(json!({ "label": label }))
            }
            "semantic_segmentation" => {
                let map = match self.config.masks.get(&key) {
                    Some(m) => m.clone(),
                    None => {
                        let (w, h) = image.dimensions();
                        let data = luma.data().iter().map(|v| bucket(*v).min(255) as u8).collect();
                        ClassMap::new(w, h, data).map_err(|e| BackendError::protocol(role, e.to_string()))?
                    }
                };
                Ok(json!({ "mask_b64": b64(&encode_class_map(&map)?) }))
            }
            other => Err(BackendError::protocol(role, format!("unknown task `{other}`"))),
        }
    }
}

impl Transport for MockTransport {
    fn post(&self, role: Role, body: &Value) -> Result<Value, BackendError> {
        match role {
            Role::Captioner => self.caption(body),
            Role::Llm => self.complete(body),
            Role::Generator => self.generate(body),
            Role::Predictor => self.predict(body),
        }
    }
}

/// JSON values that start at top level of `text`, in order of appearance.
fn embedded_json(text: &str) -> Vec<Value> {
    let mut found = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let c = text.as_bytes()[i];
        if matches!(c, b'"' | b'[' | b'{') {
            let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
            if let Some(Ok(value)) = stream.next() {
                found.push(value);
                i += stream.byte_offset();
                continue;
            }
        }
        i += 1;
    }
    found
}

fn section<'a>(prompt: &'a str, start: &str, end: &str) -> &'a str {
    let from = prompt.find(start).map(|i| i + start.len()).unwrap_or(0);
    let rest = &prompt[from..];
    match rest.find(end) {
        Some(to) => &rest[..to],
        None => rest,
    }
}

fn replace_word(text: &str, word: &str, replacement: &str) -> String {
    let lower = text.to_ascii_lowercase();
    let needle = word.to_ascii_lowercase();
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    let mut search = 0;
    while let Some(pos) = lower[search..].find(&needle) {
        let start = search + pos;
        let end = start + needle.len();
        let before_ok = lower[..start].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let after_ok = lower[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            out.push_str(&text[last..start]);
            out.push_str(replacement);
            last = end;
        }
        search = end;
    }
    out.push_str(&text[last..]);
    out
}

fn mock_completion(config: &MockConfig, prompt: &str, seed: u64) -> String {
    if let Some(text) = config.scripted.get(&(sha256_hex(prompt.as_bytes()), seed)) {
        return text.clone();
    }
    let query = section(prompt, QUERY_HEADER, FORMAT_HEADER);
    if config.poison.iter().any(|p| query.contains(p.as_str())) {
        return PROSE.to_string();
    }
    if config.format_failure_rate > 0.0 {
        let draw = derive_seed(&[prompt.as_bytes(), &seed.to_le_bytes(), b"format"]) as f64 / u64::MAX as f64;
        if draw < config.format_failure_rate {
            return PROSE.to_string();
        }
    }
    let format = section(prompt, FORMAT_HEADER, "\u{0}");
    let values = embedded_json(query);
    let caption = values.iter().rev().find_map(Value::as_str).unwrap_or("").to_string();
    let preamble = "Here is my answer.\n";
    if format.contains("ALTERNATIVES:") {
        let keywords: Vec<String> =
            values.iter().rev().find_map(|v| serde_json::from_value(v.clone()).ok()).unwrap_or_default();
        let mut entries = Vec::new();
        for (i, kw) in keywords.iter().enumerate() {
            let alts: Vec<String> = match vocabulary_group(kw) {
                Some(group) => {
                    let others: Vec<&str> = group.iter().copied().filter(|w| w != kw).collect();
                    let a = pick(&others, seed, 10 + 2 * i as u64);
                    let b = pick(&others, seed, 11 + 2 * i as u64);
                    if a == b {
                        vec![a.to_string()]
                    } else {
                        vec![a.to_string(), b.to_string()]
                    }
                }
                None => vec![format!("another {kw}")],
            };
            entries.push(format!("{}: {}", json!(kw), json!(alts)));
        }
        format!("{preamble}ALTERNATIVES: {{{}}}\n", entries.join(", "))
    } else if format.contains("CAPTION:") {
        let edits: Vec<(String, String)> = values
            .iter()
            .rev()
            .find_map(Value::as_object)
            .map(|m| m.iter().filter_map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_string()))).collect())
            .unwrap_or_default();
        let mut out = caption.clone();
        for (kw, alt) in &edits {
            let replaced = replace_word(&out, kw, alt);
            out = if replaced == out { format!("{} It is {alt}.", out.trim_end()) } else { replaced };
        }
        format!("{preamble}CAPTION: {}\n", Value::String(out))
    } else {
        let mut keywords: Vec<String> = Vec::new();
        for word in caption.split(|c: char| !c.is_alphanumeric()) {
            let w = word.to_ascii_lowercase();
            if vocabulary_group(&w).is_some() && !keywords.contains(&w) {
                keywords.push(w);
            }
        }
        if keywords.is_empty() {
            if let Some(w) = caption.split_whitespace().rev().find(|w| w.len() > 3) {
                keywords.push(w.trim_matches(|c: char| !c.is_alphanumeric()).to_ascii_lowercase());
            }
        }
        format!("{preamble}KEYWORDS: {}\n", json!(keywords))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendClient, GenerationRequest, Prediction};
    use crate::conditioning::{canny_image, CannyParams};
    use crate::model::TaskKind;
    use image::Luma;
    use std::sync::Arc;

    fn bird() -> DynamicImage {
        DynamicImage::ImageRgb8(RgbImage::from_fn(32, 32, |x, y| {
            if (8..24).contains(&x) && (10..20).contains(&y) {
                Rgb([230, 210, 40])
            } else {
                Rgb([90, 140, 200])
            }
        }))
    }

    fn client(config: MockConfig) -> BackendClient {
        BackendClient::new(Arc::new(MockTransport::new(config)))
    }

    #[test]
    fn caption_table_lookup() {
        let mut config = MockConfig::default();
        config.captions.insert(pixel_hash(&bird()), vec!["A yellow bird on a twig".into()]);
        let caption = client(config).caption_image(&bird()).unwrap();
        assert_eq!(caption.text(), "A yellow bird on a twig");
    }

    #[test]
    fn fallback_caption_is_stable_and_multi_sentence() {
        let c = client(MockConfig::default());
        let a = c.caption_image(&bird()).unwrap();
        assert_eq!(a, c.caption_image(&bird()).unwrap());
        assert_eq!(a.sentences.len(), 2);
    }

    #[test]
    fn scripted_completion() {
        let mut config = MockConfig::default();
        config.script("p", 3, "KEYWORDS: [\"x\"]");
        let c = client(config);
        assert_eq!(c.complete("p", 3, 0.7).unwrap(), "KEYWORDS: [\"x\"]");
        assert_ne!(c.complete("p", 4, 0.7).unwrap(), "KEYWORDS: [\"x\"]");
    }

    #[test]
    fn generated_images_keep_conditioning_size_and_vary_by_seed() {
        let c = client(MockConfig::default());
        let edges = canny_image(&bird(), &CannyParams::default()).unwrap();
        let req = |seed| GenerationRequest {
            caption: "A red bird on a twig".into(),
            conditioning: edges.clone(),
            seed,
            guidance: None,
        };
        let a = c.generate_image(&req(0)).unwrap();
        let b = c.generate_image(&req(1)).unwrap();
        assert_eq!(a.dimensions(), (32, 32));
        assert_eq!(b.dimensions(), (32, 32));
        assert_ne!(a.to_rgb8(), b.to_rgb8());
    }

    #[test]
    fn classifier_table_and_luma_fallback() {
        let mut config = MockConfig::default();
        config.labels.insert(pixel_hash(&bird()), 14);
        let c = client(config);
        assert_eq!(c.predict(&bird(), TaskKind::Classification).unwrap(), Prediction::Label(14));
        let white = DynamicImage::ImageLuma8(image::GrayImage::from_pixel(4, 4, Luma([255])));
        let black = DynamicImage::ImageLuma8(image::GrayImage::from_pixel(4, 4, Luma([0])));
        assert_eq!(c.predict(&white, TaskKind::Classification).unwrap(), Prediction::Label(1));
        assert_eq!(c.predict(&black, TaskKind::Classification).unwrap(), Prediction::Label(0));
    }

    #[test]
    fn segmenter_echoes_table_mask() {
        let gt = ClassMap::new(32, 32, (0..1024).map(|i| (i % 3) as u8).collect()).unwrap();
        let mut config = MockConfig::default();
        config.masks.insert(pixel_hash(&bird()), gt.clone());
        let c = client(config);
        assert_eq!(c.predict(&bird(), TaskKind::SemanticSegmentation).unwrap(), Prediction::Mask(gt));
    }

    #[test]
    fn embedded_json_skips_nested_values() {
        let found = embedded_json(r#"caption "a b" keywords ["x", "y"] and {"k": "v"}"#);
        assert_eq!(found, vec![json!("a b"), json!(["x", "y"]), json!({"k": "v"})]);
    }

    #[test]
    fn word_replacement_respects_boundaries() {
        assert_eq!(replace_word("A gray car, grayish sky", "gray", "red"), "A red car, grayish sky");
        assert_eq!(replace_word("Foggy street", "foggy", "snowy"), "snowy street");
    }
}
