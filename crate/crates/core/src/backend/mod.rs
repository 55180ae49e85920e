//! Clients for the four model services over one JSON-over-HTTP protocol.
//!
//! | role      | path        | request                                          | response            |
//! |-----------|-------------|--------------------------------------------------|---------------------|
//! | captioner | `/caption`  | `{image_b64}`                                    | `{sentences}`       |
//! | llm       | `/complete` | `{prompt, seed, temperature, max_tokens}`        | `{text}`            |
//! | generator | `/generate` | `{caption, conditioning_b64, seed, guidance?}`   | `{image_b64}`       |
//! | predictor | `/predict`  | `{image_b64, task}`                              | `{label}`/`{mask_b64}` |
//!
//! Images are base64 PNG. Every transport (HTTP, in-process mock, replay
//! cache) speaks in terms of these JSON bodies, so they compose freely.

mod cache;
mod http;
mod mock;

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::{DynamicImage, GenericImageView, ImageFormat};
use serde_json::{json, Value};
use thiserror::Error;

use crate::conditioning::EdgeMap;
use crate::model::{Caption, CaptionSource, ClassMap, TaskKind};

pub use cache::{CacheMode, ReplayCache};
pub use http::HttpTransport;
pub use mock::{pixel_hash, MockConfig, MockTransport};

pub const MAX_TOKENS: u32 = 512;
pub const DEFAULT_TIMEOUT_SECS: f64 = 120.0;
pub const DEFAULT_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Captioner,
    Llm,
    Generator,
    Predictor,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Captioner, Role::Llm, Role::Generator, Role::Predictor];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Captioner => "captioner",
            Role::Llm => "llm",
            Role::Generator => "generator",
            Role::Predictor => "predictor",
        }
    }

    pub fn path(self) -> &'static str {
        match self {
            Role::Captioner => "/caption",
            Role::Llm => "/complete",
            Role::Generator => "/generate",
            Role::Predictor => "/predict",
        }
    }

    fn env_name(self, suffix: &str) -> String {
        format!("DILLEMA_{}_{suffix}", self.as_str().to_ascii_uppercase())
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL.into_iter().find(|r| r.as_str() == s).ok_or_else(|| format!("unknown backend role `{s}`"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("{role} backend returned HTTP {status}: {body}")]
    Status { role: Role, status: u16, body: String },
    #[error("{role} backend timed out after {seconds}s")]
    Timeout { role: Role, seconds: f64 },
    #[error("{role} backend unreachable: {message}")]
    Transport { role: Role, message: String },
    #[error("{role} backend sent a malformed response: {message}")]
    Protocol { role: Role, message: String },
    #[error("generated image is {got_width}x{got_height}, expected {width}x{height}")]
    DimensionMismatch { width: u32, height: u32, got_width: u32, got_height: u32 },
    #[error("prediction map is {got_width}x{got_height}, image is {width}x{height}")]
    Shape { width: u32, height: u32, got_width: u32, got_height: u32 },
    #[error("image could not be decoded: {0}")]
    Decode(String),
    #[error("replay cache: {0}")]
    Cache(String),
    #[error("no {role} endpoint configured (set {var})")]
    NotConfigured { role: Role, var: String },
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
}

impl BackendError {
    pub fn protocol(role: Role, message: impl Into<String>) -> Self {
        BackendError::Protocol { role, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Endpoint {
    pub base_url: String,
    pub timeout: Duration,
    pub auth_token: Option<String>,
}

impl Endpoint {
    pub fn new(
        base_url: impl Into<String>,
        timeout_secs: f64,
        auth_token: Option<String>,
    ) -> Result<Self, BackendError> {
        let base_url = base_url.into();
        if !(timeout_secs.is_finite() && timeout_secs > 0.0) {
            return Err(BackendError::InvalidEndpoint(format!("timeout must be > 0, got {timeout_secs}")));
        }
        if !(base_url.starts_with("http://") || base_url.starts_with("https://")) {
            return Err(BackendError::InvalidEndpoint(format!("`{base_url}` is not an http(s) URL")));
        }
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            timeout: Duration::from_secs_f64(timeout_secs),
            auth_token,
        })
    }

    /// Reads `DILLEMA_<ROLE>_URL` and `DILLEMA_<ROLE>_TOKEN`.
    pub fn from_env(role: Role, timeout_secs: f64) -> Result<Self, BackendError> {
        let var = role.env_name("URL");
        let url = std::env::var(&var).map_err(|_| BackendError::NotConfigured { role, var })?;
        let token = std::env::var(role.env_name("TOKEN")).ok().filter(|t| !t.is_empty());
        Self::new(url, timeout_secs, token)
    }

    pub fn url_for(&self, role: Role) -> String {
        format!("{}{}", self.base_url, role.path())
    }
}

/// Moves one JSON request body to a backend and returns its JSON reply.
pub trait Transport: Send + Sync {
    fn post(&self, role: Role, body: &Value) -> Result<Value, BackendError>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn post(&self, role: Role, body: &Value) -> Result<Value, BackendError> {
        (**self).post(role, body)
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn post(&self, role: Role, body: &Value) -> Result<Value, BackendError> {
        (**self).post(role, body)
    }
}

/// Text completion, the only capability the retry loop needs.
pub trait LanguageModel: Send + Sync {
    fn complete(&self, prompt: &str, seed: u64, temperature: f64) -> Result<String, BackendError>;
}

/// Sends each role to its own transport.
pub struct RoutedTransport {
    routes: Vec<(Role, Box<dyn Transport>)>,
}

impl RoutedTransport {
    pub fn new() -> Self {
        Self { routes: Vec::new() }
    }

    pub fn route(mut self, role: Role, transport: Box<dyn Transport>) -> Self {
        self.routes.retain(|(r, _)| *r != role);
        self.routes.push((role, transport));
        self
    }
}

impl Default for RoutedTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for RoutedTransport {
    fn post(&self, role: Role, body: &Value) -> Result<Value, BackendError> {
        match self.routes.iter().find(|(r, _)| *r == role) {
            Some((_, t)) => t.post(role, body),
            None => Err(BackendError::NotConfigured { role, var: role.env_name("URL") }),
        }
    }
}

/// Counts calls per role; used to check cache hits and retry counts.
pub struct CountingTransport<T> {
    inner: T,
    counts: [AtomicU64; 4],
}

impl<T: Transport> CountingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self { inner, counts: Default::default() }
    }

    pub fn calls(&self, role: Role) -> u64 {
        self.counts[role as usize].load(Ordering::SeqCst)
    }

    pub fn total_calls(&self) -> u64 {
        Role::ALL.iter().map(|r| self.calls(*r)).sum()
    }
}

impl<T: Transport> Transport for CountingTransport<T> {
    fn post(&self, role: Role, body: &Value) -> Result<Value, BackendError> {
        self.counts[role as usize].fetch_add(1, Ordering::SeqCst);
        self.inner.post(role, body)
    }
}

/// Caps concurrent in-flight requests per role.
pub struct ThrottledTransport<T> {
    inner: T,
    limit: usize,
    in_flight: Mutex<[usize; 4]>,
    freed: Condvar,
}

impl<T: Transport> ThrottledTransport<T> {
    pub fn new(inner: T, limit: usize) -> Self {
        Self { inner, limit: limit.max(1), in_flight: Mutex::new([0; 4]), freed: Condvar::new() }
    }
}

impl<T: Transport> Transport for ThrottledTransport<T> {
    fn post(&self, role: Role, body: &Value) -> Result<Value, BackendError> {
        let slot = role as usize;
        {
            let mut guard = self.in_flight.lock().expect("throttle lock");
            while guard[slot] >= self.limit {
                guard = self.freed.wait(guard).expect("throttle lock");
            }
            guard[slot] += 1;
        }
        let result = self.inner.post(role, body);
        self.in_flight.lock().expect("throttle lock")[slot] -= 1;
        self.freed.notify_all();
        result
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub caption: String,
    pub conditioning: EdgeMap,
    pub seed: u64,
    pub guidance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prediction {
    Label(u32),
    Mask(ClassMap),
}

pub fn encode_png(image: &DynamicImage) -> Result<Vec<u8>, BackendError> {
    let mut out = Cursor::new(Vec::new());
    image.write_to(&mut out, ImageFormat::Png).map_err(|e| BackendError::Decode(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn decode_image(bytes: &[u8]) -> Result<DynamicImage, BackendError> {
    image::load_from_memory(bytes).map_err(|e| BackendError::Decode(e.to_string()))
}

pub fn b64(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

fn field<'a>(role: Role, reply: &'a Value, name: &str) -> Result<&'a Value, BackendError> {
    reply.get(name).ok_or_else(|| BackendError::protocol(role, format!("missing field `{name}`")))
}

fn b64_field(role: Role, reply: &Value, name: &str) -> Result<Vec<u8>, BackendError> {
    let text = field(role, reply, name)?
        .as_str()
        .ok_or_else(|| BackendError::protocol(role, format!("`{name}` is not a string")))?;
    B64.decode(text).map_err(|e| BackendError::protocol(role, format!("`{name}`: {e}")))
}

/// Encodes a class map as an 8-bit grayscale PNG.
pub fn encode_class_map(map: &ClassMap) -> Result<Vec<u8>, BackendError> {
    let gray = image::GrayImage::from_raw(map.width(), map.height(), map.data().to_vec())
        .ok_or_else(|| BackendError::Decode("class map buffer size".into()))?;
    encode_png(&DynamicImage::ImageLuma8(gray))
}

pub fn decode_class_map(bytes: &[u8]) -> Result<ClassMap, BackendError> {
    let gray = decode_image(bytes)?.to_luma8();
    let (w, h) = gray.dimensions();
    ClassMap::new(w, h, gray.into_raw()).map_err(|e| BackendError::Decode(e.to_string()))
}

/// Typed operations over any transport.
#[derive(Clone)]
pub struct BackendClient {
    transport: Arc<dyn Transport>,
}

impl BackendClient {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self { transport }
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.transport
    }

    pub fn caption_image(&self, image: &DynamicImage) -> Result<Caption, BackendError> {
        let role = Role::Captioner;
        let reply = self.transport.post(role, &json!({ "image_b64": b64(&encode_png(image)?) }))?;
        let sentences: Vec<String> = serde_json::from_value(field(role, &reply, "sentences")?.clone())
            .map_err(|e| BackendError::protocol(role, format!("`sentences`: {e}")))?;
        Caption::new(sentences, CaptionSource::Captioner).map_err(|e| BackendError::protocol(role, e.to_string()))
    }

    pub fn complete(&self, prompt: &str, seed: u64, temperature: f64) -> Result<String, BackendError> {
        let role = Role::Llm;
        if prompt.is_empty() {
            return Err(BackendError::protocol(role, "empty prompt"));
        }
        let body = json!({
            "prompt": prompt,
            "seed": seed,
            "temperature": temperature,
            "max_tokens": MAX_TOKENS,
        });
        let reply = self.transport.post(role, &body)?;
        field(role, &reply, "text")?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::protocol(role, "`text` is not a string"))
    }

    pub fn generate_image(&self, request: &GenerationRequest) -> Result<DynamicImage, BackendError> {
        let role = Role::Generator;
        let conditioning = request.conditioning.to_png().map_err(|e| BackendError::Decode(e.to_string()))?;
        let mut body = json!({
            "caption": request.caption,
            "conditioning_b64": b64(&conditioning),
            "seed": request.seed,
        });
        if let Some(g) = request.guidance {
            body["guidance"] = json!(g);
        }
        let reply = self.transport.post(role, &body)?;
        let image = decode_image(&b64_field(role, &reply, "image_b64")?)?;
        let (w, h) = image.dimensions();
        let (width, height) = (request.conditioning.width() as u32, request.conditioning.height() as u32);
        if (w, h) != (width, height) {
            return Err(BackendError::DimensionMismatch { width, height, got_width: w, got_height: h });
        }
        Ok(image)
    }

    pub fn predict(&self, image: &DynamicImage, task: TaskKind) -> Result<Prediction, BackendError> {
        let role = Role::Predictor;
        let body = json!({ "image_b64": b64(&encode_png(image)?), "task": task.as_str() });
        let reply = self.transport.post(role, &body)?;
        match task {
            TaskKind::Classification => {
                let label = field(role, &reply, "label")?
                    .as_u64()
                    .and_then(|l| u32::try_from(l).ok())
                    .ok_or_else(|| BackendError::protocol(role, "`label` is not a class id"))?;
                Ok(Prediction::Label(label))
            }
            TaskKind::SemanticSegmentation => {
                let map = decode_class_map(&b64_field(role, &reply, "mask_b64")?)?;
                let (width, height) = image.dimensions();
                if (map.width(), map.height()) != (width, height) {
                    return Err(BackendError::Shape {
                        width,
                        height,
                        got_width: map.width(),
                        got_height: map.height(),
                    });
                }
                Ok(Prediction::Mask(map))
            }
        }
    }
}

impl LanguageModel for BackendClient {
    fn complete(&self, prompt: &str, seed: u64, temperature: f64) -> Result<String, BackendError> {
        BackendClient::complete(self, prompt, seed, temperature)
    }
}
