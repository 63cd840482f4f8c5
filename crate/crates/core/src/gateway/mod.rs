//! Provider-agnostic access to the five model capabilities the pipeline and
//! benchmark need: text completion, image rendering, text embedding, image
//! embedding (with joint image-text scoring) and multimodal question
//! answering.
//!
//! Every backend sits behind a [`Slot`] that bounds in-flight requests and
//! retries transient failures. The gateway normalizes embeddings itself and
//! writes one JSON line of request metadata per call to the [`RunLog`].

pub mod config;
pub mod http;
pub mod mock;
mod params;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{BackendConfig, GatewayConfig};
pub use params::{RenderParams, SamplingParams};

use crate::scalar;
use crate::Embedding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Text,
    Image,
    TextEmbed,
    ImageEmbed,
    Multimodal,
}

impl std::fmt::Display for Capability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Capability::Text => "text",
            Capability::Image => "image",
            Capability::TextEmbed => "text_embed",
            Capability::ImageEmbed => "image_embed",
            Capability::Multimodal => "multimodal",
        };
        f.write_str(s)
    }
}

/// Failure reported by a single backend request.
#[derive(Debug, Clone, Error)]
pub enum BackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("backend returned HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("content policy refusal: {0}")]
    ModerationRefusal(String),
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("credentials unavailable: {0}")]
    Auth(String),
    #[error("operation not supported by this backend")]
    Unsupported,
}

impl BackendError {
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Timeout => true,
            BackendError::Status { code, .. } => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("no backend configured for capability {0}")]
    Capability(Capability),
    #[error("{capability} backend failed after {attempts} attempts: {last}")]
    BackoffExhausted {
        capability: Capability,
        attempts: u32,
        last: BackendError,
    },
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("backend refused on content policy grounds: {0}")]
    ModerationRefusal(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Backend(BackendError),
    #[error("image error: {0}")]
    Image(String),
}

/// A text completion plus whatever usage counts the backend reports.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

impl From<&str> for Completion {
    fn from(s: &str) -> Self {
        Completion {
            text: s.to_string(),
            ..Default::default()
        }
    }
}

pub trait TextBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<Completion, BackendError>;
}

/// Renders a description to PNG bytes. `params.seed` is always resolved.
pub trait ImageBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn render(&self, description: &str, params: &RenderParams) -> Result<Vec<u8>, BackendError>;
}

pub trait TextEmbedBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError>;
}

pub trait ImageEmbedBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn embed_image(&self, png: &[u8]) -> Result<Embedding, BackendError>;

    /// Raw joint image-text score on the backend's own scale.
    fn joint_similarity(&self, _png: &[u8], _text: &str) -> Result<f32, BackendError> {
        Err(BackendError::Unsupported)
    }
}

pub trait MultimodalBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn answer(&self, png: &[u8], prompt: &str, params: &SamplingParams) -> Result<String, BackendError>;

    /// Longest image side the backend accepts.
    fn max_image_side(&self) -> u32 {
        2048
    }
}

// ---------------------------------------------------------------------------
// Concurrency limiting and retry

/// Counting semaphore bounding in-flight requests for one backend.
#[derive(Debug)]
pub struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(max: usize) -> Self {
        Limiter {
            max: max.max(1),
            in_flight: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter poisoned");
        while *n >= self.max {
            n = self.cv.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("limiter poisoned");
        *n -= 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    /// Exponential backoff with full jitter before attempt `attempt + 1`.
    fn delay(&self, attempt: u32) -> Duration {
        if self.base_delay.is_zero() {
            return Duration::ZERO;
        }
        let exp = self
            .base_delay
            .saturating_mul(1u32 << (attempt - 1).min(16))
            .min(self.max_delay);
        let jitter = rand::rng().random_range(0.0..=1.0);
        exp.mul_f64(0.5 + 0.5 * jitter)
    }
}

pub struct Slot<B: ?Sized> {
    backend: Arc<B>,
    limiter: Limiter,
    retry: RetryPolicy,
}

impl<B: ?Sized> Slot<B> {
    pub fn new(backend: Arc<B>, max_concurrent: usize, retry: RetryPolicy) -> Self {
        Slot {
            backend,
            limiter: Limiter::new(max_concurrent),
            retry,
        }
    }

    fn call<T>(
        &self,
        capability: Capability,
        mut f: impl FnMut(&B) -> Result<T, BackendError>,
    ) -> (Result<T, GatewayError>, u32) {
        let _permit = self.limiter.acquire();
        let mut attempt = 0;
        loop {
            attempt += 1;
            match f(&self.backend) {
                Ok(v) => return (Ok(v), attempt),
                Err(BackendError::ModerationRefusal(msg)) => {
                    return (Err(GatewayError::ModerationRefusal(msg)), attempt)
                }
                Err(e) if e.is_transient() && attempt < self.retry.max_attempts => {
                    log::debug!("{capability} attempt {attempt} failed: {e}; retrying");
                    std::thread::sleep(self.retry.delay(attempt));
                }
                Err(e) if e.is_transient() => {
                    return (
                        Err(GatewayError::BackoffExhausted {
                            capability,
                            attempts: attempt,
                            last: e,
                        }),
                        attempt,
                    )
                }
                Err(e) => return (Err(GatewayError::Backend(e)), attempt),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Run log

enum Sink {
    Discard,
    File(Mutex<BufWriter<File>>),
    Memory(Mutex<Vec<String>>),
}

/// Line-delimited JSON log of request metadata. Never records prompts,
/// outputs or credentials; only sizes, counts, timings and identifiers.
pub struct RunLog {
    sink: Sink,
}

impl RunLog {
    pub fn discard() -> Self {
        RunLog { sink: Sink::Discard }
    }

    pub fn memory() -> Self {
        RunLog {
            sink: Sink::Memory(Mutex::new(Vec::new())),
        }
    }

    pub fn to_file(path: &Path) -> std::io::Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(RunLog {
            sink: Sink::File(Mutex::new(BufWriter::new(f))),
        })
    }

    pub fn lines(&self) -> Vec<String> {
        match &self.sink {
            Sink::Memory(m) => m.lock().expect("run log poisoned").clone(),
            _ => Vec::new(),
        }
    }

    fn record(&self, value: serde_json::Value) {
        let line = value.to_string();
        match &self.sink {
            Sink::Discard => {}
            Sink::Memory(m) => m.lock().expect("run log poisoned").push(line),
            Sink::File(f) => {
                let mut w = f.lock().expect("run log poisoned");
                if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                    log::warn!("run log write failed: {e}");
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Gateway

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedImage {
    pub png: Vec<u8>,
    pub model: String,
    /// Effective parameters, seed resolved.
    pub params: RenderParams,
}

#[derive(Default)]
pub struct GatewayBuilder {
    text: Option<Slot<dyn TextBackend>>,
    image: Option<Slot<dyn ImageBackend>>,
    text_embed: Option<Slot<dyn TextEmbedBackend>>,
    image_embed: Option<Slot<dyn ImageEmbedBackend>>,
    multimodal: Option<Slot<dyn MultimodalBackend>>,
    log: Option<RunLog>,
}

impl GatewayBuilder {
    pub fn text(mut self, b: Arc<dyn TextBackend>, max_concurrent: usize, retry: RetryPolicy) -> Self {
        self.text = Some(Slot::new(b, max_concurrent, retry));
        self
    }

    pub fn image(mut self, b: Arc<dyn ImageBackend>, max_concurrent: usize, retry: RetryPolicy) -> Self {
        self.image = Some(Slot::new(b, max_concurrent, retry));
        self
    }

    pub fn text_embed(mut self, b: Arc<dyn TextEmbedBackend>, max_concurrent: usize, retry: RetryPolicy) -> Self {
        self.text_embed = Some(Slot::new(b, max_concurrent, retry));
        self
    }

    pub fn image_embed(mut self, b: Arc<dyn ImageEmbedBackend>, max_concurrent: usize, retry: RetryPolicy) -> Self {
        self.image_embed = Some(Slot::new(b, max_concurrent, retry));
        self
    }

    pub fn multimodal(mut self, b: Arc<dyn MultimodalBackend>, max_concurrent: usize, retry: RetryPolicy) -> Self {
        self.multimodal = Some(Slot::new(b, max_concurrent, retry));
        self
    }

    pub fn run_log(mut self, log: RunLog) -> Self {
        self.log = Some(log);
        self
    }

    pub fn build(self) -> Gateway {
        Gateway {
            text: self.text,
            image: self.image,
            text_embed: self.text_embed,
            image_embed: self.image_embed,
            multimodal: self.multimodal,
            log: self.log.unwrap_or_else(RunLog::discard),
            text_dim: OnceLock::new(),
            image_dim: OnceLock::new(),
        }
    }
}

/// Shared, thread-safe entry point to every configured backend.
pub struct Gateway {
    text: Option<Slot<dyn TextBackend>>,
    image: Option<Slot<dyn ImageBackend>>,
    text_embed: Option<Slot<dyn TextEmbedBackend>>,
    image_embed: Option<Slot<dyn ImageEmbedBackend>>,
    multimodal: Option<Slot<dyn MultimodalBackend>>,
    log: RunLog,
    text_dim: OnceLock<usize>,
    image_dim: OnceLock<usize>,
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

fn outcome<T>(r: &Result<T, GatewayError>) -> String {
    match r {
        Ok(_) => "ok".into(),
        Err(e) => e.to_string(),
    }
}

impl Gateway {
    pub fn builder() -> GatewayBuilder {
        GatewayBuilder::default()
    }

    /// Every capability backed by the deterministic in-tree mocks.
    pub fn all_mock() -> Gateway {
        GatewayConfig::all_mock()
            .build(None, RunLog::discard())
            .expect("mock configuration is always valid")
    }

    pub fn run_log(&self) -> &RunLog {
        &self.log
    }

    pub fn text_model(&self) -> Option<&str> {
        self.text.as_ref().map(|s| s.backend.model_id())
    }

    pub fn image_model(&self) -> Option<&str> {
        self.image.as_ref().map(|s| s.backend.model_id())
    }

    pub fn multimodal_model(&self) -> Option<&str> {
        self.multimodal.as_ref().map(|s| s.backend.model_id())
    }

    pub fn complete_text(&self, prompt: &str, params: &SamplingParams) -> Result<String, GatewayError> {
        if prompt.is_empty() {
            return Err(GatewayError::Precondition("prompt is empty".into()));
        }
        params.validate().map_err(GatewayError::Precondition)?;
        let slot = self.text.as_ref().ok_or(GatewayError::Capability(Capability::Text))?;
        let start = Instant::now();
        let (res, attempts) = slot.call(Capability::Text, |b| b.complete(prompt, params));
        let res = res.and_then(|c| {
            if c.text.trim().is_empty() {
                Err(GatewayError::EmptyCompletion)
            } else {
                Ok(c)
            }
        });
        self.log.record(json!({
            "ts": chrono::Utc::now().to_rfc3339(),
            "capability": "text",
            "model": slot.backend.model_id(),
            "latency_ms": elapsed_ms(start),
            "attempts": attempts,
            "prompt_chars": prompt.chars().count(),
            "seed": params.seed,
            "prompt_tokens": res.as_ref().ok().and_then(|c| c.prompt_tokens),
            "completion_tokens": res.as_ref().ok().and_then(|c| c.completion_tokens),
            "outcome": outcome(&res),
        }));
        res.map(|c| c.text)
    }

    /// Renders `description`; an unset seed is drawn at random and echoed in
    /// the returned effective parameters.
    pub fn render_image(&self, description: &str, params: &RenderParams) -> Result<RenderedImage, GatewayError> {
        if description.trim().is_empty() {
            return Err(GatewayError::Precondition("description is empty".into()));
        }
        params.validate().map_err(GatewayError::Precondition)?;
        let slot = self.image.as_ref().ok_or(GatewayError::Capability(Capability::Image))?;
        let mut effective = params.clone();
        let seed = *effective.seed.get_or_insert_with(|| rand::rng().random());
        let start = Instant::now();
        let (res, attempts) = slot.call(Capability::Image, |b| b.render(description, &effective));
        let res = res.and_then(|png| {
            image::load_from_memory_with_format(&png, image::ImageFormat::Png)
                .map_err(|e| GatewayError::Image(format!("renderer returned undecodable PNG: {e}")))?;
            Ok(png)
        });
        self.log.record(json!({
            "ts": chrono::Utc::now().to_rfc3339(),
            "capability": "image",
            "model": slot.backend.model_id(),
            "latency_ms": elapsed_ms(start),
            "attempts": attempts,
            "prompt_chars": description.chars().count(),
            "seed": seed,
            "steps": effective.inference_steps,
            "guidance_scale": effective.guidance_scale,
            "outcome": outcome(&res),
        }));
        res.map(|png| RenderedImage {
            png,
            model: slot.backend.model_id().to_string(),
            params: effective,
        })
    }

    fn check_dim(cell: &OnceLock<usize>, got: usize) -> Result<(), GatewayError> {
        let expected = *cell.get_or_init(|| got);
        if expected != got {
            return Err(GatewayError::DimensionMismatch { expected, got });
        }
        Ok(())
    }

    fn unit(mut v: Embedding) -> Result<Embedding, GatewayError> {
        if !scalar::l2_normalize(&mut v) {
            return Err(GatewayError::Backend(BackendError::Malformed(
                "zero or non-finite embedding".into(),
            )));
        }
        Ok(v)
    }

    /// One unit-norm vector per input text.
    pub fn embed_text(&self, texts: &[String]) -> Result<Vec<Embedding>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::Precondition("no texts to embed".into()));
        }
        let slot = self
            .text_embed
            .as_ref()
            .ok_or(GatewayError::Capability(Capability::TextEmbed))?;
        let start = Instant::now();
        let (res, attempts) = slot.call(Capability::TextEmbed, |b| b.embed(texts));
        let res = res.and_then(|vs| {
            if vs.len() != texts.len() {
                return Err(GatewayError::Backend(BackendError::Malformed(format!(
                    "{} vectors for {} inputs",
                    vs.len(),
                    texts.len()
                ))));
            }
            vs.into_iter()
                .map(|v| {
                    Self::check_dim(&self.text_dim, v.len())?;
                    Self::unit(v)
                })
                .collect::<Result<Vec<_>, _>>()
        });
        self.log.record(json!({
            "ts": chrono::Utc::now().to_rfc3339(),
            "capability": "text_embed",
            "model": slot.backend.model_id(),
            "latency_ms": elapsed_ms(start),
            "attempts": attempts,
            "batch": texts.len(),
            "outcome": outcome(&res),
        }));
        res
    }

    pub fn embed_one(&self, text: &str) -> Result<Embedding, GatewayError> {
        Ok(self.embed_text(&[text.to_string()])?.remove(0))
    }

    pub fn embed_image(&self, png: &[u8]) -> Result<Embedding, GatewayError> {
        if png.is_empty() {
            return Err(GatewayError::Precondition("image is empty".into()));
        }
        let slot = self
            .image_embed
            .as_ref()
            .ok_or(GatewayError::Capability(Capability::ImageEmbed))?;
        let start = Instant::now();
        let (res, attempts) = slot.call(Capability::ImageEmbed, |b| b.embed_image(png));
        let res = res.and_then(|v| {
            Self::check_dim(&self.image_dim, v.len())?;
            Self::unit(v)
        });
        self.log.record(json!({
            "ts": chrono::Utc::now().to_rfc3339(),
            "capability": "image_embed",
            "model": slot.backend.model_id(),
            "latency_ms": elapsed_ms(start),
            "attempts": attempts,
            "bytes": png.len(),
            "outcome": outcome(&res),
        }));
        res
    }

    /// Raw joint image-text similarity on the backend's scale.
    pub fn joint_similarity(&self, png: &[u8], text: &str) -> Result<f32, GatewayError> {
        if png.is_empty() || text.trim().is_empty() {
            return Err(GatewayError::Precondition("image and text must be nonempty".into()));
        }
        let slot = self
            .image_embed
            .as_ref()
            .ok_or(GatewayError::Capability(Capability::ImageEmbed))?;
        let start = Instant::now();
        let (res, attempts) = slot.call(Capability::ImageEmbed, |b| b.joint_similarity(png, text));
        let res = res.map_err(|e| match e {
            GatewayError::Backend(BackendError::Unsupported) => GatewayError::Capability(Capability::ImageEmbed),
            other => other,
        });
        self.log.record(json!({
            "ts": chrono::Utc::now().to_rfc3339(),
            "capability": "joint_similarity",
            "model": slot.backend.model_id(),
            "latency_ms": elapsed_ms(start),
            "attempts": attempts,
            "outcome": outcome(&res),
        }));
        res
    }

    /// Asks the multimodal backend `prompt` about `png`, downscaling the image
    /// first when it exceeds the backend's size limit.
    pub fn answer_multimodal(&self, png: &[u8], prompt: &str, params: &SamplingParams) -> Result<String, GatewayError> {
        if png.is_empty() || prompt.is_empty() {
            return Err(GatewayError::Precondition("image and prompt must be nonempty".into()));
        }
        params.validate().map_err(GatewayError::Precondition)?;
        let slot = self
            .multimodal
            .as_ref()
            .ok_or(GatewayError::Capability(Capability::Multimodal))?;
        let limit = slot.backend.max_image_side();
        let (png, downscaled) = downscale_png(png, limit)?;
        if let Some((w, h)) = downscaled {
            log::info!("image downscaled to {w}x{h} for {}", slot.backend.model_id());
        }
        let start = Instant::now();
        let (res, attempts) = slot.call(Capability::Multimodal, |b| b.answer(&png, prompt, params));
        let res = res.and_then(|s| {
            if s.trim().is_empty() {
                Err(GatewayError::EmptyCompletion)
            } else {
                Ok(s)
            }
        });
        self.log.record(json!({
            "ts": chrono::Utc::now().to_rfc3339(),
            "capability": "multimodal",
            "model": slot.backend.model_id(),
            "latency_ms": elapsed_ms(start),
            "attempts": attempts,
            "prompt_chars": prompt.chars().count(),
            "image_sha256": hex::encode(Sha256::digest(&png)),
            "downscaled_to": downscaled.map(|(w, h)| format!("{w}x{h}")),
            "outcome": outcome(&res),
        }));
        res
    }
}

/// Re-encodes `png` so that neither side exceeds `limit`, preserving aspect
/// ratio. Returns the (possibly unchanged) bytes and the new size if resized.
pub fn downscale_png(png: &[u8], limit: u32) -> Result<(Vec<u8>, Option<(u32, u32)>), GatewayError> {
    let img = image::load_from_memory(png).map_err(|e| GatewayError::Image(e.to_string()))?;
    let (w, h) = (img.width(), img.height());
    if w.max(h) <= limit {
        return Ok((png.to_vec(), None));
    }
    let scale = limit as f64 / w.max(h) as f64;
    let nw = ((w as f64 * scale).round() as u32).max(1);
    let nh = ((h as f64 * scale).round() as u32).max(1);
    let resized = img.resize_exact(nw, nh, image::imageops::FilterType::Triangle);
    let mut out = std::io::Cursor::new(Vec::new());
    resized
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| GatewayError::Image(e.to_string()))?;
    Ok((out.into_inner(), Some((nw, nh))))
}
