//! Deterministic in-tree providers. Every output is a pure function of the
//! request (and its seed), so whole pipeline runs are reproducible offline.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    BackendError, Completion, ImageBackend, ImageEmbedBackend, MultimodalBackend, RenderParams, SamplingParams,
    TextBackend, TextEmbedBackend,
};
use crate::Embedding;

/// Scale applied to cosine by the mock joint scorer, mirroring the logit
/// scale of common contrastive image-text models.
pub const JOINT_SCORE_SCALE: f32 = 100.0;

/// Side length of mock-rendered test patterns.
pub const PATTERN_SIDE: u32 = 64;

fn rng_for(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Unit basis vector `e_i` of dimension `dim`.
pub fn basis(dim: usize, i: usize) -> Embedding {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

// ---------------------------------------------------------------------------
// Text

pub struct CannedText {
    model: String,
    response: String,
}

impl CannedText {
    pub fn new(model: &str, response: &str) -> Self {
        CannedText {
            model: model.into(),
            response: response.into(),
        }
    }
}

impl TextBackend for CannedText {
    fn model_id(&self) -> &str {
        &self.model
    }
    fn complete(&self, _: &str, _: &SamplingParams) -> Result<Completion, BackendError> {
        Ok(self.response.as_str().into())
    }
}

/// Replays a fixed list of completions in order, then repeats the last one.
pub struct ScriptedText {
    model: String,
    queue: Mutex<VecDeque<String>>,
    last: Mutex<Option<String>>,
    calls: AtomicUsize,
}

impl ScriptedText {
    pub fn new<I, S>(model: &str, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedText {
            model: model.into(),
            queue: Mutex::new(responses.into_iter().map(Into::into).collect()),
            last: Mutex::new(None),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl TextBackend for ScriptedText {
    fn model_id(&self) -> &str {
        &self.model
    }
    fn complete(&self, _: &str, _: &SamplingParams) -> Result<Completion, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let next = self.queue.lock().expect("poisoned").pop_front();
        let mut last = self.last.lock().expect("poisoned");
        match next {
            Some(s) => {
                *last = Some(s.clone());
                Ok(s.as_str().into())
            }
            None => last
                .clone()
                .map(|s| s.as_str().into())
                .ok_or_else(|| BackendError::Malformed("script exhausted".into())),
        }
    }
}

const OBJECTS: &[&str] = &[
    "lantern", "hourglass", "compass", "open book", "quill", "candle", "teacup", "violin", "bicycle",
    "umbrella", "paper boat", "telescope", "pocket watch", "bridge", "ladder", "key", "feather",
    "chessboard", "map", "kite", "anchor", "lighthouse", "seedling", "suitcase", "mirror", "ribbon",
    "typewriter", "gavel", "scales", "bench", "clock tower", "window", "staircase", "nest",
    "wedding ring", "torch", "rope", "envelope", "piano", "cradle",
];
const LIGHTS: &[&str] = &["golden", "pale dawn", "amber", "silver moon", "soft diffuse", "candle"];
const MOODS: &[&str] = &["quiet", "hopeful", "wistful", "restless", "tender", "solemn"];
const TEXTURES: &[&str] = &["weathered wood", "worn linen", "cold stone", "polished brass", "dusty velvet"];
const COLORS: &[&str] = &["crimson", "cobalt", "ochre", "teal", "violet", "charcoal", "saffron"];
const SHAPES: &[&str] = &["spiraling", "angular", "concentric", "splintered", "stacked"];

/// Deterministic LLM stand-in that answers the pipeline's prompt formats.
///
/// * prompts ending in `-> Representamen:` get five objects for the named
///   concept;
/// * prompts ending in `|| Output:` get a short scene built from the listed
///   objects, abstract in register when the prompt asks for an abstract
///   artistic description;
/// * anything else gets a single vocabulary word.
pub struct TemplateText {
    model: String,
}

impl TemplateText {
    pub fn new(model: &str) -> Self {
        TemplateText { model: model.into() }
    }
}

fn last_line_containing<'a>(prompt: &'a str, needle: &str) -> Option<&'a str> {
    prompt.lines().rev().find(|l| l.contains(needle))
}

impl TextBackend for TemplateText {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<Completion, BackendError> {
        let seed = params.seed.unwrap_or(0).to_le_bytes();
        if let Some(line) = last_line_containing(prompt, "-> Representamen:").filter(|_| prompt.trim_end().ends_with("Representamen:")) {
            let word = line
                .split("->")
                .next()
                .and_then(|s| s.trim().strip_prefix("Object:"))
                .unwrap_or("")
                .trim();
            let mut rng = rng_for(&[b"reps", word.to_lowercase().as_bytes(), &seed]);
            let items: Vec<&str> = OBJECTS.choose_multiple(&mut rng, 5).copied().collect();
            return Ok(format!("Object: {word} -> Representamen: {}", items.join(", ")).as_str().into());
        }
        if let Some(line) = last_line_containing(prompt, "|| Concept Word:").filter(|_| prompt.trim_end().ends_with("Output:")) {
            let objects: Vec<&str> = line
                .split("||")
                .next()
                .and_then(|s| s.trim().strip_prefix("Objects:"))
                .unwrap_or("")
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .collect();
            let concept = line.split("||").nth(1).unwrap_or("").to_lowercase();
            let abstract_style = prompt.contains("abstract artistic");
            let mut rng = rng_for(&[b"desc", concept.as_bytes(), line.as_bytes(), &seed, &[abstract_style as u8]]);
            let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| *xs.choose(rng).expect("nonempty");
            let o = |i: usize| objects.get(i % objects.len().max(1)).copied().unwrap_or("stone");
            let text = if abstract_style {
                format!(
                    "Fractured planes of {} and {} fold a {} into jagged shards. A {} drifts through {} rhythms while a {} splinters into overlapping facets, the canvas pulsing with dissonant color and broken perspective.",
                    pick(&mut rng, COLORS),
                    pick(&mut rng, COLORS),
                    o(0),
                    o(1),
                    pick(&mut rng, SHAPES),
                    o(2),
                )
            } else {
                format!(
                    "A {} rests beside a {} in {} light. Nearby, a {} and a {} catch the {} glow, textures of {} filling the frame with a sense of stillness.",
                    o(0),
                    o(1),
                    pick(&mut rng, LIGHTS),
                    o(2),
                    o(3),
                    pick(&mut rng, MOODS),
                    pick(&mut rng, TEXTURES),
                )
            };
            return Ok(text.as_str().into());
        }
        let mut rng = rng_for(&[b"free", prompt.as_bytes(), &seed]);
        Ok((*OBJECTS.choose(&mut rng).expect("nonempty")).into())
    }
}

// ---------------------------------------------------------------------------
// Images

/// PNG-encoded `PATTERN_SIDE`-square block pattern derived from
/// `(description, seed)`.
pub fn test_pattern(description: &str, seed: u64) -> Vec<u8> {
    let mut rng = rng_for(&[b"pattern", description.as_bytes(), &seed.to_le_bytes()]);
    let block = 8;
    let cells = (PATTERN_SIDE / block) as usize;
    let palette: Vec<[u8; 3]> = (0..cells * cells).map(|_| rng.random()).collect();
    let img = image::RgbImage::from_fn(PATTERN_SIDE, PATTERN_SIDE, |x, y| {
        let c = palette[(y / block) as usize * cells + (x / block) as usize];
        image::Rgb(c)
    });
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .expect("encoding an in-memory PNG cannot fail");
    out.into_inner()
}

/// Renders [`test_pattern`]s. Descriptions containing any of the configured
/// blocked terms are refused as a content-policy violation.
pub struct PatternRenderer {
    model: String,
    blocked: Vec<String>,
}

impl PatternRenderer {
    pub fn new(model: &str) -> Self {
        PatternRenderer {
            model: model.into(),
            blocked: Vec::new(),
        }
    }

    pub fn blocking(mut self, term: &str) -> Self {
        self.blocked.push(term.to_lowercase());
        self
    }
}

impl ImageBackend for PatternRenderer {
    fn model_id(&self) -> &str {
        &self.model
    }
    fn render(&self, description: &str, params: &RenderParams) -> Result<Vec<u8>, BackendError> {
        let lower = description.to_lowercase();
        if let Some(term) = self.blocked.iter().find(|t| lower.contains(t.as_str())) {
            return Err(BackendError::ModerationRefusal(format!("blocked term {term:?}")));
        }
        Ok(test_pattern(description, params.seed.unwrap_or(0)))
    }
}

// ---------------------------------------------------------------------------
// Embeddings

/// Text embedder mapping each string to a pseudo-random vector seeded by its
/// hash, with optional fixed vectors for named strings.
#[derive(Debug, Clone)]
pub struct HashTextEmbedder {
    dim: usize,
    overrides: HashMap<String, Embedding>,
}

impl HashTextEmbedder {
    pub fn new(dim: usize) -> Self {
        HashTextEmbedder {
            dim,
            overrides: HashMap::new(),
        }
    }

    pub fn with_vector(mut self, text: &str, v: Embedding) -> Self {
        assert_eq!(v.len(), self.dim, "override dimension");
        self.overrides.insert(text.to_string(), v);
        self
    }

    pub fn set_vector(&mut self, text: &str, v: Embedding) {
        assert_eq!(v.len(), self.dim, "override dimension");
        self.overrides.insert(text.to_string(), v);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The unnormalized vector for `text`.
    pub fn raw_vector(&self, text: &str) -> Embedding {
        if let Some(v) = self.overrides.get(text) {
            return v.clone();
        }
        let mut rng = rng_for(&[b"text-embed", text.as_bytes()]);
        (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }
}

impl TextEmbedBackend for HashTextEmbedder {
    fn model_id(&self) -> &str {
        "mock-text-embed"
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        Ok(texts.iter().map(|t| self.raw_vector(t)).collect())
    }
}

fn pixel_digest(png: &[u8]) -> Result<[u8; 32], BackendError> {
    let img = image::load_from_memory(png)
        .map_err(|e| BackendError::Malformed(format!("undecodable image: {e}")))?
        .to_rgba8();
    let mut h = Sha256::new();
    h.update(img.width().to_le_bytes());
    h.update(img.height().to_le_bytes());
    h.update(img.as_raw());
    Ok(h.finalize().into())
}

/// Image embedder hashing decoded pixels to a vector. With a text encoder
/// attached it also scores image-text pairs as `100 * cosine`.
#[derive(Debug, Clone)]
pub struct PixelHashImageEmbedder {
    dim: usize,
    overrides: HashMap<[u8; 32], Embedding>,
    text: Option<HashTextEmbedder>,
}

impl PixelHashImageEmbedder {
    pub fn new(dim: usize) -> Self {
        PixelHashImageEmbedder {
            dim,
            overrides: HashMap::new(),
            text: None,
        }
    }

    pub fn with_text_encoder(mut self, text: HashTextEmbedder) -> Self {
        assert_eq!(text.dim(), self.dim, "joint space dimension");
        self.text = Some(text);
        self
    }

    pub fn with_image_vector(mut self, png: &[u8], v: Embedding) -> Self {
        self.set_image_vector(png, v);
        self
    }

    pub fn set_image_vector(&mut self, png: &[u8], v: Embedding) {
        assert_eq!(v.len(), self.dim, "override dimension");
        let key = pixel_digest(png).expect("override image must decode");
        self.overrides.insert(key, v);
    }

    fn raw_vector(&self, png: &[u8]) -> Result<Embedding, BackendError> {
        let key = pixel_digest(png)?;
        if let Some(v) = self.overrides.get(&key) {
            return Ok(v.clone());
        }
        let mut rng = rng_for(&[b"image-embed", &key]);
        Ok((0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect())
    }
}

impl ImageEmbedBackend for PixelHashImageEmbedder {
    fn model_id(&self) -> &str {
        "mock-image-embed"
    }
    fn embed_image(&self, png: &[u8]) -> Result<Embedding, BackendError> {
        self.raw_vector(png)
    }
    fn joint_similarity(&self, png: &[u8], text: &str) -> Result<f32, BackendError> {
        let enc = self.text.as_ref().ok_or(BackendError::Unsupported)?;
        let img = self.raw_vector(png)?;
        let txt = enc.raw_vector(text);
        Ok(JOINT_SCORE_SCALE * crate::scalar::cosine(&img, &txt))
    }
}

// ---------------------------------------------------------------------------
// Multimodal

pub struct ConstantAnswerer {
    answer: String,
}

impl ConstantAnswerer {
    pub fn new(answer: &str) -> Self {
        ConstantAnswerer { answer: answer.into() }
    }
}

impl MultimodalBackend for ConstantAnswerer {
    fn model_id(&self) -> &str {
        "mock-constant"
    }
    fn answer(&self, _: &[u8], _: &str, _: &SamplingParams) -> Result<String, BackendError> {
        Ok(self.answer.clone())
    }
}

/// Answers a letter A-D chosen by the image bytes' hash, stable across runs.
pub struct HashAnswerer {
    model: String,
}

impl HashAnswerer {
    pub fn new(model: &str) -> Self {
        HashAnswerer { model: model.into() }
    }
}

impl MultimodalBackend for HashAnswerer {
    fn model_id(&self) -> &str {
        &self.model
    }
    fn answer(&self, png: &[u8], _: &str, _: &SamplingParams) -> Result<String, BackendError> {
        let d = Sha256::digest(png);
        Ok(["A", "B", "C", "D"][(d[0] % 4) as usize].to_string())
    }
}

/// Looks up the answer for each image (keyed by SHA-256 hex of its bytes).
pub struct KeyedAnswerer {
    model: String,
    answers: HashMap<String, String>,
    fallback: String,
}

impl KeyedAnswerer {
    pub fn new(model: &str, answers: HashMap<String, String>, fallback: &str) -> Self {
        KeyedAnswerer {
            model: model.into(),
            answers,
            fallback: fallback.into(),
        }
    }
}

impl MultimodalBackend for KeyedAnswerer {
    fn model_id(&self) -> &str {
        &self.model
    }
    fn answer(&self, png: &[u8], _: &str, _: &SamplingParams) -> Result<String, BackendError> {
        let key = hex::encode(Sha256::digest(png));
        Ok(self.answers.get(&key).cloned().unwrap_or_else(|| self.fallback.clone()))
    }
}
