//! Three-stage generation: concept → representamens → visual description →
//! rendered image.

mod agreement;
mod leakage;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotation::Flag;
use crate::catalog::{Concept, Lemma, Supersense};
use crate::gateway::{Gateway, GatewayError, RenderParams, SamplingParams};
use crate::store::{
    Clock, CorpusStore, FieldError, ImageStore, JsonlLog, ManifestEntry, ManifestRecord, StoreError, Validate,
    SCHEMA_VERSION,
};

pub use agreement::{greedy_set_similarity, representamen_agreement, AgreementMatrix};
pub use leakage::{leakage_check, Leakage};

pub const MIN_REPRESENTAMENS: usize = 3;
pub const MAX_REPRESENTAMENS: usize = 7;
pub const REPRESENTAMEN_ATTEMPTS: u32 = 3;
pub const LEAKAGE_MAX_ATTEMPTS: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Naturalistic,
    Stylistic,
}

impl Style {
    pub const ALL: [Style; 2] = [Style::Naturalistic, Style::Stylistic];

    pub fn name(self) -> &'static str {
        match self {
            Style::Naturalistic => "naturalistic",
            Style::Stylistic => "stylistic",
        }
    }

    /// Soft word-count ceiling stated in the style's prompt.
    pub fn word_target(self) -> usize {
        match self {
            Style::Naturalistic => 70,
            Style::Stylistic => 60,
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Style {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "naturalistic" | "nat" => Ok(Style::Naturalistic),
            "stylistic" | "styl" => Ok(Style::Stylistic),
            other => Err(format!("unknown style {other:?} (expected naturalistic or stylistic)")),
        }
    }
}

// ---------------------------------------------------------------------------
// Templates

/// Prompt and instruction texts. Defaults are compiled in; any file of the
/// same name in a template directory overrides its default.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    pub representamen: String,
    pub naturalistic: String,
    pub stylistic: String,
    pub question: String,
    pub predict: String,
    pub guidelines: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            representamen: include_str!("../../templates/representamen.txt").into(),
            naturalistic: include_str!("../../templates/naturalistic.txt").into(),
            stylistic: include_str!("../../templates/stylistic.txt").into(),
            question: include_str!("../../templates/question.txt").into(),
            predict: include_str!("../../templates/predict.txt").into(),
            guidelines: include_str!("../../templates/guidelines.txt").into(),
        }
    }
}

impl PromptTemplates {
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut t = PromptTemplates::default();
        for (name, slot) in [
            ("representamen.txt", &mut t.representamen),
            ("naturalistic.txt", &mut t.naturalistic),
            ("stylistic.txt", &mut t.stylistic),
            ("question.txt", &mut t.question),
            ("predict.txt", &mut t.predict),
            ("guidelines.txt", &mut t.guidelines),
        ] {
            let p = dir.join(name);
            if p.exists() {
                *slot = std::fs::read_to_string(p)?;
            }
        }
        Ok(t)
    }

    pub fn description(&self, style: Style) -> &str {
        match style {
            Style::Naturalistic => &self.naturalistic,
            Style::Stylistic => &self.stylistic,
        }
    }

    pub fn render_representamen(&self, word: &str) -> String {
        self.representamen.replace("{word}", word).trim_end().to_string()
    }

    pub fn render_description(&self, style: Style, reps: &[String], goal: &str) -> String {
        self.description(style)
            .replace("{rep_input}", &reps.join(", "))
            .replace("{goal}", goal)
            .trim_end()
            .to_string()
    }

    /// `<name>@<first 12 hex of sha256>`, so edited templates are traceable.
    pub fn id(name: &str, text: &str) -> String {
        format!("{name}@{}", &hex::encode(Sha256::digest(text.as_bytes()))[..12])
    }
}

// ---------------------------------------------------------------------------
// Records

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepresentamenSet {
    pub concept: Lemma,
    pub items: Vec<String>,
    pub model: String,
    pub template_id: String,
    pub raw_completion: String,
}

impl Validate for RepresentamenSet {
    fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        if !(MIN_REPRESENTAMENS..=MAX_REPRESENTAMENS).contains(&self.items.len()) {
            errs.push(FieldError::new(
                "items",
                &format!("expected {MIN_REPRESENTAMENS}..={MAX_REPRESENTAMENS} items, got {}", self.items.len()),
            ));
        }
        let mut seen = BTreeSet::new();
        for it in &self.items {
            let low = it.to_lowercase();
            if it.trim().is_empty() {
                errs.push(FieldError::new("items", "empty item"));
            } else if low == self.concept.as_str() {
                errs.push(FieldError::new("items", &format!("item {it:?} is the concept itself")));
            } else if !seen.insert(low) {
                errs.push(FieldError::new("items", &format!("duplicate item {it:?}")));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualDescription {
    pub id: String,
    pub concept: Lemma,
    pub style: Style,
    pub text: String,
    pub word_count: usize,
    pub attempts: u32,
    pub leakage_passed: bool,
    /// Whether `word_count` is under the style's soft target.
    pub within_word_target: bool,
    pub model: String,
    pub template_id: String,
}

impl VisualDescription {
    fn make_id(concept: &Lemma, style: Style, text: &str) -> String {
        let mut h = Sha256::new();
        for part in [concept.as_str(), style.name(), text] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())[..16].to_string()
    }
}

impl Validate for VisualDescription {
    fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        if self.attempts == 0 {
            errs.push(FieldError::new("attempts", "must be >= 1"));
        }
        if self.word_count != self.text.split_whitespace().count() {
            errs.push(FieldError::new("word_count", "does not match text"));
        }
        if self.leakage_passed && !leakage_check(&self.text, &self.concept).is_clean() {
            errs.push(FieldError::new("leakage_passed", "text contains the concept"));
        }
        if self.id != Self::make_id(&self.concept, self.style, &self.text) {
            errs.push(FieldError::new("id", "does not match content"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedImage {
    /// SHA-256 of the PNG bytes.
    pub id: String,
    pub concept: Lemma,
    pub supersense: Supersense,
    pub style: Style,
    pub description_id: String,
    pub model: String,
    pub seed: u64,
    pub params: RenderParams,
    /// Relative to the corpus root.
    pub path: String,
    #[serde(default)]
    pub moderation_flags: BTreeSet<Flag>,
}

impl Validate for GeneratedImage {
    fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        if self.id.len() != 64 || !self.id.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) {
            errs.push(FieldError::new("id", "must be 64 lowercase hex digits"));
        } else if self.path != ImageStore::relative_path(&self.id) {
            errs.push(FieldError::new("path", "not the content-addressed path of id"));
        }
        if self.params.seed != Some(self.seed) {
            errs.push(FieldError::new("seed", "must equal params.seed"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    RepresentamenParse,
    LeakageExhausted,
    ModerationRefusal,
    BackendError,
}

/// One failed description attempt, kept for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakedAttempt {
    pub text: String,
    pub matched: String,
}

/// Outcome row for one (concept, style).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub concept: Lemma,
    pub style: Style,
    pub outcome: Outcome,
    /// Description attempts made (0 when the failure came before stage 2).
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub leaked: Vec<LeakedAttempt>,
}

impl Validate for AttemptRecord {
    fn validate(&self) -> Result<(), Vec<FieldError>> {
        match (self.outcome, &self.image_id) {
            (Outcome::Success, None) => Err(vec![FieldError::new("image_id", "required on success")]),
            (Outcome::Success, Some(_)) | (_, None) => Ok(()),
            (_, Some(_)) => Err(vec![FieldError::new("image_id", "only allowed on success")]),
        }
    }
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("could not parse representamens for {concept} after {attempts} completions: {last}")]
    RepresentamenParse {
        concept: Lemma,
        attempts: u32,
        last: String,
    },
    #[error("description for {concept} ({style}) still names the concept after {} attempts", .attempts.len())]
    LeakageExhausted {
        concept: Lemma,
        style: Style,
        attempts: Vec<LeakedAttempt>,
    },
    #[error("renderer refused {concept} ({style}): {message}")]
    Moderation {
        concept: Lemma,
        style: Style,
        message: String,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl PipelineError {
    fn outcome(&self) -> Outcome {
        match self {
            PipelineError::RepresentamenParse { .. } => Outcome::RepresentamenParse,
            PipelineError::LeakageExhausted { .. } => Outcome::LeakageExhausted,
            PipelineError::Moderation { .. } => Outcome::ModerationRefusal,
            _ => Outcome::BackendError,
        }
    }

    /// Errors that mean the whole run is misconfigured rather than one
    /// concept failing.
    fn is_fatal(&self) -> bool {
        matches!(
            self,
            PipelineError::Gateway(GatewayError::Capability(_) | GatewayError::DimensionMismatch { .. })
                | PipelineError::Store(StoreError::Io { .. } | StoreError::Locked { .. })
        )
    }
}

// ---------------------------------------------------------------------------
// Stage 1: representamens

/// Parses a completion into representamen items. Text after the final
/// `Representamen:` marker (or the first nonempty line when absent) is
/// split on commas; items are trimmed, lowercased, deduplicated, the concept
/// itself dropped, and the list cut at the maximum size.
pub fn parse_representamens(completion: &str, concept: &Lemma) -> Result<Vec<String>, String> {
    let body = match completion.rfind("Representamen:") {
        Some(i) => &completion[i + "Representamen:".len()..],
        None => completion.lines().find(|l| !l.trim().is_empty()).unwrap_or(""),
    };
    let body = body.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let mut seen = BTreeSet::new();
    let mut items = Vec::new();
    for raw in body.split(',') {
        let item = raw
            .trim()
            .trim_end_matches(['.', ';', '!'])
            .trim_matches(|c: char| c == '"' || c == '*')
            .trim()
            .to_lowercase();
        if item.is_empty() || item == concept.as_str() || !seen.insert(item.clone()) {
            continue;
        }
        items.push(item);
    }
    if items.len() < MIN_REPRESENTAMENS {
        return Err(format!("{} usable items in {:?}", items.len(), completion.trim()));
    }
    items.truncate(MAX_REPRESENTAMENS);
    Ok(items)
}

pub fn generate_representamens(
    gateway: &Gateway,
    templates: &PromptTemplates,
    concept: &Concept,
    seed: u64,
) -> Result<RepresentamenSet, PipelineError> {
    if !concept.is_retained() {
        return Err(PipelineError::Precondition(format!("{} is not a retained concept", concept.lemma)));
    }
    let prompt = templates.render_representamen(concept.lemma.as_str());
    let mut last = String::new();
    for attempt in 0..REPRESENTAMEN_ATTEMPTS {
        let params = SamplingParams::default().with_seed(seed.wrapping_add(attempt as u64));
        let raw = match gateway.complete_text(&prompt, &params) {
            Ok(t) => t,
            Err(GatewayError::EmptyCompletion) => {
                last = "empty completion".into();
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        match parse_representamens(&raw, &concept.lemma) {
            Ok(items) => {
                return Ok(RepresentamenSet {
                    concept: concept.lemma.clone(),
                    items,
                    model: gateway.text_model().unwrap_or_default().to_string(),
                    template_id: PromptTemplates::id("representamen", &templates.representamen),
                    raw_completion: raw,
                })
            }
            Err(e) => last = e,
        }
    }
    Err(PipelineError::RepresentamenParse {
        concept: concept.lemma.clone(),
        attempts: REPRESENTAMEN_ATTEMPTS,
        last,
    })
}

// ---------------------------------------------------------------------------
// Stage 2: description

fn extract_output(completion: &str) -> &str {
    match completion.rfind("Output:") {
        Some(i) => completion[i + "Output:".len()..].trim(),
        None => completion.trim(),
    }
}

pub fn compose_description(
    gateway: &Gateway,
    templates: &PromptTemplates,
    concept: &Concept,
    reps: &RepresentamenSet,
    style: Style,
    seed: u64,
) -> Result<VisualDescription, PipelineError> {
    reps.validate()
        .map_err(|e| PipelineError::Precondition(format!("invalid representamens: {}", e[0])))?;
    let prompt = templates.render_description(style, &reps.items, concept.lemma.as_str());
    let mut leaked = Vec::new();
    for attempt in 1..=LEAKAGE_MAX_ATTEMPTS {
        let params = SamplingParams::default().with_seed(seed.wrapping_add(attempt as u64 - 1));
        let raw = gateway.complete_text(&prompt, &params)?;
        let text = extract_output(&raw).to_string();
        match leakage_check(&text, &concept.lemma) {
            Leakage::Clean if !text.is_empty() => {
                let word_count = text.split_whitespace().count();
                return Ok(VisualDescription {
                    id: VisualDescription::make_id(&concept.lemma, style, &text),
                    concept: concept.lemma.clone(),
                    style,
                    word_count,
                    attempts: attempt,
                    leakage_passed: true,
                    within_word_target: word_count < style.word_target(),
                    model: gateway.text_model().unwrap_or_default().to_string(),
                    template_id: PromptTemplates::id(style.name(), templates.description(style)),
                    text,
                });
            }
            Leakage::Clean => leaked.push(LeakedAttempt {
                text,
                matched: String::new(),
            }),
            Leakage::Leaked(form) => {
                log::debug!("{} ({style}) attempt {attempt}: leaked {form:?}", concept.lemma);
                leaked.push(LeakedAttempt { text, matched: form });
            }
        }
    }
    Err(PipelineError::LeakageExhausted {
        concept: concept.lemma.clone(),
        style,
        attempts: leaked,
    })
}

// ---------------------------------------------------------------------------
// Stage 3: rendering

pub fn render_metonymic_image(
    gateway: &Gateway,
    images: &ImageStore,
    concept: &Concept,
    desc: &VisualDescription,
    params: &RenderParams,
) -> Result<GeneratedImage, PipelineError> {
    if !desc.leakage_passed {
        return Err(PipelineError::Precondition(
            "description has not passed the leakage check".into(),
        ));
    }
    if desc.concept != concept.lemma {
        return Err(PipelineError::Precondition("description belongs to another concept".into()));
    }
    let rendered = gateway.render_image(&desc.text, params).map_err(|e| match e {
        GatewayError::ModerationRefusal(message) => PipelineError::Moderation {
            concept: desc.concept.clone(),
            style: desc.style,
            message,
        },
        other => other.into(),
    })?;
    let (id, path) = images.put(&rendered.png)?;
    Ok(GeneratedImage {
        id,
        concept: desc.concept.clone(),
        supersense: concept.supersense,
        style: desc.style,
        description_id: desc.id.clone(),
        model: rendered.model,
        seed: rendered.params.seed.expect("gateway resolves the seed"),
        params: rendered.params,
        path,
        moderation_flags: BTreeSet::new(),
    })
}

// ---------------------------------------------------------------------------
// Full run

/// Seed for one stage of one concept, derived from the run seed.
pub fn derive_seed(run_seed: u64, lemma: &Lemma, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(lemma.as_str().as_bytes());
    h.update([0]);
    h.update(stage.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub fn run_id(run_seed: u64) -> String {
    hex::encode(Sha256::digest(format!("run:{run_seed}").as_bytes()))[..16].to_string()
}

pub struct PipelineConfig {
    pub seed: u64,
    pub styles: Vec<Style>,
    pub templates: PromptTemplates,
    pub render: RenderParams,
    /// Concepts processed concurrently per batch; manifest rows are appended
    /// after each batch in input order.
    pub batch_size: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            styles: Style::ALL.to_vec(),
            templates: PromptTemplates::default(),
            render: RenderParams::default(),
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub concepts: usize,
    pub new_images: usize,
    pub new_failures: usize,
    /// (concept, style) pairs skipped because an earlier run completed them.
    pub resumed: usize,
    pub skipped_not_retained: usize,
    pub failures_by_outcome: BTreeMap<String, usize>,
}

fn failure_row(concept: &Lemma, style: Style, err: &PipelineError) -> AttemptRecord {
    let (attempts, leaked) = match err {
        PipelineError::LeakageExhausted { attempts, .. } => (attempts.len() as u32, attempts.clone()),
        _ => (0, Vec::new()),
    };
    AttemptRecord {
        concept: concept.clone(),
        style,
        outcome: err.outcome(),
        attempts,
        image_id: None,
        detail: Some(err.to_string()),
        leaked,
    }
}

/// Produces the manifest rows for one concept.
fn process_concept(
    gateway: &Gateway,
    images: &ImageStore,
    cfg: &PipelineConfig,
    concept: &Concept,
    styles: &[Style],
    prior_reps: Option<&RepresentamenSet>,
) -> Result<Vec<ManifestRecord>, PipelineError> {
    let mut rows = Vec::new();
    let reps = match prior_reps {
        Some(r) => r.clone(),
        None => match generate_representamens(gateway, &cfg.templates, concept, derive_seed(cfg.seed, &concept.lemma, "representamens")) {
            Ok(r) => {
                rows.push(ManifestRecord::Representamens(r.clone()));
                r
            }
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => {
                log::warn!("{}: {e}", concept.lemma);
                rows.extend(styles.iter().map(|&s| ManifestRecord::Attempt(failure_row(&concept.lemma, s, &e))));
                return Ok(rows);
            }
        },
    };
    for &style in styles {
        let seed = derive_seed(cfg.seed, &concept.lemma, style.name());
        let result = compose_description(gateway, &cfg.templates, concept, &reps, style, seed).map(|desc| {
            let params = cfg.render.clone().with_seed(derive_seed(cfg.seed, &concept.lemma, &format!("render:{style}")));
            let img = render_metonymic_image(gateway, images, concept, &desc, &params);
            (desc, img)
        });
        match result {
            Ok((desc, Ok(img))) => {
                let attempt = AttemptRecord {
                    concept: concept.lemma.clone(),
                    style,
                    outcome: Outcome::Success,
                    attempts: desc.attempts,
                    image_id: Some(img.id.clone()),
                    detail: None,
                    leaked: Vec::new(),
                };
                rows.push(ManifestRecord::Description(desc));
                rows.push(ManifestRecord::Image(img));
                rows.push(ManifestRecord::Attempt(attempt));
            }
            Ok((desc, Err(e))) => {
                if e.is_fatal() {
                    return Err(e);
                }
                log::warn!("{} ({style}): {e}", concept.lemma);
                let mut row = failure_row(&concept.lemma, style, &e);
                row.attempts = desc.attempts;
                rows.push(ManifestRecord::Description(desc));
                rows.push(ManifestRecord::Attempt(row));
            }
            Err(e) => {
                if e.is_fatal() {
                    return Err(e);
                }
                log::warn!("{} ({style}): {e}", concept.lemma);
                rows.push(ManifestRecord::Attempt(failure_row(&concept.lemma, style, &e)));
            }
        }
    }
    Ok(rows)
}

/// Runs every retained concept through the requested styles, appending to
/// the store's manifest. Pairs already completed in the manifest are
/// skipped, and representamens recorded earlier are reused.
pub fn run_pipeline(
    gateway: &Gateway,
    store: &CorpusStore,
    concepts: &[Concept],
    cfg: &PipelineConfig,
    clock: &dyn Clock,
) -> Result<RunSummary, PipelineError> {
    if cfg.batch_size == 0 {
        return Err(PipelineError::Precondition("batch_size must be >= 1".into()));
    }
    for cap in [gateway.text_model(), gateway.image_model()] {
        if cap.is_none() {
            return Err(PipelineError::Precondition("gateway needs text and image backends".into()));
        }
    }
    cfg.render.validate().map_err(PipelineError::Precondition)?;
    let mut log: JsonlLog<ManifestEntry> = JsonlLog::open(&store.manifest_path())?;
    let existing = log.read_all()?;
    let mut summary = RunSummary {
        run_id: run_id(cfg.seed),
        ..Default::default()
    };
    if existing.is_empty() {
        log.append(&ManifestEntry {
            ts: clock.now(),
            record: ManifestRecord::Header {
                schema_version: SCHEMA_VERSION,
                run_id: summary.run_id.clone(),
            },
        })?;
    }
    let mut done: BTreeSet<(Lemma, Style)> = BTreeSet::new();
    let mut prior: HashMap<Lemma, RepresentamenSet> = HashMap::new();
    for e in existing {
        match e.record {
            ManifestRecord::Attempt(a) if a.outcome == Outcome::Success => {
                done.insert((a.concept, a.style));
            }
            ManifestRecord::Representamens(r) => {
                prior.entry(r.concept.clone()).or_insert(r);
            }
            _ => {}
        }
    }

    let mut seen = BTreeSet::new();
    let mut work: Vec<(&Concept, Vec<Style>)> = Vec::new();
    for c in concepts {
        if !c.is_retained() {
            summary.skipped_not_retained += 1;
            continue;
        }
        if !seen.insert(&c.lemma) {
            continue;
        }
        summary.concepts += 1;
        let todo: Vec<Style> = cfg.styles.iter().copied().filter(|&s| !done.contains(&(c.lemma.clone(), s))).collect();
        summary.resumed += cfg.styles.len() - todo.len();
        if !todo.is_empty() {
            work.push((c, todo));
        }
    }

    let images = store.images();
    for batch in work.chunks(cfg.batch_size) {
        let results: Vec<Result<Vec<ManifestRecord>, PipelineError>> = batch
            .par_iter()
            .map(|(c, styles)| process_concept(gateway, &images, cfg, c, styles, prior.get(&c.lemma)))
            .collect();
        for rows in results {
            for record in rows? {
                if let ManifestRecord::Attempt(a) = &record {
                    if a.outcome == Outcome::Success {
                        summary.new_images += 1;
                    } else {
                        summary.new_failures += 1;
                        let key = serde_json::to_value(a.outcome).ok().and_then(|v| v.as_str().map(String::from));
                        *summary.failures_by_outcome.entry(key.unwrap_or_default()).or_default() += 1;
                    }
                }
                log.append(&ManifestEntry { ts: clock.now(), record })?;
            }
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Status, Supersense};
    use crate::gateway::mock::{CannedText, ScriptedText};
    use crate::gateway::RetryPolicy;
    use std::sync::Arc;

    fn concept(word: &str) -> Concept {
        let mut c = Concept::new(Lemma::new(word).unwrap(), Supersense::Feeling, 2.0).unwrap();
        assert!(c.set_status(Status::Retained));
        c
    }

    fn lemma(s: &str) -> Lemma {
        Lemma::new(s).unwrap()
    }

    fn text_gateway(b: Arc<dyn crate::gateway::TextBackend>) -> Gateway {
        Gateway::builder().text(b, 1, RetryPolicy::immediate(1)).build()
    }

    #[test]
    fn templates_carry_placeholders() {
        let t = PromptTemplates::default();
        assert!(t.representamen.contains("{word}"));
        let p = t.render_representamen("hope");
        assert!(p.ends_with("Object: hope -> Representamen:"));
        let d = t.render_description(Style::Stylistic, &["a".into(), "b".into()], "hope");
        assert!(d.ends_with("Objects: a, b || Concept Word: hope || Output:"));
        assert!(t.naturalistic.contains("less than 70 words"));
        assert!(t.stylistic.contains("under 60 words"));
    }

    #[test]
    fn parse_examples() {
        let items = parse_representamens(
            "Object: Vacation -> Representamen: Beach, mountains, airplane, suitcase, sun, resort",
            &lemma("vacation"),
        )
        .unwrap();
        assert_eq!(items, ["beach", "mountains", "airplane", "suitcase", "sun", "resort"]);
        assert_eq!(parse_representamens("Representamen: a, a, A, b, c", &lemma("x")).unwrap(), ["a", "b", "c"]);
        assert_eq!(
            parse_representamens("Representamen: brush, Artist, easel, canvas", &lemma("artist")).unwrap(),
            ["brush", "easel", "canvas"]
        );
        assert!(parse_representamens("Representamen: artist, brush", &lemma("artist")).is_err());
        assert_eq!(parse_representamens("a, b, c, d, e, f, g, h, i", &lemma("x")).unwrap().len(), 7);
    }

    #[test]
    fn parse_retries_then_fails() {
        let script = Arc::new(ScriptedText::new("m", ["nonsense", "Representamen: only, two", "Representamen: a, b, c"]));
        let gw = text_gateway(script.clone());
        let r = generate_representamens(&gw, &PromptTemplates::default(), &concept("joy"), 1).unwrap();
        assert_eq!(r.items, ["a", "b", "c"]);
        assert_eq!(script.calls(), 3);

        let gw = text_gateway(Arc::new(CannedText::new("m", "no list here")));
        let err = generate_representamens(&gw, &PromptTemplates::default(), &concept("joy"), 1).unwrap_err();
        assert!(matches!(err, PipelineError::RepresentamenParse { attempts: 3, .. }));
    }

    #[test]
    fn unretained_concept_is_rejected() {
        let c = Concept::new(lemma("rock"), Supersense::Object, 4.9).unwrap();
        let gw = Gateway::all_mock();
        assert!(matches!(
            generate_representamens(&gw, &PromptTemplates::default(), &c, 0),
            Err(PipelineError::Precondition(_))
        ));
    }

    fn reps(word: &str) -> RepresentamenSet {
        RepresentamenSet {
            concept: lemma(word),
            items: vec!["candle".into(), "ribbon".into(), "bench".into()],
            model: "m".into(),
            template_id: "t".into(),
            raw_completion: String::new(),
        }
    }

    #[test]
    fn fail_safe_counts_attempts() {
        let t = PromptTemplates::default();
        let c = concept("joy");
        let gw = text_gateway(Arc::new(ScriptedText::new("m", ["Pure joy.", "Joys abound.", "Output: A candle glows."])));
        let d = compose_description(&gw, &t, &c, &reps("joy"), Style::Naturalistic, 0).unwrap();
        assert_eq!((d.attempts, d.leakage_passed, d.text.as_str()), (3, true, "A candle glows."));
        assert!(d.validate().is_ok());

        let gw = text_gateway(Arc::new(CannedText::new("m", "joy everywhere")));
        match compose_description(&gw, &t, &c, &reps("joy"), Style::Stylistic, 0) {
            Err(PipelineError::LeakageExhausted { attempts, .. }) => {
                assert_eq!(attempts.len(), 5);
                assert_eq!(attempts[0].matched, "joy");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn render_requires_passed_description() {
        let dir = tempfile::tempdir().unwrap();
        let gw = Gateway::all_mock();
        let c = concept("joy");
        let mut d = compose_description(&gw, &PromptTemplates::default(), &c, &reps("joy"), Style::Naturalistic, 0).unwrap();
        let store = ImageStore::new(dir.path());
        let img = render_metonymic_image(&gw, &store, &c, &d, &RenderParams::default().with_seed(9)).unwrap();
        assert_eq!(img.id, crate::store::sha256_hex(&crate::gateway::mock::test_pattern(&d.text, 9)));
        assert_eq!((img.params.inference_steps, img.params.guidance_scale), (35, 7.5));
        assert!(img.validate().is_ok());
        d.leakage_passed = false;
        assert!(matches!(
            render_metonymic_image(&gw, &store, &c, &d, &RenderParams::default()),
            Err(PipelineError::Precondition(_))
        ));
    }

    #[test]
    fn moderation_refusal_becomes_failure_row() {
        let dir = tempfile::tempdir().unwrap();
        let store = CorpusStore::open(dir.path()).unwrap();
        let gw = Gateway::builder()
            .text(Arc::new(crate::gateway::mock::TemplateText::new("t")), 2, RetryPolicy::immediate(1))
            .image(
                Arc::new(crate::gateway::mock::PatternRenderer::new("r").blocking("fractured")),
                2,
                RetryPolicy::immediate(1),
            )
            .build();
        let s = run_pipeline(&gw, &store, &[concept("joy")], &PipelineConfig::default(), &crate::store::FixedClock::from_epoch(0)).unwrap();
        // Stylistic mock descriptions always say "Fractured planes ...".
        assert_eq!((s.new_images, s.new_failures), (1, 1));
        assert_eq!(s.failures_by_outcome["moderation_refusal"], 1);
        assert!(crate::store::verify(&store).is_clean());
    }

    #[test]
    fn both_styles_leaking_gives_two_failure_rows_and_no_images() {
        let dir = tempfile::tempdir().unwrap();
        let store = CorpusStore::open(dir.path()).unwrap();
        let gw = Gateway::builder()
            .text(
                Arc::new(ScriptedText::new("m", ["Representamen: candle, ribbon, bench", "joy joy"])),
                1,
                RetryPolicy::immediate(1),
            )
            .image(Arc::new(crate::gateway::mock::PatternRenderer::new("r")), 1, RetryPolicy::immediate(1))
            .build();
        let s = run_pipeline(&gw, &store, &[concept("joy")], &PipelineConfig::default(), &crate::store::FixedClock::from_epoch(0)).unwrap();
        assert_eq!((s.new_images, s.new_failures), (0, 2));
        assert!(store.images().list().unwrap().is_empty());
    }
}
