//! Multiple-choice items, model evaluation and scoring.

mod analysis;
mod eval;
pub mod reference;
mod report;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotation::AssociationType;
use crate::catalog::Lemma;
use crate::distractor::{DistractorCandidate, DistractorSet};
use crate::gateway::GatewayError;
use crate::pipeline::{GeneratedImage, Style};
use crate::store::{FieldError, StoreError, Validate};

pub use analysis::{predict_concept, similarity_reports, Histogram, Prediction, SimilarityReport};
pub use eval::{evaluate, score, EvalConfig, EvalRecord, EvalResult, Slice};
pub use report::{render_json, render_markdown};

pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("cannot build item: {0}")]
    Construction(String),
    #[error("{0}")]
    Precondition(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCQItem {
    pub item_id: String,
    pub image_id: String,
    pub concept: Lemma,
    pub options: Vec<Lemma>,
    pub answer_index: usize,
    pub style: Style,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub association_type: Option<AssociationType>,
    /// Per option, in presentation order; `None` marks the target.
    pub provenance: Vec<Option<DistractorCandidate>>,
    pub seed: u64,
}

impl Validate for MCQItem {
    fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        if self.options.len() != 4 {
            errs.push(FieldError::new("options", "exactly 4 required"));
        }
        if self.options.iter().collect::<BTreeSet<_>>().len() != self.options.len() {
            errs.push(FieldError::new("options", "must be pairwise distinct"));
        }
        if self.options.get(self.answer_index) != Some(&self.concept) {
            errs.push(FieldError::new("answer_index", "does not point at the target"));
        }
        if self.options.iter().filter(|o| **o == self.concept).count() != 1 {
            errs.push(FieldError::new("options", "target must appear exactly once"));
        }
        if self.provenance.len() != self.options.len() {
            errs.push(FieldError::new("provenance", "one entry per option required"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Item seed derived from a run seed and the image it is built on.
pub fn item_seed(run_seed: u64, image_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(image_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Shuffles `[target] + distractors` with a seeded uniform permutation.
pub fn assemble_item(image: &GeneratedImage, distractors: &DistractorSet, seed: u64) -> Result<MCQItem, BenchmarkError> {
    if distractors.distractors.len() != 3 {
        return Err(BenchmarkError::Construction(format!(
            "{} distractors, 3 required",
            distractors.distractors.len()
        )));
    }
    if distractors.target != image.concept {
        return Err(BenchmarkError::Construction("distractor set is for another concept".into()));
    }
    let mut slots: Vec<(Lemma, Option<DistractorCandidate>)> = vec![(image.concept.clone(), None)];
    slots.extend(distractors.distractors.iter().map(|d| (d.lemma.clone(), Some(d.clone()))));
    let distinct: BTreeSet<&Lemma> = slots.iter().map(|s| &s.0).collect();
    if distinct.len() != 4 {
        return Err(BenchmarkError::Construction("duplicate options".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    slots.shuffle(&mut rng);
    let answer_index = slots.iter().position(|s| s.1.is_none()).expect("target present");
    let (options, provenance) = slots.into_iter().unzip();
    Ok(MCQItem {
        item_id: format!("item-{}", &image.id[..16.min(image.id.len())]),
        image_id: image.id.clone(),
        concept: image.concept.clone(),
        options,
        answer_index,
        style: image.style,
        association_type: None,
        provenance,
        seed,
    })
}

/// The question shown with an item's image.
pub fn render_question(template: &str, options: &[Lemma]) -> String {
    let mut q = template.trim_end().to_string();
    for (ph, opt) in ["{a}", "{b}", "{c}", "{d}"].iter().zip(options) {
        q = q.replace(ph, opt.as_str());
    }
    q
}

fn letter_index(c: char) -> Option<usize> {
    LETTERS.iter().position(|l| l.eq_ignore_ascii_case(&c))
}

/// Accepts a letter at `rest`'s start if it is bracketed, followed by
/// punctuation or the end, or uppercase and followed by whitespace. A
/// lowercase letter followed by a word ("a dog") is an article, not a choice.
fn letter_at(rest: &str) -> Option<usize> {
    let mut chars = rest.chars().peekable();
    let bracketed = matches!(chars.peek(), Some('(' | '['));
    if bracketed {
        chars.next();
    }
    let c = chars.next()?;
    let idx = letter_index(c)?;
    let next = chars.next();
    let ok = match next {
        None => true,
        Some(')' | ']') => true,
        Some(_) if bracketed => false,
        Some('.' | ':' | ',' | ';' | '!') => true,
        Some(n) if n.is_whitespace() => c.is_ascii_uppercase(),
        Some(_) => false,
    };
    ok.then_some(idx)
}

/// Maps a free-text response to an option index. Precedence: a leading
/// letter, then an "answer is X" phrase, then a unique whole-word mention of
/// one option. Anything else — including mentions of several options — is
/// unparsed (`None`).
pub fn parse_choice(raw: &str, options: &[Lemma]) -> Option<usize> {
    let t = raw.trim().trim_start_matches(['*', '"', '\'']);
    if let Some(i) = letter_at(t).filter(|&i| i < options.len()) {
        return Some(i);
    }
    static ANSWER: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let re = ANSWER.get_or_init(|| Regex::new(r"(?i)\banswer\s*(?:is|:)\s*(?:option\s+|letter\s+)?").expect("valid regex"));
    for m in re.find_iter(t) {
        if let Some(i) = letter_at(&t[m.end()..]).filter(|&i| i < options.len()) {
            return Some(i);
        }
    }
    let lower = t.to_lowercase();
    let hits: Vec<usize> = options
        .iter()
        .enumerate()
        .filter(|(_, o)| {
            let pat = format!(r"\b{}\b", regex::escape(o.as_str()));
            Regex::new(&pat).is_ok_and(|r| r.is_match(&lower))
        })
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [one] => Some(*one),
        _ => None,
    }
}
