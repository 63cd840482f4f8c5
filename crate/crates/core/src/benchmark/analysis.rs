//! Free-form concept prediction and embedding-similarity summaries.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::catalog::Lemma;
use crate::gateway::{Gateway, SamplingParams};
use crate::pipeline::{GeneratedImage, Style};
use crate::scalar::{cosine, mean};
use crate::store::ImageSource;

use super::BenchmarkError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub word: String,
    pub cosine_to_gold: f64,
}

/// First word of a free-form answer, lowercased and stripped of punctuation.
fn first_word(raw: &str) -> String {
    raw.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .find(|w| !w.is_empty())
        .unwrap_or_default()
}

/// Asks the multimodal model which concept the image evokes and compares
/// its one-word answer to the gold lemma in text-embedding space.
pub fn predict_concept(
    gateway: &Gateway,
    png: &[u8],
    gold: &Lemma,
    prompt: &str,
    params: &SamplingParams,
) -> Result<Prediction, BenchmarkError> {
    let raw = gateway.answer_multimodal(png, prompt.trim_end(), params)?;
    let word = first_word(&raw);
    if word.is_empty() {
        return Err(BenchmarkError::Precondition(format!("no word in response {raw:?}")));
    }
    let vs = gateway.embed_text(&[word.clone(), gold.as_str().to_string()])?;
    let cos = if vs[0] == vs[1] { 1.0 } else { cosine(&vs[0], &vs[1]) as f64 };
    Ok(Prediction {
        word,
        cosine_to_gold: cos,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub width: f64,
    pub counts: Vec<u64>,
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Histogram {
    /// Bins of `width` aligned to multiples of `width`.
    pub fn new(values: &[f64], width: f64) -> Option<Self> {
        if values.is_empty() || !(width > 0.0) {
            return None;
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = (min / width).floor() * width;
        let bins = (((max - lo) / width).floor() as usize) + 1;
        let mut counts = vec![0; bins];
        for v in values {
            let i = (((v - lo) / width).floor() as usize).min(bins - 1);
            counts[i] += 1;
        }
        Some(Histogram {
            lo,
            width,
            counts,
            n: values.len(),
            mean: mean(values).expect("nonempty"),
            min,
            max,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityReport {
    /// Joint image–concept scores, one per image.
    pub concept_image: Histogram,
    /// Mean image–image cosine over (naturalistic, stylistic) pairs of the
    /// same concept; `None` when no concept has both.
    pub style_pair_mean: Option<f64>,
    pub style_pairs: usize,
}

pub fn similarity_reports(
    gateway: &Gateway,
    source: &dyn ImageSource,
    images: &[GeneratedImage],
    bin_width: f64,
) -> Result<SimilarityReport, BenchmarkError> {
    if images.is_empty() {
        return Err(BenchmarkError::Precondition("corpus has no images".into()));
    }
    let mut scores = Vec::with_capacity(images.len());
    let mut by_concept: BTreeMap<&Lemma, BTreeMap<Style, &GeneratedImage>> = BTreeMap::new();
    for img in images {
        let png = source.load(&img.id)?;
        scores.push(gateway.joint_similarity(&png, img.concept.as_str())? as f64);
        by_concept.entry(&img.concept).or_default().entry(img.style).or_insert(img);
    }
    let mut pair_cos = Vec::new();
    for styles in by_concept.values() {
        if let (Some(n), Some(s)) = (styles.get(&Style::Naturalistic), styles.get(&Style::Stylistic)) {
            let a = gateway.embed_image(&source.load(&n.id)?)?;
            let b = gateway.embed_image(&source.load(&s.id)?)?;
            pair_cos.push(if a == b { 1.0 } else { cosine(&a, &b) as f64 });
        }
    }
    Ok(SimilarityReport {
        concept_image: Histogram::new(&scores, bin_width).expect("nonempty"),
        style_pair_mean: mean(&pair_cos),
        style_pairs: pair_cos.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bins() {
        let h = Histogram::new(&[20.1, 22.4, 22.6, 24.9], 1.0).unwrap();
        assert_eq!(h.lo, 20.0);
        assert_eq!(h.counts, vec![1, 0, 2, 0, 1]);
        assert_eq!(h.counts.iter().sum::<u64>(), 4);
        assert!(Histogram::new(&[], 1.0).is_none());
    }

    #[test]
    fn first_word_strips_noise() {
        assert_eq!(first_word("  \"Freedom.\" because"), "freedom");
        assert_eq!(first_word("..."), "");
    }
}
