//! Cross-model agreement on generated representamens.
//!
//! For a pair of models and a concept, every item is embedded, the globally
//! most similar cross pair is matched and removed, and so on until one side
//! runs out. The concept score is the mean matched cosine; a matrix cell is
//! the mean over concepts.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::catalog::Lemma;
use crate::gateway::{Gateway, GatewayError};
use crate::scalar::{cosine, greedy_matching};
use crate::Embedding;

use super::RepresentamenSet;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementMatrix {
    pub models: Vec<String>,
    /// `None` when no concept could be scored for that pair.
    pub matrix: Vec<Vec<Option<f64>>>,
    /// Concepts skipped because one side had no items.
    pub skipped: Vec<(String, String, Lemma)>,
}

/// Deterministic tie order for equal cosines: the unordered string pair
/// first, then the left string.
fn tie_key<'a>(l: &'a str, r: &'a str) -> (&'a str, &'a str, &'a str) {
    let (a, b) = if l <= r { (l, r) } else { (r, l) };
    (a, b, l)
}

/// Greedy matching score for one concept given per-item embeddings.
pub fn greedy_set_similarity(left: &[String], right: &[String], emb: &HashMap<String, Embedding>) -> Option<f64> {
    if left.is_empty() || right.is_empty() {
        return None;
    }
    let weights: Vec<Vec<f64>> = left
        .iter()
        .map(|l| right.iter().map(|r| cosine(&emb[l], &emb[r]) as f64).collect())
        .collect();
    let matched = greedy_matching(&weights, |i, j| tie_key(&left[i], &right[j]));
    Some(matched.iter().map(|m| m.weight).sum::<f64>() / matched.len() as f64)
}

pub fn representamen_agreement(
    gateway: &Gateway,
    sets_by_model: &BTreeMap<String, Vec<RepresentamenSet>>,
) -> Result<AgreementMatrix, GatewayError> {
    let models: Vec<String> = sets_by_model.keys().cloned().collect();
    let by_concept: Vec<BTreeMap<&Lemma, &RepresentamenSet>> = sets_by_model
        .values()
        .map(|sets| sets.iter().map(|s| (&s.concept, s)).collect())
        .collect();
    if let Some(first) = by_concept.first() {
        for (m, other) in models.iter().zip(&by_concept) {
            if other.keys().ne(first.keys()) {
                return Err(GatewayError::Precondition(format!(
                    "model {m} does not cover the same concepts as {}",
                    models[0]
                )));
            }
        }
    }

    let mut texts: Vec<String> = sets_by_model
        .values()
        .flatten()
        .flat_map(|s| s.items.iter().cloned())
        .collect();
    texts.sort();
    texts.dedup();
    let mut emb = HashMap::with_capacity(texts.len());
    for chunk in texts.chunks(64) {
        let vs = gateway.embed_text(chunk)?;
        emb.extend(chunk.iter().cloned().zip(vs));
    }

    let n = models.len();
    let mut matrix = vec![vec![None; n]; n];
    let mut skipped = Vec::new();
    for a in 0..n {
        for b in a..n {
            let mut scores = Vec::new();
            for (concept, left) in &by_concept[a] {
                let right = by_concept[b][concept];
                match greedy_set_similarity(&left.items, &right.items, &emb) {
                    Some(s) => scores.push(s),
                    None => {
                        log::warn!("{}: empty representamen set for {} vs {}", concept, models[a], models[b]);
                        skipped.push((models[a].clone(), models[b].clone(), (*concept).clone()));
                    }
                }
            }
            let cell = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
            matrix[a][b] = cell;
            matrix[b][a] = cell;
        }
    }
    Ok(AgreementMatrix { models, matrix, skipped })
}
