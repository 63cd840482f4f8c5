use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::AssociationType;
use crate::gateway::{Gateway, SamplingParams};
use crate::pipeline::{PromptTemplates, Style};
use crate::store::{Clock, FieldError, ImageSource, JsonlLog, Validate};

use super::{parse_choice, render_question, BenchmarkError, MCQItem};

/// One model response, persisted before it is scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub item_id: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed_choice: Option<usize>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub ts: String,
}

impl Validate for EvalRecord {
    fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        if self.response.is_some() == self.error.is_some() {
            errs.push(FieldError::new("response", "exactly one of response and error must be set"));
        }
        if self.parsed_choice.is_some_and(|c| c > 3) {
            errs.push(FieldError::new("parsed_choice", "must be 0..=3"));
        }
        if self.correct && self.parsed_choice.is_none() {
            errs.push(FieldError::new("correct", "an unparsed response cannot be correct"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub model: String,
    pub question_template: String,
    pub sampling: SamplingParams,
    /// Items queried concurrently per batch; results are appended per batch.
    pub batch_size: usize,
}

impl EvalConfig {
    pub fn new(model: &str) -> Self {
        EvalConfig {
            model: model.into(),
            question_template: PromptTemplates::default().question,
            sampling: SamplingParams {
                temperature: 0.0,
                top_p: 1.0,
                repetition_penalty: 1.0,
                max_tokens: 32,
                seed: None,
            },
            batch_size: 32,
        }
    }
}

/// Correct over answered items for one slice.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Slice {
    pub correct: u64,
    pub answered: u64,
}

impl Slice {
    pub fn ratio(&self) -> Option<Ratio<u64>> {
        (self.answered > 0).then(|| Ratio::new(self.correct, self.answered))
    }

    /// Accuracy in percent; `None` means no data.
    pub fn percent(&self) -> Option<f64> {
        self.ratio().map(|r| 100.0 * *r.numer() as f64 / *r.denom() as f64)
    }

    fn add(&mut self, correct: bool) {
        self.answered += 1;
        self.correct += correct as u64;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalResult {
    pub model: String,
    pub items: usize,
    pub overall: Slice,
    pub by_style: BTreeMap<Style, Slice>,
    /// Only items carrying an association label; empty means no data.
    pub by_association: BTreeMap<AssociationType, Slice>,
    /// Answered but not mappable to an option (scored incorrect).
    pub unparsed: u64,
    /// Backend failures, excluded from every denominator.
    pub errored: u64,
    /// Items without any persisted response.
    pub missing: u64,
}

/// Latest record per item, preferring any record with a response.
fn latest(records: &[EvalRecord]) -> HashMap<&str, &EvalRecord> {
    let mut out: HashMap<&str, &EvalRecord> = HashMap::new();
    for r in records {
        match out.get(r.item_id.as_str()) {
            Some(prev) if prev.response.is_some() && r.response.is_none() => {}
            _ => {
                out.insert(&r.item_id, r);
            }
        }
    }
    out
}

/// Aggregates persisted responses against the item key. Correctness is
/// recomputed from `parsed_choice` and the item's answer.
pub fn score(records: &[EvalRecord], items: &[MCQItem]) -> EvalResult {
    let by_item = latest(records);
    let mut res = EvalResult {
        model: records.first().map(|r| r.model.clone()).unwrap_or_default(),
        items: items.len(),
        ..Default::default()
    };
    for item in items {
        let Some(r) = by_item.get(item.item_id.as_str()) else {
            res.missing += 1;
            continue;
        };
        if r.response.is_none() {
            res.errored += 1;
            continue;
        }
        let correct = r.parsed_choice == Some(item.answer_index);
        if r.parsed_choice.is_none() {
            res.unparsed += 1;
        }
        res.overall.add(correct);
        res.by_style.entry(item.style).or_default().add(correct);
        if let Some(a) = item.association_type {
            res.by_association.entry(a).or_default().add(correct);
        }
    }
    res
}

fn query(
    gateway: &Gateway,
    source: &dyn ImageSource,
    cfg: &EvalConfig,
    item: &MCQItem,
    ts: String,
) -> EvalRecord {
    let question = render_question(&cfg.question_template, &item.options);
    let params = cfg.sampling.clone().with_seed(item.seed);
    let outcome = source
        .load(&item.image_id)
        .map_err(|e| e.to_string())
        .and_then(|png| gateway.answer_multimodal(&png, &question, &params).map_err(|e| e.to_string()));
    match outcome {
        Ok(resp) => {
            let parsed = parse_choice(&resp, &item.options);
            EvalRecord {
                item_id: item.item_id.clone(),
                model: cfg.model.clone(),
                correct: parsed == Some(item.answer_index),
                parsed_choice: parsed,
                response: Some(resp),
                error: None,
                ts,
            }
        }
        Err(e) => {
            log::warn!("{}: {e}", item.item_id);
            EvalRecord {
                item_id: item.item_id.clone(),
                model: cfg.model.clone(),
                response: None,
                parsed_choice: None,
                correct: false,
                error: Some(e),
                ts,
            }
        }
    }
}

/// Queries every item not yet answered in `results_path`, persisting each
/// response, then scores everything on file.
pub fn evaluate(
    gateway: &Gateway,
    source: &dyn ImageSource,
    items: &[MCQItem],
    results_path: &Path,
    cfg: &EvalConfig,
    clock: &dyn Clock,
) -> Result<EvalResult, BenchmarkError> {
    if gateway.multimodal_model().is_none() {
        return Err(BenchmarkError::Precondition("no multimodal backend configured".into()));
    }
    if cfg.batch_size == 0 {
        return Err(BenchmarkError::Precondition("batch_size must be >= 1".into()));
    }
    let mut log: JsonlLog<EvalRecord> = JsonlLog::open(results_path)?;
    let answered: BTreeSet<String> = log
        .read_all()?
        .into_iter()
        .filter(|r| r.response.is_some())
        .map(|r| r.item_id)
        .collect();
    let pending: Vec<&MCQItem> = items.iter().filter(|i| !answered.contains(&i.item_id)).collect();
    log::info!("{}: {} answered, {} pending", cfg.model, answered.len(), pending.len());
    for batch in pending.chunks(cfg.batch_size) {
        let recs: Vec<EvalRecord> = batch
            .par_iter()
            .map(|item| query(gateway, source, cfg, item, clock.now()))
            .collect();
        for r in &recs {
            log.append(r)?;
        }
    }
    let mut res = score(&log.read_all()?, items);
    res.model = cfg.model.clone();
    Ok(res)
}
