//! Human-in-the-loop annotation: label capture, task assignment, agreement
//! and consensus statistics, moderation exclusion.
//!
//! [`AnnotationStore`] is event sourced. Every submission is appended to
//! `annotations.jsonl`; the in-memory state is the replay of that file, with
//! the latest submission per `(image, annotator)` winning.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Lemma, Supersense};
use crate::pipeline::{GeneratedImage, Style};
use crate::store::{FieldError, JsonlLog, StoreError, Validate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Metonymic,
    NonMetonymic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Graphic,
    Bias,
    Other,
}

impl Flag {
    /// Graphic and bias flags remove the image from item assembly.
    pub fn excludes(self) -> bool {
        matches!(self, Flag::Graphic | Flag::Bias)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociationType {
    Cultural,
    Contextual,
    Symbolic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub annotator: String,
    pub label: Label,
    #[serde(default)]
    pub flags: BTreeSet<Flag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub association_type: Option<AssociationType>,
    #[serde(default)]
    pub timestamp: String,
}

impl Validate for AnnotationRecord {
    fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        if self.image_id.trim().is_empty() {
            errs.push(FieldError::new("image_id", "must be nonempty"));
        }
        if self.annotator.trim().is_empty() {
            errs.push(FieldError::new("annotator", "must be nonempty"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// What the annotator sees: the image and the concept it should evoke.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub image_id: String,
    pub concept: Lemma,
    pub style: Style,
    pub image_url: String,
    /// Images this annotator still has to label under the same filter.
    pub remaining: usize,
}

/// Corpus-side facts about an image that annotation needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub image_id: String,
    pub concept: Lemma,
    pub style: Style,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supersense: Option<Supersense>,
    /// Which generator produced the image (e.g. `semiotic` vs a baseline).
    #[serde(default = "default_pipeline")]
    pub pipeline: String,
}

pub fn default_pipeline() -> String {
    "semiotic".into()
}

impl From<&GeneratedImage> for ImageInfo {
    fn from(img: &GeneratedImage) -> Self {
        ImageInfo {
            image_id: img.id.clone(),
            concept: img.concept.clone(),
            style: img.style,
            supersense: Some(img.supersense),
            pipeline: default_pipeline(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFilter {
    #[serde(default)]
    pub style: Option<Style>,
    #[serde(default)]
    pub supersense: Option<Supersense>,
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("invalid record: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub image_id: String,
    pub annotator: String,
    /// True when this submission replaced an earlier label.
    pub replaced: bool,
    pub excluded: bool,
}

pub struct AnnotationStore {
    images: BTreeMap<String, ImageInfo>,
    current: BTreeMap<(String, String), AnnotationRecord>,
    history: Vec<AnnotationRecord>,
    log: Option<JsonlLog<AnnotationRecord>>,
    labels_per_image: usize,
}

impl AnnotationStore {
    pub fn in_memory(images: impl IntoIterator<Item = ImageInfo>) -> Self {
        AnnotationStore {
            images: images.into_iter().map(|i| (i.image_id.clone(), i)).collect(),
            current: BTreeMap::new(),
            history: Vec::new(),
            log: None,
            labels_per_image: 2,
        }
    }

    /// Opens (or creates) the persisted label log at `path` and replays it.
    pub fn open(images: impl IntoIterator<Item = ImageInfo>, path: &Path) -> Result<Self, AnnotationError> {
        let log = JsonlLog::open(path)?;
        let mut store = AnnotationStore::in_memory(images);
        for rec in log.read_all()? {
            store.apply(rec);
        }
        store.log = Some(log);
        Ok(store)
    }

    pub fn with_labels_per_image(mut self, n: usize) -> Self {
        self.labels_per_image = n.max(1);
        self
    }

    fn apply(&mut self, rec: AnnotationRecord) -> bool {
        self.history.push(rec.clone());
        self.current
            .insert((rec.image_id.clone(), rec.annotator.clone()), rec)
            .is_some()
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageInfo> {
        self.images.values()
    }

    pub fn image(&self, id: &str) -> Option<&ImageInfo> {
        self.images.get(id)
    }

    fn label_count(&self, image_id: &str) -> usize {
        self.current
            .range((image_id.to_string(), String::new())..)
            .take_while(|((img, _), _)| img == image_id)
            .count()
    }

    fn labeled_by(&self, image_id: &str, annotator: &str) -> bool {
        self.current
            .contains_key(&(image_id.to_string(), annotator.to_string()))
    }

    /// Next image `annotator` has not labeled, preferring images with the
    /// fewest labels so far and then the smallest image id. Images that
    /// already have the target number of labels come last.
    pub fn next_task(&self, annotator: &str, filter: &TaskFilter) -> Option<AnnotationTask> {
        let open: Vec<&ImageInfo> = self
            .images
            .values()
            .filter(|i| filter.style.is_none_or(|s| s == i.style))
            .filter(|i| filter.supersense.is_none_or(|s| Some(s) == i.supersense))
            .filter(|i| !self.labeled_by(&i.image_id, annotator))
            .collect();
        let best = open.iter().min_by_key(|i| {
            let n = self.label_count(&i.image_id);
            (n >= self.labels_per_image, n, i.image_id.clone())
        })?;
        Some(AnnotationTask {
            image_id: best.image_id.clone(),
            concept: best.concept.clone(),
            style: best.style,
            image_url: format!("/images/{}", best.image_id),
            remaining: open.len(),
        })
    }

    pub fn submit(&mut self, mut record: AnnotationRecord) -> Result<Ack, AnnotationError> {
        record.validate().map_err(AnnotationError::Invalid)?;
        if !self.images.contains_key(&record.image_id) {
            return Err(AnnotationError::UnknownImage(record.image_id));
        }
        if record.timestamp.is_empty() {
            record.timestamp = chrono::Utc::now().to_rfc3339();
        }
        if let Some(log) = self.log.as_mut() {
            log.append(&record)?;
        }
        let excluded = record.flags.iter().any(|f| f.excludes());
        let ack = Ack {
            image_id: record.image_id.clone(),
            annotator: record.annotator.clone(),
            replaced: false,
            excluded,
        };
        let replaced = self.apply(record);
        Ok(Ack { replaced, ..ack })
    }

    /// Current labels, ordered by `(image id, annotator id)`.
    pub fn records(&self) -> Vec<AnnotationRecord> {
        self.current.values().cloned().collect()
    }

    /// Every submission ever made, including replaced ones, in arrival order.
    pub fn audit_trail(&self) -> &[AnnotationRecord] {
        &self.history
    }

    /// Images carrying a graphic or bias flag from any annotator.
    pub fn excluded_images(&self) -> BTreeSet<String> {
        excluded_images(self.current.values())
    }

    /// Line-delimited JSON export of current labels.
    pub fn export_jsonl(&self) -> String {
        export_jsonl(&self.records())
    }
}

pub fn excluded_images<'a>(records: impl IntoIterator<Item = &'a AnnotationRecord>) -> BTreeSet<String> {
    records
        .into_iter()
        .filter(|r| r.flags.iter().any(|f| f.excludes()))
        .map(|r| r.image_id.clone())
        .collect()
}

pub fn export_jsonl(records: &[AnnotationRecord]) -> String {
    let mut sorted: Vec<&AnnotationRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.image_id, &a.annotator).cmp(&(&b.image_id, &b.annotator)));
    sorted
        .into_iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

pub fn import_jsonl(text: &str) -> Result<Vec<AnnotationRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

fn labels_by_image(records: &[AnnotationRecord]) -> BTreeMap<&str, BTreeMap<&str, Label>> {
    let mut by: BTreeMap<&str, BTreeMap<&str, Label>> = BTreeMap::new();
    for r in records {
        by.entry(&r.image_id).or_default().insert(&r.annotator, r.label);
    }
    by
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Agreement {
    pub matching: u64,
    pub doubly_labeled: u64,
}

impl Agreement {
    pub fn ratio(&self) -> Option<Ratio<u64>> {
        (self.doubly_labeled > 0).then(|| Ratio::new(self.matching, self.doubly_labeled))
    }

    pub fn value(&self) -> Option<f64> {
        self.ratio().map(|r| r.numer().to_owned() as f64 / *r.denom() as f64)
    }
}

/// Raw agreement over images with exactly two annotators: the share whose
/// two labels match. `ratio()` is `None` when no image is doubly labeled.
pub fn raw_agreement(records: &[AnnotationRecord]) -> Agreement {
    let mut matching = 0;
    let mut doubly = 0;
    for labels in labels_by_image(records).values() {
        if labels.len() != 2 {
            continue;
        }
        doubly += 1;
        let mut it = labels.values();
        if it.next() == it.next() {
            matching += 1;
        }
    }
    Agreement {
        matching,
        doubly_labeled: doubly,
    }
}

/// Seeded sample of `n` images stratified by supersense. Each stratum gets
/// its proportional share, rounded by largest remainder (ties to the smaller
/// stratum key); images without a supersense form their own stratum. Returns
/// everything when `n` covers the pool.
pub fn stratified_sample(images: &[ImageInfo], n: usize, seed: u64) -> Vec<ImageInfo> {
    if n >= images.len() {
        return images.to_vec();
    }
    let mut strata: BTreeMap<Option<Supersense>, Vec<&ImageInfo>> = BTreeMap::new();
    for img in images {
        strata.entry(img.supersense).or_default().push(img);
    }
    let total = images.len();
    let mut quota: Vec<(Option<Supersense>, usize, usize)> = strata
        .iter()
        .map(|(k, v)| (*k, v.len() * n / total, (v.len() * n) % total))
        .collect();
    let short = n - quota.iter().map(|q| q.1).sum::<usize>();
    let mut by_rem: Vec<usize> = (0..quota.len()).collect();
    by_rem.sort_by(|&a, &b| quota[b].2.cmp(&quota[a].2).then(a.cmp(&b)));
    for &i in by_rem.iter().take(short) {
        quota[i].1 += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for (key, k, _) in quota {
        let mut pool = strata.remove(&key).unwrap_or_default();
        pool.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        pool.shuffle(&mut rng);
        out.extend(pool.into_iter().take(k).cloned());
    }
    out.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    out
}

/// Consensus label per image: metonymic only when a strict majority of its
/// annotators said metonymic. With two annotators a split is non-metonymic.
pub fn consensus(records: &[AnnotationRecord]) -> BTreeMap<String, Label> {
    labels_by_image(records)
        .into_iter()
        .map(|(img, labels)| {
            let met = labels.values().filter(|&&l| l == Label::Metonymic).count();
            let label = if 2 * met > labels.len() {
                Label::Metonymic
            } else {
                Label::NonMetonymic
            };
            (img.to_string(), label)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Overall,
    ByPipeline,
    BySupersense,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRate {
    pub images: u64,
    pub metonymic: u64,
    pub rate: f64,
}

/// Fraction of consensus-metonymic images per group. Images missing from
/// `images` (or lacking a supersense when grouping by it) are skipped.
pub fn metonymic_rate(
    records: &[AnnotationRecord],
    images: &BTreeMap<String, ImageInfo>,
    grouping: Grouping,
) -> BTreeMap<String, GroupRate> {
    let mut acc: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for (img, label) in consensus(records) {
        let key = match grouping {
            Grouping::Overall => Some("overall".to_string()),
            Grouping::ByPipeline => images.get(&img).map(|i| i.pipeline.clone()),
            Grouping::BySupersense => images
                .get(&img)
                .and_then(|i| i.supersense)
                .map(|s| s.to_string()),
        };
        let Some(key) = key else { continue };
        let e = acc.entry(key).or_default();
        e.0 += 1;
        if label == Label::Metonymic {
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(k, (n, m))| {
            (
                k,
                GroupRate {
                    images: n,
                    metonymic: m,
                    rate: m as f64 / n as f64,
                },
            )
        })
        .collect()
}

/// `(supersense, consensus label)` per image, the input category retention
/// expects.
pub fn supersense_labels(
    records: &[AnnotationRecord],
    images: &BTreeMap<String, ImageInfo>,
) -> Vec<(Supersense, Label)> {
    consensus(records)
        .into_iter()
        .filter_map(|(img, label)| Some((images.get(&img)?.supersense?, label)))
        .collect()
}
