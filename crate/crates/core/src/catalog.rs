//! Concept lexicon ingestion and the two concept filters (concreteness and
//! supersense category), plus the statistics that recompute those filters
//! from annotation feedback.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::Label;
use crate::scalar;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("no lemma appears in both the ratings and the supersense source ({} unmatched)", unmatched.len())]
    EmptyIntersection { unmatched: Vec<Unmatched> },
    #[error("{source_name}: missing header row")]
    MissingHeader { source_name: &'static str },
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
    #[error("cannot estimate crossover: {0}")]
    Crossover(String),
    #[error("unknown supersense {0:?}")]
    UnknownSupersense(String),
    #[error("invalid lemma {0:?}")]
    InvalidLemma(String),
    #[error("invalid concept record: {0}")]
    InvalidConcept(String),
}

/// A normalized noun: trimmed, lowercased, internal whitespace collapsed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Lemma(String);

impl Lemma {
    pub fn new(raw: &str) -> Result<Self, CatalogError> {
        let norm = raw
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase();
        if norm.is_empty() {
            return Err(CatalogError::InvalidLemma(raw.to_string()));
        }
        Ok(Lemma(norm))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Lemma {
    type Error = CatalogError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Lemma::new(&s)
    }
}

impl From<Lemma> for String {
    fn from(l: Lemma) -> String {
        l.0
    }
}

impl fmt::Display for Lemma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Lemma {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

macro_rules! supersenses {
    ($($variant:ident => $name:literal),+ $(,)?) => {
        /// The 26 WordNet noun supersense (lexicographer) classes.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum Supersense {
            $($variant),+
        }

        impl Supersense {
            pub const ALL: [Supersense; 26] = [$(Supersense::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $(Supersense::$variant => $name),+
                }
            }
        }
    };
}

supersenses! {
    Tops => "tops",
    Act => "act",
    Animal => "animal",
    Artifact => "artifact",
    Attribute => "attribute",
    Body => "body",
    Cognition => "cognition",
    Communication => "communication",
    Event => "event",
    Feeling => "feeling",
    Food => "food",
    Group => "group",
    Location => "location",
    Motive => "motive",
    Object => "object",
    Person => "person",
    Phenomenon => "phenomenon",
    Plant => "plant",
    Possession => "possession",
    Process => "process",
    Quantity => "quantity",
    Relation => "relation",
    Shape => "shape",
    State => "state",
    Substance => "substance",
    Time => "time",
}

impl Supersense {
    /// Categories whose annotated metonymic rate exceeded 60%.
    pub const DEFAULT_RETAINED: [Supersense; 14] = [
        Supersense::Act,
        Supersense::Attribute,
        Supersense::Cognition,
        Supersense::Communication,
        Supersense::Event,
        Supersense::Feeling,
        Supersense::Group,
        Supersense::Location,
        Supersense::Motive,
        Supersense::Person,
        Supersense::Possession,
        Supersense::Process,
        Supersense::State,
        Supersense::Time,
    ];
}

impl FromStr for Supersense {
    type Err = CatalogError;

    /// Accepts `feeling`, `noun.feeling` and `noun.Tops` style labels.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_lowercase();
        let t = t.strip_prefix("noun.").unwrap_or(&t);
        Supersense::ALL
            .iter()
            .copied()
            .find(|c| c.name() == t)
            .ok_or_else(|| CatalogError::UnknownSupersense(s.to_string()))
    }
}

impl fmt::Display for Supersense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Concreteness,
    Category,
    Moderation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Candidate,
    Retained,
    Rejected(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum StatusTag {
    Candidate,
    Retained,
    Rejected,
}

/// One catalog line: `{lemma, supersense, concreteness, status, reject_reason?}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConceptRecord {
    lemma: Lemma,
    supersense: Supersense,
    concreteness: f64,
    status: StatusTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reject_reason: Option<RejectReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConceptRecord", into = "ConceptRecord")]
pub struct Concept {
    pub lemma: Lemma,
    pub supersense: Supersense,
    concreteness: f64,
    status: Status,
}

impl Concept {
    pub fn new(lemma: Lemma, supersense: Supersense, concreteness: f64) -> Result<Self, CatalogError> {
        if !(1.0..=5.0).contains(&concreteness) {
            return Err(CatalogError::InvalidConcept(format!(
                "{lemma}: concreteness {concreteness} outside [1, 5]"
            )));
        }
        Ok(Concept {
            lemma,
            supersense,
            concreteness,
            status: Status::Candidate,
        })
    }

    pub fn concreteness(&self) -> f64 {
        self.concreteness
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn is_retained(&self) -> bool {
        self.status == Status::Retained
    }

    /// Moves a candidate to a terminal status. Terminal statuses are final.
    pub fn set_status(&mut self, status: Status) -> bool {
        if self.status != Status::Candidate || status == Status::Candidate {
            return false;
        }
        self.status = status;
        true
    }
}

impl TryFrom<ConceptRecord> for Concept {
    type Error = CatalogError;
    fn try_from(r: ConceptRecord) -> Result<Self, Self::Error> {
        let mut c = Concept::new(r.lemma, r.supersense, r.concreteness)?;
        c.status = match (r.status, r.reject_reason) {
            (StatusTag::Candidate, None) => Status::Candidate,
            (StatusTag::Retained, None) => Status::Retained,
            (StatusTag::Rejected, Some(reason)) => Status::Rejected(reason),
            (tag, reason) => {
                return Err(CatalogError::InvalidConcept(format!(
                    "{}: inconsistent status {tag:?} with reject_reason {reason:?}",
                    c.lemma
                )))
            }
        };
        Ok(c)
    }
}

impl From<Concept> for ConceptRecord {
    fn from(c: Concept) -> Self {
        let (status, reject_reason) = match c.status {
            Status::Candidate => (StatusTag::Candidate, None),
            Status::Retained => (StatusTag::Retained, None),
            Status::Rejected(r) => (StatusTag::Rejected, Some(r)),
        };
        ConceptRecord {
            lemma: c.lemma,
            supersense: c.supersense,
            concreteness: c.concreteness,
            status,
            reject_reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub concreteness_cutoff: f64,
    pub retained_categories: BTreeSet<Supersense>,
    pub retention_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            concreteness_cutoff: 3.5,
            retained_categories: Supersense::DEFAULT_RETAINED.into_iter().collect(),
            retention_threshold: 0.60,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), CatalogError> {
        if !(1.0..=5.0).contains(&self.concreteness_cutoff) {
            return Err(CatalogError::InvalidConfig(format!(
                "concreteness cutoff {} outside [1, 5]",
                self.concreteness_cutoff
            )));
        }
        if !(0.0..=1.0).contains(&self.retention_threshold) {
            return Err(CatalogError::InvalidConfig(format!(
                "retention threshold {} outside [0, 1]",
                self.retention_threshold
            )));
        }
        Ok(())
    }

    /// The threshold as an exact fraction, rounded to nine decimal places so
    /// that `0.60` compares equal to `3/5`.
    pub fn threshold_ratio(&self) -> Ratio<u64> {
        const SCALE: u64 = 1_000_000_000;
        let num = (self.retention_threshold * SCALE as f64).round() as u64;
        Ratio::new(num, SCALE)
    }
}

/// Assigns retained/rejected to every concept. Concreteness is checked
/// before category; both comparisons are strict.
pub fn filter_concepts(concepts: &[Concept], cfg: &FilterConfig) -> Vec<Concept> {
    concepts
        .iter()
        .map(|c| {
            let mut out = c.clone();
            // Re-filtering a previously filtered catalog restarts from candidate.
            out.status = Status::Candidate;
            let status = if !(c.concreteness < cfg.concreteness_cutoff) {
                Status::Rejected(RejectReason::Concreteness)
            } else if !cfg.retained_categories.contains(&c.supersense) {
                Status::Rejected(RejectReason::Category)
            } else {
                Status::Retained
            };
            out.set_status(status);
            out
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Lexicon loading

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmatchedReason {
    MissingSupersense,
    MissingRating,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Unmatched {
    pub lemma: String,
    pub reason: UnmatchedReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowWarning {
    pub source: &'static str,
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LexiconLoad {
    pub concepts: Vec<Concept>,
    pub unmatched: Vec<Unmatched>,
    pub warnings: Vec<RowWarning>,
}

fn detect_delimiter(text: &str) -> u8 {
    let header = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

fn find_column(headers: &csv::StringRecord, needles: &[&str], fallback: usize) -> usize {
    for needle in needles {
        if let Some(i) = headers
            .iter()
            .position(|h| h.trim().to_lowercase() == *needle)
        {
            return i;
        }
    }
    for needle in needles {
        if let Some(i) = headers
            .iter()
            .position(|h| h.trim().to_lowercase().contains(needle))
        {
            return i;
        }
    }
    fallback
}

/// Rows of one source: `(line, lemma, value)`; `value` is `None` when absent.
type SourceRows = Vec<(usize, String, Option<String>)>;

fn read_two_columns(
    text: &str,
    source: &'static str,
    key_names: &[&str],
    value_names: &[&str],
    warnings: &mut Vec<RowWarning>,
) -> Result<SourceRows, CatalogError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(detect_delimiter(text))
        .flexible(true)
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|_| CatalogError::MissingHeader { source_name: source })?
        .clone();
    if headers.is_empty() {
        return Err(CatalogError::MissingHeader { source_name: source });
    }
    let key_col = find_column(&headers, key_names, 0);
    let val_col = find_column(&headers, value_names, if key_col == 0 { 1 } else { 0 });
    let mut rows = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let line = idx + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                warnings.push(RowWarning {
                    source,
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let Some(key) = rec.get(key_col).map(str::trim).filter(|k| !k.is_empty()) else {
            warnings.push(RowWarning {
                source,
                line,
                message: "missing lemma".into(),
            });
            continue;
        };
        let value = rec
            .get(val_col)
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(str::to_string);
        rows.push((line, key.to_string(), value));
    }
    Ok(rows)
}

/// Joins a concreteness-ratings table with a supersense table.
///
/// Both sources are delimited text with a header row (comma or tab, detected
/// from the header). Lemmas present in only one source are reported in
/// [`LexiconLoad::unmatched`]; malformed rows produce warnings with their line
/// number; duplicate lemmas keep the first occurrence.
pub fn load_lexicon(ratings_source: &str, supersense_source: &str) -> Result<LexiconLoad, CatalogError> {
    let mut warnings = Vec::new();
    let ratings = read_two_columns(
        ratings_source,
        "ratings",
        &["word", "lemma", "noun"],
        &["conc.m", "concreteness", "conc", "rating"],
        &mut warnings,
    )?;
    let senses = read_two_columns(
        supersense_source,
        "supersenses",
        &["word", "lemma", "noun"],
        &["supersense", "lexname", "category", "sense"],
        &mut warnings,
    )?;

    let mut sense_map: HashMap<Lemma, Supersense> = HashMap::new();
    let mut sense_order: Vec<Lemma> = Vec::new();
    for (line, key, value) in senses {
        let Ok(lemma) = Lemma::new(&key) else { continue };
        let Some(raw) = value else {
            warnings.push(RowWarning {
                source: "supersenses",
                line,
                message: format!("{lemma}: missing supersense"),
            });
            continue;
        };
        let sense = match raw.parse::<Supersense>() {
            Ok(s) => s,
            Err(e) => {
                warnings.push(RowWarning {
                    source: "supersenses",
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        match sense_map.get(&lemma) {
            Some(prev) if *prev != sense => {
                log::warn!("{lemma}: listed under {prev} and {sense}; keeping {prev}");
                warnings.push(RowWarning {
                    source: "supersenses",
                    line,
                    message: format!("{lemma}: conflicting supersense {sense}, keeping {prev}"),
                });
            }
            Some(_) => {}
            None => {
                sense_map.insert(lemma.clone(), sense);
                sense_order.push(lemma);
            }
        }
    }

    let mut concepts = Vec::new();
    let mut unmatched = Vec::new();
    let mut seen: BTreeSet<Lemma> = BTreeSet::new();
    for (line, key, value) in ratings {
        let Ok(lemma) = Lemma::new(&key) else { continue };
        if !seen.insert(lemma.clone()) {
            log::debug!("{lemma}: duplicate rating row at line {line} ignored");
            warnings.push(RowWarning {
                source: "ratings",
                line,
                message: format!("{lemma}: duplicate row, keeping first occurrence"),
            });
            continue;
        }
        let rating = value.as_deref().and_then(|v| v.parse::<f64>().ok());
        let Some(rating) = rating.filter(|r| (1.0..=5.0).contains(r)) else {
            warnings.push(RowWarning {
                source: "ratings",
                line,
                message: format!("{lemma}: non-numeric or out-of-range rating {value:?}"),
            });
            unmatched.push(Unmatched {
                lemma: lemma.to_string(),
                reason: UnmatchedReason::MissingRating,
            });
            continue;
        };
        match sense_map.get(&lemma) {
            Some(&sense) => concepts.push(Concept::new(lemma, sense, rating)?),
            None => unmatched.push(Unmatched {
                lemma: lemma.to_string(),
                reason: UnmatchedReason::MissingSupersense,
            }),
        }
    }
    for lemma in sense_order {
        if !seen.contains(&lemma) {
            unmatched.push(Unmatched {
                lemma: lemma.to_string(),
                reason: UnmatchedReason::MissingRating,
            });
        }
    }

    if concepts.is_empty() {
        return Err(CatalogError::EmptyIntersection { unmatched });
    }
    Ok(LexiconLoad {
        concepts,
        unmatched,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Category retention

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CategoryStats {
    pub n_annotated: u64,
    pub n_metonymic: u64,
    /// `None` when nothing was annotated in this category.
    #[serde(serialize_with = "serialize_rate")]
    pub rate: Option<Ratio<u64>>,
}

fn serialize_rate<S: serde::Serializer>(r: &Option<Ratio<u64>>, s: S) -> Result<S::Ok, S::Error> {
    match r {
        Some(r) => s.serialize_f64(r.to_f64().unwrap_or(f64::NAN)),
        None => s.serialize_str("no data"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CategoryRetentionReport {
    pub per_category: BTreeMap<Supersense, CategoryStats>,
    pub retained: BTreeSet<Supersense>,
}

/// Per-supersense metonymic rate from annotation labels, retaining categories
/// whose rate strictly exceeds the configured threshold.
pub fn category_retention(annotations: &[(Supersense, Label)], cfg: &FilterConfig) -> CategoryRetentionReport {
    let mut counts: BTreeMap<Supersense, (u64, u64)> =
        Supersense::ALL.iter().map(|&s| (s, (0, 0))).collect();
    for &(sense, label) in annotations {
        let e = counts.entry(sense).or_default();
        e.0 += 1;
        if label == Label::Metonymic {
            e.1 += 1;
        }
    }
    let threshold = cfg.threshold_ratio();
    let mut retained = BTreeSet::new();
    let per_category = counts
        .into_iter()
        .map(|(sense, (n, m))| {
            let rate = (n > 0).then(|| Ratio::new(m, n));
            if rate.is_some_and(|r| r > threshold) {
                retained.insert(sense);
            }
            (
                sense,
                CategoryStats {
                    n_annotated: n,
                    n_metonymic: m,
                    rate,
                },
            )
        })
        .collect();
    CategoryRetentionReport {
        per_category,
        retained,
    }
}

// ---------------------------------------------------------------------------
// Concreteness crossover

pub const CROSSOVER_GRID_POINTS: usize = 256;

#[derive(Debug, Clone, Serialize)]
pub struct DensityCurve<T> {
    pub label: Label,
    pub bandwidth: T,
    pub samples: usize,
    pub density: Vec<T>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossoverReport<T> {
    pub grid: Vec<T>,
    pub grid_spacing: T,
    pub metonymic: DensityCurve<T>,
    pub non_metonymic: DensityCurve<T>,
    pub metonymic_mode: T,
    /// `None` when the non-metonymic curve never rises above the metonymic
    /// one to the right of the metonymic mode.
    pub crossover: Option<T>,
}

/// Kernel density of concreteness per label on a 256-point grid over [1, 5]
/// (Gaussian kernel, Silverman bandwidth) and the first grid point at or past
/// the metonymic mode where non-metonymic density is strictly higher.
pub fn concreteness_crossover<T>(annotated: &[(T, Label)]) -> Result<CrossoverReport<T>, CatalogError>
where
    T: Float + FromPrimitive,
{
    let c = |v: f64| T::from_f64(v).expect("representable constant");
    let split = |want: Label| -> Vec<T> {
        annotated
            .iter()
            .filter(|(_, l)| *l == want)
            .map(|(x, _)| *x)
            .collect()
    };
    let met = split(Label::Metonymic);
    let non = split(Label::NonMetonymic);
    if met.len() < 2 || non.len() < 2 {
        return Err(CatalogError::Crossover(format!(
            "need at least two samples per label (metonymic {}, non-metonymic {})",
            met.len(),
            non.len()
        )));
    }
    let grid = scalar::uniform_grid(c(1.0), c(5.0), CROSSOVER_GRID_POINTS);
    let spacing = grid[1] - grid[0];
    let curve = |samples: &[T], label| {
        let h = scalar::silverman_bandwidth(samples, spacing);
        DensityCurve {
            label,
            bandwidth: h,
            samples: samples.len(),
            density: grid
                .iter()
                .map(|&x| scalar::gaussian_kde_at(samples, h, x))
                .collect(),
        }
    };
    let met_curve = curve(&met, Label::Metonymic);
    let non_curve = curve(&non, Label::NonMetonymic);
    let mode_idx = met_curve
        .density
        .iter()
        .enumerate()
        .fold(0, |best, (i, &d)| if d > met_curve.density[best] { i } else { best });
    let crossover = (mode_idx..grid.len())
        .find(|&i| non_curve.density[i] > met_curve.density[i])
        .map(|i| grid[i]);
    Ok(CrossoverReport {
        metonymic_mode: grid[mode_idx],
        grid_spacing: spacing,
        grid,
        metonymic: met_curve,
        non_metonymic: non_curve,
        crossover,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn concept(lemma: &str, sense: Supersense, conc: f64) -> Concept {
        Concept::new(Lemma::new(lemma).unwrap(), sense, conc).unwrap()
    }

    #[test]
    fn lemma_normalization() {
        assert_eq!(Lemma::new("  Ice   Cream ").unwrap().as_str(), "ice cream");
        assert!(Lemma::new("   ").is_err());
    }

    #[test]
    fn supersense_parsing() {
        assert_eq!("noun.feeling".parse::<Supersense>().unwrap(), Supersense::Feeling);
        assert_eq!("noun.Tops".parse::<Supersense>().unwrap(), Supersense::Tops);
        assert!("verb.motion".parse::<Supersense>().is_err());
        assert_eq!(Supersense::ALL.len(), 26);
    }

    #[test]
    fn single_row_join() {
        let load = load_lexicon("word,concreteness\nartist,2.8\n", "word\tsupersense\nartist\tperson\n").unwrap();
        assert_eq!(load.concepts, vec![concept("artist", Supersense::Person, 2.8)]);
        assert!(load.unmatched.is_empty());
    }

    #[test]
    fn empty_join_reports_unmatched() {
        let err = load_lexicon("word,concreteness\ntable,?\n", "word,supersense\n").unwrap_err();
        match err {
            CatalogError::EmptyIntersection { unmatched } => assert_eq!(unmatched.len(), 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn brysbaert_style_header_and_duplicates() {
        let ratings = "Word,Bigram,Conc.M,Conc.SD\nhope,0,1.6,1.0\nhope,0,4.0,1.0\nbogus,0,abc,1\n";
        let senses = "lemma,lexname\nhope,noun.feeling\nhope,noun.state\nwish,noun.feeling\n";
        let load = load_lexicon(ratings, senses).unwrap();
        assert_eq!(load.concepts, vec![concept("hope", Supersense::Feeling, 1.6)]);
        let lines: Vec<_> = load.warnings.iter().map(|w| (w.source, w.line)).collect();
        assert!(lines.contains(&("ratings", 3)));
        assert!(lines.contains(&("ratings", 4)));
        assert!(lines.contains(&("supersenses", 3)));
        let missing: Vec<_> = load.unmatched.iter().map(|u| u.lemma.as_str()).collect();
        assert_eq!(missing, vec!["bogus", "wish"]);
    }

    #[test]
    fn concreteness_boundary_is_strict() {
        let cfg = FilterConfig::default();
        let out = filter_concepts(
            &[
                concept("hope", Supersense::Feeling, 1.6),
                concept("hope", Supersense::Feeling, 3.5),
                concept("hope", Supersense::Feeling, 3.4999),
                concept("bonefish", Supersense::Animal, 3.0),
                concept("table", Supersense::Artifact, 4.9),
            ],
            &cfg,
        );
        let st: Vec<_> = out.iter().map(Concept::status).collect();
        assert_eq!(
            st,
            vec![
                Status::Retained,
                Status::Rejected(RejectReason::Concreteness),
                Status::Retained,
                Status::Rejected(RejectReason::Category),
                Status::Rejected(RejectReason::Concreteness),
            ]
        );
    }

    #[test]
    fn status_transitions_only_from_candidate() {
        let mut c = concept("hope", Supersense::Feeling, 1.6);
        assert!(c.set_status(Status::Retained));
        assert!(!c.set_status(Status::Rejected(RejectReason::Moderation)));
        assert_eq!(c.status(), Status::Retained);
    }

    #[test]
    fn catalog_line_format() {
        let mut c = concept("hope", Supersense::Feeling, 3.9);
        c.set_status(Status::Rejected(RejectReason::Concreteness));
        let line = serde_json::to_string(&c).unwrap();
        assert_eq!(
            line,
            r#"{"lemma":"hope","supersense":"feeling","concreteness":3.9,"status":"rejected","reject_reason":"concreteness"}"#
        );
        let back: Concept = serde_json::from_str(&line).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<Concept>(
            r#"{"lemma":"hope","supersense":"feeling","concreteness":3.9,"status":"retained","reject_reason":"category"}"#
        )
        .is_err());
    }

    fn labels(sense: Supersense, met: u64, total: u64) -> Vec<(Supersense, Label)> {
        (0..total)
            .map(|i| (sense, if i < met { Label::Metonymic } else { Label::NonMetonymic }))
            .collect()
    }

    #[test]
    fn retention_boundary_is_strict() {
        let cfg = FilterConfig::default();
        let mut ann = labels(Supersense::Group, 602, 1000);
        ann.extend(labels(Supersense::Act, 795, 1000));
        ann.extend(labels(Supersense::Time, 600, 1000));
        let report = category_retention(&ann, &cfg);
        assert!(report.retained.contains(&Supersense::Group));
        assert!(report.retained.contains(&Supersense::Act));
        assert!(!report.retained.contains(&Supersense::Time));
        assert_eq!(report.per_category[&Supersense::Act].rate, Some(Ratio::new(795, 1000)));
        assert_eq!(report.per_category[&Supersense::Body].rate, None);
        assert!(!report.retained.contains(&Supersense::Body));
    }

    #[test]
    fn crossover_requires_both_labels() {
        let data = [(2.0f64, Label::Metonymic), (2.1, Label::Metonymic)];
        assert!(concreteness_crossover(&data).is_err());
    }

    #[test]
    fn crossover_separated_point_masses() {
        let mut data = vec![(2.0f64, Label::Metonymic); 10];
        data.extend(vec![(4.0f64, Label::NonMetonymic); 10]);
        let r = concreteness_crossover(&data).unwrap();
        let x = r.crossover.expect("crossover");
        assert!(x > 2.0 && x < 4.0, "{x}");
        assert!(r.metonymic.bandwidth > 0.0);
    }

    #[test]
    fn crossover_absent_for_identical_distributions() {
        let xs = [1.5f64, 2.0, 2.5, 3.0, 3.5];
        let data: Vec<_> = xs
            .iter()
            .flat_map(|&x| [(x, Label::Metonymic), (x, Label::NonMetonymic)])
            .collect();
        assert!(concreteness_crossover(&data).unwrap().crossover.is_none());
    }
}
