//! Distractor construction: visual neighbours from image embeddings plus
//! semantic neighbours from the knowledge graph, with synonym removal and a
//! similarity ceiling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Concept, Lemma};
use crate::gateway::{Gateway, GatewayError};
use crate::graph::{path_holds, related_terms, synonym_set, two_step_paths, GraphError, GraphPath, KnowledgeGraph};
use crate::pipeline::GeneratedImage;
use crate::scalar::cosine;
use crate::store::{FieldError, ImageSource, StoreError, Validate};
use crate::Embedding;

pub const DEFAULT_TAU_HIGH: f64 = 0.85;

#[derive(Debug, Error)]
pub enum DistractorError {
    #[error("invalid distractor config: {0}")]
    Config(String),
    #[error("only {found} distractors for {target} after backfill")]
    Underfilled { target: Lemma, found: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Visual,
    Semantic,
    /// Retained catalog concept used when both other sources run dry.
    Catalog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    Visual { image_cosine: f64, image_id: String },
    Semantic { path: GraphPath },
    Catalog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorCandidate {
    pub lemma: Lemma,
    pub source: Source,
    pub evidence: Evidence,
    /// Text-embedding cosine to the target lemma (the band filter's input).
    pub text_cosine: f64,
}

/// The three distractors chosen for one target image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorSet {
    pub target: Lemma,
    pub image_id: String,
    pub distractors: Vec<DistractorCandidate>,
}

impl Validate for DistractorSet {
    fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        if self.distractors.len() != 3 {
            errs.push(FieldError::new("distractors", "exactly 3 required"));
        }
        let mut seen = BTreeSet::new();
        for d in &self.distractors {
            if d.lemma == self.target {
                errs.push(FieldError::new("distractors", "target used as a distractor"));
            }
            if !seen.insert(&d.lemma) {
                errs.push(FieldError::new("distractors", &format!("duplicate {}", d.lemma)));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistractorConfig {
    pub visual: usize,
    pub semantic: usize,
    pub tau_high: f64,
    /// Visual neighbours retrieved before filtering.
    pub k_visual: usize,
    /// Restrict the visual pool to images of the target's style.
    pub same_style_pool: bool,
}

impl Default for DistractorConfig {
    fn default() -> Self {
        DistractorConfig {
            visual: 1,
            semantic: 2,
            tau_high: DEFAULT_TAU_HIGH,
            k_visual: 10,
            same_style_pool: true,
        }
    }
}

impl DistractorConfig {
    pub fn validate(&self) -> Result<(), DistractorError> {
        if self.visual + self.semantic != 3 {
            return Err(DistractorError::Config(format!(
                "mix must total 3 distractors, got {}v{}s",
                self.visual, self.semantic
            )));
        }
        if !(self.tau_high > 0.0 && self.tau_high <= 1.0) {
            return Err(DistractorError::Config(format!("tau_high must be in (0, 1], got {}", self.tau_high)));
        }
        Ok(())
    }

    /// Parses a mix such as `1v2s`.
    pub fn with_mix(mut self, mix: &str) -> Result<Self, DistractorError> {
        let bad = || DistractorError::Config(format!("mix {mix:?} is not of the form <n>v<m>s"));
        let (v, rest) = mix.split_once('v').ok_or_else(bad)?;
        let s = rest.strip_suffix('s').ok_or_else(bad)?;
        self.visual = usize::from_str(v).map_err(|_| bad())?;
        self.semantic = usize::from_str(s).map_err(|_| bad())?;
        self.validate()?;
        Ok(self)
    }
}

/// Embedding memo keyed by image id or text, shared across items.
#[derive(Default)]
pub struct EmbeddingCache {
    images: Mutex<HashMap<String, Embedding>>,
    texts: Mutex<HashMap<String, Embedding>>,
}

impl EmbeddingCache {
    pub fn image(&self, gateway: &Gateway, source: &dyn ImageSource, id: &str) -> Result<Embedding, DistractorError> {
        if let Some(v) = self.images.lock().expect("poisoned").get(id) {
            return Ok(v.clone());
        }
        let v = gateway.embed_image(&source.load(id)?)?;
        self.images.lock().expect("poisoned").insert(id.to_string(), v.clone());
        Ok(v)
    }

    pub fn texts(&self, gateway: &Gateway, texts: &[String]) -> Result<Vec<Embedding>, DistractorError> {
        let missing: Vec<String> = {
            let memo = self.texts.lock().expect("poisoned");
            let mut m: Vec<String> = texts.iter().filter(|t| !memo.contains_key(*t)).cloned().collect();
            m.sort();
            m.dedup();
            m
        };
        for chunk in missing.chunks(64) {
            let vs = gateway.embed_text(chunk)?;
            self.texts.lock().expect("poisoned").extend(chunk.iter().cloned().zip(vs));
        }
        let memo = self.texts.lock().expect("poisoned");
        Ok(texts.iter().map(|t| memo[t].clone()).collect())
    }
}

/// Cosine with exact-duplicate embeddings pinned to 1.
fn text_cosine(a: &Embedding, b: &Embedding) -> f64 {
    if a == b {
        1.0
    } else {
        cosine(a, b) as f64
    }
}

/// Top-`k` concepts by best image cosine to the target. Images of the
/// target's own concept are ignored; ties go to the lexicographically
/// smaller lemma.
pub fn visual_neighbors(
    gateway: &Gateway,
    cache: &EmbeddingCache,
    source: &dyn ImageSource,
    target: &GeneratedImage,
    pool: &[GeneratedImage],
    k: usize,
) -> Result<Vec<(Lemma, f64, String)>, DistractorError> {
    let t = cache.image(gateway, source, &target.id)?;
    let mut best: BTreeMap<&Lemma, (f64, &str)> = BTreeMap::new();
    for img in pool.iter().filter(|i| i.concept != target.concept) {
        let v = cache.image(gateway, source, &img.id)?;
        let c = cosine(&t, &v) as f64;
        let e = best.entry(&img.concept).or_insert((c, &img.id));
        if c > e.0 {
            *e = (c, &img.id);
        }
    }
    let mut ranked: Vec<(Lemma, f64, String)> =
        best.into_iter().map(|(l, (c, id))| (l.clone(), c, id.to_string())).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandResult {
    pub kept: Vec<(Lemma, f64)>,
    pub removed: Vec<(Lemma, f64)>,
}

/// Drops candidates whose text cosine to the target exceeds `tau_high`;
/// exact-duplicate embeddings count as cosine 1 and are always dropped.
pub fn similarity_band_filter(
    gateway: &Gateway,
    cache: &EmbeddingCache,
    candidates: &BTreeSet<Lemma>,
    target: &Lemma,
    tau_high: f64,
) -> Result<BandResult, DistractorError> {
    if !(tau_high > 0.0 && tau_high <= 1.0) {
        return Err(DistractorError::Config(format!("tau_high must be in (0, 1], got {tau_high}")));
    }
    let mut texts = vec![target.as_str().to_string()];
    texts.extend(candidates.iter().map(|c| c.as_str().to_string()));
    let vs = cache.texts(gateway, &texts)?;
    let mut out = BandResult {
        kept: Vec::new(),
        removed: Vec::new(),
    };
    for (c, v) in candidates.iter().zip(&vs[1..]) {
        let cos = text_cosine(&vs[0], v);
        if cos > tau_high || cos >= 1.0 {
            out.removed.push((c.clone(), cos));
        } else {
            out.kept.push((c.clone(), cos));
        }
    }
    Ok(out)
}

/// Everything `build_distractors` draws from.
pub struct DistractorContext<'a> {
    pub gateway: &'a Gateway,
    pub graph: &'a dyn KnowledgeGraph,
    pub images: &'a dyn ImageSource,
    /// Candidate images for visual neighbours (already excluding flagged ones).
    pub pool: &'a [GeneratedImage],
    /// Retained concepts, the last-resort backfill.
    pub catalog: &'a [Concept],
    pub cache: EmbeddingCache,
}

fn lemma_set(xs: impl IntoIterator<Item = String>) -> BTreeSet<Lemma> {
    xs.into_iter().filter_map(|s| Lemma::new(&s).ok()).collect()
}

pub fn build_distractors(
    ctx: &DistractorContext<'_>,
    target: &Concept,
    target_image: &GeneratedImage,
    cfg: &DistractorConfig,
) -> Result<DistractorSet, DistractorError> {
    cfg.validate()?;
    let tl = &target.lemma;

    // (1) gather
    let pool: Vec<GeneratedImage> = ctx
        .pool
        .iter()
        .filter(|i| !cfg.same_style_pool || i.style == target_image.style)
        .filter(|i| i.id != target_image.id)
        .cloned()
        .collect();
    let visual = visual_neighbors(ctx.gateway, &ctx.cache, ctx.images, target_image, &pool, cfg.k_visual)?;
    let direct = lemma_set(related_terms(ctx.graph, tl.as_str())?);
    let two_step: BTreeMap<Lemma, String> = two_step_paths(ctx.graph, tl.as_str())?
        .into_iter()
        .filter_map(|(c, via)| Some((Lemma::new(&c).ok()?, via)))
        .collect();

    // (2) synonyms
    let mut banned = lemma_set(synonym_set(ctx.graph, tl.as_str())?);
    banned.insert(tl.clone());

    // (3) similarity ceiling over every candidate
    let mut all: BTreeSet<Lemma> = visual.iter().map(|v| v.0.clone()).collect();
    all.extend(direct.iter().cloned());
    all.extend(two_step.keys().cloned());
    all.retain(|c| !banned.contains(c));
    let band = similarity_band_filter(ctx.gateway, &ctx.cache, &all, tl, cfg.tau_high)?;
    let kept: BTreeMap<Lemma, f64> = band.kept.into_iter().collect();

    // (4) ranked lists per source
    let visual_list: Vec<DistractorCandidate> = visual
        .iter()
        .filter_map(|(l, ic, id)| {
            Some(DistractorCandidate {
                lemma: l.clone(),
                source: Source::Visual,
                evidence: Evidence::Visual {
                    image_cosine: *ic,
                    image_id: id.clone(),
                },
                text_cosine: *kept.get(l)?,
            })
        })
        .collect();
    let by_cosine = |a: &DistractorCandidate, b: &DistractorCandidate| {
        b.text_cosine.total_cmp(&a.text_cosine).then_with(|| a.lemma.cmp(&b.lemma))
    };
    let semantic = |path: &dyn Fn(&Lemma) -> Option<GraphPath>, from: &mut dyn Iterator<Item = &Lemma>| {
        let mut v: Vec<DistractorCandidate> = from
            .filter_map(|l| {
                Some(DistractorCandidate {
                    lemma: l.clone(),
                    source: Source::Semantic,
                    evidence: Evidence::Semantic { path: path(l)? },
                    text_cosine: *kept.get(l)?,
                })
            })
            .collect();
        v.sort_by(by_cosine);
        v
    };
    let mut semantic_list = semantic(
        &|l| Some(GraphPath::TwoStep { via: two_step.get(l)?.clone() }),
        &mut two_step.keys(),
    );
    semantic_list.extend(semantic(&|_| Some(GraphPath::Direct), &mut direct.iter()));

    let mut chosen: Vec<DistractorCandidate> = Vec::with_capacity(3);
    let mut used: BTreeSet<Lemma> = BTreeSet::new();
    let mut take = |list: &[DistractorCandidate], n: usize, chosen: &mut Vec<DistractorCandidate>| {
        let mut got = 0;
        for c in list {
            if got == n {
                break;
            }
            if used.insert(c.lemma.clone()) {
                chosen.push(c.clone());
                got += 1;
            }
        }
        got
    };
    let v = take(&visual_list, cfg.visual, &mut chosen);
    let s = take(&semantic_list, cfg.semantic, &mut chosen);
    // (5) backfill: the other source first
    if v < cfg.visual {
        take(&semantic_list, cfg.visual - v, &mut chosen);
    }
    if s < cfg.semantic {
        take(&visual_list, cfg.semantic - s, &mut chosen);
    }
    if chosen.len() < 3 {
        let names: Vec<String> = ctx
            .catalog
            .iter()
            .filter(|c| c.is_retained() && !banned.contains(&c.lemma))
            .map(|c| c.lemma.as_str().to_string())
            .collect();
        let catalog_set = lemma_set(names);
        let band = similarity_band_filter(ctx.gateway, &ctx.cache, &catalog_set, tl, cfg.tau_high)?;
        let mut list: Vec<DistractorCandidate> = band
            .kept
            .into_iter()
            .map(|(lemma, text_cosine)| DistractorCandidate {
                lemma,
                source: Source::Catalog,
                evidence: Evidence::Catalog,
                text_cosine,
            })
            .collect();
        list.sort_by(by_cosine);
        let need = 3 - chosen.len();
        take(&list, need, &mut chosen);
    }
    if chosen.len() < 3 {
        return Err(DistractorError::Underfilled {
            target: tl.clone(),
            found: chosen.len(),
        });
    }
    Ok(DistractorSet {
        target: tl.clone(),
        image_id: target_image.id.clone(),
        distractors: chosen,
    })
}

/// Checks every semantic distractor's recorded path against the graph.
pub fn verify_paths(graph: &dyn KnowledgeGraph, set: &DistractorSet) -> Result<bool, GraphError> {
    for d in &set.distractors {
        if let Evidence::Semantic { path } = &d.evidence {
            if !path_holds(graph, set.target.as_str(), d.lemma.as_str(), path)? {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Status, Supersense};
    use crate::gateway::mock::{basis, test_pattern, HashTextEmbedder, PixelHashImageEmbedder};
    use crate::gateway::{RenderParams, RetryPolicy};
    use crate::graph::{EdgeFileGraph, Relation};
    use crate::pipeline::Style;
    use std::sync::Arc;

    const DIM: usize = 32;

    fn concept(w: &str) -> Concept {
        let mut c = Concept::new(Lemma::new(w).unwrap(), Supersense::State, 2.0).unwrap();
        assert!(c.set_status(Status::Retained));
        c
    }

    fn image(word: &str, png: &[u8]) -> GeneratedImage {
        let id = crate::store::sha256_hex(png);
        GeneratedImage {
            path: crate::store::ImageStore::relative_path(&id),
            id,
            concept: Lemma::new(word).unwrap(),
            supersense: Supersense::State,
            style: Style::Naturalistic,
            description_id: "d".into(),
            model: "m".into(),
            seed: 0,
            params: RenderParams::default().with_seed(0),
            moderation_flags: Default::default(),
        }
    }

    struct Fixture {
        gateway: Gateway,
        images: BTreeMap<String, Vec<u8>>,
        pool: Vec<GeneratedImage>,
    }

    /// `words[i]` gets image vector `basis(i)` except those listed in
    /// `same_as_target`, which copy the target's.
    fn fixture(target: &str, words: &[&str], same_as_target: &[&str], text: HashTextEmbedder) -> Fixture {
        let mut emb = PixelHashImageEmbedder::new(DIM);
        let mut images = BTreeMap::new();
        let mut pool = Vec::new();
        let tpng = test_pattern(target, 0);
        emb.set_image_vector(&tpng, basis(DIM, 0));
        images.insert(crate::store::sha256_hex(&tpng), tpng.clone());
        pool.push(image(target, &tpng));
        for (i, w) in words.iter().enumerate() {
            let png = test_pattern(w, 0);
            let v = if same_as_target.contains(w) { basis(DIM, 0) } else { basis(DIM, i + 1) };
            emb.set_image_vector(&png, v);
            images.insert(crate::store::sha256_hex(&png), png.clone());
            pool.push(image(w, &png));
        }
        let gateway = Gateway::builder()
            .image_embed(Arc::new(emb), 4, RetryPolicy::immediate(1))
            .text_embed(Arc::new(text), 4, RetryPolicy::immediate(1))
            .build();
        Fixture { gateway, images, pool }
    }

    fn ctx<'a>(f: &'a Fixture, graph: &'a EdgeFileGraph, catalog: &'a [Concept]) -> DistractorContext<'a> {
        DistractorContext {
            gateway: &f.gateway,
            graph,
            images: &f.images,
            pool: &f.pool,
            catalog,
            cache: EmbeddingCache::default(),
        }
    }

    #[test]
    fn visual_neighbor_examples() {
        let f = fixture("age", &["wrinkle", "clock", "cane"], &["clock"], HashTextEmbedder::new(DIM));
        let empty = EdgeFileGraph::default();
        let c = ctx(&f, &empty, &[]);
        let r = visual_neighbors(&f.gateway, &c.cache, &f.images, &f.pool[0], &f.pool, 10).unwrap();
        assert_eq!(r[0].0.as_str(), "clock");
        assert!((r[0].1 - 1.0).abs() < 1e-6);
        // Remaining are orthogonal: cosine 0, lexicographic.
        let rest: Vec<&str> = r[1..].iter().map(|x| x.0.as_str()).collect();
        assert_eq!(rest, ["cane", "wrinkle"]);
        assert_eq!(r.len(), 3);
        assert!(visual_neighbors(&f.gateway, &c.cache, &f.images, &f.pool[0], &[], 5).unwrap().is_empty());
    }

    #[test]
    fn band_filter_boundaries() {
        let text = HashTextEmbedder::new(DIM)
            .with_vector("hope", basis(DIM, 0))
            .with_vector("hopefulness", basis(DIM, 0))
            .with_vector("table", basis(DIM, 1));
        let f = fixture("hope", &[], &[], text);
        let cache = EmbeddingCache::default();
        let cands = lemma_set(["hope".into(), "hopefulness".into(), "table".into()]);
        let t = Lemma::new("hope").unwrap();
        for tau in [0.5, 0.85, 0.999, 1.0] {
            let r = similarity_band_filter(&f.gateway, &cache, &cands, &t, tau).unwrap();
            let kept: Vec<&str> = r.kept.iter().map(|k| k.0.as_str()).collect();
            assert_eq!(kept, ["table"], "tau {tau}");
        }
        assert!(similarity_band_filter(&f.gateway, &cache, &cands, &t, 0.0).is_err());
    }

    #[test]
    fn default_mix_prefers_two_step() {
        let graph = EdgeFileGraph::from_edges([
            (Relation::RelatedTo, "age", "old"),
            (Relation::RelatedTo, "old", "disability"),
            (Relation::RelatedTo, "age", "time"),
            (Relation::RelatedTo, "time", "recuperation"),
            (Relation::Synonym, "age", "eld"),
        ]);
        let f = fixture("age", &["contentment", "eld"], &["eld"], HashTextEmbedder::new(DIM));
        let c = ctx(&f, &graph, &[]);
        let set = build_distractors(&c, &concept("age"), &f.pool[0], &DistractorConfig::default()).unwrap();
        let names: Vec<&str> = set.distractors.iter().map(|d| d.lemma.as_str()).collect();
        // "eld" is visually identical but a synonym.
        assert_eq!(names[0], "contentment");
        let mut sem: Vec<&str> = names[1..].to_vec();
        sem.sort();
        assert_eq!(sem, ["disability", "recuperation"]);
        assert!(set.validate().is_ok());
        assert!(verify_paths(&graph, &set).unwrap());
    }

    #[test]
    fn backfills_when_synonyms_remove_everything() {
        let graph = EdgeFileGraph::from_edges([
            (Relation::RelatedTo, "sofa", "couch"),
            (Relation::Synonym, "sofa", "couch"),
        ]);
        let f = fixture("sofa", &["lamp"], &[], HashTextEmbedder::new(DIM));
        let catalog: Vec<Concept> = ["sofa", "couch", "joy", "grief", "trust"].iter().map(|w| concept(w)).collect();
        let c = ctx(&f, &graph, &catalog);
        let set = build_distractors(&c, &concept("sofa"), &f.pool[0], &DistractorConfig::default()).unwrap();
        let sources: Vec<Source> = set.distractors.iter().map(|d| d.source).collect();
        assert_eq!(sources[0], Source::Visual);
        assert_eq!(&sources[1..], [Source::Catalog, Source::Catalog]);
        assert!(set.distractors.iter().all(|d| d.lemma.as_str() != "couch" && d.lemma.as_str() != "sofa"));
    }

    #[test]
    fn duplicate_embedding_never_selected_and_underfill_errors() {
        let text = HashTextEmbedder::new(DIM).with_vector("peace", basis(DIM, 3)).with_vector("calm", basis(DIM, 3));
        let graph = EdgeFileGraph::from_edges([(Relation::RelatedTo, "peace", "calm")]);
        let f = fixture("peace", &[], &[], text);
        let c = ctx(&f, &graph, &[]);
        let err = build_distractors(&c, &concept("peace"), &f.pool[0], &DistractorConfig::default()).unwrap_err();
        assert!(matches!(err, DistractorError::Underfilled { found: 0, .. }));
    }

    #[test]
    fn mix_parsing() {
        let c = DistractorConfig::default().with_mix("2v1s").unwrap();
        assert_eq!((c.visual, c.semantic), (2, 1));
        assert!(DistractorConfig::default().with_mix("1v1s").is_err());
        assert!(DistractorConfig::default().with_mix("xx").is_err());
    }
}
