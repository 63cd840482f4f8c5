//! Commonsense knowledge-graph lookups.
//!
//! Two backings share the [`KnowledgeGraph`] trait: an offline edge file
//! (`relation<TAB>node1<TAB>node2` per line) and a client for the public
//! ConceptNet REST API whose responses are cached on disk keyed by URL.
//! Node labels are surface lemmas (lowercase, spaces); the remote API's
//! `/c/en/ice_cream` form is converted at the boundary. Both relations are
//! treated as undirected.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Intermediates expanded per node when enumerating two-step candidates.
pub const TWO_STEP_INTERMEDIATE_CAP: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Relation {
    RelatedTo,
    Synonym,
}

impl Relation {
    pub fn uri(self) -> &'static str {
        match self {
            Relation::RelatedTo => "/r/RelatedTo",
            Relation::Synonym => "/r/Synonym",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim().trim_start_matches("/r/") {
            "RelatedTo" => Some(Relation::RelatedTo),
            "Synonym" => Some(Relation::Synonym),
            _ => None,
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.uri()[3..])
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}:{line}: {message}")]
    EdgeFile { path: PathBuf, line: usize, message: String },
    #[error("graph request {url} failed after {attempts} attempts: {message}")]
    Remote { url: String, attempts: u32, message: String },
    #[error("unparseable graph response from {url}: {message}")]
    Response { url: String, message: String },
}

/// Neighbor lookup over one relation, in both directions.
pub trait KnowledgeGraph: Send + Sync {
    fn neighbors(&self, node: &str, rel: Relation) -> Result<BTreeSet<String>, GraphError>;
}

/// `"Ice_Cream"` / `"/c/en/ice_cream/n"` → `"ice cream"`.
pub fn surface(node: &str) -> String {
    let core = match node.strip_prefix("/c/") {
        Some(rest) => rest.split('/').nth(1).unwrap_or(""),
        None => node,
    };
    core.replace('_', " ").split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// `"ice cream"` → `"ice_cream"` as used in remote node URIs.
pub fn node_key(term: &str) -> String {
    surface(term).replace(' ', "_")
}

// ---------------------------------------------------------------------------
// Offline edge file

#[derive(Debug, Clone, Default)]
pub struct EdgeFileGraph {
    adj: BTreeMap<Relation, BTreeMap<String, BTreeSet<String>>>,
}

impl EdgeFileGraph {
    pub fn from_edges<I, S>(edges: I) -> Self
    where
        I: IntoIterator<Item = (Relation, S, S)>,
        S: AsRef<str>,
    {
        let mut g = EdgeFileGraph::default();
        for (rel, a, b) in edges {
            g.add(rel, a.as_ref(), b.as_ref());
        }
        g
    }

    pub fn add(&mut self, rel: Relation, a: &str, b: &str) {
        let (a, b) = (surface(a), surface(b));
        if a.is_empty() || b.is_empty() || a == b {
            return;
        }
        let m = self.adj.entry(rel).or_default();
        m.entry(a.clone()).or_default().insert(b.clone());
        m.entry(b).or_default().insert(a);
    }

    /// Parses `relation<TAB>node1<TAB>node2` lines. Blank lines and `#`
    /// comments are skipped; unknown relations are ignored.
    pub fn parse(text: &str, source: &Path) -> Result<Self, GraphError> {
        let mut g = EdgeFileGraph::default();
        let mut ignored = 0usize;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 3 {
                return Err(GraphError::EdgeFile {
                    path: source.to_path_buf(),
                    line: i + 1,
                    message: format!("expected 3 tab-separated columns, got {}", cols.len()),
                });
            }
            match Relation::parse(cols[0]) {
                Some(rel) => g.add(rel, cols[1], cols[2]),
                None => ignored += 1,
            }
        }
        if ignored > 0 {
            log::info!("{}: ignored {ignored} edges with other relations", source.display());
        }
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let text = fs::read_to_string(path).map_err(|e| GraphError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    pub fn nodes(&self) -> BTreeSet<&str> {
        self.adj.values().flat_map(|m| m.keys().map(String::as_str)).collect()
    }

    pub fn has_edge(&self, rel: Relation, a: &str, b: &str) -> bool {
        self.adj
            .get(&rel)
            .and_then(|m| m.get(&surface(a)))
            .is_some_and(|s| s.contains(&surface(b)))
    }
}

impl KnowledgeGraph for EdgeFileGraph {
    fn neighbors(&self, node: &str, rel: Relation) -> Result<BTreeSet<String>, GraphError> {
        Ok(self
            .adj
            .get(&rel)
            .and_then(|m| m.get(&surface(node)))
            .cloned()
            .unwrap_or_default())
    }
}

// ---------------------------------------------------------------------------
// Remote client

pub const DEFAULT_CONCEPTNET_URL: &str = "https://api.conceptnet.io";

/// Pages followed per query; each page holds up to `page_limit` edges.
const MAX_PAGES: usize = 5;

pub struct ConceptNetClient {
    base_url: String,
    cache_dir: PathBuf,
    client: reqwest::blocking::Client,
    attempts: u32,
    backoff: Duration,
    page_limit: usize,
    memo: Mutex<HashMap<(String, Relation), BTreeSet<String>>>,
}

#[derive(Deserialize)]
struct QueryPage {
    #[serde(default)]
    edges: Vec<Edge>,
    #[serde(default)]
    view: Option<View>,
}

#[derive(Deserialize)]
struct View {
    #[serde(rename = "nextPage")]
    next_page: Option<String>,
}

#[derive(Deserialize)]
struct Edge {
    start: EdgeNode,
    end: EdgeNode,
    rel: EdgeRel,
}

#[derive(Deserialize)]
struct EdgeNode {
    #[serde(rename = "@id")]
    id: String,
}

#[derive(Deserialize)]
struct EdgeRel {
    #[serde(rename = "@id")]
    id: String,
}

impl ConceptNetClient {
    pub fn new(base_url: &str, cache_dir: &Path) -> Result<Self, GraphError> {
        fs::create_dir_all(cache_dir).map_err(|e| GraphError::Io {
            path: cache_dir.to_path_buf(),
            message: e.to_string(),
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .user_agent(concat!("metonymy/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| GraphError::Remote {
                url: base_url.into(),
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(ConceptNetClient {
            base_url: base_url.trim_end_matches('/').to_string(),
            cache_dir: cache_dir.to_path_buf(),
            client,
            attempts: 3,
            backoff: Duration::from_millis(500),
            page_limit: 1000,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_retries(mut self, attempts: u32, backoff: Duration) -> Self {
        self.attempts = attempts.max(1);
        self.backoff = backoff;
        self
    }

    pub fn query_url(&self, node: &str, rel: Relation) -> String {
        format!(
            "{}/query?node=/c/en/{}&rel={}&limit={}",
            self.base_url,
            node_key(node),
            rel.uri(),
            self.page_limit
        )
    }

    fn cache_path(&self, url: &str) -> PathBuf {
        self.cache_dir.join(format!("{}.json", hex::encode(Sha256::digest(url.as_bytes()))))
    }

    /// Response body for `url`, from the disk cache when present.
    fn fetch(&self, url: &str) -> Result<String, GraphError> {
        let path = self.cache_path(url);
        if let Ok(body) = fs::read_to_string(&path) {
            return Ok(body);
        }
        let mut last = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            match self.client.get(url).send() {
                Ok(resp) if resp.status().is_success() => {
                    let body = resp.text().map_err(|e| GraphError::Response {
                        url: url.into(),
                        message: e.to_string(),
                    })?;
                    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
                    if fs::write(&tmp, &body).and_then(|_| fs::rename(&tmp, &path)).is_err() {
                        log::warn!("could not cache {url}");
                    }
                    return Ok(body);
                }
                Ok(resp) if resp.status().as_u16() == 429 || resp.status().is_server_error() => {
                    last = format!("HTTP {}", resp.status());
                }
                Ok(resp) => {
                    return Err(GraphError::Remote {
                        url: url.into(),
                        attempts: attempt + 1,
                        message: format!("HTTP {}", resp.status()),
                    })
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(GraphError::Remote {
            url: url.into(),
            attempts: self.attempts,
            message: last,
        })
    }

    fn page_url(&self, next: &str) -> String {
        if next.starts_with("http") {
            next.to_string()
        } else {
            format!("{}{next}", self.base_url)
        }
    }
}

impl KnowledgeGraph for ConceptNetClient {
    fn neighbors(&self, node: &str, rel: Relation) -> Result<BTreeSet<String>, GraphError> {
        let key = (surface(node), rel);
        if let Some(hit) = self.memo.lock().expect("poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let me = node_key(node);
        let mut out = BTreeSet::new();
        let mut url = Some(self.query_url(node, rel));
        let mut pages = 0;
        while let Some(u) = url.take() {
            let body = self.fetch(&u)?;
            let page: QueryPage = serde_json::from_str(&body).map_err(|e| GraphError::Response {
                url: u.clone(),
                message: e.to_string(),
            })?;
            for e in page.edges {
                if e.rel.id != rel.uri() {
                    continue;
                }
                let english = |id: &str| id.starts_with("/c/en/");
                let (s, t) = (e.start.id.as_str(), e.end.id.as_str());
                if !english(s) || !english(t) {
                    continue;
                }
                let other = if node_key(s) == me { t } else { s };
                let label = surface(other);
                if !label.is_empty() && node_key(other) != me {
                    out.insert(label);
                }
            }
            pages += 1;
            url = page.view.and_then(|v| v.next_page).map(|n| self.page_url(&n));
            if pages >= MAX_PAGES && url.is_some() {
                log::info!("{node} {rel}: stopped after {MAX_PAGES} pages");
                break;
            }
        }
        self.memo.lock().expect("poisoned").insert(key, out.clone());
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Derived queries

/// RelatedTo neighbors of `concept`, excluding itself.
pub fn related_terms(graph: &dyn KnowledgeGraph, concept: &str) -> Result<BTreeSet<String>, GraphError> {
    let mut out = graph.neighbors(concept, Relation::RelatedTo)?;
    out.remove(&surface(concept));
    if out.is_empty() {
        log::warn!("{concept:?} has no RelatedTo neighbors (absent from graph?)");
    }
    Ok(out)
}

/// Synonym neighbors plus the concept itself.
pub fn synonym_set(graph: &dyn KnowledgeGraph, concept: &str) -> Result<BTreeSet<String>, GraphError> {
    let mut out = graph.neighbors(concept, Relation::Synonym)?;
    out.insert(surface(concept));
    Ok(out)
}

/// Nodes at exactly two RelatedTo hops, each with the first intermediate (in
/// lexicographic order) that reaches it.
pub fn two_step_paths(graph: &dyn KnowledgeGraph, concept: &str) -> Result<BTreeMap<String, String>, GraphError> {
    let me = surface(concept);
    let direct = graph.neighbors(&me, Relation::RelatedTo)?;
    if direct.len() > TWO_STEP_INTERMEDIATE_CAP {
        log::info!(
            "{me:?}: expanding {TWO_STEP_INTERMEDIATE_CAP} of {} intermediates",
            direct.len()
        );
    }
    let mut out = BTreeMap::new();
    for m in direct.iter().filter(|m| **m != me).take(TWO_STEP_INTERMEDIATE_CAP) {
        for c in graph.neighbors(m, Relation::RelatedTo)? {
            if c != me && !direct.contains(&c) {
                out.entry(c).or_insert_with(|| m.clone());
            }
        }
    }
    Ok(out)
}

pub fn two_step_candidates(graph: &dyn KnowledgeGraph, concept: &str) -> Result<BTreeSet<String>, GraphError> {
    Ok(two_step_paths(graph, concept)?.into_keys().collect())
}

/// How a semantic candidate was reached from the target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphPath {
    Direct,
    TwoStep { via: String },
}

/// Re-walks a recorded path against the graph.
pub fn path_holds(graph: &dyn KnowledgeGraph, target: &str, candidate: &str, path: &GraphPath) -> Result<bool, GraphError> {
    let target_n = graph.neighbors(target, Relation::RelatedTo)?;
    let cand = surface(candidate);
    Ok(match path {
        GraphPath::Direct => target_n.contains(&cand),
        GraphPath::TwoStep { via } => {
            target_n.contains(&surface(via))
                && !target_n.contains(&cand)
                && graph.neighbors(via, Relation::RelatedTo)?.contains(&cand)
        }
    })
}
