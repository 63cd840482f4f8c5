//! `metonymy`: build the corpus, derive benchmark items, run and score models.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use metonymy_annotate::{parse_token_file, AppState};
use metonymy_core::annotation::{stratified_sample, AnnotationRecord, AnnotationStore, AssociationType, ImageInfo};
use metonymy_core::benchmark::{assemble_item, evaluate, item_seed, render_json, render_markdown, score, EvalConfig,
    EvalRecord, MCQItem};
use metonymy_core::catalog::{category_retention, filter_concepts, load_lexicon, Concept, FilterConfig, Supersense};
use metonymy_core::distractor::{build_distractors, DistractorConfig, DistractorContext, DistractorSet, EmbeddingCache};
use metonymy_core::gateway::{Gateway, GatewayConfig, RunLog};
use metonymy_core::graph::{ConceptNetClient, EdgeFileGraph, KnowledgeGraph, DEFAULT_CONCEPTNET_URL};
use metonymy_core::pipeline::{run_pipeline, GeneratedImage, PipelineConfig, PromptTemplates, Style};
use metonymy_core::store::{clock_from_env, manifest_images, read_jsonl, verify, CorpusStore, JsonlLog};

#[derive(Parser)]
#[command(name = "metonymy", version, about)]
struct Cli {
    /// Corpus directory.
    #[arg(long, short = 'C', global = true, default_value = ".", visible_alias = "out-dir")]
    corpus: PathBuf,
    /// Backend configuration (TOML). Without it the deterministic mock
    /// backends are used.
    #[arg(long, global = true, env = "METONYMY_GATEWAY")]
    gateway: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Join the lexicons and apply the concreteness and category filters.
    Filter(FilterArgs),
    /// Run the generation pipeline over retained concepts.
    Generate(GenerateArgs),
    /// Pick three distractors for every usable image.
    Distract(DistractArgs),
    /// Shuffle targets and distractors into multiple-choice items.
    Assemble(AssembleArgs),
    /// Ask a multimodal model every item.
    Evaluate(EvaluateArgs),
    /// Score result files and print a report.
    Score(ScoreArgs),
    /// Annotation service.
    Annotate {
        #[command(subcommand)]
        cmd: AnnotateCmd,
    },
    /// Check hashes, references and leakage across the corpus.
    Verify,
}

#[derive(Args)]
struct FilterArgs {
    /// Concreteness ratings (CSV/TSV with word and rating columns).
    #[arg(long)]
    ratings: PathBuf,
    /// Noun supersenses (CSV/TSV with word and supersense columns).
    #[arg(long)]
    supersenses: PathBuf,
    #[arg(long, default_value_t = 3.5)]
    cutoff: f64,
    /// Comma-separated supersenses to keep; defaults to the built-in list.
    #[arg(long, value_delimiter = ',')]
    categories: Option<Vec<Supersense>>,
    /// Derive the kept categories from annotation consensus instead.
    #[arg(long, conflicts_with = "categories")]
    retain_from_annotations: bool,
    #[arg(long, default_value_t = 0.60)]
    retention_threshold: f64,
    /// Defaults to `<corpus>/catalog.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Defaults to `<corpus>/catalog.jsonl`.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "naturalistic,stylistic")]
    styles: Vec<Style>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory overriding the built-in prompt templates.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Process only the first N retained concepts.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Args)]
struct DistractArgs {
    /// `api` for the live ConceptNet service, `file:<path>` for an edge file.
    #[arg(long, default_value = "api")]
    graph: String,
    #[arg(long, default_value = DEFAULT_CONCEPTNET_URL)]
    conceptnet_url: String,
    /// Defaults to `<corpus>/cache/conceptnet`.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Visual/semantic split, e.g. `1v2s`.
    #[arg(long, default_value = "1v2s")]
    mix: String,
    #[arg(long, default_value_t = 0.85)]
    tau_high: f64,
    #[arg(long, default_value_t = 10)]
    k_visual: usize,
    /// Draw visual neighbours from both styles.
    #[arg(long)]
    any_style_pool: bool,
}

#[derive(Args)]
struct AssembleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Multimodal backend name from the gateway config.
    #[arg(long)]
    model: String,
    /// Defaults to `<corpus>/items.jsonl`.
    #[arg(long)]
    items: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Md,
    Json,
}

#[derive(Args)]
struct ScoreArgs {
    /// Result files; defaults to every file under `<corpus>/results`.
    #[arg(long, num_args = 1..)]
    results: Vec<PathBuf>,
    #[arg(long)]
    items: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "md")]
    report: ReportFormat,
}

#[derive(Subcommand)]
enum AnnotateCmd {
    Serve(ServeArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    /// Label log; defaults to `<corpus>/annotations.jsonl`.
    #[arg(long)]
    store: Option<PathBuf>,
    /// File of `token=annotator` lines enabling bearer authentication.
    #[arg(long)]
    tokens: Option<PathBuf>,
    #[arg(long)]
    cors_origin: Vec<String>,
    #[arg(long, default_value_t = 2)]
    labels_per_image: usize,
    /// Serve only a seeded sample of N images, stratified by supersense.
    /// Images that already carry labels stay in the pool.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let store = CorpusStore::open(&cli.corpus).with_context(|| format!("opening corpus {}", cli.corpus.display()))?;
    match cli.cmd {
        Cmd::Filter(a) => filter(&store, a),
        Cmd::Generate(a) => generate(&store, cli.gateway.as_deref(), a),
        Cmd::Distract(a) => distract(&store, cli.gateway.as_deref(), a),
        Cmd::Assemble(a) => assemble(&store, a),
        Cmd::Evaluate(a) => eval(&store, cli.gateway.as_deref(), a),
        Cmd::Score(a) => score_cmd(&store, a),
        Cmd::Annotate { cmd: AnnotateCmd::Serve(a) } => serve(&store, a),
        Cmd::Verify => {
            let report = verify(&store);
            print_json(&report)?;
            Ok(if report.is_clean() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

fn print_json(v: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn gateway(config: Option<&Path>, multimodal: Option<&str>, store: &CorpusStore) -> Result<Gateway> {
    let cfg = match config {
        Some(p) => {
            let loaded = GatewayConfig::load(p)?;
            let filled = loaded.clone().with_mock_fallbacks();
            for name in filled.backends.keys().filter(|n| !loaded.backends.contains_key(*n)) {
                log::warn!("{}: no {} backend configured; using {name}", p.display(), filled.backends[name].capability);
            }
            filled
        }
        None => {
            log::warn!("no gateway config given; using deterministic mock backends");
            GatewayConfig::all_mock()
        }
    };
    let log = RunLog::to_file(&store.root().join("gateway.log")).context("opening gateway.log")?;
    Ok(cfg.build(multimodal, log)?)
}

/// Whole-file replace via a temporary sibling.
fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let tmp = path.with_extension("jsonl.tmp");
    fs::write(&tmp, &buf).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("replacing {}", path.display()))?;
    Ok(())
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn images_of(store: &CorpusStore) -> Result<Vec<GeneratedImage>> {
    let entries = store.read_manifest()?;
    Ok(manifest_images(&entries).into_iter().cloned().collect())
}

/// Latest label per (image, annotator).
fn current_labels(store: &CorpusStore) -> Result<Vec<AnnotationRecord>> {
    let mut latest: BTreeMap<(String, String), AnnotationRecord> = BTreeMap::new();
    for r in read_jsonl::<AnnotationRecord>(&store.annotations_path())? {
        latest.insert((r.image_id.clone(), r.annotator.clone()), r);
    }
    Ok(latest.into_values().collect())
}

fn excluded(store: &CorpusStore, images: &[GeneratedImage]) -> Result<BTreeSet<String>> {
    let mut out = metonymy_core::annotation::excluded_images(&current_labels(store)?);
    out.extend(
        images
            .iter()
            .filter(|i| i.moderation_flags.iter().any(|f| f.excludes()))
            .map(|i| i.id.clone()),
    );
    Ok(out)
}

#[derive(Serialize)]
struct FilterSummary {
    concepts: usize,
    retained: usize,
    rejected_concreteness: usize,
    rejected_category: usize,
    unmatched: usize,
    warnings: usize,
    categories: BTreeSet<Supersense>,
}

fn filter(store: &CorpusStore, a: FilterArgs) -> Result<ExitCode> {
    use metonymy_core::catalog::{RejectReason, Status};
    let lex = load_lexicon(&read_text(&a.ratings)?, &read_text(&a.supersenses)?)?;
    for w in &lex.warnings {
        log::warn!("{}:{}: {}", w.source, w.line, w.message);
    }
    let mut cfg = FilterConfig {
        concreteness_cutoff: a.cutoff,
        retention_threshold: a.retention_threshold,
        ..FilterConfig::default()
    };
    if let Some(c) = a.categories {
        cfg.retained_categories = c.into_iter().collect();
    }
    if a.retain_from_annotations {
        let infos: BTreeMap<String, ImageInfo> = images_of(store)?
            .iter()
            .map(|i| (i.id.clone(), ImageInfo::from(i)))
            .collect();
        let labels = metonymy_core::annotation::supersense_labels(&current_labels(store)?, &infos);
        if labels.is_empty() {
            bail!("no consensus labels to derive categories from");
        }
        cfg.retained_categories = category_retention(&labels, &cfg).retained;
    }
    cfg.validate()?;
    let out = filter_concepts(&lex.concepts, &cfg);
    write_jsonl(&a.out.unwrap_or_else(|| store.catalog_path()), &out)?;
    let count = |s: Status| out.iter().filter(|c| c.status() == s).count();
    print_json(&FilterSummary {
        concepts: out.len(),
        retained: count(Status::Retained),
        rejected_concreteness: count(Status::Rejected(RejectReason::Concreteness)),
        rejected_category: count(Status::Rejected(RejectReason::Category)),
        unmatched: lex.unmatched.len(),
        warnings: lex.warnings.len(),
        categories: cfg.retained_categories,
    })?;
    Ok(ExitCode::SUCCESS)
}

fn generate(store: &CorpusStore, gw: Option<&Path>, a: GenerateArgs) -> Result<ExitCode> {
    let catalog_path = a.catalog.unwrap_or_else(|| store.catalog_path());
    let mut concepts: Vec<Concept> = read_jsonl(&catalog_path)?;
    if concepts.is_empty() {
        bail!("{} has no concepts; run `metonymy filter` first", catalog_path.display());
    }
    if let Some(n) = a.limit {
        concepts = concepts.into_iter().filter(Concept::is_retained).take(n).collect();
    }
    let templates = match &a.templates {
        Some(dir) => PromptTemplates::load_dir(dir).with_context(|| format!("templates in {}", dir.display()))?,
        None => PromptTemplates::default(),
    };
    let cfg = PipelineConfig {
        seed: a.seed,
        styles: a.styles,
        templates,
        batch_size: a.batch_size,
        ..PipelineConfig::default()
    };
    let gateway = gateway(gw, None, store)?;
    let summary = run_pipeline(&gateway, store, &concepts, &cfg, clock_from_env().as_ref())?;
    print_json(&summary)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct DistractSummary {
    built: usize,
    already_present: usize,
    excluded: usize,
    failed: BTreeMap<String, String>,
}

fn distract(store: &CorpusStore, gw: Option<&Path>, a: DistractArgs) -> Result<ExitCode> {
    let cfg = DistractorConfig {
        tau_high: a.tau_high,
        k_visual: a.k_visual,
        same_style_pool: !a.any_style_pool,
        ..DistractorConfig::default()
    }
    .with_mix(&a.mix)?;
    cfg.validate()?;
    let graph: Box<dyn KnowledgeGraph> = match a.graph.as_str() {
        "api" => {
            let dir = a.cache_dir.unwrap_or_else(|| store.root().join("cache").join("conceptnet"));
            Box::new(ConceptNetClient::new(&a.conceptnet_url, &dir)?.with_retries(3, Duration::from_millis(500)))
        }
        other => match other.strip_prefix("file:") {
            Some(p) => Box::new(EdgeFileGraph::load(Path::new(p))?),
            None => bail!("--graph must be `api` or `file:<path>`, got {other:?}"),
        },
    };
    let catalog: Vec<Concept> = read_jsonl::<Concept>(&store.catalog_path())?
        .into_iter()
        .filter(Concept::is_retained)
        .collect();
    let by_lemma: HashMap<_, _> = catalog.iter().map(|c| (c.lemma.clone(), c)).collect();
    let images = images_of(store)?;
    let excl = excluded(store, &images)?;
    let pool: Vec<GeneratedImage> = images.iter().filter(|i| !excl.contains(&i.id)).cloned().collect();
    let gateway = gateway(gw, None, store)?;
    let source = store.images();
    let ctx = DistractorContext {
        gateway: &gateway,
        graph: graph.as_ref(),
        images: &source,
        pool: &pool,
        catalog: &catalog,
        cache: EmbeddingCache::default(),
    };
    let mut log: JsonlLog<DistractorSet> = JsonlLog::open(&store.distractors_path())?;
    let done: BTreeSet<String> = log.read_all()?.into_iter().map(|s| s.image_id).collect();
    let mut summary = DistractSummary {
        built: 0,
        already_present: 0,
        excluded: images.len() - pool.len(),
        failed: BTreeMap::new(),
    };
    for img in &pool {
        if done.contains(&img.id) {
            summary.already_present += 1;
            continue;
        }
        let Some(concept) = by_lemma.get(&img.concept) else {
            summary.failed.insert(img.id.clone(), format!("{} is not a retained concept", img.concept));
            continue;
        };
        match build_distractors(&ctx, concept, img, &cfg) {
            Ok(set) => {
                log.append(&set)?;
                summary.built += 1;
            }
            Err(e) => {
                log::warn!("{} ({}): {e}", img.id, img.concept);
                summary.failed.insert(img.id.clone(), e.to_string());
            }
        }
    }
    print_json(&summary)?;
    Ok(ExitCode::SUCCESS)
}

/// Most frequent association type among an image's labels; ties stay unset.
fn association_types(labels: &[AnnotationRecord]) -> BTreeMap<String, AssociationType> {
    let mut counts: BTreeMap<&str, BTreeMap<AssociationType, usize>> = BTreeMap::new();
    for r in labels {
        if let Some(t) = r.association_type {
            *counts.entry(&r.image_id).or_default().entry(t).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .filter_map(|(img, c)| {
            let max = *c.values().max()?;
            let mut top = c.into_iter().filter(|(_, n)| *n == max);
            let (t, _) = top.next()?;
            top.next().is_none().then(|| (img.to_string(), t))
        })
        .collect()
}

#[derive(Serialize)]
struct AssembleSummary {
    items: usize,
    excluded: usize,
    without_distractors: usize,
}

fn assemble(store: &CorpusStore, a: AssembleArgs) -> Result<ExitCode> {
    let images = images_of(store)?;
    let excl = excluded(store, &images)?;
    let labels = current_labels(store)?;
    let assoc = association_types(&labels);
    let sets: BTreeMap<String, DistractorSet> = read_jsonl::<DistractorSet>(&store.distractors_path())?
        .into_iter()
        .map(|s| (s.image_id.clone(), s))
        .collect();
    let mut items = Vec::new();
    let mut summary = AssembleSummary {
        items: 0,
        excluded: 0,
        without_distractors: 0,
    };
    for img in &images {
        if excl.contains(&img.id) {
            summary.excluded += 1;
            continue;
        }
        let Some(set) = sets.get(&img.id) else {
            summary.without_distractors += 1;
            continue;
        };
        let mut item: MCQItem = assemble_item(img, set, item_seed(a.seed, &img.id))?;
        item.association_type = assoc.get(&img.id).copied();
        items.push(item);
    }
    summary.items = items.len();
    write_jsonl(&store.items_path(), &items)?;
    print_json(&summary)?;
    Ok(ExitCode::SUCCESS)
}

fn eval(store: &CorpusStore, gw: Option<&Path>, a: EvaluateArgs) -> Result<ExitCode> {
    let items_path = a.items.unwrap_or_else(|| store.items_path());
    let items: Vec<MCQItem> = read_jsonl(&items_path)?;
    if items.is_empty() {
        bail!("{} has no items; run `metonymy assemble` first", items_path.display());
    }
    // Without a config the model name only labels the results file.
    let gateway = gateway(gw, gw.map(|_| a.model.as_str()), store)?;
    let mut cfg = EvalConfig::new(&a.model);
    cfg.batch_size = a.batch_size;
    let res = evaluate(
        &gateway,
        &store.images(),
        &items,
        &store.results_path(&a.model),
        &cfg,
        clock_from_env().as_ref(),
    )?;
    print_json(&render_json(std::slice::from_ref(&res))["results"][0])?;
    Ok(ExitCode::SUCCESS)
}

fn score_cmd(store: &CorpusStore, a: ScoreArgs) -> Result<ExitCode> {
    let items: Vec<MCQItem> = read_jsonl(&a.items.unwrap_or_else(|| store.items_path()))?;
    let mut paths = a.results;
    if paths.is_empty() {
        if let Ok(rd) = fs::read_dir(store.results_dir()) {
            for e in rd.flatten() {
                let p = e.path();
                if p.extension().is_some_and(|x| x == "jsonl") {
                    paths.push(p);
                }
            }
        }
        paths.sort();
    }
    if paths.is_empty() {
        bail!("no result files to score");
    }
    let mut results = Vec::new();
    for p in &paths {
        let recs: Vec<EvalRecord> = read_jsonl(p)?;
        if recs.is_empty() {
            log::warn!("{} is empty", p.display());
            continue;
        }
        results.push(score(&recs, &items));
    }
    match a.report {
        ReportFormat::Md => print!("{}", render_markdown(&results)),
        ReportFormat::Json => print_json(&render_json(&results))?,
    }
    Ok(ExitCode::SUCCESS)
}

fn serve(store: &CorpusStore, a: ServeArgs) -> Result<ExitCode> {
    let mut images: Vec<ImageInfo> = images_of(store)?.iter().map(ImageInfo::from).collect();
    let path = a.store.unwrap_or_else(|| store.annotations_path());
    if let Some(n) = a.sample {
        let labeled: BTreeSet<String> = if path.exists() {
            read_jsonl::<AnnotationRecord>(&path)?.into_iter().map(|r| r.image_id).collect()
        } else {
            BTreeSet::new()
        };
        let mut keep: BTreeSet<String> =
            stratified_sample(&images, n, a.sample_seed).into_iter().map(|i| i.image_id).collect();
        let sampled = keep.len();
        keep.extend(labeled);
        images.retain(|i| keep.contains(&i.image_id));
        log::info!("annotation pool: {sampled} sampled (seed {}), {} with existing labels", a.sample_seed, images.len());
    }
    let labels = AnnotationStore::open(images, &path)?.with_labels_per_image(a.labels_per_image);
    let mut state = AppState::new(labels, store.images(), PromptTemplates::default().guidelines);
    if let Some(t) = &a.tokens {
        state = state.with_tokens(parse_token_file(&read_text(t)?).map_err(anyhow::Error::msg)?);
    }
    let addr: SocketAddr = format!("{}:{}", a.bind, a.port).parse().context("bind address")?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(metonymy_annotate::serve(addr, Arc::new(state), &a.cors_origin))?;
    Ok(ExitCode::SUCCESS)
}
