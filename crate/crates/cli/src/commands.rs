use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context as _, Result};
use rayon::prelude::*;

use ktree::baselines::{brute_force_topn, exhaustive_pairwise_topn, kdtree_build, kdtree_topn};
use ktree::evalx::{evaluate, render_tsv, EvalReport, DEFAULT_CUTOFF};
use ktree::ingest::{build_corpus, parse_pairs, synth_corpus_with_metric, synth_text_corpus};
use ktree::scorers::{LexicalScorer, PairScorer, RemoteConfig, RemoteScorer};
use ktree::search::{batch_search, search_one, BatchQuery, EvalCountSummary, Query, SearchMode};
use ktree::tree::{build_tree, deserialize_tree, serialize_tree, TreeConfig};
use ktree::vecstore::{load_embeddings, load_items, save_embeddings, save_items, save_pairs};
use ktree::{EmbeddingSet, ItemId, ItemTable, KTree, Metric, QRels, SearchParams, SearchResult};

use crate::settings::Settings;
use crate::{
    BeamWidth, BenchArgs, BuildArgs, CorpusArgs, EvalArgs, Format, IngestArgs, Method, Mode, Outcome, ScorerArgs,
    SearchArgs, SearchOpts, SynthArgs, SynthKind, TreeArgs,
};

pub struct Context {
    pub settings: Settings,
    pub seed: u64,
}

fn outcome(clean: bool) -> Outcome {
    if clean {
        Outcome::Clean
    } else {
        Outcome::Partial
    }
}

fn load_corpus(ctx: &Context, a: &CorpusArgs, need_embeddings: bool) -> Result<(ItemTable, Option<EmbeddingSet>)> {
    let items = load_items(&a.items)?;
    if !need_embeddings {
        return Ok((items, None));
    }
    let Some(path) = &a.embeddings else {
        bail!("--embeddings is required here");
    };
    let emb = load_embeddings(path, items.clone())?;
    let normalize = !a.no_normalize && ctx.settings.get::<bool>("normalize")?.unwrap_or(true);
    let emb = if normalize { emb.normalize()? } else { emb };
    Ok((items, Some(emb)))
}

fn tree_config(ctx: &Context, t: &TreeArgs, branching: Option<usize>) -> Result<TreeConfig> {
    let s = &ctx.settings;
    let mut cfg = TreeConfig::new(s.pick(branching.or(t.branching), "branching", 5)?);
    cfg.leaf_capacity = s.pick(t.leaf_capacity, "leaf_capacity", cfg.leaf_capacity)?;
    cfg.rep_count = s.pick(t.rep_count, "rep_count", cfg.rep_count)?;
    cfg.max_iter = s.pick(t.max_iter, "max_iter", cfg.max_iter)?;
    cfg.tol = s.pick(t.tol, "tol", cfg.tol)?;
    cfg.init = s.pick(t.init, "init", cfg.init)?;
    cfg.seed = ctx.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn search_params(ctx: &Context, o: &SearchOpts) -> Result<(Mode, SearchParams)> {
    let s = &ctx.settings;
    let defaults = SearchParams::default();
    let params = SearchParams {
        beam_width: s.pick(o.beam_width, "beam_width", BeamWidth(defaults.beam_width))?.0,
        top_n: s.pick(o.top_n, "top_n", defaults.top_n)?,
        metric: s.pick(o.metric, "metric", defaults.metric)?,
        exclude_ids: BTreeSet::new(),
    };
    params.validate()?;
    Ok((s.pick(o.mode, "mode", Mode::Vector)?, params))
}

/// Flag, then `KTREE_SCORER_*` environment, then config file.
fn scorer(ctx: &Context, a: &ScorerArgs) -> Result<Option<Box<dyn PairScorer>>> {
    let s = &ctx.settings;
    if a.local_scorer && a.scorer_url.is_some() {
        bail!("--local-scorer and --scorer-url are mutually exclusive");
    }
    if a.local_scorer || (a.scorer_url.is_none() && s.flag(false, "local_scorer")?) {
        return Ok(Some(Box::new(LexicalScorer)));
    }
    let mut config = RemoteConfig::new(s.raw("scorer_url").unwrap_or_default());
    config.timeout_ms = s.pick(None, "scorer_timeout_ms", config.timeout_ms)?;
    config.max_retries = s.pick(None, "scorer_max_retries", config.max_retries)?;
    config.batch_limit = s.pick(None, "scorer_batch_limit", config.batch_limit)?;
    let mut config = config.with_env_overrides().map_err(anyhow::Error::msg)?;
    if let Some(url) = &a.scorer_url {
        config.endpoint = url.clone();
    }
    config.timeout_ms = a.scorer_timeout_ms.unwrap_or(config.timeout_ms);
    config.max_retries = a.scorer_max_retries.unwrap_or(config.max_retries);
    config.batch_limit = a.scorer_batch_limit.unwrap_or(config.batch_limit);
    if config.endpoint.is_empty() {
        return Ok(None);
    }
    Ok(Some(Box::new(RemoteScorer::new(config).map_err(anyhow::Error::msg)?)))
}

fn require_scorer(scorer: Option<Box<dyn PairScorer>>) -> Result<Box<dyn PairScorer>> {
    scorer.ok_or_else(|| {
        ktree::Error::Config("pairwise mode needs --local-scorer or --scorer-url (or KTREE_SCORER_URL)".into()).into()
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn ingest(_ctx: &Context, a: IngestArgs) -> Result<Outcome> {
    let parsed = parse_pairs(&a.input)?;
    let corpus = build_corpus(&parsed.pairs)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    save_items(&corpus.items, a.out_dir.join("items.tsv"))?;
    corpus.qrels.save(a.out_dir.join("qrels.tsv"))?;
    save_pairs(&corpus.pairs, a.out_dir.join("pairs.tsv"))?;
    println!("pairs\t{}", parsed.pairs.len());
    println!("rows_dropped\t{}", parsed.dropped);
    println!("items\t{}", corpus.items.len());
    println!("queries\t{}", corpus.qrels.len());
    println!("self_pairs_excluded\t{}", corpus.self_pairs_excluded);
    Ok(Outcome::Clean)
}

pub fn synth(ctx: &Context, a: SynthArgs) -> Result<Outcome> {
    let corpus = match a.kind {
        SynthKind::Gaussian => {
            synth_corpus_with_metric(a.clusters, a.per_cluster, a.dim, a.spread, ctx.seed, a.metric)?
        }
        SynthKind::Text => synth_text_corpus(a.clusters, a.per_cluster, ctx.seed)?,
    };
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    save_items(corpus.items(), a.out_dir.join("items.tsv"))?;
    save_embeddings(&corpus.embeddings, a.out_dir.join("embeddings.emb"))?;
    corpus.qrels.save(a.out_dir.join("qrels.tsv"))?;
    println!("items\t{}", corpus.items().len());
    println!("dim\t{}", corpus.embeddings.dim());
    println!("queries\t{}", corpus.qrels.len());
    Ok(Outcome::Clean)
}

pub fn build(ctx: &Context, a: BuildArgs) -> Result<Outcome> {
    let cfg = tree_config(ctx, &a.tree, None)?;
    let (_, emb) = load_corpus(ctx, &a.corpus, true)?;
    let tree = build_tree(&emb.expect("embeddings loaded"), &cfg)?;
    serialize_tree(&tree, &a.out)?;
    println!("{}", tree.stats());
    Ok(Outcome::Clean)
}

fn read_id_file(path: &Path) -> Result<Vec<ItemId>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim()
                .parse()
                .with_context(|| format!("{}:{}: not an item id", path.display(), n + 1))
        })
        .collect()
}

fn clean_text(t: &str) -> String {
    t.replace(['\t', '\n', '\r'], " ")
}

pub fn search(ctx: &Context, a: SearchArgs) -> Result<Outcome> {
    let (mode, params) = search_params(ctx, &a.search)?;
    let scorer = match mode {
        Mode::Pairwise => Some(require_scorer(scorer(ctx, &a.scorer)?)?),
        Mode::Vector => None,
    };
    let (items, emb) = load_corpus(ctx, &a.corpus, mode == Mode::Vector)?;
    let tree = deserialize_tree(&a.tree)?;

    let mut ids = a.query_ids.clone();
    if let Some(path) = &a.query_file {
        ids.extend(read_id_file(path)?);
    }
    let mut labels = Vec::new();
    let mut queries = Vec::new();
    for id in ids {
        let Some(text) = items.text(id) else {
            bail!("query id {id} is not in the corpus ({} items)", items.len());
        };
        let query = match &emb {
            Some(e) => Query::Vector(e.vector(id).to_vec()),
            None => Query::Text(text.to_string()),
        };
        let exclude_ids = if a.include_self { vec![] } else { vec![id] };
        labels.push(id.to_string());
        queries.push(BatchQuery { query, exclude_ids });
    }
    for (i, text) in a.query_texts.iter().enumerate() {
        ensure!(mode == Mode::Pairwise, "free-text queries need --mode pairwise");
        labels.push(format!("text{i}"));
        queries.push(BatchQuery { query: Query::Text(text.clone()), exclude_ids: vec![] });
    }
    ensure!(!queries.is_empty(), "no queries: use --query-id, --query-file or --query-text");

    let search_mode = match (&emb, &scorer) {
        (Some(embeddings), _) => SearchMode::Vector { embeddings },
        (None, Some(scorer)) => SearchMode::Pairwise { items: &items, scorer: scorer.as_ref() },
        (None, None) => unreachable!("pairwise mode always resolves a scorer"),
    };
    let batch = batch_search(&tree, &queries, &params, search_mode);

    match a.format {
        Format::Tsv => {
            println!("query\trank\titem\tscore\teval_count\ttext");
            for (label, r) in labels.iter().zip(&batch.results) {
                let Ok(r) = r else { continue };
                for (rank, hit) in r.ranked.iter().enumerate() {
                    let text = clean_text(items.text(hit.id).unwrap_or_default());
                    println!("{label}\t{}\t{}\t{:.6}\t{}\t{text}", rank + 1, hit.id, hit.score, r.eval_count);
                }
            }
        }
        Format::Json => {
            let rows: Vec<_> = labels
                .iter()
                .zip(&batch.results)
                .map(|(label, r)| match r {
                    Ok(r) => serde_json::json!({
                        "query": label,
                        "eval_count": r.eval_count,
                        "nodes_visited": r.nodes_visited,
                        "ranked": r.ranked.iter().map(|h| serde_json::json!({
                            "id": h.id,
                            "score": h.score,
                            "text": items.text(h.id),
                        })).collect::<Vec<_>>(),
                    }),
                    Err(e) => serde_json::json!({ "query": label, "error": e.to_string() }),
                })
                .collect();
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
    }
    if let Some(s) = batch.summary {
        eprintln!("eval_count mean {:.1} min {} max {} over {} queries", s.mean, s.min, s.max, s.queries);
    }
    let failed = batch.failed();
    for &i in &failed {
        if let Err(e) = &batch.results[i] {
            eprintln!("query {} failed: {e}", labels[i]);
        }
    }
    Ok(outcome(failed.is_empty()))
}

/// Runs `search` for every qrels query, excluding the query item itself.
fn run_method<F>(label: String, qrels: &QRels, k: usize, search: F) -> EvalReport
where
    F: Fn(ItemId, &BTreeSet<ItemId>) -> ktree::Result<SearchResult> + Sync,
{
    let queries: Vec<ItemId> = qrels.queries().collect();
    let results: Vec<(ItemId, ktree::Result<SearchResult>)> =
        queries.par_iter().map(|&q| (q, search(q, &BTreeSet::from([q])))).collect();
    let mut found = BTreeMap::new();
    let mut failed = BTreeMap::new();
    for (q, r) in results {
        match r {
            Ok(r) => {
                found.insert(q, r);
            }
            Err(e) => {
                failed.insert(q, e.to_string());
            }
        }
    }
    let mut report = evaluate(&found, qrels, k);
    report.method = label;
    for e in &mut report.errors {
        if let Some(m) = failed.remove(&e.query_id) {
            e.message = m;
        }
    }
    report
}

fn tree_label(tree: &KTree, beam: usize, mode: Mode) -> String {
    let suffix = if mode == Mode::Pairwise { "-pairwise" } else { "" };
    format!("tree-b{}-beam{}{suffix}", tree.branching, BeamWidth(beam))
}

fn report_errors(reports: &[EvalReport]) -> bool {
    let mut clean = true;
    for r in reports.iter().filter(|r| !r.is_clean()) {
        clean = false;
        let ids: Vec<String> = r.errors.iter().map(|e| e.query_id.to_string()).collect();
        eprintln!("{}: {} failed queries: {}", r.method, r.errors.len(), ids.join(","));
        for e in r.errors.iter().take(5) {
            eprintln!("  query {}: {}", e.query_id, e.message);
        }
    }
    clean
}

pub fn eval(ctx: &Context, a: EvalArgs) -> Result<Outcome> {
    let (mode, params) = search_params(ctx, &a.search)?;
    let k = ctx.settings.pick(a.k, "k", DEFAULT_CUTOFF)?;
    ensure!(k >= 1, "k must be at least 1");
    let pairwise_tree = mode == Mode::Pairwise && a.methods.contains(&Method::Tree);
    let scorer = if pairwise_tree || a.methods.contains(&Method::ComputeAllPairwise) {
        Some(require_scorer(scorer(ctx, &a.scorer)?)?)
    } else {
        None
    };
    let need_embeddings = a
        .methods
        .iter()
        .any(|m| !matches!(m, Method::ComputeAllPairwise) && !(*m == Method::Tree && mode == Mode::Pairwise));
    let (items, emb) = load_corpus(ctx, &a.corpus, need_embeddings)?;
    let qrels = QRels::load(&a.qrels)?;
    qrels.validate(items.len())?;
    ensure!(!qrels.is_empty(), "qrels file has no queries");
    let emb = || emb.as_ref().expect("embeddings loaded");
    let top_n = params.top_n;

    let mut reports = Vec::new();
    for method in &a.methods {
        match method {
            Method::Tree => {
                ensure!(!a.trees.is_empty(), "--method tree needs at least one --tree");
                for path in &a.trees {
                    let tree = deserialize_tree(path)?;
                    let search_mode = match &scorer {
                        Some(s) if mode == Mode::Pairwise => SearchMode::Pairwise { items: &items, scorer: s.as_ref() },
                        _ => SearchMode::Vector { embeddings: emb() },
                    };
                    let label = tree_label(&tree, params.beam_width, mode);
                    reports.push(run_method(label, &qrels, k, |q, _| {
                        let query = match search_mode {
                            SearchMode::Vector { embeddings } => Query::Vector(embeddings.vector(q).to_vec()),
                            SearchMode::Pairwise { items, .. } => Query::Text(items.text(q).unwrap_or_default().into()),
                        };
                        search_one(&tree, &BatchQuery { query, exclude_ids: vec![q] }, &params, search_mode)
                    }));
                }
            }
            Method::ComputeAll | Method::ComputeAllEuclidean => {
                let (label, metric) = match method {
                    Method::ComputeAll => ("compute-all", Metric::Cosine),
                    _ => ("compute-all-euclidean", Metric::Euclidean),
                };
                reports.push(run_method(label.into(), &qrels, k, |q, ex| {
                    brute_force_topn(emb(), emb().vector(q), metric, top_n, ex)
                }));
            }
            Method::Kdtree => {
                let kd = kdtree_build(emb())?;
                reports.push(run_method("kdtree".into(), &qrels, k, |q, ex| {
                    kdtree_topn(&kd, emb(), emb().vector(q), Metric::Euclidean, top_n, ex)
                }));
            }
            Method::ComputeAllPairwise => {
                let scorer = scorer.as_deref().expect("scorer resolved");
                reports.push(run_method("compute-all-pairwise".into(), &qrels, k, |q, ex| {
                    exhaustive_pairwise_topn(&items, items.text(q).unwrap_or_default(), scorer, top_n, ex)
                }));
            }
        }
    }

    let tsv = render_tsv(&reports);
    print!("{tsv}");
    if let Some(path) = &a.report {
        write(path, &tsv)?;
    }
    if let Some(path) = &a.json {
        write(path, serde_json::to_string_pretty(&reports)? + "\n")?;
    }
    Ok(outcome(report_errors(&reports)))
}

fn parse_list<T: std::str::FromStr>(flag: &str, spec: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let values = spec
        .split(',')
        .map(|v| v.trim().parse::<T>().map_err(|e| anyhow::anyhow!("{flag}: {v:?}: {e}")))
        .collect::<Result<Vec<T>>>()?;
    ensure!(!values.is_empty(), "{flag} is empty");
    Ok(values)
}

pub fn bench(ctx: &Context, a: BenchArgs) -> Result<Outcome> {
    let branchings: Vec<usize> = parse_list("--branchings", &a.branchings)?;
    let beams: Vec<BeamWidth> = parse_list("--beam-widths", &a.beam_widths)?;
    ensure!(beams.iter().all(|b| b.0 > 0), "--beam-widths: beam width must be at least 1");
    let configs = branchings
        .iter()
        .map(|&b| tree_config(ctx, &a.tree, Some(b)))
        .collect::<Result<Vec<_>>>()?;
    let s = &ctx.settings;
    let metric = s.pick(a.metric, "metric", Metric::Cosine)?;
    let top_n = s.pick(a.top_n, "top_n", 20)?;
    let k = s.pick(a.k, "k", DEFAULT_CUTOFF)?;
    ensure!(top_n >= 1 && k >= 1, "top_n and k must be at least 1");

    let (_, emb) = load_corpus(ctx, &a.corpus, true)?;
    let emb = emb.expect("embeddings loaded");
    let qrels = QRels::load(&a.qrels)?;
    qrels.validate(emb.len())?;
    ensure!(!qrels.is_empty(), "qrels file has no queries");

    let row = |branching: &str, beam: &str, r: &EvalReport| {
        let line = r.tsv_row();
        let (method, metrics) = line.split_once('\t').expect("report rows have metric columns");
        format!("{method}\t{branching}\t{beam}\t{metrics}")
    };
    println!("method\tbranching\tbeam_width\tMAP\tP@1\tMRR\tNDCG\tMRR@10\tmean_eval_count");
    let mut reports = Vec::new();
    let base = run_method("compute-all".into(), &qrels, k, |q, ex| {
        brute_force_topn(&emb, emb.vector(q), metric, top_n, ex)
    });
    println!("{}", row("-", "-", &base));
    reports.push(base);
    for cfg in &configs {
        let tree = build_tree(&emb, cfg)?;
        for beam in &beams {
            let params = SearchParams { beam_width: beam.0, top_n, metric, exclude_ids: BTreeSet::new() };
            let r = run_method("tree".into(), &qrels, k, |q, _| {
                let query = BatchQuery { query: Query::Vector(emb.vector(q).to_vec()), exclude_ids: vec![q] };
                search_one(&tree, &query, &params, SearchMode::Vector { embeddings: &emb })
            });
            println!("{}", row(&cfg.branching.to_string(), &beam.to_string(), &r));
            reports.push(r);
        }
    }
    if let Some(s) = EvalCountSummary::from_counts(reports.iter().skip(1).flat_map(|r| r.per_query.iter().map(|q| q.eval_count))) {
        eprintln!("tree eval_count range {}..={} over {} searches", s.min, s.max, s.queries);
    }
    Ok(outcome(report_errors(&reports)))
}
