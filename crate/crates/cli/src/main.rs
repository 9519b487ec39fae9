use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ktree::{Init, Metric};

mod commands;
mod settings;

use settings::Settings;

#[derive(Parser)]
#[command(name = "ktree", version, about = "Hierarchical k-means tree retrieval: build, search, evaluate")]
struct Cli {
    /// `key = value` file with defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for tree build and batch search.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build items, qrels and labelled pairs from a question-pair TSV.
    Ingest(IngestArgs),
    /// Write a synthetic corpus with oracle qrels.
    Synth(SynthArgs),
    /// Cluster embeddings into a tree file.
    Build(BuildArgs),
    /// Query a tree.
    Search(SearchArgs),
    /// Score tree search and baselines against qrels.
    Eval(EvalArgs),
    /// Sweep branching × beam width and report accuracy against cost.
    Bench(BenchArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Gaussian mixture; qrels are nearest same-cluster neighbours.
    Gaussian,
    /// Paraphrase pairs whose words encode their cluster.
    Text,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "gaussian")]
    kind: SynthKind,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    /// Points per cluster (pairs per cluster for `--kind text`).
    #[arg(long, default_value_t = 20)]
    per_cluster: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    /// Metric that picks each gaussian item's nearest neighbour for the qrels.
    #[arg(long, default_value = "cosine")]
    metric: Metric,
}

#[derive(Args, Clone)]
struct CorpusArgs {
    #[arg(long)]
    items: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Use embeddings as stored instead of scaling them to unit length.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Args, Clone)]
struct TreeArgs {
    #[arg(long)]
    branching: Option<usize>,
    #[arg(long)]
    leaf_capacity: Option<usize>,
    #[arg(long)]
    rep_count: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// `kmeanspp` or `random`.
    #[arg(long)]
    init: Option<Init>,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    tree: TreeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Vector,
    Pairwise,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        <Mode as ValueEnum>::from_str(s, true)
    }
}

/// Beam width; `inf` keeps every node of each level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BeamWidth(usize);

impl std::str::FromStr for BeamWidth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "inf" | "∞" => Ok(BeamWidth(usize::MAX)),
            v => v.parse().map(BeamWidth).map_err(|_| format!("bad beam width {v:?}")),
        }
    }
}

impl std::fmt::Display for BeamWidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0 == usize::MAX {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Args, Clone)]
struct SearchOpts {
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    beam_width: Option<BeamWidth>,
    #[arg(long)]
    top_n: Option<usize>,
    /// `cosine` or `euclidean` (vector mode).
    #[arg(long)]
    metric: Option<Metric>,
}

#[derive(Args, Clone)]
struct ScorerArgs {
    /// Route pairwise search with the built-in lexical scorer.
    #[arg(long)]
    local_scorer: bool,
    /// Pair-scoring endpoint, e.g. http://host:8080/score.
    #[arg(long)]
    scorer_url: Option<String>,
    #[arg(long)]
    scorer_timeout_ms: Option<u64>,
    #[arg(long)]
    scorer_max_retries: Option<usize>,
    #[arg(long)]
    scorer_batch_limit: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Tsv,
    Json,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    tree: PathBuf,
    #[command(flatten)]
    search: SearchOpts,
    #[command(flatten)]
    scorer: ScorerArgs,
    /// Query with a stored item; repeatable.
    #[arg(long = "query-id")]
    query_ids: Vec<u32>,
    /// File of item ids, one per line.
    #[arg(long)]
    query_file: Option<PathBuf>,
    /// Free-text query (pairwise mode); repeatable.
    #[arg(long = "query-text")]
    query_texts: Vec<String>,
    /// Let an item query return itself.
    #[arg(long)]
    include_self: bool,
    #[arg(long, value_enum, default_value = "tsv")]
    format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Tree,
    ComputeAll,
    ComputeAllEuclidean,
    ComputeAllPairwise,
    Kdtree,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    qrels: PathBuf,
    /// Repeatable; one report row each.
    #[arg(long = "method", value_enum, required = true)]
    methods: Vec<Method>,
    /// Tree files for `--method tree`; repeatable.
    #[arg(long = "tree")]
    trees: Vec<PathBuf>,
    #[command(flatten)]
    search: SearchOpts,
    #[command(flatten)]
    scorer: ScorerArgs,
    /// Ranking cutoff.
    #[arg(long)]
    k: Option<usize>,
    /// Also write the TSV report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write reports with per-query detail as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    qrels: PathBuf,
    #[command(flatten)]
    tree: TreeArgs,
    /// Comma-separated branching factors.
    #[arg(long, default_value = "5,8,10")]
    branchings: String,
    /// Comma-separated beam widths; `inf` for exhaustive.
    #[arg(long, default_value = "1,5,20,inf")]
    beam_widths: String,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    k: Option<usize>,
}

/// Whether every query of the run succeeded.
enum Outcome {
    Clean,
    Partial,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Clean) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let settings = Settings::load(cli.config.as_deref())?;
    if let Some(n) = cli.threads.map(Ok).or_else(|| settings.get("threads").transpose()).transpose()? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let seed = settings.pick(cli.seed, "seed", 0u64)?;
    let ctx = commands::Context { settings, seed };
    match cli.command {
        Command::Ingest(a) => commands::ingest(&ctx, a),
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Build(a) => commands::build(&ctx, a),
        Command::Search(a) => commands::search(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Bench(a) => commands::bench(&ctx, a),
    }
}
