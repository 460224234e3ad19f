use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use linkrr::config::{ConfigError, ProviderKind, RunConfig};
use linkrr::eval::{run_experiment, sample_candidate_set, sample_pairs, EvalReport, Pipeline};
use linkrr::graph::{load_graph, load_jsonl, save_graph, split_edges};
use linkrr::microdecoder::{kv_bench, MicroDecoder};
use linkrr::pairwise::{train_combiner, CombinerParams};
use linkrr::par::{self, Execution};
use linkrr::rerank::{rerank_candidates, select_icl_examples};
use linkrr::retrieval::{
    generate_queries, retrieve_candidates, Bm25Index, CandidateSet, QueryGenerator, QueryRequest,
    TemplateGenerator,
};
use linkrr::scorers::{HeuristicProvider, LogitProvider, RemoteClient, RemoteGenerator};
use linkrr::text_align::{neighborhood_text_table, HashedBowEmbedder};
use linkrr::{EdgeSplit, Error, TextAttributedGraph};

#[derive(Parser)]
#[command(name = "linkrr", version, about = "Retrieval-rerank link prediction")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    execution: Option<ExecArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecArg {
    Sequential,
    Parallel,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    /// Rerank every sampled candidate.
    Rank,
    /// Retrieve `--nc` candidates, then rerank them.
    RetrieveRerank,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Heuristic,
    Remote,
}

#[derive(Subcommand)]
enum Command {
    /// Read node and edge JSONL files into a graph file.
    Ingest {
        #[arg(long)]
        nodes: Option<PathBuf>,
        #[arg(long)]
        edges: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Split a graph's edges into train/valid/test.
    Split {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Write hashed bag-of-words node embeddings, optionally with the
    /// neighborhood mean appended.
    Embed {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        neighborhood: bool,
    },
    /// Train the pairwise combiner on the train edges.
    TrainPairwise {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Sample candidate sets for test pairs and narrow them by retrieval.
    Retrieve {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long = "NC")]
        total: Option<usize>,
        #[arg(long = "nc")]
        retrieved: Option<usize>,
        #[arg(long)]
        num_pairs: Option<usize>,
        #[arg(long, value_enum)]
        provider: Option<ProviderArg>,
    },
    /// Rerank candidate sets written by `retrieve`.
    Rerank {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long)]
        ranked: Option<PathBuf>,
        #[arg(long, value_enum)]
        provider: Option<ProviderArg>,
    },
    /// Run an end-to-end ranking experiment and write a JSON report.
    Eval {
        #[arg(long, value_enum)]
        protocol: Option<ProtocolArg>,
        #[arg(long = "NC")]
        total: Option<usize>,
        #[arg(long = "nc")]
        retrieved: Option<usize>,
        #[arg(long)]
        num_pairs: Option<usize>,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum)]
        provider: Option<ProviderArg>,
    },
    /// Count attention work with and without shared-prefix cache reuse.
    Kvbench {
        #[arg(long)]
        ms: Option<usize>,
        #[arg(long)]
        mt: Option<usize>,
        #[arg(long)]
        nc: Option<usize>,
    },
}

enum Failure {
    Config(ConfigError),
    Runtime(Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl<E: Into<Error>> From<E> for Failure
where
    E: NotConfig,
{
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

trait NotConfig {}
impl NotConfig for Error {}
impl NotConfig for linkrr::graph::GraphError {}
impl NotConfig for linkrr::pairwise::PairwiseError {}
impl NotConfig for linkrr::text_align::TextAlignError {}
impl NotConfig for linkrr::retrieval::RetrievalError {}
impl NotConfig for linkrr::rerank::RerankError {}
impl NotConfig for linkrr::scorers::ProviderError {}
impl NotConfig for linkrr::microdecoder::DecoderError {}
impl NotConfig for linkrr::eval::EvalError {}
impl NotConfig for std::io::Error {}
impl NotConfig for serde_json::Error {}

type Outcome = Result<(), Failure>;

fn set(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn override_with<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn apply_provider(cfg: &mut RunConfig, flag: Option<ProviderArg>) {
    if let Some(p) = flag {
        cfg.provider = match p {
            ProviderArg::Heuristic => ProviderKind::Heuristic,
            ProviderArg::Remote => ProviderKind::Remote,
        };
    }
}

/// Fold command-line flags into the config; flags win.
fn apply_flags(cli: &mut Cli, cfg: &mut RunConfig) {
    override_with(&mut cfg.seed, cli.seed);
    override_with(&mut cfg.workers, cli.workers);
    if let Some(e) = cli.execution {
        cfg.execution = match e {
            ExecArg::Sequential => Execution::Sequential,
            ExecArg::Parallel => Execution::Parallel,
        };
    }
    let p = &mut cfg.paths;
    match &mut cli.command {
        Command::Ingest { nodes, edges, graph } => {
            set(&mut p.nodes, nodes.take());
            set(&mut p.edges, edges.take());
            set(&mut p.graph, graph.take());
        }
        Command::Split { graph, split } => {
            set(&mut p.graph, graph.take());
            set(&mut p.split, split.take());
        }
        Command::Embed {
            graph,
            split,
            embeddings,
            dim,
            ..
        } => {
            set(&mut p.graph, graph.take());
            set(&mut p.split, split.take());
            set(&mut p.embeddings, embeddings.take());
            override_with(&mut cfg.embed.dim, *dim);
        }
        Command::TrainPairwise {
            graph,
            split,
            params,
            epochs,
        } => {
            set(&mut p.graph, graph.take());
            set(&mut p.split, split.take());
            set(&mut p.params, params.take());
            override_with(&mut cfg.pairwise.train.epochs, *epochs);
        }
        Command::Retrieve {
            graph,
            split,
            candidates,
            total,
            retrieved,
            num_pairs,
            provider,
        } => {
            set(&mut p.graph, graph.take());
            set(&mut p.split, split.take());
            set(&mut p.candidates, candidates.take());
            override_with(&mut cfg.eval.candidates, *total);
            override_with(&mut cfg.eval.retrieved, *retrieved);
            override_with(&mut cfg.eval.num_pairs, *num_pairs);
            apply_provider(cfg, *provider);
        }
        Command::Rerank {
            graph,
            split,
            params,
            candidates,
            ranked,
            provider,
        } => {
            set(&mut p.graph, graph.take());
            set(&mut p.split, split.take());
            set(&mut p.params, params.take());
            set(&mut p.candidates, candidates.take());
            set(&mut p.ranked, ranked.take());
            apply_provider(cfg, *provider);
        }
        Command::Eval {
            protocol,
            total,
            retrieved,
            num_pairs,
            graph,
            split,
            params,
            report,
            provider,
        } => {
            set(&mut p.graph, graph.take());
            set(&mut p.split, split.take());
            set(&mut p.params, params.take());
            set(&mut p.report, report.take());
            override_with(&mut cfg.eval.candidates, *total);
            override_with(&mut cfg.eval.retrieved, *retrieved);
            override_with(&mut cfg.eval.num_pairs, *num_pairs);
            if let Some(ProtocolArg::Rank) = protocol {
                cfg.eval.retrieved = 0;
            }
            apply_provider(cfg, *provider);
        }
        Command::Kvbench { ms, mt, nc } => {
            override_with(&mut cfg.kvbench.m_s, *ms);
            override_with(&mut cfg.kvbench.m_t, *mt);
            override_with(&mut cfg.kvbench.n_c, *nc);
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), Error> {
    let mut out = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, Error> {
    let mut rows = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok(rows)
}

fn load_split(cfg: &RunConfig, graph: &TextAttributedGraph) -> Result<EdgeSplit, Error> {
    let split = EdgeSplit::load(cfg.path("split").expect("checked"))?;
    split.validate(graph)?;
    Ok(split)
}

struct Scorer {
    provider: Box<dyn LogitProvider>,
    generator: Box<dyn QueryGenerator>,
}

/// Paths a provider needs, checked up front.
fn provider_paths(cfg: &RunConfig) -> Result<(), ConfigError> {
    if cfg.provider == ProviderKind::Heuristic {
        if let Some(p) = &cfg.paths.params {
            if !p.exists() {
                return Err(ConfigError::MissingFile {
                    key: "paths.params".into(),
                    path: p.clone(),
                });
            }
        }
    }
    Ok(())
}

fn build_scorer(
    cfg: &RunConfig,
    observed: &Arc<TextAttributedGraph>,
    split: &EdgeSplit,
) -> Result<Scorer, Error> {
    match cfg.provider {
        ProviderKind::Heuristic => {
            let structure = cfg.structure();
            let params = match &cfg.paths.params {
                Some(p) => CombinerParams::load(p)?,
                None => {
                    log::info!("no paths.params given; training a combiner on the train split");
                    train_combiner(observed, &split.train, &structure, &cfg.train_config(), cfg.execution)?
                        .params
                }
            };
            Ok(Scorer {
                provider: Box::new(HeuristicProvider::new(Arc::clone(observed), structure, params)?),
                generator: Box::new(TemplateGenerator),
            })
        }
        ProviderKind::Remote => {
            let client = Arc::new(RemoteClient::new(cfg.remote.clone())?);
            Ok(Scorer {
                provider: Box::new(Arc::clone(&client)),
                generator: Box::new(RemoteGenerator::new(client)),
            })
        }
    }
}

fn ingest(cfg: &RunConfig) -> Outcome {
    let nodes = cfg.existing_path("nodes")?;
    let edges = cfg.existing_path("edges")?;
    let out = cfg.path("graph")?;
    let (graph, stats) = load_jsonl(nodes, edges)?;
    save_graph(&graph, out)?;
    log::info!(
        "ingested {} nodes and {} edges ({} self-loops, {} duplicates dropped)",
        graph.node_count(),
        graph.edge_count(),
        stats.self_loops_dropped,
        stats.duplicate_edges_dropped
    );
    Ok(())
}

fn split(cfg: &RunConfig) -> Outcome {
    let graph = load_graph(cfg.existing_path("graph")?)?;
    let out = cfg.path("split")?;
    let s = &cfg.split;
    let split = split_edges(&graph, (s.train, s.valid, s.test), cfg.seed)?;
    split.save(out)?;
    log::info!(
        "split {} edges into {}/{}/{}",
        graph.edge_count(),
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    Ok(())
}

fn embed(cfg: &RunConfig, neighborhood: bool) -> Outcome {
    let graph = load_graph(cfg.existing_path("graph")?)?;
    let out = cfg.path("embeddings")?;
    if neighborhood {
        cfg.existing_path("split")?;
    }
    let embedder = HashedBowEmbedder::new(cfg.embed.dim)?;
    let raw = embedder.embed_graph(&graph);
    let table = if neighborhood {
        let split = load_split(cfg, &graph)?;
        let observed = graph.with_edges(&split.train)?;
        neighborhood_text_table(&raw, &observed)?
    } else {
        raw
    };
    table.save(out)?;
    log::info!("wrote {}x{} embeddings", table.rows(), table.dim());
    Ok(())
}

fn train(cfg: &RunConfig) -> Outcome {
    let graph = load_graph(cfg.existing_path("graph")?)?;
    cfg.existing_path("split")?;
    let out = cfg.path("params")?;
    let split = load_split(cfg, &graph)?;
    let observed = graph.with_edges(&split.train)?;
    let trained = train_combiner(
        &observed,
        &split.train,
        &cfg.structure(),
        &cfg.train_config(),
        cfg.execution,
    )?;
    trained.params.save(out)?;
    log::info!(
        "trained combiner: loss {:.4} -> {:.4}",
        trained.losses.first().copied().unwrap_or(f64::NAN),
        trained.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn retrieve(cfg: &RunConfig) -> Outcome {
    let graph = load_graph(cfg.existing_path("graph")?)?;
    cfg.existing_path("split")?;
    let out = cfg.path("candidates")?;
    let split = load_split(cfg, &graph)?;
    let observed = Arc::new(graph.with_edges(&split.train)?);
    let generator: Box<dyn QueryGenerator> = match cfg.provider {
        ProviderKind::Heuristic => Box::new(TemplateGenerator),
        ProviderKind::Remote => Box::new(RemoteGenerator::new(Arc::new(RemoteClient::new(
            cfg.remote.clone(),
        )?))),
    };
    let index = Bm25Index::for_graph(&observed, &cfg.retrieval);
    let protocol = cfg.protocol();
    protocol.validate()?;
    let pairs = sample_pairs(&split, protocol.num_pairs, protocol.seed);
    let sets = par::map(cfg.execution, &pairs, |&(source, positive, seed)| -> Result<CandidateSet, Error> {
        let sampled = sample_candidate_set(&graph, source, positive, protocol.candidates, seed)?;
        if protocol.retrieved == 0 {
            return Ok(sampled);
        }
        let request = QueryRequest {
            graph: &observed,
            source,
            n_groups: cfg.retrieval.n_groups,
            group_size: cfg.retrieval.group_size,
            seed,
        };
        let queries = generate_queries(generator.as_ref(), &request)?;
        Ok(retrieve_candidates(
            &observed,
            &index,
            source,
            &queries,
            &sampled,
            protocol.retrieved,
            cfg.retrieval.beta,
            Execution::Sequential,
        )?)
    });
    let sets: Vec<CandidateSet> = sets.into_iter().collect::<Result<_, _>>()?;
    write_jsonl(out, &sets)?;
    log::info!("wrote {} candidate sets", sets.len());
    Ok(())
}

fn rerank(cfg: &RunConfig) -> Outcome {
    let graph = load_graph(cfg.existing_path("graph")?)?;
    cfg.existing_path("split")?;
    let input = cfg.existing_path("candidates")?;
    let out = cfg.path("ranked")?;
    provider_paths(cfg)?;
    let split = load_split(cfg, &graph)?;
    let observed = Arc::new(graph.with_edges(&split.train)?);
    let scorer = build_scorer(cfg, &observed, &split)?;
    let sets: Vec<CandidateSet> = read_jsonl(input)?;
    let mut ranked = Vec::with_capacity(sets.len());
    for (i, set) in sets.iter().enumerate() {
        set.check()?;
        let seed = cfg.seed.wrapping_add(i as u64);
        let examples = select_icl_examples(&observed, set.source, cfg.rerank.icl_k, seed)?;
        ranked.push(rerank_candidates(
            scorer.provider.as_ref(),
            &observed,
            set,
            &examples,
            &cfg.rerank,
            cfg.execution,
        )?);
    }
    write_jsonl(out, &ranked)?;
    log::info!("ranked {} candidate sets", ranked.len());
    Ok(())
}

fn eval(cfg: &RunConfig) -> Outcome {
    let graph = load_graph(cfg.existing_path("graph")?)?;
    cfg.existing_path("split")?;
    let out = cfg.path("report")?;
    provider_paths(cfg)?;
    let split = load_split(cfg, &graph)?;
    let observed = Arc::new(graph.with_edges(&split.train)?);
    let scorer = build_scorer(cfg, &observed, &split)?;
    let index = Bm25Index::for_graph(&observed, &cfg.retrieval);
    let pipeline = Pipeline {
        observed: &observed,
        index: &index,
        generator: scorer.generator.as_ref(),
        provider: scorer.provider.as_ref(),
        retrieval: cfg.retrieval,
        rerank: cfg.rerank,
    };
    let report: EvalReport = run_experiment(&graph, &split, &cfg.protocol(), &pipeline, cfg.execution)?;
    write_json(out, &report)?;
    let m = report.metrics;
    log::info!(
        "{} pairs: MRR {:.4}, Hits@1 {:.4}, Hits@{} {:.4}",
        report.pairs.len(),
        m.mrr,
        m.hits_at_1,
        m.k,
        m.hits_at_k
    );
    Ok(())
}

fn kvbench(cfg: &RunConfig) -> Outcome {
    let decoder = MicroDecoder::new(cfg.decoder_config())?;
    let kv = &cfg.kvbench;
    let report = kv_bench(&decoder, kv.m_s, kv.m_t, kv.n_c, cfg.seed)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    Ok(())
}

fn run(mut cli: Cli) -> Outcome {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(ConfigError::Read {
                    path: path.clone(),
                    source: std::io::Error::from(std::io::ErrorKind::NotFound),
                }
                .into());
            }
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    apply_flags(&mut cli, &mut cfg);
    cfg.validate()?;
    par::init_workers(cfg.workers);
    match cli.command {
        Command::Ingest { .. } => ingest(&cfg),
        Command::Split { .. } => split(&cfg),
        Command::Embed { neighborhood, .. } => embed(&cfg, neighborhood),
        Command::TrainPairwise { .. } => train(&cfg),
        Command::Retrieve { .. } => retrieve(&cfg),
        Command::Rerank { .. } => rerank(&cfg),
        Command::Eval { .. } => eval(&cfg),
        Command::Kvbench { .. } => kvbench(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: config: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
