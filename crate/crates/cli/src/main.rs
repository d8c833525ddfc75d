//! `ftrag` — retrieval-augmented multiple-choice QA driven by first-token
//! answer confidence.
//!
//! Typical flow: `ingest` a document set into a chunked corpus,
//! `build-index` per embedding provider, then `ask` single questions or run
//! dataset-level `sweep`, `eval`, and `histogram` commands. Runs are
//! deterministic given a scripted backend and fixed seeds; `--jobs` only
//! changes wall-clock time, never output.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{
    resolve_grid_lists, seeds_of, select_providers, BackendSpec, FileConfig, DEFAULT_BUDGET,
    DEFAULT_MAX_CHUNK_TOKENS, DEFAULT_THETA,
};
use ftrag_core::corpus::{Corpus, CorpusBuilder, HeuristicTokenizer};
use ftrag_core::eval::{
    confidence_histogram, correctness_records, emit_histogram, emit_report, evaluate,
    load_dataset, threshold_report, ReportFormat, ReportMeta,
};
use ftrag_core::inference::{InferenceBackend, Label, MCQuestion, DEFAULT_TEMPLATE};
use ftrag_core::optimizer::{
    sweep as run_sweep, write_sweep_results, ProviderStack, SweepDeps, SweepGrid, SweepMethod,
};
use ftrag_core::vindex::VectorIndex;

static TOKENIZER: HeuristicTokenizer = HeuristicTokenizer;

#[derive(Parser)]
#[command(name = "ftrag", version, about = "Confidence-guided retrieval-augmented MCQA engine")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for dataset commands. Output is identical for any
    /// value.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Threshold,
    BestProbability,
}

#[derive(Args)]
struct RuntimeArgs {
    /// Sealed corpus directory.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Restrict the run to one provider by name.
    #[arg(long)]
    provider: Option<String>,
    /// Index file for the provider selected with --provider.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Define --provider inline as a local hashing embedder of this
    /// dimension.
    #[arg(long)]
    local_dim: Option<usize>,
    /// Seed for an inline local provider.
    #[arg(long)]
    local_seed: Option<u64>,
    /// Scripted-backend fixture JSONL (overrides the configured backend).
    #[arg(long)]
    backend_fixture: Option<PathBuf>,
    /// Context token budget for assembled prompts.
    #[arg(long)]
    budget: Option<usize>,
    /// Sweep method.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Confidence threshold for the threshold method.
    #[arg(long)]
    theta: Option<f64>,
    /// Top-k values to sweep (comma separated).
    #[arg(long, value_delimiter = ',')]
    chunk_numbers: Option<Vec<usize>>,
    /// Window sizes to sweep (comma separated).
    #[arg(long, value_delimiter = ',')]
    window_sizes: Option<Vec<usize>>,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk raw documents into a sealed corpus.
    Ingest {
        /// Directory of *.txt files or a JSONL file of {"doc_id","text"}.
        #[arg(long)]
        input: PathBuf,
        /// Output corpus directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_chunk_tokens: Option<usize>,
        /// Overwrite an existing corpus directory.
        #[arg(long)]
        force: bool,
    },
    /// Embed every chunk with one provider and write its vector index.
    BuildIndex {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Provider name (from the config, or defined inline with
        /// --local-dim).
        #[arg(long)]
        provider: String,
        /// Output index file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        local_dim: Option<usize>,
        #[arg(long)]
        local_seed: Option<u64>,
    },
    /// Answer one question and print the chosen label, confidence, and
    /// winning configuration.
    Ask {
        #[arg(long)]
        question: String,
        /// Repeated option, e.g. --option "A=first choice".
        #[arg(long = "option")]
        options: Vec<String>,
        /// Question id used to key scripted-backend fixtures.
        #[arg(long, default_value = "cli")]
        qid: String,
        /// Machine-readable output.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        runtime: RuntimeArgs,
    },
    /// Run sweeps over a dataset and persist one result per question.
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        /// Output JSONL of sweep results.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        runtime: RuntimeArgs,
    },
    /// Aggregate a dataset into an accuracy report (or threshold-coverage
    /// reports with --coverage).
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Report path.
        #[arg(long)]
        out: PathBuf,
        /// Report encoding: json or csv.
        #[arg(long, default_value = "json")]
        format: String,
        /// Also persist per-question sweep results as JSONL.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Emit threshold-coverage reports instead of the accuracy table.
        #[arg(long)]
        coverage: bool,
        /// Thresholds for --coverage (comma separated).
        #[arg(long, value_delimiter = ',')]
        thetas: Option<Vec<f64>>,
        #[command(flatten)]
        runtime: RuntimeArgs,
    },
    /// Confidence histogram (CSV) from persisted sweep results.
    Histogram {
        /// Dataset with gold labels.
        #[arg(long)]
        dataset: PathBuf,
        /// Sweep-result JSONL produced by `sweep` or `eval --records`.
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let file_config = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let jobs = cli.jobs.or(file_config.jobs).unwrap_or(1);
    match cli.command {
        Command::Ingest {
            input,
            out,
            max_chunk_tokens,
            force,
        } => cmd_ingest(&file_config, &input, &out, max_chunk_tokens, force),
        Command::BuildIndex {
            corpus,
            provider,
            out,
            local_dim,
            local_seed,
        } => cmd_build_index(
            &file_config,
            corpus.as_deref(),
            &provider,
            &out,
            local_dim,
            local_seed,
        ),
        Command::Ask {
            question,
            options,
            qid,
            json,
            runtime,
        } => cmd_ask(&file_config, &runtime, &question, &options, &qid, json),
        Command::Sweep {
            dataset,
            out,
            runtime,
        } => with_pool(jobs, || cmd_sweep(&file_config, &runtime, &dataset, &out)),
        Command::Eval {
            dataset,
            out,
            format,
            records,
            coverage,
            thetas,
            runtime,
        } => with_pool(jobs, || {
            cmd_eval(
                &file_config,
                &runtime,
                &dataset,
                &out,
                &format,
                records.as_deref(),
                coverage,
                thetas.as_deref(),
            )
        }),
        Command::Histogram {
            dataset,
            records,
            bins,
            out,
        } => cmd_histogram(&dataset, &records, bins, &out),
    }
}

fn with_pool<T>(jobs: usize, run: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .context("building worker pool")?;
    pool.install(run)
}

// ---------------------------------------------------------------------------
// ingest / build-index
// ---------------------------------------------------------------------------

fn cmd_ingest(
    config: &FileConfig,
    input: &Path,
    out: &Path,
    max_chunk_tokens: Option<usize>,
    force: bool,
) -> Result<()> {
    if out.join("manifest.json").exists() && !force {
        bail!(
            "corpus already exists at {}; pass --force to overwrite",
            out.display()
        );
    }
    let max_tokens = max_chunk_tokens
        .or(config.max_chunk_tokens)
        .unwrap_or(DEFAULT_MAX_CHUNK_TOKENS);
    let mut builder = CorpusBuilder::new(max_tokens, std::sync::Arc::new(HeuristicTokenizer))?;
    let added = if input.is_dir() {
        builder.add_text_dir(input)?
    } else {
        builder.add_jsonl(input)?
    };
    if added == 0 {
        bail!("no documents found in {}", input.display());
    }
    let corpus = builder.seal()?;
    corpus.save(out)?;
    println!(
        "ingested {} documents into {} chunks (max {} tokens) at {}",
        corpus.documents().len(),
        corpus.chunks().len(),
        max_tokens,
        out.display()
    );
    Ok(())
}

fn cmd_build_index(
    config: &FileConfig,
    corpus_flag: Option<&Path>,
    provider_name: &str,
    out: &Path,
    local_dim: Option<usize>,
    local_seed: Option<u64>,
) -> Result<()> {
    let corpus = load_corpus(config, corpus_flag)?;
    let specs = select_providers(config, Some(provider_name), local_dim, local_seed, None)?;
    let spec = &specs[0];
    let provider = spec.build()?;
    let texts: Vec<&str> = corpus.chunks().iter().map(|c| c.text.as_str()).collect();
    let vectors = provider.embed_batch(&texts)?;
    let mut index = VectorIndex::new(provider.id().clone());
    for (chunk, vec) in corpus.chunks().iter().zip(&vectors) {
        index.add(chunk.chunk_id, vec)?;
    }
    index.save(out)?;
    println!(
        "indexed {} chunks with provider `{}` (dim {}) into {}",
        index.len(),
        provider.id().name,
        provider.id().dim,
        out.display()
    );
    Ok(())
}

fn load_corpus(config: &FileConfig, flag: Option<&Path>) -> Result<Corpus> {
    let path = flag
        .map(Path::to_path_buf)
        .or_else(|| config.corpus.clone())
        .context("no corpus given; pass --corpus or set `corpus` in the config")?;
    Ok(Corpus::load(&path)?)
}

// ---------------------------------------------------------------------------
// runtime assembly for ask / sweep / eval
// ---------------------------------------------------------------------------

struct Runtime {
    corpus: Corpus,
    stacks: Vec<ProviderStack>,
    backend: Box<dyn InferenceBackend>,
    grid: SweepGrid,
    budget: usize,
    method: SweepMethod,
    theta: f64,
    seeds: BTreeMap<String, u64>,
}

impl Runtime {
    fn deps(&self) -> SweepDeps<'_> {
        SweepDeps {
            corpus: &self.corpus,
            stacks: &self.stacks,
            backend: self.backend.as_ref(),
            tokenizer: &TOKENIZER,
            budget: self.budget,
            template_id: DEFAULT_TEMPLATE,
        }
    }

    fn meta(&self) -> ReportMeta {
        ReportMeta {
            method: self.method.clone(),
            grid: self.grid.clone(),
            budget: self.budget,
            seeds: self.seeds.clone(),
        }
    }
}

fn build_runtime(config: &FileConfig, args: &RuntimeArgs) -> Result<Runtime> {
    let corpus = load_corpus(config, args.corpus.as_deref())?;

    let specs = select_providers(
        config,
        args.provider.as_deref(),
        args.local_dim,
        args.local_seed,
        args.index.as_deref(),
    )?;
    let mut stacks = Vec::new();
    for spec in &specs {
        let index_path = spec.index_path().with_context(|| {
            format!(
                "provider `{}` has no index path; run build-index and set `index` (or pass --index)",
                spec.name()
            )
        })?;
        let index = VectorIndex::load(index_path)
            .with_context(|| format!("loading index {}", index_path.display()))?;
        if index.provider() != &spec.provider_id() {
            bail!(
                "index {} was built with provider `{}` (dim {}), config says `{}` (dim {})",
                index_path.display(),
                index.provider().name,
                index.provider().dim,
                spec.name(),
                spec.provider_id().dim
            );
        }
        stacks.push(ProviderStack::new(spec.build()?, index));
    }

    let backend: Box<dyn InferenceBackend> = match &args.backend_fixture {
        Some(path) => BackendSpec::Scripted {
            fixture: path.clone(),
        }
        .build()?,
        None => config
            .backend
            .as_ref()
            .context("no backend configured; set [backend] in the config or pass --backend-fixture")?
            .build()?,
    };

    let theta = args.theta.or(config.theta).unwrap_or(DEFAULT_THETA);
    let method = match args.method {
        Some(MethodArg::Threshold) => SweepMethod::Threshold { theta },
        Some(MethodArg::BestProbability) => SweepMethod::BestProbability,
        None => match config.method.as_deref() {
            Some("threshold") => SweepMethod::Threshold { theta },
            Some("best-probability") | Some("best_probability") | None => {
                SweepMethod::BestProbability
            }
            Some(other) => bail!("unknown method `{other}` in config"),
        },
    };

    let (chunk_numbers, window_sizes) = resolve_grid_lists(
        args.chunk_numbers.as_deref(),
        args.window_sizes.as_deref(),
        config,
    );
    let grid = SweepGrid::new(
        chunk_numbers,
        window_sizes,
        specs.iter().map(|s| s.provider_id()).collect(),
    )?;

    Ok(Runtime {
        corpus,
        stacks,
        backend,
        grid,
        budget: args.budget.or(config.budget).unwrap_or(DEFAULT_BUDGET),
        method,
        theta,
        seeds: seeds_of(&specs),
    })
}

// ---------------------------------------------------------------------------
// ask
// ---------------------------------------------------------------------------

fn parse_options(raw: &[String]) -> Result<BTreeMap<Label, String>> {
    if raw.is_empty() {
        bail!("at least two --option flags are required, e.g. --option \"A=first\"");
    }
    let mut options = BTreeMap::new();
    for entry in raw {
        let (label, text) = entry
            .split_once('=')
            .with_context(|| format!("option `{entry}` must look like LABEL=text"))?;
        let label = Label::try_from(label.trim().to_string())
            .map_err(|e| anyhow::anyhow!("option `{entry}`: {e}"))?;
        if options.insert(label, text.trim().to_string()).is_some() {
            bail!("duplicate option label `{label}`");
        }
    }
    Ok(options)
}

fn cmd_ask(
    config: &FileConfig,
    args: &RuntimeArgs,
    question_text: &str,
    raw_options: &[String],
    qid: &str,
    json: bool,
) -> Result<()> {
    let runtime = build_runtime(config, args)?;
    let options = parse_options(raw_options)?;
    let question = MCQuestion::new(qid, question_text, options, None)?;
    let result = run_sweep(&question, &runtime.grid, &runtime.method, &runtime.deps())?;

    if json {
        let payload = serde_json::json!({
            "qid": result.qid,
            "chosen": result.final_result.chosen,
            "confidence": result.final_result.confidence,
            "normalized": result.final_result.normalized,
            "winning_config": {
                "k": result.winning_config.k,
                "window": result.winning_config.window,
                "provider": result.winning_config.provider.name,
            },
            "visited": result.records.len(),
            "grid_size": runtime.grid.len(),
            "exhausted": result.exhausted,
        });
        println!("{}", serde_json::to_string(&payload)?);
    } else {
        println!("answer: {}", result.final_result.chosen);
        println!("confidence: {:.4}", result.final_result.confidence);
        println!(
            "config: k={} window={} provider={}",
            result.winning_config.k,
            result.winning_config.window,
            result.winning_config.provider.name
        );
        println!(
            "visited: {} of {} configs{}",
            result.records.len(),
            runtime.grid.len(),
            if result.exhausted {
                " (exhausted)"
            } else {
                " (early exit)"
            }
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep / eval / histogram
// ---------------------------------------------------------------------------

fn cmd_sweep(
    config: &FileConfig,
    args: &RuntimeArgs,
    dataset_path: &Path,
    out: &Path,
) -> Result<()> {
    use rayon::prelude::*;
    let runtime = build_runtime(config, args)?;
    let dataset = load_dataset(dataset_path)?;
    let deps = runtime.deps();
    let outcomes: Vec<_> = dataset
        .par_iter()
        .map(|q| run_sweep(q, &runtime.grid, &runtime.method, &deps))
        .collect();
    let mut results = Vec::with_capacity(dataset.len());
    for (q, outcome) in dataset.iter().zip(outcomes) {
        results.push(outcome.with_context(|| format!("question `{}`", q.qid))?);
    }
    write_sweep_results(out, &results)?;
    println!(
        "swept {} questions x {} configs into {}",
        results.len(),
        runtime.grid.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: &FileConfig,
    args: &RuntimeArgs,
    dataset_path: &Path,
    out: &Path,
    format: &str,
    records_out: Option<&Path>,
    coverage: bool,
    thetas: Option<&[f64]>,
) -> Result<()> {
    let runtime = build_runtime(config, args)?;
    let dataset = load_dataset(dataset_path)?;

    if coverage {
        let thetas: Vec<f64> = match thetas.filter(|t| !t.is_empty()) {
            Some(list) => list.to_vec(),
            None => vec![runtime.theta],
        };
        let mut reports = Vec::new();
        for &theta in &thetas {
            let (mut report, _) = threshold_report(&dataset, &runtime.grid, theta, &runtime.deps())?;
            report.meta = Some(ReportMeta {
                method: SweepMethod::Threshold { theta },
                ..runtime.meta()
            });
            println!(
                "theta {theta}: answered {} of {} (accuracy {:.4})",
                report.answered_count, report.n_questions, report.answered_accuracy
            );
            reports.push(report);
        }
        let mut bytes = serde_json::to_vec_pretty(&reports)?;
        bytes.push(b'\n');
        ftrag_core::corpus::write_atomic(out, &bytes)
            .with_context(|| format!("writing {}", out.display()))?;
        println!("wrote coverage reports to {}", out.display());
        return Ok(());
    }

    let format: ReportFormat = format.parse()?;
    let evaluation = evaluate(&dataset, &runtime.grid, &runtime.method, &runtime.deps())?;
    let mut report = evaluation.report;
    report.meta = Some(runtime.meta());
    emit_report(&report, format, out)?;
    if let Some(path) = records_out {
        write_sweep_results(path, &evaluation.sweeps)?;
    }
    println!(
        "evaluated {} questions: combined accuracy {:.4}, no-RAG {:.4}, report at {}",
        report.n_questions,
        report.combined_all_providers,
        report.no_rag_accuracy,
        out.display()
    );
    Ok(())
}

fn cmd_histogram(dataset_path: &Path, records: &Path, bins: usize, out: &Path) -> Result<()> {
    let dataset = load_dataset(dataset_path)?;
    let sweeps = ftrag_core::optimizer::read_sweep_results(records)?;
    let pairs = correctness_records(&dataset, &sweeps)?;
    if pairs.is_empty() {
        bail!("no sweep results matched the dataset's question ids");
    }
    let hist = confidence_histogram(&pairs, bins)?;
    emit_histogram(&hist, out)?;
    println!(
        "histogram over {} predictions ({} bins) at {}",
        pairs.len(),
        bins,
        out.display()
    );
    Ok(())
}
