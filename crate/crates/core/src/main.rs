use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ceil::clustering::{centroid_soft_assignment, gmm_fit, hard_assign, kmeans, ClusterResult};
use ceil::corpus::{build_vocabulary, load_jsonl, synth_corpus, Corpus, Vocabulary};
use ceil::encoder::{encode_batch, init_params, EncoderMode, PromptTemplate};
use ceil::error::{CeilError, Result};
use ceil::eval::metrics_report;
use ceil::objective::{Centroids, SoftAssignment};
use ceil::pipeline::{read_assignments, run_ceil, write_artifacts, Backend, CeilConfig};

#[derive(Parser)]
#[command(name = "ceil", about = "Iterative short-text clustering toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the RNG seed from the config
    #[arg(long)]
    seed: Option<u64>,
    /// Override the corpus path from the config
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for output artifacts
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Single-shot clustering with the configured backend
    Cluster(RunArgs),
    /// Full iterative clustering/classification loop
    Ceil(RunArgs),
    /// Compute metrics from an assignment TSV against gold labels
    Eval {
        /// assignments.tsv with doc_id<TAB>cluster rows
        #[arg(long)]
        pred: PathBuf,
        /// JSONL corpus carrying gold labels
        #[arg(long)]
        gold: PathBuf,
    },
    /// Generate a synthetic labeled corpus as JSONL
    Synth {
        #[arg(long)]
        k: usize,
        /// Documents per cluster
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        tokens_per_cluster: usize,
        #[arg(long, default_value_t = 10)]
        doc_len: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output JSONL path
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &RunArgs) -> Result<CeilConfig> {
    let mut config = match &args.config {
        Some(path) => CeilConfig::from_file(path)?,
        None => CeilConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(data) = &args.data {
        config.data = Some(data.display().to_string());
    }
    for warning in config.validate()? {
        eprintln!("warning: {warning}");
    }
    Ok(config)
}

fn load_corpus(config: &CeilConfig) -> Result<(Corpus, Vocabulary)> {
    let path = config.data.as_ref().ok_or_else(|| {
        CeilError::Config("no corpus path: set data= in the config or pass --data".into())
    })?;
    let tokenized = load_jsonl(path)?;
    for warning in &tokenized.warnings {
        eprintln!("warning: {warning}");
    }
    let vocab = build_vocabulary(&tokenized, config.min_df)?;
    let corpus = Corpus::from_tokenized(&tokenized, &vocab);
    Ok((corpus, vocab))
}

fn cmd_cluster(args: &RunArgs) -> Result<()> {
    let config = load_config(args)?;
    let (corpus, vocab) = load_corpus(&config)?;
    let template = PromptTemplate::parse(&config.template)?;
    let mut params = init_params(
        config.seed,
        vocab.len(),
        config.embed_dim,
        config.repr_dim,
        EncoderMode::MeanPool,
    )?;
    let result = match config.backend {
        Backend::Cdcc => {
            let mut train = config.train.clone();
            train.seed = config.seed;
            ceil::clustering::cdcc_train(&corpus, &vocab, &template, &mut params, &train, config.k)?
        }
        Backend::Gmm => {
            let doc_refs: Vec<_> = corpus.docs.iter().collect();
            let reps = encode_batch(&params, &doc_refs, &template, &vocab, None)?;
            let gmm = gmm_fit(&reps, config.k, config.seed)?;
            ClusterResult {
                assignments: gmm.assignments,
                q: SoftAssignment {
                    q: gmm.responsibilities,
                },
                centroids: Centroids { mu: gmm.means },
                history: Vec::new(),
            }
        }
        Backend::Kmeans => {
            let doc_refs: Vec<_> = corpus.docs.iter().collect();
            let reps = encode_batch(&params, &doc_refs, &template, &vocab, None)?;
            let km = kmeans(&reps, config.k, config.seed)?;
            let q = centroid_soft_assignment(&reps, &km.centroids, config.train.weights.alpha)?;
            ClusterResult {
                assignments: hard_assign(&q),
                q,
                centroids: Centroids { mu: km.centroids },
                history: Vec::new(),
            }
        }
    };
    let gold = corpus.gold_labels();
    write_artifacts(&args.out_dir, &result, &[], gold.as_deref())
}

fn cmd_ceil(args: &RunArgs) -> Result<()> {
    let config = load_config(args)?;
    let (corpus, vocab) = load_corpus(&config)?;
    let mut records = Vec::new();
    let outcome = run_ceil(&corpus, &vocab, &config, &mut records)?;
    let gold = corpus.gold_labels();
    write_artifacts(&args.out_dir, &outcome.result, &records, gold.as_deref())
}

fn cmd_eval(pred: &PathBuf, gold_path: &PathBuf) -> Result<()> {
    let pred = read_assignments(pred)?;
    let tokenized = load_jsonl(gold_path)?;
    let gold: Vec<usize> = tokenized
        .docs
        .iter()
        .enumerate()
        .map(|(i, d)| {
            d.gold_label
                .ok_or_else(|| CeilError::Data(format!("document {i} has no gold label")))
        })
        .collect::<Result<_>>()?;
    if pred.len() != gold.len() {
        return Err(CeilError::Data(format!(
            "prediction covers {} documents but gold corpus has {}",
            pred.len(),
            gold.len()
        )));
    }
    let report = metrics_report(&pred, &gold)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CeilError::Data(format!("metrics serialization failed: {e}")))?;
    println!("{json}");
    Ok(())
}

fn cmd_synth(
    k: usize,
    n: usize,
    tokens_per_cluster: usize,
    doc_len: usize,
    noise: f64,
    seed: u64,
    out: &PathBuf,
) -> Result<()> {
    let (corpus, vocab) = synth_corpus(k, n, tokens_per_cluster, doc_len, noise, seed)?;
    let mut lines = String::new();
    for doc in &corpus.docs {
        let text: Vec<&str> = doc.tokens.iter().map(|&t| vocab.token(t)).collect();
        let record = serde_json::json!({
            "text": text.join(" "),
            "label": doc.gold_label,
        });
        lines.push_str(&record.to_string());
        lines.push('\n');
    }
    std::fs::write(out, lines).map_err(|e| CeilError::io(out.display().to_string(), e))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Cluster(args) => cmd_cluster(args),
        Command::Ceil(args) => cmd_ceil(args),
        Command::Eval { pred, gold } => cmd_eval(pred, gold),
        Command::Synth {
            k,
            n,
            tokens_per_cluster,
            doc_len,
            noise,
            seed,
            out,
        } => cmd_synth(*k, *n, *tokens_per_cluster, *doc_len, *noise, *seed, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
