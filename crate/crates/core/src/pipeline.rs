//! The iterative loop tying clustering and classification together, plus
//! run configuration, checkpoints, and output artifacts.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::clustering::{
    cdcc_train, centroid_soft_assignment, gmm_fit, hard_assign, kmeans, ClusterResult, EpochRecord,
    TrainConfig,
};
use crate::corpus::{Corpus, Vocabulary};
use crate::encoder::{encode_batch, init_params, EncoderMode, EncoderParams, PromptTemplate};
use crate::error::{CeilError, Result};
use crate::eval::{metrics_report, MetricsReport};
use crate::objective::{DenominatorRule, SoftAssignment};
use crate::refine::{aggregate, filter_all, ClusterSet};
use crate::supervise::{train_classifier, verbalize, ClassifierConfig, VerbalizerMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backend {
    Cdcc,
    Gmm,
    Kmeans,
}

impl std::str::FromStr for Backend {
    type Err = CeilError;
    fn from_str(s: &str) -> Result<Backend> {
        match s.to_lowercase().as_str() {
            "cdcc" => Ok(Backend::Cdcc),
            "gmm" => Ok(Backend::Gmm),
            "kmeans" => Ok(Backend::Kmeans),
            other => Err(CeilError::Config(format!("unknown backend {other:?}"))),
        }
    }
}

/// Full run configuration; every scalar the objectives and loop need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeilConfig {
    pub k: usize,
    pub iterations: usize,
    pub backend: Backend,
    pub template: String,
    pub beta: f64,
    pub delta: f64,
    pub n_keywords: usize,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub seed: u64,
    pub embed_dim: usize,
    pub repr_dim: usize,
    pub min_df: u32,
    /// Corpus path; used by the CLI, optional for library callers.
    pub data: Option<String>,
}

impl Default for CeilConfig {
    fn default() -> Self {
        CeilConfig {
            k: 2,
            iterations: 5,
            backend: Backend::Cdcc,
            template: "[X] is [MASK] .".to_string(),
            beta: 0.8,
            delta: 0.98,
            n_keywords: 10,
            train: TrainConfig::default(),
            classifier: ClassifierConfig::default(),
            seed: 42,
            embed_dim: 64,
            repr_dim: 64,
            min_df: 1,
            data: None,
        }
    }
}

impl CeilConfig {
    /// Validate hard constraints; returns soft warnings (threshold values
    /// outside the ranges the method was tuned over).
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.k < 2 {
            return Err(CeilError::Config("k must be >= 2".into()));
        }
        if self.iterations < 1 {
            return Err(CeilError::Config("iterations must be >= 1".into()));
        }
        if self.n_keywords < 1 {
            return Err(CeilError::Config("n_keywords must be >= 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.beta) {
            return Err(CeilError::Config("beta must be in [-1, 1]".into()));
        }
        if !(-1.0..=1.0).contains(&self.delta) {
            return Err(CeilError::Config("delta must be in [-1, 1]".into()));
        }
        PromptTemplate::parse(&self.template)?;
        self.train.validate()?;
        self.classifier.validate()?;
        let mut warnings = Vec::new();
        if !(0.6..=1.0).contains(&self.beta) {
            warnings.push(format!("beta = {} is outside the tuned range [0.6, 1.0]", self.beta));
        }
        if !(0.95..=1.0).contains(&self.delta) {
            warnings.push(format!("delta = {} is outside the tuned range [0.95, 1.0]", self.delta));
        }
        Ok(warnings)
    }

    /// Flat key=value config file, one pair per line, `#` comments.
    pub fn from_file(path: impl AsRef<Path>) -> Result<CeilConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CeilError::io(path.display().to_string(), e))?;
        let mut config = CeilConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CeilError::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            config.set(key.trim(), value.trim()).map_err(|e| {
                CeilError::Config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        Ok(config)
    }

    /// Apply one key=value override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| CeilError::Config(format!("invalid value {value:?} for key {key}")))
        }
        match key {
            "k" => self.k = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "backend" => self.backend = value.parse()?,
            "template" => self.template = value.to_string(),
            "lambda" => self.train.weights.lambda = parse(key, value)?,
            "tau" => self.train.weights.tau = parse(key, value)?,
            "alpha" => self.train.weights.alpha = parse(key, value)?,
            "theta" => self.train.weights.theta = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "n_keywords" => self.n_keywords = parse(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "cluster_batch_size" => self.train.batch_size = parse(key, value)?,
            "cluster_epochs" => self.train.epochs = parse(key, value)?,
            "classifier_learning_rate" => self.classifier.learning_rate = parse(key, value)?,
            "classifier_batch_size" => self.classifier.batch_size = parse(key, value)?,
            "classifier_epochs" => self.classifier.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "repr_dim" => self.repr_dim = parse(key, value)?,
            "min_df" => self.min_df = parse(key, value)?,
            "deletion_prob" => self.train.deletion_prob = parse(key, value)?,
            "swap_count" => self.train.swap_count = parse(key, value)?,
            "denominator_rule" => {
                self.train.denominator_rule = match value.to_lowercase().as_str() {
                    "paircount" | "pair_count" => DenominatorRule::PairCount,
                    "verbatim" => DenominatorRule::Verbatim,
                    other => {
                        return Err(CeilError::Config(format!("unknown denominator_rule {other:?}")))
                    }
                }
            }
            "data" => self.data = Some(value.to_string()),
            other => return Err(CeilError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

/// One completed loop iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub clusters_before_filter: usize,
    pub clusters_after_filter: usize,
    pub clusters_after_aggregate: usize,
    pub loss_history: Vec<EpochRecord>,
    pub metrics: Option<MetricsReport>,
    /// Keyword snapshot: per cluster, (token, score) in score order.
    pub keywords: Vec<Vec<(String, f64)>>,
}

/// Resumable pipeline state: everything except the corpus itself.
#[derive(Debug, Clone, PartialEq)]
pub struct CeilState {
    pub config: CeilConfig,
    pub params: EncoderParams,
    pub records: Vec<IterationRecord>,
    pub next_iteration: usize,
    pub last_centroids: Option<Array2<f64>>,
}

impl CeilState {
    pub fn new(config: CeilConfig, vocab_size: usize) -> Result<CeilState> {
        let params = init_params(
            derive_seed(config.seed, 1),
            vocab_size,
            config.embed_dim,
            config.repr_dim,
            EncoderMode::MeanPool,
        )?;
        Ok(CeilState {
            config,
            params,
            records: Vec::new(),
            next_iteration: 0,
            last_centroids: None,
        })
    }
}

fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut x = base ^ tag.wrapping_mul(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Outcome of a full (or resumed) run: the clustering output of the final
/// iteration.
#[derive(Debug, Clone)]
pub struct CeilOutcome {
    pub result: ClusterResult,
    pub verbalizer: VerbalizerMap,
}

/// Run the remaining iterations of the loop. Completed iterations append
/// to `state.records`, so a failing stage leaves the partial record list
/// with the caller.
pub fn run_ceil_from(
    corpus: &Corpus,
    vocab: &Vocabulary,
    state: &mut CeilState,
) -> Result<CeilOutcome> {
    state.config.validate()?;
    if corpus.is_empty() {
        return Err(CeilError::Data("corpus is empty".into()));
    }
    let config = state.config.clone();
    let template = PromptTemplate::parse(&config.template)?;
    let gold = corpus.gold_labels();
    let mut last: Option<(ClusterResult, VerbalizerMap)> = None;

    for t in state.next_iteration..config.iterations {
        state.params.mode = if t == 0 {
            EncoderMode::MeanPool
        } else {
            EncoderMode::MaskSlot
        };
        let backend_seed = derive_seed(config.seed, 100 + t as u64);

        let (result, reps) = match config.backend {
            Backend::Cdcc => {
                let mut train = config.train.clone();
                train.seed = derive_seed(config.seed, 200 + t as u64);
                let result =
                    cdcc_train(corpus, vocab, &template, &mut state.params, &train, config.k)?;
                let doc_refs: Vec<_> = corpus.docs.iter().collect();
                let reps = encode_batch(&state.params, &doc_refs, &template, vocab, None)?;
                (result, reps)
            }
            Backend::Gmm => {
                let doc_refs: Vec<_> = corpus.docs.iter().collect();
                let reps = encode_batch(&state.params, &doc_refs, &template, vocab, None)?;
                let gmm = gmm_fit(&reps, config.k, backend_seed)?;
                let result = ClusterResult {
                    assignments: gmm.assignments,
                    q: SoftAssignment {
                        q: gmm.responsibilities,
                    },
                    centroids: crate::objective::Centroids { mu: gmm.means },
                    history: Vec::new(),
                };
                (result, reps)
            }
            Backend::Kmeans => {
                let doc_refs: Vec<_> = corpus.docs.iter().collect();
                let reps = encode_batch(&state.params, &doc_refs, &template, vocab, None)?;
                let km = kmeans(&reps, config.k, backend_seed)?;
                let q = centroid_soft_assignment(&reps, &km.centroids, config.train.weights.alpha)?;
                let assignments = hard_assign(&q);
                let result = ClusterResult {
                    assignments,
                    q,
                    centroids: crate::objective::Centroids { mu: km.centroids },
                    history: Vec::new(),
                };
                (result, reps)
            }
        };

        let raw = ClusterSet::from_assignments(&result.assignments);
        let filtered = filter_all(&raw, &reps, config.beta)?;
        let aggregated = aggregate(&filtered, &reps, config.delta)?;
        let verbalizer = verbalize(&aggregated, corpus, vocab, &template, config.n_keywords)?;

        state.params.mode = EncoderMode::MaskSlot;
        let mut classifier = config.classifier.clone();
        classifier.seed = derive_seed(config.seed, 300 + t as u64);
        train_classifier(
            &mut state.params,
            &aggregated,
            &verbalizer,
            corpus,
            vocab,
            &template,
            &classifier,
        )?;

        let metrics = match &gold {
            Some(g) => Some(metrics_report(&result.assignments, g)?),
            None => None,
        };
        let keywords = verbalizer
            .keywords
            .iter()
            .map(|kw| {
                kw.iter()
                    .map(|&(t, s)| (vocab.token(t).to_string(), s))
                    .collect()
            })
            .collect();
        state.records.push(IterationRecord {
            iteration: t,
            clusters_before_filter: raw.len(),
            clusters_after_filter: filtered.len(),
            clusters_after_aggregate: aggregated.len(),
            loss_history: result.history.clone(),
            metrics,
            keywords,
        });
        state.last_centroids = Some(result.centroids.mu.clone());
        state.next_iteration = t + 1;
        last = Some((result, verbalizer));
    }

    let (result, verbalizer) = last.ok_or_else(|| {
        CeilError::Contract("run_ceil_from called with no iterations remaining".into())
    })?;
    Ok(CeilOutcome { result, verbalizer })
}

/// Fresh end-to-end run; partial records on failure land in `records`.
pub fn run_ceil(
    corpus: &Corpus,
    vocab: &Vocabulary,
    config: &CeilConfig,
    records: &mut Vec<IterationRecord>,
) -> Result<CeilOutcome> {
    let mut state = CeilState::new(config.clone(), vocab.len())?;
    let outcome = run_ceil_from(corpus, vocab, &mut state);
    records.append(&mut state.records);
    outcome
}

// --- checkpoint container -------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"CEILCKP\x01";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: CeilConfig,
    records: Vec<IterationRecord>,
    next_iteration: usize,
    mode_mask_slot: bool,
    vocab_size: usize,
    embed_dim: usize,
    repr_dim: usize,
    centroid_rows: usize,
}

fn write_matrix(out: &mut Vec<u8>, m: &Array2<f64>) {
    for &v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_matrix(data: &[u8], pos: &mut usize, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let need = rows * cols * 8;
    if *pos + need > data.len() {
        return Err(CeilError::Data("checkpoint truncated".into()));
    }
    let m = Array2::from_shape_fn((rows, cols), |(i, j)| {
        let o = *pos + (i * cols + j) * 8;
        f64::from_le_bytes(data[o..o + 8].try_into().unwrap())
    });
    *pos += need;
    Ok(m)
}

/// Serialize the full pipeline state; round-trips bit-exactly.
pub fn save_checkpoint(state: &CeilState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        config: state.config.clone(),
        records: state.records.clone(),
        next_iteration: state.next_iteration,
        mode_mask_slot: state.params.mode == EncoderMode::MaskSlot,
        vocab_size: state.params.vocab_size(),
        embed_dim: state.params.embed_dim(),
        repr_dim: state.params.repr_dim(),
        centroid_rows: state.last_centroids.as_ref().map_or(0, |c| c.nrows()),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CeilError::Data(format!("checkpoint serialization failed: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    write_matrix(&mut out, &state.params.embed);
    write_matrix(&mut out, &state.params.proj);
    for &v in state.params.mask_bias.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(c) = &state.last_centroids {
        write_matrix(&mut out, c);
    }
    std::fs::write(path, out).map_err(|e| CeilError::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CeilState> {
    let path = path.as_ref();
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| CeilError::io(path.display().to_string(), e))?;
    if data.len() < 16 || &data[..8] != CHECKPOINT_MAGIC {
        return Err(CeilError::Data("not a checkpoint file (bad magic or version)".into()));
    }
    let header_len = u64::from_le_bytes(data[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > data.len() {
        return Err(CeilError::Data("checkpoint truncated".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&data[16..16 + header_len])
        .map_err(|e| CeilError::Data(format!("corrupt checkpoint header: {e}")))?;
    let mut pos = 16 + header_len;
    let embed = read_matrix(&data, &mut pos, header.vocab_size, header.embed_dim)?;
    let proj = read_matrix(&data, &mut pos, header.repr_dim, header.embed_dim)?;
    let bias = read_matrix(&data, &mut pos, 1, header.repr_dim)?;
    let last_centroids = if header.centroid_rows > 0 {
        Some(read_matrix(&data, &mut pos, header.centroid_rows, header.repr_dim)?)
    } else {
        None
    };
    if pos != data.len() {
        return Err(CeilError::Data("checkpoint has trailing bytes".into()));
    }
    Ok(CeilState {
        config: header.config,
        params: EncoderParams {
            embed,
            proj,
            mask_bias: Array1::from_iter(bias.iter().copied()),
            mode: if header.mode_mask_slot {
                EncoderMode::MaskSlot
            } else {
                EncoderMode::MeanPool
            },
        },
        records: header.records,
        next_iteration: header.next_iteration,
        last_centroids,
    })
}

// --- output artifacts -----------------------------------------------------

/// Write assignments.tsv, history.jsonl, keywords.json, and (when gold
/// labels exist) metrics.json into `out_dir`. Metrics live only in
/// metrics.json: history lines drop the per-iteration metrics so every
/// other artifact is identical with or without gold labels. When no
/// iteration records exist (single-shot run) history.jsonl holds the
/// per-epoch loss breakdown instead.
pub fn write_artifacts(
    out_dir: impl AsRef<Path>,
    result: &ClusterResult,
    records: &[IterationRecord],
    gold: Option<&[usize]>,
) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| CeilError::io(dir.display().to_string(), e))?;

    let mut tsv = String::new();
    for (doc, &c) in result.assignments.iter().enumerate() {
        tsv.push_str(&format!("{doc}\t{c}\n"));
    }
    write_file(dir.join("assignments.tsv"), tsv.as_bytes())?;

    let mut history = Vec::new();
    let jsonl_err = |e| CeilError::Data(format!("history serialization failed: {e}"));
    if records.is_empty() {
        for epoch in &result.history {
            serde_json::to_writer(&mut history, epoch).map_err(jsonl_err)?;
            history.push(b'\n');
        }
    }
    for record in records {
        let mut line = record.clone();
        line.metrics = None;
        serde_json::to_writer(&mut history, &line).map_err(jsonl_err)?;
        history.push(b'\n');
    }
    write_file(dir.join("history.jsonl"), &history)?;

    if let Some(record) = records.last() {
        let map: BTreeMap<usize, &Vec<(String, f64)>> =
            record.keywords.iter().enumerate().collect();
        let json = serde_json::to_string_pretty(&map)
            .map_err(|e| CeilError::Data(format!("keyword serialization failed: {e}")))?;
        write_file(dir.join("keywords.json"), json.as_bytes())?;
    }

    if let Some(gold) = gold {
        let report = metrics_report(&result.assignments, gold)?;
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| CeilError::Data(format!("metrics serialization failed: {e}")))?;
        write_file(dir.join("metrics.json"), json.as_bytes())?;
    }
    Ok(())
}

fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path)
        .map_err(|e| CeilError::io(path.display().to_string(), e))?;
    f.write_all(bytes)
        .map_err(|e| CeilError::io(path.display().to_string(), e))
}

/// Parse an assignments.tsv back into per-document cluster indices.
pub fn read_assignments(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| CeilError::io(path.display().to_string(), e))?;
    let mut rows: Vec<(usize, usize)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (doc, cluster) = line.split_once('\t').ok_or_else(|| {
            CeilError::Data(format!("{}: line {} is not doc<TAB>cluster", path.display(), lineno + 1))
        })?;
        let parse = |s: &str| {
            s.trim().parse::<usize>().map_err(|_| {
                CeilError::Data(format!("{}: bad integer at line {}", path.display(), lineno + 1))
            })
        };
        rows.push((parse(doc)?, parse(cluster)?));
    }
    rows.sort_unstable();
    for (expect, &(doc, _)) in rows.iter().enumerate() {
        if doc != expect {
            return Err(CeilError::Data(format!(
                "{}: document ids are not dense (missing {expect})",
                path.display()
            )));
        }
    }
    Ok(rows.into_iter().map(|(_, c)| c).collect())
}
