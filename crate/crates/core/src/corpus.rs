//! Corpus ingestion, tokenization, vocabulary construction, augmentation,
//! and synthetic corpus generation.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{CeilError, Result};

pub type TokenId = u32;

/// Fixed slot for the [MASK] token.
pub const MASK_ID: TokenId = 0;
/// Fixed slot for the out-of-vocabulary token.
pub const UNK_ID: TokenId = 1;

pub const MASK_TOKEN: &str = "[MASK]";
pub const UNK_TOKEN: &str = "[UNK]";

/// A document whose tokens are still strings; produced by loading/tokenizing,
/// consumed by vocabulary construction.
#[derive(Debug, Clone)]
pub struct TokenizedDoc {
    pub text: String,
    pub tokens: Vec<String>,
    pub gold_label: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct TokenizedCorpus {
    pub docs: Vec<TokenizedDoc>,
    /// Dense-label index -> original label string.
    pub label_names: Vec<String>,
    /// Warnings emitted during loading (rejected empty records etc).
    pub warnings: Vec<String>,
}

/// A document with ids assigned; immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: usize,
    pub text: String,
    pub tokens: Vec<TokenId>,
    /// Used by evaluation only; never read by training or clustering.
    pub gold_label: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub docs: Vec<Document>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Map string tokens to ids; unknown tokens become UNK.
    pub fn from_tokenized(tc: &TokenizedCorpus, vocab: &Vocabulary) -> Corpus {
        let docs = tc
            .docs
            .iter()
            .enumerate()
            .map(|(id, d)| Document {
                id,
                text: d.text.clone(),
                tokens: d.tokens.iter().map(|t| vocab.id(t)).collect(),
                gold_label: d.gold_label,
            })
            .collect();
        Corpus { docs }
    }

    pub fn gold_labels(&self) -> Option<Vec<usize>> {
        self.docs.iter().map(|d| d.gold_label).collect()
    }

    /// Copy with all gold labels removed (label-hygiene testing).
    pub fn without_labels(&self) -> Corpus {
        Corpus {
            docs: self
                .docs
                .iter()
                .map(|d| Document {
                    gold_label: None,
                    ..d.clone()
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    /// Number of documents containing each token; 0 for the special slots.
    doc_freq: Vec<u32>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // MASK and UNK are always present
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn doc_freq(&self, id: TokenId) -> u32 {
        self.doc_freq[id as usize]
    }

    pub fn is_special(id: TokenId) -> bool {
        id == MASK_ID || id == UNK_ID
    }

    /// Build a vocabulary directly from token strings with given doc freqs.
    /// Used by checkpoint loading; `entries` excludes the special slots.
    pub fn from_entries(entries: Vec<(String, u32)>) -> Vocabulary {
        let mut v = Vocabulary::empty();
        for (tok, df) in entries {
            let id = v.id_to_token.len() as TokenId;
            v.token_to_id.insert(tok.clone(), id);
            v.id_to_token.push(tok);
            v.doc_freq.push(df);
        }
        v
    }

    /// Non-special entries in id order.
    pub fn entries(&self) -> Vec<(String, u32)> {
        self.id_to_token
            .iter()
            .zip(&self.doc_freq)
            .skip(2)
            .map(|(t, &df)| (t.clone(), df))
            .collect()
    }

    fn empty() -> Vocabulary {
        Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: vec![MASK_TOKEN.to_string(), UNK_TOKEN.to_string()],
            doc_freq: vec![0, 0],
        }
    }
}

/// Lowercase, split on whitespace and punctuation, drop the punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect()
}

#[derive(Deserialize)]
struct RawRecord {
    text: String,
    #[serde(default)]
    label: Option<serde_json::Value>,
}

/// Load a JSON-lines corpus: one object per line with required "text" and
/// optional "label". Empty-after-tokenization records are rejected with a
/// warning; ids stay dense.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<TokenizedCorpus> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| CeilError::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = TokenizedCorpus::default();
    let mut label_ids: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CeilError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| {
            CeilError::Data(format!(
                "{}: malformed record at line {}: {}",
                path.display(),
                lineno + 1,
                e
            ))
        })?;
        let tokens = tokenize(&rec.text);
        if tokens.is_empty() {
            out.warnings.push(format!(
                "line {}: empty text after tokenization, record rejected",
                lineno + 1
            ));
            continue;
        }
        let gold_label = match rec.label {
            None | Some(serde_json::Value::Null) => None,
            Some(v) => {
                let key = match v {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                let next = label_ids.len();
                let id = *label_ids.entry(key.clone()).or_insert(next);
                if id == out.label_names.len() {
                    out.label_names.push(key);
                }
                Some(id)
            }
        };
        out.docs.push(TokenizedDoc {
            text: rec.text,
            tokens,
            gold_label,
        });
    }
    Ok(out)
}

/// Build the vocabulary; tokens appearing in fewer than `min_df` documents
/// are left out and will map to UNK.
pub fn build_vocabulary(corpus: &TokenizedCorpus, min_df: u32) -> Result<Vocabulary> {
    if corpus.docs.is_empty() {
        return Err(CeilError::Data("cannot build vocabulary from an empty corpus".into()));
    }
    if min_df < 1 {
        return Err(CeilError::Config("min_df must be >= 1".into()));
    }
    // Document frequencies, keyed in order of first appearance.
    let mut df: HashMap<&str, u32> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for doc in &corpus.docs {
        let mut seen: Vec<&str> = Vec::new();
        for tok in &doc.tokens {
            if seen.contains(&tok.as_str()) {
                continue;
            }
            seen.push(tok);
            let e = df.entry(tok).or_insert(0);
            if *e == 0 {
                order.push(tok);
            }
            *e += 1;
        }
    }
    let mut vocab = Vocabulary::empty();
    for tok in order {
        let freq = df[tok];
        if freq >= min_df {
            let id = vocab.id_to_token.len() as TokenId;
            vocab.token_to_id.insert(tok.to_string(), id);
            vocab.id_to_token.push(tok.to_string());
            vocab.doc_freq.push(freq);
        }
    }
    if vocab.len() == 2 {
        return Err(CeilError::Data(format!(
            "all tokens fall below min_df={min_df}; vocabulary would be empty"
        )));
    }
    Ok(vocab)
}

/// Random-deletion + adjacent-swap augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub deletion_prob: f64,
    pub swap_count: usize,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            deletion_prob: 0.1,
            swap_count: 1,
            seed: 0,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// One augmented view of a document. Deterministic in
/// (params.seed, doc_id, draw); deletion always leaves at least one token.
pub fn augment(tokens: &[TokenId], params: &AugmentParams, doc_id: usize, draw: u32) -> Vec<TokenId> {
    assert!(!tokens.is_empty(), "augment requires nonempty tokens");
    let stream = splitmix64(params.seed)
        ^ splitmix64(doc_id as u64).rotate_left(17)
        ^ splitmix64(draw as u64 + 0xA5A5).rotate_left(31);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let mut kept: Vec<TokenId> = tokens
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() >= params.deletion_prob)
        .collect();
    if kept.is_empty() {
        kept.push(tokens[rng.gen_range(0..tokens.len())]);
    }
    for _ in 0..params.swap_count {
        if kept.len() >= 2 {
            let i = rng.gen_range(0..kept.len() - 1);
            kept.swap(i, i + 1);
        }
    }
    kept
}

/// Generate a labeled corpus of `k` clusters with disjoint token pools;
/// each token is independently replaced by an out-of-pool token with
/// probability `noise`.
pub fn synth_corpus(
    k: usize,
    n_per_cluster: usize,
    tokens_per_cluster: usize,
    doc_len: usize,
    noise: f64,
    seed: u64,
) -> Result<(Corpus, Vocabulary)> {
    if k == 0 || n_per_cluster == 0 || tokens_per_cluster == 0 || doc_len == 0 {
        return Err(CeilError::Config("synth_corpus sizes must be positive".into()));
    }
    if !(0.0..1.0).contains(&noise) {
        return Err(CeilError::Config("noise must be in [0,1)".into()));
    }
    if noise > 0.0 && k < 2 {
        return Err(CeilError::Config(
            "noise > 0 requires k >= 2 (no out-of-pool tokens exist)".into(),
        ));
    }
    let pool_token = |c: usize, i: usize| format!("c{c}w{i}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tc = TokenizedCorpus::default();
    for c in 0..k {
        for _ in 0..n_per_cluster {
            let mut tokens = Vec::with_capacity(doc_len);
            for _ in 0..doc_len {
                if noise > 0.0 && rng.gen::<f64>() < noise {
                    // uniform over all out-of-pool tokens
                    let idx = rng.gen_range(0..(k - 1) * tokens_per_cluster);
                    let other = idx / tokens_per_cluster;
                    let other = if other >= c { other + 1 } else { other };
                    tokens.push(pool_token(other, idx % tokens_per_cluster));
                } else {
                    tokens.push(pool_token(c, rng.gen_range(0..tokens_per_cluster)));
                }
            }
            tc.docs.push(TokenizedDoc {
                text: tokens.join(" "),
                tokens,
                gold_label: Some(c),
            });
        }
        tc.label_names.push(format!("{c}"));
    }
    let vocab = build_vocabulary(&tc, 1)?;
    Ok((Corpus::from_tokenized(&tc, &vocab), vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Hello, World!"), vec!["hello", "world"]);
        assert_eq!(tokenize("c++ vs. C"), vec!["c", "vs", "c"]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn tokenize_idempotent_on_joined_output() {
        for text in ["Hello, World!", "c++ vs. C", "a  b\tc", "Ünïcödé $5 now"] {
            let once = tokenize(text);
            let twice = tokenize(&once.join(" "));
            assert_eq!(once, twice);
        }
    }

    fn write_jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn load_jsonl_basic() {
        let f = write_jsonl(&[r#"{"text":"hello world"}"#, r#"{"text":"foo"}"#]);
        let tc = load_jsonl(f.path()).unwrap();
        assert_eq!(tc.docs.len(), 2);
        assert_eq!(tc.docs[0].tokens, vec!["hello", "world"]);
        assert!(tc.docs.iter().all(|d| d.gold_label.is_none()));
    }

    #[test]
    fn load_jsonl_densifies_labels() {
        let f = write_jsonl(&[
            r#"{"text":"a","label":"sports"}"#,
            r#"{"text":"b","label":"tech"}"#,
            r#"{"text":"c","label":"sports"}"#,
        ]);
        let tc = load_jsonl(f.path()).unwrap();
        let labels: Vec<_> = tc.docs.iter().map(|d| d.gold_label.unwrap()).collect();
        assert_eq!(labels, vec![0, 1, 0]);
        assert_eq!(tc.label_names, vec!["sports", "tech"]);
    }

    #[test]
    fn load_jsonl_rejects_blank_text_with_warning() {
        let f = write_jsonl(&[r#"{"text":"   "}"#]);
        let tc = load_jsonl(f.path()).unwrap();
        assert_eq!(tc.docs.len(), 0);
        assert_eq!(tc.warnings.len(), 1);
    }

    #[test]
    fn load_jsonl_malformed_line_names_line_number() {
        let f = write_jsonl(&[r#"{"text":"ok"}"#, "not json"]);
        let err = load_jsonl(f.path()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn vocabulary_counts_and_threshold() {
        let docs = ["a b", "a c"];
        let tc = TokenizedCorpus {
            docs: docs
                .iter()
                .map(|t| TokenizedDoc {
                    text: t.to_string(),
                    tokens: tokenize(t),
                    gold_label: None,
                })
                .collect(),
            ..Default::default()
        };
        let v = build_vocabulary(&tc, 1).unwrap();
        assert_eq!(v.len(), 5); // MASK, UNK, a, b, c
        assert_eq!(v.doc_freq(v.id("a")), 2);
        assert_eq!(v.doc_freq(v.id("b")), 1);
        assert_eq!(v.doc_freq(v.id("c")), 1);

        let v2 = build_vocabulary(&tc, 2).unwrap();
        assert!(v2.contains("a"));
        assert_eq!(v2.id("b"), UNK_ID);
        assert_eq!(v2.id("c"), UNK_ID);
    }

    #[test]
    fn vocabulary_empty_after_threshold_errors() {
        let tc = TokenizedCorpus {
            docs: vec![TokenizedDoc {
                text: "x".into(),
                tokens: vec!["x".into()],
                gold_label: None,
            }],
            ..Default::default()
        };
        assert!(build_vocabulary(&tc, 2).is_err());
    }

    #[test]
    fn vocabulary_bijection_round_trip() {
        let tc = TokenizedCorpus {
            docs: vec![TokenizedDoc {
                text: "q w e r t y".into(),
                tokens: tokenize("q w e r t y"),
                gold_label: None,
            }],
            ..Default::default()
        };
        let v = build_vocabulary(&tc, 1).unwrap();
        for id in 0..v.len() as TokenId {
            if !Vocabulary::is_special(id) {
                assert_eq!(v.id(v.token(id)), id);
            }
        }
    }

    #[test]
    fn augment_identity_when_disabled() {
        let params = AugmentParams {
            deletion_prob: 0.0,
            swap_count: 0,
            seed: 3,
        };
        let toks = vec![5, 6, 7, 8];
        assert_eq!(augment(&toks, &params, 0, 0), toks);
    }

    #[test]
    fn augment_survivor_guarantee() {
        let params = AugmentParams {
            deletion_prob: 0.9,
            swap_count: 0,
            seed: 11,
        };
        for draw in 0..20 {
            let out = augment(&[9], &params, 1, draw);
            assert_eq!(out, vec![9]);
        }
    }

    #[test]
    fn augment_deterministic_and_draw_sensitive() {
        let params = AugmentParams {
            deletion_prob: 0.3,
            swap_count: 2,
            seed: 42,
        };
        let toks: Vec<TokenId> = (2..12).collect();
        assert_eq!(augment(&toks, &params, 7, 0), augment(&toks, &params, 7, 0));
        // Length always within [1, input length].
        for doc in 0..50 {
            let out = augment(&toks, &params, doc, 1);
            assert!(!out.is_empty() && out.len() <= toks.len());
        }
    }

    #[test]
    fn synth_disjoint_pools_when_noiseless() {
        let (corpus, _) = synth_corpus(2, 5, 8, 6, 0.0, 1).unwrap();
        for a in &corpus.docs {
            for b in &corpus.docs {
                if a.gold_label != b.gold_label {
                    assert!(!a.tokens.iter().any(|t| b.tokens.contains(t)));
                }
            }
        }
    }

    #[test]
    fn synth_single_cluster_labels() {
        let (corpus, _) = synth_corpus(1, 4, 5, 3, 0.0, 2).unwrap();
        assert!(corpus.docs.iter().all(|d| d.gold_label == Some(0)));
    }

    #[test]
    fn synth_deterministic() {
        let (a, _) = synth_corpus(4, 6, 10, 8, 0.05, 9).unwrap();
        let (b, _) = synth_corpus(4, 6, 10, 8, 0.05, 9).unwrap();
        assert_eq!(a, b);
    }
}
