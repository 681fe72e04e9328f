//! Pseudo-label supervision: TF-IDF cluster verbalization and the
//! classification objective that updates the encoder.

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenId, Vocabulary};
use crate::encoder::{
    apply_template, encode, encode_backward, sgd_step, vocab_logits, vocab_logits_backward,
    EncoderMode, EncoderParams, ParamGrads, PromptTemplate,
};
use crate::error::{CeilError, Result};
use crate::math::softmax;
use crate::refine::{ClusterSet, ClusterStage};

/// Per-cluster keyword lists with scores, non-increasing within a cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbalizerMap {
    pub keywords: Vec<Vec<(TokenId, f64)>>,
}

impl VerbalizerMap {
    pub fn keyword_ids(&self, cluster: usize) -> Vec<TokenId> {
        self.keywords[cluster].iter().map(|&(t, _)| t).collect()
    }
}

/// Classifier optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            learning_rate: 0.2,
            batch_size: 64,
            epochs: 20,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(CeilError::Config("classifier learning_rate must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(CeilError::Config("classifier batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Treat each cluster as one pseudo-document and score its tokens with
/// tf * idf over the cluster collection; keep the top n per cluster.
/// Special tokens and template literals are never selected.
pub fn verbalize(
    set: &ClusterSet,
    corpus: &Corpus,
    vocab: &Vocabulary,
    template: &PromptTemplate,
    n: usize,
) -> Result<VerbalizerMap> {
    if set.stage != ClusterStage::Aggregated {
        return Err(CeilError::Contract("verbalize expects an aggregated cluster set".into()));
    }
    let excluded: Vec<TokenId> = template.literals().iter().map(|l| vocab.id(l)).collect();
    let eligible = |t: TokenId| !Vocabulary::is_special(t) && !excluded.contains(&t);

    // term counts per cluster, and the cluster-level document frequency
    let mut counts: Vec<BTreeMap<TokenId, usize>> = Vec::with_capacity(set.len());
    let mut totals: Vec<usize> = Vec::with_capacity(set.len());
    let mut cdf: BTreeMap<TokenId, usize> = BTreeMap::new();
    for cluster in &set.clusters {
        let mut tc: BTreeMap<TokenId, usize> = BTreeMap::new();
        let mut total = 0usize;
        for &doc in cluster {
            for &t in &corpus.docs[doc].tokens {
                if eligible(t) {
                    *tc.entry(t).or_default() += 1;
                    total += 1;
                }
            }
        }
        for &t in tc.keys() {
            *cdf.entry(t).or_default() += 1;
        }
        counts.push(tc);
        totals.push(total);
    }

    let c = set.len() as f64;
    let mut keywords = Vec::with_capacity(set.len());
    for (idx, (tc, &total)) in counts.iter().zip(&totals).enumerate() {
        if total == 0 {
            return Err(CeilError::Data(format!(
                "cluster {idx} has no eligible tokens to verbalize"
            )));
        }
        let mut scored: Vec<(TokenId, f64)> = tc
            .iter()
            .map(|(&t, &count)| {
                let tf = count as f64 / total as f64;
                let idf = ((1.0 + c) / (1.0 + cdf[&t] as f64)).ln() + 1.0;
                (t, tf * idf)
            })
            .collect();
        // descending score, ties -> lower token id (BTreeMap gave ascending ids)
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        scored.truncate(n);
        keywords.push(scored);
    }
    Ok(VerbalizerMap { keywords })
}

/// -log of the mean probability mass the mask head puts on the keyword set.
pub fn classification_loss(
    params: &EncoderParams,
    tokens: &[TokenId],
    template: &PromptTemplate,
    vocab: &Vocabulary,
    keyword_ids: &[TokenId],
) -> Result<f64> {
    if keyword_ids.is_empty() {
        return Err(CeilError::Contract("classification_loss requires nonempty keywords".into()));
    }
    let (prompted, _) = apply_template(template, vocab, tokens);
    let h = encode(params, &prompted)?;
    let probs = softmax(vocab_logits(params, h.view())?.view());
    let mean: f64 = keyword_ids.iter().map(|&t| probs[t as usize]).sum::<f64>()
        / keyword_ids.len() as f64;
    Ok(-mean.ln())
}

/// Forward + backward of the classification loss for one document;
/// accumulates parameter gradients and returns the loss.
pub fn classification_grad(
    params: &EncoderParams,
    tokens: &[TokenId],
    template: &PromptTemplate,
    vocab: &Vocabulary,
    keyword_ids: &[TokenId],
    grads: &mut ParamGrads,
) -> Result<f64> {
    if keyword_ids.is_empty() {
        return Err(CeilError::Contract("classification_grad requires nonempty keywords".into()));
    }
    let (prompted, _) = apply_template(template, vocab, tokens);
    let h = encode(params, &prompted)?;
    let logits = vocab_logits(params, h.view())?;
    let probs = softmax(logits.view());
    let mean: f64 = keyword_ids.iter().map(|&t| probs[t as usize]).sum::<f64>()
        / keyword_ids.len() as f64;
    let loss = -mean.ln();

    // dL/dprob[t] = -1/(mean * |kw|) for keyword tokens, else 0
    let mut dprob = Array1::zeros(probs.len());
    let w = -1.0 / (mean * keyword_ids.len() as f64);
    for &t in keyword_ids {
        dprob[t as usize] += w;
    }
    // softmax backward: dlogit = p .* (dprob - <p, dprob>)
    let dot = probs.dot(&dprob);
    let dlogits = &probs * &(dprob - dot);
    let dh = vocab_logits_backward(params, h.view(), dlogits.view(), grads);
    encode_backward(params, &prompted, dh.view(), grads);
    Ok(loss)
}

/// Mini-batch SGD on the mean classification loss over every document in
/// the aggregated clusters. Deterministic under the config seed.
pub fn train_classifier(
    params: &mut EncoderParams,
    set: &ClusterSet,
    verbalizer: &VerbalizerMap,
    corpus: &Corpus,
    vocab: &Vocabulary,
    template: &PromptTemplate,
    config: &ClassifierConfig,
) -> Result<()> {
    config.validate()?;
    if set.is_empty() {
        return Err(CeilError::Data("no clusters to supervise this iteration".into()));
    }
    if params.mode != EncoderMode::MaskSlot {
        return Err(CeilError::Contract("train_classifier requires MaskSlot mode".into()));
    }
    let mut dataset: Vec<(usize, usize)> = Vec::new(); // (doc id, cluster index)
    for (ci, cluster) in set.clusters.iter().enumerate() {
        for &doc in cluster {
            dataset.push((doc, ci));
        }
    }
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x6C62272E07BB0142));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let mut grads = ParamGrads::zeros_like(params);
            let mut loss_sum = 0.0;
            for &idx in chunk {
                let (doc, ci) = dataset[idx];
                let kw = verbalizer.keyword_ids(ci);
                loss_sum += classification_grad(
                    params,
                    &corpus.docs[doc].tokens,
                    template,
                    vocab,
                    &kw,
                    &mut grads,
                )?;
            }
            if !loss_sum.is_finite() {
                return Err(CeilError::Numerical(format!(
                    "non-finite classification loss at epoch {epoch}"
                )));
            }
            grads.scale(1.0 / chunk.len() as f64);
            sgd_step(params, &grads, config.learning_rate);
        }
    }
    Ok(())
}
