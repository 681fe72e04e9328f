//! Clustering backends: the CDCC mini-batch training loop, plus k-means
//! (also the centroid initializer) and a diagonal-covariance GMM baseline.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AugmentParams, Corpus, Vocabulary};
use crate::encoder::{
    batch_token_lists, encode_backward, encode_batch, sgd_step, EncoderParams, ParamGrads,
    PromptTemplate,
};
use crate::error::{CeilError, Result};
use crate::objective::{
    gradients, hard_assign_rows, soft_assign, target_distribution, total_loss, Centroids,
    DenominatorRule, LossWeights, SoftAssignment,
};

/// Final state of a clustering backend run.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub q: SoftAssignment,
    pub centroids: Centroids,
    pub history: Vec<EpochRecord>,
}

/// Per-epoch mean loss breakdown of CDCC training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub contrast: f64,
    pub cluster: f64,
    pub category: f64,
}

/// CDCC optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub weights: LossWeightsConfig,
    pub denominator_rule: DenominatorRule,
    pub deletion_prob: f64,
    pub swap_count: usize,
}

/// Serializable mirror of `LossWeights` (kept flat for the config file).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeightsConfig {
    pub lambda: f64,
    pub tau: f64,
    pub alpha: f64,
    pub theta: f64,
}

impl From<LossWeightsConfig> for LossWeights {
    fn from(c: LossWeightsConfig) -> LossWeights {
        LossWeights {
            lambda: c.lambda,
            tau: c.tau,
            alpha: c.alpha,
            theta: c.theta,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 100,
            epochs: 20,
            seed: 0,
            weights: LossWeightsConfig {
                lambda: w.lambda,
                tau: w.tau,
                alpha: w.alpha,
                theta: w.theta,
            },
            denominator_rule: DenominatorRule::PairCount,
            deletion_prob: 0.1,
            swap_count: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(CeilError::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(CeilError::Config("batch_size must be >= 2".into()));
        }
        LossWeights::from(self.weights).validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.weights.into()
    }
}

/// Argmax per row, ties to the lowest index.
pub fn hard_assign(q: &SoftAssignment) -> Vec<usize> {
    hard_assign_rows(&q.q)
}

fn squared_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

/// k-means++ seeding followed by Lloyd iterations; empty clusters are
/// reseeded to the point farthest from its centroid.
pub fn kmeans(h: &Array2<f64>, k: usize, seed: u64) -> Result<KmeansResult> {
    let n = h.nrows();
    if k == 0 {
        return Err(CeilError::Config("k must be >= 1".into()));
    }
    if k > n {
        return Err(CeilError::Data(format!("k = {k} exceeds the number of points {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::zeros((k, h.ncols()));
    // k-means++ seeding
    centroids.row_mut(0).assign(&h.row(rng.gen_range(0..n)));
    let mut min_d2: Vec<f64> = (0..n).map(|i| squared_dist(h.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in min_d2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&h.row(pick));
        for i in 0..n {
            min_d2[i] = min_d2[i].min(squared_dist(h.row(i), centroids.row(c)));
        }
    }

    let mut assignments = vec![0usize; n];
    let mut inertia_history = Vec::new();
    for _ in 0..300 {
        // assignment step
        let mut inertia = 0.0;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = squared_dist(h.row(i), centroids.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignments[i] = best;
            inertia += best_d;
        }
        inertia_history.push(inertia);

        // update step
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros((k, h.ncols()));
        for i in 0..n {
            counts[assignments[i]] += 1;
            let mut row = sums.row_mut(assignments[i]);
            row += &h.row(i);
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                // reseed to the point farthest from its current centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = squared_dist(h.row(a), centroids.row(assignments[a]));
                        let db = squared_dist(h.row(b), centroids.row(assignments[b]));
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                let new = h.row(far).to_owned();
                shift = shift.max(squared_dist(centroids.row(c), new.view()).sqrt());
                centroids.row_mut(c).assign(&new);
                assignments[far] = c;
            } else {
                let new = &sums.row(c) / counts[c] as f64;
                shift = shift.max(squared_dist(centroids.row(c), new.view()).sqrt());
                centroids.row_mut(c).assign(&new);
            }
        }
        if shift < 1e-6 {
            break;
        }
    }
    // final assignment pass so assignments match the returned centroids
    let mut inertia = 0.0;
    for i in 0..n {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let d = squared_dist(h.row(i), centroids.row(c));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assignments[i] = best;
        inertia += best_d;
    }
    inertia_history.push(inertia);
    Ok(KmeansResult {
        assignments,
        centroids,
        inertia_history,
    })
}

#[derive(Debug, Clone)]
pub struct GmmResult {
    pub assignments: Vec<usize>,
    pub responsibilities: Array2<f64>,
    pub means: Array2<f64>,
    /// Per-iteration data log-likelihood (non-decreasing).
    pub log_likelihood_history: Vec<f64>,
}

const GMM_VARIANCE_FLOOR: f64 = 1e-6;

/// EM with diagonal covariances and k-means initialization. The variance
/// floor is relative to the overall data variance so representations of any
/// scale get the same treatment.
pub fn gmm_fit(h: &Array2<f64>, k: usize, seed: u64) -> Result<GmmResult> {
    let n = h.nrows();
    let d = h.ncols();
    if k == 0 {
        return Err(CeilError::Config("k must be >= 1".into()));
    }
    if k > n {
        return Err(CeilError::Data(format!("k = {k} exceeds the number of points {n}")));
    }
    let grand_mean = h.mean_axis(ndarray::Axis(0)).unwrap();
    let data_var = h
        .rows()
        .into_iter()
        .map(|row| (&row - &grand_mean).mapv(|v| v * v).sum())
        .sum::<f64>()
        / (n * d) as f64;
    let floor = (GMM_VARIANCE_FLOOR * data_var).max(1e-300);
    let init = kmeans(h, k, seed)?;
    let mut means = init.centroids;
    let mut vars = Array2::<f64>::zeros((k, d));
    let mut weights = vec![0.0f64; k];
    {
        let mut counts = vec![0usize; k];
        for (i, &c) in init.assignments.iter().enumerate() {
            counts[c] += 1;
            for j in 0..d {
                let diff = h[[i, j]] - means[[c, j]];
                vars[[c, j]] += diff * diff;
            }
        }
        for c in 0..k {
            weights[c] = counts[c] as f64 / n as f64;
            for j in 0..d {
                vars[[c, j]] = (vars[[c, j]] / counts[c].max(1) as f64).max(floor);
            }
        }
    }

    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut resp = Array2::<f64>::zeros((n, k));
    let mut history = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..200 {
        // E-step in log domain
        let mut ll = 0.0;
        for i in 0..n {
            let mut logp = vec![0.0f64; k];
            for c in 0..k {
                let mut lp = weights[c].max(1e-300).ln();
                for j in 0..d {
                    let diff = h[[i, j]] - means[[c, j]];
                    lp -= 0.5 * (ln_2pi + vars[[c, j]].ln() + diff * diff / vars[[c, j]]);
                }
                logp[c] = lp;
            }
            let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logp.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            ll += lse;
            for c in 0..k {
                resp[[i, c]] = (logp[c] - lse).exp();
            }
        }
        history.push(ll);
        if (ll - prev_ll).abs() < 1e-6 {
            break;
        }
        prev_ll = ll;

        // M-step
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[[i, c]]).sum::<f64>().max(1e-10);
            weights[c] = nk / n as f64;
            for j in 0..d {
                let mean: f64 = (0..n).map(|i| resp[[i, c]] * h[[i, j]]).sum::<f64>() / nk;
                means[[c, j]] = mean;
            }
            for j in 0..d {
                let var: f64 = (0..n)
                    .map(|i| {
                        let diff = h[[i, j]] - means[[c, j]];
                        resp[[i, c]] * diff * diff
                    })
                    .sum::<f64>()
                    / nk;
                vars[[c, j]] = var.max(floor);
            }
        }
    }
    let assignments = hard_assign_rows(&resp);
    Ok(GmmResult {
        assignments,
        responsibilities: resp,
        means,
        log_likelihood_history: history,
    })
}

/// CDCC: contrastive + KL-clustering + category losses optimized jointly
/// over the encoder parameters and the cluster centroids with plain SGD.
/// Centroids are initialized by k-means on the initial representations.
pub fn cdcc_train(
    corpus: &Corpus,
    vocab: &Vocabulary,
    template: &PromptTemplate,
    params: &mut EncoderParams,
    config: &TrainConfig,
    k: usize,
) -> Result<ClusterResult> {
    config.validate()?;
    if k < 2 {
        return Err(CeilError::Config("cdcc_train requires k >= 2".into()));
    }
    if corpus.len() < config.batch_size {
        return Err(CeilError::Data(format!(
            "corpus size {} is below the batch size {}",
            corpus.len(),
            config.batch_size
        )));
    }
    let weights = config.loss_weights();
    let aug = AugmentParams {
        deletion_prob: config.deletion_prob,
        swap_count: config.swap_count,
        seed: config.seed,
    };
    let doc_refs: Vec<&crate::corpus::Document> = corpus.docs.iter().collect();

    let h_init = encode_batch(params, &doc_refs, template, vocab, None)?;
    let km = kmeans(&h_init, k, config.seed)?;
    let mut centroids = Centroids { mu: km.centroids };

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&crate::corpus::Document> =
                chunk.iter().map(|&i| &corpus.docs[i]).collect();
            let orig_tokens = batch_token_lists(&batch, template, vocab, None);
            let aug_tokens = batch_token_lists(&batch, template, vocab, Some(&aug));

            let mut h = Array2::zeros((batch.len(), params.repr_dim()));
            for (row, toks) in orig_tokens.iter().enumerate() {
                h.row_mut(row).assign(&crate::encoder::encode(params, toks)?);
            }
            let mut h_aug = Array2::zeros((aug_tokens.len(), params.repr_dim()));
            for (row, toks) in aug_tokens.iter().enumerate() {
                h_aug.row_mut(row).assign(&crate::encoder::encode(params, toks)?);
            }

            let q = soft_assign(&h, &centroids, weights.alpha)?;
            let p = target_distribution(&q);
            let breakdown = total_loss(&h_aug, &h, &q, &p, &weights, config.denominator_rule)?;
            if !breakdown.is_finite() {
                return Err(CeilError::Numerical(format!(
                    "non-finite loss at epoch {epoch}: {breakdown:?}"
                )));
            }
            let grads = gradients(&h_aug, &h, &centroids, &p, &weights, config.denominator_rule)?;

            let mut pgrads = ParamGrads::zeros_like(params);
            for (row, toks) in orig_tokens.iter().enumerate() {
                encode_backward(params, toks, grads.h.row(row), &mut pgrads);
            }
            for (row, toks) in aug_tokens.iter().enumerate() {
                encode_backward(params, toks, grads.h_aug.row(row), &mut pgrads);
            }
            sgd_step(params, &pgrads, config.learning_rate);
            centroids.mu.scaled_add(-config.learning_rate, &grads.centroids);

            sums.0 += breakdown.contrast;
            sums.1 += breakdown.cluster;
            sums.2 += breakdown.category;
            batches += 1;
        }
        history.push(EpochRecord {
            epoch,
            contrast: sums.0 / batches as f64,
            cluster: sums.1 / batches as f64,
            category: sums.2 / batches as f64,
        });
    }

    let h_final = encode_batch(params, &doc_refs, template, vocab, None)?;
    let q = soft_assign(&h_final, &centroids, weights.alpha)?;
    let assignments = hard_assign(&q);
    Ok(ClusterResult {
        assignments,
        q,
        centroids,
        history,
    })
}

/// Soft assignment consistent with nearest-centroid hard assignments,
/// used to report q for the non-CDCC backends.
pub fn centroid_soft_assignment(
    h: &Array2<f64>,
    centroids: &Array2<f64>,
    alpha: f64,
) -> Result<SoftAssignment> {
    soft_assign(
        h,
        &Centroids {
            mu: centroids.clone(),
        },
        alpha,
    )
}
