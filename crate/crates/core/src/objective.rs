//! CDCC loss terms: instance contrastive loss, Student's-t soft assignment
//! with KL self-training, the cluster-separating category loss, and analytic
//! gradients for all of them.

use ndarray::{Array1, Array2};

use crate::error::{CeilError, Result};
use crate::math::{cosine, cosine_grad_wrt_a, mean_rows};

/// Row-stochastic soft cluster assignment q (M x K).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    pub q: Array2<f64>,
}

/// Sharpened target distribution p (M x K).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub p: Array2<f64>,
}

/// Learnable cluster centroids (K x r).
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub mu: Array2<f64>,
}

impl Centroids {
    pub fn k(&self) -> usize {
        self.mu.nrows()
    }
}

/// Scalar coefficients of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Clustering-loss coefficient.
    pub lambda: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Student's-t degrees of freedom.
    pub alpha: f64,
    /// Cosine threshold for the category-loss member filter.
    pub theta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            tau: 0.5,
            alpha: 1.0,
            theta: 0.7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(CeilError::Config("tau must be > 0".into()));
        }
        if self.alpha <= 0.0 {
            return Err(CeilError::Config("alpha must be > 0".into()));
        }
        if !(-1.0..=1.0).contains(&self.theta) {
            return Err(CeilError::Config("theta must be in [-1, 1]".into()));
        }
        if self.lambda < 0.0 {
            return Err(CeilError::Config("lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// Divisor of the mean pairwise cosine in the category loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DenominatorRule {
    /// K(K-1)/2 — the actual number of cluster pairs.
    PairCount,
    /// (K-1)(K-2)/2 — the printed formula; undefined at K=2.
    Verbatim,
}

/// Contrastive loss of one ordered positive pair (i, j) against all other
/// rows of H as negatives.
pub fn contrastive_pair_loss(i: usize, j: usize, h: &Array2<f64>, tau: f64) -> Result<f64> {
    let rows = h.nrows();
    if rows < 2 {
        return Err(CeilError::Contract("contrastive loss needs at least one pair (M >= 1)".into()));
    }
    if i == j || i >= rows || j >= rows {
        return Err(CeilError::Contract(format!("invalid pair indices ({i}, {j}) for {rows} rows")));
    }
    // log-sum-exp over k != i, stabilized
    let sims: Vec<f64> = (0..rows)
        .filter(|&k| k != i)
        .map(|k| cosine(h.row(i), h.row(k)) / tau)
        .collect();
    let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + sims.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let pos = cosine(h.row(i), h.row(j)) / tau;
    Ok(lse - pos)
}

/// Average pair loss over the augmented batch; rows 2k and 2k+1 are the
/// positive pair of sample k.
pub fn contrastive_loss(h_aug: &Array2<f64>, tau: f64) -> Result<f64> {
    let rows = h_aug.nrows();
    if rows % 2 != 0 {
        return Err(CeilError::Contract(format!("augmented batch has odd row count {rows}")));
    }
    if rows == 0 {
        return Err(CeilError::Contract("augmented batch is empty".into()));
    }
    let m = rows / 2;
    let mut total = 0.0;
    for k in 0..m {
        total += contrastive_pair_loss(2 * k, 2 * k + 1, h_aug, tau)?;
        total += contrastive_pair_loss(2 * k + 1, 2 * k, h_aug, tau)?;
    }
    Ok(total / rows as f64)
}

/// Student's-t soft assignment of each row of H to each centroid.
pub fn soft_assign(h: &Array2<f64>, centroids: &Centroids, alpha: f64) -> Result<SoftAssignment> {
    let k = centroids.k();
    if k == 0 {
        return Err(CeilError::Contract("soft_assign requires at least one centroid".into()));
    }
    if centroids.mu.ncols() != h.ncols() {
        return Err(CeilError::Contract("representation/centroid dimension mismatch".into()));
    }
    let power = -(alpha + 1.0) / 2.0;
    let mut q = Array2::zeros((h.nrows(), k));
    for i in 0..h.nrows() {
        let mut sum = 0.0;
        for j in 0..k {
            let diff = &h.row(i) - &centroids.mu.row(j);
            let d2 = diff.dot(&diff);
            let w = (1.0 + d2 / alpha).powf(power);
            q[[i, j]] = w;
            sum += w;
        }
        for j in 0..k {
            q[[i, j]] /= sum;
        }
    }
    Ok(SoftAssignment { q })
}

/// Square-and-renormalize target with per-batch soft cluster frequencies.
pub fn target_distribution(assignment: &SoftAssignment) -> TargetDistribution {
    let q = &assignment.q;
    let f = q.sum_axis(ndarray::Axis(0)); // f_j = sum_i q_ij
    let mut p = Array2::zeros(q.raw_dim());
    for i in 0..q.nrows() {
        let mut sum = 0.0;
        for j in 0..q.ncols() {
            let v = q[[i, j]] * q[[i, j]] / f[j];
            p[[i, j]] = v;
            sum += v;
        }
        for j in 0..q.ncols() {
            p[[i, j]] /= sum;
        }
    }
    TargetDistribution { p }
}

/// KL(p || q), with 0 log 0 = 0.
pub fn clustering_loss(target: &TargetDistribution, assignment: &SoftAssignment) -> Result<f64> {
    let (p, q) = (&target.p, &assignment.q);
    if p.raw_dim() != q.raw_dim() {
        return Err(CeilError::Contract("p/q shape mismatch".into()));
    }
    let mut total = 0.0;
    for (pv, qv) in p.iter().zip(q.iter()) {
        if *pv > 0.0 {
            total += pv * (pv / qv).ln();
        }
    }
    if total < -1e-9 {
        return Err(CeilError::Numerical(format!("KL divergence came out negative: {total}")));
    }
    Ok(total.max(0.0))
}

/// Intermediate state of the category loss forward pass, reused by the
/// backward pass so the filter decisions stay consistent.
#[derive(Debug, Clone)]
pub(crate) struct CategoryForward {
    /// Filtered member row indices per nonempty cluster.
    pub filtered: Vec<Vec<usize>>,
    /// Filtered centroid per nonempty cluster.
    pub centroids: Vec<Array1<f64>>,
    pub denominator: f64,
    pub loss: f64,
}

pub(crate) fn category_forward(
    h: &Array2<f64>,
    assignment: &SoftAssignment,
    theta: f64,
    rule: DenominatorRule,
) -> Result<CategoryForward> {
    let k = assignment.q.ncols();
    if k < 2 {
        return Err(CeilError::Contract("category loss requires K >= 2".into()));
    }
    if assignment.q.nrows() != h.nrows() {
        return Err(CeilError::Contract("q/H row mismatch".into()));
    }
    let hard = hard_assign_rows(&assignment.q);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in hard.iter().enumerate() {
        members[c].push(i);
    }
    let mut filtered = Vec::new();
    let mut centroids = Vec::new();
    for cluster in members.iter().filter(|m| !m.is_empty()) {
        let center = mean_rows(h, cluster);
        let mut kept: Vec<usize> = cluster
            .iter()
            .copied()
            .filter(|&i| cosine(h.row(i), center.view()) >= theta)
            .collect();
        if kept.is_empty() {
            kept = cluster.clone();
        }
        centroids.push(mean_rows(h, &kept));
        filtered.push(kept);
    }
    let k_eff = filtered.len();
    if k_eff < 2 {
        // no pairs to separate; contribution pinned to exp(0)
        return Ok(CategoryForward {
            filtered,
            centroids,
            denominator: 1.0,
            loss: 1.0,
        });
    }
    let denominator = match rule {
        DenominatorRule::PairCount => (k_eff * (k_eff - 1)) as f64 / 2.0,
        DenominatorRule::Verbatim => {
            if k_eff == 2 {
                return Err(CeilError::Config(
                    "verbatim denominator rule divides by zero at K_eff = 2".into(),
                ));
            }
            ((k_eff - 1) * (k_eff - 2)) as f64 / 2.0
        }
    };
    let mut sum = 0.0;
    for i in 0..k_eff {
        for j in i + 1..k_eff {
            sum += cosine(centroids[i].view(), centroids[j].view());
        }
    }
    Ok(CategoryForward {
        filtered,
        centroids,
        denominator,
        loss: (sum / denominator).exp(),
    })
}

/// exp(mean pairwise cosine between theta-filtered cluster centroids).
pub fn category_loss(
    h: &Array2<f64>,
    assignment: &SoftAssignment,
    theta: f64,
    rule: DenominatorRule,
) -> Result<f64> {
    Ok(category_forward(h, assignment, theta, rule)?.loss)
}

/// Argmax per row, ties to the lowest index.
pub(crate) fn hard_assign_rows(q: &Array2<f64>) -> Vec<usize> {
    q.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Per-term loss breakdown of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub contrast: f64,
    pub cluster: f64,
    pub category: f64,
}

impl LossBreakdown {
    pub fn total(&self, lambda: f64) -> f64 {
        self.contrast + lambda * self.cluster + self.category
    }

    pub fn is_finite(&self) -> bool {
        self.contrast.is_finite() && self.cluster.is_finite() && self.category.is_finite()
    }
}

/// Composite objective: L_contrast + lambda * L_cluster + L_category.
/// Contrastive runs on the augmented rows, clustering and category on the
/// original batch.
pub fn total_loss(
    h_aug: &Array2<f64>,
    h: &Array2<f64>,
    assignment: &SoftAssignment,
    target: &TargetDistribution,
    weights: &LossWeights,
    rule: DenominatorRule,
) -> Result<LossBreakdown> {
    Ok(LossBreakdown {
        contrast: contrastive_loss(h_aug, weights.tau)?,
        cluster: clustering_loss(target, assignment)?,
        category: category_loss(h, assignment, weights.theta, rule)?,
    })
}

/// Gradients of the composite objective with respect to the augmented
/// representations, the original representations, and the centroids.
#[derive(Debug, Clone)]
pub struct ObjectiveGrads {
    pub h_aug: Array2<f64>,
    pub h: Array2<f64>,
    pub centroids: Array2<f64>,
}

/// d(contrastive_loss)/dH over the augmented batch.
pub fn contrastive_grad(h_aug: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    let rows = h_aug.nrows();
    if rows % 2 != 0 || rows == 0 {
        return Err(CeilError::Contract("augmented batch must have a positive even row count".into()));
    }
    let m = rows / 2;
    // d(loss)/d(cos(h_i, h_k)) accumulated over both pair directions
    let mut dsim = Array2::zeros((rows, rows));
    let scale = 1.0 / rows as f64;
    for k in 0..m {
        for (i, j) in [(2 * k, 2 * k + 1), (2 * k + 1, 2 * k)] {
            let sims: Vec<(usize, f64)> = (0..rows)
                .filter(|&t| t != i)
                .map(|t| (t, cosine(h_aug.row(i), h_aug.row(t)) / tau))
                .collect();
            let max = sims.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = sims.iter().map(|&(_, s)| (s - max).exp()).sum();
            for &(t, s) in &sims {
                let w = (s - max).exp() / denom;
                let ind = if t == j { 1.0 } else { 0.0 };
                dsim[[i, t]] += scale * (w - ind) / tau;
            }
        }
    }
    let mut grad = Array2::zeros(h_aug.raw_dim());
    for i in 0..rows {
        for t in 0..rows {
            let d = dsim[[i, t]];
            if d != 0.0 {
                let gi = cosine_grad_wrt_a(h_aug.row(i), h_aug.row(t));
                let gt = cosine_grad_wrt_a(h_aug.row(t), h_aug.row(i));
                grad.row_mut(i).scaled_add(d, &gi);
                grad.row_mut(t).scaled_add(d, &gt);
            }
        }
    }
    Ok(grad)
}

/// d(KL(p||q))/dH and /d(mu), with p held constant (standard self-training
/// practice).
pub fn clustering_grad(
    h: &Array2<f64>,
    centroids: &Centroids,
    alpha: f64,
    target: &TargetDistribution,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let assignment = soft_assign(h, centroids, alpha)?;
    let q = &assignment.q;
    let p = &target.p;
    if p.raw_dim() != q.raw_dim() {
        return Err(CeilError::Contract("p/q shape mismatch".into()));
    }
    let k = centroids.k();
    let mut dh = Array2::zeros(h.raw_dim());
    let mut dmu = Array2::zeros(centroids.mu.raw_dim());
    for i in 0..h.nrows() {
        // dL/dq_ij = -p_ij / q_ij; backprop through row normalization:
        // dL/dt_ij = (dL/dq_ij - sum_k dL/dq_ik q_ik) / S_i. With
        // dL/dq q = -p and sum_j p_ij = 1, the inner sum is -1.
        let mut s_i = 0.0;
        let mut t_row = vec![0.0; k];
        for j in 0..k {
            let diff = &h.row(i) - &centroids.mu.row(j);
            let d2 = diff.dot(&diff);
            let t = (1.0 + d2 / alpha).powf(-(alpha + 1.0) / 2.0);
            t_row[j] = t;
            s_i += t;
        }
        for j in 0..k {
            let qv = t_row[j] / s_i;
            let dq = -p[[i, j]] / qv;
            let dt = (dq + 1.0) / s_i;
            let diff = &h.row(i) - &centroids.mu.row(j);
            let d2 = diff.dot(&diff);
            // dt/d(d2) = t * (-(alpha+1)/2) * (1/alpha) / (1 + d2/alpha)
            let dd2 = dt * t_row[j] * (-(alpha + 1.0) / (2.0 * alpha)) / (1.0 + d2 / alpha);
            dh.row_mut(i).scaled_add(2.0 * dd2, &diff);
            dmu.row_mut(j).scaled_add(-2.0 * dd2, &diff);
        }
    }
    Ok((dh, dmu))
}

/// d(category_loss)/dH; hard assignments and filter membership are treated
/// as constants within the step.
pub fn category_grad(
    h: &Array2<f64>,
    assignment: &SoftAssignment,
    theta: f64,
    rule: DenominatorRule,
) -> Result<Array2<f64>> {
    let fwd = category_forward(h, assignment, theta, rule)?;
    let mut dh = Array2::zeros(h.raw_dim());
    let k_eff = fwd.filtered.len();
    if k_eff < 2 {
        return Ok(dh);
    }
    let factor = fwd.loss / fwd.denominator;
    let mut dg: Vec<Array1<f64>> = vec![Array1::zeros(h.ncols()); k_eff];
    for i in 0..k_eff {
        for j in i + 1..k_eff {
            dg[i].scaled_add(factor, &cosine_grad_wrt_a(fwd.centroids[i].view(), fwd.centroids[j].view()));
            dg[j].scaled_add(factor, &cosine_grad_wrt_a(fwd.centroids[j].view(), fwd.centroids[i].view()));
        }
    }
    for (members, grad) in fwd.filtered.iter().zip(&dg) {
        let share = 1.0 / members.len() as f64;
        for &row in members {
            dh.row_mut(row).scaled_add(share, grad);
        }
    }
    Ok(dh)
}

/// Gradients of the composite objective. The soft assignment is recomputed
/// internally from (H, centroids, alpha) so it stays consistent with the
/// differentiated forward pass; `target` is treated as a constant.
pub fn gradients(
    h_aug: &Array2<f64>,
    h: &Array2<f64>,
    centroids: &Centroids,
    target: &TargetDistribution,
    weights: &LossWeights,
    rule: DenominatorRule,
) -> Result<ObjectiveGrads> {
    let assignment = soft_assign(h, centroids, weights.alpha)?;
    let dh_aug = contrastive_grad(h_aug, weights.tau)?;
    let (mut dh, mut dmu) = clustering_grad(h, centroids, weights.alpha, target)?;
    dh *= weights.lambda;
    dmu *= weights.lambda;
    dh += &category_grad(h, &assignment, weights.theta, rule)?;
    Ok(ObjectiveGrads {
        h_aug: dh_aug,
        h: dh,
        centroids: dmu,
    })
}
