//! Clustering metrics: optimal-matching accuracy and normalized mutual
//! information.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CeilError, Result};

/// Prediction-by-gold co-occurrence counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyTable {
    pub counts: Array2<u64>,
    pub n: u64,
}

impl ContingencyTable {
    pub fn from_labels(pred: &[usize], gold: &[usize]) -> Result<ContingencyTable> {
        if pred.len() != gold.len() {
            return Err(CeilError::Contract(format!(
                "prediction/gold length mismatch: {} vs {}",
                pred.len(),
                gold.len()
            )));
        }
        let k_pred = pred.iter().max().map_or(0, |&m| m + 1);
        let k_gold = gold.iter().max().map_or(0, |&m| m + 1);
        let mut counts = Array2::zeros((k_pred, k_gold));
        for (&p, &g) in pred.iter().zip(gold.iter()) {
            counts[[p, g]] += 1;
        }
        Ok(ContingencyTable {
            counts,
            n: pred.len() as u64,
        })
    }
}

/// Minimal-cost one-to-one assignment of rows to columns of a square cost
/// matrix (Hungarian method, shortest augmenting path formulation).
/// Returns (row -> column permutation, optimal cost).
pub fn optimal_assignment(cost: &Array2<f64>) -> Result<(Vec<usize>, f64)> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(CeilError::Contract("cost matrix must be square".into()));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(CeilError::Contract("cost matrix entries must be finite".into()));
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    // 1-based potentials; p[j] is the row matched to column j
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
        total += cost[[p[j] - 1, j - 1]];
    }
    Ok((assignment, total))
}

/// Top-1 accuracy under the optimal one-to-one cluster-to-label matching.
pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(pred, gold)?;
    if table.n == 0 {
        return Err(CeilError::Contract("cannot evaluate empty label vectors".into()));
    }
    let (kp, kg) = (table.counts.nrows(), table.counts.ncols());
    let k = kp.max(kg);
    // negate counts so minimal cost maximizes matched mass; pad with zeros
    let mut cost = Array2::zeros((k, k));
    for i in 0..kp {
        for j in 0..kg {
            cost[[i, j]] = -(table.counts[[i, j]] as f64);
        }
    }
    let (_, total) = optimal_assignment(&cost)?;
    Ok(-total / table.n as f64)
}

fn entropy(counts: &[u64], n: u64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// NMI with geometric-mean normalization and natural logs. Two identical
/// single-cluster partitions score 1.0; when exactly one side has zero
/// entropy the score is 0.0.
pub fn nmi(pred: &[usize], gold: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(pred, gold)?;
    if table.n == 0 {
        return Err(CeilError::Contract("cannot evaluate empty label vectors".into()));
    }
    let n = table.n as f64;
    let row_sums: Vec<u64> = table
        .counts
        .rows()
        .into_iter()
        .map(|r| r.sum())
        .collect();
    let col_sums: Vec<u64> = table
        .counts
        .columns()
        .into_iter()
        .map(|c| c.sum())
        .collect();
    let h_pred = entropy(&row_sums, table.n);
    let h_gold = entropy(&col_sums, table.n);
    if h_pred == 0.0 && h_gold == 0.0 {
        return Ok(1.0);
    }
    if h_pred == 0.0 || h_gold == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for i in 0..table.counts.nrows() {
        for j in 0..table.counts.ncols() {
            let c = table.counts[[i, j]];
            if c > 0 {
                let pij = c as f64 / n;
                mi += pij * (pij * n * n / (row_sums[i] as f64 * col_sums[j] as f64)).ln();
            }
        }
    }
    Ok((mi / (h_pred * h_gold).sqrt()).clamp(0.0, 1.0))
}

/// The metrics.json payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub nmi: f64,
    pub n: usize,
    pub k_pred: usize,
    pub k_gold: usize,
}

pub fn metrics_report(pred: &[usize], gold: &[usize]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        acc: accuracy(pred, gold)?,
        nmi: nmi(pred, gold)?,
        n: pred.len(),
        k_pred: pred.iter().max().map_or(0, |&m| m + 1),
        k_gold: gold.iter().max().map_or(0, |&m| m + 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_force(cost: &Array2<f64>) -> f64 {
        let n = cost.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut perm, 0, &mut |p| {
            let total: f64 = p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
            if total < best {
                best = total;
            }
        });
        best
    }

    fn permute(perm: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == perm.len() {
            visit(perm);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute(perm, k + 1, visit);
            perm.swap(k, i);
        }
    }

    #[test]
    fn assignment_identity_favoring() {
        let cost = array![[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]];
        let (perm, total) = optimal_assignment(&cost).unwrap();
        assert_eq!(perm, vec![0, 1, 2]);
        assert_eq!(total, 0.0);
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.gen_range(1..=6);
            let cost = Array2::from_shape_fn((n, n), |_| rng.gen_range(-9i64..10) as f64);
            let (_, total) = optimal_assignment(&cost).unwrap();
            assert_eq!(total, brute_force(&cost));
        }
    }

    #[test]
    fn assignment_row_shift_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cost = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-5.0..5.0));
        let (_, total) = optimal_assignment(&cost).unwrap();
        let mut shifted = cost.clone();
        for j in 0..4 {
            shifted[[2, j]] += 3.5;
        }
        let (_, total2) = optimal_assignment(&shifted).unwrap();
        assert!((total2 - total - 3.5).abs() < 1e-9);
    }

    #[test]
    fn assignment_rejects_non_finite() {
        let cost = array![[0.0, f64::NAN], [1.0, 0.0]];
        assert!(optimal_assignment(&cost).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let gold = vec![0, 1, 1, 1];
        assert_eq!(accuracy(&gold, &gold).unwrap(), 1.0);
        // relabeling permutation scores 1.0
        let relabel: Vec<usize> = gold.iter().map(|&g| 1 - g).collect();
        assert_eq!(accuracy(&relabel, &gold).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 1, 1], &gold).unwrap(), 0.75);
        assert!(accuracy(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[0, 1, 2, 0], &[0, 1, 2, 0]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
        // independent partitions
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-12);
        // single-cluster identical partitions
        assert_eq!(nmi(&[0, 0], &[0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn metrics_invariant_under_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(5..40);
            let kp = rng.gen_range(2..5);
            let kg = rng.gen_range(2..5);
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..kp)).collect();
            let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..kg)).collect();
            let relabeled: Vec<usize> = pred.iter().map(|&p| (p + 1) % kp).collect();
            assert!((accuracy(&pred, &gold).unwrap() - accuracy(&relabeled, &gold).unwrap()).abs() < 1e-12);
            assert!((nmi(&pred, &gold).unwrap() - nmi(&relabeled, &gold).unwrap()).abs() < 1e-12);
            // symmetry of NMI
            assert!((nmi(&pred, &gold).unwrap() - nmi(&gold, &pred).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_pigeonhole_lower_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let kg = rng.gen_range(2..5usize);
            let per = rng.gen_range(3..8usize);
            let gold: Vec<usize> = (0..kg * per).map(|i| i / per).collect();
            let pred: Vec<usize> = (0..kg * per).map(|_| rng.gen_range(0..kg)).collect();
            let acc = accuracy(&pred, &gold).unwrap();
            assert!(acc >= 1.0 / kg as f64 - 1e-12);
        }
    }
}
