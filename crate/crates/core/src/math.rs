//! Small vector helpers used by the loss and refinement code.

use ndarray::{Array1, Array2, ArrayView1};

/// Norm below which a vector is treated as zero for cosine purposes.
pub const ZERO_NORM_EPS: f64 = 1e-300;

/// Cosine similarity; defined as 0 when either vector has (near-)zero norm.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na < ZERO_NORM_EPS || nb < ZERO_NORM_EPS {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// d cos(a,b) / da. Zero when either norm vanishes (matching the cosine
/// convention above).
pub fn cosine_grad_wrt_a(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na < ZERO_NORM_EPS || nb < ZERO_NORM_EPS {
        return Array1::zeros(a.len());
    }
    let cos = a.dot(&b) / (na * nb);
    // b/(|a||b|) - cos * a/|a|^2
    &b.to_owned() / (na * nb) - &(&a.to_owned() * (cos / (na * na)))
}

/// Mean of the selected rows of `m`; rows must be nonempty.
pub fn mean_rows(m: &Array2<f64>, rows: &[usize]) -> Array1<f64> {
    let mut acc = Array1::zeros(m.ncols());
    for &i in rows {
        acc += &m.row(i);
    }
    acc / rows.len() as f64
}

/// Numerically stable softmax.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Array1<f64> = logits.mapv(|x| (x - max).exp());
    let sum = exps.sum();
    exps / sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cosine_zero_vector_is_zero() {
        let a = array![0.0, 0.0];
        let b = array![1.0, 2.0];
        assert_eq!(cosine(a.view(), b.view()), 0.0);
    }

    #[test]
    fn cosine_scale_invariant() {
        let a = array![1.0, 2.0, -1.0];
        let b = array![0.5, -0.25, 3.0];
        let scaled = &a * 7.5;
        let c1 = cosine(a.view(), b.view());
        let c2 = cosine(scaled.view(), b.view());
        assert!((c1 - c2).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(array![1.0, 2.0, 3.0, -100.0].view());
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_grad_matches_finite_difference() {
        let a = array![0.3, -1.2, 0.7];
        let b = array![1.1, 0.4, -0.9];
        let g = cosine_grad_wrt_a(a.view(), b.view());
        let step = 1e-6;
        for i in 0..3 {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[i] += step;
            am[i] -= step;
            let fd = (cosine(ap.view(), b.view()) - cosine(am.view(), b.view())) / (2.0 * step);
            assert!((fd - g[i]).abs() < 1e-8, "coord {i}: fd {fd} vs {}", g[i]);
        }
    }
}
