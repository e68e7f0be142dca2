//! Equal-partition cluster assignment by Sinkhorn-Knopp matrix scaling.
//!
//! Scores are similarities between ℓ2-normalized features and unit-norm
//! prototype columns. The assignment pushes the batch toward a uniform
//! cluster marginal (1/K per cluster) and a uniform sample marginal (1/B per
//! sample), then renormalizes so each sample's assignment row sums to 1.
//! Assignments are targets only: no gradient flows through them.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::losses::Prototypes;

/// Cosine similarities S[b,k] = ⟨z_b, c_k⟩ between feature rows and
/// prototype columns.
pub fn cluster_scores(z: &Array2<f64>, prototypes: &Prototypes) -> Result<Array2<f64>> {
    if z.ncols() != prototypes.c.nrows() {
        return Err(Error::shape(
            "cluster_scores",
            format!("B×{}", prototypes.c.nrows()),
            format!("{:?}", z.dim()),
        ));
    }
    Ok(z.dot(&prototypes.c))
}

/// Sinkhorn-Knopp assignment from a B×K score matrix.
///
/// Each row of the scores is shifted by its own maximum before
/// exponentiation. That guards against overflow and makes the output exactly
/// invariant to per-sample score offsets (a whole-row constant shifts the
/// row max by the same amount, so the canonical matrix is bit-identical);
/// global constants are a special case. The interleaved row/column scaling
/// then runs `iters` rounds, and the result is renormalized per sample.
pub fn sinkhorn_assign(scores: &Array2<f64>, eps: f64, iters: usize) -> Result<Array2<f64>> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("sinkhorn eps must be positive, got {eps}")));
    }
    let (b, k) = scores.dim();
    if b == 0 || k == 0 {
        return Err(Error::InvalidArgument("sinkhorn needs at least one row and one column".into()));
    }

    // Transposed transport state: rows are clusters, columns are samples.
    let mut q = Array2::zeros((k, b));
    for (bi, row) in scores.rows().into_iter().enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (ki, &s) in row.iter().enumerate() {
            q[[ki, bi]] = ((s - m) / eps).exp();
        }
    }
    let total = q.sum();
    q.mapv_inplace(|v| v / total);

    let r = 1.0 / k as f64;
    let c = 1.0 / b as f64;
    for _ in 0..iters {
        for mut row in q.rows_mut() {
            let u = row.sum();
            if u > 0.0 {
                let f = r / u;
                row.mapv_inplace(|v| v * f);
            }
        }
        for mut col in q.columns_mut() {
            let v = col.sum();
            if v > 0.0 {
                let f = c / v;
                col.mapv_inplace(|x| x * f);
            }
        }
    }

    // Per-sample renormalization; every sample keeps positive mass because
    // its canonical max entry is exp(0)=1 before scaling.
    let mut out = Array2::zeros((b, k));
    for bi in 0..b {
        let col = q.column(bi);
        let s = col.sum();
        for ki in 0..k {
            out[[bi, ki]] = col[ki] / s;
        }
    }
    Ok(out)
}
