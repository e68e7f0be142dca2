//! The hierarchical losses: point-level contrast and swapped reconstruction,
//! cluster-level swapped prediction, and object-level contrast. Every loss
//! returns its value together with exact analytic gradients; Sinkhorn
//! targets are constants and contribute no gradient.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::numeric::{
    l2_normalize_rows, l2_normalize_rows_backward, logsumexp, rng_for, row_log_softmax,
};
use crate::sinkhorn::{cluster_scores, sinkhorn_assign};

/// Learnable cluster centroids, one unit-norm column per pseudo class.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    /// d_proj × K.
    pub c: Array2<f64>,
}

impl Prototypes {
    pub fn init(d_proj: usize, num_clusters: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = rng_for(seed, "prototypes", &[]);
        let bound = 1.0 / (d_proj as f64).sqrt();
        let mut c = Array2::zeros((d_proj, num_clusters));
        for v in c.iter_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
        let mut p = Self { c };
        p.renormalize_columns();
        p
    }

    pub fn num_clusters(&self) -> usize {
        self.c.ncols()
    }

    /// Projects every column back to unit norm. Runs outside the gradient
    /// path, after each optimizer step.
    pub fn renormalize_columns(&mut self) {
        for mut col in self.c.columns_mut() {
            let n = col.dot(&col).sqrt();
            if n > 0.0 {
                col.mapv_inplace(|v| v / n);
            }
        }
    }
}

/// Softmax temperatures for the two InfoNCE levels and the cluster head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperatures {
    pub contrast: f64,
    pub cluster: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            contrast: 0.4,
            cluster: 0.1,
        }
    }
}

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            beta: 100.0,
            gamma: 1.0,
        }
    }
}

/// The four loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub point_contrast: f64,
    pub reconstruct: f64,
    pub cluster: f64,
    pub object_contrast: f64,
}

/// Weighted combination of the four parts.
pub fn total_loss(parts: &LossValues, weights: &LossWeights) -> f64 {
    parts.point_contrast
        + weights.alpha * parts.reconstruct
        + weights.beta * parts.cluster
        + weights.gamma * parts.object_contrast
}

/// Directional InfoNCE over matched feature rows: each geometry row is the
/// anchor, the color row of the same index is its positive, all other color
/// rows are negatives.
///
/// Returns (value, dL/dz_geo, dL/dz_color).
pub fn point_contrast_loss(
    z_geo: &Array2<f64>,
    z_color: &Array2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if z_geo.dim() != z_color.dim() {
        return Err(Error::shape(
            "point_contrast_loss",
            format!("{:?}", z_geo.dim()),
            format!("{:?}", z_color.dim()),
        ));
    }
    let m = z_geo.nrows();
    if m < 2 {
        return Err(Error::InvalidArgument(
            "point contrast needs at least two rows (no negatives otherwise)".into(),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }

    let s = z_geo.dot(&z_color.t()) / tau;
    let mut value = 0.0;
    // dL/dS = softmax(S) − I, row-wise.
    let mut ds = Array2::zeros((m, m));
    for i in 0..m {
        let row = s.row(i);
        let lse = logsumexp(row);
        value += lse - s[[i, i]];
        for j in 0..m {
            ds[[i, j]] = (s[[i, j]] - lse).exp();
        }
        ds[[i, i]] -= 1.0;
    }
    let dz_geo = ds.dot(z_color) / tau;
    let dz_color = ds.t().dot(z_geo) / tau;
    Ok((value, dz_geo, dz_color))
}

/// Mean squared error of the swapped reconstructions against the normalized
/// originals. Returns (value, dL/dp̂_geo, dL/dp̂_color).
pub fn point_reconstruct_loss(
    p_hat_geo: &Array2<f64>,
    p_hat_color: &Array2<f64>,
    geo01: &Array2<f64>,
    color01: &Array2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if p_hat_geo.dim() != geo01.dim() || p_hat_color.dim() != color01.dim() || geo01.dim() != color01.dim() {
        return Err(Error::shape(
            "point_reconstruct_loss",
            format!("{:?}", geo01.dim()),
            format!(
                "{:?}/{:?}/{:?}",
                p_hat_geo.dim(),
                p_hat_color.dim(),
                color01.dim()
            ),
        ));
    }
    let n = geo01.nrows() as f64;
    let dg = p_hat_geo - geo01;
    let dc = p_hat_color - color01;
    let value = (dg.mapv(|v| v * v).sum() + dc.mapv(|v| v * v).sum()) / n;
    Ok((value, dg * (2.0 / n), dc * (2.0 / n)))
}

/// Softmax predictions and Sinkhorn targets of both branches over one batch,
/// with per-row confidence defined as the max softmax probability.
#[derive(Debug, Clone)]
pub struct PredictionPair {
    pub p_geo: Array2<f64>,
    pub p_color: Array2<f64>,
    pub q_geo: Array2<f64>,
    pub q_color: Array2<f64>,
}

impl PredictionPair {
    pub fn num_rows(&self) -> usize {
        self.p_geo.nrows()
    }

    pub fn num_clusters(&self) -> usize {
        self.p_geo.ncols()
    }
}

/// Row argmax with ties broken toward the smaller index, plus the max value.
pub(crate) fn row_argmax(p: &Array2<f64>) -> Vec<(usize, f64)> {
    p.rows()
        .into_iter()
        .map(|row| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (k, &v) in row.iter().enumerate() {
                if v > best.1 {
                    best = (k, v);
                }
            }
            best
        })
        .collect()
}

/// Everything the swapped-prediction loss produces.
#[derive(Debug, Clone)]
pub struct SwappedPrediction {
    pub value: f64,
    pub dz_geo: Array2<f64>,
    pub dz_color: Array2<f64>,
    pub d_prototypes: Array2<f64>,
    pub preds: PredictionPair,
}

/// Swapped prediction from raw score matrices and fixed targets; the
/// lower-level seam under [`swapped_prediction_loss`]. Returns the loss and
/// the gradients w.r.t. both score matrices.
pub fn swapped_prediction_from_scores(
    s_geo: &Array2<f64>,
    s_color: &Array2<f64>,
    q_geo: &Array2<f64>,
    q_color: &Array2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>, PredictionPair)> {
    let (b, k) = s_geo.dim();
    for (name, m) in [("s_color", s_color), ("q_geo", q_geo), ("q_color", q_color)] {
        if m.dim() != (b, k) {
            return Err(Error::shape(
                "swapped_prediction",
                format!("{b}×{k}"),
                format!("{name} is {:?}", m.dim()),
            ));
        }
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }

    let logp_geo = row_log_softmax(s_geo, tau);
    let logp_color = row_log_softmax(s_color, tau);
    let p_geo = logp_geo.mapv(f64::exp);
    let p_color = logp_color.mapv(f64::exp);

    let count = (b * k) as f64;
    let value = -0.5 / count * ((q_geo * &logp_color).sum() + (q_color * &logp_geo).sum());

    // Row sums of Q are 1, so d value / dS = 0.5/(BKτ) · (P − Q_other).
    let scale = 0.5 / (count * tau);
    let ds_geo = (&p_geo - q_color) * scale;
    let ds_color = (&p_color - q_geo) * scale;

    Ok((
        value,
        ds_geo,
        ds_color,
        PredictionPair {
            p_geo,
            p_color,
            q_geo: q_geo.clone(),
            q_color: q_color.clone(),
        },
    ))
}

/// Swapped prediction with the targets supplied by the caller. Used where
/// the targets must stay frozen, e.g. finite-difference checks or the
/// self-softmax ablation.
pub fn swapped_prediction_with_targets(
    z_geo: &Array2<f64>,
    z_color: &Array2<f64>,
    prototypes: &Prototypes,
    tau: f64,
    q_geo: &Array2<f64>,
    q_color: &Array2<f64>,
) -> Result<SwappedPrediction> {
    let s_geo = cluster_scores(z_geo, prototypes)?;
    let s_color = cluster_scores(z_color, prototypes)?;
    let (value, ds_geo, ds_color, preds) =
        swapped_prediction_from_scores(&s_geo, &s_color, q_geo, q_color, tau)?;
    let dz_geo = ds_geo.dot(&prototypes.c.t());
    let dz_color = ds_color.dot(&prototypes.c.t());
    let d_prototypes = z_geo.t().dot(&ds_geo) + z_color.t().dot(&ds_color);
    Ok(SwappedPrediction {
        value,
        dz_geo,
        dz_color,
        d_prototypes,
        preds,
    })
}

/// Deep clustering via swapped prediction: each branch's softmax prediction
/// is supervised by the other branch's Sinkhorn equal-partition assignment.
/// Gradients flow to the features and prototypes through the predictions
/// only.
pub fn swapped_prediction_loss(
    z_geo: &Array2<f64>,
    z_color: &Array2<f64>,
    prototypes: &Prototypes,
    tau: f64,
    sinkhorn_eps: f64,
    sinkhorn_iters: usize,
) -> Result<SwappedPrediction> {
    let s_geo = cluster_scores(z_geo, prototypes)?;
    let s_color = cluster_scores(z_color, prototypes)?;
    let q_geo = sinkhorn_assign(&s_geo, sinkhorn_eps, sinkhorn_iters)?;
    let q_color = sinkhorn_assign(&s_color, sinkhorn_eps, sinkhorn_iters)?;
    swapped_prediction_with_targets(z_geo, z_color, prototypes, tau, &q_geo, &q_color)
}

/// Object-level InfoNCE over per-pseudo-label mean features.
///
/// Rows whose prediction confidence clears `threshold_scale / K` are grouped
/// by their predicted label per branch; labels present in both branches
/// contribute one ℓ2-normalized mean feature per branch. Fewer than two
/// surviving labels yield zero loss and zero gradient.
pub fn object_contrast_loss(
    z_geo: &Array2<f64>,
    z_color: &Array2<f64>,
    preds: &PredictionPair,
    threshold_scale: f64,
    tau: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if z_geo.dim() != z_color.dim() {
        return Err(Error::shape(
            "object_contrast_loss",
            format!("{:?}", z_geo.dim()),
            format!("{:?}", z_color.dim()),
        ));
    }
    if preds.num_rows() != z_geo.nrows() {
        return Err(Error::shape(
            "object_contrast_loss",
            format!("{} prediction rows", z_geo.nrows()),
            format!("{}", preds.num_rows()),
        ));
    }
    let k = preds.num_clusters();
    let threshold = threshold_scale / k as f64;

    let mut members_geo: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut members_color: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (b, (label, conf)) in row_argmax(&preds.p_geo).into_iter().enumerate() {
        if conf > threshold {
            members_geo[label].push(b);
        }
    }
    for (b, (label, conf)) in row_argmax(&preds.p_color).into_iter().enumerate() {
        if conf > threshold {
            members_color[label].push(b);
        }
    }
    let shared: Vec<usize> = (0..k)
        .filter(|&kk| !members_geo[kk].is_empty() && !members_color[kk].is_empty())
        .collect();

    let zero = || (Array2::zeros(z_geo.raw_dim()), Array2::zeros(z_color.raw_dim()));
    if shared.len() < 2 {
        let (dg, dc) = zero();
        return Ok((0.0, dg, dc));
    }

    let d = z_geo.ncols();
    let l = shared.len();
    let mut u_geo = Array2::zeros((l, d));
    let mut u_color = Array2::zeros((l, d));
    for (row, &kk) in shared.iter().enumerate() {
        for &b in &members_geo[kk] {
            let m = members_geo[kk].len() as f64;
            for j in 0..d {
                u_geo[[row, j]] += z_geo[[b, j]] / m;
            }
        }
        for &b in &members_color[kk] {
            let m = members_color[kk].len() as f64;
            for j in 0..d {
                u_color[[row, j]] += z_color[[b, j]] / m;
            }
        }
    }
    let m_geo = l2_normalize_rows(&u_geo);
    let m_color = l2_normalize_rows(&u_color);

    let (value, dm_geo, dm_color) = point_contrast_loss(&m_geo, &m_color, tau)?;
    let du_geo = l2_normalize_rows_backward(&u_geo, &dm_geo);
    let du_color = l2_normalize_rows_backward(&u_color, &dm_color);

    let (mut dz_geo, mut dz_color) = zero();
    for (row, &kk) in shared.iter().enumerate() {
        let mg = members_geo[kk].len() as f64;
        for &b in &members_geo[kk] {
            for j in 0..d {
                dz_geo[[b, j]] += du_geo[[row, j]] / mg;
            }
        }
        let mc = members_color[kk].len() as f64;
        for &b in &members_color[kk] {
            for j in 0..d {
                dz_color[[b, j]] += du_color[[row, j]] / mc;
            }
        }
    }
    Ok((value, dz_geo, dz_color))
}
