//! Fully unsupervised segmentation evaluation: fuse both branches' cluster
//! predictions into pseudo-labels, align them to ground truth by Hungarian
//! matching, and score mean IoU. Also exports the swapped reconstructions.
//! Nothing in here mutates model parameters.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::hungarian::hungarian_align;
use crate::model::{decode_pair, forward_pair, ModelParams};
use crate::numeric::{rng_for, row_softmax};
use crate::scene::{normalize_scene, save_cloud, LabeledPointCloud};
use crate::sinkhorn::cluster_scores;

/// Pseudo × ground-truth count table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    /// counts[p][g] = points with pseudo-label p and true label g.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k_pred: usize, k_gt: usize) -> Self {
        Self {
            counts: vec![vec![0; k_gt]; k_pred],
        }
    }

    pub fn k_pred(&self) -> usize {
        self.counts.len()
    }

    pub fn k_gt(&self) -> usize {
        self.counts.first().map_or(0, |r| r.len())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accumulate(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "confusion",
                format!("{} labels", pred.len()),
                format!("{}", gt.len()),
            ));
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if p >= self.k_pred() || g >= self.k_gt() {
                return Err(Error::InvalidArgument(format!(
                    "label pair ({p},{g}) outside {}×{}",
                    self.k_pred(),
                    self.k_gt()
                )));
            }
            self.counts[p][g] += 1;
        }
        Ok(())
    }
}

/// Per-ground-truth-class tallies after alignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStats {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// Whether the class occurs in the ground truth at all.
    pub present: bool,
    pub iou: f64,
}

/// Segmentation metrics: the pseudo→gt mapping, per-class IoU, and mIoU
/// over classes present in the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMetrics {
    /// mapping[p] = ground-truth class assigned to pseudo class p, if any.
    /// Empty when the metrics were computed from already-projected labels.
    pub mapping: Vec<Option<usize>>,
    pub classes: Vec<ClassStats>,
    pub miou: f64,
}

/// Fuses both branches' row-stochastic predictions: argmax of the summed
/// probabilities, ties broken toward the smaller index.
pub fn fuse_pseudo_labels(p_geo: &Array2<f64>, p_color: &Array2<f64>) -> Result<Vec<usize>> {
    if p_geo.dim() != p_color.dim() {
        return Err(Error::shape(
            "fuse_pseudo_labels",
            format!("{:?}", p_geo.dim()),
            format!("{:?}", p_color.dim()),
        ));
    }
    let mut labels = Vec::with_capacity(p_geo.nrows());
    for (rg, rc) in p_geo.rows().into_iter().zip(p_color.rows()) {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (k, (&a, &b)) in rg.iter().zip(rc.iter()).enumerate() {
            let s = a + b;
            if s > best.1 {
                best = (k, s);
            }
        }
        labels.push(best.0);
    }
    Ok(labels)
}

/// IoU per class and their mean over classes present in the ground truth.
///
/// `pred` values at or above `k_gt` count as "no class": they contribute a
/// false negative to the point's true class and a false positive to none
/// (this is how pseudo classes left unmapped by the alignment enter).
pub fn compute_miou(pred: &[usize], gt: &[usize], k_gt: usize) -> Result<SegMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "compute_miou",
            format!("{} labels", pred.len()),
            format!("{}", gt.len()),
        ));
    }
    if let Some(&bad) = gt.iter().find(|&&g| g >= k_gt) {
        return Err(Error::InvalidArgument(format!(
            "ground-truth label {bad} outside [0,{k_gt})"
        )));
    }
    let mut tp = vec![0u64; k_gt];
    let mut fp = vec![0u64; k_gt];
    let mut fn_ = vec![0u64; k_gt];
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if p == g {
            tp[g] += 1;
        } else {
            fn_[g] += 1;
            if p < k_gt {
                fp[p] += 1;
            }
        }
    }
    let mut classes = Vec::with_capacity(k_gt);
    let mut sum = 0.0;
    let mut present_count = 0usize;
    for c in 0..k_gt {
        let present = tp[c] + fn_[c] > 0;
        let denom = tp[c] + fp[c] + fn_[c];
        let iou = if denom == 0 { 0.0 } else { tp[c] as f64 / denom as f64 };
        if present {
            sum += iou;
            present_count += 1;
        }
        classes.push(ClassStats {
            tp: tp[c],
            fp: fp[c],
            fn_: fn_[c],
            present,
            iou,
        });
    }
    let miou = if present_count == 0 { 0.0 } else { sum / present_count as f64 };
    Ok(SegMetrics {
        mapping: Vec::new(),
        classes,
        miou,
    })
}

/// Projects pseudo-labels through an alignment mapping; unmapped pseudo
/// classes become the out-of-range sentinel `k_gt`.
pub fn project_labels(pseudo: &[usize], mapping: &[Option<usize>], k_gt: usize) -> Vec<usize> {
    pseudo
        .iter()
        .map(|&p| mapping.get(p).copied().flatten().unwrap_or(k_gt))
        .collect()
}

/// Aligns a confusion matrix and scores it: Hungarian mapping, per-class
/// IoU, and mIoU, all computed from the counts alone.
pub fn align_and_score(cm: &ConfusionMatrix) -> SegMetrics {
    let mapping = hungarian_align(&cm.counts);
    let k_gt = cm.k_gt();
    let mut tp = vec![0u64; k_gt];
    let mut fp = vec![0u64; k_gt];
    let mut fn_ = vec![0u64; k_gt];
    for (p, row) in cm.counts.iter().enumerate() {
        let target = mapping[p];
        for (g, &count) in row.iter().enumerate() {
            match target {
                Some(t) if t == g => tp[g] += count,
                Some(t) => {
                    fp[t] += count;
                    fn_[g] += count;
                }
                None => fn_[g] += count,
            }
        }
    }
    let mut classes = Vec::with_capacity(k_gt);
    let mut sum = 0.0;
    let mut present_count = 0usize;
    for c in 0..k_gt {
        let present = tp[c] + fn_[c] > 0;
        let denom = tp[c] + fp[c] + fn_[c];
        let iou = if denom == 0 { 0.0 } else { tp[c] as f64 / denom as f64 };
        if present {
            sum += iou;
            present_count += 1;
        }
        classes.push(ClassStats {
            tp: tp[c],
            fp: fp[c],
            fn_: fn_[c],
            present,
            iou,
        });
    }
    let miou = if present_count == 0 { 0.0 } else { sum / present_count as f64 };
    SegMetrics {
        mapping,
        classes,
        miou,
    }
}

/// Both branches' cluster predictions for one cloud, at the cluster
/// temperature, plus the fused pseudo-labels.
pub fn predict_pseudo_labels(
    params: &ModelParams,
    tau_cluster: f64,
    cloud: &LabeledPointCloud,
) -> Result<(Vec<usize>, Array2<f64>, Array2<f64>)> {
    let (geo01, color01) = normalize_scene(cloud);
    let (pair, _) = forward_pair(&geo01, &color01, params)?;
    let s_geo = cluster_scores(&pair.z_geo, &params.prototypes)?;
    let s_color = cluster_scores(&pair.z_color, &params.prototypes)?;
    let p_geo = row_softmax(&s_geo, tau_cluster);
    let p_color = row_softmax(&s_color, tau_cluster);
    let labels = fuse_pseudo_labels(&p_geo, &p_color)?;
    Ok((labels, p_geo, p_color))
}

/// Unsupervised segmentation of one labeled cloud: fused pseudo-labels plus
/// Hungarian-aligned metrics. Clouds without ground truth still get labels;
/// the metrics are omitted. No parameters are updated.
pub fn unsup_segment(
    params: &ModelParams,
    tau_cluster: f64,
    cloud: &LabeledPointCloud,
) -> Result<(Vec<usize>, Option<SegMetrics>)> {
    let (labels, _, _) = predict_pseudo_labels(params, tau_cluster, cloud)?;
    let Some(gt) = &cloud.labels else {
        return Ok((labels, None));
    };
    let k_gt = gt.iter().max().map_or(0, |&m| m + 1);
    let mut cm = ConfusionMatrix::new(params.prototypes.num_clusters(), k_gt);
    cm.accumulate(&labels, gt)?;
    Ok((labels, Some(align_and_score(&cm))))
}

/// Aggregate evaluation over many scenes: one confusion matrix over all
/// labeled points, one alignment, one mIoU.
#[derive(Debug, Clone)]
pub struct DatasetEval {
    pub scenes: usize,
    pub labeled_scenes: usize,
    pub points: u64,
    pub k_pred: usize,
    pub k_gt: usize,
    pub metrics: Option<SegMetrics>,
}

pub fn evaluate_dataset(
    params: &ModelParams,
    tau_cluster: f64,
    clouds: &[LabeledPointCloud],
) -> Result<DatasetEval> {
    if clouds.is_empty() {
        return Err(Error::InvalidArgument("no scenes to evaluate".into()));
    }
    let k_pred = params.prototypes.num_clusters();
    let k_gt = clouds
        .iter()
        .filter_map(|c| c.labels.as_ref())
        .flat_map(|ls| ls.iter().copied())
        .max()
        .map_or(0, |m| m + 1);

    let mut cm = ConfusionMatrix::new(k_pred, k_gt);
    let mut labeled_scenes = 0usize;
    let mut points = 0u64;
    for cloud in clouds {
        points += cloud.num_points() as u64;
        let (labels, _, _) = predict_pseudo_labels(params, tau_cluster, cloud)?;
        if let Some(gt) = &cloud.labels {
            cm.accumulate(&labels, gt)?;
            labeled_scenes += 1;
        }
    }
    let metrics = (labeled_scenes > 0).then(|| align_and_score(&cm));
    Ok(DatasetEval {
        scenes: clouds.len(),
        labeled_scenes,
        points,
        k_pred,
        k_gt,
        metrics,
    })
}

/// The chance band of the alignment metric: mIoU of `draws` random
/// permutations of the predicted labels against the fixed ground truth,
/// returned as (min, max). Permuting destroys the point-wise
/// correspondence while keeping both label distributions.
pub fn permutation_chance_band(
    pred: &[usize],
    gt: &[usize],
    k_pred: usize,
    k_gt: usize,
    draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    use rand::seq::SliceRandom;
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "permutation_chance_band",
            format!("{} labels", pred.len()),
            format!("{}", gt.len()),
        ));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut shuffled = pred.to_vec();
    for draw in 0..draws {
        shuffled.shuffle(&mut rng_for(seed, "perm-band", &[draw as u64]));
        let mut cm = ConfusionMatrix::new(k_pred, k_gt);
        cm.accumulate(&shuffled, gt)?;
        let m = align_and_score(&cm).miou;
        lo = lo.min(m);
        hi = hi.max(m);
    }
    Ok((lo, hi))
}

/// Paths and errors of one reconstruction export.
#[derive(Debug, Clone)]
pub struct ReconstructExport {
    pub color_recon_path: PathBuf,
    pub geometry_recon_path: PathBuf,
    pub summary_path: PathBuf,
    pub mse_geo: f64,
    pub mse_color: f64,
}

/// Writes the two swapped reconstructions of a cloud:
/// original normalized coordinates with predicted colors, and predicted
/// coordinates with original colors, plus a summary line of both MSE terms.
pub fn reconstruct_export(
    params: &ModelParams,
    cloud: &LabeledPointCloud,
    out_dir: &Path,
) -> Result<ReconstructExport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (geo01, color01) = normalize_scene(cloud);
    let (pair, _) = forward_pair(&geo01, &color01, params)?;
    let (p_hat_geo, p_hat_color) = decode_pair(&pair, params)?;

    // The two MSE terms, on the raw predictions.
    let dg = (&p_hat_geo - &geo01).mapv(|v| v * v).sum() / geo01.nrows() as f64;
    let dc = (&p_hat_color - &color01).mapv(|v| v * v).sum() / color01.nrows() as f64;

    // Colors must be clamped into [0,1] to stay a valid cloud file.
    let clamped_colors = p_hat_color.mapv(|v| v.clamp(0.0, 1.0));
    let color_recon = LabeledPointCloud::new(
        geo01.clone(),
        clamped_colors,
        cloud.labels.clone(),
        format!("{}-recon-color", cloud.scene_id),
    )?;
    let geometry_recon = LabeledPointCloud::new(
        p_hat_geo,
        color01.clone(),
        cloud.labels.clone(),
        format!("{}-recon-geometry", cloud.scene_id),
    )?;

    let color_recon_path = out_dir.join(format!("{}.recon_color.pgcc", cloud.scene_id));
    let geometry_recon_path = out_dir.join(format!("{}.recon_geometry.pgcc", cloud.scene_id));
    let summary_path = out_dir.join(format!("{}.recon_summary.txt", cloud.scene_id));
    save_cloud(&color_recon, &color_recon_path)?;
    save_cloud(&geometry_recon, &geometry_recon_path)?;
    fs::write(&summary_path, format!("mse_geo {dg}\nmse_color {dc}\n"))
        .map_err(|e| Error::io(&summary_path, e))?;

    Ok(ReconstructExport {
        color_recon_path,
        geometry_recon_path,
        summary_path,
        mse_geo: dg,
        mse_color: dc,
    })
}

/// Human-readable metrics document: key-value lines plus a per-class table.
pub fn format_metrics_text(eval: &DatasetEval) -> String {
    let mut out = String::new();
    out.push_str(&format!("scenes {}\n", eval.scenes));
    out.push_str(&format!("labeled_scenes {}\n", eval.labeled_scenes));
    out.push_str(&format!("points {}\n", eval.points));
    out.push_str(&format!("k_pred {}\n", eval.k_pred));
    out.push_str(&format!("k_gt {}\n", eval.k_gt));
    match &eval.metrics {
        None => out.push_str("miou n/a (no labeled scenes)\n"),
        Some(m) => {
            out.push_str(&format!("miou {}\n", m.miou));
            out.push_str("class mapped_pseudo tp fp fn iou\n");
            for (c, st) in m.classes.iter().enumerate() {
                let pseudo = m
                    .mapping
                    .iter()
                    .position(|&g| g == Some(c))
                    .map_or("-".to_string(), |p| p.to_string());
                out.push_str(&format!(
                    "{c} {pseudo} {} {} {} {}\n",
                    st.tp, st.fp, st.fn_, st.iou
                ));
            }
        }
    }
    out
}

/// Machine-readable CSV. Column order is fixed:
/// `kind,gt_class,pseudo_class,tp,fp,fn,iou` with one `class` row per
/// ground-truth class and a final `summary` row carrying the mIoU.
pub fn format_metrics_csv(eval: &DatasetEval) -> String {
    let mut out = String::from("kind,gt_class,pseudo_class,tp,fp,fn,iou\n");
    if let Some(m) = &eval.metrics {
        for (c, st) in m.classes.iter().enumerate() {
            let pseudo = m
                .mapping
                .iter()
                .position(|&g| g == Some(c))
                .map_or(String::new(), |p| p.to_string());
            out.push_str(&format!(
                "class,{c},{pseudo},{},{},{},{}\n",
                st.tp, st.fp, st.fn_, st.iou
            ));
        }
        out.push_str(&format!("summary,,,,,,{}\n", m.miou));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, ModelParams};
    use crate::scene::{generate_scene, SceneSpec};
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn fuse_one_hot_rows_returns_indices() {
        let p = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let labels = fuse_pseudo_labels(&p, &p).unwrap();
        assert_eq!(labels, vec![0, 2]);
    }

    #[test]
    fn fuse_sums_unequal_confidence() {
        let pg = array![[0.6, 0.4]];
        let pc = array![[0.3, 0.7]];
        assert_eq!(fuse_pseudo_labels(&pg, &pc).unwrap(), vec![1]);
    }

    #[test]
    fn fuse_exact_tie_takes_smaller_index() {
        let p = array![[0.5, 0.5]];
        assert_eq!(fuse_pseudo_labels(&p, &p).unwrap(), vec![0]);
    }

    #[test]
    fn fuse_invariant_to_positive_scaling() {
        let pg = array![[0.2, 0.5, 0.3], [0.7, 0.1, 0.2]];
        let pc = array![[0.1, 0.6, 0.3], [0.5, 0.2, 0.3]];
        let base = fuse_pseudo_labels(&pg, &pc).unwrap();
        let scaled = fuse_pseudo_labels(&(&pg * 3.5), &(&pc * 3.5)).unwrap();
        assert_eq!(base, scaled);
    }

    #[test]
    fn miou_perfect_and_disjoint() {
        let gt = vec![0, 0, 1, 1, 2];
        let m = compute_miou(&gt, &gt, 3).unwrap();
        assert_eq!(m.miou, 1.0);

        let pred = vec![1, 1, 2, 2, 0];
        let m = compute_miou(&pred, &gt, 3).unwrap();
        assert_eq!(m.miou, 0.0);
    }

    #[test]
    fn miou_half_misassigned_worked_example() {
        // 2 classes, 100 points each; 50 of class 0 predicted as class 1.
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for i in 0..100 {
            gt.push(0);
            pred.push(if i < 50 { 0 } else { 1 });
        }
        for _ in 0..100 {
            gt.push(1);
            pred.push(1);
        }
        let m = compute_miou(&pred, &gt, 2).unwrap();
        assert!((m.classes[0].iou - 0.5).abs() < 1e-12);
        assert!((m.classes[1].iou - 100.0 / 150.0).abs() < 1e-12);
        assert!((m.miou - (0.5 + 100.0 / 150.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn miou_excludes_absent_classes_and_zeroes_unpredicted() {
        // Class 2 never appears in gt; class 1 appears but is never
        // predicted.
        let gt = vec![0, 0, 1];
        let pred = vec![0, 0, 0];
        let m = compute_miou(&pred, &gt, 3).unwrap();
        assert!(!m.classes[2].present);
        assert_eq!(m.classes[1].iou, 0.0);
        // mean over classes 0 and 1 only.
        assert!((m.miou - (2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn miou_rejects_length_mismatch() {
        assert!(compute_miou(&[0, 1], &[0], 2).is_err());
    }

    #[test]
    fn align_and_score_matches_project_then_score() {
        let mut cm = ConfusionMatrix::new(3, 3);
        let pseudo = vec![0, 0, 1, 1, 2, 2, 0];
        let gt = vec![2, 2, 0, 0, 1, 0, 2];
        cm.accumulate(&pseudo, &gt).unwrap();
        let metrics = align_and_score(&cm);
        let projected = project_labels(&pseudo, &metrics.mapping, 3);
        let direct = compute_miou(&projected, &gt, 3).unwrap();
        assert!((metrics.miou - direct.miou).abs() < 1e-12);
        for (a, b) in metrics.classes.iter().zip(direct.classes.iter()) {
            assert_eq!(a.tp, b.tp);
            assert_eq!(a.fp, b.fp);
            assert_eq!(a.fn_, b.fn_);
        }
    }

    fn params_for_eval() -> ModelParams {
        ModelParams::init(
            ModelDims {
                d_emb: 6,
                hidden: 8,
                d_feat: 7,
                d_proj: 5,
                num_clusters: 4,
            },
            11,
        )
    }

    #[test]
    fn unsup_segment_is_repeatable_and_leaves_params_alone() {
        let params = params_for_eval();
        let before = params.clone();
        let spec = SceneSpec::with_default_classes(4, 4, 16, 0.01, 0.02);
        let cloud = generate_scene(&spec, 5).unwrap();
        let (l1, m1) = unsup_segment(&params, 0.1, &cloud).unwrap();
        let (l2, m2) = unsup_segment(&params, 0.1, &cloud).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
        assert_eq!(params, before);
        assert!(m1.is_some());
    }

    #[test]
    fn unsup_segment_without_labels_omits_metrics() {
        let params = params_for_eval();
        let spec = SceneSpec::with_default_classes(4, 4, 16, 0.01, 0.02);
        let mut cloud = generate_scene(&spec, 6).unwrap();
        cloud.labels = None;
        let (labels, metrics) = unsup_segment(&params, 0.1, &cloud).unwrap();
        assert_eq!(labels.len(), cloud.num_points());
        assert!(metrics.is_none());
    }

    /// A model whose decode path is the identity on clouds whose colors
    /// equal their normalized coordinates.
    fn identity_fixture() -> ModelParams {
        let dims = ModelDims {
            d_emb: 3,
            hidden: 3,
            d_feat: 3,
            d_proj: 2,
            num_clusters: 2,
        };
        let mut p = ModelParams::init(dims, 0);
        let eye = Array2::eye(3);
        p.embed.geo.w.assign(&eye);
        p.embed.geo.b.fill(0.0);
        p.embed.color.w.assign(&eye);
        p.embed.color.b.fill(0.0);
        p.embed.pos.w.fill(0.0);
        p.embed.pos.b.fill(0.0);
        for layer in &mut p.encoder.layers {
            layer.affine.w.assign(&eye);
            layer.affine.b.fill(0.0);
        }
        p.decoders.geo.w.assign(&eye);
        p.decoders.geo.b.fill(0.0);
        p.decoders.color.w.assign(&eye);
        p.decoders.color.b.fill(0.0);
        p
    }

    #[test]
    fn reconstruct_export_perfect_fixture_gives_zero_mse() {
        // Colors equal the normalized coordinates, so the identity model
        // reconstructs both modalities exactly.
        let coords = array![
            [0.0, 0.0, 0.0],
            [1.0, 0.2, 0.4],
            [0.3, 1.0, 1.0],
            [0.8, 0.5, 0.1]
        ];
        // Ranges span [0,1] per axis, so normalization is the identity.
        let cloud =
            LabeledPointCloud::new(coords.clone(), coords.clone(), None, "fixture".into()).unwrap();
        let params = identity_fixture();
        let dir = tempfile::tempdir().unwrap();
        let out = reconstruct_export(&params, &cloud, dir.path()).unwrap();
        assert!(out.mse_geo.abs() < 1e-24);
        assert!(out.mse_color.abs() < 1e-24);

        // Files reload losslessly within format precision.
        let back = crate::scene::load_cloud(&out.color_recon_path).unwrap();
        for (a, b) in back.coords.iter().zip(coords.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let back = crate::scene::load_cloud(&out.geometry_recon_path).unwrap();
        for (a, b) in back.colors.iter().zip(coords.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let summary = fs::read_to_string(&out.summary_path).unwrap();
        assert!(summary.contains("mse_geo"));
        assert!(summary.contains("mse_color"));
    }

    #[test]
    fn metrics_files_have_documented_shape() {
        let params = params_for_eval();
        let spec = SceneSpec::with_default_classes(4, 4, 16, 0.01, 0.02);
        let clouds: Vec<_> = (0..3)
            .map(|i| generate_scene(&spec, 50 + i).unwrap())
            .collect();
        let eval = evaluate_dataset(&params, 0.1, &clouds).unwrap();
        let text = format_metrics_text(&eval);
        assert!(text.contains("scenes 3"));
        assert!(text.contains("miou "));
        let csv = format_metrics_csv(&eval);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "kind,gt_class,pseudo_class,tp,fp,fn,iou");
        assert!(csv.lines().last().unwrap().starts_with("summary,"));
    }

    proptest! {
        #[test]
        fn miou_in_unit_interval_and_relabel_invariant(
            labels in proptest::collection::vec(0usize..5, 10..60),
            preds in proptest::collection::vec(0usize..5, 10..60),
        ) {
            let n = labels.len().min(preds.len());
            let gt = &labels[..n];
            let pred = &preds[..n];
            let m = compute_miou(pred, gt, 5).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.miou));

            // Relabeling both sides by the same permutation leaves mIoU
            // unchanged.
            let perm = [3usize, 0, 4, 2, 1];
            let gt2: Vec<usize> = gt.iter().map(|&g| perm[g]).collect();
            let pred2: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
            let m2 = compute_miou(&pred2, &gt2, 5).unwrap();
            prop_assert!((m.miou - m2.miou).abs() < 1e-12);
        }

        #[test]
        fn hungarian_alignment_never_lowers_default_order_score(
            rows in proptest::collection::vec(proptest::collection::vec(0u64..40, 4), 4),
        ) {
            let cm = ConfusionMatrix { counts: rows };
            let aligned = align_and_score(&cm).miou;
            // Identity mapping is one feasible alignment; the optimal
            // matched count can only help or match it on the diagonal sum.
            let identity: u64 = (0..4).map(|i| cm.counts[i][i]).sum();
            let best: u64 = {
                let mapping = crate::hungarian::hungarian_align(&cm.counts);
                cm.counts
                    .iter()
                    .enumerate()
                    .filter_map(|(p, row)| mapping[p].map(|g| row[g]))
                    .sum()
            };
            prop_assert!(best >= identity);
            prop_assert!((0.0..=1.0).contains(&aligned));
        }
    }
}
