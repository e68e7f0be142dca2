//! The pre-training loop: batching, the combined four-loss objective,
//! adaptive updates with decoupled weight decay, prototype renormalization,
//! checkpointing, and per-step logging.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::losses::{
    object_contrast_loss, point_contrast_loss, point_reconstruct_loss,
    swapped_prediction_from_scores, swapped_prediction_with_targets, LossValues, LossWeights,
    PredictionPair,
};
use crate::model::{backward_pair, decode_pair, forward_pair, ModelDims, ModelGrads, ModelParams};
use crate::numeric::{entropy, mean_rows, rng_for, row_softmax};
use crate::scene::{load_cloud, normalize_scene, LabeledPointCloud};
use crate::sinkhorn::{cluster_scores, sinkhorn_assign};

/// How cluster targets are produced. `SelfSoftmax` is the ablation that
/// drops the equal-partition constraint and supervises each branch with its
/// own detached softmax, the degeneration-prone variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    Sinkhorn,
    SelfSoftmax,
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetMode::Sinkhorn => write!(f, "sinkhorn"),
            TargetMode::SelfSoftmax => write!(f, "self_softmax"),
        }
    }
}

impl FromStr for TargetMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sinkhorn" => Ok(TargetMode::Sinkhorn),
            "self_softmax" => Ok(TargetMode::SelfSoftmax),
            other => Err(format!("unknown target_mode `{other}`")),
        }
    }
}

/// Full training configuration. Every key of the config file is optional
/// and falls back to these defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub d_emb: usize,
    pub hidden: usize,
    pub d_feat: usize,
    pub d_proj: usize,
    /// Pseudo-label classes K.
    pub num_clusters: usize,
    /// Per-scene point subsample for the contrast and cluster losses;
    /// reconstruction always uses all points.
    pub subsample: usize,
    pub tau_contrast: f64,
    pub tau_cluster: f64,
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub threshold_scale: f64,
    pub target_mode: TargetMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            epochs: 50,
            batch_size: 8,
            seed: 42,
            d_emb: 32,
            hidden: 64,
            d_feat: 32,
            d_proj: 16,
            num_clusters: 20,
            subsample: 1024,
            tau_contrast: 0.4,
            tau_cluster: 0.1,
            sinkhorn_eps: 0.05,
            sinkhorn_iters: 3,
            alpha: 100.0,
            beta: 100.0,
            gamma: 1.0,
            threshold_scale: 2.0,
            target_mode: TargetMode::Sinkhorn,
        }
    }
}

impl TrainConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_emb: self.d_emb,
            hidden: self.hidden,
            d_feat: self.d_feat,
            d_proj: self.d_proj,
            num_clusters: self.num_clusters,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("learning_rate", self.learning_rate >= 0.0),
            ("weight_decay", self.weight_decay >= 0.0),
            ("batch_size", self.batch_size > 0),
            ("d_emb", self.d_emb > 0),
            ("hidden", self.hidden > 0),
            ("d_feat", self.d_feat > 0),
            ("d_proj", self.d_proj > 0),
            ("num_clusters", self.num_clusters > 0),
            ("subsample", self.subsample > 0),
            ("tau_contrast", self.tau_contrast > 0.0),
            ("tau_cluster", self.tau_cluster > 0.0),
            ("sinkhorn_eps", self.sinkhorn_eps > 0.0),
            ("alpha", self.alpha >= 0.0),
            ("beta", self.beta >= 0.0),
            ("gamma", self.gamma >= 0.0),
            ("threshold_scale", self.threshold_scale >= 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::InvalidConfig(format!("{name} out of range")));
            }
        }
        Ok(())
    }

    /// The config as `key = value` pairs, in the documented order.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        vec![
            ("learning_rate".into(), format!("{}", self.learning_rate)),
            ("weight_decay".into(), format!("{}", self.weight_decay)),
            ("epochs".into(), format!("{}", self.epochs)),
            ("batch_size".into(), format!("{}", self.batch_size)),
            ("seed".into(), format!("{}", self.seed)),
            ("d_emb".into(), format!("{}", self.d_emb)),
            ("hidden".into(), format!("{}", self.hidden)),
            ("d_feat".into(), format!("{}", self.d_feat)),
            ("d_proj".into(), format!("{}", self.d_proj)),
            ("num_clusters".into(), format!("{}", self.num_clusters)),
            ("subsample".into(), format!("{}", self.subsample)),
            ("tau_contrast".into(), format!("{}", self.tau_contrast)),
            ("tau_cluster".into(), format!("{}", self.tau_cluster)),
            ("sinkhorn_eps".into(), format!("{}", self.sinkhorn_eps)),
            ("sinkhorn_iters".into(), format!("{}", self.sinkhorn_iters)),
            ("alpha".into(), format!("{}", self.alpha)),
            ("beta".into(), format!("{}", self.beta)),
            ("gamma".into(), format!("{}", self.gamma)),
            ("threshold_scale".into(), format!("{}", self.threshold_scale)),
            ("target_mode".into(), format!("{}", self.target_mode)),
        ]
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn parse<T: FromStr>(v: &str, what: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid {what}: `{v}`"))
        }
        match key {
            "learning_rate" => self.learning_rate = parse(value, "real")?,
            "weight_decay" => self.weight_decay = parse(value, "real")?,
            "epochs" => self.epochs = parse(value, "integer")?,
            "batch_size" => self.batch_size = parse(value, "integer")?,
            "seed" => self.seed = parse(value, "integer")?,
            "d_emb" => self.d_emb = parse(value, "integer")?,
            "hidden" => self.hidden = parse(value, "integer")?,
            "d_feat" => self.d_feat = parse(value, "integer")?,
            "d_proj" => self.d_proj = parse(value, "integer")?,
            "num_clusters" => self.num_clusters = parse(value, "integer")?,
            "subsample" => self.subsample = parse(value, "integer")?,
            "tau_contrast" => self.tau_contrast = parse(value, "real")?,
            "tau_cluster" => self.tau_cluster = parse(value, "real")?,
            "sinkhorn_eps" => self.sinkhorn_eps = parse(value, "real")?,
            "sinkhorn_iters" => self.sinkhorn_iters = parse(value, "integer")?,
            "alpha" => self.alpha = parse(value, "real")?,
            "beta" => self.beta = parse(value, "real")?,
            "gamma" => self.gamma = parse(value, "real")?,
            "threshold_scale" => self.threshold_scale = parse(value, "real")?,
            "target_mode" => self.target_mode = value.parse()?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Reads a flat `key = value` config file; `#` lines are comments.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::default();
        for (ix, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, ix + 1, "expected `key = value`"))?;
            config
                .set(key.trim(), value.trim())
                .map_err(|msg| Error::parse(path, ix + 1, msg))?;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Adaptive-moment optimizer state with decoupled weight decay.
/// β1, β2, ε are frozen for reproducibility.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m1: Vec<Vec<f64>>,
    pub m2: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.tensor_entries().iter().map(|(_, _, d)| d.len()).collect();
        Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m1: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            m2: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One decoupled-weight-decay adaptive update over every parameter tensor.
/// Prototype renormalization is the caller's job; it sits outside the
/// gradient path.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelGrads,
    opt: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) {
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let gs = grads.slices();
    let mut ps = params.param_slices_mut();
    assert_eq!(gs.len(), ps.len());
    for (ti, p) in ps.iter_mut().enumerate() {
        let g = gs[ti];
        let m1 = &mut opt.m1[ti];
        let m2 = &mut opt.m2[ti];
        for i in 0..p.len() {
            m1[i] = opt.beta1 * m1[i] + (1.0 - opt.beta1) * g[i];
            m2[i] = opt.beta2 * m2[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let mhat = m1[i] / bc1;
            let vhat = m2[i] / bc2;
            p[i] -= lr * (mhat / (vhat.sqrt() + opt.eps) + weight_decay * p[i]);
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_pc: f64,
    pub loss_pr: f64,
    pub loss_clu: f64,
    pub loss_oc: f64,
    pub loss_total: f64,
    pub cluster_entropy: f64,
}

/// Append-only per-step records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

pub const LOG_CSV_HEADER: &str =
    "step,lr,loss_pc,loss_pr,loss_clu,loss_oc,loss_total,cluster_entropy";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.step,
                r.lr,
                r.loss_pc,
                r.loss_pr,
                r.loss_clu,
                r.loss_oc,
                r.loss_total,
                r.cluster_entropy
            ));
        }
        out
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty log"))?;
        if header.trim() != LOG_CSV_HEADER {
            return Err(Error::parse(path, 1, format!("unexpected header `{header}`")));
        }
        let mut records = Vec::new();
        for (ix, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 8 {
                return Err(Error::parse(
                    path,
                    ix + 1,
                    format!("expected 8 columns, found {}", cols.len()),
                ));
            }
            let f = |i: usize| -> Result<f64> {
                cols[i]
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(path, ix + 1, format!("invalid number `{}`", cols[i])))
            };
            records.push(StepRecord {
                step: cols[0]
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(path, ix + 1, format!("invalid step `{}`", cols[0])))?,
                lr: f(1)?,
                loss_pc: f(2)?,
                loss_pr: f(3)?,
                loss_clu: f(4)?,
                loss_oc: f(5)?,
                loss_total: f(6)?,
                cluster_entropy: f(7)?,
            });
        }
        Ok(Self { records })
    }

    /// Key-value summary of the loss curves: min and final value per term,
    /// plus the entropy trajectory.
    pub fn summary(&self) -> Result<String> {
        if self.records.is_empty() {
            return Err(Error::InvalidArgument("log has no data rows".into()));
        }
        let mut out = String::new();
        out.push_str(&format!("steps {}\n", self.records.len()));
        let mut term = |name: &str, get: fn(&StepRecord) -> f64| {
            let min = self.records.iter().map(get).fold(f64::INFINITY, f64::min);
            let last = get(self.records.last().unwrap());
            out.push_str(&format!("{name}_min {min}\n{name}_final {last}\n"));
        };
        term("loss_pc", |r| r.loss_pc);
        term("loss_pr", |r| r.loss_pr);
        term("loss_clu", |r| r.loss_clu);
        term("loss_oc", |r| r.loss_oc);
        term("loss_total", |r| r.loss_total);
        let first = self.records.first().unwrap().cluster_entropy;
        let min = self
            .records
            .iter()
            .map(|r| r.cluster_entropy)
            .fold(f64::INFINITY, f64::min);
        let last = self.records.last().unwrap().cluster_entropy;
        out.push_str(&format!(
            "cluster_entropy_first {first}\ncluster_entropy_min {min}\ncluster_entropy_final {last}\n"
        ));
        Ok(out)
    }
}

/// Deterministic distinct-index subsample: the first `m` entries of a
/// seeded shuffle, returned sorted.
fn subsample_indices(n: usize, m: usize, seed: u64, step: usize, scene: usize) -> Vec<usize> {
    if n <= m {
        return (0..n).collect();
    }
    let mut rng = rng_for(seed, "subsample", &[step as u64, scene as u64]);
    let mut ix: Vec<usize> = (0..n).collect();
    ix.partial_shuffle(&mut rng, m);
    let mut out = ix[..m].to_vec();
    out.sort_unstable();
    out
}

fn gather_rows(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (dst, &src) in rows.iter().enumerate() {
        out.row_mut(dst).assign(&x.row(src));
    }
    out
}

fn ensure_finite(term: &'static str, value: f64, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { term, step })
    }
}

struct SceneState {
    pair: crate::encoder::FeaturePair,
    cache: crate::model::ForwardCache,
    sub: Vec<usize>,
    dz_geo: Array2<f64>,
    dz_color: Array2<f64>,
    dp_geo: Array2<f64>,
    dp_color: Array2<f64>,
}

/// One optimizer step over a batch of scenes.
///
/// Point contrast runs per scene on a seeded subsample; reconstruction runs
/// per scene on all points; the cluster and object losses run once over the
/// concatenated subsampled batch. After the update the prototype columns
/// are renormalized.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    batch: &[&LabeledPointCloud],
    config: &TrainConfig,
    lr: f64,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let step = opt.step;
    let num_scenes = batch.len() as f64;
    let weights = config.weights();

    let mut scenes = Vec::with_capacity(batch.len());
    let mut loss_pc = 0.0;
    let mut loss_pr = 0.0;
    for (si, cloud) in batch.iter().enumerate() {
        let (geo01, color01) = normalize_scene(cloud);
        let (pair, cache) = forward_pair(&geo01, &color01, params)?;
        let sub = subsample_indices(cloud.num_points(), config.subsample, config.seed, step, si);

        // Point-level contrast on the subsample; negatives stay in-scene.
        let zg = gather_rows(&pair.z_geo, &sub);
        let zc = gather_rows(&pair.z_color, &sub);
        let (pc, dzg_sub, dzc_sub) = point_contrast_loss(&zg, &zc, config.tau_contrast)?;
        loss_pc += pc / num_scenes;

        let mut dz_geo = Array2::zeros(pair.z_geo.raw_dim());
        let mut dz_color = Array2::zeros(pair.z_color.raw_dim());
        for (r, &src) in sub.iter().enumerate() {
            for j in 0..dz_geo.ncols() {
                dz_geo[[src, j]] += dzg_sub[[r, j]] / num_scenes;
                dz_color[[src, j]] += dzc_sub[[r, j]] / num_scenes;
            }
        }

        // Swapped reconstruction on every point.
        let (p_hat_geo, p_hat_color) = decode_pair(&pair, params)?;
        let (pr, dpg, dpc) = point_reconstruct_loss(&p_hat_geo, &p_hat_color, &geo01, &color01)?;
        loss_pr += pr / num_scenes;
        let scale = weights.alpha / num_scenes;

        scenes.push(SceneState {
            pair,
            cache,
            sub,
            dz_geo,
            dz_color,
            dp_geo: dpg * scale,
            dp_color: dpc * scale,
        });
    }
    ensure_finite("point_contrast", loss_pc, step)?;
    ensure_finite("reconstruct", loss_pr, step)?;

    // Concatenated subsampled batch for the cluster-level losses.
    let d_proj = params.dims.d_proj;
    let total_rows: usize = scenes.iter().map(|s| s.sub.len()).sum();
    let mut zg_all = Array2::zeros((total_rows, d_proj));
    let mut zc_all = Array2::zeros((total_rows, d_proj));
    let mut origin = Vec::with_capacity(total_rows);
    {
        let mut row = 0;
        for (si, sc) in scenes.iter().enumerate() {
            for &src in &sc.sub {
                zg_all.row_mut(row).assign(&sc.pair.z_geo.row(src));
                zc_all.row_mut(row).assign(&sc.pair.z_color.row(src));
                origin.push((si, src));
                row += 1;
            }
        }
    }

    let s_geo = cluster_scores(&zg_all, &params.prototypes)?;
    let s_color = cluster_scores(&zc_all, &params.prototypes)?;
    let (q_geo, q_color) = match config.target_mode {
        TargetMode::Sinkhorn => (
            sinkhorn_assign(&s_geo, config.sinkhorn_eps, config.sinkhorn_iters)?,
            sinkhorn_assign(&s_color, config.sinkhorn_eps, config.sinkhorn_iters)?,
        ),
        TargetMode::SelfSoftmax => (
            row_softmax(&s_geo, config.tau_cluster),
            row_softmax(&s_color, config.tau_cluster),
        ),
    };
    let (loss_clu, ds_geo, ds_color, preds) =
        swapped_prediction_from_scores(&s_geo, &s_color, &q_geo, &q_color, config.tau_cluster)?;
    ensure_finite("cluster", loss_clu, step)?;

    let (loss_oc, doc_zg, doc_zc) = object_contrast_loss(
        &zg_all,
        &zc_all,
        &preds,
        config.threshold_scale,
        config.tau_contrast,
    )?;
    ensure_finite("object_contrast", loss_oc, step)?;

    let parts = LossValues {
        point_contrast: loss_pc,
        reconstruct: loss_pr,
        cluster: loss_clu,
        object_contrast: loss_oc,
    };
    let total = crate::losses::total_loss(&parts, &weights);
    ensure_finite("total", total, step)?;

    // Batch-level gradients scattered back to their scenes.
    let dz_batch_geo = ds_geo.dot(&params.prototypes.c.t()) * weights.beta;
    let dz_batch_color = ds_color.dot(&params.prototypes.c.t()) * weights.beta;
    let d_prototypes = (zg_all.t().dot(&ds_geo) + zc_all.t().dot(&ds_color)) * weights.beta;
    for (row, &(si, src)) in origin.iter().enumerate() {
        for j in 0..d_proj {
            scenes[si].dz_geo[[src, j]] += dz_batch_geo[[row, j]] + weights.gamma * doc_zg[[row, j]];
            scenes[si].dz_color[[src, j]] +=
                dz_batch_color[[row, j]] + weights.gamma * doc_zc[[row, j]];
        }
    }

    let mut grads = ModelGrads::zeros_like(params);
    grads.prototypes = grads.prototypes + d_prototypes;
    for sc in &scenes {
        backward_pair(
            params, &sc.cache, &sc.pair, &sc.dz_geo, &sc.dz_color, &sc.dp_geo, &sc.dp_color,
            &mut grads,
        );
    }

    // Cluster-usage entropy over both branches' predictions.
    let stacked = ndarray::concatenate(Axis(0), &[preds.p_geo.view(), preds.p_color.view()])
        .expect("matching widths");
    let usage = mean_rows(&stacked);
    let cluster_entropy = entropy(usage.view());

    adamw_step(params, &grads, opt, lr, config.weight_decay);
    params.prototypes.renormalize_columns();

    Ok(StepRecord {
        step,
        lr,
        loss_pc,
        loss_pr,
        loss_clu,
        loss_oc,
        loss_total: total,
        cluster_entropy,
    })
}

/// Cosine decay to zero: lr(t) = lr₀ · ½(1 + cos(π t / T)).
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

/// Loads every `.pgcc` cloud in a directory, sorted by file name.
pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledPointCloud>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |ext| ext == "pgcc"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    paths.iter().map(|p| load_cloud(p)).collect()
}

/// Runs the full pre-training schedule over a dataset directory and writes
/// the checkpoint plus the CSV log. Returns the checkpoint path.
pub fn pretrain(
    config: &TrainConfig,
    data_dir: &Path,
    ckpt_path: &Path,
    log_path: &Path,
) -> Result<PathBuf> {
    config.validate()?;
    let scenes = load_dataset(data_dir)?;
    let mut params = ModelParams::init(config.dims(), config.seed);
    let mut opt = OptimizerState::new(&params);
    let mut log = TrainLog::default();

    let steps_per_epoch = scenes.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut t = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng_for(config.seed, "shuffle", &[epoch as u64]));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&LabeledPointCloud> = chunk.iter().map(|&i| &scenes[i]).collect();
            let lr = cosine_lr(config.learning_rate, t, total_steps);
            let record = train_step(&mut params, &mut opt, &batch, config, lr)?;
            log.records.push(record);
            t += 1;
        }
    }

    fs::write(log_path, log.to_csv()).map_err(|e| Error::io(log_path, e))?;
    let ckpt = Checkpoint {
        config: config.clone(),
        params,
        opt: Some(opt),
        log,
    };
    save_checkpoint(&ckpt, ckpt_path)?;
    Ok(ckpt_path.to_path_buf())
}

/// Configuration of the finite-difference gradient suite.
#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub dims: ModelDims,
    pub num_points: usize,
    pub seed: u64,
    /// Test hook: perturb the analytic gradient of the named term so the
    /// report must flag it.
    pub corrupt: Option<&'static str>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            dims: ModelDims {
                d_emb: 6,
                hidden: 8,
                d_feat: 7,
                d_proj: 5,
                num_clusters: 4,
            },
            num_points: 6,
            seed: 7,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckEntry {
    pub term: &'static str,
    pub max_rel_err: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tolerance)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let status = if e.max_rel_err < self.tolerance { "PASS" } else { "FAIL" };
            out.push_str(&format!("{status} {} max_rel_err {:.3e}", e.term, e.max_rel_err));
            if e.degenerate {
                out.push_str(" (degenerate: loss identically zero)");
            }
            out.push('\n');
        }
        out
    }
}

/// Relative error with a noise floor: where both views sit below 1e-6 the
/// comparison is effectively absolute, elsewhere it is relative.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    ((analytic - numeric) / denom).abs()
}

/// Central finite differences over every parameter against the analytic
/// gradients of all four losses and an end-to-end encoder probe.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    use rand::Rng;

    let params = ModelParams::init(cfg.dims, cfg.seed);
    let n = cfg.num_points;
    let k = cfg.dims.num_clusters;
    let tau_contrast = 0.4;
    let tau_cluster = 0.1;
    let threshold_scale = 0.5;
    let threshold = threshold_scale / k as f64;

    // The losses are only piecewise smooth: rectifier kinks, the zero-norm
    // normalization rule, and the confidence threshold all break central
    // differences if an instance sits on them. Draw random instances until
    // one keeps a safe margin from every such boundary (the 1e-5 step
    // moves activations by well under 1e-4 here). Frozen cluster targets
    // and predictions come from the accepted base point, matching the
    // training-time treatment.
    let mut attempt = 0u64;
    let (geo, color, q_geo, q_color, base_preds) = loop {
        let mut rng = rng_for(cfg.seed, "gradcheck-data", &[attempt]);
        let mut geo = Array2::zeros((n, 3));
        let mut color = Array2::zeros((n, 3));
        for v in geo.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        for v in color.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let (pair, cache) = forward_pair(&geo, &color, &params)?;
        let s_geo = cluster_scores(&pair.z_geo, &params.prototypes)?;
        let s_color = cluster_scores(&pair.z_color, &params.prototypes)?;
        let q_geo = sinkhorn_assign(&s_geo, 0.05, 3)?;
        let q_color = sinkhorn_assign(&s_color, 0.05, 3)?;
        let preds = PredictionPair {
            p_geo: row_softmax(&s_geo, tau_cluster),
            p_color: row_softmax(&s_color, tau_cluster),
            q_geo,
            q_color,
        };
        let confidence_margins_ok = |p: &Array2<f64>| {
            p.rows().into_iter().all(|row| {
                let mut top1 = f64::NEG_INFINITY;
                let mut top2 = f64::NEG_INFINITY;
                for &v in row.iter() {
                    if v > top1 {
                        top2 = top1;
                        top1 = v;
                    } else if v > top2 {
                        top2 = v;
                    }
                }
                (top1 - threshold).abs() > 1e-3 && top1 - top2 > 1e-3
            })
        };
        let (oc, _, _) = object_contrast_loss(
            &pair.z_geo,
            &pair.z_color,
            &preds,
            threshold_scale,
            tau_contrast,
        )?;
        if cache.min_abs_rectifier_input(&params) > 1e-3
            && cache.min_projection_norm() > 0.05
            && confidence_margins_ok(&preds.p_geo)
            && confidence_margins_ok(&preds.p_color)
            && (k == 1 || oc > 0.0)
        {
            break (geo, color, preds.q_geo.clone(), preds.q_color.clone(), preds);
        }
        attempt += 1;
        if attempt > 64 {
            return Err(Error::InvalidArgument(
                "gradcheck found no instance clear of nonsmooth boundaries".into(),
            ));
        }
    };

    let mut probe_rng = rng_for(cfg.seed, "gradcheck-probe", &[]);
    let mut probe = |r: usize, c: usize| -> Array2<f64> {
        let mut m = Array2::zeros((r, c));
        for v in m.iter_mut() {
            *v = probe_rng.gen_range(-1.0..1.0);
        }
        m
    };
    let vz_geo = probe(n, cfg.dims.d_proj);
    let vz_color = probe(n, cfg.dims.d_proj);
    let vp_geo = probe(n, 3);
    let vp_color = probe(n, 3);

    let zeros_z = Array2::zeros((n, cfg.dims.d_proj));
    let zeros_p = Array2::zeros((n, 3));

    type ValueFn<'a> = Box<dyn Fn(&ModelParams) -> f64 + 'a>;
    let terms: Vec<(&'static str, ValueFn)> = vec![
        (
            "point_contrast",
            Box::new(|p: &ModelParams| {
                let (pair, _) = forward_pair(&geo, &color, p).unwrap();
                point_contrast_loss(&pair.z_geo, &pair.z_color, tau_contrast)
                    .unwrap()
                    .0
            }),
        ),
        (
            "reconstruct",
            Box::new(|p: &ModelParams| {
                let (pair, _) = forward_pair(&geo, &color, p).unwrap();
                let (pg, pc) = decode_pair(&pair, p).unwrap();
                point_reconstruct_loss(&pg, &pc, &geo, &color).unwrap().0
            }),
        ),
        (
            "cluster",
            Box::new(|p: &ModelParams| {
                let (pair, _) = forward_pair(&geo, &color, p).unwrap();
                swapped_prediction_with_targets(
                    &pair.z_geo,
                    &pair.z_color,
                    &p.prototypes,
                    tau_cluster,
                    &q_geo,
                    &q_color,
                )
                .unwrap()
                .value
            }),
        ),
        (
            "object_contrast",
            Box::new(|p: &ModelParams| {
                let (pair, _) = forward_pair(&geo, &color, p).unwrap();
                object_contrast_loss(
                    &pair.z_geo,
                    &pair.z_color,
                    &base_preds,
                    threshold_scale,
                    tau_contrast,
                )
                .unwrap()
                .0
            }),
        ),
        (
            "encoder_probe",
            Box::new(|p: &ModelParams| {
                let (pair, _) = forward_pair(&geo, &color, p).unwrap();
                let (pg, pc) = decode_pair(&pair, p).unwrap();
                (&pair.z_geo * &vz_geo).sum()
                    + (&pair.z_color * &vz_color).sum()
                    + (&pg * &vp_geo).sum()
                    + (&pc * &vp_color).sum()
            }),
        ),
    ];

    let mut entries = Vec::new();
    for (term, value_fn) in &terms {
        let (pair, cache) = forward_pair(&geo, &color, &params)?;
        let mut grads = ModelGrads::zeros_like(&params);
        match *term {
            "point_contrast" => {
                let (_, dzg, dzc) = point_contrast_loss(&pair.z_geo, &pair.z_color, tau_contrast)?;
                backward_pair(&params, &cache, &pair, &dzg, &dzc, &zeros_p, &zeros_p, &mut grads);
            }
            "reconstruct" => {
                let (pg, pc) = decode_pair(&pair, &params)?;
                let (_, dpg, dpc) = point_reconstruct_loss(&pg, &pc, &geo, &color)?;
                backward_pair(&params, &cache, &pair, &zeros_z, &zeros_z, &dpg, &dpc, &mut grads);
            }
            "cluster" => {
                let out = swapped_prediction_with_targets(
                    &pair.z_geo,
                    &pair.z_color,
                    &params.prototypes,
                    tau_cluster,
                    &q_geo,
                    &q_color,
                )?;
                backward_pair(
                    &params, &cache, &pair, &out.dz_geo, &out.dz_color, &zeros_p, &zeros_p,
                    &mut grads,
                );
                grads.prototypes = grads.prototypes + out.d_prototypes;
            }
            "object_contrast" => {
                let (_, dzg, dzc) = object_contrast_loss(
                    &pair.z_geo,
                    &pair.z_color,
                    &base_preds,
                    threshold_scale,
                    tau_contrast,
                )?;
                backward_pair(&params, &cache, &pair, &dzg, &dzc, &zeros_p, &zeros_p, &mut grads);
            }
            "encoder_probe" => {
                backward_pair(
                    &params, &cache, &pair, &vz_geo, &vz_color, &vp_geo, &vp_color, &mut grads,
                );
            }
            other => unreachable!("unknown term {other}"),
        }
        if cfg.corrupt == Some(*term) {
            grads.embed.geo.w[[0, 0]] += 1e-2;
        }

        let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
        let h = 1e-5;
        let mut max_err = 0.0f64;
        let mut max_value_abs = 0.0f64;
        for (ti, gs) in analytic.iter().enumerate() {
            for i in 0..gs.len() {
                let mut pp = params.clone();
                pp.param_slices_mut()[ti][i] += h;
                let mut pm = params.clone();
                pm.param_slices_mut()[ti][i] -= h;
                let vp = value_fn(&pp);
                let vm = value_fn(&pm);
                max_value_abs = max_value_abs.max(vp.abs()).max(vm.abs());
                let num = (vp - vm) / (2.0 * h);
                max_err = max_err.max(rel_err(gs[i], num));
            }
        }
        entries.push(GradcheckEntry {
            term,
            max_rel_err: max_err,
            degenerate: max_value_abs == 0.0,
        });
    }

    Ok(GradcheckReport {
        entries,
        tolerance: 1e-4,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            d_emb: 6,
            hidden: 8,
            d_feat: 7,
            d_proj: 5,
            num_clusters: 4,
            // Covers every point of the tiny scenes, so consecutive steps
            // see the same objective.
            subsample: 128,
            ..TrainConfig::default()
        }
    }

    fn tiny_scenes(count: usize) -> Vec<LabeledPointCloud> {
        let spec = SceneSpec::with_default_classes(4, 4, 16, 0.01, 0.02);
        (0..count)
            .map(|i| generate_scene(&spec, 100 + i as u64).unwrap())
            .collect()
    }

    #[test]
    fn zero_learning_rate_keeps_params_up_to_prototype_renorm() {
        let config = tiny_config();
        let scenes = tiny_scenes(2);
        let mut params = ModelParams::init(config.dims(), 1);
        let before = params.clone();
        let mut opt = OptimizerState::new(&params);
        let batch: Vec<&LabeledPointCloud> = scenes.iter().collect();
        train_step(&mut params, &mut opt, &batch, &config, 0.0).unwrap();
        assert_eq!(params.embed, before.embed);
        assert_eq!(params.encoder, before.encoder);
        assert_eq!(params.proj, before.proj);
        assert_eq!(params.decoders, before.decoders);
        // Prototype columns were unit-norm already, so renormalization is a
        // near no-op.
        for (a, b) in params.prototypes.c.iter().zip(before.prototypes.c.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let config = tiny_config();
        let scenes = tiny_scenes(3);
        let run = || {
            let mut params = ModelParams::init(config.dims(), config.seed);
            let mut opt = OptimizerState::new(&params);
            let mut records = Vec::new();
            for step in 0..4 {
                let batch: Vec<&LabeledPointCloud> = scenes.iter().collect();
                let lr = cosine_lr(config.learning_rate, step, 4);
                records.push(train_step(&mut params, &mut opt, &batch, &config, lr).unwrap());
            }
            (params, records)
        };
        let (p1, r1) = run();
        let (p2, r2) = run();
        assert_eq!(p1, p2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn loss_decreases_after_one_small_step() {
        let config = tiny_config();
        let scenes = tiny_scenes(2);
        let batch: Vec<&LabeledPointCloud> = scenes.iter().collect();
        let mut params = ModelParams::init(config.dims(), 2);
        let mut opt = OptimizerState::new(&params);
        let first = train_step(&mut params, &mut opt, &batch, &config, 1e-4).unwrap();
        let second = train_step(&mut params, &mut opt, &batch, &config, 1e-4).unwrap();
        assert!(
            second.loss_total < first.loss_total,
            "{} then {}",
            first.loss_total,
            second.loss_total
        );
    }

    #[test]
    fn prototype_columns_unit_norm_after_each_step() {
        let config = tiny_config();
        let scenes = tiny_scenes(2);
        let batch: Vec<&LabeledPointCloud> = scenes.iter().collect();
        let mut params = ModelParams::init(config.dims(), 3);
        let mut opt = OptimizerState::new(&params);
        for _ in 0..3 {
            train_step(&mut params, &mut opt, &batch, &config, 1e-3).unwrap();
            for col in params.prototypes.c.columns() {
                assert!((col.dot(&col).sqrt() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cosine_schedule_midpoint_and_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-18);
        assert!(cosine_lr(1e-3, 99, 100) < 5e-5);
    }

    #[test]
    fn config_round_trips_through_key_values() {
        let config = TrainConfig {
            epochs: 7,
            target_mode: TargetMode::SelfSoftmax,
            ..TrainConfig::default()
        };
        let mut back = TrainConfig::default();
        for (k, v) in config.to_key_values() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(config, back);
    }

    #[test]
    fn config_rejects_unknown_key() {
        let mut config = TrainConfig::default();
        assert!(config.set("not_a_key", "1").is_err());
    }

    #[test]
    fn log_round_trips_and_summarizes() {
        let log = TrainLog {
            records: vec![
                StepRecord {
                    step: 0,
                    lr: 1e-3,
                    loss_pc: 5.0,
                    loss_pr: 0.5,
                    loss_clu: 0.2,
                    loss_oc: 1.0,
                    loss_total: 75.2,
                    cluster_entropy: 1.3,
                },
                StepRecord {
                    step: 1,
                    lr: 9e-4,
                    loss_pc: 4.0,
                    loss_pr: 0.4,
                    loss_clu: 0.1,
                    loss_oc: 0.9,
                    loss_total: 55.0,
                    cluster_entropy: 1.4,
                },
            ],
        };
        let csv = log.to_csv();
        let back = TrainLog::from_csv(&csv, Path::new("mem")).unwrap();
        assert_eq!(log, back);
        let summary = back.summary().unwrap();
        assert!(summary.contains("loss_total_min 55"));
        assert!(summary.contains("cluster_entropy_final 1.4"));
    }

    #[test]
    fn log_rejects_header_only() {
        let log = TrainLog::from_csv(LOG_CSV_HEADER, Path::new("mem")).unwrap();
        assert!(log.summary().is_err());
    }

    #[test]
    fn log_reports_malformed_row_with_line_number() {
        let text = format!("{LOG_CSV_HEADER}\n1,2,3\n");
        let err = TrainLog::from_csv(&text, Path::new("mem"))
            .unwrap_err()
            .to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn gradcheck_default_passes() {
        let report = gradcheck(&GradcheckConfig::default()).unwrap();
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.entries.len(), 5);
    }

    #[test]
    fn gradcheck_flags_corrupted_term_by_name() {
        let cfg = GradcheckConfig {
            corrupt: Some("reconstruct"),
            ..GradcheckConfig::default()
        };
        let report = gradcheck(&cfg).unwrap();
        assert!(!report.passed());
        let bad: Vec<_> = report
            .entries
            .iter()
            .filter(|e| e.max_rel_err >= report.tolerance)
            .collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].term, "reconstruct");
    }

    #[test]
    fn gradcheck_single_cluster_reports_degenerate_cluster_loss() {
        let cfg = GradcheckConfig {
            dims: ModelDims {
                num_clusters: 1,
                ..GradcheckConfig::default().dims
            },
            ..GradcheckConfig::default()
        };
        let report = gradcheck(&cfg).unwrap();
        assert!(report.passed(), "{}", report.render());
        let clu = report.entries.iter().find(|e| e.term == "cluster").unwrap();
        assert!(clu.degenerate);
    }
}
