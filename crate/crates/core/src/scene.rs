//! Synthetic labeled scenes and point-cloud file I/O.
//!
//! Scenes are unions of primitive shapes (box surface, sphere surface,
//! horizontal plane patch), one shape+color per class, so the resulting
//! clusters are separable in both geometry and color. They stand in for
//! real indoor datasets at desk scale.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::rng_for;

/// A colored point cloud with optional per-point class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPointCloud {
    /// N×3 coordinates in scene units (arbitrary scale).
    pub coords: Array2<f64>,
    /// N×3 RGB in [0,1].
    pub colors: Array2<f64>,
    /// Per-point class ids in [0, K_gt), when known.
    pub labels: Option<Vec<usize>>,
    /// Opaque identifier, usually the source file stem.
    pub scene_id: String,
}

impl LabeledPointCloud {
    pub fn new(
        coords: Array2<f64>,
        colors: Array2<f64>,
        labels: Option<Vec<usize>>,
        scene_id: String,
    ) -> Result<Self> {
        let n = coords.nrows();
        if n == 0 {
            return Err(Error::InvalidArgument("point cloud has no points".into()));
        }
        if coords.ncols() != 3 || colors.ncols() != 3 {
            return Err(Error::shape("point cloud", "N×3", format!("{:?}/{:?}", coords.dim(), colors.dim())));
        }
        if colors.nrows() != n {
            return Err(Error::shape("point cloud", format!("{n} color rows"), format!("{}", colors.nrows())));
        }
        if colors.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::InvalidArgument("color channel outside [0,1]".into()));
        }
        if let Some(ls) = &labels {
            if ls.len() != n {
                return Err(Error::shape("labels", format!("{n}"), format!("{}", ls.len())));
            }
        }
        Ok(Self {
            coords,
            colors,
            labels,
            scene_id,
        })
    }

    pub fn num_points(&self) -> usize {
        self.coords.nrows()
    }
}

/// One class's geometric template. Ranges are (lo, hi) in scene units.
#[derive(Debug, Clone, PartialEq)]
pub enum ShapeTemplate {
    /// Axis-aligned box surface; each edge length drawn from the range.
    BoxSurface { size_range: (f64, f64) },
    /// Sphere surface with radius drawn from the range.
    SphereSurface { radius_range: (f64, f64) },
    /// Horizontal rectangular patch; each extent drawn from the range.
    PlanePatch { extent_range: (f64, f64) },
}

/// Recipe for one synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub num_objects: usize,
    pub num_classes: usize,
    pub points_per_object: usize,
    pub geometry_noise_sd: f64,
    pub color_noise_sd: f64,
    /// One reference RGB per class, entries in [0,1].
    pub class_palette: Vec<[f64; 3]>,
    /// One shape template per class.
    pub class_shapes: Vec<ShapeTemplate>,
}

/// Objects are placed inside this region (x, y ∈ [0,4], z ∈ [0,2]).
const SCENE_EXTENT: [f64; 3] = [4.0, 4.0, 2.0];
const PLACEMENT_MARGIN: f64 = 0.6;

impl SceneSpec {
    /// Spec with a derived palette (evenly spaced hues) and shapes cycling
    /// through the three primitives.
    pub fn with_default_classes(
        num_objects: usize,
        num_classes: usize,
        points_per_object: usize,
        geometry_noise_sd: f64,
        color_noise_sd: f64,
    ) -> Self {
        let class_palette = (0..num_classes)
            .map(|k| hsv_to_rgb(k as f64 / num_classes.max(1) as f64, 0.75, 0.9))
            .collect();
        let class_shapes = (0..num_classes)
            .map(|k| match k % 3 {
                0 => ShapeTemplate::BoxSurface {
                    size_range: (0.3, 0.8),
                },
                1 => ShapeTemplate::SphereSurface {
                    radius_range: (0.2, 0.5),
                },
                _ => ShapeTemplate::PlanePatch {
                    extent_range: (0.5, 1.2),
                },
            })
            .collect();
        Self {
            num_objects,
            num_classes,
            points_per_object,
            geometry_noise_sd,
            color_noise_sd,
            class_palette,
            class_shapes,
        }
    }

    /// The default desk-scale evaluation scene: 8 objects, 8 classes.
    pub fn desk_default() -> Self {
        Self::with_default_classes(8, 8, 64, 0.01, 0.02)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_objects == 0 {
            return Err(Error::InvalidSpec("num_objects must be positive".into()));
        }
        if self.points_per_object == 0 {
            return Err(Error::InvalidSpec("points_per_object must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidSpec("num_classes must be positive".into()));
        }
        if !self.geometry_noise_sd.is_finite() || self.geometry_noise_sd < 0.0 {
            return Err(Error::InvalidSpec("geometry_noise_sd must be finite and nonnegative".into()));
        }
        if !self.color_noise_sd.is_finite() || self.color_noise_sd < 0.0 {
            return Err(Error::InvalidSpec("color_noise_sd must be finite and nonnegative".into()));
        }
        if self.class_palette.len() != self.num_classes {
            return Err(Error::InvalidSpec(format!(
                "palette has {} entries for {} classes",
                self.class_palette.len(),
                self.num_classes
            )));
        }
        if self
            .class_palette
            .iter()
            .flatten()
            .any(|&c| !(0.0..=1.0).contains(&c))
        {
            return Err(Error::InvalidSpec("palette entries must lie in [0,1]".into()));
        }
        if self.class_shapes.len() != self.num_classes {
            return Err(Error::InvalidSpec(format!(
                "shapes has {} entries for {} classes",
                self.class_shapes.len(),
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Reads a spec from a `key = value` text file. Unset keys default to
    /// [`SceneSpec::desk_default`]; palette and shapes are derived from
    /// `num_classes`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut num_objects = 8usize;
        let mut num_classes = 8usize;
        let mut points_per_object = 64usize;
        let mut geometry_noise_sd = 0.01f64;
        let mut color_noise_sd = 0.02f64;
        for (ix, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, ix + 1, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::parse(path, ix + 1, format!("invalid {what}: `{value}`"));
            match key {
                "num_objects" => num_objects = value.parse().map_err(|_| bad("integer"))?,
                "num_classes" => num_classes = value.parse().map_err(|_| bad("integer"))?,
                "points_per_object" => points_per_object = value.parse().map_err(|_| bad("integer"))?,
                "geometry_noise_sd" => geometry_noise_sd = value.parse().map_err(|_| bad("real"))?,
                "color_noise_sd" => color_noise_sd = value.parse().map_err(|_| bad("real"))?,
                other => {
                    return Err(Error::parse(path, ix + 1, format!("unknown key `{other}`")));
                }
            }
        }
        let spec = Self::with_default_classes(
            num_objects,
            num_classes,
            points_per_object,
            geometry_noise_sd,
            color_noise_sd,
        );
        spec.validate()?;
        Ok(spec)
    }
}

/// Augmentation knobs. All zero means the identity transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Max |angle| of the rotation about the vertical axis, radians.
    pub max_rotation_z: f64,
    /// Gaussian sd of the coordinate jitter.
    pub jitter_sd: f64,
    /// Gaussian sd of the color jitter (clamped back to [0,1]).
    pub color_jitter_sd: f64,
    /// Probability of mirroring the x axis.
    pub flip_prob: f64,
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.max_rotation_z, self.jitter_sd, self.color_jitter_sd, self.flip_prob];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("augment params must be finite and nonnegative".into()));
        }
        if self.flip_prob > 1.0 {
            return Err(Error::InvalidArgument("flip_prob must be ≤ 1".into()));
        }
        Ok(())
    }
}

/// Standard normal draw via Box-Muller; two uniforms per sample keeps the
/// stream layout fixed.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn sample_shape_point(shape: &ShapeTemplate, size_draw: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match shape {
        ShapeTemplate::BoxSurface { size_range } => {
            let s = size_range.0 + size_draw * (size_range.1 - size_range.0);
            let h = s / 2.0;
            // Face picked uniformly; edges are equal so areas match.
            let face = rng.gen_range(0..6u8);
            let a = rng.gen_range(-h..=h);
            let b = rng.gen_range(-h..=h);
            match face {
                0 => [h, a, b],
                1 => [-h, a, b],
                2 => [a, h, b],
                3 => [a, -h, b],
                4 => [a, b, h],
                _ => [a, b, -h],
            }
        }
        ShapeTemplate::SphereSurface { radius_range } => {
            let r = radius_range.0 + size_draw * (radius_range.1 - radius_range.0);
            loop {
                let (x, y, z) = (gauss(rng), gauss(rng), gauss(rng));
                let n = (x * x + y * y + z * z).sqrt();
                if n > 1e-9 {
                    return [r * x / n, r * y / n, r * z / n];
                }
            }
        }
        ShapeTemplate::PlanePatch { extent_range } => {
            let e = extent_range.0 + size_draw * (extent_range.1 - extent_range.0);
            let h = e / 2.0;
            [rng.gen_range(-h..=h), rng.gen_range(-h..=h), 0.0]
        }
    }
}

/// Generates a synthetic scene: `num_objects` objects, class `o mod K`,
/// each sampled on its class shape and colored near its palette entry.
/// Pure function of `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<LabeledPointCloud> {
    spec.validate()?;
    let n = spec.num_objects * spec.points_per_object;
    let mut coords = Array2::zeros((n, 3));
    let mut colors = Array2::zeros((n, 3));
    let mut labels = Vec::with_capacity(n);
    let mut rng = rng_for(seed, "scene", &[]);

    for obj in 0..spec.num_objects {
        let class = obj % spec.num_classes;
        let shape = &spec.class_shapes[class];
        let palette = spec.class_palette[class];
        let center = [
            rng.gen_range(PLACEMENT_MARGIN..=SCENE_EXTENT[0] - PLACEMENT_MARGIN),
            rng.gen_range(PLACEMENT_MARGIN..=SCENE_EXTENT[1] - PLACEMENT_MARGIN),
            rng.gen_range(PLACEMENT_MARGIN..=SCENE_EXTENT[2] - PLACEMENT_MARGIN),
        ];
        let size_draw: f64 = rng.gen_range(0.0..=1.0);
        for p in 0..spec.points_per_object {
            let row = obj * spec.points_per_object + p;
            let local = sample_shape_point(shape, size_draw, &mut rng);
            for d in 0..3 {
                coords[[row, d]] =
                    center[d] + local[d] + spec.geometry_noise_sd * gauss(&mut rng);
            }
            for c in 0..3 {
                colors[[row, c]] =
                    (palette[c] + spec.color_noise_sd * gauss(&mut rng)).clamp(0.0, 1.0);
            }
            labels.push(class);
        }
    }
    LabeledPointCloud::new(coords, colors, Some(labels), format!("synth-{seed}"))
}

/// Per-axis min-max scaling of coordinates into [0,1]; colors pass through.
/// A degenerate axis (max == min) maps to 0.5.
pub fn normalize_scene(cloud: &LabeledPointCloud) -> (Array2<f64>, Array2<f64>) {
    let n = cloud.num_points();
    let mut geo = Array2::zeros((n, 3));
    for d in 0..3 {
        let col = cloud.coords.column(d);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            let span = hi - lo;
            for (i, &v) in col.iter().enumerate() {
                geo[[i, d]] = (v - lo) / span;
            }
        } else {
            for i in 0..n {
                geo[[i, d]] = 0.5;
            }
        }
    }
    (geo, cloud.colors.clone())
}

/// Rotates coordinates about the vertical (z) axis through the origin.
pub fn rotate_z(coords: &Array2<f64>, angle: f64) -> Array2<f64> {
    let (s, c) = angle.sin_cos();
    let mut out = coords.clone();
    for mut row in out.rows_mut() {
        let (x, y) = (row[0], row[1]);
        row[0] = x * c - y * s;
        row[1] = x * s + y * c;
    }
    out
}

/// Seeded augmentation: z rotation, optional x flip, coordinate jitter,
/// color jitter clamped to [0,1]. Labels and point count are untouched.
pub fn augment(cloud: &LabeledPointCloud, params: &AugmentParams, seed: u64) -> Result<LabeledPointCloud> {
    params.validate()?;
    let mut rng = rng_for(seed, "augment", &[]);
    let angle = rng.gen_range(-params.max_rotation_z..=params.max_rotation_z);
    let mut coords = rotate_z(&cloud.coords, angle);
    let flip: f64 = rng.gen_range(0.0..1.0);
    if flip < params.flip_prob {
        for mut row in coords.rows_mut() {
            row[0] = -row[0];
        }
    }
    for v in coords.iter_mut() {
        *v += params.jitter_sd * gauss(&mut rng);
    }
    let mut colors = cloud.colors.clone();
    for v in colors.iter_mut() {
        *v = (*v + params.color_jitter_sd * gauss(&mut rng)).clamp(0.0, 1.0);
    }
    LabeledPointCloud::new(coords, colors, cloud.labels.clone(), cloud.scene_id.clone())
}

/// Writes a cloud in the `pgcc v1` text format:
/// a header `pgcc v1 N has_labels`, then N lines `x y z r g b [label]`.
/// Values carry nine fractional digits; `#` lines are comments.
pub fn save_cloud(cloud: &LabeledPointCloud, path: &Path) -> Result<()> {
    let n = cloud.num_points();
    let has_labels = cloud.labels.is_some();
    let mut out = String::with_capacity(n * 80 + 32);
    let _ = writeln!(out, "pgcc v1 {} {}", n, u8::from(has_labels));
    for i in 0..n {
        let c = cloud.coords.row(i);
        let k = cloud.colors.row(i);
        let _ = write!(
            out,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            c[0], c[1], c[2], k[0], k[1], k[2]
        );
        if let Some(labels) = &cloud.labels {
            let _ = write!(out, " {}", labels[i]);
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a `pgcc v1` cloud file. Violations are reported with their
/// 1-based line number.
pub fn load_cloud(path: &Path) -> Result<LabeledPointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(ix, l)| (ix + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (header_line, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "no points"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "pgcc" || fields[1] != "v1" {
        return Err(Error::parse(
            path,
            header_line,
            format!("malformed header, expected `pgcc v1 N has_labels`, got `{header}`"),
        ));
    }
    let n: usize = fields[2]
        .parse()
        .map_err(|_| Error::parse(path, header_line, format!("invalid point count `{}`", fields[2])))?;
    let has_labels = match fields[3] {
        "0" => false,
        "1" => true,
        other => {
            return Err(Error::parse(path, header_line, format!("invalid has_labels flag `{other}`")));
        }
    };
    if n == 0 {
        return Err(Error::parse(path, header_line, "no points"));
    }

    let expect_cols = if has_labels { 7 } else { 6 };
    let mut coords = Array2::zeros((n, 3));
    let mut colors = Array2::zeros((n, 3));
    let mut labels: Vec<usize> = Vec::with_capacity(if has_labels { n } else { 0 });

    let mut row = 0usize;
    for (line_no, line) in lines {
        if row >= n {
            return Err(Error::parse(path, line_no, format!("more than {n} data lines")));
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != expect_cols {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected {expect_cols} columns, found {}", cols.len()),
            ));
        }
        for d in 0..3 {
            coords[[row, d]] = cols[d]
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("invalid coordinate `{}`", cols[d])))?;
        }
        for c in 0..3 {
            let v: f64 = cols[3 + c]
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("invalid color `{}`", cols[3 + c])))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::parse(path, line_no, format!("color channel {v} outside [0,1]")));
            }
            colors[[row, c]] = v;
        }
        if has_labels {
            let raw: i64 = cols[6]
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("invalid label `{}`", cols[6])))?;
            if raw < 0 {
                return Err(Error::parse(path, line_no, format!("label {raw} out of range")));
            }
            labels.push(raw as usize);
        }
        row += 1;
    }
    if row != n {
        return Err(Error::parse(
            path,
            row + 1,
            format!("header declared {n} points, found {row}"),
        ));
    }
    let scene_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cloud".to_string());
    LabeledPointCloud::new(coords, colors, has_labels.then_some(labels), scene_id)
}
