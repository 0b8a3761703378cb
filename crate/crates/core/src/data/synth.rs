//! Deterministic synthetic analog of an imbalanced anatomy dataset.
//!
//! * distinct classes: well-separated parametric shape families;
//! * a confusable cluster: one base shape (a bright disc split by a dark
//!   cross) whose variants differ only by a small rotation of the cross;
//! * background: a heterogeneous mixture of random texture fields and, with
//!   probability `lookalike_prob`, heavily degraded copies of anatomy.
//!
//! Every image is drawn from its own stream keyed by (split, class, index),
//! so the test split never shares randomness with the training split.

use std::collections::BTreeMap;
use std::f32::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Sample, Split, BACKGROUND, CLUSTER_PREFIX};
use crate::image::Image;
use crate::rng::{self, Stream};

/// Number of distinct shape families available.
pub const SHAPE_FAMILIES: usize = 10;
/// Angular spacing of the cluster variants' inner cross.
const CLUSTER_STEP: f32 = PI / 20.0;
const MAX_CLUSTER: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_distinct_classes: usize,
    pub confusable_cluster_size: usize,
    pub include_background: bool,
    /// Per-class (train, test) counts for anatomical classes.
    pub anatomical_count: ClassCount,
    pub background_count: ClassCount,
    /// Overrides keyed by class name.
    pub images_per_class: BTreeMap<String, ClassCount>,
    pub image_size: (usize, usize),
    pub noise_sigma: f32,
    pub lookalike_prob: f64,
    /// Range of the log-uniform object scale.
    pub scale_range: [f32; 2],
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_distinct_classes: 9,
            confusable_cluster_size: 4,
            include_background: true,
            anatomical_count: ClassCount { train: 200, test: 60 },
            background_count: ClassCount { train: 600, test: 180 },
            images_per_class: BTreeMap::new(),
            image_size: (32, 32),
            noise_sigma: 0.08,
            lookalike_prob: 0.15,
            scale_range: [0.85, 1.15],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ClassKind {
    Distinct(usize),
    Cluster(usize),
    Background,
}

impl DatasetSpec {
    pub fn class_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.num_distinct_classes).map(|i| format!("distinct_{i}")).collect();
        names.extend((0..self.confusable_cluster_size).map(|i| format!("{CLUSTER_PREFIX}{i}")));
        if self.include_background {
            names.push(BACKGROUND.into());
        }
        names
    }

    fn kinds(&self) -> Vec<ClassKind> {
        let mut k: Vec<ClassKind> = (0..self.num_distinct_classes).map(ClassKind::Distinct).collect();
        k.extend((0..self.confusable_cluster_size).map(ClassKind::Cluster));
        if self.include_background {
            k.push(ClassKind::Background);
        }
        k
    }

    pub fn count(&self, name: &str) -> ClassCount {
        self.images_per_class.get(name).copied().unwrap_or(if name == BACKGROUND {
            self.background_count
        } else {
            self.anatomical_count
        })
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Spec(m));
        if self.num_distinct_classes > SHAPE_FAMILIES {
            return err(format!("at most {SHAPE_FAMILIES} distinct classes are available, got {}", self.num_distinct_classes));
        }
        if self.confusable_cluster_size > MAX_CLUSTER {
            return err(format!("cluster size must be at most {MAX_CLUSTER}, got {}", self.confusable_cluster_size));
        }
        let names = self.class_names();
        if names.len() < 2 {
            return err("need at least two classes".into());
        }
        if let Some(k) = self.images_per_class.keys().find(|k| !names.contains(k)) {
            return err(format!("images_per_class names unknown class '{k}'"));
        }
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return err(format!("image size must be at least 8x8, got {h}x{w}"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return err(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.lookalike_prob) {
            return err(format!("lookalike_prob must lie in [0, 1], got {}", self.lookalike_prob));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return err(format!("scale_range must be an ordered positive range, got {:?}", self.scale_range));
        }
        if names.iter().any(|n| self.count(n).train == 0) {
            return err("every class needs at least one training image".into());
        }
        if self.include_background {
            let bg = self.count(BACKGROUND);
            let max_anat = names.iter().filter(|n| *n != BACKGROUND).map(|n| self.count(n).train).max().unwrap_or(0);
            if bg.train <= max_anat {
                return err(format!("background ({}) must outnumber every anatomical class ({max_anat})", bg.train));
            }
        }
        Ok(())
    }
}

/// Builds the full dataset (train and test splits) described by `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let names = spec.class_names();
    let kinds = spec.kinds();
    let mut samples = Vec::new();
    for split in [Split::Train, Split::Test] {
        for (label, (name, &kind)) in names.iter().zip(&kinds).enumerate() {
            let c = spec.count(name);
            let n = if split == Split::Train { c.train } else { c.test };
            for k in 0..n {
                let mut rng = rng::stream(spec.seed, "synth", &[split as u64, label as u64, k as u64]);
                let mut img = render_class(kind, spec, &mut rng);
                // Store exactly what an 8-bit file can hold.
                img = Image::from_u8(img.height(), img.width(), &img.to_u8());
                samples.push(Sample { image: img, label, split, is_labelled: false });
            }
        }
    }
    Dataset::new(names, samples)
}

/// Pose of a shape on the canvas.
struct Pose {
    cy: f32,
    cx: f32,
    scale: f32,
    angle: f32,
}

impl Pose {
    /// Object coordinates of pixel (y, x); one unit is `scale` times a
    /// quarter of the smaller image extent... roughly 8 px at 32x32.
    fn to_object(&self, y: f32, x: f32, unit: f32) -> (f32, f32) {
        let (dy, dx) = ((y - self.cy) / (unit * self.scale), (x - self.cx) / (unit * self.scale));
        let (s, c) = self.angle.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

fn smooth_inside(d: f32, edge: f32) -> f32 {
    // d is a signed distance (negative inside) in object units.
    (0.5 - d / edge).clamp(0.0, 1.0)
}

fn sd_circle(u: f32, v: f32, r: f32) -> f32 {
    (u * u + v * v).sqrt() - r
}

fn sd_box(u: f32, v: f32, hu: f32, hv: f32) -> f32 {
    let (qu, qv) = (u.abs() - hu, v.abs() - hv);
    let outside = (qu.max(0.0).powi(2) + qv.max(0.0).powi(2)).sqrt();
    outside + qu.max(qv).min(0.0)
}

fn sd_capsule(u: f32, v: f32, half_len: f32, r: f32) -> f32 {
    let cu = u.clamp(-half_len, half_len);
    ((u - cu).powi(2) + v * v).sqrt() - r
}

fn sd_triangle(u: f32, v: f32, r: f32) -> f32 {
    // Equilateral triangle with circumradius r, apex up.
    let k = 3f32.sqrt();
    let (mut px, mut py) = (u.abs(), -v + r * 0.25);
    let side = r * k / 2.0;
    px -= side;
    py += side / k;
    if px + k * py > 0.0 {
        let (nx, ny) = ((px - k * py) / 2.0, (-k * px - py) / 2.0);
        px = nx;
        py = ny;
    }
    px -= px.clamp(-2.0 * side, 0.0);
    -(px * px + py * py).sqrt() * py.signum()
}

/// Coverage in `[0, 1]` of distinct shape family `family` at object coords.
fn distinct_shape(family: usize, u: f32, v: f32, edge: f32) -> f32 {
    let inside = |d: f32| smooth_inside(d, edge);
    match family {
        0 => inside(sd_circle(u / 1.6, v, 0.5) * 1.3),
        1 => inside(sd_circle(u, v, 0.65).abs() - 0.12),
        2 => inside(sd_capsule(u, v, 0.8, 0.2)),
        3 => inside(sd_box(u, v, 0.75, 0.16).min(sd_box(u, v, 0.16, 0.75))),
        4 => inside(sd_triangle(u, v, 0.85)),
        5 => inside(sd_circle(u - 0.45, v, 0.3).min(sd_circle(u + 0.45, v, 0.3))),
        6 => [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]
            .iter()
            .map(|&(a, b)| inside(sd_circle(u - 0.42 * a, v - 0.42 * b, 0.18)))
            .fold(0.0, f32::max),
        7 => inside(sd_circle(u, v, 0.7).max(-sd_circle(u - 0.3, v, 0.6))),
        8 => inside(sd_box(u, v, 0.35, 0.35)),
        _ => {
            let disc = inside(sd_circle(u, v, 0.75));
            let stripes = if (v * 5.0).rem_euclid(2.0) < 1.0 { 1.0 } else { 0.25 };
            disc * stripes
        }
    }
}

/// Cluster base shape: bright disc divided by a dark cross rotated by `twist`.
fn cluster_shape(variant: usize, u: f32, v: f32, edge: f32) -> f32 {
    let disc = smooth_inside(sd_circle(u, v, 0.8), edge);
    let twist = variant as f32 * CLUSTER_STEP;
    let (s, c) = twist.sin_cos();
    let (ru, rv) = (c * u + s * v, -s * u + c * v);
    let septum = smooth_inside(sd_box(ru, rv, 0.85, 0.07).min(sd_box(ru, rv, 0.07, 0.85)), edge);
    disc * (1.0 - 0.8 * septum)
}

fn random_pose<R: Rng>(rng: &mut R, h: usize, w: usize, jitter: f32, angle_range: f32, scale: [f32; 2]) -> Pose {
    Pose {
        cy: (h as f32 - 1.0) / 2.0 + rng.gen_range(-jitter..=jitter),
        cx: (w as f32 - 1.0) / 2.0 + rng.gen_range(-jitter..=jitter),
        scale: rng.gen_range(scale[0].ln()..=scale[1].ln()).exp(),
        angle: rng.gen_range(-angle_range..=angle_range),
    }
}

/// Adds spatially correlated Gaussian noise with marginal standard
/// deviation `sigma` (white noise smoothed by a separable [1 2 1] filter).
fn add_noise<R: Rng>(img: &mut Image, sigma: f32, rng: &mut R) {
    if sigma > 0.0 {
        let (h, w) = (img.height(), img.width());
        let n = Normal::new(0.0f32, 1.0).expect("unit normal");
        let white: Vec<f32> = (0..(h + 2) * (w + 2)).map(|_| n.sample(rng)).collect();
        let mut rows = vec![0.0f32; (h + 2) * w];
        for y in 0..h + 2 {
            for x in 0..w {
                let r = &white[y * (w + 2)..];
                rows[y * w + x] = 0.25 * r[x] + 0.5 * r[x + 1] + 0.25 * r[x + 2];
            }
        }
        // Each 1-D pass keeps 6/16 of the variance.
        let gain = sigma / (6.0f32 / 16.0);
        for y in 0..h {
            for x in 0..w {
                let v = 0.25 * rows[y * w + x] + 0.5 * rows[(y + 1) * w + x] + 0.25 * rows[(y + 2) * w + x];
                img.pixels_mut()[y * w + x] += gain * v;
            }
        }
    }
    img.clamp01();
}

fn add_blob<R: Rng>(img: &mut Image, rng: &mut R, radius: (f32, f32), level: (f32, f32)) {
    let (h, w) = (img.height(), img.width());
    let cy = rng.gen_range(0.0..h as f32);
    let cx = rng.gen_range(0.0..w as f32);
    let r = rng.gen_range(radius.0..=radius.1);
    let a = rng.gen_range(level.0..=level.1);
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
            img.pixels_mut()[y * w + x] += a * (-d2 / (2.0 * r * r)).exp();
        }
    }
}

fn render_anatomy(kind: ClassKind, spec: &DatasetSpec, rng: &mut Stream, degrade: bool) -> Image {
    let (h, w) = spec.image_size;
    let unit = h.min(w) as f32 / 4.0;
    let edge = 1.0 / unit;
    let (pose, level) = match kind {
        ClassKind::Cluster(_) => (random_pose(rng, h, w, 2.0, 0.08, spec.scale_range), rng.gen_range(0.55..=0.9)),
        _ => (random_pose(rng, h, w, 1.5, 0.15, spec.scale_range), rng.gen_range(0.5..=0.9)),
    };
    let floor = rng.gen_range(0.03..=0.15);
    let mut img = Image::from_fn(h, w, |y, x| {
        let (u, v) = pose.to_object(y as f32, x as f32, unit);
        let cov = match kind {
            ClassKind::Distinct(f) => distinct_shape(f, u, v, edge),
            ClassKind::Cluster(i) => cluster_shape(i, u, v, edge),
            ClassKind::Background => 0.0,
        };
        floor + (level - floor) * cov
    });
    if rng.gen_bool(0.5) {
        add_blob(&mut img, rng, (1.5, 3.0), (0.1, 0.3));
    }
    let sigma = if degrade {
        // Low contrast, heavy noise, half the field blanked out.
        let keep = rng.gen_range(0.3..=0.5);
        let angle = rng.gen_range(0.0..2.0 * PI);
        let (s, c) = angle.sin_cos();
        let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
        for y in 0..h {
            for x in 0..w {
                let p = &mut img.pixels_mut()[y * w + x];
                *p *= keep;
                if c * (x as f32 - cx) + s * (y as f32 - cy) > 0.0 {
                    *p *= 0.3;
                }
            }
        }
        for _ in 0..rng.gen_range(2..=4) {
            add_blob(&mut img, rng, (2.0, 5.0), (0.1, 0.35));
        }
        spec.noise_sigma * 2.5
    } else {
        spec.noise_sigma
    };
    add_noise(&mut img, sigma, rng);
    img
}

fn render_texture(spec: &DatasetSpec, rng: &mut Stream) -> Image {
    let (h, w) = spec.image_size;
    let floor = rng.gen_range(0.02..=0.2);
    let mut img = Image::filled(h, w, floor);
    for _ in 0..rng.gen_range(3..=8) {
        add_blob(&mut img, rng, (1.5, 6.0), (0.05, 0.45));
    }
    for _ in 0..rng.gen_range(0..=3) {
        // Random bright streak.
        let angle = rng.gen_range(0.0..PI);
        let (s, c) = angle.sin_cos();
        let off = rng.gen_range(-(h as f32) / 3.0..=h as f32 / 3.0);
        let level = rng.gen_range(0.1..=0.4);
        let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
        for y in 0..h {
            for x in 0..w {
                let d = (-s * (x as f32 - cx) + c * (y as f32 - cy) - off).abs();
                img.pixels_mut()[y * w + x] += level * (1.0 - d / 1.5).max(0.0);
            }
        }
    }
    add_noise(&mut img, spec.noise_sigma * rng.gen_range(1.0..=2.5), rng);
    img
}

/// Blacks out everything outside the circular field of view, like the
/// dark surround of an ultrasound scan.
fn apply_field_of_view(img: &mut Image) {
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let r = h.min(w) as f32 / 2.0 - 0.5;
    for y in 0..h {
        for x in 0..w {
            let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
            img.pixels_mut()[y * w + x] *= (r - d + 0.5).clamp(0.0, 1.0);
        }
    }
}

fn render_class(kind: ClassKind, spec: &DatasetSpec, rng: &mut Stream) -> Image {
    let mut img = render_class_raw(kind, spec, rng);
    apply_field_of_view(&mut img);
    img
}

fn render_class_raw(kind: ClassKind, spec: &DatasetSpec, rng: &mut Stream) -> Image {
    match kind {
        ClassKind::Background => {
            if rng.gen_bool(spec.lookalike_prob) {
                let n_anat = spec.num_distinct_classes + spec.confusable_cluster_size;
                let pick = rng.gen_range(0..n_anat);
                let like = if pick < spec.num_distinct_classes {
                    ClassKind::Distinct(pick)
                } else {
                    ClassKind::Cluster(pick - spec.num_distinct_classes)
                };
                render_anatomy(like, spec, rng, true)
            } else {
                render_texture(spec, rng)
            }
        }
        other => render_anatomy(other, spec, rng, false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            anatomical_count: ClassCount { train: 6, test: 2 },
            background_count: ClassCount { train: 9, test: 3 },
            ..Default::default()
        }
    }

    #[test]
    fn default_spec_has_fourteen_classes() {
        let s = DatasetSpec::default();
        assert_eq!(s.class_names().len(), 14);
        assert_eq!(s.class_names()[13], BACKGROUND);
        let nb = DatasetSpec { include_background: false, ..Default::default() };
        assert_eq!(nb.class_names().len(), 13);
    }

    #[test]
    fn counts_match_spec() {
        let ds = generate(&small()).unwrap();
        let train = ds.split(Split::Train).class_counts();
        let test = ds.split(Split::Test).class_counts();
        assert!(train[..13].iter().all(|&c| c == 6) && train[13] == 9);
        assert!(test[..13].iter().all(|&c| c == 2) && test[13] == 3);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&DatasetSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn pixels_in_unit_range() {
        let ds = generate(&small()).unwrap();
        for s in ds.samples() {
            assert!(s.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_inconsistent_specs() {
        let bad_bg = DatasetSpec { background_count: ClassCount { train: 200, test: 10 }, ..Default::default() };
        assert!(bad_bg.validate().is_err());
        assert!(DatasetSpec { num_distinct_classes: 11, ..Default::default() }.validate().is_err());
        let mut unknown = DatasetSpec::default();
        unknown.images_per_class.insert("nope".into(), ClassCount { train: 1, test: 1 });
        assert!(unknown.validate().is_err());
    }

    #[test]
    fn train_and_test_do_not_share_images() {
        let ds = generate(&small()).unwrap();
        let train = ds.split(Split::Train);
        for s in ds.split(Split::Test).samples() {
            assert!(!train.samples().iter().any(|t| t.image == s.image));
        }
    }
}
