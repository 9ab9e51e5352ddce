//! Synthetic end-to-end campaign runs.
//!
//! Phantoms are built from analytic shapes; each simulated architecture
//! corrupts the one-hot truth with label-swap noise at boundaries, Gaussian
//! blur, a per-class boundary bias and shared error blobs whose strength
//! depends on a per-pair difficulty. The corruption is fixed per seed and
//! mixed with the truth by the iteration's error multiplier, so a lower
//! multiplier can only move a voxel's ensemble mean towards the truth. An
//! oracle plays the annotators and revises any selected pair whose AI mask
//! falls below the acceptance DSC.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attention::{AttentionError, EnsembleMember, EnsemblePrediction};
use crate::campaign::{
    Campaign, CampaignConfig, CampaignError, Clock, RevisionRecord, SignOff, SignOffDecision, SignOffScope,
    StopDecision, StopReason, Verdict, VolumeEntry,
};
use crate::labelspace::{ClassId, LabelError, LabelGrid};
use crate::metrics::OverlapCounts;
use crate::ranking::selection_count;
use crate::volgrid::{VolError, VoxelGrid};

pub const DEFAULT_ACCEPT_DSC: f64 = 0.95;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("shape of class {class} leaves the grid")]
    ShapeOutOfBounds { class: ClassId },
    #[error("ensemble needs at least 2 architectures, got {0}")]
    TooFewArchitectures(usize),
    #[error("invalid scenario: {0}")]
    BadSpec(String),
    #[error("model {architecture:?}: {message}")]
    BadModel { architecture: String, message: String },
    #[error(transparent)]
    Campaign(#[from] CampaignError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("{0}")]
    Grid(String),
}

impl From<VolError> for SimError {
    fn from(e: VolError) -> Self {
        SimError::Grid(e.to_string())
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

/// Analytic shape in physical coordinates (mm); voxel `(x, y, z)` sits at
/// `(x·sx, y·sy, z·sz)`. Membership is strict, so a zero radius is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
    /// Cylinder of `radius` around the segment `start`–`end`.
    Tube { start: [f64; 3], end: [f64; 3], radius: f64 },
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Sphere { center, radius } => dist2(p, *center) < radius * radius,
            Shape::Box { min, max } => (0..3).all(|a| min[a] < p[a] && p[a] < max[a]),
            Shape::Tube { start, end, radius } => {
                let d = sub(*end, *start);
                let len2 = dot(d, d);
                let t = if len2 > 0.0 { dot(sub(p, *start), d) / len2 } else { 0.0 };
                if !(0.0..=1.0).contains(&t) {
                    return false;
                }
                let foot = [start[0] + t * d[0], start[1] + t * d[1], start[2] + t * d[2]];
                dist2(p, foot) < radius * radius
            }
        }
    }

    /// Axis-aligned bounding box.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Shape::Sphere { center, radius } => (center.map(|c| c - radius), center.map(|c| c + radius)),
            Shape::Box { min, max } => (*min, *max),
            Shape::Tube { start, end, radius } => {
                // a flat-capped cylinder reaches radius · sqrt(1 − (d_a/|d|)²) past its axis on axis a
                let d = sub(*end, *start);
                let len2 = dot(d, d);
                let reach: [f64; 3] =
                    std::array::from_fn(|a| if len2 > 0.0 { radius * (1.0 - d[a] * d[a] / len2).max(0.0).sqrt() } else { *radius });
                (
                    std::array::from_fn(|a| start[a].min(end[a]) - reach[a]),
                    std::array::from_fn(|a| start[a].max(end[a]) + reach[a]),
                )
            }
        }
    }

    fn valid(&self) -> bool {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            Shape::Sphere { center, radius } => finite(center) && radius.is_finite() && *radius >= 0.0,
            Shape::Box { min, max } => finite(min) && finite(max),
            Shape::Tube { start, end, radius } => finite(start) && finite(end) && radius.is_finite() && *radius >= 0.0,
        }
    }

    /// Jitter the position by `offset` and scale sizes by `scale`.
    fn perturbed(&self, offset: [f64; 3], scale: f64) -> Shape {
        let shift = |p: [f64; 3]| std::array::from_fn(|a| p[a] + offset[a]);
        match self {
            Shape::Sphere { center, radius } => Shape::Sphere { center: shift(*center), radius: radius * scale },
            Shape::Box { min, max } => {
                let c: [f64; 3] = std::array::from_fn(|a| (min[a] + max[a]) / 2.0 + offset[a]);
                let h: [f64; 3] = std::array::from_fn(|a| (max[a] - min[a]) / 2.0 * scale);
                Shape::Box { min: std::array::from_fn(|a| c[a] - h[a]), max: std::array::from_fn(|a| c[a] + h[a]) }
            }
            Shape::Tube { start, end, radius } => {
                Shape::Tube { start: shift(*start), end: shift(*end), radius: radius * scale }
            }
        }
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassShape {
    pub class: ClassId,
    pub shape: Shape,
    /// Mean image intensity inside the shape.
    #[serde(default = "default_intensity")]
    pub intensity: f32,
}

fn default_intensity() -> f32 {
    1.0
}

/// One phantom. Shapes are painted in order, so a later shape carves any
/// earlier one it overlaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub seed: u64,
    pub shapes: Vec<ClassShape>,
    /// Standard deviation of the Gaussian image noise.
    #[serde(default)]
    pub noise: f32,
}

/// Build the image and the truth labels of a phantom.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(VoxelGrid, LabelGrid)> {
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(SimError::BadSpec(format!("noise {} must be finite and non-negative", spec.noise)));
    }
    // validates dims and spacing before anything is allocated per voxel
    let len = VoxelGrid::zeros(spec.dims, spec.spacing, crate::volgrid::Dtype::U8)?.len();
    let [nx, ny, nz] = spec.dims;
    let extent: [f64; 3] = std::array::from_fn(|a| (spec.dims[a] - 1) as f64 * spec.spacing[a] as f64);
    let mut values = vec![0u8; len];
    let mut intensity = vec![0.0f32; len];
    for cs in &spec.shapes {
        if !cs.shape.valid() {
            return Err(SimError::BadSpec(format!("shape of class {} has non-finite or negative parameters", cs.class)));
        }
        let (lo, hi) = cs.shape.bounds();
        if (0..3).any(|a| lo[a] < -1e-9 || hi[a] > extent[a] + 1e-9) {
            return Err(SimError::ShapeOutOfBounds { class: cs.class });
        }
        let sp = spec.spacing.map(f64::from);
        // only visit the voxels inside the bounding box
        let range = |a: usize, n: usize| {
            let first = (lo[a] / sp[a]).floor().max(0.0) as usize;
            let last = ((hi[a] / sp[a]).ceil() as usize).min(n - 1);
            first..=last
        };
        for z in range(2, nz) {
            for y in range(1, ny) {
                for x in range(0, nx) {
                    if cs.shape.contains([x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]]) {
                        let i = x + nx * (y + ny * z);
                        values[i] = cs.class.get();
                        intensity[i] = cs.intensity;
                    }
                }
            }
        }
    }
    if spec.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0f32, spec.noise).map_err(|e| SimError::BadSpec(e.to_string()))?;
        for v in &mut intensity {
            *v += normal.sample(&mut rng);
        }
    }
    let image = VoxelGrid::from_f32(spec.dims, spec.spacing, intensity)?;
    let labels = VoxelGrid::from_u8(spec.dims, spec.spacing, values)?;
    Ok((image, LabelGrid::new(labels)?))
}

/// One simulated architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimModelSpec {
    pub architecture: String,
    /// Gaussian blur sigma in voxels.
    #[serde(default)]
    pub blur_sigma: f64,
    /// Per-voxel probability that a boundary voxel takes a neighbour's label.
    #[serde(default)]
    pub confusion: f64,
    /// Additive shift of the class probability inside the blur band; positive
    /// values dilate the class.
    #[serde(default)]
    pub bias: BTreeMap<ClassId, f64>,
    /// How strongly this model follows the shared error blobs, in [0, 1].
    #[serde(default = "default_blob_strength")]
    pub blob_strength: f64,
    pub seed: u64,
    /// Iteration → error multiplier; piecewise constant from each key on.
    pub schedule: BTreeMap<u32, f64>,
}

fn default_blob_strength() -> f64 {
    1.0
}

impl SimModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |message: &str| SimError::BadModel { architecture: self.architecture.clone(), message: message.into() };
        if self.architecture.is_empty() {
            return Err(bad("empty architecture tag"));
        }
        if !(self.blur_sigma.is_finite() && self.blur_sigma >= 0.0) {
            return Err(bad("blur_sigma must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.confusion) {
            return Err(bad("confusion must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.blob_strength) {
            return Err(bad("blob_strength must lie in [0, 1]"));
        }
        if self.bias.values().any(|b| !b.is_finite() || b.abs() > 1.0) {
            return Err(bad("bias values must lie in [-1, 1]"));
        }
        if !self.schedule.contains_key(&0) {
            return Err(bad("schedule must define iteration 0"));
        }
        let values: Vec<f64> = self.schedule.values().copied().collect();
        if values.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(bad("multipliers must lie in [0, 1]"));
        }
        if values.windows(2).any(|w| w[1] > w[0]) {
            return Err(bad("multipliers must be non-increasing"));
        }
        Ok(())
    }

    pub fn multiplier(&self, iteration: u32) -> f64 {
        self.schedule.range(..=iteration).next_back().map(|(_, m)| *m).unwrap_or(1.0)
    }
}

/// Shared error process: blobs placed at class boundaries, scaled by a
/// per-(volume, class) difficulty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorModel {
    /// Inclusive range of blobs per (volume, class).
    pub blobs: [u32; 2],
    /// Blob radius range in voxels.
    pub blob_radius: [f64; 2],
    /// Range of the per-(volume, class) difficulty, which scales blob radii.
    pub difficulty: [f64; 2],
}

impl Default for ErrorModel {
    fn default() -> Self {
        Self { blobs: [1, 3], blob_radius: [2.0, 4.0], difficulty: [0.2, 1.0] }
    }
}

impl ErrorModel {
    fn validate(&self) -> Result<()> {
        let ok = self.blobs[0] <= self.blobs[1]
            && self.blob_radius[0] > 0.0
            && self.blob_radius[0] <= self.blob_radius[1]
            && self.blob_radius[1].is_finite()
            && self.difficulty[0] >= 0.0
            && self.difficulty[0] <= self.difficulty[1]
            && self.difficulty[1] <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(SimError::BadSpec("error model ranges must be ordered, radii positive, difficulty within [0, 1]".into()))
        }
    }
}

/// SplitMix64 over a sequence of words; derives independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const STREAM_BLOBS: u64 = 1;
const STREAM_CONFUSION: u64 = 2;
const STREAM_PHANTOM: u64 = 3;

fn neighbours(dims: [usize; 3], i: usize) -> impl Iterator<Item = usize> {
    let [nx, ny, nz] = dims;
    let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
    let steps: [(bool, isize); 6] = [
        (x > 0, -1),
        (x + 1 < nx, 1),
        (y > 0, -(nx as isize)),
        (y + 1 < ny, nx as isize),
        (z > 0, -((nx * ny) as isize)),
        (z + 1 < nz, (nx * ny) as isize),
    ];
    steps.into_iter().filter(|(ok, _)| *ok).map(move |(_, d)| (i as isize + d) as usize)
}

/// Separable Gaussian blur with clamped edges; `sigma` in voxels.
pub fn gaussian_blur(values: &[f32], dims: [usize; 3], sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut cur = values.to_vec();
    let mut next = vec![0.0f32; cur.len()];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let stride = strides[axis];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / stride) % dims[axis]) as isize;
            let base = i - pos as usize * stride;
            let mut acc = 0.0f64;
            for (k, w) in kernel.iter().enumerate() {
                let j = (pos + k as isize - radius).clamp(0, n - 1) as usize;
                acc += w * cur[base + j * stride] as f64;
            }
            *out = acc as f32;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Per-voxel blob weight in [0, 1] for one (volume, class): the maximum
/// over blobs of `1 − (r/R)²`, where each blob radius `R` is the sampled
/// radius scaled by the pair's difficulty.
fn blob_field(truth: &[u8], dims: [usize; 3], class: ClassId, errors: &ErrorModel, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let difficulty = rng.random_range(errors.difficulty[0]..=errors.difficulty[1]);
    let count = rng.random_range(errors.blobs[0]..=errors.blobs[1]);
    let c = class.get();
    let boundary: Vec<usize> = (0..truth.len())
        .filter(|&i| truth[i] == c && neighbours(dims, i).any(|j| truth[j] != c))
        .collect();
    let mut field = vec![0.0f32; truth.len()];
    if boundary.is_empty() {
        return field;
    }
    let [nx, ny, nz] = dims;
    for _ in 0..count {
        let centre = boundary[rng.random_range(0..boundary.len())];
        let radius = difficulty * rng.random_range(errors.blob_radius[0]..=errors.blob_radius[1]);
        if radius <= 0.0 {
            continue;
        }
        let (cx, cy, cz) = ((centre % nx) as f64, ((centre / nx) % ny) as f64, (centre / (nx * ny)) as f64);
        let r = radius.ceil() as isize;
        let span = |c: f64, n: usize| ((c as isize - r).max(0) as usize)..=((c as isize + r).min(n as isize - 1) as usize);
        for z in span(cz, nz) {
            for y in span(cy, ny) {
                for x in span(cx, nx) {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) + (z as f64 - cz).powi(2);
                    let w = 1.0 - d2 / (radius * radius);
                    let i = x + nx * (y + ny * z);
                    if w > field[i] as f64 {
                        field[i] = w as f32;
                    }
                }
            }
        }
    }
    field
}

/// Swap each boundary voxel's label for a random neighbour's with
/// probability `rate`.
fn confuse(truth: &[u8], dims: [usize; 3], rate: f64, seed: u64) -> Vec<u8> {
    if rate <= 0.0 {
        return truth.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = truth.to_vec();
    for i in 0..truth.len() {
        let differing: Vec<usize> = neighbours(dims, i).filter(|&j| truth[j] != truth[i]).collect();
        if !differing.is_empty() && rng.random_bool(rate) {
            out[i] = truth[differing[rng.random_range(0..differing.len())]];
        }
    }
    out
}

/// Simulated soft predictions of every model for `classes` on one volume.
///
/// `volume_seed` fixes all randomness; `iteration` only selects the
/// multiplier, so predictions at two iterations differ solely through it.
pub fn simulate_ensemble(
    volume_id: &str,
    truth: &LabelGrid,
    classes: &[ClassId],
    specs: &[SimModelSpec],
    errors: &ErrorModel,
    volume_seed: u64,
    iteration: u32,
) -> Result<EnsemblePrediction> {
    if specs.len() < 2 {
        return Err(SimError::TooFewArchitectures(specs.len()));
    }
    for s in specs {
        s.validate()?;
    }
    let dims = truth.dims();
    let spacing = truth.grid().spacing();
    let labels = truth.values();
    let fields: Vec<Vec<f32>> = classes
        .iter()
        .map(|&c| blob_field(labels, dims, c, errors, mix_seed(&[volume_seed, STREAM_BLOBS, c.get() as u64])))
        .collect();
    let mut members = Vec::with_capacity(specs.len());
    for spec in specs {
        let m = spec.multiplier(iteration) as f32;
        let confused = confuse(labels, dims, spec.confusion, mix_seed(&[volume_seed, STREAM_CONFUSION, spec.seed]));
        let mut grids = Vec::with_capacity(classes.len());
        for (k, &c) in classes.iter().enumerate() {
            let onehot: Vec<f32> = confused.iter().map(|&v| f32::from(v == c.get())).collect();
            let mut soft = gaussian_blur(&onehot, dims, spec.blur_sigma);
            let bias = spec.bias.get(&c).copied().unwrap_or(0.0) as f32;
            let strength = spec.blob_strength as f32;
            for (i, s) in soft.iter_mut().enumerate() {
                if *s > 0.0 && *s < 1.0 {
                    *s = (*s + bias).clamp(0.0, 1.0);
                }
                let w = (strength * fields[k][i]).min(1.0);
                *s += w * (1.0 - 2.0 * *s);
                let t = f32::from(labels[i] == c.get());
                *s = ((1.0 - m) * t + m * *s).clamp(0.0, 1.0);
            }
            grids.push(VoxelGrid::from_f32(dims, spacing, soft)?);
        }
        members.push(EnsembleMember { architecture: spec.architecture.clone(), grids });
    }
    Ok(EnsemblePrediction::new(volume_id, classes.to_vec(), members)?)
}

/// Binary AI mask: ensemble mean above 0.5.
pub fn ai_mask(ens: &EnsemblePrediction, class: ClassId) -> Result<VoxelGrid> {
    let mean = ens.mean_probability(class)?;
    let data = mean.iter().map(|&p| u8::from(p > 0.5)).collect();
    Ok(VoxelGrid::from_u8(ens.dims(), ens.spacing(), data)?)
}

fn mask_dsc(pred: &[u8], truth: &[u8]) -> f64 {
    let mut c = OverlapCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        c.pred += u64::from(p);
        c.truth += u64::from(t);
        c.both += u64::from(p & t);
    }
    c.dice()
}

/// The annotator stand-in: revise with the truth mask when the AI mask's DSC
/// is strictly below `accept_dsc`, otherwise accept unchanged. Returns the
/// verdict and, for revisions, the mask.
pub fn oracle_annotator(ai: &VoxelGrid, truth_mask: &VoxelGrid, accept_dsc: f64) -> (Verdict, Option<VoxelGrid>, f64) {
    let d = mask_dsc(ai.as_u8().unwrap_or_default(), truth_mask.as_u8().unwrap_or_default());
    if d < accept_dsc {
        (Verdict::Revised, Some(truth_mask.clone()), d)
    } else {
        (Verdict::NoChange, None, d)
    }
}

/// Spearman rank correlation with average ranks for ties; `None` for fewer
/// than two points or a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Template for one class across all phantoms of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTemplate {
    pub class: ClassId,
    pub shape: Shape,
    /// Uniform jitter of the position per axis, in mm.
    #[serde(default)]
    pub jitter: f64,
    /// Relative uniform jitter of the size.
    #[serde(default)]
    pub scale_jitter: f64,
    #[serde(default = "default_intensity")]
    pub intensity: f32,
}

/// A complete, seeded simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub volumes: usize,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    #[serde(default)]
    pub image_noise: f32,
    pub classes: Vec<ClassTemplate>,
    #[serde(default)]
    pub errors: ErrorModel,
    pub models: Vec<SimModelSpec>,
    #[serde(default)]
    pub campaign: CampaignConfig,
    #[serde(default = "default_accept_dsc")]
    pub accept_dsc: f64,
}

fn default_accept_dsc() -> f64 {
    DEFAULT_ACCEPT_DSC
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(SimError::BadSpec("scenario name must be non-empty".into()));
        }
        if self.volumes == 0 {
            return Err(SimError::BadSpec("scenario needs at least one volume".into()));
        }
        if self.classes.is_empty() {
            return Err(SimError::BadSpec("scenario needs at least one class".into()));
        }
        let distinct: BTreeSet<ClassId> = self.classes.iter().map(|c| c.class).collect();
        if distinct.len() != self.classes.len() {
            return Err(SimError::BadSpec("class listed twice".into()));
        }
        for c in &self.classes {
            if !(c.jitter.is_finite() && c.jitter >= 0.0 && (0.0..1.0).contains(&c.scale_jitter)) {
                return Err(SimError::BadSpec(format!("class {}: jitter must be >= 0 and scale_jitter in [0, 1)", c.class)));
            }
        }
        if self.models.len() < 2 {
            return Err(SimError::TooFewArchitectures(self.models.len()));
        }
        let tags: BTreeSet<&str> = self.models.iter().map(|m| m.architecture.as_str()).collect();
        if tags.len() != self.models.len() {
            return Err(SimError::BadSpec("architecture tag listed twice".into()));
        }
        for m in &self.models {
            m.validate()?;
        }
        self.errors.validate()?;
        self.campaign.validate()?;
        if !(self.accept_dsc > 0.0 && self.accept_dsc <= 1.0) {
            return Err(SimError::BadSpec(format!("accept_dsc {} must lie in (0, 1]", self.accept_dsc)));
        }
        Ok(())
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.class).collect()
    }

    pub fn volume_id(i: usize) -> String {
        format!("sim-{i:03}")
    }

    pub fn volume_seed(&self, i: usize) -> u64 {
        mix_seed(&[self.seed, i as u64])
    }

    /// The concrete phantom of volume `i`.
    pub fn phantom_spec(&self, i: usize) -> PhantomSpec {
        let seed = self.volume_seed(i);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_PHANTOM]));
        let mut jitter = |amount: f64| if amount > 0.0 { rng.random_range(-amount..=amount) } else { 0.0 };
        let shapes = self
            .classes
            .iter()
            .map(|t| {
                let offset = [jitter(t.jitter), jitter(t.jitter), jitter(t.jitter)];
                let scale = 1.0 + jitter(t.scale_jitter);
                ClassShape { class: t.class, shape: t.shape.perturbed(offset, scale), intensity: t.intensity }
            })
            .collect();
        PhantomSpec { dims: self.dims, spacing: self.spacing, seed, shapes, noise: self.image_noise }
    }
}

/// Five-number summary plus mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution5 {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl Distribution5 {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self { min: v[0], q1: q(0.25), median: q(0.5), q3: q(0.75), max: v[v.len() - 1], mean: v.iter().sum::<f64>() / v.len() as f64 })
    }
}

/// Per-(volume, class) observation at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairObservation {
    pub volume: String,
    pub class: ClassId,
    /// DSC of the AI mask of the current model.
    pub dsc: f64,
    /// Attention size, for pairs still in the candidate pool.
    pub attention_size: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: u32,
    pub model_tag: String,
    pub multipliers: Vec<f64>,
    pub pool_size: usize,
    /// `Σ_class ceil(fraction · pool)`: the revision budget of this iteration.
    pub budget: usize,
    pub selected: usize,
    pub revised: usize,
    pub no_change: usize,
    pub cumulative_revised: usize,
    /// Mean DSC of the current model's AI masks over all pairs.
    pub model_mean_dsc: f64,
    /// Mean DSC of the working annotation after this iteration's revisions:
    /// revised masks for revised pairs, AI masks elsewhere.
    pub annotation_mean_dsc: f64,
    pub class_model_dsc: BTreeMap<ClassId, f64>,
    pub attention: Option<Distribution5>,
    pub decision: StopDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopSummary {
    pub scenario: String,
    pub seed: u64,
    pub iterations: u32,
    pub max_iterations: u32,
    pub stop_reason: Option<StopReason>,
    pub initial_model_dsc: f64,
    pub final_model_dsc: f64,
    pub final_annotation_dsc: f64,
    /// Spearman correlation of attention size and `1 − DSC` at iteration 0.
    pub spearman_iteration0: Option<f64>,
    pub total_pairs: usize,
    pub total_revised: usize,
    pub total_budget: usize,
    /// Human-revised pairs over all pairs.
    pub effort_ratio: f64,
    pub signed_off_pairs: usize,
    pub events: usize,
    /// SHA-256 of the JSON-lines trace.
    pub trace_sha256: String,
}

#[derive(Debug, Clone)]
pub struct LoopTrace {
    pub iterations: Vec<IterationTrace>,
    /// Iteration-0 observations of every pair.
    pub initial_pairs: Vec<PairObservation>,
    pub summary: LoopSummary,
    pub campaign: Campaign,
}

impl LoopTrace {
    pub fn trace_jsonl(&self) -> String {
        trace_jsonl(&self.iterations)
    }

    /// `iteration,model_mean_dsc,annotation_mean_dsc,cumulative_revised`.
    pub fn dsc_csv(&self) -> String {
        let mut out = String::from("iteration,model_tag,model_mean_dsc,annotation_mean_dsc,cumulative_revised\n");
        for t in &self.iterations {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{}",
                t.iteration, t.model_tag, t.model_mean_dsc, t.annotation_mean_dsc, t.cumulative_revised
            );
        }
        out
    }
}

fn trace_jsonl(iterations: &[IterationTrace]) -> String {
    let mut out = String::new();
    for t in iterations {
        out.push_str(&serde_json::to_string(t).expect("trace serializes"));
        out.push('\n');
    }
    out
}

/// A phantom with the masks derived from it.
struct Subject {
    id: String,
    seed: u64,
    truth: LabelGrid,
    masks: Vec<VoxelGrid>,
}

/// Run the full loop: create, then open → oracle revisions → export →
/// advance until the stop rule fires, then a campaign-wide approval.
pub fn run_loop(scenario: &Scenario) -> Result<LoopTrace> {
    scenario.validate()?;
    let classes = scenario.class_ids();
    let subjects: Vec<Subject> = (0..scenario.volumes)
        .into_par_iter()
        .map(|i| {
            let (_, truth) = generate_phantom(&scenario.phantom_spec(i))?;
            let masks = classes.iter().map(|&c| truth.to_binary_mask(c)).collect();
            Ok(Subject { id: Scenario::volume_id(i), seed: scenario.volume_seed(i), truth, masks })
        })
        .collect::<Result<_>>()?;
    let volumes = subjects.iter().map(|s| VolumeEntry { id: s.id.clone(), dims: scenario.dims }).collect();
    let mut campaign =
        Campaign::create(scenario.name.clone(), scenario.campaign.clone(), volumes, classes.clone(), "M0", Clock::Logical)?;
    let total_pairs = subjects.len() * classes.len();
    let mut revised_pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut iterations = Vec::new();
    let mut initial_pairs = Vec::new();
    let mut total_budget = 0;

    loop {
        let k = campaign.state().iteration;
        let ensembles: Vec<EnsemblePrediction> = subjects
            .par_iter()
            .map(|s| simulate_ensemble(&s.id, &s.truth, &classes, &scenario.models, &scenario.errors, s.seed, k))
            .collect::<Result<_>>()?;
        let ai: Vec<Vec<VoxelGrid>> = ensembles
            .par_iter()
            .map(|e| classes.iter().map(|&c| ai_mask(e, c)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        let dsc: Vec<Vec<f64>> = subjects
            .iter()
            .zip(&ai)
            .map(|(s, masks)| {
                masks.iter().zip(&s.masks).map(|(p, t)| mask_dsc(p.as_u8().unwrap_or_default(), t.as_u8().unwrap_or_default())).collect()
            })
            .collect();

        let pool_before: BTreeMap<ClassId, usize> =
            classes.iter().map(|&c| (c, campaign.state().pool(c).count())).collect();
        let budget: usize = pool_before.values().map(|&n| selection_count(n, scenario.campaign.fraction).unwrap_or(0)).sum();
        let selections = campaign.open_iteration(&ensembles)?;
        let open = campaign.state().open.as_ref().expect("iteration just opened");
        let sizes: BTreeMap<(&str, ClassId), f64> = open
            .priority
            .values()
            .flat_map(|l| l.entries.iter().map(|e| ((e.volume.as_str(), e.class), e.size)))
            .collect();
        let attention_values: Vec<f64> = sizes.values().copied().collect();
        if k == 0 {
            for (s, row) in subjects.iter().zip(&dsc) {
                for (ci, &c) in classes.iter().enumerate() {
                    initial_pairs.push(PairObservation {
                        volume: s.id.clone(),
                        class: c,
                        dsc: row[ci],
                        attention_size: sizes.get(&(s.id.as_str(), c)).copied(),
                    });
                }
            }
        }
        let attention = Distribution5::of(&attention_values);

        let index: BTreeMap<&str, usize> = subjects.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
        let (mut revised, mut no_change, mut selected) = (0, 0, 0);
        for (ci, &c) in classes.iter().enumerate() {
            for volume in &selections[&c].selected {
                selected += 1;
                let vi = index[volume.as_str()];
                let (verdict, mask, _) = oracle_annotator(&ai[vi][ci], &subjects[vi].masks[ci], scenario.accept_dsc);
                let rec = RevisionRecord {
                    volume: volume.clone(),
                    class: c,
                    iteration: k,
                    annotator: "oracle".into(),
                    verdict,
                    mask_ref: mask.as_ref().map(|_| format!("masks/{volume}_c{:02}_it{k:02}.nii", c.get())),
                    timestamp: 0,
                };
                campaign.record_revision(rec, mask.as_ref())?;
                match verdict {
                    Verdict::Revised => {
                        revised += 1;
                        revised_pairs.insert((vi, ci));
                    }
                    Verdict::NoChange => no_change += 1,
                }
            }
        }
        campaign.export_finetune_manifest()?;
        let model_tag = campaign.state().model_tag.clone();
        campaign.advance_iteration(format!("M{}", k + 1))?;
        let decision = campaign.check_stop()?;
        total_budget += budget;

        let n = total_pairs as f64;
        let model_mean_dsc = dsc.iter().flatten().sum::<f64>() / n;
        let annotation_mean_dsc = (0..subjects.len())
            .flat_map(|vi| (0..classes.len()).map(move |ci| (vi, ci)))
            .map(|(vi, ci)| if revised_pairs.contains(&(vi, ci)) { 1.0 } else { dsc[vi][ci] })
            .sum::<f64>()
            / n;
        let class_model_dsc = classes
            .iter()
            .enumerate()
            .map(|(ci, &c)| (c, dsc.iter().map(|row| row[ci]).sum::<f64>() / subjects.len() as f64))
            .collect();
        iterations.push(IterationTrace {
            iteration: k,
            model_tag,
            multipliers: scenario.models.iter().map(|m| m.multiplier(k)).collect(),
            pool_size: pool_before.values().sum(),
            budget,
            selected,
            revised,
            no_change,
            cumulative_revised: revised_pairs.len(),
            model_mean_dsc,
            annotation_mean_dsc,
            class_model_dsc,
            attention,
            decision,
        });
        if let StopDecision::Stop(_) = decision {
            break;
        }
    }

    campaign.final_signoff(SignOff {
        reviewer: "senior-oracle".into(),
        scope: SignOffScope::Campaign,
        decision: SignOffDecision::Approve,
        note: "synthetic run".into(),
    })?;

    let (xs, ys): (Vec<f64>, Vec<f64>) =
        initial_pairs.iter().filter_map(|p| p.attention_size.map(|a| (a, 1.0 - p.dsc))).unzip();
    let first = &iterations[0];
    let last = iterations.last().expect("at least one iteration");
    let trace_text = trace_jsonl(&iterations);
    let summary = LoopSummary {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        iterations: iterations.len() as u32,
        max_iterations: scenario.campaign.max_iterations,
        stop_reason: campaign.state().stopped,
        initial_model_dsc: first.model_mean_dsc,
        final_model_dsc: last.model_mean_dsc,
        final_annotation_dsc: last.annotation_mean_dsc,
        spearman_iteration0: spearman(&xs, &ys),
        total_pairs,
        total_revised: revised_pairs.len(),
        total_budget,
        effort_ratio: revised_pairs.len() as f64 / total_pairs as f64,
        signed_off_pairs: campaign.state().status_counts().get(&crate::campaign::PairStatus::SignedOff).copied().unwrap_or(0),
        events: campaign.events().len(),
        trace_sha256: hex::encode(Sha256::digest(trace_text.as_bytes())),
    };
    Ok(LoopTrace { iterations, initial_pairs, summary, campaign })
}
