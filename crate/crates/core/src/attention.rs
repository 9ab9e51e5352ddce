//! Per-voxel attention maps over an ensemble of soft predictions.
//!
//! For a class `c` and voxel `i`, with `p[n]` the probability that
//! architecture `n` of `N` assigns to `c` at `i`:
//!
//! * inconsistency = population standard deviation of `p[0..N]`
//! * uncertainty   = `-(1/N) Σ p[n] ln p[n]`, with `0 ln 0 = 0`
//! * overlap       = 1 when some architecture puts `c` above the threshold
//!   while another class is also above the threshold (for the same
//!   architecture by default, see [`OverlapScope`]), else 0
//! * attention     = inconsistency + uncertainty + overlap
//!
//! The attention size of a map is the sum of its voxels, accumulated in
//! `f64` with pairwise summation so that it does not depend on voxel order
//! beyond ~1e-12 relative.
//!
//! Maps are produced one class at a time ([`AttentionMaps`]); only the
//! per-architecture exceedance counts are shared across classes, so peak
//! memory stays at the ensemble itself plus one map.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelspace::ClassId;
use crate::volgrid::{VoxelData, VoxelGrid};

/// Below this, `p ln p` is taken as 0.
pub const LOG_CLAMP: f64 = 1e-12;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Upper bound of any attention voxel: max std (0.5) + max of `-p ln p`
/// (`1/e`) + overlap (1).
pub const ATTENTION_MAX: f64 = 0.5 + 0.367_879_441_171_442_3 + 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("ensemble needs at least 2 architectures, got {0}")]
    TooFewArchitectures(usize),
    #[error("class {0} is not part of this ensemble")]
    UnknownClass(ClassId),
    #[error("ensemble has no classes")]
    NoClasses,
    #[error("class {0} listed twice")]
    DuplicateClass(ClassId),
    #[error("architecture {0:?} listed twice")]
    DuplicateArchitecture(String),
    #[error("architecture {architecture:?} has {actual} class grids, expected {expected}")]
    ClassCountMismatch { architecture: String, expected: usize, actual: usize },
    #[error("grid dims {actual:?} differ from ensemble dims {expected:?}")]
    DimMismatch { expected: [usize; 3], actual: [usize; 3] },
    #[error("prediction for {architecture:?}/class {class} is not float32")]
    NotFloat { architecture: String, class: ClassId },
    #[error("prediction {architecture:?}/class {class} voxel {voxel} = {value} is outside [0, 1]")]
    NotProbability { architecture: String, class: ClassId, voxel: usize, value: f32 },
    #[error("invalid ensemble geometry: dims {dims:?}, spacing {spacing:?}")]
    InvalidGeometry { dims: [usize; 3], spacing: [f32; 3] },
    #[error("overlap threshold {0} must lie strictly between 0 and 1")]
    BadThreshold(f64),
}

pub type Result<T, E = AttentionError> = std::result::Result<T, E>;

/// Which architectures may supply the conflicting class in the overlap test.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OverlapScope {
    /// The conflicting class must be above threshold in the same architecture.
    #[default]
    #[serde(rename = "same-arch")]
    SameArchitecture,
    /// Any architecture may supply the conflicting class.
    #[serde(rename = "any-arch")]
    AnyArchitecture,
}

/// How voxels are weighted when summing a map into its attention size.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeWeighting {
    /// Plain voxel sum.
    #[default]
    Voxel,
    /// Sum scaled by the voxel volume in mm³.
    Physical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionParams {
    pub threshold: f64,
    pub overlap_scope: OverlapScope,
    pub size_weighting: SizeWeighting,
}

impl Default for AttentionParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            overlap_scope: OverlapScope::default(),
            size_weighting: SizeWeighting::default(),
        }
    }
}

impl AttentionParams {
    pub fn validate(&self) -> Result<()> {
        if self.threshold > 0.0 && self.threshold < 1.0 {
            Ok(())
        } else {
            Err(AttentionError::BadThreshold(self.threshold))
        }
    }
}

/// One architecture's per-class soft predictions, aligned with the
/// ensemble's class list.
#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub architecture: String,
    pub grids: Vec<VoxelGrid>,
}

/// Soft predictions of N ≥ 2 architectures for C classes of one volume.
///
/// Every value is validated to lie in `[0, 1]` on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    volume_id: String,
    dims: [usize; 3],
    spacing: [f32; 3],
    architectures: Vec<String>,
    class_ids: Vec<ClassId>,
    /// `[architecture][class][voxel]`
    probs: Vec<Vec<Vec<f32>>>,
}

impl EnsemblePrediction {
    pub fn new(volume_id: impl Into<String>, class_ids: Vec<ClassId>, members: Vec<EnsembleMember>) -> Result<Self> {
        let first = members
            .first()
            .and_then(|m| m.grids.first())
            .ok_or(if members.len() < 2 { AttentionError::TooFewArchitectures(members.len()) } else { AttentionError::NoClasses })?;
        let dims = first.dims();
        let spacing = first.spacing();
        let mut architectures = Vec::with_capacity(members.len());
        let mut probs = Vec::with_capacity(members.len());
        for member in members {
            if member.grids.len() != class_ids.len() {
                return Err(AttentionError::ClassCountMismatch {
                    architecture: member.architecture,
                    expected: class_ids.len(),
                    actual: member.grids.len(),
                });
            }
            let mut per_class = Vec::with_capacity(class_ids.len());
            for (grid, &class) in member.grids.into_iter().zip(&class_ids) {
                if grid.dims() != dims {
                    return Err(AttentionError::DimMismatch { expected: dims, actual: grid.dims() });
                }
                match grid.into_data() {
                    VoxelData::F32(v) => per_class.push(v),
                    VoxelData::U8(_) => {
                        return Err(AttentionError::NotFloat { architecture: member.architecture, class })
                    }
                }
            }
            architectures.push(member.architecture);
            probs.push(per_class);
        }
        Self::from_probabilities(volume_id, dims, spacing, class_ids, architectures, probs)
    }

    /// Build directly from `[architecture][class][voxel]` probability arrays.
    pub fn from_probabilities(
        volume_id: impl Into<String>,
        dims: [usize; 3],
        spacing: [f32; 3],
        class_ids: Vec<ClassId>,
        architectures: Vec<String>,
        probs: Vec<Vec<Vec<f32>>>,
    ) -> Result<Self> {
        if architectures.len() < 2 || probs.len() != architectures.len() {
            return Err(AttentionError::TooFewArchitectures(architectures.len().min(probs.len())));
        }
        if class_ids.is_empty() {
            return Err(AttentionError::NoClasses);
        }
        for (i, c) in class_ids.iter().enumerate() {
            if class_ids[..i].contains(c) {
                return Err(AttentionError::DuplicateClass(*c));
            }
        }
        for (i, a) in architectures.iter().enumerate() {
            if architectures[..i].contains(a) {
                return Err(AttentionError::DuplicateArchitecture(a.clone()));
            }
        }
        let voxels = VoxelGrid::zeros(dims, spacing, crate::volgrid::Dtype::U8)
            .map_err(|_| AttentionError::InvalidGeometry { dims, spacing })?
            .len();
        for (architecture, per_class) in architectures.iter().zip(&probs) {
            if per_class.len() != class_ids.len() {
                return Err(AttentionError::ClassCountMismatch {
                    architecture: architecture.clone(),
                    expected: class_ids.len(),
                    actual: per_class.len(),
                });
            }
            for (values, &class) in per_class.iter().zip(&class_ids) {
                if values.len() != voxels {
                    return Err(AttentionError::DimMismatch { expected: dims, actual: [values.len(), 1, 1] });
                }
                if let Some((voxel, &value)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
                    return Err(AttentionError::NotProbability {
                        architecture: architecture.clone(),
                        class,
                        voxel,
                        value,
                    });
                }
            }
        }
        Ok(Self { volume_id: volume_id.into(), dims, spacing, architectures, class_ids, probs })
    }

    pub fn volume_id(&self) -> &str {
        &self.volume_id
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn architectures(&self) -> &[String] {
        &self.architectures
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    fn class_index(&self, class: ClassId) -> Result<usize> {
        self.class_ids.iter().position(|&c| c == class).ok_or(AttentionError::UnknownClass(class))
    }

    /// Probabilities of `class` from architecture `arch`.
    pub fn probabilities(&self, arch: usize, class: ClassId) -> Result<&[f32]> {
        Ok(&self.probs[arch][self.class_index(class)?])
    }

    /// Ensemble-mean probability of `class`.
    pub fn mean_probability(&self, class: ClassId) -> Result<Vec<f32>> {
        let ci = self.class_index(class)?;
        let n = self.probs.len() as f64;
        Ok((0..self.voxel_count())
            .map(|i| (self.probs.iter().map(|a| f64::from(a[ci][i])).sum::<f64>() / n) as f32)
            .collect())
    }

    fn grid(&self, values: Vec<f32>) -> VoxelGrid {
        VoxelGrid::new(self.dims, self.spacing, VoxelData::F32(values)).expect("ensemble dims validated")
    }

    fn voxel_weight(&self, weighting: SizeWeighting) -> f64 {
        match weighting {
            SizeWeighting::Voxel => 1.0,
            SizeWeighting::Physical => self.spacing.iter().map(|&s| f64::from(s)).product(),
        }
    }
}

#[inline]
fn std_and_entropy(ens: &EnsemblePrediction, ci: usize, i: usize) -> (f64, f64) {
    let n = ens.probs.len() as f64;
    let mut sum = 0.0;
    let mut plogp = 0.0;
    for arch in &ens.probs {
        let p = f64::from(arch[ci][i]);
        sum += p;
        if p >= LOG_CLAMP {
            plogp += p * p.ln();
        }
    }
    let mean = sum / n;
    let var = ens
        .probs
        .iter()
        .map(|arch| {
            let d = f64::from(arch[ci][i]) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (var.sqrt(), -plogp / n)
}

/// Count, per voxel, how many ensemble classes exceed the threshold: once per
/// architecture and once across architectures.
struct Exceedance {
    threshold: f32,
    scope: OverlapScope,
    counts: Vec<Vec<u8>>,
}

impl Exceedance {
    fn new(ens: &EnsemblePrediction, threshold: f64, scope: OverlapScope) -> Self {
        let threshold = threshold as f32;
        let voxels = ens.voxel_count();
        let counts = match scope {
            OverlapScope::SameArchitecture => ens
                .probs
                .iter()
                .map(|arch| {
                    let mut count = vec![0u8; voxels];
                    for class in arch {
                        for (c, &p) in count.iter_mut().zip(class) {
                            *c += u8::from(p > threshold);
                        }
                    }
                    count
                })
                .collect(),
            OverlapScope::AnyArchitecture => {
                let mut count = vec![0u8; voxels];
                for ci in 0..ens.class_ids.len() {
                    for (i, c) in count.iter_mut().enumerate() {
                        *c += u8::from(ens.probs.iter().any(|arch| arch[ci][i] > threshold));
                    }
                }
                vec![count]
            }
        };
        Self { threshold, scope, counts }
    }

    #[inline]
    fn overlap(&self, ens: &EnsemblePrediction, ci: usize, i: usize) -> bool {
        match self.scope {
            OverlapScope::SameArchitecture => ens
                .probs
                .iter()
                .zip(&self.counts)
                .any(|(arch, count)| arch[ci][i] > self.threshold && count[i] >= 2),
            OverlapScope::AnyArchitecture => {
                self.counts[0][i] >= 2 && ens.probs.iter().any(|arch| arch[ci][i] > self.threshold)
            }
        }
    }
}

/// Per-voxel population standard deviation of `class` across architectures.
pub fn inconsistency(ens: &EnsemblePrediction, class: ClassId) -> Result<VoxelGrid> {
    let ci = ens.class_index(class)?;
    let values = (0..ens.voxel_count()).map(|i| std_and_entropy(ens, ci, i).0 as f32).collect();
    Ok(ens.grid(values))
}

/// Per-voxel `-(1/N) Σ p ln p` of `class` across architectures.
pub fn uncertainty(ens: &EnsemblePrediction, class: ClassId) -> Result<VoxelGrid> {
    let ci = ens.class_index(class)?;
    let values = (0..ens.voxel_count()).map(|i| std_and_entropy(ens, ci, i).1 as f32).collect();
    Ok(ens.grid(values))
}

/// Binary multi-class conflict map of `class`, strict `>` against `threshold`.
pub fn overlap(ens: &EnsemblePrediction, class: ClassId, threshold: f64, scope: OverlapScope) -> Result<VoxelGrid> {
    AttentionParams { threshold, overlap_scope: scope, ..Default::default() }.validate()?;
    let ci = ens.class_index(class)?;
    let exceed = Exceedance::new(ens, threshold, scope);
    let values = (0..ens.voxel_count()).map(|i| f32::from(u8::from(exceed.overlap(ens, ci, i)))).collect();
    Ok(ens.grid(values))
}

/// Sum of the three component sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentSizes {
    pub inconsistency: f64,
    pub uncertainty: f64,
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub volume_id: String,
    pub class_id: ClassId,
    pub inconsistency: VoxelGrid,
    pub uncertainty: VoxelGrid,
    pub overlap: VoxelGrid,
    pub attention: VoxelGrid,
    pub attention_size: f64,
    pub component_sizes: ComponentSizes,
    pub params: AttentionParams,
}

impl AttentionMap {
    /// JSON-serializable summary of this map.
    pub fn record(&self) -> AttentionRecord {
        AttentionRecord {
            volume_id: self.volume_id.clone(),
            class_id: self.class_id,
            attention_size: self.attention_size,
            threshold: self.params.threshold,
            log_base: LogBase::E,
            overlap_scope: self.params.overlap_scope,
            size_weighting: self.params.size_weighting,
            component_sizes: self.component_sizes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogBase {
    #[serde(rename = "e")]
    E,
}

/// Persisted description of one attention map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub volume_id: String,
    pub class_id: ClassId,
    pub attention_size: f64,
    pub threshold: f64,
    pub log_base: LogBase,
    pub overlap_scope: OverlapScope,
    pub size_weighting: SizeWeighting,
    pub component_sizes: ComponentSizes,
}

fn build_map(ens: &EnsemblePrediction, class: ClassId, params: &AttentionParams, exceed: &Exceedance) -> Result<AttentionMap> {
    let ci = ens.class_index(class)?;
    let voxels = ens.voxel_count();
    let mut inc = Vec::with_capacity(voxels);
    let mut unc = Vec::with_capacity(voxels);
    let mut ovl = Vec::with_capacity(voxels);
    let mut att = Vec::with_capacity(voxels);
    for i in 0..voxels {
        let (s, h) = std_and_entropy(ens, ci, i);
        let o = if exceed.overlap(ens, ci, i) { 1.0 } else { 0.0 };
        inc.push(s as f32);
        unc.push(h as f32);
        ovl.push(o as f32);
        att.push((s + h + o) as f32);
    }
    let weight = ens.voxel_weight(params.size_weighting);
    let component_sizes = ComponentSizes {
        inconsistency: weight * pairwise_sum(&inc),
        uncertainty: weight * pairwise_sum(&unc),
        overlap: weight * pairwise_sum(&ovl),
    };
    let attention_size = weight * pairwise_sum(&att);
    Ok(AttentionMap {
        volume_id: ens.volume_id.clone(),
        class_id: class,
        inconsistency: ens.grid(inc),
        uncertainty: ens.grid(unc),
        overlap: ens.grid(ovl),
        attention: ens.grid(att),
        attention_size,
        component_sizes,
        params: *params,
    })
}

/// Full attention map of one class.
pub fn attention_map(ens: &EnsemblePrediction, class: ClassId, params: &AttentionParams) -> Result<AttentionMap> {
    params.validate()?;
    ens.class_index(class)?;
    let exceed = Exceedance::new(ens, params.threshold, params.overlap_scope);
    build_map(ens, class, params, &exceed)
}

/// Voxel sum of `map.attention` under `weighting`.
pub fn attention_size(map: &AttentionMap, weighting: SizeWeighting) -> f64 {
    let values = map.attention.as_f32().expect("attention grids are float32");
    let weight = match weighting {
        SizeWeighting::Voxel => 1.0,
        SizeWeighting::Physical => map.attention.voxel_volume(),
    };
    weight * pairwise_sum(values)
}

/// Pairwise (cascade) summation in `f64`.
pub fn pairwise_sum(values: &[f32]) -> f64 {
    const BLOCK: usize = 128;
    if values.len() <= BLOCK {
        values.iter().map(|&v| f64::from(v)).sum()
    } else {
        let (lo, hi) = values.split_at(values.len() / 2);
        pairwise_sum(lo) + pairwise_sum(hi)
    }
}

/// Lazy per-class stream of attention maps for one ensemble.
pub struct AttentionMaps<'a> {
    ens: &'a EnsemblePrediction,
    params: AttentionParams,
    exceed: Exceedance,
    classes: std::vec::IntoIter<ClassId>,
}

impl Iterator for AttentionMaps<'_> {
    type Item = AttentionMap;

    fn next(&mut self) -> Option<AttentionMap> {
        let class = self.classes.next()?;
        Some(build_map(self.ens, class, &self.params, &self.exceed).expect("classes checked up front"))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.classes.size_hint()
    }
}

/// Stream maps for `classes` (all ensemble classes when `None`).
pub fn attention_maps<'a>(
    ens: &'a EnsemblePrediction,
    classes: Option<&[ClassId]>,
    params: &AttentionParams,
) -> Result<AttentionMaps<'a>> {
    params.validate()?;
    let classes = match classes {
        Some(cs) => {
            for &c in cs {
                ens.class_index(c)?;
            }
            cs.to_vec()
        }
        None => ens.class_ids.clone(),
    };
    Ok(AttentionMaps {
        ens,
        params: *params,
        exceed: Exceedance::new(ens, params.threshold, params.overlap_scope),
        classes: classes.into_iter(),
    })
}

/// Attention records for `classes`, computing and dropping one map at a time.
pub fn attention_records(
    ens: &EnsemblePrediction,
    classes: Option<&[ClassId]>,
    params: &AttentionParams,
) -> Result<Vec<AttentionRecord>> {
    Ok(attention_maps(ens, classes, params)?.map(|m| m.record()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cid(id: u8) -> ClassId {
        ClassId::new(id).unwrap()
    }

    /// Single-voxel ensemble: `values[arch][class]`.
    fn voxel_ensemble(classes: &[u8], values: &[&[f32]]) -> EnsemblePrediction {
        let archs = (0..values.len()).map(|n| format!("m{n}")).collect();
        let probs = values.iter().map(|per_class| per_class.iter().map(|&p| vec![p]).collect()).collect();
        EnsemblePrediction::from_probabilities("v", [1, 1, 1], [1.0; 3], classes.iter().map(|&c| cid(c)).collect(), archs, probs)
            .unwrap()
    }

    fn scalar(grid: &VoxelGrid) -> f64 {
        f64::from(grid.as_f32().unwrap()[0])
    }

    #[test]
    fn identical_predictions_have_zero_inconsistency() {
        let ens = voxel_ensemble(&[1], &[&[0.5], &[0.5], &[0.5]]);
        assert_eq!(scalar(&inconsistency(&ens, cid(1)).unwrap()), 0.0);
    }

    #[test]
    fn inconsistency_point_values() {
        // population std of {0.2, 0.5, 0.8}: mean 0.5, var (0.09 + 0 + 0.09) / 3 = 0.06
        let ens = voxel_ensemble(&[1], &[&[0.2], &[0.5], &[0.8]]);
        assert!((scalar(&inconsistency(&ens, cid(1)).unwrap()) - 0.06f64.sqrt()).abs() < 1e-6);
        let ens = voxel_ensemble(&[1], &[&[0.0], &[1.0]]);
        assert!((scalar(&inconsistency(&ens, cid(1)).unwrap()) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn uncertainty_point_values() {
        let ens = voxel_ensemble(&[1], &[&[1.0], &[1.0], &[1.0]]);
        assert_eq!(scalar(&uncertainty(&ens, cid(1)).unwrap()), 0.0);
        let ens = voxel_ensemble(&[1], &[&[0.0], &[0.0], &[0.0]]);
        assert_eq!(scalar(&uncertainty(&ens, cid(1)).unwrap()), 0.0);
        let inv_e = (-1.0f64).exp() as f32;
        let ens = voxel_ensemble(&[1], &[&[inv_e], &[inv_e], &[inv_e]]);
        assert!((scalar(&uncertainty(&ens, cid(1)).unwrap()) - 0.367_879).abs() < 1e-6);
    }

    #[test]
    fn overlap_rules() {
        // only class 1 confident anywhere
        let ens = voxel_ensemble(&[1, 2], &[&[0.9, 0.1], &[0.8, 0.3]]);
        assert_eq!(scalar(&overlap(&ens, cid(1), 0.5, OverlapScope::SameArchitecture).unwrap()), 0.0);
        // same architecture gives 0.8 to c and 0.6 to c'
        let ens = voxel_ensemble(&[1, 2], &[&[0.8, 0.6], &[0.1, 0.0]]);
        assert_eq!(scalar(&overlap(&ens, cid(1), 0.5, OverlapScope::SameArchitecture).unwrap()), 1.0);
        assert_eq!(scalar(&overlap(&ens, cid(2), 0.5, OverlapScope::SameArchitecture).unwrap()), 1.0);
        // exactly at threshold is not an exceedance
        let ens = voxel_ensemble(&[1, 2], &[&[0.5, 0.5], &[0.5, 0.5]]);
        assert_eq!(scalar(&overlap(&ens, cid(1), 0.5, OverlapScope::SameArchitecture).unwrap()), 0.0);
    }

    #[test]
    fn overlap_scope_differs_across_architectures() {
        // arch 0 says class 1, arch 1 says class 2: a conflict only across architectures
        let ens = voxel_ensemble(&[1, 2], &[&[0.9, 0.1], &[0.1, 0.9]]);
        assert_eq!(scalar(&overlap(&ens, cid(1), 0.5, OverlapScope::SameArchitecture).unwrap()), 0.0);
        assert_eq!(scalar(&overlap(&ens, cid(1), 0.5, OverlapScope::AnyArchitecture).unwrap()), 1.0);
    }

    #[test]
    fn worked_voxel_attention() {
        // class 1 gets {0.2, 0.5, 0.8}; the third architecture also gives 0.6 to class 2
        let ens = voxel_ensemble(&[1, 2], &[&[0.2, 0.0], &[0.5, 0.0], &[0.8, 0.6]]);
        let map = attention_map(&ens, cid(1), &AttentionParams::default()).unwrap();
        assert!((scalar(&map.inconsistency) - 0.244_949).abs() < 1e-5);
        assert!((scalar(&map.uncertainty) - 0.282_326).abs() < 1e-5);
        assert_eq!(scalar(&map.overlap), 1.0);
        assert!((scalar(&map.attention) - 1.527_275).abs() < 1e-5);
        assert!((map.attention_size - 1.527_275).abs() < 1e-5);
    }

    #[test]
    fn confident_unanimous_one_hot_has_zero_attention() {
        let ens = voxel_ensemble(&[1, 2], &[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let map = attention_map(&ens, cid(1), &AttentionParams::default()).unwrap();
        assert_eq!(map.attention_size, 0.0);
    }

    #[test]
    fn size_is_plain_sum() {
        let values: Vec<f32> = (0..20).map(|i| if i < 10 { 0.5 } else { 0.0 }).collect();
        assert_eq!(pairwise_sum(&values), 5.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
        let many = vec![0.25f32; 1000];
        assert_eq!(pairwise_sum(&many), 250.0);
    }

    #[test]
    fn physical_weighting_scales_by_voxel_volume() {
        let probs = vec![vec![vec![0.2f32; 8]], vec![vec![0.8f32; 8]]];
        let ens = EnsemblePrediction::from_probabilities("v", [2, 2, 2], [0.5, 2.0, 3.0], vec![cid(4)], vec!["a".into(), "b".into()], probs)
            .unwrap();
        let voxel = attention_map(&ens, cid(4), &AttentionParams::default()).unwrap();
        let params = AttentionParams { size_weighting: SizeWeighting::Physical, ..Default::default() };
        let physical = attention_map(&ens, cid(4), &params).unwrap();
        assert!((physical.attention_size - 3.0 * voxel.attention_size).abs() < 1e-9);
        assert!((attention_size(&voxel, SizeWeighting::Physical) - physical.attention_size).abs() < 1e-9);
    }

    #[test]
    fn ingest_validation() {
        let archs = || vec!["a".to_string(), "b".to_string()];
        let bad = EnsemblePrediction::from_probabilities("v", [1, 1, 1], [1.0; 3], vec![cid(1)], archs(), vec![vec![vec![1.5]], vec![vec![0.0]]]);
        assert!(matches!(bad, Err(AttentionError::NotProbability { voxel: 0, .. })));
        let one = EnsemblePrediction::from_probabilities("v", [1, 1, 1], [1.0; 3], vec![cid(1)], vec!["a".into()], vec![vec![vec![0.0]]]);
        assert_eq!(one.unwrap_err(), AttentionError::TooFewArchitectures(1));
        let nan = EnsemblePrediction::from_probabilities("v", [1, 1, 1], [1.0; 3], vec![cid(1)], archs(), vec![vec![vec![f32::NAN]], vec![vec![0.0]]]);
        assert!(matches!(nan, Err(AttentionError::NotProbability { .. })));

        let ens = voxel_ensemble(&[1], &[&[0.1], &[0.2]]);
        assert_eq!(inconsistency(&ens, cid(2)).unwrap_err(), AttentionError::UnknownClass(cid(2)));
        assert_eq!(overlap(&ens, cid(1), 1.0, OverlapScope::SameArchitecture).unwrap_err(), AttentionError::BadThreshold(1.0));
    }

    #[test]
    fn members_must_be_float_and_aligned() {
        let f = |v: f32| VoxelGrid::from_f32([1, 1, 1], [1.0; 3], vec![v]).unwrap();
        let members = vec![
            EnsembleMember { architecture: "a".into(), grids: vec![f(0.1)] },
            EnsembleMember { architecture: "b".into(), grids: vec![VoxelGrid::from_u8([1, 1, 1], [1.0; 3], vec![0]).unwrap()] },
        ];
        assert!(matches!(EnsemblePrediction::new("v", vec![cid(1)], members), Err(AttentionError::NotFloat { .. })));
        let members = vec![
            EnsembleMember { architecture: "a".into(), grids: vec![f(0.1)] },
            EnsembleMember { architecture: "b".into(), grids: vec![VoxelGrid::from_f32([2, 1, 1], [1.0; 3], vec![0.0, 0.0]).unwrap()] },
        ];
        assert!(matches!(EnsemblePrediction::new("v", vec![cid(1)], members), Err(AttentionError::DimMismatch { .. })));
    }

    #[test]
    fn streamed_maps_match_single_class_calls() {
        let ens = voxel_ensemble(&[1, 2, 3], &[&[0.7, 0.6, 0.0], &[0.2, 0.3, 0.9], &[0.4, 0.55, 0.1]]);
        let params = AttentionParams::default();
        let streamed: Vec<_> = attention_maps(&ens, None, &params).unwrap().collect();
        assert_eq!(streamed.len(), 3);
        for map in streamed {
            assert_eq!(map, attention_map(&ens, map.class_id, &params).unwrap());
        }
        let records = attention_records(&ens, Some(&[cid(2)]), &params).unwrap();
        assert_eq!(records.len(), 1);
        let json = serde_json::to_value(&records[0]).unwrap();
        assert_eq!(json["log_base"], "e");
        assert_eq!(json["overlap_scope"], "same-arch");
    }
}
