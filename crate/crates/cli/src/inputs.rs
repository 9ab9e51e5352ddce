//! Loading ensembles, label directories and volume geometry from disk.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::Context;
use atlasforge_core::attention::{AttentionError, EnsembleMember};
use atlasforge_core::volgrid::{read_header, read_volume_file, VolumeManifest, VolumeRole, HEADER_SIZE};
use atlasforge_core::{ClassId, EnsemblePrediction, LabelGrid};

use crate::config::usage;

#[derive(Debug)]
pub enum InputError {
    NoPredictions(PathBuf),
    MissingPrediction { volume: String, architecture: String, class: ClassId },
    NoGeometry(String),
    DimMismatch { volume: String, expected: [usize; 3], actual: [usize; 3] },
}

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputError::NoPredictions(p) => write!(f, "{} lists no prediction entries", p.display()),
            InputError::MissingPrediction { volume, architecture, class } => {
                write!(f, "volume {volume:?}: architecture {architecture:?} has no prediction for class {class}")
            }
            InputError::NoGeometry(v) => write!(f, "volume {v:?} has no file to read dims from"),
            InputError::DimMismatch { volume, expected, actual } => {
                write!(f, "volume {volume:?}: dims {actual:?} differ from {expected:?}")
            }
        }
    }
}

impl std::error::Error for InputError {}

/// Validate class ids given on the command line.
pub fn parse_classes(ids: &[u8]) -> anyhow::Result<Vec<ClassId>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let class = ClassId::new(id).map_err(|_| usage(format!("class {id} is not a registered structure (1..=25)")))?;
        if out.contains(&class) {
            return Err(usage(format!("class {id} listed twice")));
        }
        out.push(class);
    }
    Ok(out)
}

/// Volumes with at least one prediction entry, in id order.
pub fn prediction_volumes(manifest: &VolumeManifest) -> Vec<String> {
    let set: BTreeSet<&str> =
        manifest.entries.iter().filter(|e| e.role == VolumeRole::Prediction).map(|e| e.volume.as_str()).collect();
    set.into_iter().map(str::to_owned).collect()
}

/// Every class with a prediction entry, ascending.
pub fn prediction_classes(manifest: &VolumeManifest) -> Vec<ClassId> {
    let set: BTreeSet<ClassId> =
        manifest.entries.iter().filter(|e| e.role == VolumeRole::Prediction).filter_map(|e| e.class).collect();
    set.into_iter().collect()
}

/// Assemble the ensemble of `volume` for `classes`; architectures are taken
/// in name order.
pub fn load_ensemble(manifest: &VolumeManifest, volume: &str, classes: &[ClassId]) -> anyhow::Result<EnsemblePrediction> {
    let architectures: BTreeSet<&str> =
        manifest.by_role(volume, VolumeRole::Prediction).filter_map(|e| e.architecture.as_deref()).collect();
    if architectures.len() < 2 {
        return Err(anyhow::Error::from(AttentionError::TooFewArchitectures(architectures.len())))
            .with_context(|| format!("volume {volume:?}"));
    }
    let mut members = Vec::with_capacity(architectures.len());
    for arch in architectures {
        let mut grids = Vec::with_capacity(classes.len());
        for &class in classes {
            let entry = manifest
                .by_role(volume, VolumeRole::Prediction)
                .find(|e| e.architecture.as_deref() == Some(arch) && e.class == Some(class))
                .ok_or_else(|| InputError::MissingPrediction {
                    volume: volume.to_owned(),
                    architecture: arch.to_owned(),
                    class,
                })?;
            grids.push(read_volume_file(&entry.path)?);
        }
        members.push(EnsembleMember { architecture: arch.to_owned(), grids });
    }
    EnsemblePrediction::new(volume, classes.to_vec(), members).with_context(|| format!("volume {volume:?}"))
}

/// Dims of `volume` from the header of its first manifest entry; every other
/// entry of the volume must agree.
pub fn volume_dims(manifest: &VolumeManifest, volume: &str) -> anyhow::Result<[usize; 3]> {
    let mut dims = None;
    for entry in manifest.entries.iter().filter(|e| e.volume == volume) {
        let mut header = vec![0u8; HEADER_SIZE];
        let mut file = std::fs::File::open(&entry.path).with_context(|| format!("opening {}", entry.path.display()))?;
        file.read_exact(&mut header).with_context(|| format!("reading header of {}", entry.path.display()))?;
        let found = read_header(&header).with_context(|| entry.path.display().to_string())?.dims;
        match dims {
            None => dims = Some(found),
            Some(d) if d != found => {
                return Err(InputError::DimMismatch { volume: volume.to_owned(), expected: d, actual: found }.into())
            }
            Some(_) => {}
        }
    }
    dims.ok_or_else(|| InputError::NoGeometry(volume.to_owned()).into())
}

/// Every `<volume>.nii` in `dir`, keyed by file stem.
pub fn load_label_dir(dir: &Path) -> anyhow::Result<BTreeMap<String, LabelGrid>> {
    let listing = std::fs::read_dir(dir).map_err(|e| usage(format!("cannot list {}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in listing {
        let path = entry.with_context(|| format!("listing {}", dir.display()))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("nii") {
            continue;
        }
        let volume = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
        let grid = read_volume_file(&path)?;
        let labels = LabelGrid::new(grid).with_context(|| path.display().to_string())?;
        out.insert(volume, labels);
    }
    Ok(out)
}
