//! The 25-structure annotation taxonomy and label-grid encoding.
//!
//! Class ids follow the order in which the structures are enumerated in the
//! annotation standard: the sixteen abdominal organs (gastrointestinal tract
//! first), the two lungs, the five vascular structures and the two femurs.
//! Id 0 is background.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::volgrid::{VoxelData, VoxelGrid};

/// Number of registered structures.
pub const CLASS_COUNT: usize = 25;

/// SHA-256 of [`registry_json`]. Changing the registry changes this value.
pub const REGISTRY_SHA256: &str = "204871162d93c17d7677ef76016f4260a0607b4d473cb56f5bbf9aa9c31348be";

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("unknown class {0}")]
    UnknownClass(String),
    #[error("masks disagree on dims: {expected:?} vs {actual:?}")]
    DimMismatch { expected: [usize; 3], actual: [usize; 3] },
    #[error("voxel {voxel} claimed by classes {first} and {second}")]
    MaskConflict { voxel: usize, first: ClassId, second: ClassId },
    #[error("mask for class {class} is not a binary uint8 grid")]
    NonBinaryMask { class: ClassId },
    #[error("label grid must be uint8")]
    NotUint8,
    #[error("voxel {voxel} holds unregistered label {value}")]
    UnregisteredLabel { voxel: usize, value: u8 },
    #[error("no masks given")]
    NoMasks,
}

/// Registered structure id, `1..=25`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ClassId(u8);

impl ClassId {
    pub fn new(id: u8) -> Result<Self, LabelError> {
        if (1..=CLASS_COUNT as u8).contains(&id) {
            Ok(ClassId(id))
        } else {
            Err(LabelError::UnknownClass(id.to_string()))
        }
    }

    pub const fn get(self) -> u8 {
        self.0
    }

    pub fn def(self) -> &'static ClassDef {
        &REGISTRY[self.0 as usize - 1]
    }

    pub fn name(self) -> &'static str {
        self.def().name
    }

    /// Every registered id in ascending order.
    pub fn all() -> impl Iterator<Item = ClassId> {
        (1..=CLASS_COUNT as u8).map(ClassId)
    }
}

impl TryFrom<u8> for ClassId {
    type Error = LabelError;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        ClassId::new(v)
    }
}

impl From<ClassId> for u8 {
    fn from(c: ClassId) -> u8 {
        c.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for ClassId {
    type Err = LabelError;

    /// Accepts a numeric id or a registered name.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().parse::<u8>() {
            Ok(id) => ClassId::new(id),
            Err(_) => lookup(s.trim()).map(|d| d.id).ok_or_else(|| LabelError::UnknownClass(s.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Gastrointestinal,
    AbdominalOther,
    Thorax,
    Vascular,
    Skeletal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ClassDef {
    pub id: ClassId,
    pub name: &'static str,
    pub group: Group,
}

const fn def(id: u8, name: &'static str, group: Group) -> ClassDef {
    ClassDef { id: ClassId(id), name, group }
}

static REGISTRY: [ClassDef; CLASS_COUNT] = [
    def(1, "esophagus", Group::Gastrointestinal),
    def(2, "stomach", Group::Gastrointestinal),
    def(3, "duodenum", Group::Gastrointestinal),
    def(4, "intestine", Group::Gastrointestinal),
    def(5, "colon", Group::Gastrointestinal),
    def(6, "rectum", Group::Gastrointestinal),
    def(7, "liver", Group::AbdominalOther),
    def(8, "gall_bladder", Group::AbdominalOther),
    def(9, "spleen", Group::AbdominalOther),
    def(10, "pancreas", Group::AbdominalOther),
    def(11, "kidney_left", Group::AbdominalOther),
    def(12, "kidney_right", Group::AbdominalOther),
    def(13, "adrenal_gland_left", Group::AbdominalOther),
    def(14, "adrenal_gland_right", Group::AbdominalOther),
    def(15, "bladder", Group::AbdominalOther),
    def(16, "prostate", Group::AbdominalOther),
    def(17, "lung_left", Group::Thorax),
    def(18, "lung_right", Group::Thorax),
    def(19, "aorta", Group::Vascular),
    def(20, "celiac_trunk", Group::Vascular),
    def(21, "postcava", Group::Vascular),
    def(22, "portal_splenic_vein", Group::Vascular),
    def(23, "hepatic_vessel", Group::Vascular),
    def(24, "femur_left", Group::Skeletal),
    def(25, "femur_right", Group::Skeletal),
];

pub fn registry() -> &'static [ClassDef] {
    &REGISTRY
}

pub fn lookup(name: &str) -> Option<&'static ClassDef> {
    REGISTRY.iter().find(|d| d.name == name)
}

/// Canonical JSON of the registry: a compact array of `{id, name, group}`.
pub fn registry_json() -> String {
    serde_json::to_string(&REGISTRY[..]).expect("registry serializes")
}

pub fn registry_sha256() -> String {
    hex::encode(Sha256::digest(registry_json().as_bytes()))
}

/// A uint8 grid whose voxels hold 0 (background) or a registered class id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid(VoxelGrid);

impl LabelGrid {
    pub fn new(grid: VoxelGrid) -> Result<Self, LabelError> {
        let values = grid.as_u8().ok_or(LabelError::NotUint8)?;
        if let Some((voxel, &value)) = values.iter().enumerate().find(|(_, &v)| v as usize > CLASS_COUNT) {
            return Err(LabelError::UnregisteredLabel { voxel, value });
        }
        Ok(LabelGrid(grid))
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.0
    }

    pub fn into_grid(self) -> VoxelGrid {
        self.0
    }

    pub fn values(&self) -> &[u8] {
        self.0.as_u8().expect("label grids are uint8")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.0.dims()
    }

    /// Ids present in the grid, ascending.
    pub fn classes_present(&self) -> Vec<ClassId> {
        let mut seen = [false; CLASS_COUNT + 1];
        for &v in self.values() {
            seen[v as usize] = true;
        }
        (1..=CLASS_COUNT).filter(|&i| seen[i]).map(|i| ClassId(i as u8)).collect()
    }

    /// Binary (0/1) uint8 mask of `class`.
    pub fn to_binary_mask(&self, class: ClassId) -> VoxelGrid {
        let id = class.get();
        let data = self.values().iter().map(|&v| u8::from(v == id)).collect();
        VoxelGrid::new(self.0.dims(), self.0.spacing(), VoxelData::U8(data)).expect("same shape as source")
    }

    /// Compose per-class binary masks into one label grid. Voxels claimed by
    /// no mask are background; a voxel claimed twice is an error.
    pub fn from_binary_masks(masks: &BTreeMap<ClassId, VoxelGrid>) -> Result<Self, LabelError> {
        let (_, first) = masks.iter().next().ok_or(LabelError::NoMasks)?;
        let dims = first.dims();
        let mut labels = vec![0u8; first.len()];
        for (&class, mask) in masks {
            if mask.dims() != dims {
                return Err(LabelError::DimMismatch { expected: dims, actual: mask.dims() });
            }
            let values = mask.as_u8().ok_or(LabelError::NonBinaryMask { class })?;
            for (voxel, (&m, label)) in values.iter().zip(labels.iter_mut()).enumerate() {
                match m {
                    0 => {}
                    1 if *label == 0 => *label = class.get(),
                    1 => {
                        return Err(LabelError::MaskConflict { voxel, first: ClassId(*label), second: class });
                    }
                    _ => return Err(LabelError::NonBinaryMask { class }),
                }
            }
        }
        let grid = VoxelGrid::new(dims, first.spacing(), VoxelData::U8(labels)).expect("same shape as masks");
        Ok(LabelGrid(grid))
    }
}

impl TryFrom<VoxelGrid> for LabelGrid {
    type Error = LabelError;
    fn try_from(grid: VoxelGrid) -> Result<Self, Self::Error> {
        LabelGrid::new(grid)
    }
}
