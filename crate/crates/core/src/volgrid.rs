//! Dense voxel grids and a bit-exact codec for a NIfTI-1 subset.
//!
//! Memory layout is row-major with x fastest: the voxel at `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`. Every module in the crate uses this convention.
//!
//! The on-disk format is single-file, uncompressed, little-endian NIfTI-1
//! (`n+1\0` magic, 348-byte header, 4 zero extension bytes, data at offset 352)
//! restricted to `uint8` and `float32` voxels. Orientation matrices are not
//! written; only voxel spacing survives a round trip.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelspace::ClassId;

/// Size of the NIfTI-1 header proper.
pub const HEADER_SIZE: usize = 348;
/// Offset of the voxel data in files produced by [`write_volume`].
pub const DATA_OFFSET: usize = 352;
/// Largest extent along one axis; NIfTI-1 stores dims as `i16`.
pub const MAX_EXTENT: usize = i16::MAX as usize;

const MAGIC: &[u8; 4] = b"n+1\0";
const NIFTI_UNITS_MM: u8 = 2;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Error)]
pub enum VolError {
    #[error("header truncated: {len} bytes, need {HEADER_SIZE}")]
    TruncatedHeader { len: usize },
    #[error("bad magic {0:?}, expected \"n+1\\0\"")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0} (only 2 = uint8 and 16 = float32)")]
    UnsupportedDtype(i16),
    #[error("unsupported rank {0}, only 3-D volumes are accepted")]
    UnsupportedRank(i16),
    #[error("voxel data too short: need {expected} bytes after offset, found {actual}")]
    DataShorterThanDims { expected: usize, actual: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("invalid dims {0:?}: every extent must be in 1..={MAX_EXTENT}")]
    InvalidDims([usize; 3]),
    #[error("invalid spacing {0:?}: every component must be finite and > 0")]
    InvalidSpacing([f32; 3]),
    #[error("data length {actual} does not match dims product {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("axis {0} out of range, expected 0, 1 or 2")]
    BadAxis(usize),
    #[error("slice index {index} out of range for axis {axis} with extent {extent}")]
    IndexOutOfRange { axis: usize, index: usize, extent: usize },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = VolError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[serde(rename = "uint8")]
    U8,
    #[serde(rename = "float32")]
    F32,
}

impl Dtype {
    /// NIfTI-1 `datatype` code.
    pub const fn code(self) -> i16 {
        match self {
            Dtype::U8 => 2,
            Dtype::F32 => 16,
        }
    }

    pub const fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Dtype::U8),
            16 => Some(Dtype::F32),
            _ => None,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Dtype::U8 => "uint8",
            Dtype::F32 => "float32",
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Typed voxel storage.
///
/// Equality compares `f32` values by bit pattern, so NaN payloads and signed
/// zeros survive a codec round trip as "equal" only when they are identical.
#[derive(Debug, Clone)]
pub enum VoxelData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl PartialEq for VoxelData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (VoxelData::U8(a), VoxelData::U8(b)) => a == b,
            (VoxelData::F32(a), VoxelData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            VoxelData::U8(_) => Dtype::U8,
            VoxelData::F32(_) => Dtype::F32,
        }
    }

    /// Value at `i` widened to `f64`.
    pub fn get_f64(&self, i: usize) -> f64 {
        match self {
            VoxelData::U8(v) => f64::from(v[i]),
            VoxelData::F32(v) => f64::from(v[i]),
        }
    }

    /// Little-endian byte encoding.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            VoxelData::U8(v) => v.clone(),
            VoxelData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_le_bytes(dtype: Dtype, bytes: &[u8]) -> Option<Self> {
        if bytes.len() % dtype.size() != 0 {
            return None;
        }
        Some(match dtype {
            Dtype::U8 => VoxelData::U8(bytes.to_vec()),
            Dtype::F32 => VoxelData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        })
    }
}

/// A dense 3-D scalar field with voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: VoxelData,
}

fn check_dims(dims: [usize; 3]) -> Result<usize> {
    if dims.iter().any(|&d| d == 0 || d > MAX_EXTENT) {
        return Err(VolError::InvalidDims(dims));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(VolError::InvalidDims(dims))
}

fn check_spacing(spacing: [f32; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(VolError::InvalidSpacing(spacing))
    }
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: VoxelData) -> Result<Self> {
        let expected = check_dims(dims)?;
        check_spacing(spacing)?;
        if data.len() != expected {
            return Err(VolError::LengthMismatch { expected, actual: data.len() });
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn from_u8(dims: [usize; 3], spacing: [f32; 3], data: Vec<u8>) -> Result<Self> {
        Self::new(dims, spacing, VoxelData::U8(data))
    }

    pub fn from_f32(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(dims, spacing, VoxelData::F32(data))
    }

    pub fn zeros(dims: [usize; 3], spacing: [f32; 3], dtype: Dtype) -> Result<Self> {
        let n = check_dims(dims)?;
        let data = match dtype {
            Dtype::U8 => VoxelData::U8(vec![0; n]),
            Dtype::F32 => VoxelData::F32(vec![0.0; n]),
        };
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn into_data(self) -> VoxelData {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            VoxelData::U8(v) => Some(v),
            VoxelData::F32(_) => None,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            VoxelData::F32(v) => Some(v),
            VoxelData::U8(_) => None,
        }
    }

    /// Linear index of `(x, y, z)`.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Inverse of [`VoxelGrid::index`].
    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// Physical volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().map(|&s| f64::from(s)).product()
    }

    pub fn same_shape(&self, other: &VoxelGrid) -> bool {
        self.dims == other.dims
    }

    /// The plane orthogonal to `axis` at `index`.
    ///
    /// The two remaining axes keep ascending order, the lower one running
    /// fastest: axis 2 yields an `nx` wide, `ny` tall plane.
    pub fn extract_slice(&self, axis: usize, index: usize) -> Result<Plane> {
        if axis > 2 {
            return Err(VolError::BadAxis(axis));
        }
        let extent = self.dims[axis];
        if index >= extent {
            return Err(VolError::IndexOutOfRange { axis, index, extent });
        }
        let [nx, ny, _] = self.dims;
        let (width, height) = match axis {
            0 => (ny, self.dims[2]),
            1 => (nx, self.dims[2]),
            _ => (nx, ny),
        };
        let source = |col: usize, row: usize| match axis {
            0 => self.index(index, col, row),
            1 => self.index(col, index, row),
            _ => self.index(col, row, index),
        };
        let positions = (0..height).flat_map(|row| (0..width).map(move |col| (col, row)));
        let data = match &self.data {
            VoxelData::U8(v) => VoxelData::U8(positions.map(|(c, r)| v[source(c, r)]).collect()),
            VoxelData::F32(v) => VoxelData::F32(positions.map(|(c, r)| v[source(c, r)]).collect()),
        };
        Ok(Plane { width, height, data })
    }
}

/// A 2-D row-major plane cut from a [`VoxelGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: VoxelData,
}

/// Header fields this codec understands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub dtype: Dtype,
    pub data_offset: usize,
}

fn le_i16(b: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([b[at], b[at + 1]])
}

fn le_i32(b: &[u8], at: usize) -> i32 {
    i32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn le_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parse and validate the 348-byte header at the start of `bytes`.
pub fn read_header(bytes: &[u8]) -> Result<VolumeHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(VolError::TruncatedHeader { len: bytes.len() });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[offsets::MAGIC..offsets::MAGIC + 4]);
    if &magic != MAGIC {
        return Err(VolError::BadMagic(magic));
    }
    let sizeof_hdr = le_i32(bytes, offsets::SIZEOF_HDR);
    if sizeof_hdr != HEADER_SIZE as i32 {
        let hint = if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 { " (big-endian file)" } else { "" };
        return Err(VolError::InvalidHeader(format!("sizeof_hdr = {sizeof_hdr}{hint}")));
    }
    let rank = le_i16(bytes, offsets::DIM);
    if rank != 3 {
        return Err(VolError::UnsupportedRank(rank));
    }
    let code = le_i16(bytes, offsets::DATATYPE);
    let dtype = Dtype::from_code(code).ok_or(VolError::UnsupportedDtype(code))?;
    let bitpix = le_i16(bytes, offsets::BITPIX);
    if bitpix as usize != dtype.size() * 8 {
        return Err(VolError::InvalidHeader(format!("bitpix {bitpix} does not match {dtype}")));
    }

    let mut dims = [0usize; 3];
    for (axis, d) in dims.iter_mut().enumerate() {
        let raw = le_i16(bytes, offsets::DIM + 2 * (axis + 1));
        if raw < 1 {
            return Err(VolError::InvalidHeader(format!("dim[{}] = {raw}", axis + 1)));
        }
        *d = raw as usize;
    }
    let mut spacing = [0f32; 3];
    for (axis, s) in spacing.iter_mut().enumerate() {
        *s = le_f32(bytes, offsets::PIXDIM + 4 * (axis + 1));
    }
    check_spacing(spacing).map_err(|_| VolError::InvalidHeader(format!("pixdim {spacing:?}")))?;

    let vox_offset = le_f32(bytes, offsets::VOX_OFFSET);
    if !vox_offset.is_finite() || vox_offset < DATA_OFFSET as f32 || vox_offset.fract() != 0.0 {
        return Err(VolError::InvalidHeader(format!("vox_offset {vox_offset}")));
    }
    let slope = le_f32(bytes, offsets::SCL_SLOPE);
    let inter = le_f32(bytes, offsets::SCL_INTER);
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        return Err(VolError::InvalidHeader(format!(
            "intensity scaling (scl_slope {slope}, scl_inter {inter}) is not supported"
        )));
    }
    Ok(VolumeHeader { dims, spacing, dtype, data_offset: vox_offset as usize })
}

/// Decode a single-file NIfTI-1 volume.
pub fn read_volume(bytes: &[u8]) -> Result<VoxelGrid> {
    let header = read_header(bytes)?;
    let count = check_dims(header.dims)?;
    let expected = count * header.dtype.size();
    let available = bytes.len().saturating_sub(header.data_offset);
    if available < expected {
        return Err(VolError::DataShorterThanDims { expected, actual: available });
    }
    let payload = &bytes[header.data_offset..header.data_offset + expected];
    let data = VoxelData::from_le_bytes(header.dtype, payload).expect("payload sized to dtype");
    VoxelGrid::new(header.dims, header.spacing, data)
}

/// Encode `grid` as canonical little-endian NIfTI-1. Identical grids always
/// produce identical bytes; header fields the codec does not use are zero.
pub fn write_volume(grid: &VoxelGrid) -> Vec<u8> {
    let dtype = grid.dtype();
    let mut out = vec![0u8; DATA_OFFSET + grid.len() * dtype.size()];
    let put_i16 = |out: &mut [u8], at: usize, v: i16| out[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |out: &mut [u8], at: usize, v: f32| out[at..at + 4].copy_from_slice(&v.to_le_bytes());

    out[offsets::SIZEOF_HDR..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let mut dim = [1i16; 8];
    dim[0] = 3;
    for axis in 0..3 {
        // extents are bounded by MAX_EXTENT at construction
        dim[axis + 1] = grid.dims[axis] as i16;
    }
    for (k, v) in dim.iter().enumerate() {
        put_i16(&mut out, offsets::DIM + 2 * k, *v);
    }
    put_i16(&mut out, offsets::DATATYPE, dtype.code());
    put_i16(&mut out, offsets::BITPIX, (dtype.size() * 8) as i16);
    put_f32(&mut out, offsets::PIXDIM, 1.0);
    for axis in 0..3 {
        put_f32(&mut out, offsets::PIXDIM + 4 * (axis + 1), grid.spacing[axis]);
    }
    put_f32(&mut out, offsets::VOX_OFFSET, DATA_OFFSET as f32);
    out[offsets::XYZT_UNITS] = NIFTI_UNITS_MM;
    out[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(MAGIC);

    match &grid.data {
        VoxelData::U8(v) => out[DATA_OFFSET..].copy_from_slice(v),
        VoxelData::F32(v) => {
            for (chunk, x) in out[DATA_OFFSET..].chunks_exact_mut(4).zip(v) {
                chunk.copy_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

pub fn read_volume_file(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| VolError::Io { path: path.to_owned(), source })?;
    read_volume(&bytes)
}

pub fn write_volume_file(path: impl AsRef<Path>, grid: &VoxelGrid) -> Result<()> {
    let path = path.as_ref();
    let io = |source| VolError::Io { path: path.to_owned(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, write_volume(grid)).map_err(io)
}

/// What a file in a [`VolumeManifest`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeRole {
    Image,
    Prediction,
    Label,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub volume: String,
    pub role: VolumeRole,
    pub path: PathBuf,
    /// Required for `prediction` and `attention` entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<ClassId>,
    /// Required for `prediction` entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<String>,
}

/// Sidecar JSON mapping logical volume ids to files on disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeManifest {
    pub entries: Vec<ManifestEntry>,
}

impl VolumeManifest {
    /// Load a manifest; relative paths are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| VolError::Io { path: path.to_owned(), source })?;
        let mut manifest: VolumeManifest =
            serde_json::from_str(&text).map_err(|source| VolError::Manifest { path: path.to_owned(), source })?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        for entry in &mut manifest.entries {
            if entry.path.is_relative() {
                entry.path = base.join(&entry.path);
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|source| VolError::Manifest { path: path.to_owned(), source })?;
        fs::write(path, text + "\n").map_err(|source| VolError::Io { path: path.to_owned(), source })
    }

    pub fn volumes(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.volume.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn find(&self, volume: &str, role: VolumeRole, class: Option<ClassId>) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.volume == volume && e.role == role && (class.is_none() || e.class == class))
    }

    pub fn by_role<'a>(&'a self, volume: &'a str, role: VolumeRole) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| e.volume == volume && e.role == role)
    }
}
