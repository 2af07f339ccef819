//! Axis-aligned physical-space volumes, affine geometry, NIfTI-1 I/O and
//! study manifests.
//!
//! Axis convention: x = left-right, y = anterior-posterior, z = base-apex.
//! Data is stored x-fastest.

mod affine;
mod manifest;
mod nifti;

pub use affine::Affine3;
pub use manifest::{
    load_manifest, load_study, save_manifest, MultimodalStudy, Split, StudyManifest,
};
pub use nifti::{nifti_read, nifti_write, NIFTI_HEADER_LEN, NIFTI_VOX_OFFSET};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("not a NIfTI-1 file (bad magic)")]
    BadMagic,
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensionality dim[0] = {0}")]
    UnsupportedDim(i16),
    #[error("oblique or rotated orientation is not supported")]
    UnsupportedOrientation,
    #[error("file is truncated: {0}")]
    Truncated(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("singular transform (|det| = {0:e})")]
    SingularTransform(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// Which acquisition space a volume lives in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpaceTag {
    Mri,
    Trus,
    #[default]
    Other,
}

/// A dense 3D scalar field on an axis-aligned grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f32>,
    tag: SpaceTag,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<f32>,
        tag: SpaceTag,
    ) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(VolumeError::Invalid(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if dims.contains(&0) {
            return Err(VolumeError::Invalid(format!("empty dims {dims:?}")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::Invalid(format!("bad spacing {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::Invalid(format!("bad origin {origin:?}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::Invalid("non-finite voxel value".into()));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            data,
            tag,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], tag: SpaceTag) -> Result<Self> {
        Self::new(dims, spacing, origin, vec![0.0; dims.iter().product()], tag)
    }

    /// Volume on the same grid as `self` with the given data.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.origin, data, self.tag)
    }

    /// Same grid, every voxel passed through `f`.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn tag(&self) -> SpaceTag {
        self.tag
    }

    pub fn set_tag(&mut self, tag: SpaceTag) {
        self.tag = tag;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    /// Inverse of [`Volume::index`].
    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let y = (i / self.dims[0]) % self.dims[1];
        let z = i / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Continuous voxel index of a physical point.
    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.origin[a]) / self.spacing[a])
    }

    /// Physical position of a continuous voxel index.
    pub fn voxel_to_world(&self, idx: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + idx[a] * self.spacing[a])
    }

    /// Physical extent `dims · spacing` per axis.
    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.dims[a] as f64 * self.spacing[a])
    }

    /// Physical position of the grid center (midpoint of the first and last voxel).
    pub fn center(&self) -> [f64; 3] {
        self.voxel_to_world(std::array::from_fn(|a| (self.dims[a] as f64 - 1.0) / 2.0))
    }

    /// True when dims, spacing and origin agree (spacing/origin within 1e-6).
    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() < 1e-6
                    && (self.origin[a] - other.origin[a]).abs() < 1e-6
            })
    }

    pub fn check_same_grid(&self, other: &Volume, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(VolumeError::GridMismatch(format!(
                "{what}: {:?}/{:?}/{:?} vs {:?}/{:?}/{:?}",
                self.dims, self.spacing, self.origin, other.dims, other.spacing, other.origin
            )))
        }
    }
}
