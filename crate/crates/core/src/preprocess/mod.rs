//! Resampling, in-plane crop/pad and gland-referenced z-score normalization.

mod bspline;

pub use bspline::bspline_prefilter;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Volume, VolumeError};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("axis {axis} has length {len}; at least 2 samples are needed")]
    DegenerateAxis { axis: usize, len: usize },
    #[error("gland mask has {0} voxels; at least 2 are needed")]
    EmptyGland(usize),
    #[error("gland intensities are near-constant (std {0:e})")]
    DegenerateStd(f64),
    #[error("invalid preprocessing parameter: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpKind {
    Nearest,
    Trilinear,
    #[default]
    CubicBSpline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Target spacing of the MRI sequences (mm/voxel).
    pub mri_spacing: [f64; 3],
    /// Target spacing of the TRUS volume (mm/voxel).
    pub trus_spacing: [f64; 3],
    /// In-plane (x, y) crop/pad extent applied to the MRI sequences (mm).
    pub crop_extent_mm: [f64; 2],
    pub pad_value: f32,
    pub interp: InterpKind,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            mri_spacing: [0.5, 0.5, 3.0],
            trus_spacing: [0.5, 0.5, 0.5],
            crop_extent_mm: [128.0, 128.0],
            pad_value: 0.0,
            interp: InterpKind::CubicBSpline,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .mri_spacing
            .iter()
            .chain(&self.trus_spacing)
            .chain(&self.crop_extent_mm);
        for v in all {
            if !(v.is_finite() && *v > 0.0) {
                return Err(PreprocessError::InvalidConfig(format!("non-positive size {v}")));
            }
        }
        if !self.pad_value.is_finite() {
            return Err(PreprocessError::InvalidConfig("pad_value must be finite".into()));
        }
        Ok(())
    }
}

/// A volume prepared for repeated sampling with one interpolation kind:
/// B-spline sampling reads prefiltered coefficients.
pub struct Sampler<'a> {
    vol: std::borrow::Cow<'a, Volume>,
    kind: InterpKind,
}

impl<'a> Sampler<'a> {
    pub fn new(vol: &'a Volume, kind: InterpKind) -> Result<Self> {
        let vol = match kind {
            InterpKind::CubicBSpline => std::borrow::Cow::Owned(bspline_prefilter(vol)?),
            _ => std::borrow::Cow::Borrowed(vol),
        };
        Ok(Self { vol, kind })
    }

    pub fn grid(&self) -> &Volume {
        &self.vol
    }

    pub fn at(&self, idx: [f64; 3]) -> f64 {
        sample_at(&self.vol, idx, self.kind)
    }

    pub fn at_world(&self, p: [f64; 3]) -> f64 {
        self.at(self.vol.world_to_voxel(p))
    }
}

/// Round half away from zero.
#[inline]
fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// Interpolate at a continuous voxel index. Indices outside the grid are
/// clamped to the edge. For `CubicBSpline`, `vol` must hold prefiltered
/// coefficients (see [`bspline_prefilter`] or [`Sampler`]).
pub fn sample_at(vol: &Volume, idx: [f64; 3], kind: InterpKind) -> f64 {
    let dims = vol.dims();
    let clamped: [f64; 3] = std::array::from_fn(|a| idx[a].clamp(0.0, (dims[a] - 1) as f64));
    match kind {
        InterpKind::Nearest => {
            let i: [usize; 3] = std::array::from_fn(|a| round_half_away(clamped[a]) as usize);
            vol.get(i[0], i[1], i[2]) as f64
        }
        InterpKind::Trilinear => {
            let mut lo = [0usize; 3];
            let mut hi = [0usize; 3];
            let mut t = [0.0; 3];
            for a in 0..3 {
                let f = clamped[a].floor();
                lo[a] = f as usize;
                hi[a] = (lo[a] + 1).min(dims[a] - 1);
                t[a] = clamped[a] - f;
            }
            let mut sum = 0.0;
            for (cz, wz) in [(lo[2], 1.0 - t[2]), (hi[2], t[2])] {
                if wz == 0.0 {
                    continue;
                }
                for (cy, wy) in [(lo[1], 1.0 - t[1]), (hi[1], t[1])] {
                    if wy == 0.0 {
                        continue;
                    }
                    for (cx, wx) in [(lo[0], 1.0 - t[0]), (hi[0], t[0])] {
                        if wx != 0.0 {
                            sum += wx * wy * wz * vol.get(cx, cy, cz) as f64;
                        }
                    }
                }
            }
            sum
        }
        InterpKind::CubicBSpline => bspline::sample_bspline(vol, clamped),
    }
}

/// Resample onto a grid with the same origin and `target_spacing`; dims are
/// `ceil(extent / target)`.
pub fn resample_volume(vol: &Volume, target_spacing: [f64; 3], kind: InterpKind) -> Result<Volume> {
    if target_spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(PreprocessError::InvalidConfig(format!(
            "target spacing {target_spacing:?}"
        )));
    }
    let extent = vol.extent();
    // The small slack keeps exact multiples (e.g. 10 mm / 0.5 mm) from rounding up.
    let dims: [usize; 3] =
        std::array::from_fn(|a| ((extent[a] / target_spacing[a]) - 1e-6).ceil().max(1.0) as usize);
    let sampler = Sampler::new(vol, kind)?;
    let origin = vol.origin();
    let mut data = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [
                    origin[0] + x as f64 * target_spacing[0],
                    origin[1] + y as f64 * target_spacing[1],
                    origin[2] + z as f64 * target_spacing[2],
                ];
                data.push(sampler.at_world(p) as f32);
            }
        }
    }
    Ok(Volume::new(dims, target_spacing, origin, data, vol.tag())?)
}

/// Low-side offset of a centered window of `n_out` voxels in `n_in`:
/// positive crops, negative pads; odd remainders go to the high side.
fn window_start(n_in: usize, n_out: usize) -> isize {
    let diff = n_in as isize - n_out as isize;
    diff / 2
}

/// Center-crop or pad the x-y plane to `extent_mm`; z is untouched and voxel
/// physical positions are preserved.
pub fn center_crop_pad(vol: &Volume, extent_mm: [f64; 2], pad_value: f32) -> Result<Volume> {
    if extent_mm.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(PreprocessError::InvalidConfig(format!("crop extent {extent_mm:?}")));
    }
    let [nx, ny, nz] = vol.dims();
    let sp = vol.spacing();
    let ox = ((extent_mm[0] / sp[0]).round() as usize).max(1);
    let oy = ((extent_mm[1] / sp[1]).round() as usize).max(1);
    let sx = window_start(nx, ox);
    let sy = window_start(ny, oy);
    let mut data = Vec::with_capacity(ox * oy * nz);
    for z in 0..nz {
        for y in 0..oy {
            let iy = y as isize + sy;
            for x in 0..ox {
                let ix = x as isize + sx;
                let inside = (0..nx as isize).contains(&ix) && (0..ny as isize).contains(&iy);
                data.push(if inside { vol.get(ix as usize, iy as usize, z) } else { pad_value });
            }
        }
    }
    let o = vol.origin();
    let origin = [o[0] + sx as f64 * sp[0], o[1] + sy as f64 * sp[1], o[2]];
    Ok(Volume::new([ox, oy, nz], sp, origin, data, vol.tag())?)
}

/// Population mean and standard deviation over voxels where `mask > 0.5`.
pub fn masked_stats(vol: &Volume, mask: &Volume) -> Result<(f64, f64, usize)> {
    vol.check_same_grid(mask, "z-score mask")?;
    let mut n = 0usize;
    let mut sum = 0.0;
    for (&v, &m) in vol.data().iter().zip(mask.data()) {
        if m > 0.5 {
            n += 1;
            sum += v as f64;
        }
    }
    if n < 2 {
        return Err(PreprocessError::EmptyGland(n));
    }
    let mean = sum / n as f64;
    let var = vol
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m > 0.5)
        .map(|(&v, _)| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    Ok((mean, var.sqrt(), n))
}

/// `(v - μ) / σ` over all voxels with μ, σ the population statistics of the gland.
pub fn zscore_normalize(vol: &Volume, gland_mask: &Volume) -> Result<Volume> {
    let (mean, std, _) = masked_stats(vol, gland_mask)?;
    if std <= 1e-6 {
        return Err(PreprocessError::DegenerateStd(std));
    }
    Ok(vol.map(|v| ((v as f64 - mean) / std) as f32)?)
}
