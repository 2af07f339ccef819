use fusionseg_nn::{Tensor5, UNetModel};
use serde::{Deserialize, Serialize};

use super::{PipelineError, PreparedStudy, Result, Setup};
use crate::preprocess::InterpKind;
use crate::register::apply_transform;
use crate::volume::{Affine3, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Tile size in voxels, (x, y, z).
    pub patch_size: [usize; 3],
    /// Fractional overlap of neighbouring tiles.
    pub overlap: f64,
    /// Gaussian blending sigma as a fraction of the tile size per axis.
    pub sigma_fraction: f64,
    /// Binarization threshold per head (gland, any cancer, CsPCa).
    pub thresholds: [f64; 3],
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            patch_size: [64, 64, 16],
            overlap: 0.5,
            sigma_fraction: 0.125,
            thresholds: [0.5; 3],
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.9).contains(&self.overlap) {
            return Err(PipelineError::InvalidConfig(format!("overlap {} is outside [0, 0.9]", self.overlap)));
        }
        if self.patch_size.contains(&0) || !(self.sigma_fraction > 0.0 && self.sigma_fraction.is_finite()) {
            return Err(PipelineError::InvalidConfig("patch size and sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Tile starts along one axis of length `n`: a regular lattice with step
/// `floor(p·(1 − overlap))`, plus a final tile flush with the end.
pub fn tile_starts(n: usize, p: usize, overlap: f64) -> Vec<usize> {
    if n <= p {
        return vec![0];
    }
    let step = ((p as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut starts: Vec<usize> = (0..).map(|k| k * step).take_while(|&s| s + p < n).collect();
    starts.push(n - p);
    starts.dedup();
    starts
}

fn gaussian_profile(p: usize, sigma: f64) -> Vec<f64> {
    let mid = (p as f64 - 1.0) / 2.0;
    (0..p).map(|i| (-(i as f64 - mid).powi(2) / (2.0 * sigma * sigma)).exp()).collect()
}

/// Tile the grid, run the model per tile and blend the three head maps with
/// a Gaussian weight centered on each tile. Regions of a tile beyond the
/// grid are fed as zeros.
pub fn sliding_window_infer(model: &UNetModel, channels: &[Volume], cfg: &InferenceConfig) -> Result<[Volume; 3]> {
    cfg.validate()?;
    let Some(grid) = channels.first() else {
        return Err(PipelineError::ShapeMismatch("no input channels".into()));
    };
    for c in &channels[1..] {
        c.check_same_grid(grid, "inference channels")?;
    }
    if channels.len() != model.config().in_channels {
        return Err(PipelineError::ShapeMismatch(format!(
            "model expects {} channels, got {}",
            model.config().in_channels,
            channels.len()
        )));
    }
    let [px, py, pz] = cfg.patch_size;
    model.config().check_patch([pz, py, px])?;
    let dims = grid.dims();
    let starts: [Vec<usize>; 3] = std::array::from_fn(|a| tile_starts(dims[a], cfg.patch_size[a], cfg.overlap));
    let prof: [Vec<f64>; 3] =
        std::array::from_fn(|a| gaussian_profile(cfg.patch_size[a], cfg.sigma_fraction * cfg.patch_size[a] as f64));
    let n = grid.len();
    let mut acc = [vec![0.0f64; n], vec![0.0f64; n], vec![0.0f64; n]];
    let mut wsum = vec![0.0f64; n];
    let plane = px * py * pz;
    let mut tile = Tensor5::zeros([1, channels.len(), pz, py, px]);
    for &sz in &starts[2] {
        for &sy in &starts[1] {
            for &sx in &starts[0] {
                let data = tile.data_mut();
                for (c, vol) in channels.iter().enumerate() {
                    let src = vol.data();
                    for z in 0..pz {
                        for y in 0..py {
                            for x in 0..px {
                                let (gx, gy, gz) = (sx + x, sy + y, sz + z);
                                data[c * plane + (z * py + y) * px + x] = if gx < dims[0] && gy < dims[1] && gz < dims[2] {
                                    src[(gz * dims[1] + gy) * dims[0] + gx]
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                }
                let heads = model.forward(&tile)?;
                for z in 0..pz.min(dims[2] - sz) {
                    for y in 0..py.min(dims[1] - sy) {
                        let wzy = prof[2][z] * prof[1][y];
                        for x in 0..px.min(dims[0] - sx) {
                            let w = wzy * prof[0][x];
                            let g = ((sz + z) * dims[1] + sy + y) * dims[0] + sx + x;
                            let t = (z * py + y) * px + x;
                            wsum[g] += w;
                            for (a, h) in acc.iter_mut().zip(&heads) {
                                a[g] += w * f64::from(h.data()[t]);
                            }
                        }
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(3);
    for a in acc {
        let v: Vec<f32> = a
            .iter()
            .zip(&wsum)
            .map(|(s, w)| if *w > 0.0 { (s / w).clamp(0.0, 1.0) as f32 } else { 0.0 })
            .collect();
        out.push(grid.with_data(v)?);
    }
    Ok(out.try_into().expect("three heads"))
}

/// Carry an MRI-space probability map to the TRUS grid (trilinear, clamped to [0, 1]).
pub fn project_prediction(prob: &Volume, t: &Affine3, trus_grid: &Volume) -> Result<Volume> {
    let v = apply_transform(prob, t, trus_grid, InterpKind::Trilinear)?;
    Ok(v.map(|p| p.clamp(0.0, 1.0))?)
}

/// Head probability maps of a prepared study on its TRUS grid; MRI-space
/// setups are projected through the study's transform.
pub fn predict_study(model: &UNetModel, study: &PreparedStudy, setup: Setup, cfg: &InferenceConfig) -> Result<[Volume; 3]> {
    let case = study.case(setup)?;
    let heads = sliding_window_infer(model, &case.channels, cfg)?;
    if !setup.in_mri_space() {
        return Ok(heads);
    }
    let grid = &study.trus_space.trus;
    let [a, b, c] = heads;
    Ok([
        project_prediction(&a, &study.mri_to_trus, grid)?,
        project_prediction(&b, &study.mri_to_trus, grid)?,
        project_prediction(&c, &study.mri_to_trus, grid)?,
    ])
}
