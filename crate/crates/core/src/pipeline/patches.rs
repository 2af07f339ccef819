use fusionseg_nn::Tensor5;
use rand::Rng;

use super::{Case, PipelineError, Result, TrainConfig};
use crate::volume::Volume;

/// A batch of patches: `(B, C, D, H, W)` inputs and one `(B, 1, D, H, W)` target per head.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: Tensor5<f32>,
    pub targets: [Tensor5<f32>; 3],
    /// Sampled patch centers (x, y, z) on the case grid.
    pub centers: Vec<[usize; 3]>,
    /// Patch start indices after clamping into the grid.
    pub starts: Vec<[usize; 3]>,
}

/// A case with its targets and foreground voxel list precomputed.
pub(crate) struct PatchSource<'a> {
    case: &'a Case,
    targets: [Volume; 3],
    foreground: Vec<usize>,
}

impl<'a> PatchSource<'a> {
    pub(crate) fn new(case: &'a Case) -> Result<Self> {
        case.check()?;
        if case.grid().is_empty() {
            return Err(PipelineError::EmptyVolume(case.study_id.clone()));
        }
        let targets = case.targets()?;
        // CsPCa voxels, else any cancer, else gland.
        let foreground = targets
            .iter()
            .rev()
            .map(|t| {
                t.data()
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v > 0.5)
                    .map(|(i, _)| i)
                    .collect::<Vec<_>>()
            })
            .find(|v| !v.is_empty())
            .unwrap_or_default();
        Ok(Self { case, targets, foreground })
    }

    pub(crate) fn channels(&self) -> usize {
        self.case.channels.len()
    }

    fn draw_center(&self, fg_oversample: f64, rng: &mut impl Rng) -> [usize; 3] {
        let grid = self.case.grid();
        let use_fg = rng.random::<f64>() < fg_oversample;
        if use_fg && !self.foreground.is_empty() {
            let i = self.foreground[rng.random_range(0..self.foreground.len())];
            return grid.coords(i);
        }
        let d = grid.dims();
        [rng.random_range(0..d[0]), rng.random_range(0..d[1]), rng.random_range(0..d[2])]
    }

    /// Copy the patch starting at `start` into batch slot `b`, zero beyond the grid.
    fn fill(&self, batch: &mut Batch, b: usize, start: [usize; 3], patch: [usize; 3]) {
        let dims = self.case.grid().dims();
        let [px, py, pz] = patch;
        let plane = px * py * pz;
        let c_in = self.channels();
        let write = |dst: &mut [f32], off: usize, src: &Volume| {
            let data = src.data();
            for z in 0..pz {
                let sz = start[2] + z;
                for y in 0..py {
                    let sy = start[1] + y;
                    let row = off + (z * py + y) * px;
                    if sz >= dims[2] || sy >= dims[1] {
                        dst[row..row + px].fill(0.0);
                        continue;
                    }
                    let base = (sz * dims[1] + sy) * dims[0];
                    let n = px.min(dims[0].saturating_sub(start[0]));
                    dst[row..row + n].copy_from_slice(&data[base + start[0]..base + start[0] + n]);
                    dst[row + n..row + px].fill(0.0);
                }
            }
        };
        for (c, vol) in self.case.channels.iter().enumerate() {
            write(batch.input.data_mut(), (b * c_in + c) * plane, vol);
        }
        for (t, vol) in batch.targets.iter_mut().zip(&self.targets) {
            write(t.data_mut(), b * plane, vol);
        }
    }

    pub(crate) fn draw_into(&self, batch: &mut Batch, b: usize, cfg: &TrainConfig, rng: &mut impl Rng) {
        let center = self.draw_center(cfg.fg_oversample, rng);
        let dims = self.case.grid().dims();
        let start: [usize; 3] = std::array::from_fn(|a| {
            let hi = dims[a].saturating_sub(cfg.patch_size[a]);
            center[a].saturating_sub(cfg.patch_size[a] / 2).min(hi)
        });
        self.fill(batch, b, start, cfg.patch_size);
        batch.centers[b] = center;
        batch.starts[b] = start;
    }
}

pub(crate) fn empty_batch(batch: usize, channels: usize, patch: [usize; 3]) -> Batch {
    let [px, py, pz] = patch;
    Batch {
        input: Tensor5::zeros([batch, channels, pz, py, px]),
        targets: std::array::from_fn(|_| Tensor5::zeros([batch, 1, pz, py, px])),
        centers: vec![[0; 3]; batch],
        starts: vec![[0; 3]; batch],
    }
}

/// `cfg.batch_size` patches from one case.
///
/// With probability `fg_oversample` a patch is centered on a uniformly
/// chosen CsPCa voxel (any-cancer, then gland, when absent); otherwise the
/// center is uniform over the grid. Starts are clamped into the grid and
/// regions beyond a grid smaller than the patch are zero.
pub fn sample_patches(case: &Case, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Batch> {
    sample_batch(&[case], cfg, rng)
}

/// One patch per batch slot, each from a uniformly chosen case.
pub fn sample_batch(cases: &[&Case], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Batch> {
    let sources: Vec<PatchSource> = cases.iter().map(|c| PatchSource::new(c)).collect::<Result<_>>()?;
    draw_batch(&sources, cfg, rng)
}

pub(crate) fn draw_batch(sources: &[PatchSource], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Batch> {
    let Some(first) = sources.first() else {
        return Err(PipelineError::EmptyVolume("no cases to sample from".into()));
    };
    if sources.iter().any(|s| s.channels() != first.channels()) {
        return Err(PipelineError::ShapeMismatch("cases disagree on channel count".into()));
    }
    let mut batch = empty_batch(cfg.batch_size, first.channels(), cfg.patch_size);
    for b in 0..cfg.batch_size {
        let src = if sources.len() == 1 { first } else { &sources[rng.random_range(0..sources.len())] };
        src.draw_into(&mut batch, b, cfg, rng);
    }
    Ok(batch)
}

fn flip_tensor(t: &mut Tensor5<f32>, b: usize, axes: [bool; 3]) {
    let [_, c, d, h, w] = t.shape();
    let plane = d * h * w;
    let data = t.data_mut();
    for ch in 0..c {
        let off = (b * c + ch) * plane;
        let src = data[off..off + plane].to_vec();
        for z in 0..d {
            let sz = if axes[2] { d - 1 - z } else { z };
            for y in 0..h {
                let sy = if axes[1] { h - 1 - y } else { y };
                for x in 0..w {
                    let sx = if axes[0] { w - 1 - x } else { x };
                    data[off + (z * h + y) * w + x] = src[(sz * h + sy) * w + sx];
                }
            }
        }
    }
}

/// Mirror sample `b` of inputs and targets along each axis (x, y, z) flagged in `flips[b]`.
pub fn flip_batch(batch: &mut Batch, flips: &[[bool; 3]]) {
    for (b, axes) in flips.iter().enumerate().take(batch.input.batch()) {
        if !axes.iter().any(|&f| f) {
            continue;
        }
        flip_tensor(&mut batch.input, b, *axes);
        for t in batch.targets.iter_mut() {
            flip_tensor(t, b, *axes);
        }
    }
}

/// Random flips: each enabled axis of each sample flips with `probability`.
/// One draw is made per enabled axis and sample regardless of outcome.
pub fn augment_flip(batch: &mut Batch, axes: [bool; 3], probability: f64, rng: &mut impl Rng) -> Vec<[bool; 3]> {
    let flips: Vec<[bool; 3]> = (0..batch.input.batch())
        .map(|_| std::array::from_fn(|a| axes[a] && rng.random::<f64>() < probability))
        .collect();
    flip_batch(batch, &flips);
    flips
}
