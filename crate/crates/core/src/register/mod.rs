//! Multi-resolution intensity-based affine registration (NCC or MSE) with
//! central-difference parameter gradients, and transform application.

mod params;

pub use params::{corner_landmark_error, AffineParams};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{InterpKind, PreprocessError, Sampler};
use crate::volume::{Affine3, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum RegisterError {
    #[error("initial overlap is {0:.1}% of the fixed volume; at least 10% is required")]
    NoOverlap(f64),
    #[error("an image has (near-)zero variance inside the overlap")]
    DegenerateVariance,
    #[error("invalid registration config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

pub type Result<T, E = RegisterError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Ncc,
    Mse,
}

/// Finite-difference steps per parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepSizes {
    pub rotation: f64,
    pub translation: f64,
    pub scale: f64,
    pub shear: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        Self {
            rotation: 1e-3,
            translation: 1e-1,
            scale: 1e-3,
            shear: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub pyramid_levels: usize,
    pub metric: Metric,
    pub max_iters: usize,
    pub steps: StepSizes,
    pub convergence_tol: f64,
    /// Fixed-image voxels sampled per level (a seeded subset when the level
    /// has more).
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            metric: Metric::Ncc,
            max_iters: 200,
            steps: StepSizes::default(),
            convergence_tol: 1e-6,
            max_samples: 60_000,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 || self.max_iters == 0 || self.max_samples < 16 {
            return Err(RegisterError::InvalidConfig(
                "pyramid_levels, max_iters must be ≥ 1 and max_samples ≥ 16".into(),
            ));
        }
        let s = &self.steps;
        for v in [s.rotation, s.translation, s.scale, s.shear, self.convergence_tol] {
            if !(v.is_finite() && v > 0.0) {
                return Err(RegisterError::InvalidConfig(format!("non-positive step or tolerance {v}")));
            }
        }
        Ok(())
    }
}

/// Pearson correlation of `a` and `b` over voxels where `mask > 0.5` (all
/// voxels when absent).
pub fn ncc(a: &Volume, b: &Volume, mask: Option<&Volume>) -> Result<f64> {
    a.check_same_grid(b, "ncc")?;
    if let Some(m) = mask {
        a.check_same_grid(m, "ncc mask")?;
    }
    let pairs = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m.data()[*i] > 0.5))
        .map(|(_, (&x, &y))| (x as f64, y as f64));
    pearson(pairs).ok_or(RegisterError::DegenerateVariance)
}

fn pearson(pairs: impl Iterator<Item = (f64, f64)>) -> Option<f64> {
    let (mut n, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (x, y) in pairs {
        n += 1.0;
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    if n < 2.0 {
        return None;
    }
    let vx = sxx - sx * sx / n;
    let vy = syy - sy * sy / n;
    if vx <= 1e-12 * n || vy <= 1e-12 * n {
        return None;
    }
    Some(((sxy - sx * sy / n) / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Resample `moving` onto `ref_grid`: output voxel `q` reads `moving` at
/// `invert(t)(q)`, with clamp-to-edge outside the moving grid.
pub fn apply_transform(moving: &Volume, t: &Affine3, ref_grid: &Volume, kind: InterpKind) -> Result<Volume> {
    let inv = t.invert()?;
    let sampler = Sampler::new(moving, kind)?;
    let to_index = world_to_index(moving).compose(&inv).compose(&index_to_world(ref_grid));
    let [nx, ny, nz] = ref_grid.dims();
    let mut data = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let idx = to_index.apply([x as f64, y as f64, z as f64]);
                data.push(sampler.at(idx) as f32);
            }
        }
    }
    let mut out = ref_grid.with_data(data)?;
    out.set_tag(ref_grid.tag());
    Ok(out)
}

pub(crate) fn index_to_world(v: &Volume) -> Affine3 {
    let s = v.spacing();
    Affine3::from_parts([[s[0], 0.0, 0.0], [0.0, s[1], 0.0], [0.0, 0.0, s[2]]], v.origin())
}

pub(crate) fn world_to_index(v: &Volume) -> Affine3 {
    index_to_world(v).invert().expect("spacing is positive")
}

/// Halve resolution by averaging 2-voxel blocks along every axis with at least 8 voxels.
fn downsample(v: &Volume) -> Result<Volume> {
    let dims = v.dims();
    let f: [usize; 3] = std::array::from_fn(|a| if dims[a] >= 8 { 2 } else { 1 });
    if f == [1, 1, 1] {
        return Ok(v.clone());
    }
    let od: [usize; 3] = std::array::from_fn(|a| dims[a] / f[a]);
    let mut data = Vec::with_capacity(od.iter().product());
    for z in 0..od[2] {
        for y in 0..od[1] {
            for x in 0..od[0] {
                let mut s = 0.0f64;
                for dz in 0..f[2] {
                    for dy in 0..f[1] {
                        for dx in 0..f[0] {
                            s += v.get(x * f[0] + dx, y * f[1] + dy, z * f[2] + dz) as f64;
                        }
                    }
                }
                data.push((s / (f[0] * f[1] * f[2]) as f64) as f32);
            }
        }
    }
    let sp = v.spacing();
    let o = v.origin();
    // Block centers: first block spans voxels 0..f, centered at (f-1)/2.
    let spacing: [f64; 3] = std::array::from_fn(|a| sp[a] * f[a] as f64);
    let origin: [f64; 3] = std::array::from_fn(|a| o[a] + sp[a] * (f[a] as f64 - 1.0) / 2.0);
    Ok(Volume::new(od, spacing, origin, data, v.tag())?)
}

/// Separable Gaussian blur with per-axis sigma in mm (clamp-to-edge).
fn gaussian_blur(v: &Volume, sigma_mm: [f64; 3]) -> Result<Volume> {
    let dims = v.dims();
    let sp = v.spacing();
    let stride = [1, dims[0], dims[0] * dims[1]];
    let mut cur: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    for a in 0..3 {
        let s = sigma_mm[a] / sp[a];
        if s < 0.1 || dims[a] < 2 {
            continue;
        }
        let r = (3.0 * s).ceil() as isize;
        let w: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * s * s)).exp()).collect();
        let wsum: f64 = w.iter().sum();
        let n = dims[a] as isize;
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / stride[a]) % dims[a]) as isize;
            let base = i - pos as usize * stride[a];
            let mut acc = 0.0;
            for (j, wk) in w.iter().enumerate() {
                let q = (pos + j as isize - r).clamp(0, n - 1) as usize;
                acc += wk * cur[base + q * stride[a]];
            }
            *out = acc / wsum;
        }
        cur = next;
    }
    Ok(v.with_data(cur.into_iter().map(|x| x as f32).collect())?)
}

/// Blur that brings `fixed` to the resolution of `moving` along each axis.
fn match_resolution(fixed: &Volume, moving: &Volume) -> Result<Volume> {
    let (fs, ms) = (fixed.spacing(), moving.spacing());
    let sigma: [f64; 3] = std::array::from_fn(|a| 0.5 * (ms[a] * ms[a] - fs[a] * fs[a]).max(0.0).sqrt());
    gaussian_blur(fixed, sigma)
}

/// One pyramid level: fixed sample positions/intensities and the moving image.
struct Level<'a> {
    points: Vec<[f64; 3]>,
    values: Vec<f64>,
    moving: &'a Volume,
    world_to_index: Affine3,
    metric: Metric,
}

/// Trilinear lookup for an index already known to lie inside the grid.
#[inline]
fn trilinear_inside(data: &[f32], dims: [usize; 3], idx: [f64; 3]) -> f64 {
    let fx = idx[0].floor();
    let fy = idx[1].floor();
    let fz = idx[2].floor();
    let (x0, y0, z0) = (fx as usize, fy as usize, fz as usize);
    let (tx, ty, tz) = (idx[0] - fx, idx[1] - fy, idx[2] - fz);
    let dx = usize::from(x0 + 1 < dims[0]);
    let dy = if y0 + 1 < dims[1] { dims[0] } else { 0 };
    let dz = if z0 + 1 < dims[2] { dims[0] * dims[1] } else { 0 };
    let b = (z0 * dims[1] + y0) * dims[0] + x0;
    let v = |o: usize| data[b + o] as f64;
    let c00 = v(0) + tx * (v(dx) - v(0));
    let c10 = v(dy) + tx * (v(dy + dx) - v(dy));
    let c01 = v(dz) + tx * (v(dz + dx) - v(dz));
    let c11 = v(dz + dy) + tx * (v(dz + dy + dx) - v(dz + dy));
    let c0 = c00 + ty * (c10 - c00);
    let c1 = c01 + ty * (c11 - c01);
    c0 + tz * (c1 - c0)
}

impl Level<'_> {
    /// Similarity (higher is better) and the overlap fraction.
    fn evaluate(&self, t: &Affine3) -> (Option<f64>, f64) {
        let Ok(inv) = t.invert() else {
            return (None, 0.0);
        };
        let map = self.world_to_index.compose(&inv);
        let dims = self.moving.dims();
        let data = self.moving.data();
        let lim: [f64; 3] = std::array::from_fn(|a| (dims[a] - 1) as f64);
        let mut inside = 0usize;
        let (mut n, mut sx, mut sy, mut sxx, mut syy, mut sxy, mut sse) =
            (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for (p, &fv) in self.points.iter().zip(&self.values) {
            let idx = map.apply(*p);
            if (0..3).any(|a| idx[a] < 0.0 || idx[a] > lim[a]) {
                continue;
            }
            inside += 1;
            let mv = trilinear_inside(data, dims, idx);
            n += 1.0;
            sx += fv;
            sy += mv;
            sxx += fv * fv;
            syy += mv * mv;
            sxy += fv * mv;
            sse += (fv - mv) * (fv - mv);
        }
        let frac = inside as f64 / self.points.len().max(1) as f64;
        if n < 2.0 {
            return (None, frac);
        }
        let score = match self.metric {
            Metric::Ncc => {
                let vx = sxx - sx * sx / n;
                let vy = syy - sy * sy / n;
                if vx <= 1e-12 * n || vy <= 1e-12 * n {
                    return (None, frac);
                }
                (sxy - sx * sy / n) / (vx * vy).sqrt()
            }
            Metric::Mse => -sse / n,
        };
        (Some(score), frac)
    }
}

/// Register `moving` to `fixed`, returning the physical-space transform `T`
/// (moving → fixed) such that `apply_transform(moving, T, fixed)` aligns with `fixed`.
pub fn register_affine(moving: &Volume, fixed: &Volume, cfg: &RegistrationConfig) -> Result<Affine3> {
    register_affine_from(moving, fixed, cfg, AffineParams::default())
}

/// [`register_affine`] starting from `init`, parameterized about the fixed grid center.
pub fn register_affine_from(
    moving: &Volume,
    fixed: &Volume,
    cfg: &RegistrationConfig,
    init: AffineParams,
) -> Result<Affine3> {
    cfg.validate()?;
    let center = fixed.center();
    let radius = {
        let e = fixed.extent();
        (0.5 * (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()).max(1.0)
    };
    let mut fixed_pyr = vec![fixed.clone()];
    let mut moving_pyr = vec![moving.clone()];
    for _ in 1..cfg.pyramid_levels {
        let f = downsample(fixed_pyr.last().expect("non-empty"))?;
        let m = downsample(moving_pyr.last().expect("non-empty"))?;
        fixed_pyr.push(f);
        moving_pyr.push(m);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    for level in (0..cfg.pyramid_levels).rev() {
        let fv = &match_resolution(&fixed_pyr[level], &moving_pyr[level])?;
        let n = fv.len();
        let chosen: Vec<usize> = if n > cfg.max_samples {
            let mut idx = sample(&mut rng, n, cfg.max_samples).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..n).collect()
        };
        let lvl = Level {
            points: chosen
                .iter()
                .map(|&i| fv.voxel_to_world(fv.coords(i).map(|c| c as f64)))
                .collect(),
            values: chosen.iter().map(|&i| fv.data()[i] as f64).collect(),
            moving: &moving_pyr[level],
            world_to_index: world_to_index(&moving_pyr[level]),
            metric: cfg.metric,
        };
        if level + 1 == cfg.pyramid_levels {
            let (score, frac) = lvl.evaluate(&params.to_affine(center));
            if frac < 0.1 {
                return Err(RegisterError::NoOverlap(100.0 * frac));
            }
            if score.is_none() {
                return Err(RegisterError::DegenerateVariance);
            }
        }
        params = optimize_level(&lvl, params, center, radius, cfg);
    }
    Ok(params.to_affine(center))
}

/// Quasi-Newton (BFGS) gradient ascent in displacement-normalized
/// coordinates with a monotone backtracking line search.
fn optimize_level(
    lvl: &Level<'_>,
    start: AffineParams,
    center: [f64; 3],
    radius: f64,
    cfg: &RegistrationConfig,
) -> AffineParams {
    const N: usize = 12;
    let fd = AffineParams::fd_steps(&cfg.steps);
    // Parameter change that moves a point at `radius` by about 1 mm.
    let unit = AffineParams::unit_scales(radius);
    let score_of = |p: &AffineParams| lvl.evaluate(&p.to_affine(center)).0.unwrap_or(f64::NEG_INFINITY);
    let gradient = |p: &AffineParams| -> [f64; N] {
        std::array::from_fn(|k| {
            let mut hi = *p;
            let mut lo = *p;
            hi.v[k] += fd[k];
            lo.v[k] -= fd[k];
            let (fh, fl) = (score_of(&hi), score_of(&lo));
            if fh.is_finite() && fl.is_finite() {
                // d score / d (normalized coordinate)
                (fh - fl) / (2.0 * fd[k]) * unit[k]
            } else {
                0.0
            }
        })
    };
    let identity = || -> [[f64; N]; N] { std::array::from_fn(|r| std::array::from_fn(|c| f64::from(u8::from(r == c)))) };
    let mut p = start;
    let mut best = score_of(&p);
    if !best.is_finite() {
        return p;
    }
    let mut g = gradient(&p);
    // Inverse Hessian approximation of the negated score.
    let mut h = identity();
    let mut trust = 2.0; // mm
    let mut stalls = 0;
    for _ in 0..cfg.max_iters {
        let mut dir: [f64; N] = std::array::from_fn(|r| (0..N).map(|c| h[r][c] * g[c]).sum());
        if dir.iter().zip(&g).map(|(d, gk)| d * gk).sum::<f64>() <= 0.0 {
            h = identity();
            dir = g;
        }
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            break;
        }
        // First try the full quasi-Newton step capped by the trust length.
        let mut step = norm.min(trust);
        let mut accepted = None;
        while step > 1e-3 {
            let mut q = p;
            for k in 0..N {
                q.v[k] += step * dir[k] / norm * unit[k];
            }
            let sc = score_of(&q);
            if sc > best {
                accepted = Some((q, sc));
                break;
            }
            step *= 0.5;
        }
        let Some((q, sc)) = accepted else {
            if h == identity() {
                break;
            }
            h = identity();
            continue;
        };
        let gain = sc - best;
        let gq = gradient(&q);
        let sv: [f64; N] = std::array::from_fn(|k| (q.v[k] - p.v[k]) / unit[k]);
        // Curvature pair for the negated score.
        let yv: [f64; N] = std::array::from_fn(|k| g[k] - gq[k]);
        let sy: f64 = sv.iter().zip(&yv).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            let hy: [f64; N] = std::array::from_fn(|r| (0..N).map(|c| h[r][c] * yv[c]).sum());
            let yhy: f64 = yv.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for r in 0..N {
                for c in 0..N {
                    h[r][c] += (sy + yhy) * sv[r] * sv[c] / (sy * sy) - (hy[r] * sv[c] + sv[r] * hy[c]) / sy;
                }
            }
        }
        p = q;
        best = sc;
        g = gq;
        trust = (step * 2.0).max(0.05);
        if gain < cfg.convergence_tol {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::SpaceTag;

    #[test]
    fn ncc_examples() {
        let a = Volume::new([4, 1, 1], [1.0; 3], [0.0; 3], vec![1.0, 2.0, 3.0, 4.0], SpaceTag::Other).unwrap();
        let b = a.with_data(vec![1.0, 2.0, 4.0, 3.0]).unwrap();
        assert!((ncc(&a, &b, None).unwrap() - 0.8).abs() < 1e-12);
        assert!((ncc(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.map(|v| -v).unwrap();
        assert!((ncc(&a, &neg, None).unwrap() + 1.0).abs() < 1e-12);
        let c = a.map(|_| 2.0).unwrap();
        assert!(matches!(ncc(&a, &c, None), Err(RegisterError::DegenerateVariance)));
    }

    #[test]
    fn downsample_preserves_physical_centre() {
        let v = Volume::zeros([8, 8, 4], [0.5, 0.5, 3.0], [1.0, 2.0, 3.0], SpaceTag::Other).unwrap();
        let d = downsample(&v).unwrap();
        assert_eq!(d.dims(), [4, 4, 4]);
        let c0 = v.center();
        let c1 = d.center();
        for a in 0..3 {
            assert!((c0[a] - c1[a]).abs() < 1e-12);
        }
    }
}
