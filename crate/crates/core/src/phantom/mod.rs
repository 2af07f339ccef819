//! Deterministic synthetic MRI/TRUS studies with modality-exclusive lesion
//! visibility and a known MRI→TRUS affine.
//!
//! Anatomy is defined analytically in TRUS physical space. The TRUS-like
//! volume samples it directly; the MRI-like volumes sample it through the
//! hidden transform, averaging several points across each thick slice.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{
    nifti_write, save_manifest, Affine3, MultimodalStudy, SpaceTag, Split, StudyManifest, Volume,
    VolumeError,
};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    InvalidConfig(String),
    #[error("study {0} carries no phantom ground truth")]
    NotAPhantom(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = PhantomError> = std::result::Result<T, E>;

/// Which channels show a lesion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    MriOnly,
    TrusOnly,
    Both,
}

impl Visibility {
    pub fn in_trus(self) -> bool {
        matches!(self, Visibility::TrusOnly | Visibility::Both)
    }
    pub fn in_mri(self) -> bool {
        matches!(self, Visibility::MriOnly | Visibility::Both)
    }
}

/// Mean intensities of the three tissue classes in one channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueLevels {
    pub background: f64,
    pub gland: f64,
    pub lesion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Contrast {
    pub trus: TissueLevels,
    pub t2w: TissueLevels,
    pub adc: TissueLevels,
    pub dwi: TissueLevels,
}

impl Default for Contrast {
    fn default() -> Self {
        let l = |background, gland, lesion| TissueLevels { background, gland, lesion };
        Self {
            trus: l(0.6, 1.0, 0.2),
            t2w: l(0.5, 1.0, 0.4),
            adc: l(0.7, 1.0, 0.3),
            dwi: l(0.3, 0.5, 1.2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub seed: u64,
    pub n_studies: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// TRUS grid (x, y, z) voxels and spacing in mm.
    pub trus_dims: [usize; 3],
    pub trus_spacing: [f64; 3],
    pub mri_dims: [usize; 3],
    pub mri_spacing: [f64; 3],
    /// Points averaged across each MRI voxel along z (partial volume).
    pub mri_slice_samples: usize,
    /// Gland semi-axis ranges (x, y, z) in mm.
    pub gland_axes_mm: [[f64; 2]; 3],
    /// Relative amplitude of the smooth boundary perturbation.
    pub gland_perturbation: f64,
    pub gland_center_jitter_mm: f64,
    pub lesions_per_study: [usize; 2],
    pub lesion_radius_mm: [f64; 2],
    /// Lesion semi-axis ratios (y/x, z/x) ranges.
    pub lesion_aspect: [[f64; 2]; 2],
    /// Fractions (mri_only, trus_only, both).
    pub visibility_mix: [f64; 3],
    pub contrast: Contrast,
    /// Standard deviation of the multiplicative TRUS speckle.
    pub trus_speckle_sd: f64,
    pub mri_noise_sd: f64,
    pub max_rotation_deg: f64,
    pub max_translation_mm: f64,
    /// Plane waves in the smooth background texture shared by every channel,
    /// standing in for surrounding anatomy.
    pub texture_waves: usize,
    /// Wavelength range (mm) of the texture waves.
    pub texture_wavelength_mm: [f64; 2],
    /// Relative standard deviation of the background texture.
    pub texture_amplitude: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_studies: 40,
            val_fraction: 0.1,
            test_fraction: 0.3,
            trus_dims: [96, 96, 48],
            trus_spacing: [0.5, 0.5, 0.5],
            mri_dims: [128, 128, 12],
            mri_spacing: [0.5, 0.5, 3.0],
            mri_slice_samples: 6,
            gland_axes_mm: [[14.0, 17.0], [11.0, 14.0], [8.0, 10.0]],
            gland_perturbation: 0.05,
            gland_center_jitter_mm: 1.0,
            lesions_per_study: [0, 3],
            lesion_radius_mm: [3.0, 8.0],
            lesion_aspect: [[0.8, 1.2], [0.6, 0.9]],
            visibility_mix: [0.3, 0.3, 0.4],
            contrast: Contrast::default(),
            trus_speckle_sd: 0.1,
            mri_noise_sd: 0.08,
            max_rotation_deg: 10.0,
            max_translation_mm: 5.0,
            texture_waves: 32,
            texture_wavelength_mm: [4.0, 16.0],
            texture_amplitude: 0.5,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PhantomError::InvalidConfig(m));
        if self.n_studies == 0 {
            return bad("n_studies must be ≥ 1".into());
        }
        if !(0.0..=1.0).contains(&self.val_fraction)
            || !(0.0..=1.0).contains(&self.test_fraction)
            || self.val_fraction + self.test_fraction > 1.0
        {
            return bad("split fractions must lie in [0, 1] and sum to ≤ 1".into());
        }
        if self.trus_dims.iter().chain(&self.mri_dims).any(|&d| d < 2) {
            return bad("grid dims must be ≥ 2".into());
        }
        let positive = self
            .trus_spacing
            .iter()
            .chain(&self.mri_spacing)
            .all(|s| s.is_finite() && *s > 0.0);
        if !positive || self.mri_slice_samples == 0 {
            return bad("spacings and slice samples must be positive".into());
        }
        for r in self.gland_axes_mm.iter().chain(&[self.lesion_radius_mm, self.texture_wavelength_mm])
            .chain(&self.lesion_aspect)
        {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return bad(format!("range {r:?} must satisfy 0 < lo ≤ hi"));
            }
        }
        if self.lesions_per_study[0] > self.lesions_per_study[1] {
            return bad("lesions_per_study lo > hi".into());
        }
        let sum: f64 = self.visibility_mix.iter().sum();
        if self.visibility_mix.iter().any(|f| *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return bad(format!("visibility fractions {:?} must be ≥ 0 and sum to 1", self.visibility_mix));
        }
        let noise = [
            self.trus_speckle_sd,
            self.mri_noise_sd,
            self.gland_perturbation,
            self.gland_center_jitter_mm,
            self.max_rotation_deg,
            self.max_translation_mm,
            self.texture_amplitude,
        ];
        if noise.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("noise, jitter and transform bounds must be finite and ≥ 0".into());
        }
        if self.gland_perturbation >= 0.5 {
            return bad("gland_perturbation must be < 0.5".into());
        }
        Ok(())
    }

    /// Split tag of study `i` (train first, then val, then test).
    pub fn split_of(&self, i: usize) -> Split {
        let n_test = (self.test_fraction * self.n_studies as f64).round() as usize;
        let n_val = (self.val_fraction * self.n_studies as f64).round() as usize;
        let n_train = self.n_studies.saturating_sub(n_test + n_val);
        if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Ground-truth description of one synthetic lesion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionTruth {
    pub id: u32,
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
    pub gg: u8,
    pub visibility: Visibility,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub study_id: String,
    pub mri_to_trus: Affine3,
    pub gland_center_mm: [f64; 3],
    pub gland_axes_mm: [f64; 3],
    pub lesions: Vec<LesionTruth>,
}

#[derive(Clone, Debug)]
pub struct PhantomStudy {
    pub study: MultimodalStudy,
    pub truth: PhantomTruth,
}

#[derive(Clone, Debug)]
pub struct PhantomCohort {
    pub config: PhantomConfig,
    pub studies: Vec<PhantomStudy>,
}

impl PhantomCohort {
    pub fn ground_truth_transform(&self, study_id: &str) -> Result<Affine3> {
        self.studies
            .iter()
            .find(|s| s.study.study_id == study_id)
            .map(|s| s.truth.mri_to_trus)
            .ok_or_else(|| PhantomError::NotAPhantom(study_id.to_string()))
    }
}

/// Analytic gland: perturbed ellipsoid.
struct Gland {
    center: [f64; 3],
    axes: [f64; 3],
    /// (amplitude, frequency vector, phase) harmonic terms over the unit direction.
    harmonics: Vec<(f64, [f64; 3], f64)>,
}

impl Gland {
    /// Normalized radius: inside iff < 1.
    fn level(&self, p: [f64; 3]) -> f64 {
        let q: [f64; 3] = std::array::from_fn(|a| (p[a] - self.center[a]) / self.axes[a]);
        let r = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        if r == 0.0 {
            return 0.0;
        }
        let u = q.map(|c| c / r);
        let bump: f64 = self
            .harmonics
            .iter()
            .map(|(amp, f, ph)| amp * (f[0] * u[0] + f[1] * u[1] + f[2] * u[2] + ph).cos())
            .sum();
        r / (1.0 + bump)
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) < 1.0
    }
}

struct Lesion {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Lesion {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2)).sum::<f64>()
    }
    fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) < 1.0
    }
    fn max_axis(&self) -> f64 {
        self.axes.iter().copied().fold(0.0, f64::max)
    }
}

/// Multiplicative tissue texture `1 + A·sqrt(2/K)·Σ cos(w·p + φ)`.
struct Texture {
    waves: Vec<([f64; 3], f64)>,
    gain: f64,
}

impl Texture {
    fn factor(&self, p: [f64; 3]) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|(w, phase)| (w[0] * p[0] + w[1] * p[1] + w[2] * p[2] + phase).cos())
            .sum();
        (1.0 + self.gain * s).max(0.05)
    }
}

/// Tissue index at a TRUS-space point: 0 background, 1 gland, 2 + k lesion k.
fn tissue(gland: &Gland, lesions: &[Lesion], p: [f64; 3]) -> usize {
    if !gland.contains(p) {
        return 0;
    }
    lesions.iter().position(|l| l.contains(p)).map_or(1, |k| 2 + k)
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Rotation by `angle` about unit `axis` (Rodrigues).
fn axis_angle(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return v.map(|c| c / n);
        }
    }
}

/// Rigid MRI→TRUS transform about `center` with rotation magnitude
/// ≤ `max_rot_deg` and translation magnitude ≤ `max_t_mm`.
fn hidden_transform(rng: &mut ChaCha8Rng, center: [f64; 3], max_rot_deg: f64, max_t_mm: f64) -> Affine3 {
    let axis = random_unit(rng);
    let angle = rng.random::<f64>() * max_rot_deg.to_radians();
    let dir = random_unit(rng);
    let mag = rng.random::<f64>() * max_t_mm;
    if angle == 0.0 && mag == 0.0 {
        return Affine3::identity();
    }
    let r = axis_angle(axis, angle);
    let t: [f64; 3] = std::array::from_fn(|k| {
        center[k] + dir[k] * mag - (0..3).map(|j| r[k][j] * center[j]).sum::<f64>()
    });
    Affine3::from_parts(r, t)
}

/// Rank-based grade group: radius quantile within the configured range, 1–5.
fn grade_from_radius(r: f64, range: [f64; 2]) -> u8 {
    let span = (range[1] - range[0]).max(1e-9);
    let q = ((r - range[0]) / span).clamp(0.0, 1.0);
    (1 + ((q * 5.0).floor() as u8).min(4)).clamp(1, 5)
}

fn pick_visibility(rng: &mut ChaCha8Rng, mix: [f64; 3]) -> Visibility {
    let u: f64 = rng.random();
    if u < mix[0] {
        Visibility::MriOnly
    } else if u < mix[0] + mix[1] {
        Visibility::TrusOnly
    } else {
        Visibility::Both
    }
}

/// Lesion fully inside the gland (checked on its surface) and clear of others.
fn lesion_fits(gland: &Gland, others: &[Lesion], cand: &Lesion, margin_mm: f64) -> bool {
    for o in others {
        let d: f64 = (0..3).map(|a| (o.center[a] - cand.center[a]).powi(2)).sum::<f64>().sqrt();
        if d < o.max_axis() + cand.max_axis() + margin_mm {
            return false;
        }
    }
    // Fibonacci sphere over the lesion surface, slightly inflated.
    let n = 200;
    for i in 0..n {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let rho = (1.0 - z * z).sqrt();
        let phi = PI * (3.0 - 5.0f64.sqrt()) * i as f64;
        let u = [rho * phi.cos(), rho * phi.sin(), z];
        let p: [f64; 3] = std::array::from_fn(|a| cand.center[a] + u[a] * (cand.axes[a] + margin_mm));
        if !gland.contains(p) {
            return false;
        }
    }
    true
}

fn study_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Generate a single study; depends only on `(cfg.seed, index)`.
pub fn generate_study(cfg: &PhantomConfig, index: usize) -> Result<PhantomStudy> {
    cfg.validate()?;
    let mut rng = study_rng(cfg.seed, index);
    let study_id = format!("phantom_{index:03}");

    let trus_grid = Volume::zeros(cfg.trus_dims, cfg.trus_spacing, [0.0; 3], SpaceTag::Trus)?;
    let center_grid = trus_grid.center();
    // MRI grid co-centered with the TRUS grid.
    let mri_origin: [f64; 3] = std::array::from_fn(|a| {
        center_grid[a] - (cfg.mri_dims[a] as f64 - 1.0) / 2.0 * cfg.mri_spacing[a]
    });
    let mri_grid = Volume::zeros(cfg.mri_dims, cfg.mri_spacing, mri_origin, SpaceTag::Mri)?;

    let jitter = cfg.gland_center_jitter_mm;
    let gland_center: [f64; 3] = std::array::from_fn(|a| {
        center_grid[a] + if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 }
    });
    let axes: [f64; 3] = std::array::from_fn(|a| uniform(&mut rng, cfg.gland_axes_mm[a]));
    let harmonics = (0..4)
        .map(|_| {
            let amp = cfg.gland_perturbation * rng.random::<f64>() / 2.0;
            let dir = random_unit(&mut rng);
            let freq = rng.random_range(1.0..3.0);
            (amp, dir.map(|d| d * freq), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let gland = Gland {
        center: gland_center,
        axes,
        harmonics,
    };

    // Plane waves with isotropic directions and wavelengths in the configured range.
    let texture = Texture {
        waves: (0..cfg.texture_waves)
            .map(|_| {
                let dir: [f64; 3] = loop {
                    let v: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
                    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    if n > 1e-6 {
                        break v.map(|x| x / n);
                    }
                };
                let k = std::f64::consts::TAU / uniform(&mut rng, cfg.texture_wavelength_mm);
                (dir.map(|d| d * k), rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect(),
        gain: cfg.texture_amplitude * (2.0 / cfg.texture_waves.max(1) as f64).sqrt(),
    };

    let n_lesions = rng.random_range(cfg.lesions_per_study[0]..=cfg.lesions_per_study[1]);
    let mut lesions: Vec<Lesion> = Vec::new();
    let mut truths = Vec::new();
    for _ in 0..n_lesions {
        let mut radius = uniform(&mut rng, cfg.lesion_radius_mm);
        let ay = uniform(&mut rng, cfg.lesion_aspect[0]);
        let az = uniform(&mut rng, cfg.lesion_aspect[1]);
        let vis = pick_visibility(&mut rng, cfg.visibility_mix);
        let mut placed = None;
        'grow: for _shrink in 0..12 {
            let semi = [radius, radius * ay, radius * az];
            for _try in 0..200 {
                let c: [f64; 3] = std::array::from_fn(|a| {
                    gland.center[a] + rng.random_range(-1.0..1.0) * (gland.axes[a] - semi[a]).max(0.0)
                });
                let cand = Lesion { center: c, axes: semi };
                if lesion_fits(&gland, &lesions, &cand, 1.0) {
                    placed = Some(cand);
                    break 'grow;
                }
            }
            radius *= 0.9;
        }
        let Some(lesion) = placed else {
            continue;
        };
        let id = lesions.len() as u32 + 1;
        truths.push(LesionTruth {
            id,
            center_mm: lesion.center,
            semi_axes_mm: lesion.axes,
            gg: grade_from_radius(radius, cfg.lesion_radius_mm),
            visibility: vis,
        });
        lesions.push(lesion);
    }

    let transform = hidden_transform(&mut rng, center_grid, cfg.max_rotation_deg, cfg.max_translation_mm);
    let c = &cfg.contrast;
    let level_of = |levels: &TissueLevels, t: usize, in_channel: &dyn Fn(usize) -> bool| -> f64 {
        match t {
            0 => levels.background,
            1 => levels.gland,
            k if in_channel(k - 2) => levels.lesion,
            _ => levels.gland,
        }
    };

    // TRUS: tissue sampled at voxel centers with multiplicative speckle.
    let n_trus = trus_grid.len();
    let mut trus = Vec::with_capacity(n_trus);
    let mut gland_mask = Vec::with_capacity(n_trus);
    let mut labels = Vec::with_capacity(n_trus);
    let trus_vis = |k: usize| truths[k].visibility.in_trus();
    for i in 0..n_trus {
        let p = trus_grid.voxel_to_world(trus_grid.coords(i).map(|v| v as f64));
        let t = tissue(&gland, &lesions, p);
        let base = level_of(&c.trus, t, &trus_vis) * if t == 0 { texture.factor(p) } else { 1.0 };
        let speckle: f64 = rng.sample(StandardNormal);
        trus.push((base * (1.0 + cfg.trus_speckle_sd * speckle)) as f32);
        gland_mask.push(if t >= 1 { 1.0 } else { 0.0 });
        labels.push(if t >= 2 { truths[t - 2].id as f32 } else { 0.0 });
    }

    // MRI: tissue at T(p), averaged across the slice thickness, plus Gaussian noise.
    let n_mri = mri_grid.len();
    let mri_vis = |k: usize| truths[k].visibility.in_mri();
    let mut t2w = Vec::with_capacity(n_mri);
    let mut adc = Vec::with_capacity(n_mri);
    let mut dwi = Vec::with_capacity(n_mri);
    let ns = cfg.mri_slice_samples;
    let sz = cfg.mri_spacing[2];
    for i in 0..n_mri {
        let p = mri_grid.voxel_to_world(mri_grid.coords(i).map(|v| v as f64));
        let mut acc = [0.0f64; 3];
        for s in 0..ns {
            let dz = ((s as f64 + 0.5) / ns as f64 - 0.5) * sz;
            let q = transform.apply([p[0], p[1], p[2] + dz]);
            let t = tissue(&gland, &lesions, q);
            let f = if t == 0 { texture.factor(q) } else { 1.0 };
            acc[0] += level_of(&c.t2w, t, &mri_vis) * f;
            acc[1] += level_of(&c.adc, t, &mri_vis) * f;
            acc[2] += level_of(&c.dwi, t, &mri_vis) * f;
        }
        let mut noise = || cfg.mri_noise_sd * rng.sample::<f64, _>(StandardNormal);
        t2w.push((acc[0] / ns as f64 + noise()) as f32);
        adc.push((acc[1] / ns as f64 + noise()) as f32);
        dwi.push((acc[2] / ns as f64 + noise()) as f32);
    }

    let lesion_gg: BTreeMap<u32, u8> = truths.iter().map(|l| (l.id, l.gg)).collect();
    let study = MultimodalStudy {
        study_id: study_id.clone(),
        t2w: mri_grid.with_data(t2w)?,
        adc: mri_grid.with_data(adc)?,
        dwi: mri_grid.with_data(dwi)?,
        trus: trus_grid.with_data(trus)?,
        gland_mask: trus_grid.with_data(gland_mask)?,
        lesion_labels: trus_grid.with_data(labels)?,
        lesion_gg,
        mri_to_trus: None,
        split: cfg.split_of(index),
    };
    study.validate()?;
    Ok(PhantomStudy {
        study,
        truth: PhantomTruth {
            study_id,
            mri_to_trus: transform,
            gland_center_mm: gland.center,
            gland_axes_mm: gland.axes,
            lesions: truths,
        },
    })
}

/// Generate the whole cohort in index order.
pub fn generate_cohort(cfg: &PhantomConfig) -> Result<PhantomCohort> {
    cfg.validate()?;
    let studies = (0..cfg.n_studies)
        .map(|i| generate_study(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(PhantomCohort {
        config: cfg.clone(),
        studies,
    })
}

/// Path of the ground-truth transform written next to a study's volumes.
pub fn truth_path(dir: &Path, study_id: &str) -> PathBuf {
    dir.join(format!("{study_id}_truth.json"))
}

/// Write volumes, `manifest.json` and per-study truth files into `dir`.
/// Returns the manifest path.
pub fn write_cohort(cohort: &PhantomCohort, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(VolumeError::from)?;
    let mut entries = Vec::with_capacity(cohort.studies.len());
    for ps in &cohort.studies {
        let s = &ps.study;
        let file = |suffix: &str| dir.join(format!("{}_{suffix}.nii", s.study_id));
        for (vol, suffix) in [
            (&s.t2w, "t2w"),
            (&s.adc, "adc"),
            (&s.dwi, "dwi"),
            (&s.trus, "trus"),
            (&s.gland_mask, "gland"),
            (&s.lesion_labels, "lesions"),
        ] {
            nifti_write(vol, &file(suffix))?;
        }
        let truth = serde_json::to_string_pretty(&ps.truth)
            .map_err(|e| PhantomError::InvalidConfig(e.to_string()))?;
        std::fs::write(truth_path(dir, &s.study_id), truth + "\n").map_err(VolumeError::from)?;
        entries.push(StudyManifest {
            study_id: s.study_id.clone(),
            t2w: file("t2w"),
            adc: file("adc"),
            dwi: file("dwi"),
            trus: file("trus"),
            gland: file("gland"),
            lesions: file("lesions"),
            lesion_gg: s.lesion_gg.iter().map(|(k, v)| (k.to_string(), *v as i64)).collect(),
            mri_to_trus: None,
            split: s.split,
        });
    }
    let manifest = dir.join("manifest.json");
    save_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Read the ground-truth transform that [`write_cohort`] stored for a study.
pub fn ground_truth_transform(manifest: &StudyManifest) -> Result<Affine3> {
    let dir = manifest.trus.parent().unwrap_or(Path::new("."));
    let path = truth_path(dir, &manifest.study_id);
    let text = std::fs::read_to_string(&path).map_err(|_| PhantomError::NotAPhantom(manifest.study_id.clone()))?;
    let truth: PhantomTruth =
        serde_json::from_str(&text).map_err(|_| PhantomError::NotAPhantom(manifest.study_id.clone()))?;
    Ok(truth.mri_to_trus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grade_groups_follow_radius_quantiles() {
        let r = [3.0, 8.0];
        assert_eq!(grade_from_radius(3.0, r), 1);
        assert_eq!(grade_from_radius(4.5, r), 2);
        assert_eq!(grade_from_radius(7.99, r), 5);
        assert_eq!(grade_from_radius(8.0, r), 5);
    }

    #[test]
    fn axis_angle_is_orthonormal() {
        let r = axis_angle([0.0, 0.6, 0.8], 0.3);
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_bounds_give_identity() {
        let mut rng = study_rng(1, 0);
        assert_eq!(hidden_transform(&mut rng, [3.0, 4.0, 5.0], 0.0, 0.0), Affine3::identity());
    }
}
