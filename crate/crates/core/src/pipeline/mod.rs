//! Model setups, study preparation, patch sampling and augmentation, the
//! training loop, sliding-window inference and projection of MRI-space
//! predictions to TRUS space.

mod infer;
mod patches;
mod train;

pub use infer::{predict_study, project_prediction, sliding_window_infer, tile_starts, InferenceConfig};
pub use patches::{augment_flip, flip_batch, sample_batch, sample_patches, Batch};
pub use train::{train, write_loss_csv, LossRecord, TrainConfig, TrainOutcome};

use std::collections::BTreeMap;

use fusionseg_nn::NnError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{
    center_crop_pad, resample_volume, zscore_normalize, InterpKind, PreprocessConfig, PreprocessError,
};
use crate::register::{apply_transform, register_affine, RegisterError, RegistrationConfig};
use crate::volume::{Affine3, MultimodalStudy, Split, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("volume is empty: {0}")]
    EmptyVolume(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Register(#[from] RegisterError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Which sequences the model sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setup {
    #[serde(rename = "trus")]
    TrusOnly,
    #[serde(rename = "mri")]
    MriOnly,
    #[default]
    #[serde(rename = "multimodal")]
    Multimodal,
}

impl Setup {
    pub const ALL: [Setup; 3] = [Setup::TrusOnly, Setup::MriOnly, Setup::Multimodal];

    /// Input channel count: `[TRUS]`, `[T2w, ADC, DWI]`, `[TRUS, T2w, ADC, DWI]`.
    pub fn channels(self) -> usize {
        match self {
            Setup::TrusOnly => 1,
            Setup::MriOnly => 3,
            Setup::Multimodal => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Setup::TrusOnly => "trus",
            Setup::MriOnly => "mri",
            Setup::Multimodal => "multimodal",
        }
    }

    /// Whether the model runs on the MRI grid (predictions are projected afterwards).
    pub fn in_mri_space(self) -> bool {
        self == Setup::MriOnly
    }
}

impl std::str::FromStr for Setup {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "trus" => Ok(Setup::TrusOnly),
            "mri" => Ok(Setup::MriOnly),
            "multimodal" => Ok(Setup::Multimodal),
            other => Err(format!("unknown setup '{other}' (expected trus, mri or multimodal)")),
        }
    }
}

/// Input channels of `study` for `setup`, in the documented order.
///
/// Multimodal input needs the MRI sequences already on the TRUS grid.
pub fn assemble_input(study: &MultimodalStudy, setup: Setup) -> Result<Vec<Volume>> {
    let chans = match setup {
        Setup::TrusOnly => vec![study.trus.clone()],
        Setup::MriOnly => vec![study.t2w.clone(), study.adc.clone(), study.dwi.clone()],
        Setup::Multimodal => vec![study.trus.clone(), study.t2w.clone(), study.adc.clone(), study.dwi.clone()],
    };
    for c in &chans[1..] {
        c.check_same_grid(&chans[0], "input channels")?;
    }
    Ok(chans)
}

/// Binary targets for the three heads: gland, any cancer (GG ≥ 1), CsPCa (GG ≥ 2).
pub fn label_targets(gland: &Volume, labels: &Volume, gg: &BTreeMap<u32, u8>) -> Result<[Volume; 3]> {
    labels.check_same_grid(gland, "lesion labels vs gland")?;
    let grade = |l: f32| -> u8 {
        if l > 0.0 {
            gg.get(&(l.round() as u32)).copied().unwrap_or(0)
        } else {
            0
        }
    };
    let any = labels.map(|l| f32::from(u8::from(grade(l) >= 1)))?;
    let cs = labels.map(|l| f32::from(u8::from(grade(l) >= 2)))?;
    Ok([gland.map(|g| f32::from(u8::from(g > 0.5)))?, any, cs])
}

/// One training/inference unit: model inputs and the matching targets on one grid.
#[derive(Clone, Debug)]
pub struct Case {
    pub study_id: String,
    pub channels: Vec<Volume>,
    pub gland_mask: Volume,
    pub lesion_labels: Volume,
    pub lesion_gg: BTreeMap<u32, u8>,
}

impl Case {
    pub fn grid(&self) -> &Volume {
        &self.channels[0]
    }

    pub fn targets(&self) -> Result<[Volume; 3]> {
        label_targets(&self.gland_mask, &self.lesion_labels, &self.lesion_gg)
    }

    fn check(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(PipelineError::ShapeMismatch(format!("{}: no input channels", self.study_id)));
        }
        for c in &self.channels[1..] {
            c.check_same_grid(&self.channels[0], "input channels")?;
        }
        self.gland_mask.check_same_grid(self.grid(), "gland vs input")?;
        self.lesion_labels.check_same_grid(self.grid(), "labels vs input")?;
        Ok(())
    }
}

/// A study after preprocessing and registration, in both spaces.
#[derive(Clone, Debug)]
pub struct PreparedStudy {
    /// TRUS grid: TRUS plus the normalized MRI sequences projected through `mri_to_trus`.
    pub trus_space: MultimodalStudy,
    /// Normalized MRI sequences on the MRI grid.
    pub mri: [Volume; 3],
    /// Gland mask and lesion labels carried to the MRI grid through the inverse transform.
    pub mri_gland: Volume,
    pub mri_labels: Volume,
    pub mri_to_trus: Affine3,
}

impl PreparedStudy {
    pub fn study_id(&self) -> &str {
        &self.trus_space.study_id
    }

    pub fn split(&self) -> Split {
        self.trus_space.split
    }

    /// Model inputs and targets for `setup`, on the grid that setup runs on.
    pub fn case(&self, setup: Setup) -> Result<Case> {
        let s = &self.trus_space;
        let case = if setup.in_mri_space() {
            Case {
                study_id: s.study_id.clone(),
                channels: self.mri.to_vec(),
                gland_mask: self.mri_gland.clone(),
                lesion_labels: self.mri_labels.clone(),
                lesion_gg: s.lesion_gg.clone(),
            }
        } else {
            Case {
                study_id: s.study_id.clone(),
                channels: assemble_input(s, setup)?,
                gland_mask: s.gland_mask.clone(),
                lesion_labels: s.lesion_labels.clone(),
                lesion_gg: s.lesion_gg.clone(),
            }
        };
        case.check()?;
        Ok(case)
    }
}

/// Resample, crop/pad and register a raw study, normalize each sequence
/// against its gland, and project the MRI sequences to the TRUS grid.
///
/// A transform already present on the study is used as is; otherwise T2w is
/// registered to TRUS.
pub fn prepare_study(
    study: &MultimodalStudy,
    pre: &PreprocessConfig,
    reg: &RegistrationConfig,
) -> Result<PreparedStudy> {
    pre.validate()?;
    study.validate()?;
    let kind = pre.interp;
    let trus = resample_volume(&study.trus, pre.trus_spacing, kind)?;
    let gland = resample_volume(&study.gland_mask, pre.trus_spacing, InterpKind::Nearest)?;
    let labels = resample_volume(&study.lesion_labels, pre.trus_spacing, InterpKind::Nearest)?;
    let mri_raw: Vec<Volume> = [&study.t2w, &study.adc, &study.dwi]
        .into_iter()
        .map(|v| {
            let r = resample_volume(v, pre.mri_spacing, kind)?;
            center_crop_pad(&r, pre.crop_extent_mm, pre.pad_value)
        })
        .collect::<Result<_, PreprocessError>>()?;
    let t = match &study.mri_to_trus {
        Some(t) => *t,
        None => register_affine(&mri_raw[0], &trus, reg)?,
    };
    finish_study(study, pre, trus, gland, labels, mri_raw, t)
}

/// Resample like [`prepare_study`] and register T2w to TRUS.
pub fn register_study(study: &MultimodalStudy, pre: &PreprocessConfig, reg: &RegistrationConfig) -> Result<Affine3> {
    pre.validate()?;
    let trus = resample_volume(&study.trus, pre.trus_spacing, pre.interp)?;
    let t2w = resample_volume(&study.t2w, pre.mri_spacing, pre.interp)?;
    let t2w = center_crop_pad(&t2w, pre.crop_extent_mm, pre.pad_value)?;
    Ok(register_affine(&t2w, &trus, reg)?)
}

/// Gland mask and lesion labels on the preprocessed TRUS grid.
pub fn trus_truth(study: &MultimodalStudy, pre: &PreprocessConfig) -> Result<(Volume, Volume)> {
    pre.validate()?;
    Ok((
        resample_volume(&study.gland_mask, pre.trus_spacing, InterpKind::Nearest)?,
        resample_volume(&study.lesion_labels, pre.trus_spacing, InterpKind::Nearest)?,
    ))
}

fn finish_study(
    study: &MultimodalStudy,
    pre: &PreprocessConfig,
    trus: Volume,
    gland: Volume,
    labels: Volume,
    mri_raw: Vec<Volume>,
    t: Affine3,
) -> Result<PreparedStudy> {
    let kind = pre.interp;
    let inv = t.invert()?;
    let mri_grid = &mri_raw[0];
    let mri_gland = apply_transform(&gland, &inv, mri_grid, InterpKind::Nearest)?;
    let mri_labels = apply_transform(&labels, &inv, mri_grid, InterpKind::Nearest)?;
    let mri: Vec<Volume> = mri_raw
        .iter()
        .map(|v| zscore_normalize(v, &mri_gland))
        .collect::<Result<_, PreprocessError>>()?;
    let projected: Vec<Volume> = mri
        .iter()
        .map(|v| apply_transform(v, &t, &trus, kind))
        .collect::<Result<_, RegisterError>>()?;
    let [t2w, adc, dwi]: [Volume; 3] = projected.try_into().expect("three sequences");
    let trus_space = MultimodalStudy {
        study_id: study.study_id.clone(),
        t2w,
        adc,
        dwi,
        trus: zscore_normalize(&trus, &gland)?,
        gland_mask: gland,
        lesion_labels: labels,
        lesion_gg: study.lesion_gg.clone(),
        mri_to_trus: Some(t),
        split: study.split,
    };
    Ok(PreparedStudy {
        trus_space,
        mri: mri.try_into().expect("three sequences"),
        mri_gland,
        mri_labels,
        mri_to_trus: t,
    })
}
