//! Multimodal MRI/TRUS prostate lesion segmentation: volume I/O, resampling,
//! affine registration, synthetic phantoms, UNet training and inference, and
//! lesion-level evaluation.

pub mod volume;
pub mod preprocess;
pub mod register;
pub mod phantom;
pub mod pipeline;
pub mod lesioneval;
