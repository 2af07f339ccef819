use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{nifti_read, Affine3, Result, SpaceTag, Volume, VolumeError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One study entry of a manifest file. Paths are stored resolved against
/// the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyManifest {
    pub study_id: String,
    pub t2w: PathBuf,
    pub adc: PathBuf,
    pub dwi: PathBuf,
    pub trus: PathBuf,
    pub gland: PathBuf,
    pub lesions: PathBuf,
    pub lesion_gg: BTreeMap<String, i64>,
    pub mri_to_trus: Option<PathBuf>,
    pub split: Split,
}

impl StudyManifest {
    fn paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        [
            &mut self.t2w,
            &mut self.adc,
            &mut self.dwi,
            &mut self.trus,
            &mut self.gland,
            &mut self.lesions,
        ]
        .into_iter()
        .chain(self.mri_to_trus.as_mut())
    }

    /// Grade-group table with integer keys, validated to ids ≥ 1 and grades 1–5.
    pub fn grade_groups(&self) -> Result<BTreeMap<u32, u8>> {
        let mut out = BTreeMap::new();
        for (k, &g) in &self.lesion_gg {
            let id: u32 = k
                .parse()
                .ok()
                .filter(|&id| id >= 1)
                .ok_or_else(|| VolumeError::SchemaError(format!("{}: lesion id {k:?} is not a positive integer", self.study_id)))?;
            if !(1..=5).contains(&g) {
                return Err(VolumeError::SchemaError(format!(
                    "{}: grade group {g} of lesion {id} outside 1..=5",
                    self.study_id
                )));
            }
            out.insert(id, g as u8);
        }
        Ok(out)
    }
}

/// One case: MRI sequences, TRUS, gland mask and lesion labels (on the TRUS
/// grid), per-lesion grade groups and the optional MRI→TRUS transform.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalStudy {
    pub study_id: String,
    pub t2w: Volume,
    pub adc: Volume,
    pub dwi: Volume,
    pub trus: Volume,
    pub gland_mask: Volume,
    pub lesion_labels: Volume,
    pub lesion_gg: BTreeMap<u32, u8>,
    pub mri_to_trus: Option<Affine3>,
    pub split: Split,
}

impl MultimodalStudy {
    /// Check grid agreement, label integrality and grade-group coverage.
    /// Lesion voxels outside the gland are only logged.
    pub fn validate(&self) -> Result<()> {
        self.gland_mask.check_same_grid(&self.trus, "gland mask vs TRUS")?;
        self.lesion_labels.check_same_grid(&self.trus, "lesion labels vs TRUS")?;
        self.adc.check_same_grid(&self.t2w, "ADC vs T2w")?;
        self.dwi.check_same_grid(&self.t2w, "DWI vs T2w")?;
        if self.gland_mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(VolumeError::SchemaError(format!("{}: gland mask is not binary", self.study_id)));
        }
        let mut outside = 0usize;
        for (&l, &g) in self.lesion_labels.data().iter().zip(self.gland_mask.data()) {
            if l < 0.0 || l.fract() != 0.0 {
                return Err(VolumeError::SchemaError(format!(
                    "{}: lesion label {l} is not a non-negative integer",
                    self.study_id
                )));
            }
            if l > 0.0 {
                if !self.lesion_gg.contains_key(&(l as u32)) {
                    return Err(VolumeError::SchemaError(format!(
                        "{}: lesion id {l} has no grade group",
                        self.study_id
                    )));
                }
                if g == 0.0 {
                    outside += 1;
                }
            }
        }
        if outside > 0 {
            log::warn!("{}: {outside} lesion voxels lie outside the gland", self.study_id);
        }
        Ok(())
    }

    /// Lesion ids present in the label map, ascending.
    pub fn lesion_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.lesion_gg.keys().copied().collect();
        ids.retain(|id| self.lesion_labels.data().iter().any(|&l| l as u32 == *id));
        ids
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parse a manifest (a JSON array of study entries, or a single entry) and
/// check every referenced path exists.
pub fn load_manifest(path: &Path) -> Result<Vec<StudyManifest>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => VolumeError::MissingFile(path.to_path_buf()),
        _ => VolumeError::Io(e),
    })?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| VolumeError::SchemaError(format!("{}: {e}", path.display())))?;
    let entries = match value {
        serde_json::Value::Array(items) => items,
        obj @ serde_json::Value::Object(_) => vec![obj],
        _ => return Err(VolumeError::SchemaError("manifest must be an array or object".into())),
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.into_iter().enumerate() {
        let mut m: StudyManifest = serde_json::from_value(e)
            .map_err(|err| VolumeError::SchemaError(format!("entry {i}: {err}")))?;
        m.grade_groups()?;
        for p in m.paths_mut() {
            *p = resolve(base, p);
            if !p.exists() {
                return Err(VolumeError::MissingFile(p.clone()));
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// Write a manifest, storing paths relative to the manifest directory when possible.
pub fn save_manifest(path: &Path, studies: &[StudyManifest]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel: Vec<StudyManifest> = studies
        .iter()
        .map(|m| {
            let mut m = m.clone();
            for p in m.paths_mut() {
                if let Ok(r) = p.strip_prefix(base) {
                    *p = r.to_path_buf();
                }
            }
            m
        })
        .collect();
    let text = serde_json::to_string_pretty(&rel).map_err(|e| VolumeError::SchemaError(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Load and validate all volumes of one manifest entry.
pub fn load_study(m: &StudyManifest) -> Result<MultimodalStudy> {
    let read = |p: &Path, tag: SpaceTag| -> Result<Volume> {
        let mut v = nifti_read(p)?;
        v.set_tag(tag);
        Ok(v)
    };
    let study = MultimodalStudy {
        study_id: m.study_id.clone(),
        t2w: read(&m.t2w, SpaceTag::Mri)?,
        adc: read(&m.adc, SpaceTag::Mri)?,
        dwi: read(&m.dwi, SpaceTag::Mri)?,
        trus: read(&m.trus, SpaceTag::Trus)?,
        gland_mask: read(&m.gland, SpaceTag::Trus)?,
        lesion_labels: read(&m.lesions, SpaceTag::Trus)?,
        lesion_gg: m.grade_groups()?,
        mri_to_trus: m.mri_to_trus.as_deref().map(Affine3::load).transpose()?,
        split: m.split,
    };
    study.validate()?;
    Ok(study)
}
