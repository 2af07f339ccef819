//! Lesion-level and sextant-level evaluation of CsPCa predictions, detection
//! curves, and lesion size statistics of detected versus missed lesions.

mod curves;
mod report;
mod stats;

pub use curves::{pr_auc, pr_curve, roc_auc, roc_curve, trapezoid_area, ScoredUnit};
pub use report::{
    aggregate_report, comparison_csv, curve_csv, curves_svg, write_case_csv, write_lesion_csv, CohortReport,
    FailureStats, LesionRow, UnitCounts,
};
pub use stats::{bootstrap_median_ci, median, reg_incomplete_beta, student_t_sf, welch_t, WelchResult};

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Volume, VolumeError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("volume must be positive, got {0}")]
    NonPositiveVolume(f64),
    #[error("gland mask is empty")]
    EmptyGland,
    #[error("need at least one positive and one negative unit ({positives} / {negatives})")]
    DegenerateClasses { positives: usize, negatives: usize },
    #[error("need at least 2 samples per group, got {0} and {1}")]
    TooFewSamples(usize, usize),
    #[error("cohort has no cases")]
    EmptyCohort,
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    /// Face neighbours only.
    Six,
    /// Face, edge and corner neighbours.
    #[default]
    TwentySix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// CsPCa probability threshold for binarization.
    pub threshold: f64,
    /// Minimum pairwise Dice for a detection to count as a hit.
    pub min_dice: f64,
    pub connectivity: Connectivity,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    /// Two-sided confidence level of the bootstrap intervals.
    pub ci_level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_dice: 0.1,
            connectivity: Connectivity::TwentySix,
            bootstrap_resamples: 2000,
            bootstrap_seed: 0,
            ci_level: 0.9,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() || !(0.0..=1.0).contains(&self.min_dice) {
            return Err(EvalError::InvalidConfig("threshold must be finite and min_dice in [0, 1]".into()));
        }
        if self.bootstrap_resamples == 0 || !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(EvalError::InvalidConfig("bootstrap needs ≥ 1 resample and a level in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub id: u32,
    /// Linear voxel indices, ascending.
    pub voxels: Vec<usize>,
    pub volume_mm3: f64,
    pub centroid_mm: [f64; 3],
    /// Grade group (ground truth only).
    pub gg: Option<u8>,
    /// Detection confidence (predictions only).
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionSet {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub lesions: Vec<Lesion>,
}

impl LesionSet {
    pub fn len(&self) -> usize {
        self.lesions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lesions.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Lesion> {
        self.lesions.iter().find(|l| l.id == id)
    }

    fn check_grid(&self, other: &LesionSet) -> Result<()> {
        let same = self.dims == other.dims && (0..3).all(|a| (self.spacing[a] - other.spacing[a]).abs() < 1e-6);
        if same {
            Ok(())
        } else {
            Err(VolumeError::GridMismatch(format!("lesion sets on {:?} vs {:?}", self.dims, other.dims)).into())
        }
    }
}

fn make_lesion(grid: &Volume, id: u32, voxels: Vec<usize>) -> Lesion {
    let mut c = [0.0; 3];
    for &i in &voxels {
        let p = grid.voxel_to_world(grid.coords(i).map(|v| v as f64));
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    let n = voxels.len() as f64;
    Lesion {
        id,
        volume_mm3: n * grid.voxel_volume(),
        centroid_mm: c.map(|v| v / n),
        voxels,
        gg: None,
        score: None,
    }
}

/// 1 where `prob ≥ threshold`, else 0.
pub fn binarize(prob: &Volume, threshold: f64) -> Volume {
    prob.map(|p| f32::from(u8::from(f64::from(p) >= threshold)))
        .expect("binary values are finite")
}

/// Label connected foreground components; ids start at 1 in scan order of
/// each component's first voxel (z, then y, then x).
pub fn connected_components(mask: &Volume, connectivity: Connectivity) -> LesionSet {
    let [nx, ny, nz] = mask.dims();
    let data = mask.data();
    let offsets: Vec<[isize; 3]> = {
        let mut v = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match connectivity {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        v.push([dx, dy, dz]);
                    }
                }
            }
        }
        v
    };
    let mut seen = vec![false; data.len()];
    let mut lesions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if seen[start] || data[start] <= 0.5 {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut voxels = Vec::new();
        while let Some(i) = queue.pop_front() {
            voxels.push(i);
            let [x, y, z] = mask.coords(i);
            for o in &offsets {
                let (qx, qy, qz) = (x as isize + o[0], y as isize + o[1], z as isize + o[2]);
                if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize || qz >= nz as isize {
                    continue;
                }
                let j = mask.index(qx as usize, qy as usize, qz as usize);
                if !seen[j] && data[j] > 0.5 {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        voxels.sort_unstable();
        lesions.push(make_lesion(mask, lesions.len() as u32 + 1, voxels));
    }
    LesionSet { dims: mask.dims(), spacing: mask.spacing(), lesions }
}

/// Ground-truth lesions from a label map, keeping ids with grade group ≥ `min_gg`.
pub fn lesions_from_labels(labels: &Volume, gg: &BTreeMap<u32, u8>, min_gg: u8) -> LesionSet {
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.data().iter().enumerate() {
        if l > 0.0 {
            by_id.entry(l.round() as u32).or_default().push(i);
        }
    }
    let lesions = by_id
        .into_iter()
        .filter_map(|(id, vox)| {
            let g = gg.get(&id).copied().unwrap_or(0);
            (g >= min_gg).then(|| {
                let mut l = make_lesion(labels, id, vox);
                l.gg = Some(g);
                l
            })
        })
        .collect();
    LesionSet { dims: labels.dims(), spacing: labels.spacing(), lesions }
}

/// Maximum probability over the lesion's voxels.
pub fn lesion_score(lesion: &Lesion, prob: &Volume) -> f64 {
    lesion
        .voxels
        .iter()
        .map(|&i| f64::from(prob.data()[i]))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Equivalent-sphere diameter `(6v/π)^(1/3)`.
pub fn volume_to_diameter(v_mm3: f64) -> Result<f64> {
    if !(v_mm3 > 0.0) {
        return Err(EvalError::NonPositiveVolume(v_mm3));
    }
    Ok((6.0 * v_mm3 / std::f64::consts::PI).cbrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// (gt id, pred id, pairwise Dice).
    pub pairs: Vec<(u32, u32, f64)>,
    pub false_negatives: Vec<u32>,
    pub false_positives: Vec<u32>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.pairs.len()
    }

    pub fn pred_for(&self, gt: u32) -> Option<u32> {
        self.pairs.iter().find(|p| p.0 == gt).map(|p| p.1)
    }
}

/// Greedy one-to-one matching in descending pairwise-Dice order; a pair
/// counts when its Dice is at least `min_dice` (and positive).
pub fn match_lesions(gt: &LesionSet, pred: &LesionSet, min_dice: f64) -> Result<MatchResult> {
    gt.check_grid(pred)?;
    let n: usize = gt.dims.iter().product();
    let mut owner = vec![u32::MAX; n];
    for (k, l) in pred.lesions.iter().enumerate() {
        for &i in &l.voxels {
            owner[i] = k as u32;
        }
    }
    let mut cands = Vec::new();
    for (gi, g) in gt.lesions.iter().enumerate() {
        let mut overlap: BTreeMap<u32, usize> = BTreeMap::new();
        for &i in &g.voxels {
            if owner[i] != u32::MAX {
                *overlap.entry(owner[i]).or_default() += 1;
            }
        }
        for (pk, inter) in overlap {
            let p = &pred.lesions[pk as usize];
            let dice = 2.0 * inter as f64 / (g.voxels.len() + p.voxels.len()) as f64;
            cands.push((dice, gi, pk as usize));
        }
    }
    // Descending Dice; ties by gt then pred position for determinism.
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut pairs = Vec::new();
    for (dice, gi, pk) in cands {
        if dice < min_dice || dice <= 0.0 || gt_used[gi] || pred_used[pk] {
            continue;
        }
        gt_used[gi] = true;
        pred_used[pk] = true;
        pairs.push((gt.lesions[gi].id, pred.lesions[pk].id, dice));
    }
    pairs.sort_by_key(|p| p.0);
    Ok(MatchResult {
        pairs,
        false_negatives: gt.lesions.iter().zip(&gt_used).filter(|(_, u)| !**u).map(|(l, _)| l.id).collect(),
        false_positives: pred.lesions.iter().zip(&pred_used).filter(|(_, u)| !**u).map(|(l, _)| l.id).collect(),
    })
}

/// Six disjoint gland regions: three equal-thickness z bands (increasing z)
/// each split at the gland centroid x into low-x and high-x halves.
/// Order: band 0 low/high, band 1 low/high, band 2 low/high.
pub fn sextant_partition(gland: &Volume) -> Result<[Volume; 6]> {
    let inside: Vec<usize> = (0..gland.len()).filter(|&i| gland.data()[i] > 0.5).collect();
    if inside.is_empty() {
        return Err(EvalError::EmptyGland);
    }
    let zs = inside.iter().map(|&i| gland.coords(i)[2]);
    let (zmin, zmax) = zs.fold((usize::MAX, 0), |(lo, hi), z| (lo.min(z), hi.max(z)));
    let thickness = (zmax - zmin + 1) as f64;
    let cx = inside.iter().map(|&i| gland.coords(i)[0] as f64).sum::<f64>() / inside.len() as f64;
    let mut regions: [Vec<f32>; 6] = std::array::from_fn(|_| vec![0.0; gland.len()]);
    for &i in &inside {
        let [x, _, z] = gland.coords(i);
        let band = (((z - zmin) as f64 * 3.0 / thickness).floor() as usize).min(2);
        let side = usize::from(x as f64 >= cx);
        regions[band * 2 + side][i] = 1.0;
    }
    let out: Vec<Volume> = regions
        .into_iter()
        .map(|r| gland.with_data(r))
        .collect::<Result<_, VolumeError>>()?;
    Ok(out.try_into().expect("six regions"))
}

/// Dice of two binary masks; `None` when both are empty.
pub fn mask_dice(a: &Volume, b: &Volume) -> Result<Option<f64>> {
    a.check_same_grid(b, "dice masks")?;
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x > 0.5, y > 0.5);
        inter += usize::from(x && y);
        sa += usize::from(x);
        sb += usize::from(y);
    }
    Ok((sa + sb > 0).then(|| 2.0 * inter as f64 / (sa + sb) as f64))
}

/// Per-case detection counts and Dice values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub study_id: String,
    pub gt_lesions: usize,
    pub pred_lesions: usize,
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn_sextants: usize,
    pub fp_sextants: usize,
    pub fn_sextants: usize,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub npv: Option<f64>,
    pub overall_dice: Option<f64>,
    pub lesion_dice: Option<f64>,
}

/// Everything computed for one case: the row, the scored detection units
/// and the ground-truth lesion table.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseEvaluation {
    pub row: CaseRow,
    pub units: Vec<ScoredUnit>,
    pub lesions: Vec<LesionRow>,
}

/// Counts and Dice for one case from its matched lesion sets.
///
/// `pred_mask` is the binarized CsPCa prediction, `prob` the CsPCa
/// probability map; a sextant is negative when it holds no gt lesion voxel.
pub fn case_metrics(
    study_id: &str,
    gt: &LesionSet,
    pred: &LesionSet,
    matched: &MatchResult,
    gt_mask: &Volume,
    pred_mask: &Volume,
    prob: &Volume,
    sextants: &[Volume; 6],
) -> Result<CaseEvaluation> {
    gt.check_grid(pred)?;
    gt_mask.check_same_grid(pred_mask, "gt vs predicted mask")?;
    prob.check_same_grid(pred_mask, "probability vs predicted mask")?;
    let (mut tn, mut fp_s, mut fn_s) = (0, 0, 0);
    let mut units = Vec::new();
    for s in sextants {
        s.check_same_grid(pred_mask, "sextant vs predicted mask")?;
        let mut has_gt = false;
        let mut has_pred = false;
        let mut max_p = 0.0f64;
        for i in 0..s.len() {
            if s.data()[i] <= 0.5 {
                continue;
            }
            has_gt |= gt_mask.data()[i] > 0.5;
            has_pred |= pred_mask.data()[i] > 0.5;
            max_p = max_p.max(f64::from(prob.data()[i]));
        }
        if s.data().iter().all(|&v| v <= 0.5) {
            continue;
        }
        match (has_gt, has_pred) {
            (false, true) => fp_s += 1,
            (false, false) => tn += 1,
            (true, false) => fn_s += 1,
            (true, true) => {}
        }
        if !has_gt {
            units.push(ScoredUnit { score: max_p, positive: false });
        }
    }
    let mut lesions = Vec::new();
    for g in &gt.lesions {
        let pred_score = matched
            .pred_for(g.id)
            .and_then(|p| pred.get(p))
            .map(|p| p.score.unwrap_or_else(|| lesion_score(p, prob)));
        units.push(ScoredUnit { score: pred_score.unwrap_or(0.0), positive: true });
        lesions.push(LesionRow {
            study_id: study_id.to_string(),
            lesion_id: g.id,
            volume_mm3: g.volume_mm3,
            diameter_mm: volume_to_diameter(g.volume_mm3)?,
            gg: g.gg.unwrap_or(0),
            score: pred_score.unwrap_or(0.0),
            detected: pred_score.is_some(),
        });
    }
    let tp = matched.true_positives();
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let overall = mask_dice(pred_mask, gt_mask)?;
    let row = CaseRow {
        study_id: study_id.to_string(),
        gt_lesions: gt.len(),
        pred_lesions: pred.len(),
        tp,
        fn_: matched.false_negatives.len(),
        fp: matched.false_positives.len(),
        tn_sextants: tn,
        fp_sextants: fp_s,
        fn_sextants: fn_s,
        sensitivity: ratio(tp, gt.len()),
        specificity: ratio(tn, tn + fp_s),
        npv: ratio(tn, tn + fn_s),
        overall_dice: overall,
        lesion_dice: if tp > 0 { overall } else { None },
    };
    Ok(CaseEvaluation { row, units, lesions })
}

/// Full evaluation of one case from the CsPCa probability map and the ground truth.
pub fn evaluate_case(
    study_id: &str,
    gland: &Volume,
    labels: &Volume,
    gg: &BTreeMap<u32, u8>,
    prob: &Volume,
    cfg: &EvalConfig,
) -> Result<CaseEvaluation> {
    cfg.validate()?;
    prob.check_same_grid(labels, "probability vs labels")?;
    gland.check_same_grid(labels, "gland vs labels")?;
    let gt = lesions_from_labels(labels, gg, 2);
    let gt_mask = {
        let keep: Vec<u32> = gt.lesions.iter().map(|l| l.id).collect();
        labels.map(|l| f32::from(u8::from(l > 0.0 && keep.contains(&(l.round() as u32)))))?
    };
    let pred_mask = binarize(prob, cfg.threshold);
    let mut pred = connected_components(&pred_mask, cfg.connectivity);
    for l in pred.lesions.iter_mut() {
        l.score = Some(lesion_score(l, prob));
    }
    let matched = match_lesions(&gt, &pred, cfg.min_dice)?;
    let sextants = sextant_partition(gland)?;
    case_metrics(study_id, &gt, &pred, &matched, &gt_mask, &pred_mask, prob, &sextants)
}
