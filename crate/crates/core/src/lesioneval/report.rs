use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::curves::{pr_auc, pr_curve, roc_auc, roc_curve, ScoredUnit};
use super::stats::{bootstrap_median_ci, median, welch_t, WelchResult};
use super::{CaseEvaluation, CaseRow, EvalConfig, EvalError, Result};

/// One ground-truth lesion with its detection outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionRow {
    pub study_id: String,
    pub lesion_id: u32,
    pub volume_mm3: f64,
    pub diameter_mm: f64,
    pub gg: u8,
    /// Score of the matched prediction, 0 when missed.
    pub score: f64,
    pub detected: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitCounts {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn_sextants: usize,
    pub fp_sextants: usize,
    pub fn_sextants: usize,
}

/// Sizes and grades of detected (TP) versus missed (FN) lesions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureStats {
    pub tp_count: usize,
    pub fn_count: usize,
    pub tp_median_volume_mm3: Option<f64>,
    pub fn_median_volume_mm3: Option<f64>,
    pub tp_median_diameter_mm: Option<f64>,
    pub fn_median_diameter_mm: Option<f64>,
    pub tp_volume_ci: Option<[f64; 2]>,
    pub fn_volume_ci: Option<[f64; 2]>,
    /// Counts per grade group 1..=5.
    pub tp_gg_histogram: [usize; 5],
    pub fn_gg_histogram: [usize; 5],
    /// Welch's test on log-volumes, TP minus FN.
    pub welch_log_volume: Option<WelchResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub n_cases: usize,
    pub counts: UnitCounts,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub npv: Option<f64>,
    pub overall_dice: Option<f64>,
    pub lesion_dice: Option<f64>,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub roc_curve: Vec<[f64; 2]>,
    pub pr_curve: Vec<[f64; 2]>,
    pub failure: FailureStats,
    pub cases: Vec<CaseRow>,
    pub lesions: Vec<LesionRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Pool units over cases (in the given order) and summarize.
pub fn aggregate_report(cases: &[CaseEvaluation], cfg: &EvalConfig) -> Result<CohortReport> {
    if cases.is_empty() {
        return Err(EvalError::EmptyCohort);
    }
    cfg.validate()?;
    let mut c = UnitCounts::default();
    for e in cases {
        let r = &e.row;
        c.tp += r.tp;
        c.fn_ += r.fn_;
        c.fp += r.fp;
        c.tn_sextants += r.tn_sextants;
        c.fp_sextants += r.fp_sextants;
        c.fn_sextants += r.fn_sextants;
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let units: Vec<ScoredUnit> = cases.iter().flat_map(|e| e.units.iter().copied()).collect();
    let lesions: Vec<LesionRow> = cases.iter().flat_map(|e| e.lesions.iter().cloned()).collect();
    let vols = |detected: bool| -> Vec<f64> {
        lesions.iter().filter(|l| l.detected == detected).map(|l| l.volume_mm3).collect()
    };
    let (tp_v, fn_v) = (vols(true), vols(false));
    let hist = |detected: bool| -> [usize; 5] {
        let mut h = [0; 5];
        for l in lesions.iter().filter(|l| l.detected == detected) {
            if (1..=5).contains(&l.gg) {
                h[usize::from(l.gg) - 1] += 1;
            }
        }
        h
    };
    let diam = |v: Option<f64>| v.and_then(|v| super::volume_to_diameter(v).ok());
    let ci = |v: &[f64], salt: u64| bootstrap_median_ci(v, cfg.bootstrap_resamples, cfg.bootstrap_seed ^ salt, cfg.ci_level);
    let logs = |v: &[f64]| v.iter().map(|x| x.ln()).collect::<Vec<_>>();
    let failure = FailureStats {
        tp_count: tp_v.len(),
        fn_count: fn_v.len(),
        tp_median_volume_mm3: median(&tp_v),
        fn_median_volume_mm3: median(&fn_v),
        tp_median_diameter_mm: diam(median(&tp_v)),
        fn_median_diameter_mm: diam(median(&fn_v)),
        tp_volume_ci: ci(&tp_v, 1),
        fn_volume_ci: ci(&fn_v, 2),
        tp_gg_histogram: hist(true),
        fn_gg_histogram: hist(false),
        welch_log_volume: welch_t(&logs(&tp_v), &logs(&fn_v)).ok(),
    };
    Ok(CohortReport {
        n_cases: cases.len(),
        counts: c,
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn_sextants, c.tn_sextants + c.fp_sextants),
        npv: ratio(c.tn_sextants, c.tn_sextants + c.fn_sextants),
        overall_dice: mean(cases.iter().filter_map(|e| e.row.overall_dice)),
        lesion_dice: mean(cases.iter().filter_map(|e| e.row.lesion_dice)),
        roc_auc: roc_auc(&units).ok(),
        pr_auc: pr_auc(&units).ok(),
        roc_curve: roc_curve(&units).unwrap_or_default(),
        pr_curve: pr_curve(&units).unwrap_or_default(),
        failure,
        cases: cases.iter().map(|e| e.row.clone()).collect(),
        lesions,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_case_csv(report: &CohortReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "study_id,gt_lesions,pred_lesions,tp,fn,fp,tn_sextants,fp_sextants,fn_sextants,sensitivity,specificity,npv,overall_dice,lesion_dice"
    )?;
    for r in &report.cases {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.study_id,
            r.gt_lesions,
            r.pred_lesions,
            r.tp,
            r.fn_,
            r.fp,
            r.tn_sextants,
            r.fp_sextants,
            r.fn_sextants,
            opt(r.sensitivity),
            opt(r.specificity),
            opt(r.npv),
            opt(r.overall_dice),
            opt(r.lesion_dice)
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_lesion_csv(report: &CohortReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "study_id,id,volume_mm3,diameter_mm,gg,score,status")?;
    for l in &report.lesions {
        writeln!(
            f,
            "{},{},{:.6},{:.6},{},{:.6},{}",
            l.study_id,
            l.lesion_id,
            l.volume_mm3,
            l.diameter_mm,
            l.gg,
            l.score,
            if l.detected { "TP" } else { "FN" }
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Curve points as CSV with the given column names.
pub fn curve_csv(points: &[[f64; 2]], x: &str, y: &str) -> String {
    let mut s = format!("{x},{y}\n");
    for p in points {
        let _ = writeln!(s, "{:.6},{:.6}", p[0], p[1]);
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Standalone 640×480 SVG with one polyline per named curve on unit axes.
pub fn curves_svg(title: &str, x_label: &str, y_label: &str, curves: &[(String, Vec<[f64; 2]>)]) -> String {
    let (w, h) = (640.0, 480.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + x.clamp(0.0, 1.0) * pw;
    let sy = |y: f64| top + (1.0 - y.clamp(0.0, 1.0)) * ph;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 640 480" width="640" height="480">"#);
    let _ = writeln!(s, r#"<rect width="640" height="480" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{v:.2}</text>"#,
            sx(v),
            top + ph + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.2}</text>"#,
            left - 6.0,
            sy(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        top + ph / 2.0,
        escape(y_label)
    );
    for (k, (name, pts)) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", sx(p[0]), sy(p[1]))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        let ly = top + 18.0 + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{2}" y="{3}" font-family="sans-serif" font-size="12">{4}</text>"#,
            left + pw - 150.0,
            left + pw - 125.0,
            left + pw - 118.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One row per named report with the detection-table columns.
pub fn comparison_csv(reports: &[(String, CohortReport)]) -> String {
    let mut s = String::from("setup,roc_auc,pr_auc,sensitivity,specificity,npv,overall_dice,lesion_dice\n");
    for (name, r) in reports {
        let _ = writeln!(
            s,
            "{name},{},{},{},{},{},{},{}",
            opt(r.roc_auc),
            opt(r.pr_auc),
            opt(r.sensitivity),
            opt(r.specificity),
            opt(r.npv),
            opt(r.overall_dice),
            opt(r.lesion_dice)
        );
    }
    s
}
