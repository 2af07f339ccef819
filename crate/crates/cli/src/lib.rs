//! The `fusionseg` command line.
//!
//! Each subcommand writes into its own `--out` directory, refuses a
//! non-empty one unless `--force` is given, and echoes the effective
//! configuration there as `config.lock.json`.

mod config;

use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fusionseg_core::lesioneval::{
    aggregate_report, comparison_csv, curve_csv, curves_svg, evaluate_case, write_case_csv, write_lesion_csv,
    CohortReport,
};
use fusionseg_core::phantom::{generate_cohort, write_cohort};
use fusionseg_core::pipeline::{
    predict_study, prepare_study, register_study, train, trus_truth, write_loss_csv, Setup,
};
use fusionseg_core::volume::{load_manifest, load_study, nifti_read, nifti_write, save_manifest, Split, StudyManifest};
use fusionseg_nn::unet::{load_checkpoint, save_checkpoint};
use fusionseg_nn::{HeadLabel, UNetModel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{RunConfig, LOCK_FILE};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("{stage} failed: {message}")]
    Runtime { stage: &'static str, message: String },
}

impl CliError {
    pub fn runtime(stage: &'static str, e: impl Display) -> Self {
        CliError::Runtime { stage, message: e.to_string() }
    }

    /// 1 for validation errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime { .. } => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "fusionseg", version, about = "Multimodal MRI/TRUS prostate lesion segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct Common {
    /// JSON run configuration (a previous config.lock.json works too).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the phantom and training seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-study stages.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with ground-truth transforms.
    Phantom {
        #[command(flatten)]
        common: Common,
    },
    /// Resample, crop, register and normalize; writes TRUS-space volumes.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Register T2w to TRUS and write a manifest referencing the transforms.
    Register {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Train one setup on the train split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        setup: Option<Setup>,
    },
    /// Sliding-window inference; probability maps on the TRUS grid.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        setup: Option<Setup>,
        /// train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Lesion-level evaluation of CsPCa probability maps.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Directory written by `infer`.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Compare the three setups' evaluation reports.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trus: PathBuf,
        #[arg(long)]
        mri: PathBuf,
        #[arg(long)]
        multimodal: PathBuf,
    },
}

/// One study's probability maps as listed in `predictions.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionEntry {
    pub study_id: String,
    pub gland: PathBuf,
    pub any_cancer: PathBuf,
    pub cspca: PathBuf,
}

pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const REPORT_FILE: &str = "report.json";

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { common } => {
            let (cfg, out) = setup_run(&common, |_| {})?;
            let cohort = generate_cohort(&cfg.phantom).map_err(|e| CliError::runtime("phantom", e))?;
            write_cohort(&cohort, &out).map_err(|e| CliError::runtime("phantom", e))?;
            Ok(())
        }
        Command::Preprocess { common, input } => cmd_preprocess(&common, &input),
        Command::Register { common, input } => cmd_register(&common, &input),
        Command::Train { common, input, setup } => cmd_train(&common, &input, setup),
        Command::Infer { common, input, checkpoint, setup, split } => {
            cmd_infer(&common, &input, &checkpoint, setup, &split)
        }
        Command::Evaluate { common, input, predictions, threshold } => {
            cmd_evaluate(&common, &input, &predictions, threshold)
        }
        Command::Report { common, trus, mri, multimodal } => cmd_report(&common, [&trus, &mri, &multimodal]),
    }
}

/// Load and override the configuration, validate it, prepare the output
/// directory and write the lock file.
fn setup_run(common: &Common, edit: impl FnOnce(&mut RunConfig)) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.phantom.seed = seed;
        cfg.train.seed = seed;
    }
    edit(&mut cfg);
    cfg.validate()?;
    if common.jobs == 0 {
        return Err(CliError::Validation("--jobs must be ≥ 1".into()));
    }
    let out = common.out.clone();
    if out.exists() {
        if !out.is_dir() {
            return Err(CliError::Validation(format!("{} is not a directory", out.display())));
        }
        let non_empty = std::fs::read_dir(&out)
            .map_err(|e| CliError::runtime("output", e))?
            .next()
            .is_some();
        if non_empty && !common.force {
            return Err(CliError::Validation(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(&out).map_err(|e| CliError::runtime("output", e))?;
    cfg.write_lock(&out)?;
    Ok((cfg, out))
}

fn manifest(input: &Path) -> Result<Vec<StudyManifest>> {
    load_manifest(input).map_err(|e| CliError::Validation(format!("manifest {}: {e}", input.display())))
}

/// Map `f` over `items` on up to `jobs` threads, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            for r in h.join().expect("worker panicked") {
                out.push(r?);
            }
        }
        Ok(out)
    })
}

fn file_in(dir: &Path, id: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{id}_{suffix}.nii"))
}

fn cmd_preprocess(common: &Common, input: &Path) -> Result<()> {
    let entries = manifest(input)?;
    let (cfg, out) = setup_run(common, |_| {})?;
    let written = par_map(&entries, common.jobs, |m| {
        let study = load_study(m).map_err(|e| CliError::Validation(e.to_string()))?;
        let p = prepare_study(&study, &cfg.preprocess, &cfg.registration).map_err(|e| CliError::runtime("preprocess", e))?;
        let s = &p.trus_space;
        let id = &s.study_id;
        let write = |v, suffix: &str| -> Result<PathBuf> {
            let path = file_in(&out, id, suffix);
            nifti_write(v, &path).map_err(|e| CliError::runtime("preprocess", e))?;
            Ok(path)
        };
        for (v, suffix) in [
            (&p.mri[0], "mri_t2w"),
            (&p.mri[1], "mri_adc"),
            (&p.mri[2], "mri_dwi"),
            (&p.mri_gland, "mri_gland"),
            (&p.mri_labels, "mri_lesions"),
        ] {
            write(v, suffix)?;
        }
        let transform = out.join(format!("{id}_mri_to_trus.json"));
        p.mri_to_trus.save(&transform).map_err(|e| CliError::runtime("preprocess", e))?;
        Ok(StudyManifest {
            study_id: id.clone(),
            t2w: write(&s.t2w, "t2w")?,
            adc: write(&s.adc, "adc")?,
            dwi: write(&s.dwi, "dwi")?,
            trus: write(&s.trus, "trus")?,
            gland: write(&s.gland_mask, "gland")?,
            lesions: write(&s.lesion_labels, "lesions")?,
            lesion_gg: m.lesion_gg.clone(),
            mri_to_trus: Some(transform),
            split: m.split,
        })
    })?;
    save_manifest(&out.join("manifest.json"), &written).map_err(|e| CliError::runtime("preprocess", e))
}

fn cmd_register(common: &Common, input: &Path) -> Result<()> {
    let entries = manifest(input)?;
    let (cfg, out) = setup_run(common, |_| {})?;
    let written = par_map(&entries, common.jobs, |m| {
        let study = load_study(m).map_err(|e| CliError::Validation(e.to_string()))?;
        let t = register_study(&study, &cfg.preprocess, &cfg.registration).map_err(|e| CliError::runtime("register", e))?;
        let path = out.join(format!("{}_mri_to_trus.json", m.study_id));
        t.save(&path).map_err(|e| CliError::runtime("register", e))?;
        log::info!("{}: registered", m.study_id);
        Ok(StudyManifest { mri_to_trus: Some(path), ..m.clone() })
    })?;
    save_manifest(&out.join("manifest.json"), &written).map_err(|e| CliError::runtime("register", e))
}

fn cmd_train(common: &Common, input: &Path, setup: Option<Setup>) -> Result<()> {
    let entries = manifest(input)?;
    let out_dir = common.out.clone();
    let (cfg, out) = setup_run(common, |c| {
        if let Some(s) = setup {
            c.train.setup = s;
        }
        c.unet.in_channels = c.train.setup.channels();
        c.train.checkpoint_dir = Some(out_dir.join("checkpoints"));
    })?;
    let train_entries: Vec<&StudyManifest> = entries.iter().filter(|m| m.split == Split::Train).collect();
    if train_entries.is_empty() {
        return Err(CliError::Validation("manifest has no train studies".into()));
    }
    let cases = par_map(&train_entries, common.jobs, |m| {
        let study = load_study(m).map_err(|e| CliError::Validation(e.to_string()))?;
        let p = prepare_study(&study, &cfg.preprocess, &cfg.registration).map_err(|e| CliError::runtime("preprocess", e))?;
        p.case(cfg.train.setup).map_err(|e| CliError::runtime("preprocess", e))
    })?;
    let model = UNetModel::build(cfg.unet.clone(), cfg.train.seed).map_err(|e| CliError::runtime("train", e))?;
    let outcome = train(&cases, model, &cfg.train).map_err(|e| CliError::runtime("train", e))?;
    save_checkpoint(&outcome.model, out.join("model.ckpt")).map_err(|e| CliError::runtime("train", e))?;
    write_loss_csv(&outcome.history, &out.join("loss.csv")).map_err(|e| CliError::runtime("train", e))
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        other => Err(CliError::Validation(format!("unknown split '{other}'"))),
    }
}

fn cmd_infer(common: &Common, input: &Path, checkpoint: &Path, setup: Option<Setup>, split: &str) -> Result<()> {
    let entries = manifest(input)?;
    let split = parse_split(split)?;
    let model = load_checkpoint(checkpoint)
        .map_err(|e| CliError::Validation(format!("checkpoint {}: {e}", checkpoint.display())))?;
    let (cfg, out) = setup_run(common, |c| {
        if let Some(s) = setup {
            c.train.setup = s;
        }
        c.unet = model.config().clone();
    })?;
    let setup = cfg.train.setup;
    if model.config().in_channels != setup.channels() {
        return Err(CliError::Validation(format!(
            "checkpoint has {} input channels but setup {} needs {}",
            model.config().in_channels,
            setup.name(),
            setup.channels()
        )));
    }
    let chosen: Vec<&StudyManifest> = entries.iter().filter(|m| split.is_none_or(|s| m.split == s)).collect();
    let listed = par_map(&chosen, common.jobs, |m| {
        let study = load_study(m).map_err(|e| CliError::Validation(e.to_string()))?;
        let p = prepare_study(&study, &cfg.preprocess, &cfg.registration).map_err(|e| CliError::runtime("preprocess", e))?;
        let heads = predict_study(&model, &p, setup, &cfg.inference).map_err(|e| CliError::runtime("infer", e))?;
        let mut paths = Vec::with_capacity(3);
        for (h, label) in heads.iter().zip(HeadLabel::ALL) {
            let path = file_in(&out, &m.study_id, label.name());
            nifti_write(h, &path).map_err(|e| CliError::runtime("infer", e))?;
            paths.push(PathBuf::from(path.file_name().expect("file name")));
        }
        log::info!("{}: inferred", m.study_id);
        let [gland, any_cancer, cspca]: [PathBuf; 3] = paths.try_into().expect("three heads");
        Ok(PredictionEntry { study_id: m.study_id.clone(), gland, any_cancer, cspca })
    })?;
    write_json(&out.join(PREDICTIONS_FILE), &listed, "infer")
}

fn write_json<T: Serialize>(path: &Path, value: &T, stage: &'static str) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(stage, e))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::runtime(stage, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn cmd_evaluate(common: &Common, input: &Path, predictions: &Path, threshold: Option<f64>) -> Result<()> {
    let entries = manifest(input)?;
    let listed: Vec<PredictionEntry> = read_json(&predictions.join(PREDICTIONS_FILE))?;
    let (cfg, out) = setup_run(common, |c| {
        if let Some(t) = threshold {
            c.evaluation.threshold = t;
        }
    })?;
    let pairs: Vec<(&PredictionEntry, &StudyManifest)> = listed
        .iter()
        .map(|p| {
            entries
                .iter()
                .find(|m| m.study_id == p.study_id)
                .map(|m| (p, m))
                .ok_or_else(|| CliError::Validation(format!("{} is not in the manifest", p.study_id)))
        })
        .collect::<Result<_>>()?;
    let evals = par_map(&pairs, common.jobs, |(p, m)| {
        let study = load_study(m).map_err(|e| CliError::Validation(e.to_string()))?;
        let (gland, labels) = trus_truth(&study, &cfg.preprocess).map_err(|e| CliError::runtime("evaluate", e))?;
        let prob = nifti_read(&predictions.join(&p.cspca)).map_err(|e| CliError::Validation(e.to_string()))?;
        evaluate_case(&m.study_id, &gland, &labels, &study.lesion_gg, &prob, &cfg.evaluation)
            .map_err(|e| CliError::runtime("evaluate", e))
    })?;
    let report = aggregate_report(&evals, &cfg.evaluation).map_err(|e| CliError::runtime("evaluate", e))?;
    write_report(&report, &out)
}

fn write_report(report: &CohortReport, out: &Path) -> Result<()> {
    let fail = |e| CliError::runtime("evaluate", e);
    write_json(&out.join(REPORT_FILE), report, "evaluate")?;
    write_case_csv(report, &out.join("cases.csv")).map_err(fail)?;
    write_lesion_csv(report, &out.join("lesions.csv")).map_err(fail)?;
    let io = |e| CliError::runtime("evaluate", e);
    std::fs::write(out.join("roc.csv"), curve_csv(&report.roc_curve, "fpr", "tpr")).map_err(io)?;
    std::fs::write(out.join("pr.csv"), curve_csv(&report.pr_curve, "recall", "precision")).map_err(io)?;
    let roc = curves_svg("ROC", "False positive rate", "True positive rate", &[("ROC".into(), report.roc_curve.clone())]);
    let pr = curves_svg("Precision-recall", "Recall", "Precision", &[("PR".into(), report.pr_curve.clone())]);
    std::fs::write(out.join("roc.svg"), roc).map_err(io)?;
    std::fs::write(out.join("pr.svg"), pr).map_err(io)
}

fn cmd_report(common: &Common, reports: [&PathBuf; 3]) -> Result<()> {
    let loaded: Vec<(String, CohortReport)> = Setup::ALL
        .iter()
        .zip(reports)
        .map(|(s, p)| {
            let path = if p.is_dir() { p.join(REPORT_FILE) } else { p.clone() };
            Ok((s.name().to_string(), read_json(&path)?))
        })
        .collect::<Result<_>>()?;
    let (_, out) = setup_run(common, |_| {})?;
    let io = |e| CliError::runtime("report", e);
    std::fs::write(out.join("comparison.csv"), comparison_csv(&loaded)).map_err(io)?;
    let roc: Vec<(String, Vec<[f64; 2]>)> = loaded.iter().map(|(n, r)| (n.clone(), r.roc_curve.clone())).collect();
    let pr: Vec<(String, Vec<[f64; 2]>)> = loaded.iter().map(|(n, r)| (n.clone(), r.pr_curve.clone())).collect();
    std::fs::write(out.join("roc.svg"), curves_svg("ROC", "False positive rate", "True positive rate", &roc)).map_err(io)?;
    std::fs::write(out.join("pr.svg"), curves_svg("Precision-recall", "Recall", "Precision", &pr)).map_err(io)
}
