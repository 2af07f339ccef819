use std::io::Write;
use std::path::{Path, PathBuf};

use fusionseg_nn::unet::save_checkpoint;
use fusionseg_nn::{AdamConfig, AdamState, HeadLabel, Tape, UNetModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::patches::{augment_flip, draw_batch, PatchSource};
use super::{Case, PipelineError, Result, Setup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub setup: Setup,
    /// Patch size in voxels, (x, y, z).
    pub patch_size: [usize; 3],
    pub batch_size: usize,
    /// Fraction of patches centered on foreground.
    pub fg_oversample: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    /// Axes (x, y, z) eligible for random flips.
    pub augment_flips: [bool; 3],
    pub flip_probability: f64,
    pub adam: AdamConfig,
    /// Smoothing term of the soft Dice loss.
    pub dice_smooth: f64,
    /// Directory receiving one checkpoint per epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            setup: Setup::Multimodal,
            patch_size: [64, 64, 16],
            batch_size: 2,
            fg_oversample: 0.33,
            epochs: 1,
            steps_per_epoch: 250,
            seed: 0,
            augment_flips: [true, false, false],
            flip_probability: 0.5,
            adam: AdamConfig::default(),
            dice_smooth: 1.0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.patch_size.contains(&0) || self.batch_size == 0 {
            return bad("patch size and batch size must be positive".into());
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return bad("epochs and steps_per_epoch must be positive".into());
        }
        for (name, f) in [("fg_oversample", self.fg_oversample), ("flip_probability", self.flip_probability)] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} = {f} is outside [0, 1]"));
            }
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) || !(self.dice_smooth >= 0.0) {
            return bad("learning rate must be positive and dice_smooth non-negative".into());
        }
        Ok(())
    }
}

/// Losses of one optimizer step; per-label entries follow [`HeadLabel::ALL`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub bce: [f64; 3],
    pub dice: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: UNetModel,
    pub history: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Train `model` with Adam on the combined BCE + soft Dice loss over
/// `epochs × steps_per_epoch` randomly sampled batches.
pub fn train(cases: &[Case], mut model: UNetModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(PipelineError::EmptyVolume("no training cases".into()));
    }
    let want = cfg.setup.channels();
    if model.config().in_channels != want {
        return Err(PipelineError::ShapeMismatch(format!(
            "setup {} needs {want} input channels, model has {}",
            cfg.setup.name(),
            model.config().in_channels
        )));
    }
    if let Some(c) = cases.iter().find(|c| c.channels.len() != want) {
        return Err(PipelineError::ShapeMismatch(format!(
            "{}: {} channels for setup {}",
            c.study_id,
            c.channels.len(),
            cfg.setup.name()
        )));
    }
    model.config().check_patch([cfg.patch_size[2], cfg.patch_size[1], cfg.patch_size[0]])?;
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let sources: Vec<PatchSource> = cases.iter().map(PatchSource::new).collect::<Result<_>>()?;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.tensor.numel()).collect();
    let mut adam = AdamState::<f32>::new(cfg.adam, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs * cfg.steps_per_epoch);
    let mut checkpoints = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            let mut batch = draw_batch(&sources, cfg, &mut rng)?;
            augment_flip(&mut batch, cfg.augment_flips, cfg.flip_probability, &mut rng);
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true);
            let x = tape.constant(batch.input);
            let heads = model.forward_on_tape(&mut tape, &params, x)?;
            let loss = tape.combined_loss(&heads, &batch.targets, cfg.dice_smooth)?;
            let total = f64::from(tape.item(loss.total));
            if !total.is_finite() {
                return Err(PipelineError::NonFiniteLoss { step, value: total });
            }
            let record = LossRecord {
                step,
                total,
                bce: std::array::from_fn(|k| f64::from(tape.item(loss.per_label[k].bce))),
                dice: std::array::from_fn(|k| f64::from(tape.item(loss.per_label[k].dice))),
            };
            tape.backward(loss.total)?;
            let grads: Vec<Vec<f32>> = params
                .iter()
                .map(|&p| tape.grad(p).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(p).numel()]))
                .collect();
            drop(tape);
            let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            let mut param_refs: Vec<&mut [f32]> =
                model.params_mut().iter_mut().map(|p| p.tensor.data_mut()).collect();
            adam.step(&mut param_refs, &grad_refs)?;
            if step % 50 == 0 {
                log::info!("{} step {step}: loss {total:.4}", cfg.setup.name());
            }
            history.push(record);
            step += 1;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            let path = dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
            save_checkpoint(&model, &path)?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome { model, history, checkpoints })
}

/// `step,total` followed by `bce_<label>,dice_<label>` for each head.
pub fn write_loss_csv(history: &[LossRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "step,total")?;
    for h in HeadLabel::ALL {
        write!(f, ",bce_{0},dice_{0}", h.name())?;
    }
    writeln!(f)?;
    for r in history {
        write!(f, "{},{}", r.step, r.total)?;
        for k in 0..3 {
            write!(f, ",{},{}", r.bce[k], r.dice[k])?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}
