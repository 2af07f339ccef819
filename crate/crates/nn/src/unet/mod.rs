//! Configurable 3D UNet: one encoder over concatenated modality channels, a
//! decoder with skip connections, and three independent segmentation heads.
//!
//! Every encoder and decoder stage is two `3×3×3` convolutions, each followed
//! by instance normalization and a leaky ReLU. Stages after the first
//! downsample with a stride-2 first convolution; decoder stages upsample with
//! a stride-2 `2×2×2` transposed convolution and concatenate `[up; skip]`.
//! Each head is a `1×1×1` convolution to two channels plus a channel softmax;
//! the foreground channel is that label's probability map.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, NnError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor5;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_VERSION};

pub const KERNEL: usize = 3;

/// Nested labels predicted by the three heads, in head order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLabel {
    Gland,
    /// Grade group ≥ 1.
    AnyCancer,
    /// Grade group ≥ 2.
    Cspca,
}

impl HeadLabel {
    pub const ALL: [HeadLabel; 3] = [HeadLabel::Gland, HeadLabel::AnyCancer, HeadLabel::Cspca];

    pub fn name(self) -> &'static str {
        match self {
            HeadLabel::Gland => "gland",
            HeadLabel::AnyCancer => "any_cancer",
            HeadLabel::Cspca => "cspca",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    /// 1 for TRUS-only, 3 for MRI-only, 4 for multimodal.
    pub in_channels: usize,
    pub stages: usize,
    /// Width of the first stage; doubles per stage up to `max_channels`.
    pub base_channels: usize,
    pub max_channels: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            stages: 4,
            base_channels: 16,
            max_channels: 256,
            leaky_slope: 0.01,
            norm_eps: 1e-5,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(NnError::InvalidConfig(msg.to_string()));
        if self.stages < 2 {
            return bad("stages must be at least 2");
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.max_channels == 0 {
            return bad("channel counts must be positive");
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope.is_finite()) {
            return bad("leaky_slope must be finite and non-negative");
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be positive");
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        (self.base_channels << stage.min(30)).min(self.max_channels)
    }

    /// Spatial dims must be multiples of this.
    pub fn size_divisor(&self) -> usize {
        1 << (self.stages - 1)
    }

    pub fn check_patch(&self, spatial: [usize; 3]) -> Result<()> {
        let div = self.size_divisor();
        if spatial.iter().any(|&d| d == 0 || d % div != 0) {
            return shape_err(format!(
                "spatial size {spatial:?} is not a positive multiple of {div} ({} stages)",
                self.stages
            ));
        }
        Ok(())
    }
}

/// Name and shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 5],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor5<f32>,
}

#[derive(Clone, Copy, PartialEq)]
enum Init {
    He { fan_in: usize },
    Head { fan_in: usize },
    Zero,
    One,
}

fn conv_specs(out: &mut Vec<(ParamSpec, Init)>, prefix: &str, cin: usize, cout: usize, k: usize) {
    let fan_in = cin * k * k * k;
    out.push((
        ParamSpec {
            name: format!("{prefix}.weight"),
            shape: [cout, cin, k, k, k],
        },
        if prefix.starts_with("head.") {
            Init::Head { fan_in }
        } else {
            Init::He { fan_in }
        },
    ));
    out.push((
        ParamSpec {
            name: format!("{prefix}.bias"),
            shape: [cout, 1, 1, 1, 1],
        },
        Init::Zero,
    ));
}

fn norm_specs(out: &mut Vec<(ParamSpec, Init)>, prefix: &str, c: usize) {
    for (field, init) in [("gamma", Init::One), ("beta", Init::Zero)] {
        out.push((
            ParamSpec {
                name: format!("{prefix}.{field}"),
                shape: [c, 1, 1, 1, 1],
            },
            init,
        ));
    }
}

fn block_specs(out: &mut Vec<(ParamSpec, Init)>, prefix: &str, cin: usize, cout: usize) {
    conv_specs(out, &format!("{prefix}.conv1"), cin, cout, KERNEL);
    norm_specs(out, &format!("{prefix}.norm1"), cout);
    conv_specs(out, &format!("{prefix}.conv2"), cout, cout, KERNEL);
    norm_specs(out, &format!("{prefix}.norm2"), cout);
}

fn plan_with_init(cfg: &UNetConfig) -> Vec<(ParamSpec, Init)> {
    let mut out = Vec::new();
    let mut cin = cfg.in_channels;
    for s in 0..cfg.stages {
        let c = cfg.stage_channels(s);
        block_specs(&mut out, &format!("enc{s}"), cin, c);
        cin = c;
    }
    for s in (0..cfg.stages - 1).rev() {
        let (deep, c) = (cfg.stage_channels(s + 1), cfg.stage_channels(s));
        out.push((
            ParamSpec {
                name: format!("dec{s}.up.weight"),
                shape: [deep, c, 2, 2, 2],
            },
            Init::He { fan_in: deep },
        ));
        out.push((
            ParamSpec {
                name: format!("dec{s}.up.bias"),
                shape: [c, 1, 1, 1, 1],
            },
            Init::Zero,
        ));
        block_specs(&mut out, &format!("dec{s}"), 2 * c, c);
    }
    let c0 = cfg.stage_channels(0);
    for label in HeadLabel::ALL {
        conv_specs(&mut out, &format!("head.{}", label.name()), c0, 2, 1);
    }
    out
}

/// Ordered parameter list derived from the configuration alone.
pub fn parameter_plan(cfg: &UNetConfig) -> Vec<ParamSpec> {
    plan_with_init(cfg).into_iter().map(|(s, _)| s).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel {
    config: UNetConfig,
    params: Vec<Param>,
}

struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }
}

impl UNetModel {
    /// He-initialized model (gain for leaky ReLU) from a seeded generator.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = 2.0 / (1.0 + config.leaky_slope * config.leaky_slope);
        let params = plan_with_init(&config)
            .into_iter()
            .map(|(spec, init)| {
                let n: usize = spec.shape.iter().product();
                let data: Vec<f32> = match init {
                    Init::Zero => vec![0.0; n],
                    Init::One => vec![1.0; n],
                    Init::He { fan_in } | Init::Head { fan_in } => {
                        let var = if matches!(init, Init::He { .. }) { gain } else { 1.0 };
                        let std = (var / fan_in as f64).sqrt();
                        let normal = Normal::new(0.0, std).expect("finite std");
                        (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
                    }
                };
                Param {
                    tensor: Tensor5::new(spec.shape, data).expect("plan shape"),
                    name: spec.name,
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Assemble a model from explicit parameters, checked against the plan.
    pub fn from_params(config: UNetConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let plan = parameter_plan(&config);
        if plan.len() != params.len() {
            return shape_err(format!(
                "expected {} parameter tensors, got {}",
                plan.len(),
                params.len()
            ));
        }
        for (spec, p) in plan.iter().zip(&params) {
            if spec.name != p.name || spec.shape != p.tensor.shape() {
                return shape_err(format!(
                    "parameter {} has shape {:?}, expected {} with shape {:?}",
                    p.name,
                    p.tensor.shape(),
                    spec.name,
                    spec.shape
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Copy every parameter onto `tape` as a leaf, in plan order.
    pub fn bind(&self, tape: &mut Tape<f32>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), requires_grad))
            .collect()
    }

    fn block(&self, tape: &mut Tape<f32>, cur: &mut Cursor, x: Var, stride: usize) -> Result<Var> {
        let mut h = x;
        for s in [stride, 1] {
            let (w, b) = (cur.take(), cur.take());
            h = tape.conv3d(h, w, Some(b), [s; 3], [KERNEL / 2; 3])?;
            let (g, bt) = (cur.take(), cur.take());
            h = tape.instance_norm(h, g, bt, self.config.norm_eps)?;
            h = tape.leaky_relu(h, self.config.leaky_slope);
        }
        Ok(h)
    }

    /// Forward pass recorded on `tape`; returns the foreground probability
    /// of each head in [`HeadLabel::ALL`] order.
    pub fn forward_on_tape(&self, tape: &mut Tape<f32>, params: &[Var], x: Var) -> Result<[Var; 3]> {
        if params.len() != self.params.len() {
            return shape_err("parameter binding does not match the model");
        }
        let xs = tape.shape(x);
        if xs[1] != self.config.in_channels {
            return shape_err(format!(
                "model expects {} input channels, got {}",
                self.config.in_channels, xs[1]
            ));
        }
        self.config.check_patch([xs[2], xs[3], xs[4]])?;
        let mut cur = Cursor {
            vars: params,
            next: 0,
        };
        let stages = self.config.stages;
        let mut skips = Vec::with_capacity(stages - 1);
        let mut h = x;
        for s in 0..stages {
            h = self.block(tape, &mut cur, h, if s == 0 { 1 } else { 2 })?;
            if s + 1 < stages {
                skips.push(h);
            }
        }
        for s in (0..stages - 1).rev() {
            let (w, b) = (cur.take(), cur.take());
            let up = tape.conv3d_transpose(h, w, Some(b), [2; 3])?;
            let merged = tape.concat_channels(up, skips[s])?;
            h = self.block(tape, &mut cur, merged, 1)?;
        }
        let mut heads = [h; 3];
        for head in heads.iter_mut() {
            let (w, b) = (cur.take(), cur.take());
            let logits = tape.conv3d(h, w, Some(b), [1; 3], [0; 3])?;
            let probs = tape.softmax_channels(logits)?;
            *head = tape.slice_channel(probs, 1)?;
        }
        debug_assert_eq!(cur.next, params.len());
        Ok(heads)
    }

    /// Inference without gradients.
    pub fn forward(&self, x: &Tensor5<f32>) -> Result<[Tensor5<f32>; 3]> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let heads = self.forward_on_tape(&mut tape, &params, xv)?;
        Ok(heads.map(|h| tape.value(h).clone()))
    }
}
