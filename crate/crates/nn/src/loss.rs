//! Segmentation losses: binary cross-entropy, soft Dice, and their combination.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor5;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// Loss terms for one label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelLoss {
    pub bce: Var,
    pub dice: Var,
}

/// Output of [`Tape::combined_loss`].
#[derive(Clone, Debug)]
pub struct CombinedLoss {
    pub total: Var,
    pub per_label: Vec<LabelLoss>,
}

impl<T: Scalar> Tape<T> {
    /// Mean binary cross-entropy between probabilities `p` and constant
    /// `{0, 1}` targets of the same shape.
    pub fn bce_loss(&mut self, p: Var, target: &Tensor5<T>) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return shape_err(format!(
                "bce_loss: prediction {:?} vs target {:?}",
                self.shape(p),
                target.shape()
            ));
        }
        let pv = self.value(p).data();
        let mut total = 0.0f64;
        for (&pi, &yi) in pv.iter().zip(target.data()) {
            let pc = pi.as_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let y = yi.as_f64();
            total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let loss = total / pv.len() as f64;
        Ok(self.push(
            Tensor5::scalar(T::from_f64(loss)),
            &[p],
            Op::Bce {
                p,
                target: target.data().to_vec(),
            },
        ))
    }

    /// `1 - (2·Σpy + smooth) / (Σp + Σy + smooth)` over the whole tensor.
    pub fn soft_dice_loss(&mut self, p: Var, target: &Tensor5<T>, smooth: f64) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return shape_err(format!(
                "soft_dice_loss: prediction {:?} vs target {:?}",
                self.shape(p),
                target.shape()
            ));
        }
        let (inter, denom) = dice_sums(self.value(p).data(), target.data());
        let loss = 1.0 - (2.0 * inter + smooth) / (denom + smooth);
        Ok(self.push(
            Tensor5::scalar(T::from_f64(loss)),
            &[p],
            Op::Dice {
                p,
                target: target.data().to_vec(),
                smooth,
            },
        ))
    }

    /// Unweighted mean over labels of `bce + soft_dice`.
    pub fn combined_loss(
        &mut self,
        probs: &[Var],
        targets: &[Tensor5<T>],
        smooth: f64,
    ) -> Result<CombinedLoss> {
        if probs.len() != targets.len() || probs.is_empty() {
            return shape_err(format!(
                "combined_loss: {} predictions for {} targets",
                probs.len(),
                targets.len()
            ));
        }
        let mut per_label = Vec::with_capacity(probs.len());
        let mut acc: Option<Var> = None;
        for (&p, y) in probs.iter().zip(targets) {
            let bce = self.bce_loss(p, y)?;
            let dice = self.soft_dice_loss(p, y, smooth)?;
            let term = self.add(bce, dice)?;
            acc = Some(match acc {
                Some(a) => self.add(a, term)?,
                None => term,
            });
            per_label.push(LabelLoss { bce, dice });
        }
        let total = self.scale(acc.expect("non-empty"), 1.0 / probs.len() as f64);
        Ok(CombinedLoss { total, per_label })
    }

    pub(crate) fn bce_backward(&self, p: Var, target: &[T], upstream: T) -> Vec<T> {
        let pv = self.value(p).data();
        let scale = upstream.as_f64() / pv.len() as f64;
        pv.iter()
            .zip(target)
            .map(|(&pi, &yi)| {
                let p = pi.as_f64();
                if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                    return T::zero();
                }
                let y = yi.as_f64();
                T::from_f64(scale * (-y / p + (1.0 - y) / (1.0 - p)))
            })
            .collect()
    }

    pub(crate) fn dice_backward(&self, p: Var, target: &[T], smooth: f64, upstream: T) -> Vec<T> {
        let pv = self.value(p).data();
        let (inter, denom) = dice_sums(pv, target);
        let num = 2.0 * inter + smooth;
        let den = denom + smooth;
        let up = upstream.as_f64();
        target
            .iter()
            .map(|&yi| T::from_f64(-up * (2.0 * yi.as_f64() * den - num) / (den * den)))
            .collect()
    }
}

/// `(Σ p·y, Σ p + Σ y)` accumulated in 64-bit.
fn dice_sums<T: Scalar>(p: &[T], y: &[T]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut denom = 0.0;
    for (&a, &b) in p.iter().zip(y) {
        let (a, b) = (a.as_f64(), b.as_f64());
        inter += a * b;
        denom += a + b;
    }
    (inter, denom)
}
