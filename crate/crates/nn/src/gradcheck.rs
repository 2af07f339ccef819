//! Central finite-difference verification of tape gradients in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor5;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Seed for the random projection applied to non-scalar outputs.
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            floor: 1e-6,
            seed: 0x5eed,
        }
    }
}

/// One gradient element whose error exceeded the tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct GradFlag {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub flagged: Vec<GradFlag>,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Compare reverse-mode gradients of `op` against central differences.
///
/// Non-scalar outputs are reduced with a fixed random projection so every
/// output element contributes. Every element of every input is perturbed.
pub fn gradcheck<F>(op: F, inputs: &[Tensor5<f64>], cfg: GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut projection: Option<Vec<f64>> = None;
    let mut evaluate = |values: &[Tensor5<f64>], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), with_grad)).collect();
        let out = op(&mut tape, &vars)?;
        let n = tape.value(out).numel();
        let loss = if n == 1 {
            out
        } else {
            let weights = projection
                .get_or_insert_with(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
                })
                .clone();
            tape.weighted_sum(out, weights)?
        };
        let value = tape.item(loss);
        let mut grads = Vec::new();
        if with_grad {
            tape.backward(loss)?;
            for (v, t) in vars.iter().zip(values) {
                grads.push(
                    tape.grad(*v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; t.numel()]),
                );
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = evaluate(inputs, true)?;
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        flagged: Vec::new(),
        checked: 0,
    };
    let mut work: Vec<Tensor5<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + cfg.step;
            let (plus, _) = evaluate(&work, false)?;
            work[i].data_mut()[e] = orig - cfg.step;
            let (minus, _) = evaluate(&work, false)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[i][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, e));
            }
            if rel > cfg.tolerance {
                report.flagged.push(GradFlag {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
