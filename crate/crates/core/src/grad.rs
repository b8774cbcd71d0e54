//! Closed-form per-step losses and logit gradients.
//!
//! [`StepGradient`] follows the sign convention of the gradient-shape result:
//! entry `i` is `s_f(p_y) (delta_iy - p_i)`, which is the *negative* of
//! `d loss / d z_i`. Adding it to the logits is a descent step, and its
//! correct-class entry is the gradient weight `W_f(p_y)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::objective::{Objective, ThresholdInterval};
use crate::simplex::{pairwise_sum, softmax, Logits, OneHot};

#[derive(Debug, Clone, PartialEq)]
pub struct StepGradient(Vec<f64>);

impl StepGradient {
    pub fn zeros(v: usize) -> Self {
        Self(vec![0.0; v])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }
}

fn check_target(z: &Logits, y: &OneHot) -> Result<()> {
    if y.len() != z.len() {
        return Err(Error::Dimension { expected: z.len(), got: y.len() });
    }
    Ok(())
}

/// `f(softmax(z)_y)`, or 0 when `mask` excludes the token.
pub fn step_loss(
    f: &Objective,
    z: &Logits,
    y: &OneHot,
    mask: Option<&ThresholdInterval>,
) -> Result<f64> {
    check_target(z, y)?;
    let p = softmax(z).as_slice()[y.index()];
    loss_at(f, p, mask)
}

pub(crate) fn loss_at(f: &Objective, p: f64, mask: Option<&ThresholdInterval>) -> Result<f64> {
    match mask {
        Some(m) if !m.contains(p) => Ok(0.0),
        _ => f.eval(p),
    }
}

pub fn step_gradient(
    f: &Objective,
    z: &Logits,
    y: &OneHot,
    mask: Option<&ThresholdInterval>,
) -> Result<StepGradient> {
    check_target(z, y)?;
    let q = softmax(z);
    gradient_at(f, q.as_slice(), y.index(), mask).map(StepGradient)
}

/// Descent direction for a prediction `q` and target index `y`.
pub(crate) fn gradient_at(
    f: &Objective,
    q: &[f64],
    y: usize,
    mask: Option<&ThresholdInterval>,
) -> Result<Vec<f64>> {
    let p = q[y];
    if let Some(m) = mask {
        if !m.contains(p) {
            return Ok(vec![0.0; q.len()]);
        }
    }
    // p_y == 1 leaves every (delta - p_i) at zero; skip s_f, which may blow up there.
    if p >= 1.0 {
        return Ok(vec![0.0; q.len()]);
    }
    let s = f.score(p)?;
    Ok(q
        .iter()
        .enumerate()
        .map(|(i, &qi)| if i == y { s * (1.0 - qi) } else { -s * qi })
        .collect())
}

#[derive(Debug, Clone)]
pub struct SequenceItem {
    pub logits: Vec<Logits>,
    pub targets: Vec<usize>,
}

/// Teacher-forced sequences: one logit vector per target token.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    items: Vec<SequenceItem>,
}

impl SequenceBatch {
    pub fn new(items: Vec<SequenceItem>) -> Result<Self> {
        for (k, item) in items.iter().enumerate() {
            if item.logits.len() != item.targets.len() {
                return Err(Error::param(format!(
                    "item {k}: {} logit vectors but {} targets",
                    item.logits.len(),
                    item.targets.len()
                )));
            }
            for (z, &y) in item.logits.iter().zip(&item.targets) {
                if y >= z.len() {
                    return Err(Error::Index { index: y, len: z.len() });
                }
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[SequenceItem] {
        &self.items
    }

    pub fn n_tokens(&self) -> usize {
        self.items.iter().map(|i| i.targets.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// Sum of per-token losses divided by the total token count.
    pub loss: f64,
    /// `grads[item][step]`, unscaled by the token count.
    pub grads: Vec<Vec<StepGradient>>,
}

pub fn batch_loss_and_grad(
    f: &Objective,
    batch: &SequenceBatch,
    mask: Option<&ThresholdInterval>,
) -> Result<BatchOutput> {
    let n = batch.n_tokens();
    if batch.items.is_empty() || n == 0 {
        return Err(Error::param("batch has no tokens"));
    }
    let per_item: Vec<(Vec<f64>, Vec<StepGradient>)> = batch
        .items
        .par_iter()
        .map(|item| {
            let mut losses = Vec::with_capacity(item.targets.len());
            let mut grads = Vec::with_capacity(item.targets.len());
            for (z, &y) in item.logits.iter().zip(&item.targets) {
                let q = softmax(z);
                let p = q.as_slice()[y];
                losses.push(loss_at(f, p, mask)?);
                grads.push(StepGradient(gradient_at(f, q.as_slice(), y, mask)?));
            }
            Ok((losses, grads))
        })
        .collect::<Result<_>>()?;

    let flat: Vec<f64> = per_item.iter().flat_map(|(l, _)| l.iter().copied()).collect();
    let loss = pairwise_sum(&flat) / n as f64;
    let grads = per_item.into_iter().map(|(_, g)| g).collect();
    Ok(BatchOutput { loss, grads })
}
