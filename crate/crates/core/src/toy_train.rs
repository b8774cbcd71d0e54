//! Desk-scale training of a tabular softmax model.
//!
//! Every context owns a free row of logits, so the model is fully expressive
//! and per-token gradients are exactly the closed-form ones. Updates are
//! preconditioned per context: row `x` moves by `lr * g(x)` where `g(x)` is
//! the unweighted per-context gradient direction. This is the discretised
//! version of the flow whose initial rate [`crate::flow::risk_rate`] computes.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{check_assumptions, pair_noise_bound, split_noise_task, ContextSpec, NoisyPair, Task};
use crate::grad::{gradient_at, loss_at};
use crate::ingest::{classify_continuum, quantile_sorted, ContinuumCuts, Regime};
use crate::objective::{Objective, ThresholdInterval};
use crate::simplex::{dirichlet_sample, pairwise_sum, seeded_rng, softmax_slice, Simplex};

/// Target band for the mean correct-label probability of generated model-strong tasks.
pub const STRONG_BAND: (f64, f64) = (0.75, 0.85);
/// Target band for generated model-intermediate tasks.
pub const INTERMEDIATE_BAND: (f64, f64) = (0.45, 0.60);
const MAX_GENERATION_ATTEMPTS: usize = 1000;
/// Probabilities are floored here before taking logs for the initial logit table.
const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub vocab: usize,
    pub contexts: Vec<ContextSpec>,
    pub theta0: Vec<Vec<f64>>,
    pub eps: f64,
    pub regime_hint: Regime,
}

impl ToyTask {
    /// Wraps a flow task, deriving logits from its base predictions and the
    /// regime hint from the mean correct-label probability.
    pub fn from_task(task: &Task) -> Self {
        let mut contexts = task.contexts().to_vec();
        let mut theta0 = Vec::with_capacity(contexts.len());
        for c in &mut contexts {
            let row: Vec<f64> = c.q0.as_slice().iter().map(|p| p.max(LOG_FLOOR).ln()).collect();
            c.q0 = Simplex::new(softmax_slice(&row)).expect("softmax output is a simplex");
            theta0.push(row);
        }
        let mean: f64 = contexts.iter().map(|c| c.weight * c.q0.as_slice()[c.y_star]).sum();
        Self {
            vocab: task.vocab(),
            eps: task.noise_rate(),
            regime_hint: classify_continuum(mean, ContinuumCuts::default()).tag,
            contexts,
            theta0,
        }
    }

    pub fn to_task(&self) -> Result<Task> {
        Task::new(self.vocab, self.contexts.clone())
    }

    pub fn n_contexts(&self) -> usize {
        self.contexts.len()
    }

    /// Weighted mean of `q0[y*]`.
    pub fn mean_true_prob(&self) -> f64 {
        self.contexts.iter().map(|c| c.weight * c.q0.as_slice()[c.y_star]).sum()
    }

    /// Base-model probability of each context's training label.
    pub fn base_train_probs(&self) -> Vec<f64> {
        self.contexts.iter().map(|c| c.q0.as_slice()[c.y_tilde]).collect()
    }
}

fn concentration_for(mean: f64, vocab: usize) -> f64 {
    mean * (vocab as f64 - 1.0) / (1.0 - mean)
}

/// Generates a labelled tabular task at one end (or the middle) of the continuum.
///
/// Model-weak tasks start from all-zero logits. Model-strong and
/// model-intermediate tasks draw each base prediction from a Dirichlet with
/// extra concentration on the true label, redrawing until the task mean of
/// `q0[y*]` lands in the target band. Training labels are flipped to a
/// uniformly chosen wrong class with probability `eps`.
pub fn make_task(regime: Regime, vocab: usize, n_contexts: usize, eps: f64, seed: u64) -> Result<ToyTask> {
    if vocab < 2 {
        return Err(Error::param(format!("vocabulary size {vocab} must be at least 2")));
    }
    if n_contexts == 0 {
        return Err(Error::param("need at least one context"));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::param(format!("eps must lie in [0, 1], got {eps}")));
    }
    let mut rng = seeded_rng(seed);
    let w = 1.0 / n_contexts as f64;
    let labels: Vec<(usize, usize)> = (0..n_contexts)
        .map(|_| {
            let y_star = rng.random_range(0..vocab);
            let y_tilde = if rng.random::<f64>() < eps {
                let k = rng.random_range(0..vocab - 1);
                if k >= y_star { k + 1 } else { k }
            } else {
                y_star
            };
            (y_star, y_tilde)
        })
        .collect();

    let band = match regime {
        Regime::ModelWeak => None,
        Regime::ModelStrong => Some(STRONG_BAND),
        Regime::ModelIntermediate => Some(INTERMEDIATE_BAND),
    };
    let theta0: Vec<Vec<f64>> = match band {
        None => vec![vec![0.0; vocab]; n_contexts],
        Some((lo, hi)) => {
            let a = concentration_for(0.5 * (lo + hi), vocab);
            let mut found = None;
            for _ in 0..MAX_GENERATION_ATTEMPTS {
                let mut rows = Vec::with_capacity(n_contexts);
                let mut mean = 0.0;
                for &(y_star, _) in &labels {
                    let mut conc = vec![1.0; vocab];
                    conc[y_star] = a;
                    let q = dirichlet_sample(&conc, &mut rng)?;
                    let row: Vec<f64> = q.as_slice().iter().map(|p| p.max(LOG_FLOOR).ln()).collect();
                    mean += w * softmax_slice(&row)[y_star];
                    rows.push(row);
                }
                if (lo..=hi).contains(&mean) {
                    found = Some(rows);
                    break;
                }
            }
            found.ok_or_else(|| {
                Error::param(format!(
                    "could not reach mean true-label probability in [{lo}, {hi}] with V = {vocab}, n = {n_contexts}"
                ))
            })?
        }
    };

    let contexts = labels
        .iter()
        .zip(&theta0)
        .map(|(&(y_star, y_tilde), row)| ContextSpec {
            weight: w,
            q0: Simplex::new(softmax_slice(row)).expect("softmax output is a simplex"),
            y_star,
            y_tilde,
        })
        .collect::<Vec<_>>();
    let realised_eps = contexts.iter().filter(|c| c.is_noisy()).count() as f64 * w;
    Ok(ToyTask { vocab, contexts, theta0, eps: realised_eps, regime_hint: regime })
}

/// A model-strong flow task whose noise rate sits just above the sufficient
/// bound for `rate(f1) >= rate(f2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrongFlowTask {
    pub task: Task,
    pub eps: f64,
    pub eps_bound: f64,
}

/// Relative margin placed between the computed noise bound and the chosen noise rate.
pub const NOISE_MARGIN: f64 = 0.05;

/// Draws base contexts from the model-strong generator, computes the noise
/// rate above which `f1` outpaces `f2` at initialisation, and splits each
/// context into clean and flipped copies at a noise rate just above it.
/// Draws are repeated until the resulting task satisfies the model-strong
/// assumptions and the bound is below one.
pub fn make_strong_flow_task(
    vocab: usize,
    n_base: usize,
    seed: u64,
    f1: &Objective,
    f2: &Objective,
) -> Result<StrongFlowTask> {
    if vocab < 2 || n_base == 0 {
        return Err(Error::param("need V >= 2 and at least one base context"));
    }
    let mut rng = seeded_rng(seed);
    let a = concentration_for(0.5 * (STRONG_BAND.0 + STRONG_BAND.1), vocab);
    let w = 1.0 / n_base as f64;
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let mut pairs = Vec::with_capacity(n_base);
        for _ in 0..n_base {
            let y_star = rng.random_range(0..vocab);
            let k = rng.random_range(0..vocab - 1);
            let y_wrong = if k >= y_star { k + 1 } else { k };
            let mut conc = vec![1.0; vocab];
            conc[y_star] = a;
            pairs.push(NoisyPair { weight: w, q0: dirichlet_sample(&conc, &mut rng)?, y_star, y_wrong });
        }
        let Some(bound) = pair_noise_bound(&pairs, f1, f2)?.2 else { continue };
        let eps = bound + NOISE_MARGIN * bound.max(1e-3);
        if eps >= 1.0 {
            continue;
        }
        let task = split_noise_task(vocab, &pairs, eps)?;
        if check_assumptions(&task).model_strong() {
            return Ok(StrongFlowTask { task, eps, eps_bound: bound });
        }
    }
    Err(Error::param(format!("no model-strong task with a usable noise bound for V = {vocab}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Membership fixed by base-model probabilities before training.
    #[default]
    Base,
    /// Membership re-evaluated on current probabilities every step.
    Current,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub mask: Option<ThresholdInterval>,
    pub mask_source: MaskSource,
    /// Curve sampling period; step 0 and the final step are always recorded.
    pub record_every: usize,
}

impl TrainConfig {
    pub fn new(steps: usize, lr: f64) -> Self {
        Self { steps, lr, mask: None, mask_source: MaskSource::Base, record_every: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Population risk `-sum_x w(x) q_x[y*]`.
    pub risk: f64,
    pub accuracy: f64,
    /// Weighted mean predicted probability of the training labels.
    pub likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub objective_name: String,
    pub steps: usize,
    pub curve: Vec<CurvePoint>,
    pub accuracy_final: f64,
    pub likelihood_final: f64,
    pub loss_final: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,risk,accuracy,likelihood\n");
        for p in &self.curve {
            s.push_str(&format!("{},{:?},{:?},{:?}\n", p.step, p.risk, p.accuracy, p.likelihood));
        }
        s
    }
}

/// Full-batch trainer over a [`ToyTask`].
pub struct Trainer<'a> {
    task: &'a ToyTask,
    objective: &'a Objective,
    mask: Option<ThresholdInterval>,
    mask_source: MaskSource,
    base_keep: Vec<bool>,
    logits: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        task: &'a ToyTask,
        objective: &'a Objective,
        mask: Option<ThresholdInterval>,
        mask_source: MaskSource,
    ) -> Self {
        let base_keep = task
            .contexts
            .iter()
            .map(|c| mask.is_none_or(|m| m.contains(c.q0.as_slice()[c.y_tilde])))
            .collect();
        let logits = task.theta0.clone();
        let probs = logits.iter().map(|r| softmax_slice(r)).collect();
        Self { task, objective, mask, mask_source, base_keep, logits, probs, step: 0 }
    }

    fn effective_mask(&self, x: usize) -> (bool, Option<&ThresholdInterval>) {
        match (self.mask.as_ref(), self.mask_source) {
            (None, _) => (true, None),
            (Some(_), MaskSource::Base) => (self.base_keep[x], None),
            (Some(m), MaskSource::Current) => (true, Some(m)),
        }
    }

    /// Per-context descent directions (zero for masked contexts).
    fn directions(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.task.contexts.len())
            .into_par_iter()
            .map(|x| {
                let c = &self.task.contexts[x];
                let (keep, m) = self.effective_mask(x);
                if !keep {
                    return Ok(vec![0.0; self.task.vocab]);
                }
                gradient_at(self.objective, &self.probs[x], c.y_tilde, m)
            })
            .collect()
    }

    /// `L_f = sum_x w(x) f(q_x[y~])` with masked contexts contributing zero.
    pub fn loss(&self) -> Result<f64> {
        let terms = (0..self.task.contexts.len())
            .map(|x| {
                let c = &self.task.contexts[x];
                let (keep, m) = self.effective_mask(x);
                if !keep {
                    return Ok(0.0);
                }
                Ok(c.weight * loss_at(self.objective, self.probs[x][c.y_tilde], m)?)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(pairwise_sum(&terms))
    }

    /// `sum_x w(x) |g(x)|^2`, the first-order loss decrease per unit step.
    pub fn grad_sq_norm(&self) -> Result<f64> {
        let dirs = self.directions()?;
        let terms: Vec<f64> = dirs
            .iter()
            .zip(&self.task.contexts)
            .map(|(g, c)| c.weight * g.iter().map(|v| v * v).sum::<f64>())
            .collect();
        Ok(pairwise_sum(&terms))
    }

    pub fn step(&mut self, lr: f64) -> Result<()> {
        let dirs = self.directions()?;
        self.logits
            .par_iter_mut()
            .zip(self.probs.par_iter_mut())
            .zip(dirs.par_iter())
            .for_each(|((z, q), g)| {
                for (zi, gi) in z.iter_mut().zip(g) {
                    *zi += lr * gi;
                }
                *q = softmax_slice(z);
            });
        self.step += 1;
        if self.logits.iter().flatten().any(|z| !z.is_finite()) {
            return Err(Error::Numerical(format!("logits diverged at step {}", self.step)));
        }
        Ok(())
    }

    pub fn accuracy(&self) -> f64 {
        let t: Vec<f64> = self
            .task
            .contexts
            .iter()
            .zip(&self.probs)
            .map(|(c, q)| c.weight * q[c.y_star])
            .collect();
        pairwise_sum(&t)
    }

    pub fn likelihood(&self) -> f64 {
        let t: Vec<f64> = self
            .task
            .contexts
            .iter()
            .zip(&self.probs)
            .map(|(c, q)| c.weight * q[c.y_tilde])
            .collect();
        pairwise_sum(&t)
    }

    /// Weighted mean probability of the training label over noisy contexts only.
    pub fn noisy_likelihood(&self) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for (c, q) in self.task.contexts.iter().zip(&self.probs) {
            if c.is_noisy() {
                num += c.weight * q[c.y_tilde];
                den += c.weight;
            }
        }
        (den > 0.0).then(|| num / den)
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    fn point(&self) -> CurvePoint {
        let accuracy = self.accuracy();
        CurvePoint { step: self.step, risk: -accuracy, accuracy, likelihood: self.likelihood() }
    }

    fn checked_loss(&self) -> Result<f64> {
        let l = self.loss();
        match l {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(v) => Err(Error::Numerical(format!("loss became {v} at step {}", self.step))),
            Err(e) => Err(Error::Numerical(format!("loss undefined at step {}: {e}", self.step))),
        }
    }
}

pub fn train(task: &ToyTask, objective: &Objective, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.steps == 0 {
        return Err(Error::param("steps must be at least 1"));
    }
    if !(cfg.lr >= 0.0) || !cfg.lr.is_finite() {
        return Err(Error::param(format!("learning rate must be finite and nonnegative, got {}", cfg.lr)));
    }
    let every = cfg.record_every.max(1);
    let mut t = Trainer::new(task, objective, cfg.mask, cfg.mask_source);
    t.checked_loss()?;
    let mut curve = vec![t.point()];
    for s in 1..=cfg.steps {
        t.step(cfg.lr)?;
        t.checked_loss()?;
        if s % every == 0 || s == cfg.steps {
            curve.push(t.point());
        }
    }
    Ok(TrainReport {
        objective_name: objective.name().to_string(),
        steps: cfg.steps,
        accuracy_final: t.accuracy(),
        likelihood_final: t.likelihood(),
        loss_final: t.checked_loss()?,
        curve,
    })
}

/// First step at which unmasked NLL training pushes the mean training-label
/// probability on noisy contexts above 0.5, or `None` if that does not happen
/// within `max_steps` (or the task has no noisy contexts).
pub fn calibrate_budget(task: &ToyTask, lr: f64, max_steps: usize) -> Result<Option<usize>> {
    let nll = Objective::neg_log_p();
    let mut t = Trainer::new(task, &nll, None, MaskSource::Base);
    if t.noisy_likelihood().is_none() {
        return Ok(None);
    }
    for s in 1..=max_steps {
        t.step(lr)?;
        if t.noisy_likelihood().is_some_and(|l| l > 0.5) {
            return Ok(Some(s));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone)]
pub struct ReversalConfig {
    pub vocab: usize,
    pub n_contexts: usize,
    pub eps: f64,
    pub seeds: Vec<u64>,
    /// Upper bound on the step budget; the calibrated budget is used when it is smaller.
    pub steps: usize,
    pub lr: f64,
    pub prior_leaning: Objective,
    pub prior_averse: Objective,
}

impl ReversalConfig {
    pub fn new(vocab: usize, n_contexts: usize, eps: f64, seeds: Vec<u64>, steps: usize, lr: f64) -> Self {
        Self {
            vocab,
            n_contexts,
            eps,
            seeds,
            steps,
            lr,
            prior_leaning: Objective::alpha(1.0).expect("alpha = 1 is valid"),
            prior_averse: Objective::neg_log_p(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    PriorLeaning,
    PriorAverse,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReversalRow {
    pub seed: u64,
    pub regime: Regime,
    pub budget: usize,
    pub accuracy_leaning: f64,
    pub accuracy_averse: f64,
    pub winner: Winner,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReversalSummary {
    pub leaning: String,
    pub averse: String,
    pub rows: Vec<ReversalRow>,
}

impl ReversalSummary {
    pub fn wins(&self, regime: Regime, who: Winner) -> usize {
        self.rows.iter().filter(|r| r.regime == regime && r.winner == who).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,regime,budget,accuracy_leaning,accuracy_averse,winner\n");
        for r in &self.rows {
            let w = match r.winner {
                Winner::PriorLeaning => self.leaning.as_str(),
                Winner::PriorAverse => self.averse.as_str(),
                Winner::Tie => "tie",
            };
            s.push_str(&format!(
                "{},{},{},{:?},{:?},{}\n",
                r.seed,
                r.regime.short(),
                r.budget,
                r.accuracy_leaning,
                r.accuracy_averse,
                w
            ));
        }
        s
    }
}

/// Trains the prior-leaning and prior-averse objectives on a model-strong and
/// a model-weak task per seed and records which ends with higher expected accuracy.
pub fn reversal_experiment(cfg: &ReversalConfig) -> Result<ReversalSummary> {
    if cfg.seeds.len() < 10 {
        return Err(Error::param(format!("need at least 10 seeds, got {}", cfg.seeds.len())));
    }
    let jobs: Vec<(u64, Regime)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| [(s, Regime::ModelStrong), (s, Regime::ModelWeak)])
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(seed, regime)| {
            let task = make_task(regime, cfg.vocab, cfg.n_contexts, cfg.eps, seed)?;
            let budget = calibrate_budget(&task, cfg.lr, cfg.steps)?.unwrap_or(cfg.steps);
            let tc = TrainConfig { record_every: budget, ..TrainConfig::new(budget, cfg.lr) };
            let a = train(&task, &cfg.prior_leaning, &tc)?.accuracy_final;
            let b = train(&task, &cfg.prior_averse, &tc)?.accuracy_final;
            let winner = if a > b {
                Winner::PriorLeaning
            } else if b > a {
                Winner::PriorAverse
            } else {
                Winner::Tie
            };
            Ok(ReversalRow { seed, regime, budget, accuracy_leaning: a, accuracy_averse: b, winner })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReversalSummary {
        leaning: cfg.prior_leaning.name().to_string(),
        averse: cfg.prior_averse.name().to_string(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub accuracy: f64,
    pub likelihood: f64,
}

/// One run of `(1 - p^alpha) / alpha` per alpha on a shared task, sorted by alpha.
pub fn alpha_sweep(task: &ToyTask, alphas: &[f64], steps: usize, lr: f64) -> Result<Vec<SweepRow>> {
    let mut sorted = alphas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tc = TrainConfig { record_every: steps.max(1), ..TrainConfig::new(steps, lr) };
    sorted
        .par_iter()
        .map(|&alpha| {
            let f = Objective::alpha(alpha)?;
            let r = train(task, &f, &tc)?;
            Ok(SweepRow { alpha, accuracy: r.accuracy_final, likelihood: r.likelihood_final })
        })
        .collect()
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("alpha,accuracy,likelihood\n");
    for r in rows {
        s.push_str(&format!("{:?},{:?},{:?}\n", r.alpha, r.accuracy, r.likelihood));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSide {
    /// Keep tokens at or above the percentile: `I = [Q_P, 1]`.
    BottomKeep,
    /// Keep tokens at or below the percentile: `I = [0, Q_P]`.
    TopKeep,
}

impl std::str::FromStr for AblationSide {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bottom_keep" => Ok(AblationSide::BottomKeep),
            "top_keep" => Ok(AblationSide::TopKeep),
            _ => Err(Error::param(format!("unknown side {s:?}; use bottom_keep or top_keep"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationRow {
    pub percentile: f64,
    pub lo: f64,
    pub hi: f64,
    pub accuracy: f64,
    pub likelihood: f64,
    pub kept_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileAblation {
    pub objective: String,
    pub side: AblationSide,
    /// Final accuracy of the same objective trained without any mask.
    pub baseline_accuracy: f64,
    pub rows: Vec<AblationRow>,
}

impl QuantileAblation {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("percentile,lo,hi,accuracy,likelihood,kept_fraction\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:?},{:?},{:?},{:?},{:?},{:?}\n",
                r.percentile, r.lo, r.hi, r.accuracy, r.likelihood, r.kept_fraction
            ));
        }
        s
    }
}

/// Hard-threshold ablation with thresholds taken from base-model quantiles of
/// the training-label probabilities.
pub fn quantile_ablation(
    task: &ToyTask,
    objective: &Objective,
    percentiles: &[f64],
    side: AblationSide,
    steps: usize,
    lr: f64,
) -> Result<QuantileAblation> {
    let base = task.base_train_probs();
    let mut sorted = base.clone();
    sorted.sort_by(f64::total_cmp);
    let plain = TrainConfig { record_every: steps.max(1), ..TrainConfig::new(steps, lr) };
    let baseline_accuracy = train(task, objective, &plain)?.accuracy_final;

    let rows = percentiles
        .par_iter()
        .map(|&p| {
            let q = quantile_sorted(&sorted, p)?;
            let interval = match side {
                AblationSide::BottomKeep => ThresholdInterval::new(q, 1.0)?,
                AblationSide::TopKeep => ThresholdInterval::new(0.0, q)?,
            };
            let kept = base.iter().filter(|&&b| interval.contains(b)).count();
            let tc = TrainConfig { mask: Some(interval), ..plain.clone() };
            let r = train(task, objective, &tc)?;
            Ok(AblationRow {
                percentile: p,
                lo: interval.lo(),
                hi: interval.hi(),
                accuracy: r.accuracy_final,
                likelihood: r.likelihood_final,
                kept_fraction: kept as f64 / base.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantileAblation { objective: objective.name().to_string(), side, baseline_accuracy, rows })
}
