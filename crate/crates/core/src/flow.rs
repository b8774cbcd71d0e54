//! Initial risk rates under gradient flow for the tabular softmax model.
//!
//! Each context `x` carries a base prediction `q`, a true label `y*` and a
//! training label `y~`. With one-hot true and training distributions the
//! risk gradient in logit space is `v_* = (r.q) q - r*q` and the objective
//! gradient is `v_i = beta - S q`. The feature map is preconditioned so that
//! `Phi^T Phi = I`, which makes the initial risk rate `sum_x w(x) v_*.v_i`.
//!
//! The finite-difference route realises the same preconditioning literally:
//! every context owns its logit row and a step of size `eta` moves row `x`
//! by `-eta v_i(x)`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::simplex::{dot, jacobian_vec_unchecked, pairwise_sum, seeded_rng, Simplex};

pub const WEIGHT_SUM_TOL: f64 = 1e-9;
/// Step sizes used by [`fd_risk_rate`] unless the caller supplies others.
pub const DEFAULT_ETAS: [f64; 3] = [1e-2, 1e-3, 1e-4];
/// Maximum tolerated gap between analytic and finite-difference rates.
pub const FD_AGREEMENT_TOL: f64 = 1e-4;

/// Thresholds on `q_{y*} + q_{y~}` taken from the model-capability assumptions.
pub const MS_MASS_CUT: f64 = 0.55;
pub const MS_BAND_HI: f64 = 0.95;
pub const MS_LOW_CUT: f64 = 0.50;
pub const MS_MIN_K: f64 = 0.70;
/// Constant bounding `q_i q_j (-q_i - q_j + |q|^2)` over the simplex.
pub fn ineq2_max_value() -> f64 {
    (11.0 * 33f64.sqrt() - 59.0) / 768.0
}
/// Coordinate value `(9 - sqrt 33) / 24` at which the bound is attained.
pub fn ineq2_argmax_coord() -> f64 {
    (9.0 - 33f64.sqrt()) / 24.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub weight: f64,
    pub q0: Simplex,
    pub y_star: usize,
    pub y_tilde: usize,
}

impl ContextSpec {
    pub fn is_noisy(&self) -> bool {
        self.y_star != self.y_tilde
    }

    /// Probability mass the base prediction puts on `{y*, y~}`.
    pub fn label_mass(&self) -> f64 {
        let q = self.q0.as_slice();
        if self.is_noisy() {
            q[self.y_star] + q[self.y_tilde]
        } else {
            q[self.y_star]
        }
    }
}

/// A weighted collection of contexts; the JSON task-file format.
///
/// ```json
/// {"V": 3, "contexts": [{"weight": 1.0, "q0": [0.2, 0.3, 0.5], "y_star": 2, "y_tilde": 2}]}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTask")]
pub struct Task {
    #[serde(rename = "V")]
    vocab: usize,
    contexts: Vec<ContextSpec>,
}

#[derive(Deserialize)]
struct RawTask {
    #[serde(rename = "V")]
    vocab: usize,
    contexts: Vec<ContextSpec>,
}

impl TryFrom<RawTask> for Task {
    type Error = Error;
    fn try_from(raw: RawTask) -> Result<Self> {
        Task::new(raw.vocab, raw.contexts)
    }
}

impl Task {
    pub fn new(vocab: usize, contexts: Vec<ContextSpec>) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::Task(format!("vocabulary size {vocab} must be at least 2")));
        }
        if contexts.is_empty() {
            return Err(Error::Task("task has no contexts".into()));
        }
        for (k, c) in contexts.iter().enumerate() {
            if c.q0.len() != vocab {
                return Err(Error::Task(format!(
                    "context {k}: q0 has length {}, expected {vocab}",
                    c.q0.len()
                )));
            }
            if c.y_star >= vocab || c.y_tilde >= vocab {
                return Err(Error::Task(format!("context {k}: label out of range")));
            }
            if !(c.weight >= 0.0) || !c.weight.is_finite() {
                return Err(Error::Task(format!("context {k}: weight {} is invalid", c.weight)));
            }
        }
        let total: f64 = contexts.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Task(format!("context weights sum to {total}, expected 1")));
        }
        Ok(Self { vocab, contexts })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn contexts(&self) -> &[ContextSpec] {
        &self.contexts
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Weighted fraction of contexts whose training label is wrong.
    pub fn noise_rate(&self) -> f64 {
        self.contexts.iter().filter(|c| c.is_noisy()).map(|c| c.weight).sum()
    }

    /// Model-weak task: uniform predictions, one clean and one noisy context
    /// weighted `1 - eps` and `eps`.
    pub fn model_weak(vocab: usize, eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::param(format!("eps must lie in [0, 1], got {eps}")));
        }
        let q = Simplex::uniform(vocab)?;
        Task::new(
            vocab,
            vec![
                ContextSpec { weight: 1.0 - eps, q0: q.clone(), y_star: 0, y_tilde: 0 },
                ContextSpec { weight: eps, q0: q, y_star: 0, y_tilde: 1 % vocab },
            ],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscrepancyVectors {
    pub v_star: Vec<f64>,
    pub beta: Vec<f64>,
    /// `S_f = <beta, 1>`.
    pub s_f: f64,
    pub v_i: Vec<f64>,
}

pub fn discrepancy(ctx: &ContextSpec, f: &Objective) -> Result<DiscrepancyVectors> {
    let q = ctx.q0.as_slice();
    let mut r = vec![0.0; q.len()];
    r[ctx.y_star] = 1.0;
    // J(q)(-r) = (r.q) q - r*q
    let v_star: Vec<f64> = jacobian_vec_unchecked(q, &r).into_iter().map(|x| -x).collect();

    let mut beta = vec![0.0; q.len()];
    // q f'(q) = -s_f(q); the score form stays finite at q = 0.
    beta[ctx.y_tilde] = -f.score(q[ctx.y_tilde])?;
    let s_f: f64 = beta.iter().sum();
    let v_i = beta.iter().zip(q).map(|(b, qi)| b - s_f * qi).collect();
    Ok(DiscrepancyVectors { v_star, beta, s_f, v_i })
}

/// Inner-product metric on logit space. The analytic theory uses the identity.
#[derive(Debug, Clone, Default)]
pub enum Gram {
    #[default]
    Identity,
    /// Row-major `V x V` matrix `Phi^T Phi`.
    Matrix(Vec<f64>),
}

impl Gram {
    fn inner(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Gram::Identity => Ok(dot(a, b)),
            Gram::Matrix(m) => {
                let v = a.len();
                if m.len() != v * v {
                    return Err(Error::Dimension { expected: v * v, got: m.len() });
                }
                Ok((0..v).map(|i| a[i] * dot(&m[i * v..(i + 1) * v], b)).sum())
            }
        }
    }
}

/// `sum_x w(x) v_*(x)^T v_i(x)`: initial rate of risk decrease under the flow of `f`.
pub fn risk_rate(task: &Task, f: &Objective) -> Result<f64> {
    risk_rate_with(task, f, &Gram::Identity)
}

pub fn risk_rate_with(task: &Task, f: &Objective, gram: &Gram) -> Result<f64> {
    let terms: Vec<f64> = task
        .contexts
        .par_iter()
        .map(|c| {
            let d = discrepancy(c, f)?;
            Ok(c.weight * gram.inner(&d.v_star, &d.v_i)?)
        })
        .collect::<Result<_>>()?;
    Ok(pairwise_sum(&terms))
}

/// Population risk after one preconditioned gradient step of size `eta`,
/// reported as `R(theta_0) - R(theta_1)`.
fn risk_drop(task: &Task, f: &Objective, eta: f64) -> Result<f64> {
    let terms: Vec<f64> = task
        .contexts
        .par_iter()
        .map(|c| {
            let q = c.q0.as_slice();
            let d = discrepancy(c, f)?;
            // softmax(z - eta v) = q * exp(-eta v) / normaliser
            let unnorm: Vec<f64> =
                q.iter().zip(&d.v_i).map(|(qi, vi)| qi * (-eta * vi).exp()).collect();
            let z: f64 = unnorm.iter().sum();
            let after = unnorm[c.y_star] / z;
            Ok(c.weight * (after - q[c.y_star]))
        })
        .collect::<Result<_>>()?;
    Ok(pairwise_sum(&terms))
}

/// Polynomial (Neville) extrapolation of `(h_k, value_k)` to `h = 0`.
pub fn richardson_to_zero(h: &[f64], values: &[f64]) -> f64 {
    let mut p = values.to_vec();
    let n = p.len();
    for m in 1..n {
        for i in 0..n - m {
            p[i] = (h[i] * p[i + 1] - h[i + m] * p[i]) / (h[i] - h[i + m]);
        }
    }
    p[0]
}

/// Finite-difference estimate of [`risk_rate`] from explicit gradient steps,
/// Richardson-extrapolated over `etas`.
pub fn fd_risk_rate(task: &Task, f: &Objective, etas: &[f64]) -> Result<f64> {
    if etas.len() < 3 {
        return Err(Error::param("fd_risk_rate needs at least 3 step sizes"));
    }
    if etas.iter().any(|e| !(*e > 0.0)) || etas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::param("step sizes must be positive and strictly decreasing"));
    }
    let quotients = etas
        .iter()
        .map(|&eta| Ok(risk_drop(task, f, eta)? / eta))
        .collect::<Result<Vec<f64>>>()?;
    Ok(richardson_to_zero(etas, &quotients))
}

/// `rate(f1) - rate(f2)` for uniform predictions over `V` classes with label-noise rate `eps`.
pub fn mw_closed_form(vocab: usize, eps: f64, f1: &Objective, f2: &Objective) -> Result<f64> {
    if vocab < 2 {
        return Err(Error::param("vocabulary size must be at least 2"));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::param(format!("eps must lie in [0, 1], got {eps}")));
    }
    let v = vocab as f64;
    let p = 1.0 / v;
    let dd = f2.deriv(p)? - f1.deriv(p)?;
    Ok(dd / (v * v * v) * ((v - 1.0) * (1.0 - eps) - eps))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AssumptionCheck {
    /// Weighted fraction of contexts with label mass at least 0.55.
    pub k_hat: f64,
    /// Weighted fraction with label mass in [0.55, 0.95].
    pub band_mass: f64,
    /// Weighted fraction with label mass at most 0.50.
    pub low_mass: f64,
    pub alpha_hat: f64,
}

impl AssumptionCheck {
    /// Model-strong conditions: `k_hat >= 0.70` and the trainable-model band
    /// with coefficient at least 1.
    pub fn model_strong(&self) -> bool {
        self.k_hat >= MS_MIN_K && self.band_mass > 0.0 && self.band_mass >= self.low_mass
    }
}

pub fn check_assumptions(task: &Task) -> AssumptionCheck {
    let (mut k, mut band, mut low) = (0.0, 0.0, 0.0);
    for c in &task.contexts {
        let s = c.label_mass();
        if s >= MS_MASS_CUT {
            k += c.weight;
        }
        if (MS_MASS_CUT..=MS_BAND_HI).contains(&s) {
            band += c.weight;
        }
        if s <= MS_LOW_CUT {
            low += c.weight;
        }
    }
    let clamp = |x: f64| x.clamp(0.0, 1.0);
    AssumptionCheck {
        k_hat: clamp(k),
        band_mass: clamp(band),
        low_mass: clamp(low),
        alpha_hat: band / low.max(1e-12),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowRegime {
    ModelStrong,
    ModelWeak,
    Unclassified,
}

pub fn classify_task(task: &Task) -> (FlowRegime, AssumptionCheck) {
    let check = check_assumptions(task);
    let u = 1.0 / task.vocab as f64;
    let uniform = task
        .contexts
        .iter()
        .all(|c| c.q0.as_slice().iter().all(|&p| (p - u).abs() <= 1e-12));
    let regime = if uniform {
        FlowRegime::ModelWeak
    } else if check.model_strong() {
        FlowRegime::ModelStrong
    } else {
        FlowRegime::Unclassified
    };
    (regime, check)
}

/// Split of `rate(f1) - rate(f2)` into clean- and noisy-label parts:
/// `(1 - eps) A + eps B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseDecomposition {
    /// Mean clean-context term `q_{y*}^2 (f2' - f1')(q_{y*}) |e_{y*} - q|^2`.
    pub clean_mean: Option<f64>,
    /// Mean noisy-context term `q_{y~} q_{y*} (f2' - f1')(q_{y~}) (-q_{y*} - q_{y~} + |q|^2)`.
    pub noisy_mean: Option<f64>,
    pub eps: f64,
    /// Noise rate above which `rate(f1) >= rate(f2)`: `|A| / (B - A)`.
    pub eps_bound: Option<f64>,
}

fn clean_term(q: &[f64], y_star: usize, f1: &Objective, f2: &Objective) -> Result<f64> {
    let p = q[y_star];
    let dist: f64 =
        q.iter().enumerate().map(|(k, &x)| if k == y_star { (1.0 - x).powi(2) } else { x * x }).sum();
    // q (f2' - f1')(q) = s_f1(q) - s_f2(q)
    Ok(p * (f1.score(p)? - f2.score(p)?) * dist)
}

fn noisy_term(q: &[f64], y_star: usize, y_tilde: usize, f1: &Objective, f2: &Objective) -> Result<f64> {
    let pt = q[y_tilde];
    let ps = q[y_star];
    let norm: f64 = q.iter().map(|x| x * x).sum();
    Ok(ps * (f1.score(pt)? - f2.score(pt)?) * (-ps - pt + norm))
}

fn bound_from(a: f64, b: f64) -> Option<f64> {
    (b > 0.0 && a <= 0.0).then(|| a.abs() / (b - a))
}

pub fn noise_decomposition(task: &Task, f1: &Objective, f2: &Objective) -> Result<NoiseDecomposition> {
    let (mut a, mut wa, mut b, mut wb) = (0.0, 0.0, 0.0, 0.0);
    for c in &task.contexts {
        let q = c.q0.as_slice();
        if c.is_noisy() {
            b += c.weight * noisy_term(q, c.y_star, c.y_tilde, f1, f2)?;
            wb += c.weight;
        } else {
            a += c.weight * clean_term(q, c.y_star, f1, f2)?;
            wa += c.weight;
        }
    }
    let clean_mean = (wa > 0.0).then(|| a / wa);
    let noisy_mean = (wb > 0.0).then(|| b / wb);
    let eps_bound = match (clean_mean, noisy_mean) {
        (Some(a), Some(b)) => bound_from(a, b),
        _ => None,
    };
    Ok(NoiseDecomposition { clean_mean, noisy_mean, eps: wb, eps_bound })
}

/// A base context together with the wrong label used when its training label is flipped.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyPair {
    pub weight: f64,
    pub q0: Simplex,
    pub y_star: usize,
    pub y_wrong: usize,
}

/// `(A, B, bound)` for a set of base contexts before any noise rate is chosen.
pub fn pair_noise_bound(
    pairs: &[NoisyPair],
    f1: &Objective,
    f2: &Objective,
) -> Result<(f64, f64, Option<f64>)> {
    let total: f64 = pairs.iter().map(|p| p.weight).sum();
    let (mut a, mut b) = (0.0, 0.0);
    for p in pairs {
        let q = p.q0.as_slice();
        a += p.weight * clean_term(q, p.y_star, f1, f2)?;
        b += p.weight * noisy_term(q, p.y_star, p.y_wrong, f1, f2)?;
    }
    let (a, b) = (a / total, b / total);
    Ok((a, b, bound_from(a, b)))
}

/// Splits every base context into a clean copy (weight `(1 - eps) w`) and a
/// flipped copy (weight `eps w`), so the label noise is exactly `eps` and
/// independent of the context.
pub fn split_noise_task(vocab: usize, pairs: &[NoisyPair], eps: f64) -> Result<Task> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::param(format!("eps must lie in [0, 1], got {eps}")));
    }
    let mut contexts = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        if p.y_wrong == p.y_star {
            return Err(Error::param("wrong label must differ from the true label"));
        }
        contexts.push(ContextSpec {
            weight: p.weight * (1.0 - eps),
            q0: p.q0.clone(),
            y_star: p.y_star,
            y_tilde: p.y_star,
        });
        contexts.push(ContextSpec {
            weight: p.weight * eps,
            q0: p.q0.clone(),
            y_star: p.y_star,
            y_tilde: p.y_wrong,
        });
    }
    Task::new(vocab, contexts)
}

#[derive(Debug, Clone)]
pub struct CompareOptions {
    /// Compute and cross-check finite-difference rates.
    pub finite_difference: bool,
    pub etas: Vec<f64>,
    /// Interior grid used to check `f2' - f1' < 0`.
    pub hypothesis_grid: usize,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self { finite_difference: true, etas: DEFAULT_ETAS.to_vec(), hypothesis_grid: 999 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowReport {
    pub f1: String,
    pub f2: String,
    pub rate_f1: f64,
    pub rate_f2: f64,
    pub fd_rate_f1: Option<f64>,
    pub fd_rate_f2: Option<f64>,
    pub regime: FlowRegime,
    /// `rate_f1 >= rate_f2` for model-strong, `<=` for model-weak, false when unclassified.
    pub ordering_holds: bool,
    pub assumptions: AssumptionCheck,
    pub noise: NoiseDecomposition,
    /// Largest `|q_{y~} (f2' - f1')(q_{y~})|` over contexts with `q_{y~} <= 0.55`.
    pub c_hat: Option<f64>,
    /// Smallest `|q_{y~} (f2' - f1')(q_{y~})|` over contexts with `q_{y~}` in `[0.55, 0.95]`.
    pub d_hat: Option<f64>,
    pub c_below_10d: Option<bool>,
}

/// Checks `f2'(p) - f1'(p) < 0` on an interior grid. Identical derivatives
/// (`f1 == f2`) are accepted as the degenerate case.
pub fn check_flow_hypothesis(f1: &Objective, f2: &Objective, grid: usize) -> Result<()> {
    let grid = grid.max(1);
    let mut diffs = Vec::with_capacity(grid);
    for k in 1..=grid {
        let p = k as f64 / (grid + 1) as f64;
        diffs.push((p, f2.deriv(p)? - f1.deriv(p)?));
    }
    if diffs.iter().all(|&(_, d)| d == 0.0) {
        return Ok(());
    }
    if let Some(&(p, d)) = diffs.iter().find(|&&(_, d)| !(d < 0.0)) {
        return Err(Error::Precondition(format!(
            "f2' - f1' must be negative on (0,1); at p = {p} it is {d} ({} vs {})",
            f2.name(),
            f1.name()
        )));
    }
    Ok(())
}

pub fn compare_regimes(
    task: &Task,
    f1: &Objective,
    f2: &Objective,
    opts: &CompareOptions,
) -> Result<FlowReport> {
    check_flow_hypothesis(f1, f2, opts.hypothesis_grid)?;
    let rate_f1 = risk_rate(task, f1)?;
    let rate_f2 = risk_rate(task, f2)?;
    let (fd_rate_f1, fd_rate_f2) = if opts.finite_difference {
        let fd1 = fd_risk_rate(task, f1, &opts.etas)?;
        let fd2 = fd_risk_rate(task, f2, &opts.etas)?;
        for (name, a, fd) in [(f1.name(), rate_f1, fd1), (f2.name(), rate_f2, fd2)] {
            if !((a - fd).abs() <= FD_AGREEMENT_TOL) {
                return Err(Error::Numerical(format!(
                    "{name}: analytic rate {a} and finite-difference rate {fd} disagree"
                )));
            }
        }
        (Some(fd1), Some(fd2))
    } else {
        (None, None)
    };

    let (regime, assumptions) = classify_task(task);
    let ordering_holds = match regime {
        FlowRegime::ModelStrong => rate_f1 >= rate_f2,
        FlowRegime::ModelWeak => rate_f1 <= rate_f2,
        FlowRegime::Unclassified => false,
    };

    let mut c_hat: Option<f64> = None;
    let mut d_hat: Option<f64> = None;
    for c in &task.contexts {
        let p = c.q0.as_slice()[c.y_tilde];
        let m = (f1.score(p)? - f2.score(p)?).abs();
        if p <= MS_MASS_CUT {
            c_hat = Some(c_hat.map_or(m, |x| x.max(m)));
        }
        if (MS_MASS_CUT..=MS_BAND_HI).contains(&p) {
            d_hat = Some(d_hat.map_or(m, |x| x.min(m)));
        }
    }
    let c_below_10d = c_hat.zip(d_hat).map(|(c, d)| c < 10.0 * d);

    Ok(FlowReport {
        f1: f1.name().to_string(),
        f2: f2.name().to_string(),
        rate_f1,
        rate_f2,
        fd_rate_f1,
        fd_rate_f2,
        regime,
        ordering_holds,
        assumptions,
        noise: noise_decomposition(task, f1, f2)?,
        c_hat,
        d_hat,
        c_below_10d,
    })
}

/// `2 q_j^2 (1 - q_j)^2 - q_j^2 |e_j - q|^2`, nonnegative on the simplex.
pub fn ineq1_gap(q: &Simplex, j: usize) -> Result<f64> {
    let qj = q.get(j)?;
    let dist: f64 = q
        .as_slice()
        .iter()
        .enumerate()
        .map(|(k, &x)| if k == j { (1.0 - x).powi(2) } else { x * x })
        .sum();
    Ok(2.0 * qj * qj * (1.0 - qj).powi(2) - qj * qj * dist)
}

/// `F(q) = q_i q_j (-q_i - q_j + |q|^2)`.
pub fn ineq2_objective(q: &[f64], i: usize, j: usize) -> f64 {
    let norm: f64 = q.iter().map(|x| x * x).sum();
    q[i] * q[j] * (-q[i] - q[j] + norm)
}

/// RHS minus LHS of `-q_i - q_j + |q|^2 <= 1 + 2 (q_i + q_j)^2 - 3 (q_i + q_j)`.
/// Requires the left side to be nonpositive.
pub fn ineq3_gap(q: &Simplex, i: usize, j: usize) -> Result<f64> {
    if i == j {
        return Err(Error::param("indices must be distinct"));
    }
    let (qi, qj) = (q.get(i)?, q.get(j)?);
    let lhs = -qi - qj + q.norm_sq();
    if lhs > 0.0 {
        return Err(Error::Precondition(format!(
            "-q_i - q_j + |q|^2 = {lhs} is positive"
        )));
    }
    let u = qi + qj;
    Ok(1.0 + 2.0 * u * u - 3.0 * u - lhs)
}

#[derive(Debug, Clone)]
pub struct Ineq2SearchOptions {
    pub grid_resolution: usize,
    pub random_starts: usize,
    /// Also refine from the known maximiser.
    pub seed_analytic: bool,
    pub seed: u64,
}

impl Default for Ineq2SearchOptions {
    fn default() -> Self {
        Self { grid_resolution: 24, random_starts: 1000, seed_analytic: true, seed: 0x5eed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ineq2Search {
    pub max_value: f64,
    pub argmax: Vec<f64>,
    /// Largest value seen at any evaluated point (grid, starts, and refinement steps).
    pub max_evaluated: f64,
    pub evaluations: usize,
}

struct Tracker {
    best: f64,
    best_q: Vec<f64>,
    max_seen: f64,
    evals: usize,
}

impl Tracker {
    fn eval(&mut self, q: &[f64]) -> f64 {
        let v = ineq2_objective(q, 0, 1);
        self.evals += 1;
        if v > self.max_seen {
            self.max_seen = v;
        }
        if v > self.best {
            self.best = v;
            self.best_q = q.to_vec();
        }
        v
    }
}

/// Hill-climbs by moving mass between coordinate pairs, halving the step
/// whenever no move improves `F`.
fn refine(q: &mut [f64], tracker: &mut Tracker) {
    let v = q.len();
    let mut current = tracker.eval(q);
    let mut delta: f64 = 0.1;
    while delta > 1e-12 {
        let mut improved = true;
        while improved {
            improved = false;
            for a in 0..v {
                for b in 0..v {
                    if a == b || q[a] <= 0.0 {
                        continue;
                    }
                    let t = delta.min(q[a]);
                    q[a] -= t;
                    q[b] += t;
                    let val = tracker.eval(q);
                    if val > current {
                        current = val;
                        improved = true;
                    } else {
                        q[a] += t;
                        q[b] -= t;
                    }
                }
            }
        }
        delta *= 0.5;
    }
}

fn compositions(total: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut dyn FnMut(&[usize])) {
    if parts == 1 {
        prefix.push(total);
        out(prefix);
        prefix.pop();
        return;
    }
    for k in 0..=total {
        prefix.push(k);
        compositions(total - k, parts - 1, prefix, out);
        prefix.pop();
    }
}

/// Maximises `F(q) = q_0 q_1 (-q_0 - q_1 + |q|^2)` over the simplex in `V <= 6`
/// dimensions: an exhaustive grid, then local refinement from the best grid
/// point, random Dirichlet(1) starts, and optionally the analytic maximiser.
pub fn ineq2_max_search(vocab: usize, opts: &Ineq2SearchOptions) -> Result<Ineq2Search> {
    if !(3..=6).contains(&vocab) {
        return Err(Error::param(format!("ineq2 search needs 3 <= V <= 6, got {vocab}")));
    }
    if opts.grid_resolution == 0 {
        return Err(Error::param("grid resolution must be positive"));
    }
    let mut tracker = Tracker {
        best: f64::NEG_INFINITY,
        best_q: vec![],
        max_seen: f64::NEG_INFINITY,
        evals: 0,
    };
    let res = opts.grid_resolution;
    compositions(res, vocab, &mut Vec::with_capacity(vocab), &mut |parts| {
        let q: Vec<f64> = parts.iter().map(|&k| k as f64 / res as f64).collect();
        tracker.eval(&q);
    });

    let mut starts = vec![tracker.best_q.clone()];
    if opts.seed_analytic {
        let x = ineq2_argmax_coord();
        let mut q = vec![0.0; vocab];
        q[0] = x;
        q[1] = x;
        q[2] = 1.0 - 2.0 * x;
        starts.push(q);
    }
    let mut rng = seeded_rng(opts.seed);
    for _ in 0..opts.random_starts {
        let mut q: Vec<f64> = (0..vocab).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let s: f64 = q.iter().sum();
        q.iter_mut().for_each(|x| *x /= s);
        starts.push(q);
    }
    for mut q in starts {
        refine(&mut q, &mut tracker);
    }
    Ok(Ineq2Search {
        max_value: tracker.best,
        argmax: tracker.best_q,
        max_evaluated: tracker.max_seen,
        evaluations: tracker.evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(q: &[f64], ys: usize, yt: usize, w: f64) -> ContextSpec {
        ContextSpec { weight: w, q0: Simplex::new(q.to_vec()).unwrap(), y_star: ys, y_tilde: yt }
    }

    #[test]
    fn discrepancy_examples() {
        let c = ctx(&[0.5, 0.5], 0, 0, 1.0);
        let d = discrepancy(&c, &Objective::alpha(1.0).unwrap()).unwrap();
        assert_eq!(d.v_star, vec![-0.25, 0.25]);
        assert_eq!(d.v_i, vec![-0.25, 0.25]);

        let c = ctx(&[1.0, 0.0, 0.0], 0, 0, 1.0);
        let d = discrepancy(&c, &Objective::neg_log_p()).unwrap();
        assert!(d.v_star.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn discrepancy_identities() {
        let c = ctx(&[0.1, 0.6, 0.3], 1, 2, 1.0);
        for f in Objective::builtins() {
            let d = discrepancy(&c, &f).unwrap();
            let q = c.q0.as_slice();
            let rq = q[1];
            for k in 0..3 {
                let r = if k == 1 { 1.0 } else { 0.0 };
                assert!((d.v_star[k] - (rq * q[k] - r * q[k])).abs() < 1e-12);
                assert!((d.v_i[k] - (d.beta[k] - d.s_f * q[k])).abs() < 1e-12);
                // one-hot T: v_i = q_t f'(q_t)(e_t - q)
                let e = if k == 2 { 1.0 } else { 0.0 };
                let want = q[2] * f.deriv(q[2]).unwrap() * (e - q[k]);
                assert!((d.v_i[k] - want).abs() < 1e-12, "{f}");
            }
        }
    }

    #[test]
    fn risk_rate_zero_cases() {
        let t = Task::new(3, vec![ctx(&[1.0, 0.0, 0.0], 0, 0, 1.0)]).unwrap();
        assert_eq!(risk_rate(&t, &Objective::neg_log_p()).unwrap(), 0.0);
        let flat = Objective::custom("const", |_| 0.0, |_| 0.0).unwrap();
        let t = Task::new(3, vec![ctx(&[0.2, 0.3, 0.5], 0, 1, 1.0)]).unwrap();
        assert_eq!(risk_rate(&t, &flat).unwrap(), 0.0);
        assert!(fd_risk_rate(&t, &flat, &DEFAULT_ETAS).unwrap().abs() < 1e-8);
    }

    #[test]
    fn uniform_v4_rate_matches_hand_value() {
        // v_* = (q - e0)/4, v_i = f'(1/4)/4 (e0 - q), |e0 - q|^2 = 3/4
        let t = Task::new(4, vec![ctx(&[0.25; 4], 0, 0, 1.0)]).unwrap();
        let r = risk_rate(&t, &Objective::neg_log_p()).unwrap();
        assert!((r - 3.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn gram_identity_path_matches_default() {
        let t = Task::new(3, vec![ctx(&[0.2, 0.3, 0.5], 0, 2, 0.5), ctx(&[0.6, 0.3, 0.1], 1, 1, 0.5)])
            .unwrap();
        let f = Objective::alpha(0.5).unwrap();
        let eye = Gram::Matrix(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = risk_rate(&t, &f).unwrap();
        let b = risk_rate_with(&t, &f, &eye).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(risk_rate_with(&t, &f, &Gram::Matrix(vec![1.0; 4])).is_err());
    }

    #[test]
    fn richardson_recovers_polynomial_limit() {
        let h = [1e-1, 1e-2, 1e-3];
        let vals: Vec<f64> = h.iter().map(|x| 2.0 + 3.0 * x - 5.0 * x * x).collect();
        assert!((richardson_to_zero(&h, &vals) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fd_rejects_short_or_bad_sequences() {
        let t = Task::model_weak(3, 0.0).unwrap();
        let f = Objective::neg_log_p();
        assert!(fd_risk_rate(&t, &f, &[1e-2, 1e-3]).is_err());
        assert!(fd_risk_rate(&t, &f, &[1e-3, 1e-2, 1e-4]).is_err());
    }

    #[test]
    fn mw_closed_form_examples() {
        let p = Objective::alpha(1.0).unwrap();
        let nll = Objective::neg_log_p();
        assert_eq!(mw_closed_form(4, 0.0, &p, &nll).unwrap(), -9.0 / 64.0);
        assert!(mw_closed_form(7, 6.0 / 7.0, &p, &nll).unwrap().abs() < 1e-15);
        assert_eq!(mw_closed_form(5, 0.3, &nll, &nll).unwrap(), 0.0);
        assert!(mw_closed_form(1, 0.0, &p, &nll).is_err());
        assert!(mw_closed_form(4, 1.5, &p, &nll).is_err());
    }

    #[test]
    fn assumption_examples() {
        let t = Task::new(
            3,
            vec![ctx(&[0.8, 0.1, 0.1], 0, 0, 0.5), ctx(&[0.5, 0.3, 0.2], 0, 1, 0.5)],
        )
        .unwrap();
        let a = check_assumptions(&t);
        assert_eq!((a.k_hat, a.band_mass, a.low_mass), (1.0, 1.0, 0.0));

        let t = Task::model_weak(50, 0.1).unwrap();
        assert!(check_assumptions(&t).k_hat < 1e-12);

        let t = Task::new(
            3,
            vec![ctx(&[0.8, 0.1, 0.1], 0, 0, 0.5), ctx(&[0.4, 0.3, 0.3], 0, 0, 0.5)],
        )
        .unwrap();
        let a = check_assumptions(&t);
        assert_eq!(a.k_hat, 0.5);
        assert_eq!(a.low_mass, 0.5);
        assert_eq!(a.alpha_hat, 1.0);
    }

    #[test]
    fn compare_regimes_model_weak() {
        let t = Task::model_weak(4, 0.0).unwrap();
        let p = Objective::alpha(1.0).unwrap();
        let nll = Objective::neg_log_p();
        let r = compare_regimes(&t, &p, &nll, &CompareOptions::default()).unwrap();
        assert_eq!(r.regime, FlowRegime::ModelWeak);
        assert!(r.ordering_holds);
        assert!((r.rate_f1 - r.rate_f2 - (-9.0 / 64.0)).abs() < 1e-15);

        let same = compare_regimes(&t, &nll, &nll, &CompareOptions::default()).unwrap();
        assert_eq!(same.rate_f1, same.rate_f2);
        assert!(same.ordering_holds);
    }

    #[test]
    fn compare_regimes_rejects_hypothesis_violation() {
        let t = Task::model_weak(4, 0.0).unwrap();
        let err = compare_regimes(
            &t,
            &Objective::neg_log_p(),
            &Objective::alpha(1.0).unwrap(),
            &CompareOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Precondition(ref m) if m.contains("p = ")));
    }

    #[test]
    fn noise_decomposition_reproduces_rate_gap() {
        let pairs = vec![
            NoisyPair { weight: 0.5, q0: Simplex::new(vec![0.7, 0.2, 0.1]).unwrap(), y_star: 0, y_wrong: 2 },
            NoisyPair { weight: 0.5, q0: Simplex::new(vec![0.05, 0.85, 0.1]).unwrap(), y_star: 1, y_wrong: 0 },
        ];
        let f1 = Objective::alpha(1.0).unwrap();
        let f2 = Objective::neg_log_p();
        let (a, b, bound) = pair_noise_bound(&pairs, &f1, &f2).unwrap();
        assert!(a < 0.0 && b > 0.0);
        for eps in [0.0, 0.1, bound.unwrap(), 0.6] {
            let t = split_noise_task(3, &pairs, eps).unwrap();
            let gap = risk_rate(&t, &f1).unwrap() - risk_rate(&t, &f2).unwrap();
            assert!((gap - ((1.0 - eps) * a + eps * b)).abs() < 1e-14);
        }
        let t = split_noise_task(3, &pairs, 0.3).unwrap();
        let d = noise_decomposition(&t, &f1, &f2).unwrap();
        assert!((d.eps - 0.3).abs() < 1e-15);
        assert!((d.eps_bound.unwrap() - bound.unwrap()).abs() < 1e-14);
    }

    #[test]
    fn task_json_round_trip_and_validation() {
        let t = Task::new(3, vec![ctx(&[0.2, 0.3, 0.5], 2, 1, 1.0)]).unwrap();
        let s = t.to_json().unwrap();
        assert!(s.contains("\"V\": 3"));
        assert_eq!(Task::from_json(&s).unwrap(), t);

        let bad_weight = r#"{"V":2,"contexts":[{"weight":0.5,"q0":[0.5,0.5],"y_star":0,"y_tilde":0}]}"#;
        assert!(Task::from_json(bad_weight).is_err());
        let bad_q = r#"{"V":2,"contexts":[{"weight":1,"q0":[0.6,0.5],"y_star":0,"y_tilde":0}]}"#;
        assert!(Task::from_json(bad_q).is_err());
        let bad_len = r#"{"V":3,"contexts":[{"weight":1,"q0":[0.5,0.5],"y_star":0,"y_tilde":0}]}"#;
        assert!(Task::from_json(bad_len).is_err());
        let bad_label = r#"{"V":2,"contexts":[{"weight":1,"q0":[0.5,0.5],"y_star":2,"y_tilde":0}]}"#;
        assert!(Task::from_json(bad_label).is_err());
    }

    #[test]
    fn ineq_examples() {
        let q = Simplex::new(vec![0.3, 0.7, 0.0]).unwrap();
        assert!(ineq1_gap(&q, 0).unwrap().abs() < 1e-15);
        let q = Simplex::uniform(3).unwrap();
        assert!((ineq1_gap(&q, 0).unwrap() - 2.0 / 81.0).abs() < 1e-15);
        let q = Simplex::vertex(4, 2).unwrap();
        assert_eq!(ineq1_gap(&q, 2).unwrap(), 0.0);

        let q = Simplex::uniform(4).unwrap();
        assert!((ineq3_gap(&q, 0, 1).unwrap() - 0.25).abs() < 1e-15);
        let q = Simplex::new(vec![0.5, 0.5, 0.0]).unwrap();
        assert!((ineq3_gap(&q, 0, 1).unwrap() - 0.5).abs() < 1e-15);
        let q = Simplex::new(vec![0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(ineq3_gap(&q, 0, 1), Err(Error::Precondition(_))));

        assert_eq!(ineq2_objective(&[0.0, 0.4, 0.6], 0, 1), 0.0);
    }

    #[test]
    fn ineq2_search_finds_known_maximum() {
        let s = ineq2_max_search(3, &Ineq2SearchOptions { random_starts: 50, ..Default::default() })
            .unwrap();
        assert!((s.max_value - ineq2_max_value()).abs() < 1e-9);
        assert!((s.argmax[0] - ineq2_argmax_coord()).abs() < 1e-3);
        assert!((s.argmax[2] - (1.0 - 2.0 * ineq2_argmax_coord())).abs() < 2e-3);
        assert!(s.max_evaluated <= ineq2_max_value() + 1e-9);
        assert!(ineq2_max_search(2, &Ineq2SearchOptions::default()).is_err());
    }

    #[test]
    fn ineq2_search_without_analytic_seed() {
        let opts = Ineq2SearchOptions { random_starts: 200, seed_analytic: false, ..Default::default() };
        let s = ineq2_max_search(5, &opts).unwrap();
        assert!((s.max_value - ineq2_max_value()).abs() < 1e-6);
        assert!((s.argmax[0] - ineq2_argmax_coord()).abs() < 1e-3);
        assert!((s.argmax[1] - ineq2_argmax_coord()).abs() < 1e-3);
    }
}
