//! Invariant and reproduction suite. Every check is seeded and self-contained;
//! the CLI `verify` command and the acceptance test target both run it.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::flow::{
    check_flow_hypothesis, compare_regimes, fd_risk_rate, ineq1_gap, ineq2_argmax_coord, ineq2_max_search,
    ineq2_max_value, ineq3_gap, mw_closed_form, risk_rate, CompareOptions, ContextSpec, FlowRegime,
    Ineq2SearchOptions, Task, DEFAULT_ETAS,
};
use crate::grad::{step_gradient, step_loss};
use crate::ingest::{
    assumption_stat, classify_continuum, mean_predicted_probability, ContinuumCuts, Regime, TokenLog, TokenRecord,
    DEFAULT_ASSUMPTION_CUT,
};
use crate::objective::Objective;
use crate::simplex::{dirichlet_sample, seeded_rng, Logits, OneHot};
use crate::toy_train::{
    alpha_sweep, calibrate_budget, make_strong_flow_task, make_task, quantile_ablation, AblationSide,
    ReversalConfig, Winner,
};

/// Relative tolerance for gradient checks; an absolute floor of
/// [`GRAD_ABS_FLOOR`] covers entries near the finite-difference noise level.
pub const GRAD_REL_TOL: f64 = 1e-5;
pub const GRAD_ABS_FLOOR: f64 = 1e-10;
/// Grid step used for maximiser-location checks.
pub const ARGMAX_GRID_STEP: f64 = 1e-4;
pub const RATE_FD_TOL: f64 = 1e-4;
pub const MW_FD_TOL: f64 = 1e-5;
pub const INEQ_TOL: f64 = 1e-12;
pub const INEQ2_VALUE_TOL: f64 = 1e-4;
pub const INEQ2_ARGMAX_TOL: f64 = 1e-3;

/// Shared settings for the toy-training checks.
pub const TOY_VOCAB: usize = 20;
pub const TOY_CONTEXTS: usize = 200;
pub const TOY_EPS: f64 = 0.1;
pub const TOY_LR: f64 = 0.1;
pub const TOY_MAX_STEPS: usize = 200;
pub const TOY_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let t = Instant::now();
    let (passed, detail) = match body() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome { name, passed, detail, seconds: t.elapsed().as_secs_f64() }
}

/// Fourth-order central difference.
fn derivative(h: f64, f: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    let d = |h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
    Ok((4.0 * d(h / 2.0)? - d(h)?) / 3.0)
}

/// `step_gradient` against `-d step_loss / dz` for random logits.
pub fn gradient_fd(trials: usize, seed: u64) -> CheckOutcome {
    timed("gradient_fd", || {
        let objectives = [
            Objective::neg_log_p(),
            Objective::alpha(0.5)?,
            Objective::alpha(1.0)?,
            Objective::alpha(10.0)?,
            Objective::log_one_minus_p(),
        ];
        let mut rng = seeded_rng(seed);
        let (mut worst, mut checked, mut failures) = (0.0f64, 0usize, 0usize);
        for f in &objectives {
            for v in [2usize, 5, 50] {
                for _ in 0..trials {
                    let z: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
                    let y = OneHot::new(rng.random_range(0..v), v)?;
                    let g = step_gradient(f, &Logits::new(z.clone())?, &y, None)?;
                    for k in 0..v {
                        let fd = -derivative(1e-3, |h| {
                            let mut zz = z.clone();
                            zz[k] += h;
                            step_loss(f, &Logits::new(zz)?, &y, None)
                        })?;
                        let gk = g.as_slice()[k];
                        let err = (fd - gk).abs();
                        checked += 1;
                        if err > GRAD_REL_TOL * gk.abs() + GRAD_ABS_FLOOR {
                            failures += 1;
                        }
                        if gk.abs() > 1e-6 {
                            worst = worst.max(err / gk.abs());
                        }
                    }
                }
            }
        }
        Ok((failures == 0, format!("{checked} entries, {failures} outside tolerance, worst rel err {worst:.2e}")))
    })
}

/// Maximiser of `W_f` sits at or below 1/2 for convex members and at or above 1/2 for concave ones.
pub fn argmax_location(members: usize, seed: u64) -> CheckOutcome {
    timed("argmax_location", || {
        let grid = (1.0 / ARGMAX_GRID_STEP).round() as usize - 1;
        let mut rng = seeded_rng(seed);
        let mut bad = Vec::new();
        let mut convex = vec![Objective::neg_log_p()];
        for _ in 0..members {
            convex.push(Objective::alpha(rng.random_range(1e-3..=1.0))?);
        }
        for f in &convex {
            let a = f.argmax_weight(grid)?;
            if a > 0.5 + ARGMAX_GRID_STEP {
                bad.push(format!("{} -> {a}", f.name()));
            }
        }
        for _ in 0..members {
            let f = Objective::alpha(rng.random_range(1.0..=10.0))?;
            let a = f.argmax_weight(grid)?;
            if a < 0.5 - ARGMAX_GRID_STEP {
                bad.push(format!("{} -> {a}", f.name()));
            }
        }
        Ok((bad.is_empty(), format!("{} convex, {members} concave; violations: {bad:?}", convex.len())))
    })
}

fn random_task<R: Rng + ?Sized>(rng: &mut R, vocab: usize) -> Result<Task> {
    let n = rng.random_range(1..=6);
    let weights = dirichlet_sample(&vec![1.0; n], rng)?;
    let contexts = (0..n)
        .map(|x| {
            Ok(ContextSpec {
                weight: weights.as_slice()[x],
                q0: dirichlet_sample(&vec![1.0; vocab], rng)?,
                y_star: rng.random_range(0..vocab),
                y_tilde: rng.random_range(0..vocab),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Task::new(vocab, contexts)
}

/// Analytic initial risk rate against the extrapolated finite-difference rate.
pub fn risk_rate_fd(pairs: usize, seed: u64) -> CheckOutcome {
    timed("risk_rate_fd", || {
        let mut rng = seeded_rng(seed);
        let mut worst = 0.0f64;
        for k in 0..pairs {
            let vocab = [2, 4, 10][k % 3];
            let task = random_task(&mut rng, vocab)?;
            let f = match rng.random_range(0..4) {
                0 => Objective::neg_log_p(),
                1 => Objective::alpha(rng.random_range(0.1..10.0))?,
                2 => Objective::log_one_minus_p(),
                _ => Objective::neg_p_pow(rng.random_range(1.0..4.0))?,
            };
            let a = risk_rate(&task, &f)?;
            let fd = fd_risk_rate(&task, &f, &DEFAULT_ETAS)?;
            worst = worst.max((a - fd).abs());
        }
        Ok((worst <= RATE_FD_TOL, format!("{pairs} pairs, worst abs gap {worst:.2e}")))
    })
}

fn hypothesis_pairs() -> Result<Vec<(Objective, Objective)>> {
    let mut pool = vec![Objective::neg_log_p(), Objective::log_one_minus_p(), Objective::neg_p_pow(2.0)?];
    for a in [0.1, 0.5, 1.0, 2.0, 5.0, 10.0] {
        pool.push(Objective::alpha(a)?);
    }
    let mut out = Vec::new();
    for f1 in &pool {
        for f2 in &pool {
            if f1.name() != f2.name() && check_flow_hypothesis(f1, f2, 999).is_ok() {
                out.push((f1.clone(), f2.clone()));
            }
        }
    }
    Ok(out)
}

/// Closed-form model-weak gap: sign, the `V = 4` value, and the finite-difference route.
pub fn mw_branch() -> CheckOutcome {
    timed("mw_branch", || {
        let pairs = hypothesis_pairs()?;
        let mut positive = 0usize;
        let mut evaluated = 0usize;
        for v in 3..=50usize {
            let cap = (v as f64 - 1.0) / v as f64;
            for k in 0..20 {
                let eps = cap * k as f64 / 20.0;
                for (f1, f2) in &pairs {
                    evaluated += 1;
                    if mw_closed_form(v, eps, f1, f2)? > 0.0 {
                        positive += 1;
                    }
                }
            }
        }
        let p = Objective::alpha(1.0)?;
        let nll = Objective::neg_log_p();
        let exact = mw_closed_form(4, 0.0, &p, &nll)?;
        let mut fd_worst = 0.0f64;
        for v in [3usize, 4, 10, 50] {
            for eps in [0.0, 0.1, 0.3] {
                let task = Task::model_weak(v, eps)?;
                for (f1, f2) in pairs.iter().step_by(5) {
                    let fd = fd_risk_rate(&task, f1, &DEFAULT_ETAS)? - fd_risk_rate(&task, f2, &DEFAULT_ETAS)?;
                    fd_worst = fd_worst.max((fd - mw_closed_form(v, eps, f1, f2)?).abs());
                }
            }
        }
        let passed = positive == 0 && exact == -9.0 / 64.0 && fd_worst <= MW_FD_TOL;
        Ok((
            passed,
            format!(
                "{evaluated} cases over {} pairs, {positive} positive; V=4 value {exact}; fd worst {fd_worst:.2e}",
                pairs.len()
            ),
        ))
    })
}

/// `rate(-p) >= rate(-log p)` on seeded model-strong tasks with noise above the bound.
pub fn ms_branch(tasks: usize) -> CheckOutcome {
    timed("ms_branch", || {
        let f1 = Objective::alpha(1.0)?;
        let f2 = Objective::neg_log_p();
        let mut holds = 0usize;
        let mut max_bound = 0.0f64;
        for seed in 0..tasks as u64 {
            let s = make_strong_flow_task(10, 50, seed, &f1, &f2)?;
            max_bound = max_bound.max(s.eps_bound);
            let r = compare_regimes(&s.task, &f1, &f2, &CompareOptions::default())?;
            if r.regime == FlowRegime::ModelStrong && r.rate_f1 >= r.rate_f2 {
                holds += 1;
            }
        }
        Ok((holds == tasks, format!("{holds}/{tasks} tasks ordered, largest noise bound {max_bound:.4}")))
    })
}

pub fn inequalities(samples_per_vocab: usize, seed: u64) -> CheckOutcome {
    timed("simplex_inequalities", || {
        let mut rng = seeded_rng(seed);
        let (mut min1, mut min3) = (f64::INFINITY, f64::INFINITY);
        let mut ineq3_checked = 0usize;
        for v in 2..=8usize {
            for _ in 0..samples_per_vocab {
                let q = dirichlet_sample(&vec![1.0; v], &mut rng)?;
                min1 = min1.min(ineq1_gap(&q, rng.random_range(0..v))?);
                let i = rng.random_range(0..v);
                let j = (i + rng.random_range(1..v)) % v;
                if let Ok(g) = ineq3_gap(&q, i, j) {
                    min3 = min3.min(g);
                    ineq3_checked += 1;
                }
            }
        }
        let s = ineq2_max_search(3, &Ineq2SearchOptions::default())?;
        let c = ineq2_argmax_coord();
        let arg_ok = (s.argmax[0] - c).abs() <= INEQ2_ARGMAX_TOL && (s.argmax[1] - c).abs() <= INEQ2_ARGMAX_TOL;
        let val_ok = (s.max_value - 0.0054559).abs() <= INEQ2_VALUE_TOL
            && (s.max_value - ineq2_max_value()).abs() <= INEQ2_VALUE_TOL;
        let passed = min1 >= -INEQ_TOL && min3 >= -INEQ_TOL && arg_ok && val_ok;
        Ok((
            passed,
            format!(
                "min gap1 {min1:.3e}, min gap3 {min3:.3e} ({ineq3_checked} admissible), F max {:.7} at ({:.6}, {:.6})",
                s.max_value, s.argmax[0], s.argmax[1]
            ),
        ))
    })
}

pub fn reversal(seeds: usize) -> CheckOutcome {
    timed("reversal", || {
        let cfg = ReversalConfig::new(TOY_VOCAB, TOY_CONTEXTS, TOY_EPS, (0..seeds as u64).collect(), TOY_MAX_STEPS, TOY_LR);
        let s = crate::toy_train::reversal_experiment(&cfg)?;
        let ms = s.wins(Regime::ModelStrong, Winner::PriorLeaning);
        let mw = s.wins(Regime::ModelWeak, Winner::PriorAverse);
        let need = (seeds * 8).div_ceil(10);
        Ok((
            ms >= need && mw >= need,
            format!("-p wins {ms}/{seeds} model-strong; -log p wins {mw}/{seeds} model-weak"),
        ))
    })
}

fn budget_for(task: &crate::toy_train::ToyTask) -> Result<usize> {
    Ok(calibrate_budget(task, TOY_LR, TOY_MAX_STEPS)?.unwrap_or(TOY_MAX_STEPS))
}

pub fn convexity_sweep() -> CheckOutcome {
    timed("convexity_sweep", || {
        let mut acc = Vec::new();
        for regime in [Regime::ModelStrong, Regime::ModelWeak] {
            let t = make_task(regime, TOY_VOCAB, TOY_CONTEXTS, TOY_EPS, TOY_SEED)?;
            let rows = alpha_sweep(&t, &[0.1, 1.0], budget_for(&t)?, TOY_LR)?;
            acc.push((rows[0].accuracy, rows[1].accuracy));
        }
        let passed = acc[0].1 > acc[0].0 && acc[1].0 > acc[1].1;
        Ok((
            passed,
            format!(
                "MS acc(0.1)={:.4} acc(1)={:.4}; MW acc(0.1)={:.4} acc(1)={:.4}",
                acc[0].0, acc[0].1, acc[1].0, acc[1].1
            ),
        ))
    })
}

pub fn ablation_direction() -> CheckOutcome {
    timed("quantile_ablation", || {
        let t = make_task(Regime::ModelStrong, TOY_VOCAB, TOY_CONTEXTS, TOY_EPS, TOY_SEED)?;
        let f = Objective::neg_log_p();
        let percentiles: Vec<f64> = (1..=20).map(|k| 5.0 * k as f64).collect();
        let ab = quantile_ablation(&t, &f, &percentiles, AblationSide::BottomKeep, budget_for(&t)?, TOY_LR)?;
        let n = t.n_contexts() as f64;
        let frac_ok = ab.rows.iter().all(|r| (r.kept_fraction - (100.0 - r.percentile) / 100.0).abs() <= 1.0 / n + 1e-12);
        let p10 = ab.rows.iter().find(|r| r.percentile == 10.0).expect("P10 row present");
        Ok((
            frac_ok && p10.accuracy >= ab.baseline_accuracy,
            format!(
                "acc with [Q10,1] {:.4} vs plain {:.4}; kept fractions within 1/n: {frac_ok}",
                p10.accuracy, ab.baseline_accuracy
            ),
        ))
    })
}

/// Deterministic log with `n` tokens whose first `high` entries equal `hi` and the rest `lo`.
pub fn two_level_log(n: usize, high: usize, hi: f64, lo: f64) -> Result<TokenLog> {
    let records = (0..n)
        .map(|k| TokenRecord {
            sample_id: format!("s{}", k / 100),
            token_index: (k % 100) as u64,
            prob: if k < high { hi } else { lo },
            token_id: None,
        })
        .collect();
    TokenLog::from_records(records)
}

pub fn ingest_fixtures() -> CheckOutcome {
    timed("ingest_diagnostics", || {
        let cuts = ContinuumCuts::default();
        let mut classes = Vec::new();
        for (mean, want) in [(0.81, Regime::ModelStrong), (0.53, Regime::ModelIntermediate), (0.01, Regime::ModelWeak)] {
            let log = two_level_log(1000, 500, mean + 0.005, mean - 0.005)?;
            let m = mean_predicted_probability(&log)?;
            classes.push((m, classify_continuum(m, cuts).tag == want));
        }
        let log = two_level_log(1000, 728, 0.9, 0.3)?;
        let stat = assumption_stat(&log, DEFAULT_ASSUMPTION_CUT)?;
        let passed = classes.iter().all(|c| c.1) && (stat - 0.728).abs() <= 1.0 / 1000.0;
        Ok((passed, format!("classes {classes:?}; assumption stat {stat}")))
    })
}

/// Runs every check. `quick` shrinks sample counts for a fast smoke run.
pub fn run_all(quick: bool) -> Vec<CheckOutcome> {
    let s = if quick { 10 } else { 1 };
    vec![
        gradient_fd(100 / s, 1),
        argmax_location(50, 2),
        risk_rate_fd(200 / s, 3),
        mw_branch(),
        ms_branch(100 / s),
        inequalities(100_000 / s, 4),
        reversal(10),
        convexity_sweep(),
        ablation_direction(),
        ingest_fixtures(),
    ]
}
