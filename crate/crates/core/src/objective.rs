//! Probability-based training objectives `f(p)` on the correct-token probability.
//!
//! Every objective here is nonincreasing on `[0, 1]`. The quantity that drives
//! learning is the gradient weight `W_f(p) = -f'(p) p (1 - p)`, which is the
//! logit gradient on the correct class; where `W_f` puts its mass decides
//! whether an objective leans on the base model's prior or fights it.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this `alpha`, `(1 - p^alpha) / alpha` is evaluated as `-expm1(alpha ln p) / alpha`.
pub const ALPHA_STABLE_CUTOFF: f64 = 1e-4;
/// Default resolution for grid searches and quadrature over `(0, 1)`.
pub const DEFAULT_GRID: usize = 10_001;
/// Number of interior points used to verify a custom objective is nonincreasing.
pub const MONOTONE_CHECK_POINTS: usize = 33;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum ObjectiveKind {
    /// `-ln p`, the usual negative log likelihood.
    NegLogP,
    /// `(1 - p^alpha) / alpha`. `alpha -> 0` recovers `-ln p`, `alpha = 1` gives `1 - p`.
    OneMinusPAlpha(f64),
    /// `ln(1 - p)`.
    LogOneMinusP,
    /// `-p^k`.
    NegPPower(f64),
    /// User-supplied `f` and `f'`.
    Custom { f: ScalarFn, df: ScalarFn },
}

impl fmt::Debug for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveKind::NegLogP => write!(f, "NegLogP"),
            ObjectiveKind::OneMinusPAlpha(a) => write!(f, "OneMinusPAlpha({a})"),
            ObjectiveKind::LogOneMinusP => write!(f, "LogOneMinusP"),
            ObjectiveKind::NegPPower(k) => write!(f, "NegPPower({k})"),
            ObjectiveKind::Custom { .. } => write!(f, "Custom"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Objective {
    kind: ObjectiveKind,
    name: String,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

impl Objective {
    pub fn neg_log_p() -> Self {
        Self { kind: ObjectiveKind::NegLogP, name: "neg_log_p".into() }
    }

    pub fn alpha(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::param(format!("alpha must be positive and finite, got {alpha}")));
        }
        Ok(Self {
            kind: ObjectiveKind::OneMinusPAlpha(alpha),
            name: format!("alpha:{alpha}"),
        })
    }

    pub fn log_one_minus_p() -> Self {
        Self { kind: ObjectiveKind::LogOneMinusP, name: "log_one_minus_p".into() }
    }

    pub fn neg_p_pow(k: f64) -> Result<Self> {
        if !(k > 0.0) || !k.is_finite() {
            return Err(Error::param(format!("power must be positive and finite, got {k}")));
        }
        Ok(Self { kind: ObjectiveKind::NegPPower(k), name: format!("neg_p_pow:{k}") })
    }

    /// Wraps arbitrary `f`/`f'`. Rejects functions whose derivative is positive
    /// (or non-finite) anywhere on an interior check grid.
    pub fn custom<F, D>(name: impl Into<String>, f: F, df: D) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let name = name.into();
        for k in 1..=MONOTONE_CHECK_POINTS {
            let p = k as f64 / (MONOTONE_CHECK_POINTS + 1) as f64;
            let d = df(p);
            if !d.is_finite() || d > 0.0 {
                return Err(Error::param(format!(
                    "objective {name} is not nonincreasing: f'({p}) = {d}"
                )));
            }
        }
        Ok(Self { kind: ObjectiveKind::Custom { f: Arc::new(f), df: Arc::new(df) }, name })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &ObjectiveKind {
        &self.kind
    }

    /// The built-in objectives, used by property suites and the `verify` command.
    pub fn builtins() -> Vec<Objective> {
        vec![
            Objective::neg_log_p(),
            Objective::alpha(0.5).unwrap(),
            Objective::alpha(1.0).unwrap(),
            Objective::alpha(10.0).unwrap(),
            Objective::log_one_minus_p(),
            Objective::neg_p_pow(2.0).unwrap(),
        ]
    }

    fn domain_err(&self, p: f64, domain: &'static str) -> Error {
        Error::Domain { objective: self.name.clone(), p, domain }
    }

    fn check_unit(&self, p: f64) -> Result<()> {
        if (0.0..=1.0).contains(&p) {
            Ok(())
        } else {
            Err(self.domain_err(p, "[0, 1]"))
        }
    }

    pub fn eval(&self, p: f64) -> Result<f64> {
        self.check_unit(p)?;
        let v = match &self.kind {
            ObjectiveKind::NegLogP => {
                if p == 0.0 {
                    return Err(self.domain_err(p, "(0, 1]"));
                }
                -p.ln()
            }
            ObjectiveKind::OneMinusPAlpha(a) => {
                if *a <= ALPHA_STABLE_CUTOFF {
                    -(a * p.ln()).exp_m1() / a
                } else {
                    (1.0 - p.powf(*a)) / a
                }
            }
            ObjectiveKind::LogOneMinusP => {
                if p == 1.0 {
                    return Err(self.domain_err(p, "[0, 1)"));
                }
                (-p).ln_1p()
            }
            ObjectiveKind::NegPPower(k) => -p.powf(*k),
            ObjectiveKind::Custom { f, .. } => f(p),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.domain_err(p, "points where f is finite"))
        }
    }

    /// `f'(p)`, always `<= 0` where defined.
    pub fn deriv(&self, p: f64) -> Result<f64> {
        self.check_unit(p)?;
        let d = match &self.kind {
            ObjectiveKind::NegLogP => -1.0 / p,
            ObjectiveKind::OneMinusPAlpha(a) => -p.powf(a - 1.0),
            ObjectiveKind::LogOneMinusP => -1.0 / (1.0 - p),
            ObjectiveKind::NegPPower(k) => -k * p.powf(k - 1.0),
            ObjectiveKind::Custom { df, .. } => df(p),
        };
        if d.is_finite() {
            Ok(d)
        } else {
            Err(self.domain_err(p, "points where f' is finite"))
        }
    }

    /// `s_f(p) = -f'(p) p`, the scale of the whole logit gradient. Closed forms
    /// keep the removable singularities (`-ln p` at 0, `ln(1-p)` at 0) finite.
    pub fn score(&self, p: f64) -> Result<f64> {
        self.check_unit(p)?;
        let s = match &self.kind {
            ObjectiveKind::NegLogP => 1.0,
            ObjectiveKind::OneMinusPAlpha(a) => p.powf(*a),
            ObjectiveKind::LogOneMinusP => p / (1.0 - p),
            ObjectiveKind::NegPPower(k) => k * p.powf(*k),
            ObjectiveKind::Custom { df, .. } => -df(p) * p,
        };
        if s.is_finite() {
            Ok(s)
        } else {
            Err(self.domain_err(p, "points where s_f is finite"))
        }
    }

    /// `W_f(p) = -f'(p) p (1 - p)`.
    pub fn weight(&self, p: f64) -> Result<f64> {
        self.check_unit(p)?;
        match &self.kind {
            ObjectiveKind::LogOneMinusP => Ok(p),
            _ => Ok(self.score(p)? * (1.0 - p)),
        }
    }

    /// Grid maximiser of `W_f` over `grid_size` evenly spaced interior points of `(0, 1)`.
    pub fn argmax_weight(&self, grid_size: usize) -> Result<f64> {
        if grid_size == 0 {
            return Err(Error::param("grid_size must be positive"));
        }
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in 1..=grid_size {
            let p = k as f64 / (grid_size + 1) as f64;
            let w = self.weight(p)?;
            if w > best.0 {
                best = (w, p);
            }
        }
        Ok(best.1)
    }

    /// Compares trapezoid-rule mass of `W_f` on `[0, tau]` against `[tau, 1]`.
    /// Exact ties resolve to prior-leaning.
    pub fn classify_orientation(&self, tau: f64, grid_size: usize) -> Result<PriorOrientation> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::param(format!("tau must lie in (0, 1), got {tau}")));
        }
        let n = grid_size.max(2);
        let below = self.trapezoid(0.0, tau, n)?;
        let above = self.trapezoid(tau, 1.0, n)?;
        let tie = (above - below).abs() <= 1e-12 * (above + below).abs();
        let tag = if tie || above > below {
            Orientation::PriorLeaning
        } else {
            Orientation::PriorAverse
        };
        Ok(PriorOrientation { tag, tau, mass_below: below, mass_above: above })
    }

    fn trapezoid(&self, a: f64, b: f64, nodes: usize) -> Result<f64> {
        const EDGE: f64 = 1e-12;
        let h = (b - a) / (nodes - 1) as f64;
        let mut total = 0.0;
        for k in 0..nodes {
            let p = (a + k as f64 * h).clamp(EDGE, 1.0 - EDGE);
            let w = self.weight(p)?;
            total += if k == 0 || k == nodes - 1 { 0.5 * w } else { w };
        }
        Ok(total * h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    PriorLeaning,
    PriorAverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PriorOrientation {
    pub tag: Orientation,
    pub tau: f64,
    pub mass_below: f64,
    pub mass_above: f64,
}

/// Closed probability interval `[lo, hi]` used for hard thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdInterval {
    lo: f64,
    hi: f64,
}

impl ThresholdInterval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
            return Err(Error::param(format!("interval [{lo}, {hi}] must lie within [0, 1]")));
        }
        if lo > hi {
            return Err(Error::param(format!("interval [{lo}, {hi}] has lo > hi")));
        }
        Ok(Self { lo, hi })
    }

    pub fn full() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn contains(&self, p: f64) -> bool {
        p >= self.lo && p <= self.hi
    }
}

impl fmt::Display for ThresholdInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.lo, self.hi)
    }
}

/// `f(p) 1{p in I}`: the objective with gradient and loss zeroed outside `I`.
#[derive(Clone, Debug)]
pub struct MaskedObjective {
    pub objective: Objective,
    pub interval: ThresholdInterval,
}

pub fn thresholded(objective: Objective, interval: ThresholdInterval) -> MaskedObjective {
    MaskedObjective { objective, interval }
}

impl MaskedObjective {
    pub fn eval(&self, p: f64) -> Result<f64> {
        if self.interval.contains(p) {
            self.objective.eval(p)
        } else {
            Ok(0.0)
        }
    }

    pub fn score(&self, p: f64) -> Result<f64> {
        if self.interval.contains(p) {
            self.objective.score(p)
        } else {
            Ok(0.0)
        }
    }

    pub fn weight(&self, p: f64) -> Result<f64> {
        if self.interval.contains(p) {
            self.objective.weight(p)
        } else {
            Ok(0.0)
        }
    }
}

/// An objective as written on the command line: `name[:param][@[lo,hi]]`.
#[derive(Clone, Debug)]
pub struct ObjectiveSpec {
    pub objective: Objective,
    pub mask: Option<ThresholdInterval>,
}

impl fmt::Display for ObjectiveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.mask {
            Some(m) => write!(f, "{}@{}", self.objective, m),
            None => write!(f, "{}", self.objective),
        }
    }
}

impl FromStr for ObjectiveSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, mask) = match s.split_once('@') {
            Some((head, tail)) => (head, Some(parse_interval(tail)?)),
            None => (s, None),
        };
        let parse_num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::param(format!("bad number {v:?} in objective {s:?}")))
        };
        let objective = match head.split_once(':') {
            None => match head {
                "neg_log_p" => Objective::neg_log_p(),
                "log_one_minus_p" => Objective::log_one_minus_p(),
                _ => return Err(Error::param(format!("unknown objective {head:?}"))),
            },
            Some(("alpha", v)) => Objective::alpha(parse_num(v)?)?,
            Some(("neg_p_pow", v)) => Objective::neg_p_pow(parse_num(v)?)?,
            Some((name, _)) => return Err(Error::param(format!("unknown objective {name:?}"))),
        };
        Ok(Self { objective, mask })
    }
}

fn parse_interval(s: &str) -> Result<ThresholdInterval> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| Error::param(format!("interval {s:?} must look like [lo,hi]")))?;
    let (lo, hi) = inner
        .split_once(',')
        .ok_or_else(|| Error::param(format!("interval {s:?} must look like [lo,hi]")))?;
    let lo = lo.trim().parse::<f64>().map_err(|_| Error::param(format!("bad bound {lo:?}")))?;
    let hi = hi.trim().parse::<f64>().map_err(|_| Error::param(format!("bad bound {hi:?}")))?;
    ThresholdInterval::new(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    const STEP: f64 = 1.0 / (DEFAULT_GRID as f64 + 1.0);

    #[test]
    fn eval_examples() {
        let a1 = Objective::alpha(1.0).unwrap();
        assert!((a1.eval(0.8).unwrap() - 0.2).abs() < 1e-15);
        let tiny = Objective::alpha(1e-8).unwrap();
        assert!((tiny.eval(0.5).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
        let a10 = Objective::alpha(10.0).unwrap();
        // (1 - 0.9^10) / 10, 0.9^10 = 0.3486784401
        assert!((a10.eval(0.9).unwrap() - 0.06513215599).abs() < 1e-12);
    }

    #[test]
    fn small_alpha_tracks_neg_log_p() {
        let nll = Objective::neg_log_p();
        for &a in &[1e-5, 1e-7, 1e-10] {
            let f = Objective::alpha(a).unwrap();
            for &p in &[1e-6, 0.01, 0.3, 0.99] {
                let want = nll.eval(p).unwrap();
                assert!((f.eval(p).unwrap() - want).abs() <= 1e-3 * want.max(1e-3));
            }
        }
    }

    #[test]
    fn eval_domain_errors() {
        assert!(Objective::neg_log_p().eval(0.0).is_err());
        assert!(Objective::log_one_minus_p().eval(1.0).is_err());
        assert!(Objective::alpha(2.0).unwrap().eval(1.2).is_err());
        assert!(Objective::alpha(2.0).unwrap().eval(-0.1).is_err());
        assert!(Objective::alpha(0.0).is_err());
        assert!(Objective::neg_p_pow(-1.0).is_err());
    }

    #[test]
    fn deriv_examples() {
        assert_eq!(Objective::neg_log_p().deriv(0.25).unwrap(), -4.0);
        for &p in &[0.1, 0.5, 0.9] {
            assert_eq!(Objective::alpha(1.0).unwrap().deriv(p).unwrap(), -1.0);
        }
        assert_eq!(Objective::log_one_minus_p().deriv(0.5).unwrap(), -2.0);
    }

    #[test]
    fn weight_examples() {
        assert!((Objective::neg_log_p().weight(0.3).unwrap() - 0.7).abs() < 1e-15);
        assert!((Objective::alpha(1.0).unwrap().weight(0.5).unwrap() - 0.25).abs() < 1e-15);
        assert!((Objective::log_one_minus_p().weight(0.3).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn argmax_examples() {
        let p = Objective::alpha(10.0).unwrap().argmax_weight(DEFAULT_GRID).unwrap();
        assert!((p - 10.0 / 11.0).abs() <= STEP);
        let p = Objective::neg_log_p().argmax_weight(DEFAULT_GRID).unwrap();
        assert_eq!(p, STEP);
        let p = Objective::alpha(1.0).unwrap().argmax_weight(DEFAULT_GRID).unwrap();
        assert!((p - 0.5).abs() <= STEP);
    }

    #[test]
    fn orientation_examples() {
        let o = Objective::neg_log_p().classify_orientation(0.5, DEFAULT_GRID).unwrap();
        assert_eq!(o.tag, Orientation::PriorAverse);
        assert!((o.mass_below - 0.375).abs() < 1e-8 && (o.mass_above - 0.125).abs() < 1e-8);

        let o = Objective::log_one_minus_p().classify_orientation(0.5, DEFAULT_GRID).unwrap();
        assert_eq!(o.tag, Orientation::PriorLeaning);
        assert!((o.mass_below - 0.125).abs() < 1e-8 && (o.mass_above - 0.375).abs() < 1e-8);

        let o = Objective::alpha(1.0).unwrap().classify_orientation(0.5, DEFAULT_GRID).unwrap();
        assert_eq!(o.tag, Orientation::PriorLeaning);

        assert!(Objective::neg_log_p().classify_orientation(1.0, 100).is_err());
    }

    #[test]
    fn thresholded_examples() {
        let i = ThresholdInterval::new(0.2, 1.0).unwrap();
        let m = thresholded(Objective::neg_log_p(), i);
        assert_eq!(m.eval(0.1).unwrap(), 0.0);
        assert_eq!(m.weight(0.1).unwrap(), 0.0);
        assert!((m.eval(0.5).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(m.eval(0.2).unwrap(), Objective::neg_log_p().eval(0.2).unwrap());
        // masked tokens outside the objective's domain do not error
        assert_eq!(m.eval(0.0).unwrap(), 0.0);

        let full = thresholded(Objective::neg_log_p(), ThresholdInterval::full());
        for k in 1..=1000 {
            let p = k as f64 / 1001.0;
            assert_eq!(full.eval(p).unwrap(), Objective::neg_log_p().eval(p).unwrap());
            assert_eq!(full.score(p).unwrap(), Objective::neg_log_p().score(p).unwrap());
        }
    }

    #[test]
    fn interval_validation() {
        assert!(ThresholdInterval::new(0.5, 0.4).is_err());
        assert!(ThresholdInterval::new(-0.1, 0.4).is_err());
        assert!(ThresholdInterval::new(0.4, 0.4).unwrap().contains(0.4));
    }

    #[test]
    fn custom_objective_checks_monotonicity() {
        assert!(Objective::custom("p", |p| p, |_| 1.0).is_err());
        let sq = Objective::custom("one_minus_p_sq", |p| 1.0 - p * p, |p| -2.0 * p).unwrap();
        assert!((sq.weight(0.5).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(sq.name(), "one_minus_p_sq");
    }

    #[test]
    fn spec_grammar() {
        let s: ObjectiveSpec = "neg_log_p@[0.2,1]".parse().unwrap();
        assert_eq!(s.objective.name(), "neg_log_p");
        assert_eq!(s.mask, Some(ThresholdInterval::new(0.2, 1.0).unwrap()));
        assert_eq!(s.to_string(), "neg_log_p@[0.2,1]");

        let s: ObjectiveSpec = "alpha:0.5".parse().unwrap();
        assert!(matches!(s.objective.kind(), ObjectiveKind::OneMinusPAlpha(a) if *a == 0.5));
        assert!(s.mask.is_none());

        let s: ObjectiveSpec = "neg_p_pow:2".parse().unwrap();
        assert_eq!(s.objective.name(), "neg_p_pow:2");
        let s: ObjectiveSpec = "log_one_minus_p".parse().unwrap();
        assert_eq!(s.objective.name(), "log_one_minus_p");

        for bad in ["", "nll", "alpha:", "alpha:-1", "alpha:x", "neg_log_p@[0.5,0.4]", "neg_log_p@0.2,1"] {
            assert!(bad.parse::<ObjectiveSpec>().is_err(), "{bad}");
        }
    }
}
