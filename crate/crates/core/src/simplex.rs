//! Simplex and softmax primitives shared by every other module.
//!
//! Probabilities live in [`Simplex`], unnormalised scores in [`Logits`], and
//! class labels in [`OneHot`]. All constructors validate their invariants so
//! downstream code can index without re-checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on `sum(values) == 1`.
pub const SIMPLEX_SUM_TOL: f64 = 1e-9;
/// Negative entries down to this magnitude are rounding noise and clamp to 0.
pub const SIMPLEX_CLAMP_TOL: f64 = 1e-12;

/// A probability vector over a vocabulary of size `V`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Simplex(Vec<f64>);

impl Simplex {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::param("simplex must have at least one entry"));
        }
        for (i, v) in values.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(Error::param(format!("simplex entry {i} is not finite")));
            }
            if *v < 0.0 {
                if *v >= -SIMPLEX_CLAMP_TOL {
                    *v = 0.0;
                } else {
                    return Err(Error::param(format!("simplex entry {i} = {v} is negative")));
                }
            }
            if *v > 1.0 + SIMPLEX_SUM_TOL {
                return Err(Error::param(format!("simplex entry {i} = {v} exceeds 1")));
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::param(format!(
                "simplex entries sum to {sum}, expected 1"
            )));
        }
        Ok(Self(values))
    }

    /// Uniform distribution over `v` outcomes.
    pub fn uniform(v: usize) -> Result<Self> {
        if v == 0 {
            return Err(Error::param("vocabulary size must be positive"));
        }
        Ok(Self(vec![1.0 / v as f64; v]))
    }

    /// Point mass on `index`.
    pub fn vertex(v: usize, index: usize) -> Result<Self> {
        if index >= v {
            return Err(Error::Index { index, len: v });
        }
        let mut values = vec![0.0; v];
        values[index] = 1.0;
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn get(&self, index: usize) -> Result<f64> {
        self.0
            .get(index)
            .copied()
            .ok_or(Error::Index { index, len: self.0.len() })
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum()
    }

    /// Logits whose softmax reproduces this distribution. Entries are floored
    /// at `floor` before taking logs so zero probabilities stay finite.
    pub fn to_logits(&self, floor: f64) -> Logits {
        Logits(self.0.iter().map(|&p| p.max(floor).ln()).collect())
    }
}

impl<'de> Deserialize<'de> for Simplex {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        Simplex::new(values).map_err(serde::de::Error::custom)
    }
}

/// Unnormalised log-odds over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::param("logits must have at least one entry"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("logit {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn zeros(v: usize) -> Self {
        Self(vec![0.0; v.max(1)])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// A class label `index` in a vocabulary of size `len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OneHot {
    index: usize,
    len: usize,
}

impl OneHot {
    pub fn new(index: usize, len: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::Index { index, len });
        }
        Ok(Self { index, len })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.len];
        v[self.index] = 1.0;
        v
    }
}

/// Max-shifted softmax; safe for logits of magnitude well beyond 700.
pub fn softmax(z: &Logits) -> Simplex {
    Simplex(softmax_slice(z.as_slice()))
}

pub(crate) fn softmax_slice(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// `J(q) m` with `J = diag(q) - q q^T`, the softmax Jacobian at `q`.
pub fn softmax_jacobian_vec(q: &Simplex, m: &[f64]) -> Result<Vec<f64>> {
    if m.len() != q.len() {
        return Err(Error::Dimension { expected: q.len(), got: m.len() });
    }
    Ok(jacobian_vec_unchecked(q.as_slice(), m))
}

pub(crate) fn jacobian_vec_unchecked(q: &[f64], m: &[f64]) -> Vec<f64> {
    let qm: f64 = q.iter().zip(m).map(|(a, b)| a * b).sum();
    q.iter().zip(m).map(|(&qi, &mi)| qi * (mi - qm)).collect()
}

/// Deterministic generator for experiments. Every stochastic routine takes
/// its generator from the caller; there is no global RNG.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draw from `Dirichlet(concentration)` by normalising independent gamma variates.
pub fn dirichlet_sample<R: Rng + ?Sized>(concentration: &[f64], rng: &mut R) -> Result<Simplex> {
    if concentration.is_empty() {
        return Err(Error::param("dirichlet needs at least one concentration"));
    }
    let mut draws = Vec::with_capacity(concentration.len());
    for (i, &a) in concentration.iter().enumerate() {
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::param(format!(
                "dirichlet concentration {i} = {a} must be positive and finite"
            )));
        }
        let gamma = Gamma::new(a, 1.0).map_err(|e| Error::param(e.to_string()))?;
        draws.push(gamma.sample(rng));
    }
    let sum: f64 = draws.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::Numerical(
            "dirichlet gamma draws underflowed; concentrations too small".into(),
        ));
    }
    for d in &mut draws {
        *d /= sum;
    }
    Simplex::new(draws)
}

/// Pairwise (tree) summation. The reduction order depends only on the slice
/// length, so parallel producers still give bitwise identical totals.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
