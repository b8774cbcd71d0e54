//! Token-probability logs from external models and the continuum diagnostics
//! computed over them.
//!
//! A log is JSONL with one record per training token:
//!
//! ```text
//! {"sample_id":"s0","token_index":0,"prob":0.83,"token_id":1234}
//! ```
//!
//! `token_id` is optional. The mean of `prob` over all tokens is the
//! model-capability proxy used to place a model/task pair on the continuum.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::ThresholdInterval;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub sample_id: String,
    pub token_index: u64,
    pub prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_id: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenLog {
    records: Vec<TokenRecord>,
    n_samples: usize,
}

impl TokenLog {
    pub fn records(&self) -> &[TokenRecord] {
        &self.records
    }

    pub fn n_tokens(&self) -> usize {
        self.records.len()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn probs(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.prob)
    }

    pub fn from_records(records: Vec<TokenRecord>) -> Result<Self> {
        let mut v = Validator::default();
        for (i, r) in records.iter().enumerate() {
            v.check(r, i + 1)?;
        }
        Ok(Self { records, n_samples: v.samples.len() })
    }
}

#[derive(Default)]
struct Validator {
    keys: HashSet<(String, u64)>,
    samples: HashSet<String>,
}

impl Validator {
    fn check(&mut self, r: &TokenRecord, line: usize) -> Result<()> {
        if !r.prob.is_finite() || !(0.0..=1.0).contains(&r.prob) {
            return Err(Error::Parse { line, message: format!("prob {} outside [0, 1]", r.prob) });
        }
        if !self.keys.insert((r.sample_id.clone(), r.token_index)) {
            return Err(Error::Parse {
                line,
                message: format!(
                    "duplicate (sample_id, token_index) = ({:?}, {})",
                    r.sample_id, r.token_index
                ),
            });
        }
        if !self.samples.contains(&r.sample_id) {
            self.samples.insert(r.sample_id.clone());
        }
        Ok(())
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<TokenRecord> {
    serde_json::from_str(line).map_err(|e| Error::Parse { line: lineno, message: e.to_string() })
}

/// Single-pass streaming parse. Blank lines are skipped; the first invalid
/// line aborts with its 1-based line number.
pub fn parse_log<R: BufRead>(reader: R) -> Result<TokenLog> {
    let mut v = Validator::default();
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_line(&line, i + 1)?;
        v.check(&rec, i + 1)?;
        records.push(rec);
    }
    Ok(TokenLog { records, n_samples: v.samples.len() })
}

pub fn write_log<W: Write>(log: &TokenLog, mut w: W) -> Result<()> {
    for r in &log.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn require_tokens(log: &TokenLog) -> Result<()> {
    if log.records.is_empty() {
        return Err(Error::param("token log is empty"));
    }
    Ok(())
}

/// Mean predicted probability of the training tokens.
pub fn mean_predicted_probability(log: &TokenLog) -> Result<f64> {
    require_tokens(log)?;
    let probs: Vec<f64> = log.probs().collect();
    Ok(crate::simplex::pairwise_sum(&probs) / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    ModelStrong,
    ModelIntermediate,
    ModelWeak,
}

impl Regime {
    pub fn short(&self) -> &'static str {
        match self {
            Regime::ModelStrong => "ms",
            Regime::ModelIntermediate => "mi",
            Regime::ModelWeak => "mw",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ms" | "model_strong" => Ok(Regime::ModelStrong),
            "mi" | "model_intermediate" => Ok(Regime::ModelIntermediate),
            "mw" | "model_weak" => Ok(Regime::ModelWeak),
            _ => Err(Error::param(format!("unknown regime {s:?}"))),
        }
    }
}

/// Decision boundaries on the mean predicted probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuumCuts {
    pub strong: f64,
    pub weak: f64,
}

impl Default for ContinuumCuts {
    fn default() -> Self {
        Self { strong: 0.70, weak: 0.15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContinuumClass {
    pub tag: Regime,
    pub mean_prob: f64,
}

pub fn classify_continuum(mean_prob: f64, cuts: ContinuumCuts) -> ContinuumClass {
    let tag = if mean_prob >= cuts.strong {
        Regime::ModelStrong
    } else if mean_prob <= cuts.weak {
        Regime::ModelWeak
    } else {
        Regime::ModelIntermediate
    };
    ContinuumClass { tag, mean_prob }
}

/// 1-based nearest rank `ceil(P/100 * n)`, clamped to `[1, n]`.
pub fn nearest_rank(percentile: f64, n: usize) -> Result<usize> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::param(format!("percentile {percentile} must lie in (0, 100]")));
    }
    let x = percentile * n as f64 / 100.0;
    let r = x.round();
    let rank = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    Ok((rank as usize).clamp(1, n.max(1)))
}

/// Nearest-rank quantile of an ascending-sorted sample.
pub fn quantile_sorted(sorted: &[f64], percentile: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::param("cannot take a quantile of an empty sample"));
    }
    Ok(sorted[nearest_rank(percentile, sorted.len())? - 1])
}

pub fn sorted_probs(log: &TokenLog) -> Vec<f64> {
    let mut v: Vec<f64> = log.probs().collect();
    v.sort_by(f64::total_cmp);
    v
}

pub fn quantile(log: &TokenLog, percentile: f64) -> Result<f64> {
    require_tokens(log)?;
    quantile_sorted(&sorted_probs(log), percentile)
}

/// Fraction of tokens with probability strictly above `cut`.
pub fn assumption_stat(log: &TokenLog, cut: f64) -> Result<f64> {
    require_tokens(log)?;
    let above = log.probs().filter(|&p| p > cut).count();
    Ok(above as f64 / log.n_tokens() as f64)
}

pub const DEFAULT_ASSUMPTION_CUT: f64 = 0.55;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenMask {
    pub keep: Vec<bool>,
    pub kept_fraction: f64,
}

pub fn build_mask(log: &TokenLog, interval: &ThresholdInterval) -> TokenMask {
    let keep: Vec<bool> = log.probs().map(|p| interval.contains(p)).collect();
    let kept = keep.iter().filter(|&&k| k).count();
    let kept_fraction = if keep.is_empty() { 0.0 } else { kept as f64 / keep.len() as f64 };
    TokenMask { keep, kept_fraction }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub mean_prob: f64,
    pub class: Regime,
    pub quantiles: BTreeMap<String, f64>,
    pub assumption_stat: f64,
    pub n_tokens: usize,
    pub n_samples: usize,
    pub cuts: ContinuumCuts,
    pub assumption_cut: f64,
    /// Continuum boundaries are configurable defaults, not values fixed by data.
    pub cuts_are_defaults: bool,
}

#[derive(Debug, Clone)]
pub struct DiagnosticsOptions {
    pub percentiles: Vec<f64>,
    pub cuts: ContinuumCuts,
    pub assumption_cut: f64,
    /// Probabilities kept in memory for exact quantiles before switching to a second pass.
    pub memory_budget: usize,
}

impl Default for DiagnosticsOptions {
    fn default() -> Self {
        Self {
            percentiles: vec![10.0, 50.0, 90.0],
            cuts: ContinuumCuts::default(),
            assumption_cut: DEFAULT_ASSUMPTION_CUT,
            memory_budget: 1_000_000,
        }
    }
}

fn quantile_key(p: f64) -> String {
    format!("p{p}")
}

pub fn diagnose(log: &TokenLog, opts: &DiagnosticsOptions) -> Result<Diagnostics> {
    let mean_prob = mean_predicted_probability(log)?;
    let sorted = sorted_probs(log);
    let mut quantiles = BTreeMap::new();
    for &p in &opts.percentiles {
        quantiles.insert(quantile_key(p), quantile_sorted(&sorted, p)?);
    }
    Ok(Diagnostics {
        mean_prob,
        class: classify_continuum(mean_prob, opts.cuts).tag,
        quantiles,
        assumption_stat: assumption_stat(log, opts.assumption_cut)?,
        n_tokens: log.n_tokens(),
        n_samples: log.n_samples(),
        cuts: opts.cuts,
        assumption_cut: opts.assumption_cut,
        cuts_are_defaults: opts.cuts == ContinuumCuts::default(),
    })
}

const HIST_BINS: usize = 1 << 16;

fn bin_of(p: f64) -> usize {
    ((p * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
}

/// Diagnostics straight from a JSONL file without materialising the log.
///
/// The first pass validates every line and accumulates the mean, the
/// assumption statistic, and a fixed histogram. Probabilities are buffered
/// while the token count stays within `memory_budget`; past that, a second
/// pass collects only the histogram bins that hold the requested ranks, so
/// quantiles remain exact nearest-rank values.
pub fn diagnose_path(path: &Path, opts: &DiagnosticsOptions) -> Result<Diagnostics> {
    let mut v = Validator::default();
    let mut hist = vec![0usize; HIST_BINS];
    let mut buffer: Option<Vec<f64>> = Some(Vec::new());
    let (mut sum, mut comp, mut above, mut n) = (0.0f64, 0.0f64, 0usize, 0usize);

    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_line(&line, i + 1)?;
        v.check(&rec, i + 1)?;
        let p = rec.prob;
        // Neumaier-compensated running sum
        let t = sum + p;
        comp += if sum.abs() >= p.abs() { (sum - t) + p } else { (p - t) + sum };
        sum = t;
        n += 1;
        if p > opts.assumption_cut {
            above += 1;
        }
        hist[bin_of(p)] += 1;
        if let Some(b) = buffer.as_mut() {
            if b.len() < opts.memory_budget {
                b.push(p);
            } else {
                buffer = None;
            }
        }
    }
    if n == 0 {
        return Err(Error::param("token log is empty"));
    }

    let mut ranks = Vec::with_capacity(opts.percentiles.len());
    for &p in &opts.percentiles {
        ranks.push((p, nearest_rank(p, n)?));
    }

    let mut quantiles = BTreeMap::new();
    match buffer {
        Some(mut b) => {
            b.sort_by(f64::total_cmp);
            for (p, rank) in ranks {
                quantiles.insert(quantile_key(p), b[rank - 1]);
            }
        }
        None => {
            // map each rank to (bin, rank within bin)
            let mut wanted: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            let mut targets = Vec::with_capacity(ranks.len());
            for &(p, rank) in &ranks {
                let mut seen = 0;
                let mut bin = 0;
                while seen + hist[bin] < rank {
                    seen += hist[bin];
                    bin += 1;
                }
                wanted.entry(bin).or_default();
                targets.push((p, bin, rank - seen));
            }
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: TokenRecord = serde_json::from_str(&line)?;
                if let Some(vals) = wanted.get_mut(&bin_of(rec.prob)) {
                    vals.push(rec.prob);
                }
            }
            for vals in wanted.values_mut() {
                vals.sort_by(f64::total_cmp);
            }
            for (p, bin, within) in targets {
                quantiles.insert(quantile_key(p), wanted[&bin][within - 1]);
            }
        }
    }

    let mean_prob = (sum + comp) / n as f64;
    Ok(Diagnostics {
        mean_prob,
        class: classify_continuum(mean_prob, opts.cuts).tag,
        quantiles,
        assumption_stat: above as f64 / n as f64,
        n_tokens: n,
        n_samples: v.samples.len(),
        cuts: opts.cuts,
        assumption_cut: opts.assumption_cut,
        cuts_are_defaults: opts.cuts == ContinuumCuts::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_of(probs: &[f64]) -> TokenLog {
        TokenLog::from_records(
            probs
                .iter()
                .enumerate()
                .map(|(i, &p)| TokenRecord {
                    sample_id: format!("s{}", i / 3),
                    token_index: i as u64,
                    prob: p,
                    token_id: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn parse_examples() {
        let text = "{\"sample_id\":\"a\",\"token_index\":0,\"prob\":0.5}\n\
                    {\"sample_id\":\"a\",\"token_index\":1,\"prob\":0.25,\"token_id\":7}\n\
                    {\"sample_id\":\"b\",\"token_index\":0,\"prob\":1.0}\n";
        let log = parse_log(text.as_bytes()).unwrap();
        assert_eq!(log.n_tokens(), 3);
        assert_eq!(log.n_samples(), 2);
        assert_eq!(log.records()[1].token_id, Some(7));

        let bad = "{\"sample_id\":\"a\",\"token_index\":0,\"prob\":0.5}\n\
                   {\"sample_id\":\"a\",\"token_index\":1,\"prob\":1.2}\n";
        assert!(matches!(parse_log(bad.as_bytes()), Err(Error::Parse { line: 2, .. })));

        let empty = parse_log("".as_bytes()).unwrap();
        assert_eq!(empty.n_tokens(), 0);
    }

    #[test]
    fn parse_rejects_duplicates_and_garbage() {
        let dup = "{\"sample_id\":\"a\",\"token_index\":0,\"prob\":0.5}\n\n\
                   {\"sample_id\":\"a\",\"token_index\":0,\"prob\":0.4}\n";
        assert!(matches!(parse_log(dup.as_bytes()), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse_log("not json\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
        let missing = "{\"sample_id\":\"a\",\"prob\":0.4}\n";
        assert!(matches!(parse_log(missing.as_bytes()), Err(Error::Parse { line: 1, .. })));
        let neg = "{\"sample_id\":\"a\",\"token_index\":-1,\"prob\":0.4}\n";
        assert!(parse_log(neg.as_bytes()).is_err());
    }

    #[test]
    fn mean_examples() {
        assert_eq!(mean_predicted_probability(&log_of(&[0.5, 0.25, 0.25, 1.0])).unwrap(), 0.5);
        assert!((mean_predicted_probability(&log_of(&[0.81; 7])).unwrap() - 0.81).abs() < 1e-15);
        assert_eq!(mean_predicted_probability(&log_of(&[0.07])).unwrap(), 0.07);
        assert!(mean_predicted_probability(&TokenLog::default()).is_err());
    }

    #[test]
    fn continuum_examples() {
        let c = ContinuumCuts::default();
        assert_eq!(classify_continuum(0.81, c).tag, Regime::ModelStrong);
        assert_eq!(classify_continuum(0.01, c).tag, Regime::ModelWeak);
        assert_eq!(classify_continuum(0.53, c).tag, Regime::ModelIntermediate);
        assert_eq!(classify_continuum(0.70, c).tag, Regime::ModelStrong);
        assert_eq!(classify_continuum(0.15, c).tag, Regime::ModelWeak);
    }

    #[test]
    fn quantile_examples() {
        let deciles: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
        let log = log_of(&deciles);
        assert_eq!(quantile(&log, 90.0).unwrap(), 0.9);
        assert_eq!(quantile(&log_of(&[0.4, 0.2]), 50.0).unwrap(), 0.2);
        for p in [0.5, 33.0, 100.0] {
            assert_eq!(quantile(&log_of(&[0.3]), p).unwrap(), 0.3);
        }
        assert!(quantile(&TokenLog::default(), 50.0).is_err());
        assert!(quantile(&log, 0.0).is_err());
    }

    #[test]
    fn assumption_stat_examples() {
        assert_eq!(assumption_stat(&log_of(&[0.8, 0.8, 0.4, 0.9]), 0.55).unwrap(), 0.75);
        assert_eq!(assumption_stat(&log_of(&[0.1, 0.55]), 0.55).unwrap(), 0.0);
    }

    #[test]
    fn mask_examples() {
        let deciles: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
        let log = log_of(&deciles);
        let all = build_mask(&log, &ThresholdInterval::full());
        assert!(all.keep.iter().all(|&k| k));
        assert_eq!(all.kept_fraction, 1.0);
        let q90 = quantile(&log, 90.0).unwrap();
        let m = build_mask(&log, &ThresholdInterval::new(q90, 1.0).unwrap());
        assert_eq!(m.kept_fraction, 0.2);
    }

    #[test]
    fn streaming_matches_in_memory_past_budget() {
        let probs: Vec<f64> = (0..5000).map(|i| ((i * 7919) % 5000) as f64 / 5000.0).collect();
        let log = log_of(&probs);
        let dir = std::env::temp_dir().join(format!("objflow-ingest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("log.jsonl");
        write_log(&log, File::create(&path).unwrap()).unwrap();

        let opts = DiagnosticsOptions { percentiles: vec![1.0, 10.0, 50.0, 99.9, 100.0], ..Default::default() };
        let mem = diagnose(&log, &opts).unwrap();
        let small = DiagnosticsOptions { memory_budget: 100, ..opts.clone() };
        let streamed = diagnose_path(&path, &small).unwrap();
        let buffered = diagnose_path(&path, &opts).unwrap();
        assert_eq!(streamed.quantiles, mem.quantiles);
        assert_eq!(buffered.quantiles, mem.quantiles);
        assert!((streamed.mean_prob - mem.mean_prob).abs() < 1e-14);
        assert_eq!(streamed.assumption_stat, mem.assumption_stat);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
