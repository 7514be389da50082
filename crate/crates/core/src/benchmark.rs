//! Direct survey estimates with replicate-weight variances, and exact
//! rejection filtering of posterior draws against Gaussian benchmarks.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{BenchmarkTarget, Cohort};
use crate::poststrat::AreaDraws;
use crate::rng;
use crate::stats;

/// Fay coefficient of the successive-difference replicate weights.
pub const DEFAULT_FAY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRow {
    pub displaced: bool,
    pub weight: f64,
    pub rep_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSurvey {
    rows: Vec<ReplicateRow>,
    fay: f64,
}

impl ReplicateSurvey {
    pub fn new(rows: Vec<ReplicateRow>, fay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&fay) {
            return Err(Error::InvalidInput(format!("fay coefficient {fay} must lie in [0, 1)")));
        }
        let k = rows.first().map_or(0, |r| r.rep_weights.len());
        for (i, r) in rows.iter().enumerate() {
            if !(r.weight > 0.0 && r.weight.is_finite()) {
                return Err(Error::InvalidInput(format!("row {}: weight must be positive", i + 1)));
            }
            if r.rep_weights.len() != k {
                return Err(Error::InvalidInput(format!(
                    "row {}: expected {k} replicate weights, found {}",
                    i + 1,
                    r.rep_weights.len()
                )));
            }
            if r.rep_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(Error::InvalidInput(format!("row {}: replicate weights must be nonnegative", i + 1)));
            }
        }
        Ok(ReplicateSurvey { rows, fay })
    }

    pub fn rows(&self) -> &[ReplicateRow] {
        &self.rows
    }

    pub fn fay(&self) -> f64 {
        self.fay
    }

    pub fn num_replicates(&self) -> usize {
        self.rows.first().map_or(0, |r| r.rep_weights.len())
    }
}

/// Variance multiplier 1/(1 − fay)²; with fay = 0.5 and K replicates the
/// variance is (4/K)·Σ_k (θ_k − θ̂)².
pub fn replicate_multiplier(fay: f64) -> f64 {
    1.0 / ((1.0 - fay) * (1.0 - fay))
}

fn weighted_share(rows: &[ReplicateRow], weight: impl Fn(&ReplicateRow) -> f64) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for r in rows {
        let w = weight(r);
        den += w;
        if r.displaced {
            num += w;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Weighted share of displaced households and its replicate standard error.
/// The standard error is zero when every replicate estimate equals the
/// full-sample estimate.
pub fn direct_estimate(survey: &ReplicateSurvey, cohort: Cohort) -> Result<BenchmarkTarget> {
    let estimate = weighted_share(&survey.rows, |r| r.weight)
        .ok_or_else(|| Error::InvalidInput("total survey weight is zero".into()))?;
    let k = survey.num_replicates();
    if k == 0 {
        return Err(Error::InvalidInput("no replicate weight columns to estimate a variance".into()));
    }
    let mut ss = 0.0;
    for j in 0..k {
        let theta = weighted_share(&survey.rows, |r| r.rep_weights[j])
            .ok_or_else(|| Error::InvalidInput(format!("replicate {} has zero total weight", j + 1)))?;
        ss += (theta - estimate) * (theta - estimate);
    }
    let variance = replicate_multiplier(survey.fay) / k as f64 * ss;
    Ok(BenchmarkTarget {
        cohort,
        estimate,
        std_error: variance.sqrt(),
    })
}

fn checked_aggregates(draws: &AreaDraws, targets: &[BenchmarkTarget]) -> Result<Vec<Vec<f64>>> {
    targets
        .iter()
        .map(|t| {
            if !(t.std_error > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "benchmark for cohort {} has a non-positive standard error",
                    t.cohort.label()
                )));
            }
            draws.aggregate(t.cohort).ok_or_else(|| {
                Error::InvalidInput(format!("benchmark cohort {} has no poststratified draws", t.cohort.label()))
            })
        })
        .collect()
}

fn log_accept(aggregates: &[Vec<f64>], targets: &[BenchmarkTarget], r: usize) -> f64 {
    -aggregates
        .iter()
        .zip(targets)
        .map(|(m, t)| {
            let z = (t.estimate - m[r]) / t.std_error;
            0.5 * z * z
        })
        .sum::<f64>()
}

/// exp(−Σ_t (p_t − m_t^{(r)})² / (2σ_t²)) where m_t^{(r)} is the
/// population-weighted aggregate of draw r over the areas of cohort t.
pub fn accept_probability(draws: &AreaDraws, r: usize, targets: &[BenchmarkTarget]) -> Result<f64> {
    if r >= draws.num_draws {
        return Err(Error::InvalidInput(format!("draw {r} out of range")));
    }
    let agg = checked_aggregates(draws, targets)?;
    Ok(log_accept(&agg, targets, r).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkResult {
    pub kept: AreaDraws,
    /// Indices of the retained input draws, ascending.
    pub kept_indices: Vec<usize>,
    pub acceptance_rate: f64,
    pub per_draw_log_weight: Vec<f64>,
}

/// Keeps draw r iff U_r < accept_probability(r), with U_r from the filter
/// stream of `seed`; all cohorts are judged jointly, one decision per draw.
pub fn rejection_filter(draws: &AreaDraws, targets: &[BenchmarkTarget], seed: u64) -> Result<BenchmarkResult> {
    if draws.num_draws == 0 {
        return Err(Error::InvalidInput("no draws to filter".into()));
    }
    let agg = checked_aggregates(draws, targets)?;
    let log_w: Vec<f64> = (0..draws.num_draws).map(|r| log_accept(&agg, targets, r)).collect();
    let mut stream = rng::stream(seed, rng::FILTER, 0);
    let kept_indices: Vec<usize> = log_w
        .iter()
        .enumerate()
        .filter(|(_, lw)| stream.random::<f64>() < lw.exp())
        .map(|(r, _)| r)
        .collect();
    if kept_indices.is_empty() {
        return Err(Error::NoDrawsAccepted { draws: draws.num_draws });
    }
    Ok(BenchmarkResult {
        kept: draws.select(&kept_indices),
        acceptance_rate: kept_indices.len() as f64 / draws.num_draws as f64,
        kept_indices,
        per_draw_log_weight: log_w,
    })
}

/// Unbenchmarked versus benchmarked summary for one (area, cohort).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub area: crate::ingest::AreaId,
    pub cohort: Cohort,
    pub unbenchmarked_median: f64,
    pub unbenchmarked_sd: f64,
    pub benchmarked_median: f64,
    pub benchmarked_sd: f64,
}

pub fn compare(unbenchmarked: &AreaDraws, benchmarked: &AreaDraws) -> Vec<Comparison> {
    unbenchmarked
        .values
        .iter()
        .filter_map(|(key, before)| {
            let after = benchmarked.values.get(key)?;
            Some(Comparison {
                area: key.0.clone(),
                cohort: key.1,
                unbenchmarked_median: stats::median(before),
                unbenchmarked_sd: stats::sd(before),
                benchmarked_median: stats::median(after),
                benchmarked_sd: stats::sd(after),
            })
        })
        .collect()
}
