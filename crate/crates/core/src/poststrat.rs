//! Poststratification of cell-level probability draws to area × cohort
//! displacement rates, and their posterior summaries.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::cell::NUM_CELLS;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::inference::{area_offsets, cell_logits, CellDraws, PosteriorDraws};
use crate::ingest::{AreaId, Cohort, PostStratTable};
use crate::model::logistic;
use crate::stats;

/// Poststratified rate draws per (area, cohort).
#[derive(Debug, Clone, PartialEq)]
pub struct AreaDraws {
    pub num_draws: usize,
    pub values: BTreeMap<(AreaId, Cohort), Vec<f64>>,
    /// N_{s,t} = Σ_j N_{j,s,t}.
    pub populations: BTreeMap<(AreaId, Cohort), f64>,
}

impl AreaDraws {
    pub fn get(&self, area: &AreaId, cohort: Cohort) -> Option<&[f64]> {
        self.values.get(&(area.clone(), cohort)).map(Vec::as_slice)
    }

    pub fn cohorts(&self) -> Vec<Cohort> {
        let mut c: Vec<Cohort> = self.values.keys().map(|k| k.1).collect();
        c.sort();
        c.dedup();
        c
    }

    /// Keeps only the draws at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> AreaDraws {
        AreaDraws {
            num_draws: indices.len(),
            values: self
                .values
                .iter()
                .map(|(k, v)| (k.clone(), indices.iter().map(|&i| v[i]).collect()))
                .collect(),
            populations: self.populations.clone(),
        }
    }

    /// Population-weighted aggregate over the areas of `cohort`, per draw.
    pub fn aggregate(&self, cohort: Cohort) -> Option<Vec<f64>> {
        let mut out = vec![0.0; self.num_draws];
        let mut total = 0.0;
        for ((area, c), v) in &self.values {
            if *c != cohort {
                continue;
            }
            let n = self.populations[&(area.clone(), *c)];
            total += n;
            for (o, p) in out.iter_mut().zip(v) {
                *o += n * p;
            }
        }
        if total <= 0.0 {
            return None;
        }
        out.iter_mut().for_each(|o| *o /= total);
        Some(out)
    }
}

fn counts_for<'a>(table: &'a PostStratTable, area: &AreaId, cohort: Cohort) -> Result<(&'a [f64], f64)> {
    let counts = table.counts(area, cohort).ok_or_else(|| {
        Error::InvalidInput(format!(
            "no positive poststratification counts for area {area}, cohort {}",
            cohort.label()
        ))
    })?;
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "all poststratification counts are zero for area {area}, cohort {}",
            cohort.label()
        )));
    }
    Ok((counts, total))
}

/// p_{s,t}^{(r)} = Σ_j N_{j,s,t} p_{j,s,t}^{(r)} / Σ_j N_{j,s,t} for every
/// (area, cohort) in `cells`.
pub fn poststratify(cells: &CellDraws, table: &PostStratTable) -> Result<AreaDraws> {
    let mut values = BTreeMap::new();
    let mut populations = BTreeMap::new();
    for ((area, cohort), draws) in &cells.values {
        let (counts, total) = counts_for(table, area, *cohort)?;
        let nz: Vec<(usize, f64)> = counts.iter().copied().enumerate().filter(|&(_, n)| n > 0.0).collect();
        let v: Vec<f64> = (0..cells.num_draws)
            .map(|r| {
                let row = &draws[r * NUM_CELLS..(r + 1) * NUM_CELLS];
                nz.iter().map(|&(j, n)| n * row[j]).sum::<f64>() / total
            })
            .collect();
        values.insert((area.clone(), *cohort), v);
        populations.insert((area.clone(), *cohort), total);
    }
    Ok(AreaDraws {
        num_draws: cells.num_draws,
        values,
        populations,
    })
}

/// Poststratified draws computed directly from the posterior without
/// materialising the full cell array, for the given keys (every key of the
/// table that the model covers when `keys` is `None`). Agrees exactly with
/// [`crate::inference::predict_cells`] followed by [`poststratify`].
pub fn poststratify_posterior(
    posterior: &PosteriorDraws,
    table: &PostStratTable,
    keys: Option<&[(AreaId, Cohort)]>,
    execution: Execution,
) -> Result<AreaDraws> {
    let keys: Vec<(AreaId, Cohort)> = match keys {
        Some(k) => k.to_vec(),
        None => {
            let spec = posterior.spec();
            table
                .keys()
                .filter(|(a, c)| spec.cohort_position(*c).is_some_and(|t| spec.area_position(t, a).is_some()))
                .cloned()
                .collect()
        }
    };
    let logits = cell_logits(posterior);
    let results = execution.map(&keys, |(area, cohort)| -> Result<(Vec<f64>, f64)> {
        let (counts, total) = counts_for(table, area, *cohort)?;
        let offsets = area_offsets(posterior, area, *cohort)?;
        Ok((weighted_rates(&logits, &offsets, counts, total), total))
    });
    let mut values = BTreeMap::new();
    let mut populations = BTreeMap::new();
    for (key, res) in keys.into_iter().zip(results) {
        let (v, total) = res?;
        values.insert(key.clone(), v);
        populations.insert(key, total);
    }
    Ok(AreaDraws {
        num_draws: posterior.num_draws(),
        values,
        populations,
    })
}

/// Per-draw rate for an arbitrary cell composition `counts` given shared
/// cell logits (R × 900) and per-draw area offsets.
pub fn weighted_rates(logits: &[f64], offsets: &[f64], counts: &[f64], total: f64) -> Vec<f64> {
    let nz: Vec<(usize, f64)> = counts.iter().copied().enumerate().filter(|&(_, n)| n > 0.0).collect();
    offsets
        .iter()
        .enumerate()
        .map(|(r, off)| {
            let row = &logits[r * NUM_CELLS..(r + 1) * NUM_CELLS];
            nz.iter().map(|&(j, n)| n * logistic(row[j] + off)).sum::<f64>() / total
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Interval {
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AreaSummary {
    pub area: AreaId,
    pub cohort: Cohort,
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
    pub intervals: Vec<Interval>,
}

impl AreaSummary {
    pub fn width(&self, level: f64) -> Option<f64> {
        self.intervals
            .iter()
            .find(|i| (i.level - level).abs() < 1e-12)
            .map(Interval::width)
    }
}

pub fn summarize_draws(area: AreaId, cohort: Cohort, draws: &[f64], levels: &[f64]) -> AreaSummary {
    let sorted = stats::sorted(draws);
    AreaSummary {
        area,
        cohort,
        median: stats::quantile_sorted(&sorted, 0.5),
        mean: stats::mean(draws),
        sd: stats::sd(draws),
        intervals: levels
            .iter()
            .map(|&level| {
                let (lower, upper) = stats::interval_sorted(&sorted, level);
                Interval { level, lower, upper }
            })
            .collect(),
    }
}

/// Median, equal-tailed interval at each level, and standard deviation per
/// (area, cohort), ordered by area then cohort.
pub fn summarize(draws: &AreaDraws, levels: &[f64]) -> Vec<AreaSummary> {
    draws
        .values
        .iter()
        .map(|((area, cohort), v)| summarize_draws(area.clone(), *cohort, v, levels))
        .collect()
}
