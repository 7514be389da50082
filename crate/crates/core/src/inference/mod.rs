//! Posterior sampling, convergence diagnostics, and per-cell probability
//! draws.

mod archive;
pub mod diagnostics;
mod gibbs;
pub mod polya_gamma;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cell::{design_rows, CellKey, Covariate, NUM_CELLS};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ingest::{AreaId, Cohort, MoverRecord};
use crate::model::{logistic, HyperKind, ModelSpec, ParameterLayout, Parameters};
use crate::rng;
use crate::stats;

pub use archive::{read_archive, write_archive, ARCHIVE_MAGIC, DRAWS_FILE, META_FILE};

/// R̂ above this or ESS below [`ESS_WARNING`] attaches a warning.
pub const RHAT_WARNING: f64 = 1.05;
pub const ESS_WARNING: f64 = 400.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    /// Kept draws per chain (after thinning).
    pub draws: usize,
    pub thin: usize,
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            warmup: 2000,
            draws: 2500,
            thin: 1,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.draws == 0 || self.thin == 0 {
            return Err(Error::InvalidInput("chains, draws and thin must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub median: f64,
    pub q975: f64,
    pub rhat: f64,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAcceptance {
    pub block: String,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawMeta {
    pub chains: usize,
    pub draws_per_chain: usize,
    pub warmup: usize,
    pub thin: usize,
    pub seed: u64,
    pub spec_hash: String,
    pub acceptance: Vec<BlockAcceptance>,
}

/// Posterior draws of every model coordinate.
///
/// Values are stored parameter-major: all R draws of coordinate 0 (chain by
/// chain), then coordinate 1, and so on. Precisions are stored on the log
/// scale and mixing weights on the logit scale, as named in [`names`].
///
/// [`names`]: PosteriorDraws::names
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    spec: ModelSpec,
    layout: ParameterLayout,
    meta: DrawMeta,
    values: Vec<f64>,
    diagnostics: Vec<Diagnostic>,
    warnings: Vec<String>,
}

impl PosteriorDraws {
    /// Assembles draws and computes their diagnostics.
    pub fn from_parts(spec: ModelSpec, meta: DrawMeta, values: Vec<f64>) -> Result<Self> {
        let layout = spec.layout();
        let r = meta.chains * meta.draws_per_chain;
        if r == 0 || values.len() != r * layout.len() {
            return Err(Error::Model(format!(
                "expected {} values for {} draws of {} coordinates, got {}",
                r * layout.len(),
                r,
                layout.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior draws".into()));
        }
        let mut out = PosteriorDraws {
            spec,
            layout,
            meta,
            values,
            diagnostics: Vec::new(),
            warnings: Vec::new(),
        };
        out.compute_diagnostics();
        Ok(out)
    }

    fn compute_diagnostics(&mut self) {
        let chains = self.meta.chains;
        let mut flagged = Vec::new();
        let mut diags = Vec::with_capacity(self.layout.len());
        for (k, name) in self.layout.names().iter().enumerate() {
            let col = self.column(k);
            let sorted = stats::sorted(col);
            let constant = sorted[0] == sorted[sorted.len() - 1];
            let (rhat, ess) = if constant {
                (f64::NAN, f64::NAN)
            } else {
                (
                    diagnostics::split_rhat(col, chains),
                    diagnostics::effective_sample_size(col, chains),
                )
            };
            if rhat > RHAT_WARNING || ess < ESS_WARNING {
                flagged.push(format!("{name} (rhat {rhat:.3}, ess {ess:.0})"));
            }
            diags.push(Diagnostic {
                name: name.clone(),
                mean: stats::mean(col),
                sd: stats::sd(col),
                q025: stats::quantile_sorted(&sorted, 0.025),
                median: stats::quantile_sorted(&sorted, 0.5),
                q975: stats::quantile_sorted(&sorted, 0.975),
                rhat,
                ess,
            });
        }
        self.diagnostics = diags;
        self.warnings.clear();
        if !flagged.is_empty() {
            let shown: Vec<&str> = flagged.iter().take(5).map(String::as_str).collect();
            self.warnings.push(format!(
                "{} coordinates breach rhat <= {RHAT_WARNING} / ess >= {ESS_WARNING}: {}{}",
                flagged.len(),
                shown.join(", "),
                if flagged.len() > 5 { ", ..." } else { "" }
            ));
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn meta(&self) -> &DrawMeta {
        &self.meta
    }

    pub fn names(&self) -> &[String] {
        self.layout.names()
    }

    /// Total number of draws R across chains.
    pub fn num_draws(&self) -> usize {
        self.meta.chains * self.meta.draws_per_chain
    }

    pub fn num_chains(&self) -> usize {
        self.meta.chains
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// All draws of coordinate `k`.
    pub fn column(&self, k: usize) -> &[f64] {
        let r = self.num_draws();
        &self.values[k * r..(k + 1) * r]
    }

    pub fn column_by_name(&self, name: &str) -> Option<&[f64]> {
        self.names().iter().position(|n| n == name).map(|k| self.column(k))
    }

    /// Coordinates of draw `r`.
    pub fn coordinates(&self, r: usize) -> Vec<f64> {
        let n = self.num_draws();
        (0..self.layout.len()).map(|k| self.values[k * n + r]).collect()
    }

    pub fn parameters(&self, r: usize) -> Parameters {
        self.layout.unpack(&self.coordinates(r))
    }

    pub fn diagnostics(&self) -> &[Diagnostic] {
        &self.diagnostics
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn add_warning(&mut self, w: String) {
        self.warnings.push(w);
    }
}

/// Hex SHA-256 of the canonical JSON form of a model specification.
pub fn spec_hash(spec: &ModelSpec) -> String {
    let json = serde_json::to_vec(spec).expect("model spec serialises");
    hex::encode(Sha256::digest(&json))
}

fn block_label(layout: &ParameterLayout, kind: HyperKind, start: usize) -> String {
    match kind {
        HyperKind::Bym2(_) => {
            let name = &layout.names()[start];
            name.replacen("log_tau", "bym2", 1)
        }
        _ => layout.names()[start].clone(),
    }
}

/// Draws from the posterior of `spec` given `data` with multiple
/// independent chains.
pub fn sample_posterior(spec: &ModelSpec, data: &[MoverRecord], config: &SamplerConfig) -> Result<PosteriorDraws> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("no mover records to fit".into()));
    }
    let idx = spec.index_data(data)?;
    let latent = gibbs::Latent::new(spec, &idx);
    let outputs = config.execution.map_range(config.chains, |c| {
        let mut stream = rng::stream(config.seed, rng::CHAINS, c as u64);
        gibbs::run_chain(&latent, config.warmup, config.draws, config.thin, &mut stream)
    });
    let outputs: Vec<gibbs::ChainOutput> = outputs.into_iter().collect::<Result<_>>()?;

    let layout = latent.layout();
    let width = layout.len();
    let r = config.chains * config.draws;
    let mut values = vec![0.0; r * width];
    for (c, out) in outputs.iter().enumerate() {
        for d in 0..config.draws {
            for k in 0..width {
                values[k * r + c * config.draws + d] = out.values[d * width + k];
            }
        }
    }
    let acceptance = layout
        .hyper_blocks()
        .iter()
        .enumerate()
        .map(|(b, h)| BlockAcceptance {
            block: block_label(layout, h.kind, h.start),
            rate: outputs.iter().map(|o| o.acceptance[b]).sum::<f64>() / outputs.len() as f64,
        })
        .collect();
    let meta = DrawMeta {
        chains: config.chains,
        draws_per_chain: config.draws,
        warmup: config.warmup,
        thin: config.thin,
        seed: config.seed,
        spec_hash: spec_hash(spec),
        acceptance,
    };
    let mut posterior = PosteriorDraws::from_parts(spec.clone(), meta, values)?;
    if idx.y.iter().all(|&y| y) || idx.y.iter().all(|&y| !y) {
        posterior.add_warning(
            "divergence: every outcome is identical, so the likelihood cannot identify the fixed effects and the posterior follows the prior"
                .into(),
        );
    } else if let Some(d) = posterior
        .diagnostics()
        .iter()
        .take(1 + layout.num_beta)
        .find(|d| d.mean.abs() > 10.0)
    {
        let name = d.name.clone();
        posterior.add_warning(format!(
            "divergence: {name} drifted beyond 10 on the logit scale, which suggests separation by a covariate"
        ));
    }
    for w in posterior.warnings() {
        log::debug!("{w}");
    }
    Ok(posterior)
}

/// Per-cell probability draws: for each (area, cohort), an R × 900 array in
/// draw-major order with cells ordered by [`CellKey::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct CellDraws {
    pub num_draws: usize,
    pub values: BTreeMap<(AreaId, Cohort), Vec<f64>>,
}

impl CellDraws {
    pub fn get(&self, area: &AreaId, cohort: Cohort) -> Option<&[f64]> {
        self.values.get(&(area.clone(), cohort)).map(Vec::as_slice)
    }

    /// Probability of `cell` in draw `r`.
    pub fn probability(&self, area: &AreaId, cohort: Cohort, r: usize, cell: CellKey) -> Option<f64> {
        self.get(area, cohort).map(|v| v[r * NUM_CELLS + cell.index()])
    }
}

/// β₀ + x(cell)ᵀβ for every draw and cell, draw-major (R × 900).
pub fn cell_logits(posterior: &PosteriorDraws) -> Vec<f64> {
    let r = posterior.num_draws();
    let rows = design_rows(posterior.spec().covariates());
    let beta0 = posterior.column(0);
    let betas: Vec<&[f64]> = (0..posterior.layout().num_beta).map(|k| posterior.column(1 + k)).collect();
    let mut out = vec![0.0; r * NUM_CELLS];
    for d in 0..r {
        for (j, row) in rows.iter().enumerate() {
            out[d * NUM_CELLS + j] = beta0[d] + row.iter().map(|&k| betas[k][d]).sum::<f64>();
        }
    }
    out
}

/// α_t + ω_{s,t} per draw (the survey effect is excluded).
pub fn area_offsets(posterior: &PosteriorDraws, area: &AreaId, cohort: Cohort) -> Result<Vec<f64>> {
    let spec = posterior.spec();
    let layout = posterior.layout();
    let t = spec
        .cohort_position(cohort)
        .ok_or_else(|| Error::InvalidInput(format!("cohort {} is not in the fitted model", cohort.label())))?;
    let s = spec.area_position(t, area).ok_or_else(|| {
        Error::InvalidInput(format!(
            "area {area} is not part of the {} geography of cohort {}",
            cohort.geography(),
            cohort.label()
        ))
    })?;
    let mut out = vec![0.0; posterior.num_draws()];
    if let Some(a) = layout.alpha {
        for (o, v) in out.iter_mut().zip(posterior.column(a + t)) {
            *o += v;
        }
    }
    if let Some(&o) = layout.omega.get(t) {
        for (x, v) in out.iter_mut().zip(posterior.column(o + s)) {
            *x += v;
        }
    }
    Ok(out)
}

/// Cell probabilities with the survey effect omitted, for each requested
/// (area, cohort).
pub fn predict_cells(spec: &ModelSpec, posterior: &PosteriorDraws, keys: &[(AreaId, Cohort)]) -> Result<CellDraws> {
    if posterior.spec() != spec {
        return Err(Error::InvalidInput("posterior draws were fitted under a different model specification".into()));
    }
    let r = posterior.num_draws();
    let logits = cell_logits(posterior);
    let mut values = BTreeMap::new();
    for (area, cohort) in keys {
        let offsets = area_offsets(posterior, area, *cohort)?;
        let mut v = vec![0.0; r * NUM_CELLS];
        for d in 0..r {
            for j in 0..NUM_CELLS {
                v[d * NUM_CELLS + j] = logistic(logits[d * NUM_CELLS + j] + offsets[d]);
            }
        }
        values.insert((area.clone(), *cohort), v);
    }
    Ok(CellDraws { num_draws: r, values })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OddsRatio {
    pub covariate: Covariate,
    pub level: &'static str,
    pub odds_ratio: f64,
    pub lower: f64,
    pub upper: f64,
}

/// exp of the posterior median and of the 2.5% / 97.5% quantiles of every
/// fixed-effect coefficient.
pub fn fixed_effect_summary(posterior: &PosteriorDraws) -> Vec<OddsRatio> {
    posterior
        .spec()
        .coefficients()
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let sorted = stats::sorted(posterior.column(1 + k));
            OddsRatio {
                covariate: c.covariate,
                level: c.level,
                odds_ratio: stats::quantile_sorted(&sorted, 0.5).exp(),
                lower: stats::quantile_sorted(&sorted, 0.025).exp(),
                upper: stats::quantile_sorted(&sorted, 0.975).exp(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;
