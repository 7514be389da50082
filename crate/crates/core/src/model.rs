//! Model specifications for the four nested logistic models, their parameter
//! layout, and the joint log posterior density.
//!
//! The linear predictor for mover `i` is
//!
//! ```text
//! η_i = β₀ + x(cell_i)ᵀβ + α_t + ω_{s,t} + γ_w
//! ```
//!
//! where each random-effect term is present only in the variants that carry
//! it. α is a first-order random walk over cohorts, ω is a per-cohort BYM2
//! field (proposed) or IID effect (hierarchical), and γ is an IID survey-wave
//! effect. α, γ and each connected ICAR component are constrained to sum to
//! zero.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::cell::{design_rows, CellKey, Coefficient, CovariateSet};
use crate::error::{Error, Result};
use crate::graph::{scale_icar, AdjacencyGraph, ScaledIcar};
use crate::ingest::{AreaId, Cohort, GeographyVersion, MoverRecord, SurveyWave};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Fixed effects only.
    Covariate,
    /// Fixed effects, temporal random walk and survey effect.
    Cohort,
    /// As `Cohort`, plus IID area effects per cohort.
    Hierarchical,
    /// As `Cohort`, plus a BYM2 spatial field per cohort.
    Proposed,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Covariate,
        Variant::Cohort,
        Variant::Hierarchical,
        Variant::Proposed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Covariate => "covariate",
            Variant::Cohort => "cohort",
            Variant::Hierarchical => "hierarchical",
            Variant::Proposed => "proposed",
        }
    }

    pub fn has_temporal(self) -> bool {
        self != Variant::Covariate
    }

    pub fn has_survey(self) -> bool {
        self != Variant::Covariate
    }

    pub fn has_spatial(self) -> bool {
        matches!(self, Variant::Hierarchical | Variant::Proposed)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown model variant '{s}'")))
    }
}

/// Prior on the BYM2 mixing weight φ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiPrior {
    Uniform,
    /// Penalised-complexity prior with P(φ < u) = alpha.
    Pc { u: f64, alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Standard deviation of the Normal(0, sd²) prior on β₀ and β.
    pub beta_sd: f64,
    /// Gamma(shape, rate) prior on every precision.
    pub precision_shape: f64,
    pub precision_rate: f64,
    pub phi: PhiPrior,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            beta_sd: 1.0 / 0.001f64.sqrt(),
            precision_shape: 1.0,
            precision_rate: 5e-5,
            phi: PhiPrior::Uniform,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta_sd > 0.0
            && self.precision_shape > 0.0
            && self.precision_rate > 0.0
            && self.beta_sd.is_finite()
            && self.precision_shape.is_finite()
            && self.precision_rate.is_finite();
        if !ok {
            return Err(Error::InvalidInput("prior hyperparameters must be positive and finite".into()));
        }
        if let PhiPrior::Pc { u, alpha } = self.phi {
            if !(u > 0.0 && u < 1.0 && alpha > 0.0 && alpha < 1.0) {
                return Err(Error::InvalidInput("pc prior on phi needs 0 < u < 1 and 0 < alpha < 1".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn log_gamma_precision(&self, log_prec: f64) -> (f64, f64) {
        // density of log-precision including the Jacobian
        let (a, b) = (self.precision_shape, self.precision_rate);
        let prec = log_prec.exp();
        (a * b.ln() - ln_gamma(a) + a * log_prec - b * prec, a - b * prec)
    }
}

/// Areas modeled for one cohort, in graph node order for the proposed variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortDomain {
    pub cohort: Cohort,
    pub areas: Vec<AreaId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelSpecDef {
    variant: Variant,
    covariates: CovariateSet,
    cohorts: Vec<CohortDomain>,
    waves: Vec<SurveyWave>,
    priors: PriorConfig,
    #[serde(default)]
    graphs: BTreeMap<GeographyVersion, AdjacencyGraph>,
}

/// A validated model: variant, index domains and priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelSpecDef", into = "ModelSpecDef")]
pub struct ModelSpec {
    def: ModelSpecDef,
    icar: BTreeMap<GeographyVersion, ScaledIcar>,
    pc_phi: Vec<Option<PcPhi>>,
}

impl TryFrom<ModelSpecDef> for ModelSpec {
    type Error = Error;
    fn try_from(def: ModelSpecDef) -> Result<Self> {
        ModelSpec::new(def.variant, def.covariates, def.cohorts, def.waves, def.priors, def.graphs)
    }
}

impl From<ModelSpec> for ModelSpecDef {
    fn from(s: ModelSpec) -> Self {
        s.def
    }
}

impl ModelSpec {
    pub fn new(
        variant: Variant,
        covariates: CovariateSet,
        cohorts: Vec<CohortDomain>,
        mut waves: Vec<SurveyWave>,
        priors: PriorConfig,
        graphs: BTreeMap<GeographyVersion, AdjacencyGraph>,
    ) -> Result<Self> {
        priors.validate()?;
        if cohorts.is_empty() {
            return Err(Error::Model("no cohorts".into()));
        }
        for (k, w) in cohorts.windows(2).enumerate() {
            if w[1].cohort.0 != w[0].cohort.0 + 1 {
                return Err(Error::Model(format!(
                    "cohorts must be consecutive; found {} after {} at position {k}",
                    w[1].cohort, w[0].cohort
                )));
            }
        }
        for d in &cohorts {
            if d.areas.is_empty() {
                return Err(Error::Model(format!("cohort {} has no areas", d.cohort.label())));
            }
            let mut sorted = d.areas.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != d.areas.len() {
                return Err(Error::Model(format!("cohort {} lists an area twice", d.cohort.label())));
            }
        }
        waves.sort();
        waves.dedup();
        if variant.has_survey() && waves.is_empty() {
            return Err(Error::Model("no survey waves".into()));
        }
        let graphs = if variant == Variant::Proposed {
            for d in &cohorts {
                let geo = d.cohort.geography();
                let g = graphs.get(&geo).ok_or_else(|| {
                    Error::Model(format!("proposed model needs a {geo} graph for cohort {}", d.cohort.label()))
                })?;
                if g.nodes() != d.areas.as_slice() {
                    return Err(Error::Model(format!(
                        "cohort {} areas do not match the {geo} graph nodes",
                        d.cohort.label()
                    )));
                }
            }
            graphs
        } else {
            if variant == Variant::Covariate && !graphs.is_empty() {
                return Err(Error::Model("the covariate model takes no random-effect configuration".into()));
            }
            BTreeMap::new()
        };
        let icar: BTreeMap<GeographyVersion, ScaledIcar> =
            graphs.iter().map(|(g, gr)| (*g, scale_icar(gr))).collect();
        let pc_phi = cohorts
            .iter()
            .map(|d| match (variant, priors.phi) {
                (Variant::Proposed, PhiPrior::Pc { u, alpha }) => {
                    Some(PcPhi::new(&icar[&d.cohort.geography()], u, alpha))
                }
                _ => None,
            })
            .collect();
        Ok(ModelSpec {
            def: ModelSpecDef {
                variant,
                covariates,
                cohorts,
                waves,
                priors,
                graphs,
            },
            icar,
            pc_phi,
        })
    }

    /// Convenience constructor: cohorts `first..first+count`, with the area
    /// list of each cohort taken from the graph of its geography.
    pub fn from_graphs(
        variant: Variant,
        covariates: CovariateSet,
        first: Cohort,
        count: usize,
        waves: Vec<SurveyWave>,
        priors: PriorConfig,
        graphs: &BTreeMap<GeographyVersion, AdjacencyGraph>,
    ) -> Result<Self> {
        let mut cohorts = Vec::with_capacity(count);
        for k in 0..count {
            let cohort = Cohort(first.0 + k as u8);
            let g = graphs.get(&cohort.geography()).ok_or_else(|| {
                Error::Model(format!("no {} areas for cohort {}", cohort.geography(), cohort.label()))
            })?;
            cohorts.push(CohortDomain {
                cohort,
                areas: g.nodes().to_vec(),
            });
        }
        let graphs = if variant == Variant::Proposed {
            graphs.clone()
        } else {
            BTreeMap::new()
        };
        ModelSpec::new(variant, covariates, cohorts, waves, priors, graphs)
    }

    /// The same domains and priors under another variant.
    pub fn with_variant(&self, variant: Variant, graphs: &BTreeMap<GeographyVersion, AdjacencyGraph>) -> Result<Self> {
        let graphs = if variant == Variant::Proposed {
            if self.def.graphs.is_empty() {
                graphs.clone()
            } else {
                self.def.graphs.clone()
            }
        } else {
            BTreeMap::new()
        };
        ModelSpec::new(
            variant,
            self.def.covariates,
            self.def.cohorts.clone(),
            self.def.waves.clone(),
            self.def.priors,
            graphs,
        )
    }

    pub fn variant(&self) -> Variant {
        self.def.variant
    }

    pub fn covariates(&self) -> CovariateSet {
        self.def.covariates
    }

    pub fn coefficients(&self) -> Vec<Coefficient> {
        self.def.covariates.coefficients()
    }

    pub fn cohorts(&self) -> &[CohortDomain] {
        &self.def.cohorts
    }

    pub fn waves(&self) -> &[SurveyWave] {
        &self.def.waves
    }

    pub fn priors(&self) -> &PriorConfig {
        &self.def.priors
    }

    pub fn graphs(&self) -> &BTreeMap<GeographyVersion, AdjacencyGraph> {
        &self.def.graphs
    }

    pub fn num_cohorts(&self) -> usize {
        self.def.cohorts.len()
    }

    /// Temporal effect present with at least two cohorts.
    pub fn has_temporal(&self) -> bool {
        self.def.variant.has_temporal() && self.num_cohorts() >= 2
    }

    /// Survey effect present with at least two waves.
    pub fn has_survey(&self) -> bool {
        self.def.variant.has_survey() && self.def.waves.len() >= 2
    }

    pub fn has_spatial(&self) -> bool {
        self.def.variant.has_spatial()
    }

    pub fn cohort_position(&self, cohort: Cohort) -> Option<usize> {
        let first = self.def.cohorts[0].cohort.0;
        let k = cohort.0.checked_sub(first)? as usize;
        (k < self.def.cohorts.len()).then_some(k)
    }

    pub fn area_position(&self, cohort_pos: usize, area: &AreaId) -> Option<usize> {
        self.def.cohorts[cohort_pos].areas.iter().position(|a| a == area)
    }

    pub fn wave_position(&self, wave: SurveyWave) -> Option<usize> {
        self.def.waves.iter().position(|&w| w == wave)
    }

    /// Scaled ICAR structure of cohort `t` (proposed variant only).
    pub fn icar(&self, cohort_pos: usize) -> Option<&ScaledIcar> {
        self.icar.get(&self.def.cohorts[cohort_pos].cohort.geography())
    }

    pub(crate) fn pc_phi(&self, cohort_pos: usize) -> Option<&PcPhi> {
        self.pc_phi.get(cohort_pos).and_then(|p| p.as_ref())
    }

    /// Log prior density of one hyperparameter block on its unconstrained
    /// coordinates (Jacobians included).
    pub fn log_hyperprior(&self, kind: HyperKind, coords: &[f64]) -> f64 {
        let priors = &self.def.priors;
        match kind {
            HyperKind::Temporal | HyperKind::Survey | HyperKind::Iid(_) => priors.log_gamma_precision(coords[0]).0,
            HyperKind::Bym2(t) => {
                let q = coords[1];
                let mut lp = priors.log_gamma_precision(coords[0]).0 - softplus(-q) - softplus(q);
                if let Some(pc) = self.pc_phi(t) {
                    lp += pc.log_density(logistic(q)).0;
                }
                lp
            }
        }
    }

    pub fn layout(&self) -> ParameterLayout {
        ParameterLayout::new(self)
    }

    /// Resolves records to model positions.
    pub fn index_data(&self, records: &[MoverRecord]) -> Result<IndexedData> {
        let mut data = IndexedData::default();
        for r in records {
            let t = self.cohort_position(r.cohort).ok_or_else(|| {
                Error::InvalidInput(format!("household {}: cohort {} not in model", r.household_id, r.cohort))
            })?;
            let s = self.area_position(t, &r.area).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "household {}: area {} not part of cohort {} geography",
                    r.household_id,
                    r.area,
                    r.cohort.label()
                ))
            })?;
            let w = match self.wave_position(r.survey_wave) {
                Some(w) => w,
                None if !self.def.variant.has_survey() => 0,
                None => {
                    return Err(Error::InvalidInput(format!(
                        "household {}: wave {} not in model",
                        r.household_id, r.survey_wave
                    )))
                }
            };
            data.y.push(r.displaced);
            data.cell.push(r.cell.index() as u16);
            data.cohort.push(t as u16);
            data.area.push(s as u16);
            data.wave.push(w as u16);
        }
        Ok(data)
    }
}

/// Records resolved to dense model positions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IndexedData {
    pub y: Vec<bool>,
    pub cell: Vec<u16>,
    pub cohort: Vec<u16>,
    pub area: Vec<u16>,
    pub wave: Vec<u16>,
}

impl IndexedData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Hyperparameters on their natural scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SpatialHyper {
    Bym2 { precision: f64, phi: f64 },
    Iid { precision: f64 },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Hyper {
    pub alpha_precision: Option<f64>,
    pub spatial: Vec<SpatialHyper>,
    pub gamma_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub beta0: f64,
    pub beta: Vec<f64>,
    /// Temporal effect per cohort (empty when absent).
    pub alpha: Vec<f64>,
    /// Spatial effect ω per cohort, over that cohort's areas.
    pub omega: Vec<Vec<f64>>,
    /// Scaled-ICAR component u* per cohort (proposed only; zero at islands).
    pub structured: Vec<Vec<f64>>,
    /// Survey-wave effect (empty when absent).
    pub gamma: Vec<f64>,
    pub hyper: Hyper,
}

impl Parameters {
    /// All effects zero, unit precisions, φ = 1/2.
    pub fn zeros(spec: &ModelSpec) -> Self {
        let layout = spec.layout();
        layout.unpack(&vec![0.0; layout.len()])
    }

    /// Unstructured part v of the BYM2 field of cohort `t`, recovered from
    /// ω = (√(1−φ)·v + √φ·u*)/√τ. Empty for non-BYM2 cohorts.
    pub fn unstructured(&self, t: usize) -> Vec<f64> {
        match self.hyper.spatial.get(t) {
            Some(&SpatialHyper::Bym2 { precision, phi }) => self.omega[t]
                .iter()
                .zip(&self.structured[t])
                .map(|(&w, &u)| (precision.sqrt() * w - phi.sqrt() * u) / (1.0 - phi).sqrt())
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        let finite = std::iter::once(self.beta0)
            .chain(self.beta.iter().copied())
            .chain(self.alpha.iter().copied())
            .chain(self.omega.iter().flatten().copied())
            .chain(self.structured.iter().flatten().copied())
            .chain(self.gamma.iter().copied())
            .all(f64::is_finite);
        if !finite {
            return Err(Error::NonFinite("parameters".into()));
        }
        let pos = |v: f64| v > 0.0 && v.is_finite();
        let hyper_ok = self.hyper.alpha_precision.is_none_or(pos)
            && self.hyper.gamma_precision.is_none_or(pos)
            && self.hyper.spatial.iter().all(|h| match *h {
                SpatialHyper::Bym2 { precision, phi } => pos(precision) && (0.0..=1.0).contains(&phi),
                SpatialHyper::Iid { precision } => pos(precision),
            });
        if !hyper_ok {
            return Err(Error::NonFinite("hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperKind {
    /// log precision of the random walk.
    Temporal,
    /// (log τ_t, logit φ_t) of cohort t.
    Bym2(usize),
    /// log precision of the IID area effect of cohort t.
    Iid(usize),
    /// log precision of the survey effect.
    Survey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HyperBlock {
    pub kind: HyperKind,
    pub start: usize,
    pub len: usize,
}

impl HyperBlock {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Positions of every parameter in the flat unconstrained coordinate vector:
/// `[β₀, β, α, ω_0..ω_T, u*_0..u*_T, γ, hyperparameters]`, with precisions
/// on the log scale and φ on the logit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterLayout {
    pub num_beta: usize,
    pub alpha: Option<usize>,
    pub omega: Vec<usize>,
    pub structured: Vec<usize>,
    pub gamma: Option<usize>,
    hyper: Vec<HyperBlock>,
    sizes: Vec<usize>,
    num_cohorts: usize,
    num_waves: usize,
    len: usize,
    names: Vec<String>,
}

impl ParameterLayout {
    fn new(spec: &ModelSpec) -> Self {
        let mut names = vec!["beta0".to_string()];
        for c in spec.coefficients() {
            names.push(format!("beta[{}]", c.label()));
        }
        let num_beta = names.len() - 1;
        let t_count = spec.num_cohorts();
        let labels: Vec<String> = spec.cohorts().iter().map(|d| d.cohort.label()).collect();
        let alpha = spec.has_temporal().then(|| {
            let start = names.len();
            names.extend(labels.iter().map(|l| format!("alpha[{l}]")));
            start
        });
        let mut omega = Vec::new();
        let mut structured = Vec::new();
        if spec.has_spatial() {
            for d in spec.cohorts() {
                omega.push(names.len());
                let l = d.cohort.label();
                names.extend(d.areas.iter().map(|a| format!("omega[{l},{a}]")));
            }
            if spec.variant() == Variant::Proposed {
                for d in spec.cohorts() {
                    structured.push(names.len());
                    let l = d.cohort.label();
                    names.extend(d.areas.iter().map(|a| format!("u[{l},{a}]")));
                }
            }
        }
        let gamma = spec.has_survey().then(|| {
            let start = names.len();
            names.extend(spec.waves().iter().map(|w| format!("gamma[{w}]")));
            start
        });
        let mut hyper = Vec::new();
        if alpha.is_some() {
            hyper.push(HyperBlock { kind: HyperKind::Temporal, start: names.len(), len: 1 });
            names.push("log_precision_alpha".into());
        }
        if spec.has_spatial() {
            for (t, l) in labels.iter().enumerate() {
                if spec.variant() == Variant::Proposed {
                    hyper.push(HyperBlock { kind: HyperKind::Bym2(t), start: names.len(), len: 2 });
                    names.push(format!("log_tau[{l}]"));
                    names.push(format!("logit_phi[{l}]"));
                } else {
                    hyper.push(HyperBlock { kind: HyperKind::Iid(t), start: names.len(), len: 1 });
                    names.push(format!("log_precision_omega[{l}]"));
                }
            }
        }
        if gamma.is_some() {
            hyper.push(HyperBlock { kind: HyperKind::Survey, start: names.len(), len: 1 });
            names.push("log_precision_gamma".into());
        }
        ParameterLayout {
            num_beta,
            alpha,
            omega,
            structured,
            gamma,
            hyper,
            sizes: spec.cohorts().iter().map(|d| d.areas.len()).collect(),
            num_cohorts: t_count,
            num_waves: spec.waves().len(),
            len: names.len(),
            names,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn hyper_blocks(&self) -> &[HyperBlock] {
        &self.hyper
    }

    pub fn area_count(&self, t: usize) -> usize {
        self.sizes[t]
    }

    /// Index of the first hyperparameter (end of the latent coordinates).
    pub fn latent_len(&self) -> usize {
        self.hyper.first().map_or(self.len, |h| h.start)
    }

    pub fn unpack(&self, x: &[f64]) -> Parameters {
        debug_assert_eq!(x.len(), self.len);
        let alpha = self.alpha.map_or_else(Vec::new, |a| x[a..a + self.num_cohorts].to_vec());
        let omega = self
            .omega
            .iter()
            .zip(&self.sizes)
            .map(|(&o, &n)| x[o..o + n].to_vec())
            .collect();
        let structured = self
            .structured
            .iter()
            .zip(&self.sizes)
            .map(|(&o, &n)| x[o..o + n].to_vec())
            .collect();
        let gamma = self.gamma.map_or_else(Vec::new, |g| x[g..g + self.num_waves].to_vec());
        let mut hyper = Hyper::default();
        for h in &self.hyper {
            match h.kind {
                HyperKind::Temporal => hyper.alpha_precision = Some(x[h.start].exp()),
                HyperKind::Survey => hyper.gamma_precision = Some(x[h.start].exp()),
                HyperKind::Bym2(_) => hyper.spatial.push(SpatialHyper::Bym2 {
                    precision: x[h.start].exp(),
                    phi: logistic(x[h.start + 1]),
                }),
                HyperKind::Iid(_) => hyper.spatial.push(SpatialHyper::Iid {
                    precision: x[h.start].exp(),
                }),
            }
        }
        Parameters {
            beta0: x[0],
            beta: x[1..1 + self.num_beta].to_vec(),
            alpha,
            omega,
            structured,
            gamma,
            hyper,
        }
    }

    pub fn pack(&self, p: &Parameters) -> Result<Vec<f64>> {
        let mut x = vec![0.0; self.len];
        let shape_err = |what: &str| Error::Model(format!("parameter shape mismatch: {what}"));
        if p.beta.len() != self.num_beta {
            return Err(shape_err("beta"));
        }
        x[0] = p.beta0;
        x[1..1 + self.num_beta].copy_from_slice(&p.beta);
        if let Some(a) = self.alpha {
            if p.alpha.len() != self.num_cohorts {
                return Err(shape_err("alpha"));
            }
            x[a..a + self.num_cohorts].copy_from_slice(&p.alpha);
        }
        for (field, (starts, name)) in [(&p.omega, (&self.omega, "omega")), (&p.structured, (&self.structured, "u"))] {
            if field.len() != starts.len() {
                return Err(shape_err(name));
            }
            for ((&o, &n), v) in starts.iter().zip(&self.sizes).zip(field) {
                if v.len() != n {
                    return Err(shape_err(name));
                }
                x[o..o + n].copy_from_slice(v);
            }
        }
        if let Some(g) = self.gamma {
            if p.gamma.len() != self.num_waves {
                return Err(shape_err("gamma"));
            }
            x[g..g + self.num_waves].copy_from_slice(&p.gamma);
        }
        let mut spatial = p.hyper.spatial.iter();
        for h in &self.hyper {
            match h.kind {
                HyperKind::Temporal => {
                    x[h.start] = p.hyper.alpha_precision.ok_or_else(|| shape_err("alpha precision"))?.ln()
                }
                HyperKind::Survey => {
                    x[h.start] = p.hyper.gamma_precision.ok_or_else(|| shape_err("gamma precision"))?.ln()
                }
                HyperKind::Bym2(_) => match spatial.next() {
                    Some(&SpatialHyper::Bym2 { precision, phi }) => {
                        x[h.start] = precision.ln();
                        x[h.start + 1] = logit(phi);
                    }
                    _ => return Err(shape_err("spatial hyperparameters")),
                },
                HyperKind::Iid(_) => match spatial.next() {
                    Some(&SpatialHyper::Iid { precision }) => x[h.start] = precision.ln(),
                    _ => return Err(shape_err("spatial hyperparameters")),
                },
            }
        }
        Ok(x)
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Linear predictor on the logit scale. The survey effect is included only
/// when `wave` is given.
pub fn linear_predictor(
    spec: &ModelSpec,
    params: &Parameters,
    cell: CellKey,
    area: &AreaId,
    cohort: Cohort,
    wave: Option<SurveyWave>,
) -> Result<f64> {
    let t = spec
        .cohort_position(cohort)
        .ok_or_else(|| Error::InvalidInput(format!("cohort {cohort} not in model")))?;
    let s = spec.area_position(t, area).ok_or_else(|| {
        Error::InvalidInput(format!(
            "area {area} is not part of the {} geography of cohort {}",
            cohort.geography(),
            cohort.label()
        ))
    })?;
    let rows = design_rows(spec.covariates());
    let mut eta = params.beta0 + rows[cell.index()].iter().map(|&k| params.beta[k]).sum::<f64>();
    if spec.has_temporal() {
        eta += params.alpha[t];
    }
    if spec.has_spatial() {
        eta += params.omega[t][s];
    }
    if let Some(w) = wave {
        if spec.has_survey() {
            let w = spec
                .wave_position(w)
                .ok_or_else(|| Error::InvalidInput(format!("wave {w} not in model")))?;
            eta += params.gamma[w];
        }
    }
    Ok(eta)
}

/// Precomputed structure for evaluating the log posterior repeatedly.
pub struct PosteriorDensity<'a> {
    spec: &'a ModelSpec,
    layout: ParameterLayout,
    data: &'a IndexedData,
    rows: Vec<Vec<usize>>,
    icar: Vec<Option<(nalgebra::DMatrix<f64>, f64, usize)>>,
}

impl<'a> PosteriorDensity<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a IndexedData) -> Self {
        let icar = (0..spec.num_cohorts())
            .map(|t| {
                (spec.variant() == Variant::Proposed).then(|| {
                    let s = spec.icar(t).expect("proposed model has graphs");
                    (s.precision(), s.log_pseudo_determinant(), s.eigenvalues.len())
                })
            })
            .collect();
        PosteriorDensity {
            spec,
            layout: spec.layout(),
            data,
            rows: design_rows(spec.covariates()),
            icar,
        }
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    fn eta(&self, x: &[f64], i: usize) -> f64 {
        let d = self.data;
        let l = &self.layout;
        let mut eta = x[0];
        for &k in &self.rows[d.cell[i] as usize] {
            eta += x[1 + k];
        }
        let t = d.cohort[i] as usize;
        if let Some(a) = l.alpha {
            eta += x[a + t];
        }
        if let Some(&o) = l.omega.get(t) {
            eta += x[o + d.area[i] as usize];
        }
        if let Some(g) = l.gamma {
            eta += x[g + d.wave[i] as usize];
        }
        eta
    }

    /// Log posterior (including normalising constants of every prior) at the
    /// unconstrained coordinates `x`; accumulates the gradient into `grad`
    /// when given.
    pub fn evaluate(&self, x: &[f64], mut grad: Option<&mut [f64]>) -> Result<f64> {
        let l = &self.layout;
        if x.len() != l.len() {
            return Err(Error::Model(format!("expected {} coordinates, got {}", l.len(), x.len())));
        }
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(l.names()[k].clone()));
        }
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let priors = self.spec.priors();
        let d = self.data;
        let mut lp = 0.0;

        // likelihood
        for i in 0..d.len() {
            let eta = self.eta(x, i);
            let y = if d.y[i] { 1.0 } else { 0.0 };
            lp += y * eta - softplus(eta);
            if let Some(g) = grad.as_deref_mut() {
                let r = y - logistic(eta);
                g[0] += r;
                for &k in &self.rows[d.cell[i] as usize] {
                    g[1 + k] += r;
                }
                let t = d.cohort[i] as usize;
                if let Some(a) = l.alpha {
                    g[a + t] += r;
                }
                if let Some(&o) = l.omega.get(t) {
                    g[o + d.area[i] as usize] += r;
                }
                if let Some(gm) = l.gamma {
                    g[gm + d.wave[i] as usize] += r;
                }
            }
        }

        // fixed effects
        let var = priors.beta_sd * priors.beta_sd;
        for k in 0..=l.num_beta {
            lp += -0.5 * (LN_2PI + var.ln()) - 0.5 * x[k] * x[k] / var;
            if let Some(g) = grad.as_deref_mut() {
                g[k] -= x[k] / var;
            }
        }

        for h in l.hyper_blocks() {
            match h.kind {
                HyperKind::Temporal => {
                    let a = l.alpha.unwrap();
                    let t_count = l.num_cohorts;
                    let lk = x[h.start];
                    let prec = lk.exp();
                    let mut ss = 0.0;
                    for t in 1..t_count {
                        let diff = x[a + t] - x[a + t - 1];
                        ss += diff * diff;
                        if let Some(g) = grad.as_deref_mut() {
                            g[a + t] -= prec * diff;
                            g[a + t - 1] += prec * diff;
                        }
                    }
                    let rank = (t_count - 1) as f64;
                    // pseudo-determinant of the path-graph Laplacian is T
                    lp += 0.5 * rank * (lk - LN_2PI) + 0.5 * (t_count as f64).ln() - 0.5 * prec * ss;
                    let (lpr, dpr) = priors.log_gamma_precision(lk);
                    lp += lpr;
                    if let Some(g) = grad.as_deref_mut() {
                        g[h.start] += 0.5 * rank - 0.5 * prec * ss + dpr;
                    }
                }
                HyperKind::Survey => {
                    let gm = l.gamma.unwrap();
                    let w_count = l.num_waves;
                    let lk = x[h.start];
                    let prec = lk.exp();
                    let ss: f64 = x[gm..gm + w_count].iter().map(|v| v * v).sum();
                    let rank = (w_count - 1) as f64;
                    lp += 0.5 * rank * (lk - LN_2PI) - 0.5 * prec * ss;
                    let (lpr, dpr) = priors.log_gamma_precision(lk);
                    lp += lpr;
                    if let Some(g) = grad.as_deref_mut() {
                        for w in 0..w_count {
                            g[gm + w] -= prec * x[gm + w];
                        }
                        g[h.start] += 0.5 * rank - 0.5 * prec * ss + dpr;
                    }
                }
                HyperKind::Iid(t) => {
                    let o = l.omega[t];
                    let n = l.sizes[t];
                    let lk = x[h.start];
                    let prec = lk.exp();
                    let ss: f64 = x[o..o + n].iter().map(|v| v * v).sum();
                    lp += 0.5 * n as f64 * (lk - LN_2PI) - 0.5 * prec * ss;
                    let (lpr, dpr) = priors.log_gamma_precision(lk);
                    lp += lpr;
                    if let Some(g) = grad.as_deref_mut() {
                        for s in 0..n {
                            g[o + s] -= prec * x[o + s];
                        }
                        g[h.start] += 0.5 * n as f64 - 0.5 * prec * ss + dpr;
                    }
                }
                HyperKind::Bym2(t) => {
                    lp += self.bym2_term(t, h, x, grad.as_deref_mut());
                }
            }
        }
        if !lp.is_finite() {
            return Err(Error::NonFinite("log posterior".into()));
        }
        Ok(lp)
    }

    fn bym2_term(&self, t: usize, h: &HyperBlock, x: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let l = &self.layout;
        let priors = self.spec.priors();
        let (o, us, n) = (l.omega[t], l.structured[t], l.sizes[t]);
        let (q, log_pdet, rank) = self.icar[t].as_ref().unwrap();
        let icar = self.spec.icar(t).unwrap();
        let (lt, lq) = (x[h.start], x[h.start + 1]);
        let tau = lt.exp();
        let phi = logistic(lq);
        let log_a = lt + softplus(lq); // log τ − log(1−φ)
        let a = log_a.exp();
        let c = (0.5 * (phi.ln() - lt)).exp();

        let mut lp = 0.0;
        let (mut d_lt, mut d_lq) = (0.0, 0.0);
        for i in 0..n {
            let w = x[o + i];
            if icar.is_iid_only(i) {
                lp += 0.5 * (lt - LN_2PI) - 0.5 * tau * w * w;
                d_lt += 0.5 - 0.5 * tau * w * w;
                if let Some(g) = grad.as_deref_mut() {
                    g[o + i] -= tau * w;
                }
                continue;
            }
            let u = x[us + i];
            let dv = w - c * u;
            lp += 0.5 * (log_a - LN_2PI) - 0.5 * a * dv * dv;
            d_lt += 0.5 - 0.5 * a * dv * dv - 0.5 * a * c * dv * u;
            d_lq += 0.5 * phi - 0.5 * a * dv * dv * phi + 0.5 * a * c * dv * u * (1.0 - phi);
            if let Some(g) = grad.as_deref_mut() {
                g[o + i] -= a * dv;
                g[us + i] += a * c * dv;
            }
        }
        // scaled ICAR on u*
        let mut quad = 0.0;
        for i in 0..n {
            let mut qi = 0.0;
            for j in 0..n {
                qi += q[(i, j)] * x[us + j];
            }
            quad += x[us + i] * qi;
            if let Some(g) = grad.as_deref_mut() {
                g[us + i] -= qi;
            }
        }
        lp += -0.5 * *rank as f64 * LN_2PI + 0.5 * log_pdet - 0.5 * quad;

        let (lpr, dpr) = priors.log_gamma_precision(lt);
        lp += lpr;
        d_lt += dpr;
        // logit Jacobian: log φ + log(1 − φ)
        lp -= softplus(-lq) + softplus(lq);
        d_lq += 1.0 - 2.0 * phi;
        if let Some(pc) = self.spec.pc_phi(t) {
            let (v, dphi) = pc.log_density(phi);
            lp += v;
            d_lq += dphi * phi * (1.0 - phi);
        }
        if let Some(g) = grad {
            g[h.start] += d_lt;
            g[h.start + 1] += d_lq;
        }
        lp
    }
}

/// Log posterior of `params` given `data`.
pub fn log_posterior(spec: &ModelSpec, params: &Parameters, data: &[MoverRecord]) -> Result<f64> {
    params.check_invariants()?;
    let idx = spec.index_data(data)?;
    let density = PosteriorDensity::new(spec, &idx);
    let x = density.layout().pack(params)?;
    density.evaluate(&x, None)
}

/// Penalised-complexity prior for the BYM2 mixing weight, relative to the
/// unstructured base model φ = 0.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PcPhi {
    /// γ_i − 1 for the eigenvalues γ_i of the constrained ICAR covariance
    /// over structured nodes (γ = 0 on the constrained directions).
    shifted: Vec<f64>,
    rate: f64,
}

impl PcPhi {
    pub(crate) fn new(icar: &ScaledIcar, u: f64, alpha: f64) -> Self {
        let mut shifted: Vec<f64> = icar.eigenvalues.iter().map(|l| 1.0 / l - 1.0).collect();
        let structured = icar.components.iter().filter(|c| c.scale.is_some()).count();
        shifted.extend(std::iter::repeat_n(-1.0, structured));
        let mut pc = PcPhi { shifted, rate: 1.0 };
        pc.rate = -(1.0 - alpha).ln() / pc.distance(u);
        pc
    }

    fn kld(&self, phi: f64) -> f64 {
        0.5 * self
            .shifted
            .iter()
            .map(|&g| phi * g - (phi * g).ln_1p())
            .sum::<f64>()
    }

    fn distance(&self, phi: f64) -> f64 {
        (2.0 * self.kld(phi)).sqrt()
    }

    /// (log density in φ, derivative of log density in φ).
    pub(crate) fn log_density(&self, phi: f64) -> (f64, f64) {
        let k = self.kld(phi);
        let d = (2.0 * k).sqrt();
        let (mut k1, mut k2) = (0.0, 0.0);
        for &g in &self.shifted {
            let den = 1.0 + phi * g;
            k1 += phi * g * g / den;
            k2 += g * g / (den * den);
        }
        k1 *= 0.5;
        k2 *= 0.5;
        // density θ e^{−θ d} d'(φ) with d' = KLD'/d
        let dd = k1 / d;
        let value = self.rate.ln() - self.rate * d + k1.ln() - d.ln();
        let deriv = -self.rate * dd + k2 / k1 - dd / d;
        (value, deriv)
    }
}
