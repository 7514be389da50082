//! Synthetic data generation and leave-one-area-out cross-validation of the
//! model variants.

use std::collections::BTreeMap;

use log::info;
use nalgebra::SymmetricEigen;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cell::{CellKey, Children, CovariateSet, HouseholdSize, Income, Level, Race, Tenure, Vehicles, NUM_CELLS};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::graph::AdjacencyGraph;
use crate::inference::{area_offsets, cell_logits, sample_posterior, PosteriorDraws, SamplerConfig};
use crate::ingest::{AreaId, Cohort, GeographyVersion, MoverRecord, PostStratTable, SurveyWave};
use crate::model::{linear_predictor, logistic, ModelSpec, Parameters, PriorConfig, SpatialHyper, Variant};
use crate::poststrat::Interval;
use crate::rng;
use crate::stats;

/// Nominal levels of the validation intervals.
pub const LEVELS: [f64; 3] = [0.80, 0.90, 0.95];

/// Settings for [`SyntheticScenario::generate`]: a rectangular grid of areas
/// per geography and true parameters drawn from the stated scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub variant: Variant,
    pub cohorts: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub waves: Vec<u16>,
    /// Total number of movers, split evenly over (area, cohort).
    pub movers: usize,
    /// Population count of every (area, cohort).
    pub population: f64,
    pub intercept: f64,
    pub beta_sd: f64,
    /// Standard deviation of the random-walk increments.
    pub temporal_sd: f64,
    /// Marginal standard deviation of the area effects.
    pub spatial_sd: f64,
    pub phi: f64,
    pub survey_sd: f64,
    /// Dirichlet concentration of each covariate's level shares per area.
    pub concentration: f64,
    /// Priors of the fitted model.
    pub priors: PriorConfig,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            variant: Variant::Proposed,
            cohorts: 4,
            grid_rows: 2,
            grid_cols: 3,
            waves: vec![2019, 2023],
            movers: 4000,
            population: 5000.0,
            intercept: -1.2,
            beta_sd: 0.4,
            temporal_sd: 0.25,
            spatial_sd: 0.6,
            phi: 0.9,
            survey_sd: 0.15,
            concentration: 4.0,
            priors: PriorConfig::default(),
            seed: 0,
        }
    }
}

/// A data-generating setup: model, true parameters, cell composition and
/// sample size of every (area, cohort).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScenario {
    pub spec: ModelSpec,
    pub true_params: Parameters,
    /// Cell probabilities (summing to 1) per (area, cohort).
    pub composition: BTreeMap<(AreaId, Cohort), Vec<f64>>,
    pub sample_sizes: BTreeMap<(AreaId, Cohort), usize>,
    pub population: f64,
    pub seed: u64,
}

/// Output of [`simulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub movers: Vec<MoverRecord>,
    pub poststrat: PostStratTable,
    /// Population displacement rate per (area, cohort), survey effect excluded.
    pub true_rates: BTreeMap<(AreaId, Cohort), f64>,
}

impl SyntheticData {
    /// Population-weighted true rate of every cohort.
    pub fn aggregate_rates(&self) -> BTreeMap<Cohort, f64> {
        let mut sums: BTreeMap<Cohort, (f64, f64)> = BTreeMap::new();
        for ((area, cohort), rate) in &self.true_rates {
            let n = self.poststrat.total(area, *cohort).unwrap_or(0.0);
            let e = sums.entry(*cohort).or_default();
            e.0 += n * rate;
            e.1 += n;
        }
        sums.into_iter().map(|(c, (num, den))| (c, num / den)).collect()
    }
}

/// Row-major grid graph; node `i` is labelled `<prefix><i+1 zero-padded>`.
pub fn grid_graph(geography: GeographyVersion, rows: usize, cols: usize) -> Result<AdjacencyGraph> {
    let prefix = match geography {
        GeographyVersion::V2010 => "10",
        GeographyVersion::V2020 => "20",
    };
    let nodes: Vec<AreaId> = (0..rows * cols).map(|i| AreaId(format!("{prefix}{:03}", i + 1))).collect();
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols {
                edges.push((nodes[i].clone(), nodes[i + 1].clone()));
            }
            if r + 1 < rows {
                edges.push((nodes[i].clone(), nodes[i + cols].clone()));
            }
        }
    }
    AdjacencyGraph::new(nodes, &edges, geography)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn centered(mut v: Vec<f64>) -> Vec<f64> {
    let m = stats::mean(&v);
    v.iter_mut().for_each(|x| *x -= m);
    v
}

fn dirichlet(rng: &mut ChaCha8Rng, k: usize, concentration: f64) -> Vec<f64> {
    let g = Gamma::new(concentration, 1.0).expect("positive concentration");
    let w: Vec<f64> = (0..k).map(|_| g.sample(rng)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Product of independent per-covariate level shares.
fn random_composition(rng: &mut ChaCha8Rng, concentration: f64) -> Vec<f64> {
    let hh = dirichlet(rng, HouseholdSize::LEVELS.len(), concentration);
    let inc = dirichlet(rng, Income::LEVELS.len(), concentration);
    let veh = dirichlet(rng, Vehicles::LEVELS.len(), concentration);
    let ch = dirichlet(rng, Children::LEVELS.len(), concentration);
    let ten = dirichlet(rng, Tenure::LEVELS.len(), concentration);
    let race = dirichlet(rng, Race::LEVELS.len(), concentration);
    CellKey::all()
        .map(|c| {
            hh[c.household_size.position()]
                * inc[c.income.position()]
                * veh[c.vehicles.position()]
                * ch[c.children.position()]
                * ten[c.tenure.position()]
                * race[c.race.position()]
        })
        .collect()
}

/// Zero-mean Gaussian field with covariance the pseudo-inverse of `q`.
fn intrinsic_field(rng: &mut ChaCha8Rng, q: nalgebra::DMatrix<f64>) -> Vec<f64> {
    let n = q.nrows();
    let eig = SymmetricEigen::new(q);
    let mut out = vec![0.0; n];
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > 1e-9 {
            let z = normal(rng) / lambda.sqrt();
            for (o, e) in out.iter_mut().zip(eig.eigenvectors.column(k).iter()) {
                *o += z * e;
            }
        }
    }
    out
}

impl SyntheticScenario {
    /// Builds grid graphs for both geographies, the model of
    /// `config.variant` and random true parameters.
    pub fn generate(config: &ScenarioConfig) -> Result<Self> {
        if config.cohorts == 0 || config.grid_rows * config.grid_cols == 0 {
            return Err(Error::InvalidInput("scenario needs at least one cohort and one area".into()));
        }
        if !(0.0..=1.0).contains(&config.phi) {
            return Err(Error::InvalidInput(format!("phi {} must lie in [0, 1]", config.phi)));
        }
        for (name, v) in [
            ("beta_sd", config.beta_sd),
            ("temporal_sd", config.temporal_sd),
            ("spatial_sd", config.spatial_sd),
            ("survey_sd", config.survey_sd),
            ("concentration", config.concentration),
            ("population", config.population),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("scenario {name} must be positive")));
            }
        }
        let mut graphs = BTreeMap::new();
        for geo in [GeographyVersion::V2010, GeographyVersion::V2020] {
            graphs.insert(geo, grid_graph(geo, config.grid_rows, config.grid_cols)?);
        }
        let waves = config.waves.iter().map(|&w| SurveyWave::new(w)).collect::<Result<Vec<_>>>()?;
        let spec = ModelSpec::from_graphs(
            config.variant,
            CovariateSet::all(),
            Cohort(0),
            config.cohorts,
            waves,
            config.priors,
            &graphs,
        )?;

        let mut rng = rng::stream(config.seed, rng::SIMULATION, 0);
        let mut p = Parameters::zeros(&spec);
        p.beta0 = config.intercept;
        p.beta.iter_mut().for_each(|b| *b = config.beta_sd * normal(&mut rng));
        if spec.has_temporal() {
            let mut level = 0.0;
            let walk = (0..spec.num_cohorts())
                .map(|_| {
                    level += config.temporal_sd * normal(&mut rng);
                    level
                })
                .collect();
            p.alpha = centered(walk);
            p.hyper.alpha_precision = Some(config.temporal_sd.powi(-2));
        }
        let precision = config.spatial_sd.powi(-2);
        if spec.has_spatial() {
            for t in 0..spec.num_cohorts() {
                let n = spec.cohorts()[t].areas.len();
                let v: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
                match spec.icar(t) {
                    Some(icar) => {
                        let u = intrinsic_field(&mut rng, icar.precision());
                        p.omega[t] = v
                            .iter()
                            .zip(&u)
                            .map(|(v, u)| ((1.0 - config.phi).sqrt() * v + config.phi.sqrt() * u) / precision.sqrt())
                            .collect();
                        p.structured[t] = u;
                        p.hyper.spatial[t] = SpatialHyper::Bym2 { precision, phi: config.phi };
                    }
                    None => {
                        p.omega[t] = v.iter().map(|v| v * config.spatial_sd).collect();
                        p.hyper.spatial[t] = SpatialHyper::Iid { precision };
                    }
                }
            }
        }
        if spec.has_survey() {
            p.gamma = centered((0..spec.waves().len()).map(|_| config.survey_sd * normal(&mut rng)).collect());
            p.hyper.gamma_precision = Some(config.survey_sd.powi(-2));
        }
        p.check_invariants()?;
        Self::with_parameters(spec, p, config.movers, config.population, config.concentration, config.seed)
    }

    /// A scenario for given model and parameters; compositions are drawn at
    /// random and `movers` is split evenly over all (area, cohort).
    pub fn with_parameters(
        spec: ModelSpec,
        true_params: Parameters,
        movers: usize,
        population: f64,
        concentration: f64,
        seed: u64,
    ) -> Result<Self> {
        let keys: Vec<(AreaId, Cohort)> = spec
            .cohorts()
            .iter()
            .flat_map(|d| d.areas.iter().map(move |a| (a.clone(), d.cohort)))
            .collect();
        let mut rng = rng::stream(seed, rng::SIMULATION, 1);
        let composition = keys
            .iter()
            .map(|k| (k.clone(), random_composition(&mut rng, concentration)))
            .collect();
        let (base, extra) = (movers / keys.len(), movers % keys.len());
        let sample_sizes = keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), base + usize::from(i < extra)))
            .collect();
        Ok(SyntheticScenario {
            spec,
            true_params,
            composition,
            sample_sizes,
            population,
            seed,
        })
    }
}

/// Draws movers Bernoulli at the model probabilities (survey effect
/// included), sets population counts from the composition and computes true
/// area rates with the survey effect excluded.
pub fn simulate(scenario: &SyntheticScenario) -> Result<SyntheticData> {
    let spec = &scenario.spec;
    let params = &scenario.true_params;
    let mut rng = rng::stream(scenario.seed, rng::SIMULATION, 2);
    let mut movers = Vec::new();
    let mut poststrat = PostStratTable::new();
    let mut true_rates = BTreeMap::new();
    for ((area, cohort), probs) in &scenario.composition {
        let waves: Vec<SurveyWave> = if spec.waves().is_empty() {
            vec![SurveyWave(cohort.end_year())]
        } else {
            spec.waves().iter().copied().filter(|w| w.cohorts().contains(cohort)).collect()
        };
        if waves.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no survey wave observes cohort {}",
                cohort.label()
            )));
        }
        let cells = WeightedIndex::new(probs).map_err(|e| Error::InvalidInput(format!("bad composition: {e}")))?;
        let n = scenario.sample_sizes.get(&(area.clone(), *cohort)).copied().unwrap_or(0);
        for _ in 0..n {
            let cell = CellKey::from_index(cells.sample(&mut rng)).expect("cell index in range");
            let wave = waves[rng.random_range(0..waves.len())];
            let eta = linear_predictor(spec, params, cell, area, *cohort, Some(wave))?;
            let displaced = rng.random::<f64>() < logistic(eta);
            movers.push(MoverRecord {
                household_id: format!("h{:06}", movers.len() + 1),
                survey_wave: wave,
                area: area.clone(),
                geography: cohort.geography(),
                cohort: *cohort,
                displaced,
                cell,
            });
        }
        let mut rate = 0.0;
        for (j, &share) in probs.iter().enumerate() {
            let cell = CellKey::from_index(j).expect("cell index in range");
            let count = scenario.population * share;
            poststrat.insert(area.clone(), *cohort, cell, count)?;
            rate += count * logistic(linear_predictor(spec, params, cell, area, *cohort, None)?);
        }
        true_rates.insert((area.clone(), *cohort), rate / scenario.population);
    }
    Ok(SyntheticData {
        movers,
        poststrat: poststrat.finish()?,
        true_rates,
    })
}

/// Settings of the LOAO refits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoaoConfig {
    /// Sampler budget of every refit; its seed is the master seed of the run.
    pub sampler: SamplerConfig,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for LoaoConfig {
    fn default() -> Self {
        LoaoConfig {
            sampler: SamplerConfig {
                chains: 2,
                warmup: 300,
                draws: 500,
                ..SamplerConfig::default()
            },
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Posterior median of the expected held-out rate.
    pub median: f64,
    /// Posterior predictive intervals of the held-out observed rate at
    /// [`LEVELS`].
    pub intervals: Vec<Interval>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoaoRow {
    pub variant: Variant,
    pub area: AreaId,
    pub cohort: Cohort,
    pub n_heldout: usize,
    pub observed_rate: f64,
    /// The refit error message when the fold failed.
    pub prediction: std::result::Result<Prediction, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoaoResult {
    pub rows: Vec<LoaoRow>,
    pub sampler: SamplerConfig,
}

/// Posterior predictive summary of the displacement rate among `heldout`.
fn predict_heldout(posterior: &PosteriorDraws, heldout: &[&MoverRecord], seed: u64) -> Result<Prediction> {
    let spec = posterior.spec();
    let (area, cohort) = (&heldout[0].area, heldout[0].cohort);
    let r = posterior.num_draws();
    let logits = cell_logits(posterior);
    let offsets = area_offsets(posterior, area, cohort)?;
    let gamma: Vec<Option<&[f64]>> = heldout
        .iter()
        .map(|m| {
            let start = posterior.layout().gamma?;
            let w = spec.wave_position(m.survey_wave)?;
            Some(posterior.column(start + w))
        })
        .collect();
    let mut rng = rng::stream(seed, rng::REPLICATES, 0);
    let n = heldout.len() as f64;
    let mut expected = Vec::with_capacity(r);
    let mut replicated = Vec::with_capacity(r);
    for d in 0..r {
        let (mut mean, mut hits) = (0.0, 0usize);
        for (m, g) in heldout.iter().zip(&gamma) {
            let eta = logits[d * NUM_CELLS + m.cell.index()] + offsets[d] + g.map_or(0.0, |g| g[d]);
            let p = logistic(eta);
            mean += p;
            if rng.random::<f64>() < p {
                hits += 1;
            }
        }
        expected.push(mean / n);
        replicated.push(hits as f64 / n);
    }
    let sorted = stats::sorted(&replicated);
    Ok(Prediction {
        median: stats::median(&expected),
        intervals: LEVELS
            .iter()
            .map(|&level| {
                let (lower, upper) = stats::interval_sorted(&sorted, level);
                Interval { level, lower, upper }
            })
            .collect(),
    })
}

/// Leave-one-area-out validation: for every (area, cohort) with held-out
/// movers and every variant, refit `template` (under that variant) without
/// them and predict their displacement rate over their own cell and wave
/// composition. `template` supplies the domains, priors and (for the
/// proposed variant) graphs.
pub fn loao(template: &ModelSpec, variants: &[Variant], movers: &[MoverRecord], config: &LoaoConfig) -> Result<LoaoResult> {
    config.sampler.validate()?;
    let specs = variants
        .iter()
        .map(|&v| template.with_variant(v, template.graphs()))
        .collect::<Result<Vec<_>>>()?;
    let mut folds: BTreeMap<(AreaId, Cohort), Vec<usize>> = BTreeMap::new();
    for (i, m) in movers.iter().enumerate() {
        folds.entry((m.area.clone(), m.cohort)).or_default().push(i);
    }
    let skipped = template
        .cohorts()
        .iter()
        .flat_map(|d| d.areas.iter().map(move |a| (a.clone(), d.cohort)))
        .filter(|k| !folds.contains_key(k))
        .count();
    if skipped > 0 {
        info!("{skipped} (area, cohort) folds have no movers and are skipped");
    }
    let folds: Vec<((AreaId, Cohort), Vec<usize>)> = folds.into_iter().collect();
    for ((area, cohort), idx) in &folds {
        if idx.len() == movers.len() {
            return Err(Error::InvalidInput(format!(
                "holding out area {area}, cohort {} leaves no training data",
                cohort.label()
            )));
        }
    }
    let jobs: Vec<(usize, usize)> = (0..folds.len())
        .flat_map(|f| (0..variants.len()).map(move |v| (f, v)))
        .collect();
    let inner = match config.execution {
        Execution::Parallel if jobs.len() > 1 => Execution::Sequential,
        e => e,
    };
    let rows = config.execution.map(&jobs, |&(f, v)| {
        let ((area, cohort), idx) = &folds[f];
        let heldout: Vec<&MoverRecord> = idx.iter().map(|&i| &movers[i]).collect();
        let mut mask = vec![false; movers.len()];
        idx.iter().for_each(|&i| mask[i] = true);
        let train: Vec<MoverRecord> = movers
            .iter()
            .zip(&mask)
            .filter(|(_, &held)| !held)
            .map(|(m, _)| m.clone())
            .collect();
        let fold_seed = rng::derive_seed(config.sampler.seed, rng::FOLDS, f as u64);
        let sampler = SamplerConfig {
            seed: fold_seed,
            execution: inner,
            ..config.sampler.clone()
        };
        let prediction = sample_posterior(&specs[v], &train, &sampler)
            .and_then(|post| predict_heldout(&post, &heldout, fold_seed))
            .map_err(|e| e.to_string());
        LoaoRow {
            variant: variants[v],
            area: area.clone(),
            cohort: *cohort,
            n_heldout: heldout.len(),
            observed_rate: heldout.iter().filter(|m| m.displaced).count() as f64 / heldout.len() as f64,
            prediction,
        }
    });
    Ok(LoaoResult {
        rows,
        sampler: config.sampler.clone(),
    })
}

/// MSE and interval coverage over a group of folds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Score {
    pub variant: Variant,
    /// `None` for the pooled summary.
    pub cohort: Option<Cohort>,
    pub folds: usize,
    pub failed: usize,
    /// Mean squared error of the predicted median, times 1000.
    pub mse_x1000: f64,
    /// Percent of folds whose interval contains the observed rate, at
    /// [`LEVELS`].
    pub coverage: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationSummary {
    pub overall: Vec<Score>,
    pub by_cohort: Vec<Score>,
}

fn score_group(variant: Variant, cohort: Option<Cohort>, rows: &[&LoaoRow]) -> Score {
    let ok: Vec<(&LoaoRow, &Prediction)> = rows
        .iter()
        .filter_map(|r| r.prediction.as_ref().ok().map(|p| (*r, p)))
        .collect();
    let n = ok.len() as f64;
    let (mse_x1000, coverage) = if ok.is_empty() {
        (f64::NAN, vec![f64::NAN; LEVELS.len()])
    } else {
        let mse = ok.iter().map(|(r, p)| (p.median - r.observed_rate).powi(2)).sum::<f64>() / n;
        let coverage = (0..LEVELS.len())
            .map(|l| {
                let hits = ok
                    .iter()
                    .filter(|(r, p)| p.intervals[l].lower <= r.observed_rate && r.observed_rate <= p.intervals[l].upper)
                    .count();
                100.0 * hits as f64 / n
            })
            .collect();
        (1000.0 * mse, coverage)
    };
    Score {
        variant,
        cohort,
        folds: ok.len(),
        failed: rows.len() - ok.len(),
        mse_x1000,
        coverage,
    }
}

/// Pooled and per-cohort scores for every variant in `result`.
pub fn score(result: &LoaoResult) -> Result<ValidationSummary> {
    if result.rows.is_empty() {
        return Err(Error::InvalidInput("no validation folds to score".into()));
    }
    let mut rows: Vec<&LoaoRow> = result.rows.iter().collect();
    rows.sort_by(|a, b| (a.variant, a.cohort, &a.area).cmp(&(b.variant, b.cohort, &b.area)));
    let mut by_variant: BTreeMap<Variant, Vec<&LoaoRow>> = BTreeMap::new();
    let mut by_cohort: BTreeMap<(Variant, Cohort), Vec<&LoaoRow>> = BTreeMap::new();
    for r in rows {
        by_variant.entry(r.variant).or_default().push(r);
        by_cohort.entry((r.variant, r.cohort)).or_default().push(r);
    }
    Ok(ValidationSummary {
        overall: by_variant.iter().map(|(&v, rs)| score_group(v, None, rs)).collect(),
        by_cohort: by_cohort.iter().map(|(&(v, c), rs)| score_group(v, Some(c), rs)).collect(),
    })
}
