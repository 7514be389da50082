//! TOML run configuration. Every section and key is optional.
//!
//! ```toml
//! seed = 42                      # master seed; --seed overrides
//!
//! [sampler]                      # budget of `fit`
//! chains = 4
//! warmup = 2000
//! draws = 2500                   # kept draws per chain
//! thin = 1
//!
//! [model]
//! variant = "proposed"           # covariate | cohort | hierarchical | proposed
//! covariates = ["hh_size", "income", "vehicles", "children", "tenure", "race"]
//!
//! [model.priors]
//! beta_sd = 31.62                # Normal(0, sd²) on intercept and coefficients
//! precision_shape = 1.0          # Gamma(shape, rate) on every precision
//! precision_rate = 5e-5
//! phi = "uniform"                # or { pc = { u = 0.5, alpha = 0.5 } }
//!
//! [benchmark]
//! fay = 0.5                      # Fay coefficient for `direct`
//!
//! [validation]
//! variants = ["covariate", "cohort", "hierarchical", "proposed"]
//! [validation.sampler]           # reduced budget of every LOAO refit
//! chains = 2
//! warmup = 300
//! draws = 500
//!
//! [scenario]                     # data generator of `simulate`
//! movers = 4000                  # see sae_core::validate::ScenarioConfig
//!
//! [simulate]
//! benchmark_se = 0.01            # standard error written to benchmark.csv
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use sae_core::benchmark::DEFAULT_FAY;
use sae_core::cell::CovariateSet;
use sae_core::inference::SamplerConfig;
use sae_core::model::{PriorConfig, Variant};
use sae_core::validate::{LoaoConfig, ScenarioConfig};
use sae_core::Error;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub sampler: SamplerConfig,
    pub model: ModelConfig,
    pub benchmark: BenchmarkConfig,
    pub validation: ValidationConfig,
    pub scenario: ScenarioConfig,
    pub simulate: SimulateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub covariates: CovariateSet,
    pub priors: PriorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Proposed,
            covariates: CovariateSet::all(),
            priors: PriorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub fay: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig { fay: DEFAULT_FAY }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub variants: Vec<Variant>,
    pub sampler: SamplerConfig,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            variants: Variant::ALL.to_vec(),
            sampler: LoaoConfig::default().sampler,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub benchmark_se: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            benchmark_se: 0.01,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> sae_core::Result<(Config, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| Error::InvalidInput(format!("{}: not UTF-8", path.display())))?;
        let config = toml::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        Ok((config, bytes))
    }
}
