//! Run configuration. Unknown keys are hard errors so that a typo never
//! silently changes what a run means.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Name of a built-in scenario.
    pub scenario: Option<String>,
    /// Master seed; required for simulation commands.
    pub seed: Option<u64>,
    /// Override tolerance applied to report verdicts where meaningful.
    pub tol: Option<f64>,
    /// Output directory.
    pub out: Option<String>,
    /// Report format: "json" (default) or "csv" where applicable.
    pub format: Option<String>,
    /// Worker threads for parallel sections (0 = library default).
    pub jobs: Option<usize>,
    pub eps_grid: Option<EpsGridConfig>,
    pub mc: Option<McSection>,
    pub ate: Option<AteSection>,
    pub quantile: Option<QuantileSection>,
    pub data: Option<DataSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsGridConfig {
    pub values: Option<Vec<f64>>,
    pub richardson: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub replications: usize,
    pub sample_size: usize,
    pub parallel: Option<bool>,
    /// Scenarios entered into the comparison; defaults to the single
    /// top-level scenario.
    pub scenarios: Option<Vec<String>>,
    /// Contamination of the propensity used by the fixed-weight estimator
    /// variants of the treatment-effect scenarios.
    pub propensity_contamination: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AteSection {
    pub x_support: Vec<f64>,
    pub x_mass: Vec<f64>,
    pub propensity: Vec<f64>,
    pub tau1: Vec<f64>,
    pub tau0: Vec<f64>,
    pub noise_values: Option<Vec<f64>>,
    pub noise_mass: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantileSection {
    pub q: f64,
    pub grid_points: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: String,
    /// Column names per variable block, in block order.
    pub blocks: Vec<Vec<String>>,
    /// Decimal places to which values are rounded on ingestion, making
    /// ties explicit.
    pub quantize: Option<u32>,
}

impl RunConfig {
    pub fn from_path(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("config parse error: {e}"))
    }
}
