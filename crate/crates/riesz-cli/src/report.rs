//! Self-describing run reports: every numeric claim carries its tolerance
//! and verdict, and the configuration that produced the run is embedded so
//! a rerun reproduces the report byte for byte.

use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub version: String,
    pub command: String,
    pub scenario: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InfluenceSection {
    pub truth: Vec<f64>,
    pub dimension: usize,
    pub mean_certificate: f64,
    pub mean_tolerance: f64,
    pub support: Vec<Vec<f64>>,
    pub mass: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleSection {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub scale: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasOrderSection {
    pub raw: riesz_core::oracle::BiasOrderResult,
    pub robust: riesz_core::oracle::BiasOrderResult,
    pub raw_slope_window: (f64, f64),
    pub robust_slope_window: (f64, f64),
    pub raw_in_window: bool,
    pub robust_in_window: bool,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub metadata: Metadata,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub influence: Option<InfluenceSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditions: Option<riesz_core::diagnostics::ConditionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds: Option<riesz_core::diagnostics::BoundReportView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_order: Option<BiasOrderSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc: Option<riesz_core::oracle::McReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSection>,
    pub config: RunConfig,
}

impl RunReport {
    pub fn new(command: &str, scenario: Option<String>, config: RunConfig) -> Self {
        RunReport {
            metadata: Metadata {
                version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                scenario,
                seed: config.seed,
            },
            influence: None,
            conditions: None,
            bounds: None,
            bias_order: None,
            mc: None,
            oracle: None,
            config,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}
