//! Per-step metrics stream, one JSON record per line.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: u8,
    pub lr: f64,
    pub nll_m: f64,
    pub nll_s: Option<f64>,
    pub margin_mean: Option<f64>,
    pub hinge_active_frac: Option<f64>,
    pub loss: f64,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics record serializes")
    }
}
