use serde::{Deserialize, Serialize};

use super::Strategy;
use crate::error::{Error, Result};
use crate::eval::EvalSummary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub strategy: Strategy,
    pub selected: Vec<usize>,
    /// Clients that had no samples and returned the global model.
    pub skipped: Vec<usize>,
    /// Per client, in client order: mean loss of each local epoch.
    pub local_losses: Vec<Vec<f64>>,
    pub eval: Option<EvalSummary>,
    pub dimension: usize,
    pub bytes_model_up: u64,
    pub bytes_model_down: u64,
    pub bytes_raw_data: u64,
    pub embedding: Option<Vec<[f64; 2]>>,
}

/// Written in place of a value that is absent, such as metrics on a round
/// without evaluation.
pub const GAP: &str = "NA";

/// Columns of [`RoundReport::csv_row`].
pub const CSV_HEADER: &str = "round,strategy,selected,mean_local_loss,ap50,ap65,ap80,ap_mean,ar1,ar10,ar100,bytes_model_up,bytes_model_down,bytes_raw_data,model_to_raw_ratio";

impl RoundReport {
    /// One NDJSON line. The wall-clock stamp lives in its own `timestamp`
    /// field so logs can be compared with it stripped.
    pub fn ndjson_line(&self, timestamp: &str) -> Result<String> {
        let mut value = serde_json::to_value(self).map_err(|e| Error::Format(e.to_string()))?;
        value
            .as_object_mut()
            .expect("report serializes to an object")
            .insert("timestamp".into(), timestamp.into());
        serde_json::to_string(&value).map_err(|e| Error::Format(e.to_string()))
    }

    /// Parses a line written by [`RoundReport::ndjson_line`], dropping the
    /// timestamp.
    pub fn from_ndjson_line(line: &str) -> Result<(RoundReport, Option<String>)> {
        let mut value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::Format(format!("bad report line: {e}")))?;
        let stamp = value
            .as_object_mut()
            .and_then(|o| o.remove("timestamp"))
            .and_then(|t| t.as_str().map(str::to_owned));
        let report = serde_json::from_value(value).map_err(|e| Error::Format(format!("bad report line: {e}")))?;
        Ok((report, stamp))
    }

    pub fn mean_local_loss(&self) -> Option<f64> {
        let last: Vec<f64> = self.local_losses.iter().filter_map(|l| l.last().copied()).collect();
        (!last.is_empty()).then(|| last.iter().sum::<f64>() / last.len() as f64)
    }

    /// Ratio of model bytes (both directions) to raw data bytes.
    pub fn model_to_raw_ratio(&self) -> Option<f64> {
        (self.bytes_raw_data > 0).then(|| (self.bytes_model_up + self.bytes_model_down) as f64 / self.bytes_raw_data as f64)
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| GAP.to_string(), |x| format!("{x}"));
        let metrics = match &self.eval {
            Some(e) => e.values().iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","),
            None => [GAP; 7].join(","),
        };
        let strategy = serde_json::to_value(self.strategy)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.round,
            strategy,
            self.selected.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";"),
            opt(self.mean_local_loss()),
            metrics,
            self.bytes_model_up,
            self.bytes_model_down,
            self.bytes_raw_data,
            opt(self.model_to_raw_ratio()),
        )
    }
}
