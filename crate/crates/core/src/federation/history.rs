use serde::{Deserialize, Serialize};

use crate::metrics::MetricBundle;
use crate::tensor::{ParamVector, WireError};

use super::ClientRoundStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub metrics: MetricBundle,
}

/// One completed round. `metrics` is empty on rounds without evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientRoundStats>,
    pub metrics: Vec<SplitMetrics>,
    pub wall_ms: f64,
}

pub const HISTORY_HEADER: &str = "round,client_id,loss_total,loss_r,loss_adv,loss_p,loss_id,mpr_term,d_loss,prox_term,\
split,psnr,ssim,l1,deg,rank1,vr_far1,vr_far01,far_resolution_limited,deg_zero_norm,probes";

/// Client rows then one global row per evaluated split. Wall-clock time is
/// left out so identical runs give identical bytes.
pub fn history_csv(reports: &[RoundReport], include_header: bool) -> String {
    let mut out = String::new();
    if include_header {
        out.push_str(HISTORY_HEADER);
        out.push('\n');
    }
    let blank_metrics = ",".repeat(MetricBundle::FIELDS.len());
    for r in reports {
        for c in &r.clients {
            let l = &c.loss;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.round, c.client_id, l.total, l.r, l.adv, l.p, l.id, c.mpr, c.d_loss, c.prox, blank_metrics
            ));
        }
        for m in &r.metrics {
            out.push_str(&format!(
                "{},global,,,,,,,,,{},{}\n",
                r.round,
                m.split,
                m.metrics.csv_values().join(",")
            ));
        }
    }
    out
}

pub fn write_history_csv(path: &std::path::Path, reports: &[RoundReport]) -> std::io::Result<()> {
    std::fs::write(path, history_csv(reports, true))
}

/// Parameter wire bytes followed by the completed round count (u32 LE).
pub fn checkpoint_bytes(theta: &ParamVector, round: usize) -> Vec<u8> {
    let mut b = theta.to_bytes(false);
    b.extend_from_slice(&(round as u32).to_le_bytes());
    b
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ParamVector, usize), WireError> {
    let (pv, _, used) = ParamVector::read_prefix(bytes)?;
    let rest = &bytes[used..];
    match rest.len() {
        4 => Ok((pv, u32::from_le_bytes(rest.try_into().expect("4 bytes")) as usize)),
        n if n < 4 => Err(WireError::Truncated(bytes.len())),
        n => Err(WireError::Trailing(n - 4)),
    }
}
