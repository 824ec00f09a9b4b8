//! Federated training of the encoder (and discriminator) around a shared
//! frozen prior decoder, plus the non-federated comparison strategies.

mod client;
mod history;
mod strategy;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::DataError;
use crate::losses::{LossError, LossWeights};
use crate::metrics::MetricError;
use crate::model::{LatentPack, ModelError};
use crate::tensor::{sub, sum_all, sum_squares, scale, ParamVector, Tensor, TensorError, WireError};

pub use client::{client_rng, lr_at, local_update, sample_batch, ClientRoundStats, ClientState};
pub use history::{
    checkpoint_bytes, history_csv, parse_checkpoint, write_history_csv, RoundReport, SplitMetrics, HISTORY_HEADER,
};
pub use strategy::{
    evaluate_params, predict, run_local, run_strategy, run_strategy_observed, run_vpfl, run_vpfl_observed, FedSetup,
    GlobalState, StrategyOutcome, TrainedModel, GLOBAL_SPLIT,
};

#[derive(Debug, thiserror::Error)]
pub enum FedError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("client {client}, round {round}, step {step}: non-finite {what}")]
    NonFinite {
        client: usize,
        round: usize,
        step: usize,
        what: &'static str,
    },
    #[error("aggregation: {0}")]
    Align(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = FedError> = std::result::Result<T, E>;

/// Local objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalMode {
    Vanilla,
    Mpr,
    FedProx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    LocalOnly(usize),
    Fused,
    Centralized,
    FedAvg,
    FedProx,
    Vpfl,
}

impl Strategy {
    /// Row label used in comparison tables.
    pub fn label(&self) -> String {
        match self {
            Strategy::LocalOnly(k) => format!("Local-Only C{}", k + 1),
            Strategy::Fused => "Fused".into(),
            Strategy::Centralized => "Centralized".into(),
            Strategy::FedAvg => "VPFL w/o MPR".into(),
            Strategy::FedProx => "FedProx".into(),
            Strategy::Vpfl => "VPFL".into(),
        }
    }

    /// Position in the comparison table.
    pub fn order_key(&self) -> (usize, usize) {
        match self {
            Strategy::LocalOnly(k) => (0, *k),
            Strategy::Fused => (1, 0),
            Strategy::FedProx => (2, 0),
            Strategy::FedAvg => (3, 0),
            Strategy::Vpfl => (4, 0),
            Strategy::Centralized => (5, 0),
        }
    }

    pub fn federated_mode(&self) -> Option<LocalMode> {
        match self {
            Strategy::FedAvg => Some(LocalMode::Vanilla),
            Strategy::FedProx => Some(LocalMode::FedProx),
            Strategy::Vpfl => Some(LocalMode::Mpr),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::LocalOnly(k) => write!(f, "local_only:{k}"),
            Strategy::Fused => f.write_str("fused"),
            Strategy::Centralized => f.write_str("centralized"),
            Strategy::FedAvg => f.write_str("fedavg"),
            Strategy::FedProx => f.write_str("fedprox"),
            Strategy::Vpfl => f.write_str("vpfl"),
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = FedError;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || FedError::Config(format!("unknown strategy `{s}`"));
        Ok(match s {
            "fused" => Strategy::Fused,
            "centralized" => Strategy::Centralized,
            "fedavg" | "vpfl_no_mpr" => Strategy::FedAvg,
            "fedprox" => Strategy::FedProx,
            "vpfl" => Strategy::Vpfl,
            _ => match s.strip_prefix("local_only") {
                Some("") => Strategy::LocalOnly(0),
                Some(rest) => Strategy::LocalOnly(
                    rest.trim_start_matches([':', '='])
                        .parse()
                        .map_err(|_| bad())?,
                ),
                None => return Err(bad()),
            },
        })
    }
}

/// How uploads reach the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    InProcess,
    /// Every deploy and upload goes through the parameter wire format.
    Loopback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub late_learning_rate: f64,
    /// Fraction of the total step budget after which the late rate applies.
    pub decay_at: f64,
    pub mu: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub weighted_aggregation: bool,
    pub aggregate_discriminator: bool,
    pub parallel: bool,
    pub transport: Transport,
    /// Evaluate the global model every this many rounds (0: final round only).
    pub eval_every: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            rounds: 40,
            local_steps: 50,
            batch_size: 4,
            learning_rate: 2e-3,
            late_learning_rate: 1e-3,
            decay_at: 0.7,
            mu: 1e-3,
            weights: LossWeights::default(),
            seed: 1,
            weighted_aggregation: false,
            aggregate_discriminator: true,
            parallel: true,
            transport: Transport::InProcess,
            eval_every: 10,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(FedError::Config("batch size must be at least 1".into()));
        }
        if !(self.mu >= 0.0) {
            return Err(FedError::Config(format!("mu must be non-negative, got {}", self.mu)));
        }
        if !(self.learning_rate > 0.0 && self.late_learning_rate > 0.0) {
            return Err(FedError::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.decay_at) {
            return Err(FedError::Config("decay_at must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.rounds * self.local_steps
    }
}

/// ‖w − w^q‖² + Σᵢ ‖Fᵢ − Fᵢ^q‖². The anchor is detached, so gradients reach
/// only `current`.
pub fn mpr_term(current: &LatentPack, anchor: &LatentPack) -> Result<Tensor> {
    if current.features.len() != anchor.features.len() {
        return Err(FedError::Config(format!(
            "latent packs hold {} vs {} feature levels",
            current.features.len(),
            anchor.features.len()
        )));
    }
    let mut terms = vec![sum_squares(&sub(&current.style, &anchor.style.detach())?)?];
    for (f, a) in current.features.iter().zip(&anchor.features) {
        terms.push(sum_squares(&sub(f, &a.detach())?)?);
    }
    Ok(sum_all(&terms)?)
}

/// (μ/2)·‖Θ − Θ^q‖² over aligned vectors; the anchor is treated as constant.
pub fn prox_term(current: &ParamVector, anchor: &ParamVector, mu: f64) -> Result<Tensor> {
    current.check_aligned(anchor).map_err(|e| FedError::Align(e.to_string()))?;
    let terms = current
        .tensors()
        .zip(anchor.tensors())
        .map(|(c, a)| Ok(sum_squares(&sub(c, &a.detach())?)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(scale(&sum_all(&terms)?, mu / 2.0)?)
}

/// Element-wise mean written as `u₀ + Σₖ wₖ(uₖ − u₀)`, which returns an
/// upload unchanged when every upload agrees.
fn mean_values(columns: &[&[f64]], weights: &[f64], out: &mut Vec<f64>) {
    let first = columns[0];
    out.clear();
    out.extend(first.iter().enumerate().map(|(i, &base)| {
        let dev: f64 = columns
            .iter()
            .zip(weights)
            .skip(1)
            .map(|(c, w)| w * (c[i] - base))
            .sum();
        // Skipping a zero deviation also preserves the sign of a -0.0 base.
        if dev == 0.0 {
            base
        } else {
            base + dev
        }
    }));
}

/// Unweighted element-wise mean of the uploads.
pub fn aggregate(uploads: &[ParamVector]) -> Result<ParamVector> {
    let k = uploads.len();
    aggregate_weighted(uploads, &vec![1.0 / k.max(1) as f64; k])
}

/// Mean with per-upload weights (normalised here).
pub fn aggregate_weighted(uploads: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let first = uploads
        .first()
        .ok_or_else(|| FedError::Config("aggregation needs at least one upload".into()))?;
    if weights.len() != uploads.len() || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(FedError::Config("one non-negative weight per upload required".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(FedError::Config("aggregation weights sum to zero".into()));
    }
    let w: Vec<f64> = weights.iter().map(|x| x / total).collect();
    for (k, u) in uploads.iter().enumerate().skip(1) {
        first
            .check_aligned(u)
            .map_err(|e| FedError::Align(format!("upload {k}: {e}")))?;
    }
    let per_entry: Vec<Vec<&Tensor>> = uploads.iter().map(|u| u.tensors().collect()).collect();
    let mut values = Vec::with_capacity(first.len());
    for e in 0..first.len() {
        let cols: Vec<&[f64]> = per_entry.iter().map(|u| u[e].data()).collect();
        let mut out = Vec::new();
        mean_values(&cols, &w, &mut out);
        values.push(out);
    }
    Ok(first.with_values(values)?.frozen_copy())
}

/// Pixel-space mean of several models' outputs for the same inputs.
pub fn fuse_outputs(outputs: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let k = outputs.len();
    if k == 0 {
        return Err(FedError::Config("fusion needs at least one model".into()));
    }
    let n = outputs[0].len();
    if outputs.iter().any(|o| o.len() != n) {
        return Err(FedError::Config("models produced different probe counts".into()));
    }
    let w = vec![1.0 / k as f64; k];
    Ok((0..n)
        .map(|i| {
            let cols: Vec<&[f64]> = outputs.iter().map(|o| o[i].as_slice()).collect();
            let mut out = Vec::new();
            mean_values(&cols, &w, &mut out);
            out
        })
        .collect())
}
