use std::sync::Arc;
use std::time::Instant;

use rand::RngCore;

use crate::data::{stream, DatasetShard, PairedSample, TestSplit, THERMAL_SIZE};
use crate::losses::FixedEmbedder;
use crate::metrics::{evaluate_outputs, MetricBundle};
use crate::model::{init_discriminator, Generator, PriorDecoder};
use crate::tensor::{ParamVector, Tensor};

use super::{
    aggregate, aggregate_weighted, fuse_outputs, local_update, ClientRoundStats, ClientState, FedConfig, FedError,
    LocalMode, Result, RoundReport, SplitMetrics, Strategy, Transport,
};

const PREDICT_CHUNK: usize = 16;
pub const GLOBAL_SPLIT: &str = "global_avg";

/// Shared, read-only inputs of every training run.
#[derive(Debug, Clone)]
pub struct FedSetup {
    pub gen: Generator,
    /// Frozen decoder; `None` trains a decoder from scratch alongside the encoder.
    pub prior: Option<PriorDecoder>,
    pub embedder: FixedEmbedder,
    pub shards: Vec<DatasetShard>,
    pub tests: Vec<TestSplit>,
    pub cfg: FedConfig,
}

#[derive(Debug, Clone)]
pub struct GlobalState {
    pub theta: ParamVector,
    pub round: usize,
    pub history: Vec<RoundReport>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub theta: ParamVector,
    pub history: Vec<RoundReport>,
}

#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub strategy: Strategy,
    /// Per test split, then the cross-split average under [`GLOBAL_SPLIT`].
    pub metrics: Vec<SplitMetrics>,
    pub history: Vec<RoundReport>,
    /// Final weights (absent for fused, which has K models).
    pub theta: Option<ParamVector>,
    /// Fused only: the individual local models' results.
    pub locals: Vec<(Strategy, Vec<SplitMetrics>)>,
}

impl StrategyOutcome {
    pub fn average(&self) -> MetricBundle {
        global_average(&self.metrics)
    }
}

pub(crate) fn global_average(metrics: &[SplitMetrics]) -> MetricBundle {
    metrics
        .iter()
        .find(|m| m.split == GLOBAL_SPLIT)
        .map(|m| m.metrics)
        .unwrap_or_default()
}

fn derived_seed(seed: u64, tag: u64) -> u64 {
    stream(seed, &[0x5eed, tag]).next_u64()
}

impl FedSetup {
    /// Initial Θ⁰ without discriminator, and the initial discriminator.
    /// With a prior, the encoder's style affines start from the prior's.
    pub fn initial_theta(&self) -> Result<(ParamVector, ParamVector)> {
        let seed = self.cfg.seed;
        let enc = self.gen.init_encoder(derived_seed(seed, 1))?;
        let enc = match &self.prior {
            Some(p) => {
                let values = enc
                    .iter()
                    .map(|(n, t)| p.affines.get(n).map_or_else(|| t.data().to_vec(), |a| a.data().to_vec()))
                    .collect();
                enc.with_values(values)?
            }
            None => enc,
        };
        let mut theta = ParamVector::new();
        theta.extend_prefixed("enc.", &enc)?;
        if self.prior.is_none() {
            theta.extend_prefixed("synth.", &self.gen.init_synthesis(derived_seed(seed, 2))?)?;
        }
        let disc = init_discriminator(&self.gen.arch, derived_seed(seed, 3))?;
        Ok((theta.frozen_copy(), disc))
    }

    fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if self.shards.is_empty() {
            return Err(FedError::Config("no client shards".into()));
        }
        if self.tests.is_empty() {
            return Err(FedError::Config("no test splits".into()));
        }
        Ok(())
    }
}

/// Hallucinated [3,64,64] images for `samples` under `theta`.
pub fn predict(setup: &FedSetup, theta: &ParamVector, samples: &[Arc<PairedSample>]) -> Result<Vec<Vec<f64>>> {
    let enc = theta.select_prefixed("enc.").frozen_copy();
    let own = theta.select_prefixed("synth.").frozen_copy();
    let synth = if !own.is_empty() {
        &own
    } else {
        &setup
            .prior
            .as_ref()
            .ok_or_else(|| FedError::Config("theta has no decoder and no prior is loaded".into()))?
            .synth
    };
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(PREDICT_CHUNK) {
        let data: Vec<f64> = chunk.iter().flat_map(|s| s.thermal.iter().map(|&v| v as f64)).collect();
        let x = Tensor::new(&[chunk.len(), 1, THERMAL_SIZE, THERMAL_SIZE], data)?;
        let y = setup.gen.hallucinate(&enc, synth, &x)?;
        let per = y.numel() / chunk.len();
        out.extend(y.data().chunks(per).map(<[f64]>::to_vec));
    }
    Ok(out)
}

fn metrics_of_outputs(setup: &FedSetup, outputs: &[Vec<Vec<f64>>]) -> Result<Vec<SplitMetrics>> {
    let mut rows = Vec::with_capacity(setup.tests.len() + 1);
    for (t, o) in setup.tests.iter().zip(outputs) {
        rows.push(SplitMetrics {
            split: t.name.clone(),
            metrics: evaluate_outputs(o, &t.samples, &setup.embedder)?,
        });
    }
    let avg = MetricBundle::average(&rows.iter().map(|r| r.metrics).collect::<Vec<_>>());
    rows.push(SplitMetrics {
        split: GLOBAL_SPLIT.into(),
        metrics: avg,
    });
    Ok(rows)
}

/// Metrics on every test split plus the cross-split average.
pub fn evaluate_params(setup: &FedSetup, theta: &ParamVector) -> Result<Vec<SplitMetrics>> {
    let outputs = setup
        .tests
        .iter()
        .map(|t| predict(setup, theta, &t.samples))
        .collect::<Result<Vec<_>>>()?;
    metrics_of_outputs(setup, &outputs)
}

fn through_wire(pv: &ParamVector, transport: Transport) -> Result<ParamVector> {
    match transport {
        Transport::InProcess => Ok(pv.clone()),
        Transport::Loopback => Ok(ParamVector::from_bytes(&pv.to_bytes(false))?.0),
    }
}

type ClientResult = Result<(ParamVector, ClientRoundStats)>;

fn run_clients(
    setup: &FedSetup,
    clients: &mut [ClientState],
    global: Option<&ParamVector>,
    round: usize,
    mode: LocalMode,
) -> Vec<ClientResult> {
    let transport = setup.cfg.transport;
    let work = |c: &mut ClientState| -> ClientResult {
        let deployed = global.map(|g| through_wire(g, transport)).transpose()?;
        let (upload, stats) = local_update(setup, c, deployed.as_ref(), round, mode)?;
        Ok((through_wire(&upload, transport)?, stats))
    };
    #[cfg(feature = "parallel")]
    if setup.cfg.parallel && clients.len() > 1 {
        use rayon::prelude::*;
        return clients.par_iter_mut().map(work).collect();
    }
    clients.iter_mut().map(work).collect()
}

fn eval_due(cfg: &FedConfig, round: usize) -> bool {
    round + 1 == cfg.rounds || (cfg.eval_every > 0 && (round + 1).is_multiple_of(cfg.eval_every))
}

/// Full federated loop: deploy, K local updates, aggregate, evaluate.
pub fn run_vpfl(setup: &FedSetup, mode: LocalMode) -> Result<GlobalState> {
    run_vpfl_observed(setup, mode, &mut |_| Ok(()))
}

/// [`run_vpfl`] calling `observer` after every completed round, so callers
/// can persist history before a later round fails.
pub fn run_vpfl_observed(
    setup: &FedSetup,
    mode: LocalMode,
    observer: &mut dyn FnMut(&RoundReport) -> Result<()>,
) -> Result<GlobalState> {
    setup.validate()?;
    let cfg = &setup.cfg;
    let (theta0, disc0) = setup.initial_theta()?;
    let mut theta = theta0.clone();
    if cfg.aggregate_discriminator {
        theta.extend_prefixed("disc.", &disc0)?;
    }
    let mut clients = setup
        .shards
        .iter()
        .map(|s| ClientState::new(s.client_id, s.clone(), &theta, &disc0, cfg.learning_rate))
        .collect::<Result<Vec<_>>>()?;
    let sizes: Vec<f64> = setup.shards.iter().map(|s| s.len() as f64).collect();
    let mut history = Vec::with_capacity(cfg.rounds);
    for q in 0..cfg.rounds {
        let start = Instant::now();
        let results = run_clients(setup, &mut clients, Some(&theta), q, mode);
        let mut uploads = Vec::with_capacity(results.len());
        let mut stats = Vec::with_capacity(results.len());
        for r in results {
            let (u, s) = r?;
            uploads.push(u);
            stats.push(s);
        }
        theta = if cfg.weighted_aggregation {
            aggregate_weighted(&uploads, &sizes)?
        } else {
            aggregate(&uploads)?
        };
        let metrics = if eval_due(cfg, q) {
            evaluate_params(setup, &theta)?
        } else {
            Vec::new()
        };
        let report = RoundReport {
            round: q,
            clients: stats,
            metrics,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        observer(&report)?;
        history.push(report);
    }
    Ok(GlobalState {
        theta,
        round: cfg.rounds,
        history,
    })
}

/// Trains one model on `shard` alone for rounds × local_steps steps, using
/// the same round-segmented batch streams as a federated client.
pub fn run_local(setup: &FedSetup, shard: &DatasetShard) -> Result<TrainedModel> {
    setup.validate()?;
    let cfg = &setup.cfg;
    let (theta0, disc0) = setup.initial_theta()?;
    let mut client = ClientState::new(shard.client_id, shard.clone(), &theta0, &disc0, cfg.learning_rate)?;
    let mut history = Vec::with_capacity(cfg.rounds);
    let mut theta = theta0;
    for q in 0..cfg.rounds {
        let start = Instant::now();
        let (t, stats) = local_update(setup, &mut client, None, q, LocalMode::Vanilla)?;
        theta = t;
        history.push(RoundReport {
            round: q,
            clients: vec![stats],
            metrics: Vec::new(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainedModel { theta, history })
}

fn locals_all(setup: &FedSetup) -> Vec<Result<TrainedModel>> {
    #[cfg(feature = "parallel")]
    if setup.cfg.parallel {
        use rayon::prelude::*;
        return setup.shards.par_iter().map(|s| run_local(setup, s)).collect();
    }
    setup.shards.iter().map(|s| run_local(setup, s)).collect()
}

fn finish(
    setup: &FedSetup,
    strategy: Strategy,
    theta: ParamVector,
    mut history: Vec<RoundReport>,
) -> Result<StrategyOutcome> {
    let metrics = match history.last() {
        Some(r) if !r.metrics.is_empty() => r.metrics.clone(),
        _ => {
            let m = evaluate_params(setup, &theta)?;
            if let Some(last) = history.last_mut() {
                last.metrics = m.clone();
            }
            m
        }
    };
    Ok(StrategyOutcome {
        strategy,
        metrics,
        history,
        theta: Some(theta),
        locals: Vec::new(),
    })
}

pub fn run_strategy(setup: &FedSetup, strategy: Strategy) -> Result<StrategyOutcome> {
    run_strategy_observed(setup, strategy, &mut |_| Ok(()))
}

/// Runs one comparison strategy and evaluates its final model(s).
pub fn run_strategy_observed(
    setup: &FedSetup,
    strategy: Strategy,
    observer: &mut dyn FnMut(&RoundReport) -> Result<()>,
) -> Result<StrategyOutcome> {
    match strategy {
        Strategy::LocalOnly(k) => {
            let shard = setup.shards.get(k).ok_or_else(|| {
                FedError::Config(format!("client {k} out of range for {} shards", setup.shards.len()))
            })?;
            let m = run_local(setup, shard)?;
            m.history.iter().try_for_each(&mut *observer)?;
            finish(setup, strategy, m.theta, m.history)
        }
        Strategy::Centralized => {
            // Same batch and schedule shape as one client, but as many steps
            // as all K clients take together.
            let mut pooled = setup.clone();
            pooled.cfg.local_steps *= setup.shards.len();
            let union = DatasetShard::union(0, &setup.shards);
            let m = run_local(&pooled, &union)?;
            m.history.iter().try_for_each(&mut *observer)?;
            finish(setup, strategy, m.theta, m.history)
        }
        Strategy::FedAvg | Strategy::FedProx | Strategy::Vpfl => {
            let mode = strategy.federated_mode().expect("federated strategy");
            let g = run_vpfl_observed(setup, mode, observer)?;
            finish(setup, strategy, g.theta, g.history)
        }
        Strategy::Fused => {
            let models = locals_all(setup).into_iter().collect::<Result<Vec<_>>>()?;
            let mut per_model = Vec::with_capacity(models.len());
            let mut locals = Vec::with_capacity(models.len());
            for (k, m) in models.iter().enumerate() {
                let outs = setup
                    .tests
                    .iter()
                    .map(|t| predict(setup, &m.theta, &t.samples))
                    .collect::<Result<Vec<_>>>()?;
                locals.push((Strategy::LocalOnly(k), metrics_of_outputs(setup, &outs)?));
                per_model.push(outs);
            }
            let fused = (0..setup.tests.len())
                .map(|t| fuse_outputs(&per_model.iter().map(|o| o[t].clone()).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            Ok(StrategyOutcome {
                strategy,
                metrics: metrics_of_outputs(setup, &fused)?,
                history: Vec::new(),
                theta: None,
                locals,
            })
        }
    }
}
