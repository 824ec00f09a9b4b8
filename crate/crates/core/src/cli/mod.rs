//! Experiment commands behind the `vpfl` binary. Everything here is plain
//! library code so tests can drive it without spawning processes.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! data/   manifest.txt, client<k>.vpfd, test_<split>.vpfd, config.txt
//! prior/  prior.vpfl, samples.ppm, config.txt
//! runs/<strategy>/  config.txt, history.csv, timing.csv, checkpoint.vpfl,
//!                   metrics.json, probes.ppm
//! ```

pub mod ppm;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{
    build_corpus, partition_corpus, read_manifest, read_shard, write_manifest, write_shard, DataError,
    DatasetShard, ManifestEntry, PairedSample, TestSplit, THERMAL_SIZE, VISIBLE_SIZE,
};
use crate::federation::{
    checkpoint_bytes, history_csv, parse_checkpoint, predict, run_strategy_observed, FedError, FedSetup,
    SplitMetrics, Strategy, GLOBAL_SPLIT,
};
use crate::losses::FixedEmbedder;
use crate::metrics::MetricBundle;
use crate::model::{pretrain_prior, sample_prior, Generator, ModelError, PriorDecoder};
use crate::tensor::{Tensor, TensorError, WireError};

use ppm::{contact_sheet, Rgb8};

pub const METRICS_SCHEMA: u32 = 1;
pub const PRIOR_FILE: &str = "prior.vpfl";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.vpfl";
pub const METRICS_FILE: &str = "metrics.json";
pub const HISTORY_FILE: &str = "history.csv";
const PRIOR_SHEET_SIDE: usize = 4;
const PROBES_PER_SPLIT: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
}

impl CliError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io { .. } => 4,
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(m) => CliError::Config(m),
            DataError::Io { path, source } => CliError::Io {
                path,
                detail: source.to_string(),
            },
            DataError::Format { path, detail } => CliError::Io { path, detail },
        }
    }
}

fn tensor_err(e: &TensorError) -> CliError {
    match e {
        TensorError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        _ => CliError::Config(e.to_string()),
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::Tensor(t) => tensor_err(t),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<FedError> for CliError {
    fn from(e: FedError) -> Self {
        match e {
            FedError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            FedError::Data(d) => d.into(),
            FedError::Model(m) => m.into(),
            FedError::Tensor(t) => tensor_err(&t),
            FedError::Wire(w) => CliError::Io {
                path: "<wire>".into(),
                detail: w.to_string(),
            },
            other => CliError::Config(other.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn write(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, bytes).map_err(|e| CliError::io(p, e))
}

fn read(p: &Path) -> Result<Vec<u8>> {
    fs::read(p).map_err(|e| CliError::io(p, e))
}

pub fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

pub fn prior_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("prior")
}

/// Run directory name for a strategy, e.g. `vpfl`, `local_only_c2`.
pub fn run_name(strategy: Strategy, cfg: &ExperimentConfig) -> String {
    let base = match strategy {
        Strategy::LocalOnly(k) => format!("local_only_c{}", k + 1),
        s => s.to_string(),
    };
    let mut tags = Vec::new();
    if !cfg.vp_on {
        tags.push("novp");
    }
    if !cfg.msca_on {
        tags.push("nomsca");
    }
    if tags.is_empty() {
        base
    } else {
        format!("{base}_{}", tags.join("_"))
    }
}

pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("runs").join(run_name(cfg.resolved_strategy(), cfg))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenDataSummary {
    pub manifest: String,
    pub clients: Vec<(usize, usize)>,
    pub tests: Vec<(String, usize)>,
}

/// Renders the corpus, partitions it and writes shards plus a manifest.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<GenDataSummary> {
    cfg.validate()?;
    let dir = data_dir(cfg);
    mkdir(&dir)?;
    let corpus = build_corpus(&cfg.corpus)?;
    let shards = partition_corpus(&corpus, cfg.clients_per_dataset, cfg.alpha, cfg.seed)?;
    let mut entries = Vec::new();
    for s in &shards {
        let name = format!("client{}.vpfd", s.client_id);
        write_shard(&dir.join(&name), &s.samples)?;
        entries.push(ManifestEntry::Shard {
            path: name,
            client_id: s.client_id,
            size: s.len(),
            style: s.style,
        });
    }
    for t in &corpus.tests {
        let name = format!("test_{}.vpfd", t.name);
        write_shard(&dir.join(&name), &t.samples)?;
        entries.push(ManifestEntry::Test {
            path: name,
            split: t.name.clone(),
            size: t.samples.len(),
            style: t.style,
        });
    }
    let manifest = dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &entries)?;
    write(&dir.join("config.txt"), cfg.to_text())?;
    Ok(GenDataSummary {
        manifest: manifest.display().to_string(),
        clients: shards.iter().map(|s| (s.client_id, s.len())).collect(),
        tests: corpus.tests.iter().map(|t| (t.name.clone(), t.samples.len())).collect(),
    })
}

/// Shards (sorted by client id) and test splits listed in a manifest.
pub fn load_data(dir: &Path) -> Result<(Vec<DatasetShard>, Vec<TestSplit>)> {
    let manifest = dir.join(MANIFEST_FILE);
    if !manifest.exists() {
        return Err(CliError::Config(format!(
            "{} not found; run gen-data first",
            manifest.display()
        )));
    }
    let mut shards = Vec::new();
    let mut tests = Vec::new();
    for e in read_manifest(&manifest)? {
        match e {
            ManifestEntry::Shard {
                path,
                client_id,
                size,
                style,
            } => {
                let samples = read_shard(&dir.join(&path))?;
                check_size(&path, size, samples.len())?;
                shards.push(DatasetShard {
                    client_id,
                    style,
                    samples,
                });
            }
            ManifestEntry::Test {
                path,
                split,
                size,
                style,
            } => {
                let samples = read_shard(&dir.join(&path))?;
                check_size(&path, size, samples.len())?;
                tests.push(TestSplit {
                    name: split,
                    style,
                    samples,
                });
            }
        }
    }
    shards.sort_by_key(|s| s.client_id);
    Ok((shards, tests))
}

fn check_size(path: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(CliError::Io {
            path: path.into(),
            detail: format!("manifest lists {expected} samples, file holds {got}"),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PriorSummary {
    pub checkpoint: String,
    pub samples: String,
    pub steps: usize,
    pub images: usize,
}

/// Pretrains the decoder on every training shard's visible images.
pub fn cmd_pretrain_prior(cfg: &ExperimentConfig) -> Result<PriorSummary> {
    cfg.validate()?;
    let (shards, _) = load_data(&data_dir(cfg))?;
    let gen = Generator::new(cfg.arch.clone(), cfg.msca_on)?;
    let visible: Vec<&[f32]> = shards
        .iter()
        .flat_map(|s| s.samples.iter().map(|p| p.visible.as_slice()))
        .collect();
    let prior = pretrain_prior(&gen, &visible, &cfg.prior)?;
    let dir = prior_dir(cfg);
    mkdir(&dir)?;
    let ckpt = dir.join(PRIOR_FILE);
    write(&ckpt, prior.to_bytes())?;

    let n = PRIOR_SHEET_SIDE * PRIOR_SHEET_SIDE;
    let mut rng = crate::data::stream(cfg.seed, &[0x5a3e]);
    let z: Vec<f64> = (0..n * cfg.arch.style_dim)
        .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
        .collect();
    let imgs = sample_prior(&gen, &prior, &Tensor::new(&[n, cfg.arch.style_dim], z).map_err(|e| tensor_err(&e))?)?;
    let per = imgs.numel() / n;
    let tiles: Vec<Rgb8> = imgs
        .data()
        .chunks(per)
        .map(|c| Rgb8::from_chw(c, 3, cfg.arch.output_size, 1))
        .collect();
    let sheet_path = dir.join("samples.ppm");
    contact_sheet(&tiles, PRIOR_SHEET_SIDE)
        .write(&sheet_path)
        .map_err(|e| CliError::io(&sheet_path, e))?;
    write(&dir.join("config.txt"), cfg.to_text())?;
    Ok(PriorSummary {
        checkpoint: ckpt.display().to_string(),
        samples: sheet_path.display().to_string(),
        steps: cfg.prior.steps,
        images: visible.len(),
    })
}

pub fn load_prior(cfg: &ExperimentConfig) -> Result<Option<PriorDecoder>> {
    if !cfg.vp_on {
        return Ok(None);
    }
    let p = prior_dir(cfg).join(PRIOR_FILE);
    if !p.exists() {
        return Err(CliError::Config(format!(
            "{} not found; run pretrain-prior first or set vp = false",
            p.display()
        )));
    }
    let prior = PriorDecoder::from_bytes(&read(&p)?).map_err(|e| CliError::io(&p, e))?;
    Ok(Some(prior))
}

/// Setup for training or evaluation from the on-disk data and prior.
pub fn build_setup(cfg: &ExperimentConfig) -> Result<FedSetup> {
    cfg.validate()?;
    let (shards, tests) = load_data(&data_dir(cfg))?;
    let gen = Generator::new(cfg.arch.clone(), cfg.msca_on)?;
    let prior = load_prior(cfg)?;
    Ok(FedSetup {
        embedder: FixedEmbedder::new(&cfg.arch)?,
        gen,
        prior,
        shards,
        tests,
        cfg: cfg.fed.clone(),
    })
}

/// Serialized result of one run; `metrics.json` in the run directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunMetrics {
    pub schema: u32,
    pub strategy: String,
    pub label: String,
    pub splits: Vec<SplitMetrics>,
    pub locals: Vec<LocalMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LocalMetrics {
    pub strategy: String,
    pub label: String,
    pub splits: Vec<SplitMetrics>,
}

impl RunMetrics {
    pub fn global(&self) -> Option<&MetricBundle> {
        self.splits.iter().find(|s| s.split == GLOBAL_SPLIT).map(|s| &s.metrics)
    }
}

fn probe_sheet(setup: &FedSetup, theta: &crate::tensor::ParamVector) -> Result<Rgb8> {
    let mut tiles = Vec::new();
    for t in &setup.tests {
        let picks: Vec<Arc<PairedSample>> = t.samples.iter().take(PROBES_PER_SPLIT).cloned().collect();
        let outs = predict(setup, theta, &picks)?;
        for (s, o) in picks.iter().zip(&outs) {
            let th: Vec<f64> = s.thermal.iter().map(|&v| v as f64).collect();
            let gt: Vec<f64> = s.visible.iter().map(|&v| v as f64).collect();
            tiles.push(Rgb8::from_chw(&th, 1, THERMAL_SIZE, VISIBLE_SIZE / THERMAL_SIZE));
            tiles.push(Rgb8::from_chw(o, 3, VISIBLE_SIZE, 1));
            tiles.push(Rgb8::from_chw(&gt, 3, VISIBLE_SIZE, 1));
        }
    }
    Ok(contact_sheet(&tiles, 3))
}

/// Trains the configured strategy and writes its run directory. History
/// rows are flushed after every round, so an aborted run keeps them.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<(PathBuf, RunMetrics)> {
    let setup = build_setup(cfg)?;
    let strategy = cfg.resolved_strategy();
    if let Strategy::LocalOnly(k) = strategy {
        if k >= setup.shards.len() {
            return Err(CliError::Config(format!(
                "client {k} out of range for {} shards",
                setup.shards.len()
            )));
        }
    }
    let dir = run_dir(cfg);
    mkdir(&dir)?;
    write(&dir.join("config.txt"), cfg.to_text())?;
    let hist_path = dir.join(HISTORY_FILE);
    let timing_path = dir.join("timing.csv");
    write(&hist_path, history_csv(&[], true))?;
    write(&timing_path, "round,wall_ms\n")?;
    let append = |path: &Path, text: String| -> std::io::Result<()> {
        fs::OpenOptions::new().append(true).open(path)?.write_all(text.as_bytes())
    };
    let mut observer = |r: &crate::federation::RoundReport| -> crate::federation::Result<()> {
        // Metric rows are written once the final evaluation is known.
        let mut row = r.clone();
        row.metrics.clear();
        append(&hist_path, history_csv(&[row], false))
            .and_then(|_| append(&timing_path, format!("{},{:.3}\n", r.round, r.wall_ms)))
            .map_err(|e| FedError::Config(format!("writing history: {e}")))
    };
    let outcome = run_strategy_observed(&setup, strategy, &mut observer)?;
    // Rewrite with evaluation rows included.
    write(&hist_path, history_csv(&outcome.history, true))?;
    if let Some(theta) = &outcome.theta {
        let round = outcome.history.len();
        write(&dir.join(CHECKPOINT_FILE), checkpoint_bytes(theta, round))?;
        let sheet = probe_sheet(&setup, theta)?;
        let p = dir.join("probes.ppm");
        sheet.write(&p).map_err(|e| CliError::io(&p, e))?;
    }
    let metrics = RunMetrics {
        schema: METRICS_SCHEMA,
        strategy: strategy.to_string(),
        label: strategy.label(),
        splits: outcome.metrics.clone(),
        locals: outcome
            .locals
            .iter()
            .map(|(s, m)| LocalMetrics {
                strategy: s.to_string(),
                label: s.label(),
                splits: m.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&metrics).map_err(|e| CliError::Config(e.to_string()))?;
    write(&dir.join(METRICS_FILE), json + "\n")?;
    Ok((dir, metrics))
}

/// Evaluates a stored checkpoint on the test splits.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<SplitMetrics>> {
    let setup = build_setup(cfg)?;
    let (theta, _) = parse_checkpoint(&read(checkpoint)?).map_err(|e: WireError| CliError::io(checkpoint, e))?;
    Ok(crate::federation::evaluate_params(&setup, &theta)?)
}

pub fn load_run_metrics(run: &Path) -> Result<RunMetrics> {
    let p = run.join(METRICS_FILE);
    let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::io(&p, e))?;
    match v.get("schema").and_then(serde_json::Value::as_u64) {
        Some(s) if s == METRICS_SCHEMA as u64 => {}
        other => {
            return Err(CliError::Config(format!(
                "{}: metrics schema {:?} is not the supported version {METRICS_SCHEMA}",
                p.display(),
                other
            )))
        }
    }
    serde_json::from_value(v).map_err(|e| CliError::io(&p, e))
}

/// One comparison-table row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub strategy: String,
    pub metrics: MetricBundle,
}

fn order_of(strategy: &str) -> (usize, usize) {
    strategy.parse::<Strategy>().map_or((9, 0), |s| s.order_key())
}

/// Rows for the given runs in table order. Local models carried by a fused
/// run are listed unless a standalone run of the same client is present.
pub fn report_rows(runs: &[RunMetrics]) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = Vec::new();
    for r in runs {
        if let Some(m) = r.global() {
            rows.push(ReportRow {
                label: r.label.clone(),
                strategy: r.strategy.clone(),
                metrics: *m,
            });
        }
    }
    for r in runs {
        for l in &r.locals {
            let present = rows.iter().any(|x| x.strategy == l.strategy);
            if let (false, Some(m)) = (present, l.splits.iter().find(|s| s.split == GLOBAL_SPLIT)) {
                rows.push(ReportRow {
                    label: l.label.clone(),
                    strategy: l.strategy.clone(),
                    metrics: m.metrics,
                });
            }
        }
    }
    rows.sort_by_key(|r| order_of(&r.strategy));
    rows
}

type Column = (&'static str, fn(&MetricBundle) -> f64);

const TABLE_COLUMNS: [Column; 6] = [
    ("Rank-1", |m| m.rank1),
    ("VR1%", |m| m.vr_far1),
    ("VR0.1%", |m| m.vr_far01),
    ("Deg.(proxy)", |m| m.deg),
    ("PSNR", |m| m.psnr),
    ("SSIM", |m| m.ssim),
];

/// Fixed-width table; `*` marks the best and `+` the second best per column.
pub fn format_table(rows: &[ReportRow]) -> String {
    let mut out = format!("{:<16}", "Method");
    for (h, _) in TABLE_COLUMNS {
        out.push_str(&format!("{h:>13}"));
    }
    out.push('\n');
    let ranks: Vec<Vec<f64>> = TABLE_COLUMNS
        .iter()
        .map(|(_, f)| {
            let mut v: Vec<f64> = rows.iter().map(|r| f(&r.metrics)).collect();
            v.sort_by(|a, b| b.total_cmp(a));
            v.dedup();
            v
        })
        .collect();
    for r in rows {
        out.push_str(&format!("{:<16}", r.label));
        for (c, (_, f)) in TABLE_COLUMNS.iter().enumerate() {
            let v = f(&r.metrics);
            let mark = if ranks[c].first() == Some(&v) {
                "*"
            } else if ranks[c].get(1) == Some(&v) {
                "+"
            } else {
                " "
            };
            let digits = if c == 5 { 4 } else { 2 };
            out.push_str(&format!("{:>12.*}{mark}", digits, v));
        }
        out.push('\n');
    }
    if rows.iter().any(|r| r.metrics.far_resolution_limited) {
        out.push_str("note: too few impostor pairs to resolve FAR=0.1% exactly on at least one split\n");
    }
    out
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("label,strategy,{}\n", MetricBundle::FIELDS.join(","));
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.label, r.strategy, r.metrics.csv_values().join(",")));
    }
    out
}

pub fn parse_report_csv(text: &str) -> Option<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next()? != format!("label,strategy,{}", MetricBundle::FIELDS.join(",")) {
        return None;
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            Some(ReportRow {
                label: f.first()?.to_string(),
                strategy: f.get(1)?.to_string(),
                metrics: MetricBundle::from_csv_values(f.get(2..)?)?,
            })
        })
        .collect()
}

/// Comparison table over run directories; also writes CSV when asked.
pub fn cmd_report(runs: &[PathBuf], csv_out: Option<&Path>) -> Result<(String, Vec<ReportRow>)> {
    if runs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".into()));
    }
    let loaded = runs.iter().map(|r| load_run_metrics(r)).collect::<Result<Vec<_>>>()?;
    let rows = report_rows(&loaded);
    if let Some(p) = csv_out {
        write(p, report_csv(&rows))?;
    }
    Ok((format_table(&rows), rows))
}
