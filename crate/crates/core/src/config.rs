//! Experiment configuration: a flat `key = value` text format grouped under
//! `[section]` headers.
//!
//! ```text
//! # comment
//! [federation]
//! rounds = 40
//! local_steps = 50
//! ```
//!
//! Keys are unique across sections, so a section header only groups keys for
//! readers; `rounds = 40` means the same under any header. Unknown keys are
//! errors. Every key can also be set from the command line as `--key value`
//! (dashes and underscores are interchangeable), and `VPFL_SEED` overrides
//! `seed`.

use std::path::PathBuf;

use crate::data::{CorpusSpec, DatasetSpec};
use crate::federation::{FedConfig, Strategy, Transport};
use crate::model::{ArchConfig, PretrainConfig};

pub const SEED_ENV: &str = "VPFL_SEED";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: expected {expected}")]
    Value {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

/// (section, key, help) for every accepted key, in file order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("run", "seed", "master seed (partitioning, initialisation, batches, prior)"),
    ("run", "out_dir", "output root"),
    ("run", "strategy", "vpfl | fedavg | fedprox | centralized | fused | local_only"),
    ("run", "client", "client index for local_only"),
    ("corpus", "corpus_seed", "seed of the procedural faces"),
    ("corpus", "hard_train_identities", "style-A training identities"),
    ("corpus", "hard_test_identities", "style-A held-out identities"),
    ("corpus", "hard_variations", "captures per style-A identity"),
    ("corpus", "easy_train_identities", "style-B training identities"),
    ("corpus", "easy_test_identities", "style-B held-out identities"),
    ("corpus", "easy_variations", "captures per style-B identity"),
    ("corpus", "clients_per_dataset", "shards per dataset"),
    ("corpus", "alpha", "Dirichlet concentration"),
    ("model", "base_width", "channels of the finest encoder level"),
    ("model", "max_width", "channel cap"),
    ("model", "style_dim", "style code length"),
    ("model", "mlp_layers", "style MLP depth"),
    ("model", "disc_width", "discriminator base channels"),
    ("model", "embed_width", "fixed embedder base channels"),
    ("model", "encoder_stages", "stride-2 encoder stages"),
    ("model", "decoder_stages", "prior decoder stages"),
    ("model", "msca", "multi-scale context aggregation on/off"),
    ("model", "vp", "frozen pretrained prior on/off (off trains the decoder)"),
    ("loss", "lambda_a", "adversarial weight"),
    ("loss", "lambda_b", "perceptual weight"),
    ("loss", "lambda_c", "identity weight"),
    ("loss", "lambda_d", "latent proximity weight"),
    ("federation", "rounds", "communication rounds"),
    ("federation", "local_steps", "local steps per round"),
    ("federation", "batch_size", "training batch size"),
    ("federation", "mu", "FedProx proximal weight"),
    ("federation", "weighted_aggregation", "weight uploads by shard size"),
    ("federation", "aggregate_discriminator", "average discriminators too"),
    ("federation", "parallel", "train clients concurrently"),
    ("federation", "transport", "inprocess | loopback"),
    ("federation", "eval_every", "evaluate every N rounds (0: last only)"),
    ("optim", "learning_rate", "initial Adam learning rate"),
    ("optim", "late_learning_rate", "learning rate after decay"),
    ("optim", "decay_at", "fraction of steps before the decay"),
    ("prior", "prior_steps", "prior pretraining steps"),
    ("prior", "prior_batch_size", "prior pretraining batch size"),
    ("prior", "prior_learning_rate", "prior pretraining learning rate"),
    ("prior", "prior_diversity", "weight of the prior's mode-seeking term"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub strategy: Strategy,
    /// Client trained by `local_only`.
    pub client: usize,
    pub corpus: CorpusSpec,
    pub clients_per_dataset: usize,
    pub alpha: f64,
    pub arch: ArchConfig,
    pub msca_on: bool,
    pub vp_on: bool,
    pub fed: FedConfig,
    pub prior: PretrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let seed = 1;
        ExperimentConfig {
            seed,
            out_dir: PathBuf::from("vpfl_out"),
            strategy: Strategy::Vpfl,
            client: 0,
            corpus: CorpusSpec::default(),
            clients_per_dataset: 4,
            alpha: 0.3,
            arch: ArchConfig::default(),
            msca_on: true,
            vp_on: true,
            fed: FedConfig {
                seed,
                ..FedConfig::default()
            },
            prior: PretrainConfig {
                seed,
                ..PretrainConfig::default()
            },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        expected,
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.into(),
            value: value.into(),
            expected: "a boolean",
        }),
    }
}

/// Normalises `--lambda-d` / `lambda-d` / `loss.lambda_d` to `lambda_d`.
pub fn normalize_key(raw: &str) -> String {
    let k = raw.trim_start_matches('-').replace('-', "_");
    match k.split_once('.') {
        Some((_, rest)) => rest.to_string(),
        None => k,
    }
}

impl ExperimentConfig {
    fn dataset(&mut self, idx: usize) -> &mut DatasetSpec {
        &mut self.corpus.datasets[idx]
    }

    pub fn set(&mut self, raw_key: &str, value: &str) -> Result<()> {
        let key = normalize_key(raw_key);
        let k = key.as_str();
        let v = value.trim();
        let uint = "a non-negative integer";
        let num = "a number";
        match k {
            "seed" => {
                self.seed = parse(k, v, uint)?;
                self.fed.seed = self.seed;
                self.prior.seed = self.seed;
            }
            "out_dir" => self.out_dir = PathBuf::from(v),
            "strategy" => {
                self.strategy = v.parse().map_err(|_| ConfigError::Value {
                    key: k.into(),
                    value: v.into(),
                    expected: "a strategy name",
                })?;
                if let Strategy::LocalOnly(c) = self.strategy {
                    if v != "local_only" {
                        self.client = c;
                    }
                }
            }
            "client" => self.client = parse(k, v, uint)?,
            "corpus_seed" => self.corpus.seed = parse(k, v, uint)?,
            "hard_train_identities" => self.dataset(0).train_identities = parse(k, v, uint)?,
            "hard_test_identities" => self.dataset(0).test_identities = parse(k, v, uint)?,
            "hard_variations" => self.dataset(0).variations = parse(k, v, uint)?,
            "easy_train_identities" => self.dataset(1).train_identities = parse(k, v, uint)?,
            "easy_test_identities" => self.dataset(1).test_identities = parse(k, v, uint)?,
            "easy_variations" => self.dataset(1).variations = parse(k, v, uint)?,
            "clients_per_dataset" => self.clients_per_dataset = parse(k, v, uint)?,
            "alpha" => self.alpha = parse(k, v, num)?,
            "base_width" => self.arch.base_width = parse(k, v, uint)?,
            "max_width" => self.arch.max_width = parse(k, v, uint)?,
            "style_dim" => self.arch.style_dim = parse(k, v, uint)?,
            "mlp_layers" => self.arch.mlp_layers = parse(k, v, uint)?,
            "disc_width" => self.arch.disc_width = parse(k, v, uint)?,
            "embed_width" => self.arch.embed_width = parse(k, v, uint)?,
            "encoder_stages" => self.arch.encoder_stages = parse(k, v, uint)?,
            "decoder_stages" => self.arch.decoder_stages = parse(k, v, uint)?,
            "msca" => self.msca_on = parse_bool(k, v)?,
            "vp" => self.vp_on = parse_bool(k, v)?,
            "lambda_a" => self.fed.weights.lambda_a = parse(k, v, num)?,
            "lambda_b" => self.fed.weights.lambda_b = parse(k, v, num)?,
            "lambda_c" => self.fed.weights.lambda_c = parse(k, v, num)?,
            "lambda_d" => self.fed.weights.lambda_d = parse(k, v, num)?,
            "rounds" => self.fed.rounds = parse(k, v, uint)?,
            "local_steps" => self.fed.local_steps = parse(k, v, uint)?,
            "batch_size" => self.fed.batch_size = parse(k, v, uint)?,
            "mu" => self.fed.mu = parse(k, v, num)?,
            "weighted_aggregation" => self.fed.weighted_aggregation = parse_bool(k, v)?,
            "aggregate_discriminator" => self.fed.aggregate_discriminator = parse_bool(k, v)?,
            "parallel" => self.fed.parallel = parse_bool(k, v)?,
            "transport" => {
                self.fed.transport = match v {
                    "inprocess" => Transport::InProcess,
                    "loopback" => Transport::Loopback,
                    _ => {
                        return Err(ConfigError::Value {
                            key: k.into(),
                            value: v.into(),
                            expected: "inprocess or loopback",
                        })
                    }
                }
            }
            "eval_every" => self.fed.eval_every = parse(k, v, uint)?,
            "learning_rate" => self.fed.learning_rate = parse(k, v, num)?,
            "late_learning_rate" => self.fed.late_learning_rate = parse(k, v, num)?,
            "decay_at" => self.fed.decay_at = parse(k, v, num)?,
            "prior_steps" | "steps" => self.prior.steps = parse(k, v, uint)?,
            "prior_batch_size" => self.prior.batch_size = parse(k, v, uint)?,
            "prior_learning_rate" => self.prior.learning_rate = parse(k, v, num)?,
            "prior_diversity" => self.prior.diversity_weight = parse(k, v, num)?,
            _ => return Err(ConfigError::UnknownKey(raw_key.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let d = |i: usize| &self.corpus.datasets[i];
        let f = &self.fed;
        Some(match key {
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "strategy" => match self.strategy {
                Strategy::LocalOnly(_) => "local_only".into(),
                s => s.to_string(),
            },
            "client" => self.client.to_string(),
            "corpus_seed" => self.corpus.seed.to_string(),
            "hard_train_identities" => d(0).train_identities.to_string(),
            "hard_test_identities" => d(0).test_identities.to_string(),
            "hard_variations" => d(0).variations.to_string(),
            "easy_train_identities" => d(1).train_identities.to_string(),
            "easy_test_identities" => d(1).test_identities.to_string(),
            "easy_variations" => d(1).variations.to_string(),
            "clients_per_dataset" => self.clients_per_dataset.to_string(),
            "alpha" => self.alpha.to_string(),
            "base_width" => self.arch.base_width.to_string(),
            "max_width" => self.arch.max_width.to_string(),
            "style_dim" => self.arch.style_dim.to_string(),
            "mlp_layers" => self.arch.mlp_layers.to_string(),
            "disc_width" => self.arch.disc_width.to_string(),
            "embed_width" => self.arch.embed_width.to_string(),
            "encoder_stages" => self.arch.encoder_stages.to_string(),
            "decoder_stages" => self.arch.decoder_stages.to_string(),
            "msca" => self.msca_on.to_string(),
            "vp" => self.vp_on.to_string(),
            "lambda_a" => f.weights.lambda_a.to_string(),
            "lambda_b" => f.weights.lambda_b.to_string(),
            "lambda_c" => f.weights.lambda_c.to_string(),
            "lambda_d" => f.weights.lambda_d.to_string(),
            "rounds" => f.rounds.to_string(),
            "local_steps" => f.local_steps.to_string(),
            "batch_size" => f.batch_size.to_string(),
            "mu" => f.mu.to_string(),
            "weighted_aggregation" => f.weighted_aggregation.to_string(),
            "aggregate_discriminator" => f.aggregate_discriminator.to_string(),
            "parallel" => f.parallel.to_string(),
            "transport" => match f.transport {
                Transport::InProcess => "inprocess".into(),
                Transport::Loopback => "loopback".into(),
            },
            "eval_every" => f.eval_every.to_string(),
            "learning_rate" => f.learning_rate.to_string(),
            "late_learning_rate" => f.late_learning_rate.to_string(),
            "decay_at" => f.decay_at.to_string(),
            "prior_steps" => self.prior.steps.to_string(),
            "prior_batch_size" => self.prior.batch_size.to_string(),
            "prior_learning_rate" => self.prior.learning_rate.to_string(),
            "prior_diversity" => self.prior.diversity_weight.to_string(),
            _ => return None,
        })
    }

    /// Applies a config file's contents on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') {
                let ok = line.ends_with(']') && KEYS.iter().any(|(s, _, _)| *s == &line[1..line.len() - 1]);
                if !ok {
                    return Err(ConfigError::Syntax {
                        line: i + 1,
                        msg: format!("unknown section header `{line}`"),
                    });
                }
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            self.set(k.trim(), v).map_err(|e| ConfigError::Syntax {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Honours `VPFL_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => self.set("seed", &v),
            Err(_) => Ok(()),
        }
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (s, k, help) in KEYS {
            if *s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{s}]\n"));
                section = s;
            }
            out.push_str(&format!("# {help}\n{k} = {}\n", self.get(k).expect("listed key")));
        }
        out
    }

    /// The strategy with `client` filled in for `local_only`.
    pub fn resolved_strategy(&self) -> Strategy {
        match self.strategy {
            Strategy::LocalOnly(_) => Strategy::LocalOnly(self.client),
            s => s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.arch.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.fed.validate() {
            return bad(e.to_string());
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.clients_per_dataset == 0 {
            return bad("clients_per_dataset must be at least 1".into());
        }
        if let Strategy::LocalOnly(c) = self.resolved_strategy() {
            let k = self.clients_per_dataset * self.corpus.datasets.len();
            if c >= k {
                return bad(format!("client {c} out of range for {k} clients"));
            }
        }
        Ok(())
    }
}
