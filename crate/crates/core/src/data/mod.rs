//! Procedurally generated paired visible/thermal corpus, its identity-disjoint
//! train/test split, the Dirichlet client partitioner and the on-disk shard
//! format.

mod partition;
mod render;
mod shard;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use partition::{dirichlet_partition, dirichlet_proportions, partition_corpus, MAX_REDRAWS};
pub use render::{
    degrade, heat, render_pair, render_visible, IdentitySpec, VariationRange, THERMAL_NOISE_SIGMA,
};
pub(crate) use render::stream;
pub use shard::{decode_shard, encode_shard, read_manifest, read_shard, write_manifest, write_shard, ManifestEntry, SHARD_MAGIC, SHARD_VERSION};

use crate::tensor::Tensor;

pub const VISIBLE_SIZE: usize = 64;
pub const THERMAL_SIZE: usize = 32;
pub const VISIBLE_LEN: usize = 3 * VISIBLE_SIZE * VISIBLE_SIZE;
pub const THERMAL_LEN: usize = THERMAL_SIZE * THERMAL_SIZE;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {detail}")]
    Format { path: String, detail: String },
}

/// Acquisition style of a dataset (palette and variation family).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StyleTag {
    A,
    B,
}

impl StyleTag {
    pub fn as_u8(self) -> u8 {
        match self {
            StyleTag::A => 0,
            StyleTag::B => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<StyleTag> {
        match v {
            0 => Some(StyleTag::A),
            1 => Some(StyleTag::B),
            _ => None,
        }
    }
}

impl fmt::Display for StyleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StyleTag::A => "A",
            StyleTag::B => "B",
        })
    }
}

impl std::str::FromStr for StyleTag {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "A" | "a" => Ok(StyleTag::A),
            "B" | "b" => Ok(StyleTag::B),
            _ => Err(DataError::Config(format!("unknown style `{s}`"))),
        }
    }
}

/// One capture: visible [3,64,64] and thermal [1,32,32], both in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub visible: Vec<f32>,
    pub thermal: Vec<f32>,
    pub identity_id: u32,
    pub variation_id: u16,
    pub style: StyleTag,
}

/// Stacks samples into (thermal [N,1,32,32], visible [N,3,64,64]) tensors.
pub fn batch_tensors(samples: &[&PairedSample]) -> (Tensor, Tensor) {
    let n = samples.len();
    let mut th = Vec::with_capacity(n * THERMAL_LEN);
    let mut vis = Vec::with_capacity(n * VISIBLE_LEN);
    for s in samples {
        th.extend(s.thermal.iter().map(|&v| v as f64));
        vis.extend(s.visible.iter().map(|&v| v as f64));
    }
    (
        Tensor::new(&[n, 1, THERMAL_SIZE, THERMAL_SIZE], th).expect("thermal batch"),
        Tensor::new(&[n, 3, VISIBLE_SIZE, VISIBLE_SIZE], vis).expect("visible batch"),
    )
}

/// One client's training data. Samples are shared, never copied.
#[derive(Debug, Clone)]
pub struct DatasetShard {
    pub client_id: usize,
    pub style: StyleTag,
    pub samples: Vec<Arc<PairedSample>>,
}

impl DatasetShard {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn identity_histogram(&self) -> BTreeMap<u32, usize> {
        let mut h = BTreeMap::new();
        for s in &self.samples {
            *h.entry(s.identity_id).or_insert(0) += 1;
        }
        h
    }

    /// Union of several shards, in the given order.
    pub fn union(client_id: usize, shards: &[DatasetShard]) -> DatasetShard {
        DatasetShard {
            client_id,
            style: shards.first().map_or(StyleTag::A, |s| s.style),
            samples: shards.iter().flat_map(|s| s.samples.iter().cloned()).collect(),
        }
    }
}

/// Parameters of one source dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub style: StyleTag,
    pub train_identities: u32,
    pub test_identities: u32,
    pub variations: u16,
    pub range: VariationRange,
}

impl DatasetSpec {
    /// Few subjects, many strongly varying captures each.
    pub fn hard() -> Self {
        DatasetSpec {
            name: "split1".into(),
            style: StyleTag::A,
            train_identities: 40,
            test_identities: 10,
            variations: 21,
            range: VariationRange::HARD,
        }
    }

    /// Many subjects, mild variation.
    pub fn easy() -> Self {
        DatasetSpec {
            name: "split2".into(),
            style: StyleTag::B,
            train_identities: 160,
            test_identities: 20,
            variations: 20,
            range: VariationRange::EASY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub datasets: Vec<DatasetSpec>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 2024,
            datasets: vec![DatasetSpec::hard(), DatasetSpec::easy()],
        }
    }
}

/// Held-out identities of one dataset.
#[derive(Debug, Clone)]
pub struct TestSplit {
    pub name: String,
    pub style: StyleTag,
    pub samples: Vec<Arc<PairedSample>>,
}

/// Training samples grouped per source dataset plus one test split each.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Vec<Arc<PairedSample>>>,
    pub tests: Vec<TestSplit>,
}

impl Corpus {
    pub fn train_len(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    pub fn all_train(&self) -> impl Iterator<Item = &Arc<PairedSample>> {
        self.train.iter().flatten()
    }
}

/// Renders every dataset. Identity ids are allocated consecutively across
/// datasets; within a dataset the first `train_identities` ids train and the
/// rest are held out.
pub fn build_corpus(spec: &CorpusSpec) -> Result<Corpus, DataError> {
    if spec.datasets.is_empty() {
        return Err(DataError::Config("corpus needs at least one dataset".into()));
    }
    let mut next_id = 0u32;
    let mut train = Vec::new();
    let mut tests = Vec::new();
    for ds in &spec.datasets {
        if ds.train_identities == 0 || ds.test_identities == 0 || ds.variations == 0 {
            return Err(DataError::Config(format!(
                "dataset {}: train/test identity counts and variations must be positive",
                ds.name
            )));
        }
        let total = ds.train_identities + ds.test_identities;
        let mut tr = Vec::with_capacity((ds.train_identities as usize) * ds.variations as usize);
        let mut te = Vec::with_capacity((ds.test_identities as usize) * ds.variations as usize);
        for k in 0..total {
            let id = next_id + k;
            let ident = IdentitySpec::generate(spec.seed, id, ds.style);
            for v in 0..ds.variations {
                let s = Arc::new(render_pair(&ident, v, &ds.range, spec.seed)?);
                if k < ds.train_identities {
                    tr.push(s);
                } else {
                    te.push(s);
                }
            }
        }
        next_id += total;
        train.push(tr);
        tests.push(TestSplit {
            name: ds.name.clone(),
            style: ds.style,
            samples: te,
        });
    }
    Ok(Corpus { train, tests })
}
