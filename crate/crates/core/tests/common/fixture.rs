//! Small corpora and setups shared by the integration tests.

use vpfl::data::{build_corpus, partition_corpus, Corpus, CorpusSpec, DatasetSpec};
use vpfl::federation::{FedConfig, FedSetup};
use vpfl::losses::FixedEmbedder;
use vpfl::model::{ArchConfig, Generator, PriorDecoder};

pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        base_width: 4,
        max_width: 4,
        style_dim: 4,
        disc_width: 2,
        embed_width: 2,
        ..ArchConfig::compact()
    }
}

pub fn tiny_corpus(seed: u64) -> Corpus {
    let mut hard = DatasetSpec::hard();
    hard.train_identities = 4;
    hard.test_identities = 2;
    hard.variations = 3;
    let mut easy = DatasetSpec::easy();
    easy.train_identities = 4;
    easy.test_identities = 2;
    easy.variations = 3;
    build_corpus(&CorpusSpec {
        seed,
        datasets: vec![hard, easy],
    })
    .unwrap()
}

/// `clients_per_dataset`×2 clients over a tiny corpus, random frozen prior.
pub fn tiny_setup(clients_per_dataset: usize, cfg: FedConfig) -> FedSetup {
    let corpus = tiny_corpus(11);
    let arch = tiny_arch();
    let gen = Generator::new(arch.clone(), true).unwrap();
    let prior = PriorDecoder::random(&gen, 3, true).unwrap();
    FedSetup {
        embedder: FixedEmbedder::new(&arch).unwrap(),
        prior: Some(prior),
        gen,
        shards: partition_corpus(&corpus, clients_per_dataset, 0.3, 5).unwrap(),
        tests: corpus.tests,
        cfg,
    }
}

pub fn short_cfg(rounds: usize, local_steps: usize) -> FedConfig {
    FedConfig {
        rounds,
        local_steps,
        batch_size: 2,
        eval_every: 0,
        parallel: false,
        ..FedConfig::default()
    }
}
