//! Sequential recommendation as conditional language modeling over item text.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod mitp;
pub mod model;
pub mod pipeline;
pub mod rank;
pub mod seed;
pub mod textualize;
pub mod tokenizer;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil {
    use crate::corpus::{generate_synthetic, SyntheticConfig};
    use crate::corpus::Dataset;
    use crate::model::{Model, ModelConfig};
    use crate::textualize::{default_config, vocabulary_texts, Stage};
    use crate::tokenizer::Vocabulary;

    pub fn small_corpus(seed: u64) -> Dataset {
        let cfg = SyntheticConfig {
            n_domains: 2,
            n_users: 120,
            n_items_per_domain: 150,
            n_clusters_per_domain: 4,
            seq_len_min: 5,
            seq_len_max: 8,
            seed,
            ..SyntheticConfig::default()
        };
        generate_synthetic(&cfg).unwrap().dataset().unwrap()
    }

    pub fn vocab(ds: &Dataset) -> Vocabulary {
        let (pre, fine) = (default_config(Stage::Pretrain), default_config(Stage::Finetune));
        Vocabulary::build(&vocabulary_texts(&ds.catalog, &[&pre, &fine]), 1, 5000).unwrap()
    }

    pub fn tiny_model(vocab: &Vocabulary, seed: u64) -> Model<f32> {
        Model::init(ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: vocab.len(),
            max_positions: 512,
            dropout_rate: 0.0,
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }
}
