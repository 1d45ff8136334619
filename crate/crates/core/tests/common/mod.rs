#![allow(dead_code)]

use pcsa_core::config::RunConfig;
use pcsa_core::data::{gen_pair, VolumePair};
use pcsa_core::losses::LossWeights;
use pcsa_core::net::DiscriminatorConfig;
use pcsa_core::selfcheck::reduced_generator_config;

/// Reduced networks on 8^3 volumes: every block type, a fraction of the cost.
pub fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.generator = reduced_generator_config();
    cfg.discriminator = DiscriminatorConfig { channel_ladder: vec![2, 4, 8], ..DiscriminatorConfig::default() };
    cfg.data.edge = 8;
    cfg.train.batch_size = 2;
    cfg
}

pub fn l1_only(mut cfg: RunConfig) -> RunConfig {
    cfg.loss_weights = LossWeights::new(0.0, 1.0, 0.0);
    cfg
}

pub fn pairs(cfg: &RunConfig, first_seed: u64, n: usize) -> Vec<VolumePair> {
    (0..n as u64).map(|i| gen_pair(&cfg.data.spec(), first_seed + i).unwrap()).collect()
}
