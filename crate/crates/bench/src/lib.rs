//! Fixtures shared by the benchmarks.

use bimii_core::config::RunConfig;
use bimii_core::data::{gen_synthetic_set, make_batch, Batch};
use bimii_core::{BimiiNet, NamedTensorSet, Result};

pub struct Fixture {
    pub cfg: RunConfig,
    pub net: BimiiNet,
    pub store: NamedTensorSet<f32>,
    pub batch: Batch<f32>,
}

/// Default tiny model with a batch of `batch` synthetic scenes.
pub fn fixture(batch: usize) -> Result<Fixture> {
    let cfg = RunConfig::default();
    let net = BimiiNet::new(cfg.model.clone())?;
    let store = net.init::<f32>(cfg.seed);
    let samples = gen_synthetic_set(0, batch, &cfg.synth())?;
    let batch = make_batch(&samples.iter().collect::<Vec<_>>())?;
    Ok(Fixture { cfg, net, store, batch })
}
