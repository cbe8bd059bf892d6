//! Shared fixtures for the benchmarks: a synthetic network, its dataset and
//! a model sized by the caller.

use dgcrn_core::data::{synth_generate, Dataset, RoadNetwork, SplitPolicy, SynthConfig};
use dgcrn_core::graph::{build_adjacency, StaticGraph};
use dgcrn_core::model::{Batch, Model, ModelConfig};
use dgcrn_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub model: Model,
    pub data: Dataset,
    pub graph: StaticGraph,
    pub batch: Batch,
}

/// `n` sensors over 8 days, a model of width `hidden` and embedding size
/// `emb`, and one training batch of `batch` windows.
pub fn fixture(n: usize, hidden: usize, emb: usize, batch: usize) -> Result<Fixture> {
    let net = RoadNetwork::generate(n, 1)?;
    let synth = SynthConfig {
        n_nodes: n,
        n_days: 8,
        ..SynthConfig::default()
    };
    let data = Dataset::prepare(synth_generate(&net, &synth, 1)?, &SplitPolicy::default(), 12, 12)?;
    let graph = build_adjacency(&net.distances(), 0.1)?;
    let config = ModelConfig {
        hidden_dim: hidden,
        emb_dim: emb,
        hyper_dim: emb.min(16),
        ..ModelConfig::default()
    };
    let model = Model::new(config, n, &mut ChaCha8Rng::seed_from_u64(0))?;
    let starts: Vec<usize> = data.windows(dgcrn_core::data::Split::Train).into_iter().take(batch).collect();
    let batch = data.batch(&starts);
    Ok(Fixture {
        model,
        data,
        graph,
        batch,
    })
}
