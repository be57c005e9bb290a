//! Shared fixtures for the benchmarks.

use vsim::eval::synth::{generate_synthetic, ModelShape, SyntheticData, SyntheticSpec, TruthPriors};
use vsim::nnlda::{train_nnlda, NnldaHyperparams};
use vsim::pam::{train_pam, PamHyperparams, PamTrainConfig};
use vsim::rng::seeded;
use vsim::{NnldaModel, PamModel};

pub const SHAPE: ModelShape = ModelShape {
    num_super: 5,
    num_sub: 10,
    num_topics: 10,
    num_labels: 40,
};

pub fn corpus(train_docs: usize, test_docs: usize) -> SyntheticData {
    let spec = SyntheticSpec::random(SHAPE, &TruthPriors::default(), train_docs, test_docs, 17);
    generate_synthetic(&spec).expect("valid synthetic spec")
}

pub fn pam_hyper() -> PamHyperparams {
    PamHyperparams::new(SHAPE.num_super, SHAPE.num_sub, 1.0, 0.01)
}

pub fn nnlda_hyper() -> NnldaHyperparams {
    NnldaHyperparams::new(SHAPE.num_topics, 0.1, 0.01)
}

/// Models trained briefly on `data.train`.
pub fn models(data: &SyntheticData) -> (PamModel, NnldaModel) {
    let cfg = PamTrainConfig {
        iters: 50,
        ..PamTrainConfig::default()
    };
    let pam = train_pam(&data.train, pam_hyper(), &cfg, &mut seeded(1)).expect("trains");
    let nn = train_nnlda(&data.train, nnlda_hyper(), 50, &mut seeded(2)).expect("trains");
    (pam, nn)
}
