//! Shared fixtures for the criterion benches.

use fjdgd_core::datagen::{gen_synthetic_federated, AgentSplit, HeterogeneityParams};
use fjdgd_core::topology::{build_ring, metropolis_weights};
use fjdgd_core::{Algorithm, AlgoState, MixingMatrix, ParamBlock};

/// Ring of `n` agents with synthetic binary data of dimension `dim`.
pub struct Fixture {
    pub splits: Vec<AgentSplit>,
    pub mixing: MixingMatrix,
    pub gamma: f64,
}

impl Fixture {
    pub fn synthetic(n: usize, dim: usize, samples: usize) -> Self {
        let params = HeterogeneityParams::new(1.0, 1.0).expect("valid heterogeneity");
        let splits = gen_synthetic_federated(n, dim, samples, 10, params, 7).expect("synthetic data");
        let mixing = metropolis_weights(&build_ring(n).expect("ring")).expect("weights");
        Self {
            splits,
            mixing,
            gamma: 0.01,
        }
    }

    pub fn objectives(&self) -> Vec<fjdgd_core::Logistic<'_>> {
        self.splits
            .iter()
            .map(|s| fjdgd_core::Logistic::new(&s.train, self.gamma))
            .collect()
    }

    pub fn initial_state(&self, algorithm: Algorithm) -> AlgoState {
        let dim = self.splits[0].train.dim();
        AlgoState::new(algorithm, vec![ParamBlock::zeros(dim, 1); self.splits.len()])
    }
}
