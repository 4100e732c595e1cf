//! Decentralized learning with stubborn agents: topologies, logistic
//! objectives, synthetic and MNIST data, the DGD family of iterates, and
//! fixed-point / bound analysis.

pub mod analysis;
pub mod config;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod objectives;
pub mod problem;
pub mod rng;
pub mod topology;

pub use engine::{
    AlgoState, Algorithm, AttackConfig, EarlyStopParams, EarlyStopState, MetricsTrace, SimulationSetup,
    StubbornnessProfile,
};
pub use analysis::{FixedPointReport, HeterogeneityReport, RateCertificate, TraceSummary};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use experiment::{run_experiment, Experiment};
pub use objectives::{AgentDataset, ConvexityConstants, Logistic, Objective, ParamBlock, Quadratic, Task};
pub use topology::{Graph, MixingMatrix};
