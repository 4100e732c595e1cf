//! Turns an [`ExperimentConfig`] into a runnable experiment.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::analysis::{convergence_rate, fixed_point_report, FixedPointReport, RateCertificate};
use crate::config::{AlphaSpec, DataSpec, ExperimentConfig, InitSpec, MaliciousSpec, TopologySpec};
use crate::datagen::{gen_2d_linear, gen_synthetic_federated, load_mnist, partition_mnist, HeterogeneityParams, PartitionSpec};
use crate::engine::{simulate, AlgoState, Algorithm, AttackConfig, MetricsTrace, SimulationOutput, SimulationSetup, StubbornnessProfile};
use crate::error::{Error, Result};
use crate::objectives::{ConvexityConstants, ParamBlock, Quadratic};
use crate::problem::{LearningProblem, QuadraticProblem};
use crate::rng;
use crate::topology::{build_circulant, build_random_geometric, build_ring, metropolis_weights, min_eigenvalue, Graph, MixingMatrix};

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";

pub fn build_graph(spec: &TopologySpec) -> Result<Graph> {
    match *spec {
        TopologySpec::Ring { agents } => build_ring(agents),
        TopologySpec::Circulant { agents, half_width } => build_circulant(agents, half_width),
        TopologySpec::RandomGeometric { agents, radius, seed } => build_random_geometric(agents, radius, seed),
    }
}

/// The agents' local problems.
#[derive(Debug, Clone)]
pub enum Workload {
    Learning(LearningProblem),
    Quadratic(QuadraticProblem),
}

impl Workload {
    pub fn constants(&self) -> Result<Vec<ConvexityConstants>> {
        match self {
            Workload::Learning(p) => p.constants(),
            Workload::Quadratic(p) => p.constants(),
        }
    }

    pub fn param_shape(&self) -> (usize, usize) {
        match self {
            Workload::Learning(p) => p.param_shape(),
            Workload::Quadratic(p) => (p.quadratics[0].center.len(), 1),
        }
    }
}

fn random_quadratics(n_agents: usize, dim: usize, h_min: f64, h_max: f64, center_std: f64, seed: u64) -> Result<Vec<Quadratic>> {
    let centers = Normal::new(0.0, center_std).map_err(|e| Error::Config(e.to_string()))?;
    (0..n_agents)
        .map(|agent| {
            let mut r = rng::stream(seed, &[rng::TAG_DATA, agent as u64]);
            let curvature = (0..dim)
                .map(|_| if h_max > h_min { r.gen_range(h_min..=h_max) } else { h_min })
                .collect();
            let center = (0..dim).map(|_| centers.sample(&mut r)).collect();
            Quadratic::new(curvature, center)
        })
        .collect()
}

/// Where MNIST lives: the config's `mnist_dir`, or the fallback supplied by
/// the caller (typically from the environment).
pub fn resolve_mnist_dir(cfg: &ExperimentConfig, fallback: Option<&Path>) -> Option<PathBuf> {
    match &cfg.data {
        DataSpec::Mnist { dir: Some(d), .. } => Some(PathBuf::from(d)),
        _ => fallback.map(Path::to_path_buf),
    }
}

pub fn build_workload(cfg: &ExperimentConfig, mnist_dir: Option<&Path>) -> Result<Workload> {
    let n = cfg.topology.agents();
    let seed = cfg.seeds.data;
    let splits = match &cfg.data {
        DataSpec::SyntheticFederated {
            dim,
            train,
            test,
            het_alpha,
            het_beta,
        } => gen_synthetic_federated(n, *dim, *train, *test, HeterogeneityParams::new(*het_alpha, *het_beta)?, seed)?,
        DataSpec::Linear2d {
            theta,
            train,
            test,
            noise_var,
        } => gen_2d_linear(n, *theta, *train, *test, *noise_var, seed)?,
        DataSpec::Mnist {
            partition,
            samples_per_agent,
            train_fraction,
            ..
        } => {
            let dir = resolve_mnist_dir(cfg, mnist_dir).ok_or_else(|| {
                Error::Config("MNIST data needs `mnist_dir` in [data] or a directory from the environment".into())
            })?;
            let full = load_mnist(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS))?;
            partition_mnist(
                &full,
                n,
                PartitionSpec {
                    mode: *partition,
                    samples_per_agent: *samples_per_agent,
                    train_fraction: *train_fraction,
                    seed,
                },
            )?
        }
        DataSpec::Quadratic {
            dim,
            curvature_min,
            curvature_max,
            center_std,
        } => {
            let qs = random_quadratics(n, *dim, *curvature_min, *curvature_max, *center_std, seed)?;
            return Ok(Workload::Quadratic(QuadraticProblem::new(qs)?));
        }
    };
    Ok(Workload::Learning(LearningProblem::new(splits, cfg.gamma, cfg.global_loss_subset, seed)?))
}

/// Initial iterate per agent.
pub fn initial_point(init: InitSpec, n_agents: usize, shape: (usize, usize), seed: u64) -> Vec<ParamBlock> {
    (0..n_agents)
        .map(|agent| match init {
            InitSpec::Zeros => ParamBlock::zeros(shape.0, shape.1),
            InitSpec::Gaussian { std } => {
                let dist = Normal::new(0.0, std).expect("validated std");
                let mut r = rng::stream(seed, &[rng::TAG_INIT, agent as u64]);
                let mut b = ParamBlock::zeros(shape.0, shape.1);
                b.0.mapv_inplace(|_| dist.sample(&mut r));
                b
            }
        })
        .collect()
}

pub fn malicious_agents(spec: &MaliciousSpec, n_agents: usize, seed: u64) -> Vec<usize> {
    let mut ids = match spec {
        MaliciousSpec::Agents(ids) => ids.clone(),
        MaliciousSpec::Count(c) => index::sample(&mut rng::stream(seed, &[rng::TAG_ATTACK]), n_agents, *c).into_vec(),
    };
    ids.sort_unstable();
    ids
}

/// A fully materialized experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub graph: Graph,
    pub mixing: MixingMatrix,
    pub workload: Workload,
    pub constants: Vec<ConvexityConstants>,
    pub certificate: RateCertificate,
    pub setup: SimulationSetup,
    pub x0: Vec<ParamBlock>,
}

impl Experiment {
    pub fn prepare(cfg: &ExperimentConfig, mnist_dir: Option<&Path>) -> Result<Self> {
        let graph = build_graph(&cfg.topology)?;
        let mixing = metropolis_weights(&graph)?;
        let n = graph.n_agents();
        let workload = build_workload(cfg, mnist_dir)?;
        let constants = workload.constants()?;
        let envelope = ConvexityConstants::envelope(&constants)?;
        let lambda_min = min_eigenvalue(mixing.as_dense())?;
        let alpha = match cfg.alpha {
            AlphaSpec::Auto => 1.0 / envelope.big_l,
            AlphaSpec::Safe => (1.0f64).min((1.0 + lambda_min) / 2.0) / envelope.big_l,
            AlphaSpec::Value(a) => a,
        };
        let certificate = convergence_rate(alpha, envelope, lambda_min);
        let lambdas = match &cfg.lambda {
            Some(spec) => StubbornnessProfile::new(spec.resolve(n)?)?,
            None => StubbornnessProfile::uniform(n, 0.0)?,
        };
        let attack = cfg.attack.as_ref().map(|a| AttackConfig {
            malicious: malicious_agents(&a.malicious, n, cfg.seeds.attack),
            eta: a.eta,
            kappa: a.kappa,
            seed: cfg.seeds.attack,
            clip: a.clip,
        });
        let setup = SimulationSetup {
            algorithm: cfg.algorithm,
            mixing: mixing.clone(),
            alpha,
            lambdas,
            iterations: cfg.iterations,
            attack,
            update_noise_std: cfg.update_noise_std,
            noise_seed: cfg.seeds.noise,
            early_stopping: cfg.early_stopping,
            record_every: cfg.record_every,
        };
        let x0 = initial_point(cfg.init, n, workload.param_shape(), cfg.seeds.init);
        Ok(Self {
            config: cfg.clone(),
            graph,
            mixing,
            workload,
            constants,
            certificate,
            setup,
            x0,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.graph.n_agents()
    }

    pub fn run(&self) -> Result<SimulationOutput> {
        self.run_observed(|_, _| {})
    }

    pub fn run_observed<F: FnMut(&AlgoState, f64)>(&self, observer: F) -> Result<SimulationOutput> {
        match &self.workload {
            Workload::Learning(p) => simulate(&p.objectives(), p, &self.setup, self.x0.clone(), observer),
            Workload::Quadratic(p) => simulate(&p.quadratics, p, &self.setup, self.x0.clone(), observer),
        }
    }

    /// Stubbornness seen by the theory: configured values for the stubborn
    /// variants (zero for malicious agents, which run DGD), 0 for the
    /// consensus methods, 1 for local training.
    pub fn theory_lambdas(&self) -> Vec<f64> {
        let n = self.n_agents();
        let mut lambdas = match self.setup.algorithm {
            Algorithm::FjDgd1 | Algorithm::FjDgd2 => self.setup.lambdas.as_slice().to_vec(),
            Algorithm::LocalGd => vec![1.0; n],
            _ => vec![0.0; n],
        };
        if let Some(a) = &self.setup.attack {
            if self.setup.algorithm != Algorithm::LocalGd {
                for &m in &a.malicious {
                    lambdas[m] = 0.0;
                }
            }
        }
        lambdas
    }

    pub fn fixed_points(&self) -> Result<FixedPointReport> {
        let lambdas = self.theory_lambdas();
        match &self.workload {
            Workload::Learning(p) => fixed_point_report(&self.mixing, self.setup.alpha, &lambdas, &p.objectives(), &self.constants),
            Workload::Quadratic(p) => fixed_point_report(&self.mixing, self.setup.alpha, &lambdas, &p.quadratics, &self.constants),
        }
    }
}

/// Prepares and runs `cfg`, returning the metrics trace.
pub fn run_experiment(cfg: &ExperimentConfig, mnist_dir: Option<&Path>) -> Result<MetricsTrace> {
    Ok(Experiment::prepare(cfg, mnist_dir)?.run()?.trace)
}
