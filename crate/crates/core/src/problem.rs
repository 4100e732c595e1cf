//! Concrete learning problems: agents' objectives plus trace evaluation.

use rand::seq::index;

use crate::datagen::AgentSplit;
use crate::engine::{AgentMetrics, Evaluator};
use crate::error::{Error, Result};
use crate::objectives::{accuracy, convexity_constants, AgentDataset, ConvexityConstants, Logistic, Objective, ParamBlock, Quadratic, Split};
use crate::rng;

/// Regularized logistic regression over per-agent train/test splits.
#[derive(Debug, Clone)]
pub struct LearningProblem {
    pub splits: Vec<AgentSplit>,
    pub gamma: f64,
    /// Pooled training data, or a fixed random subset of it.
    pub global_train: AgentDataset,
    pub global_test: AgentDataset,
}

impl LearningProblem {
    /// `global_loss_subset` draws that many pooled training samples once
    /// (seeded) and reuses them for every global-loss evaluation.
    pub fn new(splits: Vec<AgentSplit>, gamma: f64, global_loss_subset: Option<usize>, subset_seed: u64) -> Result<Self> {
        if splits.is_empty() {
            return Err(Error::Config("problem needs at least one agent".into()));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be finite and >= 0, got {gamma}")));
        }
        let trains: Vec<&AgentDataset> = splits.iter().map(|s| &s.train).collect();
        let tests: Vec<&AgentDataset> = splits.iter().map(|s| &s.test).collect();
        let pooled = AgentDataset::concat(&trains, Split::Train)?;
        let global_test = AgentDataset::concat(&tests, Split::Test)?;
        let global_train = match global_loss_subset {
            None => pooled,
            Some(0) => return Err(Error::Config("global_loss_subset must be positive".into())),
            Some(k) if k >= pooled.len() => pooled,
            Some(k) => {
                let mut r = rng::stream(subset_seed, &[rng::TAG_SUBSET]);
                let mut picked = index::sample(&mut r, pooled.len(), k).into_vec();
                picked.sort_unstable();
                pooled.select(&picked)?
            }
        };
        Ok(Self {
            splits,
            gamma,
            global_train,
            global_test,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.splits.len()
    }

    pub fn param_shape(&self) -> (usize, usize) {
        let d = &self.splits[0].train;
        (d.dim(), d.task().columns())
    }

    pub fn objectives(&self) -> Vec<Logistic<'_>> {
        self.splits.iter().map(|s| Logistic::new(&s.train, self.gamma)).collect()
    }

    pub fn constants(&self) -> Result<Vec<ConvexityConstants>> {
        self.splits.iter().map(|s| convexity_constants(&s.train, self.gamma)).collect()
    }
}

impl Evaluator for LearningProblem {
    fn evaluate(&self, agent: usize, x: &ParamBlock) -> Result<AgentMetrics> {
        let s = &self.splits[agent];
        Ok(AgentMetrics {
            local_train_loss: Logistic::new(&s.train, self.gamma).loss(x)?,
            global_train_loss: Logistic::new(&self.global_train, self.gamma).loss(x)?,
            local_train_acc: accuracy(x, &s.train)?,
            local_test_acc: accuracy(x, &s.test)?,
            global_test_acc: accuracy(x, &self.global_test)?,
        })
    }

    fn train_accuracy(&self, agent: usize, x: &ParamBlock) -> Result<f64> {
        accuracy(x, &self.splits[agent].train)
    }
}

/// Separable quadratics; used for the convergence theory. Accuracies are
/// reported as NaN.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    pub quadratics: Vec<Quadratic>,
}

impl QuadraticProblem {
    pub fn new(quadratics: Vec<Quadratic>) -> Result<Self> {
        let first = quadratics
            .first()
            .ok_or_else(|| Error::Config("problem needs at least one agent".into()))?
            .param_shape();
        if let Some(q) = quadratics.iter().find(|q| q.param_shape() != first) {
            return Err(Error::shape(format!("{first:?}"), format!("{:?}", q.param_shape())));
        }
        Ok(Self { quadratics })
    }

    pub fn constants(&self) -> Result<Vec<ConvexityConstants>> {
        self.quadratics.iter().map(Quadratic::constants).collect()
    }
}

impl Evaluator for QuadraticProblem {
    fn evaluate(&self, agent: usize, x: &ParamBlock) -> Result<AgentMetrics> {
        let mut global = 0.0;
        for q in &self.quadratics {
            global += q.loss(x)?;
        }
        Ok(AgentMetrics {
            local_train_loss: self.quadratics[agent].loss(x)?,
            global_train_loss: global / self.quadratics.len() as f64,
            local_train_acc: f64::NAN,
            local_test_acc: f64::NAN,
            global_test_acc: f64::NAN,
        })
    }

    fn train_accuracy(&self, _agent: usize, _x: &ParamBlock) -> Result<f64> {
        Ok(f64::NAN)
    }
}
