//! Regularized logistic losses, their gradients, prediction rules and the
//! strong-convexity / smoothness constants that drive step-size selection.
//!
//! The regularizer is `gamma * ||x||^2` (squared Euclidean / Frobenius norm),
//! which makes every local loss `2 gamma`-strongly convex.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// Labels in `{-1, +1}`, parameters are a `p x 1` block.
    Binary,
    /// Labels in `0..classes`, parameters are a `p x classes` block.
    Multiclass { classes: usize },
}

impl Task {
    pub fn columns(&self) -> usize {
        match *self {
            Task::Binary => 1,
            Task::Multiclass { classes } => classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// One agent's labelled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentDataset {
    features: Array2<f64>,
    labels: Vec<i64>,
    task: Task,
    split: Split,
}

impl AgentDataset {
    pub fn new(features: Array2<f64>, labels: Vec<i64>, task: Task, split: Split) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Data("dataset must contain at least one sample".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::shape(
                format!("{} labels", features.nrows()),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(bad) = features.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite feature value {bad}")));
        }
        match task {
            Task::Binary => {
                if let Some(&l) = labels.iter().find(|&&l| l != 1 && l != -1) {
                    return Err(Error::Data(format!("binary label {l} not in {{-1, +1}}")));
                }
            }
            Task::Multiclass { classes } => {
                if classes < 2 {
                    return Err(Error::Data("multi-class task needs at least two classes".into()));
                }
                if let Some(&l) = labels.iter().find(|&&l| l < 0 || l as usize >= classes) {
                    return Err(Error::Data(format!("label {l} out of range 0..{classes}")));
                }
            }
        }
        Ok(Self { features, labels, task, split })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Subset of samples by index, keeping task and split.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(features, labels, self.task, self.split)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Concatenates datasets sharing task and dimension.
    pub fn concat(parts: &[&AgentDataset], split: Split) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Data("cannot concatenate zero datasets".into()))?;
        if let Some(bad) = parts.iter().find(|d| d.task != first.task || d.dim() != first.dim()) {
            return Err(Error::shape(
                format!("{:?} with p = {}", first.task, first.dim()),
                format!("{:?} with p = {}", bad.task, bad.dim()),
            ));
        }
        let views: Vec<_> = parts.iter().map(|d| d.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Data(format!("concatenation failed: {e}")))?;
        let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
        Self::new(features, labels, first.task, split)
    }
}

/// Model parameters of one agent, a `p x c` block (`c = 1` for binary tasks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock(pub Array2<f64>);

impl ParamBlock {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self(Array2::zeros((rows, cols)))
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        let n = values.len();
        Self(Array2::from_shape_vec((n, 1), values).expect("column vector shape"))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn column(&self, c: usize) -> ArrayView1<'_, f64> {
        self.0.column(c)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist_sq(&self, other: &ParamBlock) -> f64 {
        Zip::from(&self.0).and(&other.0).fold(0.0, |acc, a, b| acc + (a - b) * (a - b))
    }

    /// `self + scale * other`, in place.
    pub fn axpy(&mut self, scale: f64, other: &ParamBlock) {
        self.0.scaled_add(scale, &other.0);
    }

    /// `weight * a + (1 - weight) * b`, entrywise.
    pub fn convex(weight: f64, a: &ParamBlock, b: &ParamBlock) -> ParamBlock {
        let rest = 1.0 - weight;
        ParamBlock(Zip::from(&a.0).and(&b.0).map_collect(|&u, &v| weight * u + rest * v))
    }
}

/// A differentiable local loss. Implementations must be pure.
pub trait Objective: Sync {
    fn param_shape(&self) -> (usize, usize);
    fn loss(&self, x: &ParamBlock) -> Result<f64>;
    fn gradient(&self, x: &ParamBlock) -> Result<ParamBlock>;
}

fn check_shape(x: &ParamBlock, expected: (usize, usize)) -> Result<()> {
    if x.shape() != expected {
        return Err(Error::shape(format!("{expected:?}"), format!("{:?}", x.shape())));
    }
    Ok(())
}

/// `log(1 + e^u)` without overflow.
fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn require_task(d: &AgentDataset, binary: bool) -> Result<usize> {
    match (d.task, binary) {
        (Task::Binary, true) => Ok(1),
        (Task::Multiclass { classes }, false) => Ok(classes),
        (t, _) => Err(Error::Data(format!("dataset task {t:?} does not match the loss"))),
    }
}

/// `(1/m) sum log(1 + exp(-b a'x)) + gamma ||x||^2`.
pub fn binary_logistic_loss(x: &ParamBlock, d: &AgentDataset, gamma: f64) -> Result<f64> {
    require_task(d, true)?;
    check_shape(x, (d.dim(), 1))?;
    let margins = d.features.dot(&x.0.column(0));
    let data: f64 = margins
        .iter()
        .zip(&d.labels)
        .map(|(&t, &b)| softplus(-(b as f64) * t))
        .sum::<f64>()
        / d.len() as f64;
    Ok(data + gamma * x.norm_sq())
}

pub fn binary_logistic_gradient(x: &ParamBlock, d: &AgentDataset, gamma: f64) -> Result<ParamBlock> {
    require_task(d, true)?;
    check_shape(x, (d.dim(), 1))?;
    let m = d.len() as f64;
    let margins = d.features.dot(&x.0.column(0));
    // d/dt softplus(-b t) = -b * sigmoid(-b t)
    let weights: Array1<f64> = margins
        .iter()
        .zip(&d.labels)
        .map(|(&t, &b)| {
            let b = b as f64;
            -b * sigmoid(-b * t) / m
        })
        .collect();
    let data = d.features.t().dot(&weights);
    let mut g = x.0.clone() * (2.0 * gamma);
    g.column_mut(0).scaled_add(1.0, &data);
    Ok(ParamBlock(g))
}

/// Row-wise softmax probabilities and log-sum-exp of a logit matrix.
fn softmax_rows(logits: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut probs = logits.clone();
    let mut lse = Array1::zeros(logits.nrows());
    for (mut row, out) in probs.rows_mut().into_iter().zip(lse.iter_mut()) {
        let shift = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - shift).exp());
        let total = row.sum();
        row /= total;
        *out = shift + total.ln();
    }
    (probs, lse)
}

/// `(1/m) sum [logsumexp(a'x) - a'x_label] + gamma ||x||_F^2`.
pub fn multiclass_logistic_loss(x: &ParamBlock, d: &AgentDataset, gamma: f64) -> Result<f64> {
    let classes = require_task(d, false)?;
    check_shape(x, (d.dim(), classes))?;
    let logits = d.features.dot(&x.0);
    let (_, lse) = softmax_rows(&logits);
    let data: f64 = d
        .labels
        .iter()
        .enumerate()
        .map(|(j, &l)| lse[j] - logits[[j, l as usize]])
        .sum::<f64>()
        / d.len() as f64;
    Ok(data + gamma * x.norm_sq())
}

pub fn multiclass_logistic_gradient(x: &ParamBlock, d: &AgentDataset, gamma: f64) -> Result<ParamBlock> {
    let classes = require_task(d, false)?;
    check_shape(x, (d.dim(), classes))?;
    let m = d.len() as f64;
    let logits = d.features.dot(&x.0);
    let (mut residual, _) = softmax_rows(&logits);
    for (j, &l) in d.labels.iter().enumerate() {
        residual[[j, l as usize]] -= 1.0;
    }
    residual /= m;
    let mut g = d.features.t().dot(&residual);
    g.scaled_add(2.0 * gamma, &x.0);
    Ok(ParamBlock(g))
}

/// `+1` iff `a'x > 0`.
pub fn predict_binary(x: &ParamBlock, a: ArrayView1<'_, f64>) -> Result<i64> {
    check_shape(x, (a.len(), 1))?;
    Ok(if a.dot(&x.0.column(0)) > 0.0 { 1 } else { -1 })
}

/// Arg-max class of the logits; ties go to the lowest index.
pub fn predict_multiclass(x: &ParamBlock, a: ArrayView1<'_, f64>) -> Result<i64> {
    if x.shape().0 != a.len() {
        return Err(Error::shape(format!("{} rows", a.len()), format!("{:?}", x.shape())));
    }
    Ok(argmax_first(x.0.t().dot(&a).view()) as i64)
}

fn argmax_first(v: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &val) in v.iter().enumerate() {
        if val > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of correctly classified samples.
pub fn accuracy(x: &ParamBlock, d: &AgentDataset) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::Data("accuracy of an empty dataset".into()));
    }
    check_shape(x, (d.dim(), d.task.columns()))?;
    let correct = match d.task {
        Task::Binary => {
            let margins = d.features.dot(&x.0.column(0));
            margins
                .iter()
                .zip(&d.labels)
                .filter(|(&t, &b)| (if t > 0.0 { 1 } else { -1 }) == b)
                .count()
        }
        Task::Multiclass { .. } => {
            let logits = d.features.dot(&x.0);
            logits
                .rows()
                .into_iter()
                .zip(&d.labels)
                .filter(|(row, &l)| argmax_first(row.view()) as i64 == l)
                .count()
        }
    };
    Ok(correct as f64 / d.len() as f64)
}

/// Strong convexity and smoothness moduli.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexityConstants {
    pub mu: f64,
    pub big_l: f64,
}

impl ConvexityConstants {
    pub fn new(mu: f64, big_l: f64) -> Result<Self> {
        if !(mu > 0.0 && mu <= big_l && big_l.is_finite()) {
            return Err(Error::Config(format!("need 0 < mu <= L, got mu = {mu}, L = {big_l}")));
        }
        Ok(Self { mu, big_l })
    }

    /// Constants valid for every member of a family: smallest mu, largest L.
    pub fn envelope(all: &[ConvexityConstants]) -> Result<Self> {
        let mu = all.iter().map(|c| c.mu).fold(f64::INFINITY, f64::min);
        let big_l = all.iter().map(|c| c.big_l).fold(0.0, f64::max);
        Self::new(mu, big_l)
    }
}

/// Largest eigenvalue of `A'A`, through whichever Gram matrix is smaller.
pub fn gram_spectral_norm(a: &Array2<f64>) -> f64 {
    let gram = if a.nrows() <= a.ncols() { a.dot(&a.t()) } else { a.t().dot(a) };
    let n = gram.nrows();
    let m = DMatrix::from_fn(n, n, |i, j| gram[[i, j]]);
    SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// `mu = 2 gamma`; `L = 2 gamma + lambda_max(A'A) / (4m)` (binary) or
/// `/ (2m)` (multi-class).
pub fn convexity_constants(d: &AgentDataset, gamma: f64) -> Result<ConvexityConstants> {
    if !(gamma > 0.0) {
        return Err(Error::Config(format!(
            "gamma must be positive for strong convexity, got {gamma}"
        )));
    }
    let m = d.len() as f64;
    let curvature = match d.task {
        Task::Binary => 0.25,
        Task::Multiclass { .. } => 0.5,
    };
    let data_l = curvature * gram_spectral_norm(&d.features) / m;
    ConvexityConstants::new(2.0 * gamma, 2.0 * gamma + data_l)
}

/// Regularized logistic loss of one agent's dataset.
#[derive(Debug, Clone, Copy)]
pub struct Logistic<'a> {
    pub data: &'a AgentDataset,
    pub gamma: f64,
}

impl<'a> Logistic<'a> {
    pub fn new(data: &'a AgentDataset, gamma: f64) -> Self {
        Self { data, gamma }
    }
}

impl Objective for Logistic<'_> {
    fn param_shape(&self) -> (usize, usize) {
        (self.data.dim(), self.data.task.columns())
    }

    fn loss(&self, x: &ParamBlock) -> Result<f64> {
        match self.data.task {
            Task::Binary => binary_logistic_loss(x, self.data, self.gamma),
            Task::Multiclass { .. } => multiclass_logistic_loss(x, self.data, self.gamma),
        }
    }

    fn gradient(&self, x: &ParamBlock) -> Result<ParamBlock> {
        match self.data.task {
            Task::Binary => binary_logistic_gradient(x, self.data, self.gamma),
            Task::Multiclass { .. } => multiclass_logistic_gradient(x, self.data, self.gamma),
        }
    }
}

/// Separable quadratic `f(x) = 1/2 sum_k h_k (x_k - c_k)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub curvature: Array1<f64>,
    pub center: Array1<f64>,
}

impl Quadratic {
    pub fn new(curvature: Vec<f64>, center: Vec<f64>) -> Result<Self> {
        if curvature.len() != center.len() || curvature.is_empty() {
            return Err(Error::shape(
                format!("{} centers", curvature.len()),
                format!("{} centers", center.len()),
            ));
        }
        if curvature.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::Config("quadratic curvatures must be positive".into()));
        }
        Ok(Self {
            curvature: Array1::from(curvature),
            center: Array1::from(center),
        })
    }

    pub fn scalar(curvature: f64, center: f64) -> Result<Self> {
        Self::new(vec![curvature], vec![center])
    }

    pub fn minimizer(&self) -> ParamBlock {
        ParamBlock::from_vec(self.center.to_vec())
    }

    pub fn constants(&self) -> Result<ConvexityConstants> {
        let mu = self.curvature.iter().copied().fold(f64::INFINITY, f64::min);
        let l = self.curvature.iter().copied().fold(0.0, f64::max);
        ConvexityConstants::new(mu, l)
    }
}

impl Objective for Quadratic {
    fn param_shape(&self) -> (usize, usize) {
        (self.center.len(), 1)
    }

    fn loss(&self, x: &ParamBlock) -> Result<f64> {
        check_shape(x, self.param_shape())?;
        Ok(Zip::from(x.0.column(0))
            .and(&self.curvature)
            .and(&self.center)
            .fold(0.0, |acc, &v, &h, &c| acc + 0.5 * h * (v - c) * (v - c)))
    }

    fn gradient(&self, x: &ParamBlock) -> Result<ParamBlock> {
        check_shape(x, self.param_shape())?;
        let g = Zip::from(x.0.column(0))
            .and(&self.curvature)
            .and(&self.center)
            .map_collect(|&v, &h, &c| h * (v - c));
        Ok(ParamBlock::from_vec(g.to_vec()))
    }
}
