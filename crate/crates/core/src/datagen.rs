//! Seeded data generators: heterogeneous synthetic federated data, the 2D
//! linear-classifier family, and MNIST loading/partitioning.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{AgentDataset, Split, Task};
use crate::rng;

pub const MNIST_IMAGE_MAGIC: u32 = 2051;
pub const MNIST_LABEL_MAGIC: u32 = 2049;
pub const MNIST_CLASSES: usize = 10;

/// Train/test pair owned by one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSplit {
    pub train: AgentDataset,
    pub test: AgentDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityParams {
    /// Variance of the per-agent model shift.
    pub alpha: f64,
    /// Variance of the per-agent feature shift.
    pub beta: f64,
}

impl HeterogeneityParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::Config(format!(
                "heterogeneity variances must be finite and >= 0, got alpha = {alpha}, beta = {beta}"
            )));
        }
        Ok(Self { alpha, beta })
    }
}

/// Latent generative parameters of one agent in the synthetic federated model.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticAgentModel {
    pub model_shift: f64,
    pub weights: Array1<f64>,
    pub bias: f64,
    pub feature_shift: f64,
    pub feature_mean: Array1<f64>,
}

fn normal(mean: f64, variance: f64) -> Normal<f64> {
    Normal::new(mean, variance.sqrt()).expect("finite non-negative variance")
}

pub fn synthetic_agent_model(
    agent: usize,
    dim: usize,
    params: HeterogeneityParams,
    seed: u64,
) -> (SyntheticAgentModel, rand_chacha::ChaCha8Rng) {
    let mut rng = rng::stream(seed, &[rng::TAG_DATA, agent as u64]);
    let model_shift = normal(0.0, params.alpha).sample(&mut rng);
    let unit = normal(model_shift, 1.0);
    let weights = Array1::from_iter((0..dim).map(|_| unit.sample(&mut rng)));
    let bias = unit.sample(&mut rng);
    let feature_shift = normal(0.0, params.beta).sample(&mut rng);
    let around = normal(feature_shift, 1.0);
    let feature_mean = Array1::from_iter((0..dim).map(|_| around.sample(&mut rng)));
    let model = SyntheticAgentModel {
        model_shift,
        weights,
        bias,
        feature_shift,
        feature_mean,
    };
    (model, rng)
}

/// Heterogeneous binary classification data. Agent `i` draws a latent model
/// `(w, b)` around a shift `u_i ~ N(0, alpha)` and features around a mean
/// shifted by `B_i ~ N(0, beta)`, with covariance `diag(k^-1.2)`. Labels are
/// `sign(w'a + b)`.
pub fn gen_synthetic_federated(
    n_agents: usize,
    dim: usize,
    train_samples: usize,
    test_samples: usize,
    params: HeterogeneityParams,
    seed: u64,
) -> Result<Vec<AgentSplit>> {
    if n_agents == 0 || dim == 0 || train_samples == 0 || test_samples == 0 {
        return Err(Error::Config("agents, dimension and sample counts must be positive".into()));
    }
    let stds: Vec<f64> = (1..=dim).map(|k| (k as f64).powf(-1.2).sqrt()).collect();
    (0..n_agents)
        .map(|agent| {
            let (model, mut rng) = synthetic_agent_model(agent, dim, params, seed);
            let total = train_samples + test_samples;
            let mut features = Array2::<f64>::zeros((total, dim));
            let mut labels = Vec::with_capacity(total);
            let std_normal = normal(0.0, 1.0);
            for mut row in features.rows_mut() {
                for (k, v) in row.iter_mut().enumerate() {
                    *v = model.feature_mean[k] + stds[k] * std_normal.sample(&mut rng);
                }
                let score = row.dot(&model.weights) + model.bias;
                labels.push(if score > 0.0 { 1 } else { -1 });
            }
            split_rows(features, labels, train_samples, Task::Binary)
        })
        .collect()
}

fn split_rows(features: Array2<f64>, labels: Vec<i64>, n_train: usize, task: Task) -> Result<AgentSplit> {
    let test_features = features.slice(ndarray::s![n_train.., ..]).to_owned();
    let train_features = features.slice(ndarray::s![..n_train, ..]).to_owned();
    let test_labels = labels[n_train..].to_vec();
    let mut train_labels = labels;
    train_labels.truncate(n_train);
    Ok(AgentSplit {
        train: AgentDataset::new(train_features, train_labels, task, Split::Train)?,
        test: AgentDataset::new(test_features, test_labels, task, Split::Test)?,
    })
}

/// Slopes evenly spaced over `[-theta, theta]`, endpoints included.
pub fn linear_slopes(n_agents: usize, theta: f64) -> Result<Vec<f64>> {
    if n_agents < 2 {
        return Err(Error::Config(format!(
            "even slope spacing needs at least 2 agents, got {n_agents}"
        )));
    }
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::Config(format!("theta must be positive, got {theta}")));
    }
    let last = (n_agents - 1) as f64;
    Ok((0..n_agents)
        .map(|i| match i {
            0 => -theta,
            i if i == n_agents - 1 => theta,
            i => -theta + 2.0 * theta * i as f64 / last,
        })
        .collect())
}

/// Two-dimensional linear model: agent `i` labels `a ~ U[-1,1]^2` as `-1`
/// iff `[1, theta_i]'a + v >= 0`, `v ~ N(0, noise_var)`.
pub fn gen_2d_linear(
    n_agents: usize,
    theta: f64,
    train_samples: usize,
    test_samples: usize,
    noise_var: f64,
    seed: u64,
) -> Result<Vec<AgentSplit>> {
    let slopes = linear_slopes(n_agents, theta)?;
    if !(noise_var >= 0.0 && noise_var.is_finite()) {
        return Err(Error::Config(format!("noise variance must be >= 0, got {noise_var}")));
    }
    if train_samples == 0 || test_samples == 0 {
        return Err(Error::Config("sample counts must be positive".into()));
    }
    let noise = normal(0.0, noise_var);
    slopes
        .iter()
        .enumerate()
        .map(|(agent, &slope)| {
            let mut rng = rng::stream(seed, &[rng::TAG_DATA, agent as u64]);
            let total = train_samples + test_samples;
            let mut features = Array2::<f64>::zeros((total, 2));
            let mut labels = Vec::with_capacity(total);
            for mut row in features.rows_mut() {
                row[0] = rng.gen_range(-1.0..=1.0);
                row[1] = rng.gen_range(-1.0..=1.0);
                let score = row[0] + slope * row[1] + noise.sample(&mut rng);
                labels.push(if score >= 0.0 { -1 } else { 1 });
            }
            split_rows(features, labels, train_samples, Task::Binary)
        })
        .collect()
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0)?;
    if magic != MNIST_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic {magic}, expected {MNIST_IMAGE_MAGIC}"
        )));
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let needed = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < needed {
        return Err(Error::Format(format!(
            "truncated image file: {} pixel bytes, header promises {needed}",
            body.len()
        )));
    }
    Ok((count, rows, cols, &body[..needed]))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0)?;
    if magic != MNIST_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic {magic}, expected {MNIST_LABEL_MAGIC}"
        )));
    }
    let count = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Format(format!(
            "truncated label file: {} label bytes, header promises {count}",
            body.len()
        )));
    }
    Ok(&body[..count])
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [MNIST_IMAGE_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&MNIST_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Decodes IDX image/label buffers into a 10-class dataset with pixels in `[0, 1]`.
pub fn decode_mnist(image_bytes: &[u8], label_bytes: &[u8]) -> Result<AgentDataset> {
    let (count, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != count {
        return Err(Error::Format(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    let features = Array2::from_shape_vec((count, rows * cols), pixels.iter().map(|&p| p as f64 / 255.0).collect())
        .map_err(|e| Error::Format(e.to_string()))?;
    let labels = labels.iter().map(|&l| l as i64).collect();
    AgentDataset::new(
        features,
        labels,
        Task::Multiclass { classes: MNIST_CLASSES },
        Split::Train,
    )
}

pub fn load_mnist(image_path: &Path, label_path: &Path) -> Result<AgentDataset> {
    let images = std::fs::read(image_path)?;
    let labels = std::fs::read(label_path)?;
    decode_mnist(&images, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionMode {
    Hom,
    Het2,
    Het5,
}

impl PartitionMode {
    pub fn removed_classes(&self) -> usize {
        match self {
            PartitionMode::Hom => 0,
            PartitionMode::Het2 => 2,
            PartitionMode::Het5 => 5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PartitionMode::Hom => "hom",
            PartitionMode::Het2 => "het2",
            PartitionMode::Het5 => "het5",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [PartitionMode::Hom, PartitionMode::Het2, PartitionMode::Het5]
            .into_iter()
            .find(|m| m.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub samples_per_agent: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn train_count(&self) -> usize {
        (self.samples_per_agent as f64 * self.train_fraction).round() as usize
    }
}

/// Disjoint random assignment of samples to agents, then per-agent removal
/// of `k` uniformly chosen classes for the heterogeneous modes.
pub fn partition_mnist(full: &AgentDataset, n_agents: usize, spec: PartitionSpec) -> Result<Vec<AgentSplit>> {
    let classes = match full.task() {
        Task::Multiclass { classes } => classes,
        Task::Binary => return Err(Error::Data("partitioning expects a multi-class dataset".into())),
    };
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let n_train = spec.train_count();
    if n_agents == 0 || n_train == 0 || n_train >= spec.samples_per_agent {
        return Err(Error::Config("every agent needs both training and test samples".into()));
    }
    let needed = n_agents * spec.samples_per_agent;
    if needed > full.len() {
        return Err(Error::InsufficientData {
            needed,
            available: full.len(),
        });
    }
    let removed = spec.mode.removed_classes();
    if removed >= classes {
        return Err(Error::Config(format!("cannot remove {removed} of {classes} classes")));
    }
    let mut order: Vec<usize> = (0..full.len()).collect();
    order.shuffle(&mut rng::stream(spec.seed, &[rng::TAG_PARTITION]));
    order
        .chunks_exact(spec.samples_per_agent)
        .take(n_agents)
        .enumerate()
        .map(|(agent, chunk)| {
            let mut rng = rng::stream(spec.seed, &[rng::TAG_PARTITION, agent as u64 + 1]);
            let dropped: Vec<i64> = index::sample(&mut rng, classes, removed)
                .into_iter()
                .map(|c| c as i64)
                .collect();
            let keep = |idx: &&usize| !dropped.contains(&full.labels()[**idx]);
            let train: Vec<usize> = chunk[..n_train].iter().filter(keep).copied().collect();
            let test: Vec<usize> = chunk[n_train..].iter().filter(keep).copied().collect();
            if train.is_empty() || test.is_empty() {
                return Err(Error::Data(format!(
                    "class removal emptied agent {agent}'s local data"
                )));
            }
            Ok(AgentSplit {
                train: full.select(&train)?.with_split(Split::Train),
                test: full.select(&test)?.with_split(Split::Test),
            })
        })
        .collect()
}

/// One row per sample: label, then features.
pub fn dataset_to_csv(d: &AgentDataset) -> String {
    let mut out = String::new();
    for (row, label) in d.features().rows().into_iter().zip(d.labels()) {
        let _ = write!(out, "{label}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn dataset_from_csv(text: &str, task: Task, split: Split) -> Result<AgentDataset> {
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parse_err = |message: String| Error::Parse { line: n + 1, message };
        let mut cells = line.split(',').map(str::trim);
        let label = cells
            .next()
            .and_then(|c| c.parse::<i64>().ok())
            .ok_or_else(|| parse_err("expected integer label".into()))?;
        let row: Vec<f64> = cells
            .map(|c| c.parse::<f64>().map_err(|_| parse_err(format!("bad feature `{c}`"))))
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err(format!("expected {w} features, found {}", row.len())))
            }
            _ => {}
        }
        labels.push(label);
        values.extend(row);
    }
    let width = width.ok_or_else(|| Error::Data("empty dataset CSV".into()))?;
    let features = Array2::from_shape_vec((labels.len(), width), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    AgentDataset::new(features, labels, task, split)
}
