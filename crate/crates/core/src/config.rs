//! Declarative experiment configuration.
//!
//! Grammar: one `key = value` per line, `[section]` headers, `#` starts a
//! comment. Top-level keys come before the first section. Lists are written
//! `[a, b, c]`. Sections: `topology`, `data`, `attack`, `early_stopping`,
//! `seeds`.
//!
//! ```text
//! algorithm = fj_dgd_2
//! lambda = 0.5
//! iterations = 300
//!
//! [topology]
//! kind = ring
//! agents = 10
//!
//! [data]
//! kind = synthetic_federated
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::datagen::PartitionMode;
use crate::engine::{Algorithm, EarlyStopParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaSpec {
    /// `1 / L` with `L` the largest smoothness modulus among agents.
    Auto,
    /// `min(1/L, (1 + lambda_min(W)) / (2L))`, always contractive.
    Safe,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LambdaSpec {
    Scalar(f64),
    PerAgent(Vec<f64>),
}

impl LambdaSpec {
    pub fn resolve(&self, n_agents: usize) -> Result<Vec<f64>> {
        match self {
            LambdaSpec::Scalar(l) => Ok(vec![*l; n_agents]),
            LambdaSpec::PerAgent(v) if v.len() == n_agents => Ok(v.clone()),
            LambdaSpec::PerAgent(v) => Err(Error::Config(format!(
                "lambda lists {} values for {n_agents} agents",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitSpec {
    Zeros,
    Gaussian { std: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TopologySpec {
    Ring { agents: usize },
    Circulant { agents: usize, half_width: usize },
    RandomGeometric { agents: usize, radius: f64, seed: u64 },
}

impl TopologySpec {
    pub fn agents(&self) -> usize {
        match *self {
            TopologySpec::Ring { agents }
            | TopologySpec::Circulant { agents, .. }
            | TopologySpec::RandomGeometric { agents, .. } => agents,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    SyntheticFederated {
        dim: usize,
        train: usize,
        test: usize,
        het_alpha: f64,
        het_beta: f64,
    },
    Linear2d {
        theta: f64,
        train: usize,
        test: usize,
        noise_var: f64,
    },
    Mnist {
        dir: Option<String>,
        partition: PartitionMode,
        samples_per_agent: usize,
        train_fraction: f64,
    },
    /// Random separable quadratics: curvatures uniform in
    /// `[curvature_min, curvature_max]`, centers `N(0, center_std^2)`.
    Quadratic {
        dim: usize,
        curvature_min: f64,
        curvature_max: f64,
        center_std: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaliciousSpec {
    Agents(Vec<usize>),
    /// Drawn uniformly without replacement with the attack seed.
    Count(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub malicious: MaliciousSpec,
    pub eta: f64,
    pub kappa: f64,
    pub clip: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub attack: u64,
    pub noise: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub alpha: AlphaSpec,
    pub lambda: Option<LambdaSpec>,
    pub iterations: usize,
    pub gamma: f64,
    pub update_noise_std: f64,
    pub global_loss_subset: Option<usize>,
    pub record_every: usize,
    pub init: InitSpec,
    pub topology: TopologySpec,
    pub data: DataSpec,
    pub attack: Option<AttackSpec>,
    pub early_stopping: Option<EarlyStopParams>,
    pub seeds: Seeds,
}

pub const DEFAULT_ITERATIONS: usize = 1000;
pub const DEFAULT_GAMMA: f64 = 0.01;

const SECTIONS: [&str; 6] = ["", "topology", "data", "attack", "early_stopping", "seeds"];

fn allowed_keys(section: &str) -> &'static [&'static str] {
    match section {
        "" => &[
            "algorithm",
            "alpha",
            "lambda",
            "iterations",
            "gamma",
            "update_noise_std",
            "global_loss_subset",
            "record_every",
            "init",
        ],
        "topology" => &["kind", "agents", "half_width", "radius", "seed"],
        "data" => &[
            "kind",
            "dim",
            "train",
            "test",
            "het_alpha",
            "het_beta",
            "theta",
            "noise_var",
            "partition",
            "samples_per_agent",
            "train_fraction",
            "mnist_dir",
            "curvature_min",
            "curvature_max",
            "center_std",
        ],
        "attack" => &["malicious", "malicious_count", "eta", "kappa", "clip"],
        "early_stopping" => &["window", "patience"],
        "seeds" => &["data", "init", "attack", "noise"],
        _ => &[],
    }
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Raw parsed document; values are consumed by typed accessors so leftovers
/// can be reported as not applicable.
struct Document {
    sections: BTreeMap<String, (usize, BTreeMap<String, Entry>)>,
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

impl Document {
    fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, (usize, BTreeMap<String, Entry>)> = BTreeMap::new();
        sections.insert(String::new(), (0, BTreeMap::new()));
        let mut current = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = strip_comment(raw).trim();
            if body.is_empty() {
                continue;
            }
            if let Some(rest) = body.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| parse_err(line, "unterminated section header"))?
                    .trim();
                if !SECTIONS.contains(&name) || name.is_empty() {
                    return Err(parse_err(line, format!(
                        "unknown section [{name}]; expected one of topology, data, attack, early_stopping, seeds"
                    )));
                }
                if sections.contains_key(name) {
                    return Err(parse_err(line, format!("section [{name}] appears twice")));
                }
                sections.insert(name.to_string(), (line, BTreeMap::new()));
                current = name.to_string();
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| parse_err(line, "expected `key = value`"))?;
            let key = key.trim();
            let value = value.trim();
            if !allowed_keys(&current).contains(&key) {
                let place = if current.is_empty() { "at top level".to_string() } else { format!("in [{current}]") };
                return Err(parse_err(line, format!("unknown key `{key}` {place}")));
            }
            if value.is_empty() {
                return Err(parse_err(line, format!("`{key}` has no value")));
            }
            let entries = &mut sections.get_mut(&current).expect("current section exists").1;
            if entries.contains_key(key) {
                return Err(parse_err(line, format!("duplicate key `{key}`")));
            }
            entries.insert(
                key.to_string(),
                Entry {
                    value: value.to_string(),
                    line,
                },
            );
        }
        Ok(Self { sections })
    }

    fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    fn section_line(&self, section: &str) -> usize {
        self.sections.get(section).map(|s| s.0).unwrap_or(0)
    }

    fn take(&mut self, section: &str, key: &str) -> Option<Entry> {
        self.sections.get_mut(section)?.1.remove(key)
    }

    fn get<T: FromStr>(&mut self, section: &str, key: &str, what: &str) -> Result<Option<(T, usize)>> {
        match self.take(section, key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse::<T>()
                .map(|v| Some((v, e.line)))
                .map_err(|_| parse_err(e.line, format!("`{key}` must be {what}, got `{}`", e.value))),
        }
    }

    fn real(&mut self, section: &str, key: &str) -> Result<Option<(f64, usize)>> {
        let v = self.get::<f64>(section, key, "a real number")?;
        if let Some((x, line)) = v {
            if !x.is_finite() {
                return Err(parse_err(line, format!("`{key}` must be finite")));
            }
        }
        Ok(v)
    }

    fn real_or(&mut self, section: &str, key: &str, default: f64) -> Result<(f64, usize)> {
        let line = self.section_line(section);
        Ok(self.real(section, key)?.unwrap_or((default, line)))
    }

    fn count(&mut self, section: &str, key: &str) -> Result<Option<(usize, usize)>> {
        self.get::<usize>(section, key, "a non-negative integer")
    }

    fn count_or(&mut self, section: &str, key: &str, default: usize) -> Result<(usize, usize)> {
        let line = self.section_line(section);
        Ok(self.count(section, key)?.unwrap_or((default, line)))
    }

    fn required<T>(&self, value: Option<T>, section: &str, key: &str) -> Result<T> {
        value.ok_or_else(|| {
            let line = self.section_line(section);
            let place = if section.is_empty() { String::new() } else { format!(" in [{section}]") };
            parse_err(line.max(1), format!("missing required key `{key}`{place}"))
        })
    }

    /// Any key left over does not apply to the chosen variant.
    fn finish(self, context: &BTreeMap<&str, String>) -> Result<()> {
        let mut leftovers: Vec<(usize, String, String)> = self
            .sections
            .into_iter()
            .flat_map(|(s, (_, entries))| entries.into_iter().map(move |(k, e)| (e.line, s.clone(), k)))
            .collect();
        leftovers.sort();
        if let Some((line, section, key)) = leftovers.into_iter().next() {
            let why = context
                .get(section.as_str())
                .map(|c| format!(" ({c})"))
                .unwrap_or_default();
            return Err(parse_err(line, format!("key `{key}` does not apply here{why}")));
        }
        Ok(())
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_list<T: FromStr>(value: &str, line: usize, what: &str) -> Result<Vec<T>> {
    let inner = value
        .strip_prefix('[')
        .and_then(|v| v.strip_suffix(']'))
        .ok_or_else(|| parse_err(line, format!("expected a list `[...]` of {what}")))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| parse_err(line, format!("list entry `{}` is not {what}", s.trim())))
        })
        .collect()
}

fn check(cond: bool, line: usize, message: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(parse_err(line, message))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Document::parse(text)?;
        let mut context = BTreeMap::new();

        let algorithm = match doc.take("", "algorithm") {
            Some(e) => Algorithm::from_name(&e.value).ok_or_else(|| {
                parse_err(e.line, format!(
                    "unknown algorithm `{}`; expected dgd, atc, ed, local_gd, fj_dgd_1 or fj_dgd_2",
                    e.value
                ))
            })?,
            None => doc.required(None, "", "algorithm")?,
        };
        context.insert("", format!("algorithm {}", algorithm.name()));

        let alpha = match doc.take("", "alpha") {
            None => AlphaSpec::Auto,
            Some(e) if e.value == "auto" => AlphaSpec::Auto,
            Some(e) if e.value == "safe" => AlphaSpec::Safe,
            Some(e) => {
                let a: f64 = e
                    .value
                    .parse()
                    .map_err(|_| parse_err(e.line, format!("`alpha` must be `auto`, `safe` or a real number, got `{}`", e.value)))?;
                check(a > 0.0 && a.is_finite(), e.line, format!("`alpha` must be positive, got {a}"))?;
                AlphaSpec::Value(a)
            }
        };

        let lambda = match doc.take("", "lambda") {
            None => None,
            Some(e) => {
                check(
                    algorithm.is_stubborn(),
                    e.line,
                    format!("`lambda` only applies to fj_dgd_1 and fj_dgd_2, not {}", algorithm.name()),
                )?;
                let spec = if e.value.starts_with('[') {
                    LambdaSpec::PerAgent(parse_list(&e.value, e.line, "a real number")?)
                } else {
                    LambdaSpec::Scalar(
                        e.value
                            .parse()
                            .map_err(|_| parse_err(e.line, format!("`lambda` must be a real number or a list, got `{}`", e.value)))?,
                    )
                };
                let values = match &spec {
                    LambdaSpec::Scalar(l) => std::slice::from_ref(l),
                    LambdaSpec::PerAgent(v) => v.as_slice(),
                };
                if let Some(bad) = values.iter().find(|l| !(0.0..=1.0).contains(*l)) {
                    return Err(parse_err(e.line, format!("`lambda` value {bad} outside [0, 1]")));
                }
                Some((spec, e.line))
            }
        };
        if algorithm.is_stubborn() && lambda.is_none() {
            return Err(parse_err(1, format!("{} needs a `lambda` value", algorithm.name())));
        }

        let (iterations, _) = doc.count_or("", "iterations", DEFAULT_ITERATIONS)?;
        let (gamma, line) = doc.real_or("", "gamma", DEFAULT_GAMMA)?;
        check(gamma >= 0.0, line, format!("`gamma` must be >= 0, got {gamma}"))?;
        let (update_noise_std, line) = doc.real_or("", "update_noise_std", 0.0)?;
        check(update_noise_std >= 0.0, line, "`update_noise_std` must be >= 0")?;
        let global_loss_subset = match doc.count("", "global_loss_subset")? {
            Some((0, line)) => return Err(parse_err(line, "`global_loss_subset` must be positive")),
            other => other.map(|v| v.0),
        };
        let (record_every, line) = doc.count_or("", "record_every", 1)?;
        check(record_every > 0, line, "`record_every` must be positive")?;
        let init = match doc.take("", "init") {
            None => InitSpec::Zeros,
            Some(e) if e.value == "zeros" => InitSpec::Zeros,
            Some(e) => {
                let std = e
                    .value
                    .strip_prefix("gaussian:")
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| parse_err(e.line, format!("`init` must be `zeros` or `gaussian:<std>`, got `{}`", e.value)))?;
                check(std >= 0.0 && std.is_finite(), e.line, "gaussian init std must be finite and >= 0")?;
                InitSpec::Gaussian { std }
            }
        };

        let seeds = Seeds {
            data: doc.get("seeds", "data", "an unsigned integer")?.map_or(0, |v| v.0),
            init: doc.get("seeds", "init", "an unsigned integer")?.map_or(0, |v| v.0),
            attack: doc.get("seeds", "attack", "an unsigned integer")?.map_or(0, |v| v.0),
            noise: doc.get("seeds", "noise", "an unsigned integer")?.map_or(0, |v| v.0),
        };

        let topology = Self::parse_topology(&mut doc, &mut context, seeds)?;
        let n_agents = topology.agents();
        if let Some((LambdaSpec::PerAgent(v), line)) = &lambda {
            check(
                v.len() == n_agents,
                *line,
                format!("`lambda` lists {} values for {n_agents} agents", v.len()),
            )?;
        }
        let data = Self::parse_data(&mut doc, &mut context)?;
        let attack = Self::parse_attack(&mut doc, n_agents)?;
        let early_stopping = if doc.has_section("early_stopping") {
            let (window, wl) = doc.count_or("early_stopping", "window", 20)?;
            let (patience, pl) = doc.count_or("early_stopping", "patience", 20)?;
            check(window > 0, wl, "`window` must be positive")?;
            check(patience > 0, pl, "`patience` must be positive")?;
            Some(EarlyStopParams { window, patience })
        } else {
            None
        };
        doc.finish(&context)?;

        Ok(Self {
            algorithm,
            alpha,
            lambda: lambda.map(|l| l.0),
            iterations,
            gamma,
            update_noise_std,
            global_loss_subset,
            record_every,
            init,
            topology,
            data,
            attack,
            early_stopping,
            seeds,
        })
    }

    fn parse_topology(doc: &mut Document, context: &mut BTreeMap<&str, String>, seeds: Seeds) -> Result<TopologySpec> {
        let kind = doc.take("topology", "kind");
        let kind = doc.required(kind, "topology", "kind")?;
        let agents = doc.count("topology", "agents")?;
        let (agents, agents_line) = doc.required(agents, "topology", "agents")?;
        context.insert("topology", format!("topology kind {}", kind.value));
        let spec = match kind.value.as_str() {
            "ring" => {
                check(agents >= 3, agents_line, "a ring needs at least 3 agents")?;
                TopologySpec::Ring { agents }
            }
            "circulant" => {
                let (half_width, line) = doc.count_or("topology", "half_width", 2)?;
                check(
                    half_width > 0 && 2 * half_width < agents,
                    line,
                    format!("`half_width` must satisfy 0 < 2 * half_width < agents, got {half_width}"),
                )?;
                TopologySpec::Circulant { agents, half_width }
            }
            "random_geometric" => {
                let (radius, line) = doc.real_or("topology", "radius", 0.25)?;
                check(
                    radius > 0.0 && radius <= std::f64::consts::SQRT_2,
                    line,
                    format!("`radius` must lie in (0, sqrt 2], got {radius}"),
                )?;
                check(agents >= 1, agents_line, "need at least one agent")?;
                let seed = doc
                    .get("topology", "seed", "an unsigned integer")?
                    .map_or(seeds.data, |v| v.0);
                TopologySpec::RandomGeometric { agents, radius, seed }
            }
            other => {
                return Err(parse_err(kind.line, format!(
                    "unknown topology kind `{other}`; expected ring, circulant or random_geometric"
                )))
            }
        };
        Ok(spec)
    }

    fn parse_data(doc: &mut Document, context: &mut BTreeMap<&str, String>) -> Result<DataSpec> {
        let kind = doc.take("data", "kind");
        let kind = doc.required(kind, "data", "kind")?;
        context.insert("data", format!("data kind {}", kind.value));
        let positive = |v: (usize, usize), key: &str| -> Result<usize> {
            check(v.0 > 0, v.1, format!("`{key}` must be positive"))?;
            Ok(v.0)
        };
        Ok(match kind.value.as_str() {
            "synthetic_federated" => {
                let dim = positive(doc.count_or("data", "dim", 15)?, "dim")?;
                let train = positive(doc.count_or("data", "train", 450)?, "train")?;
                let test = positive(doc.count_or("data", "test", 50)?, "test")?;
                let (het_alpha, la) = doc.real_or("data", "het_alpha", 1.0)?;
                let (het_beta, lb) = doc.real_or("data", "het_beta", 1.0)?;
                check(het_alpha >= 0.0, la, "`het_alpha` must be >= 0")?;
                check(het_beta >= 0.0, lb, "`het_beta` must be >= 0")?;
                DataSpec::SyntheticFederated {
                    dim,
                    train,
                    test,
                    het_alpha,
                    het_beta,
                }
            }
            "linear_2d" => {
                let (theta, lt) = doc.real_or("data", "theta", 1.0)?;
                check(theta > 0.0, lt, "`theta` must be positive")?;
                let train = positive(doc.count_or("data", "train", 500)?, "train")?;
                let test = positive(doc.count_or("data", "test", 100)?, "test")?;
                let (noise_var, ln) = doc.real_or("data", "noise_var", 0.01)?;
                check(noise_var >= 0.0, ln, "`noise_var` must be >= 0")?;
                DataSpec::Linear2d {
                    theta,
                    train,
                    test,
                    noise_var,
                }
            }
            "mnist" => {
                let partition = match doc.take("data", "partition") {
                    None => PartitionMode::Hom,
                    Some(e) => PartitionMode::from_name(&e.value)
                        .ok_or_else(|| parse_err(e.line, format!("unknown partition `{}`; expected hom, het2 or het5", e.value)))?,
                };
                let samples_per_agent = positive(doc.count_or("data", "samples_per_agent", 554)?, "samples_per_agent")?;
                let (train_fraction, lf) = doc.real_or("data", "train_fraction", 0.8)?;
                check(
                    train_fraction > 0.0 && train_fraction < 1.0,
                    lf,
                    "`train_fraction` must lie in (0, 1)",
                )?;
                let dir = doc.take("data", "mnist_dir").map(|e| e.value);
                DataSpec::Mnist {
                    dir,
                    partition,
                    samples_per_agent,
                    train_fraction,
                }
            }
            "quadratic" => {
                let dim = positive(doc.count_or("data", "dim", 1)?, "dim")?;
                let (curvature_min, l1) = doc.real_or("data", "curvature_min", 0.5)?;
                let (curvature_max, l2) = doc.real_or("data", "curvature_max", 2.0)?;
                let (center_std, l3) = doc.real_or("data", "center_std", 1.0)?;
                check(curvature_min > 0.0, l1, "`curvature_min` must be positive")?;
                check(curvature_max >= curvature_min, l2, "`curvature_max` must be >= curvature_min")?;
                check(center_std >= 0.0, l3, "`center_std` must be >= 0")?;
                DataSpec::Quadratic {
                    dim,
                    curvature_min,
                    curvature_max,
                    center_std,
                }
            }
            other => {
                return Err(parse_err(kind.line, format!(
                    "unknown data kind `{other}`; expected synthetic_federated, linear_2d, mnist or quadratic"
                )))
            }
        })
    }

    fn parse_attack(doc: &mut Document, n_agents: usize) -> Result<Option<AttackSpec>> {
        if !doc.has_section("attack") {
            return Ok(None);
        }
        let list = doc.take("attack", "malicious");
        let count = doc.count("attack", "malicious_count")?;
        let malicious = match (list, count) {
            (Some(e), None) => {
                let ids: Vec<usize> = parse_list(&e.value, e.line, "an agent id")?;
                if let Some(bad) = ids.iter().find(|&&i| i >= n_agents) {
                    return Err(parse_err(e.line, format!("malicious agent {bad} out of range for {n_agents} agents")));
                }
                let mut unique = ids.clone();
                unique.sort_unstable();
                unique.dedup();
                check(unique.len() == ids.len(), e.line, "malicious agents listed twice")?;
                check(ids.len() < n_agents, e.line, "at least one agent must be honest")?;
                MaliciousSpec::Agents(ids)
            }
            (None, Some((c, line))) => {
                check(c < n_agents, line, "at least one agent must be honest")?;
                MaliciousSpec::Count(c)
            }
            (Some(e), Some(_)) => return Err(parse_err(e.line, "give either `malicious` or `malicious_count`, not both")),
            (None, None) => {
                let line = doc.section_line("attack");
                return Err(parse_err(line, "[attack] needs `malicious` or `malicious_count`"));
            }
        };
        let eta = doc.real("attack", "eta")?;
        let (eta, le) = doc.required(eta, "attack", "eta")?;
        let kappa = doc.real("attack", "kappa")?;
        let (kappa, lk) = doc.required(kappa, "attack", "kappa")?;
        check(eta >= 0.0, le, format!("`eta` must be >= 0, got {eta}"))?;
        check(kappa >= 0.0, lk, format!("`kappa` must be >= 0, got {kappa}"))?;
        let clip = match doc.real("attack", "clip")? {
            Some((t, line)) => {
                check(t >= 0.0, line, "`clip` must be >= 0")?;
                Some(t)
            }
            None => None,
        };
        Ok(Some(AttackSpec {
            malicious,
            eta,
            kappa,
            clip,
        }))
    }

    /// Every field written out explicitly; parsing this text yields `self`.
    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(w, "algorithm = {}", self.algorithm.name());
        match self.alpha {
            AlphaSpec::Auto => {
                let _ = writeln!(w, "alpha = auto");
            }
            AlphaSpec::Safe => {
                let _ = writeln!(w, "alpha = safe");
            }
            AlphaSpec::Value(a) => {
                let _ = writeln!(w, "alpha = {a}");
            }
        }
        match &self.lambda {
            Some(LambdaSpec::Scalar(l)) => {
                let _ = writeln!(w, "lambda = {l}");
            }
            Some(LambdaSpec::PerAgent(v)) => {
                let _ = writeln!(w, "lambda = {}", fmt_list(v));
            }
            None => {}
        }
        let _ = writeln!(w, "iterations = {}", self.iterations);
        let _ = writeln!(w, "gamma = {}", self.gamma);
        let _ = writeln!(w, "update_noise_std = {}", self.update_noise_std);
        if let Some(k) = self.global_loss_subset {
            let _ = writeln!(w, "global_loss_subset = {k}");
        }
        let _ = writeln!(w, "record_every = {}", self.record_every);
        match self.init {
            InitSpec::Zeros => {
                let _ = writeln!(w, "init = zeros");
            }
            InitSpec::Gaussian { std } => {
                let _ = writeln!(w, "init = gaussian:{std}");
            }
        }

        let _ = writeln!(w, "\n[topology]");
        match &self.topology {
            TopologySpec::Ring { agents } => {
                let _ = writeln!(w, "kind = ring\nagents = {agents}");
            }
            TopologySpec::Circulant { agents, half_width } => {
                let _ = writeln!(w, "kind = circulant\nagents = {agents}\nhalf_width = {half_width}");
            }
            TopologySpec::RandomGeometric { agents, radius, seed } => {
                let _ = writeln!(w, "kind = random_geometric\nagents = {agents}\nradius = {radius}\nseed = {seed}");
            }
        }

        let _ = writeln!(w, "\n[data]");
        match &self.data {
            DataSpec::SyntheticFederated {
                dim,
                train,
                test,
                het_alpha,
                het_beta,
            } => {
                let _ = writeln!(
                    w,
                    "kind = synthetic_federated\ndim = {dim}\ntrain = {train}\ntest = {test}\nhet_alpha = {het_alpha}\nhet_beta = {het_beta}"
                );
            }
            DataSpec::Linear2d {
                theta,
                train,
                test,
                noise_var,
            } => {
                let _ = writeln!(w, "kind = linear_2d\ntheta = {theta}\ntrain = {train}\ntest = {test}\nnoise_var = {noise_var}");
            }
            DataSpec::Mnist {
                dir,
                partition,
                samples_per_agent,
                train_fraction,
            } => {
                let _ = writeln!(
                    w,
                    "kind = mnist\npartition = {}\nsamples_per_agent = {samples_per_agent}\ntrain_fraction = {train_fraction}",
                    partition.name()
                );
                if let Some(d) = dir {
                    let _ = writeln!(w, "mnist_dir = {d}");
                }
            }
            DataSpec::Quadratic {
                dim,
                curvature_min,
                curvature_max,
                center_std,
            } => {
                let _ = writeln!(
                    w,
                    "kind = quadratic\ndim = {dim}\ncurvature_min = {curvature_min}\ncurvature_max = {curvature_max}\ncenter_std = {center_std}"
                );
            }
        }

        if let Some(a) = &self.attack {
            let _ = writeln!(w, "\n[attack]");
            match &a.malicious {
                MaliciousSpec::Agents(ids) => {
                    let _ = writeln!(w, "malicious = {}", fmt_list(ids));
                }
                MaliciousSpec::Count(c) => {
                    let _ = writeln!(w, "malicious_count = {c}");
                }
            }
            let _ = writeln!(w, "eta = {}\nkappa = {}", a.eta, a.kappa);
            if let Some(t) = a.clip {
                let _ = writeln!(w, "clip = {t}");
            }
        }
        if let Some(es) = &self.early_stopping {
            let _ = writeln!(w, "\n[early_stopping]\nwindow = {}\npatience = {}", es.window, es.patience);
        }
        let s = &self.seeds;
        let _ = writeln!(
            w,
            "\n[seeds]\ndata = {}\ninit = {}\nattack = {}\nnoise = {}",
            s.data, s.init, s.attack, s.noise
        );
        out
    }

    /// Sets one field from its textual value, as in `lambda = 0.25` or
    /// `data.theta = 0.5`; the result is re-validated.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        let canonical = self.to_canonical_string();
        let mut lines: Vec<String> = Vec::new();
        let mut current = String::new();
        let mut replaced = false;
        let mut section_seen = section.is_empty();
        for line in canonical.lines() {
            let t = line.trim();
            if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                if current == section && !replaced {
                    lines.push(format!("{field} = {value}"));
                    replaced = true;
                }
                current = name.to_string();
                section_seen |= current == section;
            } else if current == section && t.split_once('=').map(|(k, _)| k.trim()) == Some(field) {
                lines.push(format!("{field} = {value}"));
                replaced = true;
                continue;
            }
            lines.push(line.to_string());
        }
        if !replaced {
            if !section_seen {
                lines.push(format!("[{section}]"));
            }
            lines.push(format!("{field} = {value}"));
        }
        Self::parse(&lines.join("\n"))
    }
}

fn fmt_list<T: std::fmt::Display>(values: &[T]) -> String {
    let inner: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    format!("[{}]", inner.join(", "))
}
