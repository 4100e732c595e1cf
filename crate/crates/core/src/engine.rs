//! Synchronous-round iterates: DGD, ATC, exact diffusion, local GD and the
//! two stubborn variants, with optional corrupted messages from malicious
//! agents, additive update noise and per-agent early stopping.
//!
//! Every round is a barrier. Agents read the previous round's published
//! values, update independently (in parallel), then publish. Random draws
//! come from per-agent, per-round streams, so traces do not depend on the
//! number of worker threads.

use std::borrow::Cow;
use std::collections::VecDeque;
use std::fmt::Write as _;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{Objective, ParamBlock};
use crate::rng;
use crate::topology::MixingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    Dgd,
    Atc,
    ExactDiffusion,
    LocalGd,
    FjDgd1,
    FjDgd2,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Dgd,
        Algorithm::Atc,
        Algorithm::ExactDiffusion,
        Algorithm::LocalGd,
        Algorithm::FjDgd1,
        Algorithm::FjDgd2,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Dgd => "dgd",
            Algorithm::Atc => "atc",
            Algorithm::ExactDiffusion => "ed",
            Algorithm::LocalGd => "local_gd",
            Algorithm::FjDgd1 => "fj_dgd_1",
            Algorithm::FjDgd2 => "fj_dgd_2",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    pub fn is_stubborn(&self) -> bool {
        matches!(self, Algorithm::FjDgd1 | Algorithm::FjDgd2)
    }
}

/// Stacked per-agent iterates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoState {
    /// Published / combined iterate.
    pub x: Vec<ParamBlock>,
    /// Local gradient-descent tracker (stubborn variants).
    pub y: Option<Vec<ParamBlock>>,
    /// Consensus tracker (FJ-DGD-2).
    pub z: Option<Vec<ParamBlock>>,
    /// Previous adapt step (exact diffusion).
    pub psi: Option<Vec<ParamBlock>>,
    pub iteration: usize,
}

impl AlgoState {
    pub fn new(algorithm: Algorithm, x0: Vec<ParamBlock>) -> Self {
        let copy = |on: bool| on.then(|| x0.clone());
        Self {
            y: copy(algorithm.is_stubborn()),
            z: copy(algorithm == Algorithm::FjDgd2),
            psi: copy(algorithm == Algorithm::ExactDiffusion),
            x: x0,
            iteration: 0,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.x.len()
    }

    /// Squared distance of `x` to a reference stack.
    pub fn distance_sq(stack: &[ParamBlock], reference: &[ParamBlock]) -> f64 {
        stack.iter().zip(reference).map(|(a, b)| a.dist_sq(b)).sum()
    }

    fn snapshot(&self, i: usize) -> AgentSnapshot {
        AgentSnapshot {
            x: self.x[i].clone(),
            y: self.y.as_ref().map(|v| v[i].clone()),
            z: self.z.as_ref().map(|v| v[i].clone()),
            psi: self.psi.as_ref().map(|v| v[i].clone()),
        }
    }

    fn restore(&mut self, i: usize, snap: AgentSnapshot) {
        self.x[i] = snap.x;
        if let (Some(v), Some(s)) = (self.y.as_mut(), snap.y) {
            v[i] = s;
        }
        if let (Some(v), Some(s)) = (self.z.as_mut(), snap.z) {
            v[i] = s;
        }
        if let (Some(v), Some(s)) = (self.psi.as_mut(), snap.psi) {
            v[i] = s;
        }
    }

    fn check_finite(&self) -> Result<()> {
        let stacks = [Some(&self.x), self.y.as_ref(), self.z.as_ref(), self.psi.as_ref()];
        for stack in stacks.into_iter().flatten() {
            if let Some(agent) = stack.iter().position(|b| !b.is_finite()) {
                return Err(Error::Divergence {
                    iteration: self.iteration,
                    agent,
                });
            }
        }
        Ok(())
    }
}

/// Full per-agent state, used for early-stopping snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSnapshot {
    pub x: ParamBlock,
    pub y: Option<ParamBlock>,
    pub z: Option<ParamBlock>,
    pub psi: Option<ParamBlock>,
}

/// Per-agent stubbornness, each entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubbornnessProfile {
    lambdas: Vec<f64>,
}

impl StubbornnessProfile {
    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if let Some(bad) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::Config(format!("stubbornness {bad} outside [0, 1]")));
        }
        Ok(Self { lambdas })
    }

    pub fn uniform(n_agents: usize, lambda: f64) -> Result<Self> {
        Self::new(vec![lambda; n_agents])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn min(&self) -> f64 {
        self.lambdas.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Stealthy attack: malicious agents train honestly but publish
/// `x + v`, `v ~ N(0, diag(min(eta |x|, kappa)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub malicious: Vec<usize>,
    pub eta: f64,
    pub kappa: f64,
    pub seed: u64,
    /// When set, the stacked perturbation of a round is rescaled onto the
    /// ball of this radius.
    pub clip: Option<f64>,
}

impl AttackConfig {
    pub fn validate(&self, n_agents: usize) -> Result<()> {
        if !(self.eta >= 0.0 && self.kappa >= 0.0) {
            return Err(Error::Config(format!(
                "eta and kappa must be >= 0, got eta = {}, kappa = {}",
                self.eta, self.kappa
            )));
        }
        if let Some(&bad) = self.malicious.iter().find(|&&m| m >= n_agents) {
            return Err(Error::Config(format!("malicious agent {bad} out of range")));
        }
        let mut sorted = self.malicious.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() >= n_agents {
            return Err(Error::Config("at least one agent must be honest".into()));
        }
        if matches!(self.clip, Some(t) if !(t >= 0.0)) {
            return Err(Error::Config("clip radius must be >= 0".into()));
        }
        Ok(())
    }

    pub fn mask(&self, n_agents: usize) -> Vec<bool> {
        let mut mask = vec![false; n_agents];
        for &m in &self.malicious {
            mask[m] = true;
        }
        mask
    }
}

/// `x + v` with `v_e ~ N(0, min(eta |x_e|, kappa))` entrywise.
pub fn corrupt_message<R: rand::Rng + ?Sized>(
    x: &ParamBlock,
    eta: f64,
    kappa: f64,
    rng: &mut R,
) -> Result<ParamBlock> {
    if !(eta >= 0.0 && kappa >= 0.0) {
        return Err(Error::Config(format!(
            "eta and kappa must be >= 0, got eta = {eta}, kappa = {kappa}"
        )));
    }
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(ParamBlock(x.0.mapv(|v| {
        let variance = (eta * v.abs()).min(kappa);
        v + variance.sqrt() * std_normal.sample(rng)
    })))
}

struct Exchange<'a> {
    malicious: &'a [bool],
    // Published copies of malicious senders; `None` for honest ones.
    corrupted: Vec<Option<ParamBlock>>,
    perturbation_norm: f64,
}

impl Exchange<'_> {
    fn honest() -> Exchange<'static> {
        Exchange {
            malicious: &[],
            corrupted: Vec::new(),
            perturbation_norm: 0.0,
        }
    }

    fn is_malicious(&self, i: usize) -> bool {
        self.malicious.get(i).copied().unwrap_or(false)
    }
}

/// `sum_j w_ij v_j`; honest receivers see corrupted copies from malicious
/// neighbours, everyone uses their own clean value on the diagonal.
fn mix(w: &MixingMatrix, i: usize, values: &[ParamBlock], exchange: &Exchange<'_>) -> ParamBlock {
    let honest_receiver = !exchange.is_malicious(i);
    let mut acc = ParamBlock(Array2::zeros(values[i].0.raw_dim()));
    for &(j, wij) in w.row(i) {
        let v = match exchange.corrupted.get(j) {
            Some(Some(c)) if j != i && honest_receiver => c,
            _ => &values[j],
        };
        acc.0.scaled_add(wij, &v.0);
    }
    acc
}

fn gradient<O: Objective>(o: &O, x: &ParamBlock, iteration: usize, agent: usize) -> Result<ParamBlock> {
    let g = o.gradient(x)?;
    if !g.is_finite() {
        return Err(Error::Divergence { iteration, agent });
    }
    Ok(g)
}

fn descend<O: Objective>(o: &O, x: &ParamBlock, alpha: f64, iteration: usize, agent: usize) -> Result<ParamBlock> {
    let mut next = x.clone();
    next.axpy(-alpha, &gradient(o, x, iteration, agent)?);
    Ok(next)
}

struct Round<'a, O> {
    algorithm: Algorithm,
    w: &'a MixingMatrix,
    w_lazy: Option<&'a MixingMatrix>,
    alpha: f64,
    objectives: &'a [O],
    lambdas: &'a [f64],
    frozen: &'a [bool],
}

fn check_inputs<O: Objective>(state: &AlgoState, w: Option<&MixingMatrix>, alpha: f64, objectives: &[O]) -> Result<()> {
    let n = state.n_agents();
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("step size must be positive, got {alpha}")));
    }
    if objectives.len() != n {
        return Err(Error::shape(format!("{n} objectives"), objectives.len()));
    }
    if let Some(w) = w {
        if w.n_agents() != n {
            return Err(Error::shape(format!("{n}x{n} mixing matrix"), w.n_agents()));
        }
    }
    Ok(())
}

impl<'a, O: Objective> Round<'a, O> {
    fn values<'s>(&self, state: &'s AlgoState) -> Result<(Cow<'s, [ParamBlock]>, Option<Vec<ParamBlock>>)> {
        let k = state.iteration;
        let adapt = |i: usize| descend(&self.objectives[i], &state.x[i], self.alpha, k, i);
        Ok(match self.algorithm {
            Algorithm::Dgd | Algorithm::FjDgd1 | Algorithm::LocalGd => (Cow::Borrowed(&state.x[..]), None),
            Algorithm::FjDgd2 => (Cow::Borrowed(&state.z.as_ref().expect("z tracker")[..]), None),
            Algorithm::Atc => {
                let psi = (0..state.n_agents()).into_par_iter().map(adapt).collect::<Result<Vec<_>>>()?;
                (Cow::Owned(psi), None)
            }
            Algorithm::ExactDiffusion => {
                let psi = (0..state.n_agents()).into_par_iter().map(adapt).collect::<Result<Vec<_>>>()?;
                let prev = state.psi.as_ref().expect("exact diffusion memory");
                let phi = psi
                    .iter()
                    .zip(&state.x)
                    .zip(prev)
                    .map(|((p, x), q)| {
                        let mut v = p.clone();
                        v.axpy(1.0, x);
                        v.axpy(-1.0, q);
                        v
                    })
                    .collect();
                (Cow::Owned(phi), Some(psi))
            }
        })
    }

    fn advance(&self, state: &AlgoState, exchange: &Exchange<'_>, values: &[ParamBlock], psi: Option<&[ParamBlock]>) -> Result<AlgoState> {
        let k = state.iteration;
        let n = state.n_agents();
        let alpha = self.alpha;
        let next: Vec<AgentSnapshot> = (0..n)
            .into_par_iter()
            .map(|i| -> Result<AgentSnapshot> {
                if self.frozen.get(i).copied().unwrap_or(false) {
                    return Ok(state.snapshot(i));
                }
                let o = &self.objectives[i];
                let lambda = if exchange.is_malicious(i) { 0.0 } else { self.lambdas.get(i).copied().unwrap_or(0.0) };
                let mut snap = AgentSnapshot {
                    x: state.x[i].clone(),
                    y: None,
                    z: None,
                    psi: None,
                };
                match self.algorithm {
                    Algorithm::Dgd => {
                        let mut v = mix(self.w, i, values, exchange);
                        v.axpy(-alpha, &gradient(o, &state.x[i], k, i)?);
                        snap.x = v;
                    }
                    Algorithm::Atc => snap.x = mix(self.w, i, values, exchange),
                    Algorithm::ExactDiffusion => {
                        snap.x = mix(self.w_lazy.expect("lazy mixing matrix"), i, values, exchange);
                        snap.psi = psi.map(|p| p[i].clone());
                    }
                    Algorithm::LocalGd => snap.x = descend(o, &state.x[i], alpha, k, i)?,
                    Algorithm::FjDgd1 => {
                        let y = descend(o, &state.y.as_ref().expect("y tracker")[i], alpha, k, i)?;
                        let mut v = mix(self.w, i, values, exchange);
                        v.axpy(-alpha, &gradient(o, &state.x[i], k, i)?);
                        snap.x = ParamBlock::convex(lambda, &y, &v);
                        snap.y = Some(y);
                    }
                    Algorithm::FjDgd2 => {
                        let y = descend(o, &state.y.as_ref().expect("y tracker")[i], alpha, k, i)?;
                        let mut z = mix(self.w, i, values, exchange);
                        z.axpy(-alpha, &gradient(o, &state.z.as_ref().expect("z tracker")[i], k, i)?);
                        snap.x = ParamBlock::convex(lambda, &y, &z);
                        snap.y = Some(y);
                        snap.z = Some(z);
                    }
                }
                Ok(snap)
            })
            .collect::<Result<_>>()?;

        let mut out = AlgoState {
            x: Vec::with_capacity(n),
            y: state.y.as_ref().map(|_| Vec::with_capacity(n)),
            z: state.z.as_ref().map(|_| Vec::with_capacity(n)),
            psi: state.psi.as_ref().map(|_| Vec::with_capacity(n)),
            iteration: k + 1,
        };
        for s in next {
            out.x.push(s.x);
            if let (Some(v), Some(b)) = (out.y.as_mut(), s.y) {
                v.push(b);
            }
            if let (Some(v), Some(b)) = (out.z.as_mut(), s.z) {
                v.push(b);
            }
            if let (Some(v), Some(b)) = (out.psi.as_mut(), s.psi) {
                v.push(b);
            }
        }
        out.check_finite()?;
        Ok(out)
    }

    fn step(&self, state: &AlgoState, attack: Option<(&AttackConfig, &[bool])>) -> Result<(AlgoState, f64)> {
        check_inputs(state, Some(self.w), self.alpha, self.objectives)?;
        let (values, psi) = self.values(state)?;
        let exchange = match attack {
            Some((cfg, mask)) if self.algorithm != Algorithm::LocalGd => corrupt_round(cfg, mask, &values, state.iteration)?,
            _ => Exchange::honest(),
        };
        let next = self.advance(state, &exchange, &values, psi.as_deref())?;
        Ok((next, exchange.perturbation_norm))
    }
}

fn corrupt_round<'m>(cfg: &AttackConfig, mask: &'m [bool], values: &[ParamBlock], round: usize) -> Result<Exchange<'m>> {
    let mut corrupted: Vec<Option<ParamBlock>> = vec![None; values.len()];
    let mut norm_sq = 0.0;
    for (j, v) in values.iter().enumerate().filter(|(j, _)| mask[*j]) {
        let mut r = rng::stream(cfg.seed, &[rng::TAG_ATTACK, j as u64, round as u64]);
        let msg = corrupt_message(v, cfg.eta, cfg.kappa, &mut r)?;
        norm_sq += msg.dist_sq(v);
        corrupted[j] = Some(msg);
    }
    let mut norm = norm_sq.sqrt();
    if let Some(tau) = cfg.clip {
        if norm > tau {
            let scale = tau / norm;
            for (j, slot) in corrupted.iter_mut().enumerate() {
                if let Some(msg) = slot {
                    let clean = &values[j];
                    let e = (&msg.0 - &clean.0) * scale;
                    *msg = ParamBlock(&clean.0 + &e);
                }
            }
            norm = tau;
        }
    }
    Ok(Exchange {
        malicious: mask,
        corrupted,
        perturbation_norm: norm,
    })
}

/// One round of `x <- W x - alpha grad f(x)`.
pub fn step_dgd<O: Objective>(state: &AlgoState, w: &MixingMatrix, alpha: f64, objectives: &[O]) -> Result<AlgoState> {
    plain_round(Algorithm::Dgd, state, w, alpha, &[], objectives)
}

/// One round of `x <- W (x - alpha grad f(x))`.
pub fn step_atc<O: Objective>(state: &AlgoState, w: &MixingMatrix, alpha: f64, objectives: &[O]) -> Result<AlgoState> {
    plain_round(Algorithm::Atc, state, w, alpha, &[], objectives)
}

/// Per-agent gradient descent, no communication.
pub fn step_local_gd<O: Objective>(state: &AlgoState, alpha: f64, objectives: &[O]) -> Result<AlgoState> {
    check_inputs(state, None, alpha, objectives)?;
    let w = MixingMatrix::identity(state.n_agents());
    plain_round(Algorithm::LocalGd, state, &w, alpha, &[], objectives)
}

/// Exact diffusion: adapt `psi = x - alpha grad f(x)`, correct
/// `phi = psi + x - psi_prev`, combine with `(W + I) / 2`.
pub fn step_exact_diffusion<O: Objective>(state: &AlgoState, w: &MixingMatrix, alpha: f64, objectives: &[O]) -> Result<AlgoState> {
    if state.psi.is_none() {
        return Err(Error::ContractViolation("exact diffusion state needs its psi memory".into()));
    }
    plain_round(Algorithm::ExactDiffusion, state, w, alpha, &[], objectives)
}

/// `y <- y - alpha grad f(y)`; `x <- L y + (I - L)(W x - alpha grad f(x))`.
pub fn step_fj_dgd_1<O: Objective>(
    state: &AlgoState,
    w: &MixingMatrix,
    alpha: f64,
    lambdas: &StubbornnessProfile,
    objectives: &[O],
) -> Result<AlgoState> {
    if state.y.is_none() {
        return Err(Error::ContractViolation("FJ-DGD-1 state needs its y tracker".into()));
    }
    check_lambdas(lambdas, state.n_agents())?;
    plain_round(Algorithm::FjDgd1, state, w, alpha, lambdas.as_slice(), objectives)
}

/// `y <- y - alpha grad f(y)`; `z <- W z - alpha grad f(z)`; `x <- L y + (I - L) z`.
pub fn step_fj_dgd_2<O: Objective>(
    state: &AlgoState,
    w: &MixingMatrix,
    alpha: f64,
    lambdas: &StubbornnessProfile,
    objectives: &[O],
) -> Result<AlgoState> {
    if state.y.is_none() || state.z.is_none() {
        return Err(Error::ContractViolation("FJ-DGD-2 state needs y and z trackers".into()));
    }
    check_lambdas(lambdas, state.n_agents())?;
    plain_round(Algorithm::FjDgd2, state, w, alpha, lambdas.as_slice(), objectives)
}

/// FJ-DGD-2 with an explicit stacked perturbation entering through the
/// mixing step: `z <- W z - alpha grad f(z) + W e`.
pub fn step_fj_dgd_n<O: Objective>(
    state: &AlgoState,
    w: &MixingMatrix,
    alpha: f64,
    lambdas: &StubbornnessProfile,
    objectives: &[O],
    perturbation: &[ParamBlock],
) -> Result<AlgoState> {
    let n = state.n_agents();
    if perturbation.len() != n {
        return Err(Error::shape(format!("{n} perturbation blocks"), perturbation.len()));
    }
    let z = state
        .z
        .as_ref()
        .ok_or_else(|| Error::ContractViolation("FJ-DGD-N state needs y and z trackers".into()))?;
    let mut shifted = state.clone();
    shifted.z = Some(
        z.iter()
            .zip(perturbation)
            .map(|(zi, ei)| {
                let mut v = zi.clone();
                v.axpy(1.0, ei);
                v
            })
            .collect(),
    );
    // W (z + e) - alpha grad f(z): gradients must see the unperturbed z.
    check_lambdas(lambdas, n)?;
    check_inputs(state, Some(w), alpha, objectives)?;
    let k = state.iteration;
    let values = shifted.z.as_ref().expect("z tracker");
    let exchange = Exchange::honest();
    let next: Vec<(ParamBlock, ParamBlock, ParamBlock)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let o = &objectives[i];
            let y = descend(o, &state.y.as_ref().expect("y tracker")[i], alpha, k, i)?;
            let mut zi = mix(w, i, values, &exchange);
            zi.axpy(-alpha, &gradient(o, &z[i], k, i)?);
            let x = ParamBlock::convex(lambdas.as_slice()[i], &y, &zi);
            Ok((x, y, zi))
        })
        .collect::<Result<_>>()?;
    let mut out = AlgoState {
        x: Vec::with_capacity(n),
        y: Some(Vec::with_capacity(n)),
        z: Some(Vec::with_capacity(n)),
        psi: None,
        iteration: k + 1,
    };
    for (x, y, z) in next {
        out.x.push(x);
        out.y.as_mut().expect("y").push(y);
        out.z.as_mut().expect("z").push(z);
    }
    out.check_finite()?;
    Ok(out)
}

fn check_lambdas(lambdas: &StubbornnessProfile, n: usize) -> Result<()> {
    if lambdas.as_slice().len() != n {
        return Err(Error::Config(format!(
            "{} stubbornness values for {n} agents",
            lambdas.as_slice().len()
        )));
    }
    Ok(())
}

fn plain_round<O: Objective>(
    algorithm: Algorithm,
    state: &AlgoState,
    w: &MixingMatrix,
    alpha: f64,
    lambdas: &[f64],
    objectives: &[O],
) -> Result<AlgoState> {
    let lazy = (algorithm == Algorithm::ExactDiffusion).then(|| w.lazy());
    let round = Round {
        algorithm,
        w,
        w_lazy: lazy.as_ref(),
        alpha,
        objectives,
        lambdas,
        frozen: &[],
    };
    Ok(round.step(state, None)?.0)
}

/// Moving-average watchdog over an agent's local training accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopState<P> {
    pub window: usize,
    pub patience: usize,
    pub accuracy_history: VecDeque<f64>,
    pub best_ma: f64,
    pub best_params: Option<P>,
    pub stall_count: usize,
    pub stopped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EarlyStopEvent<P> {
    Continue,
    /// Training stops now; the caller restores these parameters.
    Stop(P),
    AlreadyStopped,
}

impl<P: Clone> EarlyStopState<P> {
    pub fn new(window: usize, patience: usize) -> Result<Self> {
        if window == 0 || patience == 0 {
            return Err(Error::Config("early-stopping window and patience must be positive".into()));
        }
        Ok(Self {
            window,
            patience,
            accuracy_history: VecDeque::with_capacity(window),
            best_ma: f64::NEG_INFINITY,
            best_params: None,
            stall_count: 0,
            stopped: false,
        })
    }

    /// Pushes one accuracy observation taken at `current`.
    pub fn update(&mut self, train_accuracy: f64, current: &P) -> EarlyStopEvent<P> {
        if self.stopped {
            return EarlyStopEvent::AlreadyStopped;
        }
        if self.accuracy_history.len() == self.window {
            self.accuracy_history.pop_front();
        }
        self.accuracy_history.push_back(train_accuracy);
        if self.accuracy_history.len() < self.window {
            return EarlyStopEvent::Continue;
        }
        let ma = self.accuracy_history.iter().sum::<f64>() / self.window as f64;
        if ma > self.best_ma {
            self.best_ma = ma;
            self.best_params = Some(current.clone());
            self.stall_count = 0;
            return EarlyStopEvent::Continue;
        }
        self.stall_count += 1;
        if self.stall_count > self.patience {
            self.stopped = true;
            return EarlyStopEvent::Stop(self.best_params.clone().expect("snapshot taken when the window filled"));
        }
        EarlyStopEvent::Continue
    }
}

pub fn early_stop_update<P: Clone>(mut es: EarlyStopState<P>, train_accuracy: f64, current: &P) -> (EarlyStopState<P>, EarlyStopEvent<P>) {
    let event = es.update(train_accuracy, current);
    (es, event)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EarlyStopParams {
    pub window: usize,
    pub patience: usize,
}

/// Metrics of one agent at one recorded iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    pub local_train_loss: f64,
    pub global_train_loss: f64,
    pub local_train_acc: f64,
    pub local_test_acc: f64,
    pub global_test_acc: f64,
}

/// Evaluates agents' models for the metrics trace.
pub trait Evaluator: Sync {
    fn evaluate(&self, agent: usize, x: &ParamBlock) -> Result<AgentMetrics>;
    fn train_accuracy(&self, agent: usize, x: &ParamBlock) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub agent: usize,
    pub metrics: AgentMetrics,
    pub stopped: bool,
}

pub const TRACE_HEADER: &str =
    "iteration,agent,local_train_loss,global_train_loss,local_train_acc,local_test_acc,global_test_acc,stopped";

/// Per-iteration, per-agent record of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub n_agents: usize,
    /// `true` for agents that publish corrupted messages.
    pub malicious: Vec<bool>,
    pub rows: Vec<TraceRow>,
}

impl MetricsTrace {
    pub fn honest_agents(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_agents).filter(|&i| !self.malicious.get(i).copied().unwrap_or(false))
    }

    pub fn last_iteration(&self) -> Option<usize> {
        self.rows.last().map(|r| r.iteration)
    }

    pub fn rows_at(&self, iteration: usize) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(move |r| r.iteration == iteration)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iteration,
                r.agent,
                m.local_train_loss,
                m.global_train_loss,
                m.local_train_acc,
                m.local_test_acc,
                m.global_test_acc,
                r.stopped
            );
        }
        out
    }

    /// Parses a trace written by [`MetricsTrace::to_csv`]; every agent is
    /// taken as honest unless a mask is supplied.
    pub fn from_csv(text: &str, malicious: Option<Vec<bool>>) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == TRACE_HEADER => {}
            _ => return Err(Error::Format("missing trace header".into())),
        }
        let mut rows = Vec::new();
        for (n, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| Error::Parse {
                line: n + 1,
                message: format!("bad {what}"),
            };
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 8 {
                return Err(bad("column count"));
            }
            let f = |c: usize| cells[c].parse::<f64>().map_err(|_| bad("number"));
            rows.push(TraceRow {
                iteration: cells[0].parse().map_err(|_| bad("iteration"))?,
                agent: cells[1].parse().map_err(|_| bad("agent"))?,
                metrics: AgentMetrics {
                    local_train_loss: f(2)?,
                    global_train_loss: f(3)?,
                    local_train_acc: f(4)?,
                    local_test_acc: f(5)?,
                    global_test_acc: f(6)?,
                },
                stopped: cells[7].parse().map_err(|_| bad("stopped flag"))?,
            });
        }
        let n_agents = rows.iter().map(|r| r.agent + 1).max().unwrap_or(0);
        Ok(Self {
            n_agents,
            malicious: malicious.unwrap_or_else(|| vec![false; n_agents]),
            rows,
        })
    }
}

/// Everything a run needs besides objectives, evaluator and `x0`.
#[derive(Debug, Clone)]
pub struct SimulationSetup {
    pub algorithm: Algorithm,
    pub mixing: MixingMatrix,
    pub alpha: f64,
    pub lambdas: StubbornnessProfile,
    pub iterations: usize,
    pub attack: Option<AttackConfig>,
    /// Standard deviation of Gaussian noise added to published iterates after each round.
    pub update_noise_std: f64,
    pub noise_seed: u64,
    pub early_stopping: Option<EarlyStopParams>,
    /// Metrics are recorded at iteration 0, every `record_every` rounds, and at the end.
    pub record_every: usize,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub trace: MetricsTrace,
    pub final_state: AlgoState,
    /// Largest stacked perturbation norm injected in any round.
    pub max_perturbation_norm: f64,
}

/// Runs `setup.iterations` synchronous rounds from `x0`. The observer sees
/// the state after every round (and the initial state) together with the
/// norm of the perturbation injected during that round.
pub fn simulate<O, E, F>(
    objectives: &[O],
    evaluator: &E,
    setup: &SimulationSetup,
    x0: Vec<ParamBlock>,
    mut observer: F,
) -> Result<SimulationOutput>
where
    O: Objective,
    E: Evaluator,
    F: FnMut(&AlgoState, f64),
{
    let n = x0.len();
    if setup.record_every == 0 {
        return Err(Error::Config("record_every must be positive".into()));
    }
    if !(setup.update_noise_std >= 0.0) {
        return Err(Error::Config("update noise std must be >= 0".into()));
    }
    check_lambdas(&setup.lambdas, n)?;
    if let Some(a) = &setup.attack {
        a.validate(n)?;
    }
    let malicious = setup.attack.as_ref().map(|a| a.mask(n)).unwrap_or_else(|| vec![false; n]);
    let mut watchdogs: Vec<Option<EarlyStopState<AgentSnapshot>>> = (0..n)
        .map(|i| match setup.early_stopping {
            Some(p) if !malicious[i] => EarlyStopState::new(p.window, p.patience).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;
    let mut frozen = vec![false; n];
    let lazy = (setup.algorithm == Algorithm::ExactDiffusion).then(|| setup.mixing.lazy());
    let round = Round {
        algorithm: setup.algorithm,
        w: &setup.mixing,
        w_lazy: lazy.as_ref(),
        alpha: setup.alpha,
        objectives,
        lambdas: setup.lambdas.as_slice(),
        frozen: &[],
    };

    let mut trace = MetricsTrace {
        n_agents: n,
        malicious: malicious.clone(),
        rows: Vec::new(),
    };
    let record = |trace: &mut MetricsTrace, state: &AlgoState, frozen: &[bool]| -> Result<()> {
        let metrics: Vec<AgentMetrics> = (0..n)
            .into_par_iter()
            .map(|i| evaluator.evaluate(i, &state.x[i]))
            .collect::<Result<_>>()?;
        trace.rows.extend(metrics.into_iter().enumerate().map(|(agent, metrics)| TraceRow {
            iteration: state.iteration,
            agent,
            metrics,
            stopped: frozen[agent],
        }));
        Ok(())
    };

    let mut state = AlgoState::new(setup.algorithm, x0);
    state.check_finite()?;
    observer(&state, 0.0);
    record(&mut trace, &state, &frozen)?;
    let attack = setup.attack.as_ref().map(|a| (a, &malicious[..]));
    let mut max_perturbation: f64 = 0.0;

    for _ in 0..setup.iterations {
        let r = Round { frozen: &frozen, ..round_ref(&round) };
        let (mut next, perturbation) = match r.step(&state, attack) {
            Ok(v) => v,
            Err(e @ Error::Divergence { .. }) => return Err(diverged(e, trace)),
            Err(e) => return Err(e),
        };
        max_perturbation = max_perturbation.max(perturbation);
        if setup.update_noise_std > 0.0 {
            add_update_noise(&mut next, setup, &frozen);
            if let Err(e) = next.check_finite() {
                return Err(diverged(e, trace));
            }
        }
        if setup.early_stopping.is_some() {
            let accs: Vec<Option<f64>> = (0..n)
                .into_par_iter()
                .map(|i| match (&watchdogs[i], frozen[i]) {
                    (Some(_), false) => evaluator.train_accuracy(i, &next.x[i]).map(Some),
                    _ => Ok(None),
                })
                .collect::<Result<_>>()?;
            for (i, acc) in accs.into_iter().enumerate() {
                let (Some(acc), Some(dog)) = (acc, watchdogs[i].as_mut()) else { continue };
                if let EarlyStopEvent::Stop(snap) = dog.update(acc, &next.snapshot(i)) {
                    next.restore(i, snap);
                    frozen[i] = true;
                }
            }
        }
        state = next;
        observer(&state, perturbation);
        let k = state.iteration;
        if k % setup.record_every == 0 || k == setup.iterations {
            record(&mut trace, &state, &frozen)?;
        }
    }
    Ok(SimulationOutput {
        trace,
        final_state: state,
        max_perturbation_norm: max_perturbation,
    })
}

fn round_ref<'a, O>(r: &Round<'a, O>) -> Round<'a, O> {
    Round {
        algorithm: r.algorithm,
        w: r.w,
        w_lazy: r.w_lazy,
        alpha: r.alpha,
        objectives: r.objectives,
        lambdas: r.lambdas,
        frozen: r.frozen,
    }
}

fn diverged(e: Error, trace: MetricsTrace) -> Error {
    match e {
        Error::Divergence { iteration, agent } => Error::DivergedRun {
            iteration,
            agent,
            trace: Box::new(trace),
        },
        other => other,
    }
}

fn add_update_noise(state: &mut AlgoState, setup: &SimulationSetup, frozen: &[bool]) {
    let noise = Normal::new(0.0, setup.update_noise_std).expect("finite std");
    let round = state.iteration as u64;
    let perturb = |block: &mut ParamBlock, agent: usize, tag: u64| {
        let mut r = rng::stream(setup.noise_seed, &[rng::TAG_NOISE, agent as u64, round, tag]);
        block.0.mapv_inplace(|v| v + noise.sample(&mut r));
    };
    for i in (0..state.n_agents()).filter(|&i| !frozen[i]) {
        perturb(&mut state.x[i], i, 0);
        if let Some(z) = state.z.as_mut() {
            perturb(&mut z[i], i, 1);
        }
    }
}

const CHECKPOINT_MAGIC: &str = "# fjdgd-checkpoint v1";

/// Checkpoint layout (CSV): a magic line, `iteration,<k>`, then one line per
/// entry `variable,agent,row,col,value` with `variable` in `x|y|z|psi`.
/// Values use shortest round-trip formatting, so restore is exact.
pub fn checkpoint_to_csv(state: &AlgoState) -> String {
    let mut out = format!("{CHECKPOINT_MAGIC}\niteration,{}\n", state.iteration);
    let stacks = [("x", Some(&state.x)), ("y", state.y.as_ref()), ("z", state.z.as_ref()), ("psi", state.psi.as_ref())];
    for (name, stack) in stacks {
        let Some(stack) = stack else { continue };
        for (agent, block) in stack.iter().enumerate() {
            for ((r, c), v) in block.0.indexed_iter() {
                let _ = writeln!(out, "{name},{agent},{r},{c},{v}");
            }
        }
    }
    out
}

pub fn checkpoint_from_csv(text: &str) -> Result<AlgoState> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l.trim()) != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let iteration = match lines.next() {
        Some((_, l)) => l
            .strip_prefix("iteration,")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Parse { line: 2, message: "expected `iteration,<k>`".into() })?,
        None => return Err(Error::Format("truncated checkpoint".into())),
    };
    type Entries = Vec<(usize, usize, usize, f64)>;
    let mut entries: [Entries; 4] = Default::default();
    for (n, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Parse { line: n + 1, message: format!("bad checkpoint entry `{line}`") };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(bad());
        }
        let slot = match cells[0] {
            "x" => 0,
            "y" => 1,
            "z" => 2,
            "psi" => 3,
            _ => return Err(bad()),
        };
        let parse = |c: &str| c.parse::<usize>().map_err(|_| bad());
        entries[slot].push((parse(cells[1])?, parse(cells[2])?, parse(cells[3])?, cells[4].parse().map_err(|_| bad())?));
    }
    let build = |e: &Entries| -> Option<Vec<ParamBlock>> {
        if e.is_empty() {
            return None;
        }
        let agents = e.iter().map(|t| t.0).max()? + 1;
        let rows = e.iter().map(|t| t.1).max()? + 1;
        let cols = e.iter().map(|t| t.2).max()? + 1;
        let mut stack = vec![ParamBlock::zeros(rows, cols); agents];
        for &(a, r, c, v) in e {
            stack[a].0[[r, c]] = v;
        }
        Some(stack)
    };
    let x = build(&entries[0]).ok_or_else(|| Error::Format("checkpoint has no x entries".into()))?;
    Ok(AlgoState {
        x,
        y: build(&entries[1]),
        z: build(&entries[2]),
        psi: build(&entries[3]),
        iteration,
    })
}
