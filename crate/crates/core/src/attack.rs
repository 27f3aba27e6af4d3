//! Malicious clients: the two-phase assembly attacker, a naive scaled
//! attacker, and a data-poisoning baseline.
//!
//! The assembly attacker builds a target adapter offline, then each round
//! pushes `A` and `B` separately toward it while staying inside a ball around
//! its previous submission and a ball around the broadcast, with radii
//! estimated from a short shadow run of honest training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{
    effective_batch, local_train_stream, ClientAgent, ClientKind, RoundContext, Submission,
};
use crate::lora::{self, Factor, LoraStack};
use crate::matrix::Matrix;
use crate::projection::{self, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::rng::{self, Role};
use crate::task::{self, ClientDataset, TaskSpec};

/// Which point the temporal bound measures the shadow step from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalReference {
    /// Distance from the attacker's own previous submission to the
    /// extrapolated honest update, i.e. the displacement an honest client
    /// starting where the attacker stands would make this round.
    #[default]
    Previous,
    /// Length of the extrapolated honest step from the broadcast.
    Broadcast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapParams {
    pub kappa: f64,
    pub lambda: f64,
    pub phase1_steps: usize,
    pub phase1_lr: f64,
    pub epsilon_min: f64,
    /// SGD steps in the per-round shadow run; its displacement is scaled up
    /// to the honest `local_steps`.
    pub shadow_steps: usize,
    pub temporal_reference: TemporalReference,
}

impl Default for GapParams {
    fn default() -> Self {
        Self {
            kappa: 1.5,
            lambda: 1.0,
            phase1_steps: 2000,
            phase1_lr: 5e-3,
            epsilon_min: 1e-6,
            shadow_steps: 2,
            temporal_reference: TemporalReference::Previous,
        }
    }
}

impl GapParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, why: &str| Err(Error::Config(format!("gap.{f}: {why}")));
        if !(self.kappa >= 1.0 && self.kappa.is_finite()) {
            return bad("kappa", "must be a finite value >= 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be finite and nonnegative");
        }
        if !(self.phase1_lr > 0.0 && self.phase1_lr.is_finite()) {
            return bad("phase1_lr", "must be positive");
        }
        if !(self.epsilon_min > 0.0 && self.epsilon_min.is_finite()) {
            return bad("epsilon_min", "must be positive");
        }
        if self.shadow_steps == 0 {
            return bad("shadow_steps", "must be at least 1");
        }
        Ok(())
    }
}

/// Offline target adapters and how well they fit.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackTarget {
    pub stack: LoraStack,
    pub trigger_loss_weight: f64,
    pub phase1_steps: usize,
    pub phase1_lr: f64,
    pub initial_trigger_loss: f64,
    pub trigger_loss: f64,
    pub benign_loss: f64,
    pub op_count: u64,
}

/// Phase I: full-batch SGD from a fresh stack on
/// `λ · trigger loss + benign loss`.
pub fn build_target(
    task: &TaskSpec,
    benign: &ClientDataset,
    params: &GapParams,
    init_seed: u64,
) -> Result<AttackTarget> {
    if task.trigger_inputs.is_empty() {
        return Err(Error::Usage(
            "build_target needs a nonempty trigger set".into(),
        ));
    }
    if benign.is_empty() {
        return Err(Error::Usage("build_target needs benign samples".into()));
    }
    let config = &task.config;
    let mut stack = lora::init_stack(config, init_seed, u64::MAX)?;
    let trig = |s: &LoraStack| task::loss(task, s, &task.trigger_inputs, &task.trigger_outputs);
    let initial = trig(&stack)?;
    for _ in 0..params.phase1_steps {
        let t = task::loss_and_grads(task, &stack, &task.trigger_inputs, &task.trigger_outputs)?;
        let b = task::loss_and_grads(task, &stack, &benign.inputs, &benign.labels)?;
        let mut g = b.grads;
        for (gl, tl) in g.adapters_mut().iter_mut().zip(t.grads.adapters()) {
            gl.a.add_scaled(params.lambda, &tl.a)?;
            gl.b.add_scaled(params.lambda, &tl.b)?;
        }
        task::sgd_update(&mut stack, &g, params.phase1_lr)?;
    }
    let last = trig(&stack)?;
    if !(last <= initial) {
        return Err(Error::PhaseOne { initial, last });
    }
    let samples = task.trigger_inputs.len() + benign.len();
    Ok(AttackTarget {
        benign_loss: task::loss(task, &stack, &benign.inputs, &benign.labels)?,
        stack,
        trigger_loss_weight: params.lambda,
        phase1_steps: params.phase1_steps,
        phase1_lr: params.phase1_lr,
        initial_trigger_loss: initial,
        trigger_loss: last,
        op_count: task::ops::local_train(config, params.phase1_steps, samples),
    })
}

/// `n·target − (n−1)·μ̂`: the submission that moves the mean of itself and
/// `n−1` copies of `μ̂` exactly onto `target`.
pub fn unconstrained_optimum(target: &Matrix, mu_hat: &Matrix, n: usize) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Usage("unconstrained_optimum needs n >= 1".into()));
    }
    let mut out = target.scale(n as f64);
    out.add_scaled(-(n as f64 - 1.0), mu_hat)?;
    Ok(out)
}

/// Radii for one layer and factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    /// Temporal radius, around the previous submission.
    pub delta: f64,
    /// Spatial radius, around the broadcast.
    pub gamma: f64,
}

/// One layer/factor entry of an attacker's round log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackLogEntry {
    pub client_id: usize,
    pub round: usize,
    pub layer: usize,
    pub factor: Factor,
    pub delta_hat: f64,
    pub gamma_hat: f64,
    /// `‖Θ − Θ_prev‖` of the submission.
    pub temporal_distance: f64,
    /// `‖Θ − μ̂‖` of the submission.
    pub spatial_distance: f64,
    pub temporal_slack: f64,
    pub spatial_slack: f64,
    /// `‖Θ* − Θ‖`, how far the projection moved the unconstrained optimum.
    pub projection_shift: f64,
    pub infeasible: bool,
    pub iterations: usize,
    pub converged: bool,
}

/// Per-attacker mutable state.
#[derive(Clone, Debug)]
pub struct AttackState {
    pub client_id: usize,
    pub prev_submission: LoraStack,
    pub prev_broadcast: Option<LoraStack>,
    pub shadow_dataset: ClientDataset,
    /// `(δ̂, γ̂)` per round, per layer, per factor (`A` then `B`).
    pub bounds_history: Vec<Vec<[Bounds; 2]>>,
}

/// The shadow honest update `broadcast + (local/shadow)·(shadow − broadcast)`
/// and its cost.
pub fn shadow_update(
    state: &AttackState,
    ctx: &RoundContext<'_>,
    params: &GapParams,
) -> Result<(LoraStack, u64)> {
    let mut r = rng::stream(
        ctx.seed,
        Role::Shadow,
        state.client_id as u64,
        ctx.round as u64,
    );
    let t = ctx.train;
    let shadow = task::local_train(
        ctx.task,
        ctx.broadcast,
        &state.shadow_dataset,
        params.shadow_steps,
        t.lr,
        t.batch_size,
        &mut r,
    )?;
    let k = t.local_steps as f64 / params.shadow_steps as f64;
    let mut ext = ctx.broadcast.clone();
    for (e, (s, b)) in ext
        .adapters_mut()
        .iter_mut()
        .zip(shadow.adapters().iter().zip(ctx.broadcast.adapters()))
    {
        e.a.add_scaled(k, &s.a.sub(&b.a)?)?;
        e.b.add_scaled(k, &s.b.sub(&b.b)?)?;
    }
    let batch = effective_batch(t.batch_size, state.shadow_dataset.len());
    let ops = task::ops::local_train(&ctx.task.config, params.shadow_steps, batch)
        + 2 * ctx.task.config.flat_len() as u64;
    Ok((ext, ops))
}

/// Per-layer, per-factor `(δ̂, γ̂)` from a shadow update.
pub fn estimate_bounds(
    state: &AttackState,
    shadow: &LoraStack,
    broadcast: &LoraStack,
    params: &GapParams,
) -> Result<Vec<[Bounds; 2]>> {
    let temporal_ref = match params.temporal_reference {
        TemporalReference::Previous => &state.prev_submission,
        TemporalReference::Broadcast => broadcast,
    };
    let floor = |d: f64| (params.kappa * d).max(params.epsilon_min);
    (0..broadcast.num_layers())
        .map(|l| {
            let mut out = [Bounds {
                delta: 0.0,
                gamma: 0.0,
            }; 2];
            for (slot, f) in out.iter_mut().zip(Factor::BOTH) {
                let s = shadow.layer(l).factor(f);
                *slot = Bounds {
                    delta: floor(s.distance(temporal_ref.layer(l).factor(f))?),
                    gamma: floor(s.distance(broadcast.layer(l).factor(f))?),
                };
            }
            Ok(out)
        })
        .collect()
}

/// Phase II: per layer and factor, project the unconstrained optimum onto
/// the two balls. Returns the submission and log entries.
pub fn craft_update(
    state: &AttackState,
    broadcast: &LoraStack,
    target: &AttackTarget,
    bounds: &[[Bounds; 2]],
    n: usize,
    round: usize,
) -> Result<(LoraStack, Vec<AttackLogEntry>, u64)> {
    let mut out = broadcast.clone();
    let mut log = Vec::new();
    let mut ops = 0u64;
    for l in 0..broadcast.num_layers() {
        for (k, f) in Factor::BOTH.into_iter().enumerate() {
            let mu = broadcast.layer(l).factor(f);
            let prev = state.prev_submission.layer(l).factor(f);
            let b = bounds[l][k];
            let star = unconstrained_optimum(target.stack.layer(l).factor(f), mu, n)?;
            let (theta, p) = projection::project_two_balls_matrix(
                &star,
                prev,
                b.delta,
                mu,
                b.gamma,
                DEFAULT_TOL,
                DEFAULT_MAX_ITER,
            )?;
            ops += 2 * star.len() as u64 + p.ops;
            let td = theta.distance(prev)?;
            let sd = theta.distance(mu)?;
            log.push(AttackLogEntry {
                client_id: state.client_id,
                round,
                layer: l,
                factor: f,
                delta_hat: b.delta,
                gamma_hat: b.gamma,
                temporal_distance: td,
                spatial_distance: sd,
                temporal_slack: b.delta - td,
                spatial_slack: b.gamma - sd,
                projection_shift: star.distance(&theta)?,
                infeasible: !p.feasible,
                iterations: p.iterations,
                converged: p.converged,
            });
            *out.layer_mut(l).factor_mut(f) = theta;
        }
    }
    Ok((out, log, ops))
}

/// The assembly attacker.
#[derive(Clone, Debug)]
pub struct GapClient {
    pub state: AttackState,
    pub target: AttackTarget,
    pub params: GapParams,
}

impl GapClient {
    pub fn new(
        id: usize,
        shadow_dataset: ClientDataset,
        target: AttackTarget,
        params: GapParams,
        config: &lora::LoraConfig,
    ) -> Self {
        Self {
            state: AttackState {
                client_id: id,
                prev_submission: LoraStack::zeros(config),
                prev_broadcast: None,
                shadow_dataset,
                bounds_history: Vec::new(),
            },
            target,
            params,
        }
    }
}

impl ClientAgent for GapClient {
    fn id(&self) -> usize {
        self.state.client_id
    }

    fn kind(&self) -> ClientKind {
        ClientKind::Gap
    }

    fn initial(&mut self, task: &TaskSpec, seed: u64) -> Result<LoraStack> {
        let s = lora::init_stack(&task.config, seed, self.state.client_id as u64)?;
        self.state.prev_submission = s.clone();
        Ok(s)
    }

    fn submit(&mut self, ctx: &RoundContext<'_>) -> Result<Submission> {
        let (ext, shadow_ops) = shadow_update(&self.state, ctx, &self.params)?;
        let bounds = estimate_bounds(&self.state, &ext, ctx.broadcast, &self.params)?;
        let (stack, log, craft_ops) = craft_update(
            &self.state,
            ctx.broadcast,
            &self.target,
            &bounds,
            ctx.n_clients,
            ctx.round,
        )?;
        self.state.prev_submission = stack.clone();
        self.state.prev_broadcast = Some(ctx.broadcast.clone());
        self.state.bounds_history.push(bounds);
        Ok(Submission {
            stack,
            op_count: shadow_ops + craft_ops,
            attack_log: log,
        })
    }
}

/// Submits a fixed multiple of the unconstrained optimum with no projection.
#[derive(Clone, Debug)]
pub struct NaiveClient {
    pub id: usize,
    pub target: AttackTarget,
    pub scale: f64,
}

impl ClientAgent for NaiveClient {
    fn id(&self) -> usize {
        self.id
    }

    fn kind(&self) -> ClientKind {
        ClientKind::Naive
    }

    fn initial(&mut self, task: &TaskSpec, seed: u64) -> Result<LoraStack> {
        lora::init_stack(&task.config, seed, self.id as u64)
    }

    fn submit(&mut self, ctx: &RoundContext<'_>) -> Result<Submission> {
        let mut out = ctx.broadcast.clone();
        for l in 0..out.num_layers() {
            for f in Factor::BOTH {
                let star = unconstrained_optimum(
                    self.target.stack.layer(l).factor(f),
                    ctx.broadcast.layer(l).factor(f),
                    ctx.n_clients,
                )?;
                *out.layer_mut(l).factor_mut(f) = star.scale(self.scale);
            }
        }
        Ok(Submission {
            op_count: 3 * ctx.task.config.flat_len() as u64,
            stack: out,
            attack_log: Vec::new(),
        })
    }
}

/// Replaces `round(p·n)` samples of `benign` with trigger samples labelled
/// with their erroneous outputs, cycling through the trigger set.
pub fn poison_dataset(
    task: &TaskSpec,
    benign: &ClientDataset,
    poison_fraction: f64,
) -> Result<ClientDataset> {
    if !(0.0..=1.0).contains(&poison_fraction) {
        return Err(Error::Config(format!(
            "poison_fraction must lie in [0, 1], got {poison_fraction}"
        )));
    }
    if task.trigger_inputs.is_empty() && poison_fraction > 0.0 {
        return Err(Error::Usage(
            "poisoning needs a nonempty trigger set".into(),
        ));
    }
    let n = benign.len();
    let k = (poison_fraction * n as f64).round() as usize;
    let mut out = benign.clone();
    for i in 0..k {
        let j = i % task.trigger_inputs.len();
        out.inputs[i] = task.trigger_inputs[j].clone();
        out.labels[i] = task.trigger_outputs[j].clone();
    }
    Ok(out)
}

/// Honest SGD on a poisoned dataset.
#[derive(Clone, Debug)]
pub struct DataPoisonClient {
    pub id: usize,
    pub dataset: ClientDataset,
}

impl ClientAgent for DataPoisonClient {
    fn id(&self) -> usize {
        self.id
    }

    fn kind(&self) -> ClientKind {
        ClientKind::DataPoison
    }

    fn initial(&mut self, task: &TaskSpec, seed: u64) -> Result<LoraStack> {
        lora::init_stack(&task.config, seed, self.id as u64)
    }

    fn submit(&mut self, ctx: &RoundContext<'_>) -> Result<Submission> {
        let mut r = local_train_stream(ctx.seed, self.id, ctx.round);
        let t = ctx.train;
        let stack = task::local_train(
            ctx.task,
            ctx.broadcast,
            &self.dataset,
            t.local_steps,
            t.lr,
            t.batch_size,
            &mut r,
        )?;
        let batch = effective_batch(t.batch_size, self.dataset.len());
        Ok(Submission {
            stack,
            op_count: task::ops::local_train(&ctx.task.config, t.local_steps, batch),
            attack_log: Vec::new(),
        })
    }
}
