//! Server round loop: broadcast, collect, validate, detect, aggregate.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::AttackLogEntry;
use crate::defenses::{DefenseMode, DefensePipeline, DefenseReport};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraConfig, LoraStack};
use crate::matrix::Matrix;
use crate::parallel::{self, Execution};
use crate::rng::{self, Role};
use crate::task::{self, ClientDataset, TaskSpec};

/// One client's submission for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub round: usize,
    pub stack: LoraStack,
    pub wall_time: f64,
    /// Multiply-accumulates spent producing the submission.
    pub op_count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub lr: f64,
    pub local_steps: usize,
    pub batch_size: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            local_steps: 10,
            batch_size: 32,
        }
    }
}

/// Everything a client sees when asked for its update.
#[derive(Clone, Copy, Debug)]
pub struct RoundContext<'a> {
    pub round: usize,
    pub broadcast: &'a LoraStack,
    pub task: &'a TaskSpec,
    pub n_clients: usize,
    pub seed: u64,
    pub train: TrainParams,
}

#[derive(Clone, Debug)]
pub struct Submission {
    pub stack: LoraStack,
    pub op_count: u64,
    pub attack_log: Vec<AttackLogEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientKind {
    Benign,
    Gap,
    DataPoison,
    Naive,
}

impl ClientKind {
    pub fn is_malicious(self) -> bool {
        self != ClientKind::Benign
    }
}

/// Receives the broadcast and returns an update. Agents own all their state.
pub trait ClientAgent: Send {
    fn id(&self) -> usize;
    fn kind(&self) -> ClientKind;
    /// Round-0 submission made before any broadcast exists.
    fn initial(&mut self, task: &TaskSpec, seed: u64) -> Result<LoraStack>;
    fn submit(&mut self, ctx: &RoundContext<'_>) -> Result<Submission>;
}

/// Honest client: SGD from the broadcast on its own data.
#[derive(Clone, Debug)]
pub struct BenignClient {
    pub id: usize,
    pub dataset: ClientDataset,
}

impl BenignClient {
    pub fn new(id: usize, dataset: ClientDataset) -> Self {
        Self { id, dataset }
    }
}

/// Local training stream for `client` at `round`.
pub fn local_train_stream(seed: u64, client: usize, round: usize) -> rng::StreamRng {
    rng::stream(seed, Role::LocalTrain, client as u64, round as u64)
}

impl ClientAgent for BenignClient {
    fn id(&self) -> usize {
        self.id
    }

    fn kind(&self) -> ClientKind {
        ClientKind::Benign
    }

    fn initial(&mut self, task: &TaskSpec, seed: u64) -> Result<LoraStack> {
        crate::lora::init_stack(&task.config, seed, self.id as u64)
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

/// Samples per SGD step actually used by [`task::local_train`].
pub fn effective_batch(batch_size: usize, n: usize) -> usize {
    if batch_size == 0 || batch_size >= n {
        n
    } else {
        batch_size
    }
}

fn normalized_weights(n: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0 / n as f64; n]),
        Some(w) => {
            if w.len() != n {
                return Err(Error::Usage(format!("{} weights for {n} updates", w.len())));
            }
            if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::Usage(
                    "aggregation weights must be finite and nonnegative".into(),
                ));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::Usage("aggregation weights sum to zero".into()));
            }
            Ok(w.iter().map(|v| v / total).collect())
        }
    }
}

/// Indices of `updates` in ascending client id.
fn id_order(updates: &[ClientUpdate]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    order
}

/// Averages `A` and `B` separately per layer. Clients are summed in
/// ascending id so the result does not depend on submission order.
pub fn aggregate_decoupled(updates: &[ClientUpdate], weights: Option<&[f64]>) -> Result<LoraStack> {
    let Some(first) = updates.first() else {
        return Err(Error::Usage("aggregate of zero updates".into()));
    };
    let w = normalized_weights(updates.len(), weights)?;
    let order = id_order(updates);
    let adapters = (0..first.stack.num_layers())
        .map(|l| {
            let proto = first.stack.layer(l);
            let mut a = Matrix::zeros(proto.a.rows(), proto.a.cols());
            let mut b = Matrix::zeros(proto.b.rows(), proto.b.cols());
            for &i in &order {
                let ad = updates[i].stack.layer(l);
                a.add_scaled(w[i], &ad.a)?;
                b.add_scaled(w[i], &ad.b)?;
            }
            Ok(LoraAdapter { layer_id: l, a, b })
        })
        .collect::<Result<Vec<_>>>()?;
    LoraStack::new(adapters)
}

/// Per-layer mean of the clients' composites.
pub fn aggregate_composite(updates: &[ClientUpdate], config: &LoraConfig) -> Result<Vec<Matrix>> {
    if updates.is_empty() {
        return Err(Error::Usage("aggregate of zero updates".into()));
    }
    let n = updates.len() as f64;
    let order = id_order(updates);
    let mut out: Option<Vec<Matrix>> = None;
    for &i in &order {
        let comps = updates[i].stack.composites(config)?;
        match &mut out {
            None => out = Some(comps.into_iter().map(|c| c.scale(1.0 / n)).collect()),
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(&comps) {
                    a.add_scaled(1.0 / n, c)?;
                }
            }
        }
    }
    Ok(out.unwrap_or_default())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    pub round: usize,
    pub global_stack: LoraStack,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolViolation {
    pub client_id: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct RoundRecord {
    pub round: usize,
    pub broadcast: LoraStack,
    /// Every well-formed submission, ascending client id.
    pub submissions: Vec<ClientUpdate>,
    pub defense_reports: Vec<(DefenseReport, DefenseMode)>,
    /// Dropped from aggregation by enforcing defenses.
    pub excluded: BTreeSet<usize>,
    pub violations: Vec<ProtocolViolation>,
    pub warnings: Vec<String>,
    pub aggregate: LoraStack,
    pub attack_log: Vec<AttackLogEntry>,
}

fn validate_submission(stack: &LoraStack, config: &LoraConfig) -> std::result::Result<(), String> {
    stack.check_dims(config).map_err(|e| e.to_string())?;
    if !stack.is_finite() {
        return Err("non-finite entries".into());
    }
    Ok(())
}

/// Round-0 state: the decoupled mean of every client's initial adapters.
pub fn initial_state(
    clients: &mut [Box<dyn ClientAgent>],
    task: &TaskSpec,
    seed: u64,
) -> Result<GlobalState> {
    let updates = clients
        .iter_mut()
        .map(|c| {
            Ok(ClientUpdate {
                client_id: c.id(),
                round: 0,
                stack: c.initial(task, seed)?,
                wall_time: 0.0,
                op_count: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GlobalState {
        round: 0,
        global_stack: aggregate_decoupled(&updates, None)?,
    })
}

/// Runs round `state.round + 1`.
pub fn run_round(
    state: &GlobalState,
    clients: &mut [Box<dyn ClientAgent>],
    task: &TaskSpec,
    pipeline: &mut DefensePipeline,
    seed: u64,
    train: TrainParams,
    exec: Execution,
) -> Result<(GlobalState, RoundRecord)> {
    let round = state.round + 1;
    let ctx = RoundContext {
        round,
        broadcast: &state.global_stack,
        task,
        n_clients: clients.len(),
        seed,
        train,
    };
    let results = parallel::map_mut(clients, exec, |c| {
        let start = Instant::now();
        let out = c.submit(&ctx);
        (c.id(), out, start.elapsed().as_secs_f64())
    });

    let mut submissions = Vec::with_capacity(results.len());
    let mut violations = Vec::new();
    let mut attack_log = Vec::new();
    for (id, out, secs) in results {
        let sub = out?;
        match validate_submission(&sub.stack, &task.config) {
            Ok(()) => {
                submissions.push(ClientUpdate {
                    client_id: id,
                    round,
                    stack: sub.stack,
                    wall_time: secs,
                    op_count: sub.op_count,
                });
                attack_log.extend(sub.attack_log);
            }
            Err(reason) => violations.push(ProtocolViolation {
                client_id: id,
                reason,
            }),
        }
    }
    submissions.sort_by_key(|s| s.client_id);
    let mut warnings = Vec::new();
    if submissions.is_empty() {
        return Err(Error::Usage(format!(
            "round {round}: no well-formed submissions"
        )));
    }

    let reports = pipeline.evaluate(round, &state.global_stack, &submissions, &task.config)?;
    let mut excluded: BTreeSet<usize> = reports
        .iter()
        .filter(|(_, m)| *m == DefenseMode::Enforce)
        .flat_map(|(r, _)| r.flagged.iter().copied())
        .collect();
    if !excluded.is_empty() && excluded.len() >= submissions.len() {
        warnings.push(format!(
            "round {round}: every client flagged; aggregating all submissions"
        ));
        excluded.clear();
    }
    let kept: Vec<ClientUpdate> = submissions
        .iter()
        .filter(|s| !excluded.contains(&s.client_id))
        .cloned()
        .collect();
    let aggregate = aggregate_decoupled(&kept, None)?;

    let record = RoundRecord {
        round,
        broadcast: state.global_stack.clone(),
        submissions,
        defense_reports: reports,
        excluded,
        violations,
        warnings,
        aggregate: aggregate.clone(),
        attack_log,
    };
    Ok((
        GlobalState {
            round,
            global_stack: aggregate,
        },
        record,
    ))
}
