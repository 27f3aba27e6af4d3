//! Builds a task, clients and defenses from a config and runs the rounds.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, AttackerCost, DetectionRates, RoundMetrics};
use crate::attack::{self, AttackLogEntry, AttackTarget, DataPoisonClient, GapClient, NaiveClient};
use crate::config::{AttackKind, ExperimentConfig};
use crate::defenses::{DefenseMode, DefensePipeline, DefenseReport};
use crate::error::Result;
use crate::federation::{
    self, BenignClient, ClientAgent, ClientKind, GlobalState, ProtocolViolation, RoundRecord,
};
use crate::parallel::Execution;
use crate::rng::{self, Role};
use crate::task::{self, ClientDataset, TaskSpec};

/// Client `id`'s private data.
pub fn client_dataset(
    task: &TaskSpec,
    config: &ExperimentConfig,
    id: usize,
) -> Result<ClientDataset> {
    let mut r = rng::stream(config.seed, Role::ClientData, id as u64, 0);
    task.gen_dataset(id, config.samples_per_client, &mut r)
}

pub fn build_task(config: &ExperimentConfig) -> Result<TaskSpec> {
    let lc = config.lora_config()?;
    let mut r = rng::stream(config.seed, Role::Task, 0, 0);
    task::gen_task(&config.task_params(), &lc, &mut r)
}

/// The offline target every attacker builds. Attackers share the Phase I
/// recipe and seed, so they arrive at the same adapters independently.
pub fn build_reference_target(task: &TaskSpec, config: &ExperimentConfig) -> Result<AttackTarget> {
    let mut r = rng::stream(config.seed, Role::Target, 0, 0);
    let sample = task.gen_dataset(usize::MAX, config.samples_per_client, &mut r)?;
    let init_seed = rng::derive_seed(config.seed, Role::Target, 0, 1);
    attack::build_target(task, &sample, &config.gap, init_seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoggedReport {
    pub mode: DefenseMode,
    pub report: DefenseReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmissionSummary {
    pub client_id: usize,
    pub kind: ClientKind,
    pub op_count: u64,
}

/// Wall-clock fields, kept apart so determinism checks can drop them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub round_seconds: f64,
    pub client_seconds: BTreeMap<usize, f64>,
}

/// One line of `rounds.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLogEntry {
    pub round: usize,
    pub metrics: RoundMetrics,
    pub defense_reports: Vec<LoggedReport>,
    pub excluded: BTreeSet<usize>,
    pub violations: Vec<ProtocolViolation>,
    pub warnings: Vec<String>,
    pub submissions: Vec<SubmissionSummary>,
    pub attack_log: Vec<AttackLogEntry>,
    pub timing: Timing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseSummary {
    /// Mean over rounds of the per-round rates.
    pub per_round_mean: DetectionRates,
    /// Share of malicious clients flagged in at least one round.
    pub ever_flagged_detection: f64,
    /// Share of benign clients flagged in at least one round.
    pub ever_flagged_fpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseOneSummary {
    pub initial_trigger_loss: f64,
    pub trigger_loss: f64,
    pub benign_loss: f64,
    pub trigger_success: f64,
    pub op_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rounds: usize,
    pub attack: AttackKind,
    pub malicious: Vec<usize>,
    pub final_metrics: Option<RoundMetrics>,
    pub initial_trigger_success: f64,
    pub final_trigger_success: f64,
    pub rounds_to_threshold: Option<usize>,
    pub drift_round1: Vec<f64>,
    pub drift_final: Vec<f64>,
    pub phase1: PhaseOneSummary,
    pub defenses: BTreeMap<String, DefenseSummary>,
    pub costs: Vec<AttackerCost>,
    /// Rounds where every layer has Malicious-Avg ≤ Benign-Max (euclidean).
    pub camouflaged_rounds: usize,
    /// Logged submissions outside a ball by more than the tolerance.
    pub constraint_violations: usize,
    pub max_constraint_excess: f64,
    pub infeasible_projections: usize,
    pub protocol_violations: usize,
    pub warnings: Vec<String>,
}

/// Constraint tolerance used when auditing attack logs.
pub const CONSTRAINT_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct RunLog {
    pub config: ExperimentConfig,
    pub initial: GlobalState,
    pub records: Vec<RoundRecord>,
    pub metrics: Vec<RoundMetrics>,
    pub entries: Vec<RoundLogEntry>,
    /// Phase I target; also the drift reference when no one attacks.
    pub target: AttackTarget,
    pub kinds: BTreeMap<usize, ClientKind>,
    pub truth: BTreeSet<usize>,
    pub pretrain_ops: BTreeMap<usize, u64>,
    pub initial_trigger_success: f64,
    pub phase1_trigger_success: f64,
}

impl RunLog {
    pub fn final_state(&self) -> GlobalState {
        match self.records.last() {
            Some(r) => GlobalState {
                round: r.round,
                global_stack: r.aggregate.clone(),
            },
            None => self.initial.clone(),
        }
    }

    pub fn costs(&self) -> Vec<AttackerCost> {
        let ops: Vec<BTreeMap<usize, u64>> = self
            .records
            .iter()
            .map(|r| {
                r.submissions
                    .iter()
                    .map(|s| (s.client_id, s.op_count))
                    .collect()
            })
            .collect();
        let success: Vec<f64> = self
            .metrics
            .iter()
            .map(|m| m.trigger_success_rate)
            .collect();
        analysis::cost_report(
            &self.kinds,
            &self.pretrain_ops,
            &ops,
            &success,
            self.config.success_threshold,
        )
    }

    pub fn summary(&self) -> RunSummary {
        let first =
            |f: fn(&RoundMetrics) -> Vec<f64>| self.metrics.first().map(f).unwrap_or_default();
        let mut defenses = BTreeMap::new();
        if let Some(r0) = self.records.first() {
            let benign: BTreeSet<usize> = self
                .kinds
                .keys()
                .filter(|id| !self.truth.contains(id))
                .copied()
                .collect();
            for (k, (rep, _)) in r0.defense_reports.iter().enumerate() {
                let name = rep.defense.clone();
                let mut sum = [0.0; 3];
                let mut ever = BTreeSet::new();
                for rec in &self.records {
                    let (r, _) = &rec.defense_reports[k];
                    let d = analysis::detection_rates(r, &self.truth, rec.submissions.len());
                    sum[0] += d.detection_rate;
                    sum[1] += d.false_positive_rate;
                    sum[2] += d.evasion_rate;
                    ever.extend(r.flagged.iter().copied());
                }
                let t = self.records.len() as f64;
                let frac = |set: &BTreeSet<usize>| {
                    if set.is_empty() {
                        0.0
                    } else {
                        ever.intersection(set).count() as f64 / set.len() as f64
                    }
                };
                defenses.insert(
                    name,
                    DefenseSummary {
                        per_round_mean: DetectionRates {
                            detection_rate: sum[0] / t,
                            false_positive_rate: sum[1] / t,
                            evasion_rate: sum[2] / t,
                        },
                        ever_flagged_detection: frac(&self.truth),
                        ever_flagged_fpr: frac(&benign),
                    },
                );
            }
        }
        let camouflaged_rounds = self
            .metrics
            .iter()
            .filter(|m| {
                !m.centroid_stats.is_empty()
                    && m.centroid_stats.iter().all(|c| {
                        c.euclidean
                            .malicious_avg
                            .is_some_and(|v| v <= c.euclidean.benign_max)
                    })
            })
            .count();
        let entries = self.records.iter().flat_map(|r| r.attack_log.iter());
        let mut constraint_violations = 0;
        let mut max_excess = f64::NEG_INFINITY;
        let mut infeasible = 0;
        for e in entries {
            let excess = (-e.temporal_slack).max(-e.spatial_slack);
            max_excess = max_excess.max(excess);
            if excess > CONSTRAINT_TOL {
                constraint_violations += 1;
            }
            if e.infeasible {
                infeasible += 1;
            }
        }
        let costs = self.costs();
        RunSummary {
            rounds: self.records.len(),
            attack: self.config.attack,
            malicious: self.truth.iter().copied().collect(),
            final_metrics: self.metrics.last().cloned(),
            initial_trigger_success: self.initial_trigger_success,
            final_trigger_success: self
                .metrics
                .last()
                .map_or(self.initial_trigger_success, |m| m.trigger_success_rate),
            rounds_to_threshold: self
                .metrics
                .iter()
                .find(|m| m.trigger_success_rate >= self.config.success_threshold)
                .map(|m| m.round),
            drift_round1: first(|m| m.composite_drift.clone()),
            drift_final: self
                .metrics
                .last()
                .map(|m| m.composite_drift.clone())
                .unwrap_or_default(),
            phase1: PhaseOneSummary {
                initial_trigger_loss: self.target.initial_trigger_loss,
                trigger_loss: self.target.trigger_loss,
                benign_loss: self.target.benign_loss,
                trigger_success: self.phase1_trigger_success,
                op_count: self.target.op_count,
            },
            defenses,
            costs,
            camouflaged_rounds,
            constraint_violations,
            max_constraint_excess: if max_excess.is_finite() {
                max_excess
            } else {
                0.0
            },
            infeasible_projections: infeasible,
            protocol_violations: self.records.iter().map(|r| r.violations.len()).sum(),
            warnings: self
                .records
                .iter()
                .flat_map(|r| r.warnings.iter().cloned())
                .collect(),
        }
    }
}

/// A run in progress; [`Experiment::step`] advances one round.
pub struct Experiment {
    task: TaskSpec,
    eval: ClientDataset,
    clients: Vec<Box<dyn ClientAgent>>,
    state: GlobalState,
    pipeline: DefensePipeline,
    exec: Execution,
    log: RunLog,
}

impl Experiment {
    /// Validates the config, generates the task and data, and runs the
    /// offline target construction.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let task = build_task(&config)?;
        let target = build_reference_target(&task, &config)?;
        let mut r = rng::stream(config.seed, Role::Evaluation, 0, 0);
        let eval = task.gen_dataset(usize::MAX, config.eval_samples, &mut r)?;

        let malicious = config.malicious_ids();
        let mut clients: Vec<Box<dyn ClientAgent>> = Vec::with_capacity(config.n_clients);
        let mut pretrain_ops = BTreeMap::new();
        for id in 0..config.n_clients {
            let data = client_dataset(&task, &config, id)?;
            let agent: Box<dyn ClientAgent> = if !malicious.contains(&id) {
                Box::new(BenignClient::new(id, data))
            } else {
                match config.attack {
                    AttackKind::None => unreachable!("no attackers without an attack"),
                    AttackKind::Gap => {
                        pretrain_ops.insert(id, target.op_count);
                        Box::new(GapClient::new(
                            id,
                            data,
                            target.clone(),
                            config.gap.clone(),
                            &task.config,
                        ))
                    }
                    AttackKind::Naive => {
                        pretrain_ops.insert(id, target.op_count);
                        Box::new(NaiveClient {
                            id,
                            target: target.clone(),
                            scale: config.naive.scale,
                        })
                    }
                    AttackKind::DataPoison => Box::new(DataPoisonClient {
                        id,
                        dataset: attack::poison_dataset(
                            &task,
                            &data,
                            config.datapoison.poison_fraction,
                        )?,
                    }),
                }
            };
            clients.push(agent);
        }
        let kinds = clients.iter().map(|c| (c.id(), c.kind())).collect();
        let truth: BTreeSet<usize> = malicious.collect();
        let state = federation::initial_state(&mut clients, &task, config.seed)?;
        let pipeline = DefensePipeline::new(config.defenses.clone(), config.malicious_fraction());
        let exec = Execution::from_workers(config.workers);
        let initial_trigger_success =
            analysis::trigger_success(&task, &state.global_stack, config.trigger_tolerance)?;
        let phase1_trigger_success =
            analysis::trigger_success(&task, &target.stack, config.trigger_tolerance)?;
        Ok(Self {
            task,
            eval,
            clients,
            pipeline,
            exec,
            log: RunLog {
                config,
                initial: state.clone(),
                records: Vec::new(),
                metrics: Vec::new(),
                entries: Vec::new(),
                target,
                kinds,
                truth,
                pretrain_ops,
                initial_trigger_success,
                phase1_trigger_success,
            },
            state,
        })
    }

    /// Overrides the config's worker count.
    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn state(&self) -> &GlobalState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.round >= self.log.config.rounds
    }

    /// Runs one round and returns its log entry, or `None` when finished.
    pub fn step(&mut self) -> Result<Option<&RoundLogEntry>> {
        if self.is_done() {
            return Ok(None);
        }
        let started = Instant::now();
        let (next, record) = federation::run_round(
            &self.state,
            &mut self.clients,
            &self.task,
            &mut self.pipeline,
            self.log.config.seed,
            self.log.config.train_params(),
            self.exec,
        )?;
        let metrics = self.measure(&record)?;
        let entry = RoundLogEntry {
            round: record.round,
            metrics: metrics.clone(),
            defense_reports: record
                .defense_reports
                .iter()
                .map(|(r, m)| LoggedReport {
                    mode: *m,
                    report: r.clone(),
                })
                .collect(),
            excluded: record.excluded.clone(),
            violations: record.violations.clone(),
            warnings: record.warnings.clone(),
            submissions: record
                .submissions
                .iter()
                .map(|s| SubmissionSummary {
                    client_id: s.client_id,
                    kind: self.log.kinds[&s.client_id],
                    op_count: s.op_count,
                })
                .collect(),
            attack_log: record.attack_log.clone(),
            timing: Timing {
                round_seconds: started.elapsed().as_secs_f64(),
                client_seconds: record
                    .submissions
                    .iter()
                    .map(|s| (s.client_id, s.wall_time))
                    .collect(),
            },
        };
        self.state = next;
        self.log.records.push(record);
        self.log.metrics.push(metrics);
        self.log.entries.push(entry);
        Ok(self.log.entries.last())
    }

    fn measure(&self, record: &RoundRecord) -> Result<RoundMetrics> {
        let cfg = &self.log.config;
        let global = &record.aggregate;
        let drift = analysis::composite_drift_and_alignment(
            global,
            &self.log.target.stack,
            &self.task.config,
        )?;
        let defenses = record
            .defense_reports
            .iter()
            .map(|(r, _)| {
                (
                    r.defense.clone(),
                    analysis::detection_rates(r, &self.log.truth, record.submissions.len()),
                )
            })
            .collect();
        Ok(RoundMetrics {
            round: record.round,
            benign_loss: task::loss(&self.task, global, &self.eval.inputs, &self.eval.labels)?,
            trigger_success_rate: analysis::trigger_success(
                &self.task,
                global,
                cfg.trigger_tolerance,
            )?,
            composite_drift: drift.iter().map(|d| d.drift).collect(),
            composite_alignment: drift.iter().map(|d| d.alignment).collect(),
            // Every benign submission may have been rejected as malformed.
            centroid_stats: if record
                .submissions
                .iter()
                .any(|s| !self.log.truth.contains(&s.client_id))
            {
                analysis::centroid_distance_stats(&record.submissions, &self.log.truth)?
            } else {
                Vec::new()
            },
            defenses,
            attacker_ops: record
                .submissions
                .iter()
                .filter(|s| self.log.truth.contains(&s.client_id))
                .map(|s| s.op_count)
                .sum(),
        })
    }

    pub fn run_to_end(mut self) -> Result<RunLog> {
        while self.step()?.is_some() {}
        Ok(self.log)
    }

    pub fn into_log(self) -> RunLog {
        self.log
    }
}

pub fn run_experiment(config: ExperimentConfig) -> Result<RunLog> {
    Experiment::new(config)?.run_to_end()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    fn small(extra: &str) -> ExperimentConfig {
        parse_config_str(&format!(
            "n_clients = 4\nn_malicious = 1\nrounds = 3\ndims = [6, 5, 4]\nrank = 2\nsamples_per_client = 32\neval_samples = 32\n[gap]\nphase1_steps = 50\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn zero_rounds_keeps_only_the_initial_state() {
        let mut c = small("");
        c.rounds = 0;
        let log = run_experiment(c).unwrap();
        assert!(log.records.is_empty() && log.metrics.is_empty());
        assert_eq!(log.final_state(), log.initial);
        for ad in log.initial.global_stack.adapters() {
            assert!(ad.b.as_slice().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let a = run_experiment(small("")).unwrap();
        let b = run_experiment(small("")).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.final_state(), b.final_state());
        assert_eq!(a.records.len(), 3);
        assert_eq!(a.truth, BTreeSet::from([3]));
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let a = Experiment::new(small(""))
            .unwrap()
            .with_execution(Execution::Sequential)
            .run_to_end()
            .unwrap();
        let b = Experiment::new(small(""))
            .unwrap()
            .with_execution(Execution::Parallel { threads: 3 })
            .run_to_end()
            .unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.final_state(), b.final_state());
    }

    #[test]
    fn clean_run_has_no_attackers() {
        let mut c = small("");
        c.attack = AttackKind::None;
        c.rounds = 1;
        let log = run_experiment(c).unwrap();
        assert!(log.truth.is_empty());
        assert!(log.costs().is_empty());
        assert_eq!(log.metrics[0].trigger_success_rate, 0.0);
        let s = log.summary();
        assert_eq!(s.rounds, 1);
        assert!(s.final_metrics.unwrap().centroid_stats[0]
            .euclidean
            .malicious_avg
            .is_none());
    }
}
