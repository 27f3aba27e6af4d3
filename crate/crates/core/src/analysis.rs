//! Round metrics: trigger success, composite drift, centroid geometry,
//! detection rates, the cross-term decomposition, and attacker cost.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::defenses::DefenseReport;
use crate::error::{Error, Result};
use crate::federation::{ClientKind, ClientUpdate};
use crate::lora::{self, cosine_similarity, vector_distances, LoraConfig, LoraStack};
use crate::matrix::{norm, Matrix};
use crate::task::{self, TaskSpec};

pub const DEFAULT_TRIGGER_TOLERANCE: f64 = 0.25;
pub const DEFAULT_SUCCESS_THRESHOLD: f64 = 0.5;

/// Fraction of triggers with `‖f(x) − y_err‖ ≤ rel_tol · ‖y_err − y_clean‖`.
pub fn trigger_success(task: &TaskSpec, stack: &LoraStack, rel_tol: f64) -> Result<f64> {
    if task.trigger_inputs.is_empty() {
        return Err(Error::Usage(
            "trigger_success needs a nonempty trigger set".into(),
        ));
    }
    let mut hits = 0usize;
    for (x, y_err) in task.trigger_inputs.iter().zip(&task.trigger_outputs) {
        let f = task::forward(task, stack, x)?;
        let clean = task.clean_forward(x)?;
        let miss: Vec<f64> = f.iter().zip(y_err).map(|(a, b)| a - b).collect();
        let gap: Vec<f64> = y_err.iter().zip(&clean).map(|(a, b)| a - b).collect();
        if norm(&miss) <= rel_tol * norm(&gap) {
            hits += 1;
        }
    }
    Ok(hits as f64 / task.trigger_inputs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDrift {
    /// `‖compose(global) − compose(target)‖_F`.
    pub drift: f64,
    /// Cosine of the flattened composites; 0 when either is degenerate.
    pub alignment: f64,
}

pub fn composite_drift_and_alignment(
    global: &LoraStack,
    target: &LoraStack,
    config: &LoraConfig,
) -> Result<Vec<LayerDrift>> {
    global.check_dims(config)?;
    target.check_dims(config)?;
    let g = global.composites(config)?;
    let t = target.composites(config)?;
    g.iter()
        .zip(&t)
        .map(|(g, t)| {
            Ok(LayerDrift {
                drift: g.distance(t)?,
                alignment: cosine_similarity(g.as_slice(), t.as_slice()).unwrap_or(0.0),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDistances {
    pub benign_avg: f64,
    pub benign_max: f64,
    /// Absent when the round has no malicious submissions.
    pub malicious_avg: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidStats {
    pub euclidean: GroupDistances,
    pub cosine: GroupDistances,
}

/// Per layer, distances of each client's flattened adapter to the centroid
/// of all submissions, summarised by group.
pub fn centroid_distance_stats(
    subs: &[ClientUpdate],
    truth: &BTreeSet<usize>,
) -> Result<Vec<CentroidStats>> {
    let Some(first) = subs.first() else {
        return Err(Error::Usage("centroid stats need submissions".into()));
    };
    if subs.iter().all(|s| truth.contains(&s.client_id)) {
        return Err(Error::Usage(
            "centroid stats need at least one benign submission".into(),
        ));
    }
    let n = subs.len() as f64;
    (0..first.stack.num_layers())
        .map(|l| {
            let vecs: Vec<Vec<f64>> = subs.iter().map(|s| s.stack.layer(l).flatten()).collect();
            let mut centroid = vec![0.0; vecs[0].len()];
            for v in &vecs {
                if v.len() != centroid.len() {
                    return Err(Error::Shape(format!(
                        "layer {l} sizes differ across clients"
                    )));
                }
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x;
                }
            }
            centroid.iter_mut().for_each(|c| *c /= n);
            let mut eu = Summary::default();
            let mut co = Summary::default();
            for (s, v) in subs.iter().zip(&vecs) {
                let d = vector_distances(v, &centroid)?;
                let mal = truth.contains(&s.client_id);
                eu.add(mal, d.euclidean);
                co.add(mal, d.cosine);
            }
            Ok(CentroidStats {
                euclidean: eu.finish(),
                cosine: co.finish(),
            })
        })
        .collect()
}

#[derive(Default)]
struct Summary {
    benign_sum: f64,
    benign_n: usize,
    benign_max: f64,
    mal_sum: f64,
    mal_n: usize,
}

impl Summary {
    fn add(&mut self, malicious: bool, d: f64) {
        if malicious {
            self.mal_sum += d;
            self.mal_n += 1;
        } else {
            self.benign_sum += d;
            self.benign_n += 1;
            self.benign_max = self.benign_max.max(d);
        }
    }

    fn finish(&self) -> GroupDistances {
        GroupDistances {
            benign_avg: self.benign_sum / self.benign_n as f64,
            benign_max: self.benign_max,
            malicious_avg: (self.mal_n > 0).then(|| self.mal_sum / self.mal_n as f64),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRates {
    pub detection_rate: f64,
    pub false_positive_rate: f64,
    pub evasion_rate: f64,
}

/// Rates against the true malicious set; an empty population gives 0.
pub fn detection_rates(
    report: &DefenseReport,
    truth: &BTreeSet<usize>,
    n_clients: usize,
) -> DetectionRates {
    let ratio = |k: usize, d: usize| if d == 0 { 0.0 } else { k as f64 / d as f64 };
    let hit = report.flagged.intersection(truth).count();
    let false_pos = report.flagged.difference(truth).count();
    let detection_rate = ratio(hit, truth.len());
    DetectionRates {
        detection_rate,
        false_positive_rate: ratio(false_pos, n_clients.saturating_sub(truth.len())),
        evasion_rate: 1.0 - detection_rate,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossTerms {
    pub benign_term: Matrix,
    pub cross_terms: Matrix,
    pub malicious_term: Matrix,
    pub total: Matrix,
    /// `((1−α)A_b + αA_m)·((1−α)B_b + αB_m)`.
    pub mixed_product: Matrix,
}

impl CrossTerms {
    /// `‖total − mixed_product‖_F`.
    pub fn residual(&self) -> f64 {
        self.total
            .distance(&self.mixed_product)
            .unwrap_or(f64::INFINITY)
    }
}

/// Splits the product of the two-group decoupled means into benign, cross,
/// and malicious parts.
pub fn cross_term_report(
    a_b: &Matrix,
    b_b: &Matrix,
    a_m: &Matrix,
    b_m: &Matrix,
    alpha: f64,
) -> Result<CrossTerms> {
    if a_b.shape() != a_m.shape() || b_b.shape() != b_m.shape() {
        return Err(Error::Shape("group factors differ in shape".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Usage(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let beta = 1.0 - alpha;
    let benign_term = a_b.matmul(b_b)?.scale(beta * beta);
    let cross_terms = a_b.matmul(b_m)?.add(&a_m.matmul(b_b)?)?.scale(alpha * beta);
    let malicious_term = a_m.matmul(b_m)?.scale(alpha * alpha);
    let total = benign_term.add(&cross_terms)?.add(&malicious_term)?;
    let a_bar = a_b.scale(beta).add(&a_m.scale(alpha))?;
    let b_bar = b_b.scale(beta).add(&b_m.scale(alpha))?;
    Ok(CrossTerms {
        benign_term,
        cross_terms,
        malicious_term,
        total,
        mixed_product: a_bar.matmul(&b_bar)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackerCost {
    pub client_id: usize,
    pub kind: ClientKind,
    pub pretrain_ops: u64,
    /// Mean over rounds.
    pub per_round_ops: f64,
    pub rounds_to_threshold: Option<usize>,
    pub total_ops: u64,
}

/// One row per malicious client. `round_ops[t]` maps client id to its
/// op count in round `t + 1`; `success[t]` is that round's trigger success.
pub fn cost_report(
    kinds: &BTreeMap<usize, ClientKind>,
    pretrain_ops: &BTreeMap<usize, u64>,
    round_ops: &[BTreeMap<usize, u64>],
    success: &[f64],
    threshold: f64,
) -> Vec<AttackerCost> {
    let reached = success.iter().position(|&s| s >= threshold).map(|i| i + 1);
    kinds
        .iter()
        .filter(|(_, k)| k.is_malicious())
        .map(|(&id, &kind)| {
            let online: u64 = round_ops.iter().filter_map(|r| r.get(&id)).sum();
            let pre = pretrain_ops.get(&id).copied().unwrap_or(0);
            AttackerCost {
                client_id: id,
                kind,
                pretrain_ops: pre,
                per_round_ops: if round_ops.is_empty() {
                    0.0
                } else {
                    online as f64 / round_ops.len() as f64
                },
                rounds_to_threshold: reached,
                total_ops: pre + online,
            }
        })
        .collect()
}

/// Everything measured after a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Held-out mean half squared error of the global model.
    pub benign_loss: f64,
    pub trigger_success_rate: f64,
    pub composite_drift: Vec<f64>,
    pub composite_alignment: Vec<f64>,
    pub centroid_stats: Vec<CentroidStats>,
    pub defenses: BTreeMap<String, DetectionRates>,
    /// Summed op count of the malicious clients this round.
    pub attacker_ops: u64,
}

/// Flattened global stack, for external embedding tools.
pub fn export_vector(stack: &LoraStack) -> Vec<f64> {
    lora::flatten(stack)
}
