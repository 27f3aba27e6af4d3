//! Server-side detectors. Each one is a pure function of the round's
//! submissions (plus, for the history-based ones, state the server keeps at
//! the round barrier) and returns a [`DefenseReport`]. Whether flags exclude
//! clients is decided by the federation layer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::federation::ClientUpdate;
use crate::lora::{self, cosine_similarity, Factor, LoraConfig, LoraStack};
use crate::matrix::Matrix;

/// Deviation spreads below this never flag anyone.
pub const SIGMA_GUARD: f64 = 1e-12;
pub const DEFAULT_MULTIPLIER: f64 = 2.5;
pub const FOOLSGOLD_FLAG_BELOW: f64 = 0.1;
/// Over-removal factor for spectral signatures.
pub const SPECTRAL_OVERSHOOT: f64 = 1.5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub defense: String,
    pub round: usize,
    pub scores: BTreeMap<usize, f64>,
    pub flagged: BTreeSet<usize>,
    pub params: BTreeMap<String, Value>,
    /// FoolsGold aggregation weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<BTreeMap<usize, f64>>,
    /// Composition monitor: cosine between this round's composite deviation
    /// and the client's running mean of past deviations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<BTreeMap<usize, f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl DefenseReport {
    fn new(defense: DefenseKind, round: usize) -> Self {
        Self {
            defense: defense.name().to_string(),
            round,
            ..Self::default()
        }
    }
}

/// Result of the centred `mean + m·σ` rule over one set of deviation norms.
#[derive(Clone, Debug, PartialEq)]
pub struct CenteredRule {
    pub mean: f64,
    /// Population standard deviation.
    pub sigma: f64,
    pub threshold: f64,
    pub flagged: Vec<bool>,
    /// `(d − mean) / σ`, zero when σ is below the guard.
    pub z: Vec<f64>,
}

pub fn centered_rule(devs: &[f64], multiplier: f64) -> CenteredRule {
    let n = devs.len().max(1) as f64;
    let mean = devs.iter().sum::<f64>() / n;
    let sigma = (devs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n).sqrt();
    if sigma < SIGMA_GUARD {
        return CenteredRule {
            mean,
            sigma,
            threshold: f64::INFINITY,
            flagged: vec![false; devs.len()],
            z: vec![0.0; devs.len()],
        };
    }
    let threshold = mean + multiplier * sigma;
    CenteredRule {
        mean,
        sigma,
        threshold,
        flagged: devs.iter().map(|&d| d > threshold).collect(),
        z: devs.iter().map(|&d| (d - mean) / sigma).collect(),
    }
}

fn check_submissions(subs: &[ClientUpdate]) -> Result<()> {
    let Some(first) = subs.first() else {
        return Err(Error::Usage("defense called without submissions".into()));
    };
    let l = first.stack.num_layers();
    if subs.iter().any(|s| s.stack.num_layers() != l) {
        return Err(Error::Shape("submissions disagree on layer count".into()));
    }
    Ok(())
}

fn mean_matrix<'a>(ms: impl Iterator<Item = &'a Matrix>, n: usize) -> Result<Matrix> {
    let mut it = ms;
    let first = it
        .next()
        .ok_or_else(|| Error::Usage("mean of nothing".into()))?;
    let mut acc = first.clone();
    for m in it {
        acc.add_scaled(1.0, m)?;
    }
    Ok(acc.scale(1.0 / n as f64))
}

fn per_matrix_threshold(
    kind: DefenseKind,
    subs: &[ClientUpdate],
    round: usize,
    multiplier_for: impl Fn(usize) -> f64,
) -> Result<DefenseReport> {
    check_submissions(subs)?;
    let mut report = DefenseReport::new(kind, round);
    report
        .params
        .insert("scope".into(), json!("per_layer_per_matrix"));
    if subs.len() < 2 {
        report
            .warnings
            .push("fewer than two submissions; spread undefined, nothing flagged".into());
        for s in subs {
            report.scores.insert(s.client_id, 0.0);
        }
        return Ok(report);
    }
    let n = subs.len();
    let mut score = vec![f64::NEG_INFINITY; n];
    let mut flagged = vec![false; n];
    for l in 0..subs[0].stack.num_layers() {
        let m = multiplier_for(l);
        for f in Factor::BOTH {
            let mu = mean_matrix(subs.iter().map(|s| s.stack.layer(l).factor(f)), n)?;
            let devs = subs
                .iter()
                .map(|s| s.stack.layer(l).factor(f).distance(&mu))
                .collect::<Result<Vec<_>>>()?;
            let rule = centered_rule(&devs, m);
            for i in 0..n {
                flagged[i] |= rule.flagged[i];
                score[i] = score[i].max(rule.z[i]);
            }
        }
    }
    for (i, s) in subs.iter().enumerate() {
        report.scores.insert(s.client_id, score[i]);
        if flagged[i] {
            report.flagged.insert(s.client_id);
        }
    }
    Ok(report)
}

/// Flags a client when any of its per-layer `A` or `B` deviations from the
/// round mean exceeds `mean + m·σ` of that matrix's deviation norms.
pub fn norm_threshold(
    subs: &[ClientUpdate],
    round: usize,
    multiplier: f64,
) -> Result<DefenseReport> {
    let mut r = per_matrix_threshold(DefenseKind::NormThreshold, subs, round, |_| multiplier)?;
    r.params.insert("multiplier".into(), json!(multiplier));
    Ok(r)
}

/// [`norm_threshold`] with a per-layer multiplier; unlisted layers use
/// [`DEFAULT_MULTIPLIER`].
pub fn adaptive_verification(
    subs: &[ClientUpdate],
    round: usize,
    multipliers: &BTreeMap<usize, f64>,
) -> Result<DefenseReport> {
    if let Some((l, m)) = multipliers.iter().find(|(_, m)| !(**m > 0.0)) {
        return Err(Error::Usage(format!(
            "layer {l} multiplier must be positive, got {m}"
        )));
    }
    let mut r = per_matrix_threshold(DefenseKind::AdaptiveVerification, subs, round, |l| {
        multipliers.get(&l).copied().unwrap_or(DEFAULT_MULTIPLIER)
    })?;
    let shown: BTreeMap<String, Value> = multipliers
        .iter()
        .map(|(l, m)| (l.to_string(), json_f64(*m)))
        .collect();
    r.params.insert("layer_multipliers".into(), json!(shown));
    r.params
        .insert("default_multiplier".into(), json!(DEFAULT_MULTIPLIER));
    Ok(r)
}

fn json_f64(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(v.to_string())
    }
}

/// FoolsGold weights for cumulative update vectors, in input order.
pub fn foolsgold_weights(history: &[Vec<f64>]) -> Vec<f64> {
    let n = history.len();
    let mut cs = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                cs[i][j] = cosine_similarity(&history[i], &history[j]).unwrap_or(0.0);
            }
        }
    }
    let max_cs: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| cs[i][j])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .map(|v| if v.is_finite() { v } else { 0.0 })
        .collect();
    // Pardoning: damp similarity toward clients that look more sybil-like.
    for i in 0..n {
        for j in 0..n {
            if i != j && max_cs[i] < max_cs[j] && max_cs[j] > 0.0 {
                cs[i][j] *= max_cs[i] / max_cs[j];
            }
        }
    }
    let mut w: Vec<f64> = (0..n)
        .map(|i| {
            let m = (0..n)
                .filter(|&j| j != i)
                .map(|j| cs[i][j])
                .fold(f64::NEG_INFINITY, f64::max);
            let m = if m.is_finite() { m } else { 0.0 };
            let w = (1.0 - m).clamp(0.0, 1.0);
            // Rounding leaves identical directions a hair below 1.
            if w < 1e-12 {
                0.0
            } else {
                w
            }
        })
        .collect();
    let top = w.iter().cloned().fold(0.0, f64::max);
    if top <= 0.0 {
        return vec![0.0; n];
    }
    for v in &mut w {
        *v /= top;
        if *v >= 1.0 {
            *v = 0.99;
        }
        *v = if *v <= 0.0 {
            0.0
        } else {
            ((*v / (1.0 - *v)).ln() + 0.5).clamp(0.0, 1.0)
        };
    }
    w
}

/// FoolsGold over cumulative per-client update vectors.
pub fn foolsgold(
    history: &BTreeMap<usize, Vec<f64>>,
    round: usize,
    flag_below: f64,
) -> Result<DefenseReport> {
    let mut report = DefenseReport::new(DefenseKind::FoolsGold, round);
    report.params.insert("scope".into(), json!("whole_update"));
    report.params.insert("flag_below".into(), json!(flag_below));
    report.params.insert("history".into(), json!("cumulative"));
    if history.len() < 2 {
        report
            .warnings
            .push("fewer than two clients with history; nothing flagged".into());
        for id in history.keys() {
            report.scores.insert(*id, 0.0);
        }
        report.weights = Some(history.keys().map(|id| (*id, 1.0)).collect());
        return Ok(report);
    }
    let ids: Vec<usize> = history.keys().copied().collect();
    let vecs: Vec<Vec<f64>> = history.values().cloned().collect();
    let w = foolsgold_weights(&vecs);
    let mut weights = BTreeMap::new();
    for (id, w) in ids.iter().zip(&w) {
        weights.insert(*id, *w);
        report.scores.insert(*id, 1.0 - w);
        if *w < flag_below {
            report.flagged.insert(*id);
        }
    }
    report.weights = Some(weights);
    Ok(report)
}

/// Number of clients spectral signatures removes.
pub fn spectral_removal_count(epsilon: f64, n: usize) -> usize {
    let k = (SPECTRAL_OVERSHOOT * epsilon * n as f64 - 1e-9).ceil();
    (k.max(0.0) as usize).min(n)
}

/// Scores each flattened submission by its squared projection onto the top
/// right singular vector of the centred submission matrix and flags the
/// `⌈1.5·ε·n⌉` highest.
pub fn spectral_signatures(
    subs: &[ClientUpdate],
    round: usize,
    epsilon: f64,
) -> Result<DefenseReport> {
    check_submissions(subs)?;
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Usage(format!(
            "spectral signatures needs 0 < epsilon < 1, got {epsilon}"
        )));
    }
    let mut report = DefenseReport::new(DefenseKind::SpectralSignatures, round);
    report.params.insert("scope".into(), json!("whole_update"));
    report.params.insert("epsilon".into(), json!(epsilon));
    report
        .params
        .insert("overshoot".into(), json!(SPECTRAL_OVERSHOOT));
    let n = subs.len();
    let rows: Vec<Vec<f64>> = subs.iter().map(|s| lora::flatten(&s.stack)).collect();
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = rows
        .iter()
        .flat_map(|r| r.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();
    let spread = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 2 || spread < SIGMA_GUARD {
        report
            .warnings
            .push("degenerate submissions; nothing flagged".into());
        for s in subs {
            report.scores.insert(s.client_id, 0.0);
        }
        return Ok(report);
    }
    // Top right singular vector v of the centred matrix X, via the n×n Gram
    // matrix: with X·Xᵀ u = λ u, the projection of row i on v is √λ·u_i.
    let x = nalgebra::DMatrix::from_row_slice(n, dim, &centered);
    let gram = &x * x.transpose();
    let eig = nalgebra::SymmetricEigen::try_new(gram, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Usage("eigendecomposition did not converge".into()))?;
    let top = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let lambda = eig.eigenvalues[top].max(0.0);
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let u = eig.eigenvectors[(i, top)];
            lambda * u * u
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let k = spectral_removal_count(epsilon, n);
    for (i, s) in subs.iter().enumerate() {
        report.scores.insert(s.client_id, scores[i]);
    }
    for &i in order.iter().take(k) {
        report.flagged.insert(subs[i].client_id);
    }
    Ok(report)
}

/// Running mean of each client's past composite deviations.
pub type CompositeHistory = BTreeMap<usize, (Vec<f64>, usize)>;

/// Per-client flattened `C_i − mean(C)` across layers, with `C_i = s·A_i·B_i`.
pub fn composite_deviations(subs: &[ClientUpdate], config: &LoraConfig) -> Result<Vec<Vec<f64>>> {
    check_submissions(subs)?;
    let n = subs.len();
    let comps = subs
        .iter()
        .map(|s| s.stack.composites(config))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![Vec::new(); n];
    for l in 0..config.num_layers() {
        let mu = mean_matrix(comps.iter().map(|c| &c[l]), n)?;
        for (i, c) in comps.iter().enumerate() {
            out[i].extend(c[l].sub(&mu)?.into_vec());
        }
    }
    Ok(out)
}

/// Applies the centred `m·σ` rule to per-layer composites and reports the
/// directional persistence of each client's composite deviation.
pub fn composition_monitor(
    subs: &[ClientUpdate],
    config: &LoraConfig,
    round: usize,
    multiplier: f64,
    history: &CompositeHistory,
) -> Result<DefenseReport> {
    check_submissions(subs)?;
    let mut report = DefenseReport::new(DefenseKind::CompositionMonitor, round);
    report
        .params
        .insert("scope".into(), json!("per_layer_composite"));
    report.params.insert("multiplier".into(), json!(multiplier));
    let n = subs.len();
    let devs = composite_deviations(subs, config)?;
    let mut alignment = BTreeMap::new();
    for (s, d) in subs.iter().zip(&devs) {
        let a = history
            .get(&s.client_id)
            .and_then(|(mean, _)| cosine_similarity(d, mean))
            .unwrap_or(0.0);
        alignment.insert(s.client_id, a);
    }
    report.alignment = Some(alignment);
    if n < 2 {
        report
            .warnings
            .push("fewer than two submissions; spread undefined, nothing flagged".into());
        for s in subs {
            report.scores.insert(s.client_id, 0.0);
        }
        return Ok(report);
    }
    let mut score = vec![f64::NEG_INFINITY; n];
    let mut flagged = vec![false; n];
    for l in 0..config.num_layers() {
        let span = {
            let d = config.layers[l];
            let start: usize = config.layers[..l].iter().map(|d| d.d_in * d.d_out).sum();
            start..start + d.d_in * d.d_out
        };
        let norms: Vec<f64> = devs
            .iter()
            .map(|d| d[span.clone()].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rule = centered_rule(&norms, multiplier);
        for i in 0..n {
            flagged[i] |= rule.flagged[i];
            score[i] = score[i].max(rule.z[i]);
        }
    }
    for (i, s) in subs.iter().enumerate() {
        report.scores.insert(s.client_id, score[i]);
        if flagged[i] {
            report.flagged.insert(s.client_id);
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    NormThreshold,
    #[serde(rename = "foolsgold")]
    FoolsGold,
    SpectralSignatures,
    CompositionMonitor,
    AdaptiveVerification,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 5] = [
        DefenseKind::NormThreshold,
        DefenseKind::FoolsGold,
        DefenseKind::SpectralSignatures,
        DefenseKind::CompositionMonitor,
        DefenseKind::AdaptiveVerification,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::NormThreshold => "norm_threshold",
            DefenseKind::FoolsGold => "foolsgold",
            DefenseKind::SpectralSignatures => "spectral_signatures",
            DefenseKind::CompositionMonitor => "composition_monitor",
            DefenseKind::AdaptiveVerification => "adaptive_verification",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefenseMode {
    /// Report only.
    #[default]
    Audit,
    /// Exclude flagged clients from aggregation.
    Enforce,
}

/// One configured detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSpec {
    pub name: DefenseKind,
    #[serde(default)]
    pub mode: DefenseMode,
    /// σ multiplier for the threshold rules.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiplier: Option<f64>,
    /// FoolsGold weight below which a client is flagged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag_below: Option<f64>,
    /// Spectral signatures' expected poison fraction; defaults to the true
    /// malicious fraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Adaptive verification multipliers keyed by layer index.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub layer_multipliers: BTreeMap<String, f64>,
}

impl DefenseSpec {
    pub fn audit(name: DefenseKind) -> Self {
        Self {
            name,
            mode: DefenseMode::Audit,
            multiplier: None,
            flag_below: None,
            epsilon: None,
            layer_multipliers: BTreeMap::new(),
        }
    }

    pub fn enforce(name: DefenseKind) -> Self {
        Self {
            mode: DefenseMode::Enforce,
            ..Self::audit(name)
        }
    }

    pub fn parsed_layer_multipliers(&self) -> Result<BTreeMap<usize, f64>> {
        self.layer_multipliers
            .iter()
            .map(|(k, v)| {
                let l = k
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("layer key `{k}` is not an index")))?;
                Ok((l, *v))
            })
            .collect()
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if let Some(m) = self.multiplier {
            if !(m > 0.0) {
                return Err(Error::Config(format!(
                    "{}: multiplier must be positive",
                    self.name
                )));
            }
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::Config(format!(
                    "{}: epsilon must lie in (0, 1)",
                    self.name
                )));
            }
        }
        for (l, m) in self.parsed_layer_multipliers()? {
            if l >= num_layers {
                return Err(Error::Config(format!(
                    "{}: layer {l} does not exist",
                    self.name
                )));
            }
            if !(m > 0.0) {
                return Err(Error::Config(format!(
                    "{}: layer {l} multiplier must be positive",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Ordered detectors plus the history they need across rounds.
#[derive(Clone, Debug, Default)]
pub struct DefensePipeline {
    specs: Vec<DefenseSpec>,
    /// Cumulative `submission − broadcast` per client.
    cumulative: BTreeMap<usize, Vec<f64>>,
    composite_history: CompositeHistory,
    default_epsilon: f64,
}

impl DefensePipeline {
    pub fn new(specs: Vec<DefenseSpec>, default_epsilon: f64) -> Self {
        Self {
            specs,
            cumulative: BTreeMap::new(),
            composite_history: BTreeMap::new(),
            default_epsilon,
        }
    }

    pub fn specs(&self) -> &[DefenseSpec] {
        &self.specs
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    fn needs(&self, kind: DefenseKind) -> bool {
        self.specs.iter().any(|s| s.name == kind)
    }

    /// Runs every detector on the raw submissions, then folds this round into
    /// the histories.
    pub fn evaluate(
        &mut self,
        round: usize,
        broadcast: &LoraStack,
        subs: &[ClientUpdate],
        config: &LoraConfig,
    ) -> Result<Vec<(DefenseReport, DefenseMode)>> {
        if self.specs.is_empty() || subs.is_empty() {
            return Ok(Vec::new());
        }
        if self.needs(DefenseKind::FoolsGold) {
            let base = lora::flatten(broadcast);
            for s in subs {
                let flat = lora::flatten(&s.stack);
                let acc = self
                    .cumulative
                    .entry(s.client_id)
                    .or_insert_with(|| vec![0.0; flat.len()]);
                for ((a, v), b) in acc.iter_mut().zip(&flat).zip(&base) {
                    *a += v - b;
                }
            }
        }
        let mut out = Vec::with_capacity(self.specs.len());
        for spec in &self.specs {
            let m = spec.multiplier.unwrap_or(DEFAULT_MULTIPLIER);
            let report = match spec.name {
                DefenseKind::NormThreshold => norm_threshold(subs, round, m)?,
                DefenseKind::AdaptiveVerification => {
                    adaptive_verification(subs, round, &spec.parsed_layer_multipliers()?)?
                }
                DefenseKind::FoolsGold => {
                    let present: BTreeMap<usize, Vec<f64>> = subs
                        .iter()
                        .filter_map(|s| {
                            self.cumulative
                                .get(&s.client_id)
                                .map(|v| (s.client_id, v.clone()))
                        })
                        .collect();
                    foolsgold(
                        &present,
                        round,
                        spec.flag_below.unwrap_or(FOOLSGOLD_FLAG_BELOW),
                    )?
                }
                DefenseKind::SpectralSignatures => {
                    spectral_signatures(subs, round, spec.epsilon.unwrap_or(self.default_epsilon))?
                }
                DefenseKind::CompositionMonitor => {
                    composition_monitor(subs, config, round, m, &self.composite_history)?
                }
            };
            out.push((report, spec.mode));
        }
        if self.needs(DefenseKind::CompositionMonitor) {
            let devs = composite_deviations(subs, config)?;
            for (s, d) in subs.iter().zip(devs) {
                let entry = self
                    .composite_history
                    .entry(s.client_id)
                    .or_insert_with(|| (vec![0.0; d.len()], 0));
                let k = entry.1 as f64;
                for (m, v) in entry.0.iter_mut().zip(&d) {
                    *m = (*m * k + v) / (k + 1.0);
                }
                entry.1 += 1;
            }
        }
        Ok(out)
    }
}
