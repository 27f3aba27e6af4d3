//! Experiment configuration in TOML.
//!
//! Every key is optional. Top-level scalars configure the federation and the
//! task; `[gap]`, `[datapoison]` and `[naive]` tune the attackers; each
//! `[[defenses]]` entry adds a detector. Example:
//!
//! ```toml
//! seed = 7
//! rounds = 30
//! attack = "gap"
//!
//! [gap]
//! kappa = 2.0
//!
//! [[defenses]]
//! name = "composition_monitor"
//! mode = "enforce"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::GapParams;
use crate::defenses::{DefenseKind, DefenseSpec};
use crate::error::{ConfigError, Result};
use crate::federation::TrainParams;
use crate::lora::LoraConfig;
use crate::task::{Activation, TaskParams, MIN_TRIGGER_OFFSET};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "GAPSIM_OUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    None,
    #[default]
    Gap,
    DataPoison,
    /// Unprojected scaled optimum, a detectability reference.
    Naive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPoisonParams {
    pub poison_fraction: f64,
}

impl Default for DataPoisonParams {
    fn default() -> Self {
        Self {
            poison_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NaiveParams {
    /// Multiple of the unconstrained optimum submitted each round.
    pub scale: f64,
}

impl Default for NaiveParams {
    fn default() -> Self {
        Self { scale: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_clients: usize,
    pub n_malicious: usize,
    pub rounds: usize,
    pub dims: Vec<usize>,
    pub rank: usize,
    /// Defaults to `rank`, making the adapter scaling 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lora_scale: Option<f64>,
    pub init_std: f64,
    pub lr: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub samples_per_client: usize,
    pub noise_std: f64,
    pub heterogeneity: f64,
    pub activation: Activation,
    pub target_scale: f64,
    pub trigger_offset: f64,
    pub trigger_count: usize,
    /// Relative distance under which a trigger counts as hit.
    pub trigger_tolerance: f64,
    pub success_threshold: f64,
    pub eval_samples: usize,
    pub attack: AttackKind,
    pub gap: GapParams,
    pub datapoison: DataPoisonParams,
    pub naive: NaiveParams,
    pub defenses: Vec<DefenseSpec>,
    /// Worker threads for client training: 0 lets the runtime decide,
    /// 1 runs sequentially.
    pub workers: usize,
    /// Save the global adapters every this many rounds; 0 disables.
    pub checkpoint_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let task = TaskParams::default();
        let train = TrainParams::default();
        Self {
            seed: 0,
            n_clients: 10,
            n_malicious: 2,
            rounds: 50,
            dims: task.dims,
            rank: 4,
            lora_scale: None,
            init_std: 0.02,
            lr: train.lr,
            local_steps: train.local_steps,
            batch_size: train.batch_size,
            samples_per_client: 256,
            noise_std: task.noise_std,
            heterogeneity: task.heterogeneity,
            activation: task.activation,
            target_scale: task.target_scale,
            trigger_offset: task.trigger_offset,
            trigger_count: task.trigger_count,
            trigger_tolerance: crate::analysis::DEFAULT_TRIGGER_TOLERANCE,
            success_threshold: crate::analysis::DEFAULT_SUCCESS_THRESHOLD,
            eval_samples: 512,
            attack: AttackKind::Gap,
            gap: GapParams::default(),
            datapoison: DataPoisonParams::default(),
            naive: NaiveParams::default(),
            defenses: vec![
                DefenseSpec::audit(DefenseKind::NormThreshold),
                DefenseSpec::audit(DefenseKind::FoolsGold),
                DefenseSpec::audit(DefenseKind::SpectralSignatures),
            ],
            workers: 0,
            checkpoint_every: 0,
            output_dir: None,
        }
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn lora_scale(&self) -> f64 {
        self.lora_scale.unwrap_or(self.rank as f64)
    }

    pub fn lora_config(&self) -> Result<LoraConfig> {
        LoraConfig::chain(&self.dims, self.rank, self.lora_scale(), self.init_std)
    }

    pub fn task_params(&self) -> TaskParams {
        TaskParams {
            dims: self.dims.clone(),
            trigger_count: self.trigger_count,
            noise_std: self.noise_std,
            heterogeneity: self.heterogeneity,
            target_scale: self.target_scale,
            trigger_offset: self.trigger_offset,
            activation: self.activation,
        }
    }

    pub fn train_params(&self) -> TrainParams {
        TrainParams {
            lr: self.lr,
            local_steps: self.local_steps,
            batch_size: self.batch_size,
        }
    }

    /// Malicious client ids: the last `n_malicious`.
    pub fn malicious_ids(&self) -> std::ops::Range<usize> {
        if self.attack == AttackKind::None {
            self.n_clients..self.n_clients
        } else {
            self.n_clients - self.n_malicious..self.n_clients
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_clients == 0 {
            return Err(invalid("n_clients", "must be at least 1"));
        }
        if self.n_malicious >= self.n_clients {
            return Err(invalid(
                "n_malicious",
                format!(
                    "attackers must be a strict subset of clients (0 <= n_malicious < n_clients), got {} of {}",
                    self.n_malicious, self.n_clients
                ),
            ));
        }
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(invalid("dims", "need at least two positive widths"));
        }
        if self.rank == 0 || self.dims.iter().any(|&d| self.rank > d) {
            return Err(invalid(
                "rank",
                "must be positive and at most every layer width",
            ));
        }
        if let Some(s) = self.lora_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid("lora_scale", "must be positive"));
            }
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.init_std) {
            return Err(invalid("init_std", "must be finite and nonnegative"));
        }
        if !positive(self.lr) {
            return Err(invalid("lr", "must be positive"));
        }
        if self.samples_per_client == 0 {
            return Err(invalid("samples_per_client", "must be at least 1"));
        }
        if !nonneg(self.noise_std) {
            return Err(invalid("noise_std", "must be finite and nonnegative"));
        }
        if !nonneg(self.heterogeneity) {
            return Err(invalid("heterogeneity", "must be finite and nonnegative"));
        }
        if !nonneg(self.target_scale) {
            return Err(invalid("target_scale", "must be finite and nonnegative"));
        }
        if !(self.trigger_offset >= MIN_TRIGGER_OFFSET && self.trigger_offset.is_finite()) {
            return Err(invalid(
                "trigger_offset",
                format!("must be at least {MIN_TRIGGER_OFFSET}"),
            ));
        }
        if self.trigger_count == 0 {
            return Err(invalid("trigger_count", "must be at least 1"));
        }
        if !(self.trigger_tolerance > 0.0 && self.trigger_tolerance < 1.0) {
            return Err(invalid("trigger_tolerance", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.success_threshold) {
            return Err(invalid("success_threshold", "must lie in [0, 1]"));
        }
        if self.eval_samples == 0 {
            return Err(invalid("eval_samples", "must be at least 1"));
        }
        self.gap
            .validate()
            .map_err(|e| invalid("gap", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.datapoison.poison_fraction) {
            return Err(invalid("datapoison.poison_fraction", "must lie in [0, 1]"));
        }
        if !self.naive.scale.is_finite() {
            return Err(invalid("naive.scale", "must be finite"));
        }
        for (i, d) in self.defenses.iter().enumerate() {
            d.validate(self.dims.len() - 1)
                .map_err(|e| invalid(&format!("defenses[{i}]"), e.to_string()))?;
        }
        Ok(())
    }

    /// Canonical TOML with every default spelled out.
    pub fn normalized(&self) -> String {
        let mut c = self.clone();
        c.lora_scale = Some(self.lora_scale());
        toml::to_string(&c).expect("config serializes")
    }

    /// Fraction of malicious clients, used as the spectral default.
    pub fn malicious_fraction(&self) -> f64 {
        let m = self.malicious_ids().len();
        if m == 0 {
            0.1
        } else {
            m as f64 / self.n_clients as f64
        }
    }
}

/// Names every key of `value` absent from `reference`, recursing into tables.
fn unknown_key(value: &toml::Table, reference: &toml::Table, prefix: &str) -> Option<String> {
    for (k, v) in value {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match reference.get(k) {
            None => {
                // Optional keys are absent from the serialized defaults.
                if !matches!(k.as_str(), "lora_scale" | "output_dir") || !prefix.is_empty() {
                    return Some(path);
                }
            }
            Some(toml::Value::Table(r)) => {
                if let toml::Value::Table(t) = v {
                    if let Some(p) = unknown_key(t, r, &path) {
                        return Some(p);
                    }
                }
            }
            Some(_) => {}
        }
    }
    None
}

fn unknown_defense_key(value: &toml::Table) -> Option<String> {
    const KEYS: [&str; 6] = [
        "name",
        "mode",
        "multiplier",
        "flag_below",
        "epsilon",
        "layer_multipliers",
    ];
    let list = value.get("defenses")?.as_array()?;
    for (i, d) in list.iter().enumerate() {
        if let Some(t) = d.as_table() {
            if let Some(k) = t.keys().find(|k| !KEYS.contains(&k.as_str())) {
                return Some(format!("defenses[{i}].{k}"));
            }
        }
    }
    None
}

fn defaults_table() -> toml::Table {
    toml::Table::try_from(ExperimentConfig::default()).expect("defaults serialize")
}

/// Parses config text, applying defaults and validating.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    from_table(table)
}

pub fn from_table(table: toml::Table) -> Result<ExperimentConfig, ConfigError> {
    if let Some(k) =
        unknown_key(&table, &defaults_table(), "").or_else(|| unknown_defense_key(&table))
    {
        return Err(ConfigError::UnknownKey(k));
    }
    if let Some(list) = table.get("defenses").and_then(|d| d.as_array()) {
        for (i, d) in list.iter().enumerate() {
            if let Some(name) = d.get("name").and_then(|n| n.as_str()) {
                if DefenseKind::from_name(name).is_none() {
                    let known: Vec<&str> = DefenseKind::ALL.iter().map(|k| k.name()).collect();
                    return Err(invalid(
                        &format!("defenses[{i}].name"),
                        format!(
                            "unknown defense `{name}`; expected one of {}",
                            known.join(", ")
                        ),
                    ));
                }
            }
        }
    }
    let cfg: ExperimentConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config_file(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            ConfigError::MissingFile {
                path: path.to_path_buf(),
            }
        } else {
            ConfigError::Read {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })?;
    parse_config_str(&text)
}

/// Parses a CLI value: TOML syntax when it parses, else a bare string.
pub fn parse_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// Returns `base` with the dotted key `param` set to `value`.
pub fn with_param(
    base: &ExperimentConfig,
    param: &str,
    value: toml::Value,
) -> Result<ExperimentConfig, ConfigError> {
    let mut table =
        toml::Table::try_from(base.clone()).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let parts: Vec<&str> = param.split('.').collect();
    let (last, parents) = parts
        .split_last()
        .ok_or_else(|| ConfigError::UnknownKey(param.to_string()))?;
    let mut cur = &mut table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| invalid(param, "is not a table"))?;
    }
    if let Some(old) = cur.get(*last) {
        if old.is_table() || old.is_array() {
            return Err(invalid(param, "is not a sweepable scalar"));
        }
    }
    cur.insert(last.to_string(), value);
    from_table(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let c = parse_config_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.lora_scale(), 4.0);
        assert_eq!(c.malicious_ids(), 8..10);
    }

    #[test]
    fn strict_subset_rule() {
        let e = parse_config_str("n_clients = 4\nn_malicious = 4").unwrap_err();
        assert!(
            matches!(&e, ConfigError::Invalid { field, reason } if field == "n_malicious" && reason.contains("strict subset"))
        );
    }

    #[test]
    fn unknown_defense_is_rejected() {
        let e = parse_config_str("[[defenses]]\nname = \"krum\"").unwrap_err();
        assert!(e.to_string().contains("unknown defense `krum`"), "{e}");
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = parse_config_str("sed = 3").unwrap_err();
        assert!(matches!(&e, ConfigError::UnknownKey(k) if k == "sed"));
        let e = parse_config_str("[gap]\nkapa = 2.0").unwrap_err();
        assert!(matches!(&e, ConfigError::UnknownKey(k) if k == "gap.kapa"));
        let e = parse_config_str("[[defenses]]\nname = \"foolsgold\"\nfoo = 1").unwrap_err();
        assert!(matches!(&e, ConfigError::UnknownKey(k) if k == "defenses[0].foo"));
    }

    #[test]
    fn parse_errors_are_distinct() {
        assert!(matches!(
            parse_config_str("seed = ="),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            parse_config_file(Path::new("/nonexistent/gapsim.toml")),
            Err(ConfigError::MissingFile { .. })
        ));
        assert!(matches!(
            parse_config_str("seed = \"x\""),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn normalized_round_trips() {
        let c = parse_config_str("seed = 9\nattack = \"datapoison\"\n[gap]\nkappa = 2.0\n[[defenses]]\nname = \"adaptive_verification\"\nlayer_multipliers = { \"1\" = 1.5 }").unwrap();
        let text = c.normalized();
        let back = parse_config_str(&text).unwrap();
        assert_eq!(back.normalized(), text);
        assert_eq!(back.lora_scale, Some(4.0));
        assert_eq!(back.gap.kappa, 2.0);
    }

    #[test]
    fn dotted_params() {
        let base = ExperimentConfig::default();
        let c = with_param(&base, "gap.kappa", parse_value("2.5")).unwrap();
        assert_eq!(c.gap.kappa, 2.5);
        let c = with_param(&base, "n_malicious", parse_value("3")).unwrap();
        assert_eq!(c.n_malicious, 3);
        let c = with_param(&base, "attack", parse_value("none")).unwrap();
        assert_eq!(c.attack, AttackKind::None);
        assert!(matches!(
            with_param(&base, "gap.nope", parse_value("1")),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(with_param(&base, "n_malicious", parse_value("10")).is_err());
        assert!(with_param(&base, "gap", parse_value("1")).is_err());
    }

    #[test]
    fn bad_values_name_the_field() {
        for (text, field) in [
            ("rank = 0", "rank"),
            ("lr = -1.0", "lr"),
            ("trigger_offset = 0.5", "trigger_offset"),
            ("[gap]\nkappa = 0.5", "gap"),
            (
                "[datapoison]\npoison_fraction = 2.0",
                "datapoison.poison_fraction",
            ),
            (
                "[[defenses]]\nname = \"spectral_signatures\"\nepsilon = 1.5",
                "defenses[0]",
            ),
        ] {
            let e = parse_config_str(text).unwrap_err();
            assert!(
                matches!(&e, ConfigError::Invalid { field: f, .. } if f == field),
                "{text}: {e}"
            );
        }
    }
}
