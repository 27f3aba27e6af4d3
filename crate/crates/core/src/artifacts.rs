//! Run directories: writing them, reading them back, and the CSV views over
//! one or more of them.
//!
//! A run directory holds `config.normalized`, `rounds.jsonl` (one
//! [`RoundLogEntry`] per line, flushed per round), `summary.json` and, when
//! `checkpoint_every > 0`, `checkpoints/round-NNNN.gapl`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint;
use crate::config::{self, ExperimentConfig, OUTPUT_ROOT_ENV};
use crate::error::ConfigError;
use crate::error::{Error, Result};
use crate::experiment::{Experiment, RoundLogEntry, RunSummary};

pub const CONFIG_FILE: &str = "config.normalized";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SWEEP_FILE: &str = "sweep.csv";
/// Key holding every wall-clock field of a round entry.
pub const TIMING_KEY: &str = "timing";

/// `$GAPSIM_OUT` if set, else `runs`.
pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn checkpoint_path(dir: &Path, round: usize) -> PathBuf {
    dir.join(CHECKPOINT_DIR)
        .join(format!("round-{round:04}.gapl"))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("log types serialize")
}

/// Runs `config` to completion, writing its artifacts under `dir`.
///
/// The config snapshot and an empty round log exist before any client runs,
/// so a failure at any later point leaves the rounds completed so far on
/// disk.
pub fn write_run(config: ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(CONFIG_FILE), config.normalized())?;
    let rounds_path = dir.join(ROUNDS_FILE);
    let file = File::create(&rounds_path).map_err(|e| Error::io(&rounds_path, e))?;
    let mut rounds = BufWriter::new(file);

    let every = config.checkpoint_every;
    if every > 0 {
        let cp = dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&cp).map_err(|e| Error::io(&cp, e))?;
    }
    let mut exp = Experiment::new(config)?;
    if every > 0 {
        let path = checkpoint_path(dir, 0);
        checkpoint::save_checkpoint(&exp.state().global_stack, &path)?;
    }
    while let Some(entry) = exp.step()? {
        let round = entry.round;
        writeln!(rounds, "{}", to_json(entry))
            .and_then(|_| rounds.flush())
            .map_err(|e| Error::io(&rounds_path, e))?;
        if every > 0 && round % every == 0 {
            checkpoint::save_checkpoint(&exp.state().global_stack, &checkpoint_path(dir, round))?;
        }
    }
    let summary = exp.log().summary();
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&dir.join(SUMMARY_FILE), text + "\n")?;
    Ok(summary)
}

/// A round-log line with the wall-clock fields removed.
pub fn strip_timing(line: &str) -> Result<String> {
    let mut v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::CorruptLog {
        path: PathBuf::from(ROUNDS_FILE),
        reason: e.to_string(),
    })?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove(TIMING_KEY);
    }
    Ok(v.to_string())
}

/// A run directory read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    /// Directory name, used as the row key in reports.
    pub id: String,
    pub dir: PathBuf,
    pub entries: Vec<RoundLogEntry>,
    pub summary: RunSummary,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let corrupt = |path: &Path, reason: String| Error::CorruptLog {
        path: path.to_path_buf(),
        reason,
    };
    let rounds_path = dir.join(ROUNDS_FILE);
    let file = File::open(&rounds_path).map_err(|e| Error::io(&rounds_path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&rounds_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: RoundLogEntry = serde_json::from_str(&line)
            .map_err(|e| corrupt(&rounds_path, format!("line {}: {e}", i + 1)))?;
        entries.push(entry);
    }
    let summary_path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let summary: RunSummary =
        serde_json::from_str(&text).map_err(|e| corrupt(&summary_path, e.to_string()))?;
    if entries.len() != summary.rounds {
        return Err(corrupt(
            &rounds_path,
            format!(
                "{} round entries but the summary records {}",
                entries.len(),
                summary.rounds
            ),
        ));
    }
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(LoadedRun {
        id,
        dir: dir.to_path_buf(),
        entries,
        summary,
    })
}

/// The three report tables as CSV text.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    /// Per run and defense: per-round mean detection, FPR and evasion, plus
    /// the run-level ever-flagged rates.
    pub detection: String,
    /// Per run and round: trigger success, benign loss, drift per layer.
    pub series: String,
    /// Per run, round, layer and metric: the centroid distance summary.
    pub centroid: String,
}

fn csv_text(header: &[String], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(&r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

fn cell(x: f64) -> String {
    format!("{x}")
}

fn opt_cell<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// Builds the report tables; rows follow the order of `runs`, then defense
/// name, round and layer.
pub fn report(runs: &[LoadedRun]) -> Report {
    let mut det = Vec::new();
    for run in runs {
        for (name, d) in &run.summary.defenses {
            det.push(vec![
                run.id.clone(),
                name.clone(),
                run.summary.malicious.len().to_string(),
                cell(d.per_round_mean.detection_rate),
                cell(d.per_round_mean.false_positive_rate),
                cell(d.per_round_mean.evasion_rate),
                cell(d.ever_flagged_detection),
                cell(d.ever_flagged_fpr),
            ]);
        }
    }
    let detection = csv_text(
        &strings(&[
            "run",
            "defense",
            "malicious_clients",
            "detection_rate",
            "false_positive_rate",
            "evasion_rate",
            "ever_flagged_detection",
            "ever_flagged_fpr",
        ]),
        det,
    );

    let layers = runs
        .iter()
        .flat_map(|r| r.entries.iter().map(|e| e.metrics.composite_drift.len()))
        .max()
        .unwrap_or(0);
    let mut header = strings(&["run", "round", "trigger_success", "benign_loss"]);
    header.extend((0..layers).map(|l| format!("drift_layer{l}")));
    let mut series = Vec::new();
    let mut cent = Vec::new();
    for run in runs {
        for e in &run.entries {
            let m = &e.metrics;
            let mut row = vec![
                run.id.clone(),
                m.round.to_string(),
                cell(m.trigger_success_rate),
                cell(m.benign_loss),
            ];
            row.extend((0..layers).map(|l| opt_cell(m.composite_drift.get(l))));
            series.push(row);
            for (l, c) in m.centroid_stats.iter().enumerate() {
                for (metric, g) in [("euclidean", &c.euclidean), ("cosine", &c.cosine)] {
                    cent.push(vec![
                        run.id.clone(),
                        m.round.to_string(),
                        l.to_string(),
                        metric.to_string(),
                        cell(g.benign_avg),
                        cell(g.benign_max),
                        opt_cell(g.malicious_avg),
                    ]);
                }
            }
        }
    }
    Report {
        detection,
        series: csv_text(&header, series),
        centroid: csv_text(
            &strings(&[
                "run",
                "round",
                "layer",
                "metric",
                "benign_avg",
                "benign_max",
                "malicious_avg",
            ]),
            cent,
        ),
    }
}

/// `out.csv` → `out.series.csv` and `out.centroid.csv`.
pub fn report_sibling(path: &Path, table: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = path
        .extension()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    path.with_file_name(format!("{stem}.{table}.{ext}"))
}

/// Writes the detection table to `path` and the other two beside it.
pub fn write_report(report: &Report, path: &Path) -> Result<Vec<PathBuf>> {
    let series = report_sibling(path, "series");
    let centroid = report_sibling(path, "centroid");
    write_file(path, &report.detection)?;
    write_file(&series, &report.series)?;
    write_file(&centroid, &report.centroid)?;
    Ok(vec![path.to_path_buf(), series, centroid])
}

/// One value of a sweep.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub index: usize,
    pub value: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub outcome: std::result::Result<RunSummary, String>,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub runs: Vec<SweepRun>,
    pub csv_path: PathBuf,
}

impl SweepOutcome {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.outcome.is_err()).count()
    }
}

fn dir_safe(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn sweep_row(param: &str, run: &SweepRun) -> Vec<String> {
    let mut row = vec![
        run.index.to_string(),
        param.to_string(),
        run.value.clone(),
        run.seed.to_string(),
        run.dir.display().to_string(),
    ];
    match &run.outcome {
        Err(msg) => {
            row.push(format!("failed: {msg}"));
            row.extend(std::iter::repeat_n(String::new(), 9));
        }
        Ok(s) => {
            let log = load_run(&run.dir).ok();
            let slacks = |spatial: bool| {
                log.as_ref().and_then(|l| {
                    mean(l.entries.iter().flat_map(|e| e.attack_log.iter()).map(|a| {
                        if spatial {
                            a.spatial_slack
                        } else {
                            a.temporal_slack
                        }
                    }))
                })
            };
            row.push("ok".into());
            row.push(cell(s.final_trigger_success));
            row.push(opt_cell(s.rounds_to_threshold));
            row.push(opt_cell(s.final_metrics.as_ref().map(|m| m.benign_loss)));
            row.push(opt_cell(slacks(false)));
            row.push(opt_cell(slacks(true)));
            row.push(s.constraint_violations.to_string());
            row.push(s.camouflaged_rounds.to_string());
            row.push(opt_cell(mean(s.costs.iter().map(|c| c.per_round_ops))));
            row.push(
                s.defenses
                    .iter()
                    .map(|(k, d)| format!("{k}={}", d.per_round_mean.detection_rate))
                    .collect::<Vec<_>>()
                    .join(";"),
            );
        }
    }
    row
}

/// Runs `base` once per value of `param`, sequentially, with seed
/// `base.seed + index`. Per-value failures are recorded in the CSV and do
/// not stop the sweep; an unknown or non-scalar parameter fails up front.
pub fn sweep(
    base: &ExperimentConfig,
    param: &str,
    values: &[String],
    root: &Path,
) -> Result<SweepOutcome> {
    // Reject a bad parameter name before doing any work.
    let probe = config::with_param(base, param, config::parse_value("0"));
    match probe {
        Err(e @ ConfigError::UnknownKey(_)) => return Err(e.into()),
        Err(e @ ConfigError::Invalid { .. }) if e.to_string().contains("sweepable") => {
            return Err(e.into())
        }
        _ => {}
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;

    let mut runs = Vec::new();
    for (index, value) in values.iter().enumerate() {
        let seed = base.seed.wrapping_add(index as u64);
        let dir = root.join(format!(
            "{index:03}-{}-{}",
            dir_safe(param),
            dir_safe(value)
        ));
        let outcome = config::with_param(base, param, config::parse_value(value))
            .map_err(Error::from)
            .and_then(|mut c| {
                c.seed = seed;
                c.validate()?;
                write_run(c, &dir)
            })
            .map_err(|e| e.to_string());
        runs.push(SweepRun {
            index,
            value: value.clone(),
            seed,
            dir,
            outcome,
        });
    }
    let header = strings(&[
        "index",
        "param",
        "value",
        "seed",
        "dir",
        "status",
        "final_trigger_success",
        "rounds_to_threshold",
        "final_benign_loss",
        "mean_temporal_slack",
        "mean_spatial_slack",
        "constraint_violations",
        "camouflaged_rounds",
        "attacker_ops_per_round",
        "defense_detection",
    ]);
    let rows = runs.iter().map(|r| sweep_row(param, r)).collect();
    let csv_path = root.join(SWEEP_FILE);
    write_file(&csv_path, csv_text(&header, rows))?;
    Ok(SweepOutcome { runs, csv_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    fn small(extra: &str) -> ExperimentConfig {
        parse_config_str(&format!(
            "rounds = 3\nn_clients = 4\nn_malicious = 1\nsamples_per_client = 32\neval_samples = 64\n\
             [gap]\nphase1_steps = 200\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn run_dir_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small("");
        c.checkpoint_every = 2;
        let summary = write_run(c.clone(), dir.path()).unwrap();
        assert_eq!(
            fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap(),
            c.normalized()
        );
        let run = load_run(dir.path()).unwrap();
        assert_eq!(run.entries.len(), 3);
        assert_eq!(run.summary, summary);
        assert!(checkpoint_path(dir.path(), 0).exists());
        assert!(checkpoint_path(dir.path(), 2).exists());
        assert!(!checkpoint_path(dir.path(), 3).exists());
        let stack = checkpoint::load_checkpoint(&checkpoint_path(dir.path(), 2)).unwrap();
        assert_eq!(stack.num_layers(), 2);
    }

    #[test]
    fn strip_timing_drops_only_timing() {
        let s = strip_timing(r#"{"round":1,"timing":{"round_seconds":0.5},"x":[1]}"#).unwrap();
        assert_eq!(s, r#"{"round":1,"x":[1]}"#);
    }

    #[test]
    fn corrupt_log_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_run(small(""), dir.path()).unwrap();
        fs::write(dir.path().join(ROUNDS_FILE), "{not json\n").unwrap();
        let err = load_run(dir.path()).unwrap_err();
        assert!(matches!(err, Error::CorruptLog { .. }));
        assert!(err.to_string().contains(ROUNDS_FILE));
        let missing = load_run(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(missing, Error::Io { .. }));
    }

    #[test]
    fn report_shapes() {
        let root = tempfile::tempdir().unwrap();
        let mut runs = Vec::new();
        for name in ["b-run", "a-run"] {
            let d = root.path().join(name);
            write_run(small(""), &d).unwrap();
            runs.push(load_run(&d).unwrap());
        }
        let r = report(&runs);
        let det: Vec<&str> = r.detection.lines().collect();
        assert!(det[0].starts_with(
            "run,defense,malicious_clients,detection_rate,false_positive_rate,evasion_rate"
        ));
        // Three default defenses per run, in input order.
        assert_eq!(det.len(), 1 + 6);
        assert!(det[1].starts_with("b-run,") && det[4].starts_with("a-run,"));
        assert_eq!(r.series.lines().count(), 1 + 2 * 3);
        assert_eq!(
            r.series.lines().next().unwrap(),
            "run,round,trigger_success,benign_loss,drift_layer0,drift_layer1"
        );
        assert_eq!(r.centroid.lines().count(), 1 + 2 * 3 * 2 * 2);

        let out = root.path().join("table.csv");
        let paths = write_report(&r, &out).unwrap();
        assert_eq!(paths[1], root.path().join("table.series.csv"));
        assert_eq!(fs::read_to_string(&paths[2]).unwrap(), r.centroid);
    }

    #[test]
    fn sweep_records_every_value() {
        let root = tempfile::tempdir().unwrap();
        let values: Vec<String> = ["0", "1", "9"].iter().map(|s| s.to_string()).collect();
        let out = sweep(&small(""), "n_malicious", &values, root.path()).unwrap();
        assert_eq!(out.runs.len(), 3);
        // n_malicious = 9 breaks the strict-subset rule but the sweep goes on.
        assert_eq!(out.failures(), 1);
        assert_eq!(out.runs[1].seed, small("").seed + 1);
        let text = fs::read_to_string(&out.csv_path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(3).unwrap().contains("failed"));
    }

    #[test]
    fn sweep_edge_cases() {
        let root = tempfile::tempdir().unwrap();
        let out = sweep(&small(""), "gap.kappa", &[], root.path()).unwrap();
        assert!(out.runs.is_empty());
        let text = fs::read_to_string(&out.csv_path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("index,param,value"));

        let err = sweep(&small(""), "no_such_field", &["1".into()], root.path()).unwrap_err();
        assert!(matches!(err, Error::ConfigFile(ConfigError::UnknownKey(_))));
        let err = sweep(&small(""), "dims", &["1".into()], root.path()).unwrap_err();
        assert!(matches!(
            err,
            Error::ConfigFile(ConfigError::Invalid { .. })
        ));
    }

    #[test]
    fn sibling_names() {
        assert_eq!(
            report_sibling(Path::new("/t/out.csv"), "series"),
            PathBuf::from("/t/out.series.csv")
        );
        assert_eq!(
            report_sibling(Path::new("out"), "centroid"),
            PathBuf::from("out.centroid.csv")
        );
    }
}
