//! Experiment configuration, noise-ratio sweeps and report files.
//!
//! Outputs are UTF-8 CSV and JSON lines; every file carries the config hash so
//! artifacts from one run can be matched up later.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::write_atomic;
use crate::data::{self, FeatureDataset, SynthConfig};
use crate::error::{Error, Result, ResultExt};
use crate::eval::{self, EvalReport};
use crate::model;
use crate::npc::{self, EpochStats, Method, RunReport, TrainConfig};
use crate::rng::{self, tag};

pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const EPOCH_LOG_FILE: &str = "epochs.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.npck";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    /// Train/val/test fractions.
    pub split: [f64; 3],
    pub noise_ratios: Vec<f64>,
    pub methods: Vec<Method>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            split: [0.8, 0.1, 0.1],
            noise_ratios: vec![0.0, 0.2, 0.4, 0.6],
            methods: vec![Method::Baseline, Method::Npc],
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).context(|| format!("parsing {}", path.display()))
    }

    /// One seed drives data generation and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("methods must not be empty".into()));
        }
        if self.noise_ratios.is_empty() {
            return Err(Error::InvalidConfig("noise_ratios must not be empty".into()));
        }
        if self.noise_ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidConfig("noise ratios must lie in [0, 1]".into()));
        }
        if self.noise_ratios.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("noise ratios must be sorted ascending and unique".into()));
        }
        Ok(())
    }

    /// Hash of everything that determines a cell's result other than the cell key
    /// (noise ratio, method) and the output location.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            synth: &'a SynthConfig,
            train: &'a TrainConfig,
            split: [f64; 3],
        }
        let bytes = serde_json::to_vec(&Hashed {
            synth: &self.synth,
            train: &self.train,
            split: self.split,
        })
        .expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Generated dataset split into a clean train part and a test part.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: FeatureDataset,
    pub test: FeatureDataset,
}

pub fn prepare(cfg: &ExperimentConfig, ds: &FeatureDataset) -> Result<Prepared> {
    let (train, _val, test) = data::split(ds, cfg.split, rng::derive(cfg.train.seed, tag::SPLIT, 0))?;
    Ok(Prepared { train, test })
}

/// Seed for injecting `ratio` noise; depends on the ratio value, not its position.
pub fn noise_seed(seed: u64, ratio: f64) -> u64 {
    rng::derive(seed, tag::NOISE, (ratio * 1e6).round() as u64)
}

pub fn run_cell(cfg: &ExperimentConfig, prepared: &Prepared, ratio: f64, method: Method) -> Result<RunReport> {
    let noisy = data::inject_noise(&prepared.train, ratio, noise_seed(cfg.train.seed, ratio))?;
    npc::run_pipeline(&cfg.train, method, &noisy, &prepared.test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub noise_ratio: f64,
    pub method: Method,
    pub r1_i2t: f64,
    pub r5_i2t: f64,
    pub r10_i2t: f64,
    pub r1_t2i: f64,
    pub r5_t2i: f64,
    pub r10_t2i: f64,
    pub rsum: f64,
    pub config_hash: String,
}

impl ReportRow {
    pub fn new(noise_ratio: f64, method: Method, e: &EvalReport, config_hash: &str) -> Self {
        Self {
            noise_ratio,
            method,
            r1_i2t: e.r1_i2t,
            r5_i2t: e.r5_i2t,
            r10_i2t: e.r10_i2t,
            r1_t2i: e.r1_t2i,
            r5_t2i: e.r5_t2i,
            r10_t2i: e.r10_t2i,
            rsum: e.rsum,
            config_hash: config_hash.to_string(),
        }
    }

    pub fn eval(&self) -> EvalReport {
        EvalReport::from_recalls([
            self.r1_i2t,
            self.r5_i2t,
            self.r10_i2t,
            self.r1_t2i,
            self.r5_t2i,
            self.r10_t2i,
        ])
    }

    fn key(&self) -> (Method, u64) {
        (self.method, self.noise_ratio.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub var_r1: Option<f64>,
    pub config_hash: String,
}

/// Variance of averaged R@1 across noise ratios, per method. Methods with a
/// single ratio get no variance.
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut by_method: BTreeMap<Method, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        by_method.entry(r.method).or_default().push(r);
    }
    by_method
        .into_iter()
        .map(|(method, mut rs)| {
            rs.sort_by(|a, b| a.noise_ratio.total_cmp(&b.noise_ratio));
            let r1: Vec<f64> = rs.iter().map(|r| r.eval().mean_r1()).collect();
            SummaryRow {
                method,
                var_r1: eval::r1_variance(&r1).ok(),
                config_hash: rs[0].config_hash.clone(),
            }
        })
        .collect()
}

pub fn report_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "noise_ratio",
            "method",
            "r1_i2t",
            "r5_i2t",
            "r10_i2t",
            "r1_t2i",
            "r5_t2i",
            "r10_t2i",
            "rsum",
            "config_hash",
        ])?;
    }
    w.into_inner().map_err(|e| Error::Malformed(e.to_string()))
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let with_var = rows.iter().any(|r| r.var_r1.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    if with_var {
        w.write_record(["method", "var_r1", "config_hash"])?;
    } else {
        w.write_record(["method", "config_hash"])?;
    }
    for r in rows {
        let mut rec = vec![r.method.to_string()];
        if with_var {
            rec.push(r.var_r1.map(|v| v.to_string()).unwrap_or_default());
        }
        rec.push(r.config_hash.clone());
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Malformed(e.to_string()))
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Malformed(format!("{}: {other:?}", path.display())),
    })?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?)
}

#[derive(Serialize)]
struct EpochLine<'a> {
    config_hash: &'a str,
    method: Method,
    noise_ratio: f64,
    epoch: usize,
    phase: npc::Phase,
    mean_w_clean: Option<f64>,
    mean_w_noisy: Option<f64>,
    clean_set_size: Option<usize>,
    clean_set_purity: Option<f64>,
    tau_used: Option<f64>,
    train_loss_rce: f64,
    train_loss_mb: f64,
}

pub fn epoch_log_lines(hash: &str, method: Method, noise_ratio: f64, epochs: &[EpochStats]) -> Result<String> {
    let mut out = String::new();
    for e in epochs {
        out.push_str(&serde_json::to_string(&EpochLine {
            config_hash: hash,
            method,
            noise_ratio,
            epoch: e.epoch,
            phase: e.phase,
            mean_w_clean: e.mean_w_clean,
            mean_w_noisy: e.mean_w_noisy,
            clean_set_size: e.clean_set_size,
            clean_set_purity: e.clean_set_purity,
            tau_used: e.tau_used,
            train_loss_rce: e.train_loss_rce,
            train_loss_mb: e.train_loss_mb,
        })?);
        out.push('\n');
    }
    Ok(out)
}

fn resolved_config_json(cfg: &ExperimentConfig) -> String {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    v["config_hash"] = serde_json::Value::String(cfg.config_hash());
    serde_json::to_string_pretty(&v).expect("value serializes") + "\n"
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Artifacts of a single training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub row: ReportRow,
    pub report: RunReport,
}

/// Trains one method at one noise ratio on a clean dataset and writes the
/// report CSV, epoch log, final checkpoint and resolved config to `out`.
pub fn train_to_dir(cfg: &ExperimentConfig, ds: &FeatureDataset, method: Method, ratio: f64, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure_dir(out)?;
    let hash = cfg.config_hash();
    let prepared = prepare(cfg, ds)?;
    let report = run_cell(cfg, &prepared, ratio, method)?;
    let row = ReportRow::new(ratio, method, &report.eval, &hash);
    write_atomic(&out.join(CONFIG_FILE), resolved_config_json(cfg).as_bytes())?;
    write_atomic(&out.join(REPORT_FILE), &report_csv(std::slice::from_ref(&row))?)?;
    write_atomic(
        &out.join(EPOCH_LOG_FILE),
        epoch_log_lines(&hash, method, ratio, &report.epochs)?.as_bytes(),
    )?;
    model::write_checkpoint(&report.final_checkpoint, &out.join(CHECKPOINT_FILE))?;
    Ok(TrainOutcome { row, report })
}

#[derive(Debug)]
pub struct CellFailure {
    pub noise_ratio: f64,
    pub method: Method,
    pub error: Error,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
    pub runs: Vec<RunReport>,
    pub failures: Vec<CellFailure>,
}

/// Runs every (noise ratio, method) cell, each on a fresh noisy copy of the
/// train split. Cells run in parallel; output order is the config order.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    let ds = data::generate_synthetic(&cfg.synth)?;
    let prepared = prepare(cfg, &ds)?;
    let cells: Vec<(f64, Method)> = cfg
        .noise_ratios
        .iter()
        .flat_map(|&r| cfg.methods.iter().map(move |&m| (r, m)))
        .collect();
    let results: Vec<Result<RunReport>> = cells
        .par_iter()
        .map(|&(r, m)| run_cell(cfg, &prepared, r, m))
        .collect();

    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (&(noise_ratio, method), res) in cells.iter().zip(results) {
        match res {
            Ok(run) => {
                rows.push(ReportRow::new(noise_ratio, method, &run.eval, &hash));
                runs.push(run);
            }
            Err(error) => failures.push(CellFailure {
                noise_ratio,
                method,
                error,
            }),
        }
    }
    Ok(SweepOutcome {
        summary: summarize(&rows),
        config_hash: hash,
        rows,
        runs,
        failures,
    })
}

pub fn write_sweep(cfg: &ExperimentConfig, outcome: &SweepOutcome, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    write_atomic(&out.join(CONFIG_FILE), resolved_config_json(cfg).as_bytes())?;
    write_atomic(&out.join(REPORT_FILE), &report_csv(&outcome.rows)?)?;
    write_atomic(&out.join(SUMMARY_FILE), &summary_csv(&outcome.summary)?)?;
    let mut log = String::new();
    for run in &outcome.runs {
        log.push_str(&epoch_log_lines(&outcome.config_hash, run.method, run.noise_ratio, &run.epochs)?);
    }
    write_atomic(&out.join(EPOCH_LOG_FILE), log.as_bytes())
}

#[derive(Debug)]
pub struct Merged {
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
}

/// Merges report files keyed by (method, noise ratio). Identical rows collapse;
/// differing config hashes are refused unless `force`.
pub fn merge_reports(dirs: &[PathBuf], force: bool) -> Result<Merged> {
    let mut merged: BTreeMap<(Method, u64), ReportRow> = BTreeMap::new();
    let mut first_hash: Option<String> = None;
    for dir in dirs {
        let rows = read_report(&dir.join(REPORT_FILE))?;
        for row in rows {
            match &first_hash {
                None => first_hash = Some(row.config_hash.clone()),
                Some(h) if *h != row.config_hash && !force => {
                    return Err(Error::ConfigHashMismatch(h.clone(), row.config_hash.clone()));
                }
                Some(_) => {}
            }
            match merged.get(&row.key()) {
                Some(existing) if *existing != row => {
                    log::warn!(
                        "conflicting rows for ({}, {}); keeping the first",
                        row.method,
                        row.noise_ratio
                    );
                }
                Some(_) => {}
                None => {
                    merged.insert(row.key(), row);
                }
            }
        }
    }
    let mut rows: Vec<ReportRow> = merged.into_values().collect();
    rows.sort_by(|a, b| a.noise_ratio.total_cmp(&b.noise_ratio).then(a.method.cmp(&b.method)));
    Ok(Merged {
        summary: summarize(&rows),
        rows,
    })
}

pub fn write_merged(merged: &Merged, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    write_atomic(&out.join(REPORT_FILE), &report_csv(&merged.rows)?)?;
    write_atomic(&out.join(SUMMARY_FILE), &summary_csv(&merged.summary)?)
}

/// SHA-256 of a byte buffer, hex encoded.
pub fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(r: f64, m: Method, r1: f64, hash: &str) -> ReportRow {
        ReportRow::new(r, m, &EvalReport::from_recalls([r1, r1, r1, r1, r1, r1]), hash)
    }

    #[test]
    fn config_validation() {
        let mut cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        cfg.noise_ratios = vec![0.4, 0.2];
        assert!(cfg.validate().is_err());
        cfg.noise_ratios = vec![0.2, 0.2];
        assert!(cfg.validate().is_err());
        cfg.noise_ratios = vec![0.0, 1.2];
        assert!(cfg.validate().is_err());
        cfg = ExperimentConfig {
            methods: vec![],
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_location_but_not_seed() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.methods = vec![Method::Npc];
        assert_eq!(a.config_hash(), b.config_hash());
        b.set_seed(99);
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn json_round_trip_with_partial_fields() {
        let cfg = ExperimentConfig::from_json(r#"{"noise_ratios":[0.0,0.6],"methods":["npc_no_w"],"train":{"epochs":2}}"#).unwrap();
        assert_eq!(cfg.methods, vec![Method::NpcNoW]);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json_pretty()).unwrap(), cfg);
    }

    #[test]
    fn summary_needs_two_ratios() {
        let one = summarize(&[row(0.0, Method::Baseline, 50.0, "h")]);
        assert_eq!(one.len(), 1);
        assert!(one[0].var_r1.is_none());
        let text = String::from_utf8(summary_csv(&one).unwrap()).unwrap();
        assert_eq!(text.lines().next().unwrap(), "method,config_hash");

        let rows: Vec<ReportRow> = [0.0, 0.2, 0.4, 0.6]
            .iter()
            .flat_map(|&r| [row(r, Method::Baseline, 80.0 - 40.0 * r, "h"), row(r, Method::Npc, 80.0, "h")])
            .collect();
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].var_r1, Some(0.0));
        assert!(s[0].var_r1.unwrap() > 0.0);
    }

    #[test]
    fn report_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row(0.2, Method::Npc, 61.5, "abc"), row(0.4, Method::NpcNoMb, 12.25, "abc")];
        let path = dir.path().join(REPORT_FILE);
        write_atomic(&path, &report_csv(&rows).unwrap()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("noise_ratio,method,r1_i2t,r5_i2t,r10_i2t,r1_t2i,r5_t2i,r10_t2i,rsum,config_hash\n"));
        assert_eq!(read_report(&path).unwrap(), rows);
    }

    #[test]
    fn merge_dedups_and_checks_hashes() {
        let root = tempfile::tempdir().unwrap();
        let write = |name: &str, rows: &[ReportRow]| {
            let d = root.path().join(name);
            std::fs::create_dir_all(&d).unwrap();
            write_atomic(&d.join(REPORT_FILE), &report_csv(rows).unwrap()).unwrap();
            d
        };
        let a = write("a", &[row(0.0, Method::Npc, 70.0, "h1")]);
        let merged = merge_reports(&[a.clone(), a.clone()], false).unwrap();
        assert_eq!(merged.rows.len(), 1);
        let b = write("b", &[row(0.2, Method::Npc, 60.0, "h2")]);
        assert!(matches!(
            merge_reports(&[a.clone(), b.clone()], false),
            Err(Error::ConfigHashMismatch(..))
        ));
        assert_eq!(merge_reports(&[a, b], true).unwrap().rows.len(), 2);

        let grid: Vec<PathBuf> = [0.0, 0.2, 0.4, 0.6]
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                write(
                    &format!("g{i}"),
                    &[row(r, Method::Baseline, 80.0 - 50.0 * r, "h"), row(r, Method::Npc, 80.0 - 5.0 * r, "h")],
                )
            })
            .collect();
        let m = merge_reports(&grid, false).unwrap();
        assert_eq!(m.rows.len(), 8);
        assert_eq!(m.summary.len(), 2);
        assert!(m.summary.iter().all(|s| s.var_r1.is_some()));
    }
}
