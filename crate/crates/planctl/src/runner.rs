//! Generate, train and evaluate one run; fan runs of an experiment out over
//! worker threads.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use skipplan::corpus::{Corpus, DatasetSplit, Embeddings};
use skipplan::metrics::{evaluate, ErrorProfile, MetricsReport, Restriction};
use skipplan::model::{SkipPlanModel, Variant};
use skipplan::training::{train, TrainLog};
use skipplan::{Error, Result};

use crate::config::RunSpec;
use crate::io::write_atomic;

pub const RUN_SPEC_FILE: &str = "run.json";
pub const RECORD_FILE: &str = "record.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub restriction: Restriction,
    pub metrics: MetricsReport,
    pub profile: ErrorProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub arm: String,
    pub variant: Variant,
    pub seed: u64,
    pub horizon: usize,
    /// Full-plan test metrics.
    pub metrics: MetricsReport,
    pub profile: ErrorProfile,
    pub restricted: Vec<Scored>,
    /// Relative to the run directory.
    pub train_log: Option<PathBuf>,
    pub final_loss: f64,
    pub git_describe: String,
    pub config_hash: String,
}

impl RunRecord {
    /// Metrics under `restriction` (the full plan included).
    pub fn scored(&self, restriction: &Restriction) -> Option<(&MetricsReport, &ErrorProfile)> {
        if *restriction == Restriction::Full {
            return Some((&self.metrics, &self.profile));
        }
        self.restricted
            .iter()
            .find(|s| s.restriction == *restriction)
            .map(|s| (&s.metrics, &s.profile))
    }
}

pub fn git_describe() -> &'static str {
    static DESCRIBE: OnceLock<String> = OnceLock::new();
    DESCRIBE.get_or_init(|| {
        Command::new("git")
            .args(["describe", "--always", "--dirty", "--tags"])
            .output()
            .ok()
            .filter(|o| o.status.success())
            .and_then(|o| String::from_utf8(o.stdout).ok())
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| "unknown".to_string())
    })
}

/// Training log CSV with the run's config hash on every row.
pub fn train_log_csv(log: &TrainLog, hash: &str) -> String {
    let mut s = format!("{},config_hash\n", TrainLog::CSV_HEADER);
    for e in &log.epochs {
        writeln!(
            s,
            "{},{},{},{},{},{:.3},{hash}",
            e.epoch, e.l_n, e.l_t, e.l_total, e.lr, e.seconds
        )
        .unwrap();
    }
    s
}

/// Generates the corpus, trains and scores the test split. With `out`, the
/// run spec, checkpoint, training log and record are written below it.
pub fn execute(spec: &RunSpec, out: Option<&Path>) -> Result<RunRecord> {
    let corpus = Corpus::generate(&spec.corpus)?;
    let split = corpus.split(spec.horizon)?;
    train_and_score(spec, &split, &corpus.embeddings, out)
}

/// Trains `spec` on `split.train` and scores `split.test`.
pub fn train_and_score(
    spec: &RunSpec,
    split: &DatasetSplit,
    embeddings: &Embeddings,
    out: Option<&Path>,
) -> Result<RunRecord> {
    if split.test.is_empty() || split.train.is_empty() {
        return Err(Error::Empty(format!("empty train or test split for T = {}", spec.horizon)));
    }
    if split.horizon() != Some(spec.horizon) || split.feature_dim() != Some(spec.model.feature_dim) {
        return Err(Error::Config(format!(
            "dataset (T = {:?}, feature_dim = {:?}) does not match the run (T = {}, feature_dim = {})",
            split.horizon(),
            split.feature_dim(),
            spec.horizon,
            spec.model.feature_dim
        )));
    }
    let hash = spec.hash();
    let mut model = SkipPlanModel::new(spec.model.clone(), spec.seed)?;
    log::info!(
        "{} {} T={} seed {}: {} train instances",
        spec.experiment,
        spec.arm,
        spec.horizon,
        spec.seed,
        split.train.len()
    );
    let log = train(&mut model, &split.train, &spec.train, &spec.loss, Some(embeddings))?;
    let (metrics, profile) = evaluate(&model, &split.test, &Restriction::Full)?;
    let restricted = spec
        .restrictions
        .iter()
        .filter(|r| **r != Restriction::Full)
        .map(|r| {
            evaluate(&model, &split.test, r).map(|(metrics, profile)| Scored {
                restriction: r.clone(),
                metrics,
                profile,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut record = RunRecord {
        experiment: spec.experiment.clone(),
        arm: spec.arm.clone(),
        variant: spec.model.variant,
        seed: spec.seed,
        horizon: spec.horizon,
        metrics,
        profile,
        restricted,
        train_log: None,
        final_loss: log.epochs.last().map_or(f64::NAN, |e| e.l_total),
        git_describe: git_describe().to_string(),
        config_hash: hash.clone(),
    };
    if let Some(dir) = out {
        write_atomic(&dir.join(RUN_SPEC_FILE), serde_json::to_string_pretty(spec)?.as_bytes())?;
        model.save(&dir.join(CHECKPOINT_DIR))?;
        let log_path = dir.join(TRAIN_LOG_FILE);
        write_atomic(&log_path, train_log_csv(&log, &hash).as_bytes())?;
        record.train_log = Some(PathBuf::from(TRAIN_LOG_FILE));
        write_atomic(&dir.join(RECORD_FILE), serde_json::to_string_pretty(&record)?.as_bytes())?;
    }
    Ok(record)
}

/// Runs `specs` on up to `threads` workers; records come back in input order.
/// With `out`, run `k` writes into `out/<arm>_T<h>_s<seed>`.
pub fn execute_all(specs: &[RunSpec], threads: usize, out: Option<&Path>) -> Result<Vec<RunRecord>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunRecord>>>> = Mutex::new((0..specs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, specs.len().max(1)) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(spec) = specs.get(k) else { break };
                let dir = out.map(|o| o.join(spec.dir_name()));
                let r = execute(spec, dir.as_deref());
                results.lock().expect("result lock")[k] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every run executed"))
        .collect()
}

/// `PLANCTL_THREADS`, defaulting to 1.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("PLANCTL_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("PLANCTL_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(1),
    }
}
