//! The `planctl` subcommands as library functions.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use skipplan::corpus::{load_dataset, save_dataset, Corpus, CorpusConfig, DatasetSplit, Embeddings};
use skipplan::metrics::{evaluate, ErrorProfile, MetricsReport, Restriction};
use skipplan::model::{SkipPlanModel, CONFIG_FILE};
use skipplan::{Error, Result};

use crate::aggregate::{aggregate, profiles_csv, results_csv};
use crate::config::{sha256_hex, ExperimentConfig, RunSpec};
use crate::io::write_atomic;
use crate::report;
use crate::runner::{execute_all, train_and_score, RunRecord, CHECKPOINT_DIR, RUN_SPEC_FILE};

/// Instance counts of one generated horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratedSplit {
    pub horizon: usize,
    pub train: usize,
    pub test: usize,
}

/// Directory of the dataset for horizon `t` below a generated data root.
pub fn horizon_dir(root: &Path, t: usize) -> PathBuf {
    root.join(format!("T{t}"))
}

/// Generates the corpus with `seed` and writes one dataset per horizon to `out/T<h>`.
pub fn cmd_generate(corpus: &CorpusConfig, seed: u64, horizons: &[usize], out: &Path) -> Result<Vec<GeneratedSplit>> {
    let config = CorpusConfig {
        seed,
        ..corpus.clone()
    };
    let corpus = Corpus::generate(&config)?;
    horizons
        .iter()
        .map(|&t| {
            let split = corpus.split(t)?;
            save_dataset(&split, &horizon_dir(out, t), Some(&config))?;
            Ok(GeneratedSplit {
                horizon: t,
                train: split.train.len(),
                test: split.test.len(),
            })
        })
        .collect()
}

/// Accepts either a dataset directory or a data root holding `T<h>` datasets.
fn load_split(data: &Path, horizon: usize) -> Result<(DatasetSplit, Option<CorpusConfig>)> {
    let dir = if data.join(skipplan::corpus::io::META_FILE).exists() {
        data.to_path_buf()
    } else {
        horizon_dir(data, horizon)
    };
    if !dir.join(skipplan::corpus::io::META_FILE).exists() {
        return Err(Error::Config(format!("no dataset at {} (run `planctl generate` first)", dir.display())));
    }
    let (split, meta) = load_dataset(&dir)?;
    Ok((split, meta.corpus))
}

/// Trains `spec` on a generated dataset and writes checkpoint, log and record to `out`.
pub fn cmd_train(spec: &RunSpec, data: &Path, out: &Path) -> Result<RunRecord> {
    let (split, corpus) = load_split(data, spec.horizon)?;
    let mut spec = spec.clone();
    if let Some(c) = corpus {
        spec.model.n_actions = c.grammar.n_actions;
        spec.model.feature_dim = c.feature_dim();
        if spec.model.state_dim > 0 {
            spec.model.state_dim = c.signal_dim;
        }
        spec.corpus = c;
    }
    spec.model.validate()?;
    let embeddings = Embeddings::generate(
        spec.corpus.grammar.n_actions,
        spec.corpus.grammar.n_tasks,
        spec.corpus.signal_dim,
        spec.corpus.seed,
    );
    train_and_score(&spec, &split, &embeddings, Some(out))
}

/// Evaluation output of [`cmd_eval`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub metrics: MetricsReport,
    pub profile: ErrorProfile,
    pub config_hash: String,
    pub metrics_csv: String,
    pub profile_csv: String,
}

/// Accepts a run directory (with `checkpoint/`) or a bare checkpoint directory.
fn checkpoint_dirs(path: &Path) -> (PathBuf, Option<PathBuf>) {
    if path.join(CHECKPOINT_DIR).join(CONFIG_FILE).exists() {
        (path.join(CHECKPOINT_DIR), Some(path.join(RUN_SPEC_FILE)))
    } else {
        let parent_spec = path.parent().map(|p| p.join(RUN_SPEC_FILE));
        (path.to_path_buf(), parent_spec)
    }
}

/// Scores a checkpoint on one split of a dataset; writes `metrics.csv` and
/// `profile.csv` into `out`.
pub fn cmd_eval(checkpoint: &Path, data: &Path, split_name: &str, restriction: &Restriction, out: &Path) -> Result<EvalOutput> {
    let (ckpt, spec_path) = checkpoint_dirs(checkpoint);
    let model = SkipPlanModel::load(&ckpt)?;
    let config_hash = match spec_path.filter(|p| p.exists()) {
        Some(p) => {
            let spec: RunSpec = serde_json::from_slice(&fs::read(p)?)?;
            spec.hash()
        }
        None => sha256_hex(&fs::read(ckpt.join(CONFIG_FILE))?),
    };
    let c = model.config();
    let (split, _) = load_split(data, c.horizon)?;
    if split.horizon() != Some(c.horizon) || split.feature_dim() != Some(c.feature_dim) {
        return Err(Error::Config(format!(
            "checkpoint expects T = {}, feature_dim = {}; dataset has T = {:?}, feature_dim = {:?}",
            c.horizon,
            c.feature_dim,
            split.horizon(),
            split.feature_dim()
        )));
    }
    let instances = match split_name {
        "test" => &split.test,
        "train" => &split.train,
        other => return Err(Error::Config(format!("unknown split `{other}` (expected train or test)"))),
    };
    let (metrics, profile) = evaluate(&model, instances, restriction)?;
    let metrics_csv = format!(
        "{},config_hash\n{},{config_hash}\n",
        MetricsReport::CSV_HEADER,
        metrics.csv_row(c.variant.name(), restriction)
    );
    let mut profile_csv = format!("{},config_hash\n", ErrorProfile::CSV_HEADER);
    for ((t, r), e) in profile.positions.iter().zip(&profile.rel_pos).zip(&profile.rates) {
        writeln!(profile_csv, "{t},{r},{e},{config_hash}").unwrap();
    }
    write_atomic(&out.join("metrics.csv"), metrics_csv.as_bytes())?;
    write_atomic(&out.join("profile.csv"), profile_csv.as_bytes())?;
    Ok(EvalOutput {
        metrics,
        profile,
        config_hash,
        metrics_csv,
        profile_csv,
    })
}

/// Runs every (horizon, arm, seed) of `config` and writes `config.json`,
/// `results.csv`, `profiles.csv` and per-run directories under `runs/`.
pub fn cmd_ablate(config: &ExperimentConfig, threads: usize, out: &Path) -> Result<Vec<RunRecord>> {
    config.validate()?;
    fs::create_dir_all(out)?;
    config.save(&out.join("config.json"))?;
    let records = execute_all(&config.runs(), threads, Some(&out.join("runs")))?;
    write_atomic(&out.join("results.csv"), results_csv(&config.experiment, &records).as_bytes())?;
    write_atomic(&out.join("profiles.csv"), profiles_csv(&config.experiment, &records).as_bytes())?;
    for a in aggregate(&records) {
        log::info!(
            "{} T={} {} [{}]: SR {:.4} mAcc {:.4} mIoU {:.4} over {} seeds",
            config.experiment,
            a.horizon,
            a.arm,
            a.restriction,
            a.sr,
            a.macc,
            a.miou,
            a.seeds
        );
    }
    Ok(records)
}

/// Collects every run record below `dir` and writes `report.md` and
/// `profiles_plot.csv` into it.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let records = report::collect_records(dir)?;
    if records.is_empty() {
        return Err(Error::Empty(format!("no run records below {}", dir.display())));
    }
    let markdown = report::markdown(&records);
    write_atomic(&dir.join("report.md"), markdown.as_bytes())?;
    write_atomic(&dir.join("profiles_plot.csv"), report::plot_csv(&records).as_bytes())?;
    Ok(markdown)
}
