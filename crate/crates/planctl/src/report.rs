//! Markdown summaries and plot-ready profile tables built from run records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use skipplan::{Error, Result};
use walkdir::WalkDir;

use crate::aggregate::aggregate;
use crate::runner::{RunRecord, RECORD_FILE};

/// Every `record.json` below `dir`, ordered by experiment, horizon, arm and seed.
pub fn collect_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io(e.into()))?;
        if entry.file_type().is_file() && entry.file_name() == RECORD_FILE {
            records.push(serde_json::from_slice::<RunRecord>(&fs::read(entry.path())?)?);
        }
    }
    records.sort_by(|a, b| {
        (&a.experiment, a.horizon, &a.arm, a.seed, &a.config_hash).cmp(&(
            &b.experiment,
            b.horizon,
            &b.arm,
            b.seed,
            &b.config_hash,
        ))
    });
    Ok(records)
}

fn by_experiment(records: &[RunRecord]) -> BTreeMap<&str, Vec<RunRecord>> {
    let mut groups: BTreeMap<&str, Vec<RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.experiment.as_str()).or_default().push(r.clone());
    }
    groups
}

/// One table per experiment: median rows, then a per-seed table.
pub fn markdown(records: &[RunRecord]) -> String {
    let mut s = String::from("# Experiment report\n");
    for (experiment, runs) in by_experiment(records) {
        writeln!(s, "\n## {experiment}\n").unwrap();
        s.push_str("| T | arm | positions | SR | mAcc | mIoU | seeds | config hash |\n");
        s.push_str("|---|---|---|---|---|---|---|---|\n");
        for a in aggregate(&runs) {
            writeln!(
                s,
                "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {} | `{}` |",
                a.horizon,
                a.arm,
                a.restriction,
                a.sr,
                a.macc,
                a.miou,
                a.seeds,
                &a.hash[..12]
            )
            .unwrap();
        }
        s.push_str("\nPer seed (full plan):\n\n| T | arm | seed | SR | mAcc | mIoU | error profile | config hash |\n");
        s.push_str("|---|---|---|---|---|---|---|---|\n");
        for r in &runs {
            let profile: Vec<String> = r.profile.rates.iter().map(|e| format!("{e:.3}")).collect();
            writeln!(
                s,
                "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {} | `{}` |",
                r.horizon,
                r.arm,
                r.seed,
                r.metrics.success_rate,
                r.metrics.mean_accuracy,
                r.metrics.mean_iou,
                profile.join(" "),
                &r.config_hash[..12]
            )
            .unwrap();
        }
    }
    s
}

pub const PLOT_HEADER: &str = "experiment,horizon,arm,t,rel_pos,error_rate,config_hash";

/// Median full-plan error profiles, one row per timestep per horizon and arm.
pub fn plot_csv(records: &[RunRecord]) -> String {
    let mut s = format!("{PLOT_HEADER}\n");
    for (experiment, runs) in by_experiment(records) {
        for a in aggregate(&runs) {
            if a.restriction != skipplan::metrics::Restriction::Full {
                continue;
            }
            for ((t, rel), e) in a.positions.iter().zip(&a.rel_pos).zip(&a.profile) {
                writeln!(s, "{experiment},{},{},{t},{rel},{e},{}", a.horizon, a.arm, a.hash).unwrap();
            }
        }
    }
    s
}
