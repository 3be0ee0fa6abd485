//! Per-seed rows and median-over-seeds aggregates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use skipplan::metrics::Restriction;

use crate::config::sha256_hex;
use crate::runner::RunRecord;

/// Median of `values`; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median metrics of one (horizon, arm, restriction) group.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub horizon: usize,
    pub arm: String,
    pub restriction: Restriction,
    pub sr: f64,
    pub macc: f64,
    pub miou: f64,
    /// Element-wise median error profile.
    pub profile: Vec<f64>,
    pub positions: Vec<usize>,
    pub rel_pos: Vec<f64>,
    pub seeds: usize,
    /// Hash over the member runs' config hashes.
    pub hash: String,
}

/// Identifies a group of runs: the hash of their sorted, comma-joined config hashes.
pub fn group_hash<'a>(hashes: impl IntoIterator<Item = &'a str>) -> String {
    let mut v: Vec<&str> = hashes.into_iter().collect();
    v.sort_unstable();
    sha256_hex(v.join(",").as_bytes())
}

fn restrictions_of(r: &RunRecord) -> Vec<Restriction> {
    std::iter::once(Restriction::Full)
        .chain(r.restricted.iter().map(|s| s.restriction.clone()))
        .collect()
}

/// Groups by (horizon, arm, restriction) in first-seen order.
pub fn aggregate(records: &[RunRecord]) -> Vec<Aggregate> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<(usize, String, Restriction), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        for restriction in restrictions_of(r) {
            let key = (r.horizon, r.arm.clone(), restriction);
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
    }
    order
        .into_iter()
        .map(|key| {
            let members = &groups[&key];
            let scored: Vec<_> = members.iter().map(|r| r.scored(&key.2).expect("grouped by restriction")).collect();
            let col = |f: &dyn Fn(usize) -> f64| median(&(0..scored.len()).map(f).collect::<Vec<_>>());
            let width = scored[0].1.rates.len();
            Aggregate {
                horizon: key.0,
                arm: key.1.clone(),
                restriction: key.2.clone(),
                sr: col(&|i| scored[i].0.success_rate),
                macc: col(&|i| scored[i].0.mean_accuracy),
                miou: col(&|i| scored[i].0.mean_iou),
                profile: (0..width).map(|t| col(&|i| scored[i].1.rates[t])).collect(),
                positions: scored[0].1.positions.clone(),
                rel_pos: scored[0].1.rel_pos.clone(),
                seeds: scored.len(),
                hash: group_hash(members.iter().map(|r| r.config_hash.as_str())),
            }
        })
        .collect()
}

pub const RESULTS_HEADER: &str = "experiment,horizon,arm,variant,seed,restriction,sr,macc,miou,n,config_hash";
pub const PROFILES_HEADER: &str = "experiment,horizon,arm,seed,restriction,t,rel_pos,error_rate,config_hash";

/// Per-seed metric rows followed by one `median` row per group; aggregate
/// rows carry the [`group_hash`] of their members.
pub fn results_csv(experiment: &str, records: &[RunRecord]) -> String {
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in records {
        for restriction in restrictions_of(r) {
            let (m, _) = r.scored(&restriction).expect("own restriction");
            writeln!(
                s,
                "{},{},{},{},{},\"{}\",{},{},{},{},{}",
                r.experiment, r.horizon, r.arm, r.variant, r.seed, restriction, m.success_rate, m.mean_accuracy,
                m.mean_iou, m.n, r.config_hash
            )
            .unwrap();
        }
    }
    for a in aggregate(records) {
        let variant = records.iter().find(|r| r.arm == a.arm).map(|r| r.variant.to_string()).unwrap_or_default();
        writeln!(
            s,
            "{experiment},{},{},{variant},median,\"{}\",{},{},{},{},{}",
            a.horizon, a.arm, a.restriction, a.sr, a.macc, a.miou, a.seeds, a.hash
        )
        .unwrap();
    }
    s
}

/// Error-rate profile rows, `(rel_pos, rate)` per position, per seed and median.
pub fn profiles_csv(experiment: &str, records: &[RunRecord]) -> String {
    let mut s = format!("{PROFILES_HEADER}\n");
    for r in records {
        for restriction in restrictions_of(r) {
            let (_, p) = r.scored(&restriction).expect("own restriction");
            for ((t, rel), e) in p.positions.iter().zip(&p.rel_pos).zip(&p.rates) {
                writeln!(
                    s,
                    "{},{},{},{},\"{restriction}\",{t},{rel},{e},{}",
                    r.experiment, r.horizon, r.arm, r.seed, r.config_hash
                )
                .unwrap();
            }
        }
    }
    for a in aggregate(records) {
        for ((t, rel), e) in a.positions.iter().zip(&a.rel_pos).zip(&a.profile) {
            writeln!(
                s,
                "{experiment},{},{},median,\"{}\",{t},{rel},{e},{}",
                a.horizon, a.arm, a.restriction, a.hash
            )
            .unwrap();
        }
    }
    s
}
