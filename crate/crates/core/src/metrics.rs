//! Success rate, mean accuracy, mean IoU and per-timestep error profiles.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::PlanInstance;
use crate::error::{Error, Result};
use crate::model::SkipPlanModel;

/// Which positions of a plan are scored. Serialised as `"full"` or `"1,3,5"`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Restriction {
    #[default]
    Full,
    /// 1-based, strictly increasing positions.
    Positions(Vec<usize>),
}

impl Restriction {
    pub fn positions(&self, horizon: usize) -> Result<Vec<usize>> {
        match self {
            Restriction::Full => Ok((1..=horizon).collect()),
            Restriction::Positions(p) => {
                if p.is_empty() || p.iter().any(|&t| t == 0 || t > horizon) || p.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::config(format!("restriction {p:?} invalid for T = {horizon}")));
                }
                Ok(p.clone())
            }
        }
    }
}

impl fmt::Display for Restriction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Restriction::Full => f.write_str("full"),
            Restriction::Positions(p) => {
                let parts: Vec<String> = p.iter().map(|t| t.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for Restriction {
    type Err = Error;

    /// `full` or a comma-separated list of 1-based positions.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "full" {
            return Ok(Restriction::Full);
        }
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("bad restriction `{s}`")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Restriction::Positions)
    }
}

impl TryFrom<String> for Restriction {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Restriction> for String {
    fn from(r: Restriction) -> String {
        r.to_string()
    }
}

/// How duplicates inside a sequence count towards the IoU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouMode {
    /// Duplicates collapse to set membership.
    #[default]
    Set,
    Multiset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub success_rate: f64,
    pub mean_accuracy: f64,
    pub mean_iou: f64,
    pub n: usize,
    pub horizon: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "horizon,variant,restriction,sr,macc,miou,n";

    pub fn csv_row(&self, variant: &str, restriction: &Restriction) -> String {
        format!(
            "{},{},\"{}\",{},{},{},{}",
            self.horizon, variant, restriction, self.success_rate, self.mean_accuracy, self.mean_iou, self.n
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorProfile {
    /// 1-based positions the rates refer to.
    pub positions: Vec<usize>,
    pub rates: Vec<f64>,
    /// `(t - 1) / (T - 1)` for each position.
    pub rel_pos: Vec<f64>,
    pub n: usize,
}

impl ErrorProfile {
    pub const CSV_HEADER: &'static str = "t,rel_pos,error_rate";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for ((t, r), e) in self.positions.iter().zip(&self.rel_pos).zip(&self.rates) {
            s.push_str(&format!("{t},{r},{e}\n"));
        }
        s
    }

    pub fn mean(&self) -> f64 {
        self.rates.iter().sum::<f64>() / self.rates.len() as f64
    }
}

fn check_pairs(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch(format!("{} predictions vs {} targets", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Err(Error::Empty("no samples".into()));
    }
    if let Some(i) = preds.iter().zip(gts).position(|(p, g)| p.len() != g.len()) {
        return Err(Error::LengthMismatch(format!("sample {i}: sequence lengths differ")));
    }
    Ok(())
}

/// Fraction of samples predicted correctly at every position.
pub fn success_rate(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<f64> {
    check_pairs(preds, gts)?;
    let hits = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean over samples of the fraction of matching positions.
pub fn mean_accuracy(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<f64> {
    check_pairs(preds, gts)?;
    let total: f64 = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            let hits = p.iter().zip(g).filter(|(a, b)| a == b).count();
            hits as f64 / p.len().max(1) as f64
        })
        .sum();
    Ok(total / preds.len() as f64)
}

fn iou_one(p: &[usize], g: &[usize], mode: IouMode) -> f64 {
    match mode {
        IouMode::Set => {
            let a: BTreeSet<usize> = p.iter().copied().collect();
            let b: BTreeSet<usize> = g.iter().copied().collect();
            let union = a.union(&b).count();
            if union == 0 {
                return 1.0;
            }
            a.intersection(&b).count() as f64 / union as f64
        }
        IouMode::Multiset => {
            let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
            for &x in p {
                counts.entry(x).or_default().0 += 1;
            }
            for &x in g {
                counts.entry(x).or_default().1 += 1;
            }
            let inter: usize = counts.values().map(|&(a, b)| a.min(b)).sum();
            let union: usize = counts.values().map(|&(a, b)| a.max(b)).sum();
            if union == 0 {
                return 1.0;
            }
            inter as f64 / union as f64
        }
    }
}

pub fn mean_iou_with(preds: &[Vec<usize>], gts: &[Vec<usize>], mode: IouMode) -> Result<f64> {
    check_pairs(preds, gts)?;
    let total: f64 = preds.iter().zip(gts).map(|(p, g)| iou_one(p, g, mode)).sum();
    Ok(total / preds.len() as f64)
}

/// Order-agnostic overlap of predicted and true action sets.
pub fn mean_iou(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<f64> {
    mean_iou_with(preds, gts, IouMode::Set)
}

/// `rate[t]` = fraction of samples wrong at position `t`.
pub fn error_rate_distribution(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<ErrorProfile> {
    check_pairs(preds, gts)?;
    let t = gts[0].len();
    if gts.iter().any(|g| g.len() != t) {
        return Err(Error::LengthMismatch("mixed horizons".into()));
    }
    let positions: Vec<usize> = (1..=t).collect();
    Ok(profile(preds, gts, &positions, t))
}

fn rel_pos(t: usize, horizon: usize) -> f64 {
    if horizon <= 1 {
        0.0
    } else {
        (t - 1) as f64 / (horizon - 1) as f64
    }
}

/// Profile of already-restricted sequences whose entries sit at `positions`
/// of a horizon-`horizon` plan.
fn profile(preds: &[Vec<usize>], gts: &[Vec<usize>], positions: &[usize], horizon: usize) -> ErrorProfile {
    let n = preds.len();
    let rates = (0..positions.len())
        .map(|k| preds.iter().zip(gts).filter(|(p, g)| p[k] != g[k]).count() as f64 / n as f64)
        .collect();
    ErrorProfile {
        positions: positions.to_vec(),
        rates,
        rel_pos: positions.iter().map(|&t| rel_pos(t, horizon)).collect(),
        n,
    }
}

/// Keeps the entries at 1-based `positions`.
pub fn restrict(seq: &[usize], positions: &[usize]) -> Vec<usize> {
    positions.iter().map(|&t| seq[t - 1]).collect()
}

/// Metrics over the restricted positions; every ratio is normalised by the
/// restricted length.
pub fn score(
    preds: &[Vec<usize>],
    gts: &[Vec<usize>],
    restriction: &Restriction,
    mode: IouMode,
) -> Result<(MetricsReport, ErrorProfile)> {
    check_pairs(preds, gts)?;
    let horizon = gts[0].len();
    if gts.iter().any(|g| g.len() != horizon) {
        return Err(Error::LengthMismatch("mixed horizons".into()));
    }
    let positions = restriction.positions(horizon)?;
    let p: Vec<Vec<usize>> = preds.iter().map(|s| restrict(s, &positions)).collect();
    let g: Vec<Vec<usize>> = gts.iter().map(|s| restrict(s, &positions)).collect();
    let report = MetricsReport {
        success_rate: success_rate(&p, &g)?,
        mean_accuracy: mean_accuracy(&p, &g)?,
        mean_iou: mean_iou_with(&p, &g, mode)?,
        n: preds.len(),
        horizon,
    };
    Ok((report, profile(&p, &g, &positions, horizon)))
}

/// Predicts every instance and scores the predictions.
pub fn evaluate(
    model: &SkipPlanModel,
    instances: &[PlanInstance],
    restriction: &Restriction,
) -> Result<(MetricsReport, ErrorProfile)> {
    if instances.is_empty() {
        return Err(Error::Empty("empty evaluation split".into()));
    }
    let preds = model.predict_instances(instances, 256)?;
    let gts: Vec<Vec<usize>> = instances.iter().map(|i| i.actions.clone()).collect();
    score(&preds, &gts, restriction, IouMode::Set)
}
