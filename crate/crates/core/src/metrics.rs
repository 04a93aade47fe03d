//! Confusion metrics, intrusion detection capability (plain and cost-aware)
//! and the threshold sweep over per-contract rankings.
//!
//! Logarithms are natural; `0 log 0 = 0`. Metrics that are undefined for the
//! given counts are `None`, never a silent zero.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ids::{AlarmConfig, Cutoff, RankedReport};
use crate::trace_ingest::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn from_pairs(labels: &[bool], alerts: &[bool]) -> Result<Self> {
        if labels.len() != alerts.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels but {} alert flags",
                labels.len(),
                alerts.len()
            )));
        }
        let mut c = ConfusionCounts::default();
        for (&x, &y) in labels.iter().zip(alerts) {
            match (x, y) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn false_positive_rate(&self) -> Option<f64> {
        ratio(self.fp, self.fp + self.tn)
    }
}

fn ratio(a: u64, b: u64) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

/// `(1 + b^2) P R / (b^2 P + R)`; zero when both P and R are zero.
pub fn f_beta_from(precision: f64, recall: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    Ok(if denom == 0.0 { 0.0 } else { (1.0 + b2) * precision * recall / denom })
}

pub fn f_beta(counts: &ConfusionCounts, beta: f64) -> Result<Option<f64>> {
    match (counts.precision(), counts.recall()) {
        (Some(p), Some(r)) => f_beta_from(p, r, beta).map(Some),
        _ if !(beta > 0.0) => Err(Error::InvalidArgument(format!("beta must be positive, got {beta}"))),
        _ => Ok(None),
    }
}

pub fn precision_recall_f1(counts: &ConfusionCounts) -> (Option<f64>, Option<f64>, Option<f64>) {
    let f1 = f_beta(counts, 1.0).expect("beta 1 is valid");
    (counts.precision(), counts.recall(), f1)
}

fn plogp(p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument("probabilities must be finite and non-negative".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("probabilities sum to {s}, not 1")));
    }
    Ok(())
}

pub fn entropy(dist: &[f64]) -> Result<f64> {
    check_distribution(dist)?;
    Ok(-dist.iter().map(|&p| plogp(p)).sum::<f64>())
}

/// Joint law of attack indicator X and alert indicator Y, indexed `[x][y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JointDistribution {
    pub p: [[f64; 2]; 2],
}

impl JointDistribution {
    pub fn new(p: [[f64; 2]; 2]) -> Result<Self> {
        check_distribution(&[p[0][0], p[0][1], p[1][0], p[1][1]])?;
        Ok(JointDistribution { p })
    }

    pub fn px(&self) -> [f64; 2] {
        [self.p[0][0] + self.p[0][1], self.p[1][0] + self.p[1][1]]
    }

    pub fn py(&self) -> [f64; 2] {
        [self.p[0][0] + self.p[1][0], self.p[0][1] + self.p[1][1]]
    }

    /// The term `p(x,y) log(p(x,y) / (p(x) p(y)))`.
    fn mi_term(&self, x: usize, y: usize) -> f64 {
        let pxy = self.p[x][y];
        if pxy == 0.0 {
            0.0
        } else {
            pxy * (pxy / (self.px()[x] * self.py()[y])).ln()
        }
    }
}

/// `H(X) - H(X|Y)`. A detector whose alerts determine X has `H(X|Y) = 0`
/// exactly, so its CID is exactly one.
pub fn mutual_information(j: &JointDistribution) -> f64 {
    let hx = -j.px().iter().map(|&p| plogp(p)).sum::<f64>();
    let py = j.py();
    let mut hxy = 0.0;
    for y in 0..2 {
        if py[y] > 0.0 {
            hxy -= py[y] * (0..2).map(|x| plogp(j.p[x][y] / py[y])).sum::<f64>();
        }
    }
    // rounding can leave a tiny negative value for independent variables
    (hx - hxy).max(0.0)
}

/// `I(X;Y) / H(X)`; `None` when X is deterministic.
pub fn cid(j: &JointDistribution) -> Option<f64> {
    let hx = -j.px().iter().map(|&p| plogp(p)).sum::<f64>();
    (hx > 0.0).then(|| mutual_information(j) / hx)
}

/// Outcome costs `gamma[x][y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostMatrix {
    pub gamma: [[f64; 2]; 2],
}

impl CostMatrix {
    pub fn new(tp: f64, fp: f64, fn_: f64, tn: f64) -> Result<Self> {
        let c = CostMatrix {
            gamma: [[tn, fp], [fn_, tp]],
        };
        let all = [tp, fp, fn_, tn];
        if all.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || all.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidArgument("costs must be non-negative and not all zero".into()));
        }
        Ok(c)
    }

    pub fn total(&self) -> f64 {
        self.gamma.iter().flatten().sum()
    }
}

impl Default for CostMatrix {
    /// One hour of auditor time per inspected transaction, ten million USD
    /// per missed attack.
    fn default() -> Self {
        CostMatrix::new(204.0, 204.0, 10_000_000.0, 0.0).expect("valid defaults")
    }
}

/// `(1/gamma) sum gamma_xy p(x,y) log(p(x,y) / p(x)p(y))`.
pub fn cost_aware_mutual_information(j: &JointDistribution, costs: &CostMatrix) -> f64 {
    let mut s = 0.0;
    for x in 0..2 {
        for y in 0..2 {
            s += costs.gamma[x][y] * j.mi_term(x, y);
        }
    }
    s / costs.total()
}

pub fn cost_aware_cid(j: &JointDistribution, costs: &CostMatrix) -> Option<f64> {
    let hx = -j.px().iter().map(|&p| plogp(p)).sum::<f64>();
    (hx > 0.0).then(|| cost_aware_mutual_information(j, costs) / hx)
}

/// Frequency estimate of the joint law from paired (attack, alert) flags.
pub fn estimate_joint(labels: &[bool], alerts: &[bool]) -> Result<JointDistribution> {
    let c = ConfusionCounts::from_pairs(labels, alerts)?;
    let n = c.total();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot estimate a joint law from no observations".into()));
    }
    let n = n as f64;
    Ok(JointDistribution {
        p: [
            [c.tn as f64 / n, c.fp as f64 / n],
            [c.fn_ as f64 / n, c.tp as f64 / n],
        ],
    })
}

/// Size buckets by number of transactions in the contract history.
pub const BUCKETS: [(usize, Option<usize>); 4] = [(0, Some(99)), (100, Some(999)), (1000, Some(9999)), (10000, None)];

fn bucket_of(n: usize) -> usize {
    BUCKETS
        .iter()
        .position(|&(lo, hi)| n >= lo && hi.is_none_or(|h| n <= h))
        .expect("buckets cover all sizes")
}

fn bucket_label(i: usize) -> String {
    match BUCKETS[i] {
        (lo, Some(hi)) => format!("{lo}-{hi}"),
        (lo, None) => format!("{lo}+"),
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub thresholds: Vec<AlarmConfig>,
    pub cutoff: Cutoff,
    /// only attacks with an adversarial transaction carrying this tag
    pub tag: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Cell {
    pub detected: usize,
    /// mean over detected attacks
    pub avg_fpr: Option<f64>,
    pub avg_fp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketRow {
    pub bucket: String,
    pub attacks: usize,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdOutcome {
    pub threshold: String,
    pub alerts: usize,
    pub detected: bool,
    pub false_positives: usize,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractDetail {
    pub contract: String,
    pub transactions: usize,
    pub bucket: String,
    pub outcomes: Vec<ThresholdOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalTable {
    pub thresholds: Vec<String>,
    /// size buckets, then the overall row
    pub rows: Vec<BucketRow>,
    pub details: Vec<ContractDetail>,
    /// contracts without any adversarial transaction (or without the tag)
    pub skipped: usize,
}

/// Sweeps alarm thresholds over labelled per-contract rankings. An attack is
/// one contract history; it counts as detected when at least one of its
/// adversarial transactions is alerted.
pub fn evaluate_thresholds(reports: &[RankedReport], cfg: &EvalConfig) -> Result<EvalTable> {
    for t in &cfg.thresholds {
        t.validate()?;
    }
    let nt = cfg.thresholds.len();
    // per bucket (plus overall at index 4): attacks, per-threshold (detected, fpr sum, fp sum)
    let mut attacks = [0usize; 5];
    let mut acc = vec![vec![(0usize, 0.0f64, 0.0f64); nt]; 5];
    let mut details = Vec::new();
    let mut skipped = 0;

    for r in reports {
        if let Some(e) = r.entries.iter().find(|e| e.label.is_none()) {
            return Err(Error::InvalidArgument(format!(
                "transaction {} of contract {} has no label",
                e.tx_hash, r.contract
            )));
        }
        let is_attack = r.entries.iter().any(|e| {
            e.is_adversarial() && cfg.tag.as_ref().is_none_or(|t| e.tags.iter().any(|x| x == t))
        });
        if !is_attack {
            skipped += 1;
            continue;
        }
        let n = r.len();
        let benign = r.entries.iter().filter(|e| e.label == Some(Label::Benign)).count();
        let b = bucket_of(n);
        attacks[b] += 1;
        attacks[4] += 1;
        let mut outcomes = Vec::with_capacity(nt);
        for (ti, t) in cfg.thresholds.iter().enumerate() {
            let k = t.alert_count(n, cfg.cutoff)?;
            let alerted = &r.entries[..k];
            let detected = alerted.iter().any(|e| e.is_adversarial());
            let fp = alerted.iter().filter(|e| e.label == Some(Label::Benign)).count();
            let fpr = if benign == 0 { 0.0 } else { fp as f64 / benign as f64 };
            if detected {
                for row in [b, 4] {
                    acc[row][ti].0 += 1;
                    acc[row][ti].1 += fpr;
                    acc[row][ti].2 += fp as f64;
                }
            }
            outcomes.push(ThresholdOutcome {
                threshold: t.label(),
                alerts: k,
                detected,
                false_positives: fp,
                fpr,
            });
        }
        details.push(ContractDetail {
            contract: r.contract.clone(),
            transactions: n,
            bucket: bucket_label(b),
            outcomes,
        });
    }

    let rows = (0..5)
        .map(|row| BucketRow {
            bucket: if row == 4 { "overall".into() } else { bucket_label(row) },
            attacks: attacks[row],
            cells: acc[row]
                .iter()
                .map(|&(d, fpr, fp)| Cell {
                    detected: d,
                    avg_fpr: (d > 0).then(|| fpr / d as f64),
                    avg_fp: (d > 0).then(|| fp / d as f64),
                })
                .collect(),
        })
        .collect();
    Ok(EvalTable {
        thresholds: cfg.thresholds.iter().map(AlarmConfig::label).collect(),
        rows,
        details,
        skipped,
    })
}

impl EvalTable {
    /// Three lines per bucket (detected, average FPR in percent, average FP
    /// count), one column per threshold; `-` where nothing was detected.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        let mut header = vec!["bucket".to_string(), "attacks".into(), "metric".into()];
        header.extend(self.thresholds.iter().cloned());
        w.write_record(&header).map_err(fmt)?;
        for row in &self.rows {
            let lead = |m: &str| vec![row.bucket.clone(), row.attacks.to_string(), m.to_string()];
            let mut detected = lead("detected");
            let mut fpr = lead("avg_fpr_pct");
            let mut fp = lead("avg_fp");
            for c in &row.cells {
                if c.detected == 0 {
                    detected.push("-".into());
                } else {
                    let pct = 100.0 * c.detected as f64 / row.attacks as f64;
                    detected.push(format!("{} ({:.0}%)", c.detected, pct));
                }
                fpr.push(c.avg_fpr.map_or("-".into(), |v| format!("{:.3}", 100.0 * v)));
                fp.push(c.avg_fp.map_or("-".into(), |v| format!("{v:.1}")));
            }
            for rec in [detected, fpr, fp] {
                w.write_record(&rec).map_err(fmt)?;
            }
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }
}
