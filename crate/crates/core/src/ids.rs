//! Per-contract ranking of transactions by trace log-likelihood, with
//! percentage and absolute alarm thresholds.

use std::cmp::Ordering;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{trace_log_likelihood, ModelParams};
use crate::tokenizer::{encode_trace, AbiRegistry, TokenizeOptions, Vocabulary};
use crate::trace_ingest::{Label, RawTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTx {
    pub tx_hash: String,
    pub contract: String,
    pub log_likelihood: f64,
    pub token_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

impl ScoredTx {
    pub fn is_adversarial(&self) -> bool {
        self.label == Some(Label::Adversarial)
    }
}

pub const TIE_BREAK: &str = "token_count descending, then tx_hash ascending";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedReport {
    pub contract: String,
    /// most abnormal first
    pub entries: Vec<ScoredTx>,
    pub tie_break: &'static str,
}

impl RankedReport {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// How the alert count is derived from a percentage threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cutoff {
    /// `ceil(alpha * n / 100)`: any positive alpha inspects at least one transaction
    #[default]
    Ceil,
    /// `floor(alpha * n / 100)`: small histories may raise no alarm at all
    Floor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlarmConfig {
    /// alpha in percent, `0 < alpha <= 100`
    Percentage(f64),
    /// top-k, `k >= 1`
    Absolute(usize),
}

impl AlarmConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AlarmConfig::Percentage(a) if !(a > 0.0 && a <= 100.0) => {
                Err(Error::InvalidArgument(format!("alpha {a} outside (0, 100]")))
            }
            AlarmConfig::Absolute(0) => Err(Error::InvalidArgument("top-k needs k >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Number of leading entries alerted in a history of `n`.
    pub fn alert_count(&self, n: usize, cutoff: Cutoff) -> Result<usize> {
        self.validate()?;
        Ok(match *self {
            AlarmConfig::Percentage(a) => {
                let exact = a * n as f64 / 100.0;
                // tolerate representation error such as 0.1 * 1000 / 100
                let k = match cutoff {
                    Cutoff::Ceil => (exact - 1e-9).ceil(),
                    Cutoff::Floor => (exact + 1e-9).floor(),
                };
                (k.max(0.0) as usize).min(n)
            }
            AlarmConfig::Absolute(k) => k.min(n),
        })
    }

    pub fn label(&self) -> String {
        match *self {
            AlarmConfig::Percentage(a) => format!("<={a}%"),
            AlarmConfig::Absolute(k) => format!("top-{k}"),
        }
    }
}

fn compare(a: &ScoredTx, b: &ScoredTx) -> Ordering {
    a.log_likelihood
        .total_cmp(&b.log_likelihood)
        .then(b.token_count.cmp(&a.token_count))
        .then(a.tx_hash.cmp(&b.tx_hash))
}

/// Sorts ascending by log-likelihood with the [`TIE_BREAK`] rule.
pub fn rank(contract: &str, mut scores: Vec<ScoredTx>) -> RankedReport {
    scores.sort_by(compare);
    RankedReport {
        contract: contract.to_string(),
        entries: scores,
        tie_break: TIE_BREAK,
    }
}

pub fn percentage_alarms(report: &RankedReport, alpha: f64, cutoff: Cutoff) -> Result<&[ScoredTx]> {
    let k = AlarmConfig::Percentage(alpha).alert_count(report.len(), cutoff)?;
    Ok(&report.entries[..k])
}

pub fn absolute_alarms(report: &RankedReport, k: usize) -> Result<&[ScoredTx]> {
    let k = AlarmConfig::Absolute(k).alert_count(report.len(), Cutoff::Ceil)?;
    Ok(&report.entries[..k])
}

#[derive(Debug, Clone, Default)]
pub struct ScoreOptions {
    pub tokenize: TokenizeOptions,
    /// divide the log-likelihood by the scored token count
    pub per_token: bool,
}

/// Scores every trace against an immutable model, in parallel. Output order
/// follows input order.
pub fn score_contract_history(
    params: &ModelParams,
    vocab: &Vocabulary,
    abi: Option<&AbiRegistry>,
    contract: &str,
    traces: &[RawTrace],
    opts: &ScoreOptions,
) -> Result<Vec<ScoredTx>> {
    let max_len = opts.tokenize.max_len.min(params.config.max_seq);
    let topts = TokenizeOptions {
        max_len,
        ..opts.tokenize.clone()
    };
    traces
        .par_iter()
        .map(|t| {
            let enc = encode_trace(t, vocab, abi, &topts)?;
            let ll = trace_log_likelihood(params, &enc)?;
            Ok(ScoredTx {
                tx_hash: t.tx_hash.clone(),
                contract: contract.to_string(),
                log_likelihood: if opts.per_token { ll / enc.len() as f64 } else { ll },
                token_count: enc.len(),
                label: t.label,
                tags: t.tags.clone(),
            })
        })
        .collect()
}

/// `contract,rank,tx_hash,log_likelihood,token_count,alert`, one block of
/// rows per report; `alerts[i]` leading entries of report `i` are flagged.
pub fn write_report_csv(w: impl Write, reports: &[RankedReport], alerts: &[usize]) -> Result<()> {
    if reports.len() != alerts.len() {
        return Err(Error::InvalidArgument("one alert count per report".into()));
    }
    let mut w = csv::Writer::from_writer(w);
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["contract", "rank", "tx_hash", "log_likelihood", "token_count", "alert"])
        .map_err(fmt)?;
    for (report, &k) in reports.iter().zip(alerts) {
        for (i, e) in report.entries.iter().enumerate() {
            w.write_record([
                report.contract.clone(),
                (i + 1).to_string(),
                e.tx_hash.clone(),
                e.log_likelihood.to_string(),
                e.token_count.to_string(),
                (i < k).to_string(),
            ])
            .map_err(fmt)?;
        }
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct ScoreRow {
    contract: String,
    tx_hash: String,
    log_likelihood: f64,
    token_count: usize,
    label: String,
    /// `;`-separated
    tags: String,
}

/// `contract,tx_hash,log_likelihood,token_count,label,tags`
pub fn write_scores_csv(w: impl Write, scores: &[ScoredTx]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for s in scores {
        w.serialize(ScoreRow {
            contract: s.contract.clone(),
            tx_hash: s.tx_hash.clone(),
            log_likelihood: s.log_likelihood,
            token_count: s.token_count,
            label: s.label.map(|l| l.as_str().to_string()).unwrap_or_default(),
            tags: s.tags.join(";"),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_scores_csv(r: impl Read) -> Result<Vec<ScoredTx>> {
    let mut out = Vec::new();
    for (i, row) in csv::Reader::from_reader(r).deserialize::<ScoreRow>().enumerate() {
        let row = row.map_err(|e| Error::Format(format!("scores row {}: {e}", i + 1)))?;
        let label = match row.label.as_str() {
            "" => None,
            s => Some(Label::parse(s).ok_or_else(|| {
                Error::Format(format!("scores row {}: unknown label {s:?}", i + 1))
            })?),
        };
        if !row.log_likelihood.is_finite() {
            return Err(Error::Format(format!("scores row {}: non-finite score", i + 1)));
        }
        out.push(ScoredTx {
            tx_hash: row.tx_hash,
            contract: row.contract,
            log_likelihood: row.log_likelihood,
            token_count: row.token_count,
            label,
            tags: row.tags.split(';').filter(|t| !t.is_empty()).map(String::from).collect(),
        });
    }
    Ok(out)
}

/// Splits scores by contract and ranks each group; contracts in first-seen order.
pub fn rank_by_contract(scores: Vec<ScoredTx>) -> Vec<RankedReport> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, Vec<ScoredTx>> = Default::default();
    for s in scores {
        if !groups.contains_key(&s.contract) {
            order.push(s.contract.clone());
        }
        groups.entry(s.contract.clone()).or_default().push(s);
    }
    order
        .into_iter()
        .map(|c| {
            let g = groups.remove(&c).unwrap_or_default();
            rank(&c, g)
        })
        .collect()
}

/// POSTs the alerted rows of a report as JSON.
pub fn post_alerts(url: &str, report: &RankedReport, alerts: usize) -> Result<()> {
    let body = serde_json::json!({
        "contract": report.contract,
        "alerts": &report.entries[..alerts.min(report.len())],
    });
    ureq::post(url)
        .send_json(&body)
        .map_err(|e| Error::Connection(format!("webhook {url}: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tx(hash: &str, ll: f64, len: usize) -> ScoredTx {
        ScoredTx {
            tx_hash: hash.into(),
            contract: "0xc".into(),
            log_likelihood: ll,
            token_count: len,
            label: None,
            tags: vec![],
        }
    }

    fn lls(r: &RankedReport) -> Vec<f64> {
        r.entries.iter().map(|e| e.log_likelihood).collect()
    }

    #[test]
    fn rank_examples() {
        let r = rank("0xc", vec![tx("a", -5.0, 1), tx("b", -1.0, 1), tx("c", -3.0, 1)]);
        assert_eq!(lls(&r), vec![-5.0, -3.0, -1.0]);
        let r = rank("0xc", vec![tx("c", 0.0, 1), tx("a", 0.0, 1), tx("b", 0.0, 1)]);
        let hashes: Vec<_> = r.entries.iter().map(|e| e.tx_hash.as_str()).collect();
        assert_eq!(hashes, vec!["a", "b", "c"]);
        let r = rank("0xc", vec![tx("a", 0.0, 1), tx("b", 0.0, 9)]);
        assert_eq!(r.entries[0].tx_hash, "b");
        assert!(rank("0xc", vec![]).is_empty());
    }

    #[test]
    fn percentage_examples() {
        let r = rank("0xc", (0..1000).map(|i| tx(&format!("{i:04}"), -(i as f64), 1)).collect());
        assert_eq!(percentage_alarms(&r, 1.0, Cutoff::Ceil).unwrap().len(), 10);
        assert_eq!(percentage_alarms(&r, 0.1, Cutoff::Ceil).unwrap().len(), 1);
        assert_eq!(percentage_alarms(&r, 0.1, Cutoff::Floor).unwrap().len(), 1);
        assert!(percentage_alarms(&r, 0.0, Cutoff::Ceil).is_err());
        assert!(percentage_alarms(&r, 100.5, Cutoff::Ceil).is_err());
        let r = rank("0xc", (0..100).map(|i| tx(&format!("{i:03}"), -(i as f64), 1)).collect());
        assert_eq!(percentage_alarms(&r, 1.0, Cutoff::Ceil).unwrap().len(), 1);
        let r = rank("0xc", (0..99).map(|i| tx(&format!("{i:03}"), -(i as f64), 1)).collect());
        assert_eq!(percentage_alarms(&r, 1.0, Cutoff::Ceil).unwrap().len(), 1);
        assert_eq!(percentage_alarms(&r, 1.0, Cutoff::Floor).unwrap().len(), 0);
    }

    #[test]
    fn absolute_examples() {
        let r = rank("0xc", vec![tx("a", -1.0, 1), tx("b", -2.0, 1)]);
        assert_eq!(absolute_alarms(&r, 3).unwrap().len(), 2);
        assert_eq!(absolute_alarms(&r, 1).unwrap()[0].tx_hash, "b");
        assert!(absolute_alarms(&r, 0).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let r = rank("0xc", vec![tx("a", -1.5, 3), tx("b", -2.0, 4)]);
        let mut buf = Vec::new();
        write_report_csv(&mut buf, std::slice::from_ref(&r), &[1]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "contract,rank,tx_hash,log_likelihood,token_count,alert\n0xc,1,b,-2,4,true\n0xc,2,a,-1.5,3,false\n"
        );
        assert!(write_report_csv(Vec::new(), &[r], &[]).is_err());
    }

    #[test]
    fn scores_csv_round_trip() {
        let mut a = tx("a", -1.25, 3);
        a.label = Some(Label::Adversarial);
        a.tags = vec!["flash_loan".into(), "reentrancy".into()];
        let b = tx("b", -0.5, 2);
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(read_scores_csv(buf.as_slice()).unwrap(), vec![a, b]);
    }

    proptest! {
        #[test]
        fn alerts_are_nested_prefixes(
            scores in proptest::collection::vec(-100.0f64..0.0, 1..200),
            a1 in 0.01f64..100.0,
            a2 in 0.01f64..100.0,
            k1 in 1usize..10,
            k2 in 1usize..10,
        ) {
            let txs: Vec<_> = scores.iter().enumerate().map(|(i, &s)| tx(&format!("{i:04}"), s, 1)).collect();
            let r = rank("0xc", txs.clone());
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            for cut in [Cutoff::Ceil, Cutoff::Floor] {
                let small = percentage_alarms(&r, lo, cut).unwrap();
                let big = percentage_alarms(&r, hi, cut).unwrap();
                prop_assert!(small.len() <= big.len());
                prop_assert_eq!(small, &big[..small.len()]);
            }
            let (klo, khi) = (k1.min(k2), k1.max(k2));
            let small = absolute_alarms(&r, klo).unwrap();
            prop_assert_eq!(small, &absolute_alarms(&r, khi).unwrap()[..small.len()]);

            // argsort invariance under a positive affine map
            let moved: Vec<_> = txs.iter().map(|t| ScoredTx { log_likelihood: 3.0 * t.log_likelihood - 7.0, ..t.clone() }).collect();
            let r2 = rank("0xc", moved);
            let h1: Vec<_> = r.entries.iter().map(|e| &e.tx_hash).collect();
            let h2: Vec<_> = r2.entries.iter().map(|e| &e.tx_hash).collect();
            prop_assert_eq!(h1, h2);
        }
    }
}
