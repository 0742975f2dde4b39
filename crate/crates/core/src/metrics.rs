//! Classification metrics and the mean forecast horizon.
//!
//! The positive class is `personal_attack`. The horizon of a detected
//! derailing conversation is `N - first_detection`: how many turns before
//! the attack the first warning fired (1 = only on the final visible turn).
//! Derailing conversations that were never flagged are excluded from the
//! horizon mean and reported through `detected_fraction` instead, so misses
//! stay visible rather than silently deflating (or inflating) the mean.

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::pipeline::PredictionTrace;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean horizon over detected derailing conversations; `None` when no
    /// derailing conversation was detected.
    pub horizon_mean: Option<f64>,
    /// Fraction of derailing conversations that were ever flagged.
    pub detected_fraction: f64,
    pub counts: Counts,
}

impl EvalReport {
    /// Aligned plain-text table: Acc, P, R, F1, H.
    pub fn to_table(&self) -> String {
        let h = self
            .horizon_mean
            .map_or_else(|| "     -".to_string(), |v| format!("{v:6.3}"));
        format!(
            "{:>6} {:>6} {:>6} {:>6} {:>6}\n{:6.3} {:6.3} {:6.3} {:6.3} {h}\n",
            "Acc", "P", "R", "F1", "H", self.accuracy, self.precision, self.recall, self.f1
        )
    }
}

/// Pure accumulator over (gold, trace) pairs; partial accumulators merge for
/// parallel evaluation.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    counts: Counts,
    horizons: Vec<f64>,
    derailing_total: usize,
    derailing_detected: usize,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, gold: Label, trace: &PredictionTrace) {
        match (gold.is_attack(), trace.final_label.is_attack()) {
            (true, true) => self.counts.true_positive += 1,
            (false, true) => self.counts.false_positive += 1,
            (false, false) => self.counts.true_negative += 1,
            (true, false) => self.counts.false_negative += 1,
        }
        if gold.is_attack() {
            self.derailing_total += 1;
            if let Some(first) = trace.first_detection {
                self.derailing_detected += 1;
                self.horizons.push((trace.turn_count - first) as f64);
            }
        }
    }

    pub fn merge(&mut self, other: MetricsAccumulator) {
        self.counts.true_positive += other.counts.true_positive;
        self.counts.false_positive += other.counts.false_positive;
        self.counts.true_negative += other.counts.true_negative;
        self.counts.false_negative += other.counts.false_negative;
        self.horizons.extend(other.horizons);
        self.derailing_total += other.derailing_total;
        self.derailing_detected += other.derailing_detected;
    }

    pub fn report(&self) -> EvalReport {
        let c = self.counts;
        let total = c.total();
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(c.true_positive, c.true_positive + c.false_positive);
        let recall = ratio(c.true_positive, c.true_positive + c.false_negative);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        // Sort before summing so the mean is bit-identical under any
        // accumulation order.
        let mut horizons = self.horizons.clone();
        horizons.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let horizon_mean = if horizons.is_empty() {
            None
        } else {
            Some(horizons.iter().sum::<f64>() / horizons.len() as f64)
        };
        EvalReport {
            accuracy: ratio(c.true_positive + c.true_negative, total),
            precision,
            recall,
            f1,
            horizon_mean,
            detected_fraction: ratio(self.derailing_detected, self.derailing_total),
            counts: c,
        }
    }
}

fn join_gold<'a>(
    traces: &'a [PredictionTrace],
    gold: &'a [(String, Label)],
) -> Result<Vec<(&'a PredictionTrace, Label)>> {
    if traces.len() != gold.len() {
        return Err(Error::Data(format!(
            "{} traces but {} gold labels",
            traces.len(),
            gold.len()
        )));
    }
    let by_id: HashMap<&str, Label> = gold.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    if by_id.len() != gold.len() {
        return Err(Error::Data("duplicate conv_id in gold labels".into()));
    }
    traces
        .iter()
        .map(|t| {
            by_id
                .get(t.conv_id.as_str())
                .map(|l| (t, *l))
                .ok_or_else(|| Error::Data(format!("no gold label for conv `{}`", t.conv_id)))
        })
        .collect()
}

/// Full report (classification + horizon) for traces aligned to gold labels
/// by conv_id.
pub fn confusion_metrics(
    traces: &[PredictionTrace],
    gold: &[(String, Label)],
) -> Result<EvalReport> {
    let joined = join_gold(traces, gold)?;
    let mut acc = MetricsAccumulator::new();
    for (trace, label) in joined {
        acc.observe(label, trace);
    }
    Ok(acc.report())
}

/// Horizon statistics only: (mean over detected derailing conversations,
/// detected fraction).
pub fn forecast_horizon(
    traces: &[PredictionTrace],
    gold: &[(String, Label)],
) -> Result<(Option<f64>, f64)> {
    let report = confusion_metrics(traces, gold)?;
    Ok((report.horizon_mean, report.detected_fraction))
}
