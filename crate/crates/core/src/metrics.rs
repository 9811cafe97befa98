//! Accuracy, MSE over class indices, macro-F1, and the trainable-parameter
//! ratio.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub acc: f64,
    pub mse: f64,
    pub macro_f1: f64,
    pub tp_ratio: f64,
    pub n: usize,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} acc={} mse={} macro_f1={} tp_ratio={}",
            self.n, self.acc, self.mse, self.macro_f1, self.tp_ratio
        )
    }
}

pub fn compute(predictions: &[usize], golds: &[usize], trainable: usize, total_params: usize) -> Result<MetricReport> {
    if predictions.len() != golds.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Input("cannot score an empty prediction set".into()));
    }
    if total_params == 0 {
        return Err(Error::Input("total parameter count must be positive".into()));
    }
    let n = predictions.len();
    let mut correct = 0usize;
    let mut sq = 0u64;
    // class -> (tp, fp, fn)
    let mut counts: BTreeMap<usize, (u64, u64, u64)> = BTreeMap::new();
    for (&p, &g) in predictions.iter().zip(golds) {
        let d = p.abs_diff(g) as u64;
        sq += d * d;
        if p == g {
            correct += 1;
            counts.entry(p).or_default().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(g).or_default().2 += 1;
        }
    }
    let f1_sum: f64 = counts
        .values()
        .map(|&(tp, fp, fn_)| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
        .sum();
    Ok(MetricReport {
        acc: correct as f64 / n as f64,
        mse: sq as f64 / n as f64,
        macro_f1: f1_sum / counts.len() as f64,
        tp_ratio: trainable as f64 / total_params as f64,
        n,
    })
}
