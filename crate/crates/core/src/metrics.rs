//! Class-incremental accuracy metrics and the per-run CSV report.

use std::fmt::Write as _;

use crate::error::{input, Result};

/// Percentage of matching entries.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(input("accuracy of an empty set"));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Accuracy over all seen classes after the final task.
pub fn last_acc(m: &[f64]) -> Result<f64> {
    m.last().copied().ok_or_else(|| input("empty accuracy matrix"))
}

/// Mean of the per-task seen-class accuracies.
pub fn inc_acc(m: &[f64]) -> Result<f64> {
    if m.is_empty() {
        return Err(input("empty accuracy matrix"));
    }
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

pub const REPORT_CSV_HEADER: &str = "task,acc_seen,last_acc,inc_acc,strategy,lambda,seed";

/// One row per task plus a `summary` row. Floats use shortest round-trip
/// formatting so files keep full precision.
pub fn report_csv(acc: &[f64], strategy: &str, lambda: f64, seed: u64) -> Result<String> {
    let last = last_acc(acc)?;
    let inc = inc_acc(acc)?;
    let mut out = String::new();
    out.push_str(REPORT_CSV_HEADER);
    out.push('\n');
    for (t, a) in acc.iter().enumerate() {
        let _ = writeln!(out, "{},{a:?},,,{strategy},{lambda:?},{seed}", t + 1);
    }
    let _ = writeln!(out, "summary,,{last:?},{inc:?},{strategy},{lambda:?},{seed}");
    Ok(out)
}
