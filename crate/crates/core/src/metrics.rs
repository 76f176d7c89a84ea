//! ROC curves, AUC and threshold metrics. Higher score = more member-like.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    /// (fpr, tpr), from (0, 0) to (1, 1)
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::validation(format!("{name} score list is empty")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::validation(format!("{name} scores contain NaN")));
    }
    Ok(())
}

/// Sweeps every distinct score as a threshold (descending); tied scores
/// move the curve in a single diagonal step. AUC by the trapezoid rule.
pub fn roc_and_auc(member_scores: &[f64], nonmember_scores: &[f64]) -> Result<RocCurve> {
    check_scores("member", member_scores)?;
    check_scores("non-member", nonmember_scores)?;
    let pos = member_scores.len() as f64;
    let neg = nonmember_scores.len() as f64;

    let mut all: Vec<(f64, bool)> = member_scores
        .iter()
        .map(|&s| (s, true))
        .chain(nonmember_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (x0, y0) = *points.last().unwrap();
        let (x1, y1) = (fp as f64 / neg, tp as f64 / pos);
        auc += (x1 - x0) * (y0 + y1) * 0.5;
        points.push((x1, y1));
    }
    Ok(RocCurve {
        points,
        auc: auc.clamp(0.0, 1.0),
    })
}

/// Accuracy and false-positive rate of the rule "member iff residual < τ".
pub fn acc_fpr_at_threshold(
    member_residuals: &[f64],
    nonmember_residuals: &[f64],
    tau: f64,
) -> Result<(f64, f64)> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::validation(format!("threshold must be positive, got {tau}")));
    }
    check_scores("member", member_residuals)?;
    check_scores("non-member", nonmember_residuals)?;
    let tp = member_residuals.iter().filter(|&&r| r < tau).count();
    let fp = nonmember_residuals.iter().filter(|&&r| r < tau).count();
    let tn = nonmember_residuals.len() - fp;
    let total = (member_residuals.len() + nonmember_residuals.len()) as f64;
    Ok((
        (tp + tn) as f64 / total,
        fp as f64 / nonmember_residuals.len() as f64,
    ))
}
