//! Capability boundary of the projection attack: when does the span of
//! `∇W = Xᵀα` pin down exactly the rows of `X`?

use serde::{Deserialize, Serialize};

use crate::attacks::projection_residual;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{self, Matrix, DEFAULT_RANK_TOL};
use crate::metrics;
use crate::model;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Recoverable,
    /// The span fills the whole space, so every vector has zero residual.
    FullRankDegenerate,
    /// The span is a proper subspace but too small to hold every batch row.
    CapacityLimited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryCase {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub expected_regime: Regime,
}

impl BoundaryCase {
    pub fn new(n: usize, m: usize, p: usize) -> Result<Self> {
        Ok(Self {
            n,
            m,
            p,
            expected_regime: classify_regime(n, m, p)?,
        })
    }
}

/// Largest batch token count with exact recovery: `min(n − 1, m)`.
pub fn p_max(n: usize, m: usize) -> usize {
    (n.saturating_sub(1)).min(m)
}

pub fn classify_regime(n: usize, m: usize, p: usize) -> Result<Regime> {
    if n == 0 || m == 0 || p == 0 {
        return Err(Error::validation(format!("n, m, p must be >= 1, got ({n}, {m}, {p})")));
    }
    Ok(if p <= p_max(n, m) {
        Regime::Recoverable
    } else if m >= n {
        Regime::FullRankDegenerate
    } else {
        Regime::CapacityLimited
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScanRow {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub regime: Regime,
    pub mean_residual: f64,
    pub max_member_residual: f64,
    pub mean_nonmember_residual: f64,
    pub min_nonmember_residual: f64,
    pub auc: f64,
}

struct Trial {
    x: Matrix,
    alpha: Matrix,
    outsider: Matrix,
}

fn draw_trial(n: usize, m: usize, rows: usize, seed: u64, trial: usize) -> Trial {
    let mut r = rng::stream(seed, &[rng::TAG_SCAN, n as u64, m as u64, trial as u64]);
    Trial {
        x: Matrix::random_normal(rows, n, 1.0, &mut r),
        alpha: Matrix::random_normal(rows, m, 1.0, &mut r),
        outsider: Matrix::random_normal(1, n, 1.0, &mut r),
    }
}

/// Synthetic ProjRes runs on Gaussian `X` (p×n) and `α` (p×m).
///
/// Trial `t` draws its data once at the largest `p` and every smaller `p`
/// uses a row prefix, so the curve over `p` compares like with like. The
/// member candidate is row 0 of `X`; the non-member is an independent row.
pub fn empirical_boundary_scan(
    n: usize,
    m: usize,
    p_values: &[usize],
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<ScanRow>> {
    if p_values.is_empty() {
        return Err(Error::validation("p range is empty"));
    }
    if trials == 0 {
        return Err(Error::validation("trials must be at least 1"));
    }
    let regimes = p_values
        .iter()
        .map(|&p| classify_regime(n, m, p))
        .collect::<Result<Vec<_>>>()?;
    let rows_needed = *p_values.iter().max().expect("non-empty");

    let cells = exec.try_map(p_values.len() * trials, |idx| {
        let (pi, t) = (idx / trials, idx % trials);
        let p = p_values[pi];
        let data = draw_trial(n, m, rows_needed, seed, t);
        let prefix: Vec<usize> = (0..p).collect();
        let grad = data.x.select_rows(&prefix).t_matmul(&data.alpha.select_rows(&prefix))?;
        let member = data.x.select_rows(&[0]);
        let rm = projection_residual(&grad, &member, DEFAULT_RANK_TOL)?.residual;
        let rn = projection_residual(&grad, &data.outsider, DEFAULT_RANK_TOL)?.residual;
        Ok::<_, Error>((rm, rn))
    })?;

    p_values
        .iter()
        .zip(regimes)
        .enumerate()
        .map(|(pi, (&p, regime))| {
            let chunk = &cells[pi * trials..(pi + 1) * trials];
            let members: Vec<f64> = chunk.iter().map(|c| c.0).collect();
            let outsiders: Vec<f64> = chunk.iter().map(|c| c.1).collect();
            let neg = |v: &[f64]| v.iter().map(|r| -r).collect::<Vec<_>>();
            let auc = metrics::roc_and_auc(&neg(&members), &neg(&outsiders))?.auc;
            let t = trials as f64;
            Ok(ScanRow {
                n,
                m,
                p,
                regime,
                mean_residual: members.iter().sum::<f64>() / t,
                max_member_residual: members.iter().cloned().fold(0.0, f64::max),
                mean_nonmember_residual: outsiders.iter().sum::<f64>() / t,
                min_nonmember_residual: outsiders.iter().cloned().fold(f64::INFINITY, f64::min),
                auc,
            })
        })
        .collect()
}

/// Largest scanned `p` at which members are recovered exactly
/// (every member residual below `tol`) while every non-member stays at or
/// above `tol`. A full-rank span zeroes non-members too, so it does not count.
pub fn sharp_p_max(rows: &[ScanRow], tol: f64) -> Option<usize> {
    rows.iter()
        .filter(|r| r.max_member_residual < tol && r.min_nonmember_residual >= tol)
        .map(|r| r.p)
        .max()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct UpsampleTrial {
    pub rank_x: usize,
    pub rank_up: usize,
}

/// Rank of `X` (p×n) against the rank of its lift `X·W_upᵀ` with `n_up = 4n`.
pub fn upsampling_rank_check(n: usize, p: usize, trials: usize, seed: u64) -> Result<Vec<UpsampleTrial>> {
    if n == 0 || p == 0 {
        return Err(Error::validation("n and p must be >= 1"));
    }
    (0..trials)
        .map(|t| {
            let mut r = rng::stream(seed, &[rng::TAG_SCAN, u64::MAX, t as u64]);
            let x = Matrix::random_normal(p, n, 1.0, &mut r);
            let w_up = model::random_upsample(4 * n, n, &mut r);
            let lifted = x.matmul_t(&w_up)?;
            Ok(UpsampleTrial {
                rank_x: linalg::numerical_rank(&x, DEFAULT_RANK_TOL)?,
                rank_up: linalg::numerical_rank(&lifted, DEFAULT_RANK_TOL)?,
            })
        })
        .collect()
}
