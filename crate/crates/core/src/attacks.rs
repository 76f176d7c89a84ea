//! Membership inference scorers behind one interface:
//! `score(sample, round, client) -> real`, higher = more member-like.
//!
//! Every scorer reads the training run through [`AdversaryView`], which
//! exposes only what an honest-but-curious server holds: the global
//! parameters of each round and the post-defense uploads. Batch membership
//! stays with the evaluation harness.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::federation::TrainingTrace;
use crate::linalg::{self, Matrix, Subspace, DEFAULT_RANK_TOL};
use crate::model::{self, FrozenBackbone, GradientUpdate, TrainableModule, TrainableParams};
use crate::rng;

fn default_rank_tol() -> f64 {
    DEFAULT_RANK_TOL
}

fn default_window() -> usize {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ScoreFunction {
    /// Projection residual of the candidate's layer-input rows onto the
    /// span of the uploaded weight gradient. `module: None` attacks every
    /// trainable module and keeps the smallest residual.
    ProjRes {
        #[serde(default)]
        module: Option<usize>,
        #[serde(default = "default_rank_tol")]
        rank_tol: f64,
    },
    FedLoss,
    ScoreDiff,
    ScoreRatio,
    Cosine,
    GradientDiff,
    Fta {
        #[serde(default = "default_window")]
        window: usize,
    },
    FedMia,
}

impl ScoreFunction {
    pub const PROJRES: ScoreFunction = ScoreFunction::ProjRes {
        module: None,
        rank_tol: DEFAULT_RANK_TOL,
    };

    pub fn name(&self) -> &'static str {
        match self {
            ScoreFunction::ProjRes { .. } => "projres",
            ScoreFunction::FedLoss => "fedloss",
            ScoreFunction::ScoreDiff => "score_diff",
            ScoreFunction::ScoreRatio => "score_ratio",
            ScoreFunction::Cosine => "cosine",
            ScoreFunction::GradientDiff => "gradient_diff",
            ScoreFunction::Fta { .. } => "fta",
            ScoreFunction::FedMia => "fedmia",
        }
    }

    /// The seven baselines with default parameters.
    pub fn baselines() -> [ScoreFunction; 7] {
        [
            ScoreFunction::FedLoss,
            ScoreFunction::ScoreDiff,
            ScoreFunction::ScoreRatio,
            ScoreFunction::Cosine,
            ScoreFunction::GradientDiff,
            ScoreFunction::Fta {
                window: default_window(),
            },
            ScoreFunction::FedMia,
        ]
    }
}

/// What the server observes of a training run.
#[derive(Clone, Copy)]
pub struct AdversaryView<'a> {
    trace: &'a TrainingTrace,
}

impl<'a> AdversaryView<'a> {
    pub fn new(trace: &'a TrainingTrace) -> Self {
        Self { trace }
    }

    pub fn global(&self, round: usize) -> Result<&'a TrainableParams> {
        self.trace
            .round(round)
            .map(|r| &r.global)
            .ok_or_else(|| Error::NeedsHistory(format!("global parameters of round {round}")))
    }

    pub fn upload(&self, round: usize, client: usize) -> Result<&'a GradientUpdate> {
        self.trace
            .round(round)
            .and_then(|r| r.upload(client))
            .map(|u| &u.update)
            .ok_or_else(|| Error::NeedsHistory(format!("upload of client {client} in round {round}")))
    }

    /// Clients whose uploads are visible in a round, ascending.
    pub fn clients(&self, round: usize) -> Vec<usize> {
        let mut c: Vec<usize> = self
            .trace
            .round(round)
            .map(|r| r.uploads.iter().map(|u| u.client).collect())
            .unwrap_or_default();
        c.sort_unstable();
        c
    }
}

/// Everything a scorer may touch.
#[derive(Clone, Copy)]
pub struct AttackContext<'a> {
    pub backbone: &'a FrozenBackbone,
    /// Source of candidate samples (tokens and labels).
    pub dataset: &'a Dataset,
    pub view: AdversaryView<'a>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttackScore {
    pub score: f64,
    /// ProjRes residual r; `None` for the baselines.
    pub residual: Option<f64>,
    /// Set when the statistic fell back to a degenerate case
    /// (empty gradient span, zero reference spread).
    pub degenerate: bool,
}

impl AttackScore {
    fn plain(score: f64) -> Self {
        Self {
            score,
            residual: None,
            degenerate: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjResResidual {
    pub residual: f64,
    pub rank: usize,
    /// The gradient span was empty; residual is the mean ℓ1 norm.
    pub degenerate: bool,
}

/// Mean over rows of `‖x − Π_S(x)‖₁`, with `S` the numerical column span of `grad`.
pub fn projection_residual(grad: &Matrix, embeddings: &Matrix, rank_tol: f64) -> Result<ProjResResidual> {
    if embeddings.cols() != grad.rows() {
        return Err(Error::validation(format!(
            "embedding width {} does not match gradient rows {}",
            embeddings.cols(),
            grad.rows()
        )));
    }
    if embeddings.rows() == 0 {
        return Err(Error::validation("candidate has no embedding rows"));
    }
    let span = Subspace::column_span(grad, rank_tol)?;
    let mut total = 0.0;
    for i in 0..embeddings.rows() {
        let x = embeddings.row(i);
        let rec = linalg::project_onto(&span, x)?;
        total += x.iter().zip(&rec).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    Ok(ProjResResidual {
        residual: total / embeddings.rows() as f64,
        rank: span.rank(),
        degenerate: span.rank() == 0,
    })
}

/// ProjRes residual against one module's weight gradient.
pub fn projres_score(
    grad: &GradientUpdate,
    module_index: usize,
    embeddings: &Matrix,
    rank_tol: f64,
) -> Result<ProjResResidual> {
    let key = TrainableModule::weight_key(module_index);
    let g = grad
        .get(&key)
        .ok_or_else(|| Error::validation(format!("upload has no {key}")))?;
    projection_residual(g, embeddings, rank_tol)
}

/// Member iff `r < τ`.
pub fn projres_decide(residual: f64, tau: f64) -> bool {
    residual < tau
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttackVerdict {
    pub score: f64,
    pub residual: f64,
    pub decision: bool,
    pub threshold: f64,
}

impl AttackVerdict {
    pub fn from_residual(residual: f64, tau: f64) -> Self {
        Self {
            score: -residual,
            residual,
            decision: projres_decide(residual, tau),
            threshold: tau,
        }
    }
}

fn sample_loss(ctx: &AttackContext, params: &TrainableParams, sample: usize) -> Result<f64> {
    let s = ctx.dataset.sample(sample);
    Ok(model::per_sample_losses(ctx.backbone, params, &[&s.tokens], &[s.label])?[0])
}

/// Gradient of the candidate alone, at the given parameters.
pub fn sample_gradient(ctx: &AttackContext, params: &TrainableParams, sample: usize) -> Result<GradientUpdate> {
    let s = ctx.dataset.sample(sample);
    Ok(model::loss_and_gradients(ctx.backbone, params, &[&s.tokens], &[s.label])?.1)
}

pub fn projres_sample_score(
    ctx: &AttackContext,
    round: usize,
    client: usize,
    sample: usize,
    module: Option<usize>,
    rank_tol: f64,
) -> Result<AttackScore> {
    let global = ctx.view.global(round)?;
    let upload = ctx.view.upload(round, client)?;
    let modules: Vec<usize> = match module {
        Some(i) => vec![i],
        None => (0..global.modules.len()).collect(),
    };
    if modules.is_empty() {
        return Err(Error::validation("ProjRes needs at least one trainable module"));
    }
    let tokens = ctx.dataset.sample(sample).tokens.as_slice();
    let mut best: Option<ProjResResidual> = None;
    for i in modules {
        let rows = model::module_input(ctx.backbone, global, &[tokens], i)?.rows_of(0);
        let r = projres_score(upload, i, &rows, rank_tol)?;
        if best.is_none_or(|b| r.residual < b.residual) {
            best = Some(r);
        }
    }
    let best = best.expect("non-empty module list");
    Ok(AttackScore {
        score: -best.residual,
        residual: Some(best.residual),
        degenerate: best.degenerate,
    })
}

/// `−L(θ^round, x)`
pub fn fedloss_score(ctx: &AttackContext, round: usize, sample: usize) -> Result<f64> {
    Ok(-sample_loss(ctx, ctx.view.global(round)?, sample)?)
}

fn previous_round(round: usize) -> Result<usize> {
    round
        .checked_sub(1)
        .ok_or_else(|| Error::NeedsHistory("round 0 has no previous parameters".into()))
}

/// `L(θ^{round−1}, x) − L(θ^round, x)`
pub fn score_diff(ctx: &AttackContext, round: usize, sample: usize) -> Result<f64> {
    let prev = ctx.view.global(previous_round(round)?)?;
    let cur = ctx.view.global(round)?;
    Ok(sample_loss(ctx, prev, sample)? - sample_loss(ctx, cur, sample)?)
}

/// `L(θ^{round−1}, x) / max(L(θ^round, x), 1e-12)`
pub fn score_ratio(ctx: &AttackContext, round: usize, sample: usize) -> Result<f64> {
    let prev = ctx.view.global(previous_round(round)?)?;
    let cur = ctx.view.global(round)?;
    Ok(sample_loss(ctx, prev, sample)? / sample_loss(ctx, cur, sample)?.max(1e-12))
}

pub fn cosine_score(client_grad: &GradientUpdate, sample_grad: &GradientUpdate) -> Result<f64> {
    linalg::cosine_similarity(&client_grad.flatten(), &sample_grad.flatten())
}

/// `−‖g_client − g_sample‖₂`
pub fn gradient_diff_score(client_grad: &GradientUpdate, sample_grad: &GradientUpdate) -> Result<f64> {
    let a = client_grad.flatten();
    let b = sample_grad.flatten();
    if a.len() != b.len() {
        return Err(Error::validation("gradient layouts differ"));
    }
    Ok(-a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Least-squares slope of `values` against their index.
pub fn least_squares_slope(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::NeedsHistory(format!(
            "slope needs at least 2 points, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let t_mean = (n - 1.0) / 2.0;
    let v_mean = values.iter().sum::<f64>() / n;
    let (mut cov, mut var) = (0.0, 0.0);
    for (t, v) in values.iter().enumerate() {
        let dt = t as f64 - t_mean;
        cov += dt * (v - v_mean);
        var += dt * dt;
    }
    Ok(cov / var)
}

/// Negated loss slope over the `window` snapshots ending at `round`.
pub fn fta_score(ctx: &AttackContext, round: usize, window: usize, sample: usize) -> Result<f64> {
    if window < 2 {
        return Err(Error::NeedsHistory(format!("FTA window {window} < 2")));
    }
    let start = (round + 1).checked_sub(window).ok_or_else(|| {
        Error::NeedsHistory(format!("FTA window {window} reaches before round 0 from round {round}"))
    })?;
    let losses = (start..=round)
        .map(|r| sample_loss(ctx, ctx.view.global(r)?, sample))
        .collect::<Result<Vec<_>>>()?;
    Ok(-least_squares_slope(&losses)?)
}

/// z-score of the target's similarity against the other clients'.
/// Returns `(z, degenerate)`; zero spread gives `(0, true)`.
pub fn fedmia_z(target: f64, reference: &[f64]) -> Result<(f64, bool)> {
    if reference.len() < 2 {
        return Err(Error::InsufficientPopulation {
            needed: 3,
            found: reference.len() + 1,
        });
    }
    let n = reference.len() as f64;
    let mean = reference.iter().sum::<f64>() / n;
    let var = reference.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    if std == 0.0 {
        return Ok((0.0, true));
    }
    Ok(((target - mean) / std, false))
}

pub fn fedmia_score(ctx: &AttackContext, round: usize, target_client: usize, sample: usize) -> Result<AttackScore> {
    let clients = ctx.view.clients(round);
    if clients.len() < 3 {
        return Err(Error::InsufficientPopulation {
            needed: 3,
            found: clients.len(),
        });
    }
    let target_upload = ctx.view.upload(round, target_client)?;
    let g = sample_gradient(ctx, ctx.view.global(round)?, sample)?;
    let target = cosine_score(target_upload, &g)?;
    let reference = clients
        .iter()
        .filter(|&&c| c != target_client)
        .map(|&c| cosine_score(ctx.view.upload(round, c)?, &g))
        .collect::<Result<Vec<_>>>()?;
    let (z, degenerate) = fedmia_z(target, &reference)?;
    Ok(AttackScore {
        score: z,
        residual: None,
        degenerate,
    })
}

/// Scores one candidate against one client's round.
pub fn score(
    f: &ScoreFunction,
    ctx: &AttackContext,
    round: usize,
    client: usize,
    sample: usize,
) -> Result<AttackScore> {
    match *f {
        ScoreFunction::ProjRes { module, rank_tol } => {
            projres_sample_score(ctx, round, client, sample, module, rank_tol)
        }
        ScoreFunction::FedLoss => fedloss_score(ctx, round, sample).map(AttackScore::plain),
        ScoreFunction::ScoreDiff => score_diff(ctx, round, sample).map(AttackScore::plain),
        ScoreFunction::ScoreRatio => score_ratio(ctx, round, sample).map(AttackScore::plain),
        ScoreFunction::Cosine | ScoreFunction::GradientDiff => {
            let upload = ctx.view.upload(round, client)?;
            let g = sample_gradient(ctx, ctx.view.global(round)?, sample)?;
            let s = if matches!(f, ScoreFunction::Cosine) {
                cosine_score(upload, &g)?
            } else {
                gradient_diff_score(upload, &g)?
            };
            Ok(AttackScore::plain(s))
        }
        ScoreFunction::Fta { window } => fta_score(ctx, round, window, sample).map(AttackScore::plain),
        ScoreFunction::FedMia => fedmia_score(ctx, round, client, sample),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonmemberSource {
    /// Samples never assigned to any client.
    #[default]
    Holdout,
    /// Samples from other clients' partitions.
    OtherClients,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPlan {
    pub round: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub nonmember_source: NonmemberSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub client: usize,
    pub sample: usize,
}

/// For each repetition: a client, a member of its batch in `plan.round`,
/// and a non-member outside its partition. Reads ground truth.
pub fn draw_candidates(
    trace: &TrainingTrace,
    dataset: &Dataset,
    plan: &EvalPlan,
) -> Result<Vec<(Candidate, Candidate)>> {
    if plan.repetitions == 0 {
        return Err(Error::validation("repetitions must be at least 1"));
    }
    let record = trace
        .round(plan.round)
        .ok_or_else(|| Error::validation(format!("trace has no round {}", plan.round)))?;
    let mut clients: Vec<usize> = record.uploads.iter().map(|u| u.client).collect();
    clients.sort_unstable();
    if clients.is_empty() {
        return Err(Error::validation(format!("round {} has no uploads", plan.round)));
    }
    let mut r = rng::stream(plan.seed, &[rng::TAG_EVAL, plan.round as u64]);
    let mut out = Vec::with_capacity(plan.repetitions);
    for _ in 0..plan.repetitions {
        let client = clients[r.random_range(0..clients.len())];
        let batch = record.upload(client).expect("listed client").batch.as_slice();
        let member = batch[r.random_range(0..batch.len())];
        let pool: Vec<usize> = match plan.nonmember_source {
            NonmemberSource::Holdout => dataset.holdout_ids.clone(),
            NonmemberSource::OtherClients => {
                let own = trace.partition_of(client).unwrap_or(&[]);
                dataset
                    .train_ids
                    .iter()
                    .copied()
                    .filter(|id| !own.contains(id))
                    .collect()
            }
        };
        if pool.is_empty() {
            return Err(Error::validation("no non-member candidates available"));
        }
        let nonmember = pool[r.random_range(0..pool.len())];
        out.push((
            Candidate { client, sample: member },
            Candidate {
                client,
                sample: nonmember,
            },
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredCandidate {
    pub client: usize,
    pub sample: usize,
    pub member: bool,
    pub score: AttackScore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub attack: ScoreFunction,
    pub round: usize,
    pub members: Vec<ScoredCandidate>,
    pub nonmembers: Vec<ScoredCandidate>,
}

impl Evaluation {
    pub fn member_scores(&self) -> Vec<f64> {
        self.members.iter().map(|c| c.score.score).collect()
    }

    pub fn nonmember_scores(&self) -> Vec<f64> {
        self.nonmembers.iter().map(|c| c.score.score).collect()
    }

    pub fn member_residuals(&self) -> Option<Vec<f64>> {
        self.members.iter().map(|c| c.score.residual).collect()
    }

    pub fn nonmember_residuals(&self) -> Option<Vec<f64>> {
        self.nonmembers.iter().map(|c| c.score.residual).collect()
    }

    pub fn rows(&self) -> impl Iterator<Item = &ScoredCandidate> {
        self.members.iter().chain(&self.nonmembers)
    }
}

/// Scores `plan.repetitions` member and non-member candidates.
pub fn evaluate_attack(
    f: &ScoreFunction,
    backbone: &FrozenBackbone,
    dataset: &Dataset,
    trace: &TrainingTrace,
    plan: &EvalPlan,
    exec: Execution,
) -> Result<Evaluation> {
    let pairs = draw_candidates(trace, dataset, plan)?;
    let ctx = AttackContext {
        backbone,
        dataset,
        view: AdversaryView::new(trace),
    };
    let scored = exec.try_map(pairs.len() * 2, |i| {
        let (cand, member) = if i % 2 == 0 {
            (pairs[i / 2].0, true)
        } else {
            (pairs[i / 2].1, false)
        };
        score(f, &ctx, plan.round, cand.client, cand.sample).map(|s| ScoredCandidate {
            client: cand.client,
            sample: cand.sample,
            member,
            score: s,
        })
    })?;
    let (members, nonmembers): (Vec<_>, Vec<_>) = scored.into_iter().partition(|c| c.member);
    Ok(Evaluation {
        attack: *f,
        round: plan.round,
        members,
        nonmembers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decision_rule() {
        assert!(projres_decide(0.0, 1e-2));
        assert!(!projres_decide(100.0, 1e-2));
        let v = AttackVerdict::from_residual(5e-3, 1e-2);
        assert!(v.decision);
        assert_eq!(v.score, -5e-3);
    }

    #[test]
    fn slope_cases() {
        assert_eq!(least_squares_slope(&[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert!((least_squares_slope(&[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(least_squares_slope(&[1.0]), Err(Error::NeedsHistory(_))));
    }

    #[test]
    fn fedmia_z_cases() {
        assert_eq!(fedmia_z(0.5, &[0.4, 0.6]).unwrap(), (0.0, false));
        assert_eq!(fedmia_z(0.9, &[0.5, 0.5, 0.5]).unwrap(), (0.0, true));
        assert!(fedmia_z(0.9, &[0.5, 0.7]).unwrap().0 > 0.0);
        assert!(matches!(
            fedmia_z(0.5, &[0.1]),
            Err(Error::InsufficientPopulation { .. })
        ));
    }

    #[test]
    fn cosine_and_diff_scores() {
        let mut a = std::collections::BTreeMap::new();
        a.insert("w".to_string(), Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let ga = GradientUpdate {
            per_module: a,
            round: 0,
            client: 0,
        };
        let mut b = ga.clone();
        b.per_module.insert("w".to_string(), Matrix::from_rows(&[vec![0.0, 2.0]]).unwrap());
        assert_eq!(cosine_score(&ga, &ga).unwrap(), 1.0);
        assert_eq!(cosine_score(&ga, &b).unwrap(), 0.0);
        assert_eq!(gradient_diff_score(&ga, &ga).unwrap(), 0.0);
        assert!((gradient_diff_score(&ga, &b).unwrap() + 5f64.sqrt()).abs() < 1e-15);
        let mut z = ga.clone();
        z.per_module.insert("w".to_string(), Matrix::zeros(1, 2));
        assert!(matches!(cosine_score(&z, &ga), Err(Error::UndefinedSimilarity)));
    }

    #[test]
    fn empty_span_falls_back_to_norm() {
        let g = Matrix::zeros(3, 2);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.0, 0.0, 2.0]]).unwrap();
        let r = projection_residual(&g, &x, DEFAULT_RANK_TOL).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.residual, 4.0);
    }

    #[test]
    fn score_function_config_names() {
        let f: ScoreFunction = serde_json::from_str(r#"{"kind":"proj_res"}"#).unwrap();
        assert_eq!(f, ScoreFunction::PROJRES);
        let f: ScoreFunction = serde_json::from_str(r#"{"kind":"fta","window":4}"#).unwrap();
        assert_eq!(f, ScoreFunction::Fta { window: 4 });
        assert!(serde_json::from_str::<ScoreFunction>(r#"{"kind":"magic"}"#).is_err());
    }
}
