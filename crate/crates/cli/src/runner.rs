//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use projres_core::attacks::{self, EvalPlan, Evaluation, ScoreFunction};
use projres_core::data::Dataset;
use projres_core::defenses::{DefenseConfig, DefenseKind};
use projres_core::federation::{self, TrainingTrace};
use projres_core::metrics;
use projres_core::model::FrozenBackbone;
use projres_core::theory;
use projres_core::{Error, Execution};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::output;
use crate::trace_io;

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub rounds: Option<Vec<usize>>,
    pub repetitions: Option<usize>,
    pub eval_seed: Option<u64>,
    pub federation_seed: Option<u64>,
    pub tau: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> CliResult<()> {
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(r) = &self.rounds {
            cfg.evaluation.rounds = r.clone();
        }
        if let Some(r) = self.repetitions {
            cfg.evaluation.repetitions = r;
        }
        if let Some(s) = self.eval_seed {
            cfg.evaluation.seed = s;
        }
        if let Some(s) = self.federation_seed {
            cfg.federation.seed = s;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        cfg.validate()
            .map_err(|e| CliError::Config(format!("after command-line overrides: {e}")))
    }
}

/// File-name label of an attack; parameters appear only when non-default.
pub fn attack_label(f: &ScoreFunction) -> String {
    match *f {
        ScoreFunction::ProjRes { module: Some(i), .. } => format!("projres-m{i}"),
        ScoreFunction::Fta { window } if window != 10 => format!("fta-w{window}"),
        _ => f.name().to_string(),
    }
}

fn cell_suffix(label: &str, round: usize, defense: &DefenseConfig) -> String {
    match defense.kind {
        DefenseKind::None => format!("{label}_{round}"),
        _ => format!("{label}_{round}_{}", defense.label()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub config_hash: String,
    pub seed: u64,
    pub eval_seed: u64,
    pub attack: String,
    pub defense: String,
    pub round: usize,
    pub repetitions: usize,
    pub auc: Option<f64>,
    pub tau: f64,
    pub acc: Option<f64>,
    pub fpr: Option<f64>,
    pub member_mean_residual: Option<f64>,
    pub nonmember_mean_residual: Option<f64>,
    pub status: String,
}

#[derive(Serialize)]
struct RocRow {
    fpr: f64,
    tpr: f64,
}

#[derive(Serialize)]
struct ScoreRow {
    member: bool,
    client: usize,
    sample: usize,
    score: f64,
    residual: Option<f64>,
    degenerate: bool,
}

#[derive(Serialize)]
struct LossRow {
    defense: String,
    round: usize,
    mean_loss: f64,
}

#[derive(Serialize)]
struct Seeds {
    backbone: u64,
    params: u64,
    federation: u64,
    dataset: u64,
    evaluation: u64,
    defense_noise: Vec<u64>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_hash: String,
    created_unix: u64,
    seeds: Seeds,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<&'a Path>,
    config: &'a ExperimentConfig,
    outputs: &'a [String],
}

fn write_manifest(
    command: &str,
    config: &ExperimentConfig,
    trace: Option<&Path>,
    outputs: &[String],
) -> CliResult<()> {
    let created_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = Manifest {
        tool: "projres",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_hash: config.hash(),
        created_unix,
        seeds: Seeds {
            backbone: config.backbone.seed,
            params: config.param_seed,
            federation: config.federation.seed,
            dataset: config.dataset_seed(),
            evaluation: config.evaluation.seed,
            defense_noise: config.defense_grid().iter().map(|d| d.noise_seed).collect(),
        },
        trace,
        config,
        outputs,
    };
    output::write_json(&config.output_dir.join("manifest.json"), &manifest)
}

/// Model, data and execution mode shared by every cell of a run.
pub struct Session {
    pub backbone: FrozenBackbone,
    pub dataset: Dataset,
    pub exec: Execution,
}

impl Session {
    pub fn new(config: &ExperimentConfig, exec: Execution) -> CliResult<Self> {
        Ok(Self {
            backbone: FrozenBackbone::build(&config.backbone)?,
            dataset: config.dataset.build(config.backbone.vocab_size)?,
            exec,
        })
    }

    pub fn train(&self, config: &ExperimentConfig, defense: &DefenseConfig) -> CliResult<TrainingTrace> {
        let mut fed = config.federation.clone();
        fed.defense = match defense.kind {
            DefenseKind::None => None,
            _ => Some(*defense),
        };
        let init = trace_io::fresh_params(config, self.dataset.num_classes)?;
        Ok(federation::run_training(&fed, &self.backbone, &self.dataset, init, self.exec)?)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn is_starved(e: &Error) -> bool {
    matches!(
        e,
        Error::NeedsHistory(_) | Error::InsufficientPopulation { .. } | Error::UndefinedSimilarity
    )
}

/// Evaluates every (round, attack) cell on one trace, writing the ROC and
/// score files of each cell. Returns one result row per cell.
pub fn evaluate_trace(
    session: &Session,
    config: &ExperimentConfig,
    trace: &TrainingTrace,
    defense: &DefenseConfig,
    rounds: &[usize],
    outputs: &mut Vec<String>,
) -> CliResult<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &round in rounds {
        for attack in &config.attacks {
            let label = attack_label(attack);
            let plan = EvalPlan {
                round,
                repetitions: config.evaluation.repetitions,
                seed: config.evaluation.seed,
                nonmember_source: config.evaluation.nonmember_source,
            };
            let mut row = ResultRow {
                config_hash: config.hash(),
                seed: config.federation.seed,
                eval_seed: config.evaluation.seed,
                attack: label.clone(),
                defense: defense.label(),
                round,
                repetitions: plan.repetitions,
                auc: None,
                tau: config.tau,
                acc: None,
                fpr: None,
                member_mean_residual: None,
                nonmember_mean_residual: None,
                status: "ok".into(),
            };
            let eval = match attacks::evaluate_attack(
                attack,
                &session.backbone,
                &session.dataset,
                trace,
                &plan,
                session.exec,
            ) {
                Ok(e) => e,
                Err(e) if is_starved(&e) => {
                    row.status = e.to_string();
                    rows.push(row);
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            fill_metrics(&mut row, &eval, config.tau)?;
            let suffix = cell_suffix(&label, round, defense);
            write_cell_files(&config.output_dir, &suffix, &eval, outputs)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

fn fill_metrics(row: &mut ResultRow, eval: &Evaluation, tau: f64) -> CliResult<()> {
    let roc = metrics::roc_and_auc(&eval.member_scores(), &eval.nonmember_scores())?;
    row.auc = Some(roc.auc);
    if let (Some(m), Some(n)) = (eval.member_residuals(), eval.nonmember_residuals()) {
        let (acc, fpr) = metrics::acc_fpr_at_threshold(&m, &n, tau)?;
        row.acc = Some(acc);
        row.fpr = Some(fpr);
        row.member_mean_residual = Some(mean(&m));
        row.nonmember_mean_residual = Some(mean(&n));
    }
    Ok(())
}

fn write_cell_files(dir: &Path, suffix: &str, eval: &Evaluation, outputs: &mut Vec<String>) -> CliResult<()> {
    let roc = metrics::roc_and_auc(&eval.member_scores(), &eval.nonmember_scores())?;
    let roc_rows: Vec<RocRow> = roc.points.iter().map(|&(fpr, tpr)| RocRow { fpr, tpr }).collect();
    let roc_name = format!("roc_{suffix}.csv");
    output::write_csv(&dir.join(&roc_name), &roc_rows)?;
    let score_rows: Vec<ScoreRow> = eval
        .rows()
        .map(|c| ScoreRow {
            member: c.member,
            client: c.client,
            sample: c.sample,
            score: c.score.score,
            residual: c.score.residual,
            degenerate: c.score.degenerate,
        })
        .collect();
    let scores_name = format!("scores_{suffix}.csv");
    output::write_csv(&dir.join(&scores_name), &score_rows)?;
    outputs.push(roc_name);
    outputs.push(scores_name);
    Ok(())
}

fn print_rows(rows: &[ResultRow]) {
    for r in rows {
        let auc = r.auc.map_or("-".to_string(), |a| format!("{a:.4}"));
        println!("{:<14} {:<24} round {:<4} auc {auc} {}", r.attack, r.defense, r.round, r.status);
    }
}

/// `run <config>`: train under every defense, attack every requested round.
pub fn run_experiment(config: &ExperimentConfig, exec: Execution) -> CliResult<Vec<ResultRow>> {
    let dir = &config.output_dir;
    output::create_dir(dir)?;
    let session = Session::new(config, exec)?;
    let mut outputs = Vec::new();
    let mut rows = Vec::new();
    let mut losses = Vec::new();
    for defense in config.defense_grid() {
        let trace = session.train(config, &defense)?;
        losses.extend(trace.rounds().map(|r| LossRow {
            defense: defense.label(),
            round: r.round,
            mean_loss: r.mean_loss(),
        }));
        if config.dump_traces {
            let name = format!("trace_{}", defense.label());
            trace_io::export_trace(&dir.join(&name), config, &defense, &trace)?;
            outputs.push(name);
        }
        rows.extend(evaluate_trace(&session, config, &trace, &defense, &config.eval_rounds(), &mut outputs)?);
    }
    output::write_csv(&dir.join("training.csv"), &losses)?;
    output::write_csv(&dir.join("results.csv"), &rows)?;
    outputs.push("training.csv".into());
    outputs.push("results.csv".into());
    write_manifest("run", config, None, &outputs)?;
    print_rows(&rows);
    Ok(rows)
}

/// `export-trace <config>`: train under every defense and dump the traces.
pub fn export_traces(config: &ExperimentConfig, exec: Execution) -> CliResult<Vec<PathBuf>> {
    output::create_dir(&config.output_dir)?;
    let session = Session::new(config, exec)?;
    let mut written = Vec::new();
    for defense in config.defense_grid() {
        let trace = session.train(config, &defense)?;
        let dir = config.output_dir.join(format!("trace_{}", defense.label()));
        trace_io::export_trace(&dir, config, &defense, &trace)?;
        println!("wrote {}", dir.display());
        written.push(dir);
    }
    Ok(written)
}

/// `attack <trace-dir> <config>`: model and data come from the trace's own
/// config; attacks, evaluation, τ and output location from `config`.
pub fn attack_trace(trace_dir: &Path, config: &ExperimentConfig, exec: Execution) -> CliResult<Vec<ResultRow>> {
    let (manifest, trace) = trace_io::load_trace(trace_dir)?;
    let session = Session::new(&manifest.config, exec)?;
    let rounds = if config.evaluation.rounds.is_empty() {
        vec![trace
            .rounds()
            .map(|r| r.round)
            .max()
            .ok_or_else(|| CliError::Config(format!("{}: trace holds no rounds", trace_dir.display())))?]
    } else {
        config.evaluation.rounds.clone()
    };
    let mut eval_config = manifest.config.clone();
    eval_config.attacks = config.attacks.clone();
    eval_config.evaluation = config.evaluation.clone();
    eval_config.tau = config.tau;
    eval_config.output_dir = config.output_dir.clone();

    output::create_dir(&eval_config.output_dir)?;
    let mut outputs = Vec::new();
    let rows = evaluate_trace(&session, &eval_config, &trace, &manifest.defense, &rounds, &mut outputs)?;
    output::write_csv(&eval_config.output_dir.join("results.csv"), &rows)?;
    outputs.push("results.csv".into());
    write_manifest("attack", &eval_config, Some(trace_dir), &outputs)?;
    print_rows(&rows);
    Ok(rows)
}

#[derive(Serialize)]
struct ScanCsvRow {
    n: usize,
    m: usize,
    p: usize,
    mean_residual: f64,
    auc: f64,
}

/// `scan-boundary`: writes the boundary CSV and returns the sharp p_max.
pub fn scan_boundary(
    n: usize,
    m: usize,
    p_values: &[usize],
    trials: usize,
    seed: u64,
    out: &Path,
    exec: Execution,
) -> CliResult<Option<usize>> {
    if p_values.is_empty() {
        return Err(CliError::Config("p range is empty".into()));
    }
    if n < 2 || m == 0 || trials == 0 || p_values.contains(&0) {
        return Err(CliError::Config(
            "scan needs n >= 2, m >= 1, trials >= 1 and p >= 1".into(),
        ));
    }
    let rows = theory::empirical_boundary_scan(n, m, p_values, trials, seed, exec)?;
    let csv_rows: Vec<ScanCsvRow> = rows
        .iter()
        .map(|r| ScanCsvRow {
            n: r.n,
            m: r.m,
            p: r.p,
            mean_residual: r.mean_residual,
            auc: r.auc,
        })
        .collect();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        output::create_dir(parent)?;
    }
    output::write_csv(out, &csv_rows)?;
    Ok(theory::sharp_p_max(&rows, 1e-8))
}
