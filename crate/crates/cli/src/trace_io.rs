//! On-disk training traces.
//!
//! ```text
//! <dir>/manifest.json            TraceManifest
//! <dir>/partitions.csv           client,samples
//! <dir>/batches.csv              round,client,loss,samples
//! <dir>/final.bin                final parameters
//! <dir>/round_<r>/global.bin     θ^r
//! <dir>/round_<r>/client_<c>.bin post-defense upload of client c
//! ```
//!
//! `.bin` files use the dump layout of `projres_core::dump`. Sample lists
//! are space-separated ids. Round directories may be deleted; loading
//! keeps whatever rounds remain.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use projres_core::defenses::DefenseConfig;
use projres_core::dump;
use projres_core::federation::{ClientUpload, RoundRecord, TrainingTrace};
use projres_core::linalg::Matrix;
use projres_core::model::{GradientUpdate, TrainableParams};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::output;

pub const TRACE_FORMAT: &str = "projres-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceManifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub defense: DefenseConfig,
    pub rounds: Vec<usize>,
    pub num_clients: usize,
    pub config: ExperimentConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct BatchRow {
    round: usize,
    client: usize,
    loss: f64,
    samples: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PartitionRow {
    client: usize,
    samples: String,
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_ids(s: &str) -> CliResult<Vec<usize>> {
    s.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| CliError::Config(format!("bad sample id {t:?} in trace")))
        })
        .collect()
}

fn round_dir(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("round_{round}"))
}

fn write_tensors(path: &Path, seed: u64, tensors: &BTreeMap<String, &Matrix>) -> CliResult<()> {
    let list: Vec<(&str, &Matrix)> = tensors.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let tmp = path.with_extension("part");
    let f = File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    dump::write_dump(BufWriter::new(f), seed, &list)?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn read_tensors(path: &Path) -> CliResult<Vec<(String, Matrix)>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(dump::read_dump(BufReader::new(f))?.1)
}

fn load_params(config: &ExperimentConfig, classes: usize, path: &Path) -> CliResult<TrainableParams> {
    let mut params = fresh_params(config, classes)?;
    let tensors = read_tensors(path)?;
    if tensors.len() != params.tensors().len() {
        return Err(CliError::Core(projres_core::Error::Format(format!(
            "{}: expected {} tensors, found {}",
            path.display(),
            params.tensors().len(),
            tensors.len()
        ))));
    }
    params.load_tensors(tensors.iter().map(|(k, m)| (k.as_str(), m)))?;
    Ok(params)
}

pub fn fresh_params(config: &ExperimentConfig, num_classes: usize) -> CliResult<TrainableParams> {
    Ok(TrainableParams::init(
        &config.backbone,
        &config.modules,
        num_classes,
        config.param_seed,
    )?)
}

pub fn export_trace(
    dir: &Path,
    config: &ExperimentConfig,
    defense: &DefenseConfig,
    trace: &TrainingTrace,
) -> CliResult<()> {
    output::create_dir(dir)?;
    let seed = config.federation.seed;
    let mut batches = Vec::new();
    for record in trace.rounds() {
        let rdir = round_dir(dir, record.round);
        output::create_dir(&rdir)?;
        write_tensors(&rdir.join("global.bin"), seed, &record.global.tensors())?;
        for u in &record.uploads {
            let tensors = u.update.per_module.iter().map(|(k, v)| (k.clone(), v)).collect();
            write_tensors(&rdir.join(format!("client_{}.bin", u.client)), seed, &tensors)?;
            batches.push(BatchRow {
                round: record.round,
                client: u.client,
                loss: u.loss,
                samples: join_ids(&u.batch),
            });
        }
    }
    write_tensors(&dir.join("final.bin"), seed, &trace.final_params.tensors())?;
    output::write_csv(&dir.join("batches.csv"), &batches)?;
    let partitions: Vec<PartitionRow> = trace
        .partitions
        .iter()
        .enumerate()
        .map(|(client, p)| PartitionRow {
            client,
            samples: join_ids(p),
        })
        .collect();
    output::write_csv(&dir.join("partitions.csv"), &partitions)?;
    let manifest = TraceManifest {
        format: TRACE_FORMAT.into(),
        version: TRACE_VERSION,
        config_hash: config.hash(),
        defense: *defense,
        rounds: trace.rounds().map(|r| r.round).collect(),
        num_clients: trace.partitions.len(),
        config: config.clone(),
    };
    output::write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_trace(dir: &Path) -> CliResult<(TraceManifest, TrainingTrace)> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| CliError::io(&mpath, e))?;
    let manifest: TraceManifest = serde_json::from_str(&text).map_err(|e| {
        CliError::Config(format!("{}:{}:{}: {e}", mpath.display(), e.line(), e.column()))
    })?;
    if manifest.format != TRACE_FORMAT || manifest.version != TRACE_VERSION {
        return Err(CliError::Config(format!(
            "{}: not a {TRACE_FORMAT} v{TRACE_VERSION} trace",
            mpath.display()
        )));
    }
    let config = &manifest.config;
    let classes = config.dataset.build(config.backbone.vocab_size)?.num_classes;

    let mut batch_of: BTreeMap<(usize, usize), (f64, Vec<usize>)> = BTreeMap::new();
    let mut reader = csv::Reader::from_path(dir.join("batches.csv"))?;
    for row in reader.deserialize() {
        let row: BatchRow = row?;
        batch_of.insert((row.round, row.client), (row.loss, parse_ids(&row.samples)?));
    }
    let mut partitions = vec![Vec::new(); manifest.num_clients];
    let mut reader = csv::Reader::from_path(dir.join("partitions.csv"))?;
    for row in reader.deserialize() {
        let row: PartitionRow = row?;
        let slot = partitions
            .get_mut(row.client)
            .ok_or_else(|| CliError::Config(format!("partition for unknown client {}", row.client)))?;
        *slot = parse_ids(&row.samples)?;
    }

    let mut rounds = Vec::new();
    for &round in &manifest.rounds {
        let rdir = round_dir(dir, round);
        if !rdir.is_dir() {
            continue;
        }
        let global = load_params(config, classes, &rdir.join("global.bin"))?;
        let mut uploads = Vec::new();
        for client in 0..manifest.num_clients {
            let path = rdir.join(format!("client_{client}.bin"));
            if !path.exists() {
                continue;
            }
            let (loss, batch) = batch_of.get(&(round, client)).cloned().ok_or_else(|| {
                CliError::Config(format!("batches.csv has no row for round {round} client {client}"))
            })?;
            uploads.push(ClientUpload {
                client,
                update: GradientUpdate {
                    per_module: read_tensors(&path)?.into_iter().collect(),
                    round,
                    client,
                },
                batch,
                loss,
            });
        }
        rounds.push(RoundRecord {
            round,
            global,
            uploads,
        });
    }
    let final_params = load_params(config, classes, &dir.join("final.bin"))?;
    let mut fed = config.federation.clone();
    fed.defense = Some(manifest.defense);
    let trace = TrainingTrace::from_parts(fed, partitions, rounds, final_params);
    Ok((manifest, trace))
}
