//! FedSGD simulation: partitioning, per-round local gradients, server
//! aggregation, and the full trace that history-dependent attacks read.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::defenses::DefenseConfig;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{self, FrozenBackbone, GradientUpdate, TrainableParams};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rounds: usize,
    pub seed: u64,
    #[serde(default)]
    pub defense: Option<DefenseConfig>,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::validation("num_clients must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if self.rounds == 0 {
            return Err(Error::validation("rounds must be at least 1"));
        }
        if let Some(d) = &self.defense {
            d.validate()?;
        }
        Ok(())
    }
}

/// Uniform random partition into `k` disjoint sets whose sizes differ by at most one.
pub fn partition_data(ids: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > ids.len() {
        return Err(Error::validation(format!(
            "cannot partition {} samples among {k} clients",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng::stream(seed, &[rng::TAG_PARTITION]));
    let base = ids.len() / k;
    let extra = ids.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut rest = shuffled.as_slice();
    for c in 0..k {
        let (head, tail) = rest.split_at(base + usize::from(c < extra));
        let mut part = head.to_vec();
        part.sort_unstable();
        out.push(part);
        rest = tail;
    }
    Ok(out)
}

/// Draws batches without replacement, reshuffling at every epoch boundary.
/// A partial batch at the end of an epoch is dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(pool: Vec<usize>, seed: u64, client: usize) -> Self {
        Self {
            order: Vec::new(),
            cursor: 0,
            pool,
            rng: rng::stream(seed, &[rng::TAG_SAMPLER, client as u64]),
        }
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<Vec<usize>> {
        if batch_size > self.pool.len() {
            return Err(Error::validation(format!(
                "batch size {batch_size} exceeds client partition of {}",
                self.pool.len()
            )));
        }
        if self.cursor + batch_size > self.order.len() {
            self.order = self.pool.clone();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + batch_size].to_vec();
        self.cursor += batch_size;
        Ok(batch)
    }
}

#[derive(Debug, Clone)]
pub struct ClientUpload {
    pub client: usize,
    /// Post-defense gradient, as the server sees it.
    pub update: GradientUpdate,
    /// Sample ids of the batch. Ground truth, never exposed to attacks.
    pub batch: Vec<usize>,
    /// Local mean loss on the batch, before defenses.
    pub loss: f64,
}

/// One client's local step: gradient of the trainable parameters on its
/// batch at the global parameters, with the defense applied before upload.
pub fn client_round(
    backbone: &FrozenBackbone,
    global: &TrainableParams,
    dataset: &Dataset,
    batch: &[usize],
    round: usize,
    client: usize,
    defense: Option<&DefenseConfig>,
) -> Result<ClientUpload> {
    let (seqs, labels) = dataset.tokens_and_labels(batch);
    let (loss, mut update) = model::loss_and_gradients(backbone, global, &seqs, &labels)?;
    update.round = round;
    update.client = client;
    if let Some(d) = defense {
        update = d.apply(&update)?;
    }
    Ok(ClientUpload {
        client,
        update,
        batch: batch.to_vec(),
        loss,
    })
}

/// `θ ← θ − (η/K)·Σ_k g_k`, summed in ascending client-id order.
pub fn aggregate_and_step(
    global: &TrainableParams,
    updates: &[&GradientUpdate],
    learning_rate: f64,
) -> Result<TrainableParams> {
    if updates.is_empty() {
        return Err(Error::validation("no updates to aggregate"));
    }
    let mut ordered: Vec<&GradientUpdate> = updates.to_vec();
    ordered.sort_by_key(|u| u.client);
    let step = learning_rate / ordered.len() as f64;

    let mut next = global.clone();
    let keys: Vec<String> = global.tensors().keys().cloned().collect();
    for key in keys {
        let mut sum: Option<crate::linalg::Matrix> = None;
        for u in &ordered {
            let g = u.get(&key).ok_or_else(|| {
                Error::validation(format!("client {} update lacks {key}", u.client))
            })?;
            match sum.as_mut() {
                None => sum = Some(g.clone()),
                Some(s) => s.add_assign(g)?,
            }
        }
        let mut sum = sum.expect("at least one update");
        let theta = next.tensor_mut(&key).expect("key from tensors()");
        if theta.shape() != sum.shape() {
            return Err(Error::validation(format!(
                "{key}: parameter {:?} vs gradient {:?}",
                theta.shape(),
                sum.shape()
            )));
        }
        if sum.as_slice().iter().all(|&v| v == 0.0) {
            continue;
        }
        sum.scale(step);
        *theta = theta.sub(&sum)?;
    }
    for u in &ordered {
        if let Some(extra) = u.per_module.keys().find(|k| !global.tensors().contains_key(k.as_str())) {
            return Err(Error::validation(format!("update carries unknown parameter {extra}")));
        }
    }
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    /// θ^round: the parameters every client used in this round.
    pub global: TrainableParams,
    pub uploads: Vec<ClientUpload>,
}

impl RoundRecord {
    pub fn upload(&self, client: usize) -> Option<&ClientUpload> {
        self.uploads.iter().find(|u| u.client == client)
    }

    pub fn retain_clients(&mut self, clients: &[usize]) {
        self.uploads.retain(|u| clients.contains(&u.client));
    }

    pub fn mean_loss(&self) -> f64 {
        self.uploads.iter().map(|u| u.loss).sum::<f64>() / self.uploads.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainingTrace {
    pub config: FederationConfig,
    pub partitions: Vec<Vec<usize>>,
    rounds: BTreeMap<usize, RoundRecord>,
    pub final_params: TrainableParams,
}

impl TrainingTrace {
    pub fn from_parts(
        config: FederationConfig,
        partitions: Vec<Vec<usize>>,
        rounds: Vec<RoundRecord>,
        final_params: TrainableParams,
    ) -> Self {
        Self {
            config,
            partitions,
            rounds: rounds.into_iter().map(|r| (r.round, r)).collect(),
            final_params,
        }
    }

    pub fn round(&self, round: usize) -> Option<&RoundRecord> {
        self.rounds.get(&round)
    }

    pub fn round_mut(&mut self, round: usize) -> Option<&mut RoundRecord> {
        self.rounds.get_mut(&round)
    }

    pub fn rounds(&self) -> impl Iterator<Item = &RoundRecord> {
        self.rounds.values()
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    /// Drops every round not listed.
    pub fn retain_rounds(&mut self, keep: &[usize]) {
        self.rounds.retain(|r, _| keep.contains(r));
    }

    /// Ground-truth batch of a client in a round (evaluation harness only).
    pub fn batch(&self, round: usize, client: usize) -> Option<&[usize]> {
        self.round(round)?.upload(client).map(|u| u.batch.as_slice())
    }

    pub fn partition_of(&self, client: usize) -> Option<&[usize]> {
        self.partitions.get(client).map(Vec::as_slice)
    }
}

/// Runs FedSGD for `config.rounds` rounds. Client steps within a round run
/// through `exec`; aggregation is sequential in client-id order.
pub fn run_training(
    config: &FederationConfig,
    backbone: &FrozenBackbone,
    dataset: &Dataset,
    init: TrainableParams,
    exec: Execution,
) -> Result<TrainingTrace> {
    config.validate()?;
    let partitions = partition_data(&dataset.train_ids, config.num_clients, config.seed)?;
    let mut samplers: Vec<BatchSampler> = partitions
        .iter()
        .enumerate()
        .map(|(c, p)| BatchSampler::new(p.clone(), config.seed, c))
        .collect();

    let mut global = init;
    let mut rounds = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let batches = samplers
            .iter_mut()
            .map(|s| s.next_batch(config.batch_size))
            .collect::<Result<Vec<_>>>()?;
        let uploads = exec.try_map(config.num_clients, |c| {
            client_round(
                backbone,
                &global,
                dataset,
                &batches[c],
                round,
                c,
                config.defense.as_ref(),
            )
        })?;
        let refs: Vec<&GradientUpdate> = uploads.iter().map(|u| &u.update).collect();
        let next = aggregate_and_step(&global, &refs, config.learning_rate)?;
        rounds.push(RoundRecord {
            round,
            global: std::mem::replace(&mut global, next),
            uploads,
        });
    }
    Ok(TrainingTrace::from_parts(config.clone(), partitions, rounds, global))
}
