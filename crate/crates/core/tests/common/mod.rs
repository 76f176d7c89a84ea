#![allow(dead_code)]

use projres_core::data::{self, Dataset, SyntheticSpec};
use projres_core::federation::{self, FederationConfig, TrainingTrace};
use projres_core::model::{BackboneConfig, FrozenBackbone, ModuleKind, ModuleSpec, TrainableParams};
use projres_core::Execution;

pub fn backbone_config(n: usize, layers: usize) -> BackboneConfig {
    BackboneConfig {
        vocab_size: 200,
        hidden_dim: n,
        num_frozen_layers: layers,
        seed: 7,
        anisotropy: 1.5,
        context_weight: 1.0,
    }
}

pub fn adapter(position: usize) -> ModuleSpec {
    ModuleSpec {
        kind: ModuleKind::AdapterDown { ratio: 2.0 },
        position,
    }
}

pub struct Toy {
    pub backbone: FrozenBackbone,
    pub dataset: Dataset,
    pub init: TrainableParams,
    pub config: FederationConfig,
}

pub fn lora(position: usize) -> ModuleSpec {
    ModuleSpec {
        kind: ModuleKind::Lora { rank_ratio: 2.0 },
        position,
    }
}

/// Small federation: n=16, LoRA m=8, 6 clients, batches of 2 sequences of 1–3 tokens.
pub fn small_toy(rounds: usize) -> Toy {
    let bc = backbone_config(16, 2);
    let backbone = FrozenBackbone::build(&bc).unwrap();
    let dataset = data::synthetic(
        &SyntheticSpec {
            seed: 3,
            num_samples: 90,
            num_holdout: 30,
            min_len: 1,
            max_len: 3,
            num_classes: 2,
        },
        bc.vocab_size,
    )
    .unwrap();
    let init = TrainableParams::init(&bc, &[lora(1)], 2, 5).unwrap();
    let config = FederationConfig {
        num_clients: 6,
        batch_size: 2,
        learning_rate: 0.1,
        rounds,
        seed: 9,
        defense: None,
    };
    Toy {
        backbone,
        dataset,
        init,
        config,
    }
}

impl Toy {
    pub fn train(&self, exec: Execution) -> TrainingTrace {
        federation::run_training(&self.config, &self.backbone, &self.dataset, self.init.clone(), exec).unwrap()
    }
}
