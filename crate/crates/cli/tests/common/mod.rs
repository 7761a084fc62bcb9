#![allow(dead_code)]

use std::path::Path;

use charctl::{load_controller, scene};
use charctl_core::checkpoint;
use charctl_core::embed::{train_embedding, EmbedConfig};
use charctl_core::motion::{generate_synthetic_dataset, DatasetConfig};
use charctl_core::qa::BaselineCosineScorer;
use charctl_core::rl::{train_policy, LatentSource, TrainConfig};
use charctl_core::session::{Controller, Session};
use charctl_core::sim::EnvConfig;
use charctl_core::tasks::TaskKind;

pub fn tiny_train() -> TrainConfig {
    TrainConfig {
        n_envs: 4,
        steps_per_epoch: 8,
        epochs: 2,
        minibatches: 2,
        disc_batch: 32,
        ..Default::default()
    }
}

/// Writes a quickly trained (low quality) model directory.
pub fn tiny_models(dir: &Path) {
    let d = generate_synthetic_dataset(&DatasetConfig::default(), 0).unwrap();
    let cfg = EmbedConfig {
        epochs: 5,
        ..Default::default()
    };
    let (model, _) = train_embedding(&d, &cfg, 0, |_| {}).unwrap();
    checkpoint::embedding_checkpoint(&model)
        .save(&dir.join("embedding.json"))
        .unwrap();
    let src = LatentSource::Learned(model);
    for task in [TaskKind::Facing, TaskKind::Location, TaskKind::Strike] {
        let t = train_policy(Some(task), &d, &src, &tiny_train(), 1, |_| {}).unwrap();
        checkpoint::policy_checkpoint(&t, &src)
            .save(&dir.join(format!("{}.json", task.name())))
            .unwrap();
    }
}

pub fn controller(dir: &Path) -> Controller {
    let env = EnvConfig::default();
    load_controller(dir, &env.object_colors, Box::new(BaselineCosineScorer::default())).unwrap()
}

pub fn session(seed: u64) -> Session {
    Session::new(
        scene(&EnvConfig::default(), seed).unwrap(),
        "walk forward",
        "orient to face the red block",
    )
}
