//! Epoch loop with seeded shuffling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{train_step, Batch, OptimState};
use crate::tensor::Tensor;

/// Stacks sample images into one batch.
pub fn make_batch(samples: &[&Sample]) -> Result<Batch> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    Ok(Batch {
        images: Tensor::stack(&images)?,
        keypoints: samples.iter().map(|s| s.keypoints.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

pub fn optimizer(model: &Model, cfg: &TrainConfig) -> OptimState {
    OptimState::adam(&model.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
}

/// Runs `cfg.epochs` epochs. Each epoch visits the samples in an order drawn
/// from a generator seeded with `seed`; the last batch may be short.
/// `on_epoch` sees each log as it completes.
pub fn fit(
    model: &mut Model,
    opt: &mut OptimState,
    samples: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput { op: "fit" });
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let picked: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            total += train_step(model, opt, &make_batch(&picked)?)?;
            steps += 1;
        }
        let log = EpochLog {
            epoch,
            mean_loss: total / steps as f64,
            steps,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// `epoch,steps,mean_loss` rows.
pub fn loss_log_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,steps,mean_loss\n");
    for l in logs {
        s.push_str(&format!("{},{},{:.6}\n", l.epoch, l.steps, l.mean_loss));
    }
    s
}
