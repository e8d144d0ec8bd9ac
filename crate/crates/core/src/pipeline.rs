//! Config-driven dataset assembly and training runs.

use crate::config::Config;
use crate::data::{load_annotations, split_assignments, synthetic_samples, Sample, Split};
use crate::error::Result;
use crate::model::Model;
use crate::optim::OptimState;
use crate::train::{fit, optimizer, EpochLog};

/// Offsets that derive independent streams from the one configured seed.
const SPLIT_STREAM: u64 = 0x5eed_0001;
const SHUFFLE_STREAM: u64 = 0x5eed_0002;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Datasets {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Datasets {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Loads the annotation file named by `train.data`, or generates
/// `train.samples` synthetic images at the model input size, then splits
/// with the configured fractions.
pub fn load_datasets(cfg: &Config) -> Result<Datasets> {
    let seed = cfg.model.seed;
    let fractions = [
        cfg.train.train_fraction,
        cfg.train.val_fraction,
        cfg.train.test_fraction,
    ];
    let samples = match &cfg.train.data {
        Some(path) => load_annotations(path)?.load_all()?,
        None => synthetic_samples(
            cfg.train.samples,
            cfg.model.input_w,
            cfg.model.input_h,
            seed,
        )?,
    };
    let splits = split_assignments(samples.len(), fractions, seed ^ SPLIT_STREAM)?;
    let mut out = Datasets::default();
    for (s, split) in samples.into_iter().zip(splits) {
        match split {
            Split::Train => out.train.push(s),
            Split::Val => out.val.push(s),
            Split::Test => out.test.push(s),
        }
    }
    Ok(out)
}

pub struct TrainedRun {
    pub model: Model,
    pub opt: OptimState,
    pub logs: Vec<EpochLog>,
}

/// Builds the model from `cfg` and trains it on `train`.
pub fn train_run(
    cfg: &Config,
    train: &[Sample],
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainedRun> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model.clone())?;
    let mut opt = optimizer(&model, &cfg.train);
    let logs = fit(
        &mut model,
        &mut opt,
        train,
        &cfg.train,
        cfg.model.seed ^ SHUFFLE_STREAM,
        on_epoch,
    )?;
    Ok(TrainedRun { model, opt, logs })
}
