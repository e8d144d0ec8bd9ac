//! Adam and the single training step.

use crate::error::{Error, Result};
use crate::heatmap::KeypointSet;
use crate::model::{gmscenet_forward, total_loss, Model, Targets};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Adam moments for every trainable parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub ids: Vec<ParamId>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn adam(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        let zeros = || {
            ids.iter()
                .map(|&id| Tensor::zeros(store.get(id).shape()))
                .collect()
        };
        OptimState {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
            ids,
        }
    }

    /// One bias-corrected update. `grads[i]` belongs to `self.ids[i]`;
    /// `None` means the parameter took no part in the loss.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != self.ids.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.ids.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.get_mut(self.ids[i]).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// A stacked image batch with its keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub keypoints: Vec<KeypointSet>,
}

/// Forward in training mode, total loss, backward and an Adam update.
/// Returns the loss before the update.
pub fn train_step(model: &mut Model, opt: &mut OptimState, batch: &Batch) -> Result<f64> {
    model.check_input(&batch.images)?;
    let targets = Targets::render(&batch.keypoints, &model.config)?;
    let weights = model.config.head_weights.clone();
    let (loss, grads) = {
        let mut ctx = Ctx::new(&mut model.store, true);
        let x = ctx.input(batch.images.clone());
        let out = gmscenet_forward(&mut ctx, x, &model.params, &targets)?;
        let heads = out.all_heads();
        if let Some(bad) = heads.iter().find(|h| !h.loss_value(&ctx).is_finite()) {
            return Err(Error::NonFiniteLoss {
                head: bad.stage_id.clone(),
            });
        }
        let total = total_loss(&mut ctx, &heads, &weights)?;
        let loss = ctx.value(total).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                head: "total".into(),
            });
        }
        ctx.backward(total)?;
        let grads: Vec<Option<Vec<f64>>> = opt
            .ids
            .iter()
            .map(|&id| ctx.param_grad(id).map(<[f64]>::to_vec))
            .collect();
        (loss, grads)
    };
    opt.update(&mut model.store, &grads)?;
    Ok(loss)
}
