//! The full gradient verification suite: every differentiable op, the
//! context mixer, the multi-level supervision block, and the whole network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::cmls::{cmls_forward, MlsParams};
use crate::config::{ModelConfig, Supervision};
use crate::directionmax::Direction;
use crate::error::Result;
use crate::gradcheck::{grad_check_report, param_grad_check, sample_probes, GradCheckReport};
use crate::heatmap::{Heatmap, Keypoint, KeypointSet};
use crate::model::{gmscenet_forward, total_loss, Model, Targets};
use crate::nn::{ParamBuilder, ParamId, ParamStore};
use crate::ops::resize::Resize;
use crate::scm::{scm_forward, ScmConfig, ScmParams};
use crate::tensor::{Shape, Tensor};

pub const SUITE_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

type TapeFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Checks `f` with respect to each of `inputs` in turn, holding the others
/// fixed. The scalar is `sum(f(inputs) * weights)` unless `f` is already
/// scalar.
fn check_all(f: &TapeFn<'_>, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let out_shape = {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        t.shape(out)
    };
    let weights = (out_shape.numel() > 1).then(|| Tensor::uniform(out_shape, -1.0, 1.0, rng));
    let mut report = GradCheckReport::default();
    for j in 0..inputs.len() {
        let r = grad_check_report(
            |t, v| {
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, x)| if i == j { v } else { t.leaf(x.clone()) })
                    .collect();
                let out = f(t, &vs)?;
                match &weights {
                    Some(w) => {
                        let wv = t.leaf(w.clone());
                        let prod = t.mul(out, wv)?;
                        Ok(t.sum(prod))
                    }
                    None => Ok(out),
                }
            },
            &inputs[j],
            SUITE_EPS,
        )?;
        report = report.merge(r);
    }
    Ok(report)
}

fn uniform(s: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(s, -1.0, 1.0, rng)
}

fn op_cases(rng: &mut ChaCha8Rng) -> Result<Vec<SuiteEntry>> {
    let s = Shape::new(2, 3, 5, 4);
    let mut cases: Vec<(&str, Box<TapeFn<'_>>, Vec<Tensor>)> = vec![
        (
            "conv2d",
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
            vec![
                uniform(Shape::new(2, 3, 5, 6), rng),
                uniform(Shape::new(4, 3, 3, 3), rng),
                uniform(Shape::new(1, 4, 1, 1), rng),
            ],
        ),
        (
            "conv2d_strided",
            Box::new(|t, v| t.conv2d(v[0], v[1], None, 2, 1)),
            vec![
                uniform(Shape::new(2, 2, 7, 6), rng),
                uniform(Shape::new(3, 2, 3, 3), rng),
            ],
        ),
        (
            "transposed_conv2d",
            Box::new(|t, v| t.transposed_conv2d(v[0], v[1], Some(v[2]), 2, 1)),
            vec![
                uniform(Shape::new(2, 3, 3, 4), rng),
                uniform(Shape::new(2, 3, 4, 4), rng),
                uniform(Shape::new(1, 2, 1, 1), rng),
            ],
        ),
        (
            "relu",
            Box::new(|t, v| Ok(t.relu(v[0]))),
            vec![uniform(s, rng)],
        ),
        (
            "sigmoid",
            Box::new(|t, v| Ok(t.sigmoid(v[0]))),
            vec![uniform(s, rng)],
        ),
        (
            "neg",
            Box::new(|t, v| Ok(t.neg(v[0]))),
            vec![uniform(s, rng)],
        ),
        (
            "add",
            Box::new(|t, v| t.add(v[0], v[1])),
            vec![uniform(s, rng), uniform(s, rng)],
        ),
        (
            "mul",
            Box::new(|t, v| t.mul(v[0], v[1])),
            vec![uniform(s, rng), uniform(s, rng)],
        ),
        (
            "concat_channels",
            Box::new(|t, v| t.concat_channels(&[v[0], v[1]])),
            vec![uniform(s, rng), uniform(s.with_c(2), rng)],
        ),
        (
            "slice_channels",
            Box::new(|t, v| t.slice_channels(v[0], 1, 2)),
            vec![uniform(s, rng)],
        ),
        (
            "reshape",
            Box::new(|t, v| t.reshape(v[0], Shape::new(1, 6, 4, 5))),
            vec![uniform(s, rng)],
        ),
        (
            "concat_batch",
            Box::new(|t, v| {
                let cat = t.concat_batch(&[v[0], v[1]])?;
                t.slice_batch(cat, 1, 2)
            }),
            vec![uniform(s, rng), uniform(s, rng)],
        ),
        (
            "upsample_nearest",
            Box::new(|t, v| t.resize(v[0], Resize::NearestUp2)),
            vec![uniform(s, rng)],
        ),
        (
            "maxpool",
            Box::new(|t, v| t.resize(v[0], Resize::MaxPoolDown2)),
            vec![uniform(Shape::new(2, 3, 6, 4), rng)],
        ),
        (
            "batch_norm_train",
            Box::new(|t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|(y, _)| y)),
            vec![
                uniform(s, rng),
                uniform(Shape::new(1, 3, 1, 1), rng),
                uniform(Shape::new(1, 3, 1, 1), rng),
            ],
        ),
        (
            "batch_norm_eval",
            Box::new(|t, v| {
                t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)
            }),
            vec![
                uniform(s, rng),
                uniform(Shape::new(1, 3, 1, 1), rng),
                uniform(Shape::new(1, 3, 1, 1), rng),
            ],
        ),
        (
            "sum",
            Box::new(|t, v| Ok(t.sum(v[0]))),
            vec![uniform(s, rng)],
        ),
    ];
    for dir in Direction::ALL {
        let name = match dir {
            Direction::Top => "directionmax_top",
            Direction::Left => "directionmax_left",
            Direction::Bottom => "directionmax_bottom",
            Direction::Right => "directionmax_right",
        };
        cases.push((
            name,
            Box::new(move |t, v| Ok(t.directionmax(v[0], dir))),
            vec![uniform(Shape::new(2, 2, 5, 6), rng)],
        ));
    }
    let target = Tensor::uniform(s, 0.0, 1.0, rng);
    let mask = vec![true, false, true, true, true, false];
    cases.push((
        "mse_loss",
        Box::new(move |t, v| t.mse_loss(v[0], &target, &mask)),
        vec![uniform(s, rng)],
    ));

    let mut out = Vec::with_capacity(cases.len());
    for (name, f, inputs) in &cases {
        out.push(SuiteEntry {
            name: name.to_string(),
            report: check_all(f.as_ref(), inputs, rng)?,
        });
    }
    Ok(out)
}

fn scm_case(rng: &mut ChaCha8Rng, seed: u64) -> Result<SuiteEntry> {
    let mut store = ParamStore::new();
    let cfg = ScmConfig {
        in_channels: 6,
        width: 3,
        kernel: 3,
        iterations: 2,
        shared: false,
        message_gain: 0.1,
    };
    let params: Vec<ScmParams> = {
        let mut b = ParamBuilder::new(&mut store, seed, 0.9, 1e-5);
        (0..2)
            .map(|k| b.scoped(format!("kp{k}"), |b| ScmParams::build(b, &cfg)))
            .collect::<Result<_>>()?
    };
    // Batch norm over few cells is strongly curved, so the fixed finite-difference
    // step would measure curvature rather than gradient error.
    let xs = [
        uniform(Shape::new(2, 3, 8, 8), rng),
        uniform(Shape::new(2, 3, 8, 8), rng),
    ];
    let targets = Heatmap::prediction(Tensor::uniform(Shape::new(2, 2, 8, 8), 0.0, 1.0, rng), 4);
    let probes = sample_probes(&store, "", 40, rng);
    let report = param_grad_check(&mut store, &probes, SUITE_EPS, true, |ctx| {
        let vs: Vec<Var> = xs.iter().map(|x| ctx.input(x.clone())).collect();
        let out = scm_forward(ctx, &vs, &params, &targets)?;
        let losses = ctx.tape.add_all(&out.losses)?;
        let s = ctx.tape.sum(out.heatmaps);
        ctx.tape.add(losses, s)
    })?;
    Ok(SuiteEntry {
        name: "scm".into(),
        report,
    })
}

/// Zero-initialized weight tensors would hide every path behind them, so
/// they get small random values.
fn wake_zero_weights(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        if t.numel() > 4 && t.data().iter().all(|&v| v == 0.0) {
            *t = Tensor::uniform(t.shape(), -0.1, 0.1, rng);
        }
    }
}

fn cmls_case(rng: &mut ChaCha8Rng, seed: u64) -> Result<SuiteEntry> {
    let mut store = ParamStore::new();
    let ps: Vec<MlsParams> = {
        let mut b = ParamBuilder::new(&mut store, seed, 0.9, 1e-5);
        (0..2)
            .map(|i| b.scoped(format!("mls{i}"), |b| MlsParams::build(b, 4, 2)))
            .collect()
    };
    let heat = |rng: &mut ChaCha8Rng, hw: usize, stride: usize| {
        Heatmap::prediction(
            Tensor::uniform(Shape::new(2, 2, hw, hw), 0.0, 1.0, rng),
            stride,
        )
    };
    let (small, large) = (heat(rng, 8, 4), heat(rng, 16, 2));
    wake_zero_weights(&mut store, rng);
    let x = uniform(Shape::new(2, 4, 8, 8), rng);
    let probes = sample_probes(&store, "", 40, rng);
    let report = param_grad_check(&mut store, &probes, SUITE_EPS, true, |ctx| {
        let o = ctx.input(x.clone());
        let (out, heads) = cmls_forward(
            ctx,
            o,
            &ps[0],
            &ps[1],
            [&small, &large, &small, &large],
            "c",
        )?;
        let mut terms: Vec<Var> = heads.iter().map(|h| h.loss).collect();
        terms.push(ctx.tape.sum(out));
        ctx.tape.add_all(&terms)
    })?;
    Ok(SuiteEntry {
        name: "cmls".into(),
        report,
    })
}

/// A reduced but complete network: two stacks with cascaded supervision, the
/// context mixer, and final supervision.
pub fn suite_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        stacks: 2,
        hourglass_depth: 1,
        width: 4,
        input_w: 32,
        input_h: 32,
        scm_width: 2,
        supervision: vec![Supervision::Cmls; 3],
        seed,
        ..ModelConfig::default()
    }
}

fn model_case(rng: &mut ChaCha8Rng, seed: u64) -> Result<SuiteEntry> {
    let cfg = suite_model_config(seed);
    let mut model = Model::new(cfg.clone())?;
    wake_zero_weights(&mut model.store, rng);
    let images = Tensor::uniform(Shape::new(2, 1, 32, 32), 0.0, 1.0, rng);
    let kps: Vec<KeypointSet> = (0..2)
        .map(|_| {
            let parts = (0..cfg.keypoints)
                .map(|_| {
                    Keypoint::new(
                        rng.gen_range(4.0..27.0),
                        rng.gen_range(4.0..27.0),
                        rng.gen_bool(0.9),
                    )
                })
                .collect();
            KeypointSet::new(parts, 32, 32)
        })
        .collect();
    let targets = Targets::render(&kps, &cfg)?;
    let mut probes = Vec::new();
    for prefix in ["stem", "stack0", "stack1", "scm", "final"] {
        probes.extend(sample_probes(&model.store, prefix, 8, rng));
    }
    let params = model.params.clone();
    let report = param_grad_check(&mut model.store, &probes, SUITE_EPS, true, |ctx| {
        let x = ctx.input(images.clone());
        let out = gmscenet_forward(ctx, x, &params, &targets)?;
        total_loss(ctx, &out.all_heads(), &[])
    })?;
    Ok(SuiteEntry {
        name: "model".into(),
        report,
    })
}

/// Every case for one seed.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = op_cases(&mut rng)?;
    out.push(scm_case(&mut rng, seed)?);
    out.push(cmls_case(&mut rng, seed)?);
    out.push(model_case(&mut rng, seed)?);
    Ok(out)
}

pub fn worst(entries: &[SuiteEntry]) -> GradCheckReport {
    entries
        .iter()
        .fold(GradCheckReport::default(), |acc, e| acc.merge(e.report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_one_seed() {
        let entries = gradient_suite(0).unwrap();
        for e in &entries {
            assert!(e.report.probes > 0, "{} compared nothing", e.name);
            assert!(e.report.max_rel_error < 1e-4, "{}: {:?}", e.name, e.report);
        }
        assert!(entries.iter().any(|e| e.name == "model"));
    }
}
