//! Inference, multi-level keypoint aggregation over a forward pass, and
//! evaluation reports.

use crate::config::{AggregateMode, EvalConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::heatmap::{decode_argmax, Heatmap, KeypointSet, PART_NAMES};
use crate::metrics::{
    mlka_aggregate, mlka_aggregate_heatmaps, oks, pck, pck_curve, rmse, threshold_grid,
    CandidateLevel, CandidateSet, OksConfig, PckCurve, PckScores,
};
use crate::model::{gmscenet_forward, Model, Targets};
use crate::nn::Ctx;
use crate::tensor::Tensor;
use crate::train::make_batch;

/// Part names for `k` keypoints: the fixed names when `k` matches them.
pub fn part_names(k: usize) -> Vec<String> {
    if k == PART_NAMES.len() {
        PART_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|i| format!("kp{i}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Decoded from the reference head alone.
    pub reference: KeypointSet,
    /// After aggregation across heads.
    pub aggregated: KeypointSet,
    pub candidates: CandidateSet,
}

pub fn oks_config(model: &Model, eval: &EvalConfig) -> OksConfig {
    let c = &model.config;
    OksConfig::for_image(
        c.input_w,
        c.input_h,
        c.keypoints,
        eval.oks_k_factor,
        eval.mlka_threshold,
    )
}

/// Inference-mode forward on a batch. Every K-channel head (and the combined
/// mixer heatmap) becomes one candidate level.
pub fn predict(model: &mut Model, images: &Tensor, eval: &EvalConfig) -> Result<Vec<Prediction>> {
    model.check_input(images)?;
    let n = images.shape().n;
    let oks_cfg = oks_config(model, eval);
    let targets = Targets::unsupervised(n, &model.config);
    let mut ctx = Ctx::new(&mut model.store, false);
    let x = ctx.input(images.clone());
    let out = gmscenet_forward(&mut ctx, x, &model.params, &targets)?;
    let reference_id = out.reference().stage_id.clone();
    let mut levels: Vec<(String, Heatmap)> = out
        .stack_heads
        .iter()
        .map(|h| (h.stage_id.clone(), h.to_heatmap(&ctx)))
        .collect();
    if let Some(v) = out.scm_heatmap {
        levels.push((
            "scm".into(),
            Heatmap::prediction(ctx.value(v).clone(), targets.small.stride),
        ));
    }
    levels.extend(
        out.final_heads
            .iter()
            .map(|h| (h.stage_id.clone(), h.to_heatmap(&ctx))),
    );
    let decoded: Vec<Vec<KeypointSet>> = levels.iter().map(|(_, h)| decode_argmax(h)).collect();
    (0..n)
        .map(|i| {
            let candidates = CandidateSet {
                levels: levels
                    .iter()
                    .zip(&decoded)
                    .map(|((id, h), kps)| CandidateLevel {
                        stage_id: id.clone(),
                        scale: h.stride,
                        keypoints: kps[i].clone(),
                        heatmap: Some(Heatmap::prediction(h.maps.sample(i), h.stride)),
                        reference: *id == reference_id,
                    })
                    .collect(),
            };
            let reference = candidates.reference()?.keypoints.clone();
            let aggregated = match eval.mlka_mode {
                AggregateMode::Coordinates => mlka_aggregate(&candidates, &oks_cfg)?,
                AggregateMode::Heatmaps => mlka_aggregate_heatmaps(&candidates, &oks_cfg)?,
            };
            Ok(Prediction {
                reference,
                aggregated,
                candidates,
            })
        })
        .collect()
}

/// [`predict`] over samples in chunks of `batch`.
pub fn predict_samples(
    model: &mut Model,
    samples: &[Sample],
    eval: &EvalConfig,
    batch: usize,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        out.extend(predict(model, &make_batch(&refs)?.images, eval)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodScores {
    pub method: &'static str,
    pub rmse: f64,
    pub mean_oks: f64,
    pub pck: PckScores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub images: usize,
    pub pck_threshold: f64,
    pub parts: Vec<String>,
    /// `final` first, then `mlka` when aggregation is enabled.
    pub rows: Vec<MethodScores>,
}

fn score(
    method: &'static str,
    preds: &[KeypointSet],
    gts: &[KeypointSet],
    eval: &EvalConfig,
    oks_cfg: &OksConfig,
) -> Result<MethodScores> {
    let mut oks_sum = 0.0;
    let mut oks_n = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        match oks(p, g, oks_cfg) {
            Ok(v) => {
                oks_sum += v;
                oks_n += 1;
            }
            Err(Error::NoVisibleKeypoints) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(MethodScores {
        method,
        rmse: rmse(preds, gts)?,
        mean_oks: if oks_n == 0 {
            f64::NAN
        } else {
            oks_sum / oks_n as f64
        },
        pck: pck(preds, gts, eval.pck_threshold, eval.pck_norm)?,
    })
}

pub fn evaluate_predictions(
    preds: &[Prediction],
    gts: &[KeypointSet],
    eval: &EvalConfig,
    oks_cfg: &OksConfig,
) -> Result<EvalReport> {
    let reference: Vec<KeypointSet> = preds.iter().map(|p| p.reference.clone()).collect();
    let mut rows = vec![score("final", &reference, gts, eval, oks_cfg)?];
    if eval.mlka {
        let aggregated: Vec<KeypointSet> = preds.iter().map(|p| p.aggregated.clone()).collect();
        rows.push(score("mlka", &aggregated, gts, eval, oks_cfg)?);
    }
    Ok(EvalReport {
        images: gts.len(),
        pck_threshold: eval.pck_threshold,
        parts: part_names(gts.first().map_or(0, |g| g.len())),
        rows,
    })
}

pub fn evaluate(
    model: &mut Model,
    samples: &[Sample],
    eval: &EvalConfig,
    batch: usize,
) -> Result<EvalReport> {
    let preds = predict_samples(model, samples, eval, batch)?;
    let gts: Vec<KeypointSet> = samples.iter().map(|s| s.keypoints.clone()).collect();
    evaluate_predictions(&preds, &gts, eval, &oks_config(model, eval))
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&MethodScores> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// `method,images,rmse,mean_oks,pck_threshold,pck_mean,pck_<part>...`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,images,rmse,mean_oks,pck_threshold,pck_mean");
        for p in &self.parts {
            s.push_str(&format!(",pck_{p}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                r.method, self.images, r.rmse, r.mean_oks, self.pck_threshold, r.pck.mean
            ));
            for v in &r.pck.per_part {
                match v {
                    Some(v) => s.push_str(&format!(",{v:.6}")),
                    None => s.push_str(",nan"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// PCK curve of the reference or aggregated predictions.
pub fn curve(preds: &[Prediction], gts: &[KeypointSet], eval: &EvalConfig) -> Result<PckCurve> {
    let chosen: Vec<KeypointSet> = preds
        .iter()
        .map(|p| {
            if eval.mlka {
                p.aggregated.clone()
            } else {
                p.reference.clone()
            }
        })
        .collect();
    pck_curve(
        &chosen,
        gts,
        eval.pck_norm,
        &threshold_grid(eval.curve_max, eval.curve_steps),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Supervision};
    use crate::data::synthetic_samples;

    fn tiny() -> ModelConfig {
        ModelConfig {
            stacks: 2,
            hourglass_depth: 1,
            width: 4,
            input_w: 32,
            input_h: 32,
            scm_width: 2,
            supervision: vec![Supervision::Plain, Supervision::Mls, Supervision::Cmls],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn levels_cover_every_multi_channel_head() {
        let mut model = Model::new(tiny()).unwrap();
        let samples = synthetic_samples(3, 32, 32, 1).unwrap();
        let preds = predict_samples(&mut model, &samples, &EvalConfig::default(), 2).unwrap();
        assert_eq!(preds.len(), 3);
        let ids: Vec<&str> = preds[0]
            .candidates
            .levels
            .iter()
            .map(|l| l.stage_id.as_str())
            .collect();
        assert_eq!(ids.len(), 1 + 2 + 1 + 4);
        assert!(ids.contains(&"scm"));
        let r = preds[0].candidates.reference().unwrap();
        assert_eq!(r.stage_id, *ids.last().unwrap());
        assert_eq!(r.scale, 2);
    }

    #[test]
    fn report_without_aggregation_is_the_reference_row() {
        let mut model = Model::new(tiny()).unwrap();
        let samples = synthetic_samples(4, 32, 32, 3).unwrap();
        let on = evaluate(&mut model, &samples, &EvalConfig::default(), 4).unwrap();
        let off_cfg = EvalConfig {
            mlka: false,
            ..EvalConfig::default()
        };
        let off = evaluate(&mut model, &samples, &off_cfg, 4).unwrap();
        assert_eq!(off.rows.len(), 1);
        assert_eq!(on.rows[0], off.rows[0]);
        let preds = predict_samples(&mut model, &samples, &off_cfg, 4).unwrap();
        let gts: Vec<KeypointSet> = samples.iter().map(|s| s.keypoints.clone()).collect();
        let reference: Vec<KeypointSet> = preds.iter().map(|p| p.reference.clone()).collect();
        assert_eq!(off.rows[0].pck, pck(&reference, &gts, 0.2, None).unwrap());
        let csv = on.to_csv();
        assert!(csv.starts_with("method,images,rmse,mean_oks,pck_threshold,pck_mean,pck_snout,pck_left_ear,pck_right_ear,pck_tail_base\nfinal,4,"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn heatmap_mode_runs() {
        let mut model = Model::new(tiny()).unwrap();
        let samples = synthetic_samples(2, 32, 32, 5).unwrap();
        let eval = EvalConfig {
            mlka_mode: AggregateMode::Heatmaps,
            ..EvalConfig::default()
        };
        let preds = predict_samples(&mut model, &samples, &eval, 2).unwrap();
        assert_eq!(preds[1].aggregated.len(), 4);
    }
}
