//! The assembled network: stem, stacked hourglasses with per-stack
//! supervision, the per-keypoint mixers over the concatenated stack outputs,
//! and a final supervision block on the fused features.

use crate::autograd::Var;
use crate::cmls::{cmls_forward, mls_block, MlsParams, SupervisionHead, PREDICT_GAIN};
use crate::config::{ModelConfig, Supervision};
use crate::error::{Error, Result};
use crate::heatmap::{render_gaussian, Heatmap, KeypointSet};
use crate::nn::{ConvBnRelu, ConvParam, Ctx, ParamBuilder, ParamStore, Residual};
use crate::ops::Resize;
use crate::scm::{scm_forward, ScmConfig, ScmParams};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct StemParams {
    pub conv: ConvBnRelu,
    pub res1: Residual,
    pub res2: Residual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HourglassParams {
    pub up: Residual,
    pub down: Residual,
    pub inner: Box<HourglassInner>,
    pub after: Residual,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HourglassInner {
    Nested(HourglassParams),
    Bottom(Residual),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SupervisionParams {
    None,
    Plain(ConvParam),
    Mls(MlsParams),
    Cmls(MlsParams, MlsParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackParams {
    pub hourglass: HourglassParams,
    pub post_res: Residual,
    pub post_conv: ConvBnRelu,
    pub supervision: SupervisionParams,
    /// Re-projection of this stack's input into the next stack's input.
    pub reproject: Option<ConvParam>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerParams {
    pub per_keypoint: Vec<ScmParams>,
    /// Folds the keypoint latents back into the feature stream.
    pub fuse: ConvBnRelu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub stem: StemParams,
    pub stacks: Vec<StackParams>,
    pub mixer: Option<MixerParams>,
    pub final_supervision: SupervisionParams,
}

fn build_hourglass(b: &mut ParamBuilder<'_>, depth: usize, w: usize) -> HourglassParams {
    HourglassParams {
        up: b.residual("up", w, w),
        down: b.residual("down", w, w),
        inner: Box::new(if depth > 1 {
            HourglassInner::Nested(b.scoped("inner", |b| build_hourglass(b, depth - 1, w)))
        } else {
            HourglassInner::Bottom(b.residual("bottom", w, w))
        }),
        after: b.residual("after", w, w),
    }
}

fn build_supervision(
    b: &mut ParamBuilder<'_>,
    kind: Supervision,
    w: usize,
    k: usize,
) -> SupervisionParams {
    match kind {
        Supervision::None => SupervisionParams::None,
        Supervision::Plain => {
            SupervisionParams::Plain(b.conv_with_gain("predict", w, k, 1, 1, 0, true, PREDICT_GAIN))
        }
        Supervision::Mls => SupervisionParams::Mls(b.scoped("mls1", |b| MlsParams::build(b, w, k))),
        Supervision::Cmls => SupervisionParams::Cmls(
            b.scoped("mls1", |b| MlsParams::build(b, w, k)),
            b.scoped("mls2", |b| MlsParams::build(b, w, k)),
        ),
    }
}

impl ModelParams {
    pub fn build(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(store, cfg.seed, cfg.bn_momentum, cfg.bn_eps);
        let w = cfg.width;
        let k = cfg.keypoints;
        let stem = b.scoped("stem", |b| StemParams {
            conv: ConvBnRelu {
                conv: b.conv("conv", cfg.in_channels, w, 7, 2, 3, false),
                norm: b.norm("bn", w),
            },
            res1: b.residual("res1", w, w),
            res2: b.residual("res2", w, w),
        });
        let stacks = (0..cfg.stacks)
            .map(|i| {
                b.scoped(format!("stack{i}"), |b| StackParams {
                    hourglass: b
                        .scoped("hg", |b| build_hourglass(b, cfg.hourglass_depth.max(1), w)),
                    post_res: b.residual("post_res", w, w),
                    post_conv: b.conv_bn_relu("post_conv", w, w, 1),
                    supervision: b
                        .scoped("sup", |b| build_supervision(b, cfg.supervision[i], w, k)),
                    reproject: (i + 1 < cfg.stacks)
                        .then(|| b.conv("reproject", w, w, 1, 1, 0, true)),
                })
            })
            .collect();
        let mixer = if cfg.scm {
            let scm_cfg = ScmConfig {
                in_channels: w * cfg.stacks,
                width: cfg.scm_width,
                kernel: cfg.scm_kernel,
                iterations: cfg.scm_iterations,
                shared: cfg.scm_shared,
                message_gain: cfg.scm_message_gain,
            };
            Some(b.scoped("scm", |b| -> Result<MixerParams> {
                let per_keypoint = (0..k)
                    .map(|i| b.scoped(format!("kp{i}"), |b| ScmParams::build(b, &scm_cfg)))
                    .collect::<Result<_>>()?;
                Ok(MixerParams {
                    per_keypoint,
                    fuse: b.conv_bn_relu("fuse", k * cfg.scm_width, w, 1),
                })
            })?)
        } else {
            None
        };
        let final_supervision = b.scoped("final", |b| {
            build_supervision(b, cfg.supervision[cfg.stacks], w, k)
        });
        Ok(ModelParams {
            stem,
            stacks,
            mixer,
            final_supervision,
        })
    }
}

/// Heatmap targets at the two supervised scales.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// At the feature stride.
    pub small: Heatmap,
    /// At half the feature stride.
    pub large: Heatmap,
}

impl Targets {
    pub fn render(kps: &[KeypointSet], cfg: &ModelConfig) -> Result<Self> {
        let s = cfg.heatmap_stride;
        let (w, h) = (cfg.input_w / s, cfg.input_h / s);
        let at = |ow: usize, oh: usize, stride: usize| -> Result<Heatmap> {
            let maps = kps
                .iter()
                .map(|k| render_gaussian(k, ow, oh, cfg.sigma / stride as f64).map(|(m, _)| m))
                .collect::<Result<Vec<_>>>()?;
            Heatmap::stack(&maps)
        };
        Ok(Targets {
            small: at(w, h, s)?,
            large: at(2 * w, 2 * h, s / 2)?,
        })
    }

    /// All-masked targets for inference: losses evaluate to zero.
    pub fn unsupervised(n: usize, cfg: &ModelConfig) -> Self {
        let s = cfg.heatmap_stride;
        let (w, h, k) = (cfg.input_w / s, cfg.input_h / s, cfg.keypoints);
        let blank = |ow: usize, oh: usize, stride: usize| Heatmap {
            maps: Tensor::zeros(Shape::new(n, k, oh, ow)),
            stride,
            sigma: cfg.sigma / stride as f64,
            mask: vec![false; n * k],
        };
        Targets {
            small: blank(w, h, s),
            large: blank(2 * w, 2 * h, s / 2),
        }
    }
}

/// Every supervision head of one forward pass, grouped by where it sits.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub stack_heads: Vec<SupervisionHead>,
    /// One single-channel head per keypoint.
    pub scm_heads: Vec<SupervisionHead>,
    /// The K-channel concatenation of the mixer heads.
    pub scm_heatmap: Option<Var>,
    pub final_heads: Vec<SupervisionHead>,
    pub stack_outputs: Vec<Var>,
    pub features: Var,
}

impl ForwardOutput {
    /// Stack heads, mixer heads, then final heads.
    pub fn all_heads(&self) -> Vec<&SupervisionHead> {
        self.stack_heads
            .iter()
            .chain(&self.scm_heads)
            .chain(&self.final_heads)
            .collect()
    }

    /// The last-stage prediction: the last final head, or the last stack head
    /// when the final position is unsupervised.
    pub fn reference(&self) -> &SupervisionHead {
        self.final_heads
            .last()
            .or(self.stack_heads.last())
            .expect("validated configs have at least one K-channel head")
    }
}

pub fn stem_forward(ctx: &mut Ctx<'_>, x: Var, p: &StemParams) -> Result<Var> {
    let y = p.conv.forward(ctx, x)?;
    let y = p.res1.forward(ctx, y)?;
    let y = ctx.tape.resize(y, Resize::MaxPoolDown2)?;
    p.res2.forward(ctx, y)
}

fn hourglass_level(ctx: &mut Ctx<'_>, x: Var, p: &HourglassParams) -> Result<Var> {
    let up = p.up.forward(ctx, x)?;
    let low = ctx.tape.resize(x, Resize::MaxPoolDown2)?;
    let low = p.down.forward(ctx, low)?;
    let low = match p.inner.as_ref() {
        HourglassInner::Nested(inner) => hourglass_level(ctx, low, inner)?,
        HourglassInner::Bottom(r) => r.forward(ctx, low)?,
    };
    let low = p.after.forward(ctx, low)?;
    let low = ctx.tape.resize(low, Resize::NearestUp2)?;
    ctx.tape.add(up, low)
}

fn supervise(
    ctx: &mut Ctx<'_>,
    x: Var,
    p: &SupervisionParams,
    t: &Targets,
    stage: &str,
) -> Result<(Var, Vec<SupervisionHead>)> {
    Ok(match p {
        SupervisionParams::None => (x, Vec::new()),
        SupervisionParams::Plain(conv) => {
            let heat = conv.forward(ctx, x)?;
            (
                x,
                vec![SupervisionHead::supervise(
                    ctx,
                    heat,
                    &t.small,
                    format!("{stage}.plain"),
                )?],
            )
        }
        SupervisionParams::Mls(p) => {
            let (out, heads) = mls_block(ctx, x, p, &t.small, &t.large, &format!("{stage}.mls1"))?;
            (out, heads.into())
        }
        SupervisionParams::Cmls(p1, p2) => {
            let (out, heads) = cmls_forward(
                ctx,
                x,
                p1,
                p2,
                [&t.small, &t.large, &t.small, &t.large],
                stage,
            )?;
            (out, heads.into())
        }
    })
}

/// Runs the stem and every stack. Returns the per-stack outputs (after their
/// supervision blocks) and the heads.
pub fn hourglass_forward(
    ctx: &mut Ctx<'_>,
    image: Var,
    params: &ModelParams,
    targets: &Targets,
) -> Result<(Vec<Var>, Vec<SupervisionHead>)> {
    let mut input = stem_forward(ctx, image, &params.stem)?;
    let mut outputs = Vec::with_capacity(params.stacks.len());
    let mut heads = Vec::new();
    for (i, sp) in params.stacks.iter().enumerate() {
        let y = hourglass_level(ctx, input, &sp.hourglass)?;
        let y = sp.post_res.forward(ctx, y)?;
        let y = sp.post_conv.forward(ctx, y)?;
        let (out, h) = supervise(ctx, y, &sp.supervision, targets, &format!("stack{i}"))?;
        heads.extend(h);
        if let Some(re) = &sp.reproject {
            let skip = re.forward(ctx, input)?;
            input = ctx.tape.add(out, skip)?;
        }
        outputs.push(out);
    }
    Ok((outputs, heads))
}

pub fn gmscenet_forward(
    ctx: &mut Ctx<'_>,
    image: Var,
    params: &ModelParams,
    targets: &Targets,
) -> Result<ForwardOutput> {
    let (stack_outputs, stack_heads) = hourglass_forward(ctx, image, params, targets)?;
    let last = *stack_outputs.last().ok_or(Error::EmptyInput {
        op: "gmscenet_forward",
    })?;
    let (features, scm_heads, scm_heatmap) = match &params.mixer {
        Some(mixer) => {
            let out = scm_forward(ctx, &stack_outputs, &mixer.per_keypoint, &targets.small)?;
            let latents = out
                .states
                .iter()
                .map(|s| s.h_cg.ok_or(Error::UninitializedState))
                .collect::<Result<Vec<_>>>()?;
            let cat = ctx.tape.concat_channels(&latents)?;
            let fused = mixer.fuse.forward(ctx, cat)?;
            let features = ctx.tape.add(last, fused)?;
            let heads = out
                .per_keypoint
                .iter()
                .zip(&out.losses)
                .enumerate()
                .map(|(k, (&heatmap, &loss))| SupervisionHead {
                    heatmap,
                    scale: targets.small.stride,
                    loss,
                    stage_id: format!("scm.kp{k}"),
                })
                .collect();
            (features, heads, Some(out.heatmaps))
        }
        None => (last, Vec::new(), None),
    };
    let (features, final_heads) =
        supervise(ctx, features, &params.final_supervision, targets, "final")?;
    Ok(ForwardOutput {
        stack_heads,
        scm_heads,
        scm_heatmap,
        final_heads,
        stack_outputs,
        features,
    })
}

/// Weighted sum of head losses; empty `weights` means all ones.
pub fn total_loss(ctx: &mut Ctx<'_>, heads: &[&SupervisionHead], weights: &[f64]) -> Result<Var> {
    if heads.is_empty() {
        return Err(Error::EmptyInput { op: "total_loss" });
    }
    if !weights.is_empty() && weights.len() != heads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} heads",
            weights.len(),
            heads.len()
        )));
    }
    let mut terms = Vec::with_capacity(heads.len());
    for (i, h) in heads.iter().enumerate() {
        match weights.get(i) {
            Some(&w) if w != 1.0 => {
                let wv = ctx.input(Tensor::scalar(w));
                terms.push(ctx.tape.mul(h.loss, wv)?);
            }
            _ => terms.push(h.loss),
        }
    }
    ctx.tape.add_all(&terms)
}

/// A built network: config, parameters, and the layer structure over them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let params = ModelParams::build(&mut store, &config)?;
        Ok(Model {
            config,
            store,
            params,
        })
    }

    pub fn input_shape(&self, n: usize) -> Shape {
        Shape::new(
            n,
            self.config.in_channels,
            self.config.input_h,
            self.config.input_w,
        )
    }

    pub fn check_input(&self, images: &Tensor) -> Result<()> {
        let want = self.input_shape(images.shape().n);
        if images.shape() != want || want.n == 0 {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: images.shape(),
                rhs: want,
            });
        }
        Ok(())
    }
}
