//! Cascaded multi-level supervision.
//!
//! An MLS block has two stages. Stage one concatenates a residual path `K`
//! and a pointwise path `F` and predicts heatmaps at the feature scale; a
//! 1x1 projection folds the concatenation back into the stream. Stage two adds
//! an up-then-down path `M` (whose 2x activation feeds the large-scale head)
//! and a down-then-up path `N` to the identity. Two blocks chained form one
//! CMLS module.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::nn::{ConvBnRelu, ConvParam, Ctx, ParamBuilder, Residual};
use crate::ops::Resize;

/// Init scale of heatmap predictors, keeping initial outputs near the
/// (small) target magnitude.
pub const PREDICT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct MlsParams {
    pub k_residual: Residual,
    pub k_conv: ConvBnRelu,
    pub f_branch: [ConvParam; 2],
    pub project: ConvParam,
    pub m_deconv: ConvParam,
    pub m_residual: Residual,
    pub m_conv: ConvBnRelu,
    pub n_branch: [ConvParam; 2],
    pub predict_small: ConvParam,
    pub predict_large: ConvParam,
}

impl MlsParams {
    pub fn build(b: &mut ParamBuilder<'_>, width: usize, keypoints: usize) -> Self {
        let w = width;
        MlsParams {
            k_residual: b.residual("k_res", w, w),
            k_conv: b.conv_bn_relu("k_conv", w, w, 3),
            f_branch: [
                b.conv("f1", w, w, 1, 1, 0, true),
                b.conv("f2", w, w, 1, 1, 0, true),
            ],
            // Residual-branch outputs start at zero so a fresh block is the identity.
            project: b.conv_with_gain("project", 2 * w, w, 1, 1, 0, true, 0.0),
            m_deconv: b.deconv("m_deconv", w, w, 4, 2, 1),
            m_residual: b.residual("m_res", w, w),
            m_conv: b.conv_bn_relu("m_conv", w, w, 3),
            n_branch: [
                b.conv("n1", w, w, 1, 1, 0, true),
                b.conv_with_gain("n2", w, w, 1, 1, 0, true, 0.0),
            ],
            predict_small: b.conv_with_gain(
                "predict_small",
                2 * w,
                keypoints,
                1,
                1,
                0,
                true,
                PREDICT_GAIN,
            ),
            predict_large: b.conv_with_gain(
                "predict_large",
                w,
                keypoints,
                1,
                1,
                0,
                true,
                PREDICT_GAIN,
            ),
        }
    }
}

/// One supervised heatmap prediction living on the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionHead {
    pub heatmap: Var,
    /// Output stride relative to the input image.
    pub scale: usize,
    pub loss: Var,
    pub stage_id: String,
}

impl SupervisionHead {
    pub fn supervise(
        ctx: &mut Ctx<'_>,
        heatmap: Var,
        target: &Heatmap,
        stage_id: impl Into<String>,
    ) -> Result<Self> {
        let loss = ctx.tape.mse_loss(heatmap, &target.maps, &target.mask)?;
        Ok(SupervisionHead {
            heatmap,
            scale: target.stride,
            loss,
            stage_id: stage_id.into(),
        })
    }

    pub fn loss_value(&self, ctx: &Ctx<'_>) -> f64 {
        ctx.value(self.loss).item()
    }

    pub fn to_heatmap(&self, ctx: &Ctx<'_>) -> Heatmap {
        Heatmap::prediction(ctx.value(self.heatmap).clone(), self.scale)
    }
}

pub fn k_path(ctx: &mut Ctx<'_>, o: Var, p: &MlsParams) -> Result<Var> {
    let y = p.k_residual.forward(ctx, o)?;
    p.k_conv.forward(ctx, y)
}

pub fn f_path(ctx: &mut Ctx<'_>, o: Var, p: &MlsParams) -> Result<Var> {
    let y = p.f_branch[0].forward(ctx, o)?;
    p.f_branch[1].forward(ctx, y)
}

/// Returns `(output, 2x-resolution activation)`.
pub fn m_path(ctx: &mut Ctx<'_>, o: Var, p: &MlsParams) -> Result<(Var, Var)> {
    let up = p.m_deconv.forward_transposed(ctx, o)?;
    let y = p.m_residual.forward(ctx, up)?;
    let large = p.m_conv.forward(ctx, y)?;
    let down = ctx.tape.resize(large, Resize::MaxPoolDown2)?;
    Ok((down, large))
}

pub fn n_path(ctx: &mut Ctx<'_>, o: Var, p: &MlsParams) -> Result<Var> {
    let y = p.n_branch[0].forward(ctx, o)?;
    let y = ctx.tape.resize(y, Resize::MaxPoolDown2)?;
    let y = p.n_branch[1].forward(ctx, y)?;
    ctx.tape.resize(y, Resize::NearestUp2)
}

/// Concatenation of the `K` and `F` paths plus the small-scale head read from it.
pub fn mls_stage1(
    ctx: &mut Ctx<'_>,
    o: Var,
    p: &MlsParams,
    target_small: &Heatmap,
    stage_id: &str,
) -> Result<(Var, SupervisionHead)> {
    let k = k_path(ctx, o, p)?;
    let f = f_path(ctx, o, p)?;
    let next = ctx.tape.concat_channels(&[k, f])?;
    let heat = p.predict_small.forward(ctx, next)?;
    let head = SupervisionHead::supervise(ctx, heat, target_small, format!("{stage_id}.small"))?;
    Ok((next, head))
}

/// Folds the stage-one concatenation back to stream width, residually.
pub fn mls_project(ctx: &mut Ctx<'_>, o: Var, stage1: Var, p: &MlsParams) -> Result<Var> {
    let proj = p.project.forward(ctx, stage1)?;
    ctx.tape.add(o, proj)
}

/// Identity plus the `M` and `N` paths, with the large-scale head.
pub fn mls_stage2(
    ctx: &mut Ctx<'_>,
    o: Var,
    p: &MlsParams,
    target_large: &Heatmap,
    stage_id: &str,
) -> Result<(Var, SupervisionHead)> {
    let expected = ctx.tape.shape(o);
    let (m, large) = m_path(ctx, o, p)?;
    let n = n_path(ctx, o, p)?;
    for (path, v) in [("M path", m), ("N path", n)] {
        let found = ctx.tape.shape(v);
        if found != expected {
            return Err(Error::PathShapeMismatch {
                path,
                expected,
                found,
            });
        }
    }
    let sum = ctx.tape.add(o, m)?;
    let next = ctx.tape.add(sum, n)?;
    let heat = p.predict_large.forward(ctx, large)?;
    let head = SupervisionHead::supervise(ctx, heat, target_large, format!("{stage_id}.large"))?;
    Ok((next, head))
}

/// Stage one, projection, stage two. Returns the heads in (small, large) order.
pub fn mls_block(
    ctx: &mut Ctx<'_>,
    o: Var,
    p: &MlsParams,
    small: &Heatmap,
    large: &Heatmap,
    stage_id: &str,
) -> Result<(Var, [SupervisionHead; 2])> {
    let (cat, h1) = mls_stage1(ctx, o, p, small, stage_id)?;
    let mid = mls_project(ctx, o, cat, p)?;
    let (out, h2) = mls_stage2(ctx, mid, p, large, stage_id)?;
    Ok((out, [h1, h2]))
}

/// Two chained MLS blocks. `targets` are (small, large) for the first block
/// followed by (small, large) for the second.
pub fn cmls_forward(
    ctx: &mut Ctx<'_>,
    o: Var,
    p1: &MlsParams,
    p2: &MlsParams,
    targets: [&Heatmap; 4],
    stage_id: &str,
) -> Result<(Var, [SupervisionHead; 4])> {
    let (mid, [a, b]) = mls_block(
        ctx,
        o,
        p1,
        targets[0],
        targets[1],
        &format!("{stage_id}.mls1"),
    )?;
    let (out, [c, d]) = mls_block(
        ctx,
        mid,
        p2,
        targets[2],
        targets[3],
        &format!("{stage_id}.mls2"),
    )?;
    Ok((out, [a, b, c, d]))
}
