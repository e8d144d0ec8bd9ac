//! Structured context mixer.
//!
//! One instance per keypoint. The concatenated stack outputs are refined by
//! five Conv-BN-ReLU heads: one gives the global observation, the other four
//! go through Topmax / Leftmax / Bottommax / Rightmax to give the directional
//! observations. Latent maps start at the observations and are refined by
//! gated mean-field steps where every message is a convolution:
//!
//! ```text
//! g~ = h_c * (varpi_c (x) h_cg)        a~ = h_c * (lambda_c (x) h_cg)
//! g^ = sigmoid(-(g~ + eta_c (x) a~))   a^ = sigmoid(-(a~ + eta_c (x) g~))
//! h_cg <- o_cg + sum_c g^ * (varpi_c (x) h_c) + sum_c a^ * (lambda_c (x) h_c)
//! h_c  <- o_c  + g^ * (varpi_c (x) h_cg) + a^ * (lambda_c (x) h_cg)
//! ```
//!
//! The final global latent map is projected to a single heatmap channel.

use crate::autograd::Var;
use crate::directionmax::Direction;
use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::nn::{conv_group, ConvBnRelu, ConvParam, Ctx, ParamBuilder};

/// Message kernels for the four directional branches.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet {
    pub lambda: [ConvParam; 4],
    pub varpi: [ConvParam; 4],
    pub eta: [ConvParam; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScmParams {
    /// Global head first, then Top, Left, Bottom, Right.
    pub heads: [ConvBnRelu; 5],
    /// One set when `shared`, otherwise one per iteration.
    pub kernels: Vec<KernelSet>,
    pub out_conv: ConvParam,
    pub iterations: usize,
    pub shared: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScmConfig {
    pub in_channels: usize,
    pub width: usize,
    pub kernel: usize,
    pub iterations: usize,
    pub shared: bool,
    /// Init scale of the message kernels; small values start the mixer near
    /// the identity map.
    pub message_gain: f64,
}

impl ScmParams {
    pub fn build(b: &mut ParamBuilder<'_>, cfg: &ScmConfig) -> Result<Self> {
        if cfg.iterations == 0 {
            return Err(Error::InvalidArgument(
                "SCM needs at least one iteration".into(),
            ));
        }
        if cfg.kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "SCM kernel size {} must be odd",
                cfg.kernel
            )));
        }
        let heads = ["global", "top", "left", "bottom", "right"]
            .map(|n| b.conv_bn_relu(&format!("head_{n}"), cfg.in_channels, cfg.width, 3));
        let sets = if cfg.shared { 1 } else { cfg.iterations };
        let (w, k) = (cfg.width, cfg.kernel);
        let kernels = (0..sets)
            .map(|i| {
                b.scoped(format!("iter{i}"), |b| {
                    let mk = |b: &mut ParamBuilder<'_>, name: &str| {
                        Direction::ALL.map(|d| {
                            b.conv_with_gain(
                                &format!("{name}_{}", d.name()),
                                w,
                                w,
                                k,
                                1,
                                k / 2,
                                false,
                                cfg.message_gain,
                            )
                        })
                    };
                    KernelSet {
                        lambda: mk(b, "lambda"),
                        varpi: mk(b, "varpi"),
                        eta: mk(b, "eta"),
                    }
                })
            })
            .collect();
        Ok(ScmParams {
            heads,
            kernels,
            out_conv: b.conv_with_gain(
                "out",
                cfg.width,
                1,
                1,
                1,
                0,
                true,
                crate::cmls::PREDICT_GAIN,
            ),
            iterations: cfg.iterations,
            shared: cfg.shared,
        })
    }

    fn kernels_for(&self, iteration: usize) -> &KernelSet {
        if self.shared {
            &self.kernels[0]
        } else {
            &self.kernels[iteration]
        }
    }
}

/// Observations, latents and gates of one mean-field instance. Latents are
/// `None` until [`ScmState::initialize`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScmState {
    pub o_cg: Var,
    pub o_c: [Var; 4],
    pub h_cg: Option<Var>,
    pub h_c: Option<[Var; 4]>,
    pub a_c: Option<[Var; 4]>,
    pub g_c: Option<[Var; 4]>,
}

impl ScmState {
    pub fn observed(o_cg: Var, o_c: [Var; 4]) -> Self {
        ScmState {
            o_cg,
            o_c,
            h_cg: None,
            h_c: None,
            a_c: None,
            g_c: None,
        }
    }

    pub fn initialize(mut self) -> Self {
        self.h_cg = Some(self.o_cg);
        self.h_c = Some(self.o_c);
        self
    }
}

/// Concatenates stack outputs along channels.
pub fn build_global_context(ctx: &mut Ctx<'_>, stack_outputs: &[Var]) -> Result<Var> {
    if stack_outputs.is_empty() {
        return Err(Error::EmptyInput {
            op: "build_global_context",
        });
    }
    ctx.tape.concat_channels(stack_outputs)
}

/// Global observation and the four directionally pooled observations.
pub fn make_context_heads(
    ctx: &mut Ctx<'_>,
    o_hg: Var,
    params: &ScmParams,
) -> Result<(Var, [Var; 4])> {
    Ok(context_heads_batched(ctx, o_hg, std::slice::from_ref(params))?[0])
}

/// [`make_context_heads`] for several instances reading the same context,
/// sharing one convolution over all heads.
fn context_heads_batched(
    ctx: &mut Ctx<'_>,
    o_hg: Var,
    params: &[ScmParams],
) -> Result<Vec<(Var, [Var; 4])>> {
    let layers: Vec<&ConvBnRelu> = params.iter().flat_map(|p| p.heads.iter()).collect();
    let outs = ConvBnRelu::forward_group(ctx, o_hg, &layers)?;
    Ok(outs
        .chunks_exact(5)
        .map(|h| {
            let mut o_c = [h[0]; 4];
            for (i, dir) in Direction::ALL.into_iter().enumerate() {
                o_c[i] = ctx.tape.directionmax(h[i + 1], dir);
            }
            (h[0], o_c)
        })
        .collect())
}

/// One gated mean-field update with the given kernels.
pub fn mean_field_step(
    ctx: &mut Ctx<'_>,
    state: &ScmState,
    kernels: &KernelSet,
) -> Result<ScmState> {
    let (Some(h_cg), Some(h_c)) = (state.h_cg, state.h_c) else {
        return Err(Error::UninitializedState);
    };
    // All eight messages out of a global map share one convolution.
    let from_global: Vec<&ConvParam> = kernels.varpi.iter().chain(&kernels.lambda).collect();
    let msg = conv_group(ctx, h_cg, &from_global)?;
    let mut g_hat = [h_cg; 4];
    let mut a_hat = [h_cg; 4];
    for c in 0..4 {
        let g_tilde = ctx.tape.mul(h_c[c], msg[c])?;
        let a_tilde = ctx.tape.mul(h_c[c], msg[4 + c])?;
        // Each gate hears the other gate's pre-activation through eta.
        let cross = kernels.eta[c].forward_many(ctx, &[a_tilde, g_tilde])?;
        let sg = ctx.tape.add(g_tilde, cross[0])?;
        let sa = ctx.tape.add(a_tilde, cross[1])?;
        let ng = ctx.tape.neg(sg);
        let na = ctx.tape.neg(sa);
        g_hat[c] = ctx.tape.sigmoid(ng);
        a_hat[c] = ctx.tape.sigmoid(na);
    }

    let mut via_g = Vec::with_capacity(4);
    let mut via_a = Vec::with_capacity(4);
    for c in 0..4 {
        let m = conv_group(ctx, h_c[c], &[&kernels.varpi[c], &kernels.lambda[c]])?;
        via_g.push(ctx.tape.mul(g_hat[c], m[0])?);
        via_a.push(ctx.tape.mul(a_hat[c], m[1])?);
    }
    let tilde = ctx.tape.add_all(&via_g)?;
    let frown = ctx.tape.add_all(&via_a)?;
    let partial = ctx.tape.add(state.o_cg, tilde)?;
    let new_cg = ctx.tape.add(partial, frown)?;

    let msg = conv_group(ctx, new_cg, &from_global)?;
    let mut new_c = h_c;
    for c in 0..4 {
        let tilde = ctx.tape.mul(g_hat[c], msg[c])?;
        let frown = ctx.tape.mul(a_hat[c], msg[4 + c])?;
        let partial = ctx.tape.add(state.o_c[c], tilde)?;
        new_c[c] = ctx.tape.add(partial, frown)?;
    }
    Ok(ScmState {
        o_cg: state.o_cg,
        o_c: state.o_c,
        h_cg: Some(new_cg),
        h_c: Some(new_c),
        a_c: Some(a_hat),
        g_c: Some(g_hat),
    })
}

/// Heads, `iterations` mean-field steps, and the output projection of one
/// keypoint instance. Returns `(heatmap channel, final state)`.
pub fn scm_instance(ctx: &mut Ctx<'_>, o_hg: Var, params: &ScmParams) -> Result<(Var, ScmState)> {
    let (o_cg, o_c) = make_context_heads(ctx, o_hg, params)?;
    run_instance(ctx, o_cg, o_c, params)
}

fn run_instance(
    ctx: &mut Ctx<'_>,
    o_cg: Var,
    o_c: [Var; 4],
    params: &ScmParams,
) -> Result<(Var, ScmState)> {
    let mut state = ScmState::observed(o_cg, o_c).initialize();
    for i in 0..params.iterations {
        state = mean_field_step(ctx, &state, params.kernels_for(i))?;
    }
    let h_cg = state.h_cg.ok_or(Error::UninitializedState)?;
    let heat = params.out_conv.forward(ctx, h_cg)?;
    Ok((heat, state))
}

#[derive(Debug, Clone)]
pub struct ScmOutput {
    /// All keypoint channels concatenated.
    pub heatmaps: Var,
    pub per_keypoint: Vec<Var>,
    pub losses: Vec<Var>,
    pub states: Vec<ScmState>,
}

/// Runs the `K` independent instances on the concatenated stack outputs;
/// instance `k` is supervised by channel `k` of `targets`.
pub fn scm_forward(
    ctx: &mut Ctx<'_>,
    stack_outputs: &[Var],
    params: &[ScmParams],
    targets: &Heatmap,
) -> Result<ScmOutput> {
    if params.len() != targets.keypoints() {
        return Err(Error::InvalidArgument(format!(
            "{} SCM instances but targets have {} keypoints",
            params.len(),
            targets.keypoints()
        )));
    }
    let o_hg = build_global_context(ctx, stack_outputs)?;
    let mut per_keypoint = Vec::with_capacity(params.len());
    let mut losses = Vec::with_capacity(params.len());
    let mut states = Vec::with_capacity(params.len());
    let observed = context_heads_batched(ctx, o_hg, params)?;
    for (k, (p, (o_cg, o_c))) in params.iter().zip(observed).enumerate() {
        let (heat, state) = run_instance(ctx, o_cg, o_c, p)?;
        let target = targets.channel(k)?;
        losses.push(ctx.tape.mse_loss(heat, &target.maps, &target.mask)?);
        per_keypoint.push(heat);
        states.push(state);
    }
    let heatmaps = ctx.tape.concat_channels(&per_keypoint)?;
    Ok(ScmOutput {
        heatmaps,
        per_keypoint,
        losses,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(width: usize, iterations: usize) -> ScmConfig {
        ScmConfig {
            in_channels: 6,
            width,
            kernel: 3,
            iterations,
            shared: true,
            message_gain: 0.1,
        }
    }

    fn build(store: &mut ParamStore, c: &ScmConfig) -> ScmParams {
        let mut b = ParamBuilder::new(store, 1, 0.9, 1e-5);
        b.scoped("scm0", |b| ScmParams::build(b, c)).unwrap()
    }

    #[test]
    fn scalar_instance_matches_hand_evaluation() {
        let mut store = ParamStore::new();
        let c = ScmConfig {
            in_channels: 1,
            width: 1,
            kernel: 1,
            iterations: 1,
            shared: true,
            message_gain: 1.0,
        };
        let p = build(&mut store, &c);
        store.fill_matching("scm0.iter0.lambda", "weight", 1.0);
        store.fill_matching("scm0.iter0.varpi", "weight", 1.0);
        store.fill_matching("scm0.iter0.eta", "weight", 0.0);
        let mut ctx = Ctx::new(&mut store, false);
        let o_c = ctx.input(Tensor::scalar(1.0));
        let o_cg = ctx.input(Tensor::scalar(2.0));
        let zero = ctx.input(Tensor::scalar(0.0));
        // Single direction: the other three branches see zero observations.
        let state = ScmState::observed(o_cg, [o_c, zero, zero, zero]).initialize();
        let next = mean_field_step(&mut ctx, &state, &p.kernels[0]).unwrap();
        let gate = ctx.value(next.g_c.unwrap()[0]).item();
        assert!((gate - 0.11920).abs() < 1e-5);
        let h_cg = ctx.value(next.h_cg.unwrap()).item();
        let h_c = ctx.value(next.h_c.unwrap()[0]).item();
        let s = 1.0 / (1.0 + 2f64.exp());
        assert!((h_cg - (2.0 + 2.0 * s)).abs() < 1e-12);
        assert!((h_c - (1.0 + 2.0 * s * (2.0 + 2.0 * s))).abs() < 1e-12);
        assert!((h_cg - 2.23840).abs() < 1e-4 && (h_c - 1.53362).abs() < 1e-4);
    }

    #[test]
    fn uninitialized_state_is_an_error() {
        let mut store = ParamStore::new();
        let p = build(&mut store, &cfg(2, 1));
        let mut ctx = Ctx::new(&mut store, false);
        let o = ctx.input(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let state = ScmState::observed(o, [o; 4]);
        assert!(matches!(
            mean_field_step(&mut ctx, &state, &p.kernels[0]),
            Err(Error::UninitializedState)
        ));
    }

    #[test]
    fn zero_kernels_are_identity_with_half_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for iters in 1..=3 {
            let mut store = ParamStore::new();
            let p = build(&mut store, &cfg(3, iters));
            for name in ["lambda", "varpi", "eta"] {
                store.fill_matching(&format!("scm0.iter0.{name}"), "weight", 0.0);
            }
            let mut ctx = Ctx::new(&mut store, false);
            let o_cg = ctx.input(Tensor::uniform(Shape::new(2, 3, 5, 5), -2.0, 2.0, &mut rng));
            let o_c = [(); 4]
                .map(|_| ctx.input(Tensor::uniform(Shape::new(2, 3, 5, 5), -2.0, 2.0, &mut rng)));
            let mut state = ScmState::observed(o_cg, o_c).initialize();
            for _ in 0..iters {
                state = mean_field_step(&mut ctx, &state, &p.kernels[0]).unwrap();
            }
            assert_eq!(ctx.value(state.h_cg.unwrap()), ctx.value(o_cg));
            for c in 0..4 {
                assert_eq!(ctx.value(state.h_c.unwrap()[c]), ctx.value(o_c[c]));
                assert!(ctx
                    .value(state.a_c.unwrap()[c])
                    .data()
                    .iter()
                    .all(|&v| v == 0.5));
                assert!(ctx
                    .value(state.g_c.unwrap()[c])
                    .data()
                    .iter()
                    .all(|&v| v == 0.5));
            }
        }
    }

    #[test]
    fn heads_follow_directional_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let p = build(&mut store, &cfg(4, 2));
        let mut ctx = Ctx::new(&mut store, true);
        let x = ctx.input(Tensor::uniform(Shape::new(2, 6, 8, 8), -1.0, 1.0, &mut rng));
        let (o_cg, o_c) = make_context_heads(&mut ctx, x, &p).unwrap();
        assert_eq!(ctx.tape.shape(o_cg), Shape::new(2, 4, 8, 8));
        let pre_top = p.heads[1].forward(&mut ctx, x).unwrap();
        let want = crate::directionmax::directionmax(ctx.value(pre_top), Direction::Top);
        assert!(ctx.value(o_c[0]).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn zero_input_gives_zero_heads() {
        let mut store = ParamStore::new();
        let p = build(&mut store, &cfg(4, 1));
        store.fill_matching("scm0.head", "beta", 0.0);
        let mut ctx = Ctx::new(&mut store, true);
        let x = ctx.input(Tensor::zeros(Shape::new(1, 6, 4, 4)));
        let (o_cg, o_c) = make_context_heads(&mut ctx, x, &p).unwrap();
        for v in std::iter::once(o_cg).chain(o_c) {
            assert_eq!(ctx.tape.shape(v).c, 4);
            assert!(ctx.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn sharing_keeps_parameter_count_fixed() {
        let counts: Vec<usize> = (1..=2)
            .map(|it| {
                let mut store = ParamStore::new();
                build(&mut store, &cfg(4, it));
                store.count_trainable("")
            })
            .collect();
        assert_eq!(counts[0], counts[1]);
        let mut store = ParamStore::new();
        build(
            &mut store,
            &ScmConfig {
                shared: false,
                ..cfg(4, 2)
            },
        );
        assert!(store.count_trainable("") > counts[0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::gradcheck::{param_grad_check, sample_probes};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let params: Vec<ScmParams> = {
            let mut b = ParamBuilder::new(&mut store, 2, 0.9, 1e-5);
            (0..2)
                .map(|k| {
                    b.scoped(format!("scm{k}"), |b| {
                        ScmParams::build(b, &cfg(3, 2)).unwrap()
                    })
                })
                .collect()
        };
        let xs = [(); 2].map(|_| Tensor::uniform(Shape::new(2, 3, 6, 6), -1.0, 1.0, &mut rng));
        let targets = Heatmap::prediction(
            Tensor::uniform(Shape::new(2, 2, 6, 6), 0.0, 1.0, &mut rng),
            4,
        );
        let mut probes = sample_probes(&store, "scm0.iter0", 20, &mut rng);
        probes.extend(sample_probes(&store, "scm1", 30, &mut rng));
        let report = param_grad_check(&mut store, &probes, 1e-3, true, |ctx| {
            let vs: Vec<Var> = xs.iter().map(|x| ctx.input(x.clone())).collect();
            let out = scm_forward(ctx, &vs, &params, &targets)?;
            let total = ctx.tape.add_all(&out.losses)?;
            let s = ctx.tape.sum(out.heatmaps);
            ctx.tape.add(total, s)
        })
        .unwrap();
        assert!(report.probes >= 25, "{report:?}");
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn forward_shapes_and_zero_kernel_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let params: Vec<ScmParams> = {
            let mut b = ParamBuilder::new(&mut store, 2, 0.9, 1e-5);
            (0..4)
                .map(|k| {
                    b.scoped(format!("scm{k}"), |b| {
                        ScmParams::build(b, &cfg(4, 2)).unwrap()
                    })
                })
                .collect()
        };
        for k in 0..4 {
            for name in ["lambda", "varpi", "eta"] {
                store.fill_matching(&format!("scm{k}.iter0.{name}"), "weight", 0.0);
            }
        }
        let targets = Heatmap::prediction(Tensor::zeros(Shape::new(1, 4, 16, 16)), 4);
        let mut ctx = Ctx::new(&mut store, true);
        let xs: Vec<Var> = (0..2)
            .map(|_| {
                ctx.input(Tensor::uniform(
                    Shape::new(1, 3, 16, 16),
                    -1.0,
                    1.0,
                    &mut rng,
                ))
            })
            .collect();
        let out = scm_forward(&mut ctx, &xs, &params, &targets).unwrap();
        assert_eq!(ctx.tape.shape(out.heatmaps), Shape::new(1, 4, 16, 16));
        assert_eq!(out.losses.len(), 4);
        let o_hg = build_global_context(&mut ctx, &xs).unwrap();
        let (o_cg, _) = make_context_heads(&mut ctx, o_hg, &params[2]).unwrap();
        let direct = params[2].out_conv.forward(&mut ctx, o_cg).unwrap();
        assert!(
            ctx.value(direct)
                .max_abs_diff(ctx.value(out.per_keypoint[2]))
                < 1e-12
        );
        for st in &out.states {
            for g in st.g_c.unwrap().iter().chain(st.a_c.unwrap().iter()) {
                assert!(ctx.value(*g).data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
        assert!(scm_forward(&mut ctx, &xs, &params[..3], &targets).is_err());
    }

    #[test]
    fn global_context_slices_equal_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let mut ctx = Ctx::new(&mut store, false);
        let xs: Vec<Var> = (0..3)
            .map(|_| {
                ctx.input(Tensor::uniform(
                    Shape::new(1, 32, 16, 16),
                    -1.0,
                    1.0,
                    &mut rng,
                ))
            })
            .collect();
        let o = build_global_context(&mut ctx, &xs).unwrap();
        assert_eq!(ctx.tape.shape(o), Shape::new(1, 96, 16, 16));
        for (i, &x) in xs.iter().enumerate() {
            assert_eq!(
                ctx.value(o).slice_channels(32 * i, 32).unwrap().data(),
                ctx.value(x).data()
            );
        }
        let single = build_global_context(&mut ctx, &xs[..1]).unwrap();
        assert_eq!(ctx.value(single).data(), ctx.value(xs[0]).data());
        assert!(build_global_context(&mut ctx, &[]).is_err());
    }
}
