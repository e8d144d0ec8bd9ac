//! Named parameter storage and the Conv / BN / residual building blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers (batch-norm running statistics) are stored but not optimized.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].trainable)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Number of trainable scalars, optionally restricted to a name prefix.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Fills every trainable tensor whose name starts with `prefix` and
    /// ends with `suffix` with `value`. Returns how many tensors changed.
    pub fn fill_matching(&mut self, prefix: &str, suffix: &str, value: f64) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.trainable && e.name.starts_with(prefix) && e.name.ends_with(suffix) {
                e.value.data_mut().fill(value);
                n += 1;
            }
        }
        n
    }
}

/// Registers parameters with deterministic He-uniform initialization.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
    bn_momentum: f64,
    bn_eps: f64,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, bn_momentum: f64, bn_eps: f64) -> Self {
        ParamBuilder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
            bn_momentum,
            bn_eps,
        }
    }

    pub fn scoped<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn name(&self, leaf: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    fn he_uniform(&mut self, shape: Shape, fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..shape.numel())
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        Tensor::from_vec(shape, data).expect("numel matches")
    }

    pub fn conv(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> ConvParam {
        self.conv_with_gain(name, in_c, out_c, k, stride, pad, bias, 1.0)
    }

    /// Like [`ParamBuilder::conv`] with the He-uniform bound multiplied by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_with_gain(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        gain: f64,
    ) -> ConvParam {
        let mut w = self.he_uniform(Shape::new(out_c, in_c, k, k), in_c * k * k);
        w.data_mut().iter_mut().for_each(|v| *v *= gain);
        let weight = self
            .store
            .add(self.name(&format!("{name}.weight")), w, true);
        let bias = bias.then(|| {
            self.store.add(
                self.name(&format!("{name}.bias")),
                Tensor::zeros(Shape::new(1, out_c, 1, 1)),
                true,
            )
        });
        ConvParam {
            weight,
            bias,
            stride,
            padding: pad,
        }
    }

    /// Transposed convolution; fan-in counts the taps that reach one output.
    pub fn deconv(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> ConvParam {
        let taps = (k / stride).max(1);
        let w = self.he_uniform(Shape::new(out_c, in_c, k, k), in_c * taps * taps);
        let weight = self
            .store
            .add(self.name(&format!("{name}.weight")), w, true);
        let bias = Some(self.store.add(
            self.name(&format!("{name}.bias")),
            Tensor::zeros(Shape::new(1, out_c, 1, 1)),
            true,
        ));
        ConvParam {
            weight,
            bias,
            stride,
            padding: pad,
        }
    }

    pub fn norm(&mut self, name: &str, c: usize) -> NormParam {
        let s = Shape::new(1, c, 1, 1);
        NormParam {
            gamma: self.store.add(
                self.name(&format!("{name}.gamma")),
                Tensor::full(s, 1.0),
                true,
            ),
            beta: self
                .store
                .add(self.name(&format!("{name}.beta")), Tensor::zeros(s), true),
            running_mean: self.store.add(
                self.name(&format!("{name}.running_mean")),
                Tensor::zeros(s),
                false,
            ),
            running_var: self.store.add(
                self.name(&format!("{name}.running_var")),
                Tensor::full(s, 1.0),
                false,
            ),
            momentum: self.bn_momentum,
            eps: self.bn_eps,
        }
    }

    pub fn conv_bn_relu(&mut self, name: &str, in_c: usize, out_c: usize, k: usize) -> ConvBnRelu {
        self.scoped(name, |b| ConvBnRelu {
            // The following batch norm cancels any bias.
            conv: b.conv("conv", in_c, out_c, k, 1, k / 2, false),
            norm: b.norm("bn", out_c),
        })
    }

    /// Pre-activation bottleneck: BN-ReLU-Conv1x1, BN-ReLU-Conv3x3,
    /// BN-ReLU-Conv1x1, plus a 1x1 skip when widths differ.
    pub fn residual(&mut self, name: &str, in_c: usize, out_c: usize) -> Residual {
        let mid = (out_c / 2).max(1);
        self.scoped(name, |b| Residual {
            bn1: b.norm("bn1", in_c),
            conv1: b.conv("conv1", in_c, mid, 1, 1, 0, false),
            bn2: b.norm("bn2", mid),
            conv2: b.conv("conv2", mid, mid, 3, 1, 1, false),
            bn3: b.norm("bn3", mid),
            conv3: b.conv("conv3", mid, out_c, 1, 1, 0, true),
            skip: (in_c != out_c).then(|| b.conv("skip", in_c, out_c, 1, 1, 0, true)),
        })
    }
}

/// Forward context: the tape, the parameter store it reads from, and the
/// binding of parameters to tape leaves.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a mut ParamStore,
    bound: Vec<Option<Var>>,
    training: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a mut ParamStore, training: bool) -> Self {
        let n = store.len();
        Ctx {
            tape: Tape::new(),
            store,
            bound: vec![None; n],
            training,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradient for every parameter that took part in the forward pass.
    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.bound[id.0].and_then(|v| self.tape.grad(v))
    }

    fn update_running(&mut self, p: &NormParam, mean: &[f64], var: &[f64]) {
        let m = p.momentum;
        let rm = self.store.get_mut(p.running_mean);
        for (r, b) in rm.data_mut().iter_mut().zip(mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        let rv = self.store.get_mut(p.running_var);
        for (r, b) in rv.data_mut().iter_mut().zip(var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvParam {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParam {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn forward_transposed(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape
            .transposed_conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape().n
    }

    /// The same convolution applied to several equally shaped inputs in one
    /// call (inputs are stacked along the batch axis).
    pub fn forward_many(&self, ctx: &mut Ctx<'_>, xs: &[Var]) -> Result<Vec<Var>> {
        if xs.len() == 1 {
            return Ok(vec![self.forward(ctx, xs[0])?]);
        }
        let n = ctx.tape.shape(xs[0]).n;
        let stacked = ctx.tape.concat_batch(xs)?;
        let y = self.forward(ctx, stacked)?;
        (0..xs.len())
            .map(|i| ctx.tape.slice_batch(y, i * n, n))
            .collect()
    }
}

/// Several convolutions of one input, evaluated as a single convolution with
/// the weights stacked along output channels. All layers must share kernel
/// geometry and either all or none may carry a bias.
pub fn conv_group(ctx: &mut Ctx<'_>, x: Var, convs: &[&ConvParam]) -> Result<Vec<Var>> {
    let first = convs
        .first()
        .ok_or(Error::EmptyInput { op: "conv_group" })?;
    let geometry = |c: &ConvParam, store: &ParamStore| {
        let s = store.get(c.weight).shape();
        (s.c, s.h, s.w, c.stride, c.padding, c.bias.is_some())
    };
    let g0 = geometry(first, ctx.store());
    if convs.iter().any(|c| geometry(c, ctx.store()) != g0) {
        return Err(Error::InvalidArgument(
            "conv_group needs identical kernel geometry".into(),
        ));
    }
    if convs.len() == 1 {
        return Ok(vec![first.forward(ctx, x)?]);
    }
    let ws: Vec<Var> = convs.iter().map(|c| ctx.param(c.weight)).collect();
    let w = ctx.tape.concat_batch(&ws)?;
    let b = if g0.5 {
        let bs: Vec<Var> = convs
            .iter()
            .map(|c| ctx.param(c.bias.expect("checked above")))
            .collect();
        Some(ctx.tape.concat_channels(&bs)?)
    } else {
        None
    };
    let y = ctx.tape.conv2d(x, w, b, first.stride, first.padding)?;
    let mut out = Vec::with_capacity(convs.len());
    let mut start = 0;
    for c in convs {
        let len = ctx.store().get(c.weight).shape().n;
        out.push(ctx.tape.slice_channels(y, start, len)?);
        start += len;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormParam {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl NormParam {
    /// Batch statistics (and a running-average update) in training mode,
    /// running statistics otherwise.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x).c;
        let expected = ctx.store().get(self.gamma).numel();
        if c != expected {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: ctx.tape.shape(x),
                rhs: ctx.store().get(self.gamma).shape(),
            });
        }
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if ctx.training {
            let (y, stats) = ctx.tape.batch_norm_train(x, gamma, beta, self.eps)?;
            ctx.update_running(self, &stats.mean, &stats.var);
            Ok(y)
        } else {
            let mean = ctx.store().get(self.running_mean).data().to_vec();
            let var = ctx.store().get(self.running_var).data().to_vec();
            ctx.tape
                .batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvBnRelu {
    pub conv: ConvParam,
    pub norm: NormParam,
}

impl ConvBnRelu {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.norm.forward(ctx, y)?;
        Ok(ctx.tape.relu(y))
    }

    /// Several layers reading the same input, with one shared convolution.
    pub fn forward_group(ctx: &mut Ctx<'_>, x: Var, layers: &[&ConvBnRelu]) -> Result<Vec<Var>> {
        let convs: Vec<&ConvParam> = layers.iter().map(|l| &l.conv).collect();
        let ys = conv_group(ctx, x, &convs)?;
        layers
            .iter()
            .zip(ys)
            .map(|(l, y)| {
                let y = l.norm.forward(ctx, y)?;
                Ok(ctx.tape.relu(y))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub bn1: NormParam,
    pub conv1: ConvParam,
    pub bn2: NormParam,
    pub conv2: ConvParam,
    pub bn3: NormParam,
    pub conv3: ConvParam,
    pub skip: Option<ConvParam>,
}

impl Residual {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let mut y = x;
        for (bn, conv) in [
            (&self.bn1, &self.conv1),
            (&self.bn2, &self.conv2),
            (&self.bn3, &self.conv3),
        ] {
            y = bn.forward(ctx, y)?;
            y = ctx.tape.relu(y);
            y = conv.forward(ctx, y)?;
        }
        let skip = match &self.skip {
            Some(s) => s.forward(ctx, x)?,
            None => x,
        };
        ctx.tape.add(y, skip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn builder_names_and_counts() {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 0, 0.9, 1e-5);
        let r = b.scoped("stack0", |b| b.residual("res", 4, 8));
        assert!(r.skip.is_some());
        assert!(store.find("stack0.res.conv2.weight").is_some());
        assert!(
            !store
                .entry(store.find("stack0.res.bn1.running_var").unwrap())
                .trainable
        );
        let convs = 4 * 4 + 4 * 4 * 9 + 4 * 8 + 8 + 4 * 8 + 8;
        let norms = 2 * (4 + 4 + 4);
        assert_eq!(store.count_trainable(""), convs + norms);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats_and_training_updates_them() {
        let mut store = ParamStore::new();
        let bn = ParamBuilder::new(&mut store, 0, 0.9, 1e-5).norm("bn", 1);
        let x = Tensor::from_vec(Shape::new(2, 1, 1, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        {
            let mut ctx = Ctx::new(&mut store, true);
            let xv = ctx.input(x.clone());
            bn.forward(&mut ctx, xv).unwrap();
        }
        let rm = store.get(bn.running_mean).item();
        let rv = store.get(bn.running_var).item();
        assert!((rm - 0.4).abs() < 1e-12, "{rm}");
        assert!((rv - (0.9 + 0.1 * 5.0)).abs() < 1e-12, "{rv}");
        let mut ctx = Ctx::new(&mut store, false);
        let xv = ctx.input(x);
        let y = bn.forward(&mut ctx, xv).unwrap();
        let want = (1.0 - rm) / (rv + 1e-5f64).sqrt();
        assert!((ctx.value(y).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn grouped_and_batched_convs_match_separate_ones() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 1, 0.9, 1e-5);
        let convs: Vec<ConvParam> = (0..3)
            .map(|i| b.conv(&format!("c{i}"), 3, 2 + i, 3, 1, 1, true))
            .collect();
        let x = Tensor::uniform(Shape::new(2, 3, 5, 5), -1.0, 1.0, &mut rng);
        let x2 = Tensor::uniform(Shape::new(2, 3, 5, 5), -1.0, 1.0, &mut rng);
        let mut ctx = Ctx::new(&mut store, true);
        let xv = ctx.input(x);
        let xv2 = ctx.input(x2);
        let refs: Vec<&ConvParam> = convs.iter().collect();
        let grouped = conv_group(&mut ctx, xv, &refs).unwrap();
        let batched = convs[1].forward_many(&mut ctx, &[xv, xv2]).unwrap();
        let mut parts = grouped.clone();
        parts.extend(&batched);
        for (i, c) in convs.iter().enumerate() {
            let single = c.forward(&mut ctx, xv).unwrap();
            assert!(ctx.value(single).max_abs_diff(ctx.value(grouped[i])) < 1e-12);
        }
        let single2 = convs[1].forward(&mut ctx, xv2).unwrap();
        assert!(ctx.value(single2).max_abs_diff(ctx.value(batched[1])) < 1e-12);
        let sums: Vec<Var> = parts.iter().map(|&v| ctx.tape.sum(v)).collect();
        let total = ctx.tape.add_all(&sums).unwrap();
        ctx.backward(total).unwrap();
        assert!(ctx.param_grad(convs[2].weight).is_some());
    }

    #[test]
    fn batch_norm_channel_mismatch() {
        let mut store = ParamStore::new();
        let bn = ParamBuilder::new(&mut store, 0, 0.9, 1e-5).norm("bn", 3);
        let mut ctx = Ctx::new(&mut store, true);
        let x = ctx.input(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        assert!(bn.forward(&mut ctx, x).is_err());
    }
}
