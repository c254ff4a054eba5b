//! Parameterized building blocks shared by the network modules.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchStats, Tape, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// State for one forward pass: the tape, the parameters it reads, and the
/// batch-norm statistics it observed (applied to running buffers afterwards).
pub struct Ctx<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    pub train: bool,
    bn_updates: Vec<(ParamId, ParamId, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Self { tape: Tape::new(), store, train, bn_updates: Vec::new() }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn take_bn_updates(&mut self) -> Vec<(ParamId, ParamId, BatchStats)> {
        std::mem::take(&mut self.bn_updates)
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

/// Folds observed batch statistics into running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, updates: Vec<(ParamId, ParamId, BatchStats)>) {
    for (mean_id, var_id, stats) in updates {
        for (r, b) in store.get_mut(mean_id).data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in store.get_mut(var_id).data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add_param(&format!("{name}.weight"), init.tensor(&[out_dim, in_dim], rng));
        let bias = bias.then(|| store.add_param(&format!("{name}.bias"), Tensor::zeros([out_dim])));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add_param(&format!("{name}.weight"), init.tensor(&[out_ch, in_ch, kernel, kernel], rng));
        let bias = bias.then(|| store.add_param(&format!("{name}.bias"), Tensor::zeros([out_ch])));
        Self { weight, bias }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_param(&format!("{name}.gamma"), Tensor::full([channels], 1.0)),
            beta: store.add_param(&format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full([channels], 1.0)),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        if ctx.train {
            let (y, stats) = ctx.tape.batch_norm_train(x, g, b);
            ctx.bn_updates.push((self.running_mean, self.running_var, stats));
            y
        } else {
            let store = ctx.store;
            let (m, v) = (store.get(self.running_mean).data(), store.get(self.running_var).data());
            ctx.tape.batch_norm_eval(x, g, b, m, v)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_param(&format!("{name}.gamma"), Tensor::full([dim], 1.0)),
            beta: store.add_param(&format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        ctx.tape.layer_norm(x, g, b)
    }
}

/// Conv → BatchNorm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_ch, out_ch, kernel, true, Init::KaimingNormal { fan_in }, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_ch),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let y = self.conv.forward(ctx, x);
        let y = self.bn.forward(ctx, y);
        ctx.tape.relu(y)
    }
}

/// Two-layer regression head `in → hidden → 1` whose output layer starts at
/// zero weight with a chosen bias, so the initial prediction is that bias.
#[derive(Clone, Debug)]
pub struct RegressionHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl RegressionHead {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, out_bias: f64, rng: &mut ChaCha8Rng) -> Self {
        let h = Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, true, fc_init(in_dim), rng);
        let out = Linear::new(store, &format!("{name}.fc2"), hidden, 1, true, Init::Zeros, rng);
        store.get_mut(out.bias.expect("bias")).data_mut()[0] = out_bias;
        Self { hidden: h, out }
    }

    /// `[n, in]` to `[n]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.hidden.forward(ctx, x);
        let h = ctx.tape.relu(h);
        let y = self.out.forward(ctx, h);
        let n = ctx.value(y).dim(0);
        ctx.tape.reshape(y, &[n])
    }
}

/// Normal initialization used for fully connected layers.
pub fn fc_init(fan_in: usize) -> Init {
    Init::Normal { std: (1.0 / fan_in.max(1) as f64).sqrt() }
}
