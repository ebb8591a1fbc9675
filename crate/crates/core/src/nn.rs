//! Parameter storage, the per-forward context, and the non-attention layers:
//! convolution, batch normalization, LIF layers, linear heads and the spiking MLP.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::spike::{LifParams, SpikeFn};
use crate::tensor::{Conv2dGeometry, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers (BN running statistics) are stored alongside weights but never trained.
    pub trainable: bool,
}

/// Named, ordered storage for every weight and buffer of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape("param set", e.value.shape(), value.shape()));
        }
        e.value = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }
}

/// Functional role of a spiking layer, used to group firing-rate statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Role {
    Input,
    Q,
    K,
    V,
    Attn,
    Mlp1,
    Mlp2,
    Encoder,
    Output,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Input => "In",
            Role::Q => "Q",
            Role::K => "K",
            Role::V => "V",
            Role::Attn => "Attn",
            Role::Mlp1 => "MLP1",
            Role::Mlp2 => "MLP2",
            Role::Encoder => "Enc",
            Role::Output => "Out",
        }
    }
}

/// Spike counts observed at one named neuron layer during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeRecord {
    pub layer: String,
    pub role: Role,
    pub ones: f64,
    pub total: u64,
    pub binary: bool,
}

/// Everything one forward pass needs besides its inputs: the tape, parameter
/// values, train/eval mode, and the spike recorder.
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    store: &'a ParamStore,
    pub training: bool,
    pub spike_fn: SpikeFn,
    leaves: RefCell<Vec<(ParamId, Var<'a>)>>,
    bn_updates: RefCell<Vec<(ParamId, Tensor)>>,
    records: RefCell<Vec<SpikeRecord>>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore, training: bool) -> Self {
        Self {
            tape,
            store,
            training,
            spike_fn: SpikeFn::Heaviside,
            leaves: RefCell::new(Vec::new()),
            bn_updates: RefCell::new(Vec::new()),
            records: RefCell::new(Vec::new()),
        }
    }

    pub fn with_spike_fn(mut self, f: SpikeFn) -> Self {
        self.spike_fn = f;
        self
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Bind a parameter as a tape leaf.
    pub fn param(&self, id: ParamId) -> Var<'a> {
        let p = self.store.param(id);
        let v = self.tape.var(p.value.clone(), p.trainable);
        if v.requires_grad() {
            self.leaves.borrow_mut().push((id, v.clone()));
        }
        v
    }

    /// Gradients accumulated on this context's parameter leaves, summed per parameter.
    pub fn param_grads(&self) -> Result<Vec<(ParamId, Tensor)>> {
        let mut acc: HashMap<ParamId, Tensor> = HashMap::new();
        for (id, v) in self.leaves.borrow().iter() {
            if let Some(g) = v.grad() {
                let merged = match acc.remove(id) {
                    Some(prev) => prev.add(&g)?,
                    None => g,
                };
                acc.insert(*id, merged);
            }
        }
        let mut out: Vec<_> = acc.into_iter().collect();
        out.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    pub(crate) fn push_buffer_update(&self, id: ParamId, value: Tensor) {
        self.bn_updates.borrow_mut().push((id, value));
    }

    /// Pending running-statistics updates produced in training mode.
    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut *self.bn_updates.borrow_mut())
    }

    pub fn record_spikes(&self, layer: &str, role: Role, spikes: &Tensor) {
        let binary = self.spike_fn == SpikeFn::Sigmoid || spikes.is_binary();
        self.records.borrow_mut().push(SpikeRecord {
            layer: layer.to_string(),
            role,
            ones: spikes.sum(),
            total: spikes.numel() as u64,
            binary,
        });
    }

    pub fn spike_records(&self) -> Vec<SpikeRecord> {
        self.records.borrow().clone()
    }
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Merge `[T, B, ...]` into `[T·B, ...]`.
pub fn fold_time<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() < 3 {
        return Err(Error::shape("fold_time", s, &[0, 0, 0]));
    }
    let mut shape = vec![s[0] * s[1]];
    shape.extend_from_slice(&s[2..]);
    x.reshape(&shape)
}

pub fn unfold_time<'t>(x: &Var<'t>, t: usize) -> Result<Var<'t>> {
    let s = x.shape();
    if !s[0].is_multiple_of(t) {
        return Err(Error::shape("unfold_time", s, &[t]));
    }
    let mut shape = vec![t, s[0] / t];
    shape.extend_from_slice(&s[1..]);
    x.reshape(&shape)
}

/// Bias-free 2-D convolution (a 1×1 kernel doubles as the channel projection
/// of a token sequence laid out as `[M, C, N, 1]`).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub geom: Conv2dGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, geom: Conv2dGeometry, rng: &mut impl Rng) -> Self {
        let (kh, kw) = geom.kernel;
        let weight = store.add(format!("{name}.weight"), kaiming_uniform(&[cout, cin, kh, kw], cin * kh * kw, rng), true);
        Self {
            weight,
            geom,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn square(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Self::new(store, name, cin, cout, Conv2dGeometry::square(kernel, stride), rng)
    }

    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>) -> Result<Var<'a>> {
        if x.shape().len() != 4 || x.shape()[1] != self.in_channels {
            return Err(Error::shape("conv", x.shape(), &[self.out_channels, self.in_channels]));
        }
        x.conv2d(&ctx.param(self.weight), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Normalize axis 1 of `[M, C, ...]`.
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>) -> Result<Var<'a>> {
        let store = ctx.store();
        let (rm, rv) = (store.get(self.running_mean), store.get(self.running_var));
        let (y, stats) = x.batch_norm(&ctx.param(self.gamma), &ctx.param(self.beta), (rm, rv), self.eps, ctx.training)?;
        if let Some((mean, var)) = stats {
            let m = self.momentum;
            let blend = |old: &Tensor, new: &Tensor| -> Result<Tensor> { old.scale(1.0 - m).add(&new.scale(m)) };
            ctx.push_buffer_update(self.running_mean, blend(rm, &mean)?);
            ctx.push_buffer_update(self.running_var, blend(rv, &var)?);
        }
        Ok(y)
    }
}

/// A named layer of LIF neurons over `[T, ...]` inputs.
#[derive(Clone, Debug)]
pub struct LifLayer {
    pub name: String,
    pub role: Role,
    pub params: LifParams,
}

impl LifLayer {
    pub fn new(name: impl Into<String>, role: Role, params: LifParams) -> Self {
        Self {
            name: name.into(),
            role,
            params,
        }
    }

    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>) -> Result<Var<'a>> {
        let s = x.lif(&self.params, ctx.spike_fn)?;
        ctx.record_spikes(&self.name, self.role, s.value());
        Ok(s)
    }
}

/// Affine map `[B, in] → [B, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fin as f32).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::uniform(&[fin, fout], -bound, bound, rng), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fout]), true),
            in_features: fin,
            out_features: fout,
        }
    }

    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>) -> Result<Var<'a>> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_features {
            return Err(Error::shape("linear", x.shape(), &[self.in_features, self.out_features]));
        }
        x.matmul(&ctx.param(self.weight))?.add(&ctx.param(self.bias))
    }
}

/// Conv → BN → LIF over a `[T, B, C, H, W]` train.
#[derive(Clone, Debug)]
pub struct ConvBnLif {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub lif: LifLayer,
}

impl ConvBnLif {
    pub fn pointwise(store: &mut ParamStore, name: &str, cin: usize, cout: usize, role: Role, lif: LifParams, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::square(store, &format!("{name}.conv"), cin, cout, 1, 1, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
            lif: LifLayer::new(format!("{name}.lif"), role, lif),
        }
    }

    /// Pre-spike activations `BN(conv(x))`, time still folded into the batch axis.
    pub fn pre_activation<'a>(&self, ctx: &Ctx<'a>, x_folded: &Var<'a>) -> Result<Var<'a>> {
        self.bn.forward(ctx, &self.conv.forward(ctx, x_folded)?)
    }

    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>) -> Result<Var<'a>> {
        let t = x.shape()[0];
        let z = self.pre_activation(ctx, &fold_time(x)?)?;
        self.lif.forward(ctx, &unfold_time(&z, t)?)
    }
}

/// Token-sequence view of a channel-major train: `[T, B, C, N]` → `[T, B, C, N, 1]`.
pub fn as_image<'a>(x: &Var<'a>) -> Result<Var<'a>> {
    let mut s = x.shape().to_vec();
    s.push(1);
    x.reshape(&s)
}

/// Two-layer spiking MLP, `SN(BN(W₂ · SN(BN(W₁ · x))))`, with 1×1 convolutions.
#[derive(Clone, Debug)]
pub struct SpikingMlp {
    pub fc1: ConvBnLif,
    pub fc2: ConvBnLif,
}

impl SpikingMlp {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, ratio: usize, lif: LifParams, rng: &mut impl Rng) -> Self {
        let hidden = channels * ratio;
        Self {
            fc1: ConvBnLif::pointwise(store, &format!("{name}.fc1"), channels, hidden, Role::Mlp1, lif, rng),
            fc2: ConvBnLif::pointwise(store, &format!("{name}.fc2"), hidden, channels, Role::Mlp2, lif, rng),
        }
    }

    /// `x: [T, B, C, H, W]` spikes → spikes of the same shape.
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>) -> Result<Var<'a>> {
        self.fc2.forward(ctx, &self.fc1.forward(ctx, x)?)
    }
}
