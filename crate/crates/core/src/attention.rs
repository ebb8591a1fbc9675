//! Unimodal spiking attention: quadratic SSA and linear query-key token attention.
//!
//! Token sequences are laid out channel-major, `[T, B, C, N]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{as_image, ConvBnLif, Ctx, LifLayer, ParamId, ParamStore, Role};
use crate::spike::LifParams;
use crate::tensor::{instrument, Tensor, Var};

/// Split channels into heads: `[T, B, C, N]` → `[T, B, h, C/h, N]`.
pub fn split_heads<'a>(x: &Var<'a>, heads: usize) -> Result<Var<'a>> {
    let s = x.shape();
    if s.len() != 4 || heads == 0 || !s[2].is_multiple_of(heads) {
        return Err(Error::shape("split_heads", s, &[heads]));
    }
    x.reshape(&[s[0], s[1], heads, s[2] / heads, s[3]])
}

pub fn merge_heads<'a>(x: &Var<'a>) -> Result<Var<'a>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3], s[4]])
}

/// Binary token mask `A = SN(Σ_{c ∈ head} Q[c, n])`, shape `[T, B, h, 1, N]`.
pub fn token_mask<'a>(ctx: &Ctx<'a>, q: &Var<'a>, heads: usize, neuron: &LifLayer) -> Result<Var<'a>> {
    let summed = split_heads(q, heads)?.sum_axis(3)?;
    neuron.forward(ctx, &summed)
}

/// `A ⊙ K`, broadcasting the mask over each head's channels.
pub fn apply_mask<'a>(mask: &Var<'a>, k: &Var<'a>) -> Result<Var<'a>> {
    let heads = mask.shape()[2];
    merge_heads(&split_heads(k, heads)?.mul(mask)?)
}

/// `SN(Q Kᵀ V · s)` per head on pre-spiked `[T, B, C, N]` inputs.
///
/// The `N × N` score matrix is materialized, which is what makes SSA quadratic.
pub fn ssa_core<'a>(ctx: &Ctx<'a>, q: &Var<'a>, k: &Var<'a>, v: &Var<'a>, heads: usize, scale: &Var<'a>, neuron: &LifLayer) -> Result<Var<'a>> {
    if q.shape() != k.shape() || k.shape() != v.shape() {
        return Err(Error::shape("ssa", q.shape(), k.shape()));
    }
    let (qh, kh, vh) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    // channel-major: (Q Kᵀ V)ᵀ = Vᵀ (K Qᵀ), with K Qᵀ = kᵀ q for [C_h, N] blocks
    let scores_t = kh.permute(&[0, 1, 2, 4, 3])?.matmul(&qh)?;
    let out = vh.matmul(&scores_t)?.mul(scale)?;
    neuron.forward(ctx, &merge_heads(&out)?)
}

/// Run a pointwise conv-BN-LIF projection over a token sequence.
pub fn project<'a>(ctx: &Ctx<'a>, proj: &ConvBnLif, x: &Var<'a>) -> Result<Var<'a>> {
    let y = proj.forward(ctx, &as_image(x)?)?;
    let s = y.shape().to_vec();
    y.reshape(&s[..4])
}

fn check_tokens(x: &Var<'_>, channels: usize, heads: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[2] != channels {
        return Err(Error::shape("attention input", s, &[channels]));
    }
    if !channels.is_multiple_of(heads) {
        return Err(Error::config(format!("{channels} channels not divisible by {heads} heads")));
    }
    Ok(())
}

/// Spiking self-attention: `SN(Q Kᵀ V · s)` with `Q, K, V = SN(BN(W x))`.
#[derive(Clone, Debug)]
pub struct Ssa {
    pub q: ConvBnLif,
    pub k: ConvBnLif,
    pub v: ConvBnLif,
    pub scale: ParamId,
    pub out: LifLayer,
    pub heads: usize,
    pub channels: usize,
}

impl Ssa {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize, scale_init: f32, lif: LifParams, rng: &mut impl Rng) -> Self {
        Self {
            q: ConvBnLif::pointwise(store, &format!("{name}.q"), channels, channels, Role::Q, lif, rng),
            k: ConvBnLif::pointwise(store, &format!("{name}.k"), channels, channels, Role::K, lif, rng),
            v: ConvBnLif::pointwise(store, &format!("{name}.v"), channels, channels, Role::V, lif, rng),
            scale: store.add(format!("{name}.scale"), Tensor::scalar(scale_init), true),
            out: LifLayer::new(format!("{name}.attn"), Role::Attn, lif),
            heads,
            channels,
        }
    }

    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>) -> Result<Var<'a>> {
        check_tokens(x, self.channels, self.heads)?;
        let (q, k, v) = instrument::scope("proj", || -> Result<_> {
            Ok((project(ctx, &self.q, x)?, project(ctx, &self.k, x)?, project(ctx, &self.v, x)?))
        })?;
        instrument::scope("attn", || ssa_core(ctx, &q, &k, &v, self.heads, &ctx.param(self.scale), &self.out))
    }
}

/// Query-key token attention: a binary per-token mask from channel sums of Q gates K.
#[derive(Clone, Debug)]
pub struct Qkta {
    pub q: ConvBnLif,
    pub k: ConvBnLif,
    pub mask: LifLayer,
    pub proj: ConvBnLif,
    pub heads: usize,
    pub channels: usize,
}

impl Qkta {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize, lif: LifParams, rng: &mut impl Rng) -> Self {
        Self {
            q: ConvBnLif::pointwise(store, &format!("{name}.q"), channels, channels, Role::Q, lif, rng),
            k: ConvBnLif::pointwise(store, &format!("{name}.k"), channels, channels, Role::K, lif, rng),
            mask: LifLayer::new(format!("{name}.mask"), Role::Attn, lif),
            proj: ConvBnLif::pointwise(store, &format!("{name}.proj"), channels, channels, Role::Output, lif, rng),
            heads,
            channels,
        }
    }

    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>) -> Result<Var<'a>> {
        check_tokens(x, self.channels, self.heads)?;
        let (q, k) = instrument::scope("proj", || -> Result<_> { Ok((project(ctx, &self.q, x)?, project(ctx, &self.k, x)?)) })?;
        let masked = instrument::scope("attn", || -> Result<_> {
            let a = token_mask(ctx, &q, self.heads, &self.mask)?;
            apply_mask(&a, &k)
        })?;
        instrument::scope("proj", || project(ctx, &self.proj, &masked))
    }
}
