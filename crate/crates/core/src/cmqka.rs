//! Bidirectional cross-modal query-key attention.
//!
//! For the video pathway (`v ← a`) the video query decides which audio tokens
//! survive: a spatial pathway masks audio keys per token, a temporal pathway does
//! the same after projecting along the time axis, and the two are pooled along
//! complementary dimensions, multiplied, and added back into the video stream
//! with a learnable weight `α`. The audio pathway mirrors this with roles swapped.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{apply_mask, project, token_mask};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, ConvBnLif, Ctx, LifLayer, ParamId, ParamStore, Role, SpikingMlp};
use crate::spike::LifParams;
use crate::tensor::{instrument, Conv2dGeometry, Tensor, Var};

/// Which complementary pathways contribute to the fused residual.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pathways {
    SpatialOnly,
    TemporalOnly,
    #[default]
    Spatiotemporal,
}

impl Pathways {
    pub fn spatial(self) -> bool {
        self != Pathways::TemporalOnly
    }

    pub fn temporal(self) -> bool {
        self != Pathways::SpatialOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pathways::SpatialOnly => "spatial-only",
            Pathways::TemporalOnly => "temporal-only",
            Pathways::Spatiotemporal => "spatiotemporal",
        }
    }
}

impl std::str::FromStr for Pathways {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial-only" | "spatial" => Ok(Pathways::SpatialOnly),
            "temporal-only" | "temporal" => Ok(Pathways::TemporalOnly),
            "spatiotemporal" | "both" => Ok(Pathways::Spatiotemporal),
            _ => Err(Error::config(format!("unknown pathway mode '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmqkaConfig {
    pub alpha_init: f32,
    /// Width of the convolution along the time axis in the temporal pathway (odd).
    pub temporal_kernel: usize,
    pub mlp_ratio: usize,
    pub pathways: Pathways,
}

impl Default for CmqkaConfig {
    fn default() -> Self {
        Self {
            alpha_init: 1.5,
            temporal_kernel: 1,
            mlp_ratio: 4,
            pathways: Pathways::Spatiotemporal,
        }
    }
}

impl CmqkaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::config("temporal kernel must be odd"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp ratio must be at least 1"));
        }
        Ok(())
    }
}

/// Conv along the time axis, BN, LIF: `[T, B, C, N]` → `[T, B, C, N]`.
#[derive(Clone, Debug)]
pub struct TemporalProjection {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub lif: LifLayer,
}

impl TemporalProjection {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize, role: Role, lif: LifParams, rng: &mut impl Rng) -> Self {
        let geom = Conv2dGeometry {
            kernel: (kernel, 1),
            stride: (1, 1),
            padding: (kernel / 2, 0),
        };
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), channels, channels, geom, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), channels),
            lif: LifLayer::new(format!("{name}.lif"), role, lif),
        }
    }

    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>) -> Result<Var<'a>> {
        let s = x.shape().to_vec();
        let (t, b, c, n) = (s[0], s[1], s[2], s[3]);
        let seq = x.permute(&[1, 3, 2, 0])?.reshape(&[b * n, c, t, 1])?;
        let z = self.bn.forward(ctx, &self.conv.forward(ctx, &seq)?)?;
        let z = z.reshape(&[b, n, c, t])?.permute(&[3, 0, 2, 1])?;
        self.lif.forward(ctx, &z)
    }
}

/// One direction (`query ← key`) of cross-modal attention.
#[derive(Clone, Debug)]
pub struct Direction {
    pub spatial_q: ConvBnLif,
    pub spatial_k: ConvBnLif,
    pub spatial_mask: LifLayer,
    pub temporal_q: TemporalProjection,
    pub temporal_k: TemporalProjection,
    pub temporal_mask: LifLayer,
    pub heads: usize,
}

impl Direction {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize, cfg: &CmqkaConfig, lif: LifParams, rng: &mut impl Rng) -> Self {
        let k = cfg.temporal_kernel;
        Self {
            spatial_q: ConvBnLif::pointwise(store, &format!("{name}.spatial.q"), channels, channels, Role::Q, lif, rng),
            spatial_k: ConvBnLif::pointwise(store, &format!("{name}.spatial.k"), channels, channels, Role::K, lif, rng),
            spatial_mask: LifLayer::new(format!("{name}.spatial.mask"), Role::Attn, lif),
            temporal_q: TemporalProjection::new(store, &format!("{name}.temporal.q"), channels, k, Role::Q, lif, rng),
            temporal_k: TemporalProjection::new(store, &format!("{name}.temporal.k"), channels, k, Role::K, lif, rng),
            temporal_mask: LifLayer::new(format!("{name}.temporal.mask"), Role::Attn, lif),
            heads,
        }
    }

    /// Spatial complement `S = A⁽ˢ⁾ ⊙ K`, inputs and output `[T, B, C, N]`.
    pub fn spatial<'a>(&self, ctx: &Ctx<'a>, query: &Var<'a>, key: &Var<'a>) -> Result<Var<'a>> {
        let q = project(ctx, &self.spatial_q, query)?;
        let k = project(ctx, &self.spatial_k, key)?;
        let a = token_mask(ctx, &q, self.heads, &self.spatial_mask)?;
        apply_mask(&a, &k)
    }

    /// Temporal complement `T = A⁽ᵗ⁾ ⊙ K⁽ᵗ⁾` with projections along time.
    pub fn temporal<'a>(&self, ctx: &Ctx<'a>, query: &Var<'a>, key: &Var<'a>) -> Result<Var<'a>> {
        let q = self.temporal_q.forward(ctx, query)?;
        let k = self.temporal_k.forward(ctx, key)?;
        let a = token_mask(ctx, &q, self.heads, &self.temporal_mask)?;
        apply_mask(&a, &k)
    }
}

/// `H = mean_N(S) ⊙ mean_T(T)` broadcast to `[T, B, C, N]`; a missing pathway
/// contributes the multiplicative identity.
pub fn cross_features<'a>(s_feat: Option<&Var<'a>>, t_feat: Option<&Var<'a>>) -> Result<Var<'a>> {
    let s_red = s_feat.map(|s| s.mean_axis(3)).transpose()?;
    let t_red = t_feat.map(|t| t.mean_axis(0)).transpose()?;
    match (s_red, t_red) {
        (Some(s), Some(t)) => s.mul(&t),
        (Some(s), None) => Ok(s),
        (None, Some(t)) => Ok(t),
        (None, None) => Err(Error::config("at least one pathway must be enabled")),
    }
}

/// `original + α · H`, broadcasting `H` over whichever axes it was pooled on.
pub fn integrate<'a>(original: &Var<'a>, h: &Var<'a>, alpha: &Var<'a>) -> Result<Var<'a>> {
    original.add(&h.mul(alpha)?)
}

/// Per-modality residual half of the block: input neuron, `α`, and final MLP.
#[derive(Clone, Debug)]
pub struct Branch {
    pub input: LifLayer,
    pub alpha: ParamId,
    pub mlp_input: LifLayer,
    pub mlp: SpikingMlp,
}

impl Branch {
    fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: &CmqkaConfig, lif: LifParams, rng: &mut impl Rng) -> Self {
        Self {
            input: LifLayer::new(format!("{name}.in"), Role::Input, lif),
            alpha: store.add(format!("{name}.alpha"), Tensor::scalar(cfg.alpha_init), true),
            mlp_input: LifLayer::new(format!("{name}.mlp.in"), Role::Input, lif),
            mlp: SpikingMlp::new(store, &format!("{name}.mlp"), channels, cfg.mlp_ratio, lif, rng),
        }
    }

    /// `out = out_pre + MLP(SN(out_pre))`, with `out_pre` shaped `[T, B, C, H, W]`.
    fn finish<'a>(&self, ctx: &Ctx<'a>, out_pre: &Var<'a>) -> Result<Var<'a>> {
        let m = instrument::scope("mlp", || -> Result<_> {
            let s = self.mlp_input.forward(ctx, out_pre)?;
            self.mlp.forward(ctx, &s)
        })?;
        out_pre.add(&m)
    }
}

/// Real-valued block outputs, same shape as the inputs.
#[derive(Debug)]
pub struct CmqkaOutput<'a> {
    pub video: Var<'a>,
    pub audio: Var<'a>,
}

#[derive(Clone, Debug)]
pub struct CmqkaBlock {
    pub video: Branch,
    pub audio: Branch,
    /// Video queries attending to audio keys.
    pub v_from_a: Direction,
    pub a_from_v: Direction,
    pub pathways: Pathways,
    pub channels: usize,
}

impl CmqkaBlock {
    /// Parameters are named `{name}.v.*`, `{name}.a.*`, `{name}.va.*` and `{name}.av.*`.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize, cfg: &CmqkaConfig, lif: LifParams, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::config(format!("{channels} channels not divisible by {heads} heads")));
        }
        Ok(Self {
            video: Branch::new(store, &format!("{name}.v"), channels, cfg, lif, rng),
            audio: Branch::new(store, &format!("{name}.a"), channels, cfg, lif, rng),
            v_from_a: Direction::new(store, &format!("{name}.va"), channels, heads, cfg, lif, rng),
            a_from_v: Direction::new(store, &format!("{name}.av"), channels, heads, cfg, lif, rng),
            pathways: cfg.pathways,
            channels,
        })
    }

    fn direction<'a>(&self, ctx: &Ctx<'a>, dir: &Direction, query: &Var<'a>, key: &Var<'a>) -> Result<Var<'a>> {
        let s = self.pathways.spatial().then(|| dir.spatial(ctx, query, key)).transpose()?;
        let t = self.pathways.temporal().then(|| dir.temporal(ctx, query, key)).transpose()?;
        cross_features(s.as_ref(), t.as_ref())
    }

    /// Both directions of attention on spike tokens `[T, B, C, N]`; returns the
    /// pooled cross features `(H^{v←a}, H^{a←v})`.
    pub fn cross_attention<'a>(&self, ctx: &Ctx<'a>, video: &Var<'a>, audio: &Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        instrument::scope("attn", || {
            Ok((self.direction(ctx, &self.v_from_a, video, audio)?, self.direction(ctx, &self.a_from_v, audio, video)?))
        })
    }

    /// `video`, `audio`: `[T, B, C, H, W]`.
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, video: &Var<'a>, audio: &Var<'a>) -> Result<CmqkaOutput<'a>> {
        let shape = video.shape().to_vec();
        if shape.len() != 5 || audio.shape() != shape || shape[2] != self.channels {
            return Err(Error::shape("cmqka", &shape, audio.shape()));
        }
        let (t, b, c, n) = (shape[0], shape[1], shape[2], shape[3] * shape[4]);
        let tokens = [t, b, c, n];
        let vs = self.video.input.forward(ctx, video)?;
        let as_ = self.audio.input.forward(ctx, audio)?;
        let (vt, at) = (vs.reshape(&tokens)?, as_.reshape(&tokens)?);
        let (hv, ha) = self.cross_attention(ctx, &vt, &at)?;
        let pre_v = integrate(&vt, &hv, &ctx.param(self.video.alpha))?.reshape(&shape)?;
        let pre_a = integrate(&at, &ha, &ctx.param(self.audio.alpha))?.reshape(&shape)?;
        Ok(CmqkaOutput {
            video: self.video.finish(ctx, &pre_v)?,
            audio: self.audio.finish(ctx, &pre_a)?,
        })
    }
}
