//! The three-stage bimodal network: modality-specific stems, CMQKA stages 1 and 2,
//! cross-modal SSA in stage 3, global average pooling, fusion and a linear head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{project, ssa_core};
use crate::cmqka::{CmqkaBlock, CmqkaConfig};
use crate::error::{Error, Result, ResultExt};
use crate::nn::{ConvBnLif, Ctx, LifLayer, Linear, ParamId, ParamStore, Role, SpikingMlp};
use crate::spds::Spds;
use crate::spike::LifParams;
use crate::tensor::{instrument, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionHead {
    Concat,
    #[default]
    Average,
}

impl std::str::FromStr for FusionHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionHead::Concat),
            "average" => Ok(FusionHead::Average),
            _ => Err(Error::config(format!("unknown fusion head '{s}' (expected concat or average)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    Cmqka,
    SsaCross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsaCrossConfig {
    pub scale_init: f32,
    /// Follow each attention step with its own spiking MLP sub-block.
    pub mlp: bool,
    pub mlp_ratio: usize,
}

impl Default for SsaCrossConfig {
    fn default() -> Self {
        Self {
            scale_init: 0.125,
            mlp: true,
            mlp_ratio: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_hw: (usize, usize),
    pub timesteps: usize,
    pub video_channels: usize,
    pub audio_channels: usize,
    pub base_dim: usize,
    pub depths: [usize; 3],
    pub heads: usize,
    pub fusion: FusionHead,
    pub num_classes: usize,
    pub lif: LifParams,
    pub cmqka: CmqkaConfig,
    pub ssa: SsaCrossConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Derived description of one stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub index: usize,
    pub channels: usize,
    pub depth: usize,
    pub attention: AttentionKind,
    pub heads: usize,
    pub resolution: (usize, usize),
}

impl StageSpec {
    pub fn tokens(&self) -> usize {
        self.resolution.0 * self.resolution.1
    }
}

impl ModelConfig {
    /// Desk-scale preset: 32×32 inputs, two timesteps, eight base channels.
    pub fn toy() -> Self {
        Self {
            input_hw: (32, 32),
            timesteps: 2,
            video_channels: 3,
            audio_channels: 1,
            base_dim: 8,
            depths: [1, 1, 2],
            heads: 2,
            fusion: FusionHead::Average,
            num_classes: 4,
            lif: LifParams::default(),
            cmqka: CmqkaConfig::default(),
            ssa: SsaCrossConfig::default(),
            seed: 0,
        }
    }

    /// Full-size preset: 128×128, six timesteps, 192 base channels, eight heads.
    pub fn paper() -> Self {
        Self {
            input_hw: (128, 128),
            timesteps: 6,
            base_dim: 192,
            heads: 8,
            num_classes: 6,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::config(format!("unknown model preset '{name}' (expected toy or paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::config(format!("input size {h}x{w} must be a positive multiple of 16")));
        }
        if self.timesteps == 0 || self.num_classes < 2 || self.video_channels == 0 || self.audio_channels == 0 {
            return Err(Error::config("timesteps, channels must be >= 1 and classes >= 2"));
        }
        if self.base_dim < 2 || !self.base_dim.is_multiple_of(2) {
            return Err(Error::config("base dimension must be even"));
        }
        if self.heads == 0 || !self.base_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!("base dimension {} not divisible by {} heads", self.base_dim, self.heads)));
        }
        if self.depths.contains(&0) {
            return Err(Error::config("every stage needs at least one block"));
        }
        if self.ssa.mlp_ratio == 0 {
            return Err(Error::config("ssa mlp ratio must be at least 1"));
        }
        self.lif.validate()?;
        self.cmqka.validate()
    }

    pub fn stages(&self) -> [StageSpec; 3] {
        let (h, w) = self.input_hw;
        std::array::from_fn(|i| StageSpec {
            index: i + 1,
            channels: self.base_dim << i,
            depth: self.depths[i],
            attention: if i < 2 { AttentionKind::Cmqka } else { AttentionKind::SsaCross },
            heads: self.heads,
            resolution: (h >> (i + 2), w >> (i + 2)),
        })
    }

    /// Width of the classifier input.
    pub fn head_features(&self) -> usize {
        let c3 = self.base_dim * 4;
        match self.fusion {
            FusionHead::Concat => 2 * c3,
            FusionHead::Average => c3,
        }
    }

    /// Number of trainable scalars, obtained by building the model.
    pub fn parameter_count(&self) -> Result<usize> {
        let mut store = ParamStore::new();
        Snnergy::new(self.clone(), &mut store)?;
        Ok(store.num_trainable())
    }
}

/// One direction of cross-modal SSA: queries from one modality, keys and values from the other.
#[derive(Clone, Debug)]
pub struct SsaCrossHalf {
    pub q: ConvBnLif,
    pub k: ConvBnLif,
    pub v: ConvBnLif,
    pub scale: ParamId,
    pub attn: LifLayer,
}

impl SsaCrossHalf {
    fn new(store: &mut ParamStore, name: &str, c: usize, cfg: &SsaCrossConfig, lif: LifParams, rng: &mut impl Rng) -> Self {
        Self {
            q: ConvBnLif::pointwise(store, &format!("{name}.q"), c, c, Role::Q, lif, rng),
            k: ConvBnLif::pointwise(store, &format!("{name}.k"), c, c, Role::K, lif, rng),
            v: ConvBnLif::pointwise(store, &format!("{name}.v"), c, c, Role::V, lif, rng),
            scale: store.add(format!("{name}.scale"), Tensor::scalar(cfg.scale_init), true),
            attn: LifLayer::new(format!("{name}.attn"), Role::Attn, lif),
        }
    }

    /// `SN(Q Kᵀ V · s)` on token sequences `[T, B, C, N]`.
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, query: &Var<'a>, key: &Var<'a>, heads: usize) -> Result<Var<'a>> {
        let (q, k, v) = instrument::scope("proj", || -> Result<_> {
            Ok((project(ctx, &self.q, query)?, project(ctx, &self.k, key)?, project(ctx, &self.v, key)?))
        })?;
        instrument::scope("attn", || ssa_core(ctx, &q, &k, &v, heads, &ctx.param(self.scale), &self.attn))
    }
}

#[derive(Clone, Debug)]
pub struct MlpSubBlock {
    pub input: LifLayer,
    pub mlp: SpikingMlp,
}

impl MlpSubBlock {
    fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>) -> Result<Var<'a>> {
        let m = instrument::scope("mlp", || self.mlp.forward(ctx, &self.input.forward(ctx, x)?))?;
        x.add(&m)
    }
}

/// Stage-3 block: `x' = SN_in(x) + SN(Q_x K_yᵀ V_y · s)`, then an optional MLP residual.
#[derive(Clone, Debug)]
pub struct SsaCrossBlock {
    pub video_in: LifLayer,
    pub audio_in: LifLayer,
    pub v_from_a: SsaCrossHalf,
    pub a_from_v: SsaCrossHalf,
    pub video_mlp: Option<MlpSubBlock>,
    pub audio_mlp: Option<MlpSubBlock>,
    pub heads: usize,
    pub channels: usize,
}

impl SsaCrossBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize, cfg: &SsaCrossConfig, lif: LifParams, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::config(format!("{channels} channels not divisible by {heads} heads")));
        }
        let mlp = |store: &mut ParamStore, m: &str, rng: &mut _| {
            cfg.mlp.then(|| MlpSubBlock {
                input: LifLayer::new(format!("{name}.{m}.mlp.in"), Role::Input, lif),
                mlp: SpikingMlp::new(store, &format!("{name}.{m}.mlp"), channels, cfg.mlp_ratio, lif, rng),
            })
        };
        let video_mlp = mlp(store, "v", rng);
        let audio_mlp = mlp(store, "a", rng);
        Ok(Self {
            video_in: LifLayer::new(format!("{name}.v.in"), Role::Input, lif),
            audio_in: LifLayer::new(format!("{name}.a.in"), Role::Input, lif),
            v_from_a: SsaCrossHalf::new(store, &format!("{name}.va"), channels, cfg, lif, rng),
            a_from_v: SsaCrossHalf::new(store, &format!("{name}.av"), channels, cfg, lif, rng),
            video_mlp,
            audio_mlp,
            heads,
            channels,
        })
    }

    /// `video`, `audio`: `[T, B, C, H, W]`; returns real-valued updated streams.
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, video: &Var<'a>, audio: &Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        let shape = video.shape().to_vec();
        if shape.len() != 5 || audio.shape() != shape || shape[2] != self.channels {
            return Err(Error::shape("ssa_cross", &shape, audio.shape()));
        }
        let tokens = [shape[0], shape[1], shape[2], shape[3] * shape[4]];
        let vs = self.video_in.forward(ctx, video)?.reshape(&tokens)?;
        let as_ = self.audio_in.forward(ctx, audio)?.reshape(&tokens)?;
        let v1 = vs.add(&self.v_from_a.forward(ctx, &vs, &as_, self.heads)?)?.reshape(&shape)?;
        let a1 = as_.add(&self.a_from_v.forward(ctx, &as_, &vs, self.heads)?)?.reshape(&shape)?;
        let v2 = match &self.video_mlp {
            Some(m) => m.forward(ctx, &v1)?,
            None => v1,
        };
        let a2 = match &self.audio_mlp {
            Some(m) => m.forward(ctx, &a1)?,
            None => a1,
        };
        Ok((v2, a2))
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Cmqka(CmqkaBlock),
    SsaCross(SsaCrossBlock),
}

impl Block {
    fn forward<'a>(&self, ctx: &Ctx<'a>, v: &Var<'a>, a: &Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        match self {
            Block::Cmqka(b) => {
                let o = b.forward(ctx, v, a)?;
                Ok((o.video, o.audio))
            }
            Block::SsaCross(b) => b.forward(ctx, v, a),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub spec: StageSpec,
    /// Downsampling into this stage, one per modality (the stems for stage 1).
    pub down_video: Spds,
    pub down_audio: Spds,
    pub blocks: Vec<Block>,
    pub out_video: LifLayer,
    pub out_audio: LifLayer,
}

/// Average the two modality features, or concatenate them, then apply the classifier.
pub fn classify_head<'a>(ctx: &Ctx<'a>, head: &Linear, mode: FusionHead, f_v: &Var<'a>, f_a: &Var<'a>) -> Result<Var<'a>> {
    if f_v.shape() != f_a.shape() || f_v.shape().len() != 2 {
        return Err(Error::shape("classify_head", f_v.shape(), f_a.shape()));
    }
    let fused = match mode {
        FusionHead::Average => f_v.add(f_a)?.mul_scalar(0.5),
        FusionHead::Concat => Var::concat(&[f_v, f_a], 1)?,
    };
    head.forward(ctx, &fused)
}

/// Spatial GAP then temporal mean: `[T, B, C, H, W]` → `[B, C]`.
pub fn global_pool<'a>(x: &Var<'a>) -> Result<Var<'a>> {
    let s = x.shape().to_vec();
    x.mean_axis(4)?.mean_axis(3)?.mean_axis(0)?.reshape(&[s[1], s[2]])
}

#[derive(Debug)]
pub struct ModelOutput<'a> {
    pub logits: Var<'a>,
    pub video_features: Var<'a>,
    pub audio_features: Var<'a>,
    /// Binary stage outputs per modality, `[T, B, C_i, H_i, W_i]`.
    pub stage_outputs: Vec<(Tensor, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct Snnergy {
    pub cfg: ModelConfig,
    pub stages: Vec<Stage>,
    pub head: Linear,
}

const STAGE_SCOPES: [&str; 3] = ["stage1", "stage2", "stage3"];

impl Snnergy {
    /// Register all parameters in `store`, initialized from `cfg.seed`.
    pub fn new(cfg: ModelConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let lif = cfg.lif;
        let mut stages = Vec::new();
        let mut prev = None;
        for spec in cfg.stages() {
            let i = spec.index;
            let c = spec.channels;
            let (dv, da) = match prev {
                None => (
                    Spds::new(store, "stem.v", cfg.video_channels, c, 4, lif, &mut rng)?,
                    Spds::new(store, "stem.a", cfg.audio_channels, c, 4, lif, &mut rng)?,
                ),
                Some(pc) => (
                    Spds::new(store, &format!("stage{i}.down.v"), pc, c, 2, lif, &mut rng)?,
                    Spds::new(store, &format!("stage{i}.down.a"), pc, c, 2, lif, &mut rng)?,
                ),
            };
            let mut blocks = Vec::new();
            for b in 0..spec.depth {
                let name = format!("stage{i}.block{b}");
                blocks.push(match spec.attention {
                    AttentionKind::Cmqka => Block::Cmqka(CmqkaBlock::new(store, &name, c, spec.heads, &cfg.cmqka, lif, &mut rng)?),
                    AttentionKind::SsaCross => Block::SsaCross(SsaCrossBlock::new(store, &name, c, spec.heads, &cfg.ssa, lif, &mut rng)?),
                });
            }
            stages.push(Stage {
                down_video: dv,
                down_audio: da,
                blocks,
                out_video: LifLayer::new(format!("stage{i}.out.v"), Role::Output, lif),
                out_audio: LifLayer::new(format!("stage{i}.out.a"), Role::Output, lif),
                spec,
            });
            prev = Some(c);
        }
        let head = Linear::new(store, "head", cfg.head_features(), cfg.num_classes, &mut rng);
        Ok(Self { cfg, stages, head })
    }

    /// `video: [T, B, Cv, H, W]`, `audio: [T, B, Ca, H, W]` real-valued → logits `[B, classes]`.
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, video: &Var<'a>, audio: &Var<'a>) -> Result<ModelOutput<'a>> {
        let (h, w) = self.cfg.input_hw;
        let t = self.cfg.timesteps;
        let vs = video.shape();
        let as_ = audio.shape();
        if vs.len() != 5 || vs[0] != t || vs[2] != self.cfg.video_channels || vs[3] != h || vs[4] != w {
            return Err(Error::shape("model video input", vs, &[t, 0, self.cfg.video_channels, h, w]));
        }
        if as_.len() != 5 || as_[0] != t || as_[1] != vs[1] || as_[2] != self.cfg.audio_channels || as_[3] != h || as_[4] != w {
            return Err(Error::shape("model audio input", as_, &[t, vs[1], self.cfg.audio_channels, h, w]));
        }
        let mut v = video.clone();
        let mut a = audio.clone();
        let mut stage_outputs = Vec::new();
        for (si, stage) in self.stages.iter().enumerate() {
            let idx = stage.spec.index;
            instrument::scope(STAGE_SCOPES[si], || -> Result<()> {
                instrument::scope("down", || -> Result<()> {
                    v = stage.down_video.forward(ctx, &v)?;
                    a = stage.down_audio.forward(ctx, &a)?;
                    Ok(())
                })
                .with_context(|| format!("stage {idx} downsampling"))?;
                for (bi, block) in stage.blocks.iter().enumerate() {
                    let (nv, na) = block.forward(ctx, &v, &a).with_context(|| format!("stage {idx} block {bi}"))?;
                    v = nv;
                    a = na;
                }
                v = stage.out_video.forward(ctx, &v)?;
                a = stage.out_audio.forward(ctx, &a)?;
                Ok(())
            })?;
            stage_outputs.push((v.value().clone(), a.value().clone()));
        }
        let f_v = global_pool(&v)?;
        let f_a = global_pool(&a)?;
        let logits = instrument::scope("head", || classify_head(ctx, &self.head, self.cfg.fusion, &f_v, &f_a))?;
        Ok(ModelOutput {
            logits,
            video_features: f_v,
            audio_features: f_a,
            stage_outputs,
        })
    }
}
