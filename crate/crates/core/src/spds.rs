//! Spiking patch downsampling with a shortcut: `LIF(F_ext(x) + F_skip(x))`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{fold_time, unfold_time, BatchNorm, Conv2d, Ctx, LifLayer, ParamStore, Role};
use crate::spike::LifParams;
use crate::tensor::Var;

/// Conv3×3 → BN → MaxPool 2×2 → LIF.
#[derive(Clone, Debug)]
pub struct DownUnit {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub lif: LifLayer,
}

impl DownUnit {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, lif: LifParams, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::square(store, &format!("{name}.conv"), cin, cout, 3, 1, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
            lif: LifLayer::new(format!("{name}.lif"), Role::Encoder, lif),
        }
    }

    fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>) -> Result<Var<'a>> {
        let t = x.shape()[0];
        let z = self.bn.forward(ctx, &self.conv.forward(ctx, &fold_time(x)?)?)?.maxpool2d()?;
        self.lif.forward(ctx, &unfold_time(&z, t)?)
    }
}

/// A downsampling block. The stem (`reduction = 4`) stacks two units and taps its
/// shortcut after the first; intermediate blocks (`reduction = 2`) use one unit and
/// tap the block input.
#[derive(Clone, Debug)]
pub struct Spds {
    pub units: Vec<DownUnit>,
    pub refine: Conv2d,
    pub refine_bn: BatchNorm,
    pub skip: Conv2d,
    pub skip_bn: BatchNorm,
    pub out: LifLayer,
    pub reduction: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Spds {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, reduction: usize, lif: LifParams, rng: &mut impl Rng) -> Result<Self> {
        let units = match reduction {
            4 => {
                if !cout.is_multiple_of(2) {
                    return Err(Error::config(format!("stem output channels {cout} must be even")));
                }
                vec![
                    DownUnit::new(store, &format!("{name}.unit0"), cin, cout / 2, lif, rng),
                    DownUnit::new(store, &format!("{name}.unit1"), cout / 2, cout, lif, rng),
                ]
            }
            2 => vec![DownUnit::new(store, &format!("{name}.unit0"), cin, cout, lif, rng)],
            r => return Err(Error::config(format!("downsampling reduction must be 2 or 4, got {r}"))),
        };
        let tap = if reduction == 4 { cout / 2 } else { cin };
        Ok(Self {
            units,
            refine: Conv2d::square(store, &format!("{name}.refine.conv"), cout, cout, 3, 1, rng),
            refine_bn: BatchNorm::new(store, &format!("{name}.refine.bn"), cout),
            skip: Conv2d::square(store, &format!("{name}.skip.conv"), tap, cout, 1, 2, rng),
            skip_bn: BatchNorm::new(store, &format!("{name}.skip.bn"), cout),
            out: LifLayer::new(format!("{name}.out"), Role::Encoder, lif),
            reduction,
            in_channels: cin,
            out_channels: cout,
        })
    }

    /// Layer sequence of the extraction branch, in execution order.
    pub fn extraction_layout(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        for _ in &self.units {
            v.extend(["conv3x3", "bn", "maxpool", "lif"]);
        }
        v.extend(["conv3x3", "bn"]);
        v
    }

    /// `x: [T, B, C_in, H, W]` → spikes `[T, B, C_out, H/r, W/r]`.
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: &Var<'a>) -> Result<Var<'a>> {
        let s = x.shape();
        if s.len() != 5 || s[2] != self.in_channels {
            return Err(Error::shape("spds", s, &[self.in_channels]));
        }
        if !s[3].is_multiple_of(self.reduction) || !s[4].is_multiple_of(self.reduction) {
            return Err(Error::shape("spds", s, &[self.reduction, self.reduction]));
        }
        let t = s[0];
        let first = self.units[0].forward(ctx, x)?;
        let tap = if self.reduction == 4 { first.clone() } else { x.clone() };
        let mut h = first;
        for u in &self.units[1..] {
            h = u.forward(ctx, &h)?;
        }
        let ext = self.refine_bn.forward(ctx, &self.refine.forward(ctx, &fold_time(&h)?)?)?;
        let skip = self.skip_bn.forward(ctx, &self.skip.forward(ctx, &fold_time(&tap)?)?)?;
        self.out.forward(ctx, &unfold_time(&ext.add(&skip)?, t)?)
    }
}
