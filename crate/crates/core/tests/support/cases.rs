//! Small instances of every trainable building block, for gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snnergy_core::attention::{Qkta, Ssa};
use snnergy_core::cmqka::{CmqkaBlock, CmqkaConfig, Direction};
use snnergy_core::nn::{fold_time, unfold_time, Ctx, ParamStore, SpikingMlp};
use snnergy_core::spds::Spds;
use snnergy_core::{LifParams, Result, SpikeFn, Tape, Tensor, Var};

use super::gradcheck::{Forward, Selection};

pub struct Case {
    pub name: &'static str,
    pub store: ParamStore,
    pub inputs: Vec<Tensor>,
    pub forward: Box<Forward>,
    pub selection: Option<Box<Selection>>,
}

fn forward<F>(f: F) -> Box<Forward>
where
    F: for<'a> Fn(&Ctx<'a>, &[Var<'a>]) -> Result<Var<'a>> + 'static,
{
    Box::new(f)
}

/// Full BPTT through the reset, so the smooth forward is differentiated exactly.
pub fn attached() -> LifParams {
    LifParams {
        detach_reset: false,
        ..LifParams::default()
    }
}

/// Move BN away from the identity so its parameters carry distinct gradients.
pub fn randomize_bn(store: &mut ParamStore, rng: &mut impl Rng) {
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
    for (id, name, shape) in ids {
        let range = if name.ends_with(".gamma") {
            (0.5, 1.5)
        } else if name.ends_with(".beta") || name.ends_with(".running_mean") {
            (-0.3, 0.3)
        } else if name.ends_with(".running_var") {
            (0.5, 1.5)
        } else {
            continue;
        };
        store.set(id, Tensor::uniform(&shape, range.0, range.1, rng)).unwrap();
    }
}

fn input(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Index of the winner of every 2×2 window of `[M, C, H, W]`.
fn pool_winners(x: &Tensor) -> Vec<u32> {
    let s = x.shape();
    let mut out = Vec::new();
    for m in 0..s[0] {
        for c in 0..s[1] {
            for i in (0..s[2]).step_by(2) {
                for j in (0..s[3]).step_by(2) {
                    let cand = [(0, 0), (0, 1), (1, 0), (1, 1)];
                    let best = (0..4)
                        .max_by(|&a, &b| {
                            let va = x.get(&[m, c, i + cand[a].0, j + cand[a].1]);
                            let vb = x.get(&[m, c, i + cand[b].0, j + cand[b].1]);
                            va.partial_cmp(&vb).unwrap().then(b.cmp(&a))
                        })
                        .unwrap();
                    out.push(best as u32);
                }
            }
        }
    }
    out
}

fn spds_selection(spds: Spds) -> Box<Selection> {
    Box::new(move |store: &ParamStore, ins: &[Tensor]| {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store, false).with_spike_fn(SpikeFn::Sigmoid);
        let mut x = tape.constant(ins[0].clone());
        let mut sel = Vec::new();
        for u in &spds.units {
            let t = x.shape()[0];
            let pre = u.bn.forward(&ctx, &u.conv.forward(&ctx, &fold_time(&x).unwrap()).unwrap()).unwrap();
            sel.extend(pool_winners(pre.value()));
            x = u.lif.forward(&ctx, &unfold_time(&pre.maxpool2d().unwrap(), t).unwrap()).unwrap();
        }
        sel
    })
}

pub fn all(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lif = attached();
    let mut cases = Vec::new();

    let (l1, l2) = (
        snnergy_core::nn::LifLayer::new("l1", snnergy_core::nn::Role::Input, lif),
        snnergy_core::nn::LifLayer::new("l2", snnergy_core::nn::Role::Output, lif),
    );
    cases.push(Case {
        name: "lif_chain",
        store: ParamStore::new(),
        inputs: vec![input(&[6, 2, 10], &mut rng).scale(1.5)],
        forward: forward(move |ctx, xs| {
            let s = l1.forward(ctx, &xs[0])?;
            l2.forward(ctx, &s.mul_scalar(1.5).add_scalar(-0.2).add(&xs[0])?)
        }),
        selection: None,
    });

    let mut store = ParamStore::new();
    let m = Qkta::new(&mut store, "qkta", 4, 2, lif, &mut rng);
    randomize_bn(&mut store, &mut rng);
    cases.push(Case {
        name: "qkta",
        store,
        inputs: vec![input(&[3, 1, 4, 6], &mut rng)],
        forward: forward(move |ctx, xs| m.forward(ctx, &xs[0])),
        selection: None,
    });

    let cfg = CmqkaConfig {
        temporal_kernel: 3,
        ..CmqkaConfig::default()
    };
    for name in ["cmqka_spatial", "cmqka_temporal"] {
        let mut store = ParamStore::new();
        let d = Direction::new(&mut store, "dir", 4, 2, &cfg, lif, &mut rng);
        randomize_bn(&mut store, &mut rng);
        let spatial = name == "cmqka_spatial";
        cases.push(Case {
            name,
            store,
            inputs: vec![input(&[3, 1, 4, 6], &mut rng), input(&[3, 1, 4, 6], &mut rng)],
            forward: forward(move |ctx, xs| if spatial { d.spatial(ctx, &xs[0], &xs[1]) } else { d.temporal(ctx, &xs[0], &xs[1]) }),
            selection: None,
        });
    }

    let mut store = ParamStore::new();
    let block = CmqkaBlock::new(&mut store, "blk", 4, 2, &cfg, lif, &mut rng).unwrap();
    randomize_bn(&mut store, &mut rng);
    cases.push(Case {
        name: "cmqka_block",
        store,
        inputs: vec![input(&[2, 1, 4, 2, 3], &mut rng), input(&[2, 1, 4, 2, 3], &mut rng)],
        forward: forward(move |ctx, xs| {
            let out = block.forward(ctx, &xs[0], &xs[1])?;
            Var::concat(&[&out.video, &out.audio], 0)
        }),
        selection: None,
    });

    let mut store = ParamStore::new();
    let ssa = Ssa::new(&mut store, "ssa", 4, 2, 0.25, lif, &mut rng);
    randomize_bn(&mut store, &mut rng);
    cases.push(Case {
        name: "ssa",
        store,
        inputs: vec![input(&[3, 1, 4, 6], &mut rng)],
        forward: forward(move |ctx, xs| ssa.forward(ctx, &xs[0])),
        selection: None,
    });

    for (name, cin, cout, r, hw) in [("spds_stem", 1, 4, 4, 8), ("spds_down", 2, 4, 2, 4)] {
        let mut store = ParamStore::new();
        let spds = Spds::new(&mut store, "spds", cin, cout, r, lif, &mut rng).unwrap();
        randomize_bn(&mut store, &mut rng);
        let sel = spds_selection(spds.clone());
        cases.push(Case {
            name,
            store,
            inputs: vec![input(&[2, 1, cin, hw, hw], &mut rng)],
            forward: forward(move |ctx, xs| spds.forward(ctx, &xs[0])),
            selection: Some(sel),
        });
    }

    let mut store = ParamStore::new();
    let mlp = SpikingMlp::new(&mut store, "mlp", 4, 2, lif, &mut rng);
    randomize_bn(&mut store, &mut rng);
    cases.push(Case {
        name: "spiking_mlp",
        store,
        inputs: vec![input(&[3, 1, 4, 2, 3], &mut rng)],
        forward: forward(move |ctx, xs| mlp.forward(ctx, &xs[0])),
        selection: None,
    });
    cases
}
