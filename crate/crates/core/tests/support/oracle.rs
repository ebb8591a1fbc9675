//! Explicit-loop reference implementations of the attention blocks.
//!
//! Instances use dyadic weights, binary inputs and exact BN (unit running
//! variance, zero epsilon), so every intermediate is exactly representable and
//! the block outputs must match bit for bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snnergy_core::attention::{Qkta, Ssa};
use snnergy_core::cmqka::{CmqkaConfig, Direction, TemporalProjection};
use snnergy_core::nn::{BatchNorm, ConvBnLif, Ctx, ParamStore};
use snnergy_core::{LifParams, Tape, Tensor};

/// `[T, B, C, N]` token train with named dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Train {
    pub t: usize,
    pub b: usize,
    pub c: usize,
    pub n: usize,
    pub data: Vec<f32>,
}

impl Train {
    pub fn zeros(t: usize, b: usize, c: usize, n: usize) -> Self {
        Self { t, b, c, n, data: vec![0.0; t * b * c * n] }
    }

    pub fn from_tensor(x: &Tensor) -> Self {
        let s = x.shape();
        Self { t: s[0], b: s[1], c: s[2], n: s[3], data: x.to_vec() }
    }

    fn at(&self, t: usize, b: usize, c: usize, n: usize) -> usize {
        ((t * self.b + b) * self.c + c) * self.n + n
    }

    pub fn get(&self, t: usize, b: usize, c: usize, n: usize) -> f32 {
        self.data[self.at(t, b, c, n)]
    }

    fn set(&mut self, t: usize, b: usize, c: usize, n: usize, v: f32) {
        let i = self.at(t, b, c, n);
        self.data[i] = v;
    }
}

/// Heaviside LIF over axis 0, every other index an independent neuron.
pub fn lif(x: &Train, p: &LifParams) -> Train {
    let mut out = x.clone();
    for b in 0..x.b {
        for c in 0..x.c {
            for n in 0..x.n {
                let (mut v, mut s) = (0.0f32, 0.0f32);
                for t in 0..x.t {
                    v = p.decay() * v * (1.0 - s) + x.get(t, b, c, n);
                    s = if v >= p.v_threshold { 1.0 } else { 0.0 };
                    out.set(t, b, c, n, s);
                }
            }
        }
    }
    out
}

fn bn(x: &mut Train, store: &ParamStore, bn: &BatchNorm) {
    let (g, be) = (store.get(bn.gamma).data(), store.get(bn.beta).data());
    let (rm, rv) = (store.get(bn.running_mean).data(), store.get(bn.running_var).data());
    for t in 0..x.t {
        for b in 0..x.b {
            for c in 0..x.c {
                let inv = (1.0 / (rv[c] as f64 + bn.eps as f64).sqrt()) as f32;
                for n in 0..x.n {
                    let v = (x.get(t, b, c, n) - rm[c]) * inv * g[c] + be[c];
                    x.set(t, b, c, n, v);
                }
            }
        }
    }
}

pub fn conv_bn_lif(store: &ParamStore, m: &ConvBnLif, x: &Train) -> Train {
    let w = store.get(m.conv.weight);
    let cout = m.conv.out_channels;
    let mut y = Train::zeros(x.t, x.b, cout, x.n);
    for t in 0..x.t {
        for b in 0..x.b {
            for o in 0..cout {
                for n in 0..x.n {
                    let mut acc = 0.0;
                    for i in 0..x.c {
                        acc += w.get(&[o, i, 0, 0]) * x.get(t, b, i, n);
                    }
                    y.set(t, b, o, n, acc);
                }
            }
        }
    }
    bn(&mut y, store, &m.bn);
    lif(&y, &m.lif.params)
}

pub fn temporal_projection(store: &ParamStore, m: &TemporalProjection, x: &Train) -> Train {
    let w = store.get(m.conv.weight);
    let k = w.shape()[2];
    let pad = k / 2;
    let mut y = Train::zeros(x.t, x.b, x.c, x.n);
    for t in 0..x.t {
        for b in 0..x.b {
            for o in 0..x.c {
                for n in 0..x.n {
                    let mut acc = 0.0;
                    for i in 0..x.c {
                        for j in 0..k {
                            let src = t as isize + j as isize - pad as isize;
                            if src >= 0 && (src as usize) < x.t {
                                acc += w.get(&[o, i, j, 0]) * x.get(src as usize, b, i, n);
                            }
                        }
                    }
                    y.set(t, b, o, n, acc);
                }
            }
        }
    }
    bn(&mut y, store, &m.bn);
    lif(&y, &m.lif.params)
}

/// `K` gated by the spiking per-head channel sum of `Q`.
pub fn masked(q: &Train, k: &Train, heads: usize, p: &LifParams) -> Train {
    let ch = q.c / heads;
    let mut sums = Train::zeros(q.t, q.b, heads, q.n);
    for t in 0..q.t {
        for b in 0..q.b {
            for h in 0..heads {
                for n in 0..q.n {
                    let s: f32 = (0..ch).map(|c| q.get(t, b, h * ch + c, n)).sum();
                    sums.set(t, b, h, n, s);
                }
            }
        }
    }
    let a = lif(&sums, p);
    let mut out = k.clone();
    for t in 0..k.t {
        for b in 0..k.b {
            for c in 0..k.c {
                for n in 0..k.n {
                    out.set(t, b, c, n, k.get(t, b, c, n) * a.get(t, b, c / ch, n));
                }
            }
        }
    }
    out
}

pub fn qkta(store: &ParamStore, m: &Qkta, x: &Train) -> Train {
    let q = conv_bn_lif(store, &m.q, x);
    let k = conv_bn_lif(store, &m.k, x);
    conv_bn_lif(store, &m.proj, &masked(&q, &k, m.heads, &m.mask.params))
}

pub fn spatial(store: &ParamStore, d: &Direction, query: &Train, key: &Train) -> Train {
    let q = conv_bn_lif(store, &d.spatial_q, query);
    let k = conv_bn_lif(store, &d.spatial_k, key);
    masked(&q, &k, d.heads, &d.spatial_mask.params)
}

pub fn temporal(store: &ParamStore, d: &Direction, query: &Train, key: &Train) -> Train {
    let q = temporal_projection(store, &d.temporal_q, query);
    let k = temporal_projection(store, &d.temporal_k, key);
    masked(&q, &k, d.heads, &d.temporal_mask.params)
}

pub fn ssa(store: &ParamStore, m: &Ssa, x: &Train) -> Train {
    let q = conv_bn_lif(store, &m.q, x);
    let k = conv_bn_lif(store, &m.k, x);
    let v = conv_bn_lif(store, &m.v, x);
    let scale = store.get(m.scale).item();
    let ch = x.c / m.heads;
    let mut out = Train::zeros(x.t, x.b, x.c, x.n);
    for t in 0..x.t {
        for b in 0..x.b {
            for h in 0..m.heads {
                let cs = h * ch..(h + 1) * ch;
                for c in cs.clone() {
                    for n in 0..x.n {
                        let mut acc = 0.0;
                        for n2 in 0..x.n {
                            let score: f32 = cs.clone().map(|c2| k.get(t, b, c2, n2) * q.get(t, b, c2, n)).sum();
                            acc += v.get(t, b, c, n2) * score;
                        }
                        out.set(t, b, c, n, acc * scale);
                    }
                }
            }
        }
    }
    lif(&out, &m.out.params)
}

/// Dyadic weights in `[-1, 1]`, BN parameters on a quarter grid, exact normalization.
pub fn make_exact(store: &mut ParamStore, bns: &mut [&mut BatchNorm], rng: &mut ChaCha8Rng) {
    for b in bns.iter_mut() {
        b.eps = 0.0;
    }
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
    for (id, name, shape) in ids {
        let n: usize = shape.iter().product();
        let pick = |choices: &[f32], rng: &mut ChaCha8Rng| -> Vec<f32> { (0..n).map(|_| *choices.choose(rng).unwrap()).collect() };
        let vals = if name.ends_with(".weight") {
            (0..n).map(|_| rng.gen_range(-4i32..=4) as f32 / 4.0).collect()
        } else if name.ends_with(".gamma") {
            pick(&[0.5, 1.0, 1.5, 2.0], rng)
        } else if name.ends_with(".beta") || name.ends_with(".running_mean") {
            pick(&[-0.25, 0.0, 0.25, 0.5], rng)
        } else if name.ends_with(".running_var") {
            vec![1.0; n]
        } else if name.ends_with(".scale") {
            pick(&[0.125, 0.25, 0.5], rng)
        } else {
            continue;
        };
        store.set(id, Tensor::from_vec(&shape, vals).unwrap()).unwrap();
    }
}

/// One random block and input; returns whether block and oracle agree exactly,
/// and the firing rate of the block output.
pub fn instance(kind: &str, seed: u64) -> (bool, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = *[1usize, 2].choose(&mut rng).unwrap();
    let c = heads * rng.gen_range(1..=4);
    let (t, b, n) = (rng.gen_range(1..=4), rng.gen_range(1..=2), rng.gen_range(1..=12));
    let p = rng.gen_range(0.2..0.7);
    let lifp = LifParams::default();
    let x = Tensor::bernoulli(&[t, b, c, n], p, &mut rng);
    let y = Tensor::bernoulli(&[t, b, c, n], p, &mut rng);
    let mut store = ParamStore::new();
    let tape = Tape::inference();
    let (got, want) = match kind {
        "qkta" => {
            let mut m = Qkta::new(&mut store, "m", c, heads, lifp, &mut rng);
            make_exact(&mut store, &mut [&mut m.q.bn, &mut m.k.bn, &mut m.proj.bn], &mut rng);
            let ctx = Ctx::new(&tape, &store, false);
            let got = m.forward(&ctx, &tape.constant(x.clone())).unwrap().value().clone();
            (got, qkta(&store, &m, &Train::from_tensor(&x)))
        }
        "spatial" | "temporal" => {
            let cfg = CmqkaConfig {
                temporal_kernel: *[1usize, 3].choose(&mut rng).unwrap(),
                ..CmqkaConfig::default()
            };
            let mut d = Direction::new(&mut store, "d", c, heads, &cfg, lifp, &mut rng);
            make_exact(
                &mut store,
                &mut [&mut d.spatial_q.bn, &mut d.spatial_k.bn, &mut d.temporal_q.bn, &mut d.temporal_k.bn],
                &mut rng,
            );
            let (xq, xk) = (Train::from_tensor(&x), Train::from_tensor(&y));
            if kind == "spatial" {
                let ctx = Ctx::new(&tape, &store, false);
                let got = d.spatial(&ctx, &tape.constant(x.clone()), &tape.constant(y.clone())).unwrap().value().clone();
                (got, spatial(&store, &d, &xq, &xk))
            } else {
                let ctx = Ctx::new(&tape, &store, false);
                let got = d.temporal(&ctx, &tape.constant(x.clone()), &tape.constant(y.clone())).unwrap().value().clone();
                (got, temporal(&store, &d, &xq, &xk))
            }
        }
        "ssa" => {
            let mut m = Ssa::new(&mut store, "m", c, heads, 0.125, lifp, &mut rng);
            make_exact(&mut store, &mut [&mut m.q.bn, &mut m.k.bn, &mut m.v.bn], &mut rng);
            let ctx = Ctx::new(&tape, &store, false);
            let got = m.forward(&ctx, &tape.constant(x.clone())).unwrap().value().clone();
            (got, ssa(&store, &m, &Train::from_tensor(&x)))
        }
        other => panic!("unknown oracle kind {other}"),
    };
    let agree = got.shape() == [want.t, want.b, want.c, want.n] && got.data() == want.data.as_slice();
    (agree, got.mean())
}

pub const KINDS: [&str; 4] = ["qkta", "spatial", "temporal", "ssa"];
