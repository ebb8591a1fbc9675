//! Central finite differences against the tape's analytic gradients.
//!
//! The forward runs with the smooth spike function so that the surrogate used
//! by backward is the true derivative. The loss is `Σ w ⊙ y` with fixed random
//! weights `w`, accumulated in f64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use snnergy_core::nn::{Ctx, ParamId, ParamStore};
use snnergy_core::{Result, SpikeFn, Tape, Tensor, Var};

pub type Forward = dyn for<'a> Fn(&Ctx<'a>, &[Var<'a>]) -> Result<Var<'a>>;

/// Discrete selection pattern of a forward (max-pool winners); coordinates whose
/// perturbation changes it sit on a kink and are excluded.
pub type Selection = dyn Fn(&ParamStore, &[Tensor]) -> Vec<u32>;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: &'static str,
    /// `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)`.
    pub rel_err: f64,
    pub grad_scale: f64,
    pub coords: usize,
    pub kinks: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err <= tol && self.grad_scale > 1e-6 && self.kinks * 20 <= self.coords
    }
}

fn loss_of(store: &ParamStore, inputs: &[Tensor], w: &Tensor, f: &Forward) -> f64 {
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, store, false).with_spike_fn(SpikeFn::Sigmoid);
    let xs: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = f(&ctx, &xs).expect("forward");
    y.value().data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn bumped(t: &Tensor, i: usize, delta: f32) -> (Tensor, f64) {
    let mut d = t.to_vec();
    let old = d[i];
    d[i] = old + delta;
    let moved = d[i] as f64 - old as f64;
    (Tensor::from_vec(t.shape(), d).unwrap(), moved)
}

pub fn check(name: &'static str, store: &ParamStore, inputs: &[Tensor], h: f32, seed: u64, f: &Forward, sel: Option<&Selection>) -> GradReport {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, false).with_spike_fn(SpikeFn::Sigmoid);
    let xs: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone(), true)).collect();
    let y = f(&ctx, &xs).expect("forward");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
    let loss = y.mul(&tape.constant(w.clone())).unwrap().sum_all();
    tape.backward(&loss).unwrap();

    let mut analytic: Vec<Vec<f32>> = xs
        .iter()
        .zip(inputs)
        .map(|(x, t)| x.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let grads = ctx.param_grads().unwrap();
    let trainable: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in &trainable {
        let g = grads.iter().find(|(g_id, _)| g_id == id).map(|(_, g)| g.to_vec());
        analytic.push(g.unwrap_or_else(|| vec![0.0; store.get(*id).numel()]));
    }

    let base_sel = sel.map(|s| s(store, inputs));
    let mut numeric: Vec<Vec<f32>> = Vec::new();
    let mut kinks = 0;
    let mut skip = Vec::new();
    let probe = |store: &ParamStore, ins: &[Tensor]| -> (f64, bool) {
        let kink = match (sel, &base_sel) {
            (Some(s), Some(b)) => s(store, ins) != *b,
            _ => false,
        };
        (loss_of(store, ins, &w, f), kink)
    };
    for k in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[k].numel());
        for i in 0..inputs[k].numel() {
            let mut ins = inputs.to_vec();
            let (plus, dp) = bumped(&inputs[k], i, h);
            let (minus, dm) = bumped(&inputs[k], i, -h);
            ins[k] = plus;
            let (lp, kp) = probe(store, &ins);
            ins[k] = minus;
            let (lm, km) = probe(store, &ins);
            skip.push(kp || km);
            col.push(((lp - lm) / (dp - dm)) as f32);
        }
        numeric.push(col);
    }
    for id in &trainable {
        let base = store.get(*id).clone();
        let mut col = Vec::with_capacity(base.numel());
        for i in 0..base.numel() {
            let mut s = store.clone();
            let (plus, dp) = bumped(&base, i, h);
            let (minus, dm) = bumped(&base, i, -h);
            s.set(*id, plus).unwrap();
            let (lp, kp) = probe(&s, inputs);
            s.set(*id, minus).unwrap();
            let (lm, km) = probe(&s, inputs);
            skip.push(kp || km);
            col.push(((lp - lm) / (dp - dm)) as f32);
        }
        numeric.push(col);
    }

    let a: Vec<f32> = analytic.concat();
    let n: Vec<f32> = numeric.concat();
    let (mut diff, mut a_max, mut n_max) = (0.0f64, 0.0f64, 0.0f64);
    for ((&ai, &ni), &sk) in a.iter().zip(&n).zip(&skip) {
        if sk {
            kinks += 1;
            continue;
        }
        diff = diff.max((ai as f64 - ni as f64).abs());
        a_max = a_max.max((ai as f64).abs());
        n_max = n_max.max((ni as f64).abs());
    }
    let scale = a_max.max(n_max);
    GradReport {
        name,
        rel_err: if scale > 0.0 { diff / scale } else { 0.0 },
        grad_scale: scale,
        coords: a.len(),
        kinks,
    }
}
