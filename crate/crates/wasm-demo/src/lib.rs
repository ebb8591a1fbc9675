//! Browser bindings: LIF trace explorer, attention cost curves and the
//! cross-modal token mask, all returning JSON strings for the static page.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use snnergy_core::attention::{apply_mask, token_mask};
use snnergy_core::nn::{Ctx, LifLayer, ParamStore, Role};
use snnergy_core::profiler::{cmqka_dominant, ssa_dominant};
use snnergy_core::spike::lif_forward;
use snnergy_core::{LifParams, Tape, Tensor};
use thiserror::Error;
use wasm_bindgen::prelude::*;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Core(#[from] snnergy_core::Error),
    #[error("{0}")]
    Input(&'static str),
}

pub type Result<T> = std::result::Result<T, DemoError>;

#[derive(Serialize, Debug, PartialEq)]
pub struct LifTrace {
    pub membrane: Vec<f32>,
    pub spikes: Vec<f32>,
    pub rate: f32,
}

pub fn lif_trace(inputs: &[f32], threshold: f32, tau: f32) -> Result<LifTrace> {
    let params = LifParams {
        v_threshold: threshold,
        tau,
        ..LifParams::default()
    };
    params.validate()?;
    let steps: Vec<Tensor> = inputs.iter().map(|&x| Tensor::scalar(x)).collect();
    let (spikes, trace) = lif_forward(&steps, &params)?;
    let spikes: Vec<f32> = spikes.iter().map(|s| s.as_tensor().item()).collect();
    let rate = spikes.iter().sum::<f32>() / spikes.len() as f32;
    Ok(LifTrace {
        membrane: trace.iter().map(Tensor::item).collect(),
        spikes,
        rate,
    })
}

#[derive(Serialize, Debug)]
pub struct CostCurve {
    pub n: Vec<usize>,
    pub cmqka: Vec<u64>,
    pub ssa: Vec<u64>,
    /// Token count at which the quadratic cost overtakes the linear one.
    pub crossover: usize,
}

/// Log-spaced token counts from `n_min` to `n_max`.
pub fn cost_curve(channels: usize, n_min: usize, n_max: usize, points: usize) -> Result<CostCurve> {
    if channels == 0 || n_min == 0 || n_max < n_min || points < 2 {
        return Err(DemoError::Input("need channels ≥ 1, 1 ≤ n_min ≤ n_max and at least 2 points"));
    }
    let (lo, hi) = ((n_min as f64).ln(), (n_max as f64).ln());
    let mut n: Vec<usize> = (0..points)
        .map(|i| (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp().round() as usize)
        .collect();
    n.dedup();
    Ok(CostCurve {
        cmqka: n.iter().map(|&n| cmqka_dominant(n, channels)).collect(),
        ssa: n.iter().map(|&n| ssa_dominant(n, channels)).collect(),
        n,
        crossover: channels,
    })
}

/// `[T][C][N]` grids of one sample.
#[derive(Serialize, Debug)]
pub struct MaskDemo {
    pub query: Vec<Vec<Vec<f32>>>,
    pub key: Vec<Vec<Vec<f32>>>,
    /// `[T][heads][N]`.
    pub mask: Vec<Vec<Vec<f32>>>,
    pub masked_key: Vec<Vec<Vec<f32>>>,
    pub kept: f32,
}

fn grids(t: &Tensor) -> Vec<Vec<Vec<f32>>> {
    let s = t.shape();
    let (steps, cols) = (s[0], s[s.len() - 1]);
    let rows = t.numel() / (steps * cols);
    let d = t.data();
    (0..steps)
        .map(|i| {
            let frame = &d[i * rows * cols..(i + 1) * rows * cols];
            frame.chunks(cols).map(<[f32]>::to_vec).collect()
        })
        .collect()
}

/// Random binary query and key trains, the per-head token mask the query
/// produces, and the key after masking.
pub fn mask_demo(steps: usize, channels: usize, tokens: usize, heads: usize, q_density: f64, k_density: f64, seed: u64) -> Result<MaskDemo> {
    if steps == 0 || tokens == 0 || heads == 0 || !channels.is_multiple_of(heads) || channels == 0 {
        return Err(DemoError::Input("channels must be a positive multiple of heads"));
    }
    if !(0.0..=1.0).contains(&q_density) || !(0.0..=1.0).contains(&k_density) {
        return Err(DemoError::Input("densities must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [steps, 1, channels, tokens];
    let q = Tensor::bernoulli(&shape, q_density, &mut rng);
    let k = Tensor::bernoulli(&shape, k_density, &mut rng);
    let store = ParamStore::new();
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store, false);
    let neuron = LifLayer::new("mask", Role::Attn, LifParams::default());
    let mask = token_mask(&ctx, &tape.constant(q.clone()), heads, &neuron)?;
    let out = apply_mask(&mask, &tape.constant(k.clone()))?;
    let kept = out.value().data().iter().sum::<f32>() / k.data().iter().sum::<f32>().max(1.0);
    Ok(MaskDemo {
        query: grids(&q),
        key: grids(&k),
        mask: grids(&mask.value().reshape(&[steps, heads, tokens])?),
        masked_key: grids(out.value()),
        kept,
    })
}

fn js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    let v = r.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = lifTrace)]
pub fn lif_trace_js(inputs: &[f32], threshold: f32, tau: f32) -> std::result::Result<String, JsValue> {
    js(lif_trace(inputs, threshold, tau))
}

#[wasm_bindgen(js_name = costCurve)]
pub fn cost_curve_js(channels: usize, n_min: usize, n_max: usize, points: usize) -> std::result::Result<String, JsValue> {
    js(cost_curve(channels, n_min, n_max, points))
}

#[wasm_bindgen(js_name = maskDemo)]
pub fn mask_demo_js(steps: usize, channels: usize, tokens: usize, heads: usize, q_density: f64, k_density: f64, seed: u32) -> std::result::Result<String, JsValue> {
    js(mask_demo(steps, channels, tokens, heads, q_density, k_density, seed as u64))
}
