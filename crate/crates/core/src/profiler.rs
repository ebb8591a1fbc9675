//! Cost model: analytic complexity table, SOP energy estimate, firing-rate
//! statistics and the runtime/memory scaling sweep.
//!
//! All operation counts are multiply-accumulates (MACs), not FLOPs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::ssa_core;
use crate::cmqka::{CmqkaBlock, CmqkaConfig};
use crate::error::{Error, Result};
use crate::model::AttentionKind;
use crate::nn::{Ctx, LifLayer, ParamStore, Role, SpikeRecord};
use crate::spike::LifParams;
use crate::tensor::instrument::{self, OpClass, OpCounts};
use crate::tensor::{Tape, Tensor};

/// Energy of one accumulate, picojoules.
pub const E_AC_PJ: f64 = 0.9;
/// Energy of one multiply-accumulate, picojoules.
pub const E_MAC_PJ: f64 = 4.6;

/// Dominant per-timestep cost of one linear cross-modal block: `N·C²`.
pub fn cmqka_dominant(n: usize, c: usize) -> u64 {
    n as u64 * c as u64 * c as u64
}

/// Dominant per-timestep cost of one self-attention block: `N²·C`.
pub fn ssa_dominant(n: usize, c: usize) -> u64 {
    n as u64 * n as u64 * c as u64
}

/// Round a MAC count to tenths of a million, half up.
pub fn tenths_of_million(ops: u64) -> u64 {
    (ops + 50_000) / 100_000
}

fn fmt_tenths(t: u64) -> String {
    format!("{}.{}", t / 10, t % 10)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageComplexity {
    pub n: usize,
    pub c: usize,
    pub kind: AttentionKind,
    pub cmqka_ops: u64,
    pub ssa_ops: u64,
    /// Table cells in tenths of a million.
    pub cmqka_tenths: u64,
    pub ssa_tenths: u64,
}

/// Complexity table. Totals are sums of the printed (rounded) cells, in tenths of a million.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ComplexityReport {
    pub stages: Vec<StageComplexity>,
    pub hybrid: u64,
    pub all_cmqka: u64,
    pub all_ssa: u64,
}

pub fn complexity_table(stages: &[(usize, usize)], hybrid_kinds: &[AttentionKind]) -> Result<ComplexityReport> {
    if stages.len() != hybrid_kinds.len() {
        return Err(Error::config(format!("{} stages but {} attention kinds", stages.len(), hybrid_kinds.len())));
    }
    if stages.iter().any(|&(n, c)| n == 0 || c == 0) {
        return Err(Error::config("token count and channels must be positive"));
    }
    let rows: Vec<_> = stages
        .iter()
        .zip(hybrid_kinds)
        .map(|(&(n, c), &kind)| {
            let (cm, ss) = (cmqka_dominant(n, c), ssa_dominant(n, c));
            StageComplexity {
                n,
                c,
                kind,
                cmqka_ops: cm,
                ssa_ops: ss,
                cmqka_tenths: tenths_of_million(cm),
                ssa_tenths: tenths_of_million(ss),
            }
        })
        .collect();
    let hybrid = rows
        .iter()
        .map(|r| match r.kind {
            AttentionKind::Cmqka => r.cmqka_tenths,
            AttentionKind::SsaCross => r.ssa_tenths,
        })
        .sum();
    Ok(ComplexityReport {
        all_cmqka: rows.iter().map(|r| r.cmqka_tenths).sum(),
        all_ssa: rows.iter().map(|r| r.ssa_tenths).sum(),
        hybrid,
        stages: rows,
    })
}

impl ComplexityReport {
    pub fn render(&self) -> String {
        let mut s = String::from("stage      N     C   linear (M MACs)   quadratic (M MACs)\n");
        for (i, r) in self.stages.iter().enumerate() {
            let _ = writeln!(s, "{:>5} {:>6} {:>5} {:>17} {:>20}", i + 1, r.n, r.c, fmt_tenths(r.cmqka_tenths), fmt_tenths(r.ssa_tenths));
        }
        let _ = writeln!(s, "hybrid total      {}", fmt_tenths(self.hybrid));
        let _ = writeln!(s, "all-linear total  {}", fmt_tenths(self.all_cmqka));
        let _ = writeln!(s, "all-quadratic     {}", fmt_tenths(self.all_ssa));
        s
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::contract(format!("report serialization: {e}")))
    }
}

/// Reference table values, in tenths of a million, for one embedding width.
#[derive(Clone, Debug)]
pub struct ReferenceColumn {
    pub base_dim: usize,
    pub stages: [(usize, usize, u64, u64); 3],
    pub hybrid: u64,
    pub all_cmqka: u64,
    pub all_ssa: u64,
}

pub const REFERENCE_TABLE: [ReferenceColumn; 2] = [
    ReferenceColumn {
        base_dim: 192,
        stages: [(1024, 192, 377, 2013), (256, 384, 377, 252), (64, 768, 377, 31)],
        hybrid: 785,
        all_cmqka: 1131,
        all_ssa: 2296,
    },
    ReferenceColumn {
        base_dim: 96,
        stages: [(1024, 96, 94, 1007), (256, 192, 94, 126), (64, 384, 94, 16)],
        hybrid: 204,
        all_cmqka: 282,
        all_ssa: 1149,
    },
];

/// Hybrid layout used by the model: linear attention in stages 1-2, quadratic in stage 3.
pub const HYBRID_KINDS: [AttentionKind; 3] = [AttentionKind::Cmqka, AttentionKind::Cmqka, AttentionKind::SsaCross];

impl ReferenceColumn {
    pub fn geometry(&self) -> Vec<(usize, usize)> {
        self.stages.iter().map(|&(n, c, _, _)| (n, c)).collect()
    }

    /// Cell-by-cell comparison; returns one line per mismatch.
    pub fn diff(&self, report: &ComplexityReport) -> Vec<String> {
        let mut out = Vec::new();
        if report.stages.len() != 3 {
            out.push(format!("expected 3 stages, got {}", report.stages.len()));
            return out;
        }
        for (i, (&(n, c, cm, ss), r)) in self.stages.iter().zip(&report.stages).enumerate() {
            if (n, c) != (r.n, r.c) {
                out.push(format!("stage {}: geometry ({n}, {c}) vs ({}, {})", i + 1, r.n, r.c));
            }
            if cm != r.cmqka_tenths {
                out.push(format!("stage {} linear: expected {} got {}", i + 1, fmt_tenths(cm), fmt_tenths(r.cmqka_tenths)));
            }
            if ss != r.ssa_tenths {
                out.push(format!("stage {} quadratic: expected {} got {}", i + 1, fmt_tenths(ss), fmt_tenths(r.ssa_tenths)));
            }
        }
        for (label, want, got) in [
            ("hybrid", self.hybrid, report.hybrid),
            ("all-linear", self.all_cmqka, report.all_cmqka),
            ("all-quadratic", self.all_ssa, report.all_ssa),
        ] {
            if want != got {
                out.push(format!("{label} total: expected {} got {}", fmt_tenths(want), fmt_tenths(got)));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerEnergy {
    pub name: String,
    pub flops: f64,
    pub firing_rate: f64,
    pub sop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyReport {
    pub timesteps: usize,
    pub layers: Vec<LayerEnergy>,
    pub total_flops: f64,
    pub total_sop: f64,
    pub energy_snn_pj: f64,
    pub energy_ann_pj: f64,
}

impl EnergyReport {
    /// `E_ann / E_snn`; infinite for a silent network.
    pub fn ratio(&self) -> f64 {
        self.energy_ann_pj / self.energy_snn_pj
    }

    pub fn render(&self) -> String {
        let mut s = String::from("layer                     MACs          f_r     SOPs\n");
        for l in &self.layers {
            let _ = writeln!(s, "{:<20} {:>12.4e} {:>10.4} {:>12.4e}", l.name, l.flops, l.firing_rate, l.sop);
        }
        let _ = writeln!(s, "T = {}", self.timesteps);
        let _ = writeln!(s, "E_snn = {:.4} uJ (AC {E_AC_PJ} pJ)", self.energy_snn_pj * 1e-6);
        let _ = writeln!(s, "E_ann = {:.4} uJ (MAC {E_MAC_PJ} pJ)", self.energy_ann_pj * 1e-6);
        let _ = writeln!(s, "ratio = {:.3}", self.ratio());
        s
    }
}

/// SOP energy model over `(name, MACs, firing rate)` triples. BN is assumed folded
/// into the preceding convolution and must not be listed.
pub fn energy_estimate(layers: &[(String, f64, f64)], timesteps: usize) -> Result<EnergyReport> {
    if timesteps == 0 {
        return Err(Error::validation("timesteps must be positive"));
    }
    let mut out = Vec::with_capacity(layers.len());
    for (name, flops, rate) in layers {
        if !(0.0..=1.0).contains(rate) {
            return Err(Error::validation(format!("layer {name}: firing rate {rate} outside [0, 1]")));
        }
        if !(*flops >= 0.0 && flops.is_finite()) {
            return Err(Error::validation(format!("layer {name}: operation count {flops} must be finite and >= 0")));
        }
        out.push(LayerEnergy {
            name: name.clone(),
            flops: *flops,
            firing_rate: *rate,
            sop: rate * timesteps as f64 * flops,
        });
    }
    let total_flops: f64 = out.iter().map(|l| l.flops).sum();
    let total_sop: f64 = out.iter().map(|l| l.sop).sum();
    Ok(EnergyReport {
        timesteps,
        layers: out,
        total_flops,
        total_sop,
        energy_snn_pj: E_AC_PJ * total_sop,
        energy_ann_pj: E_MAC_PJ * total_flops,
    })
}

/// Per-stage energy from one instrumented model forward: each stage's per-sample,
/// per-timestep MACs weighted by the stage's mean firing rate.
pub fn model_energy(counts: &OpCounts, rates: &FiringRateStats, timesteps: usize, batch: usize) -> Result<EnergyReport> {
    let per = (timesteps * batch.max(1)) as f64;
    let mut layers = Vec::new();
    for s in 1..=3 {
        let scope = format!("stage{s}");
        let macs = (counts.scope_class(&scope, OpClass::Conv) + counts.scope_class(&scope, OpClass::MatMul)) as f64 / per;
        let rate = rates.stage_rate(s).unwrap_or(0.0);
        layers.push((scope, macs, rate));
    }
    let head = (counts.scope_class("head", OpClass::Conv) + counts.scope_class("head", OpClass::MatMul)) as f64 / per;
    layers.push(("head".to_string(), head, rates.stage_rate(3).unwrap_or(0.0)));
    energy_estimate(&layers, timesteps)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRate {
    pub layer: String,
    pub stage: Option<usize>,
    pub block: Option<usize>,
    pub role: Role,
    pub ones: f64,
    pub total: u64,
}

impl LayerRate {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.ones / self.total as f64
        }
    }
}

/// Mean spike fraction per named neuron layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FiringRateStats {
    pub layers: Vec<LayerRate>,
}

fn parse_location(layer: &str) -> (Option<usize>, Option<usize>) {
    let mut parts = layer.split('.');
    let stage = match parts.next() {
        Some("stem") => Some(1),
        Some(p) => p.strip_prefix("stage").and_then(|d| d.parse().ok()),
        None => None,
    };
    let block = layer.split('.').find_map(|p| p.strip_prefix("block").and_then(|d| d.parse().ok()));
    (stage, block)
}

/// Aggregate spike records (possibly from several batches) per layer.
pub fn measure_firing_rates(records: &[SpikeRecord]) -> Result<FiringRateStats> {
    if records.is_empty() {
        return Err(Error::contract("no spike records: run an instrumented forward pass first"));
    }
    let mut stats = FiringRateStats::default();
    stats.absorb(records);
    Ok(stats)
}

impl FiringRateStats {
    pub fn absorb(&mut self, records: &[SpikeRecord]) {
        let mut index: BTreeMap<String, usize> = self.layers.iter().enumerate().map(|(i, l)| (l.layer.clone(), i)).collect();
        for r in records {
            match index.get(&r.layer) {
                Some(&i) => {
                    self.layers[i].ones += r.ones;
                    self.layers[i].total += r.total;
                }
                None => {
                    let (stage, block) = parse_location(&r.layer);
                    index.insert(r.layer.clone(), self.layers.len());
                    self.layers.push(LayerRate {
                        layer: r.layer.clone(),
                        stage,
                        block,
                        role: r.role,
                        ones: r.ones,
                        total: r.total,
                    });
                }
            }
        }
    }

    pub fn layer(&self, name: &str) -> Option<f64> {
        self.layers.iter().find(|l| l.layer == name).map(LayerRate::rate)
    }

    fn pooled<'s>(layers: impl Iterator<Item = &'s LayerRate>) -> Option<f64> {
        let (ones, total) = layers.fold((0.0, 0u64), |(o, t), l| (o + l.ones, t + l.total));
        (total > 0).then(|| ones / total as f64)
    }

    /// Element-weighted mean rate of all layers with this role in this stage.
    pub fn group(&self, stage: usize, role: Role) -> Option<f64> {
        Self::pooled(self.layers.iter().filter(|l| l.stage == Some(stage) && l.role == role))
    }

    pub fn stage_rate(&self, stage: usize) -> Option<f64> {
        Self::pooled(self.layers.iter().filter(|l| l.stage == Some(stage)))
    }

    pub fn groups(&self) -> BTreeMap<(usize, Role), f64> {
        let mut keys: Vec<_> = self.layers.iter().filter_map(|l| l.stage.map(|s| (s, l.role))).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter().filter_map(|(s, r)| self.group(s, r).map(|v| ((s, r), v))).collect()
    }

    /// Whether the mask neurons of `stage` fire more often than the mean of its Q and K neurons.
    pub fn attn_exceeds_qk(&self, stage: usize) -> Option<bool> {
        let a = self.group(stage, Role::Attn)?;
        let q = self.group(stage, Role::Q)?;
        let k = self.group(stage, Role::K)?;
        Some(a > 0.5 * (q + k))
    }

    pub fn render(&self) -> String {
        let mut s = String::from("stage  role   rate\n");
        for ((stage, role), r) in self.groups() {
            let _ = writeln!(s, "{stage:>5}  {:<5} {r:.4}", role.as_str());
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchKind {
    Cmqka,
    Ssa,
}

impl BenchKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BenchKind::Cmqka => "cmqka",
            BenchKind::Ssa => "ssa",
        }
    }

    /// Counter class holding the kind's dominant term.
    pub fn dominant_class(&self) -> OpClass {
        match self {
            BenchKind::Cmqka => OpClass::Conv,
            BenchKind::Ssa => OpClass::MatMul,
        }
    }
}

impl std::str::FromStr for BenchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cmqka" => Ok(BenchKind::Cmqka),
            "ssa" => Ok(BenchKind::Ssa),
            _ => Err(Error::config(format!("unknown bench kind '{s}' (expected cmqka, ssa or both)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub kind: BenchKind,
    pub n: usize,
    pub c: usize,
    /// Dominant-term operation count of the timed region.
    pub ops: u64,
    /// Every counted operation in the timed region.
    pub total_ops: u64,
    pub wall_ns_median: u64,
    pub peak_bytes: u64,
    /// Spread of the repeats exceeded 30% of the median.
    pub noisy: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

pub const CSV_HEADER: &str = "kind,N,C,ops,wall_ns_median,peak_bytes";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.kind.as_str(), r.n, r.c, r.ops, r.wall_ns_median, r.peak_bytes);
        }
        s
    }

    pub fn rows_of(&self, kind: BenchKind) -> Vec<&BenchRow> {
        self.rows.iter().filter(|r| r.kind == kind).collect()
    }

    /// Log-log slope of median wall time against N.
    pub fn time_slope(&self, kind: BenchKind) -> Option<f64> {
        let rows = self.rows_of(kind);
        let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.wall_ns_median.max(1) as f64).collect();
        loglog_slope(&xs, &ys)
    }

    /// Ratios of consecutive dominant-term counts.
    pub fn op_ratios(&self, kind: BenchKind) -> Vec<f64> {
        self.rows_of(kind).windows(2).map(|w| w[1].ops as f64 / w[0].ops as f64).collect()
    }
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn median(v: &mut [u64]) -> u64 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Time one isolated token-mixing operator per N on single-sample, single-step spike
/// tokens `[1, 1, C, N]`. The linear kind runs both cross-modal directions with both
/// pathways, projections included; the quadratic kind runs the single-head
/// `SN(Q Kᵀ V · s)` core on pre-spiked Q, K, V.
pub fn scaling_bench(kind: BenchKind, ns: &[usize], c: usize, repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if ns.len() < 3 {
        return Err(Error::config("the sweep needs at least three token counts"));
    }
    if ns.windows(2).any(|w| w[0] >= w[1]) || ns[0] == 0 {
        return Err(Error::config("token counts must be positive and strictly ascending"));
    }
    if c == 0 || repeats == 0 {
        return Err(Error::config("channels and repeats must be positive"));
    }
    let lif = LifParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = match kind {
        BenchKind::Cmqka => Some(CmqkaBlock::new(&mut store, "bench", c, 1, &CmqkaConfig::default(), lif, &mut rng)?),
        BenchKind::Ssa => None,
    };
    let scale = store.add("bench.scale", Tensor::scalar(0.125), false);
    let neuron = LifLayer::new("bench.attn", Role::Attn, lif);

    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let inputs: Vec<Tensor> = (0..3).map(|_| Tensor::bernoulli(&[1, 1, c, n], 0.25, &mut rng)).collect();
        let run = || -> Result<()> {
            let tape = Tape::inference();
            let ctx = Ctx::new(&tape, &store, false);
            let x: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            match &block {
                Some(b) => {
                    b.cross_attention(&ctx, &x[0], &x[1])?;
                }
                None => {
                    instrument::scope("attn", || ssa_core(&ctx, &x[0], &x[1], &x[2], 1, &ctx.param(scale), &neuron))?;
                }
            }
            Ok(())
        };
        let (r, counts) = instrument::count_ops(run);
        r?;
        let (r, allocs) = instrument::audit_allocs(run);
        r?;
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            run()?;
            times.push(start.elapsed().as_nanos() as u64);
        }
        let (lo, hi) = (*times.iter().min().unwrap(), *times.iter().max().unwrap());
        let med = median(&mut times);
        let noisy = med > 0 && (hi - lo) as f64 > 0.3 * med as f64;
        if noisy {
            log::warn!("{} N={n}: timing spread {:.0}% of median", kind.as_str(), 100.0 * (hi - lo) as f64 / med as f64);
        }
        rows.push(BenchRow {
            kind,
            n,
            c,
            ops: counts.scope_class("attn", kind.dominant_class()),
            total_ops: counts.scope("attn"),
            wall_ns_median: med,
            peak_bytes: allocs.largest_in("attn"),
            noisy,
        });
    }
    Ok(rows)
}
