//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

#[path = "../../../core/tests/support/mod.rs"]
mod support;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use snnergy_core::attention::Ssa;
use snnergy_core::cmqka::{CmqkaBlock, CmqkaConfig, Pathways};
use snnergy_core::data_io::{generate_dataset, Dataset, DatasetSpec};
use snnergy_core::model::{AttentionKind, ModelConfig, Snnergy};
use snnergy_core::nn::{Ctx, ParamStore, Role};
use snnergy_core::profiler::{complexity_table, energy_estimate, scaling_bench, BenchKind, BenchReport, REFERENCE_TABLE};
use snnergy_core::tensor::instrument::audit_allocs;
use snnergy_core::train::{ablation_sweep, evaluate, snapshot_rates, train, AblationAxis, Trained, TrainConfig};
use snnergy_core::{LifParams, Tape, Tensor};

mod tol {
    pub const C1_RUNTIME_S: f64 = 1.0;
    pub const C2_CMQKA_RATIO: f64 = 4.0;
    pub const C2_SSA_RATIO: f64 = 16.0;
    pub const C2_CMQKA_SLOPE: (f64, f64) = (0.7, 1.3);
    pub const C2_SSA_SLOPE: (f64, f64) = (1.7, 2.3);
    pub const C2_RUNTIME_S: f64 = 120.0;
    pub const C5_REL: f64 = 1e-3;
    pub const C5_STEP: f32 = 1e-3;
    pub const C5_RUNTIME_S: f64 = 300.0;
    pub const C6_INSTANCES: u64 = 100;
    pub const C7_IDENTITY_REL: f64 = 1e-12;
    pub const C7_EXAMPLE_ABS: f64 = 1e-9;
    pub const C8_RUNTIME_S: f64 = 60.0;
    pub const C9_VAL_TOP1: f64 = 0.90;
    pub const C9_EPOCHS: usize = 30;
    pub const C9_RUNTIME_S: f64 = 600.0;
    pub const C9_CHANCE_SIGMAS: f64 = 3.0;
    pub const C10_SEEDS: u64 = 3;
    pub const C10_EPOCHS: usize = 15;
    pub const C10_PATHWAY_SLACK: f64 = 0.02;
    pub const C12_ROUND_TRIPS: usize = 1000;
    pub const C12_MUTATIONS: usize = 10_000;
}

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn c01_complexity_table() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_snnergy"))
        .args(["profile", "--preset", "paper-table", "--out"])
        .arg(dir.path())
        .output()
        .map_err(|e| e.to_string())?;
    let elapsed = secs(start.elapsed());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mut missing = Vec::new();
    for col in &REFERENCE_TABLE {
        let rep = complexity_table(&col.geometry(), &[AttentionKind::Cmqka, AttentionKind::Cmqka, AttentionKind::SsaCross])
            .map_err(|e| e.to_string())?;
        missing.extend(col.diff(&rep));
        for (_, _, cm, ss) in col.stages {
            for v in [cm, ss] {
                let cell = format!("{}.{}", v / 10, v % 10);
                if !stdout.contains(&cell) {
                    missing.push(format!("cell {cell} not printed"));
                }
            }
        }
    }
    check(
        out.status.success() && missing.is_empty() && elapsed < tol::C1_RUNTIME_S,
        format!("exit {:?}, {} mismatches {:?}, {:.3} s", out.status.code(), missing.len(), missing, elapsed),
    )
}

fn c02_scaling_law() -> Outcome {
    let start = Instant::now();
    let ns = [64, 256, 1024, 4096];
    let mut rows = scaling_bench(BenchKind::Cmqka, &ns, 96, 5, 1).map_err(|e| e.to_string())?;
    rows.extend(scaling_bench(BenchKind::Ssa, &ns, 96, 5, 1).map_err(|e| e.to_string())?);
    let rep = BenchReport { rows };
    let elapsed = secs(start.elapsed());
    let (cr, sr) = (rep.op_ratios(BenchKind::Cmqka), rep.op_ratios(BenchKind::Ssa));
    let cs = rep.time_slope(BenchKind::Cmqka).unwrap_or(f64::NAN);
    let ss = rep.time_slope(BenchKind::Ssa).unwrap_or(f64::NAN);
    let ratios_ok = cr.iter().all(|&r| r == tol::C2_CMQKA_RATIO) && sr.iter().all(|&r| r == tol::C2_SSA_RATIO);
    let within = |s: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&s);
    check(
        ratios_ok && within(cs, tol::C2_CMQKA_SLOPE) && within(ss, tol::C2_SSA_SLOPE) && elapsed < tol::C2_RUNTIME_S,
        format!("op ratios cmqka {cr:?} ssa {sr:?}; time slopes cmqka {cs:.3} ssa {ss:.3}; {elapsed:.1} s"),
    )
}

fn c03_allocation_audit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lif = LifParams::default();
    let mut store = ParamStore::new();
    let (c, side) = (192, 64);
    let blk = CmqkaBlock::new(&mut store, "blk", c, 8, &CmqkaConfig::default(), lif, &mut rng).map_err(|e| e.to_string())?;
    let v = Tensor::uniform(&[1, 1, c, side, side], -0.5, 1.5, &mut rng);
    let a = Tensor::uniform(&[1, 1, c, side, side], -0.5, 1.5, &mut rng);
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store, false);
    let (_, cm) = audit_allocs(|| blk.forward(&ctx, &tape.constant(v), &tape.constant(a)).map(|_| ()));
    let n = (side * side) as u64;
    let cm_attn = cm.largest_in("attn");

    let mut store = ParamStore::new();
    let ssa = Ssa::new(&mut store, "ssa", 96, 1, 0.125, lif, &mut rng);
    let x = Tensor::bernoulli(&[1, 1, 96, 1024], 0.25, &mut rng);
    let ctx = Ctx::new(&tape, &store, false);
    let (_, sa) = audit_allocs(|| ssa.forward(&ctx, &tape.constant(x)).map(|_| ()));
    let m = 1024u64;
    let ssa_attn = sa.largest_in("attn");
    check(
        cm_attn < n * n * 4 && cm.largest_bytes < n * n * 4 && ssa_attn >= m * m * 4,
        format!(
            "cmqka N=4096 largest attention buffer {cm_attn} B, largest overall {} B (limit {}); ssa N=1024 largest attention buffer {ssa_attn} B (>= {})",
            cm.largest_bytes,
            n * n * 4,
            m * m * 4
        ),
    )
}

fn c04_binarity() -> Outcome {
    let mut checked = 0;
    for seed in 0..10 {
        let cfg = ModelConfig { seed, ..ModelConfig::toy() };
        let mut store = ParamStore::new();
        let model = Snnergy::new(cfg.clone(), &mut store).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (h, w) = cfg.input_hw;
        let v = Tensor::uniform(&[cfg.timesteps, 2, 3, h, w], -1.0, 2.0, &mut rng);
        let a = Tensor::uniform(&[cfg.timesteps, 2, 1, h, w], -1.0, 2.0, &mut rng);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, seed % 2 == 0);
        let out = model.forward(&ctx, &tape.constant(v), &tape.constant(a)).map_err(|e| e.to_string())?;
        let records = ctx.spike_records();
        if let Some(r) = records.iter().find(|r| !r.binary) {
            return Err(format!("seed {seed}: layer {} emitted a non-binary value", r.layer));
        }
        if out.stage_outputs.iter().any(|(sv, sa)| !sv.is_binary() || !sa.is_binary()) {
            return Err(format!("seed {seed}: non-binary stage output"));
        }
        checked += records.len();
    }
    Ok(format!("{checked} spiking layer outputs over 10 seeds, all in {{0,1}}"))
}

fn c05_gradients() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for case in support::cases::all(7) {
        let r = support::gradcheck::check(case.name, &case.store, &case.inputs, tol::C5_STEP, 11, case.forward.as_ref(), case.selection.as_deref());
        ok &= r.passes(tol::C5_REL);
        lines.push(format!("{} {:.1e}", r.name, r.rel_err));
    }
    let elapsed = secs(start.elapsed());
    check(ok && elapsed < tol::C5_RUNTIME_S, format!("max rel err: {}; {elapsed:.1} s", lines.join(", ")))
}

fn c06_oracles() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for kind in support::oracle::KINDS {
        let runs: Vec<(bool, f64)> = (0..tol::C6_INSTANCES).map(|s| support::oracle::instance(kind, 500 + s)).collect();
        let agree = runs.iter().filter(|r| r.0).count();
        let active = runs.iter().filter(|r| r.1 > 0.0).count();
        ok &= agree as u64 == tol::C6_INSTANCES;
        parts.push(format!("{kind} {agree}/{} ({active} spiking)", tol::C6_INSTANCES));
    }
    check(ok, parts.join(", "))
}

fn c07_energy() -> Outcome {
    let worst = support::energy::identity_max_rel_err(10_000, 7);
    let r = energy_estimate(&[("layer".to_string(), 1e6, 0.1)], 6).map_err(|e| e.to_string())?;
    let (snn_uj, ann_uj) = (r.energy_snn_pj * 1e-6, r.energy_ann_pj * 1e-6);
    check(
        worst <= tol::C7_IDENTITY_REL && (snn_uj - 0.54).abs() <= tol::C7_EXAMPLE_ABS && (ann_uj - 4.6).abs() <= tol::C7_EXAMPLE_ABS,
        format!("identity max rel err {worst:.2e}; example {snn_uj:.12} uJ vs {ann_uj:.12} uJ"),
    )
}

fn c08_hierarchy() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::paper();
    let mut store = ParamStore::new();
    let model = Snnergy::new(cfg.clone(), &mut store).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (h, w) = cfg.input_hw;
    let v = Tensor::uniform(&[cfg.timesteps, 1, 3, h, w], -1.0, 2.0, &mut rng);
    let a = Tensor::uniform(&[cfg.timesteps, 1, 1, h, w], -1.0, 2.0, &mut rng);
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store, false);
    let out = model.forward(&ctx, &tape.constant(v), &tape.constant(a)).map_err(|e| e.to_string())?;
    let elapsed = secs(start.elapsed());
    let shapes: Vec<Vec<usize>> = out.stage_outputs.iter().map(|(v, _)| v.shape().to_vec()).collect();
    let want = [[6, 1, 192, 32, 32], [6, 1, 384, 16, 16], [6, 1, 768, 8, 8]];
    let same = shapes.len() == 3 && shapes.iter().zip(want).all(|(s, w)| s.as_slice() == w) && out.stage_outputs.iter().all(|(v, a)| v.shape() == a.shape());
    check(
        same && out.logits.shape() == [1, 6] && elapsed < tol::C8_RUNTIME_S,
        format!("stage outputs {shapes:?}, logits {:?}, {elapsed:.1} s", out.logits.shape()),
    )
}

fn toy_for(ds: &Dataset, seed: u64) -> ModelConfig {
    let s = &ds.spec;
    ModelConfig {
        input_hw: s.hw,
        video_channels: s.video_channels,
        audio_channels: s.audio_channels,
        num_classes: s.num_classes,
        seed,
        ..ModelConfig::toy()
    }
}

fn dataset(seed: u64) -> Dataset {
    generate_dataset(&DatasetSpec { seed, ..DatasetSpec::default() }).expect("default dataset spec is valid")
}

fn trained_toy() -> &'static Result<(Trained, f64), String> {
    static TRAINED: OnceLock<Result<(Trained, f64), String>> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let ds = dataset(0);
        let cfg = TrainConfig {
            epochs: tol::C9_EPOCHS,
            seed: 0,
            ..TrainConfig::default()
        };
        let start = Instant::now();
        let t = train(&toy_for(&ds, 0), &cfg, &ds).map_err(|e| e.to_string())?;
        Ok((t, secs(start.elapsed())))
    })
}

fn c09_training() -> Outcome {
    let (trained, elapsed) = trained_toy().as_ref().map_err(Clone::clone)?;
    let best = trained.metrics.best_val_top1().unwrap_or(0.0);
    let first = trained
        .metrics
        .epochs
        .iter()
        .find(|e| e.val_top1.is_some_and(|v| v >= tol::C9_VAL_TOP1))
        .map(|e| e.epoch);

    let ds = dataset(0);
    let mut store = ParamStore::new();
    let fresh = Snnergy::new(toy_for(&ds, 99), &mut store).map_err(|e| e.to_string())?;
    let (mut hits, mut n) = (0.0, 0usize);
    for split in [&ds.train, &ds.val, &ds.test] {
        let r = evaluate(&fresh, &store, split, 16).map_err(|e| e.to_string())?;
        hits += r.top1 * r.samples as f64;
        n += r.samples;
    }
    let chance = 1.0 / ds.spec.num_classes as f64;
    let sigma = (chance * (1.0 - chance) / n as f64).sqrt();
    let untrained = hits / n as f64;
    let chance_ok = (untrained - chance).abs() <= tol::C9_CHANCE_SIGMAS * sigma;
    check(
        best >= tol::C9_VAL_TOP1 && chance_ok && *elapsed < tol::C9_RUNTIME_S,
        format!(
            "best val top-1 {best:.3} (first >= {} at epoch {:?}), test top-1 {:.3}, {elapsed:.1} s; untrained {untrained:.3} on {n} samples (chance {chance} +/- {:.3})",
            tol::C9_VAL_TOP1,
            first,
            trained.metrics.test_top1.unwrap_or(f64::NAN),
            tol::C9_CHANCE_SIGMAS * sigma
        ),
    )
}

fn c10_ablations() -> Outcome {
    let (mut t1, mut t4) = (0.0, 0.0);
    let mut paths = [0.0f64; 3];
    let order = [Pathways::Spatiotemporal, Pathways::SpatialOnly, Pathways::TemporalOnly];
    let k = tol::C10_SEEDS as f64;
    for seed in 0..tol::C10_SEEDS {
        let ds = dataset(100 + seed);
        let base = toy_for(&ds, seed);
        let cfg = TrainConfig {
            epochs: tol::C10_EPOCHS,
            seed,
            ..TrainConfig::default()
        };
        let rows = ablation_sweep(&AblationAxis::Timesteps(vec![1, 4]), &base, &cfg, &ds).map_err(|e| e.to_string())?;
        t1 += rows[0].top1 / k;
        t4 += rows[1].top1 / k;
        let rows = ablation_sweep(&AblationAxis::Pathway(order.to_vec()), &base, &cfg, &ds).map_err(|e| e.to_string())?;
        for (acc, r) in paths.iter_mut().zip(&rows) {
            *acc += r.top1 / k;
        }
    }
    let best_single = paths[1].max(paths[2]);
    check(
        t4 >= t1 && paths[0] >= best_single - tol::C10_PATHWAY_SLACK,
        format!(
            "mean test top-1 over {} seeds: T=1 {t1:.3}, T=4 {t4:.3}; spatiotemporal {:.3}, spatial {:.3}, temporal {:.3}",
            tol::C10_SEEDS,
            paths[0],
            paths[1],
            paths[2]
        ),
    )
}

fn c11_firing_rates() -> Outcome {
    let (trained, _) = trained_toy().as_ref().map_err(Clone::clone)?;
    let ds = dataset(0);
    let stats = snapshot_rates(&trained.model, &trained.store, &ds.val, 16).map_err(|e| e.to_string())?;
    let groups = stats.groups();
    let outside: Vec<String> = groups
        .iter()
        .filter(|(_, &r)| !(r > 0.0 && r < 1.0))
        .map(|((s, role), r)| format!("stage{s} {} = {r}", role.as_str()))
        .collect();
    let mut parts = Vec::new();
    let mut attn_ok = true;
    for stage in [1, 2] {
        let (q, k, a) = (stats.group(stage, Role::Q), stats.group(stage, Role::K), stats.group(stage, Role::Attn));
        match (q, k, a) {
            (Some(q), Some(k), Some(a)) => {
                attn_ok &= a > (q + k) / 2.0;
                parts.push(format!("stage{stage} Attn {a:.3} vs Q/K mean {:.3}", (q + k) / 2.0));
            }
            _ => {
                attn_ok = false;
                parts.push(format!("stage{stage} rates missing"));
            }
        }
    }
    check(
        outside.is_empty() && attn_ok,
        format!("{} groups in (0,1) {outside:?}; {}", groups.len(), parts.join("; ")),
    )
}

fn c12_format() -> Outcome {
    let bad = support::fuzz::round_trip_failures(tol::C12_ROUND_TRIPS, 12);
    let rep = support::fuzz::header_mutations(tol::C12_MUTATIONS, 13);
    check(
        bad == 0 && rep.panics == 0 && rep.bad_offsets == 0,
        format!(
            "{}/{} round trips exact; {} mutations: {} rejected, {} still valid, {} panics",
            tol::C12_ROUND_TRIPS - bad,
            tol::C12_ROUND_TRIPS,
            tol::C12_MUTATIONS,
            rep.rejected,
            rep.accepted,
            rep.panics
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("C1  complexity table", c01_complexity_table),
        ("C2  scaling law", c02_scaling_law),
        ("C3  allocation audit", c03_allocation_audit),
        ("C4  binarity", c04_binarity),
        ("C5  gradient check", c05_gradients),
        ("C6  oracle equivalence", c06_oracles),
        ("C7  energy identity", c07_energy),
        ("C8  hierarchy shapes", c08_hierarchy),
        ("C9  training sanity", c09_training),
        ("C10 ablation trends", c10_ablations),
        ("C11 firing rates", c11_firing_rates),
        ("C12 format robustness", c12_format),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut out = std::io::stdout().lock();
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.to_lowercase().contains(&p.to_lowercase())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        let _ = writeln!(out, "[{tag}] {name:<24} {detail} ({:.1} s)", secs(start.elapsed()));
        let _ = out.flush();
    }
    if failed > 0 {
        let _ = writeln!(out, "{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
