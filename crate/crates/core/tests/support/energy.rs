//! Random layer lists for the energy identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snnergy_core::profiler::{energy_estimate, E_AC_PJ, E_MAC_PJ};

/// Largest relative gap between the reported ratio `E_snn / E_ann` and the
/// closed form `(E_AC / E_MAC) · Σ f·T·F / Σ F` over `count` random reports.
pub fn identity_max_rel_err(count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let t = rng.gen_range(1..=8);
        let layers: Vec<(String, f64, f64)> = (0..rng.gen_range(1..=12))
            .map(|i| (format!("l{i}"), rng.gen_range(1.0..1e9), rng.gen_range(0.0..=1.0)))
            .collect();
        let (mut num, mut den) = (0.0, 0.0);
        for (_, f, r) in &layers {
            num += r * t as f64 * f;
            den += f;
        }
        if num == 0.0 {
            continue;
        }
        let want = (E_AC_PJ / E_MAC_PJ) * num / den;
        let rep = energy_estimate(&layers, t).unwrap();
        let got = rep.energy_snn_pj / rep.energy_ann_pj;
        worst = worst.max((got - want).abs() / want);
    }
    worst
}
