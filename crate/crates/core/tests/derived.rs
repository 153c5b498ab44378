//! Values checked against independent computations kept in the tests.

use std::collections::{BTreeMap, BTreeSet};

use du_orch::model::{fit_power_model, plan_energy, CoreId, FrequencyLevel, PowerModelParams, SchedulingPlan};
use du_orch::sim::{ScenarioConfig, SimState};
use du_orch::telemetry::rollup_by_record_core;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn cal_power() -> PowerModelParams {
    PowerModelParams {
        p_static: 1.8,
        k_dyn: 1.9,
        p_idle: 0.3,
    }
}

#[test]
fn eight_core_energy_matches_hand_summation() {
    let freq = [1.2, 1.2, 1.5, 1.8, 2.1, 3.0, 1.2, 1.2];
    let util = [0.8, 0.75, 0.6, 0.5, 0.3, 0.1];
    let plan = SchedulingPlan {
        affinity: BTreeMap::new(),
        freq: freq.iter().map(|&f| FrequencyLevel(f)).collect(),
        isolated: [CoreId(6), CoreId(7)].into_iter().collect(),
    };
    let u: BTreeMap<CoreId, f64> = util.iter().enumerate().map(|(i, &u)| (CoreId(i as u32), u)).collect();
    // P(f) = 1.8 + 1.9 f^2, term by term:
    //   4.536*0.8 + 4.536*0.75 + 6.075*0.6 + 7.956*0.5 + 10.179*0.3 + 18.9*0.1
    //   = 3.6288 + 3.402 + 3.645 + 3.978 + 3.0537 + 1.89 = 19.5975
    //   plus 2 parked cores * 0.3 W = 20.1975
    let e = plan_energy(&cal_power(), &plan, &u).unwrap();
    assert!((e - 20.1975).abs() < 1e-9, "{e}");
}

/// Normal equations for y = a + b x solved by Cramer's rule.
fn cramer_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sy: f64 = ys.iter().sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let det = n * sxx - sx * sx;
    ((sy * sxx - sx * sxy) / det, (n * sxy - sx * sy) / det)
}

#[test]
fn noisy_fit_matches_reference_solve_and_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let samples: Vec<(FrequencyLevel, f64)> = (0..20)
        .map(|i| {
            let f = 0.8 + 0.12 * i as f64;
            let p = 12.0 + 2.5 * f * f;
            (FrequencyLevel(f), p * (1.0 + noise.sample(&mut rng)))
        })
        .collect();
    let xs: Vec<f64> = samples.iter().map(|(f, _)| f.0 * f.0).collect();
    let ys: Vec<f64> = samples.iter().map(|(_, p)| *p).collect();
    let (a, b) = cramer_fit(&xs, &ys);

    let fit = fit_power_model(&samples, 0.0).unwrap();
    assert!((fit.params.p_static - a).abs() < 1e-9 * a.abs());
    assert!((fit.params.k_dyn - b).abs() < 1e-9 * b.abs());
    assert!((fit.params.p_static - 12.0).abs() / 12.0 <= 0.05);
    assert!((fit.params.k_dyn - 2.5).abs() / 2.5 <= 0.05);
}

#[test]
fn emitted_telemetry_reproduces_simulator_utilization() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/paper_cal.cfg")).unwrap();
    let cfg = ScenarioConfig::parse(&text).unwrap();
    let tti_ns = cfg.tti_ns();
    let mut sim = SimState::new(cfg.clone()).unwrap();
    let mut plan = SchedulingPlan::uniform(cfg.n_cores, cfg.freq_levels.max());
    for slot in 0..50u32 {
        if slot == 25 {
            // pin everything to half the cores at a lower level
            plan = SchedulingPlan {
                affinity: cfg.threads.iter().map(|t| (t.id, CoreId(t.id.0 % 4))).collect(),
                freq: vec![cfg.freq_levels.get(3); cfg.n_cores],
                isolated: (4..8).map(CoreId).collect::<BTreeSet<_>>(),
            };
        }
        let out = sim.step_slot(&plan).unwrap();
        let rollup = rollup_by_record_core(&sim.emit_telemetry(), tti_ns, cfg.n_cores);
        for (c, stats) in &rollup {
            assert!(
                (stats.utilization - out.core_util[c.index()]).abs() < 1e-9,
                "slot {slot} {c}: {} vs {}",
                stats.utilization,
                out.core_util[c.index()]
            );
        }
    }
}
