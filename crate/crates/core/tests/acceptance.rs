//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance -- 3 7` runs criteria 3 and 7 only.

use kpz_core::config::LatticeParams;
use kpz_core::lattice::{InitialCondition, LatticeSetup, SheGrid, SlabOrder};
use kpz_core::mollifier::{heat_solve, HeatState, Profile};
use kpz_core::noise::{besov_scaling_check, parabolic_bump, parabolic_bump_norm_sq};
use kpz_core::polymer::{partition_function, PolymerSampler};
use kpz_core::rng;
use kpz_core::stats::covariance::{covariance_overlap, covariance_pair_many, powerlaw_fit};
use kpz_core::stats::summary::mean_se;
use kpz_core::stats::tails::{tail_study, TailSource, MIN_EXCEEDANCES};
use kpz_core::stats::theorem::{narrow_wedge_mean, theorem1_gap, GapPlan, GapVariant};
use kpz_core::tiling::{DyadicTiling, TilingSampler};
use kpz_core::{lattice, ExperimentConfig};
use std::sync::Arc;
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = fn() -> Outcome;

fn desk() -> ExperimentConfig {
    ExperimentConfig { dim: 3, beta: 0.2, dt: 0.05, dx: 0.25, horizon: 20.0, samples: 10_000, seed: 20_240_901, ..Default::default() }
}

/// Unbiasedness of the Monte Carlo partition function.
fn crit1() -> Outcome {
    let zero = ExperimentConfig { beta: 0.0, ..desk() };
    let e = partition_function(&zero, &zero.noise(0).unwrap(), &[0.0; 3], 20.0).unwrap();
    let exact = e.z.to_bits() == 1f64.to_bits() && e.se.to_bits() == 0f64.to_bits();

    let cfg = ExperimentConfig { samples: 256, ..desk() };
    let sampler = PolymerSampler::new(&cfg).unwrap();
    let z: Vec<f64> = (0..200u64)
        .map(|s| {
            let c = ExperimentConfig { seed: rng::derive_seed(cfg.seed, rng::tag::REPLICA, s), ..cfg.clone() };
            sampler.clone().with_path_seed(c.path_seed(0)).estimate(&c.noise(0).unwrap(), &[0.0; 3], 20.0).unwrap().z
        })
        .collect();
    let (m, se) = mean_se(&z);
    let pass = exact && (m - 1.0).abs() <= 3.0 * se;
    outcome(pass, format!("beta=0: z={} se={}; beta=0.2: mean over 200 seeds {m:.4} +- {se:.4}", e.z, e.se))
}

const SEPARATIONS: [f64; 3] = [0.0, 1.0, 2.0];

fn pair_covariances() -> Vec<(f64, f64)> {
    let cfg = ExperimentConfig { samples: 1000, ..desk() };
    let seps: Vec<Vec<f64>> = SEPARATIONS.iter().map(|&r| vec![r, 0.0, 0.0]).collect();
    covariance_pair_many(&cfg, &seps, 20.0, 100).unwrap().into_iter().map(|p| (p.value, p.se)).collect()
}

fn overlap_at(r: f64, horizon: f64, samples: usize) -> (f64, f64) {
    covariance_overlap(&desk(), &[r, 0.0, 0.0], horizon, samples).unwrap().excess()
}

/// Second moment identity at the origin.
fn crit2() -> Outcome {
    let cfg = ExperimentConfig { samples: 2000, ..desk() };
    let v = kpz_core::stats::covariance::variance_at_origin(&cfg, 20.0, 100).unwrap();
    let (o, ose) = overlap_at(0.0, 20.0, 100_000);
    // 95% intervals on each side must overlap.
    let pass = (v.value - o).abs() <= 1.96 * (v.se + ose);
    outcome(pass, format!("Var Z = {:.5} +- {:.5} (100 x 2000 paths), overlap oracle {o:.5} +- {ose:.5}", v.value, v.se))
}

/// Covariance structure and its decay.
fn crit3() -> Outcome {
    let pairs = pair_covariances();
    let mut pass = true;
    let mut parts = vec![];
    for (&r, &(p, pse)) in SEPARATIONS.iter().zip(&pairs) {
        let (o, ose) = overlap_at(r, 20.0, 100_000);
        let ok = (p - o).abs() <= 1.96 * (pse + ose);
        pass &= ok;
        parts.push(format!("|x|={r}: pair {p:.5}+-{pse:.5} overlap {o:.5}+-{ose:.5}"));
    }
    let dist = [1.0, 1.5, 2.0, 3.0, 4.0];
    let (v, s): (Vec<f64>, Vec<f64>) = dist.iter().map(|&r| overlap_at(r, 400.0, 20_000)).unzip();
    let fit = powerlaw_fit(&dist, &v, &s).unwrap();
    pass &= (fit.exponent + 1.0).abs() <= 0.25;
    parts.push(format!("slope {:.3} +- {:.3}", fit.exponent, fit.exponent_se));
    outcome(pass, parts.join("; "))
}

/// Rescaling of the generated noise.
fn crit4() -> Outcome {
    let cfg = ExperimentConfig { dt: 1.0 / 64.0, dx: 1.0 / 16.0, ..desk() };
    let field = cfg.noise(0).unwrap();
    let r = besov_scaling_check(&field, &parabolic_bump(3), parabolic_bump_norm_sq(3), &[1.0, 0.5, 0.25], 1000, 1).unwrap();
    let pass = (r.fit.slope + 5.0).abs() <= 0.1;
    outcome(pass, format!("slope {:.4} +- {:.4} over lambda in {{1, 1/2, 1/4}}, 1000 seeds", r.fit.slope, r.fit.slope_se))
}

/// Dyadic tiling: sandwich, unbiasedness per level, L2 gap trend.
fn crit5() -> Outcome {
    let cfg = ExperimentConfig { dt: 1.0 / 16.0, dx: 1.0 / 8.0, horizon: 4.0, samples: 64, ..desk() };
    let s = TilingSampler::new(&cfg, 3).unwrap();
    let sandwich = s.sandwich(4.0, 100, 250).unwrap();
    let mut pass = sandwich.violations == 0 && sandwich.checked >= 100_000;
    let mut parts = vec![format!("sandwich {} checks, {} violations", sandwich.checked, sandwich.violations)];
    for n in 0..=3u32 {
        let z: Vec<f64> = (0..100u64)
            .map(|b| {
                let sn = TilingSampler::new(&ExperimentConfig { seed: rng::derive_seed(cfg.seed, rng::tag::REPLICA, b), ..cfg.clone() }, 3).unwrap();
                sn.estimate(&cfg.noise(b).unwrap(), n, 4.0).unwrap().z
            })
            .collect();
        let (m, se) = mean_se(&z);
        pass &= (m - 1.0).abs() <= 3.0 * se;
        parts.push(format!("E Z^({n}) = {m:.4}+-{se:.4}"));
    }
    let gaps = s.l2_gap(&[0, 1, 2, 3], 4.0, 4000).unwrap();
    // Decreasing within CIs: no level exceeds its predecessor by more than the combined 95% margin.
    let trend = gaps.windows(2).all(|w| w[1].gap <= w[0].gap + 1.96 * w[0].se.hypot(w[1].se));
    pass &= trend && gaps.last().unwrap().gap < gaps[0].gap;
    parts.push(format!("l2 gap {}", gaps.iter().map(|g| format!("{:.3e}+-{:.1e}", g.gap, g.se)).collect::<Vec<_>>().join(" > ")));
    let _ = DyadicTiling::new(3, 3).unwrap();
    outcome(pass, parts.join("; "))
}

fn bump() -> Profile {
    Arc::new(|y: &[f64]| (1.0 + (-y.iter().map(|v| v * v).sum::<f64>() / 2.0).exp()).ln())
}

/// Lattice solver: heat flow, Ito mean, positivity.
fn crit6() -> Outcome {
    let fine = LatticeSetup { dim: 3, spacing: 0.125, box_side: 10.0, dt: 1.0 / 512.0, eps: 1.0, beta: 0.0 };
    let mut g = SheGrid::new(&fine, &InitialCondition::General(bump()), 0.0, SlabOrder::Forward).unwrap();
    g.run_to(1.0, &fine.field(0).unwrap()).unwrap();
    let state = HeatState::from_log(3, bump());
    let mut worst = 0.0f64;
    for x in [[0.0, 0.0, 0.0], [0.5, 0.0, -0.25], [1.0, 1.0, 0.0], [2.0, -1.5, 0.5]] {
        let want = heat_solve(&state, 1.0, &x).unwrap();
        worst = worst.max((g.value_at(&x).unwrap() / want - 1.0).abs());
    }
    let mut pass = worst < 1e-3;

    let noisy = LatticeSetup { spacing: 0.25, box_side: 6.0, dt: 1.0 / 128.0, beta: 0.2, ..fine };
    let mut positive = true;
    let u: Vec<f64> = (0..1000u64)
        .map(|r| {
            let mut g = SheGrid::new(&noisy, &InitialCondition::General(bump()), 0.0, SlabOrder::Forward).unwrap();
            match g.run_to(1.0, &noisy.field(rng::derive_seed(7, rng::tag::REPLICA, r)).unwrap()) {
                Ok(()) => g.value_at(&[0.0; 3]).unwrap(),
                Err(_) => {
                    positive = false;
                    f64::NAN
                }
            }
        })
        .collect();
    let (m, se) = mean_se(&u);
    let target = heat_solve(&state, 1.0, &[0.0; 3]).unwrap();
    pass &= positive && (m - target).abs() <= 3.0 * se;
    outcome(pass, format!("beta=0 worst relative error {worst:.2e}; beta=0.2 E u(1,0) = {m:.4}+-{se:.4} vs {target:.4}; positivity {positive}"))
}

/// Lattice versus polymer law of u(t, x) under mesh refinement.
fn crit7() -> Outcome {
    let base = ExperimentConfig {
        samples: 100,
        dt: 0.02,
        dx: 0.25,
        horizon: 1.0,
        lattice: LatticeParams { spacing: 0.25, box_side: 3.0, dt: 1.0 / 128.0 },
        ..desk()
    };
    let fine = ExperimentConfig {
        dt: 0.01,
        dx: 0.125,
        lattice: LatticeParams { spacing: 0.125, box_side: 3.0, dt: 1.0 / 512.0 },
        ..base.clone()
    };
    let coarse = lattice::she_vs_polymer(&base, 1.0, &[0.0; 3], 100, 1000).unwrap();
    let refined = lattice::she_vs_polymer(&fine, 1.0, &[0.0; 3], 100, 600).unwrap();
    let means = [&refined.lattice, &refined.polymer].iter().all(|s| (s.mean - 1.0).abs() <= 3.0 * s.mean_se);
    let (l, p) = (&refined.lattice, &refined.polymer);
    let vars = (l.variance - p.variance).abs() <= 1.96 * (l.variance_se + p.variance_se);
    outcome(
        means && vars,
        format!(
            "coarse var lattice {:.4}+-{:.4} polymer {:.4}+-{:.4}; refined var lattice {:.4}+-{:.4} polymer {:.4}+-{:.4}; refined means {:.4}, {:.4}",
            coarse.lattice.variance,
            coarse.lattice.variance_se,
            coarse.polymer.variance,
            coarse.polymer.variance_se,
            l.variance,
            l.variance_se,
            p.variance,
            p.variance_se,
            l.mean,
            p.mean
        ),
    )
}

/// Finite-eps surrogates for the convergence of h_eps.
fn crit8() -> Outcome {
    let cfg = ExperimentConfig { lattice: LatticeParams { spacing: 0.25, box_side: 4.0, dt: 1.0 / 128.0 }, ..desk() };
    let plan = GapPlan { t: 1.0 / 16.0, x: vec![0.0; 3], eps: vec![1.0, 0.5, 0.25], seeds: 200, proxy_horizon: None, physical_box: None };
    let flat = theorem1_gap(&cfg, &GapVariant::Flat, &plan).unwrap();
    let v: Vec<(f64, f64)> = flat.rows.iter().map(|r| (r.variance, r.variance_se)).collect();
    let strict = flat.variance_decreasing();
    // At most one adjacent pair may have overlapping 95% intervals.
    let overlaps = v.windows(2).filter(|w| w[0].0 - w[1].0 <= 1.96 * (w[0].1 + w[1].1)).count();
    let mut pass = strict && overlaps <= 1;

    let still = ExperimentConfig { beta: 0.0, lattice: LatticeParams { spacing: 0.125, box_side: 10.0, dt: 1.0 / 512.0 }, ..desk() };
    let dplan = GapPlan { t: 1.0, eps: vec![1.0], seeds: 2, physical_box: Some(10.0), ..plan.clone() };
    let droplet = theorem1_gap(&still, &GapVariant::Droplet(vec![0.0; 3]), &dplan).unwrap();
    let kernel_err = droplet.rows[0].mean.exp() - 1.0;
    pass &= kernel_err.abs() < 1e-2;

    let wcfg = ExperimentConfig { samples: 200, horizon: 1.0, ..desk() };
    let w = narrow_wedge_mean(&wcfg, 1.0, &[0.0; 3], &[0.0; 3], 400).unwrap();
    pass &= (w.factor - 1.0).abs() <= 3.0 * w.factor_se && (w.mean - w.kernel).abs() <= 3.0 * w.mean_se;
    outcome(
        pass,
        format!(
            "flat gap variance {}; droplet beta=0 kernel error {kernel_err:.2e}; wedge factor {:.4}+-{:.4}, E u = {:.5} vs rho = {:.5}",
            v.iter().map(|(a, b)| format!("{a:.2e}+-{b:.1e}")).collect::<Vec<_>>().join(" > "),
            w.factor,
            w.factor_se,
            w.mean,
            w.kernel
        ),
    )
}

/// Lower tail and negative moments at two horizons.
fn crit9() -> Outcome {
    let cfg = ExperimentConfig { lattice: LatticeParams { spacing: 0.25, box_side: 12.0, dt: 1.0 / 128.0 }, ..desk() };
    let theta: Vec<f64> = (1..=25).map(|i| 0.02 * i as f64).collect();
    let recs = tail_study(&cfg, &[20.0, 40.0], &theta, TailSource::Lattice { runs: 6, stride: 4 }).unwrap();
    let (a, b) = (&recs[0], &recs[1]);
    let fit = a.envelope.as_ref();
    let resolvable = a.exceedances.iter().filter(|&&k| k >= MIN_EXCEEDANCES).count();
    let mut pass = a.samples >= 10_000 && a.monotone() && b.monotone() && resolvable >= 2;
    pass &= fit.is_some_and(|f| f.c_hat.is_finite() && f.c_hat > 0.0);
    let stable = |x: (f64, f64), y: (f64, f64)| x.0.is_finite() && y.0.is_finite() && (y.0 / x.0 - 1.0).abs() <= 0.1;
    pass &= stable(a.inverse_moment, b.inverse_moment) && stable(a.inverse_square_moment, b.inverse_square_moment);
    outcome(
        pass,
        format!(
            "N={} c_hat={:.4} on {resolvable} thresholds; E Z^-1 {:.4} -> {:.4}; E Z^-2 {:.4} -> {:.4}",
            a.samples,
            fit.map_or(f64::NAN, |f| f.c_hat),
            a.inverse_moment.0,
            b.inverse_moment.0,
            a.inverse_square_moment.0,
            b.inverse_square_moment.0
        ),
    )
}

/// Bit-identical reruns, independent of the worker count.
fn crit10() -> Outcome {
    let run = |workers: usize| {
        let cfg = ExperimentConfig { samples: 512, horizon: 5.0, workers, ..desk() };
        let field = cfg.noise(0).unwrap();
        let e = partition_function(&cfg, &field, &[0.0; 3], 5.0).unwrap();
        let c = covariance_pair_many(&ExperimentConfig { samples: 32, ..cfg.clone() }, &[vec![1.0, 0.0, 0.0]], 2.0, 6).unwrap();
        let t = tail_study(
            &ExperimentConfig { lattice: LatticeParams { spacing: 0.25, box_side: 2.0, dt: 1.0 / 128.0 }, ..cfg.clone() },
            &[0.5],
            &[0.01],
            TailSource::Lattice { runs: 3, stride: 1 },
        )
        .unwrap();
        [e.z.to_bits(), e.se.to_bits(), c[0].value.to_bits(), t[0].inverse_moment.0.to_bits()]
    };
    let (a, b, c) = (run(1), run(1), run(3));
    outcome(a == b && a == c, format!("workers 1, 1, 3 give {:x?}", [a, b, c].map(|v| v[0])))
}

fn main() {
    let checks: [(u32, &str, Check, Duration); 10] = [
        (1, "unbiasedness", crit1, Duration::from_secs(120)),
        (2, "second moment identity", crit2, Duration::from_secs(300)),
        (3, "covariance structure", crit3, Duration::from_secs(600)),
        (4, "noise scaling", crit4, Duration::from_secs(120)),
        (5, "dyadic tiling", crit5, Duration::from_secs(600)),
        (6, "lattice SHE", crit6, Duration::from_secs(600)),
        (7, "lattice vs polymer law", crit7, Duration::from_secs(900)),
        (8, "theorem 1 surrogates", crit8, Duration::from_secs(1200)),
        (9, "tails and negative moments", crit9, Duration::from_secs(900)),
        (10, "reproducibility", crit10, Duration::from_secs(60)),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check, budget) in checks {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let took = start.elapsed();
        let pass = o.pass && took <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {id} ({name}) [{:.1}s / {}s]: {}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs(),
            o.detail
        );
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
