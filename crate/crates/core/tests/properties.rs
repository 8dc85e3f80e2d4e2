use kpz_core::noise::NoiseSource;
use kpz_core::polymer::BrownianPath;
use kpz_core::stats::summary::wilson_interval;
use kpz_core::tiling::{phi_w, DyadicTiling, LowerBound, PathKernelLowerBound};
use kpz_core::{ExperimentConfig, MollifierSpec, NoiseField};
use proptest::prelude::*;

proptest! {
    #[test]
    fn children_nest_in_their_parent(level in 0u32..6, s in 0.0f64..1.0, y in prop::array::uniform3(-1.0f64..1.0)) {
        let t = DyadicTiling::new(3, level).unwrap();
        let fine = DyadicTiling::new(3, level + 1).unwrap();
        let c = t.cube_of(s, &y);
        let kids = t.children(&c);
        prop_assert_eq!(kids.len(), 16);
        let (t0, t1, lo, hi) = t.bounds(&c);
        for k in &kids {
            prop_assert_eq!(DyadicTiling::parent(k), c);
            let (s0, s1, klo, khi) = fine.bounds(k);
            prop_assert!(t0 <= s0 && s1 <= t1);
            for i in 0..3 {
                prop_assert!(lo[i] <= klo[i] && khi[i] <= hi[i]);
            }
        }
        prop_assert!(kids.contains(&fine.cube_of(s, &y)));
    }

    #[test]
    fn noise_cells_are_pure_functions_of_the_index(seed in any::<u64>(), k in -1000i64..1000, j in prop::array::uniform3(-50i64..50)) {
        let a = NoiseField::new(seed, 0.05, 0.25, 3).unwrap();
        let b = NoiseField::new(seed, 0.05, 0.25, 3).unwrap();
        let v = a.cell(k, &j);
        prop_assert!(v.is_finite());
        prop_assert_eq!(v.to_bits(), b.cell(k, &j).to_bits());
        prop_assert_eq!(v.to_bits(), a.reseeded(seed).cell(k, &j).to_bits());
    }

    #[test]
    fn lower_bound_sandwich_on_random_walks(steps in prop::collection::vec(prop::array::uniform3(-0.1f64..0.1), 16), probes in prop::collection::vec((0.0f64..1.0, prop::array::uniform3(-0.6f64..0.6)), 20)) {
        let mut pos = vec![0.0; 3];
        let mut w = vec![0.0; 3];
        for st in &steps {
            for i in 0..3 {
                w[i] += st[i];
            }
            pos.extend_from_slice(&w);
        }
        let path = BrownianPath::from_positions(3, 1.0 / 16.0, pos);
        let phi = MollifierSpec::new(3).unwrap();
        let bound = PathKernelLowerBound::build(&path, &phi, 4, LowerBound::Exact).unwrap();
        for (s, y) in &probes {
            let exact = phi_w(&path, &phi, *s, y);
            let mut prev = 0.0;
            for n in 0..=4 {
                let v = bound.value_at(n, *s, y).unwrap();
                prop_assert!(v >= prev && v <= exact + 1e-12, "level {}: {} after {}, exact {}", n, v, prev, exact);
                prev = v;
            }
        }
    }

    #[test]
    fn wilson_interval_brackets_the_proportion(n in 1usize..10_000, frac in 0.0f64..=1.0) {
        let k = ((n as f64) * frac).floor() as usize;
        let (lo, hi) = wilson_interval(k, n, 1.96);
        let p = k as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-12 && p <= hi + 1e-12 && hi <= 1.0);
    }

    #[test]
    fn validation_agrees_with_the_violation_list(beta in -0.5f64..1.0, dt_exp in 2i32..8, spacing_exp in 1i32..4) {
        let mut c = ExperimentConfig { beta, dt: 2f64.powi(-dt_exp), horizon: 1.0, ..Default::default() };
        c.lattice.spacing = 2f64.powi(-spacing_exp);
        c.lattice.dt = 1.0 / 64.0;
        prop_assert_eq!(c.violations().is_empty(), c.validate().is_ok());
        prop_assert_eq!(c.violations().iter().any(|v| v.constraint == "disorder"), beta < 0.0);
    }
}
