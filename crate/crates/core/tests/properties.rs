use fpi_core::grid::{build_grid, Grid, GridSpec};
use fpi_core::io::{config_to_json, parse_config_str};
use fpi_core::krylov::CgSettings;
use fpi_core::plate::{nonlinear_force, plate_form_a, potential_energy, PotentialSpec};
use fpi_core::spectral::assemble_generator;
use fpi_core::state::{phase_inner_product, phase_norm, random_raw_state, total_energy, SystemState};
use fpi_core::stepper::{ForcingSpec, InitialSpec, RunConfig, Stepper};
use fpi_core::stokes::leray_project;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_grid(d: usize, n: usize, lambda: f64) -> Grid {
    build_grid(&GridSpec::uniform(d, n).with_lambda(lambda)).unwrap()
}

fn state(g: &Grid, seed: u64) -> SystemState {
    random_raw_state(g, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn phase_inner_product_is_symmetric_and_positive(n in 3usize..7, lambda in 0.0f64..5.0, s1: u64, s2: u64) {
        let g = small_grid(2, n, lambda);
        let (a, b) = (state(&g, s1), state(&g, s2));
        let ab = phase_inner_product(&g, &a, &b).unwrap();
        prop_assert_eq!(ab, phase_inner_product(&g, &b, &a).unwrap());
        prop_assert!(phase_inner_product(&g, &a, &a).unwrap() > 0.0);
        // Cauchy–Schwarz in the energy norm
        prop_assert!(ab.abs() <= phase_norm(&g, &a) * phase_norm(&g, &b) * (1.0 + 1e-12));
    }

    #[test]
    fn projection_is_divergence_free_and_idempotent(n in 3usize..9, seed: u64) {
        let g = small_grid(2, n, 2.0);
        let w = state(&g, seed).v.values;
        let cg = CgSettings { rel_tol: 1e-12, max_iter: 10_000 };
        let p = leray_project(&g, &w, cg).unwrap().field;
        prop_assert!(p.max_divergence(&g) < 1e-9);
        let pp = leray_project(&g, &p.values, cg).unwrap().field.values;
        prop_assert!((&pp - &p.values).amax() < 1e-9);
        // norm does not increase
        prop_assert!(p.values.norm() <= w.norm() * (1.0 + 1e-12));
    }

    #[test]
    fn plate_form_is_coercive_for_nonnegative_lambda(n in 3usize..8, lambda in 0.0f64..10.0, seed: u64) {
        let g = small_grid(3, n, lambda);
        let u = state(&g, seed).plate.u;
        let a = plate_form_a(&g, &u, &u);
        prop_assert!(a > 0.0);
        // λ only adds the divergence part
        let g0 = small_grid(3, n, 0.0);
        prop_assert!(a >= plate_form_a(&g0, &u, &u) * (1.0 - 1e-12));
    }

    #[test]
    fn quartic_force_is_the_energy_gradient(n in 3usize..8, kappa in 0.1f64..5.0, seed: u64) {
        let g = small_grid(3, n, 1.0);
        let spec = PotentialSpec::QuarticIsotropic { kappa };
        let s = state(&g, seed);
        let (u, h) = (s.plate.u, s.plate.ut);
        let exact = g.products().plate(&nonlinear_force(&g, &u, &spec), &h);
        let eps = 1e-4;
        let fd = (potential_energy(&g, &(&u + &h * eps), &spec) - potential_energy(&g, &(&u - &h * eps), &spec)) / (2.0 * eps);
        prop_assert!((exact - fd).abs() <= 1e-6 * exact.abs().max(1e-3));
        // homogeneity of degree four
        let e1 = potential_energy(&g, &u, &spec);
        let e2 = potential_energy(&g, &(&u * 2.0), &spec);
        prop_assert!((e2 - 16.0 * e1).abs() <= 1e-10 * e2);
    }

    #[test]
    fn generator_quadratic_form_equals_dissipation(n in 3usize..6, nu in 0.1f64..3.0, seed: u64) {
        let g = build_grid(&GridSpec::uniform(2, n).with_viscosity(nu)).unwrap();
        let m = assemble_generator(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DVector::from_fn(m.dim(), |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let s = m.from_coords(&x, 0.0);
        let q = m.inner(&(&m.matrix * &x), &x);
        let d = nu * g.gradient_form(&s.v.values, &s.plate.ut);
        prop_assert!((q - d).abs() <= 1e-10 * m.inner(&x, &x));
    }

    #[test]
    fn config_round_trips(dt in 1e-4f64..0.1, horizon in 0.1f64..10.0, seed: u64, amp in -10.0f64..10.0, n in 3usize..20) {
        let mut cfg = RunConfig::new(GridSpec::uniform(2, n));
        cfg.dt = dt;
        cfg.horizon = horizon;
        cfg.seed = seed;
        cfg.forcing = ForcingSpec::Shear { amplitude: amp };
        let back = parse_config_str(&config_to_json(&cfg)).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn unforced_linear_energy_never_increases(seed: u64, theta in 0.5f64..1.0) {
        let g = small_grid(2, 5, 2.0);
        let mut cfg = RunConfig::new(g.spec().clone());
        cfg.potential = PotentialSpec::Zero;
        cfg.forcing = ForcingSpec::Zero;
        cfg.initial = InitialSpec::Random { norm: 1.0 };
        cfg.seed = seed;
        cfg.theta = theta;
        cfg.dt = 0.05;
        cfg.horizon = 0.5;
        let st = Stepper::new(&g, &cfg).unwrap();
        let states = st.states(&st.initial_state().unwrap()).unwrap();
        let e: Vec<f64> = states.iter().map(|s| total_energy(&g, s, &cfg.potential)).collect();
        for w in e.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        for s in &states {
            prop_assert!(s.v.max_divergence(&g) < 1e-9);
        }
    }
}
