//! Property tests for the structural invariants: instance construction,
//! coefficient-equation solving, and the Hessian decomposition identity.

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use tapscope_core::linalg;
use tapscope_core::model::{make_instance, sample_goe, ModelParams, Variant};
use tapscope_core::quad::gaussian_expectation;
use tapscope_core::rng::standard_normal_vec;
use tapscope_core::se::solve_fixed_point;
use tapscope_core::sf::solve_b_sf;
use tapscope_core::tap::{hessian_quadratic_form, hessian_quadratic_form_decomposed, TapContext};

fn variant_strategy() -> impl Strategy<Value = Variant> {
    prop_oneof![Just(Variant::Fmm), Just(Variant::Ams)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn instance_invariants_hold(
        n in 4usize..48,
        lambda in 0.2f64..3.0,
        gamma0 in 0.0f64..1.0,
        variant in variant_strategy(),
        fix in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let p = ModelParams { n, lambda, gamma0, variant, fix_spike_to_ones: fix };
        let inst = make_instance(&p, seed).unwrap();
        // exact symmetry
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(inst.w[(i, j)].to_bits(), inst.w[(j, i)].to_bits());
            }
        }
        // Y - W is the rank-one spike
        let scale = lambda / n as f64;
        for i in 0..n {
            for j in 0..n {
                let r = inst.y_mat[(i, j)] - inst.w[(i, j)] - scale * inst.x[i] * inst.x[j];
                prop_assert!(r.abs() <= 1e-14 * lambda.max(1.0));
            }
        }
        // side information formula
        for i in 0..n {
            let want = gamma0 * inst.x[i] + gamma0.sqrt() * inst.g_side[i];
            prop_assert!((inst.y_side[i] - want).abs() <= 1e-15 * (1.0 + want.abs()));
        }
        if fix {
            prop_assert!(inst.x.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn coefficient_equation_solves_for_any_candidate(
        n in 6usize..24,
        k in 2usize..5,
        seed in 0u64..1000,
        b_scale in -2.0f64..2.0,
    ) {
        prop_assume!(k < n);
        let w = sample_goe(n, seed).unwrap();
        let mut r = Array2::zeros((n, k));
        for c in 0..k {
            r.column_mut(c).assign(&standard_normal_vec(seed.wrapping_add(c as u64 + 1), "prop-r", n));
        }
        let s = w.dot(&r);
        // arbitrary candidate
        let mut b0 = Array2::zeros((k, k));
        for i in 0..k {
            for j in 0..k {
                b0[(i, j)] = b_scale * (((i * 31 + j * 17 + seed as usize % 13) as f64).sin());
            }
        }
        let b = solve_b_sf(r.view(), s.view(), b0.view()).unwrap();
        let rtr = r.t().dot(&r);
        let rts = r.t().dot(&s);
        let resid = (&rts - &rtr.dot(&b) - &b.t().dot(&rtr))
            .iter()
            .fold(0.0f64, |m, &x| m.max(x.abs()));
        let scale = rts.iter().fold(1e-300f64, |m, &x| m.max(x.abs()));
        prop_assert!(resid <= 1e-10 * scale.max(1.0), "residual {} scale {}", resid, scale);
    }

    #[test]
    fn hessian_decomposition_is_an_identity(
        n in 8usize..40,
        seed in 0u64..500,
        variant in variant_strategy(),
        amp in 0.05f64..0.9,
    ) {
        let p = ModelParams { n, lambda: 1.5, gamma0: 0.3, variant, fix_spike_to_ones: true };
        let inst = make_instance(&p, seed).unwrap();
        let q_inf = solve_fixed_point(1.5, 0.3, variant.chi(), 200).unwrap().q_inf;
        let ctx = TapContext::new(&inst, q_inf).unwrap();
        let u: Array1<f64> = standard_normal_vec(seed ^ 1, "prop-u", n).mapv(|v| amp * (0.8 * v).tanh());
        let v = standard_normal_vec(seed ^ 2, "prop-v", n);
        let a = hessian_quadratic_form(&ctx, u.view(), v.view()).unwrap();
        let b = hessian_quadratic_form_decomposed(&ctx, u.view(), v.view()).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-6), "paths {} vs {}", a, b);
    }

    #[test]
    fn quadrature_is_exact_on_random_quadratics(
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        c in -2.0f64..2.0,
        mean in -1.5f64..1.5,
        var in 0.01f64..4.0,
    ) {
        let got = gaussian_expectation(|x| a * x * x + b * x + c, mean, var, 16).unwrap();
        let want = a * (mean * mean + var) + b * mean + c;
        prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()));
    }

    #[test]
    fn lowrank_opnorm_matches_dense_oracle(
        n in 4usize..20,
        k in 1usize..4,
        seed in 0u64..300,
    ) {
        let mut u = Array2::zeros((n, k));
        let mut v = Array2::zeros((n, k));
        for c in 0..k {
            u.column_mut(c).assign(&standard_normal_vec(seed + c as u64, "op-u", n));
            v.column_mut(c).assign(&standard_normal_vec(seed + 100 + c as u64, "op-v", n));
        }
        let dense = u.dot(&v.t());
        let g = dense.t().dot(&dense);
        let ev = linalg::sym_eigvals(g.view()).unwrap();
        let want = ev.last().unwrap().max(0.0).sqrt();
        let got = linalg::lowrank_opnorm(u.view(), v.view()).unwrap();
        prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0));
    }
}
