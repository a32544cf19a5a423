//! Cross-module landscape properties: saddles admit movement in both
//! directions, the relaxed optimum lower-bounds every network loss, and
//! the partial-product rank chains behave as the classification argument
//! requires.

mod common;

use common::{random_instance, random_stack, zero_stack};
use deeplin::certify::{self, Verdict};
use deeplin::escape::{self, DescentOutcome};
use deeplin::linalg::{self, Tolerances};
use deeplin::net::{self, loss, WeightStack};
use deeplin::relaxed;
use deeplin::sampling::{derived_seed, normal_matrix, rng_from};
use deeplin::train;

#[test]
fn saddles_admit_descent_and_ascent() {
    let tol = Tolerances::default();
    let inst = random_instance(3, 2, 12, 301);

    // degenerate saddle: the all-zero stack
    let saddle = zero_stack(&[3, 4, 2], 12);
    let cert = certify::classify(&saddle, &inst, &tol).unwrap();
    assert_eq!(cert.verdict, Verdict::Saddle);

    let param_count = 4 * 3 + 2 * 4;
    let trials = 10 * param_count;
    match escape::random_descent(&saddle, &inst, 1e-3, trials, 302).unwrap() {
        DescentOutcome::Found { loss: l, .. } => assert!(l < loss(&saddle, &inst)),
        DescentOutcome::NotFound { best_loss } => {
            panic!("no descent at a saddle (best {best_loss})")
        }
    }
    let witness = escape::witness_ascent_degenerate(&saddle, &inst, 1e-3, 303, &tol).unwrap();
    assert!(witness.loss_increase > 0.0);

    // non-degenerate saddle: misaligned bottleneck factorization. Its
    // descent cone is second-order narrow, so the lower point is exhibited
    // directly by rotating the kept subspace toward a discarded leading
    // direction inside the same ε-ball.
    let inst2 = random_instance(5, 4, 20, 305);
    let fitted = inst2.fitted_outputs().unwrap();
    let full = linalg::svd(&fitted).unwrap();
    let bottom = full.u.columns(2, 2).into_owned();
    let r_full = inst2.least_squares_map().unwrap();
    let saddle2 =
        WeightStack::new(vec![bottom.transpose() * &r_full, bottom.clone()], 20).unwrap();
    assert_eq!(
        certify::classify(&saddle2, &inst2, &tol).unwrap().verdict,
        Verdict::Saddle
    );

    let epsilon = 1e-3;
    let theta = epsilon / (1.0 + r_full.norm());
    let top = full.u.column(0);
    let mut rotated = bottom.clone();
    rotated.set_column(
        0,
        &(bottom.column(0) * theta.cos() + top * theta.sin()),
    );
    let lower = WeightStack::new(vec![rotated.transpose() * &r_full, rotated], 20).unwrap();
    for i in 1..=2 {
        assert!((lower.weight(i) - saddle2.weight(i)).norm() <= epsilon);
    }
    assert!(loss(&lower, &inst2) < loss(&saddle2, &inst2));

    let witness2 = escape::witness_ascent_nondegenerate(&saddle2, &inst2, 307, &tol).unwrap();
    assert!(witness2.loss_increase > 0.0);
}

#[test]
fn relaxed_optimum_bounds_every_stack() {
    let inst = random_instance(4, 3, 16, 311);
    for &k in &[1usize, 2, 3] {
        let (sol, _) = relaxed::optimal_loss(&inst, k).unwrap();
        for case in 0..100u64 {
            // bottleneck width k forces rank ≤ k
            let stack = random_stack(&[4, k, 3], 16, derived_seed(312, case));
            assert!(
                loss(&stack, &inst) >= sol.optimal_loss - 1e-10,
                "k = {k}, case {case}"
            );
        }
    }
}

#[test]
fn partial_product_ranks_grow_towards_the_bottleneck() {
    let tol = Tolerances::default();
    for case in 0..20u64 {
        let stack = random_stack(&[5, 3, 2, 4, 4], 10, derived_seed(313, case));
        let inst = {
            let mut rng = rng_from(derived_seed(314, case));
            let x = normal_matrix(5, 10, 1.0, &mut rng);
            let y = normal_matrix(4, 10, 1.0, &mut rng);
            deeplin::net::Instance::new(x, y).unwrap()
        };
        let parts = net::partial_products(&stack, &inst);
        let n = stack.num_weights();
        let p = stack.dims().bottleneck_layer();

        let rank_of = |m: &deeplin::Mat| linalg::numerical_rank(m, &tol).unwrap();
        // suffix ranks grow from the output end towards the bottleneck
        let mut prev = 0;
        for i in 1..=p {
            let r = rank_of(parts.suffix_t(i));
            assert!(r >= prev, "case {case}: suffix rank dropped at {i}");
            prev = r;
        }
        // prefix ranks grow from the input end towards the bottleneck
        let mut prev = 0;
        for i in (p + 1..=n).rev() {
            let r = rank_of(parts.prefix_t(i));
            assert!(r >= prev, "case {case}: prefix rank dropped at {i}");
            prev = r;
        }

        // with full product rank k, every chain rank equals k
        let k = stack.dims().bottleneck();
        if rank_of(&stack.forward_product()) == k {
            for i in 1..=p {
                assert_eq!(rank_of(parts.suffix_t(i)), k);
            }
            for i in p + 1..=n {
                assert_eq!(rank_of(parts.prefix_t(i)), k);
            }
        }
    }
}

#[test]
fn split_identity_holds_at_every_bottleneck_choice() {
    for case in 0..10u64 {
        let stack = random_stack(&[4, 2, 2, 3], 8, derived_seed(316, case));
        let full = stack.forward_product();
        for p in stack.dims().bottleneck_layers() {
            let n = stack.num_weights();
            let suffix_t = stack.product_range(p + 1, n).transpose();
            let prefix_t = stack.product_range(1, p).transpose();
            let recombined = suffix_t.transpose() * prefix_t.transpose();
            assert!(
                (&recombined - &full).norm() <= 1e-10 * full.norm().max(1.0),
                "case {case}, split {p}"
            );
        }
    }
}

#[test]
fn degenerate_witness_retries_stay_within_budget() {
    let tol = Tolerances::default();
    let mut max_trials = 0usize;
    for case in 0..1000u64 {
        let inst = random_instance(3, 2, 10, derived_seed(317, case));
        let saddle = zero_stack(&[3, 4, 2], 10);
        let w =
            escape::witness_ascent_degenerate(&saddle, &inst, 0.05, derived_seed(318, case), &tol)
                .unwrap();
        max_trials = max_trials.max(w.trials_used);
        assert!(w.loss_increase > 0.0);
    }
    // the loop samples at most H+1 = 2 perturbations per attempt and is
    // allowed three attempts
    assert!(max_trials <= 6, "worst trials_used = {max_trials}");
}

#[test]
fn gd_endpoint_certificates_are_consistent_with_direct_checks() {
    let tol = Tolerances::default();
    let dims = deeplin::net::Dims::new(vec![4, 2, 4], 30).unwrap();
    for trial in 0..5u64 {
        let inst = train::generate_instance(
            &dims,
            &train::GenModel::GenericGaussian,
            derived_seed(319, trial),
        )
        .unwrap();
        let w0 = train::init_weights(&dims, 1.0, derived_seed(320, trial)).unwrap();
        let cfg = train::GdConfig {
            max_iters: 50_000,
            ..train::GdConfig::default()
        };
        let (w, report) = train::gradient_descent(&w0, &inst, &cfg, &tol).unwrap();
        let cert = &report.final_certificate;
        let crit = certify::is_critical(&w, &inst, &tol).unwrap();
        match cert.verdict {
            Verdict::NotCritical => assert!(!crit.critical),
            Verdict::GlobalMin | Verdict::Saddle => assert!(crit.critical),
        }
        if crit.critical && stack_in_v1(&w, &tol) {
            let c = certify::check_criticality_characterization(&w, &inst, &tol).unwrap();
            assert!(c.consistent, "trial {trial}");
        }
    }
}

fn stack_in_v1(stack: &WeightStack, tol: &Tolerances) -> bool {
    certify::check_v1(stack, tol).unwrap().in_v1 && stack.dims().is_strict_bottleneck()
}
