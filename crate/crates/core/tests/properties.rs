mod common;

use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;
use serde_json::json;

use rcorp_core::assembly::{self, GainSet};
use rcorp_core::config::RunConfig;
use rcorp_core::graph::build_graph_matrices;
use rcorp_core::internal_model::{
    build_p_copy_pair, p_copy_defects, verify_p_copy, InternalModel, InternalModelPair, PCopyDefect,
};
use rcorp_core::linalg::{self, Mat};
use rcorp_core::lmi::{self, LmiProblem, Sense};
use rcorp_core::plant::{apply_uncertainty, ExogenousChannels, UncertaintyDelta};
use rcorp_core::verification::{self, InitialState};

use common::Instance;

fn random_gains(rng: &mut impl Rng, inst: &Instance, scale: f64) -> GainSet {
    let nz = inst.im.nz();
    GainSet {
        k1: inst.model.agents.iter().map(|a| common::uniform(rng, a.m(), a.n(), scale)).collect(),
        k2: inst.model.agents.iter().map(|a| common::uniform(rng, a.m(), nz, scale)).collect(),
    }
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn config_json(inst: &Instance, seed: u64) -> String {
    let agents: Vec<_> = inst
        .model
        .agents
        .iter()
        .map(|a| json!({ "A": rows(&a.a), "B": rows(&a.b), "C": rows(&a.c), "D": rows(&a.d) }))
        .collect();
    let pairs: Vec<_> = inst.im.pairs.iter().map(|p| json!({ "G1": rows(&p.g1), "G2": rows(&p.g2) })).collect();
    json!({
        "graph": { "adjacency": rows(inst.graph.adjacency()), "pinning": inst.graph.pinning() },
        "agents": agents,
        "exosystem": { "A0": rows(&inst.model.exo.a0) },
        "internal_model": pairs,
        "seed": seed,
    })
    .to_string()
}

fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
    a.shape() == b.shape() && (a - b).amax() <= tol * (1.0 + a.amax())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn config_round_trip_is_identity(seed in any::<u64>()) {
        let mut rng = common::rng(seed, 0);
        let inst = common::general_instance(&mut rng);
        let text = config_json(&inst, seed);
        let cfg = RunConfig::from_json_str(&text).unwrap();
        let again = RunConfig::from_json_str(&cfg.to_json_pretty()).unwrap();
        prop_assert_eq!(&cfg, &again);
        let sc = cfg.build().unwrap();
        for (a, b) in sc.model.agents.iter().zip(&inst.model.agents) {
            prop_assert_eq!(&a.a, &b.a);
            prop_assert_eq!(&a.d, &b.d);
        }
        prop_assert_eq!(sc.graph.pinning(), inst.graph.pinning());
    }

    #[test]
    fn virtual_error_is_error_minus_mu(seed in any::<u64>(), n in 2usize..6, p in 1usize..3) {
        let mut rng = common::rng(seed, 1);
        let g = common::random_graph(&mut rng, n, 1.0, (0.2, 1.5));
        let e: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_fn(p, |_, _| rng.random_range(-2.0..2.0))).collect();
        let ev = verification::virtual_errors(g.adjacency(), g.pinning(), &e);
        let mu = verification::mu_channel(g.adjacency(), g.pinning(), &e);
        for i in 0..n {
            prop_assert!((&ev[i] - (&e[i] - &mu[i])).amax() < 1e-12);
        }
        // Consensus on the leader's output zeroes every virtual error.
        let zero = vec![DVector::zeros(p); n];
        prop_assert!(verification::virtual_errors(g.adjacency(), g.pinning(), &zero).iter().all(|v| v.amax() == 0.0));
    }

    #[test]
    fn normalized_adjacency_rows_are_substochastic(seed in any::<u64>(), n in 2usize..6) {
        let mut rng = common::rng(seed, 2);
        let g = common::random_graph(&mut rng, n, 1.0, (0.2, 1.5));
        let gm = build_graph_matrices(&g, 1).unwrap();
        for i in 0..n {
            let s = gm.fa.row(i).sum();
            prop_assert!(s <= 1.0 + 1e-12);
            if g.pinning()[i] == 0.0 {
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            prop_assert!((gm.w[(i, i)] - 1.0).abs() < 1e-15);
        }
        prop_assert!(gm.r_threshold >= gm.sigma_max * gm.sigma_max * (1.0 - 1e-12));
    }

    #[test]
    fn global_closed_loop_is_a_permutation_of_the_local_composite(seed in any::<u64>()) {
        let mut rng = common::rng(seed, 3);
        let inst = common::general_instance(&mut rng);
        let k = random_gains(&mut rng, &inst, 1.0);
        let t = assembly::permutation_t(&inst.ga.dims);
        let n = t.nrows();
        prop_assert!(close(&(t.transpose() * &t), &Mat::identity(n, n), 0.0));
        let a_g = assembly::closed_loop(&inst.ga, &k).unwrap().a_g;
        let composite = assembly::local_composite(&inst.la, &k, &inst.ga.gm);
        prop_assert!(close(&(t.transpose() * composite * &t), &a_g, 1e-12));
    }

    #[test]
    fn perturbation_is_undone_by_its_negation(seed in any::<u64>(), rho in 0.0f64..0.5) {
        let mut rng = common::rng(seed, 4);
        let inst = common::general_instance(&mut rng);
        let delta = UncertaintyDelta::sample(&inst.model, rho, &mut rng);
        let neg = UncertaintyDelta {
            agents: delta
                .agents
                .iter()
                .map(|d| {
                    let mut m = d.clone();
                    m.da = -&d.da;
                    m.db = -&d.db;
                    m.dc = -&d.dc;
                    m.dd = -&d.dd;
                    m
                })
                .collect(),
        };
        let back = apply_uncertainty(&apply_uncertainty(&inst.model, &delta).unwrap(), &neg).unwrap();
        for (a, b) in back.agents.iter().zip(&inst.model.agents) {
            prop_assert!(close(&a.a, &b.a, 1e-14) && close(&a.b, &b.b, 1e-14));
            prop_assert!(close(&a.c, &b.c, 1e-14) && close(&a.d, &b.d, 1e-14));
        }
        prop_assert_eq!(&back.exo.a0, &inst.model.exo.a0);
    }

    #[test]
    fn blockwise_similarity_preserves_the_p_copy(seed in any::<u64>(), p in 1usize..4) {
        let mut rng = common::rng(seed, 5);
        let exo = common::antistable_exosystem(&mut rng, 1.3);
        let base = build_p_copy_pair(&exo.a0, p);
        let h = base.nz() / p;
        let blocks: Vec<Mat> = (0..p).map(|_| Mat::identity(h, h) + common::uniform(&mut rng, h, h, 0.3)).collect();
        let t = linalg::block_diag(&blocks);
        let ti = t.clone().try_inverse().unwrap();
        let pair = InternalModelPair { g1: &t * &base.g1 * ti, g2: &t * &base.g2 * rng.random_range(0.5..2.0) };
        prop_assert!(p_copy_defects(&pair, p, &exo.a0).is_empty());
        let im = InternalModel::new(p, vec![pair; 3]).unwrap();
        prop_assert!(verify_p_copy(&im, &exo.a0));
        // Mixing the copies breaks the block structure the check relies on.
        if p > 1 {
            let mut mixed = base.clone();
            mixed.g1[(0, h)] = 0.5;
            let defects = p_copy_defects(&mixed, p, &exo.a0);
            let expected = PCopyDefect::OffBlockEntry { row: 0, col: h };
            prop_assert!(defects.contains(&expected));
        }
    }

    #[test]
    fn zero_state_is_an_equilibrium(seed in any::<u64>(), horizon in 1usize..30) {
        let mut rng = common::rng(seed, 6);
        let inst = common::general_instance(&mut rng);
        let k = random_gains(&mut rng, &inst, 1.0);
        let init = InitialState::zero(&inst.model, inst.im.nz());
        let channels = ExogenousChannels::zero(&inst.model);
        let tr = verification::simulate(
            &inst.model, &inst.im, inst.graph.adjacency(), inst.graph.pinning(), &k, &channels, &init, horizon,
        ).unwrap();
        prop_assert_eq!(tr.len(), horizon + 1);
        prop_assert!(tr.error_norm.iter().all(|&e| e == 0.0));
        prop_assert!((0..=horizon).all(|t| tr.x_g(t).amax() == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn lyapunov_certificate_matches_spectral_radius(
        seed in any::<u64>(),
        n in 1usize..5,
        radius in prop_oneof![0.2f64..0.9, 1.1f64..1.6],
    ) {
        let mut rng = common::rng(seed, 7);
        let raw = common::uniform(&mut rng, n, n, 1.0);
        let rho = linalg::spectral_radius(&raw).unwrap();
        prop_assume!(rho > 1e-3);
        let a = raw * (radius / rho);
        let schur = radius < 1.0;
        prop_assert_eq!(verification::free_lyapunov(&a).unwrap().is_feasible(), schur);
        // The dual inequality on A^T decides the same question.
        prop_assert_eq!(verification::free_lyapunov(&a.transpose()).unwrap().is_feasible(), schur);
    }

    #[test]
    fn adding_a_constraint_never_raises_the_margin(lo in -5.0f64..5.0, width in 0.1f64..4.0, cut in 0.0f64..1.0) {
        let hi = lo + width;
        let mut prob = LmiProblem::new();
        let x = prob.add_symmetric("x", 1);
        prob.add_constraint("lo", Sense::PosDef, move |s| s.get(x).add_scalar(-lo));
        prob.add_constraint("hi", Sense::PosDef, move |s| s.get(x).map(|v| hi - v));
        let base = lmi::solve_feasibility(&prob).unwrap();
        prop_assert!(base.is_feasible());
        prop_assert!((base.solver_margin - width / 2.0).abs() < 1e-5 * (1.0 + width));
        let c = lo + cut * width;
        prob.add_constraint("cut", Sense::PosDef, move |s| s.get(x).map(|v| c - v));
        let tighter = lmi::solve_feasibility(&prob).unwrap();
        prop_assert!(tighter.solver_margin <= base.solver_margin + 1e-9);
    }

    #[test]
    fn robustness_study_is_reproducible(seed in any::<u64>()) {
        let mut rng = common::rng(seed, 8);
        let inst = common::acyclic_instance(&mut rng);
        let res = rcorp_core::synthesis::synthesize_acyclic(&inst.ga, &inst.la, &inst.graph).unwrap();
        prop_assume!(res.a_g_schur && res.spectral_radius < 0.99);
        let channels = ExogenousChannels::sample(&inst.model, 1.0, &mut rng);
        let run = |rho: f64, s: u64| verification::robustness_sample(&inst.ga, &res.gains, &channels, rho, 8, s);
        match run(1e-3, seed) {
            Ok(a) => {
                let b = run(1e-3, seed).unwrap();
                prop_assert_eq!(a.schur_count, b.schur_count);
                prop_assert_eq!(a.worst_radius.to_bits(), b.worst_radius.to_bits());
                prop_assert_eq!(a.max_residual.to_bits(), b.max_residual.to_bits());
            }
            // The closed loop can share an eigenvalue with the exosystem.
            Err(verification::VerificationError::SpectraOverlap(_)) => {}
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        }
        if let Ok(z) = run(0.0, seed) {
            prop_assert_eq!(z.schur_count, 8);
            prop_assert!((z.worst_radius - z.nominal_radius).abs() < 1e-12);
        }
    }
}
