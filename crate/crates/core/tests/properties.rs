use proptest::prelude::*;

use hicolora::adapter::{
    fuse, semadapt_forward_high, semadapt_forward_low, HiCoLayerParams, LayerMode, RoutePhase, RoutingDecision,
};
use hicolora::dstsim::{aga, builtin_schemas, generate_corpus, jga, State};
use hicolora::init::{milora_init, pissa_init, semsvd_init};
use hicolora::numkit::{gumbel_softmax, normalize, softmax, svd};
use hicolora::{Matrix, RngStream};

fn unit_rows(k: usize, d: usize, rng: &mut RngStream) -> Matrix {
    let raw = Matrix::random_normal(k, d, 1.0, rng);
    let rows: Vec<Vec<f64>> = (0..k).map(|i| normalize(raw.row(i)).unwrap()).collect();
    Matrix::from_rows(&rows).unwrap()
}

fn state(items: &[(u8, u8)]) -> State {
    items.iter().map(|(s, v)| ("d".to_string(), format!("s{s}"), format!("v{v}"))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_init_reconstructs_the_frozen_weight(
        seed in any::<u64>(), rows in 2usize..24, cols in 2usize..24, rank in 1usize..6, lambda in 0.0f64..4.0,
    ) {
        let mut rng = RngStream::new(seed);
        let w0 = Matrix::random_normal(rows, cols, 1.0, &mut rng);
        let r = rank.min(rows.min(cols));
        let centroids = unit_rows(2, cols, &mut rng);
        let (sem, factors) = semsvd_init(&w0, r, lambda, &centroids).unwrap();
        prop_assert!(sem.residual_error(&w0).unwrap() <= 1e-9);
        prop_assert!(pissa_init(&w0, r).unwrap().residual_error(&w0).unwrap() <= 1e-9);
        prop_assert!(milora_init(&w0, r).unwrap().residual_error(&w0).unwrap() <= 1e-9);
        prop_assert!(factors.s_e.iter().all(|s| *s >= 0.0));
        prop_assert!(factors.relevance.iter().all(|x| x.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn equal_semantic_adapters_make_both_modes_agree(seed in any::<u64>(), d in 2usize..12, m in 1usize..5, n in 1usize..5) {
        let mut rng = RngStream::new(seed);
        let mut low = HiCoLayerParams::random(d, d, 2, m, n, LayerMode::HeuristicGrouping, &mut rng);
        let a = Matrix::random_normal(2, d, 0.5, &mut rng);
        let b = Matrix::random_normal(d, 2, 0.5, &mut rng);
        low.a_sa = vec![a; m];
        low.b_sa = vec![b; n];
        let high = HiCoLayerParams { mode: LayerMode::FullCollaboration, ..low.clone() };
        let x = Matrix::random_normal(1, d, 1.0, &mut rng);
        let logits = |k: usize, rng: &mut RngStream| Matrix::random_normal(1, k, 2.0, rng).row(0).to_vec();
        let routing = RoutingDecision {
            domain_weights: softmax(&logits(m, &mut rng), 1.0).unwrap(),
            slot_weights: softmax(&logits(n, &mut rng), 1.0).unwrap(),
            hard: false,
            phase: RoutePhase::Infer,
            noise_seed: None,
        };
        let l = semadapt_forward_low(&low, &x, &routing).unwrap();
        let h = semadapt_forward_high(&high, &x).unwrap();
        prop_assert!(l.max_abs_diff(&h).unwrap() <= 1e-12 * h.max_abs().max(1.0));
    }

    #[test]
    fn fusion_stays_between_its_inputs(seed in any::<u64>(), beta_logit in -8.0f64..8.0) {
        let mut rng = RngStream::new(seed);
        let h_ur = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let h_sa = Matrix::random_normal(1, 4, 1.0, &mut rng);
        let f = fuse(&h_ur, &h_sa, beta_logit).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let (lo, hi) = (h_ur.get(r, c).min(h_sa.get(0, c)), h_ur.get(r, c).max(h_sa.get(0, c)));
                prop_assert!(f.get(r, c) >= lo - 1e-12 && f.get(r, c) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn gumbel_outputs_are_distributions(seed in any::<u64>(), logits in prop::collection::vec(-5.0f64..5.0, 1..8), tau in 0.05f64..5.0, hard in any::<bool>()) {
        let w = gumbel_softmax(&logits, tau, &mut RngStream::new(seed), hard).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(w.iter().all(|x| *x >= 0.0));
        if hard {
            prop_assert_eq!(w.iter().filter(|x| **x == 1.0).count(), 1);
        }
    }

    #[test]
    fn perfect_joint_accuracy_implies_perfect_slot_accuracy(
        turns in prop::collection::vec(
            (prop::collection::vec((0u8..5, 0u8..3), 1..4), prop::collection::vec((0u8..5, 0u8..3), 0..4), any::<bool>()),
            1..6,
        ),
    ) {
        let (mut preds, mut golds) = (Vec::new(), Vec::new());
        for (g, p, copy) in &turns {
            golds.push(state(g));
            preds.push(if *copy { state(g) } else { state(p) });
        }
        let j = jga(&preds, &golds).unwrap();
        let a = aga(&preds, &golds, false).unwrap();
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert!(a <= 1.0);
        if j == 1.0 {
            prop_assert_eq!(a, 1.0);
        }
    }

    #[test]
    fn generated_dialogs_satisfy_their_invariants(seed in any::<u64>(), dialogs in 1usize..4, turns in 1usize..4) {
        let corpus = generate_corpus(&builtin_schemas(), dialogs, turns, &mut RngStream::new(seed)).unwrap();
        for d in &corpus.dialogs {
            prop_assert!(d.check_invariants().is_ok());
        }
    }
}

/// Singular values agree with an independent decomposition.
#[test]
fn singular_values_match_nalgebra() {
    let mut rng = RngStream::new(77);
    for _ in 0..20 {
        let (r, c) = (2 + rng.index(20), 2 + rng.index(20));
        let a = Matrix::random_normal(r, c, 1.0, &mut rng);
        let ours = svd(&a).unwrap().s;
        let reference = nalgebra::DMatrix::from_row_slice(r, c, a.data());
        let mut theirs: Vec<f64> = reference.singular_values().iter().copied().collect();
        theirs.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for (x, y) in ours.iter().zip(&theirs) {
            assert!((x - y).abs() <= 1e-9 * theirs[0], "{x} vs {y}");
        }
    }
}
