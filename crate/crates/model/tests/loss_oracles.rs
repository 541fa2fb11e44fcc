//! Objectives against plain-f64 reference implementations and finite
//! differences.

#[path = "support/reference.rs"]
mod reference;

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use linevlp_core::{CategoryId, Relation, Taxonomy};
use linevlp_model::layers::scalar;
use linevlp_model::losses::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reference::*;

#[test]
fn scalar_oracles() {
    let e = tensor(&vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let itc = scalar(&itc_loss(&e, &e, 1.0).unwrap()).unwrap();
    assert!((itc - 0.3133).abs() < 1e-4, "{itc}");
    let s = scalar_tensor(10.0, DType::F64).unwrap();
    let dnc = dnc_component_loss(&e.narrow(0, 0, 1).unwrap(), &e.narrow(0, 1, 1).unwrap(), &s).unwrap();
    assert!((scalar(&dnc.loss).unwrap() - 0.3466).abs() < 1e-4);
}

#[test]
fn losses_match_reference_on_small_batches() {
    let tax = Taxonomy::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..200 {
        let n = rng.random_range(2..=4);
        let d = rng.random_range(2..=5);
        let v = random_mat(&mut rng, n, d, true);
        let l = random_mat(&mut rng, n, d, true);
        let cats = random_cats(&mut rng, &tax, n);
        let tau = rng.random_range(0.05..2.0);
        let got = scalar(&itc_loss(&tensor(&v), &tensor(&l), tau).unwrap()).unwrap();
        assert!((got - ref_itc(&v, &l, tau)).abs() < 1e-6, "itc case {case}");

        let (h, _) = head(case, d);
        let (vt, lt) = (tensor(&v), tensor(&l));
        let pv = random_permutation(n, &mut rng);
        let pl = random_permutation(n, &mut rng);
        let vs = ShuffledBatch::with_perm(&vt, pv.clone()).unwrap();
        let ls = ShuffledBatch::with_perm(&lt, pl.clone()).unwrap();
        let got = scalar(&srj_loss_with(&vt, &lt, &vs, &ls, &cats, &tax, &h).unwrap().loss).unwrap();
        let want = ref_srj(&v, &l, &pv, &pl, &cats, &tax, &RefHead::from(&h));
        assert!((got - want).abs() < 1e-6, "srj case {case}: {got} vs {want}");

        let scale = rng.random_range(1.0..20.0);
        let got = scalar(&dnc_loss(&vt, &cats, &tax, &scalar_tensor(scale, DType::F64).unwrap()).unwrap().loss).unwrap();
        assert!((got - ref_dnc(&v, &cats, &tax, scale)).abs() < 1e-6, "dnc case {case}");
    }
}

#[test]
fn dnc_matches_reference_on_mixed_batches() {
    let tax = Taxonomy::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut eligible = 0;
    for _ in 0..100 {
        let n = rng.random_range(4..=12);
        let v = random_mat(&mut rng, n, 6, true);
        let cats = random_cats(&mut rng, &tax, n);
        let out = dnc_loss(&tensor(&v), &cats, &tax, &scalar_tensor(10.0, DType::F64).unwrap()).unwrap();
        if out.eligible() {
            eligible += 1;
            assert!((out.alpha.values().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((scalar(&out.loss).unwrap() - ref_dnc(&v, &cats, &tax, 10.0)).abs() < 1e-6);
    }
    assert!(eligible > 50);
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..20u64 {
        for (name, e) in gradient_check(seed) {
            assert!(e <= 1e-4, "seed {seed} {name}: rel err {e}");
        }
    }
}

#[test]
fn learnable_scales_are_clamped() {
    let big = scalar_tensor(50.0, DType::F64).unwrap();
    let s = scalar(&itc_scale(&big).unwrap()).unwrap();
    assert!((1.0 / s - TAU_RANGE.0).abs() < 1e-12);
    let small = scalar_tensor(-50.0, DType::F64).unwrap();
    assert!((1.0 / scalar(&itc_scale(&small).unwrap()).unwrap() - TAU_RANGE.1).abs() < 1e-9);
    let init = scalar_tensor((1.0f64 / 0.07).ln(), DType::F64).unwrap();
    assert!((scalar(&itc_scale(&init).unwrap()).unwrap() - 1.0 / 0.07).abs() < 1e-9);
    assert!((scalar(&dnc_scale(&scalar_tensor(10f64.ln(), DType::F64).unwrap()).unwrap()).unwrap() - 10.0).abs() < 1e-9);
}

#[test]
fn total_matches_weighted_reference_sum() {
    let tax = Taxonomy::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..100 {
        let n = rng.random_range(2..=4);
        let d = rng.random_range(2..=5);
        let v = random_mat(&mut rng, n, d, true);
        let l = random_mat(&mut rng, n, d, true);
        let cats = random_cats(&mut rng, &tax, n);
        let tau: f64 = rng.random_range(0.05..2.0);
        let scale = rng.random_range(1.0..20.0);
        let w = LossWeights {
            lambda_itc: rng.random_range(0.0..2.0),
            lambda_srj: rng.random_range(0.0..2.0),
            lambda_dnc: rng.random_range(0.0..2.0),
        };
        let (h, _) = head(case + 500, d);
        let its = scalar_tensor(1.0 / tau, DType::F64).unwrap();
        let ds = scalar_tensor(scale, DType::F64).unwrap();
        let obj = Objectives { head: &h, itc_scale: &its, dnc_scale: &ds };
        let out = total_loss(&tensor(&v), &tensor(&l), &cats, &tax, obj, &w, &mut rng).unwrap();
        let srj = ref_srj(&v, &l, &out.srj.v_perm, &out.srj.l_perm, &cats, &tax, &RefHead::from(&h));
        let want = w.lambda_itc * ref_itc(&v, &l, tau) + w.lambda_srj * srj + w.lambda_dnc * ref_dnc(&v, &cats, &tax, scale);
        assert!((scalar(&out.total).unwrap() - want).abs() < 1e-6, "case {case}");
    }
}

#[test]
fn total_is_linear_in_weights() {
    let tax = Taxonomy::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 6;
    let v = tensor(&random_mat(&mut rng, n, 4, true));
    let l = tensor(&random_mat(&mut rng, n, 4, true));
    let mut cats = random_cats(&mut rng, &tax, n);
    cats[0] = tax.id("normal_insulator").unwrap();
    cats[1] = tax.id("insulator_bunch_drop").unwrap();
    let (h, _) = head(1, 4);
    let s = scalar_tensor(10.0, DType::F64).unwrap();
    let obj = Objectives { head: &h, itc_scale: &s, dnc_scale: &s };
    let run = |w: LossWeights| {
        total_loss(&v, &l, &cats, &tax, obj, &w, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().breakdown
    };
    let parts = run(LossWeights::default());
    for w in [
        LossWeights { lambda_itc: 1.0, lambda_srj: 0.0, lambda_dnc: 0.0 },
        LossWeights { lambda_itc: 0.0, lambda_srj: 1.0, lambda_dnc: 0.0 },
        LossWeights { lambda_itc: 0.0, lambda_srj: 0.0, lambda_dnc: 1.0 },
        LossWeights { lambda_itc: 0.5, lambda_srj: 2.0, lambda_dnc: 0.25 },
        LossWeights { lambda_itc: 3.0, lambda_srj: 0.0, lambda_dnc: 1.5 },
    ] {
        let b = run(w);
        let want = w.lambda_itc * parts.itc + w.lambda_srj * parts.srj + w.lambda_dnc * parts.dnc;
        assert!((b.total - want).abs() < 1e-9, "{w:?}");
        assert_eq!((b.itc, b.srj, b.dnc), (parts.itc, parts.srj, parts.dnc));
    }
    assert!((parts.total - (parts.itc + parts.srj + parts.dnc)).abs() < 1e-12);
}

#[test]
fn shuffles_are_uniform() {
    let m = Tensor::arange(0f64, 4.0, &Device::Cpu).unwrap().reshape((4, 1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..10_000 {
        *counts.entry(shuffle_features(&m, &mut rng).unwrap().perm).or_default() += 1;
    }
    assert_eq!(counts.len(), 24);
    let expected = 10_000.0 / 24.0;
    for (p, c) in counts {
        assert!((c as f64 - expected).abs() <= 0.3 * expected, "{p:?}: {c}");
    }
}

fn desk_cats() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..10, 1..=8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn srj_targets_follow_rule(cats in desk_cats(), seed in any::<u64>()) {
        let tax = Taxonomy::desk();
        let cats: Vec<CategoryId> = cats.into_iter().map(CategoryId).collect();
        let perm = random_permutation(cats.len(), &mut ChaCha8Rng::seed_from_u64(seed));
        let t = srj_targets(&cats, &perm, &tax).unwrap();
        for i in 0..cats.len() {
            prop_assert_eq!(t[i], rule_relation(&tax, cats[i], cats[perm[i]]));
        }
        let identity: Vec<usize> = (0..cats.len()).collect();
        prop_assert!(srj_targets(&cats, &identity, &tax).unwrap().iter().all(|r| *r == Relation::Stss));
    }

    #[test]
    fn dnc_target_structure(k in 1usize..=12, q in 1usize..=12) {
        let z = dnc_target(k, q).unwrap();
        let n = k + q;
        prop_assert_eq!(z.len(), n);
        for i in 0..n {
            prop_assert_eq!(z[i][i], 1);
            let row: usize = z[i].iter().map(|&b| b as usize).sum();
            prop_assert_eq!(row, if i < k { k } else { q });
            for j in 0..n {
                prop_assert_eq!(z[i][j], z[j][i]);
            }
        }
    }
}
