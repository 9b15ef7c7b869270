mod common;

use common::{dist, exact_transport_cost, random_probs};
use detox_core::distributions::{
    alpha_from_delta, divergence, divergence_with, log_prob_diff, softmax, DivergenceKind,
    DivergenceOptions, JsForm,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn softmax_examples() {
    assert_eq!(softmax(&[0.0, 0.0], 1.0).unwrap().values(), &[0.5, 0.5]);
    let p = softmax(&[1.0, 0.0], 1.0).unwrap();
    assert!((p.values()[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
    assert!((p.values()[1] - 0.268_941_421_369_995_1).abs() < 1e-15);
    for c in [-40.0, 0.0, 3.5, 700.0] {
        let q = softmax(&[c, c + 3f64.ln()], 1.0).unwrap();
        assert!((q.values()[0] - 0.25).abs() < 1e-12);
        assert!((q.values()[1] - 0.75).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_bad_input() {
    assert!(softmax(&[0.0, f64::NAN], 1.0).is_err());
    assert!(softmax(&[0.0, f64::INFINITY], 1.0).is_err());
    assert!(softmax(&[0.0, 1.0], 0.0).is_err());
    assert!(softmax(&[0.0, 1.0], -1.0).is_err());
}

#[test]
fn divergence_examples() {
    let uniform = dist(vec![0.25; 4]);
    for kind in DivergenceKind::ALL {
        assert_eq!(divergence(kind, &uniform, &uniform).unwrap(), 0.0, "{kind}");
    }
    let a = dist(vec![1.0, 0.0]);
    let b = dist(vec![0.0, 1.0]);
    assert_eq!(divergence(DivergenceKind::Tvd, &a, &b).unwrap(), 1.0);

    let first = dist(vec![1.0, 0.0, 0.0, 0.0]);
    let last = dist(vec![0.0, 0.0, 0.0, 1.0]);
    assert_eq!(divergence(DivergenceKind::Emd, &first, &last).unwrap(), 3.0);

    let p = dist(vec![0.5, 0.5]);
    let q = dist(vec![0.25, 0.75]);
    let fkl = divergence(DivergenceKind::Fkl, &p, &q).unwrap();
    assert!((fkl - 0.143_841_036_225_890_46).abs() < 1e-15);
    let rkl = divergence(DivergenceKind::Rkl, &p, &q).unwrap();
    let fkl_swapped = divergence(DivergenceKind::Fkl, &q, &p).unwrap();
    assert_eq!(rkl, fkl_swapped);
}

#[test]
fn js_forms() {
    let p = dist(vec![0.5, 0.5]);
    let q = dist(vec![0.25, 0.75]);
    let sym = divergence_with(
        DivergenceKind::Js,
        &p,
        &q,
        &DivergenceOptions {
            js_form: JsForm::SymmetrizedKl,
            ..Default::default()
        },
    )
    .unwrap();
    let fkl = divergence(DivergenceKind::Fkl, &p, &q).unwrap();
    let rkl = divergence(DivergenceKind::Rkl, &p, &q).unwrap();
    assert!((sym - 0.5 * (fkl + rkl)).abs() < 1e-15);

    // Disjoint supports reach the ln 2 bound of the mixture form.
    let a = dist(vec![1.0, 0.0]);
    let b = dist(vec![0.0, 1.0]);
    let js = divergence(DivergenceKind::Js, &a, &b).unwrap();
    assert!((js - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn size_mismatch_is_an_error() {
    let p = dist(vec![0.5, 0.5]);
    let q = dist(vec![0.2, 0.3, 0.5]);
    for kind in DivergenceKind::ALL {
        assert!(divergence(kind, &p, &q).is_err());
    }
}

#[test]
fn emd_matches_linear_programming_spot_values() {
    // Optimal costs from scipy's HiGHS solver (tests/oracles/emd_oracle.py).
    let cases: [(&[f64], &[f64], f64); 3] = [
        (&[0.1, 0.2, 0.3, 0.4], &[0.4, 0.3, 0.2, 0.1], 1.0),
        (&[0.5, 0.0, 0.0, 0.0, 0.5], &[0.0, 0.25, 0.5, 0.25, 0.0], 1.5),
        (
            &[0.05, 0.15, 0.3, 0.1, 0.25, 0.15],
            &[0.3, 0.1, 0.05, 0.25, 0.1, 0.2],
            0.65,
        ),
    ];
    for (p, q, want) in cases {
        let got = divergence(DivergenceKind::Emd, &dist(p.to_vec()), &dist(q.to_vec())).unwrap();
        assert!((got - want).abs() < 1e-9, "{p:?} {q:?}: {got} vs {want}");
        assert!((exact_transport_cost(p, q) - want).abs() < 1e-9);
    }
}

#[test]
fn emd_matches_exact_transport_on_small_vocabularies() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xe3d);
    for case in 0..200 {
        let v = rng.random_range(2..=6);
        let p = random_probs(&mut rng, v);
        let q = random_probs(&mut rng, v);
        let emd = divergence(DivergenceKind::Emd, &dist(p.clone()), &dist(q.clone())).unwrap();
        let exact = exact_transport_cost(&p, &q);
        assert!((emd - exact).abs() < 1e-9, "case {case}: {emd} vs {exact}");
    }
}

#[test]
fn alpha_examples() {
    assert_eq!(alpha_from_delta(0.0).unwrap(), 0.0);
    assert!((alpha_from_delta(std::f64::consts::E - 1.0).unwrap() - 0.5).abs() < 1e-15);
    assert!((alpha_from_delta(1.0).unwrap() - 0.409_383_890_850_358_75).abs() < 1e-15);
    assert_eq!(alpha_from_delta(-1e-15).unwrap(), 0.0);
    assert!(alpha_from_delta(f64::NAN).is_err());
}

#[test]
fn alpha_is_strictly_increasing_and_below_one() {
    let grid: Vec<f64> = (0..100).map(|i| i as f64 * 0.05).collect();
    for w in grid.windows(2) {
        assert!(alpha_from_delta(w[0]).unwrap() < alpha_from_delta(w[1]).unwrap());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut random: Vec<f64> = (0..500).map(|_| 10f64.powf(rng.random_range(-6.0..12.0))).collect();
    random.sort_by(f64::total_cmp);
    random.dedup();
    for w in random.windows(2) {
        assert!(alpha_from_delta(w[0]).unwrap() < alpha_from_delta(w[1]).unwrap());
    }
    for e in 0..=12 {
        assert!(alpha_from_delta(10f64.powi(e)).unwrap() < 1.0);
    }
}

#[test]
fn log_prob_diff_examples() {
    let p = dist(vec![0.3, 0.7]);
    assert!(log_prob_diff(&p, &p)
        .unwrap()
        .iter()
        .all(|d| *d == f64::NEG_INFINITY));

    let d = log_prob_diff(&dist(vec![0.8, 0.2]), &dist(vec![0.5, 0.5])).unwrap();
    assert!((d[0] - 0.470_003_629_245_735_55).abs() < 1e-12);
    assert_eq!(d[1], f64::NEG_INFINITY);

    let d = log_prob_diff(&dist(vec![0.5, 0.5]), &dist(vec![0.25, 0.75])).unwrap();
    assert!((d[0] - 2f64.ln()).abs() < 1e-12);
    assert_eq!(d[1], f64::NEG_INFINITY);
}

fn weight() -> impl Strategy<Value = f64> {
    prop_oneof![1 => Just(0.0), 4 => 1e-6..1.0f64]
}

fn normalise(mut w: Vec<f64>) -> Vec<f64> {
    if w.iter().all(|x| *x == 0.0) {
        w[0] = 1.0;
    }
    let z: f64 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

fn prob_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=12).prop_flat_map(|v| {
        (
            prop::collection::vec(weight(), v).prop_map(normalise),
            prop::collection::vec(weight(), v).prop_map(normalise),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn divergences_are_nonnegative_and_vanish_on_self((p, q) in prob_pair()) {
        let (p, q) = (dist(p), dist(q));
        for kind in DivergenceKind::ALL {
            let d = divergence(kind, &p, &q).unwrap();
            prop_assert!(d >= 0.0, "{kind}: {d}");
            prop_assert_eq!(divergence(kind, &p, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn symmetric_kinds_are_symmetric((p, q) in prob_pair()) {
        let (p, q) = (dist(p), dist(q));
        for kind in [DivergenceKind::Js, DivergenceKind::Tvd, DivergenceKind::Emd] {
            let pq = divergence(kind, &p, &q).unwrap();
            let qp = divergence(kind, &q, &p).unwrap();
            prop_assert!((pq - qp).abs() <= 1e-12 * pq.max(1.0), "{kind}: {pq} vs {qp}");
        }
    }

    #[test]
    fn bounded_kinds_stay_bounded((p, q) in prob_pair()) {
        let (p, q) = (dist(p), dist(q));
        prop_assert!(divergence(DivergenceKind::Tvd, &p, &q).unwrap() <= 1.0 + 1e-12);
        prop_assert!(divergence(DivergenceKind::Js, &p, &q).unwrap() <= 2f64.ln() + 1e-12);
    }
}
