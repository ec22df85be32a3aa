mod common;

use proptest::prelude::*;
use rand_distr::{Distribution, Normal};
use unvp::classifier::{Classifier, ClassifierArch};
use unvp::generalizer::{
    bures_cost, bures_cost_sq, fit_gaussian, regularized_cost, synthesize_hard_samples, GaussianSummary,
    GeneralizationConfig, HardSample, HardSamplePool, SourceReference, INPUT_BOUND,
};
use unvp::numeric::Array;
use unvp::rng::{stream, Stream};

use common::{random_flow, uniform_batch};

fn gauss(mean: Vec<f64>, var: Vec<f64>) -> GaussianSummary {
    GaussianSummary::new(mean, var, 10).unwrap()
}

#[test]
fn bures_closed_forms() {
    let a = gauss(vec![0.3, -1.0], vec![2.0, 0.5]);
    assert_eq!(bures_cost(&a, &a).unwrap(), 0.0);
    let p = gauss(vec![0.0, 0.0], vec![1.0, 1.0]);
    let q = gauss(vec![3.0, 4.0], vec![1.0, 1.0]);
    assert_eq!(bures_cost(&p, &q).unwrap(), 5.0);
    let r = gauss(vec![0.0, 0.0], vec![4.0, 9.0]);
    assert_eq!(bures_cost_sq(&r, &p).unwrap(), 5.0);
}

fn arb_gaussian(d: usize) -> impl Strategy<Value = GaussianSummary> {
    (
        prop::collection::vec(-5.0f64..5.0, d),
        prop::collection::vec(1e-3f64..10.0, d),
    )
        .prop_map(|(m, v)| GaussianSummary::new(m, v, 5).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn bures_is_a_metric(
        (a, b, c) in (1usize..6).prop_flat_map(|d| (arb_gaussian(d), arb_gaussian(d), arb_gaussian(d)))
    ) {
        let ab = bures_cost(&a, &b).unwrap();
        prop_assert_eq!(ab, bures_cost(&b, &a).unwrap());
        prop_assert_eq!(bures_cost(&a, &a).unwrap(), 0.0);
        prop_assert!(ab >= 0.0);
        let bc = bures_cost(&b, &c).unwrap();
        let ac = bures_cost(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
    }
}

#[test]
fn fitted_moments_follow_the_clt() {
    let (m, v): ([f64; 2], [f64; 2]) = ([1.5, -2.0], [0.25, 4.0]);
    let n = 100_000;
    let mut rng = stream(5, Stream::Misc, 0);
    let dists = [Normal::new(m[0], v[0].sqrt()).unwrap(), Normal::new(m[1], v[1].sqrt()).unwrap()];
    let data: Vec<f64> = (0..n).flat_map(|_| [dists[0].sample(&mut rng), dists[1].sample(&mut rng)]).collect();
    let fit = fit_gaussian(&Array::matrix(n, 2, data).unwrap()).unwrap();
    for k in 0..2 {
        assert!((fit.mean[k] - m[k]).abs() < 3.0 * (v[k] / n as f64).sqrt());
    }
}

fn classifier(seed: u64) -> Classifier {
    let mut rng = stream(seed, Stream::ClassifierInit, 0);
    let mut clf = Classifier::new(ClassifierArch::mlp(2, 3), &mut rng).unwrap();
    clf.store.perturb(&mut rng, 0.3);
    clf
}

#[test]
fn regularized_cost_of_the_source_batch_is_zero() {
    let flow = random_flow(2, 3, 16, 1, 1);
    let clf = classifier(1);
    let x = uniform_batch(12, 2, 0.4, 2);
    let reference = SourceReference::new(&flow, &clf, &x).unwrap();
    assert!(regularized_cost(&x, &flow, &clf, &reference, 1.0).unwrap().abs() < 1e-20);
}

#[test]
fn zero_feature_weight_leaves_the_bures_term() {
    let flow = random_flow(2, 3, 16, 1, 3);
    let clf = classifier(3);
    let x = uniform_batch(12, 2, 0.4, 4);
    let moved = uniform_batch(12, 2, 0.4, 5);
    let reference = SourceReference::new(&flow, &clf, &x).unwrap();
    let cost = regularized_cost(&moved, &flow, &clf, &reference, 0.0).unwrap();
    let (z, _) = flow.forward(&moved).unwrap();
    let direct = bures_cost_sq(&fit_gaussian(&z).unwrap(), &reference.summary).unwrap();
    assert!((cost - direct).abs() <= 1e-12 * direct.max(1.0), "{cost} vs {direct}");
    assert!(regularized_cost(&moved, &flow, &clf, &reference, 1.0).unwrap() > cost);
}

#[test]
fn cost_grows_quadratically_in_a_latent_shift() {
    let flow = random_flow(2, 2, 8, 1, 6);
    let clf = classifier(6);
    let x = uniform_batch(8, 2, 0.3, 7);
    let reference = SourceReference::new(&flow, &clf, &x).unwrap();
    let (z, _) = flow.forward(&x).unwrap();
    let at = |delta: f64| {
        let mut zs = z.clone();
        zs.data_mut().iter_mut().step_by(2).for_each(|v| *v += delta);
        regularized_cost(&flow.inverse(&zs).unwrap(), &flow, &clf, &reference, 0.0).unwrap()
    };
    // A shift of every row's first coordinate moves only the mean: cost² = δ².
    for delta in [1e-1, 1e-2, 1e-3] {
        let c = at(delta);
        assert!((c / (delta * delta) - 1.0).abs() < 1e-6, "delta {delta}: {c}");
    }
}

#[test]
fn cost_is_invariant_under_a_flow_roundtrip() {
    for seed in 0..10 {
        let flow = random_flow(4, 3, 16, 1, seed);
        let mut rng = stream(seed, Stream::ClassifierInit, 0);
        let mut clf = Classifier::new(ClassifierArch::mlp(4, 3), &mut rng).unwrap();
        clf.store.perturb(&mut rng, 0.3);
        let x = uniform_batch(10, 4, 0.4, seed + 50);
        let moved = uniform_batch(10, 4, 0.4, seed + 60);
        let reference = SourceReference::new(&flow, &clf, &x).unwrap();
        let (z, _) = flow.forward(&moved).unwrap();
        let back = flow.inverse(&z).unwrap();
        let a = regularized_cost(&moved, &flow, &clf, &reference, 1.0).unwrap();
        let b = regularized_cost(&back, &flow, &clf, &reference, 1.0).unwrap();
        assert!((a - b).abs() < 1e-8, "seed {seed}: {a} vs {b}");
    }
}

#[test]
fn zero_steps_return_the_input() {
    let flow = random_flow(2, 2, 8, 1, 8);
    let clf = classifier(8);
    let x = uniform_batch(6, 2, 0.4, 9);
    let cfg = GeneralizationConfig {
        ascent_steps: 0,
        ..GeneralizationConfig::default()
    };
    let out = synthesize_hard_samples(&x, 1, &flow, &clf, &cfg).unwrap();
    assert_eq!(out.x, x);
    assert_eq!(out.trace.len(), 1);
}

#[test]
fn ascent_traces_never_decrease_and_stay_in_the_box() {
    for seed in 0..20 {
        let flow = random_flow(2, 2, 8, 1, seed);
        let clf = classifier(seed);
        let x = uniform_batch(8, 2, 0.45, seed + 10);
        let cfg = GeneralizationConfig {
            alpha: 0.05,
            ascent_step_size: 0.5,
            ..GeneralizationConfig::default()
        };
        let out = synthesize_hard_samples(&x, (seed % 3) as usize, &flow, &clf, &cfg).unwrap();
        assert!(out.trace.windows(2).all(|w| w[1] >= w[0]), "seed {seed}: {:?}", out.trace);
        assert!(out.x.data().iter().all(|v| v.abs() <= INPUT_BOUND));
    }
}

#[test]
fn pool_rejects_bad_samples() {
    let mut pool = HardSamplePool::new();
    let ok = HardSample {
        x: vec![0.1, -0.2],
        label: 1,
        round: 1,
    };
    pool.push(ok.clone(), 2, 3).unwrap();
    assert!(pool.push(HardSample { label: 3, ..ok.clone() }, 2, 3).is_err());
    assert!(pool.push(HardSample { x: vec![0.6, 0.0], ..ok.clone() }, 2, 3).is_err());
    assert!(pool.push(HardSample { x: vec![0.0], ..ok }, 2, 3).is_err());
    assert_eq!(pool.len(), 1);
}
