use mtdbn::rbm::{energy, hidden_posterior, reconstruction_error, train_rbm, visible_mean};
use mtdbn::{RbmParams, SparseCdConfig, UnitType, VisibleBatch};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `P(h_k = 1 | v)` by summing `exp(-E(v, h))` over all `2^K` hidden states.
fn enumerated_posterior(params: &RbmParams, v: &Array1<f64>) -> Vec<f64> {
    let k = params.n_hidden();
    let states: Vec<Array1<f64>> = (0..1u32 << k)
        .map(|bits| Array1::from_shape_fn(k, |j| f64::from((bits >> j) & 1)))
        .collect();
    let energies: Vec<f64> = states
        .iter()
        .map(|h| energy(params, v.view(), h.view()).unwrap())
        .collect();
    let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = energies.iter().map(|e| (min - e).exp()).collect();
    let z: f64 = weights.iter().sum();
    (0..k)
        .map(|j| {
            states
                .iter()
                .zip(&weights)
                .filter(|(h, _)| h[j] == 1.0)
                .map(|(_, w)| w)
                .sum::<f64>()
                / z
        })
        .collect()
}

#[test]
fn binary_posterior_matches_boltzmann_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let n = rng.random_range(1..=4);
        let k = rng.random_range(1..=4);
        let mut p = RbmParams::random(UnitType::Binary, n, k, 1.5, &mut rng);
        p.visible_bias.mapv_inplace(|_| rng.random_range(-2.0..2.0));
        p.hidden_bias.mapv_inplace(|_| rng.random_range(-2.0..2.0));
        let v = Array1::from_shape_fn(n, |_| f64::from(rng.random_bool(0.5)));
        let closed = hidden_posterior(&p, v.view()).unwrap();
        for (a, b) in closed.iter().zip(enumerated_posterior(&p, &v)) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn constrained_rates_sum_to_document_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let n = rng.random_range(1..=20);
        let k = rng.random_range(1..=10);
        let mut p = RbmParams::random(UnitType::Count, n, k, 2.0, &mut rng);
        p.visible_bias.mapv_inplace(|_| rng.random_range(-3.0..3.0));
        let h = Array1::from_shape_fn(k, |_| rng.random_range(0.0..1.0));
        let m = f64::from(rng.random_range(1u32..5000));
        let rates = visible_mean(&p, h.view(), Some(m)).unwrap();
        assert!(((rates.sum() - m) / m).abs() < 1e-9);
    }
}

/// 8-bit rows near one of two complementary prototypes, 10% bits flipped.
fn two_prototype_batch(rows: usize, rng: &mut ChaCha8Rng) -> VisibleBatch {
    let data = Array2::from_shape_fn((rows, 8), |(r, c)| {
        let bit = (c < 4) == (r % 2 == 0);
        f64::from(bit != rng.random_bool(0.1))
    });
    VisibleBatch::new(UnitType::Binary, data).unwrap()
}

#[test]
fn cd_learns_two_prototypes() {
    let batch = two_prototype_batch(200, &mut ChaCha8Rng::seed_from_u64(7));
    let cfg = SparseCdConfig {
        minibatch_size: 20,
        epochs: 50,
        rng_seed: 7,
        ..SparseCdConfig::for_unit(UnitType::Binary)
    };
    let trained = train_rbm(&batch, 4, &cfg).unwrap();
    assert_eq!(trained.trace.len(), 51);
    let (first, last) = (trained.trace[0], trained.trace[50]);
    assert!(last < 0.7 * first, "{first} -> {last}");
    assert_eq!(reconstruction_error(&trained.params, &batch).unwrap(), last);

    let again = train_rbm(&batch, 4, &cfg).unwrap();
    assert_eq!(again.params.to_bytes(), trained.params.to_bytes());
    assert_eq!(again.trace, trained.trace);
}
