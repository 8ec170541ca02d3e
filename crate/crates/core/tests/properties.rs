mod common;

use proptest::prelude::*;
use tierfl_core::compression::{quantize_tensor, QuantScheme, QuantSpec};
use tierfl_core::flengine::{aggregate, ClientUpdate, Coverage};
use tierfl_core::rng::rng_from;
use tierfl_core::{auc, dirichlet_tier_map, fairness, ClientId, Matrix, PerTier, Tier};

fn labels_and_scores(max_n: usize) -> impl Strategy<Value = (Vec<u8>, Vec<f64>)> {
    (2..max_n).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..2, n),
            prop::collection::vec(-50i32..50, n)
                .prop_map(|v| v.into_iter().map(|x| x as f64 / 7.0).collect()),
        )
    })
}

proptest! {
    #[test]
    fn auc_equals_pairwise_oracle((labels, scores) in labels_and_scores(120)) {
        let fast = auc(&labels, &scores).unwrap();
        let slow = common::pairwise_auc(&labels, &scores);
        match (fast, slow) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a.is_none(), b.is_none()),
        }
    }

    #[test]
    fn auc_invariant_under_increasing_transform((labels, scores) in labels_and_scores(80)) {
        let transformed: Vec<f64> = scores.iter().map(|s| (s * 0.5).exp() + 3.0 * s).collect();
        prop_assert_eq!(auc(&labels, &scores).unwrap(), auc(&labels, &transformed).unwrap());
    }

    #[test]
    fn auc_of_negated_scores_is_complement(labels in prop::collection::vec(0u8..2, 2..80), seed in any::<u64>()) {
        // Distinct scores: a random permutation of 0..n.
        let mut rng = rng_from(&[seed]);
        let mut scores: Vec<f64> = (0..labels.len()).map(|i| i as f64).collect();
        rand::seq::SliceRandom::shuffle(scores.as_mut_slice(), &mut rng);
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        if let (Some(a), Some(b)) = (auc(&labels, &scores).unwrap(), auc(&labels, &neg).unwrap()) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quantized_values_lie_on_the_grid_and_requantize_unchanged(
        data in prop::collection::vec(-10.0f64..10.0, 2..60),
        bits in 2u32..9,
        signed in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let scheme = if signed { QuantScheme::SignMagnitude } else { QuantScheme::Plain };
        let spec = QuantSpec::new(bits, scheme);
        let original = Matrix::from_vec(1, data.len(), data.clone()).unwrap();
        let mut q = original.clone();
        quantize_tensor(&mut q, &spec, &mut rng_from(&[seed])).unwrap();

        let (lo, hi, levels) = if signed {
            (0.0, data.iter().fold(0.0f64, |m, x| m.max(x.abs())), (1u64 << (bits - 1)) - 1)
        } else {
            let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi, (1u64 << bits) - 1)
        };
        if hi > lo {
            let step = (hi - lo) / levels as f64;
            for (&x, &v) in data.iter().zip(&q.data) {
                let mag = if signed { v.abs() } else { v };
                let k = ((mag - lo) / step).round();
                prop_assert!(k >= 0.0 && k <= levels as f64);
                prop_assert!((mag - (lo + k * step)).abs() <= 1e-9 * (1.0 + hi.abs() + lo.abs()));
                if signed {
                    prop_assert!(v == 0.0 || v.signum() == x.signum());
                }
            }
        }
        let mut again = q.clone();
        quantize_tensor(&mut again, &spec, &mut rng_from(&[seed, 1])).unwrap();
        prop_assert_eq!(again, q);
    }

    #[test]
    fn sign_magnitude_keeps_exact_zeros(
        data in prop::collection::vec(prop_oneof![Just(0.0f64), -5.0f64..5.0], 1..60),
        bits in 2u32..9,
        seed in any::<u64>(),
    ) {
        let mut q = Matrix::from_vec(1, data.len(), data.clone()).unwrap();
        quantize_tensor(&mut q, &QuantSpec::new(bits, QuantScheme::SignMagnitude), &mut rng_from(&[seed])).unwrap();
        for (x, v) in data.iter().zip(&q.data) {
            if *x == 0.0 {
                prop_assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn aggregation_ignores_update_order(
        vals in prop::collection::vec((1usize..20, -3.0f64..3.0, -3.0f64..3.0, 0.0f64..5.0), 1..12),
        seed in any::<u64>(),
    ) {
        let updates: Vec<ClientUpdate> = vals
            .iter()
            .enumerate()
            .map(|(i, &(n, a, b, lat))| {
                let m = |x: f64| Matrix::from_vec(1, 1, vec![x]).unwrap();
                ClientUpdate {
                    client_id: ClientId(i as u64),
                    delta: tierfl_core::ParamTensors {
                        embeddings: vec![Matrix::from_vec(1, 2, vec![a, b]).unwrap()],
                        bottom_w1: m(a * b),
                        bottom_b1: m(a),
                        bottom_w2: m(b),
                        bottom_b2: m(a - b),
                        top_w1: m(1.0),
                        top_b1: m(a / 3.0),
                        top_w2: m(b / 7.0),
                        top_b2: m(0.1),
                    },
                    coverage: Coverage::Full,
                    n_samples: n,
                    tier: Tier::Mid,
                    latency: lat,
                    loss: 0.0,
                }
            })
            .collect();
        let drop = updates.len() / 3;
        let reference = aggregate(&updates, drop).unwrap();
        let mut shuffled = updates.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng_from(&[seed]));
        prop_assert_eq!(aggregate(&shuffled, drop).unwrap(), reference);
    }

    #[test]
    fn mdac_is_nonnegative_and_zero_for_uniform_change(
        base in prop::collection::vec(0.3f64..1.0, 3),
        change in prop::collection::vec(-0.5f64..0.5, 3),
        k in 0.5f64..1.5,
    ) {
        let b = PerTier::new(Some(base[0]), Some(base[1]), Some(base[2]));
        let t = PerTier::new(
            Some(base[0] * (1.0 + change[0])),
            Some(base[1] * (1.0 + change[1])),
            Some(base[2] * (1.0 + change[2])),
        );
        prop_assert!(fairness(&b, &t).unwrap().mdac >= 0.0);
        let uniform = b.map(|v| v.map(|x| x * k));
        prop_assert!(fairness(&b, &uniform).unwrap().mdac < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dirichlet_tiers_partition_clients(
        alpha in prop::sample::select(vec![0.005, 0.05, 0.5, 5.0, 5000.0]),
        seed in any::<u64>(),
        balanced in any::<bool>(),
        n_clients in 3u64..80,
    ) {
        let schema = common::schema(15, 2, 1, true);
        let dataset = common::random_dataset(seed, &schema, n_clients, 3, 1);
        let a = dirichlet_tier_map(&dataset, alpha, seed, balanced).unwrap();
        prop_assert_eq!(a.len(), dataset.n_clients());
        a.check_covers(&dataset).unwrap();
        prop_assert_eq!(a.sizes().iter().sum::<usize>(), dataset.n_clients());
    }
}
