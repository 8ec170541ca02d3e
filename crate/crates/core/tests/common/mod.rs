#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tierfl_core::dataset::ITEM_FIELD;
use tierfl_core::{
    ClientDataset, ClientId, Dataset, FeatureSchema, Interaction, SparseField, SynthParams,
};

pub fn schema(n_items: u32, n_cat: u32, n_dense: usize, history: bool) -> FeatureSchema {
    let mut sparse_fields = vec![SparseField::single(ITEM_FIELD, n_items)];
    if n_cat > 0 {
        sparse_fields.push(SparseField::single("category", n_cat));
    }
    if history {
        sparse_fields.push(SparseField::multi("history", n_items));
    }
    FeatureSchema {
        sparse_fields,
        dense_fields: (0..n_dense).map(|i| format!("d{i}")).collect(),
    }
}

pub fn random_rows(
    rng: &mut ChaCha8Rng,
    schema: &FeatureSchema,
    client: u64,
    n: usize,
) -> Vec<Interaction> {
    let n_items = schema.n_items();
    (0..n)
        .map(|t| Interaction {
            client_id: ClientId(client),
            item_id: rng.random_range(0..n_items),
            sparse_values: schema
                .extra_single_fields()
                .map(|f| rng.random_range(0..f.cardinality))
                .collect(),
            history: match schema.history_field() {
                Some(f) => (0..rng.random_range(0..4))
                    .map(|_| rng.random_range(0..f.cardinality))
                    .collect(),
                None => Vec::new(),
            },
            dense_values: (0..schema.dense_fields.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            label: rng.random_range(0..2),
            timestamp: t as i64,
        })
        .collect()
}

/// Clients with random rows; every client has `train_rows` train and
/// `test_rows` test interactions.
pub fn random_dataset(
    seed: u64,
    schema: &FeatureSchema,
    n_clients: u64,
    train_rows: usize,
    test_rows: usize,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clients = (0..n_clients)
        .map(|c| ClientDataset {
            client_id: ClientId(c),
            train: random_rows(&mut rng, schema, c, train_rows),
            test: random_rows(&mut rng, schema, c, test_rows),
        })
        .collect();
    Dataset::new(schema.clone(), clients).unwrap()
}

/// Synthetic regime used by the desk-scale reproduction checks: few items
/// and clusters with strong cluster affinity.
pub fn calibrated_synth(n_clients: usize) -> SynthParams {
    SynthParams {
        n_clients,
        n_items: 48,
        n_clusters: 6,
        affinity_strength: 6.0,
        zipf_exponent: 0.5,
        interactions_per_client: 20,
        ..SynthParams::default()
    }
}

pub const CALIBRATED_DATA_SEED: u64 = 7;

pub fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// O(n^2) pairwise AUC with ties counted one half.
pub fn pairwise_auc(labels: &[u8], scores: &[f64]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Per-tensor relative error `|g - fd| / (|g| + |fd|)` (L2 norms) between the
/// analytic gradient and central differences with step `h`.
pub fn finite_difference_errors(
    model: &tierfl_core::Dlrm,
    params: &tierfl_core::ParamTensors,
    batch: &[Interaction],
    h: f64,
) -> Vec<(String, f64)> {
    let (_, grad) = model.loss_and_grad(params, batch).unwrap();
    let loss = |p: &tierfl_core::ParamTensors| model.loss_and_grad(p, batch).unwrap().0;
    let ids: Vec<_> = params.ids().collect();
    ids.into_iter()
        .map(|id| {
            let n = params.get(id).len();
            let (mut diff, mut norm) = (0.0f64, 0.0f64);
            for k in 0..n {
                let mut plus = params.clone();
                plus.get_mut(id).data[k] += h;
                let mut minus = params.clone();
                minus.get_mut(id).data[k] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let g = grad.get(id).data[k];
                diff += (g - fd).powi(2);
                norm += g * g + fd * fd;
            }
            let rel = if norm == 0.0 {
                0.0
            } else {
                diff.sqrt() / norm.sqrt()
            };
            (id.name(), rel)
        })
        .collect()
}
