//! Deterministic synthetic click data with planted cluster structure.
//!
//! Clients and items each belong to one latent cluster. A client's items are
//! drawn with weight `popularity(item) * exp(affinity * [same cluster])`, and
//! clicks follow a logistic model over latent client/item factors plus a
//! per-item bias. Clicked items feed the client's history field, so the model
//! can recover a client's cluster from history without a user-id feature.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    ClientId, Dataset, FeatureSchema, Interaction, SparseField, SplitPolicy, ITEM_FIELD,
};
use crate::error::{Error, Result};
use crate::rng::rng_from;

const SYNTH_STREAM: u64 = 0x5157;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub n_clients: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub interactions_per_client: usize,
    pub affinity_strength: f64,
    /// Zipf exponent of the cluster-independent item popularity.
    pub zipf_exponent: f64,
    pub latent_dim: usize,
    /// Per-coordinate noise around the cluster centroid.
    pub latent_noise: f64,
    /// Multiplies the client/item latent dot product in the click logit.
    pub preference_scale: f64,
    pub item_bias_std: f64,
    /// Intercept of the click logit.
    pub click_offset: f64,
    /// Weight of the dense context feature in the click logit.
    pub context_weight: f64,
    /// Most recent clicks kept in the history field.
    pub history_len: usize,
    pub split: SplitPolicy,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_clients: 1000,
            n_items: 200,
            n_clusters: 8,
            interactions_per_client: 20,
            affinity_strength: 2.0,
            zipf_exponent: 0.8,
            latent_dim: 8,
            latent_noise: 0.5,
            preference_scale: 1.5,
            item_bias_std: 1.0,
            click_offset: -0.5,
            context_weight: 0.5,
            history_len: 10,
            split: SplitPolicy::default(),
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients < 3 {
            return Err(Error::invalid("n_clients must be >= 3"));
        }
        if self.n_items == 0 || self.n_items > u32::MAX as usize {
            return Err(Error::invalid("n_items must be in [1, 2^32)"));
        }
        if self.n_clusters == 0 {
            return Err(Error::invalid("n_clusters must be >= 1"));
        }
        if self.interactions_per_client == 0 {
            return Err(Error::invalid("interactions_per_client must be >= 1"));
        }
        if !(self.affinity_strength >= 0.0 && self.affinity_strength.is_finite()) {
            return Err(Error::invalid("affinity_strength must be finite and >= 0"));
        }
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be >= 1"));
        }
        for (name, v) in [
            ("zipf_exponent", self.zipf_exponent),
            ("latent_noise", self.latent_noise),
            ("item_bias_std", self.item_bias_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        self.split.validate()
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema {
            sparse_fields: vec![
                SparseField::single(ITEM_FIELD, self.n_items as u32),
                SparseField::single("category", self.n_clusters as u32),
                SparseField::multi("history", self.n_items as u32),
            ],
            dense_fields: vec!["context".into()],
        }
    }
}

/// Latent assignments behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    /// Indexed by client id (ids are `0..n_clients`).
    pub client_cluster: Vec<usize>,
    pub item_cluster: Vec<usize>,
}

pub fn synthesize(params: &SynthParams, seed: u64) -> Result<Dataset> {
    synthesize_with_truth(params, seed).map(|(d, _)| d)
}

pub fn synthesize_with_truth(params: &SynthParams, seed: u64) -> Result<(Dataset, SyntheticTruth)> {
    params.validate()?;
    let mut rng = rng_from(&[seed, SYNTH_STREAM]);
    let k = params.n_clusters;
    let d = params.latent_dim;

    let item_cluster = balanced_labels(&mut rng, params.n_items, k);
    let client_cluster = balanced_labels(&mut rng, params.n_clients, k);

    let mut rank: Vec<usize> = (0..params.n_items).collect();
    rank.shuffle(&mut rng);
    let popularity: Vec<f64> = rank
        .iter()
        .map(|&r| (1.0 + r as f64).powf(-params.zipf_exponent))
        .collect();

    let centroids: Vec<Vec<f64>> = (0..k).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect();
    let item_latent: Vec<Vec<f64>> = item_cluster
        .iter()
        .map(|&c| perturb(&mut rng, &centroids[c], params.latent_noise))
        .collect();
    let item_bias: Vec<f64> = (0..params.n_items)
        .map(|_| params.item_bias_std * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let boost = params.affinity_strength.exp();
    let samplers: Vec<WeightedIndex<f64>> = (0..k)
        .map(|c| {
            let w = popularity
                .iter()
                .zip(&item_cluster)
                .map(|(&p, &ic)| if ic == c { p * boost } else { p });
            WeightedIndex::new(w).expect("positive weights")
        })
        .collect();

    let scale = params.preference_scale / (d as f64).sqrt();
    let mut clients = Vec::with_capacity(params.n_clients);
    for (cid, &cc) in client_cluster.iter().enumerate() {
        let user = perturb(&mut rng, &centroids[cc], params.latent_noise);
        let mut history: Vec<u32> = Vec::new();
        let mut rows = Vec::with_capacity(params.interactions_per_client);
        for t in 0..params.interactions_per_client {
            let item = samplers[cc].sample(&mut rng);
            let context: f64 = rng.random();
            let logit = scale * dot(&user, &item_latent[item])
                + item_bias[item]
                + params.click_offset
                + params.context_weight * (context - 0.5);
            let p = 1.0 / (1.0 + (-logit).exp());
            let label = u8::from(rng.random::<f64>() < p);
            rows.push(Interaction {
                client_id: ClientId(cid as u64),
                item_id: item as u32,
                sparse_values: vec![item_cluster[item] as u32],
                history: history.clone(),
                dense_values: vec![context],
                label,
                timestamp: t as i64,
            });
            if label == 1 && params.history_len > 0 {
                if history.len() == params.history_len {
                    history.remove(0);
                }
                history.push(item as u32);
            }
        }
        clients.push(params.split.split(ClientId(cid as u64), rows));
    }
    let dataset = Dataset::new(params.schema(), clients)?;
    Ok((
        dataset,
        SyntheticTruth {
            client_cluster,
            item_cluster,
        },
    ))
}

fn balanced_labels<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    labels
}

fn gaussian_vec<R: Rng>(rng: &mut R, d: usize, std: f64) -> Vec<f64> {
    (0..d)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn perturb<R: Rng>(rng: &mut R, center: &[f64], std: f64) -> Vec<f64> {
    center
        .iter()
        .map(|&c| c + std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
