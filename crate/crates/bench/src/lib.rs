//! Fixtures shared by the criterion benches.

use tierfl_core::{synthesize, Dataset, Dlrm, ModelConfig, SynthParams};

/// A synthetic dataset and the default-sized model for it.
pub fn fixture(n_clients: usize) -> (Dataset, Dlrm) {
    let params = SynthParams {
        n_clients,
        n_items: 48,
        n_clusters: 6,
        affinity_strength: 6.0,
        zipf_exponent: 0.5,
        ..SynthParams::default()
    };
    let dataset = synthesize(&params, 7).expect("valid synth params");
    let model = Dlrm::new(dataset.schema.clone(), ModelConfig::default()).expect("valid model");
    (dataset, model)
}
