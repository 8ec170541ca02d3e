//! Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tierfl_core::compression::{quantize_tensor, QuantScheme, QuantSpec};
use tierfl_core::experiment::{run_experiment, ExperimentConfig, Mapping};
use tierfl_core::flengine::{train, train_from};
use tierfl_core::rng::rng_from;
use tierfl_core::{
    auc, dirichlet_tier_map, fairness, heterogeneity_report, per_tier_auc, random_tier_map,
    synthesize, ClientDataset, ClientId, Dataset, Dlrm, HyperParams, Matrix, ModelConfig,
    OptimizationConfig, ServerOptimizer, Tier,
};

fn verdict(n: u32, ok: bool, started: Instant, detail: String) {
    println!(
        "[{}] criterion {n}: {detail} ({:.1}s)",
        if ok { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    assert!(ok, "criterion {n} failed: {detail}");
}

#[test]
fn criterion_01_gradient_oracle() {
    let started = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    for instance in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(instance);
        let schema = common::schema(
            rng.random_range(2..8),
            rng.random_range(0..4),
            rng.random_range(0..3),
            rng.random_bool(0.5),
        );
        let config = ModelConfig {
            embedding_dim: rng.random_range(1..5),
            bottom_hidden: rng.random_range(1..5),
            top_hidden: rng.random_range(1..9),
        };
        let model = Dlrm::new(schema.clone(), config).unwrap();
        // Zero biases would sit exactly on ReLU kinks when there are no dense inputs.
        let mut params = model.init(instance);
        for b in [
            &mut params.bottom_b1,
            &mut params.bottom_b2,
            &mut params.top_b1,
            &mut params.top_b2,
        ] {
            b.data
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let n = rng.random_range(1..7);
        let batch = common::random_rows(&mut rng, &schema, 0, n);
        for (name, rel) in common::finite_difference_errors(&model, &params, &batch, 1e-4) {
            if rel > worst.1 {
                worst = (format!("instance {instance} {name}"), rel);
            }
        }
    }
    verdict(
        1,
        worst.1 < 1e-4,
        started,
        format!("max relative gradient error {:.2e} at {}", worst.1, worst.0),
    );
}

#[test]
fn criterion_02_fedavg_equals_centralized() {
    let started = Instant::now();
    let schema = common::schema(20, 4, 2, true);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let clients: Vec<ClientDataset> = (0..10u64)
        .map(|c| {
            let n = rng.random_range(1..12);
            ClientDataset {
                client_id: ClientId(c),
                train: common::random_rows(&mut rng, &schema, c, n),
                test: vec![],
            }
        })
        .collect();
    let dataset = Dataset::new(schema.clone(), clients).unwrap();
    let model = Dlrm::new(schema, ModelConfig::default()).unwrap();
    let init = model.init(1);
    let hyper = HyperParams {
        clients_per_round: 10,
        client_lr: 1.0,
        server: ServerOptimizer::Sgd { lr: 1.0 },
        ..HyperParams::default()
    };
    let assignment = random_tier_map(&dataset, 0).unwrap();
    let fl = train_from(
        &model,
        init.clone(),
        &dataset,
        &assignment,
        &OptimizationConfig::none(),
        &hyper,
        4,
    )
    .unwrap();

    let union: Vec<_> = dataset
        .clients
        .iter()
        .flat_map(|c| c.train.clone())
        .collect();
    let (_, g) = model.loss_and_grad(&init, &union).unwrap();
    let mut central = init;
    central.add_scaled(&g, -1.0);
    let diff = fl.params.max_abs_diff(&central);
    verdict(
        2,
        diff <= 1e-8 && fl.log.rounds.len() == 1,
        started,
        format!(
            "max |FL - centralized| = {diff:.2e} over {} rounds",
            fl.log.rounds.len()
        ),
    );
}

#[test]
fn criterion_03_quantizer_unbiasedness() {
    let started = Instant::now();
    const TRIALS: usize = 100_000;
    let mut worst_z = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for bits in [2u32, 4, 8] {
        for case in 0..5u64 {
            let x: f64 = rng.random_range(0.0..1.0);
            // Endpoints pin the grid to [0, 1]; the rest are independent trials of x.
            let mut data = vec![x; TRIALS + 2];
            data[0] = 0.0;
            data[1] = 1.0;
            let mut m = Matrix::from_vec(1, data.len(), data).unwrap();
            quantize_tensor(
                &mut m,
                &QuantSpec::new(bits, QuantScheme::Plain),
                &mut rng_from(&[bits as u64, case]),
            )
            .unwrap();
            let trials = &m.data[2..];
            let mean = trials.iter().sum::<f64>() / TRIALS as f64;
            let var = trials.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (TRIALS - 1) as f64;
            let se = (var / TRIALS as f64).sqrt();
            let z = if se == 0.0 {
                if mean == x {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (mean - x).abs() / se
            };
            worst_z = worst_z.max(z);
        }
    }
    let mut zeros = vec![0.0; 1_000_000];
    for (i, v) in zeros.iter_mut().enumerate().step_by(997) {
        *v = (i as f64).sin();
    }
    let n_zero = zeros.iter().filter(|v| **v == 0.0).count();
    let mut m = Matrix::from_vec(1, zeros.len(), zeros.clone()).unwrap();
    quantize_tensor(
        &mut m,
        &QuantSpec::new(2, QuantScheme::SignMagnitude),
        &mut rng_from(&[33]),
    )
    .unwrap();
    let kept = zeros
        .iter()
        .zip(&m.data)
        .filter(|(x, v)| **x == 0.0 && **v == 0.0)
        .count();
    verdict(
        3,
        worst_z <= 3.0 && kept == n_zero,
        started,
        format!("worst |mean - x|/SE = {worst_z:.2}; sign-magnitude zeros kept {kept}/{n_zero}"),
    );
}

#[test]
fn criterion_04_auc_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut compared = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=500);
        let levels = rng.random_range(2..40);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        match (
            auc(&labels, &scores).unwrap(),
            common::pairwise_auc(&labels, &scores),
        ) {
            (Some(a), Some(b)) => {
                worst = worst.max((a - b).abs());
                compared += 1;
            }
            (None, None) => {}
            _ => worst = f64::INFINITY,
        }
    }
    verdict(
        4,
        worst <= 1e-10,
        started,
        format!("max |rank-sum - pairwise| = {worst:.2e} over {compared} instances with ties"),
    );
}

const ALPHAS: [f64; 5] = [0.005, 0.05, 0.5, 5.0, 5000.0];

#[test]
fn criterion_05_dirichlet_skew_monotonicity() {
    let started = Instant::now();
    let dataset = synthesize(
        &common::calibrated_synth(3000),
        common::CALIBRATED_DATA_SEED,
    )
    .unwrap();
    let medians: Vec<f64> = ALPHAS
        .iter()
        .map(|&alpha| {
            common::median(
                (0..10)
                    .map(|seed| {
                        let a = dirichlet_tier_map(&dataset, alpha, seed, true).unwrap();
                        heterogeneity_report(&dataset, &a, 10).unwrap().tv_distance
                    })
                    .collect(),
            )
        })
        .collect();
    let decreasing = medians.windows(2).all(|w| w[0] > w[1]);
    let ok = decreasing && medians[4] < 0.05 && medians[0] > 0.5;
    verdict(
        5,
        ok,
        started,
        format!(
            "median tv over alpha {ALPHAS:?} = [{}]",
            medians
                .iter()
                .map(|m| format!("{m:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );
}

#[test]
fn criterion_06_partition_and_balance() {
    let started = Instant::now();
    let dataset = synthesize(
        &common::calibrated_synth(3000),
        common::CALIBRATED_DATA_SEED,
    )
    .unwrap();
    let n = dataset.n_clients();
    let mut min_share = 1.0f64;
    let mut partitions = true;
    for &alpha in &ALPHAS {
        for seed in 0..10 {
            let a = dirichlet_tier_map(&dataset, alpha, seed, true).unwrap();
            partitions &= a.check_covers(&dataset).is_ok() && a.sizes().iter().sum::<usize>() == n;
            for s in a.sizes() {
                min_share = min_share.min(s as f64 / n as f64);
            }
        }
    }
    verdict(
        6,
        partitions && min_share >= 0.2,
        started,
        format!(
            "all 50 assignments partition: {partitions}; smallest tier share {:.1}%",
            100.0 * min_share
        ),
    );
}

struct Desk {
    dataset: Dataset,
    model: Dlrm,
    hyper: HyperParams,
}

fn desk() -> Desk {
    let dataset = synthesize(
        &common::calibrated_synth(3000),
        common::CALIBRATED_DATA_SEED,
    )
    .unwrap();
    let model = Dlrm::new(dataset.schema.clone(), ModelConfig::default()).unwrap();
    Desk {
        dataset,
        model,
        hyper: HyperParams::default(),
    }
}

/// Paired baseline/treatment runs for seeds 0..5: (baseline total AUC,
/// fairness report) per seed.
fn paired(
    desk: &Desk,
    mapping: Mapping,
    treatment: &str,
) -> Vec<(f64, tierfl_core::FairnessReport)> {
    let opt = OptimizationConfig::preset(treatment).unwrap();
    (0..5u64)
        .map(|seed| {
            let a = mapping.assign(&desk.dataset, seed).unwrap();
            let run = |o: &OptimizationConfig| {
                let out = train(&desk.model, &desk.dataset, &a, o, &desk.hyper, seed).unwrap();
                per_tier_auc(&desk.model, &out.params, &desk.dataset, &a).unwrap()
            };
            let base = run(&OptimizationConfig::none());
            let treat = run(&opt);
            (
                base.auc_total.unwrap(),
                fairness(&base.auc_per_tier, &treat.auc_per_tier).unwrap(),
            )
        })
        .collect()
}

const HETERO: Mapping = Mapping::Dirichlet {
    alpha: 0.05,
    balanced: true,
};

#[test]
fn criterion_07_exclude_lo_amplified_by_heterogeneity() {
    let started = Instant::now();
    let d = desk();
    let random = paired(&d, Mapping::Random, "Exclude Lo");
    let hetero = paired(&d, HETERO, "Exclude Lo");
    let min_base = random
        .iter()
        .chain(&hetero)
        .map(|r| r.0)
        .fold(1.0, f64::min);
    let m_random = common::median(random.iter().map(|r| r.1.mdac).collect());
    let m_hetero = common::median(hetero.iter().map(|r| r.1.mdac).collect());
    let low_worst = hetero
        .iter()
        .filter(|(_, f)| {
            let rel = |t: Tier| f.rel_change.get(t).unwrap();
            rel(Tier::Low) <= rel(Tier::Mid) && rel(Tier::Low) <= rel(Tier::High)
        })
        .count();
    let ok = min_base > 0.6 && m_hetero >= 3.0 * m_random && low_worst >= 4;
    verdict(
        7,
        ok,
        started,
        format!(
            "min baseline AUC {min_base:.3}; median MDAC alpha=0.05 {:.2}% vs random {:.2}% ({:.1}x); low tier worst in {low_worst}/5",
            100.0 * m_hetero,
            100.0 * m_random,
            m_hetero / m_random
        ),
    );
}

#[test]
fn criterion_08_quants_fairer_than_quant() {
    let started = Instant::now();
    let d = desk();
    let quant = common::median(
        paired(&d, HETERO, "Quant 1:4:16")
            .iter()
            .map(|r| r.1.mdac)
            .collect(),
    );
    let quants = common::median(
        paired(&d, HETERO, "QuantS 1:4:16")
            .iter()
            .map(|r| r.1.mdac)
            .collect(),
    );
    verdict(
        8,
        quants < quant,
        started,
        format!(
            "median MDAC QuantS 1:4:16 {:.2}% vs Quant 1:4:16 {:.2}%",
            100.0 * quants,
            100.0 * quant
        ),
    );
}

fn strip_elapsed(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn criterion_09_determinism_across_workers() {
    let started = Instant::now();
    let run = |workers: usize| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::from_toml_str(
            r#"
version = 1
seeds = [1, 2]
[dataset]
seed = 3
[dataset.synth]
n_clients = 400
n_items = 48
n_clusters = 6
affinity_strength = 6.0
zipf_exponent = 0.5
[mapping]
alpha_grid = [0.05, 5000.0]
[model]
top_hidden = 32
[hyper]
clients_per_round = 40
"#,
        )
        .unwrap();
        cfg.output_dir = dir.path().to_path_buf();
        cfg.hyper.workers = Some(workers);
        run_experiment(&cfg).unwrap();
        let read = |f: &str| strip_elapsed(&std::fs::read_to_string(dir.path().join(f)).unwrap());
        (read("results.csv"), read("baseline.csv"))
    };
    let (a, b) = (run(1), run(4));
    let rows = a.0.lines().count() - 1;
    verdict(
        9,
        a == b && rows == 2 * 2 * 14,
        started,
        format!(
            "results.csv ({rows} rows) and baseline.csv identical with 1 and 4 workers: {}",
            a == b
        ),
    );
}

#[test]
fn criterion_10_preset_fidelity() {
    let started = Instant::now();
    let expected: [(&str, [f64; 3]); 12] = [
        ("Prune 1:2:4", [0.75, 0.5, 0.0]),
        ("Prune 1:2:8", [0.875, 0.75, 0.0]),
        ("Prune 1:4:16", [0.9375, 0.75, 0.0]),
        ("Quant 1:2:4", [8.0, 16.0, 32.0]),
        ("Quant 1:2:8", [4.0, 8.0, 32.0]),
        ("Quant 1:4:16", [2.0, 4.0, 32.0]),
        ("QuantS 1:2:4", [8.0, 16.0, 32.0]),
        ("QuantS 1:2:8", [4.0, 8.0, 32.0]),
        ("QuantS 1:4:16", [2.0, 4.0, 32.0]),
        ("Channel 1:2:4", [0.25, 0.5, 1.0]),
        ("Channel 1:2:8", [0.125, 0.25, 1.0]),
        ("Channel 1:4:16", [0.0625, 0.25, 1.0]),
    ];
    let mut mismatches = Vec::new();
    for (name, [l, m, h]) in expected {
        let t = OptimizationConfig::preset(name).and_then(|c| c.per_tier);
        if t.map(|t| (t.low, t.mid, t.high)) != Some((l, m, h)) {
            mismatches.push(name);
        }
    }
    let ex = OptimizationConfig::preset("Exclude Lo").map(|c| c.variant);
    let ov = OptimizationConfig::preset("Overselect").map(|c| (c.variant, c.overselect_fraction));
    if ex != Some(tierfl_core::Variant::ExcludeLo) {
        mismatches.push("Exclude Lo");
    }
    if ov != Some((tierfl_core::Variant::Overselect, 0.2)) {
        mismatches.push("Overselect");
    }
    let n_presets = tierfl_core::flengine::PRESET_NAMES.len() - 1;
    verdict(
        10,
        mismatches.is_empty() && n_presets == 14,
        started,
        format!("{n_presets} presets checked; mismatches: {mismatches:?}"),
    );
}
