//! Federated rounds: epoch planning, local full-batch steps with tier-aware
//! compression or channel slicing, coverage-aware FedAvg and a server-side
//! optimizer.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::{self, PruneSpec, QuantScheme, QuantSpec, Rounding};
use crate::dataset::{ClientDataset, ClientId, Dataset};
use crate::error::{Error, Result};
use crate::model::{Dlrm, SubModelSpec};
use crate::rng::{derive_seed, rng_from, stream, truncated_normal};
use crate::tensor::ParamTensors;
use crate::tiering::{PerTier, Tier, TierAssignment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    None,
    ExcludeLo,
    Overselect,
    Prune,
    Quant,
    QuantS,
    Channel,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::None => "None",
            Variant::ExcludeLo => "Exclude Lo",
            Variant::Overselect => "Overselect",
            Variant::Prune => "Prune",
            Variant::Quant => "Quant",
            Variant::QuantS => "QuantS",
            Variant::Channel => "Channel",
        })
    }
}

/// A tier-aware optimization and its per-tier parameters.
///
/// `per_tier` holds drop fractions (Prune), bit widths (Quant/QuantS) or
/// channel fractions (Channel); other variants ignore it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizationConfig {
    pub variant: Variant,
    pub per_tier: Option<PerTier<f64>>,
    pub overselect_fraction: f64,
    pub rounding: Rounding,
    pub prune_rescale: bool,
}

pub const DEFAULT_OVERSELECT_FRACTION: f64 = 0.2;

/// Preset names: the baseline followed by the fourteen tier-aware
/// configurations.
pub const PRESET_NAMES: [&str; 15] = [
    "None",
    "Exclude Lo",
    "Overselect",
    "Prune 1:2:4",
    "Prune 1:2:8",
    "Prune 1:4:16",
    "Quant 1:2:4",
    "Quant 1:2:8",
    "Quant 1:4:16",
    "QuantS 1:2:4",
    "QuantS 1:2:8",
    "QuantS 1:4:16",
    "Channel 1:2:4",
    "Channel 1:2:8",
    "Channel 1:4:16",
];

impl OptimizationConfig {
    pub fn new(variant: Variant, per_tier: Option<PerTier<f64>>) -> Self {
        Self {
            variant,
            per_tier,
            overselect_fraction: DEFAULT_OVERSELECT_FRACTION,
            rounding: Rounding::Unbiased,
            prune_rescale: false,
        }
    }

    pub fn none() -> Self {
        Self::new(Variant::None, None)
    }

    /// Expands a preset name such as `"Quant 1:4:16"`.
    pub fn preset(name: &str) -> Option<Self> {
        let (variant, ratio) = match name.trim().split_once(' ') {
            Some((v, r)) if !v.eq_ignore_ascii_case("exclude") => (v, Some(r.trim())),
            _ => (name.trim(), None),
        };
        let ratio_idx = match ratio {
            None => None,
            Some("1:2:4") => Some(0),
            Some("1:2:8") => Some(1),
            Some("1:4:16") => Some(2),
            Some(_) => return None,
        };
        let pick = |table: [[f64; 3]; 3]| {
            ratio_idx.map(|i| {
                let [l, m, h] = table[i];
                PerTier::new(l, m, h)
            })
        };
        const PRUNE: [[f64; 3]; 3] = [[0.75, 0.5, 0.0], [0.875, 0.75, 0.0], [0.9375, 0.75, 0.0]];
        const BITS: [[f64; 3]; 3] = [[8.0, 16.0, 32.0], [4.0, 8.0, 32.0], [2.0, 4.0, 32.0]];
        const CHANNEL: [[f64; 3]; 3] = [[0.25, 0.5, 1.0], [0.125, 0.25, 1.0], [0.0625, 0.25, 1.0]];
        let cfg = match (variant, ratio_idx) {
            ("None", None) => Self::none(),
            ("Exclude Lo", None) => Self::new(Variant::ExcludeLo, None),
            ("Overselect", None) => Self::new(Variant::Overselect, None),
            ("Prune", Some(_)) => Self::new(Variant::Prune, pick(PRUNE)),
            ("Quant", Some(_)) => Self::new(Variant::Quant, pick(BITS)),
            ("QuantS", Some(_)) => Self::new(Variant::QuantS, pick(BITS)),
            ("Channel", Some(_)) => Self::new(Variant::Channel, pick(CHANNEL)),
            _ => return None,
        };
        Some(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let needs_tiers = matches!(
            self.variant,
            Variant::Prune | Variant::Quant | Variant::QuantS | Variant::Channel
        );
        if needs_tiers {
            let t = self
                .per_tier
                .ok_or_else(|| Error::invalid(format!("{} needs per-tier values", self.variant)))?;
            // Low is treated at least as aggressively as Mid, Mid as High.
            let monotone = match self.variant {
                Variant::Prune => t.low >= t.mid && t.mid >= t.high,
                _ => t.low <= t.mid && t.mid <= t.high,
            };
            if !monotone {
                return Err(Error::invalid(format!(
                    "{} per-tier values must be monotone from low to high",
                    self.variant
                )));
            }
            for tier in Tier::ALL {
                match self.variant {
                    Variant::Prune => PruneSpec::new(t.get(tier)).validate()?,
                    Variant::Quant | Variant::QuantS => self.quant_spec(tier)?.validate()?,
                    Variant::Channel => {
                        let f = t.get(tier);
                        if !(f > 0.0 && f <= 1.0) {
                            return Err(Error::invalid(format!(
                                "channel fraction {f} not in (0, 1]"
                            )));
                        }
                    }
                    _ => {}
                }
            }
        }
        if self.variant == Variant::Overselect
            && !(self.overselect_fraction >= 0.0 && self.overselect_fraction.is_finite())
        {
            return Err(Error::invalid("overselect fraction must be >= 0"));
        }
        Ok(())
    }

    fn quant_spec(&self, tier: Tier) -> Result<QuantSpec> {
        let bits = self.per_tier.map_or(32.0, |t| t.get(tier));
        if bits.fract() != 0.0 || bits < 1.0 {
            return Err(Error::invalid(format!(
                "bit width {bits} is not a positive integer"
            )));
        }
        let scheme = if self.variant == Variant::QuantS {
            QuantScheme::SignMagnitude
        } else {
            QuantScheme::Plain
        };
        Ok(QuantSpec {
            bits: bits as u32,
            scheme,
            rounding: self.rounding,
        })
    }

    /// Channel slice for `tier`, if this is a Channel configuration.
    pub fn channel_for(&self, tier: Tier) -> Option<SubModelSpec> {
        match (self.variant, self.per_tier) {
            (Variant::Channel, Some(t)) => Some(SubModelSpec::new(t.get(tier))),
            _ => None,
        }
    }

    /// Applies this tier's compression operator to a client delta.
    pub fn compress(&self, tier: Tier, delta: ParamTensors, seed: u64) -> Result<ParamTensors> {
        match (self.variant, self.per_tier) {
            (Variant::Prune, Some(t)) => {
                let spec = PruneSpec {
                    drop_fraction: t.get(tier),
                    rescale: self.prune_rescale,
                };
                if spec.drop_fraction == 0.0 {
                    return Ok(delta);
                }
                compression::prune(&delta, &spec, seed)
            }
            (Variant::Quant | Variant::QuantS, Some(_)) => {
                let spec = self.quant_spec(tier)?;
                if spec.is_identity() {
                    return Ok(delta);
                }
                compression::quantize(&delta, &spec, seed)
            }
            _ => Ok(delta),
        }
    }

    /// Extra clients selected per round under Overselect.
    pub fn extra_per_round(&self, clients_per_round: usize) -> usize {
        if self.variant == Variant::Overselect {
            ceil_tol(self.overselect_fraction * clients_per_round as f64)
        } else {
            0
        }
    }
}

/// `ceil` that ignores floating-point residue just above an integer.
fn ceil_tol(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Per-tier Gaussian latency model, in arbitrary time units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierPerformanceModel {
    pub mean: PerTier<f64>,
    pub std: PerTier<f64>,
}

impl Default for TierPerformanceModel {
    fn default() -> Self {
        let mean = PerTier::new(3.0, 1.5, 1.0);
        Self {
            mean,
            std: mean.map(|m| 0.2 * m),
        }
    }
}

impl TierPerformanceModel {
    pub fn validate(&self) -> Result<()> {
        for t in Tier::ALL {
            let (m, s) = (self.mean.get(t), self.std.get(t));
            if !(m > 0.0 && m.is_finite() && s >= 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!(
                    "latency model for {t}: need mean > 0 and std >= 0"
                )));
            }
        }
        Ok(())
    }

    /// A latency draw, truncated below at a tenth of the mean.
    pub fn sample(&self, tier: Tier, seed: u64) -> f64 {
        let mut rng = rng_from(&[seed, stream::LATENCY]);
        let m = self.mean.get(tier);
        truncated_normal(&mut rng, m, self.std.get(tier), m / 10.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Coverage {
    /// Every coordinate trained.
    Full,
    /// 0/1 mask in full model shape.
    Mask(Box<ParamTensors>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: ClientId,
    /// Parameters after local training minus round-start parameters.
    pub delta: ParamTensors,
    pub coverage: Coverage,
    pub n_samples: usize,
    pub tier: Tier,
    pub latency: f64,
    /// Training loss at the round-start parameters.
    pub loss: f64,
}

impl ClientUpdate {
    pub fn coverage_mask(&self) -> ParamTensors {
        match &self.coverage {
            Coverage::Full => self.delta.filled_like(1.0),
            Coverage::Mask(m) => (**m).clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPlan {
    pub clients: Vec<ClientId>,
    /// Slowest updates discarded at aggregation.
    pub n_drop: usize,
}

/// Shuffles the eligible clients once and chunks them into rounds so every
/// eligible client is selected exactly once.
pub fn plan_epoch(
    dataset: &Dataset,
    assignment: &TierAssignment,
    opt: &OptimizationConfig,
    clients_per_round: usize,
    seed: u64,
) -> Result<Vec<RoundPlan>> {
    if clients_per_round == 0 {
        return Err(Error::invalid("clients_per_round must be >= 1"));
    }
    assignment.check_covers(dataset)?;
    let mut eligible: Vec<ClientId> = dataset
        .clients
        .iter()
        .filter(|c| !c.train.is_empty())
        .map(|c| c.client_id)
        .filter(|id| !(opt.variant == Variant::ExcludeLo && assignment.tier_of[id] == Tier::Low))
        .collect();
    if eligible.is_empty() {
        return Err(Error::Empty("no eligible clients".into()));
    }
    let mut rng = rng_from(&[seed, stream::PLAN]);
    eligible.shuffle(&mut rng);

    let extra = opt.extra_per_round(clients_per_round);
    let plans = eligible
        .chunks(clients_per_round + extra)
        .map(|chunk| {
            let n_drop = if chunk.len() == clients_per_round + extra {
                extra
            } else if extra == 0 {
                0
            } else {
                // Largest base b with b + ceil(f*b) <= m, keeping at least one.
                let m = chunk.len();
                let base = (1..=m)
                    .rev()
                    .find(|&b| b + ceil_tol(opt.overselect_fraction * b as f64) <= m)
                    .unwrap_or(1);
                m - base
            };
            RoundPlan {
                clients: chunk.to_vec(),
                n_drop,
            }
        })
        .collect();
    Ok(plans)
}

/// One local full-batch SGD step followed by the tier's compression, or
/// channel-sliced training under Channel.
#[allow(clippy::too_many_arguments)]
pub fn run_client(
    model: &Dlrm,
    round_start: &ParamTensors,
    client: &ClientDataset,
    tier: Tier,
    opt: &OptimizationConfig,
    perf: &TierPerformanceModel,
    client_lr: f64,
    seed: u64,
) -> Result<ClientUpdate> {
    if client.train.is_empty() {
        return Err(Error::Empty(format!(
            "client {} has no training data",
            client.client_id
        )));
    }
    let (loss, delta, coverage) = match opt.channel_for(tier) {
        Some(spec) if spec.channel_fraction < 1.0 => {
            let sub = model.extract_submodel(round_start, spec)?;
            let (loss, mut g) = model.loss_and_grad(&sub, &client.train)?;
            g.scale(-client_lr);
            let (delta, mask) = model.embed_subgradient(&g, spec)?;
            (loss, delta, Coverage::Mask(Box::new(mask)))
        }
        _ => {
            let (loss, mut g) = model.loss_and_grad(round_start, &client.train)?;
            g.scale(-client_lr);
            let delta = opt.compress(tier, g, derive_seed(&[seed, stream::COMPRESS]))?;
            (loss, delta, Coverage::Full)
        }
    };
    if !delta.all_finite() {
        return Err(Error::NonFinite(format!(
            "delta of client {}",
            client.client_id
        )));
    }
    Ok(ClientUpdate {
        client_id: client.client_id,
        delta,
        coverage,
        n_samples: client.train.len(),
        tier,
        latency: perf.sample(tier, seed),
        loss,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    /// Negated coverage-aware weighted mean of client deltas.
    pub pseudo_gradient: ParamTensors,
    pub dropped: Vec<ClientId>,
}

/// Drops the `n_drop` slowest updates (ties: lower client id dropped first),
/// then averages each coordinate over the surviving clients that cover it,
/// weighted by sample count.
pub fn aggregate(updates: &[ClientUpdate], n_drop: usize) -> Result<Aggregate> {
    if updates.is_empty() {
        return Err(Error::Empty("no client updates".into()));
    }
    if n_drop >= updates.len() {
        return Err(Error::invalid("every client update would be dropped"));
    }
    let mut by_latency: Vec<&ClientUpdate> = updates.iter().collect();
    by_latency.sort_by(|a, b| {
        b.latency
            .total_cmp(&a.latency)
            .then(a.client_id.cmp(&b.client_id))
    });
    let mut dropped: Vec<ClientId> = by_latency[..n_drop].iter().map(|u| u.client_id).collect();
    dropped.sort();
    let mut kept: Vec<&ClientUpdate> = by_latency[n_drop..].to_vec();
    kept.sort_by_key(|u| u.client_id);

    let shape = &kept[0].delta;
    for u in &kept[1..] {
        u.delta.check_same_shape(shape, "aggregate")?;
    }
    let mut numer = shape.zeros_like();
    let mut masked_weight: Option<ParamTensors> = None;
    let mut full_weight = 0.0;
    for u in &kept {
        let w = u.n_samples as f64;
        match &u.coverage {
            Coverage::Full => {
                numer.add_scaled(&u.delta, w);
                full_weight += w;
            }
            Coverage::Mask(mask) => {
                for ((n, d), m) in numer
                    .tensors_mut()
                    .into_iter()
                    .zip(u.delta.tensors())
                    .zip(mask.tensors())
                {
                    for ((nv, dv), mv) in n.data.iter_mut().zip(&d.data).zip(&m.data) {
                        *nv += w * mv * dv;
                    }
                }
                masked_weight
                    .get_or_insert_with(|| shape.zeros_like())
                    .add_scaled(mask, w);
            }
        }
    }
    let mut pseudo = numer;
    match masked_weight {
        None => pseudo.scale(-1.0 / full_weight),
        Some(mw) => {
            for (n, m) in pseudo.tensors_mut().into_iter().zip(mw.tensors()) {
                for (nv, mv) in n.data.iter_mut().zip(&m.data) {
                    let den = full_weight + mv;
                    *nv = if den > 0.0 { -*nv / den } else { 0.0 };
                }
            }
        }
    }
    Ok(Aggregate {
        pseudo_gradient: pseudo,
        dropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ServerOptimizer {
    /// `accum += g^2; params -= lr * g / (sqrt(accum) + eps)`.
    AdaGrad { lr: f64, eps: f64 },
    /// `params -= lr * g`.
    Sgd { lr: f64 },
}

impl Default for ServerOptimizer {
    fn default() -> Self {
        ServerOptimizer::AdaGrad {
            lr: 0.1,
            eps: 1e-10,
        }
    }
}

impl ServerOptimizer {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ServerOptimizer::AdaGrad { lr, eps } => lr > 0.0 && eps > 0.0,
            ServerOptimizer::Sgd { lr } => lr > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "server learning rate and eps must be positive",
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub params: ParamTensors,
    pub adagrad_accum: ParamTensors,
    pub optimizer: ServerOptimizer,
    pub round_index: usize,
}

impl ServerState {
    pub fn new(params: ParamTensors, optimizer: ServerOptimizer) -> Self {
        Self {
            adagrad_accum: params.zeros_like(),
            params,
            optimizer,
            round_index: 0,
        }
    }

    pub fn step(&mut self, pseudo_gradient: &ParamTensors) -> Result<()> {
        pseudo_gradient.check_same_shape(&self.params, "server_step")?;
        if !pseudo_gradient.all_finite() {
            return Err(Error::NonFinite("pseudo-gradient".into()));
        }
        match self.optimizer {
            ServerOptimizer::Sgd { lr } => self.params.add_scaled(pseudo_gradient, -lr),
            ServerOptimizer::AdaGrad { lr, eps } => {
                for ((p, a), g) in self
                    .params
                    .tensors_mut()
                    .into_iter()
                    .zip(self.adagrad_accum.tensors_mut())
                    .zip(pseudo_gradient.tensors())
                {
                    for ((pv, av), &gv) in p.data.iter_mut().zip(a.data.iter_mut()).zip(&g.data) {
                        if gv != 0.0 {
                            *av += gv * gv;
                            *pv -= lr * gv / (av.sqrt() + eps);
                        }
                    }
                }
            }
        }
        self.round_index += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub clients_per_round: usize,
    pub client_lr: f64,
    pub server: ServerOptimizer,
    pub perf: TierPerformanceModel,
    /// Worker threads for client execution; `None` uses the global pool.
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            clients_per_round: 100,
            client_lr: 1.0,
            server: ServerOptimizer::default(),
            perf: TierPerformanceModel::default(),
            workers: None,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.clients_per_round == 0 {
            return Err(Error::invalid("clients_per_round must be >= 1"));
        }
        if !(self.client_lr > 0.0 && self.client_lr.is_finite()) {
            return Err(Error::invalid("client_lr must be positive"));
        }
        self.server.validate()?;
        self.perf.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub mean_client_loss: f64,
    pub n_selected: usize,
    pub n_dropped: usize,
    pub dropped: Vec<ClientId>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundLog {
    pub rounds: Vec<RoundRecord>,
}

impl RoundLog {
    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "round",
            "mean_client_loss",
            "n_selected",
            "n_dropped",
            "wall_time",
        ])?;
        for r in &self.rounds {
            wr.write_record([
                r.round.to_string(),
                format!("{:.8}", r.mean_client_loss),
                r.n_selected.to_string(),
                r.n_dropped.to_string(),
                format!("{:.6}", r.wall_time),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamTensors,
    pub log: RoundLog,
}

/// One epoch of federated training from freshly initialized parameters.
pub fn train(
    model: &Dlrm,
    dataset: &Dataset,
    assignment: &TierAssignment,
    opt: &OptimizationConfig,
    hyper: &HyperParams,
    seed: u64,
) -> Result<TrainOutcome> {
    let init = model.init(derive_seed(&[seed, stream::INIT]));
    train_from(model, init, dataset, assignment, opt, hyper, seed)
}

/// One epoch of federated training starting at `init`.
pub fn train_from(
    model: &Dlrm,
    init: ParamTensors,
    dataset: &Dataset,
    assignment: &TierAssignment,
    opt: &OptimizationConfig,
    hyper: &HyperParams,
    seed: u64,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    opt.validate()?;
    model.check_params(&init)?;
    if let Some(t) = opt.per_tier.filter(|_| opt.variant == Variant::Channel) {
        for f in [t.low, t.mid, t.high] {
            SubModelSpec::new(f).sliced_width(model.config.top_hidden)?;
        }
    }
    let plan = plan_epoch(dataset, assignment, opt, hyper.clients_per_round, seed)?;
    let pool = match hyper.workers {
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?,
        ),
        None => None,
    };

    let mut server = ServerState::new(init, hyper.server);
    let mut log = RoundLog::default();
    for (r, round) in plan.iter().enumerate() {
        let started = Instant::now();
        let round_start = &server.params;
        let work = || -> Result<Vec<ClientUpdate>> {
            round
                .clients
                .par_iter()
                .map(|&id| {
                    let client = dataset.client(id).expect("planned client exists");
                    let tier = assignment.tier_of[&id];
                    let seed = derive_seed(&[seed, stream::CLIENT, r as u64, id.0]);
                    run_client(
                        model,
                        round_start,
                        client,
                        tier,
                        opt,
                        &hyper.perf,
                        hyper.client_lr,
                        seed,
                    )
                })
                .collect()
        };
        let updates = match &pool {
            Some(p) => p.install(work)?,
            None => work()?,
        };
        let agg = aggregate(&updates, round.n_drop)?;
        server.step(&agg.pseudo_gradient)?;
        let mean_loss = {
            let mut losses: Vec<(ClientId, f64)> =
                updates.iter().map(|u| (u.client_id, u.loss)).collect();
            losses.sort_by_key(|x| x.0);
            losses.iter().map(|x| x.1).sum::<f64>() / losses.len() as f64
        };
        log.rounds.push(RoundRecord {
            round: r,
            mean_client_loss: mean_loss,
            n_selected: round.clients.len(),
            n_dropped: agg.dropped.len(),
            dropped: agg.dropped,
            wall_time: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome {
        params: server.params,
        log,
    })
}
