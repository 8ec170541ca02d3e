//! Client-to-tier mapping: the random baseline and the Dirichlet item-walk that
//! plants tier-dependent item affinity, plus heterogeneity diagnostics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClientId, Dataset};
use crate::error::{Error, Result};
use crate::rng::{dirichlet, rng_from, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Low,
    Mid,
    High,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Low, Tier::Mid, Tier::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Tier {
        Self::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Low => "low",
            Tier::Mid => "mid",
            Tier::High => "high",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" | "0" => Ok(Tier::Low),
            "mid" | "1" => Ok(Tier::Mid),
            "high" | "2" => Ok(Tier::High),
            other => Err(Error::invalid(format!("unknown tier `{other}`"))),
        }
    }
}

/// A value for each of the three tiers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerTier<T> {
    pub low: T,
    pub mid: T,
    pub high: T,
}

impl<T: Copy> PerTier<T> {
    pub fn new(low: T, mid: T, high: T) -> Self {
        Self { low, mid, high }
    }

    pub fn get(&self, tier: Tier) -> T {
        match tier {
            Tier::Low => self.low,
            Tier::Mid => self.mid,
            Tier::High => self.high,
        }
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> PerTier<U> {
        PerTier::new(f(self.low), f(self.mid), f(self.high))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MappingMethod {
    Random,
    Dirichlet { alpha: f64 },
}

impl fmt::Display for MappingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MappingMethod::Random => f.write_str("random"),
            MappingMethod::Dirichlet { alpha } => write!(f, "dirichlet({alpha})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TierAssignment {
    pub tier_of: BTreeMap<ClientId, Tier>,
    pub method: MappingMethod,
    pub seed: u64,
    pub balanced: bool,
}

impl TierAssignment {
    pub fn tier(&self, client: ClientId) -> Option<Tier> {
        self.tier_of.get(&client).copied()
    }

    pub fn sizes(&self) -> [usize; 3] {
        let mut s = [0; 3];
        for t in self.tier_of.values() {
            s[t.index()] += 1;
        }
        s
    }

    pub fn len(&self) -> usize {
        self.tier_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tier_of.is_empty()
    }

    /// Errors unless every client of `dataset` (and only those) is assigned.
    pub fn check_covers(&self, dataset: &Dataset) -> Result<()> {
        if self.tier_of.len() != dataset.n_clients()
            || dataset
                .clients
                .iter()
                .any(|c| !self.tier_of.contains_key(&c.client_id))
        {
            return Err(Error::invalid(
                "tier assignment does not cover the dataset's clients",
            ));
        }
        Ok(())
    }

    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["client_id", "tier"])?;
        for (c, t) in &self.tier_of {
            wr.write_record([c.to_string(), t.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads `client_id,tier` rows. Generation parameters are not stored in
    /// the file and come back as a random mapping with seed 0.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut tier_of = BTreeMap::new();
        for (n, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: n as u64 + 2,
                msg,
            };
            let id: u64 = rec
                .get(0)
                .unwrap_or("")
                .parse()
                .map_err(|e| err(format!("bad client id: {e}")))?;
            let tier: Tier = rec
                .get(1)
                .unwrap_or("")
                .parse()
                .map_err(|e: Error| err(e.to_string()))?;
            tier_of.insert(ClientId(id), tier);
        }
        Ok(Self {
            tier_of,
            method: MappingMethod::Random,
            seed: 0,
            balanced: false,
        })
    }
}

/// Users who clicked each item (ascending id, deduplicated), and users who
/// clicked nothing.
fn clickers(dataset: &Dataset) -> (Vec<Vec<ClientId>>, Vec<ClientId>) {
    let mut by_item: Vec<Vec<ClientId>> = vec![Vec::new(); dataset.item_popularity.len()];
    let mut never = Vec::new();
    for c in &dataset.clients {
        let mut any = false;
        for i in c.interactions().filter(|i| i.is_click()) {
            any = true;
            let list = &mut by_item[i.item_id as usize];
            if list.last() != Some(&c.client_id) {
                list.push(c.client_id);
            }
        }
        if !any {
            never.push(c.client_id);
        }
    }
    (by_item, never)
}

/// Items by descending click popularity, ties by ascending id.
pub fn items_by_popularity(dataset: &Dataset) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dataset.item_popularity.len()).collect();
    order.sort_by(|&a, &b| {
        dataset.item_popularity[b]
            .cmp(&dataset.item_popularity[a])
            .then(a.cmp(&b))
    });
    order
}

/// Dirichlet-based tier mapping.
///
/// Items are visited from most to least popular; each draws tier
/// probabilities from Dirichlet(alpha, 3) and every not-yet-seen clicker is
/// placed by a three-way threshold on a uniform draw. With `balanced`, the
/// largest probability is routed to the currently smallest tier. Clients who
/// never clicked are handled last as clickers of one extra null item.
pub fn dirichlet_tier_map(
    dataset: &Dataset,
    alpha: f64,
    seed: u64,
    balanced: bool,
) -> Result<TierAssignment> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("dataset has no clients".into()));
    }
    let mut rng = rng_from(&[seed, stream::TIERMAP]);
    let (by_item, never_clicked) = clickers(dataset);

    let mut tier_of: BTreeMap<ClientId, Tier> = BTreeMap::new();
    let mut sizes = [0usize; 3];
    let groups = items_by_popularity(dataset)
        .into_iter()
        .map(|i| by_item[i].as_slice())
        .chain(std::iter::once(never_clicked.as_slice()));

    for users in groups {
        let p: [f64; 3] = dirichlet(&mut rng, alpha);
        // (probability, tier) pairs in threshold order.
        let targets: [(f64, usize); 3] = if balanced {
            let mut probs = p;
            probs.sort_by(|a, b| b.total_cmp(a));
            let mut by_size = [0usize, 1, 2];
            by_size.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]));
            let [large, mid, small] = by_size;
            [(probs[0], small), (probs[1], mid), (probs[2], large)]
        } else {
            [(p[0], 0), (p[1], 1), (p[2], 2)]
        };
        for &user in users {
            if tier_of.contains_key(&user) {
                continue;
            }
            let r: f64 = rng.random();
            let tier = if r < targets[0].0 {
                targets[0].1
            } else if r < targets[0].0 + targets[1].0 {
                targets[1].1
            } else {
                targets[2].1
            };
            sizes[tier] += 1;
            tier_of.insert(user, Tier::from_index(tier));
        }
    }

    Ok(TierAssignment {
        tier_of,
        method: MappingMethod::Dirichlet { alpha },
        seed,
        balanced,
    })
}

/// Each client independently uniform over the three tiers.
pub fn random_tier_map(dataset: &Dataset, seed: u64) -> Result<TierAssignment> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset has no clients".into()));
    }
    let mut rng = rng_from(&[seed, stream::TIERMAP, 0xAA]);
    let tier_of = dataset
        .clients
        .iter()
        .map(|c| (c.client_id, Tier::from_index(rng.random_range(0..3))))
        .collect();
    Ok(TierAssignment {
        tier_of,
        method: MappingMethod::Random,
        seed,
        balanced: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneityReport {
    /// `(item_id, distinct clickers per tier)` for the top-K items.
    pub per_tier_item_freq: Vec<(u32, [u64; 3])>,
    /// Mean pairwise total-variation distance over non-empty tiers.
    pub tv_distance: f64,
    pub tier_sizes: [usize; 3],
    /// Tiers whose item distribution is empty (no clicks).
    pub empty_tiers: Vec<Tier>,
}

impl HeterogeneityReport {
    pub fn is_degenerate(&self) -> bool {
        !self.empty_tiers.is_empty()
    }

    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["item_id", "count_low", "count_mid", "count_high"])?;
        for (item, c) in &self.per_tier_item_freq {
            wr.write_record([
                item.to_string(),
                c[0].to_string(),
                c[1].to_string(),
                c[2].to_string(),
            ])?;
        }
        wr.write_record(["tv_distance", &format!("{:.6}", self.tv_distance), "", ""])?;
        wr.flush()?;
        Ok(())
    }
}

pub fn heterogeneity_report(
    dataset: &Dataset,
    assignment: &TierAssignment,
    top_k: usize,
) -> Result<HeterogeneityReport> {
    assignment.check_covers(dataset)?;
    let (by_item, _) = clickers(dataset);
    let counts: Vec<[u64; 3]> = by_item
        .iter()
        .map(|users| {
            let mut c = [0u64; 3];
            for u in users {
                c[assignment.tier_of[u].index()] += 1;
            }
            c
        })
        .collect();

    let per_tier_item_freq = items_by_popularity(dataset)
        .into_iter()
        .take(top_k)
        .map(|i| (i as u32, counts[i]))
        .collect();

    let totals: [u64; 3] = std::array::from_fn(|t| counts.iter().map(|c| c[t]).sum::<u64>());
    let non_empty: Vec<usize> = (0..3).filter(|&t| totals[t] > 0).collect();
    let mut tv_sum = 0.0;
    let mut n_pairs = 0;
    for (a_pos, &a) in non_empty.iter().enumerate() {
        for &b in &non_empty[a_pos + 1..] {
            let (ta, tb) = (totals[a] as f64, totals[b] as f64);
            let l1: f64 = counts
                .iter()
                .map(|c| (c[a] as f64 / ta - c[b] as f64 / tb).abs())
                .sum();
            tv_sum += 0.5 * l1;
            n_pairs += 1;
        }
    }
    let tv_distance = if n_pairs == 0 {
        0.0
    } else {
        (tv_sum / n_pairs as f64).clamp(0.0, 1.0)
    };
    Ok(HeterogeneityReport {
        per_tier_item_freq,
        tv_distance,
        tier_sizes: assignment.sizes(),
        empty_tiers: (0..3)
            .filter(|&t| totals[t] == 0)
            .map(Tier::from_index)
            .collect(),
    })
}
