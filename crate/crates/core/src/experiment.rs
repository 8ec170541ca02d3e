//! Experiment configuration and runner: paired baseline/treatment runs over
//! tier mappings and seeds, plus the results-file fairness report.
//!
//! Config files are TOML with `version = 1`:
//!
//! ```toml
//! version = 1
//! seeds = [1, 2, 3]
//! output_dir = "out"
//! optimizations = ["Exclude Lo", "Quant 1:4:16"]
//!
//! [dataset]
//! seed = 7
//! [dataset.synth]
//! n_clients = 3000
//!
//! [mapping]
//! kind = "dirichlet"       # or "random"
//! alpha_grid = [0.05, 5.0]
//!
//! [hyper]
//! clients_per_round = 100
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::compression::Rounding;
use crate::dataset::{load_csv, Dataset, FeatureSchema, LoadOptions};
use crate::error::{Error, Result};
use crate::flengine::{
    self, HyperParams, OptimizationConfig, TrainOutcome, DEFAULT_OVERSELECT_FRACTION, PRESET_NAMES,
};
use crate::metrics::{fairness, fmt_opt, per_tier_auc, FairnessReport, TierAuc};
use crate::model::{Dlrm, ModelConfig};
use crate::synth::{synthesize, SynthParams};
use crate::tiering::{
    dirichlet_tier_map, heterogeneity_report, random_tier_map, PerTier, Tier, TierAssignment,
};

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_ALPHA_GRID: [f64; 5] = [0.005, 0.05, 0.5, 5.0, 5000.0];
pub const WORKERS_ENV: &str = "TIERFL_WORKERS";

pub const RESULTS_HEADER: [&str; 15] = [
    "run_id",
    "mapping",
    "alpha",
    "optimization",
    "seed",
    "auc_total",
    "auc_low",
    "auc_mid",
    "auc_high",
    "rel_low",
    "rel_mid",
    "rel_high",
    "mdac",
    "rounds",
    "elapsed_seconds",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    /// TOML feature schema.
    pub schema: PathBuf,
    #[serde(default)]
    pub load: LoadOptions,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub synth: Option<SynthParams>,
    /// Generation seed for `synth`; fixed across experiment seeds.
    pub seed: u64,
    pub csv: Option<CsvSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingKind {
    Random,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    pub kind: MappingKind,
    /// Single alpha; takes precedence over `alpha_grid`.
    pub alpha: Option<f64>,
    pub alpha_grid: Vec<f64>,
    pub balanced: bool,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            kind: MappingKind::Dirichlet,
            alpha: None,
            alpha_grid: DEFAULT_ALPHA_GRID.to_vec(),
            balanced: true,
        }
    }
}

/// One tier mapping of an experiment grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mapping {
    Random,
    Dirichlet { alpha: f64, balanced: bool },
}

impl Mapping {
    pub fn name(&self) -> &'static str {
        match self {
            Mapping::Random => "random",
            Mapping::Dirichlet { .. } => "dirichlet",
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            Mapping::Random => None,
            Mapping::Dirichlet { alpha, .. } => Some(*alpha),
        }
    }

    pub fn label(&self) -> String {
        match self.alpha() {
            None => self.name().to_string(),
            Some(a) => format!("{}-{a}", self.name()),
        }
    }

    pub fn assign(&self, dataset: &Dataset, seed: u64) -> Result<TierAssignment> {
        match *self {
            Mapping::Random => random_tier_map(dataset, seed),
            Mapping::Dirichlet { alpha, balanced } => {
                dirichlet_tier_map(dataset, alpha, seed, balanced)
            }
        }
    }
}

impl MappingConfig {
    pub fn mappings(&self) -> Vec<Mapping> {
        match self.kind {
            MappingKind::Random => vec![Mapping::Random],
            MappingKind::Dirichlet => {
                let alphas = match self.alpha {
                    Some(a) => vec![a],
                    None => self.alpha_grid.clone(),
                };
                alphas
                    .into_iter()
                    .map(|alpha| Mapping::Dirichlet {
                        alpha,
                        balanced: self.balanced,
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionOptions {
    pub rounding: Rounding,
    pub prune_rescale: bool,
    pub overselect_fraction: f64,
}

impl Default for CompressionOptions {
    fn default() -> Self {
        Self {
            rounding: Rounding::Unbiased,
            prune_rescale: false,
            overselect_fraction: DEFAULT_OVERSELECT_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub mapping: MappingConfig,
    #[serde(default = "default_optimizations")]
    pub optimizations: Vec<String>,
    #[serde(default)]
    pub compression: CompressionOptions,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub hyper: HyperParams,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_optimizations() -> Vec<String> {
    PRESET_NAMES[1..].iter().map(|s| s.to_string()).collect()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| text[..s.start].lines().count().max(1))
                .map_or_else(|| "config".to_string(), |l| format!("line {l}"));
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file; relative dataset and output paths resolve
    /// against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(csv) = &mut cfg.dataset.csv {
            csv.path = base.join(&csv.path);
            csv.schema = base.join(&csv.schema);
        }
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!(
                    "unsupported version {} (expected {CONFIG_VERSION})",
                    self.version
                ),
            ));
        }
        match (&self.dataset.synth, &self.dataset.csv) {
            (Some(p), None) => p
                .validate()
                .map_err(|e| Error::config("dataset.synth", e.to_string()))?,
            (None, Some(_)) => {}
            _ => {
                return Err(Error::config(
                    "dataset",
                    "set exactly one of `synth` or `csv`",
                ))
            }
        }
        let alphas = match self.mapping.alpha {
            Some(a) => vec![a],
            None => self.mapping.alpha_grid.clone(),
        };
        if self.mapping.kind == MappingKind::Dirichlet {
            if alphas.is_empty() {
                return Err(Error::config("mapping.alpha_grid", "must not be empty"));
            }
            if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
                return Err(Error::config(
                    "mapping.alpha",
                    format!("alpha must be positive, got {a}"),
                ));
            }
        }
        for (i, name) in self.optimizations.iter().enumerate() {
            let cfg = self.optimization(name).ok_or_else(|| {
                Error::config(
                    format!("optimizations[{i}]"),
                    format!(
                        "unknown preset `{name}`; expected one of {}",
                        PRESET_NAMES.join(", ")
                    ),
                )
            })?;
            cfg.validate()
                .map_err(|e| Error::config(format!("optimizations[{i}]"), e.to_string()))?;
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        self.model
            .validate()
            .map_err(|e| Error::config("model", e.to_string()))?;
        self.hyper
            .validate()
            .map_err(|e| Error::config("hyper", e.to_string()))
    }

    /// Expands a preset name with this config's compression options.
    pub fn optimization(&self, name: &str) -> Option<OptimizationConfig> {
        OptimizationConfig::preset(name).map(|mut c| {
            c.rounding = self.compression.rounding;
            c.prune_rescale = self.compression.prune_rescale;
            c.overselect_fraction = self.compression.overselect_fraction;
            c
        })
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match (&self.dataset.synth, &self.dataset.csv) {
            (Some(p), _) => synthesize(p, self.dataset.seed),
            (None, Some(src)) => {
                let schema = FeatureSchema::from_toml_file(&src.schema)?;
                load_csv(&src.path, &schema, &src.load)
            }
            (None, None) => Err(Error::config("dataset", "no source")),
        }
    }
}

/// One row of the results CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub run_id: String,
    pub mapping: Mapping,
    pub optimization: String,
    pub seed: u64,
    pub auc: TierAuc,
    pub fairness: Option<FairnessReport>,
    pub rounds: usize,
    pub elapsed_seconds: f64,
}

impl ResultRow {
    fn record(&self) -> Vec<String> {
        let rel = |t: Tier| fmt_opt(self.fairness.as_ref().and_then(|f| f.rel_change.get(t)));
        vec![
            self.run_id.clone(),
            self.mapping.name().to_string(),
            fmt_opt(self.mapping.alpha()),
            self.optimization.clone(),
            self.seed.to_string(),
            fmt_opt(self.auc.auc_total),
            fmt_opt(self.auc.auc_per_tier.low),
            fmt_opt(self.auc.auc_per_tier.mid),
            fmt_opt(self.auc.auc_per_tier.high),
            rel(Tier::Low),
            rel(Tier::Mid),
            rel(Tier::High),
            fmt_opt(self.fairness.as_ref().map(|f| f.mdac)),
            self.rounds.to_string(),
            format!("{:.3}", self.elapsed_seconds),
        ]
    }

    pub fn mdac(&self) -> Option<f64> {
        self.fairness.as_ref().map(|f| f.mdac)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentReport {
    pub baseline: Vec<ResultRow>,
    pub treatments: Vec<ResultRow>,
    pub warnings: Vec<String>,
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect::<String>()
        .replace(':', "-")
}

/// Writes via a sibling temp file and renames into place.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    fill(&mut buf)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_results_to<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(RESULTS_HEADER)?;
    for r in rows {
        wr.write_record(r.record())?;
    }
    wr.flush()?;
    Ok(())
}

struct Run {
    outcome: TrainOutcome,
    auc: TierAuc,
    elapsed: f64,
}

fn run_one(
    model: &Dlrm,
    dataset: &Dataset,
    assignment: &TierAssignment,
    opt: &OptimizationConfig,
    hyper: &HyperParams,
    seed: u64,
) -> Result<Run> {
    let started = Instant::now();
    let outcome = flengine::train(model, dataset, assignment, opt, hyper, seed)?;
    let auc = per_tier_auc(model, &outcome.params, dataset, assignment)?;
    Ok(Run {
        outcome,
        auc,
        elapsed: started.elapsed().as_secs_f64(),
    })
}

/// Runs every (mapping, seed) cell: one baseline and each treatment on the
/// same assignment and seed. Writes `results.csv`, `baseline.csv` and the
/// per-run round, tier and fairness files under `output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let model = Dlrm::new(dataset.schema.clone(), config.model)?;
    let out = &config.output_dir;
    fs::create_dir_all(out)?;

    let mut report = ExperimentReport::default();
    let baseline_opt = OptimizationConfig::none();
    for mapping in config.mapping.mappings() {
        for &seed in &config.seeds {
            let cell = format!("{}-s{seed}", mapping.label());
            let assignment = mapping.assign(&dataset, seed)?;
            write_atomic(&out.join("tiers").join(format!("{cell}.csv")), |b| {
                assignment.write_csv_to(b)
            })?;
            let hetero = heterogeneity_report(&dataset, &assignment, 50)?;
            write_atomic(
                &out.join("heterogeneity").join(format!("{cell}.csv")),
                |b| hetero.write_csv_to(b),
            )?;
            if hetero.is_degenerate() {
                report.warnings.push(format!(
                    "{cell}: tiers without clicks: {:?}",
                    hetero.empty_tiers
                ));
            }

            let base = run_one(
                &model,
                &dataset,
                &assignment,
                &baseline_opt,
                &config.hyper,
                seed,
            )?;
            let base_id = format!("{cell}-none");
            write_atomic(&out.join("rounds").join(format!("{base_id}.csv")), |b| {
                base.outcome.log.write_csv_to(b)
            })?;
            let base_row = ResultRow {
                run_id: base_id,
                mapping,
                optimization: "None".into(),
                seed,
                auc: base.auc.clone(),
                fairness: fairness(&base.auc.auc_per_tier, &base.auc.auc_per_tier).ok(),
                rounds: base.outcome.log.rounds.len(),
                elapsed_seconds: base.elapsed,
            };

            for name in &config.optimizations {
                let opt = config.optimization(name).expect("validated preset");
                let run_id = format!("{cell}-{}", slug(name));
                let (auc, rounds, elapsed) = if opt == baseline_opt {
                    (base.auc.clone(), base_row.rounds, base.elapsed)
                } else {
                    let run = run_one(&model, &dataset, &assignment, &opt, &config.hyper, seed)?;
                    write_atomic(&out.join("rounds").join(format!("{run_id}.csv")), |b| {
                        run.outcome.log.write_csv_to(b)
                    })?;
                    (run.auc, run.outcome.log.rounds.len(), run.elapsed)
                };
                let fair = match fairness(&base.auc.auc_per_tier, &auc.auc_per_tier) {
                    Ok(f) => {
                        if !f.excluded.is_empty() {
                            report.warnings.push(format!(
                                "{run_id}: tiers excluded from MDAC: {:?}",
                                f.excluded
                            ));
                        }
                        write_atomic(&out.join("fairness").join(format!("{run_id}.csv")), |b| {
                            f.write_csv_to(b)
                        })?;
                        Some(f)
                    }
                    Err(e) => {
                        report.warnings.push(format!("{run_id}: {e}"));
                        None
                    }
                };
                report.treatments.push(ResultRow {
                    run_id,
                    mapping,
                    optimization: name.clone(),
                    seed,
                    auc,
                    fairness: fair,
                    rounds,
                    elapsed_seconds: elapsed,
                });
            }
            report.baseline.push(base_row);
        }
    }
    write_atomic(&out.join("results.csv"), |b| {
        write_results_to(&report.treatments, b)
    })?;
    write_atomic(&out.join("baseline.csv"), |b| {
        write_results_to(&report.baseline, b)
    })?;
    Ok(report)
}

/// Per-tier AUCs read back from a results-schema CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultAucs {
    pub run_id: String,
    pub key: (String, String, String),
    pub optimization: String,
    pub auc: PerTier<Option<f64>>,
}

pub fn read_results(path: &Path) -> Result<Vec<ResultAucs>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column `{name}`", path.display())))
    };
    let tiers = [col("auc_low")?, col("auc_mid")?, col("auc_high")?];
    let opt = |name: &str| headers.iter().position(|h| h == name);
    let (run_id, mapping, alpha, seed, optimization) = (
        opt("run_id"),
        opt("mapping"),
        opt("alpha"),
        opt("seed"),
        opt("optimization"),
    );
    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n as u64 + 2;
        let field = |i: Option<usize>| i.and_then(|i| rec.get(i)).unwrap_or("").to_string();
        let parse = |i: usize| -> Result<Option<f64>> {
            match rec.get(i).unwrap_or("").trim() {
                "" | "NA" => Ok(None),
                s => s.parse::<f64>().map(Some).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("column `{}`: {e}", &headers[i]),
                }),
            }
        };
        rows.push(ResultAucs {
            run_id: field(run_id),
            key: (field(mapping), field(alpha), field(seed)),
            optimization: field(optimization),
            auc: PerTier::new(parse(tiers[0])?, parse(tiers[1])?, parse(tiers[2])?),
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Ok(rows)
}

/// Pairs each treatment row with the baseline row of the same
/// (mapping, alpha, seed) and computes its fairness report.
pub fn report_from_results(
    baseline: &Path,
    treatment: &Path,
) -> Result<Vec<(String, FairnessReport)>> {
    let base = read_results(baseline)?;
    let treat = read_results(treatment)?;
    treat
        .iter()
        .map(|t| {
            let candidates: Vec<&ResultAucs> = base.iter().filter(|b| b.key == t.key).collect();
            let b = match candidates.as_slice() {
                [] => {
                    return Err(Error::Schema(format!(
                        "no baseline row for mapping={} alpha={} seed={}",
                        t.key.0, t.key.1, t.key.2
                    )))
                }
                [one] => *one,
                many => *many
                    .iter()
                    .find(|b| b.optimization == "None")
                    .ok_or_else(|| {
                        Error::Schema(format!("ambiguous baseline rows for run `{}`", t.run_id))
                    })?,
            };
            for tier in Tier::ALL {
                if b.auc.get(tier).is_some() != t.auc.get(tier).is_some() {
                    return Err(Error::Schema(format!(
                        "tier mismatch for `{}`: {tier} AUC defined in only one file",
                        t.run_id
                    )));
                }
            }
            Ok((t.run_id.clone(), fairness(&b.auc, &t.auc)?))
        })
        .collect()
}

pub fn write_report_to<W: Write>(reports: &[(String, FairnessReport)], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "run_id",
        "tier",
        "baseline_auc",
        "treatment_auc",
        "rel_change",
    ])?;
    for (id, r) in reports {
        for t in Tier::ALL {
            wr.write_record([
                id.as_str(),
                t.name(),
                &fmt_opt(r.baseline.get(t)),
                &fmt_opt(r.treatment.get(t)),
                &fmt_opt(r.rel_change.get(t)),
            ])?;
        }
        wr.write_record([id.as_str(), "mdac", "", "", &format!("{:.6}", r.mdac)])?;
    }
    wr.flush()?;
    Ok(())
}
