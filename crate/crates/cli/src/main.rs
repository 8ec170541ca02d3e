use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use tierfl_core::dataset::{load_csv, Dataset, FeatureSchema, LoadOptions, SplitPolicy};
use tierfl_core::experiment::{
    self, report_from_results, write_atomic, write_report_to, ExperimentConfig, WORKERS_ENV,
};
use tierfl_core::{
    dirichlet_tier_map, heterogeneity_report, random_tier_map, synthesize, SynthParams,
};

#[derive(Parser)]
#[command(
    name = "tierfl",
    version,
    about = "Tier-aware federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run baseline and treatment trainings from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replace the config's seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assign clients to tiers and report the induced heterogeneity.
    Tiermap(TiermapArgs),
    /// Compute per-tier relative change and MDAC from two results files.
    Report {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        treatment: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset and its schema sidecar.
    Synth {
        /// TOML file of generator parameters; defaults apply when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TiermapArgs {
    #[arg(long)]
    input: PathBuf,
    /// Feature schema TOML; defaults to `<input>.schema.toml` next to the data.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, conflicts_with = "random", required_unless_present = "random", value_parser = positive_alpha)]
    alpha: Option<f64>,
    #[arg(long)]
    random: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_balance: bool,
    /// Treat the label column as a rating (>= 5 is a click).
    #[arg(long)]
    rating_to_click: bool,
    #[arg(long)]
    log_dense: bool,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 50)]
    top_k: usize,
}

fn positive_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if a > 0.0 && a.is_finite() {
        Ok(a)
    } else {
        Err(format!("alpha must be positive, got {s}"))
    }
}

fn workers_from_env() -> anyhow::Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => {
            let n: usize =
                v.parse().ok().filter(|&n| n > 0).with_context(|| {
                    format!("{WORKERS_ENV} must be a positive integer, got `{v}`")
                })?;
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn schema_sidecar(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".schema.toml");
    PathBuf::from(s)
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::from_file(config)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.hyper.workers = workers_from_env()?;
    let report = experiment::run_experiment(&cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for row in &report.treatments {
        let mdac = row
            .mdac()
            .map_or_else(|| "NA".to_string(), |m| format!("{:.2}%", 100.0 * m));
        println!("{:<40} MDAC {mdac}", row.run_id);
    }
    println!(
        "results written to {}",
        cfg.output_dir.join("results.csv").display()
    );
    Ok(())
}

fn load_input(args: &TiermapArgs) -> anyhow::Result<Dataset> {
    let schema_path = args
        .schema
        .clone()
        .unwrap_or_else(|| schema_sidecar(&args.input));
    let schema = FeatureSchema::from_toml_file(&schema_path)
        .with_context(|| format!("reading schema {}", schema_path.display()))?;
    let opts = LoadOptions {
        split: SplitPolicy {
            test_fraction: args.test_fraction,
        },
        rating_to_click: args.rating_to_click,
        log_dense: args.log_dense,
    };
    Ok(load_csv(&args.input, &schema, &opts)?)
}

fn tiermap(args: &TiermapArgs) -> anyhow::Result<()> {
    let dataset = load_input(args)?;
    let assignment = match args.alpha {
        Some(alpha) if !args.random => {
            dirichlet_tier_map(&dataset, alpha, args.seed, !args.no_balance)?
        }
        _ => random_tier_map(&dataset, args.seed)?,
    };
    let report = heterogeneity_report(&dataset, &assignment, args.top_k)?;
    write_atomic(&args.out.join("tiers.csv"), |b| assignment.write_csv_to(b))?;
    write_atomic(&args.out.join("heterogeneity.csv"), |b| {
        report.write_csv_to(b)
    })?;
    let [l, m, h] = assignment.sizes();
    println!("tv_distance {:.6}", report.tv_distance);
    println!("tier sizes low={l} mid={m} high={h}");
    if report.is_degenerate() {
        eprintln!("warning: tiers without clicks: {:?}", report.empty_tiers);
    }
    Ok(())
}

fn report(baseline: &Path, treatment: &Path, out: &Path) -> anyhow::Result<()> {
    let reports = report_from_results(baseline, treatment)?;
    write_atomic(out, |b| write_report_to(&reports, b))?;
    for (id, r) in &reports {
        if !r.excluded.is_empty() {
            eprintln!("warning: {id}: tiers excluded from MDAC: {:?}", r.excluded);
        }
        let label = if id.is_empty() { "mdac" } else { id.as_str() };
        println!("{label} MDAC {}", r.mdac_percent());
    }
    Ok(())
}

fn synth(params: Option<&Path>, seed: u64, out: &Path) -> anyhow::Result<()> {
    let p: SynthParams = match params {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SynthParams::default(),
    };
    let dataset = synthesize(&p, seed)?;
    if dataset.is_empty() {
        bail!("synthesized dataset is empty");
    }
    write_atomic(out, |b| dataset.write_csv_to(b))?;
    let schema = dataset.schema.to_toml_string();
    write_atomic(&schema_sidecar(out), |b| {
        b.extend_from_slice(schema.as_bytes());
        Ok(())
    })?;
    println!(
        "{} clients, {} interactions written to {}",
        dataset.n_clients(),
        dataset.n_interactions(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run { config, seed, out } => run(config, *seed, out.clone()),
        Command::Tiermap(args) => tiermap(args),
        Command::Report {
            baseline,
            treatment,
            out,
        } => report(baseline, treatment, out),
        Command::Synth { params, seed, out } => synth(params.as_deref(), *seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
