//! `fairfl` command-line runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fairfl::aggregation::adjust_coefficient;
use fairfl::baselines::RegimeId;
use fairfl::data::{preview_partition, split_train_test};
use fairfl::harness::{self, ExperimentConfig};
use fairfl::oracles::{
    c2_bisection, bound_campaign, descent_check, zero_goal_safe_eta, DescentConfig, QuadraticProblem,
};
use fairfl::{RngState, Vec64};

#[derive(Parser)]
#[command(name = "fairfl", version, about = "Federated fairness simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (regime, seed) cell of an experiment.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated regime names; overrides the config.
        #[arg(long, value_delimiter = ',')]
        regimes: Option<Vec<RegimeId>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        /// Pick beta and delta from the hyperparameter grid on a validation split
        /// of the first seed before running.
        #[arg(long)]
        grid: bool,
    },
    /// Run the oracle campaigns.
    Verify {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Rebuild results.csv and results.txt from records.json.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        reference: Option<RegimeId>,
    },
    /// Show shard sizes per group for the training split.
    Partition {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print configuration defaults.
    Config {
        #[arg(long)]
        print_defaults: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(
    config: Option<PathBuf>,
    regimes: Option<Vec<RegimeId>>,
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
    threads: Option<usize>,
    grid: bool,
) -> Result<ExitCode> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(r) = regimes {
        cfg.regimes = r;
    }
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if grid {
        let (best, points) = harness::grid_search(&cfg, RegimeId::Mfairfl, cfg.seeds[0])?;
        for p in &points {
            log::info!(
                "grid beta {} delta {}: acc {:.4} violation {:.4}",
                p.beta,
                p.delta,
                p.accuracy,
                p.violation
            );
        }
        println!("grid choice: beta = {}, delta = {}", best.beta, best.delta);
        cfg.train.beta = best.beta;
        cfg.train.delta = best.delta;
    }
    let out = out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    let started = harness::unix_now();
    let records = harness::run(&cfg, Some(&out), threads)?;
    let failed = records.iter().filter(|r| !r.ok()).count();
    for r in records.iter().filter(|r| !r.ok()) {
        eprintln!(
            "cell {} seed {} failed: {}",
            r.regime,
            r.seed,
            r.error.as_deref().unwrap_or("?")
        );
    }
    if failed == records.len() {
        std::fs::write(out.join("records.json"), serde_json::to_string_pretty(&records)?)?;
        eprintln!("all {failed} cells failed");
        return Ok(ExitCode::FAILURE);
    }
    let summary = harness::write_outputs(&out, &cfg, &records, started)?;
    print!("{}", summary.to_text());
    println!("outputs in {}", out.display());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn verify(instances: usize, seed: u64, out: Option<PathBuf>, threads: Option<usize>) -> Result<ExitCode> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    let rs = RngState::new(seed);
    let mut ok = true;

    let t2 = bound_campaign(instances, &[3, 5, 8], &[5, 50], rs.derive("conflict-bound"), 100_000)?;
    let t2_ok = t2.violations() == 0 && t2.non_monotone() == 0;
    ok &= t2_ok;
    println!(
        "conflict bound: {} instances checked, {} skipped, {} violations, {} non-monotone: {}",
        t2.reports.len(),
        t2.skipped,
        t2.violations(),
        t2.non_monotone(),
        if t2_ok { "ok" } else { "FAILED" }
    );

    let mut worst_c2: f64 = 0.0;
    let mut r = rs.derive("c2").rng();
    let mut checked = 0;
    for i in 0..instances {
        let d = [2, 10, 1000][i % 3];
        let gk = gaussian(&mut r, d)?;
        let gj = gaussian(&mut r, d)?;
        let phi = gk.cosine(&gj)?;
        let goal = phi + (0.99 - phi) * rand::Rng::random::<f64>(&mut r);
        if !(goal > phi && goal < 0.99) {
            continue;
        }
        let c = adjust_coefficient(gk.norm(), gj.norm(), phi, goal)?;
        let b = c2_bisection(&gk, &gj, goal)?;
        worst_c2 = worst_c2.max((b + c).abs() / c.abs().max(1.0));
        checked += 1;
    }
    let c2_ok = worst_c2 <= 1e-9;
    ok &= c2_ok;
    println!(
        "closed form vs bisection: {checked} triples, worst gap {worst_c2:.3e}: {}",
        if c2_ok { "ok" } else { "FAILED" }
    );

    let mut descents = 0;
    let mut caught = 0;
    for i in 0..20u64 {
        let p = QuadraticProblem::random_two_client([2, 5, 10][i as usize % 3], rs.derive_index("descent", i))?;
        let good = descent_check(&p, zero_goal_safe_eta(p.smoothness), &DescentConfig::default())?;
        if good.passed() && good.compliant {
            descents += 1;
        }
        let bad = descent_check(&p, 10.0 / p.smoothness, &DescentConfig::default())?;
        if !bad.passed() {
            caught += 1;
        }
    }
    let t3_ok = descents == 20 && caught >= 10;
    ok &= t3_ok;
    println!(
        "descent: {descents}/20 compliant runs monotone, {caught}/20 negative controls rose: {}",
        if t3_ok { "ok" } else { "FAILED" }
    );

    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("conflict_bound.csv"), t2.to_csv()?)?;
        std::fs::write(dir.join("conflict_bound.json"), serde_json::to_string_pretty(&t2.reports)?)?;
        println!("campaign outputs in {}", dir.display());
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn gaussian(r: &mut impl rand::Rng, d: usize) -> Result<Vec64> {
    use rand_distr::{Distribution, StandardNormal};
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(r)).collect();
    Ok(Vec64::new(v)?)
}

fn partition_preview(config: Option<PathBuf>, dry_run: bool, seed: u64) -> Result<ExitCode> {
    if !dry_run {
        bail!("only --dry-run is supported; shards are built by `run`");
    }
    let cfg = load_config(config.as_deref())?;
    cfg.validate()?;
    let data = harness::load_dataset(&cfg.dataset, RngState::new(seed))?;
    let (train, _) = split_train_test(&data, cfg.test_fraction, RngState::new(seed))?;
    let preview = preview_partition(&train, &cfg.partition)?;
    let attr = &train.attributes[cfg.partition.attribute];
    println!("partition by '{}' over {} training rows", attr.name, train.len());
    for (g, counts) in &preview.counts {
        let name = attr.values.get(*g).map(String::as_str).unwrap_or("?");
        let list: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
        println!("  {name}: {}", list.join(" "));
    }
    let k = cfg.partition.clients();
    let totals: Vec<String> = (0..k)
        .map(|c| preview.counts.values().map(|v| v[c]).sum::<usize>().to_string())
        .collect();
    println!("  total: {}", totals.join(" "));
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            regimes,
            seeds,
            out,
            threads,
            grid,
        } => run(config, regimes, seeds, out, threads, grid),
        Command::Verify {
            instances,
            seed,
            out,
            threads,
        } => verify(instances, seed, out, threads),
        Command::Report { out, reference } => (|| {
            let records = harness::load_records(&out)?;
            let reference = match reference {
                Some(r) => r,
                None => load_config(Some(&out.join("config.json")))
                    .map(|c| c.reference)
                    .unwrap_or(RegimeId::Mfairfl),
            };
            let summary = harness::write_report(&out, &records, reference)?;
            print!("{}", summary.to_text());
            Ok(ExitCode::SUCCESS)
        })(),
        Command::Partition { config, dry_run, seed } => partition_preview(config, dry_run, seed),
        Command::Config { print_defaults } => (|| {
            if !print_defaults {
                bail!("use `config --print-defaults`");
            }
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::default())?);
            Ok(ExitCode::SUCCESS)
        })(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
