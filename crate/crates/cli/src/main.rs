use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use synsaem::experiment::{
    export_qq_data, load_batch, make_dataset, run_batch, run_replicate, summarize_batch, write_qq_csv, AnyModel,
    BatchOptions, DatasetManifest, DatasetMode, ExperimentConfig, Method, SUMMARY_FILE,
};
use synsaem::rng::{fork_seed, purpose, stream};

/// Replicates below this fraction of ok runs make `replicate` and `report` exit non-zero.
const MIN_OK_FRACTION: f64 = 0.9;

#[derive(Parser)]
#[command(name = "synsaem", version, about = "SAEM with synthetic likelihoods: simulation, fitting and replication")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the base seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; experiment files go to `<out>/<name>/`.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate and persist a dataset at the configured true parameters.
    Simulate(Common),
    /// Run a single replicate.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
    },
    /// Run every replicate and summarize.
    Replicate {
        #[command(flatten)]
        common: Common,
        /// Replicates run concurrently.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Export normal qq data of the joint summaries.
    Qq {
        #[command(flatten)]
        common: Common,
        /// Parameter value (comma separated, natural scale); defaults to the true value.
        #[arg(long, value_delimiter = ',')]
        theta: Option<Vec<f64>>,
        /// Number of simulations.
        #[arg(long, default_value_t = 2000)]
        simulations: usize,
    },
    /// Re-summarize persisted results without re-running anything.
    Report(Common),
}

fn exit_for(ok_fraction: f64) -> ExitCode {
    if ok_fraction >= MIN_OK_FRACTION {
        ExitCode::SUCCESS
    } else {
        eprintln!("only {:.0}% of replicates finished ok", 100.0 * ok_fraction);
        ExitCode::FAILURE
    }
}

fn simulate(common: &Common) -> Result<ExitCode> {
    let cfg = common.load()?;
    let manifest = DatasetManifest {
        model: cfg.model.clone(),
        n_obs: cfg.n_obs,
        nu: cfg.nu,
        theta: cfg.true_theta.clone(),
        seed: cfg.seed,
    };
    let dir = common.out.join(&cfg.name).join("data");
    let (_, obs) = make_dataset(&manifest, &dir)?;
    println!("wrote {} observations to {}", obs.len(), dir.display());
    Ok(ExitCode::SUCCESS)
}

fn fit(common: &Common, index: usize) -> Result<ExitCode> {
    let cfg = common.load()?;
    if index >= cfg.replicates {
        bail!("replicate {index} out of range (config has {})", cfg.replicates);
    }
    let model = cfg.validate()?;
    let shared = match cfg.dataset {
        DatasetMode::Shared => Some(synsaem::experiment::dataset_for(&cfg, model.model(), 0)?),
        DatasetMode::Fresh => None,
    };
    let dir = common.out.join(&cfg.name).join(index.to_string());
    let r = run_replicate(&cfg, &model, shared.as_ref(), index, Some(&dir));
    let names = &model.spec().param_names;
    println!("status: {:?}{}", r.status, r.reason.as_deref().map(|s| format!(" ({s})")).unwrap_or_default());
    println!("start:  {}", format_theta(names, &r.start));
    println!("final:  {}", format_theta(names, &r.theta));
    if let (Some(lo), Some(hi)) = (&r.lower, &r.upper) {
        for (i, n) in names.iter().enumerate() {
            println!("  {n}: 95% interval [{:.4}, {:.4}]", lo[i], hi[i]);
        }
    }
    if let Some(a) = r.acceptance {
        println!("acceptance rate: {:.4}", a);
    }
    println!("wall time: {:.1}s; output in {}", r.wall_time_s, dir.display());
    Ok(if r.is_ok() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn format_theta(names: &[String], theta: &[f64]) -> String {
    names
        .iter()
        .zip(theta)
        .map(|(n, v)| format!("{n}={v:.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn replicate(common: &Common, workers: usize) -> Result<ExitCode> {
    let cfg = common.load()?;
    let model = cfg.validate()?;
    let results = run_batch(&cfg, &BatchOptions { workers, out: Some(common.out.clone()) })?;
    let summary = summarize_batch(&model.spec().param_names, &results);
    println!("{} ({} on {}, {} replicates)", cfg.name, cfg.method.kind(), cfg.model, cfg.replicates);
    print!("{}", summary.render());
    println!("results in {}", common.out.join(&cfg.name).display());
    Ok(exit_for(summary.ok_fraction()))
}

fn qq(common: &Common, theta: Option<Vec<f64>>, simulations: usize) -> Result<ExitCode> {
    let cfg = common.load()?;
    let model = AnyModel::build(&cfg.model, &cfg.model_options())?;
    let theta = theta.unwrap_or_else(|| cfg.true_theta.clone());
    model.spec().check_theta(&theta)?;
    let seed = fork_seed(&mut stream(cfg.seed, purpose::ALGORITHM));
    let series = export_qq_data(model.model(), &theta, simulations, seed, cfg.exec)?;
    let dir = common.out.join(&cfg.name);
    fs::create_dir_all(&dir)?;
    let path = dir.join("qq.csv");
    write_qq_csv(BufWriter::new(File::create(&path)?), &series)?;
    for s in &series {
        if s.degenerate {
            println!("{:<14} constant, not plotted", s.label);
        } else {
            println!("{:<14} qq correlation {:.4}", s.label, s.correlation);
        }
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn report(common: &Common) -> Result<ExitCode> {
    let cfg = common.load()?;
    let dir = common.out.join(&cfg.name);
    let (manifest, results) =
        load_batch(&dir).with_context(|| format!("reading persisted results in {}", dir.display()))?;
    if !manifest.complete {
        info!("batch in {} is incomplete; summarizing {} results", dir.display(), results.len());
    }
    let summary = summarize_batch(&manifest.param_names, &results);
    summary.write_csv(BufWriter::new(File::create(dir.join(SUMMARY_FILE))?))?;
    println!("{} ({} of {} replicates recorded)", manifest.config.name, results.len(), manifest.replicates);
    print!("{}", summary.render());
    print_method_extras(&manifest.config.method, &results);
    Ok(exit_for(summary.ok_fraction()))
}

fn print_method_extras(method: &Method, results: &[synsaem::experiment::ReplicateResult]) {
    if matches!(method, Method::PmBsl { .. } | Method::AbcMcmc { .. }) {
        for r in results.iter().filter(|r| r.is_ok()) {
            if let (Some(lo), Some(hi)) = (&r.lower, &r.upper) {
                println!("replicate {}: lower {lo:.4?} upper {hi:.4?}", r.index);
            }
            if let Some(a) = r.acceptance {
                println!("replicate {}: acceptance {a:.4}", r.index);
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Fit { common, replicate } => fit(common, *replicate),
        Command::Replicate { common, workers } => replicate(common, *workers),
        Command::Qq { common, theta, simulations } => qq(common, theta.clone(), *simulations),
        Command::Report(c) => report(c),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}
