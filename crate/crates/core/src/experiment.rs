//! Experiment configuration, seeded replication and result reporting.
//!
//! Replicate `i` of an experiment with base seed `b` uses seed `b + i`; its
//! dataset (in fresh-dataset mode), starting value and algorithm each draw
//! from a separate child stream of that seed, so a batch is reproducible
//! regardless of how many workers run it.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{for_each_pooled, Exec};
use crate::mcmc::{
    abc_mcmc_run, calibrate_weights, pm_bsl_run, AbcKernelSpec, DeltaStage, PmBslConfig, PriorSpec, ProposalConfig,
};
use crate::models::{
    CompleteDataModel, GkModel, LatentPath, LinearGaussianModel, Model, ModelOptions, ModelSpec, NlgModel, ObsSeries,
    TheophyllineModel,
};
use crate::rng::{purpose, stream, SimRng};
use crate::saem::{saem_smc_run, RunResult, RunStatus, SaemSmcConfig, StepSchedule};
use crate::stats::{median, normal_quantile, percentile_sorted};
use crate::synlik::{data_sl_maximize, saem_sl_run, simulate_summaries, SaemSlConfig, SlConfig, SummaryScope};

fn default_beta() -> f64 {
    1.0
}

/// Estimation method and its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Method {
    SaemSmc {
        warmup: usize,
        iterations: usize,
        #[serde(default = "default_beta")]
        beta: f64,
        particles: usize,
        threshold: usize,
    },
    SaemSl {
        warmup: usize,
        iterations: usize,
        #[serde(default = "default_beta")]
        beta: f64,
        simulations: usize,
        internal_iters: usize,
        #[serde(default)]
        robust: bool,
    },
    SlOptim {
        simulations: usize,
        iters: usize,
        #[serde(default)]
        robust: bool,
    },
    PmBsl {
        simulations: usize,
        iters: usize,
        #[serde(default)]
        robust: bool,
        burn_in: usize,
        priors: PriorSpec,
        proposal: ProposalConfig,
    },
    AbcMcmc {
        priors: PriorSpec,
        proposal: ProposalConfig,
        /// Unit-weight run whose last stage feeds the MAD calibration.
        pilot: Vec<DeltaStage>,
        /// Weighted run started from the pilot's final state; the posterior
        /// is read from its last stage.
        calibrated: Vec<DeltaStage>,
    },
}

impl Method {
    pub fn kind(&self) -> &'static str {
        match self {
            Method::SaemSmc { .. } => "saem-smc",
            Method::SaemSl { .. } => "saem-sl",
            Method::SlOptim { .. } => "sl-optim",
            Method::PmBsl { .. } => "pm-bsl",
            Method::AbcMcmc { .. } => "abc-mcmc",
        }
    }

    fn validate(&self, n_params: usize) -> Result<()> {
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{what} must be positive")))
            } else {
                Ok(())
            }
        };
        match self {
            Method::SaemSmc { warmup, iterations, beta, particles, threshold } => {
                StepSchedule::new(*warmup, *iterations, *beta)?;
                positive("particles", *particles)?;
                if threshold > particles {
                    return Err(Error::Config("resampling threshold exceeds the particle count".into()));
                }
            }
            Method::SaemSl { warmup, iterations, beta, simulations, internal_iters, .. } => {
                StepSchedule::new(*warmup, *iterations, *beta)?;
                positive("simulations", *simulations)?;
                positive("internal_iters", *internal_iters)?;
            }
            Method::SlOptim { simulations, iters, .. } => {
                positive("simulations", *simulations)?;
                positive("iters", *iters)?;
            }
            Method::PmBsl { simulations, iters, burn_in, priors, proposal, .. } => {
                positive("simulations", *simulations)?;
                positive("iters", *iters)?;
                if burn_in >= iters {
                    return Err(Error::Config("burn_in must be smaller than iters".into()));
                }
                priors.validate(n_params)?;
                check_len("proposal.initial_sd", proposal.initial_sd.len(), n_params)?;
            }
            Method::AbcMcmc { priors, proposal, pilot, calibrated } => {
                priors.validate(n_params)?;
                check_len("proposal.initial_sd", proposal.initial_sd.len(), n_params)?;
                for (what, stages) in [("pilot", pilot), ("calibrated", calibrated)] {
                    if stages.is_empty() || stages.iter().any(|s| s.iters == 0 || !(s.delta > 0.0)) {
                        return Err(Error::Config(format!("{what} schedule needs positive tolerances and counts")));
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::Config(format!("{what} has {got} entries, the model has {expected} parameters")));
    }
    Ok(())
}

/// How each replicate's starting value is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum StartPolicy {
    Fixed {
        values: Vec<f64>,
    },
    /// Gaussian on the working scale around `center` (natural scale) with
    /// the given diagonal variances (working scale).
    GaussianDispersed {
        center: Vec<f64>,
        variances: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    /// One dataset for every replicate.
    #[default]
    Shared,
    /// A new dataset per replicate.
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: String,
    #[serde(default)]
    pub n_obs: Option<usize>,
    #[serde(default)]
    pub nu: Option<f64>,
    pub true_theta: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetMode,
    /// Directory written by `make_dataset`; replaces the simulated shared dataset.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    pub start: StartPolicy,
    pub method: Method,
    /// Execution policy for simulations inside one replicate.
    #[serde(default)]
    pub exec: Exec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions { n_obs: self.n_obs, nu: self.nu }
    }

    pub fn validate(&self) -> Result<AnyModel> {
        let model = AnyModel::build(&self.model, &self.model_options())?;
        let spec = model.spec();
        let p = spec.n_params();
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be positive".into()));
        }
        check_len("true_theta", self.true_theta.len(), p)?;
        spec.check_theta(&self.true_theta)?;
        match &self.start {
            StartPolicy::Fixed { values } => {
                check_len("start.values", values.len(), p)?;
                spec.check_theta(values)?;
            }
            StartPolicy::GaussianDispersed { center, variances } => {
                check_len("start.center", center.len(), p)?;
                check_len("start.variances", variances.len(), p)?;
                spec.check_theta(center)?;
                if variances.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::Config("start variances must be non-negative".into()));
                }
            }
        }
        self.method.validate(p)?;
        if matches!(self.method, Method::SaemSmc { .. }) && model.complete_data().is_none() {
            return Err(Error::Config(format!("model `{}` has no complete-data M-step for saem-smc", self.model)));
        }
        Ok(model)
    }

    pub fn replicate_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add(index as u64)
    }
}

/// Concrete model behind a config name.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Nlg(NlgModel),
    Theophylline(TheophyllineModel),
    Gk(GkModel),
    LinearGaussian(LinearGaussianModel),
}

impl AnyModel {
    pub fn build(name: &str, options: &ModelOptions) -> Result<Self> {
        Ok(match name {
            "nlg" => AnyModel::Nlg(NlgModel::new(options.n_obs.unwrap_or(50))),
            "theophylline" => AnyModel::Theophylline(TheophyllineModel::standard()),
            "gk" => AnyModel::Gk(GkModel::new(
                options.n_obs.unwrap_or(500),
                options.nu.unwrap_or(crate::models::gk::DEFAULT_NU),
            )?),
            "linear-gaussian" => AnyModel::LinearGaussian(LinearGaussianModel::new(options.n_obs.unwrap_or(50))),
            other => return Err(Error::Config(format!("unknown model `{other}`"))),
        })
    }

    pub fn model(&self) -> &dyn Model {
        match self {
            AnyModel::Nlg(m) => m,
            AnyModel::Theophylline(m) => m,
            AnyModel::Gk(m) => m,
            AnyModel::LinearGaussian(m) => m,
        }
    }

    pub fn complete_data(&self) -> Option<&dyn CompleteDataModel> {
        match self {
            AnyModel::Nlg(m) => Some(m),
            AnyModel::Theophylline(m) => Some(m),
            _ => None,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        self.model().spec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplicateStatus {
    Ok,
    /// The particle filter collapsed.
    Degenerate,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub index: usize,
    pub seed: u64,
    pub start: Vec<f64>,
    /// Final estimate (posterior mean for the MCMC methods).
    pub theta: Vec<f64>,
    pub status: ReplicateStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub wall_time_s: f64,
    /// Trace or chain file, relative to the experiment directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
    /// Central 95% posterior intervals (MCMC methods).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    /// Acceptance rate (PM-BSL: whole chain; ABC: smallest tolerance).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance: Option<f64>,
    /// Calibrated ABC kernel weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl ReplicateResult {
    pub fn is_ok(&self) -> bool {
        self.status == ReplicateStatus::Ok
    }
}

/// Where and how a batch runs.
#[derive(Debug, Clone, Default)]
pub struct BatchOptions {
    pub workers: usize,
    /// Root output directory; results go to `<out>/<experiment name>/`.
    pub out: Option<PathBuf>,
}

/// Dataset for replicate `index` under the config's dataset mode.
pub fn dataset_for(config: &ExperimentConfig, model: &dyn Model, index: usize) -> Result<ObsSeries> {
    match (config.dataset, &config.data_dir) {
        (DatasetMode::Shared, Some(dir)) => Ok(load_dataset(dir)?.2),
        (DatasetMode::Shared, None) => Ok(model.simulate(&config.true_theta, &mut stream(config.seed, purpose::DATA)).1),
        (DatasetMode::Fresh, _) => {
            let mut rng = stream(config.replicate_seed(index), purpose::DATA);
            Ok(model.simulate(&config.true_theta, &mut rng).1)
        }
    }
}

/// Starting value for replicate `index`.
pub fn start_for(config: &ExperimentConfig, spec: &ModelSpec, index: usize) -> Vec<f64> {
    match &config.start {
        StartPolicy::Fixed { values } => values.clone(),
        StartPolicy::GaussianDispersed { center, variances } => {
            let mut rng = stream(config.replicate_seed(index), purpose::START);
            let w: Vec<f64> = spec
                .to_working(center)
                .iter()
                .zip(variances)
                .map(|(c, v)| c + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            spec.to_natural(&w)
        }
    }
}

struct Outcome {
    theta: Vec<f64>,
    status: ReplicateStatus,
    reason: Option<String>,
    trace: Option<String>,
    lower: Option<Vec<f64>>,
    upper: Option<Vec<f64>>,
    acceptance: Option<f64>,
    weights: Option<Vec<f64>>,
}

impl Outcome {
    fn from_run(run: RunResult) -> Self {
        let (status, reason) = match run.status {
            RunStatus::Ok => (ReplicateStatus::Ok, None),
            RunStatus::Failed(r) => (ReplicateStatus::Degenerate, Some(r)),
        };
        Self {
            theta: run.theta,
            status,
            reason,
            trace: None,
            lower: None,
            upper: None,
            acceptance: None,
            weights: None,
        }
    }
}

fn write_with<F>(dir: Option<&Path>, file: &str, write: F) -> Result<Option<PathBuf>>
where
    F: FnOnce(BufWriter<File>) -> Result<()>,
{
    let Some(dir) = dir else { return Ok(None) };
    fs::create_dir_all(dir)?;
    let path = dir.join(file);
    write(BufWriter::new(File::create(&path)?))?;
    Ok(Some(path))
}

fn run_method(
    config: &ExperimentConfig,
    model: &AnyModel,
    obs: &ObsSeries,
    theta0: &[f64],
    rng: &mut SimRng,
    dir: Option<&Path>,
) -> Result<Outcome> {
    let m = model.model();
    let exec = config.exec;
    let trace_file = |run: &RunResult| write_with(dir, "trace.csv", |w| run.trace.write_csv(w));
    let mut outcome = match &config.method {
        Method::SaemSmc { warmup, iterations, beta, particles, threshold } => {
            let cd = model
                .complete_data()
                .ok_or_else(|| Error::Config(format!("model `{}` does not support saem-smc", config.model)))?;
            let cfg = SaemSmcConfig {
                schedule: StepSchedule::new(*warmup, *iterations, *beta)?,
                particles: *particles,
                threshold: *threshold,
            };
            let run = saem_smc_run(cd, obs, theta0, &cfg, rng)?;
            trace_file(&run)?;
            Outcome::from_run(run)
        }
        Method::SaemSl { warmup, iterations, beta, simulations, internal_iters, robust } => {
            let cfg = SaemSlConfig {
                schedule: StepSchedule::new(*warmup, *iterations, *beta)?,
                simulations: *simulations,
                internal_iters: *internal_iters,
                robust: *robust,
            };
            let s_obs = m.obs_summaries(obs)?;
            let run = saem_sl_run(m, &s_obs, theta0, &cfg, exec, rng)?.result;
            trace_file(&run)?;
            Outcome::from_run(run)
        }
        Method::SlOptim { simulations, iters, robust } => {
            let cfg = SlConfig { simulations: *simulations, robust: *robust, exec };
            let s_obs = m.obs_summaries(obs)?;
            let run = data_sl_maximize(m, &s_obs, theta0, &cfg, *iters, rng)?;
            trace_file(&run)?;
            Outcome::from_run(run)
        }
        Method::PmBsl { simulations, iters, robust, burn_in, priors, proposal } => {
            let cfg = PmBslConfig {
                simulations: *simulations,
                iters: *iters,
                robust: *robust,
                proposal: proposal.clone(),
            };
            let s_obs = m.obs_summaries(obs)?;
            let chain = pm_bsl_run(m, &s_obs, priors, theta0, &cfg, exec, rng)?;
            write_with(dir, "chain.csv", |w| chain.write_csv(w))?;
            let summary = chain.summary(*burn_in)?;
            Outcome {
                theta: summary.mean,
                status: ReplicateStatus::Ok,
                reason: None,
                trace: None,
                lower: Some(summary.lower),
                upper: Some(summary.upper),
                acceptance: Some(chain.acceptance_rate()),
                weights: None,
            }
        }
        Method::AbcMcmc { priors, proposal, pilot, calibrated } => {
            let s_obs = m.obs_summaries(obs)?;
            let unit = AbcKernelSpec { schedule: pilot.clone(), weights: None };
            let pilot_run = abc_mcmc_run(m, &s_obs, priors, &unit, theta0, proposal, rng)?;
            write_with(dir, "pilot_chain.csv", |w| pilot_run.chain.write_csv(w))?;
            write_with(dir, "store.csv", |w| write_rows(w, &m.spec().obs_summary_labels, &pilot_run.summary_store))?;
            let weights = calibrate_weights(&pilot_run.summary_store)?;
            let kernel = AbcKernelSpec { schedule: calibrated.clone(), weights: Some(weights.clone()) };
            let run = abc_mcmc_run(m, &s_obs, priors, &kernel, &pilot_run.final_theta, proposal, rng)?;
            write_with(dir, "chain.csv", |w| run.chain.write_csv(w))?;
            let summary = crate::mcmc::posterior_summary(&run.chain.param_names, run.last_stage_draws(), 0)?;
            Outcome {
                theta: summary.mean,
                status: ReplicateStatus::Ok,
                reason: None,
                trace: None,
                lower: Some(summary.lower),
                upper: Some(summary.upper),
                acceptance: run.stages.last().map(|s| s.acceptance_rate),
                weights: Some(weights),
            }
        }
    };
    outcome.trace = dir.map(|_| {
        let file = if matches!(config.method, Method::PmBsl { .. } | Method::AbcMcmc { .. }) {
            "chain.csv"
        } else {
            "trace.csv"
        };
        dir.and_then(Path::file_name)
            .map(|d| format!("{}/{file}", d.to_string_lossy()))
            .unwrap_or_else(|| file.to_string())
    });
    if outcome.status == ReplicateStatus::Ok && outcome.theta.iter().any(|v| !v.is_finite()) {
        outcome.status = ReplicateStatus::Failed;
        outcome.reason = Some("non-finite final estimate".into());
    }
    Ok(outcome)
}

fn write_rows<W: Write>(out: W, labels: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(labels)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Runs replicate `index`. Errors become a failed result rather than an `Err`.
pub fn run_replicate(
    config: &ExperimentConfig,
    model: &AnyModel,
    shared: Option<&ObsSeries>,
    index: usize,
    dir: Option<&Path>,
) -> ReplicateResult {
    let seed = config.replicate_seed(index);
    let started = Instant::now();
    let start = start_for(config, model.spec(), index);
    let outcome = (|| {
        let fresh;
        let obs = match shared {
            Some(obs) => obs,
            None => {
                fresh = dataset_for(config, model.model(), index)?;
                &fresh
            }
        };
        let mut rng = stream(seed, purpose::ALGORITHM);
        run_method(config, model, obs, &start, &mut rng, dir)
    })();
    let wall_time_s = started.elapsed().as_secs_f64();
    match outcome {
        Ok(o) => ReplicateResult {
            index,
            seed,
            start,
            theta: o.theta,
            status: o.status,
            reason: o.reason,
            wall_time_s,
            trace: o.trace,
            lower: o.lower,
            upper: o.upper,
            acceptance: o.acceptance,
            weights: o.weights,
        },
        Err(e) => {
            warn!("{} replicate {index} failed: {e}", config.name);
            ReplicateResult {
                index,
                seed,
                theta: vec![f64::NAN; start.len()],
                start,
                status: ReplicateStatus::Failed,
                reason: Some(e.to_string()),
                wall_time_s,
                trace: None,
                lower: None,
                upper: None,
                acceptance: None,
                weights: None,
            }
        }
    }
}

/// Serializes replicate results: keeps them in memory and appends each as a
/// JSON line to `results.jsonl` as soon as it arrives.
struct Collector {
    results: Mutex<(Vec<ReplicateResult>, Option<BufWriter<File>>)>,
}

impl Collector {
    fn new(sink: Option<File>) -> Self {
        Self { results: Mutex::new((Vec::new(), sink.map(BufWriter::new))) }
    }

    fn push(&self, result: ReplicateResult) {
        let mut guard = self.results.lock().unwrap_or_else(|p| p.into_inner());
        let (results, sink) = &mut *guard;
        if let Some(w) = sink {
            let line = serde_json::to_string(&result).map_err(Error::from);
            let written = line.and_then(|l| writeln!(w, "{l}").and_then(|_| w.flush()).map_err(Error::from));
            if let Err(e) = written {
                warn!("could not persist replicate {}: {e}", result.index);
            }
        }
        results.push(result);
    }

    fn into_results(self) -> Vec<ReplicateResult> {
        let (mut results, _) = self.results.into_inner().unwrap_or_else(|p| p.into_inner());
        results.sort_by_key(|r| r.index);
        results
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub config: ExperimentConfig,
    pub param_names: Vec<String>,
    pub replicates: usize,
    pub ok: usize,
    pub failed: usize,
    pub wall_time_s: f64,
    pub complete: bool,
}

pub const RESULTS_FILE: &str = "results.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Runs every replicate of `config`, persisting results incrementally when an
/// output directory is given. Individual failures never abort the batch.
pub fn run_batch(config: &ExperimentConfig, options: &BatchOptions) -> Result<Vec<ReplicateResult>> {
    let model = config.validate()?;
    let shared = match config.dataset {
        DatasetMode::Shared => Some(dataset_for(config, model.model(), 0)?),
        DatasetMode::Fresh => None,
    };
    let exp_dir = options.out.as_ref().map(|o| o.join(&config.name));
    let param_names = model.spec().param_names.clone();
    let mut manifest = BatchManifest {
        config: config.clone(),
        param_names: param_names.clone(),
        replicates: config.replicates,
        ok: 0,
        failed: 0,
        wall_time_s: 0.0,
        complete: false,
    };
    let sink = match &exp_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_json(&dir.join(MANIFEST_FILE), &manifest)?;
            if let Some(obs) = &shared {
                write_series(&dir.join("obs.csv"), "value", &obs.times, &obs.values)?;
            }
            Some(File::create(dir.join(RESULTS_FILE))?)
        }
        None => None,
    };
    let started = Instant::now();
    let collector = Collector::new(sink);
    info!("{}: {} replicates of {} on {}", config.name, config.replicates, config.method.kind(), config.model);
    for_each_pooled(config.replicates, options.workers.max(1), |i| {
        let dir = exp_dir.as_ref().map(|d| d.join(i.to_string()));
        let result = run_replicate(config, &model, shared.as_ref(), i, dir.as_deref());
        info!("{} replicate {i}: {:?} in {:.1}s", config.name, result.status, result.wall_time_s);
        collector.push(result);
    });
    let results = collector.into_results();
    if let Some(dir) = &exp_dir {
        let summary = summarize_batch(&param_names, &results);
        write_with(Some(dir), SUMMARY_FILE, |w| summary.write_csv(w))?;
        manifest.ok = summary.ok;
        manifest.failed = summary.failed;
        manifest.wall_time_s = started.elapsed().as_secs_f64();
        manifest.complete = true;
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    }
    Ok(results)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush()?;
    Ok(())
}

/// Reloads a persisted batch: its manifest and every result recorded so far.
pub fn load_batch(exp_dir: &Path) -> Result<(BatchManifest, Vec<ReplicateResult>)> {
    let manifest: BatchManifest = serde_json::from_reader(BufReader::new(File::open(exp_dir.join(MANIFEST_FILE))?))?;
    let mut results = Vec::new();
    for line in BufReader::new(File::open(exp_dir.join(RESULTS_FILE))?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            results.push(serde_json::from_str::<ReplicateResult>(&line)?);
        }
    }
    results.sort_by_key(|r| r.index);
    Ok((manifest, results))
}

/// Median and type-7 quartiles per parameter over the ok replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub param_names: Vec<String>,
    pub median: Vec<f64>,
    pub q1: Vec<f64>,
    pub q3: Vec<f64>,
    pub ok: usize,
    pub failed: usize,
}

pub fn summarize_batch(param_names: &[String], results: &[ReplicateResult]) -> BatchSummary {
    let ok: Vec<&ReplicateResult> = results.iter().filter(|r| r.is_ok()).collect();
    let p = param_names.len();
    let mut summary = BatchSummary {
        param_names: param_names.to_vec(),
        median: vec![f64::NAN; p],
        q1: vec![f64::NAN; p],
        q3: vec![f64::NAN; p],
        ok: ok.len(),
        failed: results.len() - ok.len(),
    };
    if ok.is_empty() {
        return summary;
    }
    for i in 0..p {
        let mut col: Vec<f64> = ok.iter().map(|r| r.theta[i]).collect();
        col.sort_unstable_by(f64::total_cmp);
        summary.q1[i] = percentile_sorted(&col, 25.0);
        summary.median[i] = percentile_sorted(&col, 50.0);
        summary.q3[i] = percentile_sorted(&col, 75.0);
    }
    summary
}

impl BatchSummary {
    pub fn ok_fraction(&self) -> f64 {
        let total = self.ok + self.failed;
        if total == 0 {
            0.0
        } else {
            self.ok as f64 / total as f64
        }
    }

    /// CSV with header `param,median,q1,q3`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["param", "median", "q1", "q3"])?;
        for (i, name) in self.param_names.iter().enumerate() {
            w.write_record([
                name.clone(),
                self.median[i].to_string(),
                self.q1[i].to_string(),
                self.q3[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned text table, `median [Q1, Q3]` per parameter, with a footer
    /// counting excluded replicates.
    pub fn render(&self) -> String {
        let width = self.param_names.iter().map(String::len).max().unwrap_or(0).max(5);
        let mut out = format!("{:<width$}  median [Q1, Q3]\n", "param");
        for (i, name) in self.param_names.iter().enumerate() {
            out += &format!(
                "{name:<width$}  {:.4} [{:.4}, {:.4}]\n",
                self.median[i], self.q1[i], self.q3[i]
            );
        }
        out += &format!("ok: {}  failed (excluded): {}\n", self.ok, self.failed);
        out
    }
}

/// Median over ok replicates of `|θ̂_i - θ_i| / |θ_i|`, per parameter.
pub fn median_abs_rel_error(results: &[ReplicateResult], truth: &[f64]) -> Result<Vec<f64>> {
    let ok: Vec<&ReplicateResult> = results.iter().filter(|r| r.is_ok()).collect();
    truth
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let errs: Vec<f64> = ok.iter().map(|r| (r.theta[i] - t).abs() / t.abs()).collect();
            median(&errs)
        })
        .collect()
}

/// Normal qq data of one summary coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqSeries {
    pub label: String,
    /// Sorted standardized simulated values.
    pub sample: Vec<f64>,
    /// `Φ⁻¹((i - 0.5) / R)`, `i = 1..=R`.
    pub theoretical: Vec<f64>,
    /// Pearson correlation of the two columns.
    pub correlation: f64,
    /// Constant coordinate: nothing to plot.
    pub degenerate: bool,
}

pub fn theoretical_quantiles(r: usize) -> Vec<f64> {
    (1..=r).map(|i| normal_quantile((i as f64 - 0.5) / r as f64)).collect()
}

/// Qq data for one column of simulated values.
pub fn qq_series(label: &str, values: &[f64]) -> QqSeries {
    let r = values.len();
    let mean = values.iter().sum::<f64>() / r as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r.max(2) - 1) as f64;
    if !(var > 0.0) || r < 2 {
        return QqSeries {
            label: label.to_string(),
            sample: Vec::new(),
            theoretical: Vec::new(),
            correlation: f64::NAN,
            degenerate: true,
        };
    }
    let sd = var.sqrt();
    let mut sample: Vec<f64> = values.iter().map(|v| (v - mean) / sd).collect();
    sample.sort_unstable_by(f64::total_cmp);
    let theoretical = theoretical_quantiles(r);
    let correlation = pearson(&sample, &theoretical);
    QqSeries { label: label.to_string(), sample, theoretical, correlation, degenerate: false }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Normal qq data for every joint summary (observed then latent) of `R`
/// simulations at `theta`.
pub fn export_qq_data(model: &dyn Model, theta: &[f64], r: usize, seed: u64, exec: Exec) -> Result<Vec<QqSeries>> {
    let rows = simulate_summaries(model, theta, SummaryScope::Joint, r, seed, exec)?;
    let spec = model.spec();
    let labels: Vec<String> = spec
        .obs_summary_labels
        .iter()
        .map(|l| format!("y_{l}"))
        .chain(spec.latent_summary_labels.iter().map(|l| format!("x_{l}")))
        .collect();
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let col: Vec<f64> = rows.iter().map(|row| row[i]).collect();
            qq_series(label, &col)
        })
        .collect())
}

/// Long-format CSV `summary,i,sample,theoretical`; degenerate series are skipped.
pub fn write_qq_csv<W: Write>(out: W, series: &[QqSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["summary", "i", "sample", "theoretical"])?;
    for s in series.iter().filter(|s| !s.degenerate) {
        for (i, (x, q)) in s.sample.iter().zip(&s.theoretical).enumerate() {
            w.write_record([s.label.clone(), (i + 1).to_string(), x.to_string(), q.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub model: String,
    #[serde(default)]
    pub n_obs: Option<usize>,
    #[serde(default)]
    pub nu: Option<f64>,
    pub theta: Vec<f64>,
    pub seed: u64,
}

fn write_series(path: &Path, column: &str, times: &[f64], values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time", column])?;
    for (t, v) in times.iter().zip(values) {
        w.write_record([t.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn read_series(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for rec in r.deserialize::<(f64, f64)>() {
        let (t, v) = rec?;
        times.push(t);
        values.push(v);
    }
    Ok((times, values))
}

/// Simulates one dataset from `manifest` (stream `DATA` of its seed) and
/// writes `obs.csv`, `latent.csv` and `dataset.json` into `dir`.
pub fn make_dataset(manifest: &DatasetManifest, dir: &Path) -> Result<(LatentPath, ObsSeries)> {
    let model = AnyModel::build(&manifest.model, &ModelOptions { n_obs: manifest.n_obs, nu: manifest.nu })?;
    model.spec().check_theta(&manifest.theta)?;
    let (path, obs) = model.model().simulate(&manifest.theta, &mut stream(manifest.seed, purpose::DATA));
    fs::create_dir_all(dir)?;
    write_series(&dir.join("obs.csv"), "value", &obs.times, &obs.values)?;
    write_series(&dir.join("latent.csv"), "state", &path.times, &path.states)?;
    write_json(&dir.join("dataset.json"), manifest)?;
    Ok((path, obs))
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, LatentPath, ObsSeries)> {
    let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(File::open(dir.join("dataset.json"))?))?;
    let (times, values) = read_series(&dir.join("obs.csv"))?;
    let (ltimes, states) = read_series(&dir.join("latent.csv"))?;
    Ok((manifest, LatentPath { times: ltimes, states }, ObsSeries { times, values }))
}

#[cfg(test)]
mod tests {
    use super::*;

    const NLG_SL: &str = r#"
        name = "nlg-sl-test"
        model = "nlg"
        n_obs = 50
        true_theta = [2.2360679774997896, 2.2360679774997896]
        replicates = 3
        seed = 11
        [start]
        policy = "gaussian-dispersed"
        center = [4.0, 4.0]
        variances = [2.0, 2.0]
        [method]
        kind = "saem-sl"
        warmup = 2
        iterations = 3
        simulations = 60
        internal_iters = 5
    "#;

    fn result(index: usize, theta: Vec<f64>, status: ReplicateStatus) -> ReplicateResult {
        ReplicateResult {
            index,
            seed: index as u64,
            start: theta.clone(),
            theta,
            status,
            reason: None,
            wall_time_s: 0.0,
            trace: None,
            lower: None,
            upper: None,
            acceptance: None,
            weights: None,
        }
    }

    #[test]
    fn config_parses_and_validates() {
        let cfg = ExperimentConfig::from_toml(NLG_SL).unwrap();
        assert_eq!(cfg.method.kind(), "saem-sl");
        assert!(cfg.validate().is_ok());
        let mut bad = cfg.clone();
        bad.replicates = 0;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.start = StartPolicy::Fixed { values: vec![1.0] };
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.model = "gk".into();
        bad.method = Method::SaemSmc { warmup: 1, iterations: 2, beta: 1.0, particles: 10, threshold: 5 };
        assert!(bad.validate().is_err());
        assert!(ExperimentConfig::from_toml("name = 1").is_err());
    }

    #[test]
    fn summarize_examples() {
        let names = vec!["a".to_string()];
        let rs: Vec<_> = [1.0, 2.0, 3.0, 4.0, 5.0]
            .iter()
            .enumerate()
            .map(|(i, v)| result(i, vec![*v], ReplicateStatus::Ok))
            .collect();
        let s = summarize_batch(&names, &rs);
        assert_eq!((s.q1[0], s.median[0], s.q3[0]), (2.0, 3.0, 4.0));
        let same: Vec<_> = (0..4).map(|i| result(i, vec![7.0], ReplicateStatus::Ok)).collect();
        let s = summarize_batch(&names, &same);
        assert_eq!((s.q1[0], s.median[0], s.q3[0]), (7.0, 7.0, 7.0));
        let mut with_failed = rs.clone();
        with_failed.push(result(5, vec![f64::NAN], ReplicateStatus::Failed));
        with_failed.push(result(6, vec![100.0], ReplicateStatus::Degenerate));
        let s = summarize_batch(&names, &with_failed);
        assert_eq!(s.median[0], 3.0);
        assert_eq!((s.ok, s.failed), (5, 2));
        assert!(s.render().contains("failed (excluded): 2"));
        let mut rev = with_failed;
        rev.reverse();
        assert_eq!(summarize_batch(&names, &rev), s);
    }

    #[test]
    fn qq_examples() {
        let s = qq_series("a", &[3.0, 1.0, 2.0]);
        let expected = [normal_quantile(1.0 / 6.0), 0.0, normal_quantile(5.0 / 6.0)];
        assert!(s.theoretical.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(s.sample.windows(2).all(|w| w[0] <= w[1]));
        assert!(qq_series("c", &[2.0; 10]).degenerate);
        let mut rng = crate::rng::seeded(3);
        let g: Vec<f64> = (0..2000).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0 + 1.0).collect();
        assert!(qq_series("g", &g).correlation >= 0.99);
    }

    #[test]
    fn qq_export_covers_joint_summaries() {
        let model = NlgModel::new(50);
        let series = export_qq_data(&model, &[2.2, 2.2], 200, 5, Exec::Sequential).unwrap();
        assert_eq!(series.len(), 12);
        assert!(series.iter().all(|s| !s.degenerate && s.sample.len() == 200));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest { model: "nlg".into(), n_obs: Some(50), nu: None, theta: vec![2.2, 2.2], seed: 9 };
        let (path, obs) = make_dataset(&manifest, &dir.path().join("a")).unwrap();
        make_dataset(&manifest, &dir.path().join("b")).unwrap();
        for f in ["obs.csv", "latent.csv", "dataset.json"] {
            assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
        }
        let (m2, p2, o2) = load_dataset(&dir.path().join("a")).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(o2, obs);
        assert_eq!(p2, path);
        assert_eq!(o2.len(), 50);
        let text = fs::read_to_string(dir.path().join("a/obs.csv")).unwrap();
        assert_eq!(text.lines().count(), 51);
    }

    #[test]
    fn batch_is_deterministic_and_persisted() {
        let cfg = ExperimentConfig::from_toml(NLG_SL).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = run_batch(&cfg, &BatchOptions { workers: 1, out: Some(dir.path().to_path_buf()) }).unwrap();
        let b = run_batch(&cfg, &BatchOptions { workers: 3, out: None }).unwrap();
        let strip = |rs: &[ReplicateResult]| rs.iter().map(|r| (r.index, r.theta.clone(), r.status)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert!(a.iter().all(ReplicateResult::is_ok));
        let (manifest, reloaded) = load_batch(&dir.path().join(&cfg.name)).unwrap();
        assert!(manifest.complete);
        assert_eq!(strip(&reloaded), strip(&a));
        assert_eq!(
            summarize_batch(&manifest.param_names, &reloaded),
            summarize_batch(&manifest.param_names, &a)
        );
        let trace = fs::read_to_string(dir.path().join(&cfg.name).join("0/trace.csv")).unwrap();
        assert!(trace.starts_with("iter,sigma_x,sigma_y,logSL"));
        assert_eq!(trace.lines().count(), 1 + 1 + 3);
    }

    #[test]
    fn fresh_datasets_differ_and_starts_disperse() {
        let mut cfg = ExperimentConfig::from_toml(NLG_SL).unwrap();
        cfg.dataset = DatasetMode::Fresh;
        let model = cfg.validate().unwrap();
        let d0 = dataset_for(&cfg, model.model(), 0).unwrap();
        let d1 = dataset_for(&cfg, model.model(), 1).unwrap();
        assert_ne!(d0, d1);
        assert_eq!(d0, dataset_for(&cfg, model.model(), 0).unwrap());
        let s0 = start_for(&cfg, model.spec(), 0);
        assert_ne!(s0, start_for(&cfg, model.spec(), 1));
        assert!(s0.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn failures_are_recorded_not_raised() {
        let mut cfg = ExperimentConfig::from_toml(NLG_SL).unwrap();
        cfg.replicates = 2;
        cfg.data_dir = Some(PathBuf::from("/nonexistent/dataset"));
        let model = cfg.validate().unwrap();
        let r = run_replicate(&cfg, &model, None, 0, None);
        assert_eq!(r.status, ReplicateStatus::Failed);
        assert!(r.reason.is_some());
    }
}
