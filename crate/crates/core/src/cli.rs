//! Command-line front end: simulate data, fit and select models, score
//! partitions, impute, and run replicated experiment grids.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::LinkFunction;
use crate::em::FitConfig;
use crate::error::{Error, Result};
use crate::fit::{check_feasible, fit_model, Algorithm, FitResult, ModelConfig};
use crate::impute::{imputation_mse, impute_theta, DEFAULT_DRAWS};
use crate::io;
use crate::mechanisms::{MechanismKind, MechanismParams, MechanismSpec};
use crate::metrics::{adjusted_rand_index, criteria, select_k};
use crate::models::{CovarianceStructure, Dataset, Theta};
use crate::rng::seeded;
use crate::sem::SemConfig;
use crate::simulate::{
    calibrate, generate_seeded, mnarz_setting, reference_setting, CalibrationOptions, GeneratorConfig,
};

/// Print a line to stdout; a closed pipe is not an error.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

/// Process exit statuses.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const CONVERGENCE: i32 = 3;
    pub const INFEASIBLE: i32 = 4;
}

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "MNAR_CLUSTER_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mnar-cluster", version, about = "Clustering with informative missing values")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a mixture sample with missing cells.
    Simulate(SimulateArgs),
    /// Fit one model.
    Fit(FitArgs),
    /// Fit a range of K and pick one by ICL.
    SelectK(SelectArgs),
    /// Compare two partitions.
    Evaluate(EvaluateArgs),
    /// Fill missing cells from a fitted model.
    Impute(ImputeArgs),
    /// Run a grid of simulate-then-fit replications.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value = "MNARz")]
    pub mechanism: MechanismKind,
    #[arg(long, default_value = "probit")]
    pub link: LinkFunction,
    /// em or sem; by default EM when the mechanism allows it.
    #[arg(long)]
    pub algorithm: Option<Algorithm>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    /// Relative log-likelihood change that stops EM.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// SEM iterations.
    #[arg(long, default_value_t = 400)]
    pub n_iter: usize,
    #[arg(long, default_value_t = 200)]
    pub burn_in: usize,
    /// Random EM starts besides the k-means one.
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[arg(long, default_value = "diagonal")]
    pub covariance: CovarianceStructure,
}

impl ModelArgs {
    pub fn spec(&self) -> MechanismSpec {
        MechanismSpec::new(self.mechanism, self.link)
    }

    pub fn config(&self) -> ModelConfig {
        let em = FitConfig {
            max_iter: self.max_iter,
            rel_tol: self.tol,
            n_random_starts: self.restarts,
            ..FitConfig::default()
        };
        let sem = SemConfig {
            n_iter: self.n_iter,
            burn_in: self.burn_in,
            warm_start: FitConfig {
                max_iter: self.max_iter,
                rel_tol: self.tol,
                ..SemConfig::default().warm_start
            },
            ..SemConfig::default()
        };
        ModelConfig { algorithm: self.algorithm, em, sem }
            .with_seed(self.seed)
            .with_covariance(self.covariance)
    }

    fn manifest(&self, command: &str, k: Vec<usize>, input: Option<&Path>, out_dir: &Path) -> RunManifest {
        RunManifest {
            command: command.into(),
            seed: self.seed,
            mechanism: self.mechanism,
            link: self.link,
            k,
            algorithm: self.config().algorithm_for(self.spec()),
            max_iter: self.max_iter,
            tol: self.tol,
            n_iter: self.n_iter,
            burn_in: self.burn_in,
            restarts: self.restarts,
            covariance: self.covariance,
            input: input.map(Path::to_path_buf),
            out_dir: out_dir.to_path_buf(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Data CSV (`NA` marks missing cells).
    #[arg(long)]
    pub data: PathBuf,
    /// Column types; defaults to schema.json next to the data.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

impl DataArgs {
    fn schema_path(&self) -> PathBuf {
        self.schema
            .clone()
            .unwrap_or_else(|| self.data.parent().unwrap_or(Path::new(".")).join("schema.json"))
    }

    fn load(&self) -> Result<Dataset> {
        io::load_dataset(&self.data, &self.schema_path())
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value = "MNARz")]
    pub mechanism: MechanismKind,
    #[arg(long, default_value = "probit")]
    pub link: LinkFunction,
    #[arg(long, default_value_t = 6)]
    pub d: usize,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.3)]
    pub missing_rate: f64,
    /// Bayes misclassification rate of the generating model.
    #[arg(long, default_value_t = 0.1)]
    pub misclassification: f64,
    /// Within-class correlation between variables.
    #[arg(long, default_value_t = 0.0)]
    pub correlation: f64,
    /// Search δ and the intercepts for the requested rates instead of
    /// looking them up.
    #[arg(long)]
    pub calibrate: bool,
    /// Generator settings as JSON (overrides every other option but --n
    /// and --seed when those are given explicitly).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// `1..4`, `1-4` or `1,2,3,4`.
    #[arg(long, default_value = "1..4")]
    pub k_range: String,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Partition CSV (a `class` column, or a single column).
    #[arg(long)]
    pub a: PathBuf,
    /// Second partition; a truth file from `simulate` works too.
    #[arg(long, alias = "truth")]
    pub b: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Parameters from `fit`; without it a model is fitted first.
    #[arg(long)]
    pub theta: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Classes when fitting here.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_DRAWS)]
    pub draws: usize,
    /// Complete values to score the imputation against.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Experiment grid as JSON.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

/// What was run and with which settings, saved next to the outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub mechanism: MechanismKind,
    pub link: LinkFunction,
    #[serde(rename = "K")]
    pub k: Vec<usize>,
    pub algorithm: Algorithm,
    pub max_iter: usize,
    pub tol: f64,
    pub n_iter: usize,
    pub burn_in: usize,
    pub restarts: usize,
    pub covariance: CovarianceStructure,
    pub input: Option<PathBuf>,
    pub out_dir: PathBuf,
}

/// Parse arguments, run, and return the exit status. Errors are printed
/// to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return exit::CONFIG;
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Infeasible(_) => exit::INFEASIBLE,
        Error::EmptyClass { .. }
        | Error::DegenerateClass { .. }
        | Error::FitFailure(_)
        | Error::ChainDegeneracy(_)
        | Error::Calibration { .. }
        | Error::NotPositiveDefinite { .. }
        | Error::Singular { .. } => exit::CONVERGENCE,
        _ => exit::CONFIG,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV}=`{v}` is not a positive integer")))?;
    // a second call in one process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::SelectK(a) => cmd_select_k(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Impute(a) => cmd_impute(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn out_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p)?;
    Ok(())
}

/// Generator settings for `simulate`: the tabulated setting when one
/// matches the requested rates, a calibrated one on request.
pub fn simulation_config(a: &SimulateArgs) -> Result<GeneratorConfig> {
    if let Some(path) = &a.config {
        let mut c: GeneratorConfig = serde_json::from_reader(fs::File::open(path)?)?;
        c.n = a.n;
        c.seed = a.seed;
        c.validate()?;
        return Ok(c);
    }
    let tabulated = if a.mechanism == MechanismKind::MNARz {
        if a.d == 6 {
            mnarz_setting(a.link, a.missing_rate, a.misclassification, a.correlation)
        } else {
            Err(Error::Config(format!("no tabulated class-only setting for d={}", a.d)))
        }
    } else if a.link == LinkFunction::Probit
        && (a.missing_rate - 0.3).abs() < 1e-9
        && (a.misclassification - 0.1).abs() < 1e-9
        && a.correlation == 0.0
    {
        reference_setting(a.mechanism, a.d)
    } else {
        Err(Error::Config(format!(
            "tabulated settings for {} are probit, 30% missing, 10% misclassification, uncorrelated",
            a.mechanism
        )))
    };
    if !a.calibrate {
        let s = tabulated.map_err(|e| Error::Config(format!("{e}; pass --calibrate to search for one")))?;
        let mut c = GeneratorConfig::three_class(a.n, a.d, s.delta, s.mechanism, a.seed)?;
        c.correlation = s.correlation;
        c.validate()?;
        return Ok(c);
    }
    // calibration starts from the tabulated intercepts when there are any
    let start = match tabulated.or_else(|_| reference_setting(a.mechanism, a.d)) {
        Ok(s) => {
            let m = &s.mechanism;
            let mech = MechanismParams::from_tables(m.kind(), a.link, m.alpha_table().clone(), m.beta_table().clone())?;
            (s.delta, mech)
        }
        Err(_) => (2.0, MechanismParams::new(a.mechanism, a.link, 3, a.d)),
    };
    let mut c = GeneratorConfig::three_class(a.n, a.d, start.0, start.1, a.seed)?;
    c.correlation = a.correlation;
    c.validate()?;
    let opts = CalibrationOptions { seed: a.seed, ..CalibrationOptions::default() };
    let cal = calibrate(a.misclassification, a.missing_rate, &c, &opts)?;
    eprintln!(
        "calibrated: delta {:.4}, misclassification {:.4}, missing rate {:.4}",
        cal.delta, cal.achieved.misclassification, cal.achieved.missing_rate
    );
    c.delta = cal.delta;
    c.mechanism = cal.mechanism;
    Ok(c)
}

fn cmd_simulate(a: &SimulateArgs) -> Result<i32> {
    let config = simulation_config(a)?;
    let sim = generate_seeded(&config)?;
    out_dir(&a.out_dir)?;
    io::save_dataset(&a.out_dir, "data", &sim.dataset)?;
    io::write_truth(io::create(&a.out_dir.join("truth.csv"))?, sim.dataset.schema(), &sim.complete, &sim.labels)?;
    io::write_json(&a.out_dir.join("config.json"), &config)?;
    eprintln!(
        "wrote {} rows, {:.1}% missing cells, to {}",
        config.n,
        100.0 * sim.dataset.missing_rate(),
        a.out_dir.display()
    );
    Ok(exit::OK)
}

/// Summary statistics of a fit, saved as `criteria.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    #[serde(rename = "K")]
    pub k: usize,
    pub mechanism: MechanismKind,
    pub link: LinkFunction,
    pub algorithm: Algorithm,
    pub loglik: f64,
    pub loglik_se: Option<f64>,
    pub nu: usize,
    #[serde(rename = "BIC")]
    pub bic: f64,
    #[serde(rename = "ICL")]
    pub icl: f64,
    pub icl_clamped: bool,
    pub converged: bool,
    pub iterations: usize,
    pub flagged_iterations: usize,
}

impl FitSummary {
    pub fn new(fit: &FitResult) -> Self {
        let c = criteria(fit, fit.n());
        FitSummary {
            k: fit.k(),
            mechanism: fit.spec.kind,
            link: fit.spec.link,
            algorithm: fit.algorithm,
            loglik: fit.log_likelihood,
            loglik_se: fit.log_likelihood_se,
            nu: fit.n_params,
            bic: c.bic,
            icl: c.icl,
            icl_clamped: c.clamped,
            converged: fit.converged,
            iterations: fit.iterations,
            flagged_iterations: fit.flagged_iterations,
        }
    }
}

/// theta.json, responsibilities.csv, partition.csv, trace.csv and
/// criteria.json.
pub fn write_fit(dir: &Path, fit: &FitResult) -> Result<()> {
    out_dir(dir)?;
    io::write_json(&dir.join("theta.json"), &fit.theta)?;
    let header: Vec<String> = (1..=fit.k()).map(|k| format!("class{k}")).collect();
    io::write_matrix(io::create(&dir.join("responsibilities.csv"))?, &header, &fit.responsibilities)?;
    io::write_partition(io::create(&dir.join("partition.csv"))?, &fit.partition)?;
    let trace = DMatrix::from_fn(fit.trace.len(), 2, |t, c| if c == 0 { (t + 1) as f64 } else { fit.trace[t] });
    io::write_matrix(io::create(&dir.join("trace.csv"))?, &["iteration".into(), "loglik".into()], &trace)?;
    io::write_json(&dir.join("criteria.json"), &FitSummary::new(fit))
}

fn cmd_fit(a: &FitArgs) -> Result<i32> {
    let spec = a.model.spec();
    let config = a.model.config();
    check_feasible(spec, config.algorithm_for(spec))?;
    let data = a.data.load()?;
    let fit = fit_model(&data, a.k, spec, &config)?;
    write_fit(&a.out_dir, &fit)?;
    io::write_json(&a.out_dir.join("manifest.json"), &a.model.manifest("fit", vec![a.k], Some(&a.data.data), &a.out_dir))?;
    let s = FitSummary::new(&fit);
    say!("{}", serde_json::to_string(&s)?);
    if fit.converged {
        Ok(exit::OK)
    } else {
        eprintln!("warning: no convergence after {} iterations; outputs are flagged `converged: false`", fit.iterations);
        Ok(exit::CONVERGENCE)
    }
}

/// `1..4` (inclusive), `1-4` or `1,2,4`.
pub fn parse_k_range(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("cannot read K range `{s}` (e.g. 1..4, 1-4 or 1,2,3)"));
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    let ks: Vec<usize> = if let Some((lo, hi)) = s.split_once("..").or_else(|| s.split_once('-')) {
        let (lo, hi) = (num(lo)?, num(hi.trim_start_matches('='))?);
        (lo..=hi).collect()
    } else {
        s.split(',').map(num).collect::<Result<_>>()?
    };
    if ks.is_empty() || ks.contains(&0) {
        return Err(bad());
    }
    Ok(ks)
}

#[derive(Serialize)]
struct SelectionSummary<'a> {
    #[serde(rename = "chosen_K")]
    chosen_k: Option<usize>,
    candidates: &'a [crate::metrics::Candidate],
}

fn cmd_select_k(a: &SelectArgs) -> Result<i32> {
    let ks = parse_k_range(&a.k_range)?;
    let spec = a.model.spec();
    let config = a.model.config();
    check_feasible(spec, config.algorithm_for(spec))?;
    let data = a.data.load()?;
    let report = select_k(&data, &ks, spec, &config)?;
    out_dir(&a.out_dir)?;
    report.write_csv(io::create(&a.out_dir.join("selection.csv"))?)?;
    io::write_json(
        &a.out_dir.join("selection.json"),
        &SelectionSummary { chosen_k: report.chosen_k(), candidates: &report.candidates },
    )?;
    io::write_json(&a.out_dir.join("manifest.json"), &a.model.manifest("select-k", ks, Some(&a.data.data), &a.out_dir))?;
    match report.chosen_fit() {
        Some(fit) => {
            write_fit(&a.out_dir, fit)?;
            say!("chosen K = {}", fit.k());
            Ok(if fit.converged { exit::OK } else { exit::CONVERGENCE })
        }
        None => {
            eprintln!("error: every candidate failed; see selection.csv");
            Ok(exit::CONVERGENCE)
        }
    }
}

/// ARI, the confusion table and class sizes of two partitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    pub ari: f64,
    /// Labels of the first partition, in row order of `confusion`.
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
    pub confusion: Vec<Vec<usize>>,
    pub sizes_a: Vec<usize>,
    pub sizes_b: Vec<usize>,
}

pub fn evaluate(a: &[usize], b: &[usize]) -> Result<Evaluation> {
    let ari = adjusted_rand_index(a, b)?;
    let sorted = |v: &[usize]| {
        let mut u = v.to_vec();
        u.sort_unstable();
        u.dedup();
        u
    };
    let (la, lb) = (sorted(a), sorted(b));
    let pos = |l: &[usize], x: usize| l.binary_search(&x).expect("label present");
    let mut confusion = vec![vec![0; lb.len()]; la.len()];
    for (x, y) in a.iter().zip(b) {
        confusion[pos(&la, *x)][pos(&lb, *y)] += 1;
    }
    let sizes_a = confusion.iter().map(|r| r.iter().sum()).collect();
    let sizes_b = (0..lb.len()).map(|c| confusion.iter().map(|r| r[c]).sum()).collect();
    Ok(Evaluation { n: a.len(), ari, labels_a: la, labels_b: lb, confusion, sizes_a, sizes_b })
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<i32> {
    let e = evaluate(&io::load_partition(&a.a)?, &io::load_partition(&a.b)?)?;
    if let Some(dir) = &a.out_dir {
        out_dir(dir)?;
        io::write_json(&dir.join("evaluation.json"), &e)?;
    }
    say!("{}", serde_json::to_string_pretty(&e)?);
    Ok(exit::OK)
}

#[derive(Serialize)]
struct ImputationSummary {
    draws: usize,
    mechanism_aware: bool,
    missing_cells: usize,
    /// Normalized squared error over the missing cells, with a truth file.
    mse: Option<f64>,
}

fn cmd_impute(a: &ImputeArgs) -> Result<i32> {
    let data = a.data.load()?;
    let mut code = exit::OK;
    let theta: Theta = match &a.theta {
        Some(p) => serde_json::from_reader(fs::File::open(p)?)?,
        None => {
            let k = a.k.ok_or_else(|| Error::Config("pass --theta or --k".into()))?;
            let spec = a.model.spec();
            let config = a.model.config();
            check_feasible(spec, config.algorithm_for(spec))?;
            let fit = fit_model(&data, k, spec, &config)?;
            if !fit.converged {
                code = exit::CONVERGENCE;
            }
            write_fit(&a.out_dir, &fit)?;
            fit.theta
        }
    };
    let r = impute_theta(&data, &theta, a.draws, &mut seeded(a.model.seed))?;
    out_dir(&a.out_dir)?;
    let filled = Dataset::new(
        data.schema().clone(),
        r.completed.clone(),
        crate::models::Mask::from_element(data.n(), data.d(), false),
    )?;
    io::write_dataset(io::create(&a.out_dir.join("imputed.csv"))?, &filled)?;
    let mse = match &a.truth {
        Some(p) => {
            let (truth, _) = io::read_truth(fs::File::open(p)?, data.schema())?;
            Some(imputation_mse(&r.completed, &truth, data.mask())?)
        }
        None => None,
    };
    let summary = ImputationSummary {
        draws: r.draws,
        mechanism_aware: r.mechanism_aware,
        missing_cells: data.mask().iter().filter(|m| **m).count(),
        mse,
    };
    io::write_json(&a.out_dir.join("imputation.json"), &summary)?;
    say!("{}", serde_json::to_string(&summary)?);
    Ok(code)
}

/// Replication grid for `sweep`. Each (generator, n, d, seed) sample is
/// fitted with every mechanism in `mechanisms_fit`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub mechanisms_gen: Vec<MechanismKind>,
    pub mechanisms_fit: Vec<MechanismKind>,
    pub n: Vec<usize>,
    pub d: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "three")]
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default)]
    pub link: LinkFunction,
    #[serde(default)]
    pub covariance: CovarianceStructure,
    #[serde(default)]
    pub max_iter: Option<usize>,
    #[serde(default)]
    pub restarts: Option<usize>,
    #[serde(default)]
    pub n_iter: Option<usize>,
    #[serde(default)]
    pub burn_in: Option<usize>,
}

fn three() -> usize {
    3
}

impl SweepGrid {
    fn model_config(&self, seed: u64) -> ModelConfig {
        let mut c = ModelConfig::default();
        if let Some(m) = self.max_iter {
            c.em.max_iter = m;
            c.sem.warm_start.max_iter = m;
        }
        if let Some(r) = self.restarts {
            c.em.n_random_starts = r;
        }
        if let Some(n) = self.n_iter {
            c.sem.n_iter = n;
        }
        if let Some(b) = self.burn_in {
            c.sem.burn_in = b;
        }
        c.with_seed(seed).with_covariance(self.covariance)
    }
}

/// One row of the sweep output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub mechanism_gen: MechanismKind,
    pub mechanism_fit: MechanismKind,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    #[serde(rename = "ARI")]
    pub ari: Option<f64>,
    pub runtime_s: f64,
    pub status: String,
}

/// Run every replication of `grid`. Failures are recorded in the row's
/// status and the sweep continues.
pub fn run_sweep(grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    let mut reps = Vec::new();
    for &g in &grid.mechanisms_gen {
        for &n in &grid.n {
            for &d in &grid.d {
                for &s in &grid.seeds {
                    reps.push((g, n, d, s));
                }
            }
        }
    }
    if reps.is_empty() || grid.mechanisms_fit.is_empty() {
        return Err(Error::Config("the sweep grid is empty".into()));
    }
    let rows: Vec<Vec<SweepRow>> = reps
        .par_iter()
        .map(|&(g, n, d, seed)| {
            let row = |f: MechanismKind, ari: Option<f64>, runtime_s: f64, status: String| SweepRow {
                mechanism_gen: g,
                mechanism_fit: f,
                n,
                d,
                seed,
                ari,
                runtime_s,
                status,
            };
            let sim = GeneratorConfig::reference(g, d, n, seed).and_then(|c| generate_seeded(&c));
            let sim = match sim {
                Ok(s) => s,
                Err(e) => return grid.mechanisms_fit.iter().map(|&f| row(f, None, 0.0, format!("failed: {e}"))).collect(),
            };
            let config = grid.model_config(seed);
            grid.mechanisms_fit
                .iter()
                .map(|&f| {
                    let t0 = Instant::now();
                    let out = fit_model(&sim.dataset, grid.k, MechanismSpec::new(f, grid.link), &config)
                        .and_then(|fit| Ok((adjusted_rand_index(&fit.partition, &sim.labels)?, fit.converged)));
                    let dt = t0.elapsed().as_secs_f64();
                    match out {
                        Ok((ari, true)) => row(f, Some(ari), dt, "converged".into()),
                        Ok((ari, false)) => row(f, Some(ari), dt, "max_iter".into()),
                        Err(e) => row(f, None, dt, format!("failed: {e}")),
                    }
                })
                .collect()
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

fn cmd_sweep(a: &SweepArgs) -> Result<i32> {
    let grid: SweepGrid = serde_json::from_reader(fs::File::open(&a.grid)?)?;
    let rows = run_sweep(&grid)?;
    out_dir(&a.out_dir)?;
    let mut w = csv::Writer::from_writer(io::create(&a.out_dir.join("sweep.csv"))?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(a.out_dir.join("sweep.svg"), boxplot_svg(&rows))?;
    let failed = rows.iter().filter(|r| r.ari.is_none()).count();
    eprintln!("{} fits, {failed} failed", rows.len());
    Ok(exit::OK)
}

/// Minimum, quartiles and maximum (linear interpolation between order
/// statistics).
pub fn five_numbers(values: &[f64]) -> Option<[f64; 5]> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = p * (v.len() - 1) as f64;
        let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    Some([v[0], q(0.25), q(0.5), q(0.75), v[v.len() - 1]])
}

/// Box per (generator, n, d, fitted mechanism) group of ARI values, in
/// first-seen order.
pub fn boxplot_svg(rows: &[SweepRow]) -> String {
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for r in rows {
        let key = format!("{} n={} d={} | {}", r.mechanism_gen, r.n, r.d, r.mechanism_fit);
        let slot = match groups.iter().position(|g| g.0 == key) {
            Some(p) => p,
            None => {
                groups.push((key, vec![]));
                groups.len() - 1
            }
        };
        if let Some(a) = r.ari {
            groups[slot].1.push(a);
        }
    }
    let (w_box, gap, left, top, h) = (36.0, 24.0, 60.0, 20.0, 300.0);
    let width = left + groups.len() as f64 * (w_box + gap) + gap;
    let height = top + h + 200.0;
    let lo = groups.iter().flat_map(|g| g.1.iter().copied()).fold(0.0f64, f64::min);
    let ypx = |v: f64| top + h * (1.0 - (v - lo) / (1.0 - lo));
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s += &format!("<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n", top + h);
    for t in 0..=5 {
        let v = lo + (1.0 - lo) * t as f64 / 5.0;
        let y = ypx(v);
        s += &format!(
            "<line x1=\"{}\" y1=\"{y:.1}\" x2=\"{left}\" y2=\"{y:.1}\" stroke=\"black\"/><text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>\n",
            left - 4.0,
            left - 6.0,
            y + 4.0
        );
    }
    s += &format!(
        "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">ARI</text>\n",
        top + h / 2.0,
        top + h / 2.0
    );
    for (g, (label, vals)) in groups.iter().enumerate() {
        let x = left + gap + g as f64 * (w_box + gap);
        let cx = x + w_box / 2.0;
        if let Some([mn, q1, md, q3, mx]) = five_numbers(vals) {
            s += &format!(
                "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
                ypx(mx),
                ypx(q3)
            );
            s += &format!(
                "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
                ypx(q1),
                ypx(mn)
            );
            s += &format!(
                "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{w_box}\" height=\"{:.1}\" fill=\"#9ecae1\" stroke=\"black\"/>\n",
                ypx(q3),
                (ypx(q1) - ypx(q3)).max(0.5)
            );
            s += &format!(
                "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\" stroke-width=\"2\"/>\n",
                ypx(md),
                x + w_box,
                ypx(md)
            );
        }
        let ly = top + h + 10.0;
        s += &format!(
            "<text x=\"{cx:.1}\" y=\"{ly:.1}\" transform=\"rotate(60 {cx:.1} {ly:.1})\">{}</text>\n",
            escape(label)
        );
    }
    s += "</svg>\n";
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
