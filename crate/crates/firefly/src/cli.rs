//! Config-driven experiment runner behind the `firefly` binary.
//!
//! Four subcommands: `gen-data` writes benchmark datasets as CSV, `run`
//! executes a growing experiment described by a JSON config, `report`
//! aggregates growth logs onto standard output, and `continual` runs the
//! sequential-task pipeline (a `run` restricted to that experiment kind).
//!
//! A run writes, under its output directory:
//!
//! * `logs/<method>/seed_<s>.jsonl`, one growth log per (method, seed);
//! * `aggregate.csv`, mean and sample stddev of the boundary losses over
//!   seeds per (method, phase);
//! * `summary.json`, final-phase metrics per method;
//! * `checkpoints/<method>/seed_<s>.json`, the final grown network.
//!
//! Continual runs write `tasks/seed_<s>.jsonl` and `summary.json` instead.
//!
//! Everything is derived from the config and the seeds, never from wall
//! clock or ambient randomness, so rerunning a config reproduces every
//! output byte. Seeds run in parallel (capped by `FIREFLY_THREADS`); each
//! seed writes only its own files, and aggregation happens after the pool
//! drains, so scheduling cannot leak into the artifacts.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::continual::{
    average_accuracy, evaluate_all_tasks, grow_for_task, ClConfig, MasterNetwork,
};
use crate::data::{
    baseline_random_split, baseline_random_split_plus_new, baseline_scratch, gen_cl_tasks_with,
    gen_toy_dataset, gen_toy_truth_sized, stream_rng, BaselineOpts, ClTaskOpts, Dataset,
};
use crate::error::{Error, Result};
use crate::growth::{
    firefly_train, fit, GrowMode, GrowthConfig, Schedule, TrainRun, WidthBudget,
};
use crate::logs::{aggregate, aggregate_csv, aggregate_json, read_growth_logs, AggregateRow,
    ClRecord, GrowthRecord, LogWriter};
use crate::network::{Activation, GrowableNetwork, HeadKind};

#[derive(Parser)]
#[command(name = "firefly", version, about = "Progressive network growing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write benchmark datasets as CSV files.
    GenData(GenDataArgs),
    /// Run a growing experiment from a JSON config.
    Run(RunArgs),
    /// Aggregate growth logs from a directory onto standard output.
    Report(ReportArgs),
    /// Run a sequential-task experiment from a JSON config.
    Continual(RunArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Which benchmark to generate.
    #[arg(long, value_enum, default_value_t = DataKind::ToyRbf)]
    kind: DataKind,
    /// Directory the CSV files are written into.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seed list.
    #[arg(long, default_value = "0")]
    seeds: String,
    /// Points per dataset (toy) or per task (continual).
    #[arg(long)]
    points: Option<usize>,
    /// Ground-truth network size (toy only).
    #[arg(long, default_value_t = 15)]
    truth_neurons: usize,
    /// Number of tasks (continual only).
    #[arg(long, default_value_t = 10)]
    tasks: usize,
    /// Classes per task (continual only).
    #[arg(long, default_value_t = 4)]
    classes: usize,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seed list, overriding the config's `seeds`.
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding growth logs (searched recursively).
    logs: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Csv)]
    format: ReportFormat,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DataKind {
    ToyRbf,
    Continual,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Json,
}

/// Binary entry point; returns the process exit code.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; only real usage
            // errors take the failure code.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(&args),
        Command::Run(args) => run_from_args(&args, None),
        Command::Continual(args) => run_from_args(&args, Some(ExperimentKind::Continual)),
        Command::Report(args) => report(&args.logs, args.format),
    }
}

fn parse_seed_list(text: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        let seed: u64 = part
            .parse()
            .map_err(|_| Error::config(format!("seed list entry {part:?} is not an integer")))?;
        seeds.push(seed);
    }
    check_distinct_seeds(&seeds)?;
    Ok(seeds)
}

fn check_distinct_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::config("seed list is empty"));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(Error::config("seed list contains duplicates"));
    }
    Ok(())
}

/// Worker cap: `FIREFLY_THREADS` if set, otherwise whatever the host offers.
fn thread_cap() -> Result<usize> {
    match std::env::var("FIREFLY_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config(format!(
                "FIREFLY_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(std::env::VarError::NotPresent) => Ok(std::thread::available_parallelism()
            .map(usize::from)
            .unwrap_or(1)),
        Err(e) => Err(Error::config(format!("FIREFLY_THREADS: {e}"))),
    }
}

// ---------------------------------------------------------------------------
// Config document

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ToyRbf,
    WidthMlp,
    DepthMlp,
    Continual,
}

impl ExperimentKind {
    fn label(self) -> &'static str {
        match self {
            ExperimentKind::ToyRbf => "toy-rbf",
            ExperimentKind::WidthMlp => "width-mlp",
            ExperimentKind::DepthMlp => "depth-mlp",
            ExperimentKind::Continual => "continual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    Firefly,
    FireflySplitOnly,
    RandSplit,
    RandSplitNew,
    Scratch,
}

impl MethodName {
    fn label(self) -> &'static str {
        match self {
            MethodName::Firefly => "firefly",
            MethodName::FireflySplitOnly => "firefly-split-only",
            MethodName::RandSplit => "rand-split",
            MethodName::RandSplitNew => "rand-split-new",
            MethodName::Scratch => "scratch",
        }
    }
}

/// Width budget in configs: a plain integer is a per-phase neuron count, an
/// object with a `fraction` key is a per-phase fraction of existing neurons.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum BudgetSetting {
    Count(usize),
    Fraction { fraction: f64 },
}

impl BudgetSetting {
    fn to_budget(self) -> WidthBudget {
        match self {
            BudgetSetting::Count(n) => WidthBudget::Count(n),
            BudgetSetting::Fraction { fraction } => WidthBudget::Fraction(fraction),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthSettings {
    pub step_size: Option<f64>,
    pub m_prime: Option<usize>,
    pub width_budget: Option<BudgetSetting>,
    pub depth_neuron_budget: Option<usize>,
    pub depth_layer_budget: Option<usize>,
    pub quadrature_points: Option<usize>,
    pub step_one_iters: Option<usize>,
    pub step_one_lr: Option<f64>,
    pub init_scale: Option<f64>,
    pub penalty_weight: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSettings {
    pub grow_phases: Option<usize>,
    pub train_iters: Option<usize>,
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    /// Toy benchmark: points per dataset.
    pub n_points: Option<usize>,
    /// Toy benchmark: ground-truth network size.
    pub truth_neurons: Option<usize>,
    /// Starting hidden width (toy) or hidden widths per layer (mlp kinds).
    pub start_neurons: Option<usize>,
    pub hidden_layers: Option<Vec<usize>>,
    /// Weight init standard deviation for starting networks.
    pub model_init_sd: Option<f64>,
    /// Classification kinds: classes, points per task, cluster spread.
    pub classes: Option<usize>,
    pub points_per_task: Option<usize>,
    pub cluster_sd: Option<f64>,
    pub clusters_per_class: Option<usize>,
    /// Continual kind: number of sequential tasks.
    pub tasks: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSettings {
    /// Candidate grows tried per random-baseline step.
    pub k_trials: Option<usize>,
    /// Fine-tune iterations per trial before comparison.
    pub finetune_iters: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinualSettings {
    pub initial_neurons: Option<usize>,
    pub m_prime: Option<usize>,
    pub budget_per_round: Option<usize>,
    pub mask_iters: Option<usize>,
    pub mask_lr: Option<f64>,
    pub finetune_iters: Option<usize>,
    pub learning_rate: Option<f64>,
    pub target_accuracy: Option<f64>,
    pub max_grow_rounds: Option<usize>,
    pub penalty_weight: Option<f64>,
}

/// The experiment document. Unknown keys anywhere are errors.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub methods: Vec<MethodName>,
    /// Firefly variants at these candidate-pool sizes, labeled
    /// `firefly-mprime-<k>`, in addition to `methods`.
    #[serde(default)]
    pub m_prime_sweep: Vec<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub growth: GrowthSettings,
    #[serde(default)]
    pub schedule: ScheduleSettings,
    #[serde(default)]
    pub data: DataSettings,
    #[serde(default)]
    pub baselines: BaselineSettings,
    #[serde(default)]
    pub continual: ContinualSettings,
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Resolution

#[derive(Debug, Clone)]
enum Flavor {
    Firefly { m_prime: usize },
    RandSplit,
    RandSplitNew,
    Scratch,
}

#[derive(Debug, Clone)]
struct MethodSpec {
    label: String,
    flavor: Flavor,
}

/// A validated config with every default filled in.
#[derive(Debug)]
struct Resolved {
    kind: ExperimentKind,
    specs: Vec<MethodSpec>,
    seeds: Vec<u64>,
    out: PathBuf,
    growth: GrowthConfig,
    schedule: Schedule,
    baseline: BaselineOpts,
    n_points: usize,
    truth_neurons: usize,
    start_neurons: usize,
    hidden_layers: Vec<usize>,
    model_init_sd: f64,
    task_opts: ClTaskOpts,
    num_tasks: usize,
    cl: ClConfig,
    threads: usize,
}

impl Resolved {
    fn grow_mode(&self) -> GrowMode {
        let layers: Vec<usize> = (0..self.hidden_layers.len().max(1)).collect();
        match self.kind {
            ExperimentKind::ToyRbf => GrowMode::Width { layers: vec![0] },
            ExperimentKind::WidthMlp => GrowMode::Width { layers },
            ExperimentKind::DepthMlp => GrowMode::Both { layers },
            ExperimentKind::Continual => unreachable!("continual runs do not use grow modes"),
        }
    }

    fn mode_label(&self) -> &'static str {
        match self.kind {
            ExperimentKind::ToyRbf | ExperimentKind::WidthMlp => "width",
            ExperimentKind::DepthMlp => "both",
            ExperimentKind::Continual => unreachable!(),
        }
    }
}

fn method_valid(kind: ExperimentKind, method: MethodName) -> bool {
    match kind {
        ExperimentKind::ToyRbf => true,
        // The scratch baseline trains fixed-width RBF regressors; it has no
        // counterpart on the classification kinds.
        ExperimentKind::WidthMlp | ExperimentKind::DepthMlp => {
            !matches!(method, MethodName::Scratch)
        }
        ExperimentKind::Continual => false,
    }
}

fn resolve(config: &RunConfig, out: Option<PathBuf>, seeds: Option<Vec<u64>>) -> Result<Resolved> {
    let seeds = match seeds {
        Some(s) => s,
        None => config.seeds.clone(),
    };
    check_distinct_seeds(&seeds)?;
    let out = out
        .or_else(|| config.out_dir.clone())
        .ok_or_else(|| Error::config("no output directory (config `out_dir` or --out)"))?;

    let mut specs = Vec::new();
    if config.kind == ExperimentKind::Continual {
        if !config.methods.is_empty() || !config.m_prime_sweep.is_empty() {
            return Err(Error::config(
                "continual runs take no `methods` or `m_prime_sweep`",
            ));
        }
    } else {
        for &m in &config.methods {
            if !method_valid(config.kind, m) {
                return Err(Error::config(format!(
                    "method {} is not valid for kind {}",
                    m.label(),
                    config.kind.label()
                )));
            }
            specs.push(MethodSpec {
                label: m.label().to_string(),
                flavor: match m {
                    MethodName::Firefly => Flavor::Firefly {
                        m_prime: config.growth.m_prime.unwrap_or(5),
                    },
                    MethodName::FireflySplitOnly => Flavor::Firefly { m_prime: 0 },
                    MethodName::RandSplit => Flavor::RandSplit,
                    MethodName::RandSplitNew => Flavor::RandSplitNew,
                    MethodName::Scratch => Flavor::Scratch,
                },
            });
        }
        for &k in &config.m_prime_sweep {
            specs.push(MethodSpec {
                label: format!("firefly-mprime-{k}"),
                flavor: Flavor::Firefly { m_prime: k },
            });
        }
        if specs.is_empty() {
            return Err(Error::config("no methods to run"));
        }
        let mut labels: Vec<&str> = specs.iter().map(|s| s.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != specs.len() {
            return Err(Error::config("duplicate method labels in config"));
        }
    }

    let g = &config.growth;
    let depth_default = if config.kind == ExperimentKind::DepthMlp { 1 } else { 0 };
    let growth = GrowthConfig {
        step_size: g.step_size.unwrap_or(0.01),
        m_prime: g.m_prime.unwrap_or(5),
        width_budget: g
            .width_budget
            .map(BudgetSetting::to_budget)
            .unwrap_or(WidthBudget::Count(1)),
        depth_neuron_budget: g.depth_neuron_budget.unwrap_or(depth_default),
        depth_layer_budget: g.depth_layer_budget.unwrap_or(depth_default),
        quadrature_points: g.quadrature_points.unwrap_or(3),
        step_one_iters: g.step_one_iters.unwrap_or(100),
        step_one_lr: g.step_one_lr.unwrap_or(0.5),
        init_scale: g.init_scale.unwrap_or(0.1),
        penalty_weight: g.penalty_weight.unwrap_or(0.0),
        rng_seed: 0,
    };
    growth.validate()?;

    let schedule = Schedule {
        grow_phases: config.schedule.grow_phases.unwrap_or(9),
        train_iters: config.schedule.train_iters.unwrap_or(10_000),
        learning_rate: config.schedule.learning_rate.unwrap_or(0.1),
    };

    let baseline = BaselineOpts {
        k_trials: config.baselines.k_trials.unwrap_or(3),
        m_prime: growth.m_prime,
        finetune_iters: config.baselines.finetune_iters.unwrap_or(100),
        learning_rate: schedule.learning_rate,
        step_size: growth.step_size,
        init_scale: growth.init_scale,
    };
    if baseline.k_trials == 0 {
        return Err(Error::config("baselines.k_trials must be positive"));
    }

    let d = &config.data;
    let default_tasks = ClTaskOpts::default();
    let task_opts = ClTaskOpts {
        classes: d.classes.unwrap_or(default_tasks.classes),
        points_per_task: d.points_per_task.unwrap_or(default_tasks.points_per_task),
        cluster_sd: d.cluster_sd.unwrap_or(default_tasks.cluster_sd),
        clusters_per_class: d
            .clusters_per_class
            .unwrap_or(default_tasks.clusters_per_class),
    };

    let c = &config.continual;
    let cl_defaults = ClConfig::default();
    let cl = ClConfig {
        input_dim: 2,
        classes: task_opts.classes,
        initial_neurons: c.initial_neurons.unwrap_or(cl_defaults.initial_neurons),
        step_size: growth.step_size,
        m_prime: c.m_prime.unwrap_or(15),
        budget_per_round: c.budget_per_round.unwrap_or(cl_defaults.budget_per_round),
        mask_iters: c.mask_iters.unwrap_or(cl_defaults.mask_iters),
        mask_lr: c.mask_lr.unwrap_or(cl_defaults.mask_lr),
        finetune_iters: c.finetune_iters.unwrap_or(cl_defaults.finetune_iters),
        learning_rate: c.learning_rate.unwrap_or(cl_defaults.learning_rate),
        target_accuracy: c.target_accuracy.unwrap_or(cl_defaults.target_accuracy),
        max_grow_rounds: c.max_grow_rounds.unwrap_or(cl_defaults.max_grow_rounds),
        init_scale: growth.init_scale,
        step_one_iters: growth.step_one_iters,
        step_one_lr: growth.step_one_lr,
        quadrature_points: growth.quadrature_points,
        penalty_weight: c.penalty_weight.unwrap_or(cl_defaults.penalty_weight),
        seed: 0,
    };
    if config.kind == ExperimentKind::Continual {
        cl.validate()?;
    }

    Ok(Resolved {
        kind: config.kind,
        specs,
        seeds,
        out,
        growth,
        schedule,
        baseline,
        n_points: d.n_points.unwrap_or(1000),
        truth_neurons: d.truth_neurons.unwrap_or(15),
        start_neurons: d.start_neurons.unwrap_or(1),
        hidden_layers: d.hidden_layers.clone().unwrap_or_else(|| vec![4, 4]),
        model_init_sd: d.model_init_sd.unwrap_or(1.0),
        task_opts,
        num_tasks: d.tasks.unwrap_or(10),
        cl,
        threads: thread_cap()?,
    })
}

// ---------------------------------------------------------------------------
// Run

fn run_from_args(args: &RunArgs, required_kind: Option<ExperimentKind>) -> Result<()> {
    let config = load_config(&args.config)?;
    if let Some(required) = required_kind {
        if config.kind != required {
            return Err(Error::config(format!(
                "this subcommand runs kind {:?}, but the config says {:?}",
                required.label(),
                config.kind.label()
            )));
        }
    }
    let seeds = args.seeds.as_deref().map(parse_seed_list).transpose()?;
    let resolved = resolve(&config, args.out.clone(), seeds)?;
    run_resolved(&resolved)
}

fn run_resolved(r: &Resolved) -> Result<()> {
    std::fs::create_dir_all(&r.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(r.threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    match r.kind {
        ExperimentKind::Continual => {
            let rows: Vec<SeedClSummary> = pool.install(|| {
                r.seeds
                    .par_iter()
                    .map(|&seed| run_continual_seed(seed, r))
                    .collect::<Result<Vec<_>>>()
            })?;
            write_continual_summary(r, &rows)
        }
        _ => {
            let jobs: Vec<(usize, u64)> = r
                .specs
                .iter()
                .enumerate()
                .flat_map(|(i, _)| r.seeds.iter().map(move |&s| (i, s)))
                .collect();
            let records: Vec<Vec<GrowthRecord>> = pool.install(|| {
                jobs.par_iter()
                    .map(|&(i, seed)| run_growth_job(&r.specs[i], seed, r))
                    .collect::<Result<Vec<_>>>()
            })?;
            let all: Vec<GrowthRecord> = records.into_iter().flatten().collect();
            let rows = aggregate(&all);
            std::fs::write(r.out.join("aggregate.csv"), aggregate_csv(&rows))?;
            write_growth_summary(r, &rows)
        }
    }
}

/// The problem a growth job trains on: a starting network and its data.
fn build_problem(r: &Resolved, seed: u64) -> Result<(GrowableNetwork, Dataset)> {
    let mut rng = stream_rng(seed, "model-init", 0);
    match r.kind {
        ExperimentKind::ToyRbf => {
            let truth = gen_toy_truth_sized(seed, r.truth_neurons);
            let data = gen_toy_dataset(&truth, r.n_points, seed)?;
            let net = GrowableNetwork::rbf_regression(1, r.start_neurons, r.model_init_sd, &mut rng);
            Ok((net, data))
        }
        ExperimentKind::WidthMlp | ExperimentKind::DepthMlp => {
            let data = gen_cl_tasks_with(1, seed, &r.task_opts)?.swap_remove(0);
            if r.hidden_layers.is_empty() {
                return Err(Error::config("hidden_layers must not be empty"));
            }
            let mut specs = Vec::with_capacity(r.hidden_layers.len());
            for (i, &w) in r.hidden_layers.iter().enumerate() {
                let out = match r.hidden_layers.get(i + 1) {
                    Some(&next) => next,
                    None => r.task_opts.classes,
                };
                specs.push((w, out));
            }
            let net = GrowableNetwork::mlp(
                2,
                &specs,
                Activation::Rectifier,
                HeadKind::Classification,
                r.model_init_sd,
                &mut rng,
            );
            Ok((net, data))
        }
        ExperimentKind::Continual => unreachable!("continual jobs build their own tasks"),
    }
}

fn run_growth_job(spec: &MethodSpec, seed: u64, r: &Resolved) -> Result<Vec<GrowthRecord>> {
    let (net, data) = build_problem(r, seed)?;
    let records = match &spec.flavor {
        Flavor::Firefly { m_prime } => {
            let mut cfg = r.growth.clone();
            cfg.m_prime = *m_prime;
            cfg.rng_seed = seed;
            let run = firefly_train(&net, &data, &cfg, &r.schedule, &r.grow_mode())?;
            save_checkpoint(r, &spec.label, seed, &run.net)?;
            firefly_records(&spec.label, seed, r.mode_label(), &run)
        }
        Flavor::RandSplit | Flavor::RandSplitNew => {
            let plus_new = matches!(spec.flavor, Flavor::RandSplitNew);
            let mut rng = stream_rng(seed, &spec.label, 0);
            let mut net = net;
            let mut records = Vec::new();
            for phase in 0..=r.schedule.grow_phases {
                let loss = fit(&mut net, &data, r.schedule.train_iters, r.schedule.learning_rate)?;
                records.push(GrowthRecord::boundary(
                    &spec.label,
                    seed,
                    phase,
                    r.mode_label(),
                    loss,
                    net.total_neurons(),
                    net.count_params(),
                ));
                if phase < r.schedule.grow_phases {
                    net = if plus_new {
                        baseline_random_split_plus_new(&net, &data, &r.baseline, &mut rng)?
                    } else {
                        baseline_random_split(&net, &data, &r.baseline, &mut rng)?
                    };
                }
            }
            save_checkpoint(r, &spec.label, seed, &net)?;
            records
        }
        Flavor::Scratch => {
            let per_phase = match r.growth.width_budget {
                WidthBudget::Count(c) => c.max(1),
                WidthBudget::Fraction(_) => {
                    return Err(Error::config(
                        "the scratch baseline needs a count width budget to derive widths",
                    ))
                }
            };
            let widths: Vec<usize> = (0..=r.schedule.grow_phases)
                .map(|p| r.start_neurons + p * per_phase)
                .collect();
            let results = baseline_scratch(
                &data,
                &widths,
                r.schedule.train_iters,
                r.schedule.learning_rate,
                r.model_init_sd,
                seed,
            )?;
            let mut records = Vec::with_capacity(results.len());
            for (phase, res) in results.iter().enumerate() {
                records.push(GrowthRecord::boundary(
                    &spec.label,
                    seed,
                    phase,
                    "none",
                    res.final_loss,
                    res.net.total_neurons(),
                    res.net.count_params(),
                ));
            }
            if let Some(last) = results.last() {
                save_checkpoint(r, &spec.label, seed, &last.net)?;
            }
            records
        }
    };
    let path = r
        .out
        .join("logs")
        .join(&spec.label)
        .join(format!("seed_{seed}.jsonl"));
    let mut writer = LogWriter::create(&path)?;
    for record in &records {
        writer.write(record)?;
    }
    Ok(records)
}

/// Boundary records per phase plus one record per candidate per grow step.
fn firefly_records(label: &str, seed: u64, mode: &str, run: &TrainRun) -> Vec<GrowthRecord> {
    let mut records = Vec::new();
    for (p, phase) in run.phases.iter().enumerate() {
        records.push(GrowthRecord::boundary(
            label,
            seed,
            phase.phase,
            mode,
            phase.loss,
            phase.neurons,
            phase.params,
        ));
        if let Some(grow) = run.grows.get(p) {
            for c in &grow.candidates {
                records.push(GrowthRecord {
                    method: label.to_string(),
                    seed,
                    phase: phase.phase,
                    mode: mode.to_string(),
                    candidate_id: Some(c.candidate_id),
                    kind: c.kind.name().to_string(),
                    score: Some(c.score),
                    selected: Some(c.selected),
                    loss_before: grow.loss_before,
                    loss_after: grow.loss_after,
                    neurons: grow.net.total_neurons(),
                    params: grow.net.count_params(),
                });
            }
        }
    }
    records
}

fn save_checkpoint(r: &Resolved, label: &str, seed: u64, net: &GrowableNetwork) -> Result<()> {
    let path = r
        .out
        .join("checkpoints")
        .join(label)
        .join(format!("seed_{seed}.json"));
    checkpoint::save(net, &path)
}

// ---------------------------------------------------------------------------
// Summaries

#[derive(Debug, Serialize)]
struct MethodSummary {
    method: String,
    final_phase: usize,
    mean_final_loss: f64,
    stddev_final_loss: f64,
    mean_final_neurons: f64,
    seeds: usize,
}

#[derive(Debug, Serialize)]
struct GrowthSummary {
    kind: String,
    seeds: Vec<u64>,
    grow_phases: usize,
    methods: Vec<MethodSummary>,
}

fn write_growth_summary(r: &Resolved, rows: &[AggregateRow]) -> Result<()> {
    let mut methods: Vec<MethodSummary> = Vec::new();
    for row in rows {
        match methods.iter_mut().find(|m| m.method == row.method) {
            Some(m) if row.phase < m.final_phase => {}
            Some(m) => {
                m.final_phase = row.phase;
                m.mean_final_loss = row.mean_loss;
                m.stddev_final_loss = row.stddev_loss;
                m.mean_final_neurons = row.neurons;
                m.seeds = row.seeds;
            }
            None => methods.push(MethodSummary {
                method: row.method.clone(),
                final_phase: row.phase,
                mean_final_loss: row.mean_loss,
                stddev_final_loss: row.stddev_loss,
                mean_final_neurons: row.neurons,
                seeds: row.seeds,
            }),
        }
    }
    let summary = GrowthSummary {
        kind: r.kind.label().to_string(),
        seeds: r.seeds.clone(),
        grow_phases: r.schedule.grow_phases,
        methods,
    };
    let text = crate::jsonfmt::to_string_pretty(&summary)?;
    std::fs::write(r.out.join("summary.json"), text + "\n")?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SeedClSummary {
    seed: u64,
    tasks: usize,
    final_average_accuracy: f64,
    master_neurons: usize,
    master_params: usize,
}

#[derive(Debug, Serialize)]
struct ClSummary {
    kind: String,
    seeds: Vec<u64>,
    tasks: usize,
    mean_average_accuracy: f64,
    mean_master_params: f64,
    per_seed: Vec<SeedClSummary>,
}

fn run_continual_seed(seed: u64, r: &Resolved) -> Result<SeedClSummary> {
    let tasks = gen_cl_tasks_with(r.num_tasks, seed, &r.task_opts)?;
    let mut cfg = r.cl.clone();
    cfg.seed = seed;
    let mut master = MasterNetwork::new(cfg.input_dim, cfg.classes, Activation::Rectifier);
    let path = r.out.join("tasks").join(format!("seed_{seed}.jsonl"));
    let mut writer = LogWriter::create(&path)?;
    let mut final_avg = 0.0;
    for (t, data) in tasks.iter().enumerate() {
        let outcome = grow_for_task(&mut master, data, &cfg)?;
        let evals = evaluate_all_tasks(&master, &tasks)?;
        final_avg = average_accuracy(&evals);
        writer.write(&ClRecord {
            seed,
            task_id: t,
            round: outcome.rounds.len().saturating_sub(1),
            neurons_added_copy: outcome.added_copy,
            neurons_added_new: outcome.added_new,
            master_params: master.count_params(),
            train_acc: outcome.train_acc,
            eval_acc_per_task: evals.iter().map(|e| e.accuracy).collect(),
        })?;
    }
    Ok(SeedClSummary {
        seed,
        tasks: r.num_tasks,
        final_average_accuracy: final_avg,
        master_neurons: master.neurons.len(),
        master_params: master.count_params(),
    })
}

fn write_continual_summary(r: &Resolved, rows: &[SeedClSummary]) -> Result<()> {
    let n = rows.len().max(1) as f64;
    let summary = ClSummary {
        kind: r.kind.label().to_string(),
        seeds: r.seeds.clone(),
        tasks: r.num_tasks,
        mean_average_accuracy: rows.iter().map(|s| s.final_average_accuracy).sum::<f64>() / n,
        mean_master_params: rows.iter().map(|s| s.master_params as f64).sum::<f64>() / n,
        per_seed: rows
            .iter()
            .map(|s| SeedClSummary {
                seed: s.seed,
                tasks: s.tasks,
                final_average_accuracy: s.final_average_accuracy,
                master_neurons: s.master_neurons,
                master_params: s.master_params,
            })
            .collect(),
    };
    let text = crate::jsonfmt::to_string_pretty(&summary)?;
    std::fs::write(r.out.join("summary.json"), text + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data and report

/// Writes to stdout, treating a closed pipe as success so that piping
/// into `head` (or quitting a pager early) exits cleanly instead of
/// panicking the way the print macros do.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let seeds = parse_seed_list(&args.seeds)?;
    std::fs::create_dir_all(&args.out)?;
    match args.kind {
        DataKind::ToyRbf => {
            let points = args.points.unwrap_or(1000);
            for &seed in &seeds {
                let truth = gen_toy_truth_sized(seed, args.truth_neurons);
                let data = gen_toy_dataset(&truth, points, seed)?;
                let path = args.out.join(format!("toy_s{seed}.csv"));
                std::fs::write(&path, data.to_csv()?)?;
                emit(&format!("wrote {}\n", path.display()))?;
            }
        }
        DataKind::Continual => {
            let opts = ClTaskOpts {
                classes: args.classes,
                points_per_task: args.points.unwrap_or_else(|| {
                    ClTaskOpts::default().points_per_task
                }),
                ..ClTaskOpts::default()
            };
            for &seed in &seeds {
                let tasks = gen_cl_tasks_with(args.tasks, seed, &opts)?;
                for (t, data) in tasks.iter().enumerate() {
                    let path = args.out.join(format!("task{t}_s{seed}.csv"));
                    std::fs::write(&path, data.to_csv()?)?;
                    emit(&format!("wrote {}\n", path.display()))?;
                }
            }
        }
    }
    Ok(())
}

fn report(logs: &Path, format: ReportFormat) -> Result<()> {
    let records = read_growth_logs(logs)?;
    let rows = aggregate(&records);
    match format {
        ReportFormat::Csv => emit(&aggregate_csv(&rows))?,
        ReportFormat::Json => emit(&format!("{}\n", aggregate_json(&rows)?))?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("config.json");
        std::fs::write(&path, body).unwrap();
        path
    }

    fn tiny_toy_config(out: &Path) -> String {
        format!(
            r#"{{
  "kind": "toy-rbf",
  "methods": ["firefly", "rand-split", "scratch"],
  "seeds": [0, 1],
  "out_dir": {out:?},
  "growth": {{ "step_one_iters": 10, "m_prime": 2 }},
  "schedule": {{ "grow_phases": 2, "train_iters": 25, "learning_rate": 0.05 }},
  "data": {{ "n_points": 60, "truth_neurons": 4 }},
  "baselines": {{ "k_trials": 2, "finetune_iters": 10 }}
}}"#,
            out = out.display().to_string()
        )
    }

    #[test]
    fn seed_lists_parse_and_reject_duplicates() {
        assert_eq!(parse_seed_list("0, 3,7").unwrap(), vec![0, 3, 7]);
        assert!(parse_seed_list("").is_err());
        assert!(parse_seed_list("1,x").is_err());
        assert!(matches!(parse_seed_list("1,2,1"), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_config_keys_are_named_in_the_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"{ "kind": "toy-rbf", "seeds": [0], "learning_rate": 0.1 }"#,
        );
        let err = load_config(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate"), "unhelpful message: {msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn budget_settings_accept_counts_and_fractions() {
        let count: RunConfig = serde_json::from_str(
            r#"{ "kind": "toy-rbf", "methods": ["firefly"], "seeds": [0],
                 "growth": { "width_budget": 2 } }"#,
        )
        .unwrap();
        let resolved = resolve(&count, Some(PathBuf::from("/tmp/x")), None).unwrap();
        assert!(matches!(resolved.growth.width_budget, WidthBudget::Count(2)));

        let frac: RunConfig = serde_json::from_str(
            r#"{ "kind": "toy-rbf", "methods": ["firefly"], "seeds": [0],
                 "growth": { "width_budget": { "fraction": 0.25 } } }"#,
        )
        .unwrap();
        let resolved = resolve(&frac, Some(PathBuf::from("/tmp/x")), None).unwrap();
        assert!(matches!(
            resolved.growth.width_budget,
            WidthBudget::Fraction(f) if f == 0.25
        ));
    }

    #[test]
    fn methods_must_match_the_kind() {
        let config: RunConfig = serde_json::from_str(
            r#"{ "kind": "width-mlp", "methods": ["scratch"], "seeds": [0] }"#,
        )
        .unwrap();
        let err = resolve(&config, Some(PathBuf::from("/tmp/x")), None).unwrap_err();
        assert!(err.to_string().contains("scratch"));

        let config: RunConfig = serde_json::from_str(
            r#"{ "kind": "continual", "methods": ["firefly"], "seeds": [0] }"#,
        )
        .unwrap();
        assert!(resolve(&config, Some(PathBuf::from("/tmp/x")), None).is_err());
    }

    #[test]
    fn sweep_labels_are_distinct_methods() {
        let config: RunConfig = serde_json::from_str(
            r#"{ "kind": "toy-rbf", "m_prime_sweep": [0, 1, 5], "seeds": [0] }"#,
        )
        .unwrap();
        let resolved = resolve(&config, Some(PathBuf::from("/tmp/x")), None).unwrap();
        let labels: Vec<&str> = resolved.specs.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(
            labels,
            vec!["firefly-mprime-0", "firefly-mprime-1", "firefly-mprime-5"]
        );
    }

    #[test]
    fn toy_run_writes_every_artifact_and_reruns_identically() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let config: RunConfig =
            serde_json::from_str(&tiny_toy_config(&out)).expect("config parses");
        let resolved = resolve(&config, None, None).unwrap();
        run_resolved(&resolved).unwrap();

        let csv = std::fs::read_to_string(out.join("aggregate.csv")).unwrap();
        assert!(csv.starts_with("method,phase,neurons,mean_loss,stddev_loss,seeds\n"));
        // 3 methods x 3 phases.
        assert_eq!(csv.lines().count(), 1 + 9);
        let summary = std::fs::read_to_string(out.join("summary.json")).unwrap();
        assert!(summary.contains("\"rand-split\""));
        for method in ["firefly", "rand-split", "scratch"] {
            for seed in [0, 1] {
                assert!(out
                    .join(format!("logs/{method}/seed_{seed}.jsonl"))
                    .exists());
                assert!(out
                    .join(format!("checkpoints/{method}/seed_{seed}.json"))
                    .exists());
            }
        }

        run_resolved(&resolved).unwrap();
        assert_eq!(
            csv,
            std::fs::read_to_string(out.join("aggregate.csv")).unwrap(),
            "rerun changed the aggregate"
        );
        assert_eq!(
            summary,
            std::fs::read_to_string(out.join("summary.json")).unwrap(),
            "rerun changed the summary"
        );
    }

    #[test]
    fn checkpoints_reload_into_the_logged_size() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let config: RunConfig = serde_json::from_str(&format!(
            r#"{{
  "kind": "toy-rbf", "methods": ["firefly"], "seeds": [3], "out_dir": {out:?},
  "growth": {{ "step_one_iters": 10, "m_prime": 1 }},
  "schedule": {{ "grow_phases": 1, "train_iters": 20, "learning_rate": 0.05 }},
  "data": {{ "n_points": 50, "truth_neurons": 3 }}
}}"#,
            out = out.display().to_string()
        ))
        .unwrap();
        run_resolved(&resolve(&config, None, None).unwrap()).unwrap();
        let net = checkpoint::load(&out.join("checkpoints/firefly/seed_3.json")).unwrap();
        // One grow phase at budget one on a single starting neuron.
        assert_eq!(net.total_neurons(), 2);
    }

    #[test]
    fn continual_run_writes_task_logs_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("cl");
        let config: RunConfig = serde_json::from_str(&format!(
            r#"{{
  "kind": "continual", "seeds": [0], "out_dir": {out:?},
  "data": {{ "tasks": 2, "classes": 3, "points_per_task": 90, "cluster_sd": 0.3 }},
  "growth": {{ "step_one_iters": 15 }},
  "continual": {{ "initial_neurons": 5, "m_prime": 4, "budget_per_round": 2,
                  "mask_iters": 60, "finetune_iters": 120, "max_grow_rounds": 1 }}
}}"#,
            out = out.display().to_string()
        ))
        .unwrap();
        run_resolved(&resolve(&config, None, None).unwrap()).unwrap();

        let log: Vec<ClRecord> =
            crate::logs::read_jsonl(&out.join("tasks/seed_0.jsonl")).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log[1].eval_acc_per_task.len(), 2);
        assert!(log[1].master_params >= log[0].master_params);
        let summary = std::fs::read_to_string(out.join("summary.json")).unwrap();
        assert!(summary.contains("mean_average_accuracy"));
    }

    #[test]
    fn report_formats_logs_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let config: RunConfig = serde_json::from_str(&format!(
            r#"{{
  "kind": "toy-rbf", "methods": ["scratch"], "seeds": [0], "out_dir": {out:?},
  "schedule": {{ "grow_phases": 1, "train_iters": 10, "learning_rate": 0.05 }},
  "data": {{ "n_points": 40, "truth_neurons": 3 }}
}}"#,
            out = out.display().to_string()
        ))
        .unwrap();
        run_resolved(&resolve(&config, None, None).unwrap()).unwrap();
        // The report path itself is exercised through the dispatcher.
        report(&out.join("logs"), ReportFormat::Csv).unwrap();
        report(&out.join("logs"), ReportFormat::Json).unwrap();
    }

    #[test]
    fn gen_data_writes_csv_headers() {
        let dir = tempfile::tempdir().unwrap();
        let args = GenDataArgs {
            kind: DataKind::ToyRbf,
            out: dir.path().to_path_buf(),
            seeds: "0,1".to_string(),
            points: Some(30),
            truth_neurons: 3,
            tasks: 2,
            classes: 3,
        };
        gen_data(&args).unwrap();
        let text = std::fs::read_to_string(dir.path().join("toy_s0.csv")).unwrap();
        assert!(text.starts_with("x,y\n"));
        assert_eq!(text.lines().count(), 31);

        let args = GenDataArgs {
            kind: DataKind::Continual,
            out: dir.path().to_path_buf(),
            seeds: "0".to_string(),
            points: Some(40),
            truth_neurons: 3,
            tasks: 2,
            classes: 4,
        };
        gen_data(&args).unwrap();
        let text = std::fs::read_to_string(dir.path().join("task1_s0.csv")).unwrap();
        assert!(text.starts_with("x1,x2,label\n"));
    }

    #[test]
    fn usage_errors_exit_two_and_help_exits_zero() {
        assert_eq!(main_from_args(["firefly", "--help"]), 0);
        assert_eq!(main_from_args(["firefly", "definitely-not-a-command"]), 2);
        assert_eq!(main_from_args(["firefly", "run"]), 2);
    }

    #[test]
    fn missing_config_file_exits_two() {
        assert_eq!(
            main_from_args(["firefly", "run", "--config", "/nonexistent/cfg.json"]),
            2
        );
    }
}
