//! Experiment driver: JSON configs, sweep cells and versioned CSV output.
//!
//! Every CSV starts with a `# schema=srlab.<name>.v<n>` line followed by the
//! column header. Cells run on a rayon pool of `threads` workers and are
//! written in the order they were enumerated, so output is byte-identical
//! across thread counts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fb::{
    fb_td_train, realization_error, FbRepresentation, GapContext, GapReport, TrainConfig,
    GAP_CSV_HEADER,
};
use crate::fb::{fb_from_svd, fb_q, reward_embedding};
use crate::linalg::singular_values_only;
use crate::mdp::{build_gridworld, random_mdp, repeat_operator, GridLayout, MdpClass, Policy, TabularMdp};
use crate::spectral::{
    audit_bounds, singular_values, srank_upper_bound, BoundAudit, SpectrumReport,
};
use crate::successor::{
    optimal_q, q_from_sr, repeat_value_error, sr_closed_form, RewardTask,
    VALUE_ITERATION_CAP,
};

pub const SPECTRUM_SCHEMA: &str = "srlab.spectrum_sweep.v1";
pub const ABLATION_CELLS_SCHEMA: &str = "srlab.ablation_cells.v1";
pub const ABLATION_SCHEMA: &str = "srlab.ablation.v1";
pub const AUDIT_SCHEMA: &str = "srlab.bounds_audit.v1";
pub const GAP_AUDIT_SCHEMA: &str = "srlab.gap_audit.v1";
pub const GAP_COVERAGE_SCHEMA: &str = "srlab.gap_coverage.v1";
pub const HEATMAP_SCHEMA: &str = "srlab.heatmap.v1";
pub const LOSS_TRACE_SCHEMA: &str = "srlab.loss_trace.v1";
pub const BELLMAN_TRACE_SCHEMA: &str = "srlab.bellman_trace.v1";
pub const TRAIN_SUMMARY_SCHEMA: &str = "srlab.train_summary.v1";

/// Number of leading singular values reported per row.
pub const SIGMA_HEAD: usize = 10;
const VI_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    /// Layout file, relative to the config file.
    #[serde(default)]
    pub layout: Option<PathBuf>,
    /// One of `fourrooms13`, `maze9`, `maze13`, `corridor_turn`.
    #[serde(default)]
    pub builtin: Option<String>,
    #[serde(default)]
    pub random: Option<RandomSpec>,
    #[serde(default)]
    pub slip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub class: MdpClass,
    /// Fixed instance seed; when absent each sweep seed draws its own instance.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySpec {
    #[default]
    Uniform,
    /// Greedy policy of the task's optimal Q-function.
    GreedyOfTask,
    /// CSV with columns `state_index,action_index,probability`.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSpec {
    /// Reward 1 on every action at grid cell `[row, col]`.
    Goal([usize; 2]),
    GoalState(usize),
    /// CSV with columns `state_index,action_index,reward`.
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSpec {
    #[serde(default = "all_classes")]
    pub classes: Vec<MdpClass>,
    /// `[n_states, n_actions]` per instance; when absent the shape cycles
    /// with the seed.
    #[serde(default)]
    pub shapes: Option<Vec<[usize; 2]>>,
    #[serde(default = "one")]
    pub d: usize,
    #[serde(default)]
    pub gap: Option<GapAuditSpec>,
}

impl Default for AuditSpec {
    fn default() -> Self {
        AuditSpec {
            classes: all_classes(),
            shapes: None,
            d: 1,
            gap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapAuditSpec {
    #[serde(default = "six")]
    pub max_states: usize,
    #[serde(default = "three")]
    pub max_actions: usize,
    #[serde(default = "fifty")]
    pub n_seeds: u64,
    #[serde(default = "gap_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "gap_gamma")]
    pub gamma: f64,
}

impl Default for GapAuditSpec {
    fn default() -> Self {
        GapAuditSpec {
            max_states: 6,
            max_actions: 3,
            n_seeds: 50,
            ks: gap_ks(),
            gamma: gap_gamma(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapSource {
    SrRow,
    QValues,
}

impl HeatmapSource {
    pub fn as_str(self) -> &'static str {
        match self {
            HeatmapSource::SrRow => "sr_row",
            HeatmapSource::QValues => "q_values",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSpec {
    /// State-action index.
    Pair(usize),
    /// Grid cell `[row, col]` and action.
    Cell { cell: [usize; 2], action: usize },
    /// The task's goal cell, action 0.
    Goal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapSpec {
    pub source: HeatmapSource,
    #[serde(default = "goal_anchor")]
    pub anchor: AnchorSpec,
    /// Trained artifact whose `F_z·Bᵀ` replaces the exact SR.
    #[serde(default)]
    pub fb_artifact: Option<PathBuf>,
    #[serde(default)]
    pub z_index: usize,
}

fn all_classes() -> Vec<MdpClass> {
    MdpClass::ALL.to_vec()
}
fn one() -> usize {
    1
}
fn three() -> usize {
    3
}
fn six() -> usize {
    6
}
fn fifty() -> u64 {
    50
}
fn gap_ks() -> Vec<usize> {
    vec![1, 2]
}
fn gap_gamma() -> f64 {
    0.9
}
fn goal_anchor() -> AnchorSpec {
    AnchorSpec::Goal
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub environment: Option<EnvironmentSpec>,
    #[serde(default)]
    pub policy: PolicySpec,
    pub gammas: Vec<f64>,
    pub ks: Vec<usize>,
    #[serde(default)]
    pub ds: Vec<usize>,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Base for `d`, `gamma`, `k` and `seed`, which each cell overrides.
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub audit: AuditSpec,
    #[serde(default)]
    pub heatmap: Option<HeatmapSpec>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn as_config_error(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty() || self.ks.is_empty() || self.seeds.is_empty() {
            return Err(config_err("gammas, ks and seeds must be non-empty"));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
            return Err(config_err(format!("gamma {g} is outside (0, 1)")));
        }
        if self.ks.contains(&0) {
            return Err(config_err("every k must be at least 1"));
        }
        if self.ds.contains(&0) {
            return Err(config_err("every d must be at least 1"));
        }
        if let Some(env) = &self.environment {
            let given = [env.layout.is_some(), env.builtin.is_some(), env.random.is_some()];
            if given.iter().filter(|x| **x).count() != 1 {
                return Err(config_err(
                    "environment needs exactly one of layout, builtin, random",
                ));
            }
            if !(0.0..=1.0).contains(&env.slip) {
                return Err(config_err(format!("slip {} outside [0, 1]", env.slip)));
            }
        }
        if self.audit.d == 0 || self.audit.classes.is_empty() {
            return Err(config_err("audit needs d ≥ 1 and at least one class"));
        }
        if let Some(shapes) = &self.audit.shapes {
            if shapes.is_empty() || shapes.iter().any(|s| s[0] == 0 || s[1] == 0) {
                return Err(config_err("audit shapes must be non-empty and positive"));
            }
        }
        if let Some(gap) = &self.audit.gap {
            if gap.max_states == 0 || gap.max_actions == 0 || gap.ks.is_empty() || gap.ks.contains(&0) {
                return Err(config_err("gap audit sizes and ks must be positive"));
            }
            if !(gap.gamma > 0.0 && gap.gamma < 1.0) {
                return Err(config_err(format!("gap gamma {} outside (0, 1)", gap.gamma)));
            }
        }
        self.training.validate().map_err(as_config_error)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .as_deref()
            .map(|p| self.resolve(p))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    /// Builds the environment; random specs without a fixed seed use `seed`.
    pub fn environment(&self, seed: u64) -> Result<Environment> {
        let spec = self
            .environment
            .as_ref()
            .ok_or_else(|| config_err("missing environment"))?;
        let gamma = self.gammas[0];
        let (mdp, layout) = if let Some(random) = &spec.random {
            let s = random.seed.unwrap_or(seed);
            let mdp = random_mdp(random.n_states, random.n_actions, s, random.class, gamma)
                .map_err(as_config_error)?;
            (mdp, None)
        } else {
            let layout = match (&spec.layout, &spec.builtin) {
                (Some(path), _) => GridLayout::from_file(self.resolve(path)),
                (_, Some(name)) => GridLayout::builtin(name),
                _ => unreachable!("validated"),
            }
            .map_err(as_config_error)?;
            let mdp = build_gridworld(&layout, gamma, spec.slip).map_err(as_config_error)?;
            (mdp, Some(layout))
        };
        Ok(Environment { mdp, layout })
    }

    pub fn has_seeded_environment(&self) -> bool {
        matches!(&self.environment, Some(EnvironmentSpec { random: Some(r), .. }) if r.seed.is_none())
    }

    pub fn task(&self, env: &Environment) -> Result<Option<RewardTask>> {
        let (ns, na) = (env.mdp.n_states(), env.mdp.n_actions());
        let task = match &self.task {
            None => return Ok(None),
            Some(TaskSpec::GoalState(s)) => RewardTask::goal(*s, ns, na),
            Some(TaskSpec::Goal([r, c])) => {
                let layout = env
                    .layout
                    .as_ref()
                    .ok_or_else(|| config_err("goal cells need a gridworld environment"))?;
                let s = layout
                    .state_at(*r, *c)
                    .ok_or_else(|| config_err(format!("goal ({r}, {c}) is not a free cell")))?;
                RewardTask::goal(s, ns, na)
            }
            Some(TaskSpec::Csv(path)) => RewardTask::from_csv(self.resolve(path), ns, na),
        };
        task.map(Some).map_err(as_config_error)
    }

    /// The configured policy on the k-repeat MDP at discount `gamma`.
    pub fn policy(&self, env: &Environment, task: Option<&RewardTask>, gamma: f64) -> Result<Policy> {
        let (ns, na) = (env.mdp.n_states(), env.mdp.n_actions());
        match &self.policy {
            PolicySpec::Uniform => Ok(Policy::uniform(ns, na)),
            PolicySpec::GreedyOfTask => {
                let task = task.ok_or_else(|| config_err("greedy_of_task needs a task"))?;
                let (_, policy) =
                    optimal_q(&env.mdp.with_gamma(gamma)?, task, VI_TOL, VALUE_ITERATION_CAP)?;
                Ok(policy)
            }
            PolicySpec::File(path) => read_policy_csv(&self.resolve(path), ns, na).map_err(as_config_error),
        }
    }

    fn seeds_or_none(&self) -> Vec<Option<u64>> {
        if self.has_seeded_environment() {
            self.seeds.iter().copied().map(Some).collect()
        } else {
            vec![None]
        }
    }
}

fn read_policy_csv(path: &Path, ns: usize, na: usize) -> Result<Policy> {
    let mut probs = nalgebra::DMatrix::zeros(ns, na);
    let mut reader = csv::Reader::from_path(path)?;
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| record.get(i).map(str::trim).unwrap_or("");
        let s: usize = field(0)
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad state index `{}`", field(0))))?;
        let a: usize = field(1)
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad action index `{}`", field(1))))?;
        let p: f64 = field(2)
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad probability `{}`", field(2))))?;
        if s >= ns || a >= na {
            return Err(Error::InvalidArgument(format!("pair ({s}, {a}) out of range")));
        }
        probs[(s, a)] = p;
    }
    Policy::new(probs)
}

/// A resolved environment; `layout` is set for gridworlds.
#[derive(Debug, Clone)]
pub struct Environment {
    pub mdp: TabularMdp,
    pub layout: Option<GridLayout>,
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

fn run_cells<C, T, F>(threads: usize, cells: &[C], f: F) -> Result<Vec<T>>
where
    C: Sync,
    T: Send,
    F: Fn(&C) -> T + Sync + Send,
{
    Ok(thread_pool(threads)?.install(|| cells.par_iter().map(f).collect()))
}

/// CSV file whose first line is the schema tag.
pub struct SchemaWriter {
    inner: csv::Writer<BufWriter<File>>,
    path: PathBuf,
}

impl SchemaWriter {
    pub fn create(path: impl AsRef<Path>, schema: &str, header: &[&str]) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut buf = BufWriter::new(file);
        writeln!(buf, "# schema={schema}").map_err(|e| Error::io(&path, e))?;
        let mut inner = csv::Writer::from_writer(buf);
        inner.write_record(header)?;
        Ok(SchemaWriter { inner, path })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.inner.write_record(fields)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.path)
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn opt_int<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// One sweep cell. Fields not produced by a command are left empty in CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub gamma: f64,
    pub d: Option<usize>,
    pub seed: Option<u64>,
    pub status: String,
    pub beta: usize,
    pub srank: Option<f64>,
    pub nse: Option<f64>,
    pub nse_degenerate: bool,
    pub sigma_head: Vec<f64>,
    pub eps_real: Option<f64>,
    pub eps_repeat: Option<f64>,
    pub bellman_error: Option<f64>,
    pub measured_gap: Option<f64>,
    /// `1/(1 − γσ_1(P̃))`.
    pub sigma1_bound: Option<f64>,
    /// Stable-rank upper bound with cardinality `|S·A|`; empty when its
    /// assumptions fail.
    pub srank_bound: Option<f64>,
}

pub fn sweep_header() -> Vec<String> {
    let mut h: Vec<String> = ["k", "gamma", "d", "seed", "status", "beta", "srank", "nse", "nse_degenerate"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=SIGMA_HEAD).map(|i| format!("sigma_{i}")));
    h.extend(
        ["eps_real", "eps_repeat", "bellman_error", "measured_gap", "sigma1_bound", "srank_bound"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

impl SweepRow {
    fn empty(k: usize, gamma: f64, d: Option<usize>, seed: Option<u64>) -> Self {
        SweepRow {
            k,
            gamma,
            d,
            seed,
            status: "ok".into(),
            beta: 0,
            srank: None,
            nse: None,
            nse_degenerate: false,
            sigma_head: Vec::new(),
            eps_real: None,
            eps_repeat: None,
            bellman_error: None,
            measured_gap: None,
            sigma1_bound: None,
            srank_bound: None,
        }
    }

    fn set_spectrum(&mut self, report: &SpectrumReport) {
        self.beta = report.beta;
        self.srank = report.stable_rank;
        self.nse = report.nse;
        self.nse_degenerate = report.nse_degenerate;
        self.sigma_head = report.head(SIGMA_HEAD).to_vec();
    }

    pub fn csv_fields(&self) -> Vec<String> {
        let mut f = vec![
            self.k.to_string(),
            self.gamma.to_string(),
            opt_int(self.d),
            opt_int(self.seed),
            self.status.clone(),
            self.beta.to_string(),
            opt(self.srank),
            opt(self.nse),
            self.nse_degenerate.to_string(),
        ];
        f.extend((0..SIGMA_HEAD).map(|i| opt(self.sigma_head.get(i).copied())));
        f.extend([
            opt(self.eps_real),
            opt(self.eps_repeat),
            opt(self.bellman_error),
            opt(self.measured_gap),
            opt(self.sigma1_bound),
            opt(self.srank_bound),
        ]);
        f
    }
}

fn write_sweep(path: &Path, schema: &str, rows: &[SweepRow]) -> Result<PathBuf> {
    let header = sweep_header();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut w = SchemaWriter::create(path, schema, &header)?;
    for r in rows {
        w.row(r.csv_fields())?;
    }
    w.finish()
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub path: PathBuf,
}

fn spectrum_cell(
    cfg: &ExperimentConfig,
    k: usize,
    gamma: f64,
    seed: Option<u64>,
) -> Result<SweepRow> {
    let env = cfg.environment(seed.unwrap_or(0))?;
    let task = cfg.task(&env)?;
    let policy = cfg.policy(&env, task.as_ref(), gamma)?;
    let op = repeat_operator(&env.mdp, &policy, k)?;
    let sr = sr_closed_form(&op, gamma)?;
    let mut row = SweepRow::empty(k, gamma, None, seed);
    row.set_spectrum(&singular_values(&sr.m)?);
    let sp = singular_values_only(&op.p_pi)?;
    let s1 = sp[0];
    if gamma * s1 < 1.0 {
        row.sigma1_bound = Some(1.0 / (1.0 - gamma * s1));
    }
    let rho = sp.get(1).copied().unwrap_or(0.0).powf(1.0 / k as f64);
    row.srank_bound = srank_upper_bound(s1, rho, gamma, k, op.n_pairs()).ok();
    if let Some(task) = &task {
        row.eps_repeat = Some(repeat_value_error(&env.mdp.with_gamma(gamma)?, task, k, VI_TOL)?);
    }
    Ok(row)
}

/// Exact k-step SR spectra over `(k, γ)`, k-major, written to
/// `spectrum_sweep.csv`.
pub fn cmd_spectrum_sweep(cfg: &ExperimentConfig, threads: usize) -> Result<SweepOutput> {
    let mut cells = Vec::new();
    for &k in &cfg.ks {
        for &gamma in &cfg.gammas {
            for seed in cfg.seeds_or_none() {
                cells.push((k, gamma, seed));
            }
        }
    }
    let rows = run_cells(threads, &cells, |&(k, gamma, seed)| spectrum_cell(cfg, k, gamma, seed))?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let path = write_sweep(&cfg.output_dir().join("spectrum_sweep.csv"), SPECTRUM_SCHEMA, &rows)?;
    Ok(SweepOutput { rows, path })
}

fn training_config(cfg: &ExperimentConfig, k: usize, d: usize, gamma: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        k,
        d,
        gamma,
        seed,
        ..cfg.training.clone()
    }
}

fn ablation_cell(cfg: &ExperimentConfig, k: usize, d: usize, gamma: f64, seed: u64) -> Result<SweepRow> {
    let env = cfg.environment(seed)?;
    let task = cfg.task(&env)?;
    let mut row = SweepRow::empty(k, gamma, Some(d), Some(seed));
    let outcome = match fb_td_train(&env.mdp, &training_config(cfg, k, d, gamma, seed)) {
        Ok(o) => o,
        Err(Error::Diverged { step, .. }) => {
            row.status = format!("diverged@{step}");
            return Ok(row);
        }
        Err(e) => return Err(e),
    };
    let reference = outcome.reference_sr(&env.mdp)?;
    row.set_spectrum(&singular_values(&outcome.fb.approx(0)?)?);
    row.eps_real = Some(realization_error(&outcome.fb, 0, &reference)?);
    row.bellman_error = outcome.traces.final_bellman();
    if let Some(task) = &task {
        let report = GapContext::new(&env.mdp, task, k, gamma)?.report(&outcome.fb, 0)?;
        row.eps_repeat = Some(report.eps_repeat);
        row.measured_gap = Some(report.measured_gap);
    }
    Ok(row)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationAggregate {
    pub k: usize,
    pub d: usize,
    pub gamma: f64,
    pub n_ok: usize,
    pub n_diverged: usize,
    pub eps_real: (f64, f64),
    pub bellman_error: (f64, f64),
    pub measured_gap: Option<(f64, f64)>,
}

/// Mean and sample standard deviation; sd is 0 for a single value.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct AblationOutput {
    pub cells: Vec<SweepRow>,
    pub aggregates: Vec<AblationAggregate>,
    pub cells_path: PathBuf,
    pub path: PathBuf,
}

/// Trains one FB per `(k, d, γ, seed)` and aggregates over seeds. Diverged
/// cells are recorded and skipped in the aggregates.
pub fn cmd_ablation(cfg: &ExperimentConfig, threads: usize) -> Result<AblationOutput> {
    if cfg.ds.is_empty() {
        return Err(config_err("ablation needs a non-empty ds list"));
    }
    let mut cells = Vec::new();
    for &k in &cfg.ks {
        for &d in &cfg.ds {
            for &gamma in &cfg.gammas {
                for &seed in &cfg.seeds {
                    cells.push((k, d, gamma, seed));
                }
            }
        }
    }
    let rows = run_cells(threads, &cells, |&(k, d, gamma, seed)| ablation_cell(cfg, k, d, gamma, seed))?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let out_dir = cfg.output_dir();
    let cells_path = write_sweep(&out_dir.join("ablation_cells.csv"), ABLATION_CELLS_SCHEMA, &rows)?;

    let mut aggregates = Vec::new();
    for group in rows.chunk_by(|a, b| (a.k, a.d, a.gamma) == (b.k, b.d, b.gamma)) {
        let ok: Vec<&SweepRow> = group.iter().filter(|r| r.status == "ok").collect();
        let collect = |f: fn(&SweepRow) -> Option<f64>| ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
        let gaps = collect(|r| r.measured_gap);
        aggregates.push(AblationAggregate {
            k: group[0].k,
            d: group[0].d.unwrap_or(0),
            gamma: group[0].gamma,
            n_ok: ok.len(),
            n_diverged: group.len() - ok.len(),
            eps_real: mean_sd(&collect(|r| r.eps_real)),
            bellman_error: mean_sd(&collect(|r| r.bellman_error)),
            measured_gap: (!gaps.is_empty()).then(|| mean_sd(&gaps)),
        });
    }
    let mut w = SchemaWriter::create(
        out_dir.join("ablation.csv"),
        ABLATION_SCHEMA,
        &[
            "k",
            "d",
            "gamma",
            "n_ok",
            "n_diverged",
            "eps_real_mean",
            "eps_real_sd",
            "bellman_error_mean",
            "bellman_error_sd",
            "measured_gap_mean",
            "measured_gap_sd",
        ],
    )?;
    for a in &aggregates {
        w.row([
            a.k.to_string(),
            a.d.to_string(),
            a.gamma.to_string(),
            a.n_ok.to_string(),
            a.n_diverged.to_string(),
            a.eps_real.0.to_string(),
            a.eps_real.1.to_string(),
            a.bellman_error.0.to_string(),
            a.bellman_error.1.to_string(),
            opt(a.measured_gap.map(|g| g.0)),
            opt(a.measured_gap.map(|g| g.1)),
        ])?;
    }
    let path = w.finish()?;
    Ok(AblationOutput {
        cells: rows,
        aggregates,
        cells_path,
        path,
    })
}

/// Instance shape used when an audit does not list shapes.
pub fn audit_shape(seed: u64) -> (usize, usize) {
    (2 + (seed % 7) as usize, 1 + (seed % 3) as usize)
}

#[derive(Debug, Clone)]
pub struct AuditCell {
    pub class: MdpClass,
    pub seed: u64,
    pub n_states: usize,
    pub n_actions: usize,
    pub k: usize,
    pub gamma: f64,
    pub audit: BoundAudit,
}

#[derive(Debug, Clone)]
pub struct GapAuditRow {
    pub n_states: usize,
    pub n_actions: usize,
    pub seed: u64,
    pub report: GapReport,
}

#[derive(Debug, Clone, Default)]
pub struct GapAudit {
    pub rows: Vec<GapAuditRow>,
    /// Reports whose certificate inequality failed.
    pub certificate_violations: usize,
}

impl GapAudit {
    pub fn approx_bound_coverage(&self) -> f64 {
        self.rate(GapReport::approx_bound_covers)
    }

    pub fn decomposed_bound_coverage(&self) -> f64 {
        self.rate(GapReport::decomposed_bound_covers)
    }

    fn rate(&self, f: fn(&GapReport) -> bool) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().filter(|r| f(&r.report)).count() as f64 / self.rows.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct AuditOutput {
    pub cells: Vec<AuditCell>,
    pub gap: Option<GapAudit>,
    pub path: PathBuf,
    pub findings_path: PathBuf,
}

impl AuditOutput {
    pub fn violations(&self) -> usize {
        self.cells.iter().map(|c| c.audit.violations().count()).sum::<usize>()
            + self.gap.as_ref().map_or(0, |g| g.certificate_violations)
    }

    pub fn findings(&self) -> usize {
        self.cells.iter().map(|c| c.audit.findings().count()).sum()
    }
}

/// Seeded reward vector in `[0, 1)` for gap audits.
pub fn random_task(n_pairs: usize, seed: u64) -> RewardTask {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a5c);
    let r = DVector::from_fn(n_pairs, |_, _| rng.gen::<f64>());
    RewardTask {
        r,
        name: format!("random_{seed}"),
    }
}

/// Gap reports of SVD truncations (uniform-policy SR of the repeat MDP) on
/// every small general instance and every rank.
pub fn gap_certificate_audit(spec: &GapAuditSpec, threads: usize) -> Result<GapAudit> {
    let mut cells = Vec::new();
    for ns in 1..=spec.max_states {
        for na in 1..=spec.max_actions {
            for seed in 0..spec.n_seeds {
                for &k in &spec.ks {
                    cells.push((ns, na, seed, k));
                }
            }
        }
    }
    let gamma = spec.gamma;
    let results = run_cells(threads, &cells, |&(ns, na, seed, k)| -> Result<(Vec<GapAuditRow>, usize)> {
        let mdp = random_mdp(ns, na, seed, MdpClass::General, gamma)?;
        let task = random_task(ns * na, seed);
        let ctx = GapContext::new(&mdp, &task, k, gamma)?;
        let sr = sr_closed_form(&repeat_operator(&mdp, &Policy::uniform(ns, na), k)?, gamma)?;
        let mut rows = Vec::new();
        let mut violations = 0;
        for d in 1..=ns * na {
            let fb = fb_from_svd(&sr, d, na)?;
            match ctx.report(&fb, 0) {
                Ok(report) => rows.push(GapAuditRow {
                    n_states: ns,
                    n_actions: na,
                    seed,
                    report,
                }),
                Err(Error::Certificate { .. }) => violations += 1,
                Err(e) => return Err(e),
            }
        }
        Ok((rows, violations))
    })?;
    let mut audit = GapAudit::default();
    for r in results {
        let (rows, v) = r?;
        audit.rows.extend(rows);
        audit.certificate_violations += v;
    }
    Ok(audit)
}

/// Bound audits over classes × seeds × (k, γ), plus the optional gap
/// certificate audit. Writes `bounds_audit.csv`, `bounds_findings.csv` and,
/// with a gap spec, `gap_audit.csv` and `gap_coverage.csv`.
pub fn cmd_bounds_audit(cfg: &ExperimentConfig, threads: usize) -> Result<AuditOutput> {
    let mut jobs = Vec::new();
    for &class in &cfg.audit.classes {
        for &seed in &cfg.seeds {
            let shapes = match &cfg.audit.shapes {
                Some(s) => s.iter().map(|s| (s[0], s[1])).collect(),
                None => vec![audit_shape(seed)],
            };
            for (ns, na) in shapes {
                for &k in &cfg.ks {
                    for &gamma in &cfg.gammas {
                        jobs.push((class, seed, ns, na, k, gamma));
                    }
                }
            }
        }
    }
    let d = cfg.audit.d;
    let cells = run_cells(threads, &jobs, |&(class, seed, ns, na, k, gamma)| -> Result<AuditCell> {
        let mdp = random_mdp(ns, na, seed, class, gamma)?;
        let audit = audit_bounds(&mdp, &Policy::uniform(ns, na), gamma, k, d.min(ns * na))?;
        Ok(AuditCell {
            class,
            seed,
            n_states: ns,
            n_actions: na,
            k,
            gamma,
            audit,
        })
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let out_dir = cfg.output_dir();
    let header = [
        "class", "seed", "n_states", "n_actions", "k", "gamma", "bound", "i", "lhs", "rhs", "slack",
        "satisfied", "regime", "vacuous",
    ];
    let mut all = SchemaWriter::create(out_dir.join("bounds_audit.csv"), AUDIT_SCHEMA, &header)?;
    let mut findings = SchemaWriter::create(out_dir.join("bounds_findings.csv"), AUDIT_SCHEMA, &header)?;
    for cell in &cells {
        let prefix = [
            cell.class.as_str().to_string(),
            cell.seed.to_string(),
            cell.n_states.to_string(),
            cell.n_actions.to_string(),
            cell.k.to_string(),
            cell.gamma.to_string(),
        ];
        for r in &cell.audit.records {
            let fields: Vec<String> = prefix.iter().cloned().chain(BoundAudit::csv_fields(r)).collect();
            if !r.satisfied {
                findings.row(&fields)?;
            }
            all.row(&fields)?;
        }
    }
    let path = all.finish()?;
    let findings_path = findings.finish()?;

    let gap = match &cfg.audit.gap {
        Some(spec) => {
            let gap = gap_certificate_audit(spec, threads)?;
            write_gap_audit(&out_dir, &gap)?;
            Some(gap)
        }
        None => None,
    };
    Ok(AuditOutput {
        cells,
        gap,
        path,
        findings_path,
    })
}

fn write_gap_audit(out_dir: &Path, gap: &GapAudit) -> Result<()> {
    let mut header = vec!["n_states", "n_actions", "seed"];
    header.extend(GAP_CSV_HEADER);
    let mut w = SchemaWriter::create(out_dir.join("gap_audit.csv"), GAP_AUDIT_SCHEMA, &header)?;
    for row in &gap.rows {
        let mut fields = vec![row.n_states.to_string(), row.n_actions.to_string(), row.seed.to_string()];
        fields.extend(row.report.csv_fields());
        w.row(fields)?;
    }
    w.finish()?;
    let mut c = SchemaWriter::create(
        out_dir.join("gap_coverage.csv"),
        GAP_COVERAGE_SCHEMA,
        &["reports", "certificate_violations", "approx_bound_coverage", "decomposed_bound_coverage"],
    )?;
    c.row([
        gap.rows.len().to_string(),
        gap.certificate_violations.to_string(),
        gap.approx_bound_coverage().to_string(),
        gap.decomposed_bound_coverage().to_string(),
    ])?;
    c.finish()?;
    Ok(())
}

/// Interior of a gridworld (border walls dropped), row-major, `NaN` on walls.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub source: HeatmapSource,
    pub grid: Vec<Vec<f64>>,
    pub path: PathBuf,
}

impl Heatmap {
    pub fn free_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.grid.iter().flatten().copied().filter(|v| !v.is_nan())
    }

    /// Free cells whose value exceeds `fraction` of the maximum.
    pub fn cells_above(&self, fraction: f64) -> usize {
        let max = self.free_values().fold(f64::NEG_INFINITY, f64::max);
        self.free_values().filter(|v| *v > fraction * max).count()
    }
}

fn anchor_pair(spec: &AnchorSpec, env: &Environment, layout: &GridLayout, cfg: &ExperimentConfig) -> Result<usize> {
    let na = env.mdp.n_actions();
    let n = env.mdp.n_pairs();
    let cell_pair = |r: usize, c: usize, a: usize| -> Result<usize> {
        if a >= na {
            return Err(config_err(format!("action {a} out of range")));
        }
        layout
            .state_at(r, c)
            .map(|s| s * na + a)
            .ok_or_else(|| config_err(format!("anchor ({r}, {c}) is not a free cell")))
    };
    match spec {
        AnchorSpec::Pair(i) if *i < n => Ok(*i),
        AnchorSpec::Pair(i) => Err(config_err(format!("anchor pair {i} out of range ({n} pairs)"))),
        AnchorSpec::Cell { cell, action } => cell_pair(cell[0], cell[1], *action),
        AnchorSpec::Goal => match &cfg.task {
            Some(TaskSpec::Goal([r, c])) => cell_pair(*r, *c, 0),
            Some(TaskSpec::GoalState(s)) if *s < env.mdp.n_states() => Ok(s * na),
            _ => Err(config_err("goal anchor needs a goal task")),
        },
    }
}

/// SR row or action-averaged Q-values on the grid, for `ks[0]`, `gammas[0]`.
/// Written to `heatmap_<source>.csv`.
pub fn cmd_heatmap(cfg: &ExperimentConfig) -> Result<Heatmap> {
    let spec = cfg
        .heatmap
        .as_ref()
        .ok_or_else(|| config_err("missing heatmap section"))?;
    let env = cfg.environment(cfg.seeds[0])?;
    let layout = env
        .layout
        .clone()
        .ok_or_else(|| config_err("heatmaps need a gridworld environment"))?;
    let (k, gamma) = (cfg.ks[0], cfg.gammas[0]);
    let (ns, na) = (env.mdp.n_states(), env.mdp.n_actions());
    let task = cfg.task(&env)?;

    let fb = match &spec.fb_artifact {
        Some(path) => {
            let fb = FbRepresentation::load_json(cfg.resolve(path)).map_err(as_config_error)?;
            if fb.n_pairs() != ns * na || fb.n_actions != na {
                return Err(config_err("FB artifact does not match the environment"));
            }
            fb.forward(spec.z_index).map_err(as_config_error)?;
            Some(fb)
        }
        None => None,
    };
    let sr_matrix = |fb: &Option<FbRepresentation>| -> Result<nalgebra::DMatrix<f64>> {
        match fb {
            Some(fb) => fb.approx(spec.z_index),
            None => {
                let policy = cfg.policy(&env, task.as_ref(), gamma)?;
                Ok(sr_closed_form(&repeat_operator(&env.mdp, &policy, k)?, gamma)?.m)
            }
        }
    };

    let per_state: Vec<f64> = match spec.source {
        HeatmapSource::SrRow => {
            let pair = anchor_pair(&spec.anchor, &env, &layout, cfg)?;
            let m = sr_matrix(&fb)?;
            (0..ns)
                .map(|s| (0..na).map(|a| m[(pair, s * na + a)]).sum())
                .collect()
        }
        HeatmapSource::QValues => {
            let task = task.clone().unwrap_or_else(|| RewardTask::zero(ns * na));
            let q = match &fb {
                Some(fb) => fb_q(fb, spec.z_index, &reward_embedding(fb, &task)?)?,
                None => {
                    let policy = cfg.policy(&env, Some(&task), gamma)?;
                    let sr = sr_closed_form(&repeat_operator(&env.mdp, &policy, k)?, gamma)?;
                    q_from_sr(&sr, &task)?
                }
            };
            (0..ns)
                .map(|s| (0..na).map(|a| q[s * na + a]).sum::<f64>() / na as f64)
                .collect()
        }
    };

    let grid: Vec<Vec<f64>> = (1..layout.height() - 1)
        .map(|r| {
            (1..layout.width() - 1)
                .map(|c| layout.state_at(r, c).map_or(f64::NAN, |s| per_state[s]))
                .collect()
        })
        .collect();
    let width = layout.width() - 2;
    let header: Vec<String> = (0..width).map(|c| format!("c{c}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut w = SchemaWriter::create(
        cfg.output_dir().join(format!("heatmap_{}.csv", spec.source.as_str())),
        HEATMAP_SCHEMA,
        &header,
    )?;
    for row in &grid {
        w.row(row.iter().map(|v| v.to_string()))?;
    }
    Ok(Heatmap {
        source: spec.source,
        grid,
        path: w.finish()?,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub artifact: PathBuf,
    pub eps_real: f64,
    pub initial_bellman: f64,
    pub final_bellman: f64,
    pub final_loss: f64,
}

fn single<T: Copy>(xs: &[T], name: &str) -> Result<T> {
    match xs {
        [x] => Ok(*x),
        _ => Err(config_err(format!("train-fb needs exactly one value in {name}"))),
    }
}

fn write_traces(out_dir: &Path, traces: &crate::fb::TrainTraces) -> Result<()> {
    let mut w = SchemaWriter::create(out_dir.join("loss_trace.csv"), LOSS_TRACE_SCHEMA, &["step", "loss"])?;
    for (i, l) in traces.loss.iter().enumerate() {
        w.row([i.to_string(), l.to_string()])?;
    }
    w.finish()?;
    let mut w = SchemaWriter::create(
        out_dir.join("bellman_trace.csv"),
        BELLMAN_TRACE_SCHEMA,
        &["step", "bellman_error"],
    )?;
    for (step, e) in &traces.bellman {
        w.row([step.to_string(), e.to_string()])?;
    }
    w.finish()?;
    Ok(())
}

/// Trains a single cell and writes `fb_artifact.json`, the traces and
/// `train_summary.csv`. On divergence the partial traces are written before
/// the error is returned.
pub fn cmd_train_fb(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    let k = single(&cfg.ks, "ks")?;
    let gamma = single(&cfg.gammas, "gammas")?;
    let seed = single(&cfg.seeds, "seeds")?;
    let d = if cfg.ds.is_empty() { cfg.training.d } else { single(&cfg.ds, "ds")? };
    let env = cfg.environment(seed)?;
    let out_dir = cfg.output_dir();
    let outcome = match fb_td_train(&env.mdp, &training_config(cfg, k, d, gamma, seed)) {
        Ok(o) => o,
        Err(Error::Diverged { step, loss, traces }) => {
            write_traces(&out_dir, &traces)?;
            return Err(Error::Diverged { step, loss, traces });
        }
        Err(e) => return Err(e),
    };
    write_traces(&out_dir, &outcome.traces)?;
    let artifact = out_dir.join("fb_artifact.json");
    outcome.fb.save_json(&artifact)?;
    let eps_real = realization_error(&outcome.fb, 0, &outcome.reference_sr(&env.mdp)?)?;
    let out = TrainOutput {
        artifact,
        eps_real,
        initial_bellman: outcome.traces.initial_bellman().unwrap_or(f64::NAN),
        final_bellman: outcome.traces.final_bellman().unwrap_or(f64::NAN),
        final_loss: outcome.traces.loss.last().copied().unwrap_or(f64::NAN),
    };
    let mut w = SchemaWriter::create(
        out_dir.join("train_summary.csv"),
        TRAIN_SUMMARY_SCHEMA,
        &["k", "d", "gamma", "seed", "eps_real", "initial_bellman", "final_bellman", "final_loss"],
    )?;
    w.row([
        k.to_string(),
        d.to_string(),
        gamma.to_string(),
        seed.to_string(),
        out.eps_real.to_string(),
        out.initial_bellman.to_string(),
        out.final_bellman.to_string(),
        out.final_loss.to_string(),
    ])?;
    w.finish()?;
    Ok(out)
}
