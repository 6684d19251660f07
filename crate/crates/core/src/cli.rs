//! Command-line front end: dataset generation, training, evaluation and the
//! studies, driven by a flat TOML run configuration whose keys can each be
//! overridden by a flag of the same name.
//!
//! Outputs go to `{out}/{study}/{layout}/{variant}/{seed}/`. Exit codes are
//! 0 on success, 1 on usage, configuration or I/O errors and 2 when an
//! oracle check is violated.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{generate_behavior_dataset, GenerationConfig, OfflineDataset};
use crate::env::{GridWorld, LayoutId};
use crate::error::DawogError;
use crate::eval::oracle::{self, toy, GoalMdp};
use crate::eval::report::{self, study_file_name, CsvSchema};
use crate::eval::rollout::{evaluate, EvalConfig, EvalReport};
use crate::eval::studies::{self, BiasConfig};
use crate::partition::{Membership, PartitionConfig};
use crate::policy::TabularPolicy;
use crate::train::{
    fmt_f64, write_metrics_csv, Checkpoint, EntropySchedule, TrainConfig, TrainOutcome, Trainer,
    TrainerVariant, VariantKind,
};
use crate::weighting::WeightConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VIOLATION: i32 = 2;
pub const OUT_ENV: &str = "DAWOG_OUT";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Violation(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Violation(m) => write!(f, "violation: {m}"),
        }
    }
}

impl From<DawogError> for CliError {
    fn from(e: DawogError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Every key of a run. Missing keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub layout: LayoutId,
    pub variant: VariantKind,
    /// Variants compared by the evaluation study.
    pub variants: Vec<VariantKind>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,

    pub regions: usize,
    pub target_offset: usize,
    pub membership: Membership,
    pub beta: f64,
    pub beta_tilde: f64,
    pub clip_m: f64,
    pub gamma: f64,
    /// Entropy schedule of `geaw_entropy`: a constant or `fade[:from:to]`.
    pub entropy: Option<String>,

    pub value_learning_rate: f64,
    pub policy_learning_rate: f64,
    pub polyak_rho: f64,
    pub inner_iterations: usize,
    pub total_updates: usize,
    pub batch_size: usize,
    pub pretrain_critic_updates: usize,
    pub metrics_interval: usize,
    pub probe_episodes: usize,

    pub trajectories: usize,
    pub horizon: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_fraction: f64,
    pub q_learning_rate: f64,
    pub q_init: f64,

    pub episodes: usize,
    pub occupancy_episodes: usize,
    pub region_pairs: usize,
    pub bias_goals: usize,
    pub mc_rollouts: usize,
    pub bias_exact: bool,
    pub offsets: Vec<usize>,
    pub sweep_regions: Vec<usize>,
    /// `(beta, beta~)` cells of the sensitivity sweep.
    pub sweep_betas: Vec<[f64; 2]>,
    pub oracle_grids: usize,
    pub oracle_max_side: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let w = WeightConfig::default();
        let g = GenerationConfig::default();
        let b = BiasConfig::default();
        Self {
            layout: LayoutId::GridWall,
            variant: VariantKind::Dawog,
            variants: vec![VariantKind::Gcsl, VariantKind::Geaw, VariantKind::Dawog],
            seeds: vec![0],
            out: PathBuf::from("runs"),
            regions: t.partition.regions,
            target_offset: t.partition.target_offset,
            membership: t.partition.membership,
            beta: w.beta,
            beta_tilde: w.beta_tilde,
            clip_m: w.clip_bound,
            gamma: w.gamma,
            entropy: None,
            value_learning_rate: t.value_learning_rate,
            policy_learning_rate: t.policy_learning_rate,
            polyak_rho: t.polyak_rho,
            inner_iterations: t.inner_iterations,
            total_updates: t.total_updates,
            batch_size: t.batch_size,
            pretrain_critic_updates: t.pretrain_critic_updates,
            metrics_interval: t.metrics_interval,
            probe_episodes: t.probe_episodes,
            trajectories: g.trajectories,
            horizon: g.horizon,
            epsilon_start: g.epsilon_start,
            epsilon_end: g.epsilon_end,
            epsilon_decay_fraction: g.epsilon_decay_fraction,
            q_learning_rate: g.q_learning_rate,
            q_init: g.q_init,
            episodes: EvalConfig::default().episodes,
            occupancy_episodes: EvalConfig::default().episodes,
            region_pairs: 1000,
            bias_goals: b.goals_per_separation,
            mc_rollouts: b.mc_rollouts,
            bias_exact: b.exact,
            offsets: studies::DEFAULT_OFFSETS.to_vec(),
            sweep_regions: vec![5, 10, 20],
            sweep_betas: vec![[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]],
            oracle_grids: 20,
            oracle_max_side: 8,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn partition(&self) -> PartitionConfig {
        PartitionConfig {
            regions: self.regions,
            target_offset: self.target_offset,
            membership: self.membership,
        }
    }

    pub fn weights(&self) -> WeightConfig {
        WeightConfig {
            beta: self.beta,
            beta_tilde: self.beta_tilde,
            clip_bound: self.clip_m,
            gamma: self.gamma,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            total_updates: self.total_updates,
            batch_size: self.batch_size,
            inner_iterations: self.inner_iterations,
            pretrain_critic_updates: self.pretrain_critic_updates,
            metrics_interval: self.metrics_interval,
            probe_episodes: self.probe_episodes,
            value_learning_rate: self.value_learning_rate,
            polyak_rho: self.polyak_rho,
            policy_learning_rate: self.policy_learning_rate,
            partition: self.partition(),
        }
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            trajectories: self.trajectories,
            horizon: self.horizon,
            epsilon_start: self.epsilon_start,
            epsilon_end: self.epsilon_end,
            epsilon_decay_fraction: self.epsilon_decay_fraction,
            q_learning_rate: self.q_learning_rate,
            gamma: self.gamma,
            q_init: self.q_init,
            ..GenerationConfig::default()
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            episodes: self.episodes,
            gamma: self.gamma,
        }
    }

    pub fn bias(&self) -> BiasConfig {
        BiasConfig {
            goals_per_separation: self.bias_goals,
            mc_rollouts: self.mc_rollouts,
            exact: self.bias_exact,
            gamma: self.gamma,
        }
    }

    /// The entropy schedule applies to `geaw_entropy` only.
    pub fn trainer_variant(&self, kind: VariantKind) -> CliResult<TrainerVariant> {
        let mut v = TrainerVariant::preset(kind).with_weights(self.weights());
        if kind == VariantKind::GeawEntropy {
            if let Some(text) = &self.entropy {
                v = v.with_entropy(text.parse::<EntropySchedule>()?);
            }
        }
        v.validate()?;
        Ok(v)
    }

    pub fn env(&self) -> CliResult<GridWorld> {
        if self.layout == LayoutId::Custom {
            return Err(CliError::Usage("layout must be grid_wall or grid_umaze".into()));
        }
        Ok(GridWorld::shipped(self.layout)?.with_max_episode_steps(self.horizon))
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Usage("at least one seed is required".into()));
        }
        self.weights().validate()?;
        self.train_config().validate()?;
        self.generation().validate()?;
        if self.episodes == 0 {
            return Err(CliError::Usage("episodes must be positive".into()));
        }
        Ok(())
    }
}

fn parse_beta_pair(cell: &str) -> Result<[f64; 2], String> {
    let (a, b) = cell
        .split_once(':')
        .ok_or_else(|| format!("`{cell}` is not beta:beta_tilde"))?;
    let a = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let b = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok([a, b])
}

fn parse_membership(s: &str) -> Result<Membership, String> {
    match s {
        "at_least" | "at-least" => Ok(Membership::AtLeast),
        "exact" => Ok(Membership::Exact),
        other => Err(format!("unknown membership `{other}`")),
    }
}

/// One flag per config key.
#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    #[arg(long, global = true)]
    layout: Option<LayoutId>,
    #[arg(long, global = true)]
    variant: Option<VariantKind>,
    /// Comma-separated variant names.
    #[arg(long, global = true, value_delimiter = ',')]
    variants: Option<Vec<VariantKind>>,
    /// Comma-separated seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    regions: Option<usize>,
    #[arg(long, global = true)]
    target_offset: Option<usize>,
    /// `at_least` or `exact`.
    #[arg(long, global = true, value_parser = parse_membership)]
    membership: Option<Membership>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    beta_tilde: Option<f64>,
    #[arg(long, global = true)]
    clip_m: Option<f64>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    entropy: Option<String>,
    #[arg(long, global = true)]
    value_learning_rate: Option<f64>,
    #[arg(long, global = true)]
    policy_learning_rate: Option<f64>,
    #[arg(long, global = true)]
    polyak_rho: Option<f64>,
    #[arg(long, global = true)]
    inner_iterations: Option<usize>,
    #[arg(long, global = true)]
    total_updates: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    pretrain_critic_updates: Option<usize>,
    #[arg(long, global = true)]
    metrics_interval: Option<usize>,
    #[arg(long, global = true)]
    probe_episodes: Option<usize>,
    #[arg(long, global = true)]
    trajectories: Option<usize>,
    #[arg(long, global = true)]
    horizon: Option<usize>,
    #[arg(long, global = true)]
    epsilon_start: Option<f64>,
    #[arg(long, global = true)]
    epsilon_end: Option<f64>,
    #[arg(long, global = true)]
    epsilon_decay_fraction: Option<f64>,
    #[arg(long, global = true)]
    q_learning_rate: Option<f64>,
    #[arg(long, global = true)]
    q_init: Option<f64>,
    #[arg(long, global = true)]
    episodes: Option<usize>,
    #[arg(long, global = true)]
    occupancy_episodes: Option<usize>,
    #[arg(long, global = true)]
    region_pairs: Option<usize>,
    #[arg(long, global = true)]
    bias_goals: Option<usize>,
    #[arg(long, global = true)]
    mc_rollouts: Option<usize>,
    #[arg(long, global = true)]
    bias_exact: Option<bool>,
    #[arg(long, global = true, value_delimiter = ',')]
    offsets: Option<Vec<usize>>,
    #[arg(long, global = true, value_delimiter = ',')]
    sweep_regions: Option<Vec<usize>>,
    /// Comma-separated `beta:beta_tilde` cells.
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_beta_pair)]
    sweep_betas: Option<Vec<[f64; 2]>>,
    #[arg(long, global = true)]
    oracle_grids: Option<usize>,
    #[arg(long, global = true)]
    oracle_max_side: Option<usize>,
}

macro_rules! apply {
    ($cfg:expr, $ov:expr; $($field:ident),* $(,)?) => {
        $(if let Some(v) = $ov.$field.clone() { $cfg.$field = v; })*
    };
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        apply!(cfg, self;
            layout, variant, variants, seeds, regions, target_offset, membership, beta,
            beta_tilde, clip_m, gamma, value_learning_rate, policy_learning_rate, polyak_rho,
            inner_iterations, total_updates, batch_size, pretrain_critic_updates,
            metrics_interval, probe_episodes, trajectories, horizon, epsilon_start, epsilon_end,
            epsilon_decay_fraction, q_learning_rate, q_init, episodes, occupancy_episodes,
            region_pairs, bias_goals, mc_rollouts, bias_exact, offsets, sweep_regions,
            sweep_betas, oracle_grids, oracle_max_side,
        );
        if self.entropy.is_some() {
            cfg.entropy = self.entropy.clone();
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "dawog", version, about = "Dual-advantage weighted offline goal-conditioned RL on grid worlds")]
pub struct Cli {
    /// TOML run configuration; flags override individual keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root.
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the behaviour dataset of every seed.
    GenData,
    /// Train one variant for every seed.
    Train {
        /// Dataset file instead of regenerating from the seed.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Stop after this many updates and write a checkpoint.
        #[arg(long)]
        stop_at: Option<usize>,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate policies written by `train`.
    Eval,
    /// Run a study.
    Study {
        #[arg(value_enum)]
        study: StudyKind,
    },
    /// Print the effective configuration as TOML.
    PrintConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StudyKind {
    Eval,
    Occupancy,
    Bias,
    Region10,
    Offsets,
    Sweep,
    Oracle,
}

/// Records written files so their hashes can be reported.
#[derive(Default)]
struct Outputs {
    files: Vec<PathBuf>,
}

impl Outputs {
    fn csv(&mut self, schema: &CsvSchema, path: PathBuf, rows: &[Vec<String>]) -> CliResult<()> {
        schema.write(&path, rows)?;
        self.files.push(path);
        Ok(())
    }

    fn add(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    fn report(&self) -> CliResult<()> {
        for p in &self.files {
            println!("{}  {}", file_sha256(p)?, p.display());
        }
        Ok(())
    }
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

struct Ctx {
    cfg: RunConfig,
    env: GridWorld,
    out: Outputs,
}

impl Ctx {
    fn run_dir(&self, study: &str, variant: &str, seed: u64) -> PathBuf {
        self.cfg
            .out
            .join(study)
            .join(self.cfg.layout.as_str())
            .join(variant)
            .join(seed.to_string())
    }

    fn file(&self, study: &str, variant: &str, seed: u64) -> PathBuf {
        self.run_dir(study, variant, seed)
            .join(study_file_name(study, self.cfg.layout.as_str(), variant, seed))
    }

    fn dataset(&self, seed: u64) -> CliResult<OfflineDataset> {
        Ok(generate_behavior_dataset(&self.env, &self.cfg.generation(), seed)?)
    }

    fn train(&self, kind: VariantKind, ds: &OfflineDataset, seed: u64) -> CliResult<TrainOutcome<f64>> {
        let v = self.cfg.trainer_variant(kind)?;
        Ok(crate::train::train(&v, ds, &self.env, &self.cfg.train_config(), seed)?)
    }

    /// Trains `kinds` on the dataset of every seed, fanning runs out over
    /// the thread pool. Results are ordered by seed, then kind.
    fn train_many(&self, kinds: &[VariantKind]) -> CliResult<BTreeMap<(u64, usize), TrainOutcome<f64>>> {
        let datasets = self
            .cfg
            .seeds
            .par_iter()
            .map(|&s| self.dataset(s).map(|d| (s, d)))
            .collect::<CliResult<BTreeMap<_, _>>>()?;
        let jobs: Vec<(u64, usize)> = self
            .cfg
            .seeds
            .iter()
            .flat_map(|&s| (0..kinds.len()).map(move |k| (s, k)))
            .collect();
        jobs.par_iter()
            .map(|&(s, k)| self.train(kinds[k], &datasets[&s], s).map(|o| ((s, k), o)))
            .collect()
    }
}

fn eval_row(layout: LayoutId, variant: &str, seed: u64, rep: &EvalReport) -> Vec<String> {
    vec![
        layout.as_str().into(),
        variant.into(),
        seed.to_string(),
        rep.episodes.to_string(),
        fmt_f64(rep.success_rate),
        fmt_f64(rep.mean_return),
    ]
}

fn episode_rows(rep: &EvalReport) -> Vec<Vec<String>> {
    rep.per_episode
        .iter()
        .enumerate()
        .map(|(i, e)| {
            vec![
                e.seed.to_string(),
                i.to_string(),
                e.start.0.to_string(),
                e.goal.0.to_string(),
                e.steps.to_string(),
                e.success.to_string(),
            ]
        })
        .collect()
}

fn weight_rows(layout: LayoutId, variant: &str, seed: u64, w: &[f64]) -> Vec<Vec<String>> {
    w.iter()
        .map(|x| vec![layout.as_str().into(), variant.into(), seed.to_string(), fmt_f64(*x)])
        .collect()
}

#[derive(Serialize)]
struct DatasetProvenance<'a> {
    layout_id: LayoutId,
    seed: u64,
    behavior_policy_id: &'a str,
    generation: GenerationConfig,
    trajectories: usize,
    transitions: usize,
    success_fraction: f64,
    jsonl_sha256: String,
}

fn cmd_gen_data(ctx: &mut Ctx) -> CliResult<()> {
    for &seed in &ctx.cfg.seeds.clone() {
        let ds = ctx.dataset(seed)?;
        let dir = ctx.run_dir("data", "behavior", seed);
        fs::create_dir_all(&dir)?;
        let path = dir.join("dataset.jsonl");
        let mut buf = Vec::new();
        ds.write_jsonl(&ctx.env, &mut buf)?;
        fs::write(&path, &buf)?;
        let prov = DatasetProvenance {
            layout_id: ctx.cfg.layout,
            seed,
            behavior_policy_id: ds.behavior_policy_id(),
            generation: ctx.cfg.generation(),
            trajectories: ds.trajectories().len(),
            transitions: ds.num_transitions(),
            success_fraction: ds.success_fraction(),
            jsonl_sha256: format!("{:x}", Sha256::digest(&buf)),
        };
        let side = dir.join("dataset.json");
        fs::write(&side, serde_json::to_string_pretty(&prov).map_err(DawogError::from)? + "\n")?;
        ctx.out.add(path);
        ctx.out.add(side);
    }
    Ok(())
}

fn load_dataset(env: &GridWorld, path: &Path) -> CliResult<OfflineDataset> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Usage(format!("dataset {}: {e}", path.display())))?;
    Ok(OfflineDataset::read_jsonl(env, BufReader::new(file))?)
}

fn cmd_train(ctx: &mut Ctx, dataset: Option<&Path>, stop_at: Option<usize>, resume: bool) -> CliResult<()> {
    let kind = ctx.cfg.variant;
    let variant = ctx.cfg.trainer_variant(kind)?;
    let tcfg = ctx.cfg.train_config();
    let layout = ctx.cfg.layout;
    for &seed in &ctx.cfg.seeds.clone() {
        let ds = match dataset {
            Some(p) => load_dataset(&ctx.env, p)?,
            None => ctx.dataset(seed)?,
        };
        let dir = ctx.run_dir("train", kind.as_str(), seed);
        fs::create_dir_all(&dir)?;
        let mut trainer = if resume {
            if !Checkpoint::<f64>::exists(&dir) {
                return Err(CliError::Usage(format!("no checkpoint in {}", dir.display())));
            }
            Trainer::resume(variant, &ds, &ctx.env, tcfg, seed, Checkpoint::<f64>::load(&dir)?)?
        } else {
            Trainer::new(variant, &ds, &ctx.env, tcfg, seed)?
        };
        if let Some(n) = stop_at {
            if n % tcfg.metrics_interval != 0 {
                return Err(CliError::Usage("--stop-at must be a multiple of metrics_interval".into()));
            }
            trainer.run_until(n)?;
            trainer.checkpoint()?.save(&dir, layout)?;
            ctx.out.add(dir.join("checkpoint.json"));
            continue;
        }
        let out = trainer.finish()?;
        let name = kind.as_str();
        out.policy.save(&dir.join("policy.bin"), layout)?;
        out.values.save(&dir.join("values.bin"), layout)?;
        out.region_values.save(&dir.join("region_values.bin"), layout)?;
        for f in ["policy.bin", "values.bin", "region_values.bin"] {
            ctx.out.add(dir.join(f));
        }
        if let Some(aux) = &out.values_aux {
            aux.save(&dir.join("values_aux.bin"), layout)?;
            ctx.out.add(dir.join("values_aux.bin"));
        }
        let metrics = dir.join(study_file_name("metrics", layout.as_str(), name, seed));
        let mut buf = Vec::new();
        write_metrics_csv(&out.metrics, &mut buf)?;
        fs::write(&metrics, buf)?;
        ctx.out.add(metrics);
        let wpath = dir.join(study_file_name("weights", layout.as_str(), name, seed));
        ctx.out.csv(&report::WEIGHTS, wpath, &weight_rows(layout, name, seed, &out.last_weights))?;
        let cfg_path = dir.join("config.toml");
        fs::write(&cfg_path, ctx.cfg.to_toml())?;
        ctx.out.add(cfg_path);
    }
    Ok(())
}

fn write_eval(ctx: &mut Ctx, variant: &str, seed: u64, rep: &EvalReport) -> CliResult<()> {
    let layout = ctx.cfg.layout;
    let path = ctx.file("eval", variant, seed);
    ctx.out.csv(&report::EVAL, path, &[eval_row(layout, variant, seed, rep)])?;
    let ep = ctx.file("episodes", variant, seed);
    let ep = ctx.run_dir("eval", variant, seed).join(ep.file_name().unwrap());
    ctx.out.csv(&report::EPISODES, ep, &episode_rows(rep))
}

fn cmd_eval(ctx: &mut Ctx) -> CliResult<()> {
    let kind = ctx.cfg.variant;
    for &seed in &ctx.cfg.seeds.clone() {
        let path = ctx.run_dir("train", kind.as_str(), seed).join("policy.bin");
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "missing artifact {}; run `train` first",
                path.display()
            )));
        }
        let pol = TabularPolicy::<f64>::load(&path)?;
        if pol.num_states() != ctx.env.num_states() {
            return Err(CliError::Usage("policy does not match the layout".into()));
        }
        let rep = evaluate(&pol, &ctx.env, &ctx.cfg.eval(), seed);
        println!("{} {} seed {seed}: success {:.1}%", ctx.cfg.layout, kind, rep.success_rate);
        write_eval(ctx, kind.as_str(), seed, &rep)?;
    }
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn study_eval(ctx: &mut Ctx) -> CliResult<()> {
    let kinds = ctx.cfg.variants.clone();
    let runs = ctx.train_many(&kinds)?;
    let mut rates: Vec<Vec<f64>> = vec![Vec::new(); kinds.len()];
    for ((seed, k), out) in &runs {
        let rep = evaluate(&out.policy, &ctx.env, &ctx.cfg.eval(), *seed);
        rates[*k].push(rep.success_rate);
        write_eval(ctx, kinds[*k].as_str(), *seed, &rep)?;
    }
    for (k, kind) in kinds.iter().enumerate() {
        let (m, s) = mean_std(&rates[k]);
        println!("{} {kind}: success {m:.1} +- {s:.1} over {} seeds", ctx.cfg.layout, rates[k].len());
    }
    Ok(())
}

fn study_occupancy(ctx: &mut Ctx) -> CliResult<()> {
    let kinds = [VariantKind::Dawog, VariantKind::Geaw];
    let runs = ctx.train_many(&kinds)?;
    let part = ctx.cfg.partition();
    for &seed in &ctx.cfg.seeds.clone() {
        // both runs see the partition of the DAWOG value table
        let vt = &runs[&(seed, 0)].values;
        let reps: Vec<_> = (0..2)
            .map(|k| {
                studies::occupancy_times(&runs[&(seed, k)].policy, &ctx.env, vt, &part, ctx.cfg.occupancy_episodes, seed)
            })
            .collect();
        let (a, b) = reps[0].paired_aggregate(&reps[1]);
        println!("{} seed {seed}: mean occupancy dawog {a:.3} geaw {b:.3}", ctx.cfg.layout);
        for (k, rep) in reps.iter().enumerate() {
            let name = kinds[k].as_str();
            let rows: Vec<Vec<String>> = rep
                .per_region
                .iter()
                .map(|r| {
                    vec![
                        ctx.cfg.layout.as_str().into(),
                        name.into(),
                        seed.to_string(),
                        r.region.to_string(),
                        fmt_f64(r.mean_steps),
                        r.passages.to_string(),
                        r.censored.to_string(),
                    ]
                })
                .collect();
            let path = ctx.file("occupancy", name, seed);
            ctx.out.csv(&report::OCCUPANCY, path, &rows)?;
        }
    }
    Ok(())
}

fn study_region10(ctx: &mut Ctx) -> CliResult<()> {
    let kinds = [VariantKind::Dawog, VariantKind::Geaw];
    let runs = ctx.train_many(&kinds)?;
    let part = ctx.cfg.partition();
    for &seed in &ctx.cfg.seeds.clone() {
        let vt = &runs[&(seed, 0)].values;
        let pairs = studies::sample_region_pairs(&ctx.env, vt, &part, ctx.cfg.region_pairs, seed);
        for (k, kind) in kinds.iter().enumerate() {
            let r = studies::region_success(
                &runs[&(seed, k)].policy,
                &ctx.env,
                vt,
                &part,
                &pairs,
                studies::REGION_SUCCESS_STEPS,
            );
            println!("{} seed {seed} {kind}: 10-step region success {:.1}%", ctx.cfg.layout, r.success_rate);
            let row = vec![
                ctx.cfg.layout.as_str().into(),
                kind.as_str().into(),
                seed.to_string(),
                r.pairs.to_string(),
                r.successes.to_string(),
                fmt_f64(r.success_rate),
            ];
            let path = ctx.file("region10", kind.as_str(), seed);
            ctx.out.csv(&report::REGION10, path, &[row])?;
        }
    }
    Ok(())
}

fn study_bias(ctx: &mut Ctx) -> CliResult<()> {
    let kinds = [VariantKind::Dawog, VariantKind::Gcsl];
    let runs = ctx.train_many(&kinds)?;
    let part = ctx.cfg.partition();
    for &seed in &ctx.cfg.seeds.clone() {
        let learned = &runs[&(seed, 0)];
        let rep = studies::estimation_bias_study(
            &runs[&(seed, 1)].policy,
            &learned.values,
            &learned.region_values,
            &ctx.env,
            &part,
            &ctx.cfg.bias(),
            seed,
        )?;
        println!(
            "{} seed {seed}: |error| V {:.4} V~ {:.4}; std V {:.4} V~ {:.4}",
            ctx.cfg.layout,
            rep.goal_value.mean_abs_error,
            rep.region_value.mean_abs_error,
            rep.goal_value.std_error,
            rep.region_value.std_error
        );
        let layout = ctx.cfg.layout.as_str();
        let row = |sep: String, est: &str, st: &studies::ErrorStats| {
            vec![
                layout.to_string(),
                seed.to_string(),
                sep,
                est.to_string(),
                st.samples.to_string(),
                fmt_f64(st.mean_error),
                fmt_f64(st.mean_abs_error),
                fmt_f64(st.std_error),
            ]
        };
        let mut rows = Vec::new();
        for b in &rep.per_region_gap {
            rows.push(row(b.separation.to_string(), "v", &b.goal_value));
            rows.push(row(b.separation.to_string(), "region_v", &b.region_value));
        }
        rows.push(row("all".into(), "v", &rep.goal_value));
        rows.push(row("all".into(), "region_v", &rep.region_value));
        let path = ctx.file("bias", VariantKind::Dawog.as_str(), seed);
        ctx.out.csv(&report::BIAS, path, &rows)?;
    }
    Ok(())
}

fn study_offsets(ctx: &mut Ctx) -> CliResult<()> {
    for &seed in &ctx.cfg.seeds.clone() {
        let ds = ctx.dataset(seed)?;
        let res = studies::target_offset_ablation(
            &ds,
            &ctx.env,
            &ctx.cfg.train_config(),
            &ctx.cfg.offsets,
            &[seed],
            &ctx.cfg.eval(),
        )?;
        let rows: Vec<Vec<String>> = res
            .iter()
            .map(|r| {
                println!("{} seed {seed} offset {}: success {:.1}%", ctx.cfg.layout, r.offset, r.success_rate);
                vec![
                    ctx.cfg.layout.as_str().into(),
                    seed.to_string(),
                    r.offset.to_string(),
                    fmt_f64(r.success_rate),
                    fmt_f64(r.mean_return),
                ]
            })
            .collect();
        let path = ctx.file("offsets", VariantKind::Dawog.as_str(), seed);
        ctx.out.csv(&report::OFFSETS, path, &rows)?;
    }
    Ok(())
}

fn study_sweep(ctx: &mut Ctx) -> CliResult<()> {
    let betas: Vec<(f64, f64)> = ctx.cfg.sweep_betas.iter().map(|b| (b[0], b[1])).collect();
    for &seed in &ctx.cfg.seeds.clone() {
        let ds = ctx.dataset(seed)?;
        let cells = studies::sensitivity_sweep(
            &ds,
            &ctx.env,
            &ctx.cfg.train_config(),
            &ctx.cfg.sweep_regions,
            &betas,
            &[seed],
            &ctx.cfg.eval(),
        )?;
        let rows: Vec<Vec<String>> = cells
            .iter()
            .map(|c| {
                println!(
                    "{} seed {seed} K={} beta={} beta~={}: success {:.1}%",
                    ctx.cfg.layout, c.regions, c.beta, c.beta_tilde, c.success_rate
                );
                vec![
                    ctx.cfg.layout.as_str().into(),
                    seed.to_string(),
                    c.regions.to_string(),
                    fmt_f64(c.beta),
                    fmt_f64(c.beta_tilde),
                    fmt_f64(c.success_rate),
                    fmt_f64(c.mean_return),
                ]
            })
            .collect();
        let path = ctx.file("sweep", VariantKind::Dawog.as_str(), seed);
        ctx.out.csv(&report::SWEEP, path, &rows)?;
    }
    Ok(())
}

/// Largest TD-versus-exact error over random grids with random
/// deterministic policies; infinite if TD has not settled after 100k target
/// updates.
pub fn td_oracle_error(grids: usize, max_side: usize, seed: u64, cfg: &TrainConfig, gamma: f64) -> f64 {
    use rand::{Rng, SeedableRng};
    let parent = crate::rng::derive_seed(seed, "td_oracle");
    (0..grids)
        .map(|i| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::rng::child_seed(parent, i as u64));
            let env = oracle::random_grid(&mut rng, max_side, 0.2);
            let mdp = GoalMdp::from_grid(&env);
            let n = mdp.num_states();
            let choices: Vec<usize> = (0..n * n).map(|_| rng.gen_range(0..4)).collect();
            let choose = |s: usize, g: usize| choices[s * n + g];
            let exact = oracle::evaluate_deterministic(&mdp, choose, gamma);
            let mut vt = crate::value::ValueTable::<f64>::new(n, cfg.value_learning_rate, cfg.polyak_rho);
            let batch = oracle::exhaustive_batch(&env, choose);
            match oracle::converge_td(&mut vt, &batch, gamma, cfg.inner_iterations, 1e-9, 100_000) {
                Some(_) => oracle::sup_error(&vt, &exact),
                None => f64::INFINITY,
            }
        })
        .fold(0.0, f64::max)
}

#[derive(Serialize)]
struct ToyReport {
    q_s2_a2: f64,
    v_s2: f64,
    q_s1_a1: f64,
    q_s1_a2: f64,
    region_q_s1_a1: f64,
    region_q_s1_a2: f64,
}

fn toy_report(gamma: f64) -> ToyReport {
    let (mdp, pol, g) = (toy::mdp(), toy::behavior(), toy::GOAL);
    let v = oracle::evaluate_goal(&mdp, &pol, g, gamma);
    let w = oracle::evaluate_target_set(&mdp, &pol, g, &toy::target_set, gamma);
    let q = |s: usize, a: usize| gamma * v[mdp.next(s, a)];
    ToyReport {
        q_s2_a2: q(toy::S2, toy::A2),
        v_s2: v[toy::S2],
        q_s1_a1: q(toy::S1, toy::A1),
        q_s1_a2: q(toy::S1, toy::A2),
        region_q_s1_a1: oracle::target_q(&mdp, toy::S1, toy::A1, g, &toy::target_set, &w, gamma),
        region_q_s1_a2: oracle::target_q(&mdp, toy::S1, toy::A2, g, &toy::target_set, &w, gamma),
    }
}

fn study_oracle(ctx: &mut Ctx) -> CliResult<()> {
    let mut violations = Vec::new();
    for &seed in &ctx.cfg.seeds.clone() {
        let rep = oracle::policy_improvement_suite(
            ctx.cfg.oracle_grids,
            ctx.cfg.oracle_max_side,
            &ctx.cfg.weights(),
            &ctx.cfg.partition(),
            seed,
            1e-9,
        )?;
        println!("improvement suite seed {seed}: {}", serde_json::to_string(&rep).map_err(DawogError::from)?);
        if rep.violations > 0 {
            violations.push(format!("{} reweighted entries below the behaviour value (seed {seed})", rep.violations));
        }
        let row = vec![
            rep.grids.to_string(),
            rep.checked_entries.to_string(),
            fmt_f64(rep.min_gap),
            rep.violations.to_string(),
            fmt_f64(rep.dual_min_gap),
            rep.dual_violations.to_string(),
        ];
        let path = ctx
            .cfg
            .out
            .join("oracle")
            .join(LayoutId::Custom.as_str())
            .join("geaw")
            .join(seed.to_string())
            .join(study_file_name("oracle", LayoutId::Custom.as_str(), "geaw", seed));
        ctx.out.csv(&report::ORACLE, path, &[row])?;
        let td = td_oracle_error(ctx.cfg.oracle_grids, ctx.cfg.oracle_max_side, seed, &ctx.cfg.train_config(), ctx.cfg.gamma);
        println!("td vs exact seed {seed}: sup error {td:e}");
        if !(td <= 1e-3) {
            violations.push(format!("TD sup error {td:e} exceeds 1e-3 (seed {seed})"));
        }
    }
    let toy = toy_report(ctx.cfg.gamma);
    println!("toy example: {}", serde_json::to_string(&toy).map_err(DawogError::from)?);
    if !(toy.q_s1_a1 > toy.q_s1_a2 && toy.region_q_s1_a2 > toy.region_q_s1_a1) {
        violations.push("toy example orderings do not invert".into());
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(CliError::Violation(violations.join("; ")))
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_toml(
            &fs::read_to_string(p).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?,
        )?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    if let Command::PrintConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let env = cfg.env()?;
    let mut ctx = Ctx {
        cfg,
        env,
        out: Outputs::default(),
    };
    let result = match &cli.command {
        Command::GenData => cmd_gen_data(&mut ctx),
        Command::Train {
            dataset,
            stop_at,
            resume,
        } => cmd_train(&mut ctx, dataset.as_deref(), *stop_at, *resume),
        Command::Eval => cmd_eval(&mut ctx),
        Command::Study { study } => match study {
            StudyKind::Eval => study_eval(&mut ctx),
            StudyKind::Occupancy => study_occupancy(&mut ctx),
            StudyKind::Bias => study_bias(&mut ctx),
            StudyKind::Region10 => study_region10(&mut ctx),
            StudyKind::Offsets => study_offsets(&mut ctx),
            StudyKind::Sweep => study_sweep(&mut ctx),
            StudyKind::Oracle => study_oracle(&mut ctx),
        },
        Command::PrintConfig => unreachable!(),
    };
    // files written before a violation are still reported
    ctx.out.report()?;
    result
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Usage(_) => EXIT_USAGE,
                CliError::Violation(_) => EXIT_VIOLATION,
            }
        }
    }
}
