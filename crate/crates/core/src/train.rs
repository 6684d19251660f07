//! Offline training loop shared by every weighting variant.
//!
//! Each inner iteration samples one relabelled minibatch, takes a TD step on
//! the goal value table, a TD step on the region value table (partition from
//! the freshly updated goal values), computes per-sample weights and takes
//! one policy step. Target copies are Polyak-averaged after every
//! `inner_iterations` updates.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{OfflineDataset, RelabeledSample};
use crate::env::{GridWorld, LayoutId};
use crate::error::{DawogError, Result};
use crate::eval::rollout::{evaluate, EvalConfig};
use crate::partition::PartitionConfig;
use crate::policy::{policy_update, TabularPolicy, DEFAULT_POLICY_LEARNING_RATE};
use crate::rng;
use crate::scalar::Scalar;
use crate::value::{
    td_update_goal_value, td_update_region_value, Polyak, RegionValueTable, ValueTable,
    DEFAULT_POLYAK_RHO, DEFAULT_VALUE_LEARNING_RATE,
};
use crate::weighting::{exp_clip, goal_advantage, region_advantage, dual_weight, WeightConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    /// Unweighted imitation of relabelled data.
    Gcsl,
    /// Goal-advantage weights only.
    Geaw,
    /// Region-advantage weights only.
    RegionOnly,
    /// Both advantages.
    Dawog,
    /// Goal-advantage weights plus an entropy bonus.
    GeawEntropy,
    /// Goal-advantage weights averaged over two value tables.
    GeawX2,
}

impl VariantKind {
    pub const ALL: [VariantKind; 6] = [
        VariantKind::Gcsl,
        VariantKind::Geaw,
        VariantKind::RegionOnly,
        VariantKind::Dawog,
        VariantKind::GeawEntropy,
        VariantKind::GeawX2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Gcsl => "gcsl",
            VariantKind::Geaw => "geaw",
            VariantKind::RegionOnly => "region_only",
            VariantKind::Dawog => "dawog",
            VariantKind::GeawEntropy => "geaw_entropy",
            VariantKind::GeawX2 => "geaw_x2",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantKind {
    type Err = DawogError;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.as_str() == s || v.as_str().replace('_', "-") == s)
            .ok_or_else(|| DawogError::Config(format!("unknown variant `{s}`")))
    }
}

/// Entropy coefficient as a function of training progress.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EntropySchedule {
    Constant { alpha: f64 },
    /// Linear interpolation from `from` at update 0 to `to` at the end.
    LinearFade { from: f64, to: f64 },
}

impl EntropySchedule {
    pub const FADE: EntropySchedule = EntropySchedule::LinearFade { from: 0.1, to: 0.01 };

    pub fn alpha(&self, update: usize, total: usize) -> f64 {
        match *self {
            EntropySchedule::Constant { alpha } => alpha,
            EntropySchedule::LinearFade { from, to } => {
                let frac = if total <= 1 {
                    1.0
                } else {
                    (update as f64 / (total - 1) as f64).min(1.0)
                };
                from + (to - from) * frac
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            EntropySchedule::Constant { alpha } => alpha >= 0.0,
            EntropySchedule::LinearFade { from, to } => from >= 0.0 && to >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(DawogError::Config("entropy coefficients must be non-negative".into()))
        }
    }
}

impl fmt::Display for EntropySchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntropySchedule::Constant { alpha } => write!(f, "{alpha}"),
            EntropySchedule::LinearFade { from, to } => write!(f, "fade:{from}:{to}"),
        }
    }
}

impl FromStr for EntropySchedule {
    type Err = DawogError;

    /// `0.01` for a constant, `fade` or `fade:FROM:TO` for a linear fade.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || DawogError::Config(format!("bad entropy schedule `{s}`"));
        if s == "fade" {
            return Ok(Self::FADE);
        }
        if let Some(rest) = s.strip_prefix("fade:") {
            let (a, b) = rest.split_once(':').ok_or_else(bad)?;
            return Ok(EntropySchedule::LinearFade {
                from: a.parse().map_err(|_| bad())?,
                to: b.parse().map_err(|_| bad())?,
            });
        }
        Ok(EntropySchedule::Constant {
            alpha: s.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerVariant {
    pub kind: VariantKind,
    pub weight_cfg: WeightConfig,
    pub entropy: Option<EntropySchedule>,
}

impl TrainerVariant {
    /// The variant with default coefficients (`beta = beta~ = 10`, `M = 10`).
    pub fn preset(kind: VariantKind) -> Self {
        Self {
            kind,
            weight_cfg: WeightConfig::default(),
            entropy: (kind == VariantKind::GeawEntropy).then_some(EntropySchedule::FADE),
        }
    }

    pub fn with_weights(mut self, weight_cfg: WeightConfig) -> Self {
        self.weight_cfg = weight_cfg;
        self
    }

    pub fn with_entropy(mut self, schedule: EntropySchedule) -> Self {
        self.entropy = Some(schedule);
        self
    }

    /// `(beta, beta~)` actually used by the weight rule.
    pub fn effective_betas(&self) -> (f64, f64) {
        let WeightConfig {
            beta, beta_tilde, ..
        } = self.weight_cfg;
        match self.kind {
            VariantKind::Gcsl => (0.0, 0.0),
            VariantKind::Geaw | VariantKind::GeawEntropy | VariantKind::GeawX2 => (beta, 0.0),
            VariantKind::RegionOnly => (0.0, beta_tilde),
            VariantKind::Dawog => (beta, beta_tilde),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weight_cfg.validate()?;
        match (self.kind, self.entropy) {
            (VariantKind::GeawEntropy, None) => Err(DawogError::Config(
                "geaw_entropy needs an entropy schedule".into(),
            )),
            (VariantKind::GeawEntropy, Some(s)) => s.validate(),
            (_, Some(_)) => Err(DawogError::Config(format!(
                "entropy schedule only applies to geaw_entropy, not {}",
                self.kind
            ))),
            (_, None) => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Policy updates.
    pub total_updates: usize,
    pub batch_size: usize,
    /// Inner iterations between two target-copy updates.
    pub inner_iterations: usize,
    /// Value-only updates run before policy training starts.
    pub pretrain_critic_updates: usize,
    pub metrics_interval: usize,
    /// Greedy evaluation episodes per metrics record, 0 to disable.
    pub probe_episodes: usize,
    pub value_learning_rate: f64,
    pub polyak_rho: f64,
    pub policy_learning_rate: f64,
    pub partition: PartitionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_updates: 50_000,
            batch_size: 512,
            inner_iterations: 100,
            pretrain_critic_updates: 0,
            metrics_interval: 1000,
            probe_episodes: 0,
            value_learning_rate: DEFAULT_VALUE_LEARNING_RATE,
            polyak_rho: DEFAULT_POLYAK_RHO,
            policy_learning_rate: DEFAULT_POLICY_LEARNING_RATE,
            partition: PartitionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DawogError::Config(m.to_string()));
        if self.total_updates == 0 {
            return bad("total updates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.inner_iterations == 0 {
            return bad("inner iterations must be positive");
        }
        if self.metrics_interval == 0 {
            return bad("metrics interval must be positive");
        }
        if !(self.value_learning_rate > 0.0 && self.value_learning_rate <= 1.0) {
            return bad("value learning rate must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.polyak_rho) {
            return bad("polyak rho must lie in [0, 1]");
        }
        if !(self.policy_learning_rate > 0.0) {
            return bad("policy learning rate must be positive");
        }
        self.partition.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub update_index: usize,
    pub variant: String,
    pub seed: u64,
    pub v_loss: f64,
    pub region_v_loss: f64,
    pub policy_loss: f64,
    /// Empty in CSV when probing is disabled.
    pub probe_success_rate: Option<f64>,
}

pub const METRICS_HEADER: [&str; 7] = [
    "update_index",
    "variant",
    "seed",
    "v_loss",
    "region_v_loss",
    "policy_loss",
    "probe_success_rate",
];

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub policy: TabularPolicy<T>,
    pub values: ValueTable<T>,
    pub region_values: RegionValueTable<T>,
    /// Second goal value table of `geaw_x2`.
    pub values_aux: Option<ValueTable<T>>,
    pub metrics: Vec<MetricsRecord>,
    /// Weights of the final minibatch, for histograms.
    pub last_weights: Vec<f64>,
}

/// Serializable mid-run state.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub update_index: usize,
    pub rng_word_pos: u128,
    pub policy: TabularPolicy<T>,
    pub values: ValueTable<T>,
    pub region_values: RegionValueTable<T>,
    pub values_aux: Option<ValueTable<T>>,
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    update_index: usize,
    /// Decimal string; JSON numbers cannot hold every u128.
    rng_word_pos: String,
    metrics: Vec<MetricsRecord>,
}

const CHECKPOINT_META: &str = "checkpoint.json";
const CHECKPOINT_POLICY: &str = "checkpoint_policy.bin";
const CHECKPOINT_VALUES: &str = "checkpoint_values.bin";
const CHECKPOINT_REGION_VALUES: &str = "checkpoint_region_values.bin";
const CHECKPOINT_VALUES_AUX: &str = "checkpoint_values_aux.bin";

impl<T: Scalar> Checkpoint<T> {
    /// Writes the checkpoint into `dir` as a JSON document plus table files.
    pub fn save(&self, dir: &Path, layout: LayoutId) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.policy.save(&dir.join(CHECKPOINT_POLICY), layout)?;
        self.values.save(&dir.join(CHECKPOINT_VALUES), layout)?;
        self.region_values.save(&dir.join(CHECKPOINT_REGION_VALUES), layout)?;
        let aux = dir.join(CHECKPOINT_VALUES_AUX);
        match &self.values_aux {
            Some(t) => t.save(&aux, layout)?,
            None if aux.exists() => std::fs::remove_file(&aux)?,
            None => {}
        }
        let meta = CheckpointMeta {
            update_index: self.update_index,
            rng_word_pos: self.rng_word_pos.to_string(),
            metrics: self.metrics.clone(),
        };
        std::fs::write(dir.join(CHECKPOINT_META), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join(CHECKPOINT_META))?)?;
        let aux = dir.join(CHECKPOINT_VALUES_AUX);
        Ok(Self {
            update_index: meta.update_index,
            rng_word_pos: meta
                .rng_word_pos
                .parse()
                .map_err(|_| DawogError::Config("corrupt checkpoint stream position".into()))?,
            policy: TabularPolicy::load(&dir.join(CHECKPOINT_POLICY))?,
            values: ValueTable::load(&dir.join(CHECKPOINT_VALUES))?,
            region_values: RegionValueTable::load(&dir.join(CHECKPOINT_REGION_VALUES))?,
            values_aux: if aux.exists() { Some(ValueTable::load(&aux)?) } else { None },
            metrics: meta.metrics,
        })
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(CHECKPOINT_META).exists()
    }
}

#[derive(Default)]
struct LossAccumulator {
    v: f64,
    rv: f64,
    pol: f64,
    n: usize,
}

pub struct Trainer<'a, T: Scalar> {
    variant: TrainerVariant,
    cfg: TrainConfig,
    env: &'a GridWorld,
    ds: &'a OfflineDataset,
    seed: u64,
    rng: ChaCha8Rng,
    policy: TabularPolicy<T>,
    values: ValueTable<T>,
    region_values: RegionValueTable<T>,
    values_aux: Option<ValueTable<T>>,
    update_index: usize,
    metrics: Vec<MetricsRecord>,
    acc: LossAccumulator,
    batch: Vec<RelabeledSample>,
    weights: Vec<T>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        variant: TrainerVariant,
        ds: &'a OfflineDataset,
        env: &'a GridWorld,
        cfg: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        variant.validate()?;
        cfg.validate()?;
        ds.validate(env)?;
        if ds.num_transitions() == 0 {
            return Err(DawogError::Dataset("dataset has no transitions".into()));
        }
        let n = env.num_states();
        let values_aux = (variant.kind == VariantKind::GeawX2).then(|| {
            ValueTable::with_random_init(
                n,
                cfg.value_learning_rate,
                cfg.polyak_rho,
                rng::derive_seed(seed, "value_aux_init"),
                0.01,
            )
        });
        let values = if variant.kind == VariantKind::GeawX2 {
            ValueTable::with_random_init(
                n,
                cfg.value_learning_rate,
                cfg.polyak_rho,
                rng::derive_seed(seed, "value_init"),
                0.01,
            )
        } else {
            ValueTable::new(n, cfg.value_learning_rate, cfg.polyak_rho)
        };
        let mut trainer = Self {
            variant,
            cfg,
            env,
            ds,
            seed,
            rng: rng::stream(seed, rng::TRAIN_STREAM),
            policy: TabularPolicy::new(n, cfg.policy_learning_rate),
            values,
            region_values: RegionValueTable::new(
                n,
                cfg.partition.regions,
                cfg.value_learning_rate,
                cfg.polyak_rho,
            ),
            values_aux,
            update_index: 0,
            metrics: Vec::new(),
            acc: LossAccumulator::default(),
            batch: Vec::with_capacity(cfg.batch_size),
            weights: Vec::with_capacity(cfg.batch_size),
        };
        trainer.pretrain_critics()?;
        Ok(trainer)
    }

    /// Rebuilds a trainer from a checkpoint taken at a metrics boundary.
    pub fn resume(
        variant: TrainerVariant,
        ds: &'a OfflineDataset,
        env: &'a GridWorld,
        cfg: TrainConfig,
        seed: u64,
        ckpt: Checkpoint<T>,
    ) -> Result<Self> {
        variant.validate()?;
        cfg.validate()?;
        ds.validate(env)?;
        let n = env.num_states();
        if ckpt.policy.num_states() != n || ckpt.values.num_states() != n {
            return Err(DawogError::Shape("checkpoint does not match environment".into()));
        }
        if ckpt.region_values.regions() != cfg.partition.regions {
            return Err(DawogError::Shape("checkpoint region count differs".into()));
        }
        let mut rng = rng::stream(seed, rng::TRAIN_STREAM);
        rng.set_word_pos(ckpt.rng_word_pos);
        Ok(Self {
            variant,
            cfg,
            env,
            ds,
            seed,
            rng,
            policy: ckpt.policy,
            values: ckpt.values,
            region_values: ckpt.region_values,
            values_aux: ckpt.values_aux,
            update_index: ckpt.update_index,
            metrics: ckpt.metrics,
            acc: LossAccumulator::default(),
            batch: Vec::with_capacity(cfg.batch_size),
            weights: Vec::with_capacity(cfg.batch_size),
        })
    }

    pub fn update_index(&self) -> usize {
        self.update_index
    }

    pub fn is_done(&self) -> bool {
        self.update_index >= self.cfg.total_updates
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<T>> {
        if self.acc.n != 0 {
            return Err(DawogError::Config(
                "checkpoints are only taken at metrics boundaries".into(),
            ));
        }
        Ok(Checkpoint {
            update_index: self.update_index,
            rng_word_pos: self.rng.get_word_pos(),
            policy: self.policy.clone(),
            values: self.values.clone(),
            region_values: self.region_values.clone(),
            values_aux: self.values_aux.clone(),
            metrics: self.metrics.clone(),
        })
    }

    fn gamma(&self) -> f64 {
        self.variant.weight_cfg.gamma
    }

    fn pretrain_critics(&mut self) -> Result<()> {
        for u in 0..self.cfg.pretrain_critic_updates {
            self.ds
                .fill_relabeled_batch(&mut self.batch, self.cfg.batch_size, &mut self.rng)?;
            self.critic_step();
            if (u + 1) % self.cfg.inner_iterations == 0 {
                self.polyak_all();
            }
        }
        Ok(())
    }

    fn critic_step(&mut self) -> (f64, f64) {
        let gamma = self.gamma();
        let v_loss = td_update_goal_value(&mut self.values, &self.batch, gamma);
        if let Some(aux) = self.values_aux.as_mut() {
            td_update_goal_value(aux, &self.batch, gamma);
        }
        let rv_loss = td_update_region_value(
            &mut self.region_values,
            &self.batch,
            &self.values,
            &self.cfg.partition,
            gamma,
        );
        (v_loss, rv_loss)
    }

    fn polyak_all(&mut self) {
        self.values.polyak_update();
        self.region_values.polyak_update();
        if let Some(aux) = self.values_aux.as_mut() {
            aux.polyak_update();
        }
    }

    fn compute_weights(&mut self) {
        let gamma = self.gamma();
        let (beta, beta_tilde) = self.variant.effective_betas();
        let wcfg = WeightConfig {
            beta,
            beta_tilde,
            ..self.variant.weight_cfg
        };
        let bound = T::lit(wcfg.clip_bound);
        self.weights.clear();
        for smp in &self.batch {
            let w = match self.variant.kind {
                VariantKind::Gcsl => T::one(),
                VariantKind::Geaw | VariantKind::GeawEntropy => {
                    exp_clip(T::lit(beta) * goal_advantage(smp, &self.values, gamma), bound)
                }
                VariantKind::GeawX2 => {
                    let aux = self.values_aux.as_ref().expect("geaw_x2 has two tables");
                    let sum = goal_advantage(smp, &self.values, gamma)
                        + goal_advantage(smp, aux, gamma);
                    exp_clip(T::lit(beta / 2.0) * sum, bound)
                }
                VariantKind::RegionOnly | VariantKind::Dawog => {
                    let adv = if beta > 0.0 {
                        goal_advantage(smp, &self.values, gamma)
                    } else {
                        T::zero()
                    };
                    let radv = if beta_tilde > 0.0 {
                        region_advantage(
                            smp,
                            &self.region_values,
                            &self.values,
                            &self.cfg.partition,
                            gamma,
                        )
                    } else {
                        T::zero()
                    };
                    dual_weight(adv, radv, &wcfg)
                }
            };
            self.weights.push(w);
        }
    }

    /// One inner iteration; Polyak-updates at the end of each outer loop.
    pub fn step(&mut self) -> Result<()> {
        self.ds
            .fill_relabeled_batch(&mut self.batch, self.cfg.batch_size, &mut self.rng)?;
        let (v_loss, rv_loss) = self.critic_step();
        self.compute_weights();
        let alpha = self
            .variant
            .entropy
            .map_or(0.0, |s| s.alpha(self.update_index, self.cfg.total_updates));
        let pol_loss = policy_update(&mut self.policy, &self.batch, &self.weights, alpha)?;
        self.update_index += 1;
        if self.update_index.is_multiple_of(self.cfg.inner_iterations) {
            self.polyak_all();
        }
        self.acc.v += v_loss;
        self.acc.rv += rv_loss;
        self.acc.pol += pol_loss;
        self.acc.n += 1;
        if self.update_index.is_multiple_of(self.cfg.metrics_interval) || self.is_done() {
            self.flush_metrics();
        }
        Ok(())
    }

    fn flush_metrics(&mut self) {
        let n = self.acc.n.max(1) as f64;
        let probe = (self.cfg.probe_episodes > 0).then(|| {
            let eval_cfg = EvalConfig {
                episodes: self.cfg.probe_episodes,
                ..EvalConfig::default()
            };
            evaluate(&self.policy, self.env, &eval_cfg, self.seed).success_rate
        });
        self.metrics.push(MetricsRecord {
            update_index: self.update_index,
            variant: self.variant.kind.to_string(),
            seed: self.seed,
            v_loss: self.acc.v / n,
            region_v_loss: self.acc.rv / n,
            policy_loss: self.acc.pol / n,
            probe_success_rate: probe,
        });
        self.acc = LossAccumulator::default();
    }

    /// Runs until `update_index == min(until, total_updates)`.
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        let until = until.min(self.cfg.total_updates);
        while self.update_index < until {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<TrainOutcome<T>> {
        self.run_until(self.cfg.total_updates)?;
        let last_weights = self.weights.iter().map(|w| w.as_f64()).collect();
        Ok(TrainOutcome {
            policy: self.policy,
            values: self.values,
            region_values: self.region_values,
            values_aux: self.values_aux,
            metrics: self.metrics,
            last_weights,
        })
    }

    pub fn policy(&self) -> &TabularPolicy<T> {
        &self.policy
    }

    pub fn values(&self) -> &ValueTable<T> {
        &self.values
    }

    pub fn region_values(&self) -> &RegionValueTable<T> {
        &self.region_values
    }
}

/// Trains `variant` on `ds` from scratch.
pub fn train<T: Scalar>(
    variant: &TrainerVariant,
    ds: &OfflineDataset,
    env: &GridWorld,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    Trainer::new(*variant, ds, env, *cfg, seed)?.finish()
}

pub fn write_metrics_csv<W: std::io::Write>(records: &[MetricsRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for r in records {
        out.write_record([
            r.update_index.to_string(),
            r.variant.clone(),
            r.seed.to_string(),
            fmt_f64(r.v_loss),
            fmt_f64(r.region_v_loss),
            fmt_f64(r.policy_loss),
            r.probe_success_rate.map(fmt_f64).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Shortest round-trip formatting, stable across runs.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
