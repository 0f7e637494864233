//! Experiment configuration, the training loop, metrics, checkpoints and
//! evaluation.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use gridrts::{EnvConfig, GameState, RewardStream, TaskId};
use numcore::checkpoint::Checkpoint;
use numcore::{AdamConfig, AdamState, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agent::{NetSpec, PolicyNet, Sidecar, PARAM_NAMES};
use crate::guidance::{
    collect_rollout, update_policies, EpisodeRecord, GuidanceSchedule, PloConfig, PloCriterion, Policy, PolicyReport,
    PolicySet, VecEnv,
};
use crate::ppo::{GaeConfig, LossConfig, ObsNormalizer, RewardScaler, UpdateStats};
use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// One policy trained on the sparse reward.
    Sparse,
    /// One policy trained on the shaped reward.
    Shaped,
    AgLong,
    AgShort,
    AgMixed,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Sparse, Strategy::Shaped, Strategy::AgLong, Strategy::AgShort, Strategy::AgMixed];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Sparse => "sparse",
            Strategy::Shaped => "shaped",
            Strategy::AgLong => "ag_long",
            Strategy::AgShort => "ag_short",
            Strategy::AgMixed => "ag_mixed",
        }
    }

    pub fn is_guided(self) -> bool {
        matches!(self, Strategy::AgLong | Strategy::AgShort | Strategy::AgMixed)
    }

    /// Default `(shift, adaptation, epsilon_end)`.
    pub fn schedule_defaults(self) -> (u64, u64, f64) {
        match self {
            Strategy::AgLong => (2_000_000, 7_000_000, 0.0),
            Strategy::AgShort => (800_000, 1_000_000, 0.0),
            Strategy::AgMixed => (2_000_000, 2_000_000, 0.5),
            Strategy::Sparse | Strategy::Shaped => (0, 0, 0.0),
        }
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        Strategy::ALL.into_iter().find(|st| st.name() == key).ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskId,
    pub strategy: Strategy,
    pub plo: bool,
    pub plo_criterion: PloCriterion,
    pub seed: u64,
    pub total_timesteps: u64,
    pub shift: u64,
    pub adaptation: u64,
    pub epsilon_end: f64,
    pub learning_rate: f64,
    pub anneal_lr: bool,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_coef: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub max_grad_norm: f64,
    pub update_epochs: usize,
    pub num_minibatches: usize,
    pub num_envs: usize,
    pub num_steps: usize,
    pub clip_vloss: bool,
    pub norm_adv: bool,
    pub norm_obs: bool,
    pub norm_reward: bool,
    pub max_ticks: u32,
    /// Updates between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub eval_episodes: usize,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(task: TaskId, strategy: Strategy) -> Self {
        let (shift, adaptation, epsilon_end) = strategy.schedule_defaults();
        Self {
            task,
            strategy,
            plo: false,
            plo_criterion: PloCriterion::Nonzero,
            seed: 1,
            total_timesteps: shift + adaptation + 1_000_000,
            shift,
            adaptation,
            epsilon_end,
            learning_rate: 2.5e-4,
            anneal_lr: true,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_coef: 0.1,
            vf_coef: 0.5,
            ent_coef: 0.01,
            max_grad_norm: 0.5,
            update_epochs: 4,
            num_minibatches: 4,
            num_envs: 8,
            num_steps: 128,
            clip_vloss: true,
            norm_adv: true,
            norm_obs: true,
            norm_reward: true,
            max_ticks: 2000,
            checkpoint_interval: 0,
            eval_episodes: 100,
            out_dir: PathBuf::from("runs"),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.num_envs * self.num_steps
    }

    pub fn num_updates(&self) -> u64 {
        self.total_timesteps / self.batch_size() as u64
    }

    pub fn schedule(&self) -> GuidanceSchedule {
        if self.strategy.is_guided() {
            GuidanceSchedule::new(self.shift, self.adaptation, self.epsilon_end)
        } else {
            GuidanceSchedule::disabled()
        }
    }

    /// Linear decay to zero over `total_timesteps`.
    pub fn learning_rate_at(&self, global_step: u64) -> f64 {
        if !self.anneal_lr {
            return self.learning_rate;
        }
        let frac = 1.0 - global_step as f64 / self.total_timesteps as f64;
        self.learning_rate * frac.max(0.0)
    }

    pub fn gae(&self) -> GaeConfig {
        GaeConfig { gamma: self.gamma, lambda: self.gae_lambda }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            clip: self.clip_coef,
            value_coef: self.vf_coef,
            entropy_coef: self.ent_coef,
            epochs: self.update_epochs,
            minibatches: self.num_minibatches,
            max_grad_norm: self.max_grad_norm,
            clip_value_loss: self.clip_vloss,
            normalize_advantages: self.norm_adv,
        }
    }

    pub fn plo_config(&self) -> PloConfig {
        PloConfig { enabled: self.plo, criterion: self.plo_criterion }
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig { max_ticks: self.max_ticks, ..EnvConfig::default() }
    }

    /// Default run directory name: `<task>-<strategy>[-plo]-s<seed>`.
    pub fn run_name(&self) -> String {
        format!("{}-{}{}-s{}", self.task, self.strategy, if self.plo { "-plo" } else { "" }, self.seed)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |key: &str, why: &str| Err(HarnessError::Invalid { key: key.to_string(), reason: why.to_string() });
        if self.num_envs == 0 {
            return bad("num_envs", "must be positive");
        }
        if self.num_steps == 0 {
            return bad("num_steps", "must be positive");
        }
        if self.num_minibatches == 0 || self.num_minibatches > self.batch_size() {
            return bad("num_minibatches", "must be between 1 and num_envs * num_steps");
        }
        if self.update_epochs == 0 {
            return bad("update_epochs", "must be positive");
        }
        if (self.total_timesteps as usize) < self.batch_size() {
            return bad("total_timesteps", "smaller than one rollout (num_envs * num_steps)");
        }
        if !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon_end", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma", "gamma and gae_lambda must lie in [0, 1]");
        }
        for (key, v) in [("clip_coef", self.clip_coef), ("max_grad_norm", self.max_grad_norm)] {
            if v <= 0.0 || !v.is_finite() {
                return bad(key, "must be positive");
            }
        }
        for (key, v) in [("learning_rate", self.learning_rate), ("vf_coef", self.vf_coef), ("ent_coef", self.ent_coef)] {
            if v < 0.0 || !v.is_finite() {
                return bad(key, "must be non-negative");
            }
        }
        self.env_config().validate().map_err(|e| HarnessError::Invalid { key: "max_ticks".into(), reason: e.to_string() })
    }
}

/// Keys accepted in config files and as overrides.
pub const CONFIG_KEYS: [&str; 30] = [
    "task",
    "strategy",
    "plo",
    "plo_criterion",
    "seed",
    "total_timesteps",
    "shift",
    "adaptation",
    "epsilon_end",
    "learning_rate",
    "anneal_lr",
    "gamma",
    "gae_lambda",
    "clip_coef",
    "vf_coef",
    "ent_coef",
    "max_grad_norm",
    "update_epochs",
    "num_minibatches",
    "num_envs",
    "num_steps",
    "clip_vloss",
    "norm_adv",
    "norm_obs",
    "norm_reward",
    "max_ticks",
    "checkpoint_interval",
    "eval_episodes",
    "out_dir",
    "entropy_coef",
];

fn canonical_key(key: &str) -> String {
    let k = key.trim().trim_start_matches("--").replace('-', "_");
    if k == "entropy_coef" {
        "ent_coef".to_string()
    } else {
        k
    }
}

/// Where a setting came from, for error messages.
#[derive(Clone, Debug, PartialEq)]
enum Origin {
    File { path: PathBuf, line: usize },
    Cli,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::File { path, line } => write!(f, "{}:{line}", path.display()),
            Origin::Cli => f.write_str("command line"),
        }
    }
}

fn parse_file(path: &Path, text: &str) -> Result<Vec<(String, String, Origin)>, HarnessError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let origin = Origin::File { path: path.to_path_buf(), line: i + 1 };
        let Some((k, v)) = line.split_once('=') else {
            return Err(HarnessError::Syntax { location: origin.to_string(), line: raw.to_string() });
        };
        if k.trim().is_empty() {
            return Err(HarnessError::Syntax { location: origin.to_string(), line: raw.to_string() });
        }
        out.push((canonical_key(k), v.trim().to_string(), origin));
    }
    Ok(out)
}

fn parse_value<V: FromStr>(key: &str, value: &str, origin: &Origin) -> Result<V, HarnessError>
where
    V::Err: fmt::Display,
{
    value.parse::<V>().map_err(|e| HarnessError::Value {
        key: key.to_string(),
        value: value.to_string(),
        location: origin.to_string(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str, origin: &Origin) -> Result<bool, HarnessError> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(HarnessError::Value {
            key: key.to_string(),
            value: value.to_string(),
            location: origin.to_string(),
            reason: "expected true or false".into(),
        }),
    }
}

fn apply(cfg: &mut ExperimentConfig, key: &str, value: &str, origin: &Origin) -> Result<(), HarnessError> {
    match key {
        "task" => cfg.task = parse_value(key, value, origin)?,
        "strategy" => cfg.strategy = parse_value(key, value, origin)?,
        "plo" => cfg.plo = parse_bool(key, value, origin)?,
        "plo_criterion" => {
            cfg.plo_criterion = match value.to_ascii_lowercase().as_str() {
                "nonzero" => PloCriterion::Nonzero,
                "positive" => PloCriterion::Positive,
                _ => {
                    return Err(HarnessError::Value {
                        key: key.into(),
                        value: value.into(),
                        location: origin.to_string(),
                        reason: "expected nonzero or positive".into(),
                    })
                }
            }
        }
        "seed" => cfg.seed = parse_value(key, value, origin)?,
        "total_timesteps" => cfg.total_timesteps = parse_value(key, value, origin)?,
        "shift" => cfg.shift = parse_value(key, value, origin)?,
        "adaptation" => cfg.adaptation = parse_value(key, value, origin)?,
        "epsilon_end" => cfg.epsilon_end = parse_value(key, value, origin)?,
        "learning_rate" => cfg.learning_rate = parse_value(key, value, origin)?,
        "anneal_lr" => cfg.anneal_lr = parse_bool(key, value, origin)?,
        "gamma" => cfg.gamma = parse_value(key, value, origin)?,
        "gae_lambda" => cfg.gae_lambda = parse_value(key, value, origin)?,
        "clip_coef" => cfg.clip_coef = parse_value(key, value, origin)?,
        "vf_coef" => cfg.vf_coef = parse_value(key, value, origin)?,
        "ent_coef" => cfg.ent_coef = parse_value(key, value, origin)?,
        "max_grad_norm" => cfg.max_grad_norm = parse_value(key, value, origin)?,
        "update_epochs" => cfg.update_epochs = parse_value(key, value, origin)?,
        "num_minibatches" => cfg.num_minibatches = parse_value(key, value, origin)?,
        "num_envs" => cfg.num_envs = parse_value(key, value, origin)?,
        "num_steps" => cfg.num_steps = parse_value(key, value, origin)?,
        "clip_vloss" => cfg.clip_vloss = parse_bool(key, value, origin)?,
        "norm_adv" => cfg.norm_adv = parse_bool(key, value, origin)?,
        "norm_obs" => cfg.norm_obs = parse_bool(key, value, origin)?,
        "norm_reward" => cfg.norm_reward = parse_bool(key, value, origin)?,
        "max_ticks" => cfg.max_ticks = parse_value(key, value, origin)?,
        "checkpoint_interval" => cfg.checkpoint_interval = parse_value(key, value, origin)?,
        "eval_episodes" => cfg.eval_episodes = parse_value(key, value, origin)?,
        "out_dir" => cfg.out_dir = PathBuf::from(value),
        _ => return Err(HarnessError::UnknownKey { key: key.to_string(), location: origin.to_string() }),
    }
    Ok(())
}

/// Resolves a configuration: strategy defaults first, then the file, then
/// `overrides` (already split into key and value).
///
/// `task` and `strategy` are read from the merged settings before defaults
/// are laid down, so a file may select the strategy whose defaults it then
/// refines.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig, HarnessError> {
    let mut settings = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| HarnessError::Io { path: p.to_path_buf(), source: e })?;
            parse_file(p, &text)?
        }
        None => Vec::new(),
    };
    settings.extend(overrides.iter().map(|(k, v)| (canonical_key(k), v.trim().to_string(), Origin::Cli)));
    for (k, _, origin) in &settings {
        if !CONFIG_KEYS.contains(&k.as_str()) {
            return Err(HarnessError::UnknownKey { key: k.clone(), location: origin.to_string() });
        }
    }

    let last = |key: &str| settings.iter().rev().find(|(k, _, _)| k == key);
    let task = match last("task") {
        Some((k, v, o)) => parse_value(k, v, o)?,
        None => return Err(HarnessError::Invalid { key: "task".into(), reason: "no task given".into() }),
    };
    let strategy = match last("strategy") {
        Some((k, v, o)) => parse_value(k, v, o)?,
        None => return Err(HarnessError::Invalid { key: "strategy".into(), reason: "no strategy given".into() }),
    };

    let mut cfg = ExperimentConfig::new(task, strategy);
    for (k, v, o) in &settings {
        apply(&mut cfg, k, v, o)?;
    }
    let given: BTreeMap<&str, &Origin> = settings.iter().map(|(k, _, o)| (k.as_str(), o)).collect();
    if !given.contains_key("total_timesteps") {
        cfg.total_timesteps = cfg.shift + cfg.adaptation + 1_000_000;
    }
    if !strategy.is_guided() {
        for key in ["shift", "adaptation", "epsilon_end"] {
            if let Some(origin) = given.get(key) {
                return Err(HarnessError::Conflict(format!(
                    "{key} (set at {origin}) only applies to guided strategies, not {strategy}"
                )));
            }
        }
    }
    if cfg.plo && strategy == Strategy::Shaped {
        return Err(HarnessError::Conflict("plo gates updates on the sparse reward; the shaped baseline has none".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Builds the policy set of a strategy: `main` on the sparse reward (or the
/// shaped reward for the shaped baseline), plus one shaped auxiliary when guided.
pub fn build_policies<R: rand::Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> PolicySet<f32> {
    let spec = NetSpec::new(10, 10);
    let main_stream = if cfg.strategy == Strategy::Shaped { RewardStream::Shaped } else { RewardStream::Sparse };
    let mut policies = vec![Policy::new("main", main_stream, spec.clone(), cfg.num_envs, cfg.gamma, cfg.norm_reward, rng)];
    if cfg.strategy.is_guided() {
        policies.push(Policy::new("aux", RewardStream::Shaped, spec, cfg.num_envs, cfg.gamma, cfg.norm_reward, rng));
    }
    PolicySet { policies }
}

/// Policy slots that always get metric columns.
pub const POLICY_SLOTS: [&str; 2] = ["main", "aux"];
const POLICY_FIELDS: [&str; 9] =
    ["updated", "policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction", "grad_norm", "explained_variance", "plo_skips"];

/// One row of `metrics.csv`, written after every update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub global_step: u64,
    pub update: u64,
    pub wall_seconds: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    /// Episodes that ended during this rollout.
    pub episodes: usize,
    /// Mean returns of those episodes; NaN when none ended.
    pub episode_reward_sparse: f64,
    pub episode_reward_shaped: f64,
    pub episode_length: f64,
    /// Mean sparse return of the last 100 episodes so far.
    pub trailing_reward_sparse: f64,
    pub policies: Vec<PolicyColumns>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyColumns {
    pub present: bool,
    pub report: PolicyReport,
    pub plo_skips: u64,
}

impl MetricsRow {
    pub fn header() -> Vec<String> {
        let mut h: Vec<String> = [
            "global_step",
            "update",
            "wall_seconds",
            "epsilon",
            "learning_rate",
            "episodes",
            "episode_reward_sparse",
            "episode_reward_shaped",
            "episode_length",
            "trailing_reward_sparse",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for slot in POLICY_SLOTS {
            h.extend(POLICY_FIELDS.iter().map(|f| format!("{slot}_{f}")));
        }
        h
    }

    pub fn record(&self) -> Vec<String> {
        let f = |v: f64| if v.is_nan() { "nan".to_string() } else { format!("{v}") };
        let mut r = vec![
            self.global_step.to_string(),
            self.update.to_string(),
            format!("{:.3}", self.wall_seconds),
            f(self.epsilon),
            f(self.learning_rate),
            self.episodes.to_string(),
            f(self.episode_reward_sparse),
            f(self.episode_reward_shaped),
            f(self.episode_length),
            f(self.trailing_reward_sparse),
        ];
        for slot in 0..POLICY_SLOTS.len() {
            match self.policies.get(slot).filter(|p| p.present) {
                Some(p) => {
                    let s: UpdateStats = p.report.stats;
                    let updated = !p.report.skipped;
                    let stat = |v: f64| if updated { f(v) } else { "nan".to_string() };
                    r.push(if updated { "1" } else { "0" }.to_string());
                    for v in [s.policy_loss, s.value_loss, s.entropy, s.approx_kl, s.clip_fraction, s.grad_norm, s.explained_variance] {
                        r.push(stat(v));
                    }
                    r.push(p.plo_skips.to_string());
                }
                None => r.extend(std::iter::repeat_n("nan".to_string(), POLICY_FIELDS.len())),
            }
        }
        r
    }
}

const TRAILING: usize = 100;
const CHECKPOINT_FORMAT: &str = "action-guidance-checkpoint/1";

/// Everything needed to continue a run exactly.
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub set: PolicySet<f32>,
    pub venv: VecEnv,
    pub obs_norm: ObsNormalizer,
    pub rng: ChaCha8Rng,
    pub global_step: u64,
    pub update: u64,
    pub trailing: VecDeque<f64>,
    pub plo_skips: Vec<u64>,
    pub wall_offset: f64,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let set = build_policies(&cfg, &mut rng);
        let env_seed = rng.next_u64();
        let venv = VecEnv::new(cfg.task, cfg.env_config(), cfg.num_envs, env_seed)
            .map_err(|e| HarnessError::Invalid { key: "max_ticks".into(), reason: e.to_string() })?;
        let obs_norm = ObsNormalizer::new(set.main().net.spec.obs_len(), cfg.norm_obs);
        let n = set.policies.len();
        Ok(Self {
            cfg,
            set,
            venv,
            obs_norm,
            rng,
            global_step: 0,
            update: 0,
            trailing: VecDeque::with_capacity(TRAILING),
            plo_skips: vec![0; n],
            wall_offset: 0.0,
            started: Instant::now(),
        })
    }

    pub fn finished(&self) -> bool {
        self.update >= self.cfg.num_updates()
    }

    pub fn trailing_mean(&self) -> f64 {
        if self.trailing.is_empty() {
            f64::NAN
        } else {
            self.trailing.iter().sum::<f64>() / self.trailing.len() as f64
        }
    }

    /// One rollout followed by one update of every policy.
    pub fn step(&mut self) -> (MetricsRow, Vec<EpisodeRecord>) {
        let lr = self.cfg.learning_rate_at(self.global_step);
        let schedule = self.cfg.schedule();
        let batch = collect_rollout(
            &mut self.venv,
            &self.set,
            &schedule,
            &mut self.obs_norm,
            &mut self.global_step,
            self.cfg.num_steps,
            &mut self.rng,
        );
        let reports = update_policies(&mut self.set, &batch, self.cfg.gae(), &self.cfg.loss(), &self.cfg.plo_config(), lr, &mut self.rng);
        self.update += 1;
        for (skips, r) in self.plo_skips.iter_mut().zip(&reports) {
            *skips += r.skipped as u64;
        }
        for ep in &batch.episodes {
            if self.trailing.len() == TRAILING {
                self.trailing.pop_front();
            }
            self.trailing.push_back(ep.sparse_return);
        }
        let mean = |f: &dyn Fn(&EpisodeRecord) -> f64| {
            if batch.episodes.is_empty() {
                f64::NAN
            } else {
                batch.episodes.iter().map(f).sum::<f64>() / batch.episodes.len() as f64
            }
        };
        let row = MetricsRow {
            global_step: self.global_step,
            update: self.update,
            wall_seconds: self.wall_offset + self.started.elapsed().as_secs_f64(),
            epsilon: batch.epsilon,
            learning_rate: lr,
            episodes: batch.episodes.len(),
            episode_reward_sparse: mean(&|e| e.sparse_return),
            episode_reward_shaped: mean(&|e| e.shaped_return),
            episode_length: mean(&|e| e.length as f64),
            trailing_reward_sparse: self.trailing_mean(),
            policies: reports
                .iter()
                .zip(&self.plo_skips)
                .map(|(r, &s)| PolicyColumns { present: true, report: *r, plo_skips: s })
                .collect(),
        };
        (row, batch.episodes)
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        let spec = self.set.main().net.spec.clone();
        let sidecar = sidecar_for(&self.set);
        let meta = json!({
            "format": CHECKPOINT_FORMAT,
            "sidecar": sidecar,
            "config": self.cfg,
            "global_step": self.global_step,
            "update": self.update,
            "policies": self.set.policies.iter().map(|p| json!({
                "name": p.name,
                "stream": p.stream,
                "adam_step": p.adam.step,
                "adam_config": p.adam.config,
                "reward_scaler": p.reward_scaler,
            })).collect::<Vec<_>>(),
            "obs_norm": self.obs_norm,
            "rng": self.rng,
            "venv": self.venv,
            "trailing": self.trailing,
            "plo_skips": self.plo_skips,
            "wall_seconds": self.wall_offset + self.started.elapsed().as_secs_f64(),
            "spec": spec,
        });
        let mut ck = Checkpoint::new(meta);
        for p in &self.set.policies {
            for (i, name) in PARAM_NAMES.iter().enumerate() {
                ck.push(format!("{}/{name}", p.name), p.net.params[i].clone());
            }
            for (i, name) in PARAM_NAMES.iter().enumerate() {
                ck.push(format!("{}/adam.m/{name}", p.name), p.adam.m[i].clone());
                ck.push(format!("{}/adam.v/{name}", p.name), p.adam.v[i].clone());
            }
        }
        ck
    }

    /// Writes the checkpoint and its JSON sidecar (`<path>.json`).
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| HarnessError::Io { path: dir.to_path_buf(), source: e })?;
        }
        self.checkpoint().save(path)?;
        let sidecar = serde_json::to_string_pretty(&sidecar_for(&self.set))?;
        let side = sidecar_path(path);
        fs::write(&side, sidecar).map_err(|e| HarnessError::Io { path: side, source: e })?;
        Ok(())
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: &Path) -> Result<Self, HarnessError> {
        let ck = Checkpoint::<f32>::load(path)?;
        let meta = &ck.meta;
        if meta["format"] != CHECKPOINT_FORMAT {
            return Err(HarnessError::Checkpoint(format!("{} is not a training checkpoint", path.display())));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| HarnessError::Checkpoint(format!("missing {k}")));
        let cfg: ExperimentConfig = serde_json::from_value(field("config")?)?;
        let spec: NetSpec = serde_json::from_value(field("spec")?)?;
        let mut policies = Vec::new();
        for p in field("policies")?.as_array().cloned().unwrap_or_default() {
            let name: String = serde_json::from_value(p["name"].clone())?;
            let params = load_params(&ck, &format!("{name}/"), &spec)?;
            let m = load_params(&ck, &format!("{name}/adam.m/"), &spec)?;
            let v = load_params(&ck, &format!("{name}/adam.v/"), &spec)?;
            let adam = AdamState::<f32> {
                config: serde_json::from_value::<AdamConfig>(p["adam_config"].clone())?,
                m,
                v,
                step: serde_json::from_value(p["adam_step"].clone())?,
            };
            policies.push(Policy {
                stream: serde_json::from_value(p["stream"].clone())?,
                net: PolicyNet::from_params(spec.clone(), params),
                adam,
                reward_scaler: serde_json::from_value::<RewardScaler>(p["reward_scaler"].clone())?,
                name,
            });
        }
        if policies.is_empty() {
            return Err(HarnessError::Checkpoint("no policies stored".into()));
        }
        Ok(Self {
            set: PolicySet { policies },
            venv: serde_json::from_value(field("venv")?)?,
            obs_norm: serde_json::from_value(field("obs_norm")?)?,
            rng: serde_json::from_value(field("rng")?)?,
            global_step: serde_json::from_value(field("global_step")?)?,
            update: serde_json::from_value(field("update")?)?,
            trailing: serde_json::from_value(field("trailing")?)?,
            plo_skips: serde_json::from_value(field("plo_skips")?)?,
            wall_offset: serde_json::from_value(field("wall_seconds")?)?,
            cfg,
            started: Instant::now(),
        })
    }
}

fn sidecar_for(set: &PolicySet<f32>) -> Sidecar {
    Sidecar {
        spec: set.main().net.spec.clone(),
        param_names: PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
        policies: set.policies.iter().map(|p| p.name.clone()).collect(),
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn load_params(ck: &Checkpoint<f32>, prefix: &str, spec: &NetSpec) -> Result<Vec<Tensor<f32>>, HarnessError> {
    PARAM_NAMES
        .iter()
        .zip(spec.param_shapes())
        .map(|(name, shape)| {
            let key = format!("{prefix}{name}");
            let t = ck.get(&key).ok_or_else(|| HarnessError::Checkpoint(format!("missing tensor {key}")))?;
            if t.shape() != shape.as_slice() {
                return Err(HarnessError::Dimension(format!("{key} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t.clone())
        })
        .collect()
}

/// Files produced by [`run_experiment`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutputs {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub episodes: PathBuf,
    pub checkpoint: PathBuf,
    pub summary: RunSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub global_step: u64,
    pub episodes: u64,
    /// Mean sparse return of the last 100 training episodes.
    pub trailing_reward_sparse: f64,
    /// Best trailing mean seen at any update with at least 100 episodes.
    pub best_trailing_reward_sparse: f64,
    pub eval: Option<EvalResult>,
}

/// Trains `cfg` to completion in `cfg.out_dir/<run name>`, or continues the
/// run from `resume` when given.
pub fn run_experiment(cfg: ExperimentConfig, resume: Option<&Path>, mut progress: impl FnMut(&MetricsRow)) -> Result<RunOutputs, HarnessError> {
    let mut trainer = match resume {
        Some(p) => {
            let mut t = Trainer::resume(p)?;
            // Only the horizon and output options may change on resume.
            t.cfg.total_timesteps = cfg.total_timesteps;
            t.cfg.checkpoint_interval = cfg.checkpoint_interval;
            t.cfg.eval_episodes = cfg.eval_episodes;
            t.cfg.out_dir = cfg.out_dir.clone();
            t
        }
        None => Trainer::new(cfg)?,
    };
    let dir = trainer.cfg.out_dir.join(trainer.cfg.run_name());
    fs::create_dir_all(&dir).map_err(|e| HarnessError::Io { path: dir.clone(), source: e })?;
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e: std::io::Error| HarnessError::Io { path: p, source: e }
    };
    let run_json = dir.join("run.json");
    fs::write(&run_json, serde_json::to_string_pretty(&trainer.cfg)?).map_err(io(&run_json))?;

    let metrics_path = dir.join("metrics.csv");
    let episodes_path = dir.join("episodes.csv");
    let fresh = resume.is_none();
    let mut metrics = csv_writer(&metrics_path, fresh)?;
    let mut episodes = csv_writer(&episodes_path, fresh)?;
    if fresh {
        metrics.write_record(MetricsRow::header())?;
        episodes.write_record(["global_step", "env", "episode_reward_sparse", "episode_reward_shaped", "episode_length"])?;
    }
    let mut episode_count = 0u64;
    let mut best = f64::NAN;
    while !trainer.finished() {
        let (row, eps) = trainer.step();
        metrics.write_record(row.record())?;
        for e in &eps {
            episodes.write_record([
                e.global_step.to_string(),
                e.env.to_string(),
                e.sparse_return.to_string(),
                e.shaped_return.to_string(),
                e.length.to_string(),
            ])?;
        }
        metrics.flush().map_err(io(&metrics_path))?;
        episodes.flush().map_err(io(&episodes_path))?;
        episode_count += eps.len() as u64;
        if trainer.trailing.len() == TRAILING {
            best = best.max(trainer.trailing_mean());
            if best.is_nan() {
                best = trainer.trailing_mean();
            }
        }
        progress(&row);
        let every = trainer.cfg.checkpoint_interval;
        if every > 0 && trainer.update % every == 0 && !trainer.finished() {
            trainer.save(&dir.join(format!("checkpoint-{:06}.bin", trainer.update)))?;
        }
    }
    let checkpoint = dir.join("final.bin");
    trainer.save(&checkpoint)?;
    let eval = if trainer.cfg.eval_episodes > 0 {
        Some(evaluate(&checkpoint, trainer.cfg.task, trainer.cfg.eval_episodes, trainer.cfg.seed.wrapping_add(10_000))?)
    } else {
        None
    };
    let summary = RunSummary {
        global_step: trainer.global_step,
        episodes: episode_count,
        trailing_reward_sparse: trainer.trailing_mean(),
        best_trailing_reward_sparse: best,
        eval,
    };
    let summary_path = dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)?).map_err(io(&summary_path))?;
    Ok(RunOutputs { dir, metrics: metrics_path, episodes: episodes_path, checkpoint, summary })
}

fn csv_writer(path: &Path, fresh: bool) -> Result<csv::Writer<fs::File>, HarnessError> {
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)
        .map_err(|e| HarnessError::Io { path: path.to_path_buf(), source: e })?;
    Ok(csv::Writer::from_writer(file))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub episodes: usize,
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

/// Rolls out the main policy of a checkpoint with stochastic sampling and
/// no guidance, reporting the sparse return per episode.
pub fn evaluate(checkpoint: &Path, task: TaskId, episodes: usize, seed: u64) -> Result<EvalResult, HarnessError> {
    let trainer = Trainer::resume(checkpoint)?;
    let net = &trainer.set.main().net;
    if net.spec != NetSpec::new(10, 10) {
        return Err(HarnessError::Dimension(format!("checkpoint map {}x{} does not match 10x10", net.spec.height, net.spec.width)));
    }
    let env_cfg = trainer.cfg.env_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = GameState::reset_with(env_cfg.clone(), task, rng.next_u64())
            .map_err(|e| HarnessError::Invalid { key: "max_ticks".into(), reason: e.to_string() })?;
        while !state.done {
            let (obs, mask) = state.observe();
            let raw: Vec<f64> = obs.data.iter().map(|&v| v as f64).collect();
            let x: Vec<f32> = trainer.obs_norm.apply(&raw).into_iter().map(|v| v as f32).collect();
            let (dists, _) = net.evaluate(Tensor::new(vec![x.len()], x), &mask.flat());
            let (action, _) = dists[0].sample(&mut rng);
            state.advance(&action).expect("live episode");
        }
        returns.push(state.episode.sparse_return);
    }
    let n = returns.len().max(1) as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalResult { episodes, mean, std, returns })
}
