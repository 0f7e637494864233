//! Behaviour-policy scheduling, shared rollouts and per-policy updates.

use gridrts::{ActionVector, EnvConfig, GameState, RewardStream, TaskId, NUM_COMPONENTS};
use numcore::{AdamConfig, AdamState, Scalar, Tensor};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{NetSpec, PolicyNet};
use crate::ppo::{compute_gae, optimize, GaeConfig, LossConfig, ObsNormalizer, RewardScaler, TrainBatch, UpdateStats};

pub const EPSILON_START: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSchedule {
    pub shift: u64,
    pub adaptation: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
}

impl GuidanceSchedule {
    pub fn new(shift: u64, adaptation: u64, epsilon_end: f64) -> Self {
        Self { shift, adaptation, epsilon_start: EPSILON_START, epsilon_end }
    }

    /// Never hands control to an auxiliary policy.
    pub fn disabled() -> Self {
        Self { shift: 0, adaptation: 0, epsilon_start: 0.0, epsilon_end: 0.0 }
    }
}

/// Probability of acting with an auxiliary policy at global step `t`.
pub fn epsilon_schedule(t: u64, s: &GuidanceSchedule) -> f64 {
    if t < s.shift {
        s.epsilon_start
    } else if t >= s.shift + s.adaptation {
        s.epsilon_end
    } else {
        let frac = (t - s.shift) as f64 / s.adaptation as f64;
        s.epsilon_start + frac * (s.epsilon_end - s.epsilon_start)
    }
}

/// Index into a [`PolicySet`]; 0 is the main policy.
pub type PolicyId = usize;
pub const MAIN: PolicyId = 0;

/// Main with probability `1 - epsilon`, otherwise a uniformly chosen auxiliary.
pub fn select_behavior<R: Rng + ?Sized>(epsilon: f64, num_aux: usize, rng: &mut R) -> PolicyId {
    if num_aux == 0 || rng.random::<f64>() >= epsilon {
        MAIN
    } else {
        1 + rng.random_range(0..num_aux)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy<T> {
    pub name: String,
    pub stream: RewardStream,
    pub net: PolicyNet<T>,
    pub adam: AdamState<T>,
    pub reward_scaler: RewardScaler,
}

impl<T: Scalar> Policy<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, stream: RewardStream, spec: NetSpec, num_envs: usize, gamma: f64, norm_reward: bool, rng: &mut R) -> Self {
        let net = PolicyNet::new(spec, rng);
        let adam = AdamState::new(&net.params, AdamConfig::default());
        Self { name: name.to_string(), stream, net, adam, reward_scaler: RewardScaler::new(num_envs, gamma, norm_reward) }
    }
}

/// The main policy followed by any auxiliaries.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySet<T> {
    pub policies: Vec<Policy<T>>,
}

impl<T: Scalar> PolicySet<T> {
    pub fn main(&self) -> &Policy<T> {
        &self.policies[MAIN]
    }

    pub fn num_aux(&self) -> usize {
        self.policies.len() - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PloCriterion {
    /// Any nonzero reward counts as signal.
    Nonzero,
    /// Only strictly positive rewards count.
    Positive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PloConfig {
    pub enabled: bool,
    pub criterion: PloCriterion,
}

impl Default for PloConfig {
    fn default() -> Self {
        Self { enabled: false, criterion: PloCriterion::Nonzero }
    }
}

/// Whether a policy bound to `rewards` should be updated.
pub fn plo_gate(rewards: &[f64], cfg: &PloConfig) -> bool {
    if !cfg.enabled {
        return true;
    }
    match cfg.criterion {
        PloCriterion::Nonzero => rewards.iter().any(|&r| r != 0.0),
        PloCriterion::Positive => rewards.iter().any(|&r| r > 0.0),
    }
}

/// Environments that reset themselves at episode end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VecEnv {
    pub task: TaskId,
    pub config: EnvConfig,
    pub envs: Vec<GameState>,
    /// Draws the seed of every new episode.
    pub seeder: ChaCha8Rng,
}

impl VecEnv {
    pub fn new(task: TaskId, config: EnvConfig, num_envs: usize, seed: u64) -> Result<Self, gridrts::GridError> {
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        let envs = (0..num_envs)
            .map(|_| GameState::reset_with(config.clone(), task, seeder.next_u64()))
            .collect::<Result<_, _>>()?;
        Ok(Self { task, config, envs, seeder })
    }

    fn reset_env(&mut self, e: usize) {
        let seed = self.seeder.next_u64();
        self.envs[e] = GameState::reset_with(self.config.clone(), self.task, seed).expect("config validated at construction");
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    /// Raw observations and masks of all environments, concatenated.
    pub fn observe(&self) -> (Vec<f64>, Vec<bool>) {
        let mut obs = Vec::new();
        let mut masks = Vec::new();
        for e in &self.envs {
            let (o, m) = e.observe();
            obs.extend(o.data.iter().map(|&v| v as f64));
            masks.extend(m.flat());
        }
        (obs, masks)
    }
}

/// A finished episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// Global step at which the episode ended.
    pub global_step: u64,
    pub env: usize,
    pub sparse_return: f64,
    pub shaped_return: f64,
    pub length: u32,
}

/// Transitions stored step-major: index `t * num_envs + e`.
#[derive(Clone, Debug)]
pub struct RolloutBatch<T> {
    pub num_envs: usize,
    pub num_steps: usize,
    /// Normalized observations fed to the policies.
    pub obs: Vec<T>,
    pub masks: Vec<bool>,
    pub actions: Vec<[usize; NUM_COMPONENTS]>,
    pub behavior: Vec<PolicyId>,
    pub behavior_logp: Vec<T>,
    pub sparse: Vec<f64>,
    pub shaped: Vec<f64>,
    pub dones: Vec<bool>,
    /// Normalized observations after the last step, one per environment.
    pub next_obs: Vec<T>,
    pub episodes: Vec<EpisodeRecord>,
    pub epsilon: f64,
}

impl<T> RolloutBatch<T> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn rewards(&self, stream: RewardStream) -> &[f64] {
        match stream {
            RewardStream::Sparse => &self.sparse,
            RewardStream::Shaped => &self.shaped,
        }
    }

    pub fn rewards_mut(&mut self, stream: RewardStream) -> &mut Vec<f64> {
        match stream {
            RewardStream::Sparse => &mut self.sparse,
            RewardStream::Shaped => &mut self.shaped,
        }
    }
}

fn to_scalar<T: Scalar>(x: Vec<f64>) -> Vec<T> {
    x.into_iter().map(T::cast).collect()
}

/// Steps every environment `num_steps` times, choosing the acting policy
/// per environment and step. Advances `global_step` by one per transition.
pub fn collect_rollout<T: Scalar, R: Rng + ?Sized>(
    venv: &mut VecEnv,
    set: &PolicySet<T>,
    schedule: &GuidanceSchedule,
    obs_norm: &mut ObsNormalizer,
    global_step: &mut u64,
    num_steps: usize,
    rng: &mut R,
) -> RolloutBatch<T> {
    let n = venv.len();
    let spec = set.main().net.spec.clone();
    let (obs_len, mask_len) = (spec.obs_len(), spec.mask_len());
    let epsilon = epsilon_schedule(*global_step, schedule);
    let mut batch = RolloutBatch {
        num_envs: n,
        num_steps,
        obs: Vec::with_capacity(n * num_steps * obs_len),
        masks: Vec::with_capacity(n * num_steps * mask_len),
        actions: Vec::with_capacity(n * num_steps),
        behavior: Vec::with_capacity(n * num_steps),
        behavior_logp: Vec::with_capacity(n * num_steps),
        sparse: Vec::with_capacity(n * num_steps),
        shaped: Vec::with_capacity(n * num_steps),
        dones: Vec::with_capacity(n * num_steps),
        next_obs: Vec::new(),
        episodes: Vec::new(),
        epsilon,
    };
    let (raw, mut masks) = venv.observe();
    let mut obs: Vec<T> = to_scalar(obs_norm.update_apply(&raw));

    for _ in 0..num_steps {
        let eps = epsilon_schedule(*global_step, schedule);
        let chosen: Vec<PolicyId> = (0..n).map(|_| select_behavior(eps, set.num_aux(), rng)).collect();
        let mut actions = vec![ActionVector::NOOP; n];
        let mut logps = vec![T::zero(); n];
        for (pid, policy) in set.policies.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&e| chosen[e] == pid).collect();
            if rows.is_empty() {
                continue;
            }
            let sub_obs: Vec<T> = rows.iter().flat_map(|&e| obs[e * obs_len..(e + 1) * obs_len].iter().copied()).collect();
            let sub_masks: Vec<bool> = rows.iter().flat_map(|&e| masks[e * mask_len..(e + 1) * mask_len].iter().copied()).collect();
            let (dists, _) = policy.net.evaluate(Tensor::new(vec![sub_obs.len()], sub_obs), &sub_masks);
            for (&e, dist) in rows.iter().zip(&dists) {
                let (a, lp) = dist.sample(rng);
                actions[e] = a;
                logps[e] = lp;
            }
        }

        batch.obs.extend_from_slice(&obs);
        batch.masks.extend_from_slice(&masks);
        for e in 0..n {
            let env = &mut venv.envs[e];
            let r = env.advance(&actions[e]).expect("environment is live");
            *global_step += 1;
            let done = env.done;
            if done {
                batch.episodes.push(EpisodeRecord {
                    global_step: *global_step,
                    env: e,
                    sparse_return: env.episode.sparse_return,
                    shaped_return: env.episode.shaped_return,
                    length: env.episode.decisions,
                });
                venv.reset_env(e);
            }
            batch.actions.push(actions[e].to_array());
            batch.behavior.push(chosen[e]);
            batch.behavior_logp.push(logps[e]);
            batch.sparse.push(r.sparse);
            batch.shaped.push(r.shaped);
            batch.dones.push(done);
        }
        let (raw, m) = venv.observe();
        obs = to_scalar(obs_norm.update_apply(&raw));
        masks = m;
    }
    batch.next_obs = obs;
    batch
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub skipped: bool,
    pub stats: UpdateStats,
}

/// Updates every policy that passes the PLO gate from the shared batch.
///
/// Each policy scales its own reward stream, recomputes its values on the
/// batch, estimates advantages, and is optimised off-policy against the
/// stored behaviour log-probabilities.
pub fn update_policies<T: Scalar, R: Rng + ?Sized>(
    set: &mut PolicySet<T>,
    batch: &RolloutBatch<T>,
    gae: GaeConfig,
    loss: &LossConfig,
    plo: &PloConfig,
    lr: f64,
    rng: &mut R,
) -> Vec<PolicyReport> {
    let mut reports = Vec::with_capacity(set.policies.len());
    for policy in set.policies.iter_mut() {
        let raw = batch.rewards(policy.stream);
        let scaled = scale_stream(&mut policy.reward_scaler, raw, &batch.dones, batch.num_envs);
        if !plo_gate(raw, plo) {
            reports.push(PolicyReport { skipped: true, stats: UpdateStats::default() });
            continue;
        }
        let train = prepare(&policy.net, batch, &scaled, gae);
        let stats = optimize(&mut policy.net, &mut policy.adam, &train, loss, lr, rng);
        reports.push(PolicyReport { skipped: false, stats });
    }
    reports
}

/// Reward scaling in collection order, one timestep of all environments at a time.
pub fn scale_stream(scaler: &mut RewardScaler, raw: &[f64], dones: &[bool], num_envs: usize) -> Vec<f64> {
    raw.chunks(num_envs).zip(dones.chunks(num_envs)).flat_map(|(r, d)| scaler.update_apply(r, d)).collect()
}

/// Values, advantages and returns of `net` on the batch for the given rewards.
pub fn prepare<T: Scalar>(net: &PolicyNet<T>, batch: &RolloutBatch<T>, rewards: &[f64], gae: GaeConfig) -> TrainBatch<T> {
    let (n, steps) = (batch.num_envs, batch.num_steps);
    let values: Vec<f64> = values_in_chunks(net, &batch.obs, 256);
    let bootstrap = values_in_chunks(net, &batch.next_obs, 256);
    let mut advantages = vec![0.0; n * steps];
    let mut returns = vec![0.0; n * steps];
    for e in 0..n {
        let col = |v: &[f64]| -> Vec<f64> { (0..steps).map(|t| v[t * n + e]).collect() };
        let dones: Vec<bool> = (0..steps).map(|t| batch.dones[t * n + e]).collect();
        let (adv, ret) = compute_gae(&col(rewards), &col(&values), &dones, bootstrap[e], gae);
        for t in 0..steps {
            advantages[t * n + e] = adv[t];
            returns[t * n + e] = ret[t];
        }
    }
    TrainBatch {
        obs: batch.obs.clone(),
        masks: batch.masks.clone(),
        actions: batch.actions.clone(),
        behavior_logp: batch.behavior_logp.clone(),
        advantages,
        returns,
        values,
    }
}

fn values_in_chunks<T: Scalar>(net: &PolicyNet<T>, obs: &[T], rows: usize) -> Vec<f64> {
    let obs_len = net.spec.obs_len();
    obs.chunks(rows * obs_len)
        .flat_map(|c| net.values(Tensor::new(vec![c.len()], c.to_vec())).into_iter().map(Scalar::as_f64))
        .collect()
}
