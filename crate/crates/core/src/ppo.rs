//! Advantage estimation, the clipped surrogate and its companions, running
//! normalizers, the minibatch optimizer, and a product-importance-sampling
//! reference estimator for tabular policies.

use gridrts::NUM_COMPONENTS;
use numcore::{adam_step, global_grad_clip, AdamState, Graph, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{entropy_rows, joint_log_prob, PolicyNet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self { gamma: 0.99, lambda: 0.95 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub max_grad_norm: f64,
    pub clip_value_loss: bool,
    pub normalize_advantages: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            clip: 0.1,
            value_coef: 0.5,
            entropy_coef: 0.01,
            epochs: 4,
            minibatches: 4,
            max_grad_norm: 0.5,
            clip_value_loss: true,
            normalize_advantages: true,
        }
    }
}

/// Backward recursion over one trajectory segment.
///
/// `dones[t]` marks that the episode ended with transition `t`, so nothing
/// is bootstrapped across it. Returns `(advantages, returns)`.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap_value: f64, cfg: GaeConfig) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "rewards, values and dones must align");
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + cfg.gamma * next_value * live - values[t];
        next_adv = delta + cfg.gamma * cfg.lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

pub fn clip_ratio(ratio: f64, eps: f64) -> f64 {
    if ratio > 1.0 + eps {
        1.0 + eps
    } else if ratio < 1.0 - eps {
        1.0 - eps
    } else {
        ratio
    }
}

/// Mean of `min(rho A, clip(rho) A)`; to be maximised.
pub fn clipped_surrogate(logp_target: &[f64], logp_behavior: &[f64], advantages: &[f64], eps: f64) -> f64 {
    let n = advantages.len();
    assert!(logp_target.len() == n && logp_behavior.len() == n);
    let total: f64 = (0..n)
        .map(|i| {
            let rho = (logp_target[i] - logp_behavior[i]).exp();
            (rho * advantages[i]).min(clip_ratio(rho, eps) * advantages[i])
        })
        .sum();
    total / n as f64
}

/// Mean of the larger of the unclipped and clipped squared errors.
pub fn value_loss_clipped(v_new: &[f64], v_old: &[f64], v_target: &[f64], eps: f64) -> f64 {
    let n = v_new.len();
    let total: f64 = (0..n)
        .map(|i| {
            let unclipped = (v_new[i] - v_target[i]).powi(2);
            let clipped = (v_old[i] + (v_new[i] - v_old[i]).clamp(-eps, eps) - v_target[i]).powi(2);
            unclipped.max(clipped)
        })
        .sum();
    total / n as f64
}

/// Objective to maximise.
pub fn joint_objective(surrogate: f64, value_loss: f64, entropy: f64, c1: f64, c2: f64) -> f64 {
    surrogate - c1 * value_loss + c2 * entropy
}

/// Zero mean, unit population standard deviation (plus 1e-8).
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    if adv.len() < 2 {
        return vec![0.0; adv.len()];
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    adv.iter().map(|a| (a - mean) / sd).collect()
}

/// Streaming mean and variance merged batch by batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningMeanStd {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
}

impl RunningMeanStd {
    /// Zero mean, unit variance and a tiny prior count.
    pub fn new(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim], count: 1e-4 }
    }

    /// Merges a batch given as `rows` consecutive vectors of length `dim`.
    pub fn update(&mut self, batch: &[f64]) {
        let dim = self.mean.len();
        let rows = batch.len() / dim;
        if rows == 0 {
            return;
        }
        let n = rows as f64;
        let mut bmean = vec![0.0; dim];
        for row in batch.chunks(dim) {
            for (m, x) in bmean.iter_mut().zip(row) {
                *m += x;
            }
        }
        bmean.iter_mut().for_each(|m| *m /= n);
        let mut bvar = vec![0.0; dim];
        for row in batch.chunks(dim) {
            for ((v, x), m) in bvar.iter_mut().zip(row).zip(&bmean) {
                *v += (x - m).powi(2);
            }
        }
        bvar.iter_mut().for_each(|v| *v /= n);
        let total = self.count + n;
        for i in 0..dim {
            let delta = bmean[i] - self.mean[i];
            let m2 = self.var[i] * self.count + bvar[i] * n + delta * delta * self.count * n / total;
            self.mean[i] += delta * n / total;
            self.var[i] = m2 / total;
        }
        self.count = total;
    }
}

pub const NORM_CLIP: f64 = 10.0;
const NORM_EPS: f64 = 1e-8;

/// Per-feature observation normalizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalizer {
    pub stats: RunningMeanStd,
    pub enabled: bool,
}

impl ObsNormalizer {
    pub fn new(dim: usize, enabled: bool) -> Self {
        Self { stats: RunningMeanStd::new(dim), enabled }
    }

    pub fn update(&mut self, batch: &[f64]) {
        if self.enabled {
            self.stats.update(batch);
        }
    }

    /// `(x - mean) / sqrt(var + 1e-8)` clipped to [-10, 10].
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        if !self.enabled {
            return x.to_vec();
        }
        let dim = self.stats.mean.len();
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = i % dim;
                ((v - self.stats.mean[j]) / (self.stats.var[j] + NORM_EPS).sqrt()).clamp(-NORM_CLIP, NORM_CLIP)
            })
            .collect()
    }

    pub fn update_apply(&mut self, batch: &[f64]) -> Vec<f64> {
        self.update(batch);
        self.apply(batch)
    }
}

/// Divides rewards by the running standard deviation of the discounted
/// return, tracked per environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardScaler {
    pub stats: RunningMeanStd,
    pub returns: Vec<f64>,
    pub gamma: f64,
    pub enabled: bool,
}

impl RewardScaler {
    pub fn new(num_envs: usize, gamma: f64, enabled: bool) -> Self {
        Self { stats: RunningMeanStd::new(1), returns: vec![0.0; num_envs], gamma, enabled }
    }

    /// Scales one reward per environment for a single timestep.
    pub fn update_apply(&mut self, rewards: &[f64], dones: &[bool]) -> Vec<f64> {
        if !self.enabled {
            return rewards.to_vec();
        }
        for (ret, r) in self.returns.iter_mut().zip(rewards) {
            *ret = *ret * self.gamma + r;
        }
        self.stats.update(&self.returns);
        let sd = (self.stats.var[0] + NORM_EPS).sqrt();
        let out = rewards.iter().map(|r| (r / sd).clamp(-NORM_CLIP, NORM_CLIP)).collect();
        for (ret, &d) in self.returns.iter_mut().zip(dones) {
            if d {
                *ret = 0.0;
            }
        }
        out
    }
}

/// Flattened training samples for one policy.
#[derive(Clone, Debug)]
pub struct TrainBatch<T> {
    /// `(n, h, w, planes)` flattened.
    pub obs: Vec<T>,
    pub masks: Vec<bool>,
    pub actions: Vec<[usize; NUM_COMPONENTS]>,
    /// Log-probabilities of the policy that generated each action.
    pub behavior_logp: Vec<T>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub values: Vec<f64>,
}

impl<T> TrainBatch<T> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub explained_variance: f64,
}

/// `K` epochs of shuffled minibatch steps on the clipped objective.
pub fn optimize<T: Scalar, R: Rng + ?Sized>(
    net: &mut PolicyNet<T>,
    adam: &mut AdamState<T>,
    batch: &TrainBatch<T>,
    cfg: &LossConfig,
    lr: f64,
    rng: &mut R,
) -> UpdateStats {
    let n = batch.len();
    let obs_len = net.spec.obs_len();
    let mask_len = net.spec.mask_len();
    let mb_size = n.div_ceil(cfg.minibatches.max(1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut acc = UpdateStats::default();
    let mut steps = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(mb_size) {
            let obs: Vec<T> = idx.iter().flat_map(|&i| batch.obs[i * obs_len..(i + 1) * obs_len].iter().copied()).collect();
            let masks: Vec<bool> = idx.iter().flat_map(|&i| batch.masks[i * mask_len..(i + 1) * mask_len].iter().copied()).collect();
            let actions: Vec<[usize; NUM_COMPONENTS]> = idx.iter().map(|&i| batch.actions[i]).collect();
            let pick = |v: &[f64]| -> Vec<f64> { idx.iter().map(|&i| v[i]).collect() };
            let adv = pick(&batch.advantages);
            let adv = if cfg.normalize_advantages { normalize_advantages(&adv) } else { adv };
            let returns = pick(&batch.returns);
            let v_old = pick(&batch.values);
            let behavior: Vec<T> = idx.iter().map(|&i| batch.behavior_logp[i]).collect();

            let mut g = Graph::new();
            let m = idx.len();
            let out = net.forward(&mut g, Tensor::new(vec![obs.len()], obs), true);
            let logp_all = g.masked_log_softmax(out.logits, &net.spec.segments(), masks);
            let logp = joint_log_prob(&mut g, logp_all, &net.spec, &actions);
            let loss_terms = clipped_loss(&mut g, logp, logp_all, out.value, &behavior, &adv, &returns, &v_old, cfg);

            let mut grads = g.backward(loss_terms.loss).expect("scalar loss");
            let mut grads: Vec<Tensor<T>> = out
                .params
                .iter()
                .zip(&net.params)
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
                .collect();
            let norm = global_grad_clip(&mut grads, cfg.max_grad_norm);
            adam_step(&mut net.params, &grads, adam, lr);

            let logp_new = g.value(logp).to_f64_vec();
            let mut kl = 0.0;
            let mut clipped = 0.0;
            for (lp, b) in logp_new.iter().zip(&behavior) {
                let log_ratio = lp - b.as_f64();
                kl += log_ratio.exp() - 1.0 - log_ratio;
                if (log_ratio.exp() - 1.0).abs() > cfg.clip {
                    clipped += 1.0;
                }
            }
            acc.policy_loss += g.value(loss_terms.policy_loss).item().as_f64();
            acc.value_loss += g.value(loss_terms.value_loss).item().as_f64();
            acc.entropy += g.value(loss_terms.entropy).item().as_f64();
            acc.approx_kl += kl / m as f64;
            acc.clip_fraction += clipped / m as f64;
            acc.grad_norm += norm;
            steps += 1.0;
        }
    }
    if steps > 0.0 {
        acc.policy_loss /= steps;
        acc.value_loss /= steps;
        acc.entropy /= steps;
        acc.approx_kl /= steps;
        acc.clip_fraction /= steps;
        acc.grad_norm /= steps;
    }
    acc.explained_variance = explained_variance(&batch.values, &batch.returns);
    acc
}

/// Scalar graph nodes of one minibatch loss.
pub struct LossTerms {
    pub loss: Var,
    /// Negated clipped surrogate.
    pub policy_loss: Var,
    pub value_loss: Var,
    pub entropy: Var,
}

/// `-(surrogate - c1 * value_loss + c2 * entropy)` on the graph.
#[allow(clippy::too_many_arguments)]
pub fn clipped_loss<T: Scalar>(
    g: &mut Graph<T>,
    logp: Var,
    logp_all: Var,
    value: Var,
    behavior_logp: &[T],
    advantages: &[f64],
    returns: &[f64],
    v_old: &[f64],
    cfg: &LossConfig,
) -> LossTerms {
    let m = advantages.len();
    let vec = |v: &[f64]| Tensor::from_f64(vec![m], v);
    let behavior = g.constant(Tensor::new(vec![m], behavior_logp.to_vec()));
    let adv = g.constant(vec(advantages));

    let log_ratio = g.sub(logp, behavior);
    let ratio = g.exp(log_ratio);
    let unclipped = g.mul(ratio, adv);
    let clipped_ratio = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let clipped = g.mul(clipped_ratio, adv);
    let surrogate = g.minimum(unclipped, clipped);
    let surrogate = g.mean(surrogate);
    let policy_loss = g.neg(surrogate);

    let v = g.reshape(value, &[m]);
    let target = g.constant(vec(returns));
    let err = g.sub(v, target);
    let sq = g.square(err);
    let value_loss = if cfg.clip_value_loss {
        let old = g.constant(vec(v_old));
        let dv = g.sub(v, old);
        let dv = g.clamp(dv, -cfg.clip, cfg.clip);
        let v_clipped = g.add(old, dv);
        let err_c = g.sub(v_clipped, target);
        let sq_c = g.square(err_c);
        let worst = g.maximum(sq, sq_c);
        g.mean(worst)
    } else {
        g.mean(sq)
    };

    let ent = entropy_rows(g, logp_all);
    let entropy = g.mean(ent);

    let weighted_v = g.scale(value_loss, cfg.value_coef);
    let weighted_e = g.scale(entropy, cfg.entropy_coef);
    let loss = g.add(policy_loss, weighted_v);
    let loss = g.sub(loss, weighted_e);
    LossTerms { loss, policy_loss, value_loss, entropy }
}

/// `1 - Var[returns - values] / Var[returns]`; NaN when returns are constant.
pub fn explained_variance(values: &[f64], returns: &[f64]) -> f64 {
    let n = returns.len() as f64;
    if n == 0.0 {
        return f64::NAN;
    }
    let var = |x: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = x.collect();
        let m = v.iter().sum::<f64>() / n;
        v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n
    };
    let vr = var(&mut returns.iter().copied());
    if vr == 0.0 {
        return f64::NAN;
    }
    1.0 - var(&mut returns.iter().zip(values).map(|(r, v)| r - v)) / vr
}

/// Softmax policy over a finite state and action set, one logit per pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    pub num_actions: usize,
    pub logits: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(num_states: usize, num_actions: usize, logits: Vec<f64>) -> Self {
        assert_eq!(logits.len(), num_states * num_actions);
        Self { num_actions, logits }
    }

    pub fn probs(&self, state: usize) -> Vec<f64> {
        let row = &self.logits[state * self.num_actions..(state + 1) * self.num_actions];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|x| x / z).collect()
    }

    pub fn log_prob(&self, state: usize, action: usize) -> f64 {
        self.probs(state)[action].ln()
    }

    /// Gradient of `log pi(action | state)` with respect to all logits.
    pub fn grad_log_prob(&self, state: usize, action: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.logits.len()];
        for (a, p) in self.probs(state).iter().enumerate() {
            g[state * self.num_actions + a] = if a == action { 1.0 } else { 0.0 } - p;
        }
        g
    }
}

/// One step of a recorded trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TabularStep {
    pub state: usize,
    pub action: usize,
    /// Advantage-like weight of the step.
    pub weight: f64,
}

/// Off-policy gradient of a whole trajectory with the product of
/// per-step importance ratios:
/// `prod_t pi(a_t|s_t)/b(a_t|s_t) * sum_t grad log pi(a_t|s_t) * A_t`.
pub fn is_product_gradient(trajectory: &[TabularStep], target: &TabularPolicy, behavior_logps: &[f64]) -> Vec<f64> {
    assert_eq!(trajectory.len(), behavior_logps.len());
    let log_rho: f64 = trajectory.iter().zip(behavior_logps).map(|(s, b)| target.log_prob(s.state, s.action) - b).sum();
    let rho = log_rho.exp();
    let mut grad = vec![0.0; target.logits.len()];
    for s in trajectory {
        for (g, d) in grad.iter_mut().zip(target.grad_log_prob(s.state, s.action)) {
            *g += d * s.weight;
        }
    }
    grad.iter_mut().for_each(|g| *g *= rho);
    grad
}
