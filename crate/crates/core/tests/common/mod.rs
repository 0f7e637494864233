#![allow(dead_code)]

use action_guidance::agent::NetSpec;
use action_guidance::guidance::{collect_rollout, GuidanceSchedule, Policy, PolicySet, RolloutBatch, VecEnv};
use action_guidance::ppo::ObsNormalizer;
use gridrts::{ActionMask, ActionVector, EnvConfig, GameState, Observation, RewardStream, TaskId, NUM_COMPONENTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform choice among the mask-valid entries of every component.
pub fn masked_random_action<R: Rng + ?Sized>(mask: &ActionMask, rng: &mut R) -> ActionVector {
    let mut a = [0usize; NUM_COMPONENTS];
    for (i, slot) in a.iter_mut().enumerate() {
        let valid: Vec<usize> = (0..mask.component(i).len()).filter(|&j| mask.component(i)[j]).collect();
        *slot = valid[rng.random_range(0..valid.len())];
    }
    ActionVector::from_array(a)
}

/// States visited by masked-random play, restarting finished episodes.
pub fn visited_states(task: TaskId, count: usize, seed: u64) -> Vec<(Observation, ActionMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = GameState::reset(task, rng.random());
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let (obs, mask) = s.observe();
        let a = masked_random_action(&mask, &mut rng);
        out.push((obs, mask));
        s.advance(&a).unwrap();
        if s.done {
            s = GameState::reset(task, rng.random());
        }
    }
    out
}

pub fn spec() -> NetSpec {
    NetSpec::new(10, 10)
}

/// Main on the sparse reward, plus `aux` shaped auxiliaries.
pub fn policy_set(aux: usize, num_envs: usize, seed: u64) -> PolicySet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policies = vec![Policy::new("main", RewardStream::Sparse, spec(), num_envs, 0.99, true, &mut rng)];
    for i in 0..aux {
        policies.push(Policy::new(&format!("aux{i}"), RewardStream::Shaped, spec(), num_envs, 0.99, true, &mut rng));
    }
    PolicySet { policies }
}

pub fn rollout(
    set: &PolicySet<f64>,
    task: TaskId,
    schedule: GuidanceSchedule,
    num_envs: usize,
    num_steps: usize,
    seed: u64,
) -> RolloutBatch<f64> {
    let mut venv = VecEnv::new(task, EnvConfig::default(), num_envs, seed).unwrap();
    let mut norm = ObsNormalizer::new(spec().obs_len(), true);
    let mut step = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    collect_rollout(&mut venv, set, &schedule, &mut norm, &mut step, num_steps, &mut rng)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
