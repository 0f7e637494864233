use serde::{Deserialize, Serialize};

use crate::state::{GameState, Outcome, TaskId};
use crate::units::Player;

/// Both reward functions of a task, evaluated on the same transition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    /// The task's true objective.
    pub sparse: f64,
    /// The hand-designed dense reward.
    pub shaped: f64,
}

impl RewardVector {
    pub fn get(&self, stream: RewardStream) -> f64 {
        match stream {
            RewardStream::Sparse => self.sparse,
            RewardStream::Shaped => self.shaped,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewardStream {
    Sparse,
    Shaped,
}

/// Rewards of the transition `prev -> next`, for player one.
///
/// Event counts are read from `next`, which records what happened during the
/// transition; the issued action is reflected there already.
pub fn compute_rewards(prev: &GameState, next: &GameState, task: TaskId) -> RewardVector {
    rewards_from(task, prev.closest_unit_distance(Player::One), next)
}

pub(crate) fn rewards_from(task: TaskId, d_prev: Option<f64>, next: &GameState) -> RewardVector {
    let e = next.events[Player::One.index()];
    let approach = match (d_prev, next.closest_unit_distance(Player::One)) {
        (Some(a), Some(b)) => a - b,
        _ => 0.0,
    };
    match task {
        TaskId::LearnToAttack => {
            let sparse = e.valid_attacks as f64;
            RewardVector { sparse, shaped: approach + sparse }
        }
        TaskId::ProduceCombatUnits => {
            let combat = e.combat_units_produced as f64;
            let shaped = (e.buildings_constructed + e.harvested + e.returned) as f64 + 7.0 * combat;
            RewardVector { sparse: combat, shaped }
        }
        TaskId::DefeatRandomEnemy => {
            let sparse = match next.outcome {
                Some(Outcome::Win(Player::One)) => 1.0,
                Some(Outcome::Win(Player::Two)) => -1.0,
                _ => 0.0,
            };
            let win = if sparse > 0.0 { 5.0 } else { 0.0 };
            let shaped = win
                + (e.harvested + e.returned + e.workers_produced + e.valid_attacks) as f64
                + 0.2 * e.buildings_constructed as f64
                + 7.0 * e.combat_units_produced as f64
                + 0.2 * approach;
            RewardVector { sparse, shaped }
        }
    }
}
