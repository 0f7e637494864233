//! A small real-time strategy gridworld: two players, durative unit actions,
//! one command per player per decision, and three tasks that each expose a
//! sparse and a shaped reward on every transition.

mod action;
mod bot;
mod observation;
mod reward;
mod rules;
mod sim;
mod state;
mod units;

pub use action::{
    component_widths, ActionMask, ActionType, ActionVector, NUM_ACTION_TYPES, NUM_COMPONENTS, NUM_DIRECTIONS,
    NUM_PRODUCE_TYPES,
};
pub use bot::{biased_random_bot, bot_type_distribution, BOT_TYPE_WEIGHTS};
pub use observation::{cell_features, encode_observation, Observation, NUM_PLANES, PLANE_GROUPS};
pub use reward::{compute_rewards, RewardStream, RewardVector};
pub use rules::{available_units, resolve_command, unit_options, valid_action_mask, valid_action_mask_for, Command, UnitOptions};
pub use sim::{StepInfo, StepResult};
pub use state::{EnvConfig, EpisodeStats, Events, GameState, Outcome, ResourceLedger, TaskId};
pub use units::{Direction, Owner, PendingAction, Player, Pos, Rules, Unit, UnitKind, UnitStats};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GridError {
    #[error("step called on a terminal state")]
    Terminal,
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("state json: {0}")]
    Json(String),
}

/// Initial state, observation and mask.
pub fn reset(task: TaskId, seed: u64) -> (GameState, Observation, ActionMask) {
    let state = GameState::reset(task, seed);
    let (obs, mask) = state.observe();
    (state, obs, mask)
}
