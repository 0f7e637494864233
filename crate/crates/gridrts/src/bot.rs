use rand::seq::IndexedRandom;
use rand::Rng;

use crate::action::{ActionType, ActionVector, NUM_ACTION_TYPES};
use crate::rules::{available_units, unit_options};
use crate::state::GameState;
use crate::units::Player;

/// Sampling weight of each action type for the biased bot.
pub const BOT_TYPE_WEIGHTS: [f64; NUM_ACTION_TYPES] = [1.0, 1.0, 5.0, 5.0, 1.0, 5.0];

/// Probability of each action type given which types are valid for the
/// chosen unit. NOOP stays in the support whenever it is valid.
pub fn bot_type_distribution(valid: &[bool; NUM_ACTION_TYPES]) -> [f64; NUM_ACTION_TYPES] {
    let total: f64 = (0..NUM_ACTION_TYPES).filter(|&i| valid[i]).map(|i| BOT_TYPE_WEIGHTS[i]).sum();
    std::array::from_fn(|i| if valid[i] && total > 0.0 { BOT_TYPE_WEIGHTS[i] / total } else { 0.0 })
}

/// Random opponent that prefers attacking, harvesting and returning.
pub fn biased_random_bot<R: Rng + ?Sized>(state: &GameState, player: Player, rng: &mut R) -> ActionVector {
    let units = available_units(state, player);
    let Some(unit) = units.choose(rng) else { return ActionVector::NOOP };
    let o = unit_options(state, unit);
    let probs = bot_type_distribution(&o.action_types());
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            chosen = i;
            acc += p;
            if u < acc {
                break;
            }
        }
    }
    let pick = |flags: &[bool], rng: &mut R| -> usize {
        let idx: Vec<usize> = flags.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
        idx.choose(rng).copied().unwrap_or(0)
    };
    let mut action = ActionVector { source_unit: o.cell, action_type: chosen, ..ActionVector::NOOP };
    match ActionType::from_index(chosen) {
        Some(ActionType::Move) => action.move_dir = pick(&o.move_dirs, rng),
        Some(ActionType::Harvest) => action.harvest_dir = pick(&o.harvest_dirs, rng),
        Some(ActionType::Return) => action.return_dir = pick(&o.return_dirs, rng),
        Some(ActionType::Produce) => {
            action.produce_type = pick(&o.produce_types, rng);
            action.produce_dir = pick(&o.produce_dirs, rng);
        }
        Some(ActionType::Attack) => action.attack_target = o.attack_targets.choose(rng).copied().unwrap_or(0),
        _ => {}
    }
    action
}
