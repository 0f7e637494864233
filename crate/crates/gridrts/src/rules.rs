use serde::{Deserialize, Serialize};

use crate::action::{ActionMask, ActionType, ActionVector, NUM_ACTION_TYPES, NUM_DIRECTIONS, NUM_PRODUCE_TYPES};
use crate::state::GameState;
use crate::units::{Direction, Owner, PendingAction, Player, Unit, UnitKind};

/// Legal choices of one non-busy unit in the current state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitOptions {
    pub unit_id: u32,
    pub cell: usize,
    pub move_dirs: [bool; NUM_DIRECTIONS],
    pub harvest_dirs: [bool; NUM_DIRECTIONS],
    pub return_dirs: [bool; NUM_DIRECTIONS],
    pub produce_dirs: [bool; NUM_DIRECTIONS],
    pub produce_types: [bool; NUM_PRODUCE_TYPES],
    /// Cells holding an enemy unit within attack range.
    pub attack_targets: Vec<usize>,
}

impl UnitOptions {
    pub fn action_types(&self) -> [bool; NUM_ACTION_TYPES] {
        [
            true,
            self.move_dirs.iter().any(|&b| b),
            self.harvest_dirs.iter().any(|&b| b),
            self.return_dirs.iter().any(|&b| b),
            self.produce_dirs.iter().any(|&b| b) && self.produce_types.iter().any(|&b| b),
            !self.attack_targets.is_empty(),
        ]
    }
}

/// Units of `player` that may receive a command this tick, in unit id order.
pub fn available_units(state: &GameState, player: Player) -> Vec<&Unit> {
    let mut units: Vec<&Unit> = state.units_of(player).filter(|u| !u.is_busy()).collect();
    units.sort_by_key(|u| u.id);
    units
}

pub fn unit_options(state: &GameState, unit: &Unit) -> UnitOptions {
    let stats = state.config.rules.get(unit.kind);
    let player = match unit.owner {
        Owner::Player(p) => p,
        Owner::Neutral => Player::One,
    };
    let mut o = UnitOptions {
        unit_id: unit.id,
        cell: state.cell_index(unit.pos),
        move_dirs: [false; NUM_DIRECTIONS],
        harvest_dirs: [false; NUM_DIRECTIONS],
        return_dirs: [false; NUM_DIRECTIONS],
        produce_dirs: [false; NUM_DIRECTIONS],
        produce_types: [false; NUM_PRODUCE_TYPES],
        attack_targets: Vec::new(),
    };
    if unit.owner == Owner::Neutral {
        return o;
    }
    let stockpile = state.player_resources[player.index()];
    for kind in &stats.produces {
        if state.config.rules.get(*kind).cost <= stockpile && *kind != UnitKind::Resource {
            o.produce_types[kind.index()] = true;
        }
    }
    let can_produce = o.produce_types.iter().any(|&b| b);
    for dir in Direction::ALL {
        let p = unit.pos.step(dir);
        let d = dir.index();
        let free = state.is_free(p);
        o.move_dirs[d] = stats.can_move && free;
        o.produce_dirs[d] = can_produce && free;
        if stats.can_harvest && state.in_bounds(p) {
            if let Some(n) = state.unit_at(p) {
                o.harvest_dirs[d] = unit.resources == 0 && n.kind == UnitKind::Resource && n.resources > 0;
                o.return_dirs[d] = unit.resources > 0 && n.kind == UnitKind::Base && n.is_owned_by(player);
            }
        }
    }
    if stats.can_attack() {
        let reach = stats.attack_range * stats.attack_range;
        let mut targets: Vec<usize> = state
            .units_of(player.opponent())
            .filter(|e| e.pos.dist_sq(unit.pos) <= reach)
            .map(|e| state.cell_index(e.pos))
            .collect();
        targets.sort_unstable();
        o.attack_targets = targets;
    }
    if !o.produce_dirs.iter().any(|&b| b) {
        o.produce_types = [false; NUM_PRODUCE_TYPES];
    }
    o
}

/// Component masks for player one.
pub fn valid_action_mask(state: &GameState) -> ActionMask {
    valid_action_mask_for(state, Player::One)
}

/// Source cells of available units; every other component is the union of
/// those units' legal choices. Components left empty fall back to index 0.
pub fn valid_action_mask_for(state: &GameState, player: Player) -> ActionMask {
    let mut mask = ActionMask::empty(state.height(), state.width());
    let units = available_units(state, player);
    if units.is_empty() {
        let source = mask.component_mut(0);
        for u in state.units_of(player) {
            source[state.cell_index(u.pos)] = true;
        }
        mask.component_mut(1)[ActionType::Noop.index()] = true;
    } else {
        for unit in units {
            let o = unit_options(state, unit);
            mask.component_mut(0)[o.cell] = true;
            or_into(mask.component_mut(1), &o.action_types());
            or_into(mask.component_mut(2), &o.move_dirs);
            or_into(mask.component_mut(3), &o.harvest_dirs);
            or_into(mask.component_mut(4), &o.return_dirs);
            or_into(mask.component_mut(5), &o.produce_dirs);
            or_into(mask.component_mut(6), &o.produce_types);
            for &c in &o.attack_targets {
                mask.component_mut(7)[c] = true;
            }
        }
    }
    for i in 0..crate::action::NUM_COMPONENTS {
        let c = mask.component_mut(i);
        if !c.iter().any(|&b| b) {
            c[0] = true;
        }
    }
    mask
}

fn or_into(dst: &mut [bool], src: &[bool]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d |= s;
    }
}

/// What an [`ActionVector`] resolves to once checked against the state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Noop,
    Issue { unit_id: u32, action: PendingAction },
}

/// Interprets `action` for `player`. Anything that does not name an
/// available unit with a legal parameter for the chosen type is a NOOP.
pub fn resolve_command(state: &GameState, player: Player, action: &ActionVector) -> Command {
    if action.source_unit >= state.cells() {
        return Command::Noop;
    }
    let pos = state.cell_pos(action.source_unit);
    let Some(unit) = state.unit_at(pos) else { return Command::Noop };
    if !unit.is_owned_by(player) || unit.is_busy() {
        return Command::Noop;
    }
    let Some(kind) = ActionType::from_index(action.action_type) else { return Command::Noop };
    let o = unit_options(state, unit);
    let dir_ok = |dirs: &[bool; NUM_DIRECTIONS], d: usize| dirs.get(d).copied().unwrap_or(false);
    let neighbour = |d: usize| pos.step(Direction::ALL[d]);
    let pending = match kind {
        ActionType::Noop => return Command::Noop,
        ActionType::Move if dir_ok(&o.move_dirs, action.move_dir) => PendingAction::Move { to: neighbour(action.move_dir) },
        ActionType::Harvest if dir_ok(&o.harvest_dirs, action.harvest_dir) => {
            PendingAction::Harvest { from: neighbour(action.harvest_dir) }
        }
        ActionType::Return if dir_ok(&o.return_dirs, action.return_dir) => {
            PendingAction::Return { to: neighbour(action.return_dir) }
        }
        ActionType::Produce
            if dir_ok(&o.produce_dirs, action.produce_dir)
                && o.produce_types.get(action.produce_type).copied().unwrap_or(false) =>
        {
            let Some(kind) = UnitKind::from_index(action.produce_type) else { return Command::Noop };
            PendingAction::Produce { kind, at: neighbour(action.produce_dir) }
        }
        ActionType::Attack if o.attack_targets.contains(&action.attack_target) => {
            PendingAction::Attack { target: state.cell_pos(action.attack_target) }
        }
        _ => return Command::Noop,
    };
    Command::Issue { unit_id: unit.id, action: pending }
}

/// Duration in ticks of a pending action for `unit`.
pub(crate) fn duration(state: &GameState, unit: &Unit, action: &PendingAction) -> u32 {
    let stats = state.config.rules.get(unit.kind);
    let ticks = match action {
        PendingAction::Move { .. } => stats.move_time,
        PendingAction::Harvest { .. } => stats.harvest_time,
        PendingAction::Return { .. } => stats.return_time,
        PendingAction::Produce { kind, .. } => state.config.rules.get(*kind).production_time,
        PendingAction::Attack { .. } => stats.attack_time,
    };
    ticks.max(1)
}
