use serde::{Deserialize, Serialize};

use crate::action::{ActionMask, ActionVector};
use crate::bot::biased_random_bot;
use crate::observation::{encode_observation, Observation};
use crate::reward::{rewards_from, RewardVector};
use crate::rules::{duration, resolve_command, valid_action_mask, Command};
use crate::state::{EpisodeStats, Events, GameState, Outcome, TaskId};
use crate::units::{Owner, PendingAction, Player, UnitKind};
use crate::GridError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub tick: u32,
    pub events: [Events; 2],
    pub outcome: Option<Outcome>,
    /// Totals of the finished episode; set only on the final transition.
    pub episode: Option<EpisodeStats>,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub observation: Observation,
    pub mask: ActionMask,
    pub reward: RewardVector,
    pub done: bool,
    pub info: StepInfo,
}

impl GameState {
    /// Observation and mask of the current state, as returned by `reset`.
    pub fn observe(&self) -> (Observation, ActionMask) {
        (encode_observation(self), valid_action_mask(self))
    }

    /// One agent decision: issue the agent's command (and the bot's, when
    /// the task has an opponent), then advance `ticks_per_step` ticks.
    pub fn step(&mut self, action: &ActionVector) -> Result<StepResult, GridError> {
        let reward = self.advance(action)?;
        let (observation, mask) = self.observe();
        let info = StepInfo {
            tick: self.tick,
            events: self.events,
            outcome: self.outcome,
            episode: self.done.then_some(self.episode),
        };
        Ok(StepResult { observation, mask, reward, done: self.done, info })
    }

    /// `step` without encoding the next observation.
    pub fn advance(&mut self, action: &ActionVector) -> Result<RewardVector, GridError> {
        if self.done {
            return Err(GridError::Terminal);
        }
        let d_prev = self.closest_unit_distance(Player::One);
        self.events = [Events::default(); 2];

        let command = resolve_command(self, Player::One, action);
        self.issue(Player::One, command);
        if self.task.has_opponent() {
            let mut rng = self.rng.clone();
            let bot_action = biased_random_bot(self, Player::Two, &mut rng);
            self.rng = rng;
            let command = resolve_command(self, Player::Two, &bot_action);
            self.issue(Player::Two, command);
        }

        for _ in 0..self.config.ticks_per_step {
            self.tick += 1;
            self.resolve_tick();
        }
        self.check_termination();

        let reward = rewards_from(self.task, d_prev, self);
        self.episode.sparse_return += reward.sparse;
        self.episode.shaped_return += reward.shaped;
        self.episode.decisions += 1;
        Ok(reward)
    }

    fn issue(&mut self, player: Player, command: Command) {
        let Command::Issue { unit_id, action } = command else { return };
        let Some(unit) = self.unit(unit_id) else { return };
        let ticks = duration(self, unit, &action);
        match action {
            PendingAction::Produce { kind, .. } => {
                let cost = self.config.rules.get(kind).cost;
                self.player_resources[player.index()] -= cost;
                self.spent[player.index()] += cost as i64;
            }
            PendingAction::Attack { .. } => self.events[player.index()].valid_attacks += 1,
            _ => {}
        }
        let busy_until = self.tick + ticks;
        if let Some(u) = self.unit_mut(unit_id) {
            u.busy_until = Some(busy_until);
            u.action = Some(action);
        }
    }

    fn resolve_tick(&mut self) {
        let mut due: Vec<u32> =
            self.units.iter().filter(|u| u.busy_until == Some(self.tick)).map(|u| u.id).collect();
        due.sort_unstable();
        for id in due {
            let Some(unit) = self.unit_mut(id) else { continue };
            let Some(action) = unit.action.take() else { continue };
            unit.busy_until = None;
            self.complete(id, action);
        }
    }

    fn complete(&mut self, id: u32, action: PendingAction) {
        let Some(unit) = self.unit(id).cloned() else { return };
        let Owner::Player(player) = unit.owner else { return };
        let p = player.index();
        match action {
            PendingAction::Move { to } => {
                if self.unit_at(to).is_none() {
                    if let Some(u) = self.unit_mut(id) {
                        u.pos = to;
                    }
                }
            }
            PendingAction::Harvest { from } => {
                let source = self.units.iter_mut().find(|u| u.pos == from && u.kind == UnitKind::Resource);
                if let Some(source) = source.filter(|s| s.resources > 0) {
                    source.resources -= 1;
                    let depleted = source.resources == 0;
                    if let Some(u) = self.unit_mut(id) {
                        u.resources += 1;
                    }
                    if depleted {
                        self.units.retain(|u| !(u.pos == from && u.kind == UnitKind::Resource));
                    }
                    self.events[p].harvested += 1;
                }
            }
            PendingAction::Return { to } => {
                let base_there = self.unit_at(to).is_some_and(|b| b.kind == UnitKind::Base && b.is_owned_by(player));
                if base_there && unit.resources > 0 {
                    self.player_resources[p] += unit.resources;
                    if let Some(u) = self.unit_mut(id) {
                        u.resources = 0;
                    }
                    self.events[p].returned += 1;
                }
            }
            PendingAction::Produce { kind, at } => {
                // The cell was reserved when production started.
                if self.unit_at(at).is_none() {
                    self.add_unit(unit.owner, kind, at);
                    let e = &mut self.events[p];
                    match kind {
                        UnitKind::Worker => e.workers_produced += 1,
                        k if k.is_building() => e.buildings_constructed += 1,
                        k if k.is_combat() => e.combat_units_produced += 1,
                        _ => {}
                    }
                }
            }
            PendingAction::Attack { target } => {
                let stats = self.config.rules.get(unit.kind);
                let (damage, reach) = (stats.attack_damage, stats.attack_range * stats.attack_range);
                let opponent = player.opponent();
                let hit = self.units.iter_mut().find(|u| u.pos == target && u.is_owned_by(opponent));
                if let Some(victim) = hit.filter(|v| v.pos.dist_sq(unit.pos) <= reach) {
                    victim.hp -= damage;
                    if victim.hp <= 0 {
                        let (victim_id, cargo) = (victim.id, victim.resources);
                        self.destroyed_cargo += cargo as i64;
                        self.units.retain(|u| u.id != victim_id);
                    }
                }
            }
        }
    }

    fn check_termination(&mut self) {
        let alive = [self.units_of(Player::One).count(), self.units_of(Player::Two).count()];
        let capped = self.tick >= self.config.max_ticks;
        match self.task {
            TaskId::LearnToAttack => self.done = capped || alive[1] == 0,
            TaskId::ProduceCombatUnits => self.done = capped,
            TaskId::DefeatRandomEnemy => {
                self.outcome = match (alive[0], alive[1]) {
                    (0, 0) => Some(Outcome::Draw),
                    (_, 0) => Some(Outcome::Win(Player::One)),
                    (0, _) => Some(Outcome::Win(Player::Two)),
                    _ if capped => Some(Outcome::Draw),
                    _ => None,
                };
                self.done = self.outcome.is_some();
            }
        }
    }
}
