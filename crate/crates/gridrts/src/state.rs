use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::units::{Owner, Player, Pos, Rules, Unit, UnitKind};
use crate::GridError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskId {
    LearnToAttack,
    ProduceCombatUnits,
    DefeatRandomEnemy,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::LearnToAttack, TaskId::ProduceCombatUnits, TaskId::DefeatRandomEnemy];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::LearnToAttack => "LearnToAttack",
            TaskId::ProduceCombatUnits => "ProduceCombatUnits",
            TaskId::DefeatRandomEnemy => "DefeatRandomEnemy",
        }
    }

    /// Whether player two is driven by the biased random bot.
    pub fn has_opponent(self) -> bool {
        matches!(self, TaskId::DefeatRandomEnemy)
    }
}

impl std::str::FromStr for TaskId {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        TaskId::ALL
            .into_iter()
            .find(|t| t.name().to_ascii_lowercase() == key)
            .ok_or_else(|| GridError::UnknownTask(s.to_string()))
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Map and episode parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub height: usize,
    pub width: usize,
    pub max_ticks: u32,
    pub starting_resources: i32,
    pub resource_cell_amount: i32,
    /// Game ticks advanced per agent decision (the issuing tick plus skipped frames).
    pub ticks_per_step: u32,
    pub rules: Rules,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            height: 10,
            width: 10,
            max_ticks: 2000,
            starting_resources: 5,
            resource_cell_amount: 10,
            ticks_per_step: 10,
            rules: Rules::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), GridError> {
        if self.height < 4 || self.width < 4 {
            return Err(GridError::InvalidConfig(format!("map {}x{} is smaller than 4x4", self.height, self.width)));
        }
        if self.ticks_per_step == 0 {
            return Err(GridError::InvalidConfig("ticks_per_step must be positive".into()));
        }
        if self.max_ticks == 0 {
            return Err(GridError::InvalidConfig("max_ticks must be positive".into()));
        }
        if self.rules.stats.len() != UnitKind::ALL.len() {
            return Err(GridError::InvalidConfig("rules must list all seven unit kinds".into()));
        }
        Ok(())
    }
}

/// What happened during one transition, per player.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Events {
    pub harvested: i32,
    pub returned: i32,
    pub workers_produced: i32,
    pub buildings_constructed: i32,
    pub combat_units_produced: i32,
    pub valid_attacks: i32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Win(Player),
    Draw,
}

/// Running totals of the current episode, from player one's side.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub sparse_return: f64,
    pub shaped_return: f64,
    pub decisions: u32,
}

/// Where the resources of the episode went.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceLedger {
    pub on_ground: i64,
    pub carried: i64,
    pub stockpiles: i64,
    /// Deducted for production that has not completed yet.
    pub in_production: i64,
    /// Deducted for production that completed or was cancelled.
    pub spent: i64,
    /// Carried by workers that were destroyed.
    pub destroyed: i64,
}

impl ResourceLedger {
    pub fn total(&self) -> i64 {
        self.on_ground + self.carried + self.stockpiles + self.in_production + self.spent + self.destroyed
    }
}

/// Full simulator state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameState {
    pub config: EnvConfig,
    pub task: TaskId,
    pub tick: u32,
    pub units: Vec<Unit>,
    pub player_resources: [i32; 2],
    pub next_unit_id: u32,
    pub rng: ChaCha8Rng,
    /// Resources deducted for production, per player.
    pub spent: [i64; 2],
    pub destroyed_cargo: i64,
    /// Events of the most recent transition.
    pub events: [Events; 2],
    pub outcome: Option<Outcome>,
    pub done: bool,
    pub episode: EpisodeStats,
}

impl GameState {
    /// Initial state of `task` on the default 10x10 map.
    pub fn reset(task: TaskId, seed: u64) -> Self {
        Self::reset_with(EnvConfig::default(), task, seed).expect("default config is valid")
    }

    /// Mirrored opening: each player owns a base, a worker next to it and a
    /// two-cell resource cluster in its corner.
    pub fn reset_with(config: EnvConfig, task: TaskId, seed: u64) -> Result<Self, GridError> {
        let mut state = Self::empty(config, task, seed)?;
        let (h, w) = (state.config.height as i32, state.config.width as i32);
        let mirror = |p: Pos| Pos::new(h - 1 - p.row, w - 1 - p.col);
        let amount = state.config.resource_cell_amount;
        for owner in [Player::One, Player::Two] {
            let at = |p: Pos| if owner == Player::One { p } else { mirror(p) };
            state.add_resource(at(Pos::new(0, 0)), amount);
            state.add_resource(at(Pos::new(1, 0)), amount);
            state.add_unit(Owner::Player(owner), UnitKind::Base, at(Pos::new(2, 1)));
            state.add_unit(Owner::Player(owner), UnitKind::Worker, at(Pos::new(1, 1)));
        }
        Ok(state)
    }

    /// A map with no units, for building custom scenarios.
    pub fn empty(config: EnvConfig, task: TaskId, seed: u64) -> Result<Self, GridError> {
        config.validate()?;
        Ok(GameState {
            player_resources: [config.starting_resources; 2],
            config,
            task,
            tick: 0,
            units: Vec::new(),
            next_unit_id: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spent: [0; 2],
            destroyed_cargo: 0,
            events: [Events::default(); 2],
            outcome: None,
            done: false,
            episode: EpisodeStats::default(),
        })
    }

    pub fn add_resource(&mut self, pos: Pos, amount: i32) -> u32 {
        let id = self.add_unit(Owner::Neutral, UnitKind::Resource, pos);
        if let Some(u) = self.units.iter_mut().find(|u| u.id == id) {
            u.resources = amount;
        }
        id
    }

    /// Places a unit at full hit points. The caller keeps cells unique.
    pub fn add_unit(&mut self, owner: Owner, kind: UnitKind, pos: Pos) -> u32 {
        let id = self.next_unit_id;
        self.next_unit_id += 1;
        let hp = self.config.rules.get(kind).max_hp;
        self.units.push(Unit { id, owner, kind, pos, hp, resources: 0, busy_until: None, action: None });
        id
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn cells(&self) -> usize {
        self.config.height * self.config.width
    }

    pub fn in_bounds(&self, p: Pos) -> bool {
        p.row >= 0 && p.col >= 0 && (p.row as usize) < self.config.height && (p.col as usize) < self.config.width
    }

    pub fn cell_index(&self, p: Pos) -> usize {
        p.row as usize * self.config.width + p.col as usize
    }

    pub fn cell_pos(&self, cell: usize) -> Pos {
        Pos::new((cell / self.config.width) as i32, (cell % self.config.width) as i32)
    }

    pub fn unit_at(&self, p: Pos) -> Option<&Unit> {
        self.units.iter().find(|u| u.pos == p)
    }

    pub fn unit(&self, id: u32) -> Option<&Unit> {
        self.units.iter().find(|u| u.id == id)
    }

    pub(crate) fn unit_mut(&mut self, id: u32) -> Option<&mut Unit> {
        self.units.iter_mut().find(|u| u.id == id)
    }

    /// Cells that in-flight moves or productions will occupy.
    pub fn is_reserved(&self, p: Pos) -> bool {
        self.units.iter().any(|u| {
            matches!(u.action, Some(crate::units::PendingAction::Move { to }) if to == p)
                || matches!(u.action, Some(crate::units::PendingAction::Produce { at, .. }) if at == p)
        })
    }

    /// In bounds, unoccupied and not reserved.
    pub fn is_free(&self, p: Pos) -> bool {
        self.in_bounds(p) && self.unit_at(p).is_none() && !self.is_reserved(p)
    }

    pub fn units_of(&self, player: Player) -> impl Iterator<Item = &Unit> {
        self.units.iter().filter(move |u| u.is_owned_by(player))
    }

    pub fn resource_ledger(&self) -> ResourceLedger {
        let mut l = ResourceLedger {
            stockpiles: self.player_resources.iter().map(|&r| r as i64).sum(),
            destroyed: self.destroyed_cargo,
            ..Default::default()
        };
        for u in &self.units {
            match u.kind {
                UnitKind::Resource => l.on_ground += u.resources as i64,
                _ => l.carried += u.resources as i64,
            }
            if let Some(crate::units::PendingAction::Produce { kind, .. }) = u.action {
                l.in_production += self.config.rules.get(kind).cost as i64;
            }
        }
        l.spent = self.spent.iter().sum::<i64>() - l.in_production;
        l
    }

    /// First base of `player` by unit id.
    pub fn base_of(&self, player: Player) -> Option<&Unit> {
        self.units_of(player).find(|u| u.kind == UnitKind::Base)
    }

    /// Euclidean distance from the opponent's base to `player`'s closest unit.
    ///
    /// Ties go to the lowest unit id. `None` when either side is missing.
    pub fn closest_unit_distance(&self, player: Player) -> Option<f64> {
        let base = self.base_of(player.opponent())?.pos;
        self.units_of(player)
            .map(|u| (u.pos.dist_sq(base), u.id))
            .min()
            .map(|(d2, _)| (d2 as f64).sqrt())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("state serialises")
    }

    pub fn from_json(s: &str) -> Result<Self, GridError> {
        serde_json::from_str(s).map_err(|e| GridError::Json(e.to_string()))
    }
}
