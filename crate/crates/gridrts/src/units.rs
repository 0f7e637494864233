use serde::{Deserialize, Serialize};

/// Unit kinds, in the order used by the produce-type action component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UnitKind {
    Resource,
    Base,
    Barracks,
    Worker,
    Light,
    Heavy,
    Ranged,
}

impl UnitKind {
    pub const ALL: [UnitKind; 7] = [
        UnitKind::Resource,
        UnitKind::Base,
        UnitKind::Barracks,
        UnitKind::Worker,
        UnitKind::Light,
        UnitKind::Heavy,
        UnitKind::Ranged,
    ];

    /// Index in the produce-type component.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_building(self) -> bool {
        matches!(self, UnitKind::Base | UnitKind::Barracks)
    }

    pub fn is_combat(self) -> bool {
        matches!(self, UnitKind::Light | UnitKind::Heavy | UnitKind::Ranged)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Player {
    One,
    Two,
}

impl Player {
    pub fn index(self) -> usize {
        match self {
            Player::One => 0,
            Player::Two => 1,
        }
    }

    pub fn opponent(self) -> Player {
        match self {
            Player::One => Player::Two,
            Player::Two => Player::One,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Owner {
    Player(Player),
    Neutral,
}

/// Statistics of one unit kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitStats {
    pub cost: i32,
    pub max_hp: i32,
    pub attack_damage: i32,
    /// Squared-Euclidean reach: a target at `(dr, dc)` is in range when
    /// `dr^2 + dc^2 <= attack_range^2`.
    pub attack_range: i32,
    pub attack_time: u32,
    /// Ticks needed to produce a unit of this kind.
    pub production_time: u32,
    pub move_time: u32,
    pub harvest_time: u32,
    pub return_time: u32,
    pub can_move: bool,
    pub can_harvest: bool,
    pub produces: Vec<UnitKind>,
}

impl UnitStats {
    pub fn can_attack(&self) -> bool {
        self.attack_damage > 0
    }
}

/// Per-kind statistics, indexed by [`UnitKind::index`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rules {
    pub stats: Vec<UnitStats>,
}

impl Rules {
    pub fn get(&self, kind: UnitKind) -> &UnitStats {
        &self.stats[kind.index()]
    }
}

impl Default for Rules {
    fn default() -> Self {
        let building = |cost, max_hp, production_time, produces| UnitStats {
            cost,
            max_hp,
            attack_damage: 0,
            attack_range: 0,
            attack_time: 0,
            production_time,
            move_time: 0,
            harvest_time: 0,
            return_time: 0,
            can_move: false,
            can_harvest: false,
            produces,
        };
        let mobile = |cost, max_hp, damage, range, production_time, can_harvest, produces| UnitStats {
            cost,
            max_hp,
            attack_damage: damage,
            attack_range: range,
            attack_time: 5,
            production_time,
            move_time: 10,
            harvest_time: 10,
            return_time: 10,
            can_move: true,
            can_harvest,
            produces,
        };
        let resource = UnitStats { produces: vec![], ..building(0, 1, 0, vec![]) };
        Self {
            stats: vec![
                resource,
                building(10, 10, 200, vec![UnitKind::Worker]),
                building(5, 4, 100, vec![UnitKind::Light, UnitKind::Heavy, UnitKind::Ranged]),
                mobile(1, 1, 1, 1, 50, true, vec![UnitKind::Base, UnitKind::Barracks]),
                mobile(2, 4, 2, 1, 80, false, vec![]),
                mobile(2, 4, 4, 1, 80, false, vec![]),
                mobile(2, 1, 1, 3, 80, false, vec![]),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub row: i32,
    pub col: i32,
}

impl Pos {
    pub fn new(row: i32, col: i32) -> Self {
        Self { row, col }
    }

    pub fn step(self, dir: Direction) -> Pos {
        let (dr, dc) = dir.delta();
        Pos { row: self.row + dr, col: self.col + dc }
    }

    pub fn dist_sq(self, other: Pos) -> i32 {
        let (dr, dc) = (self.row - other.row, self.col - other.col);
        dr * dr + dc * dc
    }

    pub fn dist(self, other: Pos) -> f64 {
        (self.dist_sq(other) as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    North,
    East,
    South,
    West,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::North, Direction::East, Direction::South, Direction::West];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Direction::North => (-1, 0),
            Direction::East => (0, 1),
            Direction::South => (1, 0),
            Direction::West => (0, -1),
        }
    }
}

/// A durative action in flight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PendingAction {
    Move { to: Pos },
    Harvest { from: Pos },
    Return { to: Pos },
    Produce { kind: UnitKind, at: Pos },
    Attack { target: Pos },
}

impl PendingAction {
    /// Index in the current-action observation group (0 is "none").
    pub fn plane(self) -> usize {
        match self {
            PendingAction::Move { .. } => 1,
            PendingAction::Harvest { .. } => 2,
            PendingAction::Return { .. } => 3,
            PendingAction::Produce { .. } => 4,
            PendingAction::Attack { .. } => 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: u32,
    pub owner: Owner,
    pub kind: UnitKind,
    pub pos: Pos,
    pub hp: i32,
    /// Carried resources for workers, remaining amount for resource cells.
    pub resources: i32,
    pub busy_until: Option<u32>,
    pub action: Option<PendingAction>,
}

impl Unit {
    pub fn is_owned_by(&self, player: Player) -> bool {
        self.owner == Owner::Player(player)
    }

    pub fn is_busy(&self) -> bool {
        self.busy_until.is_some()
    }
}
