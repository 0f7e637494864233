use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionType {
    Noop,
    Move,
    Harvest,
    Return,
    Produce,
    Attack,
}

impl ActionType {
    pub const ALL: [ActionType; 6] = [
        ActionType::Noop,
        ActionType::Move,
        ActionType::Harvest,
        ActionType::Return,
        ActionType::Produce,
        ActionType::Attack,
    ];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

pub const NUM_ACTION_TYPES: usize = 6;
pub const NUM_DIRECTIONS: usize = 4;
pub const NUM_PRODUCE_TYPES: usize = 7;
pub const NUM_COMPONENTS: usize = 8;

/// Widths of the eight action components for an `h x w` map.
pub fn component_widths(height: usize, width: usize) -> [usize; NUM_COMPONENTS] {
    let cells = height * width;
    [
        cells,
        NUM_ACTION_TYPES,
        NUM_DIRECTIONS,
        NUM_DIRECTIONS,
        NUM_DIRECTIONS,
        NUM_DIRECTIONS,
        NUM_PRODUCE_TYPES,
        cells,
    ]
}

/// One command for one unit: source cell, action type and the parameter of
/// every action type. Only the parameter matching `action_type` is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionVector {
    pub source_unit: usize,
    pub action_type: usize,
    pub move_dir: usize,
    pub harvest_dir: usize,
    pub return_dir: usize,
    pub produce_dir: usize,
    pub produce_type: usize,
    pub attack_target: usize,
}

impl ActionVector {
    pub const NOOP: ActionVector = ActionVector {
        source_unit: 0,
        action_type: 0,
        move_dir: 0,
        harvest_dir: 0,
        return_dir: 0,
        produce_dir: 0,
        produce_type: 0,
        attack_target: 0,
    };

    pub fn to_array(self) -> [usize; NUM_COMPONENTS] {
        [
            self.source_unit,
            self.action_type,
            self.move_dir,
            self.harvest_dir,
            self.return_dir,
            self.produce_dir,
            self.produce_type,
            self.attack_target,
        ]
    }

    pub fn from_array(a: [usize; NUM_COMPONENTS]) -> Self {
        Self {
            source_unit: a[0],
            action_type: a[1],
            move_dir: a[2],
            harvest_dir: a[3],
            return_dir: a[4],
            produce_dir: a[5],
            produce_type: a[6],
            attack_target: a[7],
        }
    }
}

/// Per-component validity flags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionMask {
    components: [Vec<bool>; NUM_COMPONENTS],
}

impl ActionMask {
    /// Mask with no bits set; callers must fill every component.
    pub(crate) fn empty(height: usize, width: usize) -> Self {
        let w = component_widths(height, width);
        Self { components: w.map(|n| vec![false; n]) }
    }

    pub fn from_components(components: [Vec<bool>; NUM_COMPONENTS]) -> Self {
        Self { components }
    }

    pub fn component(&self, i: usize) -> &[bool] {
        &self.components[i]
    }

    pub(crate) fn component_mut(&mut self, i: usize) -> &mut Vec<bool> {
        &mut self.components[i]
    }

    pub fn widths(&self) -> [usize; NUM_COMPONENTS] {
        std::array::from_fn(|i| self.components[i].len())
    }

    pub fn total_len(&self) -> usize {
        self.components.iter().map(Vec::len).sum()
    }

    /// Components concatenated in order.
    pub fn flat(&self) -> Vec<bool> {
        self.components.iter().flatten().copied().collect()
    }

    /// Whether every component of `action` is marked valid.
    pub fn allows(&self, action: &ActionVector) -> bool {
        action
            .to_array()
            .iter()
            .zip(&self.components)
            .all(|(&v, c)| c.get(v).copied().unwrap_or(false))
    }
}
