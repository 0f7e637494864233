use serde::{Deserialize, Serialize};

use crate::state::GameState;
use crate::units::{Owner, Player, Unit, UnitKind};

pub const NUM_PLANES: usize = 27;
/// Sizes of the one-hot groups: hit points, resources, owner, unit type, current action.
pub const PLANE_GROUPS: [usize; 5] = [5, 5, 3, 8, 6];

/// Binary `(height, width, 27)` planes, row-major with planes innermost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Observation {
    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, NUM_PLANES]
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * NUM_PLANES;
        &self.data[start..start + NUM_PLANES]
    }
}

/// Plane indices set for one cell, one per group.
pub fn cell_features(unit: Option<&Unit>) -> [usize; 5] {
    let Some(u) = unit else { return [0, 0, 1, 0, 0] };
    let hp = u.hp.clamp(0, 4) as usize;
    let res = u.resources.clamp(0, 4) as usize;
    let owner = match u.owner {
        Owner::Player(Player::One) => 0,
        Owner::Neutral => 1,
        Owner::Player(Player::Two) => 2,
    };
    let kind = match u.kind {
        UnitKind::Resource => 1,
        UnitKind::Base => 2,
        UnitKind::Barracks => 3,
        UnitKind::Worker => 4,
        UnitKind::Light => 5,
        UnitKind::Heavy => 6,
        UnitKind::Ranged => 7,
    };
    let action = u.action.map_or(0, |a| a.plane());
    [hp, res, owner, kind, action]
}

/// Observation from player one's side.
pub fn encode_observation(state: &GameState) -> Observation {
    let (h, w) = (state.height(), state.width());
    let mut data = vec![0.0f32; h * w * NUM_PLANES];
    let mut occupant: Vec<Option<&Unit>> = vec![None; h * w];
    for u in &state.units {
        occupant[state.cell_index(u.pos)] = Some(u);
    }
    for (cell, unit) in occupant.into_iter().enumerate() {
        let base = cell * NUM_PLANES;
        let mut offset = 0;
        for (group, idx) in PLANE_GROUPS.iter().zip(cell_features(unit)) {
            data[base + offset + idx] = 1.0;
            offset += group;
        }
    }
    Observation { height: h, width: w, data }
}
