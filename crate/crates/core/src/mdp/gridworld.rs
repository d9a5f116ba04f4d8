//! Row-major gridworld construction.
//!
//! Cells index as `state = row * width + col`. Actions are 0=up, 1=down,
//! 2=left, 3=right and, with five actions, 4=stay. A commanded move keeps
//! `1 - slip_prob` of its mass; the remaining `slip_prob` spreads uniformly
//! over the unintended moves. Moves that would leave the grid or enter a
//! wall deposit their mass back on the current cell. Wall cells remain part
//! of the state space but receive no incoming probability and no initial
//! mass, so every policy's occupancy is zero there.

use super::TabularMdp;
use crate::error::{Result, TrirlError};
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

/// Declarative gridworld layout, loadable from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    /// Blocked cells as `[row, col]` pairs.
    #[serde(default)]
    pub walls: Vec<(usize, usize)>,
    /// Cells carrying the task reward; absorbing when `terminal_self_loop`.
    pub goal_cells: Vec<(usize, usize)>,
    /// Start cells for `mu0` (uniform over them). `None` spreads the start
    /// mass uniformly over non-wall, non-goal cells (falling back to all
    /// non-wall cells if that set is empty).
    #[serde(default)]
    pub start_cells: Option<Vec<(usize, usize)>>,
    /// Probability mass diverted from the commanded move, in `[0, 1]`.
    pub slip_prob: f64,
    /// 4 (up/down/left/right) or 5 (adds stay).
    pub step_actions: usize,
    /// Make goal cells absorbing self-loops.
    pub terminal_self_loop: bool,
}

impl GridworldSpec {
    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn state_index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    fn in_bounds(&self, cell: (usize, usize)) -> bool {
        cell.0 < self.height && cell.1 < self.width
    }

    /// The layout mirrored top-to-bottom: every cell `(r, c)` moves to
    /// `(height - 1 - r, c)`. Used by the reward-transfer protocol to build
    /// a dynamics-perturbed sibling of a training layout.
    pub fn flipped_vertical(&self) -> Self {
        let flip = |cells: &[(usize, usize)]| {
            cells
                .iter()
                .map(|&(r, c)| (self.height - 1 - r, c))
                .collect()
        };
        Self {
            walls: flip(&self.walls),
            goal_cells: flip(&self.goal_cells),
            start_cells: self.start_cells.as_deref().map(flip),
            ..self.clone()
        }
    }
}

/// Target cell of a commanded move, before wall/bounds bounce-back.
/// Actions: 0=up, 1=down, 2=left, 3=right, 4=stay.
fn move_target(row: usize, col: usize, action: usize) -> (isize, isize) {
    let (r, c) = (row as isize, col as isize);
    match action {
        0 => (r - 1, c),
        1 => (r + 1, c),
        2 => (r, c - 1),
        3 => (r, c + 1),
        _ => (r, c),
    }
}

/// Build the tabular MDP for a gridworld layout.
pub fn build_gridworld(spec: &GridworldSpec, gamma: f64) -> Result<TabularMdp> {
    if spec.width == 0 || spec.height == 0 {
        return Err(TrirlError::InvalidArgument(
            "gridworld needs positive width and height".into(),
        ));
    }
    if !(4..=5).contains(&spec.step_actions) {
        return Err(TrirlError::InvalidArgument(format!(
            "step_actions must be 4 or 5, got {}",
            spec.step_actions
        )));
    }
    if !(0.0..=1.0).contains(&spec.slip_prob) {
        return Err(TrirlError::InvalidArgument(format!(
            "slip_prob must lie in [0, 1], got {}",
            spec.slip_prob
        )));
    }
    for &cell in spec.walls.iter().chain(&spec.goal_cells) {
        if !spec.in_bounds(cell) {
            return Err(TrirlError::InvalidArgument(format!(
                "cell {cell:?} is outside a {}x{} grid",
                spec.height, spec.width
            )));
        }
    }
    let is_wall = |cell: (usize, usize)| spec.walls.contains(&cell);
    if spec.goal_cells.iter().any(|&g| is_wall(g)) {
        return Err(TrirlError::InvalidArgument(
            "goal and wall sets must be disjoint".into(),
        ));
    }

    let n = spec.n_states();
    let n_actions = spec.step_actions;
    let mut transition = Array3::zeros((n, n_actions, n));
    for row in 0..spec.height {
        for col in 0..spec.width {
            let s = spec.state_index(row, col);
            let absorbing =
                is_wall((row, col)) || (spec.terminal_self_loop && spec.goal_cells.contains(&(row, col)));
            if absorbing {
                for a in 0..n_actions {
                    transition[[s, a, s]] = 1.0;
                }
                continue;
            }
            // Where each commanded move actually lands after bounce-back.
            let landing: Vec<usize> = (0..n_actions)
                .map(|m| {
                    let (tr, tc) = move_target(row, col, m);
                    if tr < 0
                        || tc < 0
                        || !spec.in_bounds((tr as usize, tc as usize))
                        || is_wall((tr as usize, tc as usize))
                    {
                        s
                    } else {
                        spec.state_index(tr as usize, tc as usize)
                    }
                })
                .collect();
            for a in 0..n_actions {
                transition[[s, a, landing[a]]] += 1.0 - spec.slip_prob;
                let unintended = (n_actions - 1) as f64;
                for (m, &land) in landing.iter().enumerate() {
                    if m != a {
                        transition[[s, a, land]] += spec.slip_prob / unintended;
                    }
                }
            }
        }
    }

    let start_cells: Vec<(usize, usize)> = match &spec.start_cells {
        Some(cells) => {
            for &cell in cells {
                if !spec.in_bounds(cell) {
                    return Err(TrirlError::InvalidArgument(format!(
                        "start cell {cell:?} is outside the grid"
                    )));
                }
            }
            cells.iter().copied().filter(|&c| !is_wall(c)).collect()
        }
        None => {
            let open: Vec<(usize, usize)> = (0..spec.height)
                .flat_map(|r| (0..spec.width).map(move |c| (r, c)))
                .filter(|&c| !is_wall(c))
                .collect();
            let non_goal: Vec<(usize, usize)> = open
                .iter()
                .copied()
                .filter(|c| !spec.goal_cells.contains(c))
                .collect();
            if non_goal.is_empty() {
                open
            } else {
                non_goal
            }
        }
    };
    if start_cells.is_empty() {
        return Err(TrirlError::InvalidArgument(
            "no non-wall start cell: the reachable set from mu0 is empty".into(),
        ));
    }
    let mut initial = Array1::zeros(n);
    for &(r, c) in &start_cells {
        initial[spec.state_index(r, c)] += 1.0 / start_cells.len() as f64;
    }

    TabularMdp::new(transition, initial, gamma)
}

/// Reward table paying `magnitude` for every action taken in a goal cell and
/// zero elsewhere. Used to define the experts the harness imitates.
pub fn goal_reward_table(spec: &GridworldSpec, magnitude: f64) -> Array2<f64> {
    let mut r = Array2::zeros((spec.n_states(), spec.step_actions));
    for &(row, col) in &spec.goal_cells {
        for a in 0..spec.step_actions {
            r[[spec.state_index(row, col), a]] = magnitude;
        }
    }
    r
}
