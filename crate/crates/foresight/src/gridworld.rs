//! Deterministic mini-Sokoban environment with procedural levels.
//!
//! Levels are generated by reverse play (boxes start on targets and get
//! pulled away), which makes them solvable by construction. A random empty
//! floor cell is painted blue; standing on it is the event that the event
//! predictors try to forecast. The blue tile has no effect on dynamics or
//! reward.
//!
//! Two ablation variants of the dynamics are supported:
//! - `StochasticNoop`: the executed action is replaced by "stay" with
//!   probability `noop_prob` (the agent's chosen action is still what gets
//!   logged).
//! - `PomdpJitter`: the observation shows the avatar at a cell within one
//!   orthogonal step of the true player cell.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grid cell as (row, col). Serialized as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell(pub usize, pub usize);

impl Cell {
    pub fn row(&self) -> usize {
        self.0
    }
    pub fn col(&self) -> usize {
        self.1
    }
}

/// The four Sokoban moves, with stable integer encoding 0..3.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

pub const NUM_ACTIONS: usize = 4;
pub const ALL_ACTIONS: [Action; NUM_ACTIONS] = [Action::Up, Action::Down, Action::Left, Action::Right];

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::Up => 0,
            Action::Down => 1,
            Action::Left => 2,
            Action::Right => 3,
        }
    }

    pub fn from_index(i: usize) -> Action {
        ALL_ACTIONS[i]
    }

    /// (row delta, col delta)
    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }

    pub fn opposite(self) -> Action {
        match self {
            Action::Up => Action::Down,
            Action::Down => Action::Up,
            Action::Left => Action::Right,
            Action::Right => Action::Left,
        }
    }
}

/// A procedurally generated level. Solvable by construction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Level {
    pub level_id: u64,
    pub gen_seed: u64,
    pub width: usize,
    pub height: usize,
    pub walls: Vec<Cell>,
    pub targets: Vec<Cell>,
    pub boxes: Vec<Cell>,
    pub player: Cell,
    pub blue: Cell,
}

impl Level {
    pub fn in_bounds(&self, row: isize, col: isize) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width
    }

    pub fn is_wall(&self, c: Cell) -> bool {
        self.walls.binary_search(&c).is_ok()
    }

    pub fn is_target(&self, c: Cell) -> bool {
        self.targets.binary_search(&c).is_ok()
    }

    /// Cell reached by moving one step from `c` in direction `a`, if in bounds.
    pub fn neighbor(&self, c: Cell, a: Action) -> Option<Cell> {
        let (dr, dc) = a.delta();
        let (nr, nc) = (c.0 as isize + dr, c.1 as isize + dc);
        if self.in_bounds(nr, nc) {
            Some(Cell(nr as usize, nc as usize))
        } else {
            None
        }
    }
}

/// Dynamics/observation variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvVariant {
    Default,
    StochasticNoop,
    PomdpJitter,
}

/// Environment configuration: variant plus reward scheme constants.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EnvConfig {
    pub variant: EnvVariant,
    /// Only used when `variant == StochasticNoop`.
    pub noop_prob: f64,
    pub step_limit: u32,
    pub step_penalty: f64,
    pub box_on_target_delta: f64,
    pub solve_bonus: f64,
}

impl EnvConfig {
    pub fn with_variant(variant: EnvVariant) -> EnvConfig {
        EnvConfig {
            variant,
            noop_prob: 0.25,
            step_limit: 60,
            step_penalty: -0.01,
            box_on_target_delta: 1.0,
            solve_bonus: 10.0,
        }
    }
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::with_variant(EnvVariant::Default)
    }
}

/// Full environment state. Value-like: cloning gives an independent branch.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub level: Arc<Level>,
    pub player: Cell,
    pub boxes: BTreeSet<Cell>,
    pub step_count: u32,
    pub done: bool,
    pub solved: bool,
}

impl EnvState {
    pub fn is_box(&self, c: Cell) -> bool {
        self.boxes.contains(&c)
    }

    /// Floor = in-grid and not a wall. Boxes sit on floor cells.
    pub fn is_free_floor(&self, c: Cell) -> bool {
        !self.level.is_wall(c) && !self.is_box(c)
    }

    pub fn boxes_on_targets(&self) -> usize {
        self.boxes.iter().filter(|b| self.level.is_target(**b)).count()
    }
}

/// What the environment actually executed after any stochastic replacement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecutedAction {
    Move(Action),
    Noop,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub next: EnvState,
    pub reward: f64,
    pub done: bool,
    /// 1 iff the next player cell is the blue tile.
    pub event_flag: u8,
    pub executed: ExecutedAction,
}

pub const NUM_PLANES: usize = 6;
pub const PLANE_WALL: usize = 0;
pub const PLANE_FLOOR: usize = 1;
pub const PLANE_TARGET: usize = 2;
pub const PLANE_BOX: usize = 3;
pub const PLANE_PLAYER: usize = 4;
pub const PLANE_BLUE: usize = 5;

/// What the agent sees: one binary plane per feature plus a step-fraction
/// scalar. In the default variant the player-shown plane equals the true
/// player cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub width: usize,
    pub height: usize,
    /// `NUM_PLANES * width * height` values in {0, 1}, plane-major.
    pub planes: Vec<u8>,
    pub step_frac: f64,
}

impl Observation {
    pub fn plane(&self, p: usize) -> &[u8] {
        let n = self.width * self.height;
        &self.planes[p * n..(p + 1) * n]
    }

    pub fn cell_index(&self, c: Cell) -> usize {
        c.0 * self.width + c.1
    }

    pub fn get(&self, p: usize, c: Cell) -> u8 {
        self.planes[p * self.width * self.height + self.cell_index(c)]
    }

    /// Number of input features when flattened for a network.
    pub fn feature_len(&self) -> usize {
        self.planes.len() + 1
    }

    /// Flatten to f64 features: all planes then the step fraction.
    pub fn to_features(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.planes.iter().map(|&b| b as f64).collect();
        v.push(self.step_frac);
        v
    }

    /// The single shown player cell.
    pub fn shown_player(&self) -> Cell {
        let n = self.width * self.height;
        let plane = self.plane(PLANE_PLAYER);
        for i in 0..n {
            if plane[i] == 1 {
                return Cell(i / self.width, i % self.width);
            }
        }
        panic!("observation has no player-shown cell");
    }

    pub fn cells_of_plane(&self, p: usize) -> Vec<Cell> {
        let n = self.width * self.height;
        let plane = self.plane(p);
        (0..n)
            .filter(|&i| plane[i] == 1)
            .map(|i| Cell(i / self.width, i % self.width))
            .collect()
    }
}

/// Level generation parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    pub width: usize,
    pub height: usize,
    /// Number of boxes, 1 or 2.
    pub boxes: usize,
    pub max_walls: usize,
    pub min_pulls: usize,
    pub max_pulls: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { width: 6, height: 6, boxes: 1, max_walls: 4, min_pulls: 4, max_pulls: 12 }
    }
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("level generation failed for seed {seed} after {attempts} attempts")]
    Generation { seed: u64, attempts: usize },
    #[error("invalid generation config: {0}")]
    BadConfig(String),
}

/// Generate a solvable level, deterministically in `seed`.
pub fn generate_level(seed: u64, config: &GenConfig) -> Result<Level, GridError> {
    generate_level_with_solution(seed, config).map(|(level, _)| level)
}

/// Like [`generate_level`] but also returns the forward action sequence
/// (the reversed generator path) that solves the level.
pub fn generate_level_with_solution(
    seed: u64,
    config: &GenConfig,
) -> Result<(Level, Vec<Action>), GridError> {
    if config.boxes == 0 || config.boxes > 2 {
        return Err(GridError::BadConfig(format!("box count {} not in 1..=2", config.boxes)));
    }
    if config.width < 4 || config.height < 4 {
        return Err(GridError::BadConfig("grid must be at least 4x4".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_attempts = 200;
    for _ in 0..max_attempts {
        if let Some((level, solution)) = attempt_generate(seed, config, &mut rng) {
            return Ok((level, solution));
        }
    }
    Err(GridError::Generation { seed, attempts: max_attempts })
}

fn attempt_generate(
    seed: u64,
    config: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Option<(Level, Vec<Action>)> {
    let (w, h) = (config.width, config.height);
    let all_cells: Vec<Cell> = (0..h).flat_map(|r| (0..w).map(move |c| Cell(r, c))).collect();

    // Walls.
    let n_walls = rng.gen_range(0..=config.max_walls);
    let mut walls: BTreeSet<Cell> = BTreeSet::new();
    while walls.len() < n_walls {
        walls.insert(all_cells[rng.gen_range(0..all_cells.len())]);
    }
    let floor: Vec<Cell> = all_cells.iter().copied().filter(|c| !walls.contains(c)).collect();
    if floor.len() < config.boxes * 2 + 4 {
        return None;
    }

    // Targets; boxes start on them (solved configuration) and get pulled away.
    let mut targets: BTreeSet<Cell> = BTreeSet::new();
    while targets.len() < config.boxes {
        targets.insert(floor[rng.gen_range(0..floor.len())]);
    }
    let mut boxes: BTreeSet<Cell> = targets.clone();

    let is_wall = |c: Cell| walls.contains(&c);
    let neighbor = |c: Cell, a: Action| -> Option<Cell> {
        let (dr, dc) = a.delta();
        let (nr, nc) = (c.0 as isize + dr, c.1 as isize + dc);
        if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
            Some(Cell(nr as usize, nc as usize))
        } else {
            None
        }
    };

    // Player starts next to some box.
    let start_candidates: Vec<Cell> = boxes
        .iter()
        .flat_map(|b| ALL_ACTIONS.iter().filter_map(|&a| neighbor(*b, a)))
        .filter(|c| !is_wall(*c) && !boxes.contains(c))
        .collect();
    if start_candidates.is_empty() {
        return None;
    }
    let mut player = start_candidates[rng.gen_range(0..start_candidates.len())];

    // Reverse play: pulls move a box toward the player's old cell.
    let want_pulls = rng.gen_range(config.min_pulls..=config.max_pulls);
    let mut pulls = 0usize;
    let mut moves: Vec<Action> = Vec::new();
    let max_moves = 40usize;
    while pulls < want_pulls && moves.len() < max_moves {
        let free = |c: Cell| !is_wall(c) && !boxes.contains(&c);
        let pullable: Vec<Action> = ALL_ACTIONS
            .iter()
            .copied()
            .filter(|&a| {
                let dest_ok = neighbor(player, a).map(|d| free(d)).unwrap_or(false);
                let behind = neighbor(player, a.opposite());
                dest_ok && behind.map(|b| boxes.contains(&b)).unwrap_or(false)
            })
            .collect();
        let walkable: Vec<Action> = ALL_ACTIONS
            .iter()
            .copied()
            .filter(|&a| neighbor(player, a).map(|d| free(d)).unwrap_or(false))
            .collect();
        // Prefer pulls, but wander sometimes to vary box paths.
        let do_pull = !pullable.is_empty() && (walkable.is_empty() || rng.gen_bool(0.7));
        if do_pull {
            let a = pullable[rng.gen_range(0..pullable.len())];
            let behind = neighbor(player, a.opposite()).unwrap();
            boxes.remove(&behind);
            boxes.insert(player);
            player = neighbor(player, a).unwrap();
            pulls += 1;
            moves.push(a);
        } else if !walkable.is_empty() {
            let a = walkable[rng.gen_range(0..walkable.len())];
            player = neighbor(player, a).unwrap();
            moves.push(a);
        } else {
            return None;
        }
    }
    if pulls < want_pulls {
        return None;
    }
    // Reject levels that are already solved at reset.
    if boxes.iter().all(|b| targets.contains(b)) {
        return None;
    }

    // Blue tile: an empty floor cell distinct from player, boxes and targets.
    let blue_candidates: Vec<Cell> = floor
        .iter()
        .copied()
        .filter(|c| *c != player && !boxes.contains(c) && !targets.contains(c))
        .collect();
    if blue_candidates.is_empty() {
        return None;
    }
    let blue = blue_candidates[rng.gen_range(0..blue_candidates.len())];

    let level = Level {
        level_id: seed,
        gen_seed: seed,
        width: w,
        height: h,
        walls: walls.iter().copied().collect(),
        targets: targets.iter().copied().collect(),
        boxes: boxes.iter().copied().collect(),
        player,
        blue,
    };

    // Forward solution = generator path reversed with inverted directions.
    let solution: Vec<Action> = moves.iter().rev().map(|a| a.opposite()).collect();
    if !replay_solves(&level, &solution) {
        return None;
    }
    Some((level, solution))
}

/// Replay an action sequence with pure Sokoban dynamics and report whether
/// it ends with every box on a target.
pub fn replay_solves(level: &Level, actions: &[Action]) -> bool {
    let mut player = level.player;
    let mut boxes: BTreeSet<Cell> = level.boxes.iter().copied().collect();
    for &a in actions {
        let (np, nb) = apply_move(level, player, &boxes, a);
        player = np;
        boxes = nb;
    }
    boxes.iter().all(|b| level.is_target(*b))
}

/// Pure movement rule: moving into a box pushes it iff the cell behind the
/// box is empty floor; moving into a wall or a blocked box is a no-op move.
fn apply_move(level: &Level, player: Cell, boxes: &BTreeSet<Cell>, a: Action) -> (Cell, BTreeSet<Cell>) {
    let Some(dest) = level.neighbor(player, a) else {
        return (player, boxes.clone());
    };
    if level.is_wall(dest) {
        return (player, boxes.clone());
    }
    if boxes.contains(&dest) {
        let Some(behind) = level.neighbor(dest, a) else {
            return (player, boxes.clone());
        };
        if level.is_wall(behind) || boxes.contains(&behind) {
            return (player, boxes.clone());
        }
        let mut nb = boxes.clone();
        nb.remove(&dest);
        nb.insert(behind);
        (dest, nb)
    } else {
        (dest, boxes.clone())
    }
}

/// Reset to the level's initial configuration. The seed only matters for
/// the POMDP-jitter observation draw.
pub fn reset(level: &Arc<Level>, config: &EnvConfig, seed: u64) -> (EnvState, Observation) {
    let state = EnvState {
        level: Arc::clone(level),
        player: level.player,
        boxes: level.boxes.iter().copied().collect(),
        step_count: 0,
        done: false,
        solved: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs = observe(&state, config, &mut rng);
    (state, obs)
}

/// One environment step. `state` must not be done. Under `StochasticNoop`
/// the executed action is replaced by "stay" with probability `noop_prob`
/// before dynamics apply.
pub fn step(state: &EnvState, action: Action, config: &EnvConfig, rng: &mut ChaCha8Rng) -> StepResult {
    assert!(!state.done, "step called on a done state");
    let executed = match config.variant {
        EnvVariant::StochasticNoop if rng.gen::<f64>() < config.noop_prob => ExecutedAction::Noop,
        _ => ExecutedAction::Move(action),
    };
    step_executed(state, executed, config)
}

/// Apply dynamics for an already-resolved executed action. Used by the
/// enumeration oracle to branch over stochastic outcomes exactly.
pub fn step_executed(state: &EnvState, executed: ExecutedAction, config: &EnvConfig) -> StepResult {
    assert!(!state.done, "step called on a done state");
    let before_on = state.boxes_on_targets();
    let (player, boxes) = match executed {
        ExecutedAction::Move(a) => apply_move(&state.level, state.player, &state.boxes, a),
        ExecutedAction::Noop => (state.player, state.boxes.clone()),
    };
    let after_on = boxes.iter().filter(|b| state.level.is_target(**b)).count();
    let solved = after_on == boxes.len();
    let step_count = state.step_count + 1;
    let done = solved || step_count >= config.step_limit;
    let mut reward = config.step_penalty + (after_on as f64 - before_on as f64) * config.box_on_target_delta;
    if solved {
        reward += config.solve_bonus;
    }
    let next = EnvState {
        level: Arc::clone(&state.level),
        player,
        boxes,
        step_count,
        done,
        solved,
    };
    let event_flag = event_flag(&next);
    StepResult { next, reward, done, event_flag, executed }
}

/// 1 iff the player stands on the blue tile.
pub fn event_flag(state: &EnvState) -> u8 {
    (state.player == state.level.blue) as u8
}

/// Render the observation for a state. Only the POMDP variant consumes
/// randomness (for the displaced avatar).
pub fn observe(state: &EnvState, config: &EnvConfig, rng: &mut ChaCha8Rng) -> Observation {
    let level = &state.level;
    let (w, h) = (level.width, level.height);
    let n = w * h;
    let mut planes = vec![0u8; NUM_PLANES * n];
    for r in 0..h {
        for c in 0..w {
            let cell = Cell(r, c);
            let i = r * w + c;
            if level.is_wall(cell) {
                planes[PLANE_WALL * n + i] = 1;
            } else {
                planes[PLANE_FLOOR * n + i] = 1;
            }
            if level.is_target(cell) {
                planes[PLANE_TARGET * n + i] = 1;
            }
            if state.boxes.contains(&cell) {
                planes[PLANE_BOX * n + i] = 1;
            }
        }
    }
    planes[PLANE_BLUE * n + level.blue.0 * w + level.blue.1] = 1;

    let shown = match config.variant {
        EnvVariant::PomdpJitter => {
            let candidates = jitter_candidates(state);
            candidates[rng.gen_range(0..candidates.len())]
        }
        _ => state.player,
    };
    planes[PLANE_PLAYER * n + shown.0 * w + shown.1] = 1;

    Observation {
        width: w,
        height: h,
        planes,
        step_frac: state.step_count as f64 / config.step_limit as f64,
    }
}

/// POMDP jitter candidate set: the true cell plus orthogonally adjacent
/// floor cells (not walls, not boxes).
pub fn jitter_candidates(state: &EnvState) -> Vec<Cell> {
    let mut cands = vec![state.player];
    for a in ALL_ACTIONS {
        if let Some(c) = state.level.neighbor(state.player, a) {
            if state.is_free_floor(c) {
                cands.push(c);
            }
        }
    }
    cands
}

/// Write levels as one JSON object per line.
pub fn write_levels<W: std::io::Write>(levels: &[Level], mut w: W) -> std::io::Result<()> {
    for level in levels {
        serde_json::to_writer(&mut w, level)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Read levels from a line-delimited JSON stream.
pub fn read_levels<R: std::io::BufRead>(r: R) -> std::io::Result<Vec<Level>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let level: Level = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        out.push(level);
    }
    Ok(out)
}
