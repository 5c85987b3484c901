//! Deterministic toy games, scripted experts and the random baseline agent.
//!
//! **Dodger** (one variable: stay/left/right). A 21×21 grid drawn at 4 px per
//! cell (84×84). The agent lives in the bottom row. Every tick all obstacles
//! fall one row, each top-row cell spawns an obstacle with probability
//! `obstacle_density`, and then the agent moves. Ending the tick in an
//! occupied cell (moving into one, or staying under one) ends the episode.
//! Each survived tick scores +1.
//!
//! **Collector** (four buttons: up/down/left/right). A 20×20 grid drawn at
//! 4 px per cell (80×80). Opposing buttons cancel and diagonals are allowed.
//! `pellets` pellets are placed by seed, each worth +10. The episode ends
//! when all are collected or at `max_ticks`.
//!
//! Index 0 of every variable is the no-op (stay / released), so the all-zero
//! action is "do nothing" in both games.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Action, ActionSpace, DataError, Dataset, Episode, EpisodeMeta, Observation};
use crate::rng::Rng64;

pub const CELL_PX: usize = 4;
pub const DODGER_CELLS: usize = 21;
pub const COLLECTOR_CELLS: usize = 20;

const DODGER_BG: [u8; 3] = [16, 16, 40];
const DODGER_OBSTACLE: [u8; 3] = [230, 60, 50];
const DODGER_AGENT: [u8; 3] = [70, 230, 100];
const COLLECTOR_BG: [u8; 3] = [12, 12, 12];
const COLLECTOR_PELLET: [u8; 3] = [245, 215, 60];
const COLLECTOR_AGENT: [u8; 3] = [80, 160, 255];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unknown game `{0}`")]
    UnknownGame(String),
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("invalid action: {0}")]
    Action(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Game {
    Dodger,
    Collector,
}

impl FromStr for Game {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dodger" => Ok(Game::Dodger),
            "collector" => Ok(Game::Collector),
            other => Err(EnvError::UnknownGame(other.to_string())),
        }
    }
}

impl fmt::Display for Game {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Game::Dodger => "dodger",
            Game::Collector => "collector",
        })
    }
}

impl Game {
    pub fn action_space(self) -> ActionSpace {
        match self {
            Game::Dodger => ActionSpace::new(vec![crate::data::DiscreteVariable {
                name: "move".into(),
                cardinality: 3,
            }])
            .expect("static space"),
            Game::Collector => {
                ActionSpace::buttons(&["up", "down", "left", "right"]).expect("static space")
            }
        }
    }

    pub fn render_dims(self) -> (u32, u32) {
        let cells = match self {
            Game::Dodger => DODGER_CELLS,
            Game::Collector => COLLECTOR_CELLS,
        };
        ((cells * CELL_PX) as u32, (cells * CELL_PX) as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub game: Game,
    pub seed: u64,
    /// Ticks per second when served in real time; also the recorded fps.
    pub tick_rate: f64,
    pub max_ticks: u32,
    /// Dodger: per-cell spawn probability of the top row.
    pub obstacle_density: f64,
    /// Collector: number of pellets.
    pub pellets: u32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::dodger(0)
    }
}

impl EnvConfig {
    pub fn dodger(seed: u64) -> Self {
        Self {
            game: Game::Dodger,
            seed,
            tick_rate: 17.5,
            max_ticks: 1000,
            obstacle_density: 0.3,
            pellets: 15,
        }
    }

    pub fn collector(seed: u64) -> Self {
        Self {
            game: Game::Collector,
            max_ticks: 500,
            ..Self::dodger(seed)
        }
    }

    /// Default config for a game named by id.
    pub fn for_game(game_id: &str, seed: u64) -> Result<Self, EnvError> {
        Ok(match game_id.parse()? {
            Game::Dodger => Self::dodger(seed),
            Game::Collector => Self::collector(seed),
        })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        self.game.action_space()
    }

    pub fn render_dims(&self) -> (u32, u32) {
        self.game.render_dims()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Config(m.to_string()));
        if self.max_ticks < 1 {
            return bad("max_ticks must be at least 1");
        }
        if !(self.tick_rate > 0.0 && self.tick_rate.is_finite()) {
            return bad("tick_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.obstacle_density) {
            return bad("obstacle_density must be in [0, 1]");
        }
        if self.game == Game::Collector
            && (self.pellets == 0 || self.pellets as usize >= COLLECTOR_CELLS * COLLECTOR_CELLS)
        {
            return bad("pellets must be in [1, 399]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DodgerState {
    rng: Rng64,
    /// Row-major occupancy, row 0 at the top.
    grid: Vec<bool>,
    agent: usize,
    density: f64,
    max_ticks: u32,
    ticks: u32,
    score: f64,
    done: bool,
}

const AGENT_ROW: usize = DODGER_CELLS - 1;
const CLEAR_ROWS: usize = 4;

impl DodgerState {
    fn new(cfg: &EnvConfig) -> Self {
        let mut s = Self {
            rng: Rng64::new(cfg.seed),
            grid: vec![false; DODGER_CELLS * DODGER_CELLS],
            agent: DODGER_CELLS / 2,
            density: cfg.obstacle_density,
            max_ticks: cfg.max_ticks,
            ticks: 0,
            score: 0.0,
            done: false,
        };
        // Fill the rows above the agent before play starts, leaving a few
        // clear rows so no seed starts boxed in.
        for i in 0..AGENT_ROW {
            if i < CLEAR_ROWS {
                s.shift_down();
            } else {
                s.advance_obstacles();
            }
        }
        s
    }

    fn occupied(&self, row: usize, col: usize) -> bool {
        self.grid[row * DODGER_CELLS + col]
    }

    fn shift_down(&mut self) {
        self.grid.copy_within(0..AGENT_ROW * DODGER_CELLS, DODGER_CELLS);
        self.grid[..DODGER_CELLS].fill(false);
    }

    fn advance_obstacles(&mut self) {
        self.shift_down();
        for c in 0..DODGER_CELLS {
            self.grid[c] = self.rng.bernoulli(self.density);
        }
    }

    pub fn agent_column(&self) -> usize {
        self.agent
    }

    fn target(&self, action: u32) -> usize {
        match action {
            1 => self.agent.saturating_sub(1),
            2 => (self.agent + 1).min(DODGER_CELLS - 1),
            _ => self.agent,
        }
    }

    fn step(&mut self, action: u32) -> (f64, bool) {
        if self.done {
            return (0.0, true);
        }
        self.advance_obstacles();
        self.agent = self.target(action);
        self.ticks += 1;
        if self.occupied(AGENT_ROW, self.agent) {
            self.done = true;
            return (0.0, true);
        }
        self.score += 1.0;
        if self.ticks >= self.max_ticks {
            self.done = true;
        }
        (1.0, self.done)
    }

    /// Look-ahead over the obstacles already on screen. For each column the
    /// agent could occupy after the next tick, returns the longest run of
    /// safe ticks starting there and the set (bitmask) of columns reachable
    /// at the end of the visible horizon.
    fn survival_horizon(&self) -> Vec<(u32, u32)> {
        let n = DODGER_CELLS;
        let mut next = vec![(0u32, 0u32); n];
        for k in (1..=AGENT_ROW).rev() {
            let mut cur = vec![(0u32, 0u32); n];
            for (c, v) in cur.iter_mut().enumerate() {
                // After the k-th fall the agent row holds today's row 20-k.
                if self.occupied(AGENT_ROW - k, c) {
                    continue;
                }
                if k == AGENT_ROW {
                    *v = (1, 1 << c);
                    continue;
                }
                let lo = c.saturating_sub(1);
                let hi = (c + 1).min(n - 1);
                let run = (lo..=hi).map(|j| next[j].0).max().unwrap_or(0);
                let reach = (lo..=hi).fold(0, |m, j| m | next[j].1);
                *v = (1 + run, reach);
            }
            next = cur;
        }
        next
    }

    /// Action with the longest obstacle-free look-ahead, then the widest set
    /// of reachable columns; remaining ties prefer stay, then left, then right.
    pub fn greedy_safe_action(&self) -> u32 {
        let horizon = self.survival_horizon();
        let key = |a: u32| {
            let (run, reach) = horizon[self.target(a)];
            (run, reach.count_ones())
        };
        let mut best = 0;
        for a in 1..3u32 {
            if key(a) > key(best) {
                best = a;
            }
        }
        best
    }

    fn render(&self) -> Observation {
        let mut canvas = Canvas::new(DODGER_CELLS, DODGER_BG);
        for r in 0..DODGER_CELLS {
            for c in 0..DODGER_CELLS {
                if self.occupied(r, c) {
                    canvas.cell(r, c, DODGER_OBSTACLE);
                }
            }
        }
        canvas.cell(AGENT_ROW, self.agent, DODGER_AGENT);
        canvas.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectorState {
    pellets: Vec<bool>,
    remaining: u32,
    agent: (usize, usize),
    max_ticks: u32,
    ticks: u32,
    score: f64,
    done: bool,
}

impl CollectorState {
    fn new(cfg: &EnvConfig) -> Self {
        let n = COLLECTOR_CELLS;
        let agent = (n / 2, n / 2);
        let mut rng = Rng64::new(cfg.seed);
        let mut pellets = vec![false; n * n];
        let mut placed = 0;
        while placed < cfg.pellets {
            let i = rng.below((n * n) as u64) as usize;
            if !pellets[i] && i != agent.1 * n + agent.0 {
                pellets[i] = true;
                placed += 1;
            }
        }
        Self {
            pellets,
            remaining: cfg.pellets,
            agent,
            max_ticks: cfg.max_ticks,
            ticks: 0,
            score: 0.0,
            done: false,
        }
    }

    pub fn agent(&self) -> (usize, usize) {
        self.agent
    }

    pub fn remaining(&self) -> u32 {
        self.remaining
    }

    fn step(&mut self, buttons: &[u32]) -> (f64, bool) {
        if self.done {
            return (0.0, true);
        }
        let n = COLLECTOR_CELLS as i64;
        let dy = buttons[1] as i64 - buttons[0] as i64;
        let dx = buttons[3] as i64 - buttons[2] as i64;
        let x = (self.agent.0 as i64 + dx).clamp(0, n - 1) as usize;
        let y = (self.agent.1 as i64 + dy).clamp(0, n - 1) as usize;
        self.agent = (x, y);
        self.ticks += 1;
        let mut delta = 0.0;
        let i = y * COLLECTOR_CELLS + x;
        if self.pellets[i] {
            self.pellets[i] = false;
            self.remaining -= 1;
            delta = 10.0;
            self.score += delta;
        }
        if self.remaining == 0 || self.ticks >= self.max_ticks {
            self.done = true;
        }
        (delta, self.done)
    }

    /// Buttons toward the nearest pellet (Chebyshev distance, ties broken in
    /// row-major order).
    pub fn greedy_action(&self) -> Action {
        let n = COLLECTOR_CELLS;
        let (ax, ay) = (self.agent.0 as i64, self.agent.1 as i64);
        let target = (0..n * n)
            .filter(|&i| self.pellets[i])
            .map(|i| ((i % n) as i64, (i / n) as i64))
            .min_by_key(|&(x, y)| (x - ax).abs().max((y - ay).abs()));
        match target {
            None => Action::new(vec![0; 4]),
            Some((tx, ty)) => Action::new(vec![
                (ty < ay) as u32,
                (ty > ay) as u32,
                (tx < ax) as u32,
                (tx > ax) as u32,
            ]),
        }
    }

    fn render(&self) -> Observation {
        let n = COLLECTOR_CELLS;
        let mut canvas = Canvas::new(n, COLLECTOR_BG);
        for i in 0..n * n {
            if self.pellets[i] {
                canvas.cell(i / n, i % n, COLLECTOR_PELLET);
            }
        }
        canvas.cell(self.agent.1, self.agent.0, COLLECTOR_AGENT);
        canvas.finish()
    }
}

struct Canvas {
    cells: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn new(cells: usize, bg: [u8; 3]) -> Self {
        let side = cells * CELL_PX;
        Self {
            cells,
            px: bg.iter().copied().cycle().take(side * side * 3).collect(),
        }
    }

    fn cell(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let side = self.cells * CELL_PX;
        for y in row * CELL_PX..(row + 1) * CELL_PX {
            for x in col * CELL_PX..(col + 1) * CELL_PX {
                let i = (y * side + x) * 3;
                self.px[i..i + 3].copy_from_slice(&rgb);
            }
        }
    }

    fn finish(self) -> Observation {
        let side = (self.cells * CELL_PX) as u32;
        Observation::new(side, side, self.px).expect("canvas is square RGB")
    }
}

/// State of one running game. `render` is a pure function of the state.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvState {
    Dodger(DodgerState),
    Collector(CollectorState),
}

/// Result of one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub score_delta: f64,
    pub done: bool,
}

impl EnvState {
    pub fn game(&self) -> Game {
        match self {
            EnvState::Dodger(_) => Game::Dodger,
            EnvState::Collector(_) => Game::Collector,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        self.game().action_space()
    }

    pub fn render(&self) -> Observation {
        match self {
            EnvState::Dodger(s) => s.render(),
            EnvState::Collector(s) => s.render(),
        }
    }

    pub fn score(&self) -> f64 {
        match self {
            EnvState::Dodger(s) => s.score,
            EnvState::Collector(s) => s.score,
        }
    }

    pub fn done(&self) -> bool {
        match self {
            EnvState::Dodger(s) => s.done,
            EnvState::Collector(s) => s.done,
        }
    }

    pub fn ticks(&self) -> u32 {
        match self {
            EnvState::Dodger(s) => s.ticks,
            EnvState::Collector(s) => s.ticks,
        }
    }

    /// Advances one tick in place. Once done, further steps are no-ops.
    pub fn step_mut(&mut self, action: &Action) -> Result<StepOutcome, EnvError> {
        self.action_space().validate(action)?;
        let (score_delta, done) = match self {
            EnvState::Dodger(s) => s.step(action.indices[0]),
            EnvState::Collector(s) => s.step(&action.indices),
        };
        Ok(StepOutcome { score_delta, done })
    }

    /// Greedy scripted action from the true state (no reaction delay).
    pub fn expert_action(&self) -> Action {
        match self {
            EnvState::Dodger(s) => Action::single(s.greedy_safe_action()),
            EnvState::Collector(s) => s.greedy_action(),
        }
    }
}

pub fn env_reset(config: &EnvConfig) -> Result<(EnvState, Observation), EnvError> {
    config.validate()?;
    let state = match config.game {
        Game::Dodger => EnvState::Dodger(DodgerState::new(config)),
        Game::Collector => EnvState::Collector(CollectorState::new(config)),
    };
    let obs = state.render();
    Ok((state, obs))
}

/// Pure transition: returns the next state, its frame, the score delta and
/// the (latched) done flag.
pub fn env_step(
    state: &EnvState,
    action: &Action,
) -> Result<(EnvState, Observation, f64, bool), EnvError> {
    let mut next = state.clone();
    let out = next.step_mut(action)?;
    let obs = next.render();
    Ok((next, obs, out.score_delta, out.done))
}

/// Anything that picks an action each tick.
pub trait Controller {
    /// Called at the start of every episode.
    fn reset(&mut self) {}

    fn act(&mut self, state: &EnvState, obs: &Observation) -> Action;
}

/// Greedy expert whose decisions pass through a FIFO of `reaction_delay`
/// ticks. Until the queue fills it emits the no-op.
#[derive(Debug, Clone)]
pub struct ScriptedExpert {
    reaction_delay: usize,
    queue: VecDeque<Action>,
}

impl ScriptedExpert {
    pub fn new(reaction_delay: usize) -> Self {
        Self {
            reaction_delay,
            queue: VecDeque::with_capacity(reaction_delay + 1),
        }
    }

    pub fn reaction_delay(&self) -> usize {
        self.reaction_delay
    }
}

/// Next action of `expert` for `state`.
pub fn scripted_expert(expert: &mut ScriptedExpert, state: &EnvState) -> Action {
    expert.queue.push_back(state.expert_action());
    if expert.queue.len() > expert.reaction_delay {
        expert.queue.pop_front().expect("non-empty")
    } else {
        state.action_space().noop()
    }
}

impl Controller for ScriptedExpert {
    fn reset(&mut self) {
        self.queue.clear();
    }

    fn act(&mut self, state: &EnvState, _obs: &Observation) -> Action {
        scripted_expert(self, state)
    }
}

/// One index per cardinality, each uniform and independent.
pub fn uniform_indices(cardinalities: &[u32], rng: &mut Rng64) -> Vec<u32> {
    cardinalities
        .iter()
        .map(|&c| rng.below(c.max(1) as u64) as u32)
        .collect()
}

pub fn random_agent(space: &ActionSpace, rng: &mut Rng64) -> Action {
    Action::new(uniform_indices(&space.cardinalities(), rng))
}

/// Uniformly random actions; the 0% reference for normalized scores.
#[derive(Debug, Clone)]
pub struct RandomAgent {
    rng: Rng64,
}

impl RandomAgent {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Rng64::new(seed),
        }
    }
}

impl Controller for RandomAgent {
    fn act(&mut self, state: &EnvState, _obs: &Observation) -> Action {
        random_agent(&state.action_space(), &mut self.rng)
    }
}

/// Wraps a controller and, with probability `noise`, replaces its action by
/// a uniformly random one. Produces low-quality demonstrations.
#[derive(Debug, Clone)]
pub struct NoisyController<C> {
    inner: C,
    noise: f64,
    rng: Rng64,
}

impl<C> NoisyController<C> {
    pub fn new(inner: C, noise: f64, seed: u64) -> Self {
        Self {
            inner,
            noise,
            rng: Rng64::new(seed),
        }
    }
}

impl<C: Controller> Controller for NoisyController<C> {
    fn reset(&mut self) {
        self.inner.reset();
    }

    fn act(&mut self, state: &EnvState, obs: &Observation) -> Action {
        let a = self.inner.act(state, obs);
        if self.rng.bernoulli(self.noise) {
            random_agent(&state.action_space(), &mut self.rng)
        } else {
            a
        }
    }
}

/// Replays a fixed action list, then the no-op.
#[derive(Debug, Clone)]
pub struct ScriptedActions {
    actions: Vec<Action>,
    next: usize,
}

impl ScriptedActions {
    pub fn new(actions: Vec<Action>) -> Self {
        Self { actions, next: 0 }
    }
}

impl Controller for ScriptedActions {
    fn reset(&mut self) {
        self.next = 0;
    }

    fn act(&mut self, state: &EnvState, _obs: &Observation) -> Action {
        let a = self
            .actions
            .get(self.next)
            .cloned()
            .unwrap_or_else(|| state.action_space().noop());
        self.next += 1;
        a
    }
}

/// Plays one episode without recording it; returns the final score.
pub fn play_episode<C: Controller + ?Sized>(
    config: &EnvConfig,
    controller: &mut C,
    max_frames: Option<u32>,
) -> Result<f64, EnvError> {
    let (mut state, mut obs) = env_reset(config)?;
    controller.reset();
    let mut frames = 0;
    while !state.done() && max_frames.map_or(true, |m| frames < m) {
        let a = controller.act(&state, &obs);
        state.step_mut(&a)?;
        obs = state.render();
        frames += 1;
    }
    Ok(state.score())
}

/// Plays one episode and records every (frame, action) pair as an
/// [`Episode`] in the canonical dataset form.
pub fn rollout<C: Controller + ?Sized>(
    config: &EnvConfig,
    controller: &mut C,
    max_frames: Option<u32>,
    player_id: &str,
) -> Result<Episode, EnvError> {
    let (mut state, mut obs) = env_reset(config)?;
    controller.reset();
    let mut frames = Vec::new();
    let mut actions = Vec::new();
    while !state.done() && max_frames.map_or(true, |m| (frames.len() as u32) < m) {
        let a = controller.act(&state, &obs);
        state.step_mut(&a)?;
        frames.push(std::mem::replace(&mut obs, state.render()));
        actions.push(a);
    }
    let meta = EpisodeMeta {
        game_id: config.game.to_string(),
        player_id: player_id.to_string(),
        fps: config.tick_rate,
        native_resolution: config.render_dims(),
        action_space: config.action_space(),
        final_score: state.score(),
        recorded_at: 0,
        delay_applied: 0,
    };
    Ok(Episode::new(meta, frames, actions)?)
}

/// Settings for a generated demonstration dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub episodes: usize,
    /// Reaction delay of the scripted expert, in ticks.
    pub reaction_delay: usize,
    /// Probability of replacing each expert action by a random one.
    pub noise: f64,
    pub max_frames: Option<u32>,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            reaction_delay: 0,
            noise: 0.0,
            max_frames: None,
            seed: 0,
        }
    }
}

/// Scripted-expert rollouts; episode `i` plays environment seed
/// `derive(seed, i)`.
pub fn demonstrations(env: &EnvConfig, demo: &DemoConfig) -> Result<Dataset, EnvError> {
    if !(0.0..=1.0).contains(&demo.noise) {
        return Err(EnvError::Config(format!("noise {} outside [0, 1]", demo.noise)));
    }
    let player = if demo.noise > 0.0 { "noisy-expert" } else { "expert" };
    let episodes = (0..demo.episodes)
        .map(|i| {
            let cfg = env.with_seed(Rng64::derive(demo.seed, i as u64));
            let expert = ScriptedExpert::new(demo.reaction_delay);
            let noise_seed = Rng64::derive(demo.seed ^ 0x6e6f_6973_6500, i as u64);
            let mut ctrl = NoisyController::new(expert, demo.noise, noise_seed);
            rollout(&cfg, &mut ctrl, demo.max_frames, player)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset::new(episodes))
}
