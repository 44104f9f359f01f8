//! Grid analogs of the two monitored tasks.
//!
//! * Perimeter lap: the reference laps the grid border clockwise; the agent
//!   is paid for visiting interior waypoints, and the episode ends once all
//!   of them are visited. States carry the visited-waypoint mask.
//! * Avoid zone: the reference patrols the border of the permitted region and
//!   never enters the top-right quadrant; the agent's goal sits inside it.
//!   With `layers > 1` the grid is stacked and two vertical actions are added.
//!
//! Moves are deterministic; bumping into the border leaves the cell unchanged.
//! Episodes start uniformly on a set of route cells (the whole route by
//! default), so the reference's state marginals form a band moving along it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{validate_mdp, TabularMdp};
use crate::policy::TabularPolicy;

pub const UP: usize = 0;
pub const RIGHT: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;
pub const STAY: usize = 4;
pub const ASCEND: usize = 5;
pub const DESCEND: usize = 6;

pub const DEFAULT_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    PerimeterLap,
    AvoidZone,
}

/// Declarative description of a grid scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub size: usize,
    #[serde(default = "one")]
    pub layers: usize,
    /// Waypoints (perimeter lap) or the goal cell (avoid zone), as `[row, col]`
    /// on the bottom layer.
    pub goals: Vec<[usize; 2]>,
    /// Start cells on the route; empty means the whole route.
    #[serde(default)]
    pub starts: Vec<[usize; 2]>,
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default = "default_step_penalty")]
    pub step_penalty: f64,
    #[serde(default = "one_f")]
    pub goal_reward: f64,
    pub horizon: usize,
    #[serde(default = "default_discount")]
    pub discount: f64,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn default_floor() -> f64 {
    DEFAULT_FLOOR
}
fn default_step_penalty() -> f64 {
    -0.01
}
fn default_discount() -> f64 {
    0.99
}

impl ScenarioSpec {
    /// Perimeter lap with one waypoint just inside the top edge; starts on the
    /// six route cells around the top-left corner.
    pub fn perimeter_lap(size: usize, floor: f64) -> Self {
        let mut spec = Self {
            kind: ScenarioKind::PerimeterLap,
            size,
            layers: 1,
            goals: vec![[1, size / 2]],
            starts: Vec::new(),
            floor,
            step_penalty: -0.01,
            goal_reward: 1.0,
            horizon: 5 * size,
            discount: 0.99,
        };
        spec.starts = spec.corner_starts();
        spec
    }

    /// Avoid zone with the goal two cells inside the forbidden quadrant.
    pub fn avoid_zone(size: usize, floor: f64) -> Self {
        let mut spec = Self {
            kind: ScenarioKind::AvoidZone,
            size,
            layers: 1,
            goals: vec![[size / 2 - 2, size / 2 + 1]],
            starts: Vec::new(),
            floor,
            step_penalty: -0.01,
            goal_reward: 1.0,
            horizon: 5 * size,
            discount: 0.99,
        };
        spec.starts = spec.corner_starts();
        spec
    }

    /// Route cells from three before the top-left corner to two after it.
    fn corner_starts(&self) -> Vec<[usize; 2]> {
        let route = self.route();
        let len = route.len();
        (0..6)
            .map(|i| {
                let (_, r, c) = self.coords(route[(len + i - 3) % len]);
                [r, c]
            })
            .collect()
    }

    pub fn num_actions(&self) -> usize {
        if self.layers > 1 {
            7
        } else {
            5
        }
    }

    pub fn cells(&self) -> usize {
        self.size * self.size * self.layers
    }

    fn cell(&self, z: usize, r: usize, c: usize) -> usize {
        (z * self.size + r) * self.size + c
    }

    fn coords(&self, cell: usize) -> (usize, usize, usize) {
        let n = self.size;
        (cell / (n * n), (cell / n) % n, cell % n)
    }

    /// Forbidden quadrant (avoid zone only): top-right block, every layer.
    pub fn in_zone(&self, cell: usize) -> bool {
        let (_, r, c) = self.coords(cell);
        self.kind == ScenarioKind::AvoidZone && r < self.size / 2 && c >= self.size / 2
    }

    fn step(&self, cell: usize, a: usize) -> usize {
        let (z, r, c) = self.coords(cell);
        let n = self.size;
        let (z2, r2, c2) = match a {
            UP if r > 0 => (z, r - 1, c),
            RIGHT if c + 1 < n => (z, r, c + 1),
            DOWN if r + 1 < n => (z, r + 1, c),
            LEFT if c > 0 => (z, r, c - 1),
            ASCEND if z + 1 < self.layers => (z + 1, r, c),
            DESCEND if z > 0 => (z - 1, r, c),
            _ => (z, r, c),
        };
        self.cell(z2, r2, c2)
    }

    /// The reference route as a clockwise cycle of bottom-layer cells.
    pub fn route(&self) -> Vec<usize> {
        let n = self.size;
        let mut ring: Vec<(usize, usize)> = Vec::new();
        match self.kind {
            ScenarioKind::PerimeterLap => {
                ring.extend((0..n).map(|c| (0, c)));
                ring.extend((1..n).map(|r| (r, n - 1)));
                ring.extend((0..n - 1).rev().map(|c| (n - 1, c)));
                ring.extend((1..n - 1).rev().map(|r| (r, 0)));
            }
            ScenarioKind::AvoidZone => {
                // Border of the L-shaped permitted region.
                let h = n / 2;
                ring.extend((0..h).map(|c| (0, c)));
                ring.extend((1..h).map(|r| (r, h - 1)));
                ring.extend((h..n).map(|c| (h, c)));
                ring.extend((h + 1..n).map(|r| (r, n - 1)));
                ring.extend((0..n - 1).rev().map(|c| (n - 1, c)));
                ring.extend((1..n - 1).rev().map(|r| (r, 0)));
            }
        }
        ring.into_iter().map(|(r, c)| self.cell(0, r, c)).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(Error::param("size", "must be at least 4"));
        }
        if self.layers == 0 {
            return Err(Error::param("layers", "must be positive"));
        }
        let na = self.num_actions();
        if !(self.floor > 0.0 && self.floor < 1.0 / na as f64) {
            return Err(Error::param("floor", format!("must lie in (0, 1/{na})")));
        }
        if self.horizon == 0 {
            return Err(Error::param("horizon", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::param("discount", "must lie in [0, 1)"));
        }
        if self.goals.is_empty() {
            return Err(Error::param("goals", "at least one goal cell is required"));
        }
        if self.kind == ScenarioKind::AvoidZone && self.goals.len() != 1 {
            return Err(Error::param("goals", "avoid zone takes exactly one goal cell"));
        }
        if self.goals.len() > 8 {
            return Err(Error::param("goals", "at most 8 waypoints"));
        }
        let route = self.route();
        for (i, g) in self.goals.iter().enumerate() {
            if g[0] >= self.size || g[1] >= self.size {
                return Err(Error::param("goals", format!("goal {i} lies outside the grid")));
            }
            let cell = self.cell(0, g[0], g[1]);
            if route.contains(&cell) {
                return Err(Error::param("goals", format!("goal {i} lies on the reference route")));
            }
            if self.kind == ScenarioKind::AvoidZone && !self.in_zone(cell) {
                return Err(Error::param("goals", "avoid-zone goal must lie inside the forbidden quadrant"));
            }
            if self.goals[..i].contains(g) {
                return Err(Error::param("goals", format!("goal {i} is duplicated")));
            }
        }
        for (i, st) in self.starts.iter().enumerate() {
            if st[0] >= self.size || st[1] >= self.size || !route.contains(&self.cell(0, st[0], st[1])) {
                return Err(Error::param("starts", format!("start {i} is not a route cell")));
            }
            if self.starts[..i].contains(st) {
                return Err(Error::param("starts", format!("start {i} is duplicated")));
            }
        }
        Ok(())
    }

    fn start_cells(&self) -> Vec<usize> {
        if self.starts.is_empty() {
            self.route()
        } else {
            self.starts.iter().map(|st| self.cell(0, st[0], st[1])).collect()
        }
    }

    pub fn build(&self) -> Result<Scenario> {
        self.validate()?;
        let cells = self.cells();
        let na = self.num_actions();
        let w = self.goals.len();
        let full = (1usize << w) - 1;
        let goal_cells: Vec<usize> = self.goals.iter().map(|g| self.cell(0, g[0], g[1])).collect();
        // Non-terminal states: (mask, cell) for every mask short of full, plus one goal state.
        let ns = full * cells + 1;
        let goal_state = ns - 1;
        let index = |mask: usize, cell: usize| mask * cells + cell;

        let mut transition = vec![0.0; ns * na * ns];
        let mut reward = vec![0.0; ns * na];
        for mask in 0..full {
            for cell in 0..cells {
                let s = index(mask, cell);
                for a in 0..na {
                    let next = self.step(cell, a);
                    let mut r = self.step_penalty;
                    let mut m2 = mask;
                    if let Some(j) = goal_cells.iter().position(|&g| g == next) {
                        if mask & (1 << j) == 0 {
                            m2 |= 1 << j;
                            r += self.goal_reward;
                        }
                    }
                    let s2 = if m2 == full { goal_state } else { index(m2, next) };
                    transition[(s * na + a) * ns + s2] = 1.0;
                    reward[s * na + a] = r;
                }
            }
        }
        for a in 0..na {
            transition[(goal_state * na + a) * ns + goal_state] = 1.0;
        }

        let route = self.route();
        let starts = self.start_cells();
        let mut initial = vec![0.0; ns];
        for &c in &starts {
            initial[index(0, c)] = 1.0 / starts.len() as f64;
        }
        let mdp = TabularMdp::new(ns, na, transition, reward, self.discount, initial, self.horizon)?.with_absorbing(&[goal_state])?;
        let violations = validate_mdp(&mdp);
        if let Some(v) = violations.first() {
            return Err(Error::Config(format!("generated mdp is invalid: {v}")));
        }

        let preferred = self.preferred_actions(&route);
        let mut rows = Vec::with_capacity(ns);
        for _mask in 0..full {
            for &best in &preferred {
                rows.push(self.smoothed_row(best));
            }
        }
        rows.push(self.smoothed_row(STAY));
        let reference = TabularPolicy::from_rows(&rows)?.with_full_support(self.floor)?;

        let scenario = Scenario {
            spec: self.clone(),
            mdp,
            reference,
            goal_state,
            goal_cells,
            route,
        };
        let dist = scenario.goal_distance();
        if dist.map_or(true, |d| d >= self.horizon) {
            return Err(Error::Config("goal is not reachable within the horizon".into()));
        }
        Ok(scenario)
    }

    fn smoothed_row(&self, best: usize) -> Vec<f64> {
        let na = self.num_actions();
        let mut row = vec![self.floor; na];
        row[best] = 1.0 - self.floor * (na - 1) as f64;
        row
    }

    /// Reference action per cell: the clockwise successor on the route,
    /// otherwise a shortest step back to the route (lowest action index on ties).
    fn preferred_actions(&self, route: &[usize]) -> Vec<usize> {
        let cells = self.cells();
        let mut pref = vec![STAY; cells];
        for (i, &c) in route.iter().enumerate() {
            let next = route[(i + 1) % route.len()];
            pref[c] = (0..self.num_actions()).find(|&a| self.step(c, a) == next).unwrap_or(STAY);
        }
        // Shortest step count to the route.
        let mut dist = vec![usize::MAX; cells];
        let mut queue: VecDeque<usize> = route.iter().copied().collect();
        for &c in route {
            dist[c] = 0;
        }
        while let Some(c) = queue.pop_front() {
            for prev in 0..cells {
                if dist[prev] != usize::MAX {
                    continue;
                }
                if (0..self.num_actions()).any(|a| self.step(prev, a) == c) {
                    dist[prev] = dist[c] + 1;
                    queue.push_back(prev);
                }
            }
        }
        for c in 0..cells {
            if dist[c] == 0 || dist[c] == usize::MAX {
                continue;
            }
            pref[c] = (0..self.num_actions())
                .filter(|&a| dist[self.step(c, a)] + 1 == dist[c])
                .min()
                .unwrap_or(STAY);
        }
        pref
    }
}

/// A built scenario: MDP, reference policy and bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub mdp: TabularMdp,
    pub reference: TabularPolicy,
    pub goal_state: usize,
    pub goal_cells: Vec<usize>,
    pub route: Vec<usize>,
}

impl Scenario {
    /// Grid cell of a non-terminal state.
    pub fn cell_of(&self, state: usize) -> Option<usize> {
        (state != self.goal_state).then(|| state % self.spec.cells())
    }

    /// Whether the state's cell lies in the forbidden quadrant.
    pub fn in_zone(&self, state: usize) -> bool {
        self.cell_of(state).is_some_and(|c| self.spec.in_zone(c))
    }

    pub fn on_route(&self, state: usize) -> bool {
        self.cell_of(state).is_some_and(|c| self.route.contains(&c))
    }

    /// Largest over start states of the shortest step count to the goal
    /// state, or `None` if some start cannot reach it.
    pub fn goal_distance(&self) -> Option<usize> {
        let ns = self.mdp.num_states();
        let mut dist = vec![usize::MAX; ns];
        dist[self.goal_state] = 0;
        let mut queue = VecDeque::from([self.goal_state]);
        let preds: Vec<Vec<usize>> = {
            let mut p = vec![Vec::new(); ns];
            for s in 0..ns {
                if s == self.goal_state {
                    continue;
                }
                for a in 0..self.mdp.num_actions() {
                    for &(n, _) in self.mdp.successors(s, a) {
                        p[n].push(s);
                    }
                }
            }
            p
        };
        while let Some(s) = queue.pop_front() {
            for &p in &preds[s] {
                if dist[p] == usize::MAX {
                    dist[p] = dist[s] + 1;
                    queue.push_back(p);
                }
            }
        }
        self.mdp
            .initial_dist()
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(s, _)| dist[s])
            .try_fold(0usize, |acc, d| (d != usize::MAX).then_some(acc.max(d)))
    }
}

pub fn build_perimeter_lap(size: usize, floor: f64) -> Result<Scenario> {
    ScenarioSpec::perimeter_lap(size, floor).build()
}

pub fn build_avoid_zone(size: usize, floor: f64) -> Result<Scenario> {
    ScenarioSpec::avoid_zone(size, floor).build()
}
