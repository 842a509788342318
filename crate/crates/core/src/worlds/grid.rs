//! Occupancy grids and 8-connected A* search over them.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{EnvConfig, Rect};

pub type Cell = (usize, usize);

/// Row-major boolean grid over the arena. Row 0 is the bottom (smallest y).
#[derive(Clone, Debug)]
pub struct OccupancyGrid {
    pub rows: usize,
    pub cols: usize,
    pub cell_size: f64,
    origin: [f64; 2],
    blocked: Vec<bool>,
}

impl OccupancyGrid {
    /// Rasterizes `obstacles` at `resolution` meters per cell. A cell is
    /// blocked when its center is not a legal robot center with `margin` of
    /// clearance on top of the robot radius.
    pub fn from_obstacles(obstacles: &[Rect], cfg: &EnvConfig, resolution: f64, margin: f64) -> Self {
        let a = cfg.arena;
        let cols = (a.width() / resolution).round().max(1.0) as usize;
        let rows = (a.height() / resolution).round().max(1.0) as usize;
        let cell_size = a.width() / cols as f64;
        let bounds = cfg.free_bounds();
        let inflated: Vec<Rect> = obstacles
            .iter()
            .map(|r| r.inflate(cfg.robot_radius + margin))
            .collect();
        let mut grid = OccupancyGrid {
            rows,
            cols,
            cell_size,
            origin: a.min,
            blocked: vec![false; rows * cols],
        };
        for r in 0..rows {
            for c in 0..cols {
                let p = grid.center((r, c));
                let inside = bounds.contains_closed(p);
                grid.blocked[r * cols + c] = !inside || inflated.iter().any(|o| o.contains_open(p));
            }
        }
        grid
    }

    /// Grid with an explicit blocked mask, unit cells, origin at zero.
    pub fn from_cells(rows: usize, cols: usize, blocked: Vec<bool>) -> Self {
        assert_eq!(blocked.len(), rows * cols, "mask size");
        OccupancyGrid {
            rows,
            cols,
            cell_size: 1.0,
            origin: [0.0, 0.0],
            blocked,
        }
    }

    pub fn is_blocked(&self, cell: Cell) -> bool {
        self.blocked[cell.0 * self.cols + cell.1]
    }

    pub fn center(&self, (r, c): Cell) -> [f64; 2] {
        [
            self.origin[0] + (c as f64 + 0.5) * self.cell_size,
            self.origin[1] + (r as f64 + 0.5) * self.cell_size,
        ]
    }

    /// Cell containing `p`, clamped to the grid.
    pub fn cell_of(&self, p: [f64; 2]) -> Cell {
        let f = |v: f64, o: f64, n: usize| (((v - o) / self.cell_size).floor().max(0.0) as usize).min(n - 1);
        (f(p[1], self.origin[1], self.rows), f(p[0], self.origin[0], self.cols))
    }

    /// Nearest free cell to `p` by center distance, ties broken by index.
    pub fn nearest_free(&self, p: [f64; 2]) -> Option<Cell> {
        let home = self.cell_of(p);
        if !self.is_blocked(home) {
            return Some(home);
        }
        let mut best: Option<(f64, Cell)> = None;
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.is_blocked((r, c)) {
                    continue;
                }
                let d = super::dist(p, self.center((r, c)));
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, (r, c)));
                }
            }
        }
        best.map(|(_, cell)| cell)
    }

    /// Free neighbors with step costs. Diagonal moves require both adjacent
    /// orthogonal cells to be free, so paths never cut obstacle corners.
    pub fn neighbors(&self, (r, c): Cell) -> Vec<(Cell, f64)> {
        let mut out = Vec::with_capacity(8);
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nc < 0 || nr >= self.rows as i64 || nc >= self.cols as i64 {
                    continue;
                }
                let n = (nr as usize, nc as usize);
                if self.is_blocked(n) {
                    continue;
                }
                if dr != 0 && dc != 0 && (self.is_blocked((nr as usize, c)) || self.is_blocked((r, nc as usize))) {
                    continue;
                }
                let cost = if dr != 0 && dc != 0 { std::f64::consts::SQRT_2 } else { 1.0 };
                out.push((n, cost));
            }
        }
        out
    }

    /// A* with the octile heuristic; returns the cell sequence from `start`
    /// to `goal` inclusive and its length in cell units.
    pub fn shortest_path(&self, start: Cell, goal: Cell) -> Option<(Vec<Cell>, f64)> {
        if self.is_blocked(start) || self.is_blocked(goal) {
            return None;
        }
        let idx = |c: Cell| c.0 * self.cols + c.1;
        let h = |c: Cell| {
            let dr = c.0.abs_diff(goal.0) as f64;
            let dc = c.1.abs_diff(goal.1) as f64;
            dr.max(dc) + (std::f64::consts::SQRT_2 - 1.0) * dr.min(dc)
        };
        let n = self.rows * self.cols;
        let mut cost = vec![f64::INFINITY; n];
        let mut parent = vec![usize::MAX; n];
        let mut closed = vec![false; n];
        let mut open = BinaryHeap::new();
        let mut tick = 0u64;
        cost[idx(start)] = 0.0;
        open.push(Entry { f: h(start), tick, cell: start });
        while let Some(Entry { cell, .. }) = open.pop() {
            let i = idx(cell);
            if closed[i] {
                continue;
            }
            closed[i] = true;
            if cell == goal {
                let mut path = vec![cell];
                let mut j = i;
                while parent[j] != usize::MAX {
                    j = parent[j];
                    path.push((j / self.cols, j % self.cols));
                }
                path.reverse();
                return Some((path, cost[i]));
            }
            for (nb, step) in self.neighbors(cell) {
                let k = idx(nb);
                let g = cost[i] + step;
                if g < cost[k] - 1e-12 {
                    cost[k] = g;
                    parent[k] = i;
                    tick += 1;
                    open.push(Entry { f: g + h(nb), tick, cell: nb });
                }
            }
        }
        None
    }

    /// Whether any path joins the cells of `a` and `b`.
    pub fn connected(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        self.shortest_path(self.cell_of(a), self.cell_of(b)).is_some()
    }
}

struct Entry {
    f: f64,
    tick: u64,
    cell: Cell,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // Min-heap on f, then FIFO on insertion order.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.tick.cmp(&self.tick))
    }
}
