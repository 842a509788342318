use std::io::Write;
use std::path::Path;

use super::{EnvConfig, WorldState};
use crate::error::{Error, Result};

/// Goal and distractor colors.
pub const PALETTE: [[u8; 3]; 5] = [
    [230, 60, 60],
    [60, 200, 80],
    [240, 200, 40],
    [210, 80, 220],
    [250, 140, 30],
];

const BACKGROUND: [u8; 3] = [24, 24, 32];
const OBSTACLE: [u8; 3] = [170, 170, 170];
const ROBOT: [u8; 3] = [70, 140, 255];

/// 8-bit RGB image, row-major, top row first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Binary portable pixmap (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

enum Shape {
    Rect([f64; 2], [f64; 2]),
    Disk([f64; 2], f64),
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect(lo, hi) => x >= lo[0] && x <= hi[0] && y >= lo[1] && y <= hi[1],
            Shape::Disk(c, r) => (x - c[0]).powi(2) + (y - c[1]).powi(2) <= r * r,
        }
    }

    /// Pixel-space bounding box `(row0, row1, col0, col1)`, inclusive,
    /// clipped to the image.
    fn pixel_bounds(&self, cfg: &EnvConfig) -> Option<(usize, usize, usize, usize)> {
        let (lo, hi) = match *self {
            Shape::Rect(lo, hi) => (lo, hi),
            Shape::Disk(c, r) => ([c[0] - r, c[1] - r], [c[0] + r, c[1] + r]),
        };
        let n = cfg.image_size as f64;
        let a = &cfg.arena;
        let col = |x: f64| (x - a.min[0]) / a.width() * n;
        let row = |y: f64| (a.max[1] - y) / a.height() * n;
        let c0 = col(lo[0]).floor().max(0.0);
        let c1 = col(hi[0]).ceil().min(n) - 1.0;
        let r0 = row(hi[1]).floor().max(0.0);
        let r1 = row(lo[1]).ceil().min(n) - 1.0;
        if c1 < c0 || r1 < r0 {
            return None;
        }
        Some((r0 as usize, r1 as usize, c0 as usize, c1 as usize))
    }
}

/// Rasterizes the scene: background, obstacles, distractors, goal disk, robot
/// disk, each pixel the average of `supersample^2` point samples. A pure
/// function of `(state, cfg)`.
pub fn render(state: &WorldState, cfg: &EnvConfig) -> Image {
    let ss = cfg.supersample.max(1);
    let mut layers: Vec<(Shape, [u8; 3])> = Vec::new();
    for r in &state.obstacles {
        layers.push((Shape::Rect(r.min, r.max), OBSTACLE));
    }
    for d in &state.distractors {
        let h = d.half_size;
        layers.push((
            Shape::Rect([d.center[0] - h, d.center[1] - h], [d.center[0] + h, d.center[1] + h]),
            PALETTE[d.color % PALETTE.len()],
        ));
    }
    layers.push((
        Shape::Disk(state.goal, cfg.goal_radius),
        PALETTE[state.goal_color % PALETTE.len()],
    ));
    layers.push((Shape::Disk(state.pos, cfg.robot_radius), ROBOT));

    rasterize(cfg, &layers, ss)
}

/// Painter's algorithm evaluated per sub-sample, then box-filtered.
fn rasterize(cfg: &EnvConfig, layers: &[(Shape, [u8; 3])], ss: usize) -> Image {
    let n = cfg.image_size;
    let m = n * ss;
    let mut samples = vec![BACKGROUND; m * m];
    let a = &cfg.arena;
    let step_x = a.width() / m as f64;
    let step_y = a.height() / m as f64;
    for (shape, color) in layers {
        let Some((r0, r1, c0, c1)) = shape.pixel_bounds(cfg) else {
            continue;
        };
        for sr in r0 * ss..(r1 + 1) * ss {
            let y = a.max[1] - (sr as f64 + 0.5) * step_y;
            for sc in c0 * ss..(c1 + 1) * ss {
                let x = a.min[0] + (sc as f64 + 0.5) * step_x;
                if shape.contains(x, y) {
                    samples[sr * m + sc] = *color;
                }
            }
        }
    }
    let mut data = vec![0u8; n * n * 3];
    let denom = (ss * ss) as u32;
    for row in 0..n {
        for col in 0..n {
            let mut sum = [0u32; 3];
            for sr in row * ss..(row + 1) * ss {
                for sc in col * ss..(col + 1) * ss {
                    let s = samples[sr * m + sc];
                    for k in 0..3 {
                        sum[k] += s[k] as u32;
                    }
                }
            }
            for k in 0..3 {
                // round half up
                data[(row * n + col) * 3 + k] = ((sum[k] + denom / 2) / denom) as u8;
            }
        }
    }
    Image {
        width: n,
        height: n,
        data,
    }
}
