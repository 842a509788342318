use std::path::Path;

use serde::Serialize;

use super::LatentEncoder;
use crate::error::{Error, Result};
use crate::worlds::grid::OccupancyGrid;
use crate::worlds::{self, render, EnvConfig, Image, Rect, RobotKind, WorldState};

/// Resolution of the grid used for geodesic distances, meters.
pub const GEODESIC_RESOLUTION: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapCell {
    pub row: usize,
    pub col: usize,
    pub x: f64,
    pub y: f64,
    pub latent: f64,
    pub geodesic: f64,
    pub euclidean: f64,
}

/// Latent distance from every reachable probe position to a reference.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMap {
    pub resolution: usize,
    pub reference: (usize, usize),
    pub cells: Vec<MapCell>,
    pub corr_geodesic: f64,
    pub corr_euclidean: f64,
}

/// Pearson correlation; zero when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

fn probe(bounds: &Rect, n: usize, (r, c): (usize, usize)) -> [f64; 2] {
    [
        bounds.min[0] + (c as f64 + 0.5) * bounds.width() / n as f64,
        bounds.min[1] + (r as f64 + 0.5) * bounds.height() / n as f64,
    ]
}

/// Places the point robot at each of `resolution^2` probe positions over the
/// free arena, renders the scene with the goal disk at `reference`, and
/// compares encodings with the encoding of the robot resting at the
/// reference. `reference` snaps to the nearest probe. Probes that are not
/// legal robot centers or have no grid path to the reference are skipped.
pub fn latent_map(
    encoder: &LatentEncoder,
    env: &EnvConfig,
    obstacles: &[Rect],
    reference: [f64; 2],
    resolution: usize,
) -> Result<LatentMap> {
    if resolution == 0 {
        return Err(Error::InvalidArgument("latent map resolution must be positive".into()));
    }
    if env.image_size != encoder.image_size() {
        return Err(Error::Config(format!(
            "environment renders {} px, encoder expects {} px",
            env.image_size,
            encoder.image_size()
        )));
    }
    let bounds = env.free_bounds();
    let snap = |v: f64, lo: f64, w: f64| (((v - lo) / w * resolution as f64).floor().max(0.0) as usize).min(resolution - 1);
    let ref_cell = (
        snap(reference[1], bounds.min[1], bounds.height()),
        snap(reference[0], bounds.min[0], bounds.width()),
    );
    let ref_pos = probe(&bounds, resolution, ref_cell);
    let scene = WorldState::new(RobotKind::Point, ref_pos, ref_pos, obstacles.to_vec());
    if !scene.is_free(ref_pos, env) {
        return Err(Error::InvalidArgument(format!("reference {ref_pos:?} is inside an obstacle")));
    }
    let grid = OccupancyGrid::from_obstacles(obstacles, env, GEODESIC_RESOLUTION, 0.0);
    let ref_grid = grid
        .nearest_free(ref_pos)
        .ok_or_else(|| Error::Infeasible("no free grid cell near the reference".into()))?;

    let mut cells = Vec::new();
    let mut frames: Vec<Image> = Vec::new();
    for r in 0..resolution {
        for c in 0..resolution {
            let p = probe(&bounds, resolution, (r, c));
            if !scene.is_free(p, env) {
                continue;
            }
            let geodesic = if (r, c) == ref_cell {
                0.0
            } else {
                let Some(g) = grid.nearest_free(p) else { continue };
                let Some((_, len)) = grid.shortest_path(g, ref_grid) else { continue };
                len * grid.cell_size
            };
            frames.push(render(&WorldState { pos: p, ..scene.clone() }, env));
            cells.push(MapCell {
                row: r,
                col: c,
                x: p[0],
                y: p[1],
                latent: 0.0,
                geodesic,
                euclidean: worlds::dist(p, ref_pos),
            });
        }
    }
    let reference_frame = render(&scene, env);
    let x_ref = encoder.encode(&[&reference_frame])?.remove(0);
    for (chunk, frames) in cells.chunks_mut(64).zip(frames.chunks(64)) {
        let refs: Vec<&Image> = frames.iter().collect();
        for (cell, x) in chunk.iter_mut().zip(encoder.encode(&refs)?) {
            cell.latent = encoder.distance(&x, &x_ref);
        }
    }
    let latent: Vec<f64> = cells.iter().map(|c| c.latent).collect();
    let geo: Vec<f64> = cells.iter().map(|c| c.geodesic).collect();
    let euc: Vec<f64> = cells.iter().map(|c| c.euclidean).collect();
    Ok(LatentMap {
        resolution,
        reference: ref_cell,
        corr_geodesic: pearson(&latent, &geo),
        corr_euclidean: pearson(&latent, &euc),
        cells,
    })
}

impl LatentMap {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for c in &self.cells {
            w.serialize(c)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Grayscale heatmap, lighter for larger latent distance, `scale` pixels
    /// per probe, top row = largest y. Skipped probes are dark red.
    pub fn heatmap(&self, scale: usize) -> Image {
        let n = self.resolution;
        let side = n * scale;
        let max = self.cells.iter().map(|c| c.latent).fold(0.0, f64::max);
        let mut data = [90u8, 0, 0].repeat(side * side);
        for c in &self.cells {
            let v = if max > 0.0 { (c.latent / max * 255.0).round() as u8 } else { 0 };
            for dy in 0..scale {
                let row = (n - 1 - c.row) * scale + dy;
                for dx in 0..scale {
                    let i = 3 * (row * side + c.col * scale + dx);
                    data[i..i + 3].copy_from_slice(&[v, v, v]);
                }
            }
        }
        Image {
            width: side,
            height: side,
            data,
        }
    }
}
