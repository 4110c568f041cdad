//! Ground / vegetation classification by cloth simulation.
//!
//! The cloud is turned upside down and a regular grid of particles is
//! dropped onto it. Each particle falls a fixed step per iteration, sticks
//! once it reaches the highest inverted point under it, and is pulled toward
//! the mean of its four neighbours. Points close to the settled cloth are
//! ground.

use std::collections::VecDeque;

use crate::config::PlotConfig;
use crate::error::{Error, Result};
use crate::geometry::{Label, PointCloud};

/// Particle displacement below which the cloth counts as settled (meters).
pub const SETTLE_TOL: f64 = 1e-4;
/// Gravity step as a fraction of the cloth resolution.
const GRAVITY_STEP: f64 = 0.1;
/// Weight of the pull toward the neighbour mean.
const RIGIDNESS: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct ClothGrid {
    pub cols: usize,
    pub rows: usize,
    pub resolution: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    /// Inverted height of each particle, row-major.
    pub particle_height: Vec<f64>,
    pub movable: Vec<bool>,
    /// Highest inverted point in each particle's footprint (filled in from
    /// neighbours where the footprint is empty).
    pub target_height: Vec<f64>,
    pub iterations: usize,
}

impl ClothGrid {
    #[inline]
    fn node_of(&self, x: f64, y: f64) -> usize {
        let i = (((x - self.origin_x) / self.resolution).round().max(0.0) as usize).min(self.cols - 1);
        let j = (((y - self.origin_y) / self.resolution).round().max(0.0) as usize).min(self.rows - 1);
        j * self.cols + i
    }

    /// Bilinear cloth height (inverted) at (x, y); clamps to the nearest node outside the grid.
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        let fx = ((x - self.origin_x) / self.resolution).clamp(0.0, (self.cols - 1) as f64);
        let fy = ((y - self.origin_y) / self.resolution).clamp(0.0, (self.rows - 1) as f64);
        let i0 = (fx.floor() as usize).min(self.cols.saturating_sub(2));
        let j0 = (fy.floor() as usize).min(self.rows.saturating_sub(2));
        let i1 = (i0 + 1).min(self.cols - 1);
        let j1 = (j0 + 1).min(self.rows - 1);
        let tx = (fx - i0 as f64).clamp(0.0, 1.0);
        let ty = (fy - j0 as f64).clamp(0.0, 1.0);
        let h = |i: usize, j: usize| self.particle_height[j * self.cols + i];
        let bottom = h(i0, j0) * (1.0 - tx) + h(i1, j0) * tx;
        let top = h(i0, j1) * (1.0 - tx) + h(i1, j1) * tx;
        bottom * (1.0 - ty) + top * ty
    }
}

/// Drops the cloth onto the inverted cloud and returns its settled state.
pub fn simulate_cloth(cloud: &PointCloud, resolution: f64, max_iter: usize) -> Result<ClothGrid> {
    let (lo, hi) = cloud.bounds().ok_or(Error::EmptyCloud)?;
    let (ex, ey) = (hi.x - lo.x, hi.y - lo.y);
    if ex < 2.0 * resolution || ey < 2.0 * resolution {
        return Err(Error::DegenerateExtent {
            extent_x: ex,
            extent_y: ey,
        });
    }
    let cols = (ex / resolution).ceil() as usize + 1;
    let rows = (ey / resolution).ceil() as usize + 1;
    let n = cols * rows;
    let mut grid = ClothGrid {
        cols,
        rows,
        resolution,
        origin_x: lo.x,
        origin_y: lo.y,
        particle_height: Vec::new(),
        movable: vec![true; n],
        target_height: vec![f64::NEG_INFINITY; n],
        iterations: 0,
    };

    for p in &cloud.points {
        let k = grid.node_of(p.x, p.y);
        let inv = -p.z;
        if inv > grid.target_height[k] {
            grid.target_height[k] = inv;
        }
    }
    fill_empty_targets(&mut grid.target_height, cols, rows);

    let top = grid
        .target_height
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut height = vec![top; n];
    let step = GRAVITY_STEP * resolution;
    let mut next = height.clone();

    for k in 0..n {
        if height[k] <= grid.target_height[k] {
            height[k] = grid.target_height[k];
            grid.movable[k] = false;
        }
    }

    for iter in 0..max_iter {
        grid.iterations = iter + 1;
        let before = height.clone();
        // gravity + collision
        for k in 0..n {
            if grid.movable[k] {
                height[k] -= step;
                if height[k] <= grid.target_height[k] {
                    height[k] = grid.target_height[k];
                    grid.movable[k] = false;
                }
            }
        }
        // internal constraint (Jacobi sweep over the 4-neighbourhood)
        for j in 0..rows {
            for i in 0..cols {
                let k = j * cols + i;
                if !grid.movable[k] {
                    next[k] = height[k];
                    continue;
                }
                let mut sum = 0.0;
                let mut cnt = 0.0;
                if i > 0 {
                    sum += height[k - 1];
                    cnt += 1.0;
                }
                if i + 1 < cols {
                    sum += height[k + 1];
                    cnt += 1.0;
                }
                if j > 0 {
                    sum += height[k - cols];
                    cnt += 1.0;
                }
                if j + 1 < rows {
                    sum += height[k + cols];
                    cnt += 1.0;
                }
                let h = height[k] + RIGIDNESS * (sum / cnt - height[k]);
                next[k] = h.max(grid.target_height[k]);
                if h <= grid.target_height[k] {
                    grid.movable[k] = false;
                }
            }
        }
        std::mem::swap(&mut height, &mut next);

        let max_move = height
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if max_move < SETTLE_TOL {
            break;
        }
    }
    grid.particle_height = height;
    Ok(grid)
}

/// Gives every empty footprint the mean of the nearest filled footprints
/// (breadth-first over the 4-neighbourhood).
fn fill_empty_targets(target: &mut [f64], cols: usize, rows: usize) {
    let mut queue: VecDeque<usize> = (0..target.len())
        .filter(|&k| target[k].is_finite())
        .collect();
    let mut frontier_next = Vec::new();
    while !queue.is_empty() {
        frontier_next.clear();
        for &k in &queue {
            let (i, j) = (k % cols, k / cols);
            let mut push = |nk: usize| {
                if !target[nk].is_finite() {
                    frontier_next.push(nk);
                }
            };
            if i > 0 {
                push(k - 1);
            }
            if i + 1 < cols {
                push(k + 1);
            }
            if j > 0 {
                push(k - cols);
            }
            if j + 1 < rows {
                push(k + cols);
            }
        }
        frontier_next.sort_unstable();
        frontier_next.dedup();
        // Values come from already-filled neighbours only, so a layer never
        // reads its own freshly written entries.
        let values: Vec<f64> = frontier_next
            .iter()
            .map(|&k| {
                let (i, j) = (k % cols, k / cols);
                let mut sum = 0.0;
                let mut cnt = 0.0;
                let mut take = |nk: usize| {
                    if target[nk].is_finite() {
                        sum += target[nk];
                        cnt += 1.0;
                    }
                };
                if i > 0 {
                    take(k - 1);
                }
                if i + 1 < cols {
                    take(k + 1);
                }
                if j > 0 {
                    take(k - cols);
                }
                if j + 1 < rows {
                    take(k + cols);
                }
                sum / cnt
            })
            .collect();
        for (&k, v) in frontier_next.iter().zip(values) {
            target[k] = v;
        }
        queue = frontier_next.iter().copied().collect();
    }
}

/// Labels every point Ground or Vegetation. Existing labels are replaced.
pub fn classify_ground(cloud: &PointCloud, cfg: &PlotConfig) -> Result<PointCloud> {
    let grid = simulate_cloth(cloud, cfg.cloth_resolution, cfg.cloth_max_iter)?;
    let threshold = cfg.cloth_class_threshold;
    let labels = cloud
        .points
        .iter()
        .map(|p| {
            if (grid.height_at(p.x, p.y) + p.z).abs() <= threshold {
                Label::Ground
            } else {
                Label::Vegetation
            }
        })
        .collect();
    let mut out = cloud.clone();
    out.set_labels(labels)?;
    Ok(out)
}
