//! Point-to-point ICP with an exact, gated nearest-neighbour grid.

use std::collections::HashMap;

use nalgebra::Matrix3;

use crate::config::PlotConfig;
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, RigidTransform, RotationMatrix3, Vec3};

/// Fewer surviving correspondences than this aborts the registration.
pub const MIN_CORRESPONDENCES: usize = 10;

type Cell = (i64, i64, i64);

fn cell_of(p: &Point3, inv: f64) -> Cell {
    (
        (p.x * inv).floor() as i64,
        (p.y * inv).floor() as i64,
        (p.z * inv).floor() as i64,
    )
}

/// Uniform hash grid over a point set. Queries return the exact nearest
/// point within a radius no larger than the cell size.
pub struct SpatialGrid {
    cell: f64,
    inv: f64,
    /// Point coordinates sorted by cell.
    points: Vec<Point3>,
    /// Original index of each sorted point.
    index: Vec<u32>,
    cells: HashMap<Cell, (u32, u32)>,
}

impl SpatialGrid {
    pub fn new(points: &[Point3], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "cell size must be positive");
        let inv = 1.0 / cell;
        let mut keyed: Vec<(Cell, u32)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (cell_of(p, inv), i as u32))
            .collect();
        keyed.sort_unstable();
        let mut cells = HashMap::new();
        let mut start = 0;
        while start < keyed.len() {
            let key = keyed[start].0;
            let mut end = start + 1;
            while end < keyed.len() && keyed[end].0 == key {
                end += 1;
            }
            cells.insert(key, (start as u32, end as u32));
            start = end;
        }
        Self {
            cell,
            inv,
            points: keyed.iter().map(|&(_, i)| points[i as usize]).collect(),
            index: keyed.iter().map(|&(_, i)| i).collect(),
            cells,
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest point within `max_dist` (inclusive) as `(original index,
    /// distance)`. Ties go to the lowest original index.
    pub fn nearest_within(&self, q: &Point3, max_dist: f64) -> Option<(usize, f64)> {
        assert!(max_dist <= self.cell, "query radius exceeds grid cell size");
        let c = cell_of(q, self.inv);
        let local = [
            q.x - c.0 as f64 * self.cell,
            q.y - c.1 as f64 * self.cell,
            q.z - c.2 as f64 * self.cell,
        ];
        let mut best: Option<(u32, f64)> = None;
        let mut best_d2 = max_dist * max_dist;
        // Own cell first, then neighbours, skipping cells whose box is
        // already farther than the best candidate.
        for (dx, dy, dz) in NEIGHBOURS {
            let gap = |d: i64, l: f64| match d {
                -1 => l,
                1 => self.cell - l,
                _ => 0.0,
            };
            let (gx, gy, gz) = (gap(dx, local[0]), gap(dy, local[1]), gap(dz, local[2]));
            if gx * gx + gy * gy + gz * gz > best_d2 {
                continue;
            }
            let Some(&(s, e)) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) else {
                continue;
            };
            for k in s as usize..e as usize {
                let d2 = (self.points[k] - q).norm_squared();
                let idx = self.index[k];
                let better = match best {
                    None => d2 <= best_d2,
                    Some((bi, _)) => d2 < best_d2 || (d2 == best_d2 && idx < bi),
                };
                if better {
                    best = Some((idx, d2));
                    best_d2 = d2;
                }
            }
        }
        best.map(|(i, d2)| (i as usize, d2.sqrt()))
    }
}

const NEIGHBOURS: [(i64, i64, i64); 27] = {
    let mut out = [(0, 0, 0); 27];
    let mut k = 1;
    let mut i = 0;
    while i < 27 {
        let (dx, dy, dz) = ((i % 3) as i64 - 1, ((i / 3) % 3) as i64 - 1, (i / 9) as i64 - 1);
        if !(dx == 0 && dy == 0 && dz == 0) {
            out[k] = (dx, dy, dz);
            k += 1;
        }
        i += 1;
    }
    out
};

/// Keeps the first point falling in each `size`-meter voxel, in input order.
pub fn voxel_subsample(points: &[Point3], size: f64) -> Vec<Point3> {
    let inv = 1.0 / size;
    let mut seen = std::collections::HashSet::with_capacity(points.len() / 4);
    points
        .iter()
        .filter(|p| seen.insert(cell_of(p, inv)))
        .copied()
        .collect()
}

/// Least-squares rigid transform mapping `src[i]` onto `dst[i]`.
pub fn kabsch(src: &[Point3], dst: &[Point3]) -> Result<RigidTransform> {
    assert_eq!(src.len(), dst.len());
    if src.len() < 3 {
        return Err(Error::DegenerateGeometry("need at least 3 point pairs".into()));
    }
    let n = src.len() as f64;
    let cs = src.iter().fold(Vec3::zeros(), |a, p| a + p.coords) / n;
    let cd = dst.iter().fold(Vec3::zeros(), |a, p| a + p.coords) / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s.coords - cs) * (d.coords - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, sign)) * u.transpose();
    let rotation = RotationMatrix3::new(r)?;
    Ok(RigidTransform::new(rotation, cd - r * cs))
}

#[derive(Clone, Debug)]
pub struct IcpOutcome {
    pub transform: RigidTransform,
    /// Accepted iterations.
    pub iterations: usize,
    /// Trimmed RMS residual before the first update and after each accepted one.
    pub residuals: Vec<f64>,
    /// Rotation angle of each accepted incremental update, radians.
    pub update_angles: Vec<f64>,
    pub correspondences: usize,
}

struct Matches {
    src: Vec<Point3>,
    dst: Vec<Point3>,
    /// Root mean square distance over the kept pairs.
    rms: f64,
}

/// Pairs each moved point with its nearest reference point inside `gate` and
/// keeps the `keep` closest pairs (all of them when `keep` is `None`).
fn match_points(
    grid: &SpatialGrid,
    reference: &[Point3],
    moved: &[Point3],
    gate: f64,
    keep: Option<usize>,
) -> Matches {
    let mut found: Vec<(f64, usize, usize)> = moved
        .iter()
        .enumerate()
        .filter_map(|(k, p)| grid.nearest_within(p, gate).map(|(i, d)| (d, k, i)))
        .collect();
    if let Some(keep) = keep {
        if keep < found.len() {
            found.select_nth_unstable_by(keep, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            found.truncate(keep);
        }
    }
    found.sort_unstable_by_key(|f| f.1);
    let rms = if found.is_empty() {
        f64::INFINITY
    } else {
        (found.iter().map(|f| f.0 * f.0).sum::<f64>() / found.len() as f64).sqrt()
    };
    Matches {
        src: found.iter().map(|f| moved[f.1]).collect(),
        dst: found.iter().map(|f| reference[f.2]).collect(),
        rms,
    }
}

/// Trimmed point-to-point ICP starting from `init`; returns `fine ∘ init`
/// with the iteration history.
///
/// The number of kept pairs is fixed after the first matching at
/// `icp_trim_fraction` of the gated pairs. An update that would raise the
/// residual is discarded and ends the loop, so the reported residual sequence
/// never increases.
pub fn fine_register_icp_detailed(
    reference: &PointCloud,
    moving: &PointCloud,
    init: &RigidTransform,
    cfg: &PlotConfig,
) -> Result<IcpOutcome> {
    let gate = cfg.icp_max_correspondence;
    let sub = voxel_subsample(&moving.points, cfg.icp_subsample);
    let grid = SpatialGrid::new(&reference.points, gate);
    let moved_by = |t: &RigidTransform| sub.iter().map(|p| t.transform_point(p)).collect::<Vec<_>>();

    let mut current = *init;
    let gated = match_points(&grid, &reference.points, &moved_by(&current), gate, None);
    let keep = ((gated.src.len() as f64 * cfg.icp_trim_fraction).round() as usize).max(MIN_CORRESPONDENCES);
    if gated.src.len() < MIN_CORRESPONDENCES {
        return Err(Error::NoCorrespondences {
            found: gated.src.len(),
            required: MIN_CORRESPONDENCES,
        });
    }
    let mut matches = match_points(&grid, &reference.points, &moved_by(&current), gate, Some(keep));
    let mut outcome = IcpOutcome {
        transform: current,
        iterations: 0,
        residuals: vec![matches.rms],
        update_angles: Vec::new(),
        correspondences: matches.src.len(),
    };
    for _ in 0..cfg.icp_max_iter {
        let step = kabsch(&matches.src, &matches.dst)?;
        let candidate = RigidTransform::compose(&step, &current);
        let next = match_points(&grid, &reference.points, &moved_by(&candidate), gate, Some(keep));
        if next.src.len() < keep || next.rms > matches.rms {
            break;
        }
        let improvement = matches.rms - next.rms;
        current = candidate;
        matches = next;
        outcome.iterations += 1;
        outcome.residuals.push(matches.rms);
        outcome
            .update_angles
            .push(crate::geometry::rotation_angle_between(&step.rotation, &RotationMatrix3::identity()));
        outcome.correspondences = matches.src.len();
        if improvement < cfg.icp_convergence_tol {
            break;
        }
    }
    outcome.transform = current;
    Ok(outcome)
}

/// Point-to-point ICP refinement of `init`.
pub fn fine_register_icp(
    reference: &PointCloud,
    moving: &PointCloud,
    init: &RigidTransform,
    cfg: &PlotConfig,
) -> Result<RigidTransform> {
    if cfg.icp_max_iter == 0 {
        return Ok(*init);
    }
    fine_register_icp_detailed(reference, moving, init, cfg).map(|o| o.transform)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_angle_between;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut impl Rng, n: usize, extent: f64) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(0.0..extent),
                    rng.random_range(0.0..extent),
                    rng.random_range(0.0..extent / 4.0),
                )
            })
            .collect()
    }

    #[test]
    fn grid_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 3_000, 10.0);
        let grid = SpatialGrid::new(&pts, 0.7);
        for _ in 0..2_000 {
            let q = Point3::new(
                rng.random_range(-1.0..11.0),
                rng.random_range(-1.0..11.0),
                rng.random_range(-1.0..3.5),
            );
            let gate = rng.random_range(0.05..0.7);
            let brute = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - q).norm()))
                .filter(|(_, d)| *d <= gate)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let fast = grid.nearest_within(&q, gate);
            match (brute, fast) {
                (None, None) => {}
                (Some((bi, bd)), Some((fi, fd))) => {
                    assert_eq!(bd, fd);
                    assert_eq!(bi, fi);
                }
                other => panic!("mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn subsample_keeps_first_per_voxel() {
        let pts = vec![
            Point3::new(0.01, 0.01, 0.01),
            Point3::new(0.05, 0.05, 0.05),
            Point3::new(0.25, 0.01, 0.01),
            Point3::new(-0.01, 0.0, 0.0),
        ];
        let sub = voxel_subsample(&pts, 0.2);
        assert_eq!(sub, vec![pts[0], pts[2], pts[3]]);
    }

    #[test]
    fn kabsch_recovers_exact_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let t = crate::geometry::tests::random_transform(&mut rng);
            let src = random_points(&mut rng, 50, 5.0);
            let dst: Vec<_> = src.iter().map(|p| t.transform_point(p)).collect();
            let est = kabsch(&src, &dst).unwrap();
            assert!(rotation_angle_between(&est.rotation, &t.rotation) < 1e-9);
            assert!((est.translation - t.translation).norm() < 1e-8);
        }
    }

    fn structured_scene(rng: &mut impl Rng) -> PointCloud {
        // ground with a few vertical posts and boxes, enough horizontal structure
        let mut pts = Vec::new();
        for _ in 0..20_000 {
            let (x, y) = (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0));
            pts.push(Point3::new(x, y, 0.05 * (x * 0.7).sin()));
        }
        for k in 0..12 {
            let (cx, cy) = (2.0 + 1.5 * k as f64, 3.0 + ((k * 7) % 13) as f64);
            let r = 0.2 + 0.05 * k as f64;
            for _ in 0..800 {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                pts.push(Point3::new(cx + r * a.cos(), cy + r * a.sin(), rng.random_range(0.0..4.0)));
            }
        }
        PointCloud::new(pts)
    }

    #[test]
    fn identity_init_on_exact_copy_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = structured_scene(&mut rng);
        let out = fine_register_icp_detailed(&scene, &scene, &RigidTransform::identity(), &PlotConfig::default()).unwrap();
        assert!(out.iterations <= 2);
        assert!(out.update_angles.iter().all(|a| *a < 1e-4));
        assert!(out.transform.translation.norm() < 1e-9);
    }

    #[test]
    fn recovers_small_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scene = structured_scene(&mut rng);
        let truth = RigidTransform::new(RotationMatrix3::about_z(0.005), Vec3::new(0.12, -0.09, 0.1));
        let moving = truth.inverse().apply(&scene);
        let out = fine_register_icp_detailed(&scene, &moving, &RigidTransform::identity(), &PlotConfig::default()).unwrap();
        assert!((out.transform.translation - truth.translation).norm() < 0.02, "{:?}", out.transform);
        assert!(out.residuals.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_iterations_returns_init() {
        let cfg = PlotConfig {
            icp_max_iter: 0,
            ..PlotConfig::default()
        };
        let init = RigidTransform::from_translation(Vec3::new(1.0, 2.0, 3.0));
        let empty = PointCloud::new(vec![]);
        assert_eq!(fine_register_icp(&empty, &empty, &init, &cfg).unwrap(), init);
    }

    #[test]
    fn disjoint_clouds_have_no_correspondences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = PointCloud::new(random_points(&mut rng, 500, 5.0));
        let b = RigidTransform::from_translation(Vec3::new(100.0, 0.0, 0.0)).apply(&a);
        assert!(matches!(
            fine_register_icp(&a, &b, &RigidTransform::identity(), &PlotConfig::default()),
            Err(Error::NoCorrespondences { found: 0, .. })
        ));
    }
}
