//! Ground plane fitting and leveling.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::PlotConfig;
use crate::error::{Error, Result};
use crate::geometry::{
    rotation_between_vectors, Label, Plane, Point3, PointCloud, RotationMatrix3, Vec3,
};

/// Hypotheses are scored on at most this many points; the final
/// least-squares refinement uses every inlier.
const RANSAC_SCORING_POINTS: usize = 20_000;

/// A cloud rotated so its ground plane is horizontal.
#[derive(Clone, Debug)]
pub struct LeveledCloud {
    pub cloud: PointCloud,
    /// Rotation applied to the input cloud (about the origin).
    pub leveling: RotationMatrix3,
    pub plane_before: Plane,
    pub plane_after: Plane,
}

/// Orthogonal least-squares plane through `points`.
pub fn fit_plane_least_squares(points: &[Point3]) -> Result<Plane> {
    if points.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "{} points cannot define a plane",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |acc, p| acc + p.coords) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / n);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let mut sorted: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    if sorted[1] <= 1e-12 * sorted[2].max(1e-300) {
        return Err(Error::DegenerateGeometry("points are collinear".into()));
    }
    let normal = eig.eigenvectors.column(imin).into_owned();
    Plane::from_point_normal(&Point3::from(centroid), &normal)
}

/// RANSAC plane fit followed by a least-squares refit on the inliers of the
/// best hypothesis. Deterministic for a given seed.
pub fn fit_plane_ransac(
    ground: &PointCloud,
    iterations: usize,
    inlier_tol: f64,
    seed: u64,
) -> Result<Plane> {
    let pts = &ground.points;
    if pts.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "{} ground points cannot define a plane",
            pts.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scoring: Vec<Point3> = if pts.len() > RANSAC_SCORING_POINTS {
        let mut idx = sample(&mut rng, pts.len(), RANSAC_SCORING_POINTS).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pts[i]).collect()
    } else {
        pts.clone()
    };

    let (lo, hi) = ground.bounds().expect("non-empty");
    let scale = (hi - lo).norm().max(1e-12);
    let mut best: Option<(usize, Plane)> = None;
    for _ in 0..iterations {
        let i = rng.random_range(0..scoring.len());
        let j = rng.random_range(0..scoring.len());
        let k = rng.random_range(0..scoring.len());
        let (a, b, c) = (scoring[i], scoring[j], scoring[k]);
        let normal = (b - a).cross(&(c - a));
        if normal.norm() <= 1e-10 * scale * scale {
            continue;
        }
        let plane = Plane::from_point_normal(&a, &normal)?;
        let inliers = scoring
            .iter()
            .filter(|p| plane.signed_distance(p).abs() <= inlier_tol)
            .count();
        if best.as_ref().is_none_or(|(n, _)| inliers > *n) {
            best = Some((inliers, plane));
        }
    }
    let (_, model) = best.ok_or_else(|| {
        Error::DegenerateGeometry(format!(
            "all {iterations} RANSAC samples were collinear"
        ))
    })?;
    let inliers: Vec<Point3> = pts
        .iter()
        .filter(|p| model.signed_distance(p).abs() <= inlier_tol)
        .copied()
        .collect();
    match fit_plane_least_squares(&inliers) {
        Ok(plane) => Ok(plane),
        Err(_) => Ok(model),
    }
}

/// Rotates the cloud so the plane normal becomes +z.
pub fn level(cloud: &PointCloud, plane: &Plane) -> LeveledCloud {
    let leveling = rotation_between_vectors(&plane.normal(), &Vec3::z());
    let rotated = crate::geometry::RigidTransform::from_rotation(leveling).apply(cloud);
    LeveledCloud {
        cloud: rotated,
        leveling,
        plane_before: *plane,
        plane_after: plane.rotated(&leveling),
    }
}

/// Fits the ground plane on Ground-labelled points and levels the cloud.
pub fn level_classified(cloud: &PointCloud, cfg: &PlotConfig) -> Result<LeveledCloud> {
    let ground = cloud.filter_label(Label::Ground);
    let plane = fit_plane_ransac(&ground, cfg.ransac_iterations, cfg.ransac_inlier_tol, cfg.rng_seed)?;
    Ok(level(cloud, &plane))
}
