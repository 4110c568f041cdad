//! End-to-end registration: ground filtering, leveling, canopy matching,
//! transform composition and ICP refinement.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::PlotConfig;
use crate::csf::classify_ground;
use crate::error::{Error, Result};
use crate::geometry::{Plane, Point3, PointCloud, RigidTransform, RotationMatrix3, Vec3};
use crate::ground::{level_classified, LeveledCloud};
use crate::icp::{fine_register_icp_detailed, IcpOutcome};
use crate::io::TransformJson;
use crate::matcher::{match_images, ImageMatch};
use crate::raster::{canopy_stages, BinaryImage, CanopyStages};

/// Wall-clock seconds per stage. Per-cloud stages are summed over both clouds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub filtering: f64,
    pub ground_alignment: f64,
    pub image_matching: f64,
    pub icp: f64,
}

impl StageTimings {
    pub fn coarse_total(&self) -> f64 {
        self.filtering + self.ground_alignment + self.image_matching
    }
}

/// One input cloud after filtering, leveling and projection.
#[derive(Clone, Debug)]
pub struct PreparedCloud {
    pub leveled: LeveledCloud,
    pub stages: CanopyStages,
    pub filtering_s: f64,
    pub leveling_s: f64,
    pub projection_s: f64,
}

impl PreparedCloud {
    pub fn image(&self) -> &BinaryImage {
        &self.stages.filtered
    }
}

pub fn prepare_cloud(cloud: &PointCloud, cfg: &PlotConfig) -> Result<PreparedCloud> {
    let t0 = Instant::now();
    let classified = classify_ground(cloud, cfg)?;
    let t1 = Instant::now();
    let leveled = level_classified(&classified, cfg)?;
    let t2 = Instant::now();
    let stages = canopy_stages(&leveled, cfg)?;
    let t3 = Instant::now();
    Ok(PreparedCloud {
        leveled,
        stages,
        filtering_s: (t1 - t0).as_secs_f64(),
        leveling_s: (t2 - t1).as_secs_f64(),
        projection_s: (t3 - t2).as_secs_f64(),
    })
}

#[derive(Clone, Debug)]
pub struct CoarseDiagnostics {
    pub uls_leveling: RotationMatrix3,
    pub ground_leveling: RotationMatrix3,
    pub uls_plane: Plane,
    pub ground_plane: Plane,
    pub uls_stages: CanopyStages,
    pub ground_stages: CanopyStages,
    pub image_match: ImageMatch,
    pub theta: f64,
    pub overlap: f64,
    pub timings: StageTimings,
}

/// 3D transform from the two leveling rotations and the in-plane match.
///
/// `corr_uls`/`corr_ground` are the matched pair midpoints in the leveled
/// frames (xy); their heights are taken on each leveled ground plane.
pub fn compose_coarse(
    uls_leveling: &RotationMatrix3,
    ground_leveling: &RotationMatrix3,
    uls_plane: &Plane,
    ground_plane: &Plane,
    theta: f64,
    corr_uls: (f64, f64),
    corr_ground: (f64, f64),
) -> RigidTransform {
    let rz = RotationMatrix3::about_z(theta);
    let mid_u = Vec3::new(corr_uls.0, corr_uls.1, uls_plane.z_at(corr_uls.0, corr_uls.1));
    let mid_t = Vec3::new(
        corr_ground.0,
        corr_ground.1,
        ground_plane.z_at(corr_ground.0, corr_ground.1),
    );
    let t = mid_u - rz.rotate(&mid_t);
    let inv_u = uls_leveling.transpose();
    RigidTransform::new(inv_u.mul(&rz).mul(ground_leveling), inv_u.rotate(&t))
}

/// Coarse transform taking `ground` coordinates into the `uls` frame.
pub fn coarse_register_prepared(
    uls: &PreparedCloud,
    ground: &PreparedCloud,
    cfg: &PlotConfig,
) -> Result<(RigidTransform, CoarseDiagnostics)> {
    let t0 = Instant::now();
    let m = match_images(uls.image(), ground.image(), cfg)?;
    let matching_s = (Instant::now() - t0).as_secs_f64();

    let corr_uls = uls.image().pixel_to_world(m.corr_reference.0, m.corr_reference.1);
    let corr_ground = ground.image().pixel_to_world(m.corr_matched.0, m.corr_matched.1);
    let transform = compose_coarse(
        &uls.leveled.leveling,
        &ground.leveled.leveling,
        &uls.leveled.plane_after,
        &ground.leveled.plane_after,
        m.best.theta,
        corr_uls,
        corr_ground,
    );
    let timings = StageTimings {
        filtering: uls.filtering_s + ground.filtering_s,
        ground_alignment: uls.leveling_s + ground.leveling_s,
        image_matching: uls.projection_s + ground.projection_s + matching_s,
        icp: 0.0,
    };
    let diagnostics = CoarseDiagnostics {
        uls_leveling: uls.leveled.leveling,
        ground_leveling: ground.leveled.leveling,
        uls_plane: uls.leveled.plane_after,
        ground_plane: ground.leveled.plane_after,
        uls_stages: uls.stages.clone(),
        ground_stages: ground.stages.clone(),
        theta: m.best.theta,
        overlap: m.best.overlap,
        image_match: m,
        timings,
    };
    Ok((transform, diagnostics))
}

/// Prepares both clouds (concurrently when worker threads are available).
pub fn prepare_pair(uls: &PointCloud, ground: &PointCloud, cfg: &PlotConfig) -> Result<(PreparedCloud, PreparedCloud)> {
    let (u, g) = rayon::join(|| prepare_cloud(uls, cfg), || prepare_cloud(ground, cfg));
    Ok((u?, g?))
}

/// Coarse transform taking `ground` coordinates into the `uls` frame.
pub fn coarse_register(
    uls: &PointCloud,
    ground: &PointCloud,
    cfg: &PlotConfig,
) -> Result<(RigidTransform, CoarseDiagnostics)> {
    cfg.validate()?;
    let (u, g) = prepare_pair(uls, ground, cfg)?;
    coarse_register_prepared(&u, &g, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseStats {
    pub min: f64,
    pub max: f64,
    pub avg: f64,
    pub rmse: f64,
}

/// Statistics of horizontal distances between corresponding points.
pub fn evaluate_rmse(correspondences: &[(Point3, Point3)]) -> Result<RmseStats> {
    if correspondences.is_empty() {
        return Err(Error::EmptyCorrespondences);
    }
    let d: Vec<f64> = correspondences
        .iter()
        .map(|(a, b)| (a.x - b.x).hypot(a.y - b.y))
        .collect();
    let n = d.len() as f64;
    Ok(RmseStats {
        min: d.iter().copied().fold(f64::INFINITY, f64::min),
        max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        avg: d.iter().sum::<f64>() / n,
        rmse: (d.iter().map(|x| x * x).sum::<f64>() / n).sqrt(),
    })
}

/// Maps the first element of each pair with `t` and measures against the second.
pub fn rmse_under(t: &RigidTransform, pairs: &[(Point3, Point3)]) -> Result<RmseStats> {
    let mapped: Vec<_> = pairs.iter().map(|(m, r)| (t.transform_point(m), *r)).collect();
    evaluate_rmse(&mapped)
}

#[derive(Clone, Debug)]
pub struct RegistrationReport {
    pub coarse: RigidTransform,
    pub fine: RigidTransform,
    pub overlap: f64,
    pub theta: f64,
    pub timing: StageTimings,
    pub rmse_coarse: Option<RmseStats>,
    pub rmse_fine: Option<RmseStats>,
    pub icp: Option<IcpOutcome>,
}

impl RegistrationReport {
    /// Fills the RMSE block from `(moving point, reference point)` pairs.
    pub fn attach_correspondences(&mut self, pairs: &[(Point3, Point3)]) -> Result<()> {
        self.rmse_coarse = Some(rmse_under(&self.coarse, pairs)?);
        self.rmse_fine = Some(rmse_under(&self.fine, pairs)?);
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        let fine = TransformJson::from(&self.fine);
        let coarse = TransformJson::from(&self.coarse);
        json!({
            "rotation": fine.rotation,
            "translation": fine.translation,
            "theta_deg": self.theta.to_degrees(),
            "overlap": self.overlap,
            "timing": {
                "filtering": self.timing.filtering,
                "ground_alignment": self.timing.ground_alignment,
                "image_matching": self.timing.image_matching,
                "icp": self.timing.icp,
                "coarse_total": self.timing.coarse_total(),
            },
            "rmse": {
                "coarse": self.rmse_coarse,
                "fine": self.rmse_fine,
            },
            "coarse": coarse,
            "icp": self.icp.as_ref().map(|o| json!({
                "iterations": o.iterations,
                "residuals": o.residuals,
                "correspondences": o.correspondences,
            })),
        })
    }
}

/// Coarse registration followed by ICP, with the coarse diagnostics.
pub fn register_detailed(
    uls: &PointCloud,
    ground: &PointCloud,
    cfg: &PlotConfig,
) -> Result<(RegistrationReport, CoarseDiagnostics)> {
    cfg.validate()?;
    let (u, g) = prepare_pair(uls, ground, cfg)?;
    register_prepared(uls, ground, &u, &g, cfg)
}

/// [`register_detailed`] for clouds already run through [`prepare_pair`].
pub fn register_prepared(
    uls: &PointCloud,
    ground: &PointCloud,
    uls_prepared: &PreparedCloud,
    ground_prepared: &PreparedCloud,
    cfg: &PlotConfig,
) -> Result<(RegistrationReport, CoarseDiagnostics)> {
    let (coarse, diag) = coarse_register_prepared(uls_prepared, ground_prepared, cfg)?;
    let mut timing = diag.timings;
    let (fine, icp) = if cfg.icp_max_iter == 0 {
        (coarse, None)
    } else {
        let t0 = Instant::now();
        let outcome = fine_register_icp_detailed(uls, ground, &coarse, cfg)?;
        timing.icp = (Instant::now() - t0).as_secs_f64();
        (outcome.transform, Some(outcome))
    };
    let report = RegistrationReport {
        coarse,
        fine,
        overlap: diag.overlap,
        theta: diag.theta,
        timing,
        rmse_coarse: None,
        rmse_fine: None,
        icp,
    };
    Ok((report, diag))
}

pub fn register(uls: &PointCloud, ground: &PointCloud, cfg: &PlotConfig) -> Result<RegistrationReport> {
    register_detailed(uls, ground, cfg).map(|r| r.0)
}

/// Rotation error (radians) and translation error vector of `est` against
/// `truth`, the latter evaluated at `at` (the moving cloud's centroid is a
/// natural choice).
pub fn transform_error(est: &RigidTransform, truth: &RigidTransform, at: &Point3) -> (f64, Vec3) {
    let angle = crate::geometry::rotation_angle_between(&est.rotation, &truth.rotation);
    (angle, est.transform_point(at) - truth.transform_point(at))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::tests::random_transform;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rmse_named_cases() {
        let p = Point3::new(1.0, 2.0, 3.0);
        let s = evaluate_rmse(&[(p, p), (p, p)]).unwrap();
        assert_eq!((s.min, s.max, s.avg, s.rmse), (0.0, 0.0, 0.0, 0.0));

        let s = evaluate_rmse(&[(Point3::new(0.0, 0.0, 0.0), Point3::new(0.3, 0.0, 5.0))]).unwrap();
        for v in [s.min, s.max, s.avg, s.rmse] {
            assert!((v - 0.3).abs() < 1e-15);
        }
        assert!(matches!(evaluate_rmse(&[]), Err(Error::EmptyCorrespondences)));
    }

    #[test]
    fn rmse_against_direct_formula() {
        let d = [0.06, 0.09, 0.10, 0.12, 0.15, 0.11, 0.13, 0.08, 0.14, 0.12];
        let pairs: Vec<_> = d
            .iter()
            .enumerate()
            .map(|(i, &di)| {
                let a = 0.37 * i as f64;
                let p = Point3::new(i as f64, -(i as f64), 0.0);
                (p, Point3::new(p.x + di * a.cos(), p.y + di * a.sin(), 1.0))
            })
            .collect();
        let s = evaluate_rmse(&pairs).unwrap();
        let n = d.len() as f64;
        assert!((s.min - 0.06).abs() < 1e-12 && (s.max - 0.15).abs() < 1e-12);
        assert!((s.avg - d.iter().sum::<f64>() / n).abs() < 1e-12);
        assert!((s.rmse - (d.iter().map(|x| x * x).sum::<f64>() / n).sqrt()).abs() < 1e-12);
        assert!(s.rmse >= s.avg);
    }

    #[test]
    fn factored_form_equals_composed_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let ru = random_transform(&mut rng).rotation;
            let rt = random_transform(&mut rng).rotation;
            let pu = Plane::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 1.0, rng.random_range(-5.0..5.0)).unwrap();
            let pt = Plane::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 1.0, rng.random_range(-5.0..5.0)).unwrap();
            let theta = rng.random_range(-3.0..3.0);
            let cu = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
            let ct = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
            let composed = compose_coarse(&ru, &rt, &pu, &pt, theta, cu, ct);

            let rz = RotationMatrix3::about_z(theta);
            let t = Vec3::new(cu.0, cu.1, pu.z_at(cu.0, cu.1)) - rz.rotate(&Vec3::new(ct.0, ct.1, pt.z_at(ct.0, ct.1)));
            for _ in 0..10 {
                let x = Point3::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-5.0..30.0));
                let factored = ru.transpose().rotate(&(rz.rotate(&rt.rotate(&x.coords)) + t));
                assert!((composed.transform_point(&x).coords - factored).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn composition_maps_ground_midpoint_onto_uls_midpoint() {
        // Both clouds already level: the ground midpoint (on its plane) must
        // land on the ULS midpoint (on its plane).
        let id = RotationMatrix3::identity();
        let pu = Plane::new(0.0, 0.0, 1.0, -2.0).unwrap();
        let pt = Plane::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let t = compose_coarse(&id, &id, &pu, &pt, 0.7, (5.0, 6.0), (-1.0, 2.0));
        let mapped = t.transform_point(&Point3::new(-1.0, 2.0, -1.0));
        assert!((mapped - Point3::new(5.0, 6.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn error_metric() {
        let truth = RigidTransform::new(RotationMatrix3::about_z(0.3), Vec3::new(1.0, 2.0, 3.0));
        let (a, d) = transform_error(&truth, &truth, &Point3::new(4.0, 5.0, 6.0));
        assert_eq!(a, 0.0);
        assert_eq!(d, Vec3::zeros());
    }
}
