use canopy_align::ground::fit_plane_least_squares;
use canopy_align::icp::fine_register_icp_detailed;
use canopy_align::pipeline::{coarse_register, register, transform_error};
use canopy_align::synthetic::{generate, table1_suite, PlotSpec, SyntheticPlot};
use canopy_align::{Label, PlotConfig, RigidTransform, Vec3};

fn small_plot(noise: f64) -> (PlotSpec, SyntheticPlot) {
    let mut spec = table1_suite()[2].clone();
    spec.ground_density = 400.0;
    spec.noise_sigma = noise;
    let plot = generate(&spec).unwrap();
    (spec, plot)
}

fn horizontal(v: Vec3) -> f64 {
    v.x.hypot(v.y)
}

#[test]
fn register_populates_every_stage_and_refines() {
    let (_, mut plot) = small_plot(0.02);
    let cfg = PlotConfig::default();
    let mut report = register(&plot.uls, &plot.ground, &cfg).unwrap();
    assert!(report.timing.filtering > 0.0);
    assert!(report.timing.ground_alignment > 0.0);
    assert!(report.timing.image_matching > 0.0);
    assert!(report.timing.icp > 0.0);
    assert!(report.overlap >= cfg.match_accept_overlap);

    let at = plot.ground.centroid().unwrap();
    let (_, coarse_err) = transform_error(&report.coarse, &plot.truth, &at);
    let (_, fine_err) = transform_error(&report.fine, &plot.truth, &at);
    assert!(horizontal(fine_err) <= horizontal(coarse_err) + 1e-3);
    assert!(horizontal(coarse_err) <= 0.2);

    let features = std::mem::take(&mut plot.features);
    report.attach_correspondences(&features).unwrap();
    let json = report.to_json();
    for key in ["rotation", "translation", "theta_deg", "overlap", "timing", "rmse", "coarse", "icp"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert_eq!(json["rotation"].as_array().unwrap().len(), 9);
    assert!(json["rmse"]["fine"]["rmse"].as_f64().unwrap() <= 0.21);
}

#[test]
fn registration_is_deterministic() {
    let (_, plot) = small_plot(0.02);
    let cfg = PlotConfig::default();
    let a = register(&plot.uls, &plot.ground, &cfg).unwrap();
    let b = register(&plot.uls, &plot.ground, &cfg).unwrap();
    assert_eq!(a.coarse, b.coarse);
    assert_eq!(a.fine, b.fine);
}

#[test]
fn zero_icp_iterations_keep_coarse() {
    let (_, plot) = small_plot(0.02);
    let cfg = PlotConfig {
        icp_max_iter: 0,
        ..PlotConfig::default()
    };
    let report = register(&plot.uls, &plot.ground, &cfg).unwrap();
    assert_eq!(report.fine, report.coarse);
    assert!(report.icp.is_none());
}

#[test]
fn coarse_alignment_puts_ground_on_ground() {
    let (_, plot) = small_plot(0.0);
    let (coarse, _) = coarse_register(&plot.uls, &plot.ground, &PlotConfig::default()).unwrap();
    let uls_ground: Vec<_> = plot
        .uls
        .points
        .iter()
        .zip(&plot.uls_labels)
        .filter(|(_, l)| **l == Label::Ground)
        .map(|(p, _)| *p)
        .collect();
    let plane = fit_plane_least_squares(&uls_ground).unwrap();
    let offsets: Vec<f64> = plot
        .ground
        .points
        .iter()
        .zip(&plot.ground_labels)
        .filter(|(_, l)| **l == Label::Ground)
        .map(|(p, _)| {
            let q = coarse.transform_point(p);
            q.z - plane.z_at(q.x, q.y)
        })
        .collect();
    let mean = offsets.iter().sum::<f64>() / offsets.len() as f64;
    assert!(mean.abs() <= 0.05, "mean vertical offset {mean}");
}

#[test]
fn icp_recovers_horizontal_offset_on_noise_free_pair() {
    let (_, plot) = small_plot(0.0);
    let at = plot.ground.centroid().unwrap();
    let shift = RigidTransform::from_translation(Vec3::new(0.12, 0.09, 0.0));
    let init = RigidTransform::compose(&shift, &plot.truth);
    let out = fine_register_icp_detailed(&plot.uls, &plot.ground, &init, &PlotConfig::default()).unwrap();
    let (_, err) = transform_error(&out.transform, &plot.truth, &at);
    assert!(horizontal(err) <= 0.02, "{err:?}");
    assert!(out.residuals.windows(2).all(|w| w[1] <= w[0]));
}
