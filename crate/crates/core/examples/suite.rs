//! Registers every plot of the synthetic suite and prints accuracy and timing.
//!
//! Usage: `cargo run --release -p canopy-align --example suite [seed] [--icp]`

use std::time::Instant;

use canopy_align::pipeline::{coarse_register, rmse_under, transform_error};
use canopy_align::synthetic::{generate, table1_suite_seeded};
use canopy_align::{icp, PlotConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed = args.iter().find_map(|a| a.parse().ok()).unwrap_or(0);
    let run_icp = args.iter().any(|a| a == "--icp");
    for spec in table1_suite_seeded(seed) {
        let t0 = Instant::now();
        let plot = generate(&spec).expect("valid spec");
        let gen_s = t0.elapsed().as_secs_f64();
        let cfg = PlotConfig {
            canopy_height_mode: spec.canopy_mode,
            ..PlotConfig::default()
        };
        let centroid = plot.ground.centroid().unwrap();
        match coarse_register(&plot.uls, &plot.ground, &cfg) {
            Ok((coarse, diag)) => {
                let (angle, d) = transform_error(&coarse, &plot.truth, &centroid);
                let rmse = rmse_under(&coarse, &plot.features).unwrap();
                print!(
                    "{:<20} n={}/{} rot={:.3}° dxy={:.3} dz={:.3} O={:.3} rmse={:.3} kp={}/{} cand={} eval={} coarse={:.2}s gen={:.1}s",
                    spec.name,
                    plot.uls.len(),
                    plot.ground.len(),
                    angle.to_degrees(),
                    d.x.hypot(d.y),
                    d.z,
                    diag.overlap,
                    rmse.rmse,
                    diag.image_match.ref_keypoints.len(),
                    diag.image_match.matched_keypoints.len(),
                    diag.image_match.candidates,
                    diag.image_match.evaluated,
                    diag.timings.coarse_total(),
                    gen_s,
                );
                if run_icp {
                    let t1 = Instant::now();
                    let out = icp::fine_register_icp_detailed(&plot.uls, &plot.ground, &coarse, &cfg).unwrap();
                    let (fa, fd) = transform_error(&out.transform, &plot.truth, &centroid);
                    print!(
                        " | icp rot={:.4}° dxy={:.4} dz={:.4} it={} {:.1}s",
                        fa.to_degrees(),
                        fd.x.hypot(fd.y),
                        fd.z,
                        out.iterations,
                        t1.elapsed().as_secs_f64()
                    );
                }
                println!();
            }
            Err(e) => println!("{:<20} FAILED: {e} (gen {gen_s:.1}s)", spec.name),
        }
    }
}
