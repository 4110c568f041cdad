use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use canopy_align::config::load_config;
use canopy_align::io::{
    read_cloud, read_correspondences, read_transform_json, write_cloud, write_correspondences, write_labels,
    write_pgm, write_transform_json,
};
use canopy_align::matcher::{hypothesis_transform, overlap, prepare_match, Assignment, Keypoint};
use canopy_align::pipeline::{evaluate_rmse, prepare_pair, register_prepared, PreparedCloud};
use canopy_align::raster::CanopyStages;
use canopy_align::synthetic::{generate, table1_suite_seeded, PlotSpec};
use canopy_align::{Error, PlotConfig, Point3, RigidTransform};
use clap::{Args, Parser, Subcommand};

/// Rows of the candidate table written with `--debug-dir`.
const DEBUG_CANDIDATE_ROWS: usize = 5000;

#[derive(Parser)]
#[command(name = "canopy-align", version, about = "Register aerial and ground forest LiDAR point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a ground scan (moving) onto an aerial scan (reference).
    Register(RegisterArgs),
    /// Write a synthetic forest plot pair with its ground truth.
    Simulate(SimulateArgs),
    /// Compare an estimated transform against truth or correspondences.
    Eval(EvalArgs),
    /// Write the canopy image stages of one cloud as PGM files.
    RasterDebug(RasterDebugArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set canopy_height_mode=three_quarters`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PlotConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => PlotConfig::default(),
        };
        for kv in &self.overrides {
            let (key, value) = kv.split_once('=').ok_or_else(|| Error::BadValue {
                key: kv.clone(),
                reason: "expected KEY=VALUE".into(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RegisterArgs {
    /// Aerial (ULS) cloud, `.xyz` text or binary `.ply`.
    #[arg(long)]
    reference: PathBuf,
    /// Ground (TLS/BLS) cloud.
    #[arg(long)]
    moving: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Report JSON path; the report is always printed to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Transform JSON path.
    #[arg(long)]
    out_transform: Option<PathBuf>,
    /// Skip ICP refinement.
    #[arg(long)]
    coarse_only: bool,
    /// Feature pairs (`moving reference` per line) for the RMSE block.
    #[arg(long)]
    correspondences: Option<PathBuf>,
    /// Directory for stage images, keypoints and the candidate table.
    #[arg(long)]
    debug_dir: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["spec", "table1_plot"])))]
struct SimulateArgs {
    /// Plot spec JSON.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// One of the six built-in suite plots (1-6).
    #[arg(long)]
    table1_plot: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Seed; for suite plots it also drives the random truth.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("reference_data").required(true).multiple(true).args(["truth", "correspondences"])))]
struct EvalArgs {
    /// Estimated transform JSON.
    #[arg(long)]
    transform: PathBuf,
    /// Ground-truth transform JSON.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Feature pairs (`moving reference` per line).
    #[arg(long)]
    correspondences: Option<PathBuf>,
    /// Point (moving frame) at which translation error is measured.
    #[arg(long, value_parser = parse_point, default_value = "0,0,0", allow_hyphen_values = true)]
    at: Point3,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RasterDebugArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_point(s: &str) -> Result<Point3, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|f| f.trim().parse::<f64>().map_err(|e| format!("{f}: {e}")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [x, y, z] => Ok(Point3::new(*x, *y, *z)),
        _ => Err("expected x,y,z".into()),
    }
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_stages(dir: &Path, prefix: &str, stages: &CanopyStages) -> Result<(), Error> {
    for (name, img) in [
        ("raw", &stages.raw),
        ("dilated", &stages.dilated),
        ("eroded", &stages.eroded),
        ("median", &stages.filtered),
    ] {
        write_pgm(dir.join(format!("{prefix}{name}.pgm")), img)?;
    }
    Ok(())
}

fn keypoint_csv(kps: &[Keypoint]) -> String {
    let mut out = String::from("u,v,response\n");
    for k in kps {
        out.push_str(&format!("{},{},{:.6e}\n", k.u, k.v, k.response));
    }
    out
}

fn write_debug(dir: &Path, uls: &PreparedCloud, ground: &PreparedCloud, cfg: &PlotConfig) -> Result<(), Error> {
    create_dir(dir)?;
    write_stages(dir, "reference_", &uls.stages)?;
    write_stages(dir, "moving_", &ground.stages)?;
    let setup = prepare_match(uls.image(), ground.image(), cfg)?;
    write_text(&dir.join("reference_keypoints.csv"), &keypoint_csv(&setup.ref_keypoints))?;
    write_text(&dir.join("moving_keypoints.csv"), &keypoint_csv(&setup.matched_keypoints))?;
    let mut table = String::from("order,reference_pair,moving_pair,d_reference,d_moving,overlap_direct,overlap_swapped\n");
    for (order, cand) in setup.candidates.iter().take(DEBUG_CANDIDATE_ROWS).enumerate() {
        let (rp, mp) = (&setup.ref_pairs[cand.reference], &setup.matched_pairs[cand.matched]);
        let score = |a| {
            let (theta, t) = hypothesis_transform(rp, mp, a);
            overlap(theta, t, &setup.centers, uls.image()).unwrap_or(0.0)
        };
        table.push_str(&format!(
            "{order},{},{},{:.3},{:.3},{:.4},{:.4}\n",
            cand.reference,
            cand.matched,
            rp.dist,
            mp.dist,
            score(Assignment::Direct),
            score(Assignment::Swapped)
        ));
    }
    write_text(&dir.join("candidates.csv"), &table)
}

fn cmd_register(args: RegisterArgs) -> Result<(), Error> {
    let mut cfg = args.config.load()?;
    if args.coarse_only {
        cfg.icp_max_iter = 0;
    }
    let uls = read_cloud(&args.reference)?;
    let ground = read_cloud(&args.moving)?;
    let pairs = args.correspondences.as_ref().map(read_correspondences).transpose()?;
    let (u, g) = prepare_pair(&uls, &ground, &cfg)?;
    if let Some(dir) = &args.debug_dir {
        write_debug(dir, &u, &g, &cfg)?;
    }
    let (mut report, _) = register_prepared(&uls, &ground, &u, &g, &cfg)?;
    if let Some(pairs) = &pairs {
        report.attach_correspondences(pairs)?;
    }
    let text = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
    if let Some(path) = &args.out {
        write_text(path, &(text.clone() + "\n"))?;
    }
    if let Some(path) = &args.out_transform {
        write_transform_json(path, &report.fine)?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Error> {
    let spec: PlotSpec = match (&args.spec, args.table1_plot) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            let mut spec: PlotSpec =
                serde_json::from_str(&text).map_err(|e| Error::SpecError(format!("{}: {e}", path.display())))?;
            if let Some(seed) = args.seed {
                spec.seed = seed;
            }
            spec
        }
        (None, Some(n)) if (1..=6).contains(&n) => table1_suite_seeded(args.seed.unwrap_or(0)).swap_remove(n - 1),
        (None, Some(n)) => return Err(Error::SpecError(format!("suite plot {n} is not in 1..=6"))),
        (None, None) => unreachable!("clap requires one source"),
    };
    let plot = generate(&spec)?;
    let dir = &args.out_dir;
    create_dir(dir)?;
    write_cloud(dir.join("uls.xyz"), &plot.uls)?;
    write_cloud(dir.join("ground.xyz"), &plot.ground)?;
    write_transform_json(dir.join("truth.json"), &plot.truth)?;
    write_labels(dir.join("uls_labels.txt"), &plot.uls_labels)?;
    write_labels(dir.join("ground_labels.txt"), &plot.ground_labels)?;
    write_correspondences(dir.join("correspondences.txt"), &plot.features)?;
    let spec_text = serde_json::to_string_pretty(&spec).expect("spec serializes");
    write_text(&dir.join("spec.json"), &(spec_text + "\n"))?;
    println!(
        "{}: {} trees, {} ULS points, {} ground points, crown density {:.3} -> {}",
        spec.name,
        plot.trees.len(),
        plot.uls.len(),
        plot.ground.len(),
        plot.realized_crown_density,
        dir.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let est = read_transform_json(&args.transform)?;
    let truth_err = args
        .truth
        .as_ref()
        .map(|p| -> Result<(f64, [f64; 3]), Error> {
            let truth: RigidTransform = read_transform_json(p)?;
            let (angle, d) = canopy_align::pipeline::transform_error(&est, &truth, &args.at);
            Ok((angle.to_degrees(), [d.x, d.y, d.z]))
        })
        .transpose()?;
    let stats = args
        .correspondences
        .as_ref()
        .map(|p| -> Result<_, Error> {
            let pairs = read_correspondences(p)?;
            let mapped: Vec<(Point3, Point3)> = pairs.iter().map(|(m, r)| (est.transform_point(m), *r)).collect();
            evaluate_rmse(&mapped)
        })
        .transpose()?;

    let mut out = std::io::stdout().lock();
    if args.json {
        let value = serde_json::json!({
            "rotation_error_deg": truth_err.map(|e| e.0),
            "translation_error": truth_err.map(|e| e.1),
            "rmse": stats,
        });
        let _ = writeln!(out, "{}", serde_json::to_string_pretty(&value).expect("serializes"));
        return Ok(());
    }
    if let Some((angle, d)) = truth_err {
        let _ = writeln!(out, "rotation_error_deg {angle:.6}");
        let _ = writeln!(out, "translation_error_m {:.6} {:.6} {:.6}", d[0], d[1], d[2]);
        let _ = writeln!(out, "horizontal_error_m {:.6}", d[0].hypot(d[1]));
    }
    if let Some(s) = stats {
        let _ = writeln!(out, "{:>8} {:>8} {:>8} {:>8}", "Min", "Max", "Avg", "RMSE");
        let _ = writeln!(out, "{:>8.4} {:>8.4} {:>8.4} {:>8.4}", s.min, s.max, s.avg, s.rmse);
    }
    Ok(())
}

fn cmd_raster_debug(args: RasterDebugArgs) -> Result<(), Error> {
    let cfg = args.config.load()?;
    let cloud = read_cloud(&args.input)?;
    let prepared = canopy_align::pipeline::prepare_cloud(&cloud, &cfg)?;
    create_dir(&args.out_dir)?;
    write_stages(&args.out_dir, "", &prepared.stages)?;
    let img = prepared.image();
    println!(
        "{}x{} px at {} m, {} canopy pixels -> {}",
        img.width,
        img.height,
        img.resolution,
        img.count_ones(),
        args.out_dir.display()
    );
    Ok(())
}

fn configure_threads() {
    let threads = std::env::var("CANOPY_ALIGN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let result = match cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::RasterDebug(a) => cmd_raster_debug(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::MatchRejected { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
