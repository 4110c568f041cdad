//! Python bindings. Points cross the boundary as sequences of `(x, y, z)`;
//! transforms as dicts with a row-major `rotation` (9 floats) and a
//! `translation` (3 floats).

use canopy::io::{read_cloud as read_cloud_file, write_cloud as write_cloud_file, TransformJson};
use canopy::pipeline::{register_detailed, transform_error as transform_error_impl};
use canopy::synthetic::{generate, table1_suite_seeded};
use canopy::{Error, Label, PlotConfig, Point3, PointCloud, RigidTransform};
use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

create_exception!(canopy_align, MatchRejected, PyRuntimeError, "Best image match fell below the acceptance overlap.");

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::MatchRejected { .. } => MatchRejected::new_err(e.to_string()),
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn cloud_from(points: Vec<[f64; 3]>) -> PointCloud {
    PointCloud::new(points.into_iter().map(|[x, y, z]| Point3::new(x, y, z)).collect())
}

fn points_of(cloud: &PointCloud) -> Vec<(f64, f64, f64)> {
    cloud.points.iter().map(|p| (p.x, p.y, p.z)).collect()
}

fn config_from(config: Option<&Bound<'_, PyDict>>) -> PyResult<PlotConfig> {
    let mut cfg = PlotConfig::default();
    if let Some(config) = config {
        for (key, value) in config.iter() {
            let key: String = key.extract()?;
            let value = value.str()?.to_string();
            cfg.set(&key, &value).map_err(to_py_err)?;
        }
    }
    cfg.validate().map_err(to_py_err)?;
    Ok(cfg)
}

fn transform_dict<'py>(py: Python<'py>, t: &RigidTransform) -> PyResult<Bound<'py, PyDict>> {
    let json = TransformJson::from(t);
    let d = PyDict::new(py);
    d.set_item("rotation", json.rotation.to_vec())?;
    d.set_item("translation", json.translation.to_vec())?;
    Ok(d)
}

fn transform_from(d: &Bound<'_, PyDict>) -> PyResult<RigidTransform> {
    let get = |key: &str| -> PyResult<Vec<f64>> {
        d.get_item(key)?
            .ok_or_else(|| PyValueError::new_err(format!("transform is missing `{key}`")))?
            .extract()
    };
    let (rotation, translation) = (get("rotation")?, get("translation")?);
    let json = TransformJson {
        rotation: rotation
            .try_into()
            .map_err(|_| PyValueError::new_err("rotation needs 9 values"))?,
        translation: translation
            .try_into()
            .map_err(|_| PyValueError::new_err("translation needs 3 values"))?,
    };
    json.to_transform().map_err(to_py_err)
}

fn label_codes(labels: &[Label]) -> Vec<u8> {
    labels.iter().map(|l| l.code()).collect()
}

/// Reads an `.xyz` or binary `.ply` file.
#[pyfunction]
fn read_cloud(path: &str) -> PyResult<Vec<(f64, f64, f64)>> {
    read_cloud_file(path).map(|c| points_of(&c)).map_err(to_py_err)
}

/// Writes points as `.xyz` text or binary `.ply`, chosen by extension.
#[pyfunction]
fn write_cloud(path: &str, points: Vec<[f64; 3]>) -> PyResult<()> {
    write_cloud_file(path, &cloud_from(points)).map_err(to_py_err)
}

/// Default configuration as a `key -> value string` dict.
#[pyfunction]
fn default_config(py: Python<'_>) -> PyResult<Bound<'_, PyDict>> {
    let d = PyDict::new(py);
    for line in PlotConfig::default().to_config_string().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            d.set_item(k, v)?;
        }
    }
    Ok(d)
}

/// Registers `moving` (ground scan) onto `reference` (aerial scan) and
/// returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (reference, moving, config=None, coarse_only=false, correspondences=None))]
fn register<'py>(
    py: Python<'py>,
    reference: Vec<[f64; 3]>,
    moving: Vec<[f64; 3]>,
    config: Option<&Bound<'py, PyDict>>,
    coarse_only: bool,
    correspondences: Option<Vec<([f64; 3], [f64; 3])>>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = config_from(config)?;
    if coarse_only {
        cfg.icp_max_iter = 0;
    }
    let (uls, ground) = (cloud_from(reference), cloud_from(moving));
    let pairs: Option<Vec<(Point3, Point3)>> = correspondences.map(|c| {
        c.into_iter()
            .map(|(a, b)| (Point3::new(a[0], a[1], a[2]), Point3::new(b[0], b[1], b[2])))
            .collect()
    });
    let text = py
        .detach(|| -> canopy::Result<String> {
            let (mut report, _) = register_detailed(&uls, &ground, &cfg)?;
            if let Some(pairs) = &pairs {
                report.attach_correspondences(pairs)?;
            }
            Ok(report.to_json().to_string())
        })
        .map_err(to_py_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Generates one of the six built-in suite plots (1-6).
#[pyfunction]
#[pyo3(signature = (table1_plot, seed=0, noise_sigma=None))]
fn simulate(py: Python<'_>, table1_plot: usize, seed: u64, noise_sigma: Option<f64>) -> PyResult<Bound<'_, PyDict>> {
    if !(1..=6).contains(&table1_plot) {
        return Err(PyValueError::new_err(format!("suite plot {table1_plot} is not in 1..=6")));
    }
    let mut spec = table1_suite_seeded(seed).swap_remove(table1_plot - 1);
    if let Some(sigma) = noise_sigma {
        spec.noise_sigma = sigma;
    }
    let plot = py.detach(|| generate(&spec)).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("name", &spec.name)?;
    d.set_item("canopy_mode", spec.canopy_mode.to_string())?;
    d.set_item("uls", points_of(&plot.uls))?;
    d.set_item("ground", points_of(&plot.ground))?;
    d.set_item("uls_labels", label_codes(&plot.uls_labels))?;
    d.set_item("ground_labels", label_codes(&plot.ground_labels))?;
    d.set_item("truth", transform_dict(py, &plot.truth)?)?;
    let features = PyList::empty(py);
    for (a, b) in &plot.features {
        features.append(((a.x, a.y, a.z), (b.x, b.y, b.z)))?;
    }
    d.set_item("features", features)?;
    d.set_item("trees", plot.trees.len())?;
    Ok(d)
}

/// Rotation error in degrees and translation error vector of `estimate`
/// against `truth`, measured at `at`.
#[pyfunction]
#[pyo3(signature = (estimate, truth, at=(0.0, 0.0, 0.0)))]
fn transform_error(
    estimate: &Bound<'_, PyDict>,
    truth: &Bound<'_, PyDict>,
    at: (f64, f64, f64),
) -> PyResult<(f64, (f64, f64, f64))> {
    let (est, truth) = (transform_from(estimate)?, transform_from(truth)?);
    let (angle, d) = transform_error_impl(&est, &truth, &Point3::new(at.0, at.1, at.2));
    Ok((angle.to_degrees(), (d.x, d.y, d.z)))
}

#[pymodule]
fn canopy_align(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MatchRejected", m.py().get_type::<MatchRejected>())?;
    m.add_function(wrap_pyfunction!(read_cloud, m)?)?;
    m.add_function(wrap_pyfunction!(write_cloud, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(transform_error, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
