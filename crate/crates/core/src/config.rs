//! Pipeline parameters and the `key = value` config format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the canopy cutoff height is chosen before projection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CanopyHeightMode {
    /// Keep vegetation more than this many meters above the fitted ground.
    Fixed(f64),
    /// Keep points above `z_min + 0.75 (z_max - z_min)`; meant for closed canopies.
    ThreeQuarters,
}

impl fmt::Display for CanopyHeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CanopyHeightMode::Fixed(h) => write!(f, "fixed:{h}"),
            CanopyHeightMode::ThreeQuarters => f.write_str("three_quarters"),
        }
    }
}

impl FromStr for CanopyHeightMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        match s {
            "three_quarters" | "ThreeQuarters" => return Ok(CanopyHeightMode::ThreeQuarters),
            "fixed" | "Fixed" => return Ok(CanopyHeightMode::Fixed(3.0)),
            _ => {}
        }
        let h = s
            .strip_prefix("fixed:")
            .or_else(|| s.strip_prefix("Fixed:"))
            .unwrap_or(s);
        let h: f64 = h
            .trim()
            .parse()
            .map_err(|_| format!("expected `three_quarters`, `fixed` or `fixed:<meters>`, got `{s}`"))?;
        if !(h.is_finite() && h > 0.0) {
            return Err(format!("fixed canopy height must be > 0, got {h}"));
        }
        Ok(CanopyHeightMode::Fixed(h))
    }
}

/// All tunables of the registration pipeline.
///
/// Pixel-valued parameters refer to the canopy raster at
/// `projection_resolution` meters per pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotConfig {
    pub projection_resolution: f64,
    pub canopy_height_mode: CanopyHeightMode,
    pub morphology_kernel: usize,
    pub median_kernel: usize,
    pub keypoint_radius: f64,
    pub harris_alpha: f64,
    /// Keypoints must exceed this fraction of the image's largest response.
    pub keypoint_relative_threshold: f64,
    pub keypoint_nms_radius: f64,
    pub max_keypoints: usize,
    pub pair_min_separation: f64,
    pub pair_cap: usize,
    pub congruence_tolerance: f64,
    pub overlap_cell: usize,
    pub match_accept_overlap: f64,
    pub early_exit_overlap: f64,
    /// Hypotheses within this many grid cells of the best overlap are
    /// re-ranked by pixel-level overlap; 0 keeps the plain maximum.
    pub rerank_slack_cells: usize,
    pub cloth_resolution: f64,
    pub cloth_max_iter: usize,
    pub cloth_class_threshold: f64,
    pub ransac_iterations: usize,
    pub ransac_inlier_tol: f64,
    pub icp_max_iter: usize,
    pub icp_convergence_tol: f64,
    pub icp_max_correspondence: f64,
    pub icp_subsample: f64,
    /// Fraction of gated ICP pairs kept, closest first.
    pub icp_trim_fraction: f64,
    pub rng_seed: u64,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            projection_resolution: 0.1,
            canopy_height_mode: CanopyHeightMode::Fixed(3.0),
            morphology_kernel: 5,
            median_kernel: 5,
            keypoint_radius: 5.0,
            harris_alpha: 0.05,
            keypoint_relative_threshold: 0.01,
            keypoint_nms_radius: 3.0,
            max_keypoints: 200,
            pair_min_separation: 5.0,
            pair_cap: 4000,
            congruence_tolerance: 5.0,
            overlap_cell: 10,
            match_accept_overlap: 0.5,
            early_exit_overlap: 0.99,
            rerank_slack_cells: 3,
            cloth_resolution: 0.5,
            cloth_max_iter: 500,
            cloth_class_threshold: 0.5,
            ransac_iterations: 200,
            ransac_inlier_tol: 0.05,
            icp_max_iter: 50,
            icp_convergence_tol: 1e-6,
            icp_max_correspondence: 0.5,
            icp_subsample: 0.2,
            icp_trim_fraction: 0.5,
            rng_seed: 0,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::bad_value(key, format!("cannot parse `{value}`")))
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::bad_value(key, format!("must be > 0, got {v}")))
    }
}

fn odd_kernel(key: &str, k: usize) -> Result<()> {
    if k % 2 == 1 {
        Ok(())
    } else {
        Err(Error::bad_value(key, format!("kernel must be odd and >= 1, got {k}")))
    }
}

impl PlotConfig {
    /// Parses `key = value` lines; `#` starts a comment. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PlotConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::MalformedLine {
                line_no: i + 1,
                reason: "expected `key = value`".into(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field by name. Does not re-validate the whole config.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "projection_resolution" => self.projection_resolution = parse_num(key, value)?,
            "canopy_height_mode" => {
                self.canopy_height_mode = value.parse().map_err(|e| Error::bad_value(key, e))?
            }
            "morphology_kernel" => self.morphology_kernel = parse_num(key, value)?,
            "median_kernel" => self.median_kernel = parse_num(key, value)?,
            "keypoint_radius" => self.keypoint_radius = parse_num(key, value)?,
            "harris_alpha" => self.harris_alpha = parse_num(key, value)?,
            "keypoint_relative_threshold" => {
                self.keypoint_relative_threshold = parse_num(key, value)?
            }
            "keypoint_nms_radius" => self.keypoint_nms_radius = parse_num(key, value)?,
            "max_keypoints" => self.max_keypoints = parse_num(key, value)?,
            "pair_min_separation" => self.pair_min_separation = parse_num(key, value)?,
            "pair_cap" => self.pair_cap = parse_num(key, value)?,
            "congruence_tolerance" => self.congruence_tolerance = parse_num(key, value)?,
            "overlap_cell" => self.overlap_cell = parse_num(key, value)?,
            "match_accept_overlap" => self.match_accept_overlap = parse_num(key, value)?,
            "early_exit_overlap" => self.early_exit_overlap = parse_num(key, value)?,
            "rerank_slack_cells" => self.rerank_slack_cells = parse_num(key, value)?,
            "cloth_resolution" => self.cloth_resolution = parse_num(key, value)?,
            "cloth_max_iter" => self.cloth_max_iter = parse_num(key, value)?,
            "cloth_class_threshold" => self.cloth_class_threshold = parse_num(key, value)?,
            "ransac_iterations" => self.ransac_iterations = parse_num(key, value)?,
            "ransac_inlier_tol" => self.ransac_inlier_tol = parse_num(key, value)?,
            "icp_max_iter" => self.icp_max_iter = parse_num(key, value)?,
            "icp_convergence_tol" => self.icp_convergence_tol = parse_num(key, value)?,
            "icp_max_correspondence" => self.icp_max_correspondence = parse_num(key, value)?,
            "icp_subsample" => self.icp_subsample = parse_num(key, value)?,
            "icp_trim_fraction" => self.icp_trim_fraction = parse_num(key, value)?,
            "rng_seed" => self.rng_seed = parse_num(key, value)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        positive("projection_resolution", self.projection_resolution)?;
        odd_kernel("morphology_kernel", self.morphology_kernel)?;
        odd_kernel("median_kernel", self.median_kernel)?;
        positive("keypoint_radius", self.keypoint_radius)?;
        if !(self.harris_alpha > 0.0 && self.harris_alpha < 0.25) {
            return Err(Error::bad_value(
                "harris_alpha",
                format!("must lie in (0, 0.25), got {}", self.harris_alpha),
            ));
        }
        if !(0.0..1.0).contains(&self.keypoint_relative_threshold) {
            return Err(Error::bad_value(
                "keypoint_relative_threshold",
                "must lie in [0, 1)",
            ));
        }
        if !(self.keypoint_nms_radius >= 0.0) {
            return Err(Error::bad_value("keypoint_nms_radius", "must be >= 0"));
        }
        if self.max_keypoints < 2 {
            return Err(Error::bad_value("max_keypoints", "must be >= 2"));
        }
        positive("pair_min_separation", self.pair_min_separation)?;
        if self.pair_cap == 0 {
            return Err(Error::bad_value("pair_cap", "must be >= 1"));
        }
        positive("congruence_tolerance", self.congruence_tolerance)?;
        if self.overlap_cell == 0 {
            return Err(Error::bad_value("overlap_cell", "must be >= 1"));
        }
        for (key, v) in [
            ("match_accept_overlap", self.match_accept_overlap),
            ("early_exit_overlap", self.early_exit_overlap),
            ("icp_trim_fraction", self.icp_trim_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::bad_value(key, "must lie in [0, 1]"));
            }
        }
        positive("cloth_resolution", self.cloth_resolution)?;
        positive("cloth_class_threshold", self.cloth_class_threshold)?;
        if self.ransac_iterations == 0 {
            return Err(Error::bad_value("ransac_iterations", "must be >= 1"));
        }
        positive("ransac_inlier_tol", self.ransac_inlier_tol)?;
        positive("icp_convergence_tol", self.icp_convergence_tol)?;
        positive("icp_max_correspondence", self.icp_max_correspondence)?;
        positive("icp_subsample", self.icp_subsample)?;
        positive("icp_trim_fraction", self.icp_trim_fraction)?;
        if let CanopyHeightMode::Fixed(h) = self.canopy_height_mode {
            positive("canopy_height_mode", h)?;
        }
        Ok(())
    }

    /// Renders the config in the same format [`PlotConfig::parse`] reads.
    pub fn to_config_string(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for (key, value) in json.as_object().expect("struct serializes to object") {
            let rendered = match key.as_str() {
                "canopy_height_mode" => self.canopy_height_mode.to_string(),
                _ => value.to_string(),
            };
            out.push_str(&format!("{key} = {rendered}\n"));
        }
        out
    }
}

/// Reads a config file. Keys that are not present keep their defaults.
pub fn load_config(path: impl AsRef<Path>) -> Result<PlotConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PlotConfig::parse(&text)
}
