//! Synthetic forest plots with paired aerial and ground scans.
//!
//! Trees are placed over the aerial footprint; every crown is a union of a
//! few ellipsoid or cone lobes so silhouettes have concave cusps where lobes
//! meet. Lobe radii are scaled jointly until the crown cover over the ground
//! plot reaches the requested crown density. Occlusion is modelled
//! statistically: the aerial scan mostly sees upper crown surfaces and
//! reaches the ground with a probability that decays with the number of
//! lobes overhead, while the ground scan sees terrain, stems, crown
//! undersides and a share of the upper crowns.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::CanopyHeightMode;
use crate::error::{Error, Result};
use crate::geometry::{Label, Point3, PointCloud, RigidTransform, RotationMatrix3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layout {
    /// Square grid of the given spacing with uniform jitter of up to
    /// `jitter` meters per axis.
    RegularJitter { spacing: f64, jitter: f64 },
    /// Random positions at least `min_dist` apart.
    PoissonDisk { min_dist: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrownShape {
    Ellipsoid,
    Cone,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Terrain {
    pub tilt_deg: f64,
    /// Downhill direction, degrees counterclockwise from +x.
    pub tilt_azimuth_deg: f64,
    pub undulation_amplitude: f64,
    pub undulation_wavelength: f64,
}

impl Terrain {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.tilt_azimuth_deg.to_radians().sin_cos();
        let slope = self.tilt_deg.to_radians().tan();
        let k = TAU / self.undulation_wavelength;
        -slope * (c * x + s * y) + self.undulation_amplitude * (k * x).sin() * (0.8 * k * y + 1.0).sin()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrownSpec {
    /// Per-tree base crown radius range (before density scaling).
    pub radius_min: f64,
    pub radius_max: f64,
    /// Total tree height range.
    pub height_min: f64,
    pub height_max: f64,
    /// Crown base height as a fraction of tree height.
    pub base_fraction_min: f64,
    pub base_fraction_max: f64,
    pub shape: CrownShape,
}

/// Sub-canopy shrubs and low branches. They sit below the crowns, so they
/// fill crown gaps at low projection heights without changing the upper
/// canopy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Understory {
    /// Fraction of the ground plot covered by shrub footprints.
    pub cover: f64,
    pub height_min: f64,
    pub height_max: f64,
    pub radius_min: f64,
    pub radius_max: f64,
}

/// Height of the lowest shrub foliage above the terrain.
const SHRUB_BASE: f64 = 2.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotSpec {
    pub name: String,
    /// Aerial footprint, centered on the origin. With `uls_circular` the
    /// footprint is the inscribed circle.
    pub extent_x: f64,
    pub extent_y: f64,
    pub uls_circular: bool,
    /// Ground scan footprint, a centered rectangle inside the aerial one.
    pub ground_extent_x: f64,
    pub ground_extent_y: f64,
    pub terrain: Terrain,
    /// Trees per hectare.
    pub stand_density: f64,
    pub layout: Layout,
    pub crown: CrownSpec,
    /// Fraction of the ground plot covered by crowns.
    pub crown_density_target: f64,
    #[serde(default)]
    pub understory: Option<Understory>,
    /// Points per square meter.
    pub uls_density: f64,
    pub ground_density: f64,
    /// Maps ground-scan coordinates to aerial coordinates.
    pub truth_transform: RigidTransform,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Canopy projection mode suited to the plot.
    pub canopy_mode: CanopyHeightMode,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lobe {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub bottom: f64,
    pub top: f64,
    pub shape: CrownShape,
}

impl Lobe {
    /// `(bottom, top)` of the lobe surface above `(x, y)`, if covered.
    pub fn span_at(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let rho2 = (x - self.cx).powi(2) + (y - self.cy).powi(2);
        if rho2 >= self.radius * self.radius {
            return None;
        }
        let q = rho2.sqrt() / self.radius;
        let h = self.top - self.bottom;
        Some(match self.shape {
            CrownShape::Ellipsoid => {
                let half = 0.5 * h * (1.0 - q * q).sqrt();
                let mid = 0.5 * (self.top + self.bottom);
                (mid - half, mid + half)
            }
            CrownShape::Cone => (self.bottom, self.top - h * q),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub x: f64,
    pub y: f64,
    /// Terrain height at the stem.
    pub ground_z: f64,
    pub height: f64,
    pub crown_base: f64,
    pub stem_radius: f64,
    /// Crown lobes after density scaling, absolute coordinates.
    pub lobes: Vec<Lobe>,
}

#[derive(Clone, Debug)]
pub struct SyntheticPlot {
    /// Aerial scan, world coordinates.
    pub uls: PointCloud,
    /// Ground scan, in its own frame (`truth` maps it to world).
    pub ground: PointCloud,
    pub truth: RigidTransform,
    pub uls_labels: Vec<Label>,
    pub ground_labels: Vec<Label>,
    pub trees: Vec<Tree>,
    /// Stem positions at breast height as `(ground frame, world frame)`.
    pub features: Vec<(Point3, Point3)>,
    pub crown_scale: f64,
    pub realized_crown_density: f64,
}

/// Number of stem features exported per plot.
pub const FEATURE_COUNT: usize = 15;
/// Fraction of aerial pulses passing one crown lobe.
const LOBE_TRANSMISSION: f64 = 0.35;
const FOOTPRINT_RESOLUTION: f64 = 0.1;
const BREAST_HEIGHT: f64 = 1.3;

fn spec_err(msg: impl Into<String>) -> Error {
    Error::SpecError(msg.into())
}

impl PlotSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("extent_x", self.extent_x),
            ("extent_y", self.extent_y),
            ("ground_extent_x", self.ground_extent_x),
            ("ground_extent_y", self.ground_extent_y),
            ("stand_density", self.stand_density),
            ("uls_density", self.uls_density),
            ("ground_density", self.ground_density),
            ("crown.radius_min", self.crown.radius_min),
            ("crown.height_min", self.crown.height_min),
            ("terrain.undulation_wavelength", self.terrain.undulation_wavelength),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(spec_err(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.crown_density_target > 0.0 && self.crown_density_target <= 1.0) {
            return Err(spec_err(format!(
                "crown_density_target must be in (0, 1], got {}",
                self.crown_density_target
            )));
        }
        let c = &self.crown;
        if c.radius_max < c.radius_min || c.height_max < c.height_min {
            return Err(spec_err("crown ranges must satisfy min <= max"));
        }
        if !(0.0 < c.base_fraction_min && c.base_fraction_min <= c.base_fraction_max && c.base_fraction_max < 1.0) {
            return Err(spec_err("crown base fractions must satisfy 0 < min <= max < 1"));
        }
        if let Some(u) = &self.understory {
            if !(u.cover > 0.0 && u.cover < 1.0) {
                return Err(spec_err("understory cover must be in (0, 1)"));
            }
            if !(u.radius_min > 0.0 && u.radius_min <= u.radius_max) {
                return Err(spec_err("understory radii must satisfy 0 < min <= max"));
            }
            if !(u.height_min > SHRUB_BASE && u.height_min <= u.height_max) {
                return Err(spec_err(format!("understory heights must satisfy {SHRUB_BASE} < min <= max")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(spec_err(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        let fits = if self.uls_circular {
            let r = 0.5 * self.extent_x.min(self.extent_y);
            self.ground_extent_x.hypot(self.ground_extent_y) <= 2.0 * r + 1e-9
        } else {
            self.ground_extent_x <= self.extent_x + 1e-9 && self.ground_extent_y <= self.extent_y + 1e-9
        };
        if !fits {
            return Err(spec_err("ground footprint must lie inside the aerial footprint"));
        }
        match self.layout {
            Layout::RegularJitter { spacing, jitter } => {
                if !(spacing > 0.0 && jitter >= 0.0) {
                    return Err(spec_err("layout spacing must be > 0 and jitter >= 0"));
                }
                let grid_density = 1e4 / (spacing * spacing);
                if (grid_density / self.stand_density - 1.0).abs() > 0.25 {
                    return Err(spec_err(format!(
                        "grid spacing {spacing} m gives {grid_density:.0} trees/ha, inconsistent with stand density {}",
                        self.stand_density
                    )));
                }
            }
            Layout::PoissonDisk { min_dist } => {
                if !(min_dist >= 0.0) {
                    return Err(spec_err("min_dist must be >= 0"));
                }
            }
        }
        Ok(())
    }

    fn in_uls(&self, x: f64, y: f64) -> bool {
        if self.uls_circular {
            let r = 0.5 * self.extent_x.min(self.extent_y);
            x * x + y * y <= r * r
        } else {
            x.abs() <= 0.5 * self.extent_x && y.abs() <= 0.5 * self.extent_y
        }
    }

    fn in_ground_plot(&self, x: f64, y: f64) -> bool {
        x.abs() <= 0.5 * self.ground_extent_x && y.abs() <= 0.5 * self.ground_extent_y
    }

    fn uls_area(&self) -> f64 {
        if self.uls_circular {
            let r = 0.5 * self.extent_x.min(self.extent_y);
            PI * r * r
        } else {
            self.extent_x * self.extent_y
        }
    }
}

/// Random ground truth: yaw in [0, 2π), horizontal offset up to 10 m,
/// vertical offset up to 2 m and a tilt of at most 5°.
pub fn random_truth(rng: &mut impl Rng) -> RigidTransform {
    let yaw = rng.random_range(0.0..TAU);
    let tilt = rng.random_range(0.0..5f64.to_radians());
    let axis_angle = rng.random_range(0.0..TAU);
    let axis = Vec3::new(axis_angle.cos(), axis_angle.sin(), 0.0);
    let rotation = RotationMatrix3::from_axis_angle(&axis, tilt).mul(&RotationMatrix3::about_z(yaw));
    let (dist, dir) = (rng.random_range(0.0..10.0), rng.random_range(0.0..TAU));
    let translation = Vec3::new(dist * dir.cos(), dist * dir.sin(), rng.random_range(-2.0..2.0));
    RigidTransform::new(rotation, translation)
}

fn place_stems(spec: &PlotSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64)>> {
    let (hx, hy) = (0.5 * spec.extent_x, 0.5 * spec.extent_y);
    match spec.layout {
        Layout::RegularJitter { spacing, jitter } => {
            let nx = (spec.extent_x / spacing).floor() as i64;
            let ny = (spec.extent_y / spacing).floor() as i64;
            let mut out = Vec::new();
            for j in 0..=ny {
                for i in 0..=nx {
                    let x = -0.5 * nx as f64 * spacing + i as f64 * spacing;
                    let y = -0.5 * ny as f64 * spacing + j as f64 * spacing;
                    let (dx, dy) = if jitter > 0.0 {
                        (rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter))
                    } else {
                        (0.0, 0.0)
                    };
                    if spec.in_uls(x + dx, y + dy) {
                        out.push((x + dx, y + dy));
                    }
                }
            }
            Ok(out)
        }
        Layout::PoissonDisk { min_dist } => {
            let n = (spec.stand_density * spec.uls_area() / 1e4).round() as usize;
            let mut out: Vec<(f64, f64)> = Vec::with_capacity(n);
            let mut attempts = 0usize;
            let max_attempts = 200 * n.max(1);
            while out.len() < n {
                attempts += 1;
                if attempts > max_attempts {
                    return Err(spec_err(format!(
                        "could only place {} of {n} trees {min_dist} m apart",
                        out.len()
                    )));
                }
                let (x, y) = (rng.random_range(-hx..hx), rng.random_range(-hy..hy));
                if !spec.in_uls(x, y) {
                    continue;
                }
                if out.iter().all(|(a, b)| (a - x).hypot(b - y) >= min_dist) {
                    out.push((x, y));
                }
            }
            Ok(out)
        }
    }
}

/// Unscaled crown geometry of one tree: lobe offsets and radii are in units
/// that get multiplied by the density scale.
struct TreeTemplate {
    x: f64,
    y: f64,
    ground_z: f64,
    height: f64,
    crown_base: f64,
    /// (offset x, offset y, radius, top)
    lobes: Vec<(f64, f64, f64, f64)>,
}

fn make_template(spec: &PlotSpec, (x, y): (f64, f64), rng: &mut ChaCha8Rng) -> TreeTemplate {
    let c = &spec.crown;
    let height = rng.random_range(c.height_min..=c.height_max);
    let crown_base = height * rng.random_range(c.base_fraction_min..=c.base_fraction_max);
    let r = rng.random_range(c.radius_min..=c.radius_max);
    let depth = height - crown_base;
    let mut lobes = vec![(0.0, 0.0, r, height)];
    let extra = rng.random_range(0..=3);
    let mut angle = rng.random_range(0.0..TAU);
    for _ in 0..extra {
        angle += rng.random_range(0.6..2.2);
        // Offsets stay below the lobe radius, so scaling the crown up can
        // only grow its footprint.
        let lobe_r = r * rng.random_range(0.55..0.85);
        let off = lobe_r * rng.random_range(0.5..0.95);
        let top = height - depth * rng.random_range(0.05..0.3);
        lobes.push((off * angle.cos(), off * angle.sin(), lobe_r, top));
    }
    TreeTemplate {
        x,
        y,
        ground_z: spec.terrain.height(x, y),
        height,
        crown_base,
        lobes,
    }
}

fn scaled_lobes(t: &TreeTemplate, scale: f64, shape: CrownShape) -> Vec<Lobe> {
    t.lobes
        .iter()
        .map(|&(ox, oy, r, top)| Lobe {
            cx: t.x + scale * ox,
            cy: t.y + scale * oy,
            radius: scale * r,
            bottom: t.ground_z + t.crown_base,
            top: t.ground_z + top,
            shape,
        })
        .collect()
}

/// Fraction of the ground plot (sampled at 0.1 m pixel centers) covered by
/// at least one lobe footprint.
pub fn crown_cover(spec: &PlotSpec, lobes: &[Lobe]) -> f64 {
    let res = FOOTPRINT_RESOLUTION;
    let w = (spec.ground_extent_x / res).round().max(1.0) as usize;
    let h = (spec.ground_extent_y / res).round().max(1.0) as usize;
    let (x0, y0) = (-0.5 * spec.ground_extent_x, -0.5 * spec.ground_extent_y);
    let mut mask = vec![false; w * h];
    for l in lobes {
        let u0 = (((l.cx - l.radius - x0) / res - 0.5).floor().max(0.0)) as usize;
        let v0 = (((l.cy - l.radius - y0) / res - 0.5).floor().max(0.0)) as usize;
        let u1 = (((l.cx + l.radius - x0) / res - 0.5).ceil().max(-1.0) + 1.0).min(w as f64) as usize;
        let v1 = (((l.cy + l.radius - y0) / res - 0.5).ceil().max(-1.0) + 1.0).min(h as f64) as usize;
        let r2 = l.radius * l.radius;
        for v in v0..v1 {
            let py = y0 + (v as f64 + 0.5) * res;
            for u in u0..u1 {
                let px = x0 + (u as f64 + 0.5) * res;
                if (px - l.cx).powi(2) + (py - l.cy).powi(2) < r2 {
                    mask[v * w + u] = true;
                }
            }
        }
    }
    mask.iter().filter(|&&m| m).count() as f64 / (w * h) as f64
}

/// Buckets lobes by 1 m cells for point queries.
struct LobeIndex {
    lobes: Vec<Lobe>,
    x0: f64,
    y0: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<u32>>,
}

impl LobeIndex {
    fn new(lobes: Vec<Lobe>, half_x: f64, half_y: f64) -> Self {
        let (x0, y0) = (-half_x - 1.0, -half_y - 1.0);
        let cols = (2.0 * half_x + 2.0).ceil() as usize + 1;
        let rows = (2.0 * half_y + 2.0).ceil() as usize + 1;
        let mut buckets = vec![Vec::new(); cols * rows];
        for (i, l) in lobes.iter().enumerate() {
            let clamp_u = |x: f64| ((x - x0).floor().max(0.0) as usize).min(cols - 1);
            let clamp_v = |y: f64| ((y - y0).floor().max(0.0) as usize).min(rows - 1);
            for v in clamp_v(l.cy - l.radius)..=clamp_v(l.cy + l.radius) {
                for u in clamp_u(l.cx - l.radius)..=clamp_u(l.cx + l.radius) {
                    buckets[v * cols + u].push(i as u32);
                }
            }
        }
        Self {
            lobes,
            x0,
            y0,
            cols,
            rows,
            buckets,
        }
    }

    /// Number of covering lobes, lowest bottom and highest top above `(x, y)`.
    fn column(&self, x: f64, y: f64) -> Option<(usize, f64, f64)> {
        let u = (x - self.x0).floor();
        let v = (y - self.y0).floor();
        if u < 0.0 || v < 0.0 || u as usize >= self.cols || v as usize >= self.rows {
            return None;
        }
        let mut out: Option<(usize, f64, f64)> = None;
        for &i in &self.buckets[v as usize * self.cols + u as usize] {
            if let Some((b, t)) = self.lobes[i as usize].span_at(x, y) {
                out = Some(match out {
                    None => (1, b, t),
                    Some((k, b0, t0)) => (k + 1, b0.min(b), t0.max(t)),
                });
            }
        }
        out
    }
}

fn find_crown_scale(spec: &PlotSpec, templates: &[TreeTemplate]) -> Result<(f64, f64)> {
    let lobes_at = |s: f64| -> Vec<Lobe> {
        templates
            .iter()
            .flat_map(|t| scaled_lobes(t, s, spec.crown.shape))
            .collect()
    };
    let target = spec.crown_density_target;
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut cover_hi = crown_cover(spec, &lobes_at(hi));
    while cover_hi < target {
        hi *= 2.0;
        if hi > 64.0 {
            return Err(spec_err(format!(
                "crown density {target} is unreachable; maximum cover {cover_hi:.3}"
            )));
        }
        cover_hi = crown_cover(spec, &lobes_at(hi));
    }
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        let c = crown_cover(spec, &lobes_at(mid));
        if c < target {
            lo = mid;
        } else {
            hi = mid;
            cover_hi = c;
        }
        if hi - lo < 1e-4 {
            break;
        }
    }
    Ok((hi, cover_hi))
}

/// Adds shrubs at random positions over the aerial footprint until they
/// cover `cover` of the ground plot.
fn make_understory(spec: &PlotSpec, u: &Understory, rng: &mut ChaCha8Rng) -> Vec<Lobe> {
    let (hx, hy) = (0.5 * spec.extent_x, 0.5 * spec.extent_y);
    let mut shrubs = Vec::new();
    let mut batch = 16;
    loop {
        for _ in 0..batch {
            let (x, y) = (rng.random_range(-hx..hx), rng.random_range(-hy..hy));
            let ground = spec.terrain.height(x, y);
            shrubs.push(Lobe {
                cx: x,
                cy: y,
                radius: rng.random_range(u.radius_min..=u.radius_max),
                bottom: ground + SHRUB_BASE,
                top: ground + rng.random_range(u.height_min..=u.height_max),
                shape: CrownShape::Ellipsoid,
            });
        }
        if crown_cover(spec, &shrubs) >= u.cover || shrubs.len() > 100_000 {
            return shrubs;
        }
        batch = (shrubs.len() / 4).max(16);
    }
}

fn add_noise(points: &mut [Point3], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    for p in points {
        p.x += normal.sample(rng);
        p.y += normal.sample(rng);
        p.z += normal.sample(rng);
    }
}

fn sample_uls(spec: &PlotSpec, index: &LobeIndex, rng: &mut ChaCha8Rng) -> (Vec<Point3>, Vec<Label>) {
    let n = (spec.uls_density * spec.uls_area()).round() as usize;
    let (hx, hy) = (0.5 * spec.extent_x, 0.5 * spec.extent_y);
    let mut pts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    while pts.len() < n {
        let (x, y) = (rng.random_range(-hx..hx), rng.random_range(-hy..hy));
        if !spec.in_uls(x, y) {
            continue;
        }
        let ground = Point3::new(x, y, spec.terrain.height(x, y));
        match index.column(x, y) {
            Some((k, bottom, top)) => {
                if rng.random_bool(LOBE_TRANSMISSION.powi(k as i32)) {
                    pts.push(ground);
                    labels.push(Label::Ground);
                } else {
                    let z = if rng.random_bool(0.7) { top } else { rng.random_range(bottom..=top) };
                    pts.push(Point3::new(x, y, z));
                    labels.push(Label::Vegetation);
                }
            }
            None => {
                pts.push(ground);
                labels.push(Label::Ground);
            }
        }
    }
    (pts, labels)
}

fn sample_ground_scan(
    spec: &PlotSpec,
    trees: &[Tree],
    index: &LobeIndex,
    cover: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<Point3>, Vec<Label>) {
    let (hx, hy) = (0.5 * spec.ground_extent_x, 0.5 * spec.ground_extent_y);
    let n = (spec.ground_density * spec.ground_extent_x * spec.ground_extent_y).round() as usize;
    let n_ground = n * 55 / 100;
    let n_stem = n / 10;
    let n_crown = n - n_ground - n_stem;
    let mut pts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);

    for _ in 0..n_ground {
        let (x, y) = (rng.random_range(-hx..hx), rng.random_range(-hy..hy));
        pts.push(Point3::new(x, y, spec.terrain.height(x, y)));
        labels.push(Label::Ground);
    }

    let stems: Vec<&Tree> = trees.iter().filter(|t| spec.in_ground_plot(t.x, t.y)).collect();
    if !stems.is_empty() {
        for i in 0..n_stem {
            let t = stems[i % stems.len()];
            let a = rng.random_range(0.0..TAU);
            let z = t.ground_z + rng.random_range(0.0..t.crown_base + 1.0);
            pts.push(Point3::new(t.x + t.stem_radius * a.cos(), t.y + t.stem_radius * a.sin(), z));
            labels.push(Label::Vegetation);
        }
    }

    if cover > 0.0 {
        let mut placed = 0;
        let mut attempts = 0usize;
        let max_attempts = (n_crown as f64 / cover * 4.0) as usize + 1000;
        while placed < n_crown && attempts < max_attempts {
            attempts += 1;
            let (x, y) = (rng.random_range(-hx..hx), rng.random_range(-hy..hy));
            let Some((_, bottom, top)) = index.column(x, y) else {
                continue;
            };
            let r: f64 = rng.random();
            let z = if r < 0.5 {
                bottom
            } else if r < 0.8 {
                rng.random_range(bottom..=top)
            } else {
                top
            };
            pts.push(Point3::new(x, y, z));
            labels.push(Label::Vegetation);
            placed += 1;
        }
    }
    (pts, labels)
}

/// Generates a plot; deterministic for a given spec.
pub fn generate(spec: &PlotSpec) -> Result<SyntheticPlot> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let stems = place_stems(spec, &mut rng)?;
    if stems.is_empty() {
        return Err(spec_err("plot contains no trees"));
    }
    let templates: Vec<TreeTemplate> = stems
        .iter()
        .enumerate()
        .map(|(i, &pos)| {
            let mut tree_rng = ChaCha8Rng::seed_from_u64(spec.seed);
            tree_rng.set_stream(1 + i as u64);
            make_template(spec, pos, &mut tree_rng)
        })
        .collect();
    let (scale, realized) = find_crown_scale(spec, &templates)?;

    let trees: Vec<Tree> = templates
        .iter()
        .map(|t| Tree {
            x: t.x,
            y: t.y,
            ground_z: t.ground_z,
            height: t.height,
            crown_base: t.crown_base,
            stem_radius: 0.01 * t.height,
            lobes: scaled_lobes(t, scale, spec.crown.shape),
        })
        .collect();
    let mut vegetation: Vec<Lobe> = trees.iter().flat_map(|t| t.lobes.iter().copied()).collect();
    if let Some(u) = &spec.understory {
        let mut shrub_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        shrub_rng.set_stream(u64::MAX);
        vegetation.extend(make_understory(spec, u, &mut shrub_rng));
    }
    let index = LobeIndex::new(
        vegetation,
        0.5 * spec.extent_x,
        0.5 * spec.extent_y,
    );

    let (mut uls_pts, uls_labels) = sample_uls(spec, &index, &mut rng);
    let (world_ground, ground_labels) = sample_ground_scan(spec, &trees, &index, realized, &mut rng);

    let to_ground = spec.truth_transform.inverse();
    let mut ground_pts: Vec<Point3> = world_ground.iter().map(|p| to_ground.transform_point(p)).collect();
    add_noise(&mut uls_pts, spec.noise_sigma, &mut rng);
    add_noise(&mut ground_pts, spec.noise_sigma, &mut rng);

    let features = trees
        .iter()
        .filter(|t| spec.in_ground_plot(t.x, t.y))
        .take(FEATURE_COUNT)
        .map(|t| {
            let world = Point3::new(t.x, t.y, t.ground_z + BREAST_HEIGHT);
            (to_ground.transform_point(&world), world)
        })
        .collect();

    Ok(SyntheticPlot {
        uls: PointCloud::new(uls_pts),
        ground: PointCloud::new(ground_pts),
        truth: spec.truth_transform,
        uls_labels,
        ground_labels,
        trees,
        features,
        crown_scale: scale,
        realized_crown_density: realized,
    })
}

struct SuiteRow {
    name: &'static str,
    uls: (f64, f64, bool),
    ground: (f64, f64),
    stand_density: f64,
    crown_density: f64,
    mean_height: f64,
    shape: CrownShape,
    regular: bool,
    uls_density: f64,
    mode: CanopyHeightMode,
    understory: Option<Understory>,
}

const SUITE: [SuiteRow; 6] = [
    SuiteRow {
        name: "plot1-white-birch",
        uls: (40.0, 32.0, false),
        ground: (40.0, 32.0),
        stand_density: 150.0,
        crown_density: 0.39,
        mean_height: 17.8,
        shape: CrownShape::Ellipsoid,
        regular: false,
        uls_density: 150.0,
        mode: CanopyHeightMode::Fixed(3.0),
        understory: None,
    },
    SuiteRow {
        name: "plot2-larch",
        uls: (40.0, 40.0, false),
        ground: (25.0, 22.0),
        stand_density: 300.0,
        crown_density: 0.74,
        mean_height: 19.7,
        shape: CrownShape::Cone,
        regular: false,
        uls_density: 150.0,
        mode: CanopyHeightMode::Fixed(3.0),
        understory: None,
    },
    SuiteRow {
        name: "plot3-scots-pine",
        uls: (20.0, 15.0, false),
        ground: (20.0, 15.0),
        stand_density: 900.0,
        crown_density: 0.79,
        mean_height: 13.4,
        shape: CrownShape::Cone,
        regular: false,
        uls_density: 150.0,
        mode: CanopyHeightMode::Fixed(3.0),
        understory: None,
    },
    SuiteRow {
        name: "plot4-poplar",
        uls: (50.0, 50.0, true),
        ground: (30.0, 30.0),
        stand_density: 256.0,
        crown_density: 0.76,
        mean_height: 31.4,
        shape: CrownShape::Ellipsoid,
        regular: true,
        uls_density: 85.0,
        mode: CanopyHeightMode::Fixed(3.0),
        understory: None,
    },
    SuiteRow {
        name: "plot5-dawn-redwood",
        uls: (50.0, 50.0, true),
        ground: (30.0, 30.0),
        stand_density: 489.0,
        crown_density: 0.96,
        mean_height: 29.4,
        shape: CrownShape::Cone,
        regular: true,
        uls_density: 85.0,
        mode: CanopyHeightMode::ThreeQuarters,
        understory: Some(Understory {
            cover: 0.95,
            height_min: 4.0,
            height_max: 8.0,
            radius_min: 1.0,
            radius_max: 2.5,
        }),
    },
    SuiteRow {
        name: "plot6-dawn-redwood",
        uls: (50.0, 50.0, true),
        ground: (30.0, 30.0),
        stand_density: 578.0,
        crown_density: 0.91,
        mean_height: 22.8,
        shape: CrownShape::Cone,
        regular: true,
        uls_density: 85.0,
        mode: CanopyHeightMode::ThreeQuarters,
        understory: Some(Understory {
            cover: 0.95,
            height_min: 4.0,
            height_max: 8.0,
            radius_min: 1.0,
            radius_max: 2.5,
        }),
    },
];

/// Ground-scan point density used by the suite (pts/m²).
pub const SUITE_GROUND_DENSITY: f64 = 1500.0;

/// Six plots spanning the attribute ranges of two field study areas;
/// `seed` drives tree placement, crown shapes, noise and the random truth.
pub fn table1_suite_seeded(seed: u64) -> Vec<PlotSpec> {
    SUITE
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let plot_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(plot_seed ^ 0x5EED);
            let spacing = 100.0 / row.stand_density.sqrt();
            let layout = if row.regular {
                Layout::RegularJitter {
                    spacing,
                    jitter: 0.12 * spacing,
                }
            } else {
                Layout::PoissonDisk { min_dist: 0.5 * spacing }
            };
            let r0 = (row.crown_density / (PI * row.stand_density / 1e4)).sqrt();
            PlotSpec {
                name: row.name.to_string(),
                extent_x: row.uls.0,
                extent_y: row.uls.1,
                uls_circular: row.uls.2,
                ground_extent_x: row.ground.0,
                ground_extent_y: row.ground.1,
                terrain: Terrain {
                    tilt_deg: rng.random_range(1.0..4.0),
                    tilt_azimuth_deg: rng.random_range(0.0..360.0),
                    undulation_amplitude: 0.1,
                    undulation_wavelength: 25.0,
                },
                stand_density: row.stand_density,
                layout,
                crown: CrownSpec {
                    radius_min: 0.6 * r0,
                    radius_max: 1.2 * r0,
                    height_min: 0.75 * row.mean_height,
                    height_max: 1.25 * row.mean_height,
                    base_fraction_min: 0.35,
                    base_fraction_max: 0.55,
                    shape: row.shape,
                },
                crown_density_target: row.crown_density,
                understory: row.understory,
                uls_density: row.uls_density,
                ground_density: SUITE_GROUND_DENSITY,
                truth_transform: random_truth(&mut rng),
                noise_sigma: 0.02,
                seed: plot_seed,
                canopy_mode: row.mode,
            }
        })
        .collect()
}

pub fn table1_suite() -> Vec<PlotSpec> {
    table1_suite_seeded(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PlotSpec {
        let mut s = table1_suite()[2].clone();
        s.ground_density = 300.0;
        s
    }

    #[test]
    fn suite_rows() {
        let suite = table1_suite();
        assert_eq!(suite.len(), 6);
        assert_eq!(suite[0].stand_density, 150.0);
        assert_eq!((suite[0].extent_x, suite[0].extent_y), (40.0, 32.0));
        assert_eq!(suite[2].stand_density, 900.0);
        assert_eq!(suite[4].crown_density_target, 0.96);
        assert_eq!(suite[4].canopy_mode, CanopyHeightMode::ThreeQuarters);
        assert_eq!(suite[5].canopy_mode, CanopyHeightMode::ThreeQuarters);
        for s in &suite {
            s.validate().unwrap();
        }
    }

    #[test]
    fn deterministic() {
        let spec = small_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.uls, b.uls);
        assert_eq!(a.ground, b.ground);
        assert_eq!(a.ground_labels, b.ground_labels);
        let mut other = spec.clone();
        other.seed += 1;
        assert_ne!(generate(&other).unwrap().uls, a.uls);
    }

    #[test]
    fn tree_count_for_sparse_plot() {
        let mut spec = table1_suite()[0].clone();
        spec.ground_density = 10.0;
        let plot = generate(&spec).unwrap();
        let inside = plot.trees.iter().filter(|t| spec.in_ground_plot(t.x, t.y)).count();
        assert!((17..=21).contains(&inside), "{inside} trees");
    }

    #[test]
    fn realized_cover_near_target() {
        for mut spec in table1_suite() {
            spec.ground_density = 5.0;
            spec.uls_density = 5.0;
            let plot = generate(&spec).unwrap();
            let lobes: Vec<Lobe> = plot.trees.iter().flat_map(|t| t.lobes.clone()).collect();
            let cover = crown_cover(&spec, &lobes);
            assert!((cover - spec.crown_density_target).abs() <= 0.1, "{}: {cover}", spec.name);
        }
    }

    #[test]
    fn labels_match_geometry_without_noise() {
        let mut spec = small_spec();
        spec.noise_sigma = 0.0;
        spec.truth_transform = RigidTransform::identity();
        let plot = generate(&spec).unwrap();
        for (p, l) in plot.uls.points.iter().zip(&plot.uls_labels) {
            let on_ground = (p.z - spec.terrain.height(p.x, p.y)).abs() < 1e-9;
            assert_eq!(*l == Label::Ground, on_ground);
        }
        assert_eq!(plot.ground.len(), plot.ground_labels.len());
        for (g, w) in &plot.features {
            assert!((g - w).norm() < 1e-12);
        }
    }

    #[test]
    fn ground_scan_is_in_truth_inverse_frame() {
        let mut spec = small_spec();
        spec.noise_sigma = 0.0;
        let plot = generate(&spec).unwrap();
        for (g, w) in &plot.features {
            assert!((plot.truth.transform_point(g) - w).norm() < 1e-9);
        }
        let back = plot.truth.apply(&plot.ground);
        for p in back.points.iter().take(1000) {
            assert!(spec.in_ground_plot(p.x, p.y) || p.x.abs() - 0.5 * spec.ground_extent_x < 0.5);
        }
    }

    #[test]
    fn invalid_specs() {
        let base = small_spec();
        let mut s = base.clone();
        s.crown_density_target = 1.5;
        assert!(matches!(generate(&s), Err(Error::SpecError(_))));
        let mut s = base.clone();
        s.uls_density = 0.0;
        assert!(generate(&s).is_err());
        let mut s = base.clone();
        s.layout = Layout::RegularJitter { spacing: 10.0, jitter: 0.0 };
        assert!(generate(&s).is_err());
        let mut s = base.clone();
        s.layout = Layout::PoissonDisk { min_dist: 50.0 };
        assert!(generate(&s).is_err());
        let mut s = base;
        s.ground_extent_x = 100.0;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = table1_suite()[4].clone();
        let text = serde_json::to_string(&spec).unwrap();
        let back: PlotSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back.name, spec.name);
        assert_eq!(back.layout, spec.layout);
        assert!(crate::geometry::rotation_angle_between(&back.truth_transform.rotation, &spec.truth_transform.rotation) < 1e-12);
    }
}
