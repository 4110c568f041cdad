//! Canopy projection and binary morphology.
//!
//! Pixel `(u, v)` covers world `[ox + u r, ox + (u+1) r) x [oy + v r, oy + (v+1) r)`
//! where `(ox, oy)` is the image origin and `r` its resolution; `v` grows with
//! world `y`. All window operations treat out-of-bounds pixels as background.

use crate::config::{CanopyHeightMode, PlotConfig};
use crate::error::{Error, Result};
use crate::geometry::{Label, PointCloud};
use crate::ground::LeveledCloud;

/// Georeferenced bit raster.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryImage {
    pub width: usize,
    pub height: usize,
    pub origin_x: f64,
    pub origin_y: f64,
    pub resolution: f64,
    /// Row-major (`v * width + u`), each entry 0 or 1.
    pub bits: Vec<u8>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize, origin_x: f64, origin_y: f64, resolution: f64) -> Self {
        assert!(width >= 1 && height >= 1, "image must be at least 1x1");
        assert!(resolution > 0.0, "resolution must be positive");
        Self {
            width,
            height,
            origin_x,
            origin_y,
            resolution,
            bits: vec![0; width * height],
        }
    }

    /// Same geometry, all background.
    pub fn blank_like(&self) -> Self {
        Self {
            bits: vec![0; self.bits.len()],
            ..self.clone()
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[v * self.width + u] != 0
    }

    /// Reads with out-of-bounds as background.
    #[inline]
    pub fn get_or_zero(&self, u: i64, v: i64) -> bool {
        u >= 0
            && v >= 0
            && (u as usize) < self.width
            && (v as usize) < self.height
            && self.bits[v as usize * self.width + u as usize] != 0
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, on: bool) {
        self.bits[v * self.width + u] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    /// World coordinate of a (possibly fractional) pixel index's center.
    pub fn pixel_to_world(&self, u: f64, v: f64) -> (f64, f64) {
        (
            self.origin_x + (u + 0.5) * self.resolution,
            self.origin_y + (v + 0.5) * self.resolution,
        )
    }

    /// Pixel whose footprint contains the world point (may be out of bounds).
    pub fn world_to_pixel(&self, x: f64, y: f64) -> (i64, i64) {
        (
            ((x - self.origin_x) / self.resolution).floor() as i64,
            ((y - self.origin_y) / self.resolution).floor() as i64,
        )
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|&b| (b == 0) as u8).collect(),
            ..self.clone()
        }
    }
}

/// Points that form the canopy silhouette of a leveled cloud.
pub fn select_canopy(leveled: &LeveledCloud, mode: CanopyHeightMode) -> Result<PointCloud> {
    let cloud = &leveled.cloud;
    let plane = &leveled.plane_after;
    let cutoff = match mode {
        CanopyHeightMode::Fixed(h) => -plane.d / plane.c + h,
        CanopyHeightMode::ThreeQuarters => {
            let (lo, hi) = cloud.bounds().ok_or(Error::EmptyCloud)?;
            lo.z + 0.75 * (hi.z - lo.z)
        }
    };
    let points: Vec<_> = cloud
        .points
        .iter()
        .enumerate()
        .filter(|(i, p)| p.z > cutoff && cloud.label(*i) != Label::Ground)
        .map(|(_, p)| *p)
        .collect();
    if points.is_empty() {
        return Err(Error::EmptyCanopy { cutoff });
    }
    Ok(PointCloud::new(points))
}

/// Projects points onto the xy plane. The image spans the xy bounding box
/// plus one background pixel on every side.
pub fn rasterize(points: &PointCloud, resolution: f64) -> Result<BinaryImage> {
    let (lo, hi) = points.bounds().ok_or(Error::EmptyCloud)?;
    let cols = ((hi.x - lo.x) / resolution).floor() as usize + 3;
    let rows = ((hi.y - lo.y) / resolution).floor() as usize + 3;
    let mut img = BinaryImage::new(cols, rows, lo.x - resolution, lo.y - resolution, resolution);
    for p in &points.points {
        // Offsets are taken from the bounding box minimum so the extreme
        // points land exactly in column/row 1.
        let u = ((p.x - lo.x) / resolution).floor() as usize + 1;
        let v = ((p.y - lo.y) / resolution).floor() as usize + 1;
        img.bits[v * cols + u] = 1;
    }
    Ok(img)
}

fn check_kernel(kernel: usize) {
    assert!(kernel % 2 == 1, "kernel must be odd, got {kernel}");
}

/// Windowed count of ones along rows: `out[v][u] = #{ones in row v, |du| <= r}`.
fn row_window_counts(width: usize, height: usize, bits: &[u8], r: usize) -> Vec<u16> {
    let mut out = vec![0u16; bits.len()];
    for v in 0..height {
        let row = &bits[v * width..(v + 1) * width];
        let dst = &mut out[v * width..(v + 1) * width];
        let mut count: u16 = row[..r.min(width)].iter().map(|&b| b as u16).sum();
        for u in 0..width {
            if u + r < width {
                count += row[u + r] as u16;
            }
            dst[u] = count;
            if u >= r {
                count -= row[u - r] as u16;
            }
        }
    }
    out
}

/// Windowed sum along columns of a per-pixel count raster.
fn col_window_sums(width: usize, height: usize, counts: &[u16], r: usize) -> Vec<u32> {
    let mut out = vec![0u32; counts.len()];
    let mut acc = vec![0u32; width];
    for v in 0..r.min(height) {
        for u in 0..width {
            acc[u] += counts[v * width + u] as u32;
        }
    }
    for v in 0..height {
        if v + r < height {
            let row = &counts[(v + r) * width..(v + r + 1) * width];
            for (a, &c) in acc.iter_mut().zip(row) {
                *a += c as u32;
            }
        }
        out[v * width..(v + 1) * width].copy_from_slice(&acc);
        if v >= r {
            let row = &counts[(v - r) * width..(v - r + 1) * width];
            for (a, &c) in acc.iter_mut().zip(row) {
                *a -= c as u32;
            }
        }
    }
    out
}

/// Number of set pixels in the `kernel x kernel` window around each pixel.
fn window_counts(img: &BinaryImage, kernel: usize) -> Vec<u32> {
    let r = kernel / 2;
    let rows = row_window_counts(img.width, img.height, &img.bits, r);
    col_window_sums(img.width, img.height, &rows, r)
}

/// Square-kernel dilation (OR over the window).
pub fn dilate(img: &BinaryImage, kernel: usize) -> BinaryImage {
    check_kernel(kernel);
    let counts = window_counts(img, kernel);
    BinaryImage {
        bits: counts.iter().map(|&c| (c > 0) as u8).collect(),
        ..img.clone()
    }
}

/// Square-kernel erosion (AND over the window, out-of-bounds = 0).
pub fn erode(img: &BinaryImage, kernel: usize) -> BinaryImage {
    check_kernel(kernel);
    let full = (kernel * kernel) as u32;
    let counts = window_counts(img, kernel);
    BinaryImage {
        bits: counts.iter().map(|&c| (c == full) as u8).collect(),
        ..img.clone()
    }
}

/// Binary median: majority vote over the `kernel x kernel` window.
pub fn median_filter(img: &BinaryImage, kernel: usize) -> BinaryImage {
    check_kernel(kernel);
    let half = (kernel * kernel / 2) as u32;
    let counts = window_counts(img, kernel);
    BinaryImage {
        bits: counts.iter().map(|&c| (c > half) as u8).collect(),
        ..img.clone()
    }
}

/// Intermediate rasters of the canopy image chain, for inspection.
#[derive(Clone, Debug)]
pub struct CanopyStages {
    pub raw: BinaryImage,
    pub dilated: BinaryImage,
    pub eroded: BinaryImage,
    pub filtered: BinaryImage,
}

pub fn canopy_stages(leveled: &LeveledCloud, cfg: &PlotConfig) -> Result<CanopyStages> {
    let canopy = select_canopy(leveled, cfg.canopy_height_mode)?;
    let raw = rasterize(&canopy, cfg.projection_resolution)?;
    let dilated = dilate(&raw, cfg.morphology_kernel);
    let eroded = erode(&dilated, cfg.morphology_kernel);
    let filtered = median_filter(&eroded, cfg.median_kernel);
    Ok(CanopyStages {
        raw,
        dilated,
        eroded,
        filtered,
    })
}

/// Canopy selection, projection, closing and median smoothing.
pub fn make_canopy_image(leveled: &LeveledCloud, cfg: &PlotConfig) -> Result<BinaryImage> {
    canopy_stages(leveled, cfg).map(|s| s.filtered)
}
