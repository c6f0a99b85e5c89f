//! Grayscale front end: image pyramids, Harris corners, pyramidal
//! Lucas–Kanade tracking and fundamental-matrix RANSAC.

use std::io::{self, BufRead, Write};

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::Pixel;

pub const PYRAMID_LEVELS: usize = 4;
pub const MIN_PYRAMID_SIZE: usize = 32;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image is {width}x{height}; pyramids need at least {MIN_PYRAMID_SIZE}x{MIN_PYRAMID_SIZE}")]
    TooSmall { width: usize, height: usize },
    #[error("pixel buffer has {got} values, expected {expected}")]
    SizeMismatch { got: usize, expected: usize },
    #[error("intensity {0} outside [0, 1]")]
    BadIntensity(f32),
    #[error("pyramids differ in geometry")]
    GeometryMismatch,
    #[error("point lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major grayscale image with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::SizeMismatch {
                got: data.len(),
                expected: width * height,
            });
        }
        if let Some(&v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(ImageError::BadIntensity(v));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("constant image")
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self { width, height, data }
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        if bytes.len() != width * height {
            return Err(ImageError::SizeMismatch {
                got: bytes.len(),
                expected: width * height,
            });
        }
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Ok(Self { width, height, data })
    }

    /// Quantize to 8 bits (round to nearest).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn contains(&self, p: Pixel) -> bool {
        p.u >= 0.0 && p.v >= 0.0 && p.u <= (self.width - 1) as f64 && p.v <= (self.height - 1) as f64
    }

    /// Bilinear sample; `None` outside `[0, w-1] x [0, h-1]`.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        bilinear(&self.data, self.width, self.height, x, y)
    }
}

#[inline]
fn bilinear(data: &[f32], w: usize, h: usize, x: f64, y: f64) -> Option<f64> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let ax = x - x0 as f64;
    let ay = y - y0 as f64;
    let i = y0 * w + x0;
    let x1 = if w > 1 { 1 } else { 0 };
    let y1 = if h > 1 { w } else { 0 };
    let top = data[i] as f64 * (1.0 - ax) + data[i + x1] as f64 * ax;
    let bottom = data[i + y1] as f64 * (1.0 - ax) + data[i + y1 + x1] as f64 * ax;
    Some(top * (1.0 - ay) + bottom * ay)
}

/// Central-difference gradient images.
#[derive(Debug, Clone)]
struct Gradient {
    width: usize,
    height: usize,
    gx: Vec<f32>,
    gy: Vec<f32>,
}

impl Gradient {
    fn of(img: &GrayImage) -> Self {
        let (w, h) = (img.width, img.height);
        let mut gx = vec![0.0f32; w * h];
        let mut gy = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let xl = x.saturating_sub(1);
                let xr = (x + 1).min(w - 1);
                let yu = y.saturating_sub(1);
                let yd = (y + 1).min(h - 1);
                gx[y * w + x] = (img.get(xr, y) - img.get(xl, y)) / (xr - xl).max(1) as f32;
                gy[y * w + x] = (img.get(x, yd) - img.get(x, yu)) / (yd - yu).max(1) as f32;
            }
        }
        Self { width: w, height: h, gx, gy }
    }

    #[inline]
    fn sample(&self, x: f64, y: f64) -> Option<Vector2<f64>> {
        Some(Vector2::new(
            bilinear(&self.gx, self.width, self.height, x, y)?,
            bilinear(&self.gy, self.width, self.height, x, y)?,
        ))
    }
}

/// Halve an image by 2x2 box averaging (floor dimensions).
pub fn downsample(img: &GrayImage) -> GrayImage {
    let w = img.width / 2;
    let h = img.height / 2;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let s = img.get(2 * x, 2 * y)
                + img.get(2 * x + 1, 2 * y)
                + img.get(2 * x, 2 * y + 1)
                + img.get(2 * x + 1, 2 * y + 1);
            data.push(s * 0.25);
        }
    }
    GrayImage { width: w, height: h, data }
}

/// Four-level pyramid. Level 1 is the coarsest (1/8 scale), level 4 the
/// full-resolution input.
#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<GrayImage>,
    gradients: Vec<Gradient>,
}

impl Pyramid {
    /// Image at `level` in `1..=4`.
    pub fn level(&self, level: usize) -> &GrayImage {
        &self.levels[level - 1]
    }

    pub fn full(&self) -> &GrayImage {
        &self.levels[PYRAMID_LEVELS - 1]
    }

    fn gradient(&self, level: usize) -> &Gradient {
        &self.gradients[level - 1]
    }

    fn same_geometry(&self, other: &Pyramid) -> bool {
        self.levels
            .iter()
            .zip(&other.levels)
            .all(|(a, b)| a.width == b.width && a.height == b.height)
    }
}

/// Scale from `level` coordinates to full resolution: `2^(4 - level)`.
pub fn level_scale(level: usize) -> f64 {
    (1u32 << (PYRAMID_LEVELS - level)) as f64
}

/// Coordinates of a full-resolution point at pyramid `level`.
pub fn to_level(p: Pixel, level: usize) -> Pixel {
    p * (1.0 / level_scale(level))
}

pub fn build_pyramid(img: &GrayImage) -> Result<Pyramid, ImageError> {
    if img.width < MIN_PYRAMID_SIZE || img.height < MIN_PYRAMID_SIZE {
        return Err(ImageError::TooSmall {
            width: img.width,
            height: img.height,
        });
    }
    let mut levels = vec![img.clone()];
    for _ in 1..PYRAMID_LEVELS {
        let next = downsample(levels.last().unwrap());
        levels.push(next);
    }
    levels.reverse();
    let gradients = levels.iter().map(Gradient::of).collect();
    Ok(Pyramid { levels, gradients })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarrisConfig {
    pub k: f64,
    /// Responses below `quality * max_response` are discarded.
    pub quality: f64,
    /// Absolute floor on accepted responses.
    pub min_response: f64,
    /// Pixels closer than this to the border are never returned.
    pub border: usize,
}

impl Default for HarrisConfig {
    fn default() -> Self {
        Self {
            k: 0.04,
            quality: 0.01,
            min_response: 1e-8,
            border: 3,
        }
    }
}

/// Harris response `det(M) - k tr(M)^2` per pixel, using 3x3 Sobel
/// gradients summed over a 3x3 window. Zero within two pixels of the border.
pub fn harris_response(img: &GrayImage, k: f64) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let mut ixx = vec![0.0f64; w * h];
    let mut iyy = vec![0.0f64; w * h];
    let mut ixy = vec![0.0f64; w * h];
    let at = |x: usize, y: usize| img.get(x, y) as f64;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1))
                / 8.0;
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1))
                / 8.0;
            let i = y * w + x;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let mut resp = vec![0.0f64; w * h];
    for y in 2..h.saturating_sub(2) {
        for x in 2..w.saturating_sub(2) {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for dy in 0..3 {
                for dx in 0..3 {
                    let i = (y + dy - 1) * w + (x + dx - 1);
                    a += ixx[i];
                    b += iyy[i];
                    c += ixy[i];
                }
            }
            let tr = a + b;
            resp[y * w + x] = a * b - c * c - k * tr * tr;
        }
    }
    resp
}

/// Harris corners sorted by descending response, pairwise at least
/// `min_dist` apart, at most `max_corners`.
pub fn harris_detect(img: &GrayImage, max_corners: usize, min_dist: f64) -> Vec<Pixel> {
    harris_detect_with(img, max_corners, min_dist, &[], &HarrisConfig::default())
}

/// As [`harris_detect`], additionally keeping `min_dist` clearance from
/// `existing` points (which are not returned).
pub fn harris_detect_with(
    img: &GrayImage,
    max_corners: usize,
    min_dist: f64,
    existing: &[Pixel],
    cfg: &HarrisConfig,
) -> Vec<Pixel> {
    if max_corners == 0 {
        return Vec::new();
    }
    let (w, h) = (img.width, img.height);
    let resp = harris_response(img, cfg.k);
    let max_r = resp.iter().cloned().fold(0.0f64, f64::max);
    let threshold = (cfg.quality * max_r).max(cfg.min_response);
    if max_r < threshold {
        return Vec::new();
    }
    let b = cfg.border.max(2);
    let mut candidates = Vec::new();
    for y in b..h.saturating_sub(b) {
        for x in b..w.saturating_sub(b) {
            let r = resp[y * w + x];
            if r < threshold {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = resp[(y as i64 + dy) as usize * w + (x as i64 + dx) as usize];
                    // Ties go to the earlier pixel in raster order.
                    if n > r || (n == r && (dy < 0 || (dy == 0 && dx < 0))) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                candidates.push((r, x, y));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));

    let cell = min_dist.max(1.0);
    let gw = (w as f64 / cell).ceil() as usize + 1;
    let gh = (h as f64 / cell).ceil() as usize + 1;
    let mut grid: Vec<Vec<Pixel>> = vec![Vec::new(); gw * gh];
    let cell_of = |p: Pixel| -> Option<(usize, usize)> {
        if p.u < 0.0 || p.v < 0.0 {
            return None;
        }
        let cx = (p.u / cell) as usize;
        let cy = (p.v / cell) as usize;
        (cx < gw && cy < gh).then_some((cx, cy))
    };
    let blocked = |grid: &Vec<Vec<Pixel>>, p: Pixel| -> bool {
        let (cx, cy) = match cell_of(p) {
            Some(c) => c,
            None => return false,
        };
        for gy in cy.saturating_sub(1)..=(cy + 1).min(gh - 1) {
            for gx in cx.saturating_sub(1)..=(cx + 1).min(gw - 1) {
                if grid[gy * gw + gx].iter().any(|q| q.distance(p) < min_dist) {
                    return true;
                }
            }
        }
        false
    };
    for &p in existing {
        if let Some((cx, cy)) = cell_of(p) {
            grid[cy * gw + cx].push(p);
        }
    }
    let mut out = Vec::new();
    for (_, x, y) in candidates {
        let p = Pixel::new(x as f64, y as f64);
        if min_dist > 0.0 && blocked(&grid, p) {
            continue;
        }
        let (cx, cy) = cell_of(p).unwrap();
        grid[cy * gw + cx].push(p);
        out.push(p);
        if out.len() == max_corners {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Ok,
    Diverged,
    OutOfBounds,
}

impl TrackStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TrackStatus::Ok => "ok",
            TrackStatus::Diverged => "diverged",
            TrackStatus::OutOfBounds => "out_of_bounds",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackResult {
    pub point: Pixel,
    pub status: TrackStatus,
    /// Mean absolute intensity difference over the patch at `point`.
    pub residual: f64,
}

impl TrackResult {
    pub fn is_ok(&self) -> bool {
        self.status == TrackStatus::Ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LkConfig {
    /// Odd patch edge length.
    pub patch: usize,
    pub max_iterations: usize,
    /// Convergence threshold on the update step (px).
    pub epsilon: f64,
    /// Minimum eigenvalue of the per-pixel averaged gradient matrix.
    pub min_eigenvalue: f64,
    /// Minimum fraction of the patch that must be sampled at coarse levels.
    pub min_valid_fraction: f64,
}

impl Default for LkConfig {
    fn default() -> Self {
        Self {
            patch: 21,
            max_iterations: 30,
            epsilon: 0.01,
            min_eigenvalue: 1e-6,
            min_valid_fraction: 0.5,
        }
    }
}

impl LkConfig {
    fn half(&self) -> i64 {
        (self.patch / 2) as i64
    }
}

struct LevelResult {
    flow: Vector2<f64>,
    status: TrackStatus,
    residual: f64,
}

/// Additive LK at a single level. `pt` is the template center in `prev`,
/// `flow` the initial displacement. Patch pixels falling outside either
/// image are masked out.
fn lk_level(
    prev: &GrayImage,
    grad: &Gradient,
    next: &GrayImage,
    pt: Vector2<f64>,
    mut flow: Vector2<f64>,
    cfg: &LkConfig,
) -> LevelResult {
    let half = cfg.half();
    let total = (cfg.patch * cfg.patch) as f64;
    let mut template: Vec<(f64, f64, f64, Vector2<f64>)> = Vec::with_capacity(cfg.patch * cfg.patch);
    let mut g = Matrix2::zeros();
    for dy in -half..=half {
        for dx in -half..=half {
            let x = pt.x + dx as f64;
            let y = pt.y + dy as f64;
            if let (Some(i), Some(d)) = (prev.sample(x, y), grad.sample(x, y)) {
                g += d * d.transpose();
                template.push((dx as f64, dy as f64, i, d));
            }
        }
    }
    let fail = |flow, status| LevelResult {
        flow,
        status,
        residual: f64::INFINITY,
    };
    if (template.len() as f64) < cfg.min_valid_fraction * total {
        return fail(flow, TrackStatus::OutOfBounds);
    }
    let n = template.len() as f64;
    let min_eig = {
        let a = g / n;
        let tr = a[(0, 0)] + a[(1, 1)];
        let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
        0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt())
    };
    if !(min_eig >= cfg.min_eigenvalue) {
        return fail(flow, TrackStatus::Diverged);
    }
    let g_inv = g.try_inverse().expect("positive-definite gradient matrix");

    let mut converged = false;
    for _ in 0..cfg.max_iterations {
        let c = pt + flow;
        let mut b = Vector2::zeros();
        let mut used = 0usize;
        let mut g_used = Matrix2::zeros();
        for &(dx, dy, i, d) in &template {
            if let Some(j) = next.sample(c.x + dx, c.y + dy) {
                b += d * (i - j);
                g_used += d * d.transpose();
                used += 1;
            }
        }
        if (used as f64) < cfg.min_valid_fraction * total {
            return fail(flow, TrackStatus::OutOfBounds);
        }
        let step = if used == template.len() {
            g_inv * b
        } else {
            match g_used.try_inverse() {
                Some(inv) => inv * b,
                None => return fail(flow, TrackStatus::Diverged),
            }
        };
        if !step.iter().all(|v| v.is_finite()) {
            return fail(flow, TrackStatus::Diverged);
        }
        flow += step;
        if step.norm() < cfg.epsilon {
            converged = true;
            break;
        }
    }
    let c = pt + flow;
    let mut err = 0.0;
    let mut used = 0usize;
    for &(dx, dy, i, _) in &template {
        if let Some(j) = next.sample(c.x + dx, c.y + dy) {
            err += (i - j).abs();
            used += 1;
        }
    }
    if used == 0 {
        return fail(flow, TrackStatus::OutOfBounds);
    }
    LevelResult {
        flow,
        status: if converged {
            TrackStatus::Ok
        } else {
            TrackStatus::Diverged
        },
        residual: err / used as f64,
    }
}

/// Single-level LK of `pt` from `prev` into `next`, starting at `init`.
pub fn lk_track_single(prev: &GrayImage, next: &GrayImage, pt: Pixel, init: Pixel) -> TrackResult {
    lk_track_single_with(prev, next, pt, init, &LkConfig::default())
}

pub fn lk_track_single_with(
    prev: &GrayImage,
    next: &GrayImage,
    pt: Pixel,
    init: Pixel,
    cfg: &LkConfig,
) -> TrackResult {
    let half = cfg.half() as f64;
    let inside = |img: &GrayImage, p: Pixel| {
        p.u >= half && p.v >= half && p.u <= img.width as f64 - 1.0 - half && p.v <= img.height as f64 - 1.0 - half
    };
    if !inside(prev, pt) || !init.is_finite() {
        return TrackResult {
            point: init,
            status: TrackStatus::OutOfBounds,
            residual: f64::INFINITY,
        };
    }
    let grad = Gradient::of(prev);
    let strict = LkConfig {
        min_valid_fraction: 1.0,
        ..*cfg
    };
    let r = lk_level(prev, &grad, next, pt.to_vector(), (init - pt).to_vector(), &strict);
    finish(pt, r, next)
}

fn finish(pt: Pixel, r: LevelResult, next: &GrayImage) -> TrackResult {
    let point = Pixel::from_vector(&(pt.to_vector() + r.flow));
    let status = if r.status == TrackStatus::Ok && !next.contains(point) {
        TrackStatus::OutOfBounds
    } else {
        r.status
    };
    TrackResult {
        point,
        status,
        residual: r.residual,
    }
}

/// Coarse-to-fine LK of full-resolution `pts` from `prev` into `next`.
///
/// The search starts at level 1 with the point and initial guess divided by
/// 2^3 and doubles the displacement at each finer level. Without `inits`
/// the guess is zero motion.
pub fn lk_track_pyramid(
    prev: &Pyramid,
    next: &Pyramid,
    pts: &[Pixel],
    inits: Option<&[Pixel]>,
) -> Result<Vec<TrackResult>, ImageError> {
    lk_track_pyramid_with(prev, next, pts, inits, &LkConfig::default())
}

pub fn lk_track_pyramid_with(
    prev: &Pyramid,
    next: &Pyramid,
    pts: &[Pixel],
    inits: Option<&[Pixel]>,
    cfg: &LkConfig,
) -> Result<Vec<TrackResult>, ImageError> {
    if !prev.same_geometry(next) {
        return Err(ImageError::GeometryMismatch);
    }
    if let Some(g) = inits {
        if g.len() != pts.len() {
            return Err(ImageError::LengthMismatch(pts.len(), g.len()));
        }
    }
    Ok(pts
        .par_iter()
        .enumerate()
        .map(|(idx, &pt)| {
            let init = inits.map_or(pt, |g| g[idx]);
            track_one_pyramid(prev, next, pt, init, cfg)
        })
        .collect())
}

fn track_one_pyramid(prev: &Pyramid, next: &Pyramid, pt: Pixel, init: Pixel, cfg: &LkConfig) -> TrackResult {
    if !pt.is_finite() || !init.is_finite() || !prev.full().contains(pt) {
        return TrackResult {
            point: init,
            status: TrackStatus::OutOfBounds,
            residual: f64::INFINITY,
        };
    }
    let mut flow = (init - pt).to_vector() / level_scale(1);
    let mut last = None;
    for level in 1..=PYRAMID_LEVELS {
        let p = to_level(pt, level).to_vector();
        let r = lk_level(prev.level(level), prev.gradient(level), next.level(level), p, flow, cfg);
        if level < PYRAMID_LEVELS {
            // A failed coarse level keeps the incoming guess.
            if r.status == TrackStatus::Ok || (r.status == TrackStatus::Diverged && r.residual.is_finite()) {
                flow = r.flow;
            }
            flow *= 2.0;
        } else {
            last = Some(r);
        }
    }
    finish(pt, last.unwrap(), next.full())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    /// Inlier threshold on the symmetric epipolar distance (px).
    pub threshold: f64,
    pub max_iterations: usize,
    pub seed: u64,
    /// Stop early once this confidence of an all-inlier sample is reached.
    pub confidence: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            max_iterations: 500,
            seed: 0x5eed,
            confidence: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub inliers: Vec<bool>,
    /// Set when there were too few correspondences to fit a model.
    pub warning: bool,
    /// `x_bᵀ F x_a = 0` for inliers.
    pub fundamental: Option<Matrix3<f64>>,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn normalization(pts: &[Pixel]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (mut mu, mut mv) = (0.0, 0.0);
    for p in pts {
        mu += p.u;
        mv += p.v;
    }
    mu /= n;
    mv /= n;
    let mean_dist = pts
        .iter()
        .map(|p| ((p.u - mu).powi(2) + (p.v - mv).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 1e-12 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * mu, 0.0, s, -s * mv, 0.0, 0.0, 1.0)
}

/// Normalized eight-point estimate over all given pairs with rank-2
/// enforcement. Needs at least 8 pairs.
pub fn fundamental_eight_point(a: &[Pixel], b: &[Pixel]) -> Option<Matrix3<f64>> {
    let n = a.len();
    if n < 8 || b.len() != n {
        return None;
    }
    let ta = normalization(a);
    let tb = normalization(b);
    let rows = n.max(9);
    let mut m = DMatrix::<f64>::zeros(rows, 9);
    for i in 0..n {
        let pa = ta * a[i].homogeneous();
        let pb = tb * b[i].homogeneous();
        for r in 0..3 {
            for c in 0..3 {
                m[(i, 3 * r + c)] = pb[r] * pa[c];
            }
        }
    }
    let svd = m.svd(false, true);
    let v_t = svd.v_t?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?;
    let f = v_t.row(imin);
    let fn_ = Matrix3::from_row_slice(&[f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]]);
    let svd3 = fn_.svd(true, true);
    let mut s = svd3.singular_values;
    let (smin, _) = s.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
    s[smin] = 0.0;
    let f2 = svd3.u? * Matrix3::from_diagonal(&s) * svd3.v_t?;
    let f = tb.transpose() * f2 * ta;
    let norm = f.norm();
    (norm > 0.0 && norm.is_finite()).then(|| f / norm)
}

/// `sqrt(d_b² + d_a²)`, the distances of each point to its epipolar line.
pub fn symmetric_epipolar_distance(f: &Matrix3<f64>, a: Pixel, b: Pixel) -> f64 {
    let xa = a.homogeneous();
    let xb = b.homogeneous();
    let la: Vector3<f64> = f * xa;
    let lb: Vector3<f64> = f.transpose() * xb;
    let e = xb.dot(&la);
    let na = la.x * la.x + la.y * la.y;
    let nb = lb.x * lb.x + lb.y * lb.y;
    if na <= 0.0 || nb <= 0.0 {
        return f64::INFINITY;
    }
    (e * e / na + e * e / nb).sqrt()
}

fn score(f: &Matrix3<f64>, a: &[Pixel], b: &[Pixel], threshold: f64) -> (Vec<bool>, usize, f64) {
    let mut mask = vec![false; a.len()];
    let mut count = 0;
    let mut err = 0.0;
    for i in 0..a.len() {
        let d = symmetric_epipolar_distance(f, a[i], b[i]);
        if d < threshold {
            mask[i] = true;
            count += 1;
            err += d;
        }
    }
    (mask, count, err)
}

/// Joint outlier rejection over correspondences `a[i] <-> b[i]`.
pub fn ransac_filter(a: &[Pixel], b: &[Pixel], cfg: &RansacConfig) -> Result<RansacResult, ImageError> {
    if a.len() != b.len() {
        return Err(ImageError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 8 {
        return Ok(RansacResult {
            inliers: vec![true; n],
            warning: true,
            fundamental: None,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Matrix3<f64>, Vec<bool>, usize, f64)> = None;
    let mut budget = cfg.max_iterations;
    let mut iter = 0;
    let mut sa = [Pixel::default(); 8];
    let mut sb = [Pixel::default(); 8];
    while iter < budget {
        iter += 1;
        let idx = rand::seq::index::sample(&mut rng, n, 8);
        for (k, i) in idx.iter().enumerate() {
            sa[k] = a[i];
            sb[k] = b[i];
        }
        let Some(f) = fundamental_eight_point(&sa, &sb) else {
            continue;
        };
        let (mask, count, err) = score(&f, a, b, cfg.threshold);
        let better = match &best {
            None => true,
            Some((_, _, c, e)) => count > *c || (count == *c && err < *e),
        };
        if better {
            best = Some((f, mask, count, err));
            let ratio = count as f64 / n as f64;
            let p_good = ratio.powi(8);
            if p_good >= 1.0 - 1e-12 {
                budget = iter;
            } else if p_good > 0.0 {
                let need = ((1.0 - cfg.confidence).ln() / (1.0 - p_good).ln()).ceil();
                if need.is_finite() && need >= 0.0 {
                    budget = budget.min((need as usize).max(iter));
                }
            }
        }
    }
    let Some((mut f, mut mask, mut count, mut err)) = best else {
        return Ok(RansacResult {
            inliers: vec![true; n],
            warning: true,
            fundamental: None,
        });
    };
    // Local optimization: refit on the consensus set while it improves.
    for _ in 0..4 {
        let (ia, ib): (Vec<Pixel>, Vec<Pixel>) = (0..n).filter(|&i| mask[i]).map(|i| (a[i], b[i])).unzip();
        let Some(f2) = fundamental_eight_point(&ia, &ib) else {
            break;
        };
        let (m2, c2, e2) = score(&f2, a, b, cfg.threshold);
        if c2 > count || (c2 == count && e2 < err) {
            f = f2;
            mask = m2;
            count = c2;
            err = e2;
        } else {
            break;
        }
    }
    Ok(RansacResult {
        inliers: mask,
        warning: false,
        fundamental: Some(f),
    })
}

/// Write binary PGM (P5, maxval 255).
pub fn write_pgm<W: Write>(mut w: W, img: &GrayImage) -> io::Result<()> {
    write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.to_u8())
}

/// Read binary PGM (P5, maxval 255). Comments in the header are skipped.
pub fn read_pgm<R: BufRead>(mut r: R) -> Result<GrayImage, ImageError> {
    let mut fields = Vec::new();
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    while fields.len() < 4 {
        if r.read(&mut byte)? == 0 {
            return Err(ImageError::Pgm("truncated header".into()));
        }
        let c = byte[0];
        if c == b'#' && token.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if !token.is_empty() {
                fields.push(String::from_utf8_lossy(&token).into_owned());
                token.clear();
            }
        } else {
            token.push(c);
        }
    }
    if fields[0] != "P5" {
        return Err(ImageError::Pgm(format!("magic {:?}, expected P5", fields[0])));
    }
    let parse = |s: &str, what: &str| -> Result<usize, ImageError> {
        s.parse().map_err(|_| ImageError::Pgm(format!("bad {what} {s:?}")))
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(ImageError::Pgm(format!("maxval {maxval}, expected 255")));
    }
    let mut bytes = vec![0u8; width * height];
    r.read_exact(&mut bytes)
        .map_err(|_| ImageError::Pgm("truncated pixel data".into()))?;
    GrayImage::from_u8(width, height, &bytes)
}
