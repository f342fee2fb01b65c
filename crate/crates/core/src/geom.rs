//! Coordinate systems, rigid transforms, normalization and cylindrical
//! voxelization of point clouds.
//!
//! Cylindrical coordinates are `(θ, ρ, z)` with `θ = atan2(y, x) ∈ [-π, π)`.
//! A rotation about the vertical axis is a translation along `θ`, which is
//! what makes the downstream convolutions rotation-equivariant.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthgait::Pose;

pub type Point = Point3<f64>;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point cloud has zero extent on every axis")]
    DegenerateCloud,
    #[error("non-finite coordinate in point cloud")]
    NonFinite,
    #[error("all {0} points fall outside the cylindrical grid bounds")]
    AllOutOfBounds(usize),
    #[error("invalid grid config: {0}")]
    InvalidGrid(String),
    #[error("point file length {0} is not a multiple of 12 bytes")]
    BadPointFile(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Camera viewpoint label. `A` is the single labeled training view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViewId {
    A,
    X1,
    X2,
    X3,
    X4,
}

impl ViewId {
    pub const ALL: [ViewId; 5] = [ViewId::A, ViewId::X1, ViewId::X2, ViewId::X3, ViewId::X4];
    pub const UNSEEN: [ViewId; 4] = [ViewId::X1, ViewId::X2, ViewId::X3, ViewId::X4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<ViewId> {
        match s.trim() {
            "A" | "a" => Some(ViewId::A),
            "X1" | "x1" => Some(ViewId::X1),
            "X2" | "x2" => Some(ViewId::X2),
            "X3" | "x3" => Some(ViewId::X3),
            "X4" | "x4" => Some(ViewId::X4),
            _ => None,
        }
    }
}

impl fmt::Display for ViewId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    Camera(ViewId),
    Canonical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, frame: Frame) -> Self {
        Self { points, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn check(&self) -> Result<(), GeomError> {
        if self.points.is_empty() {
            return Err(GeomError::EmptyCloud);
        }
        if self.points.iter().any(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(GeomError::NonFinite);
        }
        Ok(())
    }

    pub fn map_points(&self, f: impl FnMut(&Point) -> Point) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(f).collect(),
            frame: self.frame,
        }
    }

    /// Writes little-endian f32 `(x, y, z)` triples with no header.
    pub fn write_xyz<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(self.points.len() * 12);
        for p in &self.points {
            for c in p.coords.iter() {
                buf.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)
    }

    pub fn read_xyz<R: Read>(mut r: R, frame: Frame) -> Result<PointCloud, GeomError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() % 12 != 0 {
            return Err(GeomError::BadPointFile(buf.len()));
        }
        let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        let points = buf
            .chunks_exact(12)
            .map(|c| Point::new(f(&c[0..4]), f(&c[4..8]), f(&c[8..12])))
            .collect();
        Ok(PointCloud { points, frame })
    }

    pub fn save_xyz(&self, path: &Path) -> Result<(), GeomError> {
        let file = std::fs::File::create(path)?;
        self.write_xyz(std::io::BufWriter::new(file))?;
        Ok(())
    }

    pub fn load_xyz(path: &Path, frame: Frame) -> Result<PointCloud, GeomError> {
        let file = std::fs::File::open(path)?;
        Self::read_xyz(std::io::BufReader::new(file), frame)
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        w -= TAU;
    }
    if w < -PI {
        w = -PI;
    }
    w
}

/// Rotation about the vertical (z) axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewRotation {
    azimuth: f64,
}

impl ViewRotation {
    pub fn new(azimuth: f64) -> Self {
        Self {
            azimuth: wrap_angle(azimuth),
        }
    }

    /// Rotation by `s` θ-bins of a grid with `cube_len` bins.
    pub fn from_bins(s: i64, cube_len: usize) -> Self {
        Self::new(TAU * s as f64 / cube_len as f64)
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn inverse(&self) -> Self {
        Self::new(-self.azimuth)
    }

    pub fn apply(&self, p: &Point) -> Point {
        let (s, c) = self.azimuth.sin_cos();
        Point::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z)
    }
}

pub fn cart_to_cyl(p: &Point) -> (f64, f64, f64) {
    let rho = p.x.hypot(p.y);
    let theta = if rho == 0.0 { 0.0 } else { wrap_angle(p.y.atan2(p.x)) };
    (theta, rho, p.z)
}

pub fn cyl_to_cart(theta: f64, rho: f64, z: f64) -> Point {
    let (s, c) = theta.sin_cos();
    Point::new(rho * c, rho * s, z)
}

pub fn rotate_z(cloud: &PointCloud, r: ViewRotation) -> PointCloud {
    cloud.map_points(|p| r.apply(p))
}

/// Rotation about an arbitrary horizontal axis, used for small out-of-plane
/// augmentation tilts.
pub fn rotate_xy(cloud: &PointCloud, about_x: f64, about_y: f64) -> PointCloud {
    let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), about_y)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), about_x);
    cloud.map_points(|p| rot * p)
}

pub fn translate(cloud: &PointCloud, t: Vector3<f64>) -> PointCloud {
    cloud.map_points(|p| p + t)
}

/// Min-max normalization: `p ↦ (p - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTransform {
    pub center: [f64; 3],
    pub scale: f64,
}

impl NormalizationTransform {
    pub fn identity() -> Self {
        Self {
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Point) -> Point {
        let c = Point::from(self.center);
        Point::from((p - c) / self.scale)
    }

    pub fn invert(&self, p: &Point) -> Point {
        Point::from(p.coords * self.scale + Vector3::from(self.center))
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        cloud.map_points(|p| self.apply(p))
    }

    pub fn invert_cloud(&self, cloud: &PointCloud) -> PointCloud {
        cloud.map_points(|p| self.invert(p))
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        pose.map(|p| self.apply(p))
    }

    pub fn invert_pose(&self, pose: &Pose) -> Pose {
        pose.map(|p| self.invert(p))
    }
}

/// Centers the bounding box at the origin and divides by the largest
/// half-extent so that every point lands in `[-1, 1]³`.
pub fn minmax_normalize(cloud: &PointCloud) -> Result<(PointCloud, NormalizationTransform), GeomError> {
    cloud.check()?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cloud.points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let center = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
    let scale = (0..3).map(|a| 0.5 * (hi[a] - lo[a])).fold(0.0, f64::max);
    if scale <= 0.0 || !scale.is_finite() {
        return Err(GeomError::DegenerateCloud);
    }
    let t = NormalizationTransform { center, scale };
    Ok((t.apply_cloud(cloud), t))
}

/// Mirrors the body across the `x = 0` plane and swaps left/right labels.
pub fn mirror_chirality(cloud: &PointCloud, pose: &Pose) -> (PointCloud, Pose) {
    let flip = |p: &Point| Point::new(-p.x, p.y, p.z);
    (cloud.map_points(flip), pose.map(flip).swap_sides())
}

/// Cylindrical grid geometry. Normalized `z ∈ [-1, 1]` maps to the grid's
/// `[0, z_max)` range via `(z + 1)·z_max / 2`; `ρ` is used as-is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub cube_len: usize,
    pub rho_max: f64,
    pub z_max: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            cube_len: 32,
            rho_max: 1.0,
            z_max: 1.0,
        }
    }
}

/// Boundary tolerance used when excluding points from exact shift tests.
pub const BIN_BOUNDARY_EPS: f64 = 1e-6;

impl GridConfig {
    pub fn full_scale() -> Self {
        Self {
            cube_len: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self, theta_stride: usize) -> Result<(), GeomError> {
        if self.cube_len < 4 {
            return Err(GeomError::InvalidGrid(format!("cube_len {} < 4", self.cube_len)));
        }
        if theta_stride == 0 || self.cube_len % theta_stride != 0 {
            return Err(GeomError::InvalidGrid(format!(
                "cube_len {} not divisible by theta stride {theta_stride}",
                self.cube_len
            )));
        }
        if !(self.rho_max > 0.0 && self.z_max > 0.0) {
            return Err(GeomError::InvalidGrid("bounds must be positive".into()));
        }
        Ok(())
    }

    pub fn theta_width(&self) -> f64 {
        TAU / self.cube_len as f64
    }

    /// Lower edge of θ-bin `i` (`i == cube_len` gives the upper edge).
    pub fn theta_lower(&self, i: usize) -> f64 {
        -PI + i as f64 * self.theta_width()
    }

    pub fn rho_lower(&self, j: usize) -> f64 {
        j as f64 * self.rho_max / self.cube_len as f64
    }

    pub fn z_lower(&self, k: usize) -> f64 {
        k as f64 * self.z_max / self.cube_len as f64
    }

    pub fn theta_center(&self, i: usize) -> f64 {
        -PI + (i as f64 + 0.5) * self.theta_width()
    }

    pub fn rho_center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.rho_max / self.cube_len as f64
    }

    pub fn z_center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.z_max / self.cube_len as f64
    }

    /// Normalized Cartesian point → grid cylindrical coordinates `(θ, ρ, z_grid)`.
    pub fn to_grid_cyl(&self, p: &Point) -> (f64, f64, f64) {
        let (t, r, z) = cart_to_cyl(p);
        (t, r, (z + 1.0) * 0.5 * self.z_max)
    }

    pub fn from_grid_cyl(&self, theta: f64, rho: f64, zg: f64) -> Point {
        cyl_to_cart(theta, rho, 2.0 * zg / self.z_max - 1.0)
    }

    /// Bin index for `(θ, ρ, z_grid)`; `None` when out of bounds. Bins are
    /// left-inclusive; the estimate from `floor` is corrected against the
    /// exact edges so that this agrees with edge-by-edge comparison.
    pub fn bin_of(&self, theta: f64, rho: f64, zg: f64) -> Option<[usize; 3]> {
        let c = self.cube_len;
        let fix = |v: f64, est: f64, lower: &dyn Fn(usize) -> f64| -> Option<usize> {
            if !(v >= lower(0) && v < lower(c)) {
                return None;
            }
            let mut i = (est.floor().max(0.0) as usize).min(c - 1);
            while i > 0 && v < lower(i) {
                i -= 1;
            }
            while i + 1 < c && v >= lower(i + 1) {
                i += 1;
            }
            Some(i)
        };
        let ti = fix(theta, (theta + PI) / self.theta_width(), &|i| self.theta_lower(i))?;
        let ri = fix(rho, rho / self.rho_max * c as f64, &|j| self.rho_lower(j))?;
        let zi = fix(zg, zg / self.z_max * c as f64, &|k| self.z_lower(k))?;
        Some([ti, ri, zi])
    }

    /// Distance from `(θ, ρ, z_grid)` to the nearest bin edge, per axis.
    pub fn boundary_distance(&self, theta: f64, rho: f64, zg: f64) -> f64 {
        let c = self.cube_len as f64;
        let frac = |u: f64, w: f64| {
            let f = u - u.floor();
            f.min(1.0 - f) * w
        };
        let dt = frac((theta + PI) / self.theta_width(), self.theta_width());
        let dr = frac(rho / self.rho_max * c, self.rho_max / c);
        let dz = frac(zg / self.z_max * c, self.z_max / c);
        dt.min(dr).min(dz)
    }
}

/// Binary occupancy over `(θ-bin, ρ-bin, z-bin)`, row-major in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct CylindricalGrid {
    pub config: GridConfig,
    pub occupancy: Vec<u8>,
}

impl CylindricalGrid {
    pub fn empty(config: GridConfig) -> Self {
        let c = config.cube_len;
        Self {
            config,
            occupancy: vec![0; c * c * c],
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let c = self.config.cube_len;
        (i * c + j) * c + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.occupancy[self.index(i, j, k)]
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&v| v != 0).count()
    }
}

/// Output of voxelization: the grid plus the number of dropped points.
#[derive(Debug, Clone)]
pub struct Voxelized {
    pub grid: CylindricalGrid,
    pub dropped: usize,
}

/// Bins a normalized cloud into the cylindrical occupancy grid. Points
/// outside `[0, ρ0) × [0, z0)` are dropped and counted.
pub fn voxelize_cylindrical(cloud: &PointCloud, cfg: &GridConfig) -> Result<Voxelized, GeomError> {
    cloud.check()?;
    let mut grid = CylindricalGrid::empty(*cfg);
    let mut dropped = 0;
    for p in &cloud.points {
        let (t, r, z) = cfg.to_grid_cyl(p);
        match cfg.bin_of(t, r, z) {
            Some([i, j, k]) => {
                let idx = grid.index(i, j, k);
                grid.occupancy[idx] = 1;
            }
            None => dropped += 1,
        }
    }
    if dropped == cloud.len() {
        return Err(GeomError::AllOutOfBounds(dropped));
    }
    if dropped > 0 {
        log::debug!("voxelize: dropped {dropped} of {} out-of-bounds points", cloud.len());
    }
    Ok(Voxelized { grid, dropped })
}

/// `out(i, j, k) = in((i - s) mod C, j, k)`.
pub fn cyclic_shift_grid(grid: &CylindricalGrid, s: i64) -> CylindricalGrid {
    let c = grid.config.cube_len;
    let plane = c * c;
    let mut out = CylindricalGrid::empty(grid.config);
    for i in 0..c {
        let src = (i as i64 - s).rem_euclid(c as i64) as usize;
        out.occupancy[i * plane..(i + 1) * plane]
            .copy_from_slice(&grid.occupancy[src * plane..(src + 1) * plane]);
    }
    out
}

/// Removes points lying within `eps` of any bin edge of `cfg`.
pub fn drop_boundary_points(cloud: &PointCloud, cfg: &GridConfig, eps: f64) -> PointCloud {
    PointCloud {
        points: cloud
            .points
            .iter()
            .filter(|p| {
                let (t, r, z) = cfg.to_grid_cyl(p);
                cfg.boundary_distance(t, r, z) > eps
            })
            .copied()
            .collect(),
        frame: cloud.frame,
    }
}
