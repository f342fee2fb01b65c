//! Synthetic lower-limb gait data: parametric capsule bodies, depth-buffer
//! occlusion, and the labeled/unlabeled dataset layout used for training.
//!
//! Bodies live in a canonical frame with `+z` up, `+x` toward the body's
//! left and `-y` forward. A camera at azimuth `α` sits in direction
//! `(-sin α, -cos α, 0)`; its camera frame is reached by rotating the scene
//! by `+α` about `z`, which puts every camera on the `-y` axis.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{rotate_z, Frame, GeomError, Point, PointCloud, ViewId, ViewRotation};
use crate::par;

pub const NUM_JOINTS: usize = 8;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no point is visible from view {0}")]
    NothingVisible(ViewId),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Joint categories; left and right are pooled per category in metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JointCategory {
    Hip,
    Knee,
    Ankle,
    Toe,
}

impl JointCategory {
    pub const ALL: [JointCategory; 4] = [Self::Hip, Self::Knee, Self::Ankle, Self::Toe];

    pub fn of_joint(j: usize) -> Self {
        Self::ALL[j % 4]
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Hip => "hip",
            Self::Knee => "knee",
            Self::Ankle => "ankle",
            Self::Toe => "toe",
        }
    }
}

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "hip_l", "knee_l", "ankle_l", "toe_l", "hip_r", "knee_r", "ankle_r", "toe_r",
];

/// Eight lower-limb keypoints, `[hip, knee, ankle, toe]` left then right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub joints: [Point; NUM_JOINTS],
}

impl Pose {
    pub fn zeros() -> Self {
        Self {
            joints: [Point::origin(); NUM_JOINTS],
        }
    }

    pub fn map(&self, f: impl Fn(&Point) -> Point) -> Pose {
        Pose {
            joints: self.joints.map(|p| f(&p)),
        }
    }

    pub fn swap_sides(&self) -> Pose {
        let mut out = *self;
        for j in 0..4 {
            out.joints.swap(j, j + 4);
        }
        out
    }

    pub fn rotate(&self, r: ViewRotation) -> Pose {
        self.map(|p| r.apply(p))
    }

    /// `(hip→knee, knee→ankle, ankle→toe)` per side.
    pub fn bone_lengths(&self) -> [[f64; 3]; 2] {
        let j = &self.joints;
        let side = |o: usize| {
            [
                (j[o + 1] - j[o]).norm(),
                (j[o + 2] - j[o + 1]).norm(),
                (j[o + 3] - j[o + 2]).norm(),
            ]
        };
        [side(0), side(4)]
    }

    /// Shifts every joint by `delta` along its distal bone (the toe along the
    /// foot). Models the disagreement between two keypoint conventions.
    pub fn convention_offset(&self, delta: f64) -> Pose {
        let j = &self.joints;
        let mut out = *self;
        for o in [0, 4] {
            let dir = |a: usize, b: usize| (j[o + b] - j[o + a]).normalize();
            out.joints[o] += dir(0, 1) * delta;
            out.joints[o + 1] += dir(1, 2) * delta;
            out.joints[o + 2] += dir(2, 3) * delta;
            out.joints[o + 3] += dir(2, 3) * delta;
        }
        out
    }

    pub fn to_f32_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(NUM_JOINTS * 12);
        for p in &self.joints {
            for c in p.coords.iter() {
                buf.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn from_f32_bytes(buf: &[u8]) -> Option<Pose> {
        if buf.len() != NUM_JOINTS * 12 {
            return None;
        }
        let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        let mut pose = Pose::zeros();
        for (j, c) in buf.chunks_exact(12).enumerate() {
            pose.joints[j] = Point::new(f(&c[0..4]), f(&c[4..8]), f(&c[8..12]));
        }
        Some(pose)
    }

    pub fn to_array(&self) -> [[f64; 3]; NUM_JOINTS] {
        self.joints.map(|p| [p.x, p.y, p.z])
    }

    pub fn from_array(a: &[[f64; 3]; NUM_JOINTS]) -> Pose {
        Pose {
            joints: a.map(|p| Point::new(p[0], p[1], p[2])),
        }
    }
}

/// Segment dimensions of a capsule body, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimbSkeleton {
    pub thigh: f64,
    pub shank: f64,
    pub foot: f64,
    pub thigh_radius: f64,
    pub shank_radius: f64,
    pub foot_radius: f64,
    pub pelvis_width: f64,
}

impl Default for LimbSkeleton {
    fn default() -> Self {
        Self {
            thigh: 0.43,
            shank: 0.41,
            foot: 0.20,
            thigh_radius: 0.075,
            shank_radius: 0.050,
            foot_radius: 0.035,
            pelvis_width: 0.20,
        }
    }
}

impl LimbSkeleton {
    /// Draws every dimension uniformly from a fixed adult range.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            thigh: rng.gen_range(0.38..0.48),
            shank: rng.gen_range(0.36..0.45),
            foot: rng.gen_range(0.17..0.23),
            thigh_radius: rng.gen_range(0.065..0.09),
            shank_radius: rng.gen_range(0.042..0.058),
            foot_radius: rng.gen_range(0.03..0.04),
            pelvis_width: rng.gen_range(0.17..0.24),
        }
    }

    pub fn is_valid(&self) -> bool {
        [
            self.thigh,
            self.shank,
            self.foot,
            self.thigh_radius,
            self.shank_radius,
            self.foot_radius,
            self.pelvis_width,
        ]
        .iter()
        .all(|v| v.is_finite() && *v > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GaitCondition {
    Normal,
    Supination,
    Pronation,
    ToeIn,
    ToeOut,
}

impl GaitCondition {
    pub const ALL: [GaitCondition; 5] = [
        Self::Normal,
        Self::Supination,
        Self::Pronation,
        Self::ToeIn,
        Self::ToeOut,
    ];

    /// `(foot yaw, foot roll)` in radians; positive yaw points the toe outward.
    fn foot_offsets(self) -> (f64, f64) {
        let yaw = 15f64.to_radians();
        let roll = 12f64.to_radians();
        match self {
            Self::Normal => (0.0, 0.0),
            Self::Supination => (0.0, roll),
            Self::Pronation => (0.0, -roll),
            Self::ToeIn => (-yaw, 0.0),
            Self::ToeOut => (yaw, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaitParams {
    pub condition: GaitCondition,
    /// Cycle phase in `[0, 1)`.
    pub phase: f64,
    pub hip_amp: f64,
    pub knee_amp: f64,
    pub ankle_amp: f64,
}

impl GaitParams {
    pub fn neutral() -> Self {
        Self {
            condition: GaitCondition::Normal,
            phase: 0.0,
            hip_amp: 0.0,
            knee_amp: 0.0,
            ankle_amp: 0.0,
        }
    }

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            condition: *GaitCondition::ALL.choose(rng).expect("non-empty"),
            phase: rng.gen_range(0.0..1.0),
            hip_amp: rng.gen_range(0.25..0.5),
            knee_amp: rng.gen_range(0.5..1.0),
            ankle_amp: rng.gen_range(0.1..0.3),
        }
    }

    pub fn is_valid(&self) -> bool {
        let ok = |a: f64| (0.0..=PI / 2.0).contains(&a);
        (0.0..1.0).contains(&self.phase) && ok(self.hip_amp) && ok(self.knee_amp) && ok(self.ankle_amp)
    }
}

fn rot_x(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), a)
}

fn rot_y(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), a)
}

fn rot_z(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), a)
}

/// Forward kinematics from single-harmonic joint-angle trajectories. The
/// right leg runs half a cycle behind the left. The seed only draws a small
/// hip abduction proportional to the hip amplitude.
pub fn sample_gait_pose(skel: &LimbSkeleton, gp: &GaitParams, rng_seed: u64) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (yaw, roll) = gp.condition.foot_offsets();
    let height = skel.thigh + skel.shank + skel.foot_radius;
    let mut pose = Pose::zeros();
    for (o, side, shift) in [(0usize, 1.0f64, 0.0f64), (4, -1.0, 0.5)] {
        let psi = TAU * (gp.phase + shift);
        let hip_flex = gp.hip_amp * psi.sin();
        let knee_flex = gp.knee_amp * 0.5 * (1.0 - psi.cos());
        let ankle_flex = gp.ankle_amp * psi.sin();
        let abduction = gp.hip_amp * 0.1 * rng.gen_range(-1.0..1.0);
        let abd = rot_y(-side * abduction);
        let down = Vector3::new(0.0, 0.0, -1.0);
        let thigh_dir = abd * rot_x(-hip_flex) * down;
        let shank_pitch = hip_flex - knee_flex;
        let shank_dir = abd * rot_x(-shank_pitch) * down;
        let foot_dir = abd
            * rot_y(side * roll)
            * rot_z(side * yaw)
            * rot_x(-(shank_pitch + ankle_flex))
            * Vector3::new(0.0, -1.0, 0.0);
        let hip = Point::new(side * 0.5 * skel.pelvis_width, 0.0, height);
        let knee = hip + thigh_dir * skel.thigh;
        let ankle = knee + shank_dir * skel.shank;
        let toe = ankle + foot_dir * skel.foot;
        pose.joints[o..o + 4].copy_from_slice(&[hip, knee, ankle, toe]);
    }
    pose
}

/// A capsule: all points within `radius` of the segment `a`–`b`.
#[derive(Debug, Clone, Copy)]
pub struct Capsule {
    pub a: Point,
    pub b: Point,
    pub radius: f64,
}

impl Capsule {
    pub fn axis_distance(&self, p: &Point) -> f64 {
        segment_distance(p, &self.a, &self.b)
    }

    pub fn area(&self) -> f64 {
        let len = (self.b - self.a).norm();
        TAU * self.radius * len + 2.0 * TAU * self.radius * self.radius
    }
}

pub fn segment_distance(p: &Point, a: &Point, b: &Point) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm()
}

/// Capsules of the pelvis bar, both thighs, shanks and feet.
pub fn body_capsules(pose: &Pose, skel: &LimbSkeleton) -> Vec<Capsule> {
    let j = &pose.joints;
    let mut caps = vec![Capsule {
        a: j[0],
        b: j[4],
        radius: skel.thigh_radius,
    }];
    for o in [0, 4] {
        caps.push(Capsule { a: j[o], b: j[o + 1], radius: skel.thigh_radius });
        caps.push(Capsule { a: j[o + 1], b: j[o + 2], radius: skel.shank_radius });
        caps.push(Capsule { a: j[o + 2], b: j[o + 3], radius: skel.foot_radius });
    }
    caps
}

/// Surface samples with outward unit normals.
#[derive(Debug, Clone)]
pub struct Surface {
    pub points: Vec<Point>,
    pub normals: Vec<Vector3<f64>>,
}

fn orthonormal_basis(e: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if e.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = e.cross(&helper).normalize();
    let v = e.cross(&u);
    (u, v)
}

fn sample_capsule<R: Rng>(cap: &Capsule, density: f64, rng: &mut R, out: &mut Surface) {
    let axis = cap.b - cap.a;
    let len = axis.norm();
    let e = if len > 0.0 { axis / len } else { Vector3::z() };
    let (u, v) = orthonormal_basis(&e);
    let r = cap.radius;
    let side_area = TAU * r * len;
    let total = cap.area();
    let n = (density * total).round() as usize;
    for _ in 0..n {
        let (p, nrm) = if rng.gen::<f64>() * total < side_area {
            let t = rng.gen_range(0.0..len.max(f64::MIN_POSITIVE));
            let phi = rng.gen_range(0.0..TAU);
            let nrm = u * phi.cos() + v * phi.sin();
            (cap.a + e * t + nrm * r, nrm)
        } else {
            // uniform direction on the sphere; its sign along the axis picks the cap
            let zc: f64 = rng.gen_range(-1.0..1.0);
            let phi = rng.gen_range(0.0..TAU);
            let s = (1.0 - zc * zc).sqrt();
            let nrm = e * zc + u * (s * phi.cos()) + v * (s * phi.sin());
            let base = if zc >= 0.0 { cap.b } else { cap.a };
            (base + nrm * r, nrm)
        };
        out.points.push(p);
        out.normals.push(nrm);
    }
}

/// Samples the union surface of the body capsules with `density` points/m²
/// per capsule; samples buried inside another capsule are discarded.
pub fn generate_surface(pose: &Pose, skel: &LimbSkeleton, density: f64, rng_seed: u64) -> Surface {
    let caps = body_capsules(pose, skel);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Surface {
        points: Vec::new(),
        normals: Vec::new(),
    };
    for (ci, cap) in caps.iter().enumerate() {
        let mut local = Surface {
            points: Vec::new(),
            normals: Vec::new(),
        };
        sample_capsule(cap, density, &mut rng, &mut local);
        for (p, n) in local.points.into_iter().zip(local.normals) {
            let buried = caps
                .iter()
                .enumerate()
                .any(|(k, c)| k != ci && c.axis_distance(&p) < c.radius - 1e-9);
            if !buried {
                out.points.push(p);
                out.normals.push(n);
            }
        }
    }
    out
}

pub fn generate_surface_cloud(pose: &Pose, skel: &LimbSkeleton, density: f64, rng_seed: u64) -> PointCloud {
    PointCloud::new(generate_surface(pose, skel, density, rng_seed).points, Frame::Canonical)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraViewpoint {
    pub view_id: ViewId,
    pub azimuth: f64,
    pub elevation: f64,
    pub standoff: f64,
}

impl CameraViewpoint {
    pub fn nominal_azimuth(view: ViewId) -> f64 {
        (72.0 * view.index() as f64).to_radians()
    }

    pub fn nominal(view: ViewId) -> Self {
        Self {
            view_id: view,
            azimuth: Self::nominal_azimuth(view),
            elevation: 0.0,
            standoff: 3.0,
        }
    }

    /// Nominal azimuth with elevation drawn from `[-5°, 5°]`.
    pub fn jittered<R: Rng>(view: ViewId, rng: &mut R) -> Self {
        let lim = 5f64.to_radians();
        Self {
            elevation: rng.gen_range(-lim..lim),
            ..Self::nominal(view)
        }
    }

    /// Unit vector from the body toward the camera.
    pub fn toward_camera(&self) -> Vector3<f64> {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        Vector3::new(-sa * ce, -ca * ce, se)
    }

    /// Rotation from the canonical frame into this camera's frame.
    pub fn camera_rotation(&self) -> ViewRotation {
        ViewRotation::new(self.azimuth)
    }
}

/// Pixel count across the body extent for the depth buffer.
pub const DEFAULT_DEPTH_PIXELS: usize = 128;

/// Depth-buffer visibility: orthographic projection along the view ray onto
/// square pixels of size `extent / pixels`, keeping only the nearest point per
/// pixel. Returns the indices of surviving points in input order.
pub fn visible_indices(cloud: &PointCloud, view: &CameraViewpoint, pixels: usize) -> Vec<usize> {
    if cloud.points.len() <= 1 {
        return (0..cloud.points.len()).collect();
    }
    let n = cloud.points.len() as f64;
    let centroid = cloud.points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n;
    let radius = cloud
        .points
        .iter()
        .map(|p| (p.coords - centroid).norm())
        .fold(0.0, f64::max);
    let pitch = (2.0 * radius / pixels.max(1) as f64).max(1e-12);
    let c = view.toward_camera();
    let u = Vector3::z().cross(&c);
    let u = if u.norm() > 1e-9 { u.normalize() } else { Vector3::x() };
    let v = c.cross(&u);
    let mut best: HashMap<(i64, i64), (f64, usize)> = HashMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let d = p.coords - centroid;
        let key = ((d.dot(&u) / pitch).floor() as i64, (d.dot(&v) / pitch).floor() as i64);
        let depth = -d.dot(&c);
        best.entry(key)
            .and_modify(|e| {
                if depth < e.0 {
                    *e = (depth, i);
                }
            })
            .or_insert((depth, i));
    }
    let mut idx: Vec<usize> = best.into_values().map(|(_, i)| i).collect();
    idx.sort_unstable();
    idx
}

pub fn simulate_occlusion(cloud: &PointCloud, view: &CameraViewpoint) -> Result<PointCloud, SynthError> {
    simulate_occlusion_with(cloud, view, DEFAULT_DEPTH_PIXELS)
}

pub fn simulate_occlusion_with(
    cloud: &PointCloud,
    view: &CameraViewpoint,
    pixels: usize,
) -> Result<PointCloud, SynthError> {
    let idx = visible_indices(cloud, view, pixels);
    if idx.is_empty() {
        return Err(SynthError::NothingVisible(view.view_id));
    }
    Ok(PointCloud::new(idx.into_iter().map(|i| cloud.points[i]).collect(), cloud.frame))
}

/// I.i.d. zero-mean Gaussian perturbation of every coordinate.
pub fn add_noise(cloud: &PointCloud, sigma: f64, rng_seed: u64) -> PointCloud {
    if sigma <= 0.0 {
        return cloud.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    cloud.map_points(|p| {
        Point::new(
            p.x + normal.sample(&mut rng),
            p.y + normal.sample(&mut rng),
            p.z + normal.sample(&mut rng),
        )
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    LabeledRealLike,
    UnlabeledSynthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub cloud: PointCloud,
    /// Training label; present only for labeled samples.
    pub pose: Option<Pose>,
    pub view: CameraViewpoint,
    pub domain: Domain,
    pub canonical_group_id: Option<usize>,
    /// Generator identity (skeleton draw) for labeled samples.
    pub identity: Option<usize>,
    pub split: Split,
    /// Bookkeeping only: the underlying body pose in the sample's frame,
    /// without any label-convention offset. Never used as a training target
    /// for unlabeled samples.
    pub generator_pose: Pose,
}

/// Splitmix-style seed derivation so every sample owns an independent stream.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Occlusion and sampling parameters shared by every generated cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceConfig {
    pub density: f64,
    pub depth_pixels: usize,
    /// Visible clouds larger than this are uniformly subsampled.
    pub max_points: usize,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        Self {
            density: 50_000.0,
            depth_pixels: DEFAULT_DEPTH_PIXELS,
            max_points: 4096,
        }
    }
}

fn subsample(cloud: PointCloud, max_points: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    if max_points == 0 || cloud.len() <= max_points {
        return cloud;
    }
    let mut idx = rand::seq::index::sample(rng, cloud.len(), max_points).into_vec();
    idx.sort_unstable();
    PointCloud::new(idx.into_iter().map(|i| cloud.points[i]).collect(), cloud.frame)
}

/// One body seen from several views, every variant kept in the canonical
/// frame. Elevation jitter is drawn per view from the seed.
pub fn make_multiview_group(
    skel: &LimbSkeleton,
    gp: &GaitParams,
    views: &[CameraViewpoint],
    surface: &SurfaceConfig,
    group_id: usize,
    rng_seed: u64,
) -> Result<Vec<Sample>, SynthError> {
    if views.len() < 2 {
        return Err(SynthError::InvalidSpec("a multi-view group needs at least 2 views".into()));
    }
    let pose = sample_gait_pose(skel, gp, derive_seed(rng_seed, 1, 0));
    let full = generate_surface_cloud(&pose, skel, surface.density, derive_seed(rng_seed, 2, 0));
    let mut out = Vec::with_capacity(views.len());
    for (i, view) in views.iter().enumerate() {
        let visible = simulate_occlusion_with(&full, view, surface.depth_pixels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, 3, i as u64));
        out.push(Sample {
            id: 0,
            cloud: subsample(visible, surface.max_points, &mut rng),
            pose: None,
            view: *view,
            domain: Domain::UnlabeledSynthetic,
            canonical_group_id: Some(group_id),
            identity: None,
            split: Split::Train,
            generator_pose: pose,
        });
    }
    Ok(out)
}

/// Explicit real-vs-synthetic heterogeneity applied to labeled samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftConfig {
    /// Outward surface displacement (clothing proxy), meters.
    pub radial_bias: f64,
    /// Sensor noise standard deviation, meters.
    pub sensor_noise: f64,
    /// Label-convention shift of each joint along its bone, meters.
    pub convention_offset: f64,
}

impl Default for DomainShiftConfig {
    fn default() -> Self {
        Self {
            radial_bias: 0.005,
            sensor_noise: 0.003,
            convention_offset: 0.010,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Labeled training samples per view.
    pub real_train: Vec<(ViewId, usize)>,
    /// Labeled held-out samples per view.
    pub real_test: Vec<(ViewId, usize)>,
    pub groups_train: usize,
    pub groups_test: usize,
    pub group_views: Vec<ViewId>,
    pub identities: usize,
    pub surface: SurfaceConfig,
    pub shift: DomainShiftConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            real_train: vec![(ViewId::A, 100)],
            real_test: ViewId::ALL.iter().map(|&v| (v, 20)).collect(),
            groups_train: 100,
            groups_test: 20,
            group_views: ViewId::ALL.to_vec(),
            identities: 8,
            surface: SurfaceConfig::default(),
            shift: DomainShiftConfig::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.identities == 0 {
            return Err(SynthError::InvalidSpec("identities must be positive".into()));
        }
        if (self.groups_train > 0 || self.groups_test > 0) && self.group_views.len() < 2 {
            return Err(SynthError::InvalidSpec("groups need at least 2 views".into()));
        }
        if !(self.surface.density > 0.0) || self.surface.depth_pixels == 0 {
            return Err(SynthError::InvalidSpec("density and depth_pixels must be positive".into()));
        }
        let s = &self.shift;
        if [s.radial_bias, s.sensor_noise, s.convention_offset].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SynthError::InvalidSpec("domain shift magnitudes must be non-negative".into()));
        }
        Ok(())
    }

    pub fn real_count(&self) -> usize {
        self.real_train.iter().chain(&self.real_test).map(|(_, n)| n).sum()
    }

    pub fn total_samples(&self) -> usize {
        self.real_count() + (self.groups_train + self.groups_test) * self.group_views.len()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub seed: u64,
    pub spec: DatasetSpec,
    pub identities: Vec<LimbSkeleton>,
    pub samples: Vec<Sample>,
}

/// One labeled "real-like" sample: clothing bias, occlusion, sensor noise,
/// rotation into the camera frame, and convention-shifted labels.
fn make_real_sample(
    skel: &LimbSkeleton,
    view_id: ViewId,
    spec: &DatasetSpec,
    seed: u64,
) -> Result<(Sample, Pose), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gp = GaitParams::sample(&mut rng);
    let view = CameraViewpoint::jittered(view_id, &mut rng);
    let pose = sample_gait_pose(skel, &gp, derive_seed(seed, 1, 0));
    let surf = generate_surface(&pose, skel, spec.surface.density, derive_seed(seed, 2, 0));
    let biased: Vec<Point> = surf
        .points
        .iter()
        .zip(&surf.normals)
        .map(|(p, n)| p + n * spec.shift.radial_bias)
        .collect();
    let full = PointCloud::new(biased, Frame::Canonical);
    let visible = simulate_occlusion_with(&full, &view, spec.surface.depth_pixels)?;
    let visible = subsample(visible, spec.surface.max_points, &mut rng);
    let noisy = add_noise(&visible, spec.shift.sensor_noise, derive_seed(seed, 4, 0));
    let rot = view.camera_rotation();
    let mut cloud = rotate_z(&noisy, rot);
    cloud.frame = Frame::Camera(view_id);
    let label = pose.convention_offset(spec.shift.convention_offset).rotate(rot);
    let sample = Sample {
        id: 0,
        cloud,
        pose: Some(label),
        view,
        domain: Domain::LabeledRealLike,
        canonical_group_id: None,
        identity: None,
        split: Split::Train,
        generator_pose: pose.rotate(rot),
    };
    Ok((sample, pose))
}

enum Job {
    Real { view: ViewId, split: Split, index: usize },
    Group { group: usize, split: Split },
}

/// Generates the full dataset in memory. Each sample's randomness derives
/// from `(seed, job index)`, so generation order and thread count do not
/// affect the result.
pub fn build_dataset_in_memory(spec: &DatasetSpec, seed: u64) -> Result<Dataset, SynthError> {
    spec.validate()?;
    let mut id_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 100, 0));
    let identities: Vec<LimbSkeleton> = (0..spec.identities).map(|_| LimbSkeleton::sample(&mut id_rng)).collect();

    let mut jobs = Vec::new();
    let mut counter = 0;
    for (split, list) in [(Split::Train, &spec.real_train), (Split::Test, &spec.real_test)] {
        for &(view, n) in list {
            for _ in 0..n {
                jobs.push(Job::Real { view, split, index: counter });
                counter += 1;
            }
        }
    }
    for g in 0..spec.groups_train + spec.groups_test {
        let split = if g < spec.groups_train { Split::Train } else { Split::Test };
        jobs.push(Job::Group { group: g, split });
    }

    let results = par::map_indexed(jobs.len(), |j| -> Result<Vec<Sample>, SynthError> {
        let job_seed = derive_seed(seed, 200, j as u64);
        match jobs[j] {
            Job::Real { view, split, index } => {
                let identity = index % spec.identities;
                let (mut s, _) = make_real_sample(&identities[identity], view, spec, job_seed)?;
                s.identity = Some(identity);
                s.split = split;
                Ok(vec![s])
            }
            Job::Group { group, split } => {
                let mut rng = ChaCha8Rng::seed_from_u64(job_seed);
                let skel = LimbSkeleton::sample(&mut rng);
                let gp = GaitParams::sample(&mut rng);
                let views: Vec<_> = spec
                    .group_views
                    .iter()
                    .map(|&v| CameraViewpoint::jittered(v, &mut rng))
                    .collect();
                let mut members = make_multiview_group(&skel, &gp, &views, &spec.surface, group, derive_seed(job_seed, 5, 0))?;
                for m in &mut members {
                    m.split = split;
                }
                Ok(members)
            }
        }
    });
    let mut samples = Vec::with_capacity(spec.total_samples());
    for r in results {
        samples.extend(r?);
    }
    for (i, s) in samples.iter_mut().enumerate() {
        s.id = i;
    }
    Ok(Dataset {
        seed,
        spec: spec.clone(),
        identities,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: usize,
    pub domain: Domain,
    pub view_id: ViewId,
    pub azimuth: f64,
    pub elevation: f64,
    pub canonical_group_id: Option<usize>,
    pub identity: Option<usize>,
    pub split: Split,
    pub cloud: String,
    pub pose: Option<String>,
    pub generator_pose: [[f64; 3]; NUM_JOINTS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub spec: DatasetSpec,
    pub identities: Vec<LimbSkeleton>,
    pub samples: Vec<ManifestRecord>,
}

pub const MANIFEST_FORMAT: &str = "cylpose-dataset-1";

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<Manifest, SynthError> {
        fs::create_dir_all(dir.join("clouds"))?;
        fs::create_dir_all(dir.join("poses"))?;
        let mut records = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let cloud_rel = format!("clouds/{:06}.xyz.bin", s.id);
            s.cloud.save_xyz(&dir.join(&cloud_rel))?;
            let pose_rel = match &s.pose {
                Some(p) => {
                    let rel = format!("poses/{:06}.pose.bin", s.id);
                    fs::write(dir.join(&rel), p.to_f32_bytes())?;
                    Some(rel)
                }
                None => None,
            };
            records.push(ManifestRecord {
                id: s.id,
                domain: s.domain,
                view_id: s.view.view_id,
                azimuth: s.view.azimuth,
                elevation: s.view.elevation,
                canonical_group_id: s.canonical_group_id,
                identity: s.identity,
                split: s.split,
                cloud: cloud_rel,
                pose: pose_rel,
                generator_pose: s.generator_pose.to_array(),
            });
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            seed: self.seed,
            spec: self.spec.clone(),
            identities: self.identities.clone(),
            samples: records,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Dataset, SynthError> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(SynthError::Manifest(format!("unknown format {:?}", manifest.format)));
        }
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for r in &manifest.samples {
            let frame = match r.domain {
                Domain::LabeledRealLike => Frame::Camera(r.view_id),
                Domain::UnlabeledSynthetic => Frame::Canonical,
            };
            let cloud = PointCloud::load_xyz(&dir.join(&r.cloud), frame)?;
            let pose = match &r.pose {
                Some(rel) => Some(
                    Pose::from_f32_bytes(&fs::read(dir.join(rel))?)
                        .ok_or_else(|| SynthError::Manifest(format!("bad pose file {rel}")))?,
                ),
                None => None,
            };
            samples.push(Sample {
                id: r.id,
                cloud,
                pose,
                view: CameraViewpoint {
                    view_id: r.view_id,
                    azimuth: r.azimuth,
                    elevation: r.elevation,
                    standoff: 3.0,
                },
                domain: r.domain,
                canonical_group_id: r.canonical_group_id,
                identity: r.identity,
                split: r.split,
                generator_pose: Pose::from_array(&r.generator_pose),
            });
        }
        Ok(Dataset {
            seed: manifest.seed,
            spec: manifest.spec,
            identities: manifest.identities,
            samples,
        })
    }

    /// Canonical groups keyed by id, members ordered as generated.
    pub fn groups(&self, split: Split) -> Vec<Vec<&Sample>> {
        let mut map: std::collections::BTreeMap<usize, Vec<&Sample>> = Default::default();
        for s in &self.samples {
            if let (Domain::UnlabeledSynthetic, Some(g)) = (s.domain, s.canonical_group_id) {
                if s.split == split {
                    map.entry(g).or_default().push(s);
                }
            }
        }
        map.into_values().collect()
    }

    pub fn labeled(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples
            .iter()
            .filter(move |s| s.domain == Domain::LabeledRealLike && s.split == split)
    }
}

/// Builds the dataset and writes it under `dir`.
pub fn build_dataset(spec: &DatasetSpec, seed: u64, dir: &Path) -> Result<Manifest, SynthError> {
    let ds = build_dataset_in_memory(spec, seed)?;
    ds.save(dir)
}

pub fn dataset_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for sub in ["clouds", "poses"] {
        let d = dir.join(sub);
        if d.is_dir() {
            for e in fs::read_dir(d)? {
                out.push(e?.path());
            }
        }
    }
    out.push(dir.join("manifest.json"));
    out.sort();
    Ok(out)
}
