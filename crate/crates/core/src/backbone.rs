//! Cylindrical occupancy volume → two planar heatmap stacks → keypoints.
//!
//! Planes are laid out `[N, C, θ, ρ|z]`: the θ axis is the height axis of
//! every planar convolution and is padded periodically.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    AnisoPad, AnisoSpec, AxisPad, BnBatchStats, BnMode, Conv2dSpec, DiffError, Graph, PadMode, PadSpec, ParamId,
    ParamSet, Scalar, Tensor, Var,
};
use crate::geom::{voxelize_cylindrical, CylindricalGrid, GeomError, GridConfig, NormalizationTransform, Point, PointCloud};
use crate::par;
use crate::synthgait::{Pose, NUM_JOINTS};

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error("grid config {got:?} does not match backbone grid {want:?}")]
    GridMismatch { got: GridConfig, want: GridConfig },
    #[error("θ distribution is degenerate (sin and cos sums vanish)")]
    Degenerate,
    #[error("joint {0} lies outside the grid")]
    JointOutOfBounds(usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// One residual stage of the heatmap head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub grid: GridConfig,
    pub joints: usize,
    pub aniso_kernel: usize,
    pub aniso_hidden: usize,
    pub plane_channels: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    /// One stride-2 transposed convolution per entry.
    pub up_channels: Vec<usize>,
    /// Padding along θ in the planar head; `Zero` only for ablations.
    pub theta_padding: PadMode,
    /// Inverse temperature applied to heatmap scores before decoding.
    pub decode_beta: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            joints: NUM_JOINTS,
            aniso_kernel: 5,
            aniso_hidden: 8,
            plane_channels: 3,
            stem_channels: 16,
            stages: vec![StageSpec { channels: 32, stride: 2 }],
            up_channels: vec![16, 8],
            theta_padding: PadMode::Periodic,
            decode_beta: 30.0,
        }
    }
}

impl BackboneConfig {
    pub fn full_scale() -> Self {
        Self {
            grid: GridConfig::full_scale(),
            aniso_hidden: 16,
            stem_channels: 64,
            stages: vec![
                StageSpec { channels: 64, stride: 1 },
                StageSpec { channels: 128, stride: 2 },
                StageSpec { channels: 256, stride: 1 },
            ],
            up_channels: vec![128, 64],
            ..Self::default()
        }
    }

    pub fn with_grid(mut self, grid: GridConfig) -> Self {
        self.grid = grid;
        self
    }

    /// Total downsampling along θ before upsampling.
    pub fn theta_stride(&self) -> usize {
        2 * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let stride = self.theta_stride();
        self.grid
            .validate(stride)
            .map_err(|e| BackboneError::Config(e.to_string()))?;
        if self.stages.iter().any(|s| s.stride == 0 || s.channels == 0) {
            return Err(BackboneError::Config("stage strides and channels must be positive".into()));
        }
        if stride != 1 << self.up_channels.len() {
            return Err(BackboneError::Config(format!(
                "downsampling {stride} is not undone by {} stride-2 upsamplings",
                self.up_channels.len()
            )));
        }
        if self.aniso_kernel % 2 == 0 || self.aniso_kernel > self.grid.cube_len {
            return Err(BackboneError::Config("aniso kernel must be odd and at most cube_len".into()));
        }
        if self.joints == 0 || self.plane_channels == 0 || self.aniso_hidden == 0 || self.stem_channels == 0 {
            return Err(BackboneError::Config("channel counts must be positive".into()));
        }
        if !(self.decode_beta > 0.0 && self.decode_beta.is_finite()) {
            return Err(BackboneError::Config("decode_beta must be positive".into()));
        }
        Ok(())
    }
}

/// Heatmaps for one sample, each `[J, C, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapPair {
    pub hm_theta_r: Tensor<f32>,
    pub hm_theta_z: Tensor<f32>,
}

impl HeatmapPair {
    pub fn is_finite(&self) -> bool {
        self.hm_theta_r.all_finite() && self.hm_theta_z.all_finite()
    }

    /// Cyclic shift along θ by `s` bins.
    pub fn roll_theta(&self, s: i64) -> HeatmapPair {
        HeatmapPair {
            hm_theta_r: self.hm_theta_r.roll(1, s),
            hm_theta_z: self.hm_theta_z.roll(1, s),
        }
    }

    pub fn max_abs_diff(&self, other: &HeatmapPair) -> f64 {
        self.hm_theta_r
            .max_abs_diff(&other.hm_theta_r)
            .max(self.hm_theta_z.max_abs_diff(&other.hm_theta_z))
    }
}

/// Per-joint decoded cylindrical coordinates. `z` is in grid units `[0, z0)`;
/// `pose` holds the Cartesian points in the normalized frame.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointEstimate {
    pub theta: Vec<f64>,
    pub rho: Vec<f64>,
    pub z: Vec<f64>,
    pub pose: Pose,
}

impl KeypointEstimate {
    /// Keypoints mapped back into the original (metric) frame.
    pub fn to_metric(&self, t: &NormalizationTransform) -> Pose {
        t.invert_pose(&self.pose)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    ThetaR,
    ThetaZ,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::ThetaR, Branch::ThetaZ];

    fn prefix(self) -> &'static str {
        match self {
            Branch::ThetaR => "tr",
            Branch::ThetaZ => "tz",
        }
    }

    /// Spatial axis of the `[θ, ρ, z]` volume collapsed by this branch.
    fn collapsed_axis(self) -> usize {
        match self {
            Branch::ThetaR => 2,
            Branch::ThetaZ => 1,
        }
    }
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let d = Normal::new(0.0, std).expect("std is positive");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

struct Init<'a> {
    p: ParamSet<f64>,
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let t = normal_tensor(shape, (2.0 / fan_in as f64).sqrt(), self.rng);
        self.p.add(name, t, true).expect("unique layer names");
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.p.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0), true).expect("unique");
        self.p.add(format!("{name}.beta"), Tensor::zeros(&[c]), true).expect("unique");
        self.p.add(format!("{name}.mean"), Tensor::zeros(&[c]), false).expect("unique");
        self.p.add(format!("{name}.var"), Tensor::full(&[c], 1.0), false).expect("unique");
    }
}

/// Fresh parameters: Kaiming fan-in normal for hidden layers, `N(0, 0.001)`
/// for the output convolution, unit/zero batch-norm affine terms.
pub fn init_params<F: Scalar>(cfg: &BackboneConfig, seed: u64) -> Result<ParamSet<F>, BackboneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut it = Init { p: ParamSet::new(), rng: &mut rng };
    let (k, c, h) = (cfg.aniso_kernel, cfg.grid.cube_len, cfg.aniso_hidden);
    for br in Branch::BOTH {
        let b = br.prefix();
        it.weight(format!("{b}.proj1.w"), &[h, 1, k], k);
        it.bn(&format!("{b}.proj1.bn"), h);
        it.weight(format!("{b}.proj2.w"), &[cfg.plane_channels, h, c], h * c);
        it.bn(&format!("{b}.proj2.bn"), cfg.plane_channels);

        it.weight(format!("{b}.stem.w"), &[cfg.stem_channels, cfg.plane_channels, 3, 3], cfg.plane_channels * 9);
        it.bn(&format!("{b}.stem.bn"), cfg.stem_channels);
        let mut ch = cfg.stem_channels;
        for (i, st) in cfg.stages.iter().enumerate() {
            let n = format!("{b}.stage{i}");
            it.weight(format!("{n}.conv1.w"), &[st.channels, ch, 3, 3], ch * 9);
            it.bn(&format!("{n}.bn1"), st.channels);
            it.weight(format!("{n}.conv2.w"), &[st.channels, st.channels, 3, 3], st.channels * 9);
            it.bn(&format!("{n}.bn2"), st.channels);
            if st.stride != 1 || st.channels != ch {
                it.weight(format!("{n}.short.w"), &[st.channels, ch, 1, 1], ch);
                it.bn(&format!("{n}.short.bn"), st.channels);
            }
            ch = st.channels;
        }
        for (i, &uc) in cfg.up_channels.iter().enumerate() {
            let n = format!("{b}.up{i}");
            it.weight(format!("{n}.w"), &[ch, uc, 4, 4], ch * 4);
            it.bn(&format!("{n}.bn"), uc);
            ch = uc;
        }
        let w = normal_tensor(&[cfg.joints, ch, 1, 1], 0.001, it.rng);
        it.p.add(format!("{b}.out.w"), w, true).expect("unique");
        it.p.add(format!("{b}.out.b"), Tensor::zeros(&[cfg.joints]), true).expect("unique");
    }
    Ok(it.p.cast())
}

/// Fresh parameters with non-trivial batch-norm statistics and a larger
/// output layer, so an untrained network has structured outputs. Used to
/// probe equivariance without training.
pub fn randomized_params(cfg: &BackboneConfig, seed: u64) -> Result<ParamSet<f32>, BackboneError> {
    use rand::Rng;
    let mut p = init_params::<f32>(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<ParamId> = p.ids().collect();
    for id in ids {
        let name = p.name(id);
        let (lo, hi) = if name.ends_with(".mean") || name.ends_with(".beta") {
            (-0.3, 0.3)
        } else if name.ends_with(".var") || name.ends_with(".gamma") {
            (0.5, 1.5)
        } else if name.ends_with("out.w") {
            (-0.5, 0.5)
        } else {
            continue;
        };
        p.value_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(lo..hi));
    }
    Ok(p)
}

/// A batch-norm layer's running statistics and the batch statistics observed
/// by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnUpdate<F> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BnBatchStats<F>,
}

pub const BN_MOMENTUM: f64 = 0.1;

/// `running ← (1 − m)·running + m·batch` for every recorded layer.
pub fn apply_bn_updates<F: Scalar>(params: &mut ParamSet<F>, updates: &[BnUpdate<F>], momentum: f64) {
    let m = F::from_f64(momentum);
    let keep = F::one() - m;
    for u in updates {
        for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
            for (r, b) in params.value_mut(id).data_mut().iter_mut().zip(batch) {
                *r = keep * *r + m * *b;
            }
        }
    }
}

/// Graph-building context for one forward pass.
pub struct Net<'a, F: Scalar> {
    pub cfg: &'a BackboneConfig,
    pub params: &'a ParamSet<F>,
    pub mode: BnMode,
    pub bn_updates: Vec<BnUpdate<F>>,
}

/// Output nodes of [`Net::forward`], each `[N, J, C, C]`.
#[derive(Debug, Clone, Copy)]
pub struct NetOutput {
    pub hm_theta_r: Var,
    pub hm_theta_z: Var,
}

impl<'a, F: Scalar> Net<'a, F> {
    pub fn new(cfg: &'a BackboneConfig, params: &'a ParamSet<F>, mode: BnMode) -> Self {
        Self { cfg, params, mode, bn_updates: Vec::new() }
    }

    fn id(&self, name: &str) -> Result<ParamId, BackboneError> {
        self.params
            .id_of(name)
            .ok_or_else(|| BackboneError::Config(format!("missing parameter {name}")))
    }

    fn p(&self, g: &mut Graph<F>, name: &str) -> Result<Var, BackboneError> {
        let id = self.id(name)?;
        Ok(g.param(self.params, id))
    }

    fn bn(&mut self, g: &mut Graph<F>, x: Var, name: &str) -> Result<Var, BackboneError> {
        let gamma = self.p(g, &format!("{name}.gamma"))?;
        let beta = self.p(g, &format!("{name}.beta"))?;
        let (mi, vi) = (self.id(&format!("{name}.mean"))?, self.id(&format!("{name}.var"))?);
        let running = (self.params.value(mi), self.params.value(vi));
        let (y, stats) = g.batchnorm(x, gamma, beta, running, self.mode)?;
        if let Some(stats) = stats {
            self.bn_updates.push(BnUpdate { mean: mi, var: vi, stats });
        }
        Ok(y)
    }

    fn bn_relu(&mut self, g: &mut Graph<F>, x: Var, name: &str) -> Result<Var, BackboneError> {
        let y = self.bn(g, x, name)?;
        Ok(g.relu(y))
    }

    fn planar(&self, k: usize, stride: usize) -> Conv2dSpec {
        let theta = AxisPad { mode: self.cfg.theta_padding, amount: k / 2 };
        Conv2dSpec { stride: [stride, stride], pad: PadSpec::new(theta, AxisPad::zero(k / 2)) }
    }

    fn upsample_spec(&self) -> Conv2dSpec {
        let theta = AxisPad { mode: self.cfg.theta_padding, amount: 1 };
        Conv2dSpec { stride: [2, 2], pad: PadSpec::new(theta, AxisPad::zero(1)) }
    }

    /// Collapses one non-θ axis of `x: [N, 1, C, C, C]` into channels,
    /// giving `[N, plane_channels, C, C]`.
    pub fn project_plane(&mut self, g: &mut Graph<F>, x: Var, branch: Branch) -> Result<Var, BackboneError> {
        let b = branch.prefix();
        let axis = branch.collapsed_axis();
        let w1 = self.p(g, &format!("{b}.proj1.w"))?;
        let h = g.conv3d_aniso(x, w1, None, &AnisoSpec { axis, pad: AnisoPad::Same })?;
        let h = self.bn_relu(g, h, &format!("{b}.proj1.bn"))?;
        let w2 = self.p(g, &format!("{b}.proj2.w"))?;
        let h = g.conv3d_aniso(h, w2, None, &AnisoSpec { axis, pad: AnisoPad::Valid })?;
        let h = self.bn_relu(g, h, &format!("{b}.proj2.bn"))?;
        let s = g.value(h).shape().to_vec();
        let c = self.cfg.grid.cube_len;
        Ok(g.reshape(h, &[s[0], self.cfg.plane_channels, c, c])?)
    }

    /// `[N, plane_channels, C, C]` → `[N, J, C, C]`.
    pub fn heatmap_head(&mut self, g: &mut Graph<F>, plane: Var, branch: Branch) -> Result<Var, BackboneError> {
        let b = branch.prefix();
        let c = self.cfg.grid.cube_len;
        let s = g.value(plane).shape();
        if s.len() != 4 || s[1] != self.cfg.plane_channels || s[2] != c || s[3] != c {
            return Err(DiffError::Shape(format!("heatmap head input {s:?}")).into());
        }
        let w = self.p(g, &format!("{b}.stem.w"))?;
        let h = g.conv2d(plane, w, None, &self.planar(3, 2))?;
        let mut h = self.bn_relu(g, h, &format!("{b}.stem.bn"))?;
        for (i, st) in self.cfg.stages.iter().enumerate() {
            let n = format!("{b}.stage{i}");
            let w1 = self.p(g, &format!("{n}.conv1.w"))?;
            let y = g.conv2d(h, w1, None, &self.planar(3, st.stride))?;
            let y = self.bn_relu(g, y, &format!("{n}.bn1"))?;
            let w2 = self.p(g, &format!("{n}.conv2.w"))?;
            let y = g.conv2d(y, w2, None, &self.planar(3, 1))?;
            let y = self.bn(g, y, &format!("{n}.bn2"))?;
            let short = if self.params.id_of(&format!("{n}.short.w")).is_some() {
                let ws = self.p(g, &format!("{n}.short.w"))?;
                let sc = g.conv2d(h, ws, None, &self.planar(1, st.stride))?;
                self.bn(g, sc, &format!("{n}.short.bn"))?
            } else {
                h
            };
            let sum = g.add(y, short)?;
            h = g.relu(sum);
        }
        for i in 0..self.cfg.up_channels.len() {
            let n = format!("{b}.up{i}");
            let w = self.p(g, &format!("{n}.w"))?;
            let y = g.deconv2d(h, w, None, &self.upsample_spec())?;
            h = self.bn_relu(g, y, &format!("{n}.bn"))?;
        }
        let w = self.p(g, &format!("{b}.out.w"))?;
        let bias = self.p(g, &format!("{b}.out.b"))?;
        Ok(g.conv2d(h, w, Some(bias), &self.planar(1, 1))?)
    }

    /// Full network on a stacked occupancy batch `[N, 1, C, C, C]`.
    pub fn forward(&mut self, g: &mut Graph<F>, x: Var) -> Result<NetOutput, BackboneError> {
        let mut out = [None; 2];
        for (slot, br) in out.iter_mut().zip(Branch::BOTH) {
            let plane = self.project_plane(g, x, br)?;
            *slot = Some(self.heatmap_head(g, plane, br)?);
        }
        Ok(NetOutput {
            hm_theta_r: out[0].expect("set above"),
            hm_theta_z: out[1].expect("set above"),
        })
    }
}

/// Stacks occupancy grids into a `[N, 1, C, C, C]` input tensor.
pub fn stack_grids<F: Scalar>(grids: &[&CylindricalGrid], cfg: &GridConfig) -> Result<Tensor<F>, BackboneError> {
    for g in grids {
        if g.config != *cfg {
            return Err(BackboneError::GridMismatch { got: g.config, want: *cfg });
        }
    }
    let c = cfg.cube_len;
    let data = grids
        .iter()
        .flat_map(|g| g.occupancy.iter().map(|&v| if v != 0 { F::one() } else { F::zero() }))
        .collect();
    Ok(Tensor::from_vec(&[grids.len(), 1, c, c, c], data)?)
}

/// Splits `[N, J, C, C]` heatmap batches into per-sample pairs.
pub fn split_heatmaps<F: Scalar>(tr: &Tensor<F>, tz: &Tensor<F>) -> Vec<HeatmapPair> {
    let s = tr.shape();
    let per: usize = s[1..].iter().product();
    (0..s[0])
        .map(|i| {
            let take = |t: &Tensor<F>| {
                let d = t.data()[i * per..(i + 1) * per].iter().map(|v| v.as_f64() as f32).collect();
                Tensor::from_vec(&s[1..], d).expect("same shape")
            };
            HeatmapPair { hm_theta_r: take(tr), hm_theta_z: take(tz) }
        })
        .collect()
}

/// Infer-mode heatmaps for a batch of grids.
pub fn infer_grids(cfg: &BackboneConfig, params: &ParamSet<f32>, grids: &[&CylindricalGrid]) -> Result<Vec<HeatmapPair>, BackboneError> {
    let x = stack_grids::<f32>(grids, &cfg.grid)?;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let mut net = Net::new(cfg, params, BnMode::Infer);
    let out = net.forward(&mut g, xv)?;
    Ok(split_heatmaps(g.value(out.hm_theta_r), g.value(out.hm_theta_z)))
}

/// Voxelize → network → decode, for one normalized cloud in infer mode.
pub fn forward(
    cfg: &BackboneConfig,
    params: &ParamSet<f32>,
    cloud_normalized: &PointCloud,
) -> Result<(HeatmapPair, KeypointEstimate), BackboneError> {
    let vox = voxelize_cylindrical(cloud_normalized, &cfg.grid)?;
    let hm = infer_grids(cfg, params, &[&vox.grid])?.pop().expect("one sample");
    let kp = decode(&hm, cfg)?;
    Ok((hm, kp))
}

/// Batched [`forward`], chunked so that memory stays bounded.
pub fn forward_many(
    cfg: &BackboneConfig,
    params: &ParamSet<f32>,
    clouds: &[&PointCloud],
    chunk: usize,
) -> Result<Vec<(HeatmapPair, KeypointEstimate)>, BackboneError> {
    let grids = par::map_indexed(clouds.len(), |i| voxelize_cylindrical(clouds[i], &cfg.grid));
    let grids: Vec<CylindricalGrid> = grids.into_iter().map(|r| r.map(|v| v.grid)).collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(clouds.len());
    for part in grids.chunks(chunk.max(1)) {
        let refs: Vec<&CylindricalGrid> = part.iter().collect();
        for hm in infer_grids(cfg, params, &refs)? {
            let kp = decode(&hm, cfg)?;
            out.push((hm, kp));
        }
    }
    Ok(out)
}

fn lse(row: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = row.clone().fold(f64::NEG_INFINITY, f64::max);
    mx + row.map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Per joint and θ bin: `½·(LSE_ρ(β·hm_tr) + LSE_z(β·hm_tz))`, shape `[J, C]`.
pub fn fuse_theta(pair: &HeatmapPair, beta: f64) -> Result<Tensor<f64>, BackboneError> {
    let s = pair.hm_theta_r.shape();
    if s != pair.hm_theta_z.shape() || s.len() != 3 {
        return Err(DiffError::Shape(format!("fuse_theta: {s:?} vs {:?}", pair.hm_theta_z.shape())).into());
    }
    let (j, c, w) = (s[0], s[1], s[2]);
    let (a, b) = (pair.hm_theta_r.data(), pair.hm_theta_z.data());
    Ok(Tensor::from_fn(&[j, c], |idx| {
        let ra = a[idx * w..(idx + 1) * w].iter().map(|v| beta * *v as f64);
        let rb = b[idx * w..(idx + 1) * w].iter().map(|v| beta * *v as f64);
        0.5 * (lse(ra) + lse(rb))
    }))
}

/// `atan2(Σ e^{pᵢ} sin θᵢ, Σ e^{pᵢ} cos θᵢ)` over bin centers θᵢ, wrapped to `[-π, π)`.
pub fn sinusoidal_soft_argmax(p_theta: &[f64]) -> Result<f64, BackboneError> {
    let c = p_theta.len();
    if c == 0 || p_theta.iter().any(|v| !v.is_finite()) {
        return Err(BackboneError::Degenerate);
    }
    let mx = p_theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = 2.0 * PI / c as f64;
    let (mut s, mut co) = (0.0, 0.0);
    for (i, &p) in p_theta.iter().enumerate() {
        let w = (p - mx).exp();
        let t = -PI + (i as f64 + 0.5) * width;
        s += w * t.sin();
        co += w * t.cos();
    }
    if s.abs() < 1e-12 && co.abs() < 1e-12 {
        return Err(BackboneError::Degenerate);
    }
    Ok(crate::geom::wrap_angle(s.atan2(co)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneAxis {
    /// The θ axis (rows).
    Theta,
    /// The ρ or z axis (columns).
    Radial,
}

/// Softmax over the whole `C × C` plane of `β·hm`, marginalized onto `axis`,
/// expectation of bin centers in `[0, bound)`.
pub fn axis_soft_argmax(hm: &[f32], c: usize, axis: PlaneAxis, bound: f64, beta: f64) -> f64 {
    let mx = hm.iter().map(|v| beta * *v as f64).fold(f64::NEG_INFINITY, f64::max);
    let mut marg = vec![0.0; c];
    for (idx, v) in hm.iter().enumerate() {
        let bin = match axis {
            PlaneAxis::Theta => idx / c,
            PlaneAxis::Radial => idx % c,
        };
        marg[bin] += (beta * *v as f64 - mx).exp();
    }
    let z: f64 = marg.iter().sum();
    let width = bound / c as f64;
    marg.iter()
        .enumerate()
        .map(|(i, m)| m / z * (i as f64 + 0.5) * width)
        .sum()
}

/// Decodes keypoints in the normalized frame.
pub fn decode(pair: &HeatmapPair, cfg: &BackboneConfig) -> Result<KeypointEstimate, BackboneError> {
    let c = cfg.grid.cube_len;
    let j = pair.hm_theta_r.shape()[0];
    let fused = fuse_theta(pair, cfg.decode_beta)?;
    let mut est = KeypointEstimate {
        theta: vec![0.0; j],
        rho: vec![0.0; j],
        z: vec![0.0; j],
        pose: Pose::zeros(),
    };
    for ji in 0..j {
        let theta = sinusoidal_soft_argmax(&fused.data()[ji * c..(ji + 1) * c])?;
        let span = ji * c * c..(ji + 1) * c * c;
        let rho = axis_soft_argmax(&pair.hm_theta_r.data()[span.clone()], c, PlaneAxis::Radial, cfg.grid.rho_max, cfg.decode_beta);
        let z = axis_soft_argmax(&pair.hm_theta_z.data()[span], c, PlaneAxis::Radial, cfg.grid.z_max, cfg.decode_beta);
        est.theta[ji] = theta;
        est.rho[ji] = rho;
        est.z[ji] = z;
        if ji < NUM_JOINTS {
            est.pose.joints[ji] = cfg.grid.from_grid_cyl(theta, rho, z);
        }
    }
    Ok(est)
}

pub const DEFAULT_SIGMA_BINS: f64 = 1.5;

/// Gaussian target bumps (peak 1) at each joint's bin-space position; wrapped
/// along θ, truncated along ρ and z. `pose` is in the normalized frame.
pub fn gt_heatmaps(pose: &Pose, cfg: &GridConfig, sigma_bins: f64) -> Result<HeatmapPair, BackboneError> {
    let c = cfg.cube_len;
    let cf = c as f64;
    let mut tr = Tensor::<f32>::zeros(&[NUM_JOINTS, c, c]);
    let mut tz = Tensor::<f32>::zeros(&[NUM_JOINTS, c, c]);
    let inv = 1.0 / (2.0 * sigma_bins * sigma_bins);
    for (ji, p) in pose.joints.iter().enumerate() {
        let (t, r, z) = cfg.to_grid_cyl(p);
        if cfg.bin_of(t, r, z).is_none() {
            return Err(BackboneError::JointOutOfBounds(ji));
        }
        let ut = (t + PI) / cfg.theta_width() - 0.5;
        let ur = r / cfg.rho_max * cf - 0.5;
        let uz = z / cfg.z_max * cf - 0.5;
        let gt: Vec<f64> = (0..c)
            .map(|i| {
                let d = (i as f64 - ut).rem_euclid(cf);
                let d = d.min(cf - d);
                (-d * d * inv).exp()
            })
            .collect();
        let bump = |u: f64| -> Vec<f64> { (0..c).map(|k| (-(k as f64 - u).powi(2) * inv).exp()).collect() };
        let (gr, gz) = (bump(ur), bump(uz));
        let base = ji * c * c;
        for i in 0..c {
            for k in 0..c {
                tr.data_mut()[base + i * c + k] = (gt[i] * gr[k]) as f32;
                tz.data_mut()[base + i * c + k] = (gt[i] * gz[k]) as f32;
            }
        }
    }
    Ok(HeatmapPair { hm_theta_r: tr, hm_theta_z: tz })
}

/// Maps a normalized-frame point to `(θ, ρ, z_grid)`; convenience for callers
/// comparing decoded coordinates.
pub fn grid_coords(p: &Point, cfg: &GridConfig) -> (f64, f64, f64) {
    cfg.to_grid_cyl(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{cyclic_shift_grid, rotate_z, Frame, ViewRotation};
    use rand::Rng;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig::default()
    }

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                let r: f64 = rng.gen_range(0.05..0.9);
                let t: f64 = rng.gen_range(-PI..PI);
                Point::new(r * t.cos(), r * t.sin(), rng.gen_range(-0.95..0.95))
            })
            .collect();
        PointCloud::new(pts, Frame::Canonical)
    }

    fn random_params(cfg: &BackboneConfig, seed: u64) -> ParamSet<f32> {
        randomized_params(cfg, seed).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        assert!(BackboneConfig::full_scale().validate().is_ok());
        assert_eq!(BackboneConfig::default().theta_stride(), 4);
        let mut bad = BackboneConfig::default();
        bad.grid.cube_len = 30;
        assert!(bad.validate().is_err());
        let mut bad = BackboneConfig::default();
        bad.up_channels.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn output_shapes() {
        let cfg = small_cfg();
        let p = random_params(&cfg, 1);
        let (hm, kp) = forward(&cfg, &p, &random_cloud(2, 500)).unwrap();
        assert_eq!(hm.hm_theta_r.shape(), &[8, 32, 32]);
        assert_eq!(hm.hm_theta_z.shape(), &[8, 32, 32]);
        assert!(hm.is_finite());
        assert!(kp.theta.iter().all(|t| (-PI..PI).contains(t)));
        let (hm2, kp2) = forward(&cfg, &p, &random_cloud(2, 500)).unwrap();
        assert_eq!(hm, hm2);
        assert_eq!(kp, kp2);
    }

    #[test]
    fn planes_have_three_channels() {
        let cfg = small_cfg();
        let p = random_params(&cfg, 3);
        let vox = voxelize_cylindrical(&random_cloud(4, 300), &cfg.grid).unwrap();
        let mut g = Graph::new();
        let x = g.constant(stack_grids::<f32>(&[&vox.grid], &cfg.grid).unwrap());
        let mut net = Net::new(&cfg, &p, BnMode::Infer);
        for br in Branch::BOTH {
            let plane = net.project_plane(&mut g, x, br).unwrap();
            assert_eq!(g.value(plane).shape(), &[1, 3, 32, 32]);
        }
    }

    #[test]
    fn grid_shift_shifts_heatmaps() {
        let cfg = small_cfg();
        let p = random_params(&cfg, 5);
        let vox = voxelize_cylindrical(&random_cloud(6, 800), &cfg.grid).unwrap();
        let base = infer_grids(&cfg, &p, &[&vox.grid]).unwrap().pop().unwrap();
        for s in [4i64, 8, 12, 28, -4] {
            let shifted = cyclic_shift_grid(&vox.grid, s);
            let out = infer_grids(&cfg, &p, &[&shifted]).unwrap().pop().unwrap();
            assert!(out.max_abs_diff(&base.roll_theta(s)) <= 1e-5, "shift {s}");
        }
    }

    #[test]
    fn zero_theta_padding_breaks_shift_equivariance() {
        let cfg = BackboneConfig { theta_padding: PadMode::Zero, ..small_cfg() };
        let p = random_params(&cfg, 5);
        let vox = voxelize_cylindrical(&random_cloud(6, 800), &cfg.grid).unwrap();
        let base = infer_grids(&cfg, &p, &[&vox.grid]).unwrap().pop().unwrap();
        let shifted = cyclic_shift_grid(&vox.grid, 8);
        let out = infer_grids(&cfg, &p, &[&shifted]).unwrap().pop().unwrap();
        assert!(out.max_abs_diff(&base.roll_theta(8)) > 1e-3);
    }

    #[test]
    fn empty_grid_output_is_invariant_to_stride_shifts() {
        let cfg = small_cfg();
        let p = random_params(&cfg, 7);
        let empty = CylindricalGrid::empty(cfg.grid);
        let hm = infer_grids(&cfg, &p, &[&empty]).unwrap().pop().unwrap();
        // transposed convolutions leave a period-2 pattern, so only stride multiples are exact
        assert!(hm.max_abs_diff(&hm.roll_theta(4)) < 1e-6);
    }

    #[test]
    fn end_to_end_rotation_by_stride_unit() {
        let cfg = small_cfg();
        let p = random_params(&cfg, 8);
        let cloud = crate::geom::drop_boundary_points(&random_cloud(9, 800), &cfg.grid, crate::geom::BIN_BOUNDARY_EPS);
        let (_, a) = forward(&cfg, &p, &cloud).unwrap();
        let rot = ViewRotation::from_bins(4, 32);
        let (_, b) = forward(&cfg, &p, &rotate_z(&cloud, rot)).unwrap();
        for j in 0..8 {
            let d = crate::geom::wrap_angle(b.theta[j] - a.theta[j] - rot.azimuth());
            assert!(d.abs() < 1e-3, "joint {j}: {d}");
            assert!((a.rho[j] - b.rho[j]).abs() < 1e-4);
            assert!((a.z[j] - b.z[j]).abs() < 1e-4);
        }
    }

    #[test]
    fn soft_argmax_delta_and_uniform() {
        let c = 32;
        let width = 2.0 * PI / c as f64;
        for k in [0, 5, 16, 31] {
            let p: Vec<f64> = (0..c).map(|i| if i == k { 20.0 } else { -20.0 }).collect();
            let t = sinusoidal_soft_argmax(&p).unwrap();
            let center = -PI + (k as f64 + 0.5) * width;
            assert!(crate::geom::wrap_angle(t - center).abs() < 1e-6, "{k}: {t} vs {center}");
        }
        assert!(matches!(sinusoidal_soft_argmax(&vec![0.3; c]), Err(BackboneError::Degenerate)));
    }

    #[test]
    fn soft_argmax_shift_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = 32;
        let p: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let base = sinusoidal_soft_argmax(&p).unwrap();
        for s in 1..c {
            let shifted: Vec<f64> = (0..c).map(|i| p[(i + c - s) % c]).collect();
            let t = sinusoidal_soft_argmax(&shifted).unwrap();
            let d = crate::geom::wrap_angle(t - base - 2.0 * PI * s as f64 / c as f64);
            assert!(d.abs() < 1e-6);
        }
    }

    #[test]
    fn soft_argmax_wraps_near_minus_pi() {
        let cfg = GridConfig::default();
        let theta = -PI + 0.05;
        let pose = Pose { joints: [cfg.from_grid_cyl(theta, 0.5, 0.5); NUM_JOINTS] };
        let hm = gt_heatmaps(&pose, &cfg, DEFAULT_SIGMA_BINS).unwrap();
        let fused = fuse_theta(&hm, 30.0).unwrap();
        let t = sinusoidal_soft_argmax(&fused.data()[..32]).unwrap();
        assert!((t - theta).abs() < 0.05, "{t}");
    }

    #[test]
    fn axis_soft_argmax_cases() {
        let c = 8;
        let mut hm = vec![-50.0f32; c * c];
        hm[3 * c + 5] = 50.0;
        assert!((axis_soft_argmax(&hm, c, PlaneAxis::Radial, 1.0, 1.0) - 5.5 / 8.0).abs() < 1e-9);
        assert!((axis_soft_argmax(&hm, c, PlaneAxis::Theta, 1.0, 1.0) - 3.5 / 8.0).abs() < 1e-9);
        let mut hm = vec![-50.0f32; c * c];
        hm[2 * c + 1] = 50.0;
        hm[2 * c + (c - 2)] = 50.0;
        assert!((axis_soft_argmax(&hm, c, PlaneAxis::Radial, 2.0, 1.0) - 1.0).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let hm: Vec<f32> = (0..c * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w: Vec<f64> = hm.iter().map(|v| (3.0 * *v as f64).exp()).collect();
        let total: f64 = w.iter().sum();
        let oracle: f64 = (0..c * c).map(|i| w[i] * ((i % c) as f64 + 0.5) / c as f64).sum::<f64>() / total;
        assert!((axis_soft_argmax(&hm, c, PlaneAxis::Radial, 1.0, 3.0) - oracle).abs() < 1e-6);
    }

    #[test]
    fn fuse_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = Tensor::from_fn(&[2, 8, 8], |_| rng.gen_range(-1.0f32..1.0));
        let same = HeatmapPair { hm_theta_r: t.clone(), hm_theta_z: t.clone() };
        let f = fuse_theta(&same, 2.0).unwrap();
        for idx in 0..16 {
            let single = lse(t.data()[idx * 8..(idx + 1) * 8].iter().map(|v| 2.0 * *v as f64));
            assert!((f.data()[idx] - single).abs() < 1e-12);
        }
        let mut plus = same.clone();
        plus.hm_theta_r.data_mut().iter_mut().for_each(|v| *v += 0.25);
        plus.hm_theta_z.data_mut().iter_mut().for_each(|v| *v += 0.25);
        let fp = fuse_theta(&plus, 2.0).unwrap();
        for j in 0..2 {
            let a = sinusoidal_soft_argmax(&f.data()[j * 8..(j + 1) * 8]).unwrap();
            let b = sinusoidal_soft_argmax(&fp.data()[j * 8..(j + 1) * 8]).unwrap();
            assert!((a - b).abs() < 1e-5);
        }
        let shifted = fuse_theta(&same.roll_theta(3), 2.0).unwrap();
        assert!(shifted.max_abs_diff(&f.roll(1, 3)) < 1e-12);
    }

    #[test]
    fn gt_heatmap_peak_and_wrap() {
        let cfg = GridConfig::default();
        let p = cfg.from_grid_cyl(cfg.theta_center(5), cfg.rho_center(7), cfg.z_center(20));
        let hm = gt_heatmaps(&Pose { joints: [p; NUM_JOINTS] }, &cfg, 1.5).unwrap();
        let plane = &hm.hm_theta_r.data()[..32 * 32];
        let (arg, max) = plane.iter().enumerate().fold((0, f32::MIN), |a, (i, v)| if *v > a.1 { (i, *v) } else { a });
        assert_eq!(arg, 5 * 32 + 7);
        assert!((max - 1.0).abs() < 1e-6);
        assert!(hm.hm_theta_z.data()[5 * 32 + 20] > 0.999);

        let p = cfg.from_grid_cyl(-PI + 0.01, 0.5, 0.5);
        let hm = gt_heatmaps(&Pose { joints: [p; NUM_JOINTS] }, &cfg, 1.5).unwrap();
        let row = |i: usize| hm.hm_theta_r.data()[i * 32 + 16];
        assert!(row(31) > 0.5 && row(0) > 0.5 && row(16) < 1e-6);

        let out = Pose { joints: [Point::new(2.0, 0.0, 0.0); NUM_JOINTS] };
        assert!(matches!(gt_heatmaps(&out, &cfg, 1.5), Err(BackboneError::JointOutOfBounds(0))));
    }

    #[test]
    fn gt_heatmaps_shift_with_rotation() {
        let cfg = GridConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut pose = Pose::zeros();
        for j in pose.joints.iter_mut() {
            let t: f64 = rng.gen_range(-PI..PI);
            *j = cfg.from_grid_cyl(t, rng.gen_range(0.1..0.8), rng.gen_range(0.1..0.9));
        }
        let base = gt_heatmaps(&pose, &cfg, 1.5).unwrap();
        for s in [1i64, 7, 31] {
            let rot = ViewRotation::from_bins(s, 32);
            let hm = gt_heatmaps(&pose.rotate(rot), &cfg, 1.5).unwrap();
            assert!(hm.max_abs_diff(&base.roll_theta(s)) < 1e-5);
        }
    }

    #[test]
    fn gt_targets_decode_back_to_pose() {
        let cfg = small_cfg();
        let g = cfg.grid;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut pose = Pose::zeros();
        for j in pose.joints.iter_mut() {
            *j = g.from_grid_cyl(rng.gen_range(-PI..PI), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85));
        }
        let hm = gt_heatmaps(&pose, &g, DEFAULT_SIGMA_BINS).unwrap();
        let kp = decode(&hm, &cfg).unwrap();
        let half_diag = 0.5 * (3.0f64).sqrt() / 32.0 * 2.0;
        for j in 0..NUM_JOINTS {
            let (t, r, z) = g.to_grid_cyl(&pose.joints[j]);
            assert!(crate::geom::wrap_angle(kp.theta[j] - t).abs() < 0.5 * g.theta_width());
            assert!((kp.rho[j] - r).abs() < 0.5 / 32.0);
            assert!((kp.z[j] - z).abs() < 0.5 / 32.0);
            assert!((kp.pose.joints[j] - pose.joints[j]).norm() < half_diag);
        }
    }
}
