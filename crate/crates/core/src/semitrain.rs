//! Supervised, multi-view consistency and regularization losses, and the
//! two-phase training schedule.

use std::time::Instant;

use nalgebra::{Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    apply_bn_updates, gt_heatmaps, infer_grids, init_params, stack_grids, BackboneConfig, BackboneError, HeatmapPair,
    Net, BN_MOMENTUM, DEFAULT_SIGMA_BINS,
};
use crate::diffcore::{Adam, AdamConfig, BnMode, DiffError, Graph, ParamSet, Tensor, Var};
use crate::geom::{
    minmax_normalize, mirror_chirality, rotate_xy, voxelize_cylindrical, CylindricalGrid, GeomError, GridConfig,
    NormalizationTransform, PointCloud, ViewId,
};
use crate::par;
use crate::synthgait::{add_noise, derive_seed, Dataset, Domain, Pose, Sample, Split};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no {0} available for training")]
    EmptyDomain(&'static str),
    #[error("regularization needs a frozen snapshot")]
    MissingSnapshot,
    #[error("a multi-view group needs at least 2 members, got {0}")]
    GroupTooSmall(usize),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// What the second phase of training does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Labeled data only for the whole run.
    Supervised,
    /// Labeled batch plus one unlabeled multi-view group per step.
    Semi,
    /// Labeled batch plus labeled synthetic samples, supervised loss only.
    Mixed,
}

impl std::str::FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "supervised" => Ok(Self::Supervised),
            "semi" => Ok(Self::Semi),
            "mixed" => Ok(Self::Mixed),
            _ => Err(format!("unknown mode {s:?} (expected supervised, semi or mixed)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Maximum tilt about the horizontal axes, degrees.
    pub tilt_deg: f64,
    /// Maximum translation per axis in normalized units.
    pub translate: f64,
    pub chirality: bool,
    /// Gaussian noise added to synthetic inputs, meters.
    pub synth_noise: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            tilt_deg: 5.0,
            // five voxels of a 128-bin grid spanning one normalized unit
            translate: 5.0 / 128.0,
            chirality: true,
            synth_noise: 0.003,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { tilt_deg: 0.0, translate: 0.0, chirality: false, synth_noise: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_period: usize,
    /// First epoch of the second phase.
    pub epoch_s: usize,
    pub epochs: usize,
    pub batch_labeled: usize,
    /// Synthetic samples per step in [`TrainMode::Mixed`].
    pub batch_synthetic: usize,
    pub w_s: f64,
    pub w_m: f64,
    pub w_r: f64,
    pub stop_grad_anchor: bool,
    pub sigma_bins: f64,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Semi,
            lr: 1e-4,
            lr_decay: 0.5,
            decay_period: 20,
            epoch_s: 10,
            epochs: 20,
            batch_labeled: 4,
            batch_synthetic: 4,
            w_s: 1.0,
            w_m: 1.0,
            w_r: 1.0,
            stop_grad_anchor: false,
            sigma_bins: DEFAULT_SIGMA_BINS,
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Schedule for the small desk experiments: fewer epochs, a larger step
    /// size, and a one-way consistency pull toward the anchor view.
    pub fn desk() -> Self {
        Self {
            lr: 5e-3,
            decay_period: 10,
            epoch_s: 10,
            epochs: 24,
            stop_grad_anchor: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.mode != TrainMode::Supervised && self.epoch_s >= self.epochs {
            return bad("epoch_s must be smaller than the total epoch count");
        }
        if [self.w_s, self.w_m, self.w_r].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0) || self.decay_period == 0 {
            return bad("learning rate schedule is invalid");
        }
        if self.batch_labeled == 0 || (self.mode == TrainMode::Mixed && self.batch_synthetic == 0) {
            return bad("batch sizes must be positive");
        }
        if !(self.sigma_bins > 0.0) {
            return bad("sigma_bins must be positive");
        }
        Ok(())
    }

    /// Epoch at which the second phase starts (`epochs` for pure supervision).
    pub fn effective_epoch_s(&self) -> usize {
        match self.mode {
            TrainMode::Supervised => self.epochs,
            _ => self.epoch_s,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_period) as i32)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_s: f64,
    pub l_m: f64,
    pub l_reg: f64,
    pub total: f64,
}

/// Copy of the parameters (running statistics included) taken when the
/// second phase begins.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenSnapshot {
    params: ParamSet<f32>,
    epoch: usize,
}

impl FrozenSnapshot {
    pub fn new(params: &ParamSet<f32>, epoch: usize) -> Self {
        let mut params = params.clone();
        params.zero_grads();
        Self { params, epoch }
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn predict(&self, cfg: &BackboneConfig, grids: &[&CylindricalGrid]) -> Result<Vec<HeatmapPair>, TrainError> {
        Ok(infer_grids(cfg, &self.params, grids)?)
    }
}

/// Heatmap pair as graph nodes, each `[n, J, C, C]`.
#[derive(Debug, Clone, Copy)]
pub struct PairVar {
    pub tr: Var,
    pub tz: Var,
}

fn pair_mse(g: &mut Graph<f32>, a: PairVar, b: PairVar) -> Result<Var, DiffError> {
    let m1 = g.mse(a.tr, b.tr)?;
    let m2 = g.mse(a.tz, b.tz)?;
    let s = g.add(m1, m2)?;
    Ok(g.scale(s, 0.5))
}

/// Mean squared error over both planes and all joints.
pub fn loss_supervised(g: &mut Graph<f32>, pred: PairVar, target: PairVar) -> Result<Var, TrainError> {
    Ok(pair_mse(g, pred, target)?)
}

/// `Σ_{i ≠ anchor} mse(predᵢ, pred_anchor)`.
pub fn loss_multiview(g: &mut Graph<f32>, preds: &[PairVar], anchor: usize, stop_grad_anchor: bool) -> Result<Var, TrainError> {
    if preds.len() < 2 || anchor >= preds.len() {
        return Err(TrainError::GroupTooSmall(preds.len()));
    }
    let a = if stop_grad_anchor {
        PairVar { tr: g.stop_gradient(preds[anchor].tr), tz: g.stop_gradient(preds[anchor].tz) }
    } else {
        preds[anchor]
    };
    let mut total: Option<Var> = None;
    for (i, p) in preds.iter().enumerate() {
        if i == anchor {
            continue;
        }
        let m = pair_mse(g, *p, a)?;
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    Ok(total.expect("at least one non-anchor member"))
}

/// Distance between the current anchor prediction and the frozen snapshot's
/// prediction for the same input; the snapshot side carries no gradient.
pub fn loss_reg(g: &mut Graph<f32>, pred_anchor: PairVar, frozen: &HeatmapPair) -> Result<Var, TrainError> {
    let add_batch = |t: &Tensor<f32>| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.clone().reshaped(&s)
    };
    let tr = g.constant(add_batch(&frozen.hm_theta_r)?);
    let tz = g.constant(add_batch(&frozen.hm_theta_z)?);
    let frozen = PairVar { tr: g.stop_gradient(tr), tz: g.stop_gradient(tz) };
    Ok(pair_mse(g, pred_anchor, frozen)?)
}

/// Direct evaluation of the pair loss without a graph.
pub fn heatmap_mse(a: &HeatmapPair, b: &HeatmapPair) -> f64 {
    let m = |x: &Tensor<f32>, y: &Tensor<f32>| {
        x.data().iter().zip(y.data()).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>() / x.numel() as f64
    };
    0.5 * (m(&a.hm_theta_r, &b.hm_theta_r) + m(&a.hm_theta_z, &b.hm_theta_z))
}

/// One draw of the geometric augmentation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AugDraw {
    pub mirror: bool,
    pub tilt: [f64; 2],
    pub translate: [f64; 3],
}

impl AugDraw {
    pub fn sample<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let t = cfg.tilt_deg.to_radians();
        let mut u = |a: f64| if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
        let tilt = [u(t), u(t)];
        let translate = [u(cfg.translate), u(cfg.translate), u(cfg.translate)];
        let mirror = cfg.chirality && rng.gen_bool(0.5);
        Self { mirror, tilt, translate }
    }
}

/// Network input for one sample plus its optional target.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub grid: CylindricalGrid,
    pub transform: NormalizationTransform,
    pub target: Option<HeatmapPair>,
}

/// Mirror and tilt (before normalization), normalize (with `transform` when
/// given, otherwise from the cloud's own bounds), translate, voxelize, and
/// build targets. A translation that would push a labeled joint off the
/// grid is dropped.
pub fn prepare(
    cloud: &PointCloud,
    pose: Option<&Pose>,
    aug: &AugDraw,
    transform: Option<&NormalizationTransform>,
    cfg: &BackboneConfig,
    sigma_bins: f64,
) -> Result<Prepared, TrainError> {
    let (mut cloud, mut pose) = (cloud.clone(), pose.copied());
    if aug.mirror {
        let (c, p) = mirror_chirality(&cloud, &pose.unwrap_or_else(Pose::zeros));
        cloud = c;
        pose = pose.map(|_| p);
    }
    if aug.tilt != [0.0, 0.0] {
        cloud = rotate_xy(&cloud, aug.tilt[0], aug.tilt[1]);
        let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), aug.tilt[1])
            * Rotation3::from_axis_angle(&Vector3::x_axis(), aug.tilt[0]);
        pose = pose.map(|p| p.map(|q| rot * q));
    }
    let (normed, t) = match transform {
        Some(t) => (t.apply_cloud(&cloud), *t),
        None => minmax_normalize(&cloud)?,
    };
    let pose_n = pose.map(|p| t.apply_pose(&p));
    let shift = Vector3::from(aug.translate);
    let attempt = |shift: Vector3<f64>| -> Result<(PointCloud, Option<HeatmapPair>), TrainError> {
        let c = normed.map_points(|p| p + shift);
        let target = match &pose_n {
            Some(p) => Some(gt_heatmaps(&p.map(|q| q + shift), &cfg.grid, sigma_bins)?),
            None => None,
        };
        Ok((c, target))
    };
    let (c, target) = match attempt(shift) {
        Ok(v) => v,
        Err(TrainError::Backbone(BackboneError::JointOutOfBounds(_))) if shift != Vector3::zeros() => {
            attempt(Vector3::zeros())?
        }
        Err(e) => return Err(e),
    };
    let vox = voxelize_cylindrical(&c, &cfg.grid)?;
    Ok(Prepared { grid: vox.grid, transform: t, target })
}

/// Whether every joint of `pose` lands in a grid bin once the cloud is normalized.
pub fn target_in_grid(cloud: &PointCloud, pose: &Pose, grid: &GridConfig) -> bool {
    let Ok((_, t)) = minmax_normalize(cloud) else { return false };
    t.apply_pose(pose).joints.iter().all(|q| {
        let (th, r, z) = grid.to_grid_cyl(q);
        grid.bin_of(th, r, z).is_some()
    })
}

/// A canonical multi-view group; `anchor` indexes the view-A member.
#[derive(Debug, Clone)]
pub struct Group<'a> {
    pub members: Vec<&'a Sample>,
    pub anchor: usize,
}

/// Borrowed training view of a dataset.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub labeled: Vec<&'a Sample>,
    pub groups: Vec<Group<'a>>,
}

impl<'a> TrainData<'a> {
    /// Labeled samples whose joints fall outside `grid` after normalization
    /// have no valid target and are left out.
    pub fn from_dataset(ds: &'a Dataset, grid: &GridConfig) -> Self {
        let labeled = ds
            .samples
            .iter()
            .filter(|s| s.split == Split::Train && s.domain == Domain::LabeledRealLike)
            .filter(|s| s.pose.is_some_and(|p| target_in_grid(&s.cloud, &p, grid)))
            .collect();
        let groups = ds
            .groups(Split::Train)
            .into_iter()
            .filter(|m| m.len() >= 2)
            .map(|members| {
                let anchor = members.iter().position(|s| s.view.view_id == ViewId::A).unwrap_or(0);
                Group { members, anchor }
            })
            .collect();
        Self { labeled, groups }
    }

    /// Restricts the labeled set, e.g. for cross-subject folds.
    pub fn filter_labeled(mut self, keep: impl Fn(&Sample) -> bool) -> Self {
        self.labeled.retain(|s| keep(s));
        self
    }
}

/// One JSON line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: String,
    pub lr: f64,
    pub l_s: f64,
    pub l_m: f64,
    pub l_reg: f64,
    pub total: f64,
    pub steps: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Supervised,
    Semi,
    Mixed,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Supervised => "supervised",
            Phase::Semi => "semi",
            Phase::Mixed => "mixed",
        }
    }
}

const STREAM_INIT: u64 = 10;
const STREAM_EPOCH: u64 = 11;
const STREAM_STEP: u64 = 12;

/// Complete, cloneable training state. Cloning after the first phase lets
/// several second-phase variants share the same supervised start.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub backbone: BackboneConfig,
    pub cfg: TrainConfig,
    pub params: ParamSet<f32>,
    pub adam: Adam<f32>,
    /// Next epoch to run.
    pub epoch: usize,
    /// Global step counter; per-step randomness derives from it.
    pub step: u64,
    pub snapshot: Option<FrozenSnapshot>,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(backbone: BackboneConfig, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let params = init_params::<f32>(&backbone, derive_seed(cfg.seed, STREAM_INIT, 0))?;
        let adam = Adam::new(&params, cfg.adam);
        Ok(Self { backbone, cfg, params, adam, epoch: 0, step: 0, snapshot: None, log: Vec::new() })
    }

    /// A copy that continues with a different second-phase configuration.
    pub fn fork(&self, f: impl FnOnce(&mut TrainConfig)) -> Result<Self, TrainError> {
        let mut t = self.clone();
        f(&mut t.cfg);
        t.cfg.validate()?;
        Ok(t)
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch < self.cfg.effective_epoch_s() {
            return Phase::Supervised;
        }
        match self.cfg.mode {
            TrainMode::Supervised => Phase::Supervised,
            TrainMode::Semi => Phase::Semi,
            TrainMode::Mixed => Phase::Mixed,
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    fn step_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, STREAM_STEP, self.step))
    }

    fn labeled_item(&self, s: &Sample, rng: &mut ChaCha8Rng) -> Result<Prepared, TrainError> {
        let aug = AugDraw::sample(&self.cfg.augment, rng);
        self.prepare_labeled(&s.cloud, s.pose.as_ref(), &aug)
    }

    /// Falls back to the un-augmented input when the augmented target
    /// leaves the grid.
    fn prepare_labeled(&self, cloud: &PointCloud, pose: Option<&Pose>, aug: &AugDraw) -> Result<Prepared, TrainError> {
        match prepare(cloud, pose, aug, None, &self.backbone, self.cfg.sigma_bins) {
            Err(TrainError::Backbone(BackboneError::JointOutOfBounds(_))) if *aug != AugDraw::default() => {
                prepare(cloud, pose, &AugDraw::default(), None, &self.backbone, self.cfg.sigma_bins)
            }
            r => r,
        }
    }

    fn synthetic_cloud(&self, s: &Sample, rng: &mut ChaCha8Rng) -> PointCloud {
        if self.cfg.augment.synth_noise > 0.0 {
            add_noise(&s.cloud, self.cfg.augment.synth_noise, rng.gen())
        } else {
            s.cloud.clone()
        }
    }

    /// Runs forward/backward/update on a stacked batch. `loss` assembles
    /// the scalar from the network outputs and reports its parts.
    fn update<L>(&mut self, grids: &[&CylindricalGrid], lr: f64, loss: L) -> Result<LossReport, TrainError>
    where
        L: FnOnce(&mut Graph<f32>, PairVar) -> Result<(Var, LossReport), TrainError>,
    {
        let x = stack_grids::<f32>(grids, &self.backbone.grid)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut net = Net::new(&self.backbone, &self.params, BnMode::Train);
        let out = net.forward(&mut g, xv)?;
        let updates = std::mem::take(&mut net.bn_updates);
        let (total, report) = loss(&mut g, PairVar { tr: out.hm_theta_r, tz: out.hm_theta_z })?;
        self.params.zero_grads();
        g.backward_into(total, &mut self.params)?;
        drop(g);
        apply_bn_updates(&mut self.params, &updates, BN_MOMENTUM);
        self.adam.update(&mut self.params, lr);
        self.step += 1;
        Ok(report)
    }

    fn targets(g: &mut Graph<f32>, items: &[&Prepared]) -> Result<PairVar, TrainError> {
        let stack = |f: &dyn Fn(&HeatmapPair) -> &Tensor<f32>| -> Result<Tensor<f32>, DiffError> {
            let first = f(items[0].target.as_ref().expect("labeled"));
            let mut shape = vec![items.len()];
            shape.extend_from_slice(first.shape());
            let data = items.iter().flat_map(|p| f(p.target.as_ref().expect("labeled")).data().iter().copied()).collect();
            Tensor::from_vec(&shape, data)
        };
        let tr = g.constant(stack(&|h| &h.hm_theta_r)?);
        let tz = g.constant(stack(&|h| &h.hm_theta_z)?);
        Ok(PairVar { tr, tz })
    }

    /// Supervised step on labeled samples.
    pub fn train_step_supervised(&mut self, batch: &[&Sample], lr: f64) -> Result<LossReport, TrainError> {
        let mut rng = self.step_rng();
        let items = batch.iter().map(|s| self.labeled_item(s, &mut rng)).collect::<Result<Vec<_>, _>>()?;
        let grids: Vec<_> = items.iter().map(|p| &p.grid).collect();
        let refs: Vec<_> = items.iter().collect();
        let w_s = self.cfg.w_s;
        self.update(&grids, lr, |g, out| {
            let n = refs.len();
            let pred = PairVar { tr: g.slice_batch(out.tr, 0, n)?, tz: g.slice_batch(out.tz, 0, n)? };
            let tgt = Self::targets(g, &refs)?;
            let ls = loss_supervised(g, pred, tgt)?;
            let l_s = g.value(ls).item() as f64;
            let total = g.scale(ls, w_s);
            Ok((total, LossReport { l_s, l_m: 0.0, l_reg: 0.0, total: w_s * l_s }))
        })
    }

    /// Supervised step on labeled samples plus synthetic samples labeled
    /// with their generator pose.
    pub fn train_step_mixed(&mut self, batch: &[&Sample], synthetic: &[&Sample], lr: f64) -> Result<LossReport, TrainError> {
        let mut rng = self.step_rng();
        let mut items = batch.iter().map(|s| self.labeled_item(s, &mut rng)).collect::<Result<Vec<_>, _>>()?;
        for s in synthetic {
            let cloud = self.synthetic_cloud(s, &mut rng);
            let aug = AugDraw::sample(&self.cfg.augment, &mut rng);
            match self.prepare_labeled(&cloud, Some(&s.generator_pose), &aug) {
                Ok(p) => items.push(p),
                Err(TrainError::Backbone(BackboneError::JointOutOfBounds(_))) => {}
                Err(e) => return Err(e),
            }
        }
        let grids: Vec<_> = items.iter().map(|p| &p.grid).collect();
        let refs: Vec<_> = items.iter().collect();
        let w_s = self.cfg.w_s;
        self.update(&grids, lr, |g, out| {
            let n = refs.len();
            let pred = PairVar { tr: g.slice_batch(out.tr, 0, n)?, tz: g.slice_batch(out.tz, 0, n)? };
            let tgt = Self::targets(g, &refs)?;
            let ls = loss_supervised(g, pred, tgt)?;
            let l_s = g.value(ls).item() as f64;
            let total = g.scale(ls, w_s);
            Ok((total, LossReport { l_s, l_m: 0.0, l_reg: 0.0, total: w_s * l_s }))
        })
    }

    /// Labeled batch plus one canonical group, combined in one forward pass.
    pub fn train_step_semi(&mut self, batch: &[&Sample], group: &Group, lr: f64) -> Result<LossReport, TrainError> {
        if group.members.len() < 2 {
            return Err(TrainError::GroupTooSmall(group.members.len()));
        }
        let needs_reg = self.cfg.w_r > 0.0;
        if needs_reg && self.snapshot.is_none() {
            return Err(TrainError::MissingSnapshot);
        }
        let mut rng = self.step_rng();
        let labeled = batch.iter().map(|s| self.labeled_item(s, &mut rng)).collect::<Result<Vec<_>, _>>()?;
        // one shared geometric draw so members stay comparable bin by bin
        let aug = AugDraw::sample(&self.cfg.augment, &mut rng);
        let clouds: Vec<PointCloud> = group.members.iter().map(|s| self.synthetic_cloud(s, &mut rng)).collect();
        let anchor = prepare(&clouds[group.anchor], None, &aug, None, &self.backbone, self.cfg.sigma_bins)?;
        let t = anchor.transform;
        let members = clouds
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == group.anchor {
                    Ok(anchor.clone())
                } else {
                    prepare(c, None, &aug, Some(&t), &self.backbone, self.cfg.sigma_bins)
                }
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        let frozen = match (&self.snapshot, needs_reg) {
            (Some(s), true) => Some(s.predict(&self.backbone, &[&anchor.grid])?.remove(0)),
            _ => None,
        };
        let mut grids: Vec<&CylindricalGrid> = labeled.iter().map(|p| &p.grid).collect();
        grids.extend(members.iter().map(|p| &p.grid));
        let refs: Vec<_> = labeled.iter().collect();
        let (b, m) = (labeled.len(), members.len());
        let (w_s, w_m, w_r, sg, a) = (self.cfg.w_s, self.cfg.w_m, self.cfg.w_r, self.cfg.stop_grad_anchor, group.anchor);
        self.update(&grids, lr, |g, out| {
            let pred = PairVar { tr: g.slice_batch(out.tr, 0, b)?, tz: g.slice_batch(out.tz, 0, b)? };
            let tgt = Self::targets(g, &refs)?;
            let ls = loss_supervised(g, pred, tgt)?;
            let preds = (0..m)
                .map(|i| Ok(PairVar { tr: g.slice_batch(out.tr, b + i, 1)?, tz: g.slice_batch(out.tz, b + i, 1)? }))
                .collect::<Result<Vec<_>, DiffError>>()?;
            let lm = loss_multiview(g, &preds, a, sg)?;
            let mut report = LossReport {
                l_s: g.value(ls).item() as f64,
                l_m: g.value(lm).item() as f64,
                ..Default::default()
            };
            let s1 = g.scale(ls, w_s);
            let s2 = g.scale(lm, w_m);
            let mut total = g.add(s1, s2)?;
            if let Some(frozen) = &frozen {
                let lr_ = loss_reg(g, preds[a], frozen)?;
                report.l_reg = g.value(lr_).item() as f64;
                let s3 = g.scale(lr_, w_r);
                total = g.add(total, s3)?;
            }
            report.total = w_s * report.l_s + w_m * report.l_m + w_r * report.l_reg;
            Ok((total, report))
        })
    }

    /// One pass over the labeled data in the phase implied by `self.epoch`.
    pub fn run_epoch(&mut self, data: &TrainData) -> Result<EpochLog, TrainError> {
        if data.labeled.is_empty() {
            return Err(TrainError::EmptyDomain("labeled samples"));
        }
        let phase = self.phase(self.epoch);
        if phase != Phase::Supervised && data.groups.is_empty() {
            return Err(TrainError::EmptyDomain("multi-view groups"));
        }
        if phase == Phase::Semi && self.snapshot.is_none() {
            self.snapshot = Some(FrozenSnapshot::new(&self.params, self.epoch));
        }
        let start = Instant::now();
        let lr = self.cfg.lr_at(self.epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, STREAM_EPOCH, self.epoch as u64));
        let mut order: Vec<usize> = (0..data.labeled.len()).collect();
        order.shuffle(&mut rng);
        let mut group_order: Vec<usize> = (0..data.groups.len()).collect();
        group_order.shuffle(&mut rng);
        let mut sum = LossReport::default();
        let mut steps = 0;
        for (i, chunk) in order.chunks(self.cfg.batch_labeled).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&k| data.labeled[k]).collect();
            let r = match phase {
                Phase::Supervised => self.train_step_supervised(&batch, lr)?,
                Phase::Semi => {
                    let group = &data.groups[group_order[i % group_order.len()]];
                    self.train_step_semi(&batch, group, lr)?
                }
                Phase::Mixed => {
                    let synth: Vec<&Sample> = (0..self.cfg.batch_synthetic)
                        .map(|_| {
                            let gr = &data.groups[rng.gen_range(0..data.groups.len())];
                            gr.members[rng.gen_range(0..gr.members.len())]
                        })
                        .collect();
                    self.train_step_mixed(&batch, &synth, lr)?
                }
            };
            sum.l_s += r.l_s;
            sum.l_m += r.l_m;
            sum.l_reg += r.l_reg;
            sum.total += r.total;
            steps += 1;
        }
        let n = steps as f64;
        let log = EpochLog {
            epoch: self.epoch,
            phase: phase.name().into(),
            lr,
            l_s: sum.l_s / n,
            l_m: sum.l_m / n,
            l_reg: sum.l_reg / n,
            total: sum.total / n,
            steps,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {} {} lr {:.2e} total {:.5}", log.epoch, log.phase, log.lr, log.total);
        self.log.push(log.clone());
        self.epoch += 1;
        Ok(log)
    }

    /// Runs epochs until `end` (exclusive), calling `on_epoch` after each.
    pub fn run_until(
        &mut self,
        data: &TrainData,
        end: usize,
        mut on_epoch: impl FnMut(&Trainer, &EpochLog),
    ) -> Result<(), TrainError> {
        while self.epoch < end.min(self.cfg.epochs) {
            let log = self.run_epoch(data)?;
            on_epoch(self, &log);
        }
        Ok(())
    }
}

/// Full schedule from fresh parameters.
pub fn run_schedule(dataset: &Dataset, backbone: &BackboneConfig, cfg: &TrainConfig) -> Result<Trainer, TrainError> {
    let data = TrainData::from_dataset(dataset, &backbone.grid);
    let mut t = Trainer::new(backbone.clone(), cfg.clone())?;
    t.run_until(&data, cfg.epochs, |_, _| {})?;
    Ok(t)
}

/// Un-augmented inputs for a batch of clouds, each normalized by its own bounds.
pub fn prepare_eval(clouds: &[&PointCloud], cfg: &BackboneConfig) -> Result<Vec<Prepared>, TrainError> {
    par::map_indexed(clouds.len(), |i| prepare(clouds[i], None, &AugDraw::default(), None, cfg, DEFAULT_SIGMA_BINS))
        .into_iter()
        .collect()
}
