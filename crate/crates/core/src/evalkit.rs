//! Metrics, evaluation protocols and the equivariance/invariance harnesses.
//!
//! Distances are reported in meters: predictions are decoded in the
//! normalized frame and mapped back with the inverse normalization before
//! they are compared with ground truth.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{decode, forward, infer_grids, BackboneConfig, BackboneError, HeatmapPair};
use crate::diffcore::{PadMode, ParamSet};
use crate::geom::{
    drop_boundary_points, minmax_normalize, rotate_z, wrap_angle, PointCloud, ViewId, ViewRotation, BIN_BOUNDARY_EPS,
};
use crate::semitrain::{prepare_eval, TrainConfig, TrainData, TrainError, Trainer};
use crate::synthgait::{derive_seed, Dataset, JointCategory, Pose, Sample, Split, NUM_JOINTS};

/// Detection threshold used by default: 5 cm.
pub const DEFAULT_THRESHOLD_M: f64 = 0.05;

pub const CATEGORIES: [JointCategory; 4] = JointCategory::ALL;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{preds} predictions for {gts} ground-truth poses")]
    LengthMismatch { preds: usize, gts: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("threshold must be positive, got {0}")]
    Threshold(f64),
    #[error("shift {shift} is not a multiple of the θ stride {stride}")]
    InvalidShift { shift: i64, stride: usize },
    #[error("a group needs at least 2 members, got {0}")]
    GroupTooSmall(usize),
    #[error("dataset lacks {0}")]
    Missing(String),
    #[error("sample {0} has no label")]
    Unlabeled(usize),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

fn check_lengths(preds: &[Pose], gts: &[Pose]) -> Result<(), EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), gts: gts.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Per-category joint errors, left and right pooled, in sample order.
fn category_errors(preds: &[Pose], gts: &[Pose]) -> [Vec<f64>; 4] {
    let mut out: [Vec<f64>; 4] = Default::default();
    for (p, g) in preds.iter().zip(gts) {
        for j in 0..NUM_JOINTS {
            out[j % 4].push((p.joints[j] - g.joints[j]).norm());
        }
    }
    out
}

/// Mean ± std Euclidean joint error per category.
pub fn dist_metric(preds: &[Pose], gts: &[Pose]) -> Result<[MeanStd; 4], EvalError> {
    check_lengths(preds, gts)?;
    Ok(category_errors(preds, gts).map(|e| {
        let n = e.len() as f64;
        let mean = e.iter().sum::<f64>() / n;
        let var = e.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }))
}

/// Fraction of joints per category whose error is below `threshold`.
pub fn map_metric(preds: &[Pose], gts: &[Pose], threshold: f64) -> Result<[f64; 4], EvalError> {
    if !(threshold > 0.0) {
        return Err(EvalError::Threshold(threshold));
    }
    check_lengths(preds, gts)?;
    Ok(category_errors(preds, gts).map(|e| e.iter().filter(|&&d| d < threshold).count() as f64 / e.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub dist: MeanStd,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub categories: Vec<CategoryReport>,
    pub threshold: f64,
    pub samples: usize,
}

impl MetricReport {
    pub fn new(preds: &[Pose], gts: &[Pose], threshold: f64) -> Result<Self, EvalError> {
        let dist = dist_metric(preds, gts)?;
        let map = map_metric(preds, gts, threshold)?;
        let categories = CATEGORIES
            .iter()
            .enumerate()
            .map(|(i, c)| CategoryReport { category: c.name().to_string(), dist: dist[i], map: map[i] })
            .collect();
        Ok(Self { categories, threshold, samples: preds.len() })
    }

    pub fn mean_dists(&self) -> [f64; 4] {
        std::array::from_fn(|i| self.categories[i].dist.mean)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_header() -> String {
        let mut s = String::from("label,samples");
        for c in CATEGORIES {
            let n = c.name();
            let _ = write!(s, ",{n}_dist_mean,{n}_dist_std,{n}_map");
        }
        s
    }

    pub fn csv_row(&self, label: &str) -> String {
        let mut s = format!("{label},{}", self.samples);
        for c in &self.categories {
            let _ = write!(s, ",{:.6},{:.6},{:.4}", c.dist.mean, c.dist.std, c.map);
        }
        s
    }
}

/// CSV table with one row per labeled report.
pub fn comparison_csv(rows: &[(String, MetricReport)]) -> String {
    let mut s = MetricReport::csv_header();
    s.push('\n');
    for (label, r) in rows {
        s.push_str(&r.csv_row(label));
        s.push('\n');
    }
    s
}

/// Metric-frame predictions for labeled or unlabeled samples, each
/// normalized by its own bounds.
pub fn predict_samples(cfg: &BackboneConfig, params: &ParamSet<f32>, samples: &[&Sample], chunk: usize) -> Result<Vec<Pose>, EvalError> {
    let clouds: Vec<&PointCloud> = samples.iter().map(|s| &s.cloud).collect();
    let prepared = prepare_eval(&clouds, cfg)?;
    let mut out = Vec::with_capacity(samples.len());
    for part in prepared.chunks(chunk.max(1)) {
        let grids: Vec<_> = part.iter().map(|p| &p.grid).collect();
        for (hm, p) in infer_grids(cfg, params, &grids)?.iter().zip(part) {
            out.push(decode(hm, cfg)?.to_metric(&p.transform));
        }
    }
    Ok(out)
}

/// Report over labeled samples.
pub fn evaluate(cfg: &BackboneConfig, params: &ParamSet<f32>, samples: &[&Sample], threshold: f64) -> Result<MetricReport, EvalError> {
    let gts = samples.iter().map(|s| s.pose.ok_or(EvalError::Unlabeled(s.id))).collect::<Result<Vec<_>, _>>()?;
    let preds = predict_samples(cfg, params, samples, 16)?;
    MetricReport::new(&preds, &gts, threshold)
}

/// Per-view reports and the report pooled over all given views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewReports {
    pub per_view: Vec<(ViewId, MetricReport)>,
    pub pooled: MetricReport,
}

pub fn evaluate_views(
    cfg: &BackboneConfig,
    params: &ParamSet<f32>,
    samples: &[&Sample],
    views: &[ViewId],
    threshold: f64,
) -> Result<ViewReports, EvalError> {
    let chosen: Vec<&Sample> = samples.iter().copied().filter(|s| views.contains(&s.view.view_id)).collect();
    let gts = chosen.iter().map(|s| s.pose.ok_or(EvalError::Unlabeled(s.id))).collect::<Result<Vec<_>, _>>()?;
    let preds = predict_samples(cfg, params, &chosen, 16)?;
    let mut per_view = Vec::new();
    for &v in views {
        let idx: Vec<usize> = (0..chosen.len()).filter(|&i| chosen[i].view.view_id == v).collect();
        if idx.is_empty() {
            return Err(EvalError::Missing(format!("test samples for view {v:?}")));
        }
        let p: Vec<Pose> = idx.iter().map(|&i| preds[i]).collect();
        let g: Vec<Pose> = idx.iter().map(|&i| gts[i]).collect();
        per_view.push((v, MetricReport::new(&p, &g, threshold)?));
    }
    Ok(ViewReports { per_view, pooled: MetricReport::new(&preds, &gts, threshold)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ProtocolKind {
    /// Cross-subject: identities split between training and testing.
    Cs,
    /// Cross-view: train on view A, test on every other view.
    Cv,
    /// Both at once.
    #[serde(rename = "CV_CS")]
    CvCs,
}

impl std::str::FromStr for ProtocolKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "CS" => Ok(Self::Cs),
            "CV" => Ok(Self::Cv),
            "CV_CS" => Ok(Self::CvCs),
            _ => Err(format!("unknown protocol {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    pub train_views: Vec<ViewId>,
    pub test_views: Vec<ViewId>,
    /// Number of identity folds for the cross-subject variants.
    pub folds: usize,
    /// Seeds the identity-to-fold assignment.
    pub split_seed: u64,
}

impl ProtocolSpec {
    pub fn new(kind: ProtocolKind, folds: usize, split_seed: u64) -> Self {
        let (train_views, test_views) = match kind {
            ProtocolKind::Cs => (vec![ViewId::A], vec![ViewId::A]),
            _ => (vec![ViewId::A], ViewId::ALL[1..].to_vec()),
        };
        let folds = if kind == ProtocolKind::Cv { 1 } else { folds };
        Self { kind, train_views, test_views, folds, split_seed }
    }

    pub fn splits_identities(&self) -> bool {
        self.kind != ProtocolKind::Cv
    }

    /// Fold index of every identity in `0..identities`.
    pub fn fold_of_identities(&self, identities: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..identities).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.split_seed, 40, 0)));
        let mut fold = vec![0; identities];
        for (rank, id) in ids.into_iter().enumerate() {
            fold[id] = rank % self.folds.max(1);
        }
        fold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_identities: Vec<usize>,
    pub reports: ViewReports,
}

/// Trains once per fold with `train_fn` and evaluates the held-out views.
pub fn run_protocol<F>(
    spec: &ProtocolSpec,
    dataset: &Dataset,
    cfg: &BackboneConfig,
    threshold: f64,
    mut train_fn: F,
) -> Result<Vec<FoldReport>, EvalError>
where
    F: FnMut(usize, &TrainData) -> Result<ParamSet<f32>, EvalError>,
{
    let identities = dataset.identities.len();
    if spec.folds == 0 || (spec.splits_identities() && spec.folds > identities) {
        return Err(EvalError::Missing(format!("{identities} identities for {} folds", spec.folds)));
    }
    let fold_of = spec.fold_of_identities(identities);
    let test: Vec<&Sample> = dataset.samples.iter().filter(|s| s.split == Split::Test && s.pose.is_some()).collect();
    let mut out = Vec::new();
    for fold in 0..spec.folds {
        let held = |s: &Sample| spec.splits_identities() && s.identity.is_some_and(|i| fold_of[i] == fold);
        let data = TrainData::from_dataset(dataset, &cfg.grid)
            .filter_labeled(|s| spec.train_views.contains(&s.view.view_id) && !held(s));
        if data.labeled.is_empty() {
            return Err(EvalError::Missing(format!("labeled training samples for fold {fold}")));
        }
        let fold_test: Vec<&Sample> =
            test.iter().copied().filter(|s| !spec.splits_identities() || held(s)).collect();
        let params = train_fn(fold, &data)?;
        let reports = evaluate_views(cfg, &params, &fold_test, &spec.test_views, threshold)?;
        let test_identities = (0..identities).filter(|&i| spec.splits_identities() && fold_of[i] == fold).collect();
        out.push(FoldReport { fold, test_identities, reports });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftDeviation {
    pub shift: i64,
    pub heatmap: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub max_heatmap_deviation: f64,
    pub max_theta_error: f64,
    pub per_shift: Vec<ShiftDeviation>,
}

/// Compares the network on a cloud rotated by `2πs/C` against the
/// cyclically shifted output on the original. The cloud is normalized
/// once and points near bin boundaries are removed, so the voxel grids
/// of both inputs are exact shifts of each other.
pub fn equivariance_check(
    cfg: &BackboneConfig,
    params: &ParamSet<f32>,
    cloud: &PointCloud,
    shifts: &[i64],
) -> Result<EquivarianceReport, EvalError> {
    let stride = cfg.theta_stride();
    if let Some(&s) = shifts.iter().find(|&&s| s.rem_euclid(stride as i64) != 0) {
        return Err(EvalError::InvalidShift { shift: s, stride });
    }
    let (normed, _) = minmax_normalize(cloud).map_err(BackboneError::from)?;
    let base_cloud = drop_boundary_points(&normed, &cfg.grid, BIN_BOUNDARY_EPS);
    let (base, base_kp) = forward(cfg, params, &base_cloud)?;
    let c = cfg.grid.cube_len;
    let mut per_shift = Vec::new();
    for &s in shifts {
        let rotated = rotate_z(&base_cloud, ViewRotation::from_bins(s, c));
        let (hm, kp) = forward(cfg, params, &rotated)?;
        let heatmap = hm.max_abs_diff(&base.roll_theta(s));
        let delta = 2.0 * PI * s as f64 / c as f64;
        let theta = kp
            .theta
            .iter()
            .zip(&base_kp.theta)
            .map(|(a, b)| wrap_angle(a - b - delta).abs())
            .fold(0.0, f64::max);
        per_shift.push(ShiftDeviation { shift: s, heatmap, theta });
    }
    Ok(EquivarianceReport {
        max_heatmap_deviation: per_shift.iter().map(|d| d.heatmap).fold(0.0, f64::max),
        max_theta_error: per_shift.iter().map(|d| d.theta).fold(0.0, f64::max),
        per_shift,
    })
}

/// Pairwise mean joint distance (meters) between the decoded keypoints of
/// every member of a canonical group.
pub fn invariance_check(cfg: &BackboneConfig, params: &ParamSet<f32>, group: &[&Sample]) -> Result<Vec<Vec<f64>>, EvalError> {
    if group.len() < 2 {
        return Err(EvalError::GroupTooSmall(group.len()));
    }
    let preds = predict_samples(cfg, params, group, 8)?;
    let n = preds.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = (0..NUM_JOINTS).map(|k| (preds[i].joints[k] - preds[j].joints[k]).norm()).sum::<f64>() / NUM_JOINTS as f64;
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    Ok(m)
}

pub fn mean_off_diagonal(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut s = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                s += v;
            }
        }
    }
    s / (n * (n - 1)) as f64
}

/// Mean pairwise distance over every held-out group of `dataset`.
pub fn group_consistency(cfg: &BackboneConfig, params: &ParamSet<f32>, dataset: &Dataset) -> Result<f64, EvalError> {
    let groups = dataset.groups(Split::Test);
    if groups.is_empty() {
        return Err(EvalError::Missing("held-out groups".into()));
    }
    let mut total = 0.0;
    for g in &groups {
        total += mean_off_diagonal(&invariance_check(cfg, params, g)?);
    }
    Ok(total / groups.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub unseen: MetricReport,
    pub equivariance: EquivarianceReport,
}

/// Three runs from the same seed: the full method, without the
/// regularization loss, and with zero padding along θ.
pub fn ablation_suite(
    dataset: &Dataset,
    backbone: &BackboneConfig,
    train: &TrainConfig,
    threshold: f64,
) -> Result<Vec<AblationArm>, EvalError> {
    let data = TrainData::from_dataset(dataset, &backbone.grid);
    let test: Vec<&Sample> = dataset.samples.iter().filter(|s| s.split == Split::Test && s.pose.is_some()).collect();
    let probe = test.first().ok_or_else(|| EvalError::Missing("test samples".into()))?;
    let c = backbone.grid.cube_len as i64;
    let stride = backbone.theta_stride() as i64;
    let shifts: Vec<i64> = (0..=c).step_by(stride as usize).collect();
    let mut zero = backbone.clone();
    zero.theta_padding = PadMode::Zero;
    let arms = [
        ("full", backbone.clone(), train.clone()),
        ("no_reg", backbone.clone(), TrainConfig { w_r: 0.0, ..train.clone() }),
        ("no_periodic", zero, train.clone()),
    ];
    let mut out = Vec::new();
    for (name, bcfg, tcfg) in arms {
        let mut t = Trainer::new(bcfg.clone(), tcfg.clone())?;
        t.run_until(&data, tcfg.epochs, |_, _| {})?;
        let unseen = evaluate_views(&bcfg, &t.params, &test, &ViewId::ALL[1..], threshold)?.pooled;
        let equivariance = equivariance_check(&bcfg, &t.params, &probe.cloud, &shifts)?;
        out.push(AblationArm { name: name.into(), unseen, equivariance });
    }
    Ok(out)
}

/// Heatmap pair of the first prediction, handy for plots.
pub fn heatmaps_for(cfg: &BackboneConfig, params: &ParamSet<f32>, sample: &Sample) -> Result<HeatmapPair, EvalError> {
    let p = prepare_eval(&[&sample.cloud], cfg)?.remove(0);
    Ok(infer_grids(cfg, params, &[&p.grid])?.remove(0))
}
