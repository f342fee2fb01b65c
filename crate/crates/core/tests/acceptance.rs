//! End-to-end acceptance checks. Every test prints one PASS/FAIL line on
//! stdout (bypassing the harness capture) and then asserts.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use cylpose::backbone::{init_params, sinusoidal_soft_argmax, BackboneConfig, BackboneError};
use cylpose::diffcore::{
    operator_suite, Graph, PadMode, ParamSet, Tensor,
};
use cylpose::evalkit::{
    dist_metric, equivariance_check, evaluate_views, group_consistency, map_metric, EquivarianceReport,
};
use cylpose::geom::{
    cyclic_shift_grid, drop_boundary_points, rotate_z, voxelize_cylindrical, wrap_angle, Frame, GridConfig, Point,
    PointCloud, ViewId, ViewRotation, BIN_BOUNDARY_EPS,
};
use cylpose::semitrain::{EpochLog, TrainConfig, TrainData, TrainMode, Trainer};
use cylpose::synthgait::{build_dataset_in_memory, Dataset, DatasetSpec, Pose, Sample, Split, SurfaceConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

/// Runs criteria one at a time so that wall-clock budgets are meaningful.
fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n:>2}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = out.flush();
    assert!(pass, "criterion {n} failed: {detail}");
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, reach: f64) -> PointCloud {
    let pts = (0..n)
        .map(|_| Point::new(rng.gen_range(-reach..reach), rng.gen_range(-reach..reach), rng.gen_range(-reach..reach)))
        .collect();
    PointCloud::new(pts, Frame::Canonical)
}

/// Edge-by-edge binning, independent of the voxelizer's index arithmetic.
fn brute_force_occupancy(cloud: &PointCloud, cfg: &GridConfig) -> Vec<u8> {
    let c = cfg.cube_len;
    let find = |v: f64, lo: f64, hi: f64| -> Option<usize> {
        let w = (hi - lo) / c as f64;
        (0..c).find(|&i| v >= lo + i as f64 * w && v < lo + (i + 1) as f64 * w)
    };
    let mut occ = vec![0u8; c * c * c];
    for p in &cloud.points {
        let theta = p.y.atan2(p.x);
        let theta = if theta >= PI { theta - 2.0 * PI } else { theta };
        let rho = (p.x * p.x + p.y * p.y).sqrt();
        let zg = (p.z + 1.0) * 0.5 * cfg.z_max;
        if let (Some(i), Some(j), Some(k)) =
            (find(theta, -PI, PI), find(rho, 0.0, cfg.rho_max), find(zg, 0.0, cfg.z_max))
        {
            occ[(i * c + j) * c + k] = 1;
        }
    }
    occ
}

#[test]
fn c01_voxelizer_matches_brute_force() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    // some points deliberately fall outside the grid
    let cloud = random_cloud(&mut rng, 10_000, 1.1);
    let mut mismatches = Vec::new();
    for c in [8, 32, 128] {
        let cfg = GridConfig { cube_len: c, ..GridConfig::default() };
        let fast = voxelize_cylindrical(&cloud, &cfg).unwrap().grid.occupancy;
        let slow = brute_force_occupancy(&cloud, &cfg);
        let diff = fast.iter().zip(&slow).filter(|(a, b)| a != b).count();
        if diff > 0 {
            mismatches.push((c, diff));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(1, mismatches.is_empty() && secs < 5.0, &format!("C in {{8,32,128}}, mismatched voxels {mismatches:?}, {secs:.2}s"));
}

#[test]
fn c02_rotation_commutes_with_voxelization() {
    let _g = serial();
    let t0 = Instant::now();
    let cfg = GridConfig::default();
    let stride = BackboneConfig::default().theta_stride() as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut failures = 0;
    let mut checks = 0;
    for _ in 0..100 {
        let n = rng.gen_range(200..1500);
        let cloud = drop_boundary_points(&random_cloud(&mut rng, n, 0.7), &cfg, BIN_BOUNDARY_EPS);
        let base = voxelize_cylindrical(&cloud, &cfg).unwrap().grid;
        for s in (0..cfg.cube_len as i64).step_by(stride as usize) {
            let rot = rotate_z(&cloud, ViewRotation::from_bins(s, cfg.cube_len));
            checks += 1;
            if voxelize_cylindrical(&rot, &cfg).unwrap().grid != cyclic_shift_grid(&base, s) {
                failures += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(2, failures == 0 && secs < 10.0, &format!("{checks} cloud/shift pairs, {failures} mismatches, {secs:.2}s"));
}

/// Untrained weights with non-trivial running statistics.
fn random_params(cfg: &BackboneConfig, seed: u64) -> ParamSet<f32> {
    let mut p = init_params::<f32>(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<_> = p.ids().collect();
    for id in ids {
        let name = p.name(id).to_string();
        let range = if name.ends_with(".mean") || name.ends_with(".beta") {
            -0.3..0.3
        } else if name.ends_with(".var") || name.ends_with(".gamma") {
            0.5..1.5
        } else if name.ends_with("out.w") {
            -0.5..0.5
        } else {
            continue;
        };
        p.value_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(range.clone()));
    }
    p
}

fn probe_clouds() -> Vec<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut clouds: Vec<PointCloud> = (0..3).map(|_| random_cloud(&mut rng, 800, 0.5)).collect();
    let spec = DatasetSpec {
        real_train: vec![(ViewId::A, 2)],
        real_test: vec![(ViewId::X2, 1)],
        groups_train: 0,
        groups_test: 0,
        identities: 1,
        surface: SurfaceConfig { density: 20_000.0, max_points: 2000, ..SurfaceConfig::default() },
        ..DatasetSpec::default()
    };
    let ds = build_dataset_in_memory(&spec, 3).unwrap();
    clouds.extend(ds.samples.iter().map(|s| s.cloud.clone()));
    clouds
}

fn equivariance_worst(cfg: &BackboneConfig, params: &ParamSet<f32>, clouds: &[PointCloud]) -> EquivarianceReport {
    let c = cfg.grid.cube_len as i64;
    let shifts: Vec<i64> = (-c..=c).step_by(cfg.theta_stride()).collect();
    let mut worst: Option<EquivarianceReport> = None;
    for cloud in clouds {
        let r = equivariance_check(cfg, params, cloud, &shifts).unwrap();
        worst = Some(match worst {
            Some(w) if w.max_heatmap_deviation >= r.max_heatmap_deviation && w.max_theta_error >= r.max_theta_error => w,
            Some(w) => EquivarianceReport {
                max_heatmap_deviation: w.max_heatmap_deviation.max(r.max_heatmap_deviation),
                max_theta_error: w.max_theta_error.max(r.max_theta_error),
                per_shift: Vec::new(),
            },
            None => r,
        });
    }
    worst.unwrap()
}

fn zero_padded(cfg: &BackboneConfig) -> BackboneConfig {
    BackboneConfig { theta_padding: PadMode::Zero, ..cfg.clone() }
}

#[test]
fn c03_architectural_equivariance() {
    let _g = serial();
    let t0 = Instant::now();
    let cfg = BackboneConfig::default();
    let params = random_params(&cfg, 7);
    let clouds = probe_clouds();
    let periodic = equivariance_worst(&cfg, &params, &clouds);
    let zero = equivariance_worst(&zero_padded(&cfg), &params, &clouds);
    let secs = t0.elapsed().as_secs_f64();
    let pass = periodic.max_heatmap_deviation <= 1e-5
        && periodic.max_theta_error <= 1e-3
        && zero.max_heatmap_deviation > 1e-5
        && secs < 60.0;
    verdict(
        3,
        pass,
        &format!(
            "periodic: heatmap dev {:.2e}, theta err {:.2e} rad; zero-padding control: heatmap dev {:.2e}, theta err {:.2e} rad; {secs:.1}s",
            periodic.max_heatmap_deviation, periodic.max_theta_error, zero.max_heatmap_deviation, zero.max_theta_error
        ),
    );
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn c04_gradient_checks() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let worst = operator_suite::<f64>(20, 404, 1e-5).unwrap();
    // stop_gradient has no finite-difference counterpart; its backward must be exactly zero
    let mut g = Graph::<f64>::new();
    let x = g.variable(rand_t(&[3, 4], &mut rng));
    let y = g.stop_gradient(x);
    let l = g.sum(y);
    let sg_ok = g.backward(l).unwrap().get(x).is_none_or(|t| t.data().iter().all(|v| *v == 0.0));
    let secs = t0.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.worst_rel_err).fold(0.0, f64::max);
    let detail = worst.iter().map(|w| format!("{} {:.1e}", w.op, w.worst_rel_err)).collect::<Vec<_>>().join(", ");
    verdict(4, max <= 1e-4 && sg_ok && secs < 120.0, &format!("20 shapes per op, worst rel err: {detail}; stop_gradient zero: {sg_ok}; {secs:.1}s"));
}

#[test]
fn c05_sinusoidal_soft_argmax() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut delta_err: f64 = 0.0;
    let mut shift_err: f64 = 0.0;
    for c in [8, 32, 128] {
        let width = 2.0 * PI / c as f64;
        for k in 0..c {
            let mut p = vec![-1e4; c];
            p[k] = 0.0;
            let got = sinusoidal_soft_argmax(&p).unwrap();
            delta_err = delta_err.max(wrap_angle(got - (-PI + (k as f64 + 0.5) * width)).abs());
        }
        for _ in 0..50 {
            let p: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let base = sinusoidal_soft_argmax(&p).unwrap();
            let s = rng.gen_range(0..c);
            let rolled: Vec<f64> = (0..c).map(|i| p[(i + c - s) % c]).collect();
            let got = sinusoidal_soft_argmax(&rolled).unwrap();
            shift_err = shift_err.max(wrap_angle(got - base - s as f64 * width).abs());
        }
    }
    let degenerate = matches!(sinusoidal_soft_argmax(&vec![0.7; 32]), Err(BackboneError::Degenerate));
    verdict(
        5,
        delta_err <= 1e-6 && shift_err <= 1e-6 && degenerate,
        &format!("delta err {delta_err:.1e} rad, shift err {shift_err:.1e} rad, uniform -> Degenerate: {degenerate}"),
    );
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let mut p = Pose::zeros();
    for j in p.joints.iter_mut() {
        *j = Point::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    }
    p
}

#[test]
fn c06_metric_oracles() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut random_ok = true;
    for _ in 0..200 {
        let n = rng.gen_range(1..20);
        let t = rng.gen_range(0.05..1.5);
        let p: Vec<Pose> = (0..n).map(|_| random_pose(&mut rng)).collect();
        let g: Vec<Pose> = (0..n).map(|_| random_pose(&mut rng)).collect();
        let d = dist_metric(&p, &g).unwrap();
        let m = map_metric(&p, &g, t).unwrap();
        for c in 0..4 {
            let mut e = Vec::new();
            for s in 0..n {
                for j in [c, c + 4] {
                    let v = p[s].joints[j] - g[s].joints[j];
                    e.push((v.x * v.x + v.y * v.y + v.z * v.z).sqrt());
                }
            }
            let k = e.len() as f64;
            let mean = e.iter().sum::<f64>() / k;
            let std = (e.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k).sqrt();
            let map = e.iter().filter(|&&x| x < t).count() as f64 / k;
            random_ok &= d[c].mean == mean && d[c].std == std && m[c] == map;
        }
    }
    let g = Pose::zeros();
    let p = g.map(|q| q + nalgebra::Vector3::new(0.03, 0.04, 0.0));
    let d = dist_metric(&[p], &[g]).unwrap();
    let tri = d.iter().all(|m| m.mean == 0.05 && m.std == 0.0);
    let mut half = g;
    for j in 4..8 {
        half.joints[j].x += 0.1;
    }
    let half_ok = map_metric(&[half], &[g], 0.05).unwrap() == [0.5; 4];
    verdict(6, random_ok && tri && half_ok, &format!("random oracle exact: {random_ok}, 3-4-5: {tri}, half detected: {half_ok}"));
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Debug, Clone)]
struct Arm {
    unseen: [f64; 4],
    seen: [f64; 4],
    consistency: f64,
    params: ParamSet<f32>,
    log: Vec<EpochLog>,
    secs: f64,
}

#[derive(Debug, Clone)]
struct SeedRun {
    seed: u64,
    phase1_secs: f64,
    dataset_secs: f64,
    semi: Arm,
    supervised: Arm,
    mixed: Arm,
    no_reg: Arm,
}

fn unseen_test(ds: &Dataset) -> Vec<&Sample> {
    ds.samples.iter().filter(|s| s.split == Split::Test && s.pose.is_some() && s.view.view_id != ViewId::A).collect()
}

fn finish_arm(base: &Trainer, ds: &Dataset, data: &TrainData, f: impl FnOnce(&mut TrainConfig)) -> Arm {
    let t0 = Instant::now();
    let mut t = base.fork(f).unwrap();
    let end = t.cfg.epochs;
    t.run_until(data, end, |_, _| {}).unwrap();
    let test = unseen_test(ds);
    let r = evaluate_views(&t.backbone, &t.params, &test, &ViewId::ALL[1..], 0.05).unwrap();
    let seen_test: Vec<&Sample> = ds.samples.iter().filter(|s| s.split == Split::Test && s.pose.is_some() && s.view.view_id == ViewId::A).collect();
    let seen = evaluate_views(&t.backbone, &t.params, &seen_test, &[ViewId::A], 0.05).unwrap();
    let consistency = group_consistency(&t.backbone, &t.params, ds).unwrap();
    Arm { unseen: r.pooled.mean_dists(), seen: seen.pooled.mean_dists(), consistency, params: t.params, log: t.log, secs: t0.elapsed().as_secs_f64() }
}

fn desk_setup(seed: u64) -> (Dataset, BackboneConfig, TrainConfig) {
    let ds = build_dataset_in_memory(&DatasetSpec::default(), seed).unwrap();
    (ds, BackboneConfig::default(), TrainConfig { seed, ..TrainConfig::desk() })
}

fn run_seed(seed: u64, only_semi: bool) -> SeedRun {
    let t0 = Instant::now();
    let (ds, bcfg, cfg) = desk_setup(seed);
    let dataset_secs = t0.elapsed().as_secs_f64();
    let data = TrainData::from_dataset(&ds, &bcfg.grid);
    let t1 = Instant::now();
    let mut base = Trainer::new(bcfg, cfg.clone()).unwrap();
    base.run_until(&data, cfg.epoch_s, |_, _| {}).unwrap();
    let phase1_secs = t1.elapsed().as_secs_f64();
    let semi = finish_arm(&base, &ds, &data, |c| c.mode = TrainMode::Semi);
    let skip = || semi.clone();
    let supervised = if only_semi { skip() } else { finish_arm(&base, &ds, &data, |c| c.mode = TrainMode::Supervised) };
    let mixed = if only_semi { skip() } else { finish_arm(&base, &ds, &data, |c| c.mode = TrainMode::Mixed) };
    let no_reg = if only_semi {
        skip()
    } else {
        finish_arm(&base, &ds, &data, |c| {
            c.mode = TrainMode::Semi;
            c.w_r = 0.0;
        })
    };
    let run = SeedRun { seed, phase1_secs, dataset_secs, semi, supervised, mixed, no_reg };
    if !only_semi {
        let mut out = std::io::stdout().lock();
        let f = |a: &Arm| format!("[{}] cons {:.4}", a.unseen.map(|v| format!("{:.4}", v)).join(" "), a.consistency);
        let _ = writeln!(
            out,
            "  seed {seed}: unseen Dist m (hip knee ankle toe): semi {} | supervised {} | mixed {} | no_reg {}",
            f(&run.semi),
            f(&run.supervised),
            f(&run.mixed),
            f(&run.no_reg)
        );
    }
    run
}

fn experiment() -> &'static Vec<SeedRun> {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| SEEDS.iter().map(|&s| run_seed(s, false)).collect())
}

fn wins(a: &[f64; 4], b: &[f64; 4]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x < y).count()
}

#[test]
fn c07_cross_view_direction() {
    let _g = serial();
    let runs = experiment();
    let mut good = 0;
    let mut rows = Vec::new();
    for r in runs {
        let both = (0..4).filter(|&c| r.semi.unseen[c] < r.supervised.unseen[c] && r.semi.unseen[c] < r.mixed.unseen[c]).count();
        if both >= 3 {
            good += 1;
        }
        rows.push(format!(
            "seed {}: vs supervised {}/4, vs mixed {}/4, both {}/4",
            r.seed,
            wins(&r.semi.unseen, &r.supervised.unseen),
            wins(&r.semi.unseen, &r.mixed.unseen),
            both
        ));
    }
    let secs: f64 = runs.iter().map(|r| r.dataset_secs + r.phase1_secs + r.semi.secs + r.supervised.secs + r.mixed.secs).sum();
    verdict(7, good >= 4 && secs <= 1800.0, &format!("{good}/5 seeds with semi best on >=3 categories ({}); {secs:.0}s", rows.join("; ")));
}

#[test]
fn c08_ablation_directions() {
    let _g = serial();
    let runs = experiment();
    let avg = |a: &[f64; 4]| a.iter().sum::<f64>() / 4.0;
    let worse = runs.iter().filter(|r| avg(&r.no_reg.unseen) > avg(&r.semi.unseen)).count();
    let rows: Vec<String> =
        runs.iter().map(|r| format!("seed {}: full {:.4} vs no_reg {:.4}", r.seed, avg(&r.semi.unseen), avg(&r.no_reg.unseen))).collect();
    let cfg = BackboneConfig::default();
    let params = random_params(&cfg, 8);
    let zero = equivariance_worst(&zero_padded(&cfg), &params, &probe_clouds());
    let zero_fails = zero.max_heatmap_deviation > 1e-5;
    let secs: f64 = runs.iter().map(|r| r.no_reg.secs).sum();
    verdict(
        8,
        worse >= 4 && zero_fails && secs <= 1800.0,
        &format!(
            "no_reg worse on mean unseen Dist for {worse}/5 seeds ({}); zero padding heatmap dev {:.2e}; {secs:.0}s",
            rows.join("; "),
            zero.max_heatmap_deviation
        ),
    );
}

#[test]
fn c09_occlusion_invariance_trend() {
    let _g = serial();
    let runs = experiment();
    let better = runs.iter().filter(|r| r.semi.consistency < r.supervised.consistency).count();
    let rows: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: semi {:.4} vs supervised {:.4}", r.seed, r.semi.consistency, r.supervised.consistency))
        .collect();
    verdict(9, better >= 4, &format!("pairwise group Dist lower after semi training for {better}/5 seeds ({})", rows.join("; ")));
}

#[test]
fn c10_determinism() {
    let _g = serial();
    let runs = experiment();
    let first = &runs[0];
    let again = run_seed(first.seed, true);
    let strip = |l: &[EpochLog]| l.iter().map(|e| (e.epoch, e.l_s, e.l_m, e.l_reg, e.total)).collect::<Vec<_>>();
    let same_params = again.semi.params == first.semi.params;
    let same_metrics = again.semi.unseen == first.semi.unseen && again.semi.consistency == first.semi.consistency;
    let same_log = strip(&again.semi.log) == strip(&first.semi.log);
    verdict(
        10,
        same_params && same_metrics && same_log,
        &format!("seed {} rerun: params identical {same_params}, metrics identical {same_metrics}, loss log identical {same_log}", first.seed),
    );
}

/// The supervised-only arm should do better on the view it was trained on.
#[test]
fn supervised_arm_generalization_gap() {
    let _g = serial();
    let runs = experiment();
    let mean = |d: &[f64; 4]| d.iter().sum::<f64>() / 4.0;
    let gap = runs.iter().filter(|r| mean(&r.supervised.seen) < mean(&r.supervised.unseen)).count();
    let rows: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: seen {:.4} unseen {:.4}", r.seed, mean(&r.supervised.seen), mean(&r.supervised.unseen)))
        .collect();
    let pass = gap >= 4;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "generalization gap: {} | seen-view Dist below unseen for {gap}/5 seeds ({})", if pass { "PASS" } else { "FAIL" }, rows.join("; "));
    drop(out);
    assert!(pass);
}
