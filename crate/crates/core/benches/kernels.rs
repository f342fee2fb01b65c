//! Sequential vs parallel execution of the hot paths: voxelization of a
//! batch, inference, and one forward/backward training pass.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cylpose::backbone::{infer_grids, init_params, stack_grids, BackboneConfig, Net};
use cylpose::diffcore::{BnMode, Graph};
use cylpose::geom::{Frame, Point, PointCloud};
use cylpose::par::{with_exec_mode, ExecMode};
use cylpose::semitrain::prepare_eval;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [ExecMode; 2] = [ExecMode::Sequential, ExecMode::Parallel];

fn clouds(n: usize, points: usize) -> Vec<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|_| {
            let pts = (0..points)
                .map(|_| Point::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(0.0..0.9)))
                .collect();
            PointCloud::new(pts, Frame::Canonical)
        })
        .collect()
}

fn bench(c: &mut Criterion) {
    let cfg = BackboneConfig::default();
    let params = init_params::<f32>(&cfg, 0).unwrap();
    let cs = clouds(8, 4000);
    let refs: Vec<&PointCloud> = cs.iter().collect();
    let prepared = prepare_eval(&refs, &cfg).unwrap();
    let grids: Vec<_> = prepared.iter().take(4).map(|p| &p.grid).collect();

    let mut group = c.benchmark_group("kernels");
    group.sample_size(10);
    for mode in MODES {
        let label = format!("{mode:?}");
        group.bench_with_input(BenchmarkId::new("voxelize_8", &label), &mode, |b, &m| {
            b.iter(|| with_exec_mode(m, || prepare_eval(&refs, &cfg).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("infer_4", &label), &mode, |b, &m| {
            b.iter(|| with_exec_mode(m, || infer_grids(&cfg, &params, &grids).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("train_pass_4", &label), &mode, |b, &m| {
            let mut p = params.clone();
            b.iter(|| {
                with_exec_mode(m, || {
                    let mut g = Graph::new();
                    let x = g.constant(stack_grids::<f32>(&grids, &cfg.grid).unwrap());
                    let mut net = Net::new(&cfg, &p, BnMode::Train);
                    let out = net.forward(&mut g, x).unwrap();
                    let a = g.mean(out.hm_theta_r);
                    let z = g.mean(out.hm_theta_z);
                    let loss = g.add(a, z).unwrap();
                    p.zero_grads();
                    g.backward_into(loss, &mut p).unwrap();
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
