//! Central-difference gradient verification. Meaningful tolerances need
//! `f64`; `f32` runs only catch gross errors.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{BnMode, Graph, Var};
use super::kernels::{AnisoPad, AnisoSpec, AxisPad, Conv2dSpec, PadSpec};
use super::params::ParamSet;
use super::tensor::{Scalar, Tensor};
use super::DiffError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub h: f64,
    /// Tensors larger than this are checked on a random subset of coordinates.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, max_coords: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub name: String,
    pub coords: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the checked coordinates.
    pub rel_err: f64,
}

pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Compares backprop gradients of every trainable entry of `params` against
/// finite differences of the scalar built by `loss`.
pub fn check_params<F, L>(params: &mut ParamSet<F>, loss: L, cfg: &GradCheckConfig) -> Result<Vec<GradCheckResult>, DiffError>
where
    F: Scalar,
    L: Fn(&mut Graph<F>, &ParamSet<F>) -> Result<Var, DiffError>,
{
    let eval = |p: &ParamSet<F>| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let l = loss(&mut g, p)?;
        Ok(g.value(l).item().as_f64())
    };
    params.zero_grads();
    {
        let mut g = Graph::new();
        let l = loss(&mut g, params)?;
        g.backward_into(l, params)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let ids: Vec<_> = params.ids().filter(|&id| params.is_trainable(id)).collect();
    for id in ids {
        let n = params.value(id).numel();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let analytic: Vec<f64> = coords.iter().map(|&i| params.grad(id).data()[i].as_f64()).collect();
        let mut numeric = Vec::with_capacity(coords.len());
        for &i in &coords {
            let orig = params.value(id).data()[i];
            let (up, down) = (orig + F::from_f64(cfg.h), orig - F::from_f64(cfg.h));
            params.value_mut(id).data_mut()[i] = up;
            let lp = eval(params)?;
            params.value_mut(id).data_mut()[i] = down;
            let lm = eval(params)?;
            params.value_mut(id).data_mut()[i] = orig;
            // the actual step, which differs from 2h after rounding in f32
            numeric.push((lp - lm) / (up - down).as_f64());
        }
        out.push(GradCheckResult {
            name: params.name(id).to_string(),
            coords: coords.len(),
            rel_err: relative_error(&analytic, &numeric),
        });
    }
    Ok(out)
}

type Build<F> = Box<dyn Fn(&mut Graph<F>, &[Var]) -> Result<Var, DiffError>>;
type Maker<F> = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor<F>>, Build<F>)>;

fn op<F: Scalar>(f: impl Fn(&mut Graph<F>, &[Var]) -> Result<Var, DiffError> + 'static) -> Build<F> {
    Box::new(f)
}

fn rand_t<F: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::from_f64(rng.gen_range(-1.0..1.0)))
}

/// Away from zero so that relu has a derivative at every probe.
fn rand_nonzero<F: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<F> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        F::from_f64(if rng.gen_bool(0.5) { v } else { -v })
    })
}

fn random_shape(r: &mut ChaCha8Rng, max_rank: usize) -> Vec<usize> {
    let rank = r.gen_range(1..=max_rank);
    (0..rank).map(|_| r.gen_range(1..=4)).collect()
}

fn with_bias<F: Scalar>(mut inputs: Vec<Tensor<F>>, co: usize, r: &mut ChaCha8Rng) -> Vec<Tensor<F>> {
    if r.gen_bool(0.5) {
        inputs.push(rand_t(&[co], r));
    }
    inputs
}

/// Random-shape generators for every differentiable operator.
fn operators<F: Scalar>() -> Vec<(&'static str, Maker<F>)> {
    let mut ops: Vec<(&'static str, Maker<F>)> = Vec::new();
    ops.push((
        "conv2d",
        Box::new(|r| {
            let (n, ci, co) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
            let k = [1, 3, 5][r.gen_range(0..3)];
            let s = r.gen_range(1..=2);
            let h = s * r.gen_range(k.max(2)..=k.max(2) + 2);
            let w = r.gen_range(k..=k + 3);
            let hp = if r.gen_bool(0.5) { AxisPad::periodic(k / 2) } else { AxisPad::zero(k / 2) };
            let spec = Conv2dSpec { stride: [s, r.gen_range(1..=2)], pad: PadSpec::new(hp, AxisPad::zero(r.gen_range(0..=k / 2))) };
            let inputs = with_bias(vec![rand_t(&[n, ci, h, w], r), rand_t(&[co, ci, k, k], r)], co, r);
            (inputs, op(move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), &spec)))
        }),
    ));
    ops.push((
        "deconv2d",
        Box::new(|r| {
            let (n, ci, co) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
            let (k, s, p) = [(4, 2, 1), (3, 1, 1), (2, 2, 0), (3, 2, 1)][r.gen_range(0..4)];
            let (h, w) = (r.gen_range(2..=4), r.gen_range(2..=4));
            let hp = if r.gen_bool(0.5) { AxisPad::periodic(p) } else { AxisPad::zero(p) };
            let spec = Conv2dSpec { stride: [s, s], pad: PadSpec::new(hp, AxisPad::zero(p)) };
            let inputs = with_bias(vec![rand_t(&[n, ci, h, w], r), rand_t(&[ci, co, k, k], r)], co, r);
            (inputs, op(move |g, v| g.deconv2d(v[0], v[1], v.get(2).copied(), &spec)))
        }),
    ));
    ops.push((
        "conv3d_aniso",
        Box::new(|r| {
            let (n, ci, co) = (r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=3));
            let dims = [r.gen_range(3..=6), r.gen_range(3..=6), r.gen_range(3..=6)];
            let axis = r.gen_range(0..3);
            let pad = [AnisoPad::Same, AnisoPad::Periodic, AnisoPad::Valid][r.gen_range(0..3)];
            let k = if pad == AnisoPad::Valid { r.gen_range(1..=dims[axis]) } else { [1, 3][r.gen_range(0..2)] };
            let inputs = with_bias(vec![rand_t(&[n, ci, dims[0], dims[1], dims[2]], r), rand_t(&[co, ci, k], r)], co, r);
            let spec = AnisoSpec { axis, pad };
            (inputs, op(move |g, v| g.conv3d_aniso(v[0], v[1], v.get(2).copied(), &spec)))
        }),
    ));
    for (name, mode) in [("batchnorm_train", BnMode::Train), ("batchnorm_infer", BnMode::Infer)] {
        ops.push((
            name,
            Box::new(move |r| {
                let c = r.gen_range(1..=3);
                let shape = [r.gen_range(1..=3), c, r.gen_range(1..=4), r.gen_range(2..=4)];
                let rm = rand_t::<F>(&[c], r);
                let rv = Tensor::from_fn(&[c], |_| F::from_f64(r.gen_range(0.5..1.5)));
                let inputs = vec![rand_t(&shape, r), rand_t(&[c], r), rand_t(&[c], r)];
                (inputs, op(move |g, v| g.batchnorm(v[0], v[1], v[2], (&rm, &rv), mode).map(|(y, _)| y)))
            }),
        ));
    }
    ops.push(("relu", Box::new(|r| (vec![rand_nonzero(&random_shape(r, 4), r)], op(|g, v| Ok(g.relu(v[0])))))));
    ops.push((
        "add",
        Box::new(|r| {
            let shape = random_shape(r, 4);
            (vec![rand_t(&shape, r), rand_t(&shape, r)], op(|g, v| g.add(v[0], v[1])))
        }),
    ));
    ops.push((
        "scale",
        Box::new(|r| {
            let shape = random_shape(r, 4);
            let k = r.gen_range(-3.0..3.0);
            (vec![rand_t(&shape, r)], op(move |g, v| Ok(g.scale(v[0], k))))
        }),
    ));
    ops.push((
        "softmax",
        Box::new(|r| {
            let shape = random_shape(r, 4);
            let axes = r.gen_range(1..=shape.len());
            (vec![rand_t(&shape, r)], op(move |g, v| g.softmax(v[0], axes)))
        }),
    ));
    ops.push((
        "logsumexp",
        Box::new(|r| {
            let mut shape = random_shape(r, 3);
            shape.push(r.gen_range(1..=5));
            (vec![rand_t(&shape, r)], op(|g, v| g.logsumexp(v[0])))
        }),
    ));
    ops.push((
        "mse",
        Box::new(|r| {
            let shape = random_shape(r, 4);
            (vec![rand_t(&shape, r), rand_t(&shape, r)], op(|g, v| g.mse(v[0], v[1])))
        }),
    ));
    ops.push(("sum", Box::new(|r| (vec![rand_t(&random_shape(r, 4), r)], op(|g, v| Ok(g.sum(v[0])))))));
    ops.push(("mean", Box::new(|r| (vec![rand_t(&random_shape(r, 4), r)], op(|g, v| Ok(g.mean(v[0])))))));
    ops.push((
        "dot_const",
        Box::new(|r| {
            let shape = random_shape(r, 4);
            let w = rand_t::<F>(&shape, r);
            (vec![rand_t(&shape, r)], op(move |g, v| g.dot_const(v[0], w.clone())))
        }),
    ));
    ops.push((
        "slice_batch",
        Box::new(|r| {
            let mut shape = random_shape(r, 3);
            let n = r.gen_range(2..=4);
            shape.insert(0, n);
            let start = r.gen_range(0..n);
            let len = r.gen_range(1..=n - start);
            (vec![rand_t(&shape, r)], op(move |g, v| g.slice_batch(v[0], start, len)))
        }),
    ));
    ops.push((
        "reshape",
        Box::new(|r| {
            let shape = random_shape(r, 4);
            let n: usize = shape.iter().product();
            (vec![rand_t(&shape, r)], op(move |g, v| g.reshape(v[0], &[n])))
        }),
    ));
    ops
}

/// Worst relative error of one operator over its random cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorCheck {
    pub op: String,
    pub cases: usize,
    pub worst_rel_err: f64,
}

/// Largest relative error of `build` over its inputs, with the output
/// projected onto a fixed random tensor to get a scalar loss.
fn check_case<F: Scalar>(inputs: Vec<Tensor<F>>, build: Build<F>, cfg: &GradCheckConfig) -> Result<f64, DiffError> {
    let mut params = ParamSet::<F>::new();
    let ids = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| params.add(format!("in{i}"), t, true))
        .collect::<Result<Vec<_>, _>>()?;
    let mut g = Graph::new();
    let vars: Vec<Var> = ids.iter().map(|&id| g.param(&params, id)).collect();
    let out = build(&mut g, &vars)?;
    let shape = g.value(out).shape().to_vec();
    let proj = (!shape.is_empty()).then(|| rand_t::<F>(&shape, &mut ChaCha8Rng::seed_from_u64(cfg.seed)));
    let res = check_params(
        &mut params,
        |g, p| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(p, id)).collect();
            let out = build(g, &vars)?;
            match &proj {
                Some(r) => g.dot_const(out, r.clone()),
                None => Ok(out),
            }
        },
        cfg,
    )?;
    Ok(res.iter().map(|r| r.rel_err).fold(0.0, f64::max))
}

/// Runs `cases` random shapes through every differentiable operator.
pub fn operator_suite<F: Scalar>(cases: usize, seed: u64, h: f64) -> Result<Vec<OperatorCheck>, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, make) in operators::<F>() {
        let mut worst: f64 = 0.0;
        for case in 0..cases {
            let (inputs, build) = make(&mut rng);
            let cfg = GradCheckConfig { h, max_coords: 24, seed: seed.wrapping_add(case as u64) };
            worst = worst.max(check_case(inputs, build, &cfg)?);
        }
        out.push(OperatorCheck { op: name.to_string(), cases, worst_rel_err: worst });
    }
    Ok(out)
}
