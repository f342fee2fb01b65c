//! Tape of tensor operations with reverse-mode accumulation.

use super::kernels::{self, AnisoGeom, AnisoSpec, Conv2dSpec, PlanarGeom};
use super::params::{ParamId, ParamSet};
use super::tensor::{Scalar, Tensor};
use super::DiffError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

pub const BN_EPS: f64 = 1e-5;

/// Batch statistics observed by a train-mode batch norm (unbiased variance).
#[derive(Debug, Clone)]
pub struct BnBatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

enum Op<F> {
    Leaf { param: Option<ParamId> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: PlanarGeom },
    Deconv2d { x: Var, w: Var, b: Option<Var>, geom: PlanarGeom },
    Aniso { x: Var, w: Var, b: Option<Var>, geom: AnisoGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, x_hat: Vec<F>, inv_std: Vec<F>, train: bool },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: F },
    Softmax { x: Var, inner: usize },
    LogSumExp { x: Var, inner: usize },
    Mse { a: Var, b: Var },
    Sum { x: Var },
    Dot { x: Var, w: Tensor<F> },
    Slice { x: Var, start: usize },
    Reshape { x: Var },
    StopGrad,
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// A single forward pass. Nodes are appended in evaluation order, so the
/// reverse of insertion order is a valid backward schedule.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every node that required one, indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Free leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf { param: None }, true)
    }

    /// Leaf bound to a parameter; trainable parameters receive gradients.
    pub fn param(&mut self, params: &ParamSet<F>, id: ParamId) -> Var {
        let trainable = params.is_trainable(id);
        self.push(params.value(id).clone(), Op::Leaf { param: Some(id) }, trainable)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &Conv2dSpec) -> Result<Var, DiffError> {
        let geom = PlanarGeom::conv(self.value(x).shape(), self.value(w).shape(), spec)?;
        check_bias(self, b, geom.co)?;
        let out = kernels::conv2d_forward(&geom, self.value(x), self.value(w), b.map(|b| self.value(b)));
        let ng = self.ng(&[x, w]) || b.is_some_and(|b| self.needs_grad(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Transposed convolution with weight `[Cin, Cout, KH, KW]`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &Conv2dSpec) -> Result<Var, DiffError> {
        let geom = PlanarGeom::deconv(self.value(x).shape(), self.value(w).shape(), spec)?;
        check_bias(self, b, geom.co)?;
        let out = kernels::deconv2d_forward(&geom, self.value(x), self.value(w), b.map(|b| self.value(b)));
        let ng = self.ng(&[x, w]) || b.is_some_and(|b| self.needs_grad(b));
        Ok(self.push(out, Op::Deconv2d { x, w, b, geom }, ng))
    }

    pub fn conv3d_aniso(&mut self, x: Var, w: Var, b: Option<Var>, spec: &AnisoSpec) -> Result<Var, DiffError> {
        let geom = AnisoGeom::new(self.value(x).shape(), self.value(w).shape(), spec)?;
        check_bias(self, b, geom.co)?;
        let out = kernels::aniso_forward(&geom, self.value(x), self.value(w), b.map(|b| self.value(b)));
        let ng = self.ng(&[x, w]) || b.is_some_and(|b| self.needs_grad(b));
        Ok(self.push(out, Op::Aniso { x, w, b, geom }, ng))
    }

    /// Per-channel normalization of `[N, C, ...]`. In train mode returns the
    /// batch statistics so the caller can update running estimates.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&Tensor<F>, &Tensor<F>),
        mode: BnMode,
    ) -> Result<(Var, Option<BnBatchStats<F>>), DiffError> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(DiffError::Shape(format!("batchnorm: expected [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        for t in [self.value(gamma), self.value(beta), running.0, running.1] {
            if t.numel() != c {
                return Err(DiffError::Shape(format!("batchnorm: per-channel tensor has {} entries, need {c}", t.numel())));
            }
        }
        let m = n * s;
        let eps = F::from_f64(BN_EPS);
        let xd = self.value(x).data();
        let (mean, var_biased): (Vec<F>, Vec<F>) = match mode {
            BnMode::Train => (0..c)
                .map(|ch| {
                    let planes = || (0..n).map(|ni| &xd[(ni * c + ch) * s..][..s]);
                    let mu = planes().map(lane_sum).sum::<f64>() / m as f64;
                    let var = planes().map(|p| lane_sq_dev(p, mu)).sum::<f64>() / m as f64;
                    (F::from_f64(mu), F::from_f64(var))
                })
                .unzip(),
            BnMode::Infer => (running.0.data().to_vec(), running.1.data().to_vec()),
        };
        let inv_std: Vec<F> = var_biased.iter().map(|v| F::one() / (*v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut x_hat = vec![F::zero(); xd.len()];
        let mut out = Tensor::zeros(&shape);
        {
            let od = out.data_mut();
            for (idx, ((xs, hs), os)) in xd.chunks(s).zip(x_hat.chunks_mut(s)).zip(od.chunks_mut(s)).enumerate() {
                let ch = idx % c;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                for ((x, h), o) in xs.iter().zip(hs.iter_mut()).zip(os.iter_mut()) {
                    *h = (*x - mu) * is;
                    *o = ga * *h + be;
                }
            }
        }
        let stats = (mode == BnMode::Train).then(|| {
            let corr = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
            BnBatchStats {
                mean: mean.clone(),
                var: var_biased.iter().map(|v| F::from_f64(v.as_f64() * corr)).collect(),
            }
        });
        let ng = self.ng(&[x, gamma, beta]);
        let v = self.push(
            out,
            Op::BatchNorm { x, gamma, beta, x_hat, inv_std, train: mode == BnMode::Train },
            ng,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| {
            if *v < F::zero() {
                *v = F::zero()
            }
        });
        let ng = self.ng(&[x]);
        self.push(out, Op::Relu { x }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        same_shape(self, a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = F::from_f64(c);
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale { x, c }, ng)
    }

    /// Softmax jointly over the trailing `axes` dimensions.
    pub fn softmax(&mut self, x: Var, axes: usize) -> Result<Var, DiffError> {
        let inner = trailing(self.value(x).shape(), axes)?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(inner) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Softmax { x, inner }, ng))
    }

    /// `log Σ exp` over the last axis, which is removed from the shape.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var, DiffError> {
        let shape = self.value(x).shape().to_vec();
        let inner = trailing(&shape, 1)?;
        let out_shape = &shape[..shape.len() - 1];
        let data: Vec<F> = self.value(x).data().chunks(inner).map(lse).collect();
        let out = Tensor::from_vec(if out_shape.is_empty() { &[1] } else { out_shape }, data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::LogSumExp { x, inner }, ng))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        same_shape(self, a, b, "mse")?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let s: f64 = ad.iter().zip(bd).map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2)).sum();
        let out = Tensor::scalar(F::from_f64(s / ad.len() as f64));
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mse { a, b }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(F::from_f64(self.value(x).sum_f64()));
        let ng = self.ng(&[x]);
        self.push(out, Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ x ⊙ w` against a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, w: Tensor<F>) -> Result<Var, DiffError> {
        if self.value(x).shape() != w.shape() {
            return Err(DiffError::Shape("dot_const: shape mismatch".into()));
        }
        let s: f64 = self.value(x).data().iter().zip(w.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(F::from_f64(s)), Op::Dot { x, w }, ng))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let shape = self.value(x).shape().to_vec();
        if shape.is_empty() || len == 0 || start + len > shape[0] {
            return Err(DiffError::Shape(format!("slice_batch {start}+{len} of {shape:?}")));
        }
        let row: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let out = Tensor::from_vec(&out_shape, data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Slice { x, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let out = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape { x }, ng))
    }

    /// Identity in the forward pass; blocks gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGrad, false)
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, DiffError> {
        if self.value(loss).numel() != 1 {
            return Err(DiffError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf { .. }) {
                grads[idx] = Some(g);
                continue;
            }
            for (v, contrib) in self.node_backward(node, &g) {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `params`.
    /// Repeated calls accumulate.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet<F>) -> Result<Gradients<F>, DiffError> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, &grads.grads[i]) {
                params.accumulate_grad(*id, g);
            }
        }
        Ok(grads)
    }

    fn node_backward(&self, node: &Node<F>, g: &Tensor<F>) -> Vec<(Var, Tensor<F>)> {
        let val = |v: Var| self.value(v);
        let need = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf { .. } | Op::StopGrad => {}
            Op::Conv2d { x, w, b, geom } | Op::Deconv2d { x, w, b, geom } => {
                let flags = [need(*x), need(*w), b.is_some_and(need)];
                let f = if matches!(node.op, Op::Conv2d { .. }) {
                    kernels::conv2d_backward
                } else {
                    kernels::deconv2d_backward
                };
                let (gx, gw, gb) = f(geom, val(*x), val(*w), g, flags);
                push_opt(&mut out, *x, gx);
                push_opt(&mut out, *w, gw);
                if let Some(b) = b {
                    push_opt(&mut out, *b, gb);
                }
            }
            Op::Aniso { x, w, b, geom } => {
                let flags = [need(*x), need(*w), b.is_some_and(need)];
                let (gx, gw, gb) = kernels::aniso_backward(geom, val(*x), val(*w), g, flags);
                push_opt(&mut out, *x, gx);
                push_opt(&mut out, *w, gw);
                if let Some(b) = b {
                    push_opt(&mut out, *b, gb);
                }
            }
            Op::BatchNorm { x, gamma, beta, x_hat, inv_std, train } => {
                let shape = val(*x).shape();
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let gd = g.data();
                let gam = val(*gamma).data();
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for ni in 0..n {
                    for ch in 0..c {
                        let r = (ni * c + ch) * s..(ni * c + ch + 1) * s;
                        sum_g[ch] += lane_sum(&gd[r.clone()]);
                        sum_gx[ch] += lane_dot(&gd[r.clone()], &x_hat[r]);
                    }
                }
                if need(*x) {
                    let m = (n * s) as f64;
                    let mut gx = Tensor::zeros(shape);
                    let gxd = gx.data_mut();
                    let rows = gxd.chunks_mut(s).zip(gd.chunks(s)).zip(x_hat.chunks(s));
                    for (idx, ((gxs, gs), hs)) in rows.enumerate() {
                        let ch = idx % c;
                        let k = gam[ch] * inv_std[ch];
                        if *train {
                            let mg = F::from_f64(sum_g[ch] / m);
                            let mgx = F::from_f64(sum_gx[ch] / m);
                            for ((o, gv), h) in gxs.iter_mut().zip(gs).zip(hs) {
                                *o = k * (*gv - mg - *h * mgx);
                            }
                        } else {
                            for (o, gv) in gxs.iter_mut().zip(gs) {
                                *o = k * *gv;
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                if need(*gamma) {
                    out.push((*gamma, Tensor::from_fn(&[c], |ch| F::from_f64(sum_gx[ch]))));
                }
                if need(*beta) {
                    out.push((*beta, Tensor::from_fn(&[c], |ch| F::from_f64(sum_g[ch]))));
                }
            }
            Op::Relu { x } => {
                let mut gx = g.clone();
                for (gv, xv) in gx.data_mut().iter_mut().zip(val(*x).data()) {
                    if *xv <= F::zero() {
                        *gv = F::zero();
                    }
                }
                out.push((*x, gx));
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Scale { x, c } => {
                let mut gx = g.clone();
                gx.data_mut().iter_mut().for_each(|v| *v *= *c);
                out.push((*x, gx));
            }
            Op::Softmax { x, inner } => {
                let y = &node.value;
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(*inner).zip(y.data().chunks(*inner)) {
                    let dot: F = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                    for (gv, yv) in gr.iter_mut().zip(yr) {
                        *gv = *yv * (*gv - dot);
                    }
                }
                out.push((*x, gx));
            }
            Op::LogSumExp { x, inner } => {
                let xv = val(*x);
                let mut gx = xv.clone();
                for ((row, l), gv) in gx.data_mut().chunks_mut(*inner).zip(node.value.data()).zip(g.data()) {
                    row.iter_mut().for_each(|v| *v = (*v - *l).exp() * *gv);
                }
                out.push((*x, gx));
            }
            Op::Mse { a, b } => {
                let n = val(*a).numel() as f64;
                let k = F::from_f64(2.0 / n) * g.item();
                let diff: Vec<F> = val(*a).data().iter().zip(val(*b).data()).map(|(p, q)| (*p - *q) * k).collect();
                let shape = val(*a).shape();
                if need(*b) {
                    let neg = diff.iter().map(|v| -*v).collect();
                    out.push((*b, Tensor::from_vec(shape, neg).expect("same shape")));
                }
                out.push((*a, Tensor::from_vec(shape, diff).expect("same shape")));
            }
            Op::Sum { x } => out.push((*x, Tensor::full(val(*x).shape(), g.item()))),
            Op::Dot { x, w } => {
                let gi = g.item();
                let mut gx = w.clone();
                gx.data_mut().iter_mut().for_each(|v| *v *= gi);
                out.push((*x, gx));
            }
            Op::Slice { x, start } => {
                let shape = val(*x).shape();
                let row: usize = shape[1..].iter().product();
                let mut gx = Tensor::zeros(shape);
                gx.data_mut()[start * row..start * row + g.numel()].copy_from_slice(g.data());
                out.push((*x, gx));
            }
            Op::Reshape { x } => {
                let gx = g.clone().reshaped(val(*x).shape()).expect("same element count");
                out.push((*x, gx));
            }
        }
        out
    }
}

fn lane_sum<F: Scalar>(xs: &[F]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = xs.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().map(|v| v.as_f64()).sum();
    for ch in chunks {
        for l in 0..8 {
            acc[l] += ch[l].as_f64();
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn lane_sq_dev<F: Scalar>(xs: &[F], mu: f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = xs.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().map(|v| (v.as_f64() - mu).powi(2)).sum();
    for ch in chunks {
        for l in 0..8 {
            let d = ch[l].as_f64() - mu;
            acc[l] += d * d;
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn lane_dot<F: Scalar>(a: &[F], b: &[F]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l].as_f64() * y[l].as_f64();
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn push_opt<F>(out: &mut Vec<(Var, Tensor<F>)>, v: Var, t: Option<Tensor<F>>) {
    if let Some(t) = t {
        out.push((v, t));
    }
}

fn lse<F: Scalar>(row: &[F]) -> F {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    let s: F = row.iter().map(|v| (*v - mx).exp()).sum();
    mx + s.ln()
}

fn trailing(shape: &[usize], axes: usize) -> Result<usize, DiffError> {
    if axes == 0 || axes > shape.len() {
        return Err(DiffError::Shape(format!("cannot reduce {axes} trailing axes of {shape:?}")));
    }
    Ok(shape[shape.len() - axes..].iter().product())
}

fn same_shape<F: Scalar>(g: &Graph<F>, a: Var, b: Var, what: &str) -> Result<(), DiffError> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(DiffError::Shape(format!(
            "{what}: {:?} vs {:?}",
            g.value(a).shape(),
            g.value(b).shape()
        )));
    }
    Ok(())
}

fn check_bias<F: Scalar>(g: &Graph<F>, b: Option<Var>, co: usize) -> Result<(), DiffError> {
    match b {
        Some(b) if g.value(b).numel() != co => Err(DiffError::Shape(format!(
            "bias has {} entries, need {co}",
            g.value(b).numel()
        ))),
        _ => Ok(()),
    }
}
