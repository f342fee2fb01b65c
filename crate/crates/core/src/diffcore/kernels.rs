//! Convolution kernels. Each kernel partitions its output so that every
//! element has a single writer; see [`crate::par`].

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use super::DiffError;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PadMode {
    Zero,
    Periodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisPad {
    pub mode: PadMode,
    pub amount: usize,
}

impl AxisPad {
    pub fn zero(amount: usize) -> Self {
        Self { mode: PadMode::Zero, amount }
    }

    pub fn periodic(amount: usize) -> Self {
        Self { mode: PadMode::Periodic, amount }
    }
}

/// Padding for the two spatial axes `[H, W]` of a planar convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadSpec {
    pub axes: [AxisPad; 2],
}

impl PadSpec {
    pub fn new(h: AxisPad, w: AxisPad) -> Self {
        Self { axes: [h, w] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub stride: [usize; 2],
    pub pad: PadSpec,
}

/// A run of `len` (output, input) index pairs advancing by the map's steps.
#[derive(Debug, Clone, Copy)]
struct Run {
    o: usize,
    i: usize,
    len: usize,
}

/// Index bookkeeping for one spatial axis: for every kernel tap, the runs of
/// output/input positions it connects.
#[derive(Debug, Clone)]
struct AxisMap {
    runs: Vec<Vec<Run>>,
    o_step: usize,
    i_step: usize,
}

impl AxisMap {
    fn from_pairs(k: usize, o_step: usize, i_step: usize, pairs: impl Fn(usize) -> Vec<(usize, usize)>) -> Self {
        let runs = (0..k)
            .map(|t| {
                let mut runs: Vec<Run> = Vec::new();
                for (o, i) in pairs(t) {
                    if let Some(last) = runs.last_mut() {
                        if last.o + last.len * o_step == o && last.i + last.len * i_step == i {
                            last.len += 1;
                            continue;
                        }
                    }
                    runs.push(Run { o, i, len: 1 });
                }
                runs
            })
            .collect();
        Self { runs, o_step, i_step }
    }

    /// Cross-correlation: output `o` reads input `o·s + t - p`.
    fn conv(in_len: usize, out_len: usize, k: usize, s: usize, pad: AxisPad) -> Self {
        Self::from_pairs(k, 1, s, |t| {
            (0..out_len)
                .filter_map(|o| {
                    let i = (o * s + t) as i64 - pad.amount as i64;
                    resolve(i, in_len, pad.mode).map(|i| (o, i))
                })
                .collect()
        })
    }

    /// Transposed convolution: input `i` writes output `i·s + t - p`.
    fn deconv(in_len: usize, out_len: usize, k: usize, s: usize, pad: AxisPad) -> Self {
        Self::from_pairs(k, s, 1, |t| {
            (0..in_len)
                .filter_map(|i| {
                    let o = (i * s + t) as i64 - pad.amount as i64;
                    resolve(o, out_len, pad.mode).map(|o| (o, i))
                })
                .collect()
        })
    }

    #[inline]
    fn for_each(&self, t: usize, mut f: impl FnMut(usize, usize)) {
        for r in &self.runs[t] {
            for q in 0..r.len {
                f(r.o + q * self.o_step, r.i + q * self.i_step);
            }
        }
    }
}

#[inline]
fn resolve(i: i64, len: usize, mode: PadMode) -> Option<usize> {
    match mode {
        PadMode::Periodic => Some(i.rem_euclid(len as i64) as usize),
        PadMode::Zero => (i >= 0 && (i as usize) < len).then_some(i as usize),
    }
}

/// Inner W-axis loop `dst[o] += w * src[i]` over a tap's runs.
#[inline]
fn axpy_runs<F: Scalar>(map: &AxisMap, t: usize, w: F, dst: &mut [F], src: &[F]) {
    let (os, is) = (map.o_step, map.i_step);
    for r in &map.runs[t] {
        if os == 1 && is == 1 {
            let d = &mut dst[r.o..r.o + r.len];
            let s = &src[r.i..r.i + r.len];
            for (a, b) in d.iter_mut().zip(s) {
                *a += w * *b;
            }
        } else {
            for q in 0..r.len {
                dst[r.o + q * os] += w * src[r.i + q * is];
            }
        }
    }
}

/// Transpose of [`axpy_runs`]: `dst[i] += w * src[o]`.
#[inline]
fn axpy_runs_t<F: Scalar>(map: &AxisMap, t: usize, w: F, dst: &mut [F], src: &[F]) {
    let (os, is) = (map.o_step, map.i_step);
    for r in &map.runs[t] {
        if os == 1 && is == 1 {
            let d = &mut dst[r.i..r.i + r.len];
            let s = &src[r.o..r.o + r.len];
            for (a, b) in d.iter_mut().zip(s) {
                *a += w * *b;
            }
        } else {
            for q in 0..r.len {
                dst[r.i + q * is] += w * src[r.o + q * os];
            }
        }
    }
}

/// `Σ src_o[o] * src_i[i]` over a tap's runs.
#[inline]
fn dot_runs<F: Scalar>(map: &AxisMap, t: usize, a_out: &[F], b_in: &[F]) -> F {
    let (os, is) = (map.o_step, map.i_step);
    let mut acc = F::zero();
    for r in &map.runs[t] {
        for q in 0..r.len {
            acc += a_out[r.o + q * os] * b_in[r.i + q * is];
        }
    }
    acc
}

fn check_pad(len: usize, pad: AxisPad) -> Result<(), DiffError> {
    if pad.mode == PadMode::Periodic && pad.amount >= len {
        return Err(DiffError::Shape(format!(
            "periodic padding {} must be smaller than axis length {len}",
            pad.amount
        )));
    }
    Ok(())
}

fn dims4(t: &[usize], what: &str) -> Result<[usize; 4], DiffError> {
    match t {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(DiffError::Shape(format!("{what}: expected 4-d tensor, got {t:?}"))),
    }
}

/// Geometry of a planar convolution or its transpose.
#[derive(Debug, Clone)]
pub(crate) struct PlanarGeom {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub in_hw: [usize; 2],
    pub out_hw: [usize; 2],
    pub k: [usize; 2],
    maps: [AxisMap; 2],
}

impl PlanarGeom {
    pub fn conv(x: &[usize], w: &[usize], spec: &Conv2dSpec) -> Result<Self, DiffError> {
        let [n, ci, h, wd] = dims4(x, "conv2d input")?;
        let [co, wci, kh, kw] = dims4(w, "conv2d weight")?;
        if wci != ci {
            return Err(DiffError::Shape(format!("conv2d: weight expects {wci} input channels, got {ci}")));
        }
        let mut out = [0; 2];
        for (a, (&len, &k)) in [h, wd].iter().zip(&[kh, kw]).enumerate() {
            let (s, pad) = (spec.stride[a], spec.pad.axes[a]);
            check_pad(len, pad)?;
            if s == 0 || len + 2 * pad.amount < k {
                return Err(DiffError::Shape(format!("conv2d: axis {a} too short for kernel {k}")));
            }
            out[a] = (len + 2 * pad.amount - k) / s + 1;
            if pad.mode == PadMode::Periodic && out[a] * s != len {
                return Err(DiffError::Shape(format!(
                    "conv2d: periodic axis {a} of length {len} needs output·stride == length (got {}·{s})",
                    out[a]
                )));
            }
        }
        let maps = [
            AxisMap::conv(h, out[0], kh, spec.stride[0], spec.pad.axes[0]),
            AxisMap::conv(wd, out[1], kw, spec.stride[1], spec.pad.axes[1]),
        ];
        Ok(Self { n, ci, co, in_hw: [h, wd], out_hw: out, k: [kh, kw], maps })
    }

    /// Transposed convolution; weight layout `[Cin, Cout, KH, KW]`.
    pub fn deconv(x: &[usize], w: &[usize], spec: &Conv2dSpec) -> Result<Self, DiffError> {
        let [n, ci, h, wd] = dims4(x, "deconv2d input")?;
        let [wci, co, kh, kw] = dims4(w, "deconv2d weight")?;
        if wci != ci {
            return Err(DiffError::Shape(format!("deconv2d: weight expects {wci} input channels, got {ci}")));
        }
        let mut out = [0; 2];
        for (a, (&len, &k)) in [h, wd].iter().zip(&[kh, kw]).enumerate() {
            let (s, pad) = (spec.stride[a], spec.pad.axes[a]);
            if s == 0 {
                return Err(DiffError::Shape("deconv2d: zero stride".into()));
            }
            out[a] = match pad.mode {
                PadMode::Periodic => len * s,
                PadMode::Zero => {
                    let full = (len - 1) * s + k;
                    if full <= 2 * pad.amount {
                        return Err(DiffError::Shape(format!("deconv2d: axis {a} collapses to nothing")));
                    }
                    full - 2 * pad.amount
                }
            };
            check_pad(out[a], pad)?;
        }
        let maps = [
            AxisMap::deconv(h, out[0], kh, spec.stride[0], spec.pad.axes[0]),
            AxisMap::deconv(wd, out[1], kw, spec.stride[1], spec.pad.axes[1]),
        ];
        Ok(Self { n, ci, co, in_hw: [h, wd], out_hw: out, k: [kh, kw], maps })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.co, self.out_hw[0], self.out_hw[1]]
    }
}

fn add_bias<F: Scalar>(out: &mut Tensor<F>, b: Option<&Tensor<F>>, co: usize) {
    if let Some(b) = b {
        let plane = out.numel() / (out.shape()[0] * co);
        let bd = b.data();
        par::for_each_chunk_mut(out.data_mut(), plane, |idx, p| {
            let v = bd[idx % co];
            p.iter_mut().for_each(|x| *x += v);
        });
    }
}

fn bias_grad<F: Scalar>(go: &Tensor<F>, co: usize) -> Tensor<F> {
    let n = go.shape()[0];
    let plane = go.numel() / (n * co);
    let g = go.data();
    Tensor::from_fn(&[co], |c| {
        (0..n)
            .map(|ni| {
                let s = (ni * co + c) * plane;
                g[s..s + plane].iter().copied().sum::<F>()
            })
            .sum()
    })
}

pub(crate) fn conv2d_forward<F: Scalar>(
    geom: &PlanarGeom,
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
) -> Tensor<F> {
    let [h, wd] = geom.in_hw;
    let [oh, ow] = geom.out_hw;
    let [kh, kw] = geom.k;
    let (ci, co) = (geom.ci, geom.co);
    let mut out = Tensor::zeros(&geom.out_shape());
    let (xd, wdat) = (x.data(), w.data());
    par::for_each_chunk_mut(out.data_mut(), oh * ow, |idx, plane| {
        let (ni, c_out) = (idx / co, idx % co);
        for c in 0..ci {
            let xin = &xd[(ni * ci + c) * h * wd..][..h * wd];
            let wk = &wdat[(c_out * ci + c) * kh * kw..][..kh * kw];
            for th in 0..kh {
                geom.maps[0].for_each(th, |o_r, i_r| {
                    let orow = &mut plane[o_r * ow..(o_r + 1) * ow];
                    let xrow = &xin[i_r * wd..(i_r + 1) * wd];
                    for tw in 0..kw {
                        axpy_runs(&geom.maps[1], tw, wk[th * kw + tw], orow, xrow);
                    }
                });
            }
        }
    });
    add_bias(&mut out, b, co);
    out
}

/// Returns `(grad_x, grad_w, grad_b)`; each is computed only when requested.
pub(crate) fn conv2d_backward<F: Scalar>(
    geom: &PlanarGeom,
    x: &Tensor<F>,
    w: &Tensor<F>,
    go: &Tensor<F>,
    need: [bool; 3],
) -> (Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>) {
    let [h, wd] = geom.in_hw;
    let [oh, ow] = geom.out_hw;
    let [kh, kw] = geom.k;
    let (n, ci, co) = (geom.n, geom.ci, geom.co);
    let (xd, wdat, gd) = (x.data(), w.data(), go.data());
    let gx = need[0].then(|| {
        let mut gx = Tensor::zeros(&[n, ci, h, wd]);
        par::for_each_chunk_mut(gx.data_mut(), h * wd, |idx, plane| {
            let (ni, c) = (idx / ci, idx % ci);
            for c_out in 0..co {
                let g = &gd[(ni * co + c_out) * oh * ow..][..oh * ow];
                let wk = &wdat[(c_out * ci + c) * kh * kw..][..kh * kw];
                for th in 0..kh {
                    geom.maps[0].for_each(th, |o_r, i_r| {
                        let grow = &g[o_r * ow..(o_r + 1) * ow];
                        let xrow = &mut plane[i_r * wd..(i_r + 1) * wd];
                        for tw in 0..kw {
                            axpy_runs_t(&geom.maps[1], tw, wk[th * kw + tw], xrow, grow);
                        }
                    });
                }
            }
        });
        gx
    });
    let gw = need[1].then(|| {
        let mut gw = Tensor::zeros(&[co, ci, kh, kw]);
        par::for_each_chunk_mut(gw.data_mut(), ci * kh * kw, |c_out, wk| {
            for ni in 0..n {
                let g = &gd[(ni * co + c_out) * oh * ow..][..oh * ow];
                for c in 0..ci {
                    let xin = &xd[(ni * ci + c) * h * wd..][..h * wd];
                    for th in 0..kh {
                        geom.maps[0].for_each(th, |o_r, i_r| {
                            let grow = &g[o_r * ow..(o_r + 1) * ow];
                            let xrow = &xin[i_r * wd..(i_r + 1) * wd];
                            for tw in 0..kw {
                                wk[(c * kh + th) * kw + tw] += dot_runs(&geom.maps[1], tw, grow, xrow);
                            }
                        });
                    }
                }
            }
        });
        gw
    });
    let gb = need[2].then(|| bias_grad(go, co));
    (gx, gw, gb)
}

pub(crate) fn deconv2d_forward<F: Scalar>(
    geom: &PlanarGeom,
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
) -> Tensor<F> {
    let [h, wd] = geom.in_hw;
    let [oh, ow] = geom.out_hw;
    let [kh, kw] = geom.k;
    let (ci, co) = (geom.ci, geom.co);
    let mut out = Tensor::zeros(&geom.out_shape());
    let (xd, wdat) = (x.data(), w.data());
    par::for_each_chunk_mut(out.data_mut(), oh * ow, |idx, plane| {
        let (ni, c_out) = (idx / co, idx % co);
        for c in 0..ci {
            let xin = &xd[(ni * ci + c) * h * wd..][..h * wd];
            let wk = &wdat[(c * co + c_out) * kh * kw..][..kh * kw];
            for th in 0..kh {
                geom.maps[0].for_each(th, |o_r, i_r| {
                    let orow = &mut plane[o_r * ow..(o_r + 1) * ow];
                    let xrow = &xin[i_r * wd..(i_r + 1) * wd];
                    for tw in 0..kw {
                        axpy_runs(&geom.maps[1], tw, wk[th * kw + tw], orow, xrow);
                    }
                });
            }
        }
    });
    add_bias(&mut out, b, co);
    out
}

pub(crate) fn deconv2d_backward<F: Scalar>(
    geom: &PlanarGeom,
    x: &Tensor<F>,
    w: &Tensor<F>,
    go: &Tensor<F>,
    need: [bool; 3],
) -> (Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>) {
    let [h, wd] = geom.in_hw;
    let [oh, ow] = geom.out_hw;
    let [kh, kw] = geom.k;
    let (n, ci, co) = (geom.n, geom.ci, geom.co);
    let (xd, wdat, gd) = (x.data(), w.data(), go.data());
    let gx = need[0].then(|| {
        let mut gx = Tensor::zeros(&[n, ci, h, wd]);
        par::for_each_chunk_mut(gx.data_mut(), h * wd, |idx, plane| {
            let (ni, c) = (idx / ci, idx % ci);
            for c_out in 0..co {
                let g = &gd[(ni * co + c_out) * oh * ow..][..oh * ow];
                let wk = &wdat[(c * co + c_out) * kh * kw..][..kh * kw];
                for th in 0..kh {
                    geom.maps[0].for_each(th, |o_r, i_r| {
                        let grow = &g[o_r * ow..(o_r + 1) * ow];
                        let xrow = &mut plane[i_r * wd..(i_r + 1) * wd];
                        for tw in 0..kw {
                            axpy_runs_t(&geom.maps[1], tw, wk[th * kw + tw], xrow, grow);
                        }
                    });
                }
            }
        });
        gx
    });
    let gw = need[1].then(|| {
        let mut gw = Tensor::zeros(&[ci, co, kh, kw]);
        par::for_each_chunk_mut(gw.data_mut(), co * kh * kw, |c, wk| {
            for ni in 0..n {
                let xin = &xd[(ni * ci + c) * h * wd..][..h * wd];
                for c_out in 0..co {
                    let g = &gd[(ni * co + c_out) * oh * ow..][..oh * ow];
                    for th in 0..kh {
                        geom.maps[0].for_each(th, |o_r, i_r| {
                            let grow = &g[o_r * ow..(o_r + 1) * ow];
                            let xrow = &xin[i_r * wd..(i_r + 1) * wd];
                            for tw in 0..kw {
                                wk[(c_out * kh + th) * kw + tw] += dot_runs(&geom.maps[1], tw, grow, xrow);
                            }
                        });
                    }
                }
            }
        });
        gw
    });
    let gb = need[2].then(|| bias_grad(go, co));
    (gx, gw, gb)
}

/// Padding of the probed axis of an anisotropic convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnisoPad {
    /// Zero padding of `k / 2` on both sides; output length equals input.
    Same,
    /// Periodic padding of `k / 2`; output length equals input.
    Periodic,
    /// No padding; output length is `L - k + 1`.
    Valid,
}

/// `1×k×1`-style convolution touching a single spatial axis of a volume
/// `[N, Cin, D0, D1, D2]` with weight `[Cout, Cin, k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnisoSpec {
    /// Spatial axis index in `0..3`.
    pub axis: usize,
    pub pad: AnisoPad,
}

#[derive(Debug, Clone)]
pub(crate) struct AnisoGeom {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub outer: usize,
    pub len: usize,
    pub out_len: usize,
    pub inner: usize,
    pub k: usize,
    pub out_shape: Vec<usize>,
    pad: AxisPad,
    map: AxisMap,
}

impl AnisoGeom {
    pub fn new(x: &[usize], w: &[usize], spec: &AnisoSpec) -> Result<Self, DiffError> {
        let &[n, ci, d0, d1, d2] = x else {
            return Err(DiffError::Shape(format!("conv3d_aniso: expected 5-d input, got {x:?}")));
        };
        let &[co, wci, k] = w else {
            return Err(DiffError::Shape(format!("conv3d_aniso: expected [Cout, Cin, k] weight, got {w:?}")));
        };
        if wci != ci {
            return Err(DiffError::Shape(format!("conv3d_aniso: weight expects {wci} channels, got {ci}")));
        }
        if spec.axis > 2 {
            return Err(DiffError::Shape(format!("conv3d_aniso: axis {} out of range", spec.axis)));
        }
        let dims = [d0, d1, d2];
        let len = dims[spec.axis];
        if k == 0 || k > len {
            return Err(DiffError::Shape(format!("conv3d_aniso: kernel {k} longer than axis {len}")));
        }
        let (pad, out_len) = match spec.pad {
            AnisoPad::Same | AnisoPad::Periodic if k % 2 == 0 => {
                return Err(DiffError::Shape("conv3d_aniso: same/periodic padding needs an odd kernel".into()))
            }
            AnisoPad::Same => (AxisPad::zero(k / 2), len),
            AnisoPad::Periodic => (AxisPad::periodic(k / 2), len),
            AnisoPad::Valid => (AxisPad::zero(0), len - k + 1),
        };
        check_pad(len, pad)?;
        let outer: usize = dims[..spec.axis].iter().product();
        let inner: usize = dims[spec.axis + 1..].iter().product();
        let mut out_shape = vec![n, co, d0, d1, d2];
        out_shape[2 + spec.axis] = out_len;
        Ok(Self {
            n,
            ci,
            co,
            outer,
            len,
            out_len,
            inner,
            k,
            out_shape,
            pad,
            map: AxisMap::conv(len, out_len, k, 1, pad),
        })
    }

    fn in_vol(&self) -> usize {
        self.outer * self.len * self.inner
    }

    fn out_vol(&self) -> usize {
        self.outer * self.out_len * self.inner
    }
}

/// Start of the input window read by output `lo` when it needs no padding.
#[inline]
fn window(lo: usize, p: usize, k: usize, len: usize) -> Option<usize> {
    (lo >= p && lo - p + k <= len).then(|| lo - p)
}

#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: F = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| *x * *y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().copied().sum::<F>() + tail
}

#[inline]
fn axpy<F: Scalar>(dst: &mut [F], src: &[F], a: F) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * *s;
    }
}

impl AnisoGeom {
    /// Visits `(lo, Some(window start))` for interior outputs and
    /// `(lo, None)` for outputs that touch padding.
    #[inline]
    fn taps(&self, lo: usize, mut f: impl FnMut(usize, usize)) {
        let p = self.pad.amount;
        for t in 0..self.k {
            if let Some(i) = resolve((lo + t) as i64 - p as i64, self.len, self.pad.mode) {
                f(t, i);
            }
        }
    }
}

/// Forward pass for volumes whose probed axis is the innermost one.
fn aniso_forward_lines<F: Scalar>(g: &AnisoGeom, xd: &[F], wd: &[F], out: &mut Tensor<F>) {
    let (iv, ov, k, p) = (g.in_vol(), g.out_vol(), g.k, g.pad.amount);
    par::for_each_chunk_mut(out.data_mut(), ov, |idx, vol| {
        let (ni, c_out) = (idx / g.co, idx % g.co);
        for c in 0..g.ci {
            let xin = &xd[(ni * g.ci + c) * iv..][..iv];
            let wrow = &wd[(c_out * g.ci + c) * k..][..k];
            for (xo, vo) in xin.chunks_exact(g.len).zip(vol.chunks_exact_mut(g.out_len)) {
                for (lo, v) in vo.iter_mut().enumerate() {
                    match window(lo, p, k, g.len) {
                        Some(s) => *v += dot(wrow, &xo[s..s + k]),
                        None => g.taps(lo, |t, i| *v += wrow[t] * xo[i]),
                    }
                }
            }
        }
    });
}

fn aniso_backward_lines<F: Scalar>(
    g: &AnisoGeom,
    xd: &[F],
    wd: &[F],
    gd: &[F],
    need: [bool; 2],
    x_shape: &[usize],
    w_shape: &[usize],
) -> (Option<Tensor<F>>, Option<Tensor<F>>) {
    let (iv, ov, k, p) = (g.in_vol(), g.out_vol(), g.k, g.pad.amount);
    let gx = need[0].then(|| {
        let mut gx = Tensor::zeros(x_shape);
        par::for_each_chunk_mut(gx.data_mut(), iv, |idx, vol| {
            let (ni, c) = (idx / g.ci, idx % g.ci);
            for c_out in 0..g.co {
                let gvol = &gd[(ni * g.co + c_out) * ov..][..ov];
                let wrow = &wd[(c_out * g.ci + c) * k..][..k];
                for (go, xo) in gvol.chunks_exact(g.out_len).zip(vol.chunks_exact_mut(g.len)) {
                    for (lo, &gv) in go.iter().enumerate() {
                        match window(lo, p, k, g.len) {
                            Some(s) => axpy(&mut xo[s..s + k], wrow, gv),
                            None => g.taps(lo, |t, i| xo[i] += wrow[t] * gv),
                        }
                    }
                }
            }
        });
        gx
    });
    let gw = need[1].then(|| {
        let mut gw = Tensor::zeros(w_shape);
        par::for_each_chunk_mut(gw.data_mut(), g.ci * k, |c_out, wk| {
            for ni in 0..g.n {
                let gvol = &gd[(ni * g.co + c_out) * ov..][..ov];
                for c in 0..g.ci {
                    let xin = &xd[(ni * g.ci + c) * iv..][..iv];
                    let wrow = &mut wk[c * k..(c + 1) * k];
                    for (go, xo) in gvol.chunks_exact(g.out_len).zip(xin.chunks_exact(g.len)) {
                        for (lo, &gv) in go.iter().enumerate() {
                            match window(lo, p, k, g.len) {
                                Some(s) => axpy(wrow, &xo[s..s + k], gv),
                                None => g.taps(lo, |t, i| wrow[t] += xo[i] * gv),
                            }
                        }
                    }
                }
            }
        });
        gw
    });
    (gx, gw)
}

pub(crate) fn aniso_forward<F: Scalar>(
    g: &AnisoGeom,
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
) -> Tensor<F> {
    let mut out = Tensor::zeros(&g.out_shape);
    let (xd, wd) = (x.data(), w.data());
    if g.inner == 1 && g.k >= 8 {
        aniso_forward_lines(g, xd, wd, &mut out);
        add_bias(&mut out, b, g.co);
        return out;
    }
    let (iv, ov, inner) = (g.in_vol(), g.out_vol(), g.inner);
    par::for_each_chunk_mut(out.data_mut(), ov, |idx, vol| {
        let (ni, c_out) = (idx / g.co, idx % g.co);
        for c in 0..g.ci {
            let xin = &xd[(ni * g.ci + c) * iv..][..iv];
            for t in 0..g.k {
                let wv = wd[(c_out * g.ci + c) * g.k + t];
                if wv == F::zero() {
                    continue;
                }
                for o in 0..g.outer {
                    let xo = &xin[o * g.len * inner..][..g.len * inner];
                    let vo = &mut vol[o * g.out_len * inner..][..g.out_len * inner];
                    for r in &g.map.runs[t] {
                        let d = &mut vo[r.o * inner..(r.o + r.len) * inner];
                        let s = &xo[r.i * inner..(r.i + r.len) * inner];
                        for (a, bb) in d.iter_mut().zip(s) {
                            *a += wv * *bb;
                        }
                    }
                }
            }
        }
    });
    add_bias(&mut out, b, g.co);
    out
}

pub(crate) fn aniso_backward<F: Scalar>(
    g: &AnisoGeom,
    x: &Tensor<F>,
    w: &Tensor<F>,
    go: &Tensor<F>,
    need: [bool; 3],
) -> (Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>) {
    let (xd, wd, gd) = (x.data(), w.data(), go.data());
    if g.inner == 1 && g.k >= 8 {
        let (gx, gw) = aniso_backward_lines(g, xd, wd, gd, [need[0], need[1]], x.shape(), w.shape());
        return (gx, gw, need[2].then(|| bias_grad(go, g.co)));
    }
    let (iv, ov, inner) = (g.in_vol(), g.out_vol(), g.inner);
    let gx = need[0].then(|| {
        let mut gx = Tensor::zeros(x.shape());
        par::for_each_chunk_mut(gx.data_mut(), iv, |idx, vol| {
            let (ni, c) = (idx / g.ci, idx % g.ci);
            for c_out in 0..g.co {
                let gvol = &gd[(ni * g.co + c_out) * ov..][..ov];
                for t in 0..g.k {
                    let wv = wd[(c_out * g.ci + c) * g.k + t];
                    for o in 0..g.outer {
                        let go_o = &gvol[o * g.out_len * inner..][..g.out_len * inner];
                        let vo = &mut vol[o * g.len * inner..][..g.len * inner];
                        for r in &g.map.runs[t] {
                            let d = &mut vo[r.i * inner..(r.i + r.len) * inner];
                            let s = &go_o[r.o * inner..(r.o + r.len) * inner];
                            for (a, bb) in d.iter_mut().zip(s) {
                                *a += wv * *bb;
                            }
                        }
                    }
                }
            }
        });
        gx
    });
    let gw = need[1].then(|| {
        let mut gw = Tensor::zeros(w.shape());
        par::for_each_chunk_mut(gw.data_mut(), g.ci * g.k, |c_out, wk| {
            for ni in 0..g.n {
                let gvol = &gd[(ni * g.co + c_out) * ov..][..ov];
                for c in 0..g.ci {
                    let xin = &xd[(ni * g.ci + c) * iv..][..iv];
                    for t in 0..g.k {
                        let mut acc = F::zero();
                        for o in 0..g.outer {
                            let go_o = &gvol[o * g.out_len * inner..][..g.out_len * inner];
                            let xo = &xin[o * g.len * inner..][..g.len * inner];
                            for r in &g.map.runs[t] {
                                let a = &go_o[r.o * inner..(r.o + r.len) * inner];
                                let bb = &xo[r.i * inner..(r.i + r.len) * inner];
                                for (p, q) in a.iter().zip(bb) {
                                    acc += *p * *q;
                                }
                            }
                        }
                        wk[c * g.k + t] += acc;
                    }
                }
            }
        });
        gw
    });
    let gb = need[2].then(|| bias_grad(go, g.co));
    (gx, gw, gb)
}
