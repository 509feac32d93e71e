//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Each op evaluates eagerly, pushes its result onto the tape and remembers
//! its inputs. [`Tape::backward`] walks the tape in reverse and accumulates
//! gradients by addition. Values that do not depend on a parameter are never
//! visited, so frozen weights receive no gradient at all.

use super::conv::{conv3d_backward, conv3d_forward, Conv3dGeometry};
use super::tensor::numel;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Expand {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    MeanPool(Var, [usize; 3]),
    Upsample(Var, [usize; 3]),
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv3dGeometry,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Linear { .. } => "linear",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Expand { .. } => "expand",
            Op::Sum(..) => "sum",
            Op::MeanPool(..) => "mean_pool",
            Op::Upsample(..) => "nearest_upsample",
            Op::Conv3d { .. } => "conv3d",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op.name())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |p, q| p + q);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |p, q| p - q);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |p, q| p * q);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// `x[N,in] · w[out,in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!(
                "linear: input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let (n, d_in, d_out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::shape(format!(
                    "linear: bias {:?} should be [{d_out}]",
                    self.shape(b)
                )));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * d_out];
        for r in 0..n {
            let row = &xv[r * d_in..(r + 1) * d_in];
            for o in 0..d_out {
                let wrow = &wv[o * d_in..(o + 1) * d_in];
                let mut acc = bv.map_or(0.0, |b| b[o]);
                for (p, q) in row.iter().zip(wrow) {
                    acc += p * q;
                }
                out[r * d_out + o] = acc;
            }
        }
        let out = Tensor::new(vec![n, d_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Normalizes over the last axis (epsilon [`LAYER_NORM_EPS`]), then
    /// applies optional per-feature scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm of rank-0"))?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(Error::shape(format!(
                    "layer_norm: affine parameter {:?} should be [{d}]",
                    self.shape(p)
                )));
            }
        }
        let xv = self.value(x).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let g = gamma.map(|g| self.value(g).data());
        let b = beta.map(|b| self.value(b).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = i % d;
                let y = g.map_or(v, |g| v * g[j]);
                b.map_or(y, |b| y + b[j])
            })
            .collect();
        let out = Tensor::new(shape, out)?;
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &inputs,
        )
    }

    /// Multi-head scaled dot-product attention; softmax over keys.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        if qs.len() != 2 || ks.len() != 2 || vs != ks || qs[1] != ks[1] {
            return Err(Error::shape(format!(
                "attention: q {qs:?}, k {ks:?}, v {vs:?} incompatible"
            )));
        }
        let (n, m, d) = (qs[0], ks[0], qs[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            n,
            m,
            d,
            heads,
        );
        let out = Tensor::new(vec![n, d], out)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        self.push(out, Op::Permute(a, perm.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&tensors, axis)?;
        self.push(out, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 0)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, end)?;
        self.push(out, Op::Narrow { x, axis, start }, &[x])
    }

    /// Repeats a unit-extent axis `n` times.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] != 1 || n == 0 {
            return Err(Error::shape(format!(
                "expand: axis {axis} of {shape:?} must have extent 1"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                data.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = n;
        let out = Tensor::new(out_shape, data)?;
        self.push(out, Op::Expand { x, axis }, &[x])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Block-average of a `[C,T,H,W]` tensor over `factors` along (T,H,W).
    pub fn mean_pool(&mut self, x: Var, factors: [usize; 3]) -> Result<Var> {
        let out = mean_pool(self.value(x), factors)?;
        self.push(out, Op::MeanPool(x, factors), &[x])
    }

    /// Nearest-neighbour upsampling of a `[C,T,H,W]` tensor by `factors`.
    pub fn nearest_upsample(&mut self, x: Var, factors: [usize; 3]) -> Result<Var> {
        let out = nearest_upsample(self.value(x), factors)?;
        self.push(out, Op::Upsample(x, factors), &[x])
    }

    /// `input[C_in,T,H,W]`, `weight[C_out,C_in,kt,kh,kw]`, `bias[C_out]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let geom = Conv3dGeometry::infer(self.shape(x), self.shape(w), self.shape(b), stride, padding)?;
        let out = conv3d_forward(self.value(x), self.value(w), self.value(b), &geom);
        self.push(out, Op::Conv3d { x, w, b, geom }, &[x, w, b])
    }

    /// `input[C_in,H,W]`, `weight[C_out,C_in,kh,kw]`, `bias[C_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: [usize; 2],
        padding: [usize; 2],
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d: input {xs:?} must be [C,H,W] and weight {ws:?} [C_out,C_in,kh,kw]"
            )));
        }
        let x3 = self.reshape(x, vec![xs[0], 1, xs[1], xs[2]])?;
        let w3 = self.reshape(w, vec![ws[0], ws[1], 1, ws[2], ws[3]])?;
        let y = self.conv3d(x3, w3, b, [1, stride[0], stride[1]], [0, padding[0], padding[1]])?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, vec![ys[0], ys[2], ys[3]])
    }

    /// Gradients of the scalar `loss` with respect to every value that
    /// depends on a [`param`](Self::param) leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backprop(&self, op: &Op, value: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, |d| add_into(d, g)),
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, d_in) = (xs[0], xs[1]);
                let d_out = self.shape(*w)[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.accumulate(grads, *x, |dx| {
                    for r in 0..n {
                        let grow = &g[r * d_out..(r + 1) * d_out];
                        let drow = &mut dx[r * d_in..(r + 1) * d_in];
                        for (o, &gv) in grow.iter().enumerate() {
                            for (dv, wv) in drow.iter_mut().zip(&wv[o * d_in..(o + 1) * d_in]) {
                                *dv += gv * wv;
                            }
                        }
                    }
                });
                self.accumulate(grads, *w, |dw| {
                    for r in 0..n {
                        let xrow = &xv[r * d_in..(r + 1) * d_in];
                        for o in 0..d_out {
                            let gv = g[r * d_out + o];
                            for (dv, xv) in dw[o * d_in..(o + 1) * d_in].iter_mut().zip(xrow) {
                                *dv += gv * xv;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    self.accumulate(grads, *b, |db| {
                        for r in 0..n {
                            add_into(db, &g[r * d_out..(r + 1) * d_out]);
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * gelu_grad(x);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let dim = *value.shape().last().expect("rank >= 1");
                let rows = xhat.len() / dim;
                let gv = gamma.map(|p| self.value(p).data());
                if let Some(gm) = gamma {
                    self.accumulate(grads, *gm, |d| {
                        for (i, (&gi, &xh)) in g.iter().zip(xhat).enumerate() {
                            d[i % dim] += gi * xh;
                        }
                    });
                }
                if let Some(bt) = beta {
                    self.accumulate(grads, *bt, |d| {
                        for (i, &gi) in g.iter().enumerate() {
                            d[i % dim] += gi;
                        }
                    });
                }
                self.accumulate(grads, *x, |dx| {
                    let mut gxh = vec![0.0; dim];
                    for r in 0..rows {
                        let gr = &g[r * dim..(r + 1) * dim];
                        let xr = &xhat[r * dim..(r + 1) * dim];
                        for j in 0..dim {
                            gxh[j] = gv.map_or(gr[j], |w| gr[j] * w[j]);
                        }
                        let mean_g = gxh.iter().sum::<f64>() / dim as f64;
                        let mean_gx = gxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                        for j in 0..dim {
                            dx[r * dim + j] += rstd[r] * (gxh[j] - mean_g - xr[j] * mean_gx);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (n, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let m = self.shape(*k)[0];
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    n,
                    m,
                    d,
                    *heads,
                );
                self.accumulate(grads, *q, |t| add_into(t, &dq));
                self.accumulate(grads, *k, |t| add_into(t, &dk));
                self.accumulate(grads, *v, |t| add_into(t, &dv));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |d| add_into(d, g)),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(value.shape().to_vec(), g.to_vec())?.permute(&inv)?;
                self.accumulate(grads, *a, |d| add_into(d, gt.data()));
            }
            Op::Concat(parts, axis) => {
                let shape = value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    self.accumulate(grads, p, |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let extent = in_shape[*axis];
                let len = value.shape()[*axis];
                self.accumulate(grads, *x, |d| {
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        add_into(&mut d[dst..dst + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Expand { x, axis } => {
                let shape = value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let n = shape[*axis];
                self.accumulate(grads, *x, |d| {
                    for o in 0..outer {
                        for r in 0..n {
                            let src = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                            add_into(&mut d[o * inner..(o + 1) * inner], src);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::MeanPool(x, f) => {
                let gt = Tensor::new(value.shape().to_vec(), g.to_vec())?;
                let up = nearest_upsample(&gt, *f)?;
                let inv = 1.0 / (f[0] * f[1] * f[2]) as f64;
                self.accumulate(grads, *x, |d| {
                    d.iter_mut().zip(up.data()).for_each(|(d, u)| *d += u * inv)
                });
            }
            Op::Upsample(x, f) => {
                let gt = Tensor::new(value.shape().to_vec(), g.to_vec())?;
                let pooled = block_sum(&gt, *f);
                self.accumulate(grads, *x, |d| add_into(d, &pooled));
            }
            Op::Conv3d { x, w, b, geom } => {
                let gt = Tensor::new(value.shape().to_vec(), g.to_vec())?;
                let (gx, gw, gb) = conv3d_backward(
                    self.value(*x),
                    self.value(*w),
                    &gt,
                    geom,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, |d| add_into(d, &gx));
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, |d| add_into(d, &gw));
                }
                self.accumulate(grads, *b, |d| add_into(d, &gb));
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn check_pool_shape(shape: &[usize], f: [usize; 3], what: &str) -> Result<()> {
    if shape.len() != 4 || f.iter().any(|&k| k == 0) {
        return Err(Error::shape(format!(
            "{what}: need [C,T,H,W] and positive factors, got {shape:?} / {f:?}"
        )));
    }
    Ok(())
}

/// Block average over (T,H,W) of a `[C,T,H,W]` tensor.
pub fn mean_pool(x: &Tensor, f: [usize; 3]) -> Result<Tensor> {
    let s = x.shape();
    check_pool_shape(s, f, "mean_pool")?;
    if (0..3).any(|a| s[a + 1] % f[a] != 0) {
        return Err(Error::shape(format!(
            "mean_pool: extents {:?} not divisible by {f:?}",
            &s[1..]
        )));
    }
    let sum = block_sum(x, f);
    let inv = 1.0 / (f[0] * f[1] * f[2]) as f64;
    let out_shape = vec![s[0], s[1] / f[0], s[2] / f[1], s[3] / f[2]];
    Tensor::new(out_shape, sum.into_iter().map(|v| v * inv).collect())
}

/// Pairwise (tree) sum. Exact for `2^k` copies of one value.
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Block sums over (T,H,W), each block summed pairwise in row-major order.
/// The caller guarantees divisibility.
fn block_sum(x: &Tensor, f: [usize; 3]) -> Vec<f64> {
    let s = x.shape();
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    let (to, ho, wo) = (t / f[0], h / f[1], w / f[2]);
    let xv = x.data();
    let mut out = Vec::with_capacity(c * to * ho * wo);
    let mut block = Vec::with_capacity(f[0] * f[1] * f[2]);
    for ci in 0..c {
        for a in 0..to {
            for b in 0..ho {
                for d in 0..wo {
                    block.clear();
                    for ti in a * f[0]..(a + 1) * f[0] {
                        for hi in b * f[1]..(b + 1) * f[1] {
                            let row = ((ci * t + ti) * h + hi) * w;
                            block.extend_from_slice(&xv[row + d * f[2]..row + (d + 1) * f[2]]);
                        }
                    }
                    out.push(pairwise_sum(&block));
                }
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling over (T,H,W) of a `[C,T,H,W]` tensor.
pub fn nearest_upsample(x: &Tensor, f: [usize; 3]) -> Result<Tensor> {
    let s = x.shape();
    check_pool_shape(s, f, "nearest_upsample")?;
    let out_shape = vec![s[0], s[1] * f[0], s[2] * f[1], s[3] * f[2]];
    let (t, h, w) = (s[1], s[2], s[3]);
    let xv = x.data();
    let mut out = Vec::with_capacity(numel(&out_shape));
    for ci in 0..s[0] {
        for to in 0..out_shape[1] {
            for ho in 0..out_shape[2] {
                let row = &xv[((ci * t + to / f[0]) * h + ho / f[1]) * w..][..w];
                for wo in 0..out_shape[3] {
                    out.push(row[wo / f[2]]);
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Returns (output `[N,D]`, softmax probabilities `[heads,N,M]`).
fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    m: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * n * m];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + dh];
            let p = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
            let mut max = f64::NEG_INFINITY;
            for j in 0..m {
                let kj = &k[j * d + off..j * d + off + dh];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                p[j] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for pj in p.iter_mut() {
                *pj = (*pj - max).exp();
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            let o = &mut out[i * d + off..i * d + off + dh];
            for (j, &pj) in p.iter().enumerate() {
                let vj = &v[j * d + off..j * d + off + dh];
                for (ov, vv) in o.iter_mut().zip(vj) {
                    *ov += pj * vv;
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    n: usize,
    m: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; m * d];
    let mut dv = vec![0.0; m * d];
    let mut dp = vec![0.0; m];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
            let gi = &g[i * d + off..i * d + off + dh];
            let mut dot = 0.0;
            for j in 0..m {
                let vj = &v[j * d + off..j * d + off + dh];
                dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += dp[j] * p[j];
                for (t, &gv) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                    *t += p[j] * gv;
                }
            }
            let qi = &q[i * d + off..i * d + off + dh];
            for j in 0..m {
                let ds = p[j] * (dp[j] - dot) * scale;
                let kj = &k[j * d + off..j * d + off + dh];
                for (t, &kv) in dq[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                    *t += ds * kv;
                }
                for (t, &qv) in dk[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                    *t += ds * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Softmax weights `[heads, N, M]` that [`Tape::attention`] would use.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize) -> Result<Tensor> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape(format!("attention_weights: q {qs:?}, k {ks:?}")));
    }
    if heads == 0 || qs[1] % heads != 0 {
        return Err(Error::config(format!(
            "attention: width {} not divisible by {heads} heads",
            qs[1]
        )));
    }
    let (_, probs) = attention_forward(q.data(), k.data(), k.data(), qs[0], ks[0], qs[1], heads);
    Tensor::new(vec![heads, qs[0], ks[0]], probs)
}
