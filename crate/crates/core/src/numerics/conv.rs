//! 3D convolution kernels. 2D convolution runs through the same code with a
//! unit temporal extent.
//!
//! Every output element accumulates `bias + Σ w·x` with terms added in
//! `(c_in, kt, kh, kw)` row-major order, so results match a naive nested loop
//! bit for bit.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

/// Output extent along one axis, or `None` if the kernel does not fit.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl Conv3dGeometry {
    pub fn infer(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape(format!(
                "conv3d input must be [C,T,H,W], got {input:?}"
            )));
        }
        if weight.len() != 5 {
            return Err(Error::shape(format!(
                "conv3d weight must be [C_out,C_in,kt,kh,kw], got {weight:?}"
            )));
        }
        if weight[1] != input[0] {
            return Err(Error::shape(format!(
                "conv3d channel mismatch: input has {} channels, weight expects {}",
                input[0], weight[1]
            )));
        }
        if bias != [weight[0]] {
            return Err(Error::shape(format!(
                "conv3d bias must be [{}], got {bias:?}",
                weight[0]
            )));
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::shape(format!("conv3d stride must be >= 1, got {stride:?}")));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_out_len(input[a + 1], weight[a + 2], stride[a], padding[a])
                .ok_or_else(|| {
                    Error::shape(format!(
                        "conv3d axis {a}: kernel {} does not fit input {} with padding {}",
                        weight[a + 2],
                        input[a + 1],
                        padding[a]
                    ))
                })?;
        }
        Ok(Conv3dGeometry {
            c_in: input[0],
            c_out: weight[0],
            input: [input[1], input[2], input[3]],
            kernel: [weight[2], weight[3], weight[4]],
            stride,
            padding,
            output,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.output[0], self.output[1], self.output[2]]
    }

    /// Output indices `o` for which `o*stride + k - pad` lands inside `[0, len)`.
    fn valid_range(len: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        // need o*stride + k >= pad  and  o*stride + k - pad < len
        let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
        let hi_excl = if len + pad > k {
            ((len + pad - k - 1) / stride + 1).min(out)
        } else {
            0
        };
        (lo, hi_excl.max(lo))
    }
}

pub fn conv3d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, g: &Conv3dGeometry) -> Tensor {
    let [t_in, h_in, w_in] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let [t_out, h_out, w_out] = g.output;
    let x = input.data();
    let w = weight.data();
    let plane_out = t_out * h_out * w_out;
    let mut out = vec![0.0; g.c_out * plane_out];
    for co in 0..g.c_out {
        let o = &mut out[co * plane_out..(co + 1) * plane_out];
        o.fill(bias.data()[co]);
        for ci in 0..g.c_in {
            for a in 0..kt {
                let (t_lo, t_hi) = Conv3dGeometry::valid_range(t_in, t_out, a, st, pt);
                for b in 0..kh {
                    let (h_lo, h_hi) = Conv3dGeometry::valid_range(h_in, h_out, b, sh, ph);
                    for c in 0..kw {
                        let (w_lo, w_hi) = Conv3dGeometry::valid_range(w_in, w_out, c, sw, pw);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let wv = w[(((co * g.c_in + ci) * kt + a) * kh + b) * kw + c];
                        for to in t_lo..t_hi {
                            let ti = to * st + a - pt;
                            for ho in h_lo..h_hi {
                                let hi = ho * sh + b - ph;
                                let in_row = &x[((ci * t_in + ti) * h_in + hi) * w_in..][..w_in];
                                let out_row = &mut o[(to * h_out + ho) * w_out..][..w_out];
                                let wi0 = w_lo * sw + c - pw;
                                if sw == 1 {
                                    let n = w_hi - w_lo;
                                    for (y, &xv) in out_row[w_lo..w_hi].iter_mut().zip(&in_row[wi0..wi0 + n]) {
                                        *y += wv * xv;
                                    }
                                } else {
                                    for (k, y) in out_row[w_lo..w_hi].iter_mut().enumerate() {
                                        *y += wv * in_row[wi0 + k * sw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(g.output_shape(), out).expect("conv3d output shape")
}

/// Gradients of a conv3d with respect to (input, weight, bias).
pub fn conv3d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    g: &Conv3dGeometry,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let [t_in, h_in, w_in] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let [t_out, h_out, w_out] = g.output;
    let x = input.data();
    let w = weight.data();
    let go = grad_out.data();
    let plane_out = t_out * h_out * w_out;

    let gb: Vec<f64> = (0..g.c_out)
        .map(|co| go[co * plane_out..(co + 1) * plane_out].iter().sum())
        .collect();
    let mut gx = need_input.then(|| vec![0.0; input.numel()]);
    let mut gw = need_weight.then(|| vec![0.0; weight.numel()]);
    if !need_input && !need_weight {
        return (None, None, gb);
    }

    for co in 0..g.c_out {
        let gplane = &go[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            for a in 0..kt {
                let (t_lo, t_hi) = Conv3dGeometry::valid_range(t_in, t_out, a, st, pt);
                for b in 0..kh {
                    let (h_lo, h_hi) = Conv3dGeometry::valid_range(h_in, h_out, b, sh, ph);
                    for c in 0..kw {
                        let (w_lo, w_hi) = Conv3dGeometry::valid_range(w_in, w_out, c, sw, pw);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let widx = (((co * g.c_in + ci) * kt + a) * kh + b) * kw + c;
                        let wv = w[widx];
                        let wi0 = w_lo * sw + c - pw;
                        let n = w_hi - w_lo;
                        let mut acc = 0.0;
                        for to in t_lo..t_hi {
                            let ti = to * st + a - pt;
                            for ho in h_lo..h_hi {
                                let hi = ho * sh + b - ph;
                                let row_off = ((ci * t_in + ti) * h_in + hi) * w_in;
                                let g_row = &gplane[(to * h_out + ho) * w_out + w_lo..][..n];
                                if gw.is_some() {
                                    let in_row = &x[row_off..row_off + w_in];
                                    if sw == 1 {
                                        for (&gv, &xv) in g_row.iter().zip(&in_row[wi0..wi0 + n]) {
                                            acc += gv * xv;
                                        }
                                    } else {
                                        for (k, &gv) in g_row.iter().enumerate() {
                                            acc += gv * in_row[wi0 + k * sw];
                                        }
                                    }
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let gin_row = &mut gx[row_off..row_off + w_in];
                                    if sw == 1 {
                                        for (d, &gv) in gin_row[wi0..wi0 + n].iter_mut().zip(g_row) {
                                            *d += wv * gv;
                                        }
                                    } else {
                                        for (k, &gv) in g_row.iter().enumerate() {
                                            gin_row[wi0 + k * sw] += wv * gv;
                                        }
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    /// Straight 7-deep loop with explicit bounds checks.
    fn naive(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: [usize; 3], pad: [usize; 3]) -> Tensor {
        let g = Conv3dGeometry::infer(input.shape(), weight.shape(), bias.shape(), stride, pad).unwrap();
        let mut out = Tensor::zeros(g.output_shape());
        for co in 0..g.c_out {
            for to in 0..g.output[0] {
                for ho in 0..g.output[1] {
                    for wo in 0..g.output[2] {
                        let mut acc = bias.at(&[co]);
                        for ci in 0..g.c_in {
                            for a in 0..g.kernel[0] {
                                for b in 0..g.kernel[1] {
                                    for c in 0..g.kernel[2] {
                                        let ti = (to * stride[0] + a) as isize - pad[0] as isize;
                                        let hi = (ho * stride[1] + b) as isize - pad[1] as isize;
                                        let wi = (wo * stride[2] + c) as isize - pad[2] as isize;
                                        if ti < 0 || hi < 0 || wi < 0 {
                                            continue;
                                        }
                                        let (ti, hi, wi) = (ti as usize, hi as usize, wi as usize);
                                        if ti >= g.input[0] || hi >= g.input[1] || wi >= g.input[2] {
                                            continue;
                                        }
                                        acc += weight.at(&[co, ci, a, b, c]) * input.at(&[ci, ti, hi, wi]);
                                    }
                                }
                            }
                        }
                        out.set(&[co, to, ho, wo], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loop_bitwise() {
        let mut rng = Rng::new(5);
        for trial in 0..30 {
            let c_in = 1 + rng.below(4);
            let c_out = 1 + rng.below(3);
            let dims = [1 + rng.below(6), 1 + rng.below(8), 1 + rng.below(8)];
            let k = [1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3)];
            let stride = [1 + rng.below(2), 1 + rng.below(2), 1 + rng.below(3)];
            let pad = [rng.below(2), rng.below(2), rng.below(2)];
            if (0..3).any(|a| k[a] > dims[a] + 2 * pad[a]) {
                continue;
            }
            let x = rng.normal_tensor(vec![c_in, dims[0], dims[1], dims[2]]);
            let w = rng.normal_tensor(vec![c_out, c_in, k[0], k[1], k[2]]);
            let b = rng.normal_tensor(vec![c_out]);
            let g = Conv3dGeometry::infer(x.shape(), w.shape(), b.shape(), stride, pad).unwrap();
            let fast = conv3d_forward(&x, &w, &b, &g);
            let slow = naive(&x, &w, &b, stride, pad);
            assert!(fast.bit_eq(&slow), "trial {trial}: {g:?}");
        }
    }

    #[test]
    fn valid_range_is_exact() {
        for len in 1..9 {
            for k in 0..4 {
                for stride in 1..4 {
                    for pad in 0..3 {
                        let Some(out) = conv_out_len(len, k + 1, stride, pad) else { continue };
                        let (lo, hi) = Conv3dGeometry::valid_range(len, out, k, stride, pad);
                        for o in 0..out {
                            let i = (o * stride + k) as isize - pad as isize;
                            let inside = i >= 0 && (i as usize) < len;
                            assert_eq!(inside, o >= lo && o < hi, "len {len} k {k} s {stride} p {pad} o {o}");
                        }
                    }
                }
            }
        }
    }
}
