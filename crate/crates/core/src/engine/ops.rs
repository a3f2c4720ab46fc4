//! Forward and backward kernels for the supported layer kinds.
//!
//! All kernels accumulate in a fixed order (input channels, then kernel rows,
//! then kernel columns) so repeated calls are bit-identical.

use crate::engine::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

/// Range of output positions `o` for which `o * stride + k - pad` lands inside `0..input`.
#[inline]
fn valid_range(out: usize, input: usize, k: usize, g: &ConvGeometry) -> (usize, usize) {
    let mut lo = 0;
    while lo < out && (lo * g.stride + k) < g.padding {
        lo += 1;
    }
    let mut hi = out;
    while hi > lo && ((hi - 1) * g.stride + k) >= g.padding + input {
        hi -= 1;
    }
    (lo, hi)
}

/// `input` is `[n, c, h, w]`, `weight` is `[o, c, k, k]`, `bias` has length `o`.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &[f64], g: ConvGeometry) -> Tensor {
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let o = weight.dim(0);
    let k = g.kernel;
    let ho = g.output_extent(h).expect("conv output height");
    let wo = g.output_extent(w).expect("conv output width");
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; n * o * ho * wo];
    for ni in 0..n {
        for oi in 0..o {
            let plane = &mut out[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
            plane.fill(bias[oi]);
            for ci in 0..c {
                let xin = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                for ky in 0..k {
                    let (ylo, yhi) = valid_range(ho, h, ky, &g);
                    for kx in 0..k {
                        let wv = wt[((oi * c + ci) * k + ky) * k + kx];
                        let (xlo, xhi) = valid_range(wo, w, kx, &g);
                        for y in ylo..yhi {
                            let iy = y * g.stride + ky - g.padding;
                            let row = &xin[iy * w..(iy + 1) * w];
                            let orow = &mut plane[y * wo..(y + 1) * wo];
                            if g.stride == 1 {
                                let off = kx as isize - g.padding as isize;
                                for xo in xlo..xhi {
                                    orow[xo] += wv * row[(xo as isize + off) as usize];
                                }
                            } else {
                                for xo in xlo..xhi {
                                    orow[xo] += wv * row[xo * g.stride + kx - g.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, o, ho, wo], out).expect("conv output shape")
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Vec<f64>>,
}

/// Gradients of a convolution given the upstream gradient `grad_out`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    g: ConvGeometry,
    want_input: bool,
    want_params: bool,
) -> ConvGrads {
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let o = weight.dim(0);
    let k = g.kernel;
    let (ho, wo) = (grad_out.dim(2), grad_out.dim(3));
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let mut gin = if want_input { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = if want_params { vec![0.0; wt.len()] } else { Vec::new() };
    let mut gb = if want_params { vec![0.0; o] } else { Vec::new() };

    for ni in 0..n {
        for oi in 0..o {
            let gplane = &go[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
            if want_params {
                gb[oi] += gplane.iter().sum::<f64>();
            }
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for ky in 0..k {
                    let (ylo, yhi) = valid_range(ho, h, ky, &g);
                    for kx in 0..k {
                        let widx = ((oi * c + ci) * k + ky) * k + kx;
                        let wv = wt[widx];
                        let (xlo, xhi) = valid_range(wo, w, kx, &g);
                        let mut acc = 0.0;
                        for y in ylo..yhi {
                            let iy = y * g.stride + ky - g.padding;
                            let grow = &gplane[y * wo..(y + 1) * wo];
                            for xo in xlo..xhi {
                                let ix = xo * g.stride + kx - g.padding;
                                let gv = grow[xo];
                                if want_params {
                                    acc += gv * x[base + iy * w + ix];
                                }
                                if want_input {
                                    gin[base + iy * w + ix] += wv * gv;
                                }
                            }
                        }
                        if want_params {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: want_input.then(|| Tensor::new(input.shape().to_vec(), gin).unwrap()),
        weight: want_params.then(|| Tensor::new(weight.shape().to_vec(), gw).unwrap()),
        bias: want_params.then_some(gb),
    }
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// Uses the forward output as the mask: `out > 0` exactly where `in > 0`.
pub fn relu_backward(out: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = out
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(out.shape().to_vec(), data).unwrap()
}

/// 2x2 max pooling with stride 2. Returns the output and, per output
/// element, the flat index of the winning input element (first maximum in
/// row-major window order).
pub fn maxpool2x2_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..ho {
            for xo in 0..wo {
                let mut best_i = base + (2 * y) * w + 2 * xo;
                let mut best = xd[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xo + dx;
                    if xd[i] > best {
                        best = xd[i];
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (Tensor::new(vec![n, c, ho, wo], out).unwrap(), arg)
}

pub fn maxpool2x2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        gd[i] += v;
    }
    g
}

/// Per-channel scaling `out[n, c, ..] = x[n, c, ..] * scales[c]`.
pub fn channel_scale_forward(x: &Tensor, scales: &[f64]) -> Tensor {
    let (n, c) = (x.dim(0), x.dim(1));
    let hw = x.len() / (n * c).max(1);
    let mut out = x.clone();
    for (plane, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
        let s = scales[plane % c];
        for v in chunk {
            *v *= s;
        }
    }
    out
}

/// Returns the input gradient and the scale gradient for each sample, `[n, c]`.
pub fn channel_scale_backward(x: &Tensor, scales: &[f64], grad_out: &Tensor) -> (Tensor, Tensor) {
    let (n, c) = (x.dim(0), x.dim(1));
    let hw = x.len() / (n * c).max(1);
    let mut gin = grad_out.clone();
    let mut gs = vec![0.0; n * c];
    let xd = x.data();
    for (plane, chunk) in gin.data_mut().chunks_mut(hw).enumerate() {
        let s = scales[plane % c];
        let xs = &xd[plane * hw..(plane + 1) * hw];
        let mut acc = 0.0;
        for (g, &xv) in chunk.iter_mut().zip(xs) {
            acc += *g * xv;
            *g *= s;
        }
        gs[plane] = acc;
    }
    (gin, Tensor::new(vec![n, c], gs).unwrap())
}

pub fn global_avg_pool_forward(x: &Tensor) -> Tensor {
    let (n, c) = (x.dim(0), x.dim(1));
    let hw = x.len() / (n * c).max(1);
    let inv = 1.0 / hw as f64;
    let data = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() * inv).collect();
    Tensor::new(vec![n, c], data).unwrap()
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let hw: usize = input_shape[2..].iter().product();
    let inv = 1.0 / hw as f64;
    let mut data = Vec::with_capacity(grad_out.len() * hw);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::new(input_shape.to_vec(), data).unwrap()
}

/// `x` is `[n, in]`, `weight` is `[out, in]`.
pub fn dense_forward(x: &Tensor, weight: &Tensor, bias: &[f64]) -> Tensor {
    let (n, din) = (x.dim(0), x.dim(1));
    let dout = weight.dim(0);
    let wd = weight.data();
    let mut out = Vec::with_capacity(n * dout);
    for row in x.data().chunks(din.max(1)).take(n) {
        for o in 0..dout {
            let wr = &wd[o * din..(o + 1) * din];
            let mut acc = bias[o];
            for (a, b) in wr.iter().zip(row) {
                acc += a * b;
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![n, dout], out).unwrap()
}

pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Option<Tensor>,
    pub bias: Option<Vec<f64>>,
}

pub fn dense_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor, want_params: bool) -> DenseGrads {
    let (n, din) = (x.dim(0), x.dim(1));
    let dout = weight.dim(0);
    let wd = weight.data();
    let xd = x.data();
    let gd = grad_out.data();
    let mut gin = vec![0.0; n * din];
    let mut gw = if want_params { vec![0.0; dout * din] } else { Vec::new() };
    let mut gb = if want_params { vec![0.0; dout] } else { Vec::new() };
    for ni in 0..n {
        let xr = &xd[ni * din..(ni + 1) * din];
        let gi = &mut gin[ni * din..(ni + 1) * din];
        for o in 0..dout {
            let g = gd[ni * dout + o];
            let wr = &wd[o * din..(o + 1) * din];
            for (a, &b) in gi.iter_mut().zip(wr) {
                *a += g * b;
            }
            if want_params {
                gb[o] += g;
                for (a, &b) in gw[o * din..(o + 1) * din].iter_mut().zip(xr) {
                    *a += g * b;
                }
            }
        }
    }
    DenseGrads {
        input: Tensor::new(vec![n, din], gin).unwrap(),
        weight: want_params.then(|| Tensor::new(vec![dout, din], gw).unwrap()),
        bias: want_params.then_some(gb),
    }
}

/// Row-wise softmax of `[n, k]` logits.
pub fn softmax_forward(logits: &Tensor) -> Tensor {
    let k = logits.dim(1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k.max(1)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Gradient w.r.t. logits given the gradient w.r.t. probabilities.
pub fn softmax_backward(probs: &Tensor, grad_probs: &Tensor) -> Tensor {
    let k = probs.dim(1);
    let mut out = Vec::with_capacity(probs.len());
    for (p, g) in probs.data().chunks(k).zip(grad_probs.data().chunks(k)) {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        out.extend(p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)));
    }
    Tensor::new(probs.shape().to_vec(), out).unwrap()
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
/// `targets[i]` is the output column of sample `i`'s true class.
pub fn cross_entropy(probs: &Tensor, targets: &[usize]) -> (f64, Tensor) {
    let (n, k) = (probs.dim(0), probs.dim(1));
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, (&t, row)) in targets.iter().zip(grad.data_mut().chunks_mut(k)).enumerate() {
        let p = probs.data()[i * k + t];
        // clamp zero probabilities, but let NaN through so callers see it
        loss -= if p.is_nan() { p } else { p.max(f64::MIN_POSITIVE).ln() };
        row[t] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    (loss * inv, grad)
}
