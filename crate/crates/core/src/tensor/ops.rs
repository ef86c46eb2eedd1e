//! Differentiable operations: exactly what the three networks need.
//!
//! Each op validates shapes, computes its output eagerly, and (when the tape
//! records and an input carries grad) pushes a backward closure. Backward
//! closures recompute cheap intermediates from the captured input handles
//! rather than storing large buffers, so memory stays bounded by the live
//! activations.
//!
//! Conventions fixed here: ReLU-family subgradient at the kink is the
//! negative-side slope (0 for ReLU), max-pool ties break to the first
//! row-major index, and every op is deterministic (parallel loops own
//! disjoint output slices and reduce in a fixed serial order).

use rayon::prelude::*;

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Spatial padding policy for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    /// Zero-pad so the output spatial size is ceil(size / stride).
    Same,
    /// No padding; output size is (size - k) / stride + 1.
    Valid,
}

/// Forward mode for batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn pads_for(size: usize, k: usize, stride: usize, pad: Pad) -> Result<(usize, usize, usize)> {
    match pad {
        Pad::Same => {
            let out = size.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(size);
            Ok((total / 2, total - total / 2, out))
        }
        Pad::Valid => {
            if size < k {
                return Err(Error::Shape(format!(
                    "valid conv: input size {size} smaller than kernel {k}"
                )));
            }
            Ok((0, 0, (size - k) / stride + 1))
        }
    }
}

fn pad_nchw(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    pt: usize,
    pb: usize,
    pl: usize,
    pr: usize,
) -> Vec<f64> {
    let ph = h + pt + pb;
    let pw = w + pl + pr;
    let mut out = vec![0.0; n * c * ph * pw];
    for nc in 0..n * c {
        let src = &x[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * ph * pw..(nc + 1) * ph * pw];
        for row in 0..h {
            let d = (row + pt) * pw + pl;
            dst[d..d + w].copy_from_slice(&src[row * w..(row + 1) * w]);
        }
    }
    out
}

/// 2-D convolution over [N,C,H,W] with weight [F,C,kh,kw] and bias [F].
///
/// Odd kernels only. Differentiable w.r.t. input, weight and bias.
pub fn conv2d(
    tape: &mut Tape,
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: Pad,
) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (f, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(Error::Shape(format!(
            "conv2d: input has {c} channels but weight expects {wc}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape(format!("conv2d: kernel {kh}x{kw} must be odd")));
    }
    if stride < 1 {
        return Err(Error::Value("conv2d: stride must be >= 1".into()));
    }
    if bias.shape() != vec![f] {
        return Err(Error::Shape(format!(
            "conv2d: bias shape {:?} does not match {f} filters",
            bias.shape()
        )));
    }
    let (pt, pb, oh) = pads_for(h, kh, stride, pad)?;
    let (pl, pr, ow) = pads_for(w, kw, stride, pad)?;

    let out_data = {
        let x = input.data();
        let wd = weight.data();
        let bd = bias.data();
        conv2d_forward(&x, &wd, &bd, n, c, h, w, f, kh, kw, stride, pt, pb, pl, pr, oh, ow)
    };
    let out = Tensor::from_vec(vec![n, f, oh, ow], out_data)?;

    if tape.wants(&[input, weight, bias]) {
        let out_t = out.clone().requires_grad(true);
        let (xi, wi, bi) = (input.clone(), weight.clone(), bias.clone());
        tape.push(
            vec![input.clone(), weight.clone(), bias.clone()],
            out_t.clone(),
            Box::new(move |gout, sink| {
                let (gx, gw, gb) = {
                    let x = xi.data();
                    let wd = wi.data();
                    conv2d_backward(
                        gout,
                        &x,
                        &wd,
                        n,
                        c,
                        h,
                        w,
                        f,
                        kh,
                        kw,
                        stride,
                        pt,
                        pb,
                        pl,
                        pr,
                        oh,
                        ow,
                        xi.needs_grad(),
                        wi.needs_grad(),
                        bi.needs_grad(),
                    )
                };
                if let Some(g) = gx {
                    sink.add(&xi, &g);
                }
                if let Some(g) = gw {
                    sink.add(&wi, &g);
                }
                if let Some(g) = gb {
                    sink.add(&bi, &g);
                }
            }),
        );
        Ok(out_t)
    } else {
        Ok(out)
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    wd: &[f64],
    bd: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pt: usize,
    pb: usize,
    pl: usize,
    pr: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ph = h + pt + pb;
    let pw = w + pl + pr;
    let xp = pad_nchw(x, n, c, h, w, pt, pb, pl, pr);
    let xp = &xp[..];
    let mut out = vec![0.0; n * f * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(nf, omap)| {
        let ni = nf / f;
        let fi = nf % f;
        omap.fill(bd[fi]);
        for ci in 0..c {
            let xbase = (ni * c + ci) * ph * pw;
            let wbase = (fi * c + ci) * kh * kw;
            for khi in 0..kh {
                for kwi in 0..kw {
                    let wv = wd[wbase + khi * kw + kwi];
                    for ohi in 0..oh {
                        let irow = xbase + (ohi * stride + khi) * pw + kwi;
                        let orow = &mut omap[ohi * ow..(ohi + 1) * ow];
                        if stride == 1 {
                            let xrow = &xp[irow..irow + ow];
                            for (o, &xv) in orow.iter_mut().zip(xrow) {
                                *o += wv * xv;
                            }
                        } else {
                            for (owi, o) in orow.iter_mut().enumerate() {
                                *o += wv * xp[irow + owi * stride];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn conv2d_backward(
    gout: &[f64],
    x: &[f64],
    wd: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pt: usize,
    pb: usize,
    pl: usize,
    pr: usize,
    oh: usize,
    ow: usize,
    want_gx: bool,
    want_gw: bool,
    want_gb: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let ph = h + pt + pb;
    let pw = w + pl + pr;

    let gb = if want_gb {
        let mut gb = vec![0.0; f];
        for ni in 0..n {
            for (fi, g) in gb.iter_mut().enumerate() {
                let base = (ni * f + fi) * oh * ow;
                *g += gout[base..base + oh * ow].iter().sum::<f64>();
            }
        }
        Some(gb)
    } else {
        None
    };

    let gw = if want_gw {
        let xp = pad_nchw(x, n, c, h, w, pt, pb, pl, pr);
        let xp = &xp[..];
        let mut gw = vec![0.0; f * c * kh * kw];
        gw.par_chunks_mut(c * kh * kw).enumerate().for_each(|(fi, gwf)| {
            for ni in 0..n {
                let gbase = (ni * f + fi) * oh * ow;
                for ci in 0..c {
                    let xbase = (ni * c + ci) * ph * pw;
                    for khi in 0..kh {
                        for kwi in 0..kw {
                            let mut acc = 0.0;
                            for ohi in 0..oh {
                                let grow = &gout[gbase + ohi * ow..gbase + (ohi + 1) * ow];
                                let irow = xbase + (ohi * stride + khi) * pw + kwi;
                                if stride == 1 {
                                    let xrow = &xp[irow..irow + ow];
                                    for (&g, &xv) in grow.iter().zip(xrow) {
                                        acc += g * xv;
                                    }
                                } else {
                                    for (owi, &g) in grow.iter().enumerate() {
                                        acc += g * xp[irow + owi * stride];
                                    }
                                }
                            }
                            gwf[(ci * kh + khi) * kw + kwi] += acc;
                        }
                    }
                }
            }
        });
        Some(gw)
    } else {
        None
    };

    let gx = if want_gx {
        let mut gxp = vec![0.0; n * c * ph * pw];
        gxp.par_chunks_mut(ph * pw).enumerate().for_each(|(nc, gslice)| {
            let ni = nc / c;
            let ci = nc % c;
            for fi in 0..f {
                let gbase = (ni * f + fi) * oh * ow;
                let wbase = (fi * c + ci) * kh * kw;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = wd[wbase + khi * kw + kwi];
                        for ohi in 0..oh {
                            let grow = &gout[gbase + ohi * ow..gbase + (ohi + 1) * ow];
                            let base = (ohi * stride + khi) * pw + kwi;
                            if stride == 1 {
                                let gx = &mut gslice[base..base + ow];
                                for (g, &gv) in gx.iter_mut().zip(grow) {
                                    *g += wv * gv;
                                }
                            } else {
                                for (owi, &gv) in grow.iter().enumerate() {
                                    gslice[base + owi * stride] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        });
        // Strip padding.
        let mut gx = vec![0.0; n * c * h * w];
        for nc in 0..n * c {
            let src = &gxp[nc * ph * pw..(nc + 1) * ph * pw];
            let dst = &mut gx[nc * h * w..(nc + 1) * h * w];
            for row in 0..h {
                let s = (row + pt) * pw + pl;
                dst[row * w..(row + 1) * w].copy_from_slice(&src[s..s + w]);
            }
        }
        Some(gx)
    } else {
        None
    };

    (gx, gw, gb)
}

/// Batch normalization over [N,C,H,W] with per-channel affine.
///
/// Train mode normalizes with batch statistics and updates the running
/// buffers in place (`running = momentum * running + (1 - momentum) * batch`);
/// Eval mode uses the buffers. Train mode requires N*H*W >= 2 per channel.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d(
    tape: &mut Tape,
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    for (t, name) in [(gamma, "gamma"), (beta, "beta"), (running_mean, "running_mean"), (running_var, "running_var")] {
        if t.shape() != vec![c] {
            return Err(Error::Shape(format!(
                "batchnorm2d: {name} shape {:?} does not match {c} channels",
                t.shape()
            )));
        }
    }
    let m = n * h * w;
    if mode == Mode::Train && m < 2 {
        return Err(Error::Value(
            "batchnorm2d: train mode needs at least 2 elements per channel (variance undefined)"
                .into(),
        ));
    }

    let plane = h * w;
    let (out_data, mean_used, var_used) = {
        let x = input.data();
        let g = gamma.data();
        let b = beta.data();
        let (mean, var) = match mode {
            Mode::Train => channel_stats(&x, n, c, plane),
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + eps).sqrt();
                let base = (ni * c + ci) * plane;
                for i in 0..plane {
                    out[base + i] = g[ci] * (x[base + i] - mean[ci]) * inv + b[ci];
                }
            }
        }
        (out, mean, var)
    };

    if mode == Mode::Train {
        let mut rm = running_mean.to_vec();
        let mut rv = running_var.to_vec();
        for ci in 0..c {
            rm[ci] = momentum * rm[ci] + (1.0 - momentum) * mean_used[ci];
            rv[ci] = momentum * rv[ci] + (1.0 - momentum) * var_used[ci];
        }
        running_mean.set_data(&rm);
        running_var.set_data(&rv);
    }

    let out = Tensor::from_vec(vec![n, c, h, w], out_data)?;
    if tape.wants(&[input, gamma, beta]) {
        let out_t = out.clone().requires_grad(true);
        let (xi, gi, bi) = (input.clone(), gamma.clone(), beta.clone());
        // Eval-mode stats are snapshotted: buffers may move later.
        let snap = match mode {
            Mode::Train => None,
            Mode::Eval => Some((mean_used.clone(), var_used.clone())),
        };
        tape.push(
            vec![input.clone(), gamma.clone(), beta.clone()],
            out_t.clone(),
            Box::new(move |gout, sink| {
                let (gx, gg, gb) = {
                    let x = xi.data();
                    let g = gi.data();
                    let (mean, var) = match &snap {
                        Some((m, v)) => (m.clone(), v.clone()),
                        None => channel_stats(&x, n, c, plane),
                    };
                    let train = snap.is_none();
                    batchnorm_backward(gout, &x, &g, &mean, &var, n, c, plane, eps, train)
                };
                sink.add(&xi, &gx);
                sink.add(&gi, &gg);
                sink.add(&bi, &gb);
            }),
        );
        Ok(out_t)
    } else {
        Ok(out)
    }
}

fn channel_stats(x: &[f64], n: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            mean[ci] += x[base..base + plane].iter().sum::<f64>();
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            var[ci] += x[base..base + plane]
                .iter()
                .map(|&v| (v - mean[ci]) * (v - mean[ci]))
                .sum::<f64>();
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
fn batchnorm_backward(
    gout: &[f64],
    x: &[f64],
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
    n: usize,
    c: usize,
    plane: usize,
    eps: f64,
    train: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = (n * plane) as f64;
    let mut gx = vec![0.0; x.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for ci in 0..c {
        let inv = 1.0 / (var[ci] + eps).sqrt();
        let mut sum_g = 0.0;
        let mut sum_g_xhat = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let xhat = (x[base + i] - mean[ci]) * inv;
                sum_g += gout[base + i];
                sum_g_xhat += gout[base + i] * xhat;
            }
        }
        gb[ci] = sum_g;
        gg[ci] = sum_g_xhat;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let xhat = (x[base + i] - mean[ci]) * inv;
                gx[base + i] = if train {
                    gamma[ci] * inv * (gout[base + i] - sum_g / m - xhat * sum_g_xhat / m)
                } else {
                    gamma[ci] * inv * gout[base + i]
                };
            }
        }
    }
    (gx, gg, gb)
}

fn unary_op(
    tape: &mut Tape,
    input: &Tensor,
    forward: impl Fn(f64) -> f64,
    dydx: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let out_data: Vec<f64> = input.data().iter().map(|&v| forward(v)).collect();
    let out = Tensor::from_vec(input.shape(), out_data)?;
    if tape.wants(&[input]) {
        let out_t = out.clone().requires_grad(true);
        let xi = input.clone();
        let yi = out_t.clone();
        tape.push(
            vec![input.clone()],
            out_t.clone(),
            Box::new(move |gout, sink| {
                let gx: Vec<f64> = {
                    let x = xi.data();
                    let y = yi.data();
                    gout.iter()
                        .zip(x.iter().zip(y.iter()))
                        .map(|(&g, (&xv, &yv))| g * dydx(xv, yv))
                        .collect()
                };
                sink.add(&xi, &gx);
            }),
        );
        Ok(out_t)
    } else {
        Ok(out)
    }
}

/// ReLU; subgradient 0 at the kink.
pub fn relu(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    unary_op(tape, x, |v| v.max(0.0), |xv, _| if xv > 0.0 { 1.0 } else { 0.0 })
}

pub fn leaky_relu(tape: &mut Tape, x: &Tensor, slope: f64) -> Result<Tensor> {
    unary_op(
        tape,
        x,
        move |v| if v > 0.0 { v } else { slope * v },
        move |xv, _| if xv > 0.0 { 1.0 } else { slope },
    )
}

pub fn sigmoid(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    unary_op(tape, x, |v| 1.0 / (1.0 + (-v).exp()), |_, yv| yv * (1.0 - yv))
}

pub fn tanh(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    unary_op(tape, x, |v| v.tanh(), |_, yv| 1.0 - yv * yv)
}

/// PReLU with learnable `alpha`: scalar (0-d) or per-channel [C] against a
/// 4-d input.
pub fn prelu(tape: &mut Tape, x: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let ashape = alpha.shape();
    let per_channel = !ashape.is_empty();
    let (c, plane, n) = if per_channel {
        let (n, c, h, w) = x.dims4().map_err(|_| {
            Error::Shape("prelu: per-channel alpha needs a 4-d input".into())
        })?;
        if ashape != vec![c] {
            return Err(Error::Shape(format!(
                "prelu: alpha shape {ashape:?} does not match {c} channels"
            )));
        }
        (c, h * w, n)
    } else {
        (1, x.numel(), 1)
    };

    let out_data: Vec<f64> = {
        let xd = x.data();
        let ad = alpha.data();
        let mut out = vec![0.0; xd.len()];
        for (i, (&xv, o)) in xd.iter().zip(out.iter_mut()).enumerate() {
            let a = if per_channel { ad[(i / plane) % c] } else { ad[0] };
            *o = if xv > 0.0 { xv } else { a * xv };
        }
        let _ = n;
        out
    };
    let out = Tensor::from_vec(x.shape(), out_data)?;

    if tape.wants(&[x, alpha]) {
        let out_t = out.clone().requires_grad(true);
        let (xi, ai) = (x.clone(), alpha.clone());
        tape.push(
            vec![x.clone(), alpha.clone()],
            out_t.clone(),
            Box::new(move |gout, sink| {
                let (gx, ga) = {
                    let xd = xi.data();
                    let ad = ai.data();
                    let mut gx = vec![0.0; xd.len()];
                    let mut ga = vec![0.0; ad.len()];
                    for (i, (&xv, &g)) in xd.iter().zip(gout).enumerate() {
                        let ci = if per_channel { (i / plane) % c } else { 0 };
                        if xv > 0.0 {
                            gx[i] = g;
                        } else {
                            gx[i] = g * ad[ci];
                            ga[ci] += g * xv;
                        }
                    }
                    (gx, ga)
                };
                sink.add(&xi, &gx);
                sink.add(&ai, &ga);
            }),
        );
        Ok(out_t)
    } else {
        Ok(out)
    }
}

/// Max pooling over [N,C,H,W]; gradient routes to the first row-major argmax
/// of each window.
pub fn maxpool2d(tape: &mut Tape, x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || stride == 0 {
        return Err(Error::Value("maxpool2d: k and stride must be positive".into()));
    }
    if h < k || w < k || (h - k) % stride != 0 || (w - k) % stride != 0 {
        return Err(Error::Shape(format!(
            "maxpool2d: {h}x{w} input not divisible into {k}-windows at stride {stride}"
        )));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;

    let out_data = {
        let xd = x.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let plane = &xd[nc * h * w..(nc + 1) * h * w];
            let oplane = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for ki in 0..k {
                        for kj in 0..k {
                            let v = plane[(ohi * stride + ki) * w + owi * stride + kj];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    oplane[ohi * ow + owi] = best;
                }
            }
        }
        out
    };
    let out = Tensor::from_vec(vec![n, c, oh, ow], out_data)?;

    if tape.wants(&[x]) {
        let out_t = out.clone().requires_grad(true);
        let xi = x.clone();
        tape.push(
            vec![x.clone()],
            out_t.clone(),
            Box::new(move |gout, sink| {
                let gx = {
                    let xd = xi.data();
                    let mut gx = vec![0.0; xd.len()];
                    for nc in 0..n * c {
                        let plane = &xd[nc * h * w..(nc + 1) * h * w];
                        let gplane = &mut gx[nc * h * w..(nc + 1) * h * w];
                        for ohi in 0..oh {
                            for owi in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut arg = 0;
                                for ki in 0..k {
                                    for kj in 0..k {
                                        let idx = (ohi * stride + ki) * w + owi * stride + kj;
                                        if plane[idx] > best {
                                            best = plane[idx];
                                            arg = idx;
                                        }
                                    }
                                }
                                gplane[arg] += gout[nc * oh * ow + ohi * ow + owi];
                            }
                        }
                    }
                    gx
                };
                sink.add(&xi, &gx);
            }),
        );
        Ok(out_t)
    } else {
        Ok(out)
    }
}

fn shuffle_map(n: usize, c_out: usize, r: usize, h: usize, w: usize) -> Vec<usize> {
    // dst index (shuffled layout) for each src index of [N, C*r^2, H, W].
    let mut map = vec![0usize; n * c_out * r * r * h * w];
    let (hh, ww) = (h * r, w * r);
    for ni in 0..n {
        for co in 0..c_out {
            for a in 0..r {
                for b in 0..r {
                    let ci = co * r * r + a * r + b;
                    for hi in 0..h {
                        for wi in 0..w {
                            let src = ((ni * c_out * r * r + ci) * h + hi) * w + wi;
                            let dst = ((ni * c_out + co) * hh + hi * r + a) * ww + wi * r + b;
                            map[src] = dst;
                        }
                    }
                }
            }
        }
    }
    map
}

/// Sub-pixel rearrangement: [N, C*r^2, H, W] -> [N, C, H*r, W*r].
pub fn pixel_shuffle(tape: &mut Tape, x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::Shape(format!(
            "pixel_shuffle: {c} channels not divisible by r^2 = {}",
            r * r
        )));
    }
    let c_out = c / (r * r);
    let map = shuffle_map(n, c_out, r, h, w);
    let out_data = {
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for (src, &dst) in map.iter().enumerate() {
            out[dst] = xd[src];
        }
        out
    };
    let out = Tensor::from_vec(vec![n, c_out, h * r, w * r], out_data)?;
    if tape.wants(&[x]) {
        let out_t = out.clone().requires_grad(true);
        let xi = x.clone();
        tape.push(
            vec![x.clone()],
            out_t.clone(),
            Box::new(move |gout, sink| {
                let gx: Vec<f64> = map.iter().map(|&dst| gout[dst]).collect();
                sink.add(&xi, &gx);
            }),
        );
        Ok(out_t)
    } else {
        Ok(out)
    }
}

/// Inverse of [`pixel_shuffle`]: [N, C, H*r, W*r] -> [N, C*r^2, H, W].
pub fn pixel_unshuffle(tape: &mut Tape, x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, hh, ww) = x.dims4()?;
    if r == 0 || hh % r != 0 || ww % r != 0 {
        return Err(Error::Shape(format!(
            "pixel_unshuffle: spatial dims {hh}x{ww} not divisible by r = {r}"
        )));
    }
    let (h, w) = (hh / r, ww / r);
    let map = shuffle_map(n, c, r, h, w); // src (unshuffled) -> dst (shuffled)
    let out_data = {
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for (src, &dst) in map.iter().enumerate() {
            out[src] = xd[dst];
        }
        out
    };
    let out = Tensor::from_vec(vec![n, c * r * r, h, w], out_data)?;
    if tape.wants(&[x]) {
        let out_t = out.clone().requires_grad(true);
        let xi = x.clone();
        tape.push(
            vec![x.clone()],
            out_t.clone(),
            Box::new(move |gout, sink| {
                let mut gx = vec![0.0; gout.len()];
                for (src, &dst) in map.iter().enumerate() {
                    gx[dst] = gout[src];
                }
                sink.add(&xi, &gx);
            }),
        );
        Ok(out_t)
    } else {
        Ok(out)
    }
}

/// Affine map: input [N,K] x weight [M,K] + bias [M] -> [N,M].
pub fn dense(tape: &mut Tape, x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, k) = x.dims2()?;
    let (m, wk) = weight.dims2()?;
    if wk != k {
        return Err(Error::Shape(format!(
            "dense: input features {k} do not match weight features {wk}"
        )));
    }
    if bias.shape() != vec![m] {
        return Err(Error::Shape(format!(
            "dense: bias shape {:?} does not match {m} outputs",
            bias.shape()
        )));
    }
    let out_data = {
        let xd = x.data();
        let wd = weight.data();
        let bd = bias.data();
        let mut out = vec![0.0; n * m];
        for ni in 0..n {
            let xrow = &xd[ni * k..(ni + 1) * k];
            for mi in 0..m {
                let wrow = &wd[mi * k..(mi + 1) * k];
                let mut acc = bd[mi];
                for (&xv, &wv) in xrow.iter().zip(wrow) {
                    acc += xv * wv;
                }
                out[ni * m + mi] = acc;
            }
        }
        out
    };
    let out = Tensor::from_vec(vec![n, m], out_data)?;
    if tape.wants(&[x, weight, bias]) {
        let out_t = out.clone().requires_grad(true);
        let (xi, wi, bi) = (x.clone(), weight.clone(), bias.clone());
        tape.push(
            vec![x.clone(), weight.clone(), bias.clone()],
            out_t.clone(),
            Box::new(move |gout, sink| {
                let (gx, gw, gb) = {
                    let xd = xi.data();
                    let wd = wi.data();
                    let mut gx = vec![0.0; n * k];
                    let mut gw = vec![0.0; m * k];
                    let mut gb = vec![0.0; m];
                    for ni in 0..n {
                        for mi in 0..m {
                            let g = gout[ni * m + mi];
                            gb[mi] += g;
                            let wrow = &wd[mi * k..(mi + 1) * k];
                            let xrow = &xd[ni * k..(ni + 1) * k];
                            let gxrow = &mut gx[ni * k..(ni + 1) * k];
                            for ki in 0..k {
                                gxrow[ki] += g * wrow[ki];
                            }
                            let gwrow = &mut gw[mi * k..(mi + 1) * k];
                            for ki in 0..k {
                                gwrow[ki] += g * xrow[ki];
                            }
                        }
                    }
                    (gx, gw, gb)
                };
                sink.add(&xi, &gx);
                sink.add(&wi, &gw);
                sink.add(&bi, &gb);
            }),
        );
        Ok(out_t)
    } else {
        Ok(out)
    }
}

fn binary_same_shape(
    tape: &mut Tape,
    a: &Tensor,
    b: &Tensor,
    name: &str,
    forward: impl Fn(f64, f64) -> f64,
    // (ga, gb) contributions given (gout_i, a_i, b_i)
    grads: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{name}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let out_data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| forward(x, y))
        .collect();
    let out = Tensor::from_vec(a.shape(), out_data)?;
    if tape.wants(&[a, b]) {
        let out_t = out.clone().requires_grad(true);
        let (ai, bi) = (a.clone(), b.clone());
        tape.push(
            vec![a.clone(), b.clone()],
            out_t.clone(),
            Box::new(move |gout, sink| {
                let (ga, gb) = {
                    let ad = ai.data();
                    let bd = bi.data();
                    let mut ga = vec![0.0; ad.len()];
                    let mut gb = vec![0.0; bd.len()];
                    for (i, &g) in gout.iter().enumerate() {
                        let (da, db) = grads(g, ad[i], bd[i]);
                        ga[i] = da;
                        gb[i] = db;
                    }
                    (ga, gb)
                };
                sink.add(&ai, &ga);
                sink.add(&bi, &gb);
            }),
        );
        Ok(out_t)
    } else {
        Ok(out)
    }
}

pub fn add(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_same_shape(tape, a, b, "add", |x, y| x + y, |g, _, _| (g, g))
}

pub fn sub(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_same_shape(tape, a, b, "sub", |x, y| x - y, |g, _, _| (g, -g))
}

pub fn mul(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_same_shape(tape, a, b, "mul", |x, y| x * y, |g, x, y| (g * y, g * x))
}

/// Multiply by a compile-time constant.
pub fn scale(tape: &mut Tape, x: &Tensor, s: f64) -> Result<Tensor> {
    unary_op(tape, x, move |v| s * v, move |_, _| s)
}

/// Add a constant to every element.
pub fn add_scalar(tape: &mut Tape, x: &Tensor, s: f64) -> Result<Tensor> {
    unary_op(tape, x, move |v| v + s, |_, _| 1.0)
}

/// Sum of all elements, as a 0-d tensor.
pub fn sum(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let total: f64 = x.data().iter().sum();
    let out = Tensor::scalar(total);
    if tape.wants(&[x]) {
        let out_t = out.clone().requires_grad(true);
        let xi = x.clone();
        let n = x.numel();
        tape.push(
            vec![x.clone()],
            out_t.clone(),
            Box::new(move |gout, sink| {
                sink.add(&xi, &vec![gout[0]; n]);
            }),
        );
        Ok(out_t)
    } else {
        Ok(out)
    }
}

/// Mean of all elements, as a 0-d tensor.
pub fn mean(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let n = x.numel();
    let total: f64 = x.data().iter().sum();
    let out = Tensor::scalar(total / n as f64);
    if tape.wants(&[x]) {
        let out_t = out.clone().requires_grad(true);
        let xi = x.clone();
        tape.push(
            vec![x.clone()],
            out_t.clone(),
            Box::new(move |gout, sink| {
                sink.add(&xi, &vec![gout[0] / n as f64; n]);
            }),
        );
        Ok(out_t)
    } else {
        Ok(out)
    }
}

/// Row-major reinterpretation under a new shape with the same element count.
pub fn reshape(tape: &mut Tape, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != x.numel() {
        return Err(Error::Shape(format!(
            "reshape: {:?} ({} elements) cannot view {} elements",
            shape,
            n,
            x.numel()
        )));
    }
    let out = Tensor::from_vec(shape, x.to_vec())?;
    if tape.wants(&[x]) {
        let out_t = out.clone().requires_grad(true);
        let xi = x.clone();
        tape.push(
            vec![x.clone()],
            out_t.clone(),
            Box::new(move |gout, sink| {
                sink.add(&xi, gout);
            }),
        );
        Ok(out_t)
    } else {
        Ok(out)
    }
}

/// Collapse all trailing axes: [N, ...] -> [N, prod(...)].
pub fn flatten(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.is_empty() {
        return Err(Error::Shape("flatten: scalar input".into()));
    }
    let rest: usize = s[1..].iter().product();
    reshape(tape, x, vec![s[0], rest])
}

/// Spatial crop of a [N,C,H,W] tensor.
pub fn crop2d(
    tape: &mut Tape,
    x: &Tensor,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if top + ch > h || left + cw > w || ch == 0 || cw == 0 {
        return Err(Error::Shape(format!(
            "crop2d: window {ch}x{cw}@({top},{left}) outside {h}x{w} input"
        )));
    }
    let out_data = {
        let xd = x.data();
        let mut out = vec![0.0; n * c * ch * cw];
        for nc in 0..n * c {
            for row in 0..ch {
                let s = nc * h * w + (top + row) * w + left;
                let d = nc * ch * cw + row * cw;
                out[d..d + cw].copy_from_slice(&xd[s..s + cw]);
            }
        }
        out
    };
    let out = Tensor::from_vec(vec![n, c, ch, cw], out_data)?;
    if tape.wants(&[x]) {
        let out_t = out.clone().requires_grad(true);
        let xi = x.clone();
        tape.push(
            vec![x.clone()],
            out_t.clone(),
            Box::new(move |gout, sink| {
                let mut gx = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for row in 0..ch {
                        let d = nc * h * w + (top + row) * w + left;
                        let s = nc * ch * cw + row * cw;
                        gx[d..d + cw].copy_from_slice(&gout[s..s + cw]);
                    }
                }
                sink.add(&xi, &gx);
            }),
        );
        Ok(out_t)
    } else {
        Ok(out)
    }
}

/// Per-channel spatial mean: [N,C,H,W] -> [N,C].
pub fn global_avg_pool(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let out_data = {
        let xd = x.data();
        let mut out = vec![0.0; n * c];
        for (nc, o) in out.iter_mut().enumerate() {
            *o = xd[nc * plane..(nc + 1) * plane].iter().sum::<f64>() / plane as f64;
        }
        out
    };
    let out = Tensor::from_vec(vec![n, c], out_data)?;
    if tape.wants(&[x]) {
        let out_t = out.clone().requires_grad(true);
        let xi = x.clone();
        tape.push(
            vec![x.clone()],
            out_t.clone(),
            Box::new(move |gout, sink| {
                let mut gx = vec![0.0; n * c * plane];
                for nc in 0..n * c {
                    let g = gout[nc] / plane as f64;
                    gx[nc * plane..(nc + 1) * plane].fill(g);
                }
                sink.add(&xi, &gx);
            }),
        );
        Ok(out_t)
    } else {
        Ok(out)
    }
}

/// Mean squared error between equal-shape tensors, as a 0-d tensor.
pub fn mse_loss(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mse_loss: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.numel();
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    let out = Tensor::scalar(total / n as f64);
    if tape.wants(&[a, b]) {
        let out_t = out.clone().requires_grad(true);
        let (ai, bi) = (a.clone(), b.clone());
        tape.push(
            vec![a.clone(), b.clone()],
            out_t.clone(),
            Box::new(move |gout, sink| {
                let (ga, gb) = {
                    let ad = ai.data();
                    let bd = bi.data();
                    let k = 2.0 * gout[0] / n as f64;
                    let ga: Vec<f64> = ad.iter().zip(bd.iter()).map(|(&x, &y)| k * (x - y)).collect();
                    let gb: Vec<f64> = ga.iter().map(|&v| -v).collect();
                    (ga, gb)
                };
                sink.add(&ai, &ga);
                sink.add(&bi, &gb);
            }),
        );
        Ok(out_t)
    } else {
        Ok(out)
    }
}

/// Stack equal-shape tensors along a new leading axis. Plumbing for batch
/// assembly; not differentiable.
pub fn stack(tensors: &[Tensor]) -> Result<Tensor> {
    if tensors.is_empty() {
        return Err(Error::Shape("stack: empty input".into()));
    }
    let shape = tensors[0].shape();
    let mut data = Vec::with_capacity(tensors.len() * tensors[0].numel());
    for t in tensors {
        if t.shape() != shape {
            return Err(Error::Shape(format!(
                "stack: shapes {:?} and {:?} differ",
                shape,
                t.shape()
            )));
        }
        data.extend_from_slice(&t.data());
    }
    let mut out_shape = vec![tensors.len()];
    out_shape.extend_from_slice(&shape);
    Tensor::from_vec(out_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn t4(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(vec![n, c, h, w], data).unwrap()
    }

    #[test]
    fn conv2d_box_sum_of_ones() {
        let mut tape = Tape::new();
        let x = t4(1, 1, 3, 3, vec![1.0; 9]);
        let w = t4(1, 1, 3, 3, vec![1.0; 9]);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&mut tape, &x, &w, &b, 1, Pad::Same).unwrap();
        let d = y.to_vec();
        assert_eq!(d[4], 9.0); // center
        assert_eq!(d[0], 4.0); // corner
        assert_eq!(d[8], 4.0);
        assert_eq!(d[1], 6.0); // edge
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = t4(1, 1, 4, 4, (0..16).map(|i| i as f64).collect());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = t4(1, 1, 3, 3, k);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&mut tape, &x, &w, &b, 1, Pad::Same).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv2d_shape_errors() {
        let mut tape = Tape::new();
        let x = t4(1, 2, 4, 4, vec![0.0; 32]);
        let w = t4(1, 3, 3, 3, vec![0.0; 27]); // wrong channel count
        let b = Tensor::zeros(&[1]);
        assert!(conv2d(&mut tape, &x, &w, &b, 1, Pad::Same).is_err());
        let w_even = t4(1, 2, 2, 2, vec![0.0; 8]);
        assert!(conv2d(&mut tape, &x, &w_even, &b, 1, Pad::Same).is_err());
    }

    #[test]
    fn conv2d_stride2_same_shape() {
        let mut tape = Tape::new();
        let x = t4(1, 1, 8, 8, vec![1.0; 64]);
        let w = t4(3, 1, 3, 3, vec![0.1; 27]);
        let b = Tensor::zeros(&[3]);
        let y = conv2d(&mut tape, &x, &w, &b, 2, Pad::Same).unwrap();
        assert_eq!(y.shape(), vec![1, 3, 4, 4]);
    }

    #[test]
    fn batchnorm_normalizes_in_train_mode() {
        let mut tape = Tape::new();
        // channel with mean 5, std 2
        let data: Vec<f64> = (0..64).map(|i| 5.0 + 2.0 * ((i as f64 / 63.0) - 0.5) * 3.4641).collect();
        let x = t4(1, 1, 8, 8, data);
        let gamma = Tensor::full(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let rm = Tensor::zeros(&[1]);
        let rv = Tensor::full(&[1], 1.0);
        let y = batchnorm2d(&mut tape, &x, &gamma, &beta, &rm, &rv, Mode::Train, 0.9, 1e-5).unwrap();
        let d = y.to_vec();
        let mean: f64 = d.iter().sum::<f64>() / d.len() as f64;
        let var: f64 = d.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64;
        assert!(mean.abs() < 1e-10, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
        // running stats moved toward batch stats
        assert!(rm.to_vec()[0] > 0.0);
    }

    #[test]
    fn batchnorm_gamma_zero_gives_beta() {
        let mut tape = Tape::new();
        let x = t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let gamma = Tensor::zeros(&[1]);
        let beta = Tensor::full(&[1], 0.7);
        let rm = Tensor::zeros(&[1]);
        let rv = Tensor::full(&[1], 1.0);
        let y = batchnorm2d(&mut tape, &x, &gamma, &beta, &rm, &rv, Mode::Train, 0.9, 1e-5).unwrap();
        for v in y.to_vec() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_single_element_train_errors() {
        let mut tape = Tape::new();
        let x = t4(1, 1, 1, 1, vec![3.0]);
        let ones = Tensor::full(&[1], 1.0);
        let zeros = Tensor::zeros(&[1]);
        let rv = Tensor::full(&[1], 1.0);
        assert!(batchnorm2d(&mut tape, &x, &ones, &zeros, &zeros, &rv, Mode::Train, 0.9, 1e-5).is_err());
        // Eval mode is fine with one element.
        assert!(batchnorm2d(&mut tape, &x, &ones, &zeros, &zeros, &rv, Mode::Eval, 0.9, 1e-5).is_ok());
    }

    #[test]
    fn prelu_definition() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![2], vec![-2.0, 3.0]).unwrap();
        let a = Tensor::scalar(0.25);
        let y = prelu(&mut tape, &x, &a).unwrap();
        assert_eq!(y.to_vec(), vec![-0.5, 3.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = Tensor::scalar(0.0);
        let y = sigmoid(&mut tape, &x).unwrap();
        assert_eq!(y.item(), 0.5);
    }

    #[test]
    fn maxpool_basic_and_tie_break() {
        let mut tape = Tape::new();
        let x = t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let y = maxpool2d(&mut tape, &x, 2, 2).unwrap();
        assert_eq!(y.to_vec(), vec![4.0]);

        // constant input: gradient goes entirely to the first element per window
        let mut tape = Tape::new();
        let xc = t4(1, 1, 2, 2, vec![5.0; 4]).requires_grad(true);
        let y = maxpool2d(&mut tape, &xc, 2, 2).unwrap();
        let s = sum(&mut tape, &y).unwrap();
        backward(&tape, &s).unwrap();
        assert_eq!(xc.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_dims_must_divide() {
        let mut tape = Tape::new();
        let x = t4(1, 1, 5, 4, vec![0.0; 20]);
        assert!(maxpool2d(&mut tape, &x, 2, 2).is_err());
    }

    #[test]
    fn pixel_shuffle_permutation() {
        let mut tape = Tape::new();
        let x = t4(1, 4, 1, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let y = pixel_shuffle(&mut tape, &x, 2).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let back = pixel_unshuffle(&mut tape, &y, 2).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn pixel_shuffle_rejects_indivisible() {
        let mut tape = Tape::new();
        let x = t4(1, 3, 2, 2, vec![0.0; 12]);
        assert!(pixel_shuffle(&mut tape, &x, 2).is_err());
    }

    #[test]
    fn dense_affine_map() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![1], vec![5.0]).unwrap();
        let y = dense(&mut tape, &x, &w, &b).unwrap();
        assert_eq!(y.to_vec(), vec![16.0]);
    }

    #[test]
    fn dense_identity() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let y = dense(&mut tape, &x, &w, &b).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let a = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![1.0, 3.0]).unwrap();
        assert_eq!(mse_loss(&mut tape, &a, &b).unwrap().item(), 5.0);
        assert_eq!(mse_loss(&mut tape, &a, &a).unwrap().item(), 0.0);
        let c = Tensor::zeros(&[3]);
        assert!(mse_loss(&mut tape, &a, &c).is_err());
    }

    #[test]
    fn crop2d_slices() {
        let mut tape = Tape::new();
        let x = t4(1, 1, 4, 4, (0..16).map(|i| i as f64).collect());
        let y = crop2d(&mut tape, &x, 1, 2, 2, 2).unwrap();
        assert_eq!(y.to_vec(), vec![6.0, 7.0, 10.0, 11.0]);
        assert!(crop2d(&mut tape, &x, 3, 3, 2, 2).is_err());
    }

    #[test]
    fn global_avg_pool_means() {
        let mut tape = Tape::new();
        let x = t4(1, 2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0]);
        let y = global_avg_pool(&mut tape, &x).unwrap();
        assert_eq!(y.to_vec(), vec![2.5, 10.0]);
    }

    #[test]
    fn stack_builds_batches() {
        let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap();
        let s = stack(&[a, b]).unwrap();
        assert_eq!(s.shape(), vec![2, 2]);
        assert_eq!(s.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }
}
