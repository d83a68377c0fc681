//! Raw direct-loop kernels. No graph bookkeeping here.

use super::tensor::Conv2dSpec;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn new(input: [usize; 4], kernel: [usize; 4], spec: Conv2dSpec) -> Option<ConvDims> {
        let [n, c, h, w] = input;
        let [o, kc, kh, kw] = kernel;
        if kc != c || spec.stride == 0 || h + 2 * spec.pad < kh || w + 2 * spec.pad < kw {
            return None;
        }
        let oh = (h + 2 * spec.pad - kh) / spec.stride + 1;
        let ow = (w + 2 * spec.pad - kw) / spec.stride + 1;
        Some(ConvDims { n, c, h, w, o, kh, kw, oh, ow, stride: spec.stride, pad: spec.pad })
    }

    /// Range of output columns `ox` for which `ox*stride + kx - pad` is a valid input column.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        valid_range(self.ow, self.w, self.stride, kx, self.pad)
    }

    #[inline]
    fn valid_rows(&self, ky: usize) -> (usize, usize) {
        valid_range(self.oh, self.h, self.stride, ky, self.pad)
    }
}

#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < in_len
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if in_len + pad <= k { 0 } else { ((in_len + pad - k - 1) / stride + 1).min(out_len) };
    (lo, hi.max(lo))
}

/// Stride-1 layout: every plane is zero-padded once and outputs are kept at the
/// padded row pitch, so each (channel, tap) pair is one contiguous run of
/// length `span` instead of `oh` short rows. Columns `ow..wp` of a wide output
/// row are scratch.
struct Wide {
    hp: usize,
    wp: usize,
    span: usize,
}

impl Wide {
    fn of(d: &ConvDims) -> Option<Wide> {
        if d.stride != 1 {
            return None;
        }
        let (hp, wp) = (d.h + 2 * d.pad, d.w + 2 * d.pad);
        Some(Wide { hp, wp, span: (d.oh - 1) * wp + d.ow })
    }

    fn pad_input(&self, x: &[f64], d: &ConvDims, n: usize) -> Vec<f64> {
        let mut xp = vec![0.0; d.c * self.hp * self.wp];
        for c in 0..d.c {
            let src = &x[(n * d.c + c) * d.h * d.w..][..d.h * d.w];
            let dst = &mut xp[c * self.hp * self.wp..][..self.hp * self.wp];
            for iy in 0..d.h {
                dst[(iy + d.pad) * self.wp + d.pad..][..d.w].copy_from_slice(&src[iy * d.w..][..d.w]);
            }
        }
        xp
    }

    fn widen_output(&self, g: &[f64], d: &ConvDims, n: usize) -> Vec<f64> {
        let plane = d.oh * self.wp;
        let mut gw = vec![0.0; d.o * plane];
        for o in 0..d.o {
            let src = &g[(n * d.o + o) * d.oh * d.ow..][..d.oh * d.ow];
            for oy in 0..d.oh {
                gw[o * plane + oy * self.wp..][..d.ow].copy_from_slice(&src[oy * d.ow..][..d.ow]);
            }
        }
        gw
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four partial sums keep the reduction order fixed while letting it pipeline
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn conv2d_wide(x: &[f64], w: &[f64], d: &ConvDims, wd: &Wide) -> Vec<f64> {
    let mut y = vec![0.0; d.n * d.o * d.oh * d.ow];
    let plane = d.oh * wd.wp;
    let pp = wd.hp * wd.wp;
    let mut yw = vec![0.0; d.o * plane];
    for n in 0..d.n {
        let xp = wd.pad_input(x, d, n);
        yw.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..d.o {
            let ys = &mut yw[o * plane..][..wd.span];
            for c in 0..d.c {
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = w[((o * d.c + c) * d.kh + ky) * d.kw + kx];
                        if wv != 0.0 {
                            axpy(ys, wv, &xp[c * pp + ky * wd.wp + kx..][..wd.span]);
                        }
                    }
                }
            }
        }
        for o in 0..d.o {
            let dst = &mut y[(n * d.o + o) * d.oh * d.ow..][..d.oh * d.ow];
            for oy in 0..d.oh {
                dst[oy * d.ow..][..d.ow].copy_from_slice(&yw[o * plane + oy * wd.wp..][..d.ow]);
            }
        }
    }
    y
}

fn conv2d_input_grad_wide(g: &[f64], w: &[f64], d: &ConvDims, wd: &Wide) -> Vec<f64> {
    let mut dx = vec![0.0; d.n * d.c * d.h * d.w];
    let plane = d.oh * wd.wp;
    let pp = wd.hp * wd.wp;
    let mut dxp = vec![0.0; d.c * pp];
    for n in 0..d.n {
        let gw = wd.widen_output(g, d, n);
        dxp.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..d.c {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let xs = &mut dxp[c * pp + ky * wd.wp + kx..][..wd.span];
                    for o in 0..d.o {
                        let wv = w[((o * d.c + c) * d.kh + ky) * d.kw + kx];
                        if wv != 0.0 {
                            axpy(xs, wv, &gw[o * plane..][..wd.span]);
                        }
                    }
                }
            }
        }
        for c in 0..d.c {
            let dst = &mut dx[(n * d.c + c) * d.h * d.w..][..d.h * d.w];
            for iy in 0..d.h {
                dst[iy * d.w..][..d.w].copy_from_slice(&dxp[c * pp + (iy + d.pad) * wd.wp + d.pad..][..d.w]);
            }
        }
    }
    dx
}

fn conv2d_weight_grad_wide(x: &[f64], g: &[f64], d: &ConvDims, wd: &Wide) -> Vec<f64> {
    let mut dw = vec![0.0; d.o * d.c * d.kh * d.kw];
    let plane = d.oh * wd.wp;
    let pp = wd.hp * wd.wp;
    for n in 0..d.n {
        let xp = wd.pad_input(x, d, n);
        let gw = wd.widen_output(g, d, n);
        for o in 0..d.o {
            let gs = &gw[o * plane..][..wd.span];
            for c in 0..d.c {
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        dw[((o * d.c + c) * d.kh + ky) * d.kw + kx] +=
                            dot(gs, &xp[c * pp + ky * wd.wp + kx..][..wd.span]);
                    }
                }
            }
        }
    }
    dw
}

/// y[n,o,oy,ox] = sum_{c,ky,kx} x[n,c,iy,ix] * w[o,c,ky,kx]
pub(crate) fn conv2d(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    if let Some(wd) = Wide::of(d) {
        return conv2d_wide(x, w, d, &wd);
    }
    let mut y = vec![0.0; d.n * d.o * d.oh * d.ow];
    for n in 0..d.n {
        for o in 0..d.o {
            let yb = (n * d.o + o) * d.oh * d.ow;
            for c in 0..d.c {
                let xb = (n * d.c + c) * d.h * d.w;
                for ky in 0..d.kh {
                    let (oy0, oy1) = d.valid_rows(ky);
                    for kx in 0..d.kw {
                        let wv = w[((o * d.c + c) * d.kh + ky) * d.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = d.valid_cols(kx);
                        for oy in oy0..oy1 {
                            let iy = oy * d.stride + ky - d.pad;
                            let yrow = &mut y[yb + oy * d.ow..yb + (oy + 1) * d.ow];
                            let xrow = &x[xb + iy * d.w..xb + (iy + 1) * d.w];
                            if d.stride == 1 {
                                let off = kx as isize - d.pad as isize;
                                let xs = &xrow[(ox0 as isize + off) as usize..(ox1 as isize + off) as usize];
                                for (yv, xv) in yrow[ox0..ox1].iter_mut().zip(xs) {
                                    *yv += wv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    yrow[ox] += wv * xrow[ox * d.stride + kx - d.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of `conv2d` in its input: dx[n,c,iy,ix] = sum g[n,o,oy,ox] * w[o,c,ky,kx].
pub(crate) fn conv2d_input_grad(g: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    if let Some(wd) = Wide::of(d) {
        return conv2d_input_grad_wide(g, w, d, &wd);
    }
    let mut dx = vec![0.0; d.n * d.c * d.h * d.w];
    for n in 0..d.n {
        for o in 0..d.o {
            let gb = (n * d.o + o) * d.oh * d.ow;
            for c in 0..d.c {
                let xb = (n * d.c + c) * d.h * d.w;
                for ky in 0..d.kh {
                    let (oy0, oy1) = d.valid_rows(ky);
                    for kx in 0..d.kw {
                        let wv = w[((o * d.c + c) * d.kh + ky) * d.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = d.valid_cols(kx);
                        for oy in oy0..oy1 {
                            let iy = oy * d.stride + ky - d.pad;
                            let grow = &g[gb + oy * d.ow..gb + (oy + 1) * d.ow];
                            let xrow = &mut dx[xb + iy * d.w..xb + (iy + 1) * d.w];
                            if d.stride == 1 {
                                let off = kx as isize - d.pad as isize;
                                let xs = &mut xrow[(ox0 as isize + off) as usize..(ox1 as isize + off) as usize];
                                for (xv, gv) in xs.iter_mut().zip(&grow[ox0..ox1]) {
                                    *xv += wv * gv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    xrow[ox * d.stride + kx - d.pad] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Adjoint of `conv2d` in its kernel: dw[o,c,ky,kx] = sum x[n,c,iy,ix] * g[n,o,oy,ox].
pub(crate) fn conv2d_weight_grad(x: &[f64], g: &[f64], d: &ConvDims) -> Vec<f64> {
    if let Some(wd) = Wide::of(d) {
        return conv2d_weight_grad_wide(x, g, d, &wd);
    }
    let mut dw = vec![0.0; d.o * d.c * d.kh * d.kw];
    for n in 0..d.n {
        for o in 0..d.o {
            let gb = (n * d.o + o) * d.oh * d.ow;
            for c in 0..d.c {
                let xb = (n * d.c + c) * d.h * d.w;
                for ky in 0..d.kh {
                    let (oy0, oy1) = d.valid_rows(ky);
                    for kx in 0..d.kw {
                        let (ox0, ox1) = d.valid_cols(kx);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * d.stride + ky - d.pad;
                            let grow = &g[gb + oy * d.ow..gb + (oy + 1) * d.ow];
                            let xrow = &x[xb + iy * d.w..xb + (iy + 1) * d.w];
                            if d.stride == 1 {
                                let off = kx as isize - d.pad as isize;
                                let xs = &xrow[(ox0 as isize + off) as usize..(ox1 as isize + off) as usize];
                                acc += grow[ox0..ox1].iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                            } else {
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * xrow[ox * d.stride + kx - d.pad];
                                }
                            }
                        }
                        dw[((o * d.c + c) * d.kh + ky) * d.kw + kx] += acc;
                    }
                }
            }
        }
    }
    dw
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}
