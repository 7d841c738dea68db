//! Slice-level forward/backward kernels. Every reduction runs in a fixed
//! order so results are bitwise reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k).checked_sub(self.pad)?;
        (i < extent).then_some(i)
    }
}

fn im2col<T: Element>(img: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.source(oy, ki, g.h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &img[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.source(ox, kj, g.w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeometry, img: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let Some(iy) = g.source(oy, ki, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.source(ox, kj, g.w) {
                            img[(ci * g.h + iy) * g.w + ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    x: &[T],
    n: usize,
    g: &ConvGeometry,
    weight: &[T],
    cout: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (r, p) = (g.rows(), g.cols());
    let in_per = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); n * cout * p];
    let mut cols = vec![T::zero(); r * p];
    for b in 0..n {
        im2col(&x[b * in_per..(b + 1) * in_per], g, &mut cols);
        let out_b = &mut out[b * cout * p..(b + 1) * cout * p];
        for co in 0..cout {
            let dst = &mut out_b[co * p..(co + 1) * p];
            if let Some(bias) = bias {
                dst.fill(bias[co]);
            }
            for ri in 0..r {
                let wv = weight[co * r + ri];
                let src = &cols[ri * p..(ri + 1) * p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    n: usize,
    g: &ConvGeometry,
    weight: &[T],
    cout: usize,
    grad_out: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (r, p) = (g.rows(), g.cols());
    let in_per = g.cin * g.h * g.w;
    let mut dx = need.0.then(|| vec![T::zero(); n * in_per]);
    let mut dw = need.1.then(|| vec![T::zero(); cout * r]);
    let mut db = need.2.then(|| vec![T::zero(); cout]);
    let mut cols = vec![T::zero(); r * p];
    let mut dcols = vec![T::zero(); r * p];
    for b in 0..n {
        let go = &grad_out[b * cout * p..(b + 1) * cout * p];
        if let Some(db) = db.as_mut() {
            for co in 0..cout {
                let mut s = T::zero();
                for &v in &go[co * p..(co + 1) * p] {
                    s += v;
                }
                db[co] += s;
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * in_per..(b + 1) * in_per], g, &mut cols);
            for co in 0..cout {
                let gr = &go[co * p..(co + 1) * p];
                for ri in 0..r {
                    let src = &cols[ri * p..(ri + 1) * p];
                    let mut s = T::zero();
                    for (&a, &c) in gr.iter().zip(src) {
                        s += a * c;
                    }
                    dw[co * r + ri] += s;
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(T::zero());
            for co in 0..cout {
                let gr = &go[co * p..(co + 1) * p];
                for ri in 0..r {
                    let wv = weight[co * r + ri];
                    let dst = &mut dcols[ri * p..(ri + 1) * p];
                    for (d, &s) in dst.iter_mut().zip(gr) {
                        *d += wv * s;
                    }
                }
            }
            col2im(&dcols, g, &mut dx[b * in_per..(b + 1) * in_per]);
        }
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}

/// 2x2/stride-2 max pooling. Returns pooled values and, per output element,
/// the flat input index of the first maximum in row-major window order.
pub(crate) fn maxpool2x2_forward<T: Element>(x: &[T], s: Shape) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (s.h() / 2, s.w() / 2);
    let mut out = Vec::with_capacity(s.n() * s.c() * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for n in 0..s.n() {
        for c in 0..s.c() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = s.offset(n, c, 2 * oy, 2 * ox);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = s.offset(n, c, 2 * oy + dy, 2 * ox + dx);
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2x_forward<T: Element>(x: &[T], s: Shape) -> Vec<T> {
    let (oh, ow) = (2 * s.h(), 2 * s.w());
    let mut out = Vec::with_capacity(s.n() * s.c() * oh * ow);
    for nc in 0..s.n() * s.c() {
        let plane = &x[nc * s.plane()..(nc + 1) * s.plane()];
        for i in 0..oh {
            let row = &plane[(i / 2) * s.w()..(i / 2 + 1) * s.w()];
            for j in 0..ow {
                out.push(row[j / 2]);
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Element>(g: &[T], in_shape: Shape) -> Vec<T> {
    let (h, w) = (in_shape.h(), in_shape.w());
    let ow = 2 * w;
    let mut dx = vec![T::zero(); in_shape.numel()];
    for nc in 0..in_shape.n() * in_shape.c() {
        let gp = &g[nc * 4 * h * w..(nc + 1) * 4 * h * w];
        let dp = &mut dx[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let (i, j) = (2 * y, 2 * xx);
                dp[y * w + xx] = gp[i * ow + j] + gp[i * ow + j + 1] + gp[(i + 1) * ow + j] + gp[(i + 1) * ow + j + 1];
            }
        }
    }
    dx
}

/// Per-channel batch mean and biased variance over `(N, H, W)`.
pub(crate) fn channel_moments<T: Element>(x: &[T], s: Shape) -> (Vec<T>, Vec<T>) {
    let m = T::from_f64((s.n() * s.plane()) as f64);
    let mut mean = vec![T::zero(); s.c()];
    let mut var = vec![T::zero(); s.c()];
    for c in 0..s.c() {
        let plane = |n: usize| {
            let lo = s.offset(n, c, 0, 0);
            x[lo..lo + s.plane()].iter().copied()
        };
        let mu = sum((0..s.n()).flat_map(plane)) / m;
        mean[c] = mu;
        var[c] = sum((0..s.n()).flat_map(plane).map(|v| (v - mu) * (v - mu))) / m;
    }
    (mean, var)
}

/// Neumaier-compensated sum.
pub(crate) fn sum<T: Element>(values: impl IntoIterator<Item = T>) -> T {
    let mut acc = T::zero();
    let mut carry = T::zero();
    for v in values {
        let t = acc + v;
        if acc.abs() >= v.abs() {
            carry += (acc - t) + v;
        } else {
            carry += (v - t) + acc;
        }
        acc = t;
    }
    acc + carry
}
