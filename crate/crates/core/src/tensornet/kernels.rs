//! Raw loops over channel-major planes. Shapes are validated by callers.
//!
//! Convolution taps follow `y[i] = sum_k x[i + r*k] * w[k]` with `k`
//! centered on the kernel, and zero padding so the output keeps the input
//! size.

use super::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// Row and column ranges of output pixels whose tap `(ky, kx)` lands
    /// inside the input, with the tap offsets.
    #[inline]
    fn tap(&self, ky: usize, kx: usize) -> Option<TapRange> {
        let half = (self.k / 2) as isize;
        let dy = (ky as isize - half) * self.dilation as isize;
        let dx = (kx as isize - half) * self.dilation as isize;
        let (h, w) = (self.h as isize, self.w as isize);
        let y0 = (-dy).max(0);
        let y1 = (h - dy).min(h);
        let x0 = (-dx).max(0);
        let x1 = (w - dx).min(w);
        (y0 < y1 && x0 < x1).then_some(TapRange {
            y0: y0 as usize,
            y1: y1 as usize,
            x0: x0 as usize,
            x1: x1 as usize,
            dy,
            dx,
        })
    }

    #[inline]
    fn weight_index(&self, fo: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((fo * self.c_in + ci) * self.k + ky) * self.k + kx
    }
}

#[derive(Debug, Clone, Copy)]
struct TapRange {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    dy: isize,
    dx: isize,
}

impl TapRange {
    #[inline]
    fn src(&self, y: usize, w: usize) -> usize {
        (y as isize + self.dy) as usize * w + (self.x0 as isize + self.dx) as usize
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: ConvGeom) -> Vec<T> {
    let hw = g.h * g.w;
    let mut out = vec![T::zero(); g.c_out * hw];
    for fo in 0..g.c_out {
        let plane = &mut out[fo * hw..(fo + 1) * hw];
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b[fo]);
        }
        for ci in 0..g.c_in {
            let xp = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let Some(t) = g.tap(ky, kx) else { continue };
                    let wv = weight[g.weight_index(fo, ci, ky, kx)];
                    let n = t.x1 - t.x0;
                    for y in t.y0..t.y1 {
                        let dst = &mut plane[y * g.w + t.x0..y * g.w + t.x1];
                        let s = t.src(y, g.w);
                        for (o, &i) in dst.iter_mut().zip(&xp[s..s + n]) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    g: ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = g.h * g.w;
    let mut gx = vec![T::zero(); g.c_in * hw];
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); g.c_out];
    for fo in 0..g.c_out {
        let go = &grad_out[fo * hw..(fo + 1) * hw];
        gb[fo] = go.iter().copied().sum();
        for ci in 0..g.c_in {
            let xp = &x[ci * hw..(ci + 1) * hw];
            let gxp = &mut gx[ci * hw..(ci + 1) * hw];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let Some(t) = g.tap(ky, kx) else { continue };
                    let wi = g.weight_index(fo, ci, ky, kx);
                    let wv = weight[wi];
                    let n = t.x1 - t.x0;
                    let mut acc = T::zero();
                    for y in t.y0..t.y1 {
                        let grow = &go[y * g.w + t.x0..y * g.w + t.x1];
                        let s = t.src(y, g.w);
                        for ((&gv, &xv), gxv) in grow.iter().zip(&xp[s..s + n]).zip(&mut gxp[s..s + n]) {
                            acc += gv * xv;
                            *gxv += wv * gv;
                        }
                    }
                    gw[wi] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// 2x2 stride-2 transposed convolution. Weight layout `[C_in, C_out, 2, 2]`.
pub(crate) fn tconv_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    (c_in, c_out, h, w): (usize, usize, usize, usize),
) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c_out * oh * ow];
    for fo in 0..c_out {
        let plane = &mut out[fo * oh * ow..(fo + 1) * oh * ow];
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b[fo]);
        }
        for ci in 0..c_in {
            let xp = &x[ci * h * w..(ci + 1) * h * w];
            let wk = &weight[(ci * c_out + fo) * 4..(ci * c_out + fo) * 4 + 4];
            for y in 0..h {
                for ky in 0..2 {
                    let orow = &mut plane[(2 * y + ky) * ow..(2 * y + ky + 1) * ow];
                    let (w0, w1) = (wk[2 * ky], wk[2 * ky + 1]);
                    for (xv, pair) in xp[y * w..(y + 1) * w].iter().zip(orow.chunks_exact_mut(2)) {
                        pair[0] += *xv * w0;
                        pair[1] += *xv * w1;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn tconv_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    (c_in, c_out, h, w): (usize, usize, usize, usize),
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); c_in * h * w];
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); c_out];
    for fo in 0..c_out {
        let go = &grad_out[fo * oh * ow..(fo + 1) * oh * ow];
        gb[fo] = go.iter().copied().sum();
        for ci in 0..c_in {
            let xp = &x[ci * h * w..(ci + 1) * h * w];
            let gxp = &mut gx[ci * h * w..(ci + 1) * h * w];
            let base = (ci * c_out + fo) * 4;
            let mut acc = [T::zero(); 4];
            for y in 0..h {
                for ky in 0..2 {
                    let grow = &go[(2 * y + ky) * ow..(2 * y + ky + 1) * ow];
                    let (w0, w1) = (weight[base + 2 * ky], weight[base + 2 * ky + 1]);
                    for ((xv, gxv), pair) in xp[y * w..(y + 1) * w]
                        .iter()
                        .zip(&mut gxp[y * w..(y + 1) * w])
                        .zip(grow.chunks_exact(2))
                    {
                        *gxv += pair[0] * w0 + pair[1] * w1;
                        acc[2 * ky] += *xv * pair[0];
                        acc[2 * ky + 1] += *xv * pair[1];
                    }
                }
            }
            for (slot, a) in gw[base..base + 4].iter_mut().zip(acc) {
                *slot += a;
            }
        }
    }
    (gx, gw, gb)
}

/// 2x2 max-pool; returns values and the flat input index of each window's
/// first maximum in row-major order.
pub(crate) fn max_pool_forward<T: Scalar>(x: &[T], (c, h, w): (usize, usize, usize)) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best_i = base + 2 * y * w + 2 * xx;
                let mut best = x[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[i] > best {
                        best = x[i];
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}
