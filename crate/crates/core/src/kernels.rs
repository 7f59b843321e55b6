//! Raw slice kernels behind the tape ops. All volumes are `[C, T, H, W]`.

use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Dims {
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn of(shape: &[usize]) -> Self {
        assert_eq!(shape.len(), 4, "expected a [C, T, H, W] volume, got {shape:?}");
        Self {
            c: shape[0],
            t: shape[1],
            h: shape[2],
            w: shape[3],
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }
}

/// Kernel extents `[kt, kh, kw]`, all odd; "same" zero padding, stride 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub input: Dims,
    pub cout: usize,
    pub k: [usize; 3],
}

impl ConvGeom {
    #[inline]
    fn widx(&self, o: usize, c: usize, dt: usize, dy: usize, dx: usize) -> usize {
        let [kt, kh, kw] = self.k;
        (((o * self.input.c + c) * kt + dt) * kh + dy) * kw + dx
    }

    /// Visits every (output row, input row, x-range) triple that one kernel
    /// tap touches.
    #[inline]
    fn for_each_row(
        &self,
        dt: usize,
        dy: usize,
        dx: usize,
        mut f: impl FnMut(usize, usize, usize, usize, usize),
    ) {
        let d = self.input;
        let [kt, kh, kw] = self.k;
        let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
        let x0 = pw.saturating_sub(dx);
        let x1 = (d.w + pw).saturating_sub(dx).min(d.w);
        if x0 >= x1 {
            return;
        }
        let ix0 = x0 + dx - pw;
        for t in 0..d.t {
            let it = t + dt;
            if it < pt || it - pt >= d.t {
                continue;
            }
            let it = it - pt;
            for y in 0..d.h {
                let iy = y + dy;
                if iy < ph || iy - ph >= d.h {
                    continue;
                }
                let iy = iy - ph;
                f((t * d.h + y) * d.w, (it * d.h + iy) * d.w, x0, ix0, x1 - x0);
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let d = g.input;
    let vol = d.volume();
    let [kt, kh, kw] = g.k;
    for o in 0..g.cout {
        let ov = &mut out[o * vol..(o + 1) * vol];
        let b = bias.map_or(T::zero(), |b| b[o]);
        ov.iter_mut().for_each(|v| *v = b);
        for c in 0..d.c {
            let iv = &input[c * vol..(c + 1) * vol];
            for dt in 0..kt {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let wv = weight[g.widx(o, c, dt, dy, dx)];
                        if wv == T::zero() {
                            continue;
                        }
                        g.for_each_row(dt, dy, dx, |orow, irow, x0, ix0, n| {
                            let dst = &mut ov[orow + x0..orow + x0 + n];
                            let src = &iv[irow + ix0..irow + ix0 + n];
                            for (a, &s) in dst.iter_mut().zip(src) {
                                *a += wv * s;
                            }
                        });
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_backward_input<T: Real>(
    g: &ConvGeom,
    grad_out: &[T],
    weight: &[T],
    grad_in: &mut [T],
) {
    let d = g.input;
    let vol = d.volume();
    let [kt, kh, kw] = g.k;
    for o in 0..g.cout {
        let gv = &grad_out[o * vol..(o + 1) * vol];
        for c in 0..d.c {
            let giv = &mut grad_in[c * vol..(c + 1) * vol];
            for dt in 0..kt {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let wv = weight[g.widx(o, c, dt, dy, dx)];
                        if wv == T::zero() {
                            continue;
                        }
                        g.for_each_row(dt, dy, dx, |orow, irow, x0, ix0, n| {
                            let src = &gv[orow + x0..orow + x0 + n];
                            let dst = &mut giv[irow + ix0..irow + ix0 + n];
                            for (a, &s) in dst.iter_mut().zip(src) {
                                *a += wv * s;
                            }
                        });
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_backward_params<T: Real>(
    g: &ConvGeom,
    grad_out: &[T],
    input: &[T],
    grad_weight: &mut [T],
    grad_bias: Option<&mut [T]>,
) {
    let d = g.input;
    let vol = d.volume();
    let [kt, kh, kw] = g.k;
    for o in 0..g.cout {
        let gv = &grad_out[o * vol..(o + 1) * vol];
        for c in 0..d.c {
            let iv = &input[c * vol..(c + 1) * vol];
            for dt in 0..kt {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let mut acc = T::zero();
                        g.for_each_row(dt, dy, dx, |orow, irow, x0, ix0, n| {
                            let a = &gv[orow + x0..orow + x0 + n];
                            let b = &iv[irow + ix0..irow + ix0 + n];
                            for (&p, &q) in a.iter().zip(b) {
                                acc += p * q;
                            }
                        });
                        grad_weight[g.widx(o, c, dt, dy, dx)] += acc;
                    }
                }
            }
        }
    }
    if let Some(gb) = grad_bias {
        for o in 0..g.cout {
            gb[o] += grad_out[o * vol..(o + 1) * vol].iter().copied().sum();
        }
    }
}

/// Nearest-neighbour spatial upsampling by an integer factor.
pub(crate) fn upsample_forward<T: Real>(d: Dims, f: usize, input: &[T], out: &mut [T]) {
    let (oh, ow) = (d.h * f, d.w * f);
    for ct in 0..d.c * d.t {
        for y in 0..oh {
            let irow = &input[(ct * d.h + y / f) * d.w..][..d.w];
            let orow = &mut out[(ct * oh + y) * ow..][..ow];
            for (x, o) in orow.iter_mut().enumerate() {
                *o = irow[x / f];
            }
        }
    }
}

pub(crate) fn upsample_backward<T: Real>(d: Dims, f: usize, grad_out: &[T], grad_in: &mut [T]) {
    let (oh, ow) = (d.h * f, d.w * f);
    for ct in 0..d.c * d.t {
        for y in 0..oh {
            let grow = &grad_out[(ct * oh + y) * ow..][..ow];
            let irow = &mut grad_in[(ct * d.h + y / f) * d.w..][..d.w];
            for (x, &g) in grow.iter().enumerate() {
                irow[x / f] += g;
            }
        }
    }
}

/// Average pooling with temporal factor `ft` and spatial factor `fs`
/// (non-overlapping windows; dims must divide).
pub(crate) fn avgpool_forward<T: Real>(d: Dims, ft: usize, fs: usize, input: &[T], out: &mut [T]) {
    let (ot, oh, ow) = (d.t / ft, d.h / fs, d.w / fs);
    let inv = T::of(1.0 / (ft * fs * fs) as f64);
    out.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..d.c {
        for t in 0..d.t {
            for y in 0..d.h {
                let irow = &input[((c * d.t + t) * d.h + y) * d.w..][..d.w];
                let orow = &mut out[((c * ot + t / ft) * oh + y / fs) * ow..][..ow];
                for (x, &v) in irow.iter().enumerate() {
                    orow[x / fs] += v;
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
}

pub(crate) fn avgpool_backward<T: Real>(
    d: Dims,
    ft: usize,
    fs: usize,
    grad_out: &[T],
    grad_in: &mut [T],
) {
    let (ot, oh, ow) = (d.t / ft, d.h / fs, d.w / fs);
    let inv = T::of(1.0 / (ft * fs * fs) as f64);
    for c in 0..d.c {
        for t in 0..d.t {
            for y in 0..d.h {
                let grow = &grad_out[((c * ot + t / ft) * oh + y / fs) * ow..][..ow];
                let irow = &mut grad_in[((c * d.t + t) * d.h + y) * d.w..][..d.w];
                for (x, v) in irow.iter_mut().enumerate() {
                    *v += grow[x / fs] * inv;
                }
            }
        }
    }
}

/// Orthonormal single-level 2D Haar analysis of every `[H, W]` plane.
/// Output is band-major: `[4C, T, H/2, W/2]` with bands LL, LH, HL, HH.
pub(crate) fn haar_forward<T: Real>(d: Dims, input: &[T], out: &mut [T]) {
    let half = T::of(0.5);
    let (hh, hw) = (d.h / 2, d.w / 2);
    let band = d.c * d.t * hh * hw;
    for ct in 0..d.c * d.t {
        for i in 0..hh {
            let top = &input[(ct * d.h + 2 * i) * d.w..][..d.w];
            let bot = &input[(ct * d.h + 2 * i + 1) * d.w..][..d.w];
            let base = (ct * hh + i) * hw;
            for j in 0..hw {
                let (a, b) = (top[2 * j], top[2 * j + 1]);
                let (c, e) = (bot[2 * j], bot[2 * j + 1]);
                out[base + j] = (a + b + c + e) * half;
                out[band + base + j] = (a - b + c - e) * half;
                out[2 * band + base + j] = (a + b - c - e) * half;
                out[3 * band + base + j] = (a - b - c + e) * half;
            }
        }
    }
}

/// Exact inverse (and adjoint) of [`haar_forward`].
pub(crate) fn haar_inverse<T: Real>(d: Dims, input: &[T], out: &mut [T]) {
    let half = T::of(0.5);
    let (hh, hw) = (d.h / 2, d.w / 2);
    let band = d.c * d.t * hh * hw;
    for ct in 0..d.c * d.t {
        for i in 0..hh {
            let base = (ct * hh + i) * hw;
            for j in 0..hw {
                let ll = input[base + j];
                let lh = input[band + base + j];
                let hl = input[2 * band + base + j];
                let hh_ = input[3 * band + base + j];
                let top = (ct * d.h + 2 * i) * d.w + 2 * j;
                let bot = top + d.w;
                out[top] = (ll + lh + hl + hh_) * half;
                out[top + 1] = (ll - lh + hl - hh_) * half;
                out[bot] = (ll + lh - hl - hh_) * half;
                out[bot + 1] = (ll - lh - hl + hh_) * half;
            }
        }
    }
}
