//! 3x3, stride 1, zero-padding 1 convolution via im2col + GEMM.
//!
//! Work is split over the batch with rayon. Weight gradients are reduced from
//! fixed-size item groups in group order, so results do not depend on the
//! number of worker threads. Each item is processed in bands of output rows
//! so the column buffer stays in cache.

use rayon::prelude::*;

use super::tensor::Real;

pub(crate) const K: usize = 3;
const TAPS: usize = K * K;
const GROUP: usize = 4;
/// Target size of one column band, in values.
const BAND_VALUES: usize = 1 << 16;

/// Dimensions of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn rows(&self) -> usize {
        self.c_in * TAPS
    }

    /// Output row ranges `[y0, y1)` covering the plane.
    fn bands(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = (BAND_VALUES / (self.rows() * self.w).max(1)).clamp(1, self.h.max(1));
        let h = self.h;
        (0..h).step_by(step).map(move |y0| (y0, (y0 + step).min(h)))
    }

    fn band_capacity(&self) -> usize {
        self.bands()
            .map(|(a, b)| (b - a) * self.w)
            .max()
            .unwrap_or(0)
            * self.rows()
    }
}

/// Strided view for [`gemm`]: `offset`, row stride, column stride.
#[derive(Clone, Copy)]
struct View(usize, isize, isize);

fn check<S>(buf: &[S], v: View, rows: usize, cols: usize) {
    let last = v.0 as isize + (rows as isize - 1) * v.1 + (cols as isize - 1) * v.2;
    assert!(
        v.1 >= 0 && v.2 >= 0 && (last as usize) < buf.len(),
        "gemm view out of bounds"
    );
}

/// `c = a (m x k) * b (k x n) + beta * c` on strided views.
#[allow(clippy::too_many_arguments)]
fn gemm<S: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    va: View,
    b: &[S],
    vb: View,
    beta: S,
    c: &mut [S],
    vc: View,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    check(a, va, m, k);
    check(b, vb, k, n);
    check(c, vc, m, n);
    // SAFETY: every view was checked to lie inside its buffer.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            S::one(),
            a.as_ptr().add(va.0),
            va.1,
            va.2,
            b.as_ptr().add(vb.0),
            vb.1,
            vb.2,
            beta,
            c.as_mut_ptr().add(vc.0),
            vc.1,
            vc.2,
        );
    }
}

/// `cols[(ci*9 + ky*3 + kx), (y-y0)*W + x] = x[ci, y+ky-1, x+kx-1]` for `y0 <= y < y1` (zero outside).
fn im2col<S: Real>(x: &[S], d: ConvDims, y0: usize, y1: usize, cols: &mut [S]) {
    let (h, w) = (d.h, d.w);
    let plane = d.plane();
    let n = (y1 - y0) * w;
    for ci in 0..d.c_in {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[(ci * TAPS + ky * K + kx) * n..][..n];
                for y in y0..y1 {
                    let out_row = &mut row[(y - y0) * w..(y - y0 + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out_row.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out_row[0] = S::zero();
                            out_row[1..].copy_from_slice(&src_row[..w - 1]);
                        }
                        1 => out_row.copy_from_slice(src_row),
                        _ => {
                            out_row[..w - 1].copy_from_slice(&src_row[1..]);
                            out_row[w - 1] = S::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a band of column gradients back onto the input plane.
fn col2im<S: Real>(cols: &[S], d: ConvDims, y0: usize, y1: usize, dx: &mut [S]) {
    let (h, w) = (d.h, d.w);
    let plane = d.plane();
    let n = (y1 - y0) * w;
    for ci in 0..d.c_in {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[(ci * TAPS + ky * K + kx) * n..][..n];
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let col_row = &row[(y - y0) * w..(y - y0 + 1) * w];
                    let dst_row = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, &c) in dst_row[..w - 1].iter_mut().zip(&col_row[1..]) {
                                *d += c;
                            }
                        }
                        1 => {
                            for (d, &c) in dst_row.iter_mut().zip(col_row) {
                                *d += c;
                            }
                        }
                        _ => {
                            for (d, &c) in dst_row[1..].iter_mut().zip(&col_row[..w - 1]) {
                                *d += c;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<S: Real>(x: &[S], weight: &[S], bias: &[S], d: ConvDims) -> Vec<S> {
    let plane = d.plane();
    let rows = d.rows();
    let mut out = vec![S::zero(); d.batch * d.c_out * plane];
    out.par_chunks_mut(d.c_out * plane)
        .enumerate()
        .for_each_init(
            || vec![S::zero(); d.band_capacity()],
            |cols, (b, y)| {
                let xb = &x[b * d.c_in * plane..(b + 1) * d.c_in * plane];
                for (co, chan) in y.chunks_mut(plane).enumerate() {
                    chan.iter_mut().for_each(|v| *v = bias[co]);
                }
                for (y0, y1) in d.bands() {
                    let n = (y1 - y0) * d.w;
                    im2col(xb, d, y0, y1, cols);
                    let (a, bv, c) = (
                        View(0, rows as isize, 1),
                        View(0, n as isize, 1),
                        View(y0 * d.w, plane as isize, 1),
                    );
                    gemm(d.c_out, rows, n, weight, a, cols, bv, S::one(), y, c);
                }
            },
        );
    out
}

pub(crate) struct ConvGrads<S> {
    pub dx: Option<Vec<S>>,
    pub dw: Vec<S>,
    pub db: Vec<S>,
}

pub(crate) fn backward<S: Real>(
    x: &[S],
    weight: &[S],
    dy: &[S],
    d: ConvDims,
    need_dx: bool,
) -> ConvGrads<S> {
    let plane = d.plane();
    let rows = d.rows();
    let item_in = d.c_in * plane;
    let item_out = d.c_out * plane;
    let n_groups = d.batch.div_ceil(GROUP);

    let partials: Vec<(Vec<S>, Vec<S>)> = (0..n_groups)
        .into_par_iter()
        .map(|g| {
            let mut cols = vec![S::zero(); d.band_capacity()];
            let mut dw = vec![S::zero(); d.c_out * rows];
            let mut db = vec![S::zero(); d.c_out];
            for b in g * GROUP..((g + 1) * GROUP).min(d.batch) {
                let xb = &x[b * item_in..(b + 1) * item_in];
                let dyb = &dy[b * item_out..(b + 1) * item_out];
                for (y0, y1) in d.bands() {
                    let n = (y1 - y0) * d.w;
                    im2col(xb, d, y0, y1, &mut cols);
                    // dw += dy[:, band] * cols^T
                    let (a, bv, c) = (
                        View(y0 * d.w, plane as isize, 1),
                        View(0, 1, n as isize),
                        View(0, rows as isize, 1),
                    );
                    gemm(d.c_out, n, rows, dyb, a, &cols, bv, S::one(), &mut dw, c);
                }
                for (acc, chan) in db.iter_mut().zip(dyb.chunks(plane)) {
                    *acc += chan.iter().copied().sum::<S>();
                }
            }
            (dw, db)
        })
        .collect();

    let mut dw = vec![S::zero(); d.c_out * rows];
    let mut db = vec![S::zero(); d.c_out];
    for (pw, pb) in partials {
        dw.iter_mut().zip(pw).for_each(|(a, v)| *a += v);
        db.iter_mut().zip(pb).for_each(|(a, v)| *a += v);
    }

    let dx = need_dx.then(|| {
        let mut dx = vec![S::zero(); d.batch * item_in];
        dx.par_chunks_mut(item_in).enumerate().for_each_init(
            || vec![S::zero(); d.band_capacity()],
            |dcols, (b, dxb)| {
                let dyb = &dy[b * item_out..(b + 1) * item_out];
                for (y0, y1) in d.bands() {
                    let n = (y1 - y0) * d.w;
                    // dcols = W^T * dy[:, band]
                    let (a, bv, c) = (
                        View(0, 1, rows as isize),
                        View(y0 * d.w, plane as isize, 1),
                        View(0, n as isize, 1),
                    );
                    gemm(rows, d.c_out, n, weight, a, dyb, bv, S::zero(), dcols, c);
                    col2im(dcols, d, y0, y1, dxb);
                }
            },
        );
        dx
    });

    ConvGrads { dx, dw, db }
}
