//! Fused bidirectional GRU with hand-written backpropagation through time.
//!
//! Gate rows are stacked `[reset, update, candidate]` in every `3H`-row matrix:
//!
//! ```text
//! r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
//! z  = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
//! n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
//! h' = (1 - z) * n + z * h
//! ```

use super::tensor::{matmul, Mat, Real};

#[derive(Debug, Clone, Copy)]
pub(crate) struct GruDims {
    pub batch: usize,
    pub steps: usize,
    pub input: usize,
    pub hidden: usize,
}

/// Weights of one direction: `w_ih [3H x D]`, `w_hh [3H x H]`, `b_ih [3H]`, `b_hh [3H]`.
pub(crate) struct DirWeights<'a, S> {
    pub w_ih: &'a [S],
    pub w_hh: &'a [S],
    pub b_ih: &'a [S],
    pub b_hh: &'a [S],
}

/// Per-step activations of one direction, indexed by processing step.
#[derive(Debug, Clone)]
pub(crate) struct DirCache<S> {
    h_prev: Vec<Vec<S>>,
    r: Vec<Vec<S>>,
    z: Vec<Vec<S>>,
    n: Vec<Vec<S>>,
    hn: Vec<Vec<S>>,
}

pub(crate) struct DirGrads<S> {
    pub w_ih: Vec<S>,
    pub w_hh: Vec<S>,
    pub b_ih: Vec<S>,
    pub b_hh: Vec<S>,
}

fn sigmoid<S: Real>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

fn time_index(s: usize, steps: usize, reverse: bool) -> usize {
    if reverse {
        steps - 1 - s
    } else {
        s
    }
}

/// Runs one direction, writing hidden states into columns `[offset, offset + H)` of `out`
/// (`B x T x out_width`).
pub(crate) fn forward_dir<S: Real>(
    x: &[S],
    p: &DirWeights<'_, S>,
    d: GruDims,
    reverse: bool,
    out: &mut [S],
    out_width: usize,
    offset: usize,
) -> DirCache<S> {
    let (b_sz, steps, hid) = (d.batch, d.steps, d.hidden);
    let g3 = 3 * hid;
    let mut gi = vec![S::zero(); b_sz * steps * g3];
    for row in gi.chunks_mut(g3) {
        row.copy_from_slice(p.b_ih);
    }
    matmul(
        Mat::new(x, b_sz * steps, d.input),
        Mat::t(p.w_ih, d.input, g3),
        &mut gi,
        true,
    );

    let mut cache = DirCache {
        h_prev: Vec::with_capacity(steps),
        r: Vec::with_capacity(steps),
        z: Vec::with_capacity(steps),
        n: Vec::with_capacity(steps),
        hn: Vec::with_capacity(steps),
    };
    let mut h = vec![S::zero(); b_sz * hid];
    let mut gh = vec![S::zero(); b_sz * g3];
    for s in 0..steps {
        let t = time_index(s, steps, reverse);
        for row in gh.chunks_mut(g3) {
            row.copy_from_slice(p.b_hh);
        }
        matmul(
            Mat::new(&h, b_sz, hid),
            Mat::t(p.w_hh, hid, g3),
            &mut gh,
            true,
        );
        let mut r = vec![S::zero(); b_sz * hid];
        let mut z = vec![S::zero(); b_sz * hid];
        let mut n = vec![S::zero(); b_sz * hid];
        let mut hn = vec![S::zero(); b_sz * hid];
        let mut h_new = vec![S::zero(); b_sz * hid];
        for b in 0..b_sz {
            let gi_row = &gi[(b * steps + t) * g3..][..g3];
            let gh_row = &gh[b * g3..][..g3];
            for j in 0..hid {
                let k = b * hid + j;
                r[k] = sigmoid(gi_row[j] + gh_row[j]);
                z[k] = sigmoid(gi_row[hid + j] + gh_row[hid + j]);
                hn[k] = gh_row[2 * hid + j];
                n[k] = (gi_row[2 * hid + j] + r[k] * hn[k]).tanh();
                h_new[k] = (S::one() - z[k]) * n[k] + z[k] * h[k];
                out[(b * steps + t) * out_width + offset + j] = h_new[k];
            }
        }
        cache.h_prev.push(std::mem::replace(&mut h, h_new));
        cache.r.push(r);
        cache.z.push(z);
        cache.n.push(n);
        cache.hn.push(hn);
    }
    cache
}

/// Backpropagates one direction. Adds the input gradient into `dx` (`B x T x D`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_dir<S: Real>(
    x: &[S],
    p: &DirWeights<'_, S>,
    cache: &DirCache<S>,
    d: GruDims,
    reverse: bool,
    dout: &[S],
    out_width: usize,
    offset: usize,
    dx: Option<&mut [S]>,
) -> DirGrads<S> {
    let (b_sz, steps, hid) = (d.batch, d.steps, d.hidden);
    let g3 = 3 * hid;
    let mut dgi = vec![S::zero(); b_sz * steps * g3];
    let mut dw_hh = vec![S::zero(); g3 * hid];
    let mut db_hh = vec![S::zero(); g3];
    let mut dh = vec![S::zero(); b_sz * hid];
    let mut dgh = vec![S::zero(); b_sz * g3];

    for s in (0..steps).rev() {
        let t = time_index(s, steps, reverse);
        let (h_prev, r, z, n, hn) = (
            &cache.h_prev[s],
            &cache.r[s],
            &cache.z[s],
            &cache.n[s],
            &cache.hn[s],
        );
        for b in 0..b_sz {
            let dgi_row = &mut dgi[(b * steps + t) * g3..][..g3];
            let dgh_row = &mut dgh[b * g3..][..g3];
            for j in 0..hid {
                let k = b * hid + j;
                let g = dh[k] + dout[(b * steps + t) * out_width + offset + j];
                let dn = g * (S::one() - z[k]);
                let dz = g * (h_prev[k] - n[k]);
                let da_n = dn * (S::one() - n[k] * n[k]);
                let dr = da_n * hn[k];
                let da_r = dr * r[k] * (S::one() - r[k]);
                let da_z = dz * z[k] * (S::one() - z[k]);
                dgi_row[j] = da_r;
                dgi_row[hid + j] = da_z;
                dgi_row[2 * hid + j] = da_n;
                dgh_row[j] = da_r;
                dgh_row[hid + j] = da_z;
                dgh_row[2 * hid + j] = da_n * r[k];
                dh[k] = g * z[k];
            }
        }
        matmul(
            Mat::t(&dgh, g3, b_sz),
            Mat::new(h_prev, b_sz, hid),
            &mut dw_hh,
            true,
        );
        for row in dgh.chunks(g3) {
            db_hh.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
        }
        matmul(
            Mat::new(&dgh, b_sz, g3),
            Mat::new(p.w_hh, g3, hid),
            &mut dh,
            true,
        );
    }

    let rows = b_sz * steps;
    let mut dw_ih = vec![S::zero(); g3 * d.input];
    matmul(
        Mat::t(&dgi, g3, rows),
        Mat::new(x, rows, d.input),
        &mut dw_ih,
        false,
    );
    let mut db_ih = vec![S::zero(); g3];
    for row in dgi.chunks(g3) {
        db_ih.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
    }
    if let Some(dx) = dx {
        matmul(
            Mat::new(&dgi, rows, g3),
            Mat::new(p.w_ih, g3, d.input),
            dx,
            true,
        );
    }
    DirGrads {
        w_ih: dw_ih,
        w_hh: dw_hh,
        b_ih: db_ih,
        b_hh: db_hh,
    }
}
