//! Raw numeric kernels shared by the tape and the plain-tensor paths.
//!
//! Parallel variants split work so that every output element is produced by
//! exactly one task and cross-task reductions happen in a fixed order, which
//! keeps results bit-identical for any thread count.

use rayon::prelude::*;

use crate::tensor::Real;

pub(crate) const PAR_THRESHOLD: usize = 1 << 15;

/// `out = a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let row = |(i, out_row): (usize, &mut [T])| {
        out_row.iter_mut().for_each(|v| *v = T::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `da += g[m×n] · b[k×n]ᵀ`.
pub fn matmul_grad_lhs<T: Real>(g: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    let row = |(i, da_row): (usize, &mut [T])| {
        let g_row = &g[i * n..(i + 1) * n];
        for (kk, d) in da_row.iter_mut().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            *d += dot(g_row, b_row);
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        da.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        da.chunks_mut(k).enumerate().for_each(row);
    }
}

/// `db += a[m×k]ᵀ · g[m×n]`.
pub fn matmul_grad_rhs<T: Real>(a: &[T], g: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    // Rows of `db` are split across tasks; each task sweeps every `i` in order.
    let rows_per_task = if m * k * n >= PAR_THRESHOLD {
        k.div_ceil(rayon::current_num_threads().max(1)).max(1)
    } else {
        k
    };
    let task = |(chunk_idx, db_chunk): (usize, &mut [T])| {
        let k0 = chunk_idx * rows_per_task;
        let rows = db_chunk.len() / n;
        for i in 0..m {
            let g_row = &g[i * n..(i + 1) * n];
            let a_row = &a[i * k + k0..i * k + k0 + rows];
            for (r, &av) in a_row.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let db_row = &mut db_chunk[r * n..(r + 1) * n];
                for (d, &gv) in db_row.iter_mut().zip(g_row) {
                    *d += av * gv;
                }
            }
        }
    };
    if rows_per_task < k {
        db.par_chunks_mut(rows_per_task * n)
            .enumerate()
            .for_each(task);
    } else {
        task((0, db));
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Eight independent lanes so the compiler can vectorize.
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow for large x.
    if x > T::lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Geometry of a single-input-channel 3D convolution with a 3×3×3 kernel and
/// same padding. Input `[batch, rows, cols, bands]`, output
/// `[batch, rows, cols, bands, features]`, weight `[27, features]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv3dGeom {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub features: usize,
}

impl Conv3dGeom {
    fn volume(&self) -> usize {
        self.rows * self.cols * self.bands
    }

    /// Calls `f(tap, input_offset)` for every in-bounds neighbour of a voxel.
    #[inline]
    fn for_taps(&self, r: usize, c: usize, l: usize, mut f: impl FnMut(usize, usize)) {
        for dr in 0..3 {
            let rr = r + dr;
            if rr < 1 || rr > self.rows {
                continue;
            }
            for dc in 0..3 {
                let cc = c + dc;
                if cc < 1 || cc > self.cols {
                    continue;
                }
                for dl in 0..3 {
                    let ll = l + dl;
                    if ll < 1 || ll > self.bands {
                        continue;
                    }
                    let off = ((rr - 1) * self.cols + (cc - 1)) * self.bands + (ll - 1);
                    f((dr * 3 + dc) * 3 + dl, off);
                }
            }
        }
    }
}

pub fn conv3d_forward<T: Real>(x: &[T], w: &[T], b: &[T], out: &mut [T], g: Conv3dGeom) {
    let vol = g.volume();
    let f = g.features;
    out.par_chunks_mut(vol * f)
        .zip(x.par_chunks(vol))
        .for_each(|(out_b, x_b)| {
            for r in 0..g.rows {
                for c in 0..g.cols {
                    for l in 0..g.bands {
                        let o = ((r * g.cols + c) * g.bands + l) * f;
                        let slot = &mut out_b[o..o + f];
                        slot.copy_from_slice(b);
                        g.for_taps(r, c, l, |tap, off| {
                            let xv = x_b[off];
                            for (s, &wv) in slot.iter_mut().zip(&w[tap * f..(tap + 1) * f]) {
                                *s += xv * wv;
                            }
                        });
                    }
                }
            }
        });
}

/// Accumulates weight, bias and (optionally) input gradients.
pub fn conv3d_backward<T: Real>(
    x: &[T],
    w: &[T],
    grad: &[T],
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
    g: Conv3dGeom,
) {
    let vol = g.volume();
    let f = g.features;
    let partials: Vec<(Vec<T>, Vec<T>)> = x
        .par_chunks(vol)
        .zip(grad.par_chunks(vol * f))
        .map(|(x_b, g_b)| {
            let mut pw = vec![T::zero(); 27 * f];
            let mut pb = vec![T::zero(); f];
            for r in 0..g.rows {
                for c in 0..g.cols {
                    for l in 0..g.bands {
                        let o = ((r * g.cols + c) * g.bands + l) * f;
                        let gs = &g_b[o..o + f];
                        for (p, &gv) in pb.iter_mut().zip(gs) {
                            *p += gv;
                        }
                        g.for_taps(r, c, l, |tap, off| {
                            let xv = x_b[off];
                            for (p, &gv) in pw[tap * f..(tap + 1) * f].iter_mut().zip(gs) {
                                *p += xv * gv;
                            }
                        });
                    }
                }
            }
            (pw, pb)
        })
        .collect();
    for (pw, pb) in partials {
        add_into(dw, &pw);
        add_into(db, &pb);
    }
    if let Some(dx) = dx {
        dx.par_chunks_mut(vol)
            .zip(grad.par_chunks(vol * f))
            .for_each(|(dx_b, g_b)| {
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        for l in 0..g.bands {
                            let o = ((r * g.cols + c) * g.bands + l) * f;
                            let gs = &g_b[o..o + f];
                            g.for_taps(r, c, l, |tap, off| {
                                dx_b[off] += dot(gs, &w[tap * f..(tap + 1) * f]);
                            });
                        }
                    }
                }
            });
    }
}

/// Depth-wise 3×3 same-padded convolution over `[batch, side, side, channels]`,
/// weight `[9, channels]`.
pub fn dwconv_forward<T: Real>(x: &[T], w: &[T], b: &[T], out: &mut [T], side: usize, ch: usize) {
    let plane = side * side * ch;
    out.par_chunks_mut(plane)
        .zip(x.par_chunks(plane))
        .for_each(|(out_b, x_b)| {
            for r in 0..side {
                for c in 0..side {
                    let o = (r * side + c) * ch;
                    let slot = &mut out_b[o..o + ch];
                    slot.copy_from_slice(b);
                    for_window(r, c, side, |tap, off| {
                        let xs = &x_b[off * ch..(off + 1) * ch];
                        let ws = &w[tap * ch..(tap + 1) * ch];
                        for ((s, &xv), &wv) in slot.iter_mut().zip(xs).zip(ws) {
                            *s += xv * wv;
                        }
                    });
                }
            }
        });
}

#[allow(clippy::too_many_arguments)]
pub fn dwconv_backward<T: Real>(
    x: &[T],
    w: &[T],
    grad: &[T],
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
    side: usize,
    ch: usize,
) {
    let plane = side * side * ch;
    let partials: Vec<(Vec<T>, Vec<T>)> = x
        .par_chunks(plane)
        .zip(grad.par_chunks(plane))
        .map(|(x_b, g_b)| {
            let mut pw = vec![T::zero(); 9 * ch];
            let mut pb = vec![T::zero(); ch];
            for r in 0..side {
                for c in 0..side {
                    let o = (r * side + c) * ch;
                    let gs = &g_b[o..o + ch];
                    add_into(&mut pb, gs);
                    for_window(r, c, side, |tap, off| {
                        let xs = &x_b[off * ch..(off + 1) * ch];
                        for ((p, &xv), &gv) in
                            pw[tap * ch..(tap + 1) * ch].iter_mut().zip(xs).zip(gs)
                        {
                            *p += xv * gv;
                        }
                    });
                }
            }
            (pw, pb)
        })
        .collect();
    for (pw, pb) in partials {
        add_into(dw, &pw);
        add_into(db, &pb);
    }
    if let Some(dx) = dx {
        dx.par_chunks_mut(plane)
            .zip(grad.par_chunks(plane))
            .for_each(|(dx_b, g_b)| {
                for r in 0..side {
                    for c in 0..side {
                        let o = (r * side + c) * ch;
                        let gs = &g_b[o..o + ch];
                        for_window(r, c, side, |tap, off| {
                            let ws = &w[tap * ch..(tap + 1) * ch];
                            for ((d, &gv), &wv) in
                                dx_b[off * ch..(off + 1) * ch].iter_mut().zip(gs).zip(ws)
                            {
                                *d += gv * wv;
                            }
                        });
                    }
                }
            });
    }
}

#[inline]
fn for_window(r: usize, c: usize, side: usize, mut f: impl FnMut(usize, usize)) {
    for dr in 0..3 {
        let rr = r + dr;
        if rr < 1 || rr > side {
            continue;
        }
        for dc in 0..3 {
            let cc = c + dc;
            if cc < 1 || cc > side {
                continue;
            }
            f(dr * 3 + dc, (rr - 1) * side + (cc - 1));
        }
    }
}

/// Output side of an `m×m` / stride `s` window pass, if the geometry divides.
pub fn pooled_side(side: usize, m: usize, s: usize) -> Option<usize> {
    if m == 0 || s == 0 || side < m || !(side - m).is_multiple_of(s) {
        None
    } else {
        Some((side - m) / s + 1)
    }
}

pub fn avgpool_forward<T: Real>(
    x: &[T],
    out: &mut [T],
    batch: usize,
    side: usize,
    ch: usize,
    m: usize,
    s: usize,
) {
    let p = pooled_side(side, m, s).expect("validated geometry");
    let scale = T::one() / T::lit((m * m) as f64);
    for b in 0..batch {
        for r in 0..p {
            for c in 0..p {
                let o = ((b * p + r) * p + c) * ch;
                let slot = &mut out[o..o + ch];
                slot.iter_mut().for_each(|v| *v = T::zero());
                for i in 0..m {
                    for j in 0..m {
                        let src = ((b * side + r * s + i) * side + c * s + j) * ch;
                        add_into(slot, &x[src..src + ch]);
                    }
                }
                slot.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
}

pub fn avgpool_backward<T: Real>(
    grad: &[T],
    dx: &mut [T],
    batch: usize,
    side: usize,
    ch: usize,
    m: usize,
    s: usize,
) {
    let p = pooled_side(side, m, s).expect("validated geometry");
    let scale = T::one() / T::lit((m * m) as f64);
    for b in 0..batch {
        for r in 0..p {
            for c in 0..p {
                let o = ((b * p + r) * p + c) * ch;
                let gs = &grad[o..o + ch];
                for i in 0..m {
                    for j in 0..m {
                        let dst = ((b * side + r * s + i) * side + c * s + j) * ch;
                        for (d, &gv) in dx[dst..dst + ch].iter_mut().zip(gs) {
                            *d += gv * scale;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
