//! Slice-level forward and backward routines for one sample.
//!
//! All token matrices are row-major `[n × d_model]`; head `h` occupies
//! columns `h*dh .. (h+1)*dh`. Backward routines accumulate into their
//! gradient buffers.

use crate::tensor::ops::{gemm, softmax_row_inplace, MatMut, MatRef};
use crate::tensor::Element;

/// Query rows processed per score block when probabilities are not cached.
const ROW_CHUNK: usize = 512;

fn head_view<T>(m: &[T], n: usize, dm: usize, dh: usize, h: usize) -> MatRef<'_, T> {
    MatRef::new(m, h * dh, n, dh, dm, 1)
}

fn head_view_mut<T>(m: &mut [T], n: usize, dm: usize, dh: usize, h: usize) -> MatMut<'_, T> {
    MatMut::new(m, h * dh, n, dh, dm, 1)
}

/// Multi-head softmax attention. When `probs` is given it receives the
/// `heads × n × n` attention maps.
pub(crate) fn softmax_attention_fwd<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    dm: usize,
    heads: usize,
    out: &mut [T],
    mut probs: Option<&mut [T]>,
) {
    let dh = dm / heads;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut scratch = Vec::new();
    for h in 0..heads {
        let kv = head_view(k, n, dm, dh, h);
        let vv = head_view(v, n, dm, dh, h);
        let chunk = if probs.is_some() { n } else { ROW_CHUNK.min(n) };
        let mut r0 = 0;
        while r0 < n {
            let rows = chunk.min(n - r0);
            let s: &mut [T] = match probs.as_deref_mut() {
                Some(p) => &mut p[h * n * n + r0 * n..h * n * n + (r0 + rows) * n],
                None => {
                    scratch.resize(rows * n, T::zero());
                    &mut scratch[..rows * n]
                }
            };
            let qv = MatRef::new(q, r0 * dm + h * dh, rows, dh, dm, 1);
            gemm(scale, qv, kv.t(), T::zero(), MatMut::dense(s, rows, n));
            for row in s.chunks_mut(n) {
                softmax_row_inplace(row);
            }
            let ov = MatMut::new(out, r0 * dm + h * dh, rows, dh, dm, 1);
            gemm(T::one(), MatRef::dense(s, rows, n), vv, T::zero(), ov);
            r0 += rows;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn softmax_attention_bwd<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    n: usize,
    dm: usize,
    heads: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let dh = dm / heads;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut ds = vec![T::zero(); n * n];
    for h in 0..heads {
        let p = MatRef::dense(&probs[h * n * n..(h + 1) * n * n], n, n);
        let dov = head_view(dout, n, dm, dh, h);
        gemm(T::one(), p.t(), dov, T::one(), head_view_mut(dv, n, dm, dh, h));
        gemm(
            T::one(),
            dov,
            head_view(v, n, dm, dh, h).t(),
            T::zero(),
            MatMut::dense(&mut ds, n, n),
        );
        let pr = &probs[h * n * n..(h + 1) * n * n];
        for (drow, prow) in ds.chunks_mut(n).zip(pr.chunks(n)) {
            let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
            for (d, &pv) in drow.iter_mut().zip(prow) {
                *d = pv * (*d - dot);
            }
        }
        let dsv = MatRef::dense(&ds, n, n);
        gemm(scale, dsv, head_view(k, n, dm, dh, h), T::one(), head_view_mut(dq, n, dm, dh, h));
        gemm(scale, dsv.t(), head_view(q, n, dm, dh, h), T::one(), head_view_mut(dk, n, dm, dh, h));
    }
}

/// Maps window-major positions to raster token indices: windows in raster
/// order, tokens inside each window in raster order.
pub(crate) fn window_order(hp: usize, wp: usize, w: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(hp * wp);
    for wy in 0..hp / w {
        for wx in 0..wp / w {
            for iy in 0..w {
                for ix in 0..w {
                    order.push((wy * w + iy) * wp + wx * w + ix);
                }
            }
        }
    }
    order
}

fn gather_rows<T: Element>(src: &[T], order: &[usize], dm: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for &r in order {
        out.extend_from_slice(&src[r * dm..(r + 1) * dm]);
    }
    out
}

fn scatter_add_rows<T: Element>(src: &[T], order: &[usize], dm: usize, dst: &mut [T]) {
    for (pos, &r) in order.iter().enumerate() {
        for (d, &s) in dst[r * dm..(r + 1) * dm].iter_mut().zip(&src[pos * dm..(pos + 1) * dm]) {
            *d = *d + s;
        }
    }
}

/// Softmax attention restricted to non-overlapping `w×w` windows of the
/// `hp×wp` token grid. `probs`, when given, holds `windows × heads × w² × w²`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn window_attention_fwd<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    (hp, wp): (usize, usize),
    w: usize,
    dm: usize,
    heads: usize,
    out: &mut [T],
    mut probs: Option<&mut [T]>,
) {
    let order = window_order(hp, wp, w);
    let (qg, kg, vg) = (gather_rows(q, &order, dm), gather_rows(k, &order, dm), gather_rows(v, &order, dm));
    let t = w * w;
    let mut og = vec![T::zero(); order.len() * dm];
    let per_window = heads * t * t;
    for win in 0..order.len() / t {
        let rows = win * t * dm..(win + 1) * t * dm;
        let p = probs
            .as_deref_mut()
            .map(|p| &mut p[win * per_window..(win + 1) * per_window]);
        softmax_attention_fwd(
            &qg[rows.clone()],
            &kg[rows.clone()],
            &vg[rows.clone()],
            t,
            dm,
            heads,
            &mut og[rows],
            p,
        );
    }
    for (pos, &r) in order.iter().enumerate() {
        out[r * dm..(r + 1) * dm].copy_from_slice(&og[pos * dm..(pos + 1) * dm]);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn window_attention_bwd<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    (hp, wp): (usize, usize),
    w: usize,
    dm: usize,
    heads: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let order = window_order(hp, wp, w);
    let (qg, kg, vg) = (gather_rows(q, &order, dm), gather_rows(k, &order, dm), gather_rows(v, &order, dm));
    let dog = gather_rows(dout, &order, dm);
    let t = w * w;
    let len = order.len() * dm;
    let (mut dqg, mut dkg, mut dvg) = (vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len]);
    let per_window = heads * t * t;
    for win in 0..order.len() / t {
        let r = win * t * dm..(win + 1) * t * dm;
        softmax_attention_bwd(
            &qg[r.clone()],
            &kg[r.clone()],
            &vg[r.clone()],
            &probs[win * per_window..(win + 1) * per_window],
            &dog[r.clone()],
            t,
            dm,
            heads,
            &mut dqg[r.clone()],
            &mut dkg[r.clone()],
            &mut dvg[r],
        );
    }
    scatter_add_rows(&dqg, &order, dm, dq);
    scatter_add_rows(&dkg, &order, dm, dk);
    scatter_add_rows(&dvg, &order, dm, dv);
}

/// Per-head key summaries `Z = φKᵀV` (`dh×dh`) and `s = Σ_j φK_j`.
fn kv_summary<T: Element>(pk: &[T], v: &[T], n: usize, dm: usize, dh: usize, h: usize) -> (Vec<T>, Vec<T>) {
    let kv = head_view(pk, n, dm, dh, h);
    let mut z = vec![T::zero(); dh * dh];
    gemm(T::one(), kv.t(), head_view(v, n, dm, dh, h), T::zero(), MatMut::dense(&mut z, dh, dh));
    let mut s = vec![T::zero(); dh];
    for row in pk.chunks(dm) {
        for (acc, &x) in s.iter_mut().zip(&row[h * dh..(h + 1) * dh]) {
            *acc = *acc + x;
        }
    }
    (z, s)
}

fn denominators<T: Element>(pq: &[T], s: &[T], dm: usize, dh: usize, h: usize, eps: T) -> Vec<T> {
    pq.chunks(dm)
        .map(|row| {
            row[h * dh..(h + 1) * dh]
                .iter()
                .zip(s)
                .map(|(&a, &b)| a * b)
                .sum::<T>()
                + eps
        })
        .collect()
}

/// Kernelized attention on feature-mapped queries and keys, computed in
/// the reordered `φQ (φKᵀ V)` form. Never forms an `n×n` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn kernelized_attention_fwd<T: Element>(
    pq: &[T],
    pk: &[T],
    v: &[T],
    n: usize,
    dm: usize,
    heads: usize,
    eps: T,
    out: &mut [T],
) {
    let dh = dm / heads;
    for h in 0..heads {
        let (z, s) = kv_summary(pk, v, n, dm, dh, h);
        gemm(
            T::one(),
            head_view(pq, n, dm, dh, h),
            MatRef::dense(&z, dh, dh),
            T::zero(),
            head_view_mut(out, n, dm, dh, h),
        );
        let den = denominators(pq, &s, dm, dh, h, eps);
        for (row, &d) in out.chunks_mut(dm).zip(&den) {
            let inv = T::one() / d;
            for x in &mut row[h * dh..(h + 1) * dh] {
                *x = *x * inv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn kernelized_attention_bwd<T: Element>(
    pq: &[T],
    pk: &[T],
    v: &[T],
    out: &[T],
    dout: &[T],
    n: usize,
    dm: usize,
    heads: usize,
    eps: T,
    dpq: &mut [T],
    dpk: &mut [T],
    dv: &mut [T],
) {
    let dh = dm / heads;
    let mut dnum = vec![T::zero(); n * dh];
    let mut dz = vec![T::zero(); dh * dh];
    for h in 0..heads {
        let (z, s) = kv_summary(pk, v, n, dm, dh, h);
        let den = denominators(pq, &s, dm, dh, h, eps);
        // dden_i = -Σ_c dO_ic O_ic / den_i
        let mut dden = vec![T::zero(); n];
        for i in 0..n {
            let cols = i * dm + h * dh..i * dm + (h + 1) * dh;
            let go = &dout[cols.clone()];
            let o = &out[cols];
            let inv = T::one() / den[i];
            dden[i] = -go.iter().zip(o).map(|(&a, &b)| a * b).sum::<T>() * inv;
            for (d, &g) in dnum[i * dh..(i + 1) * dh].iter_mut().zip(go) {
                *d = g * inv;
            }
        }
        let dnv = MatRef::dense(&dnum, n, dh);
        let pqv = head_view(pq, n, dm, dh, h);
        gemm(T::one(), dnv, MatRef::dense(&z, dh, dh).t(), T::one(), head_view_mut(dpq, n, dm, dh, h));
        for i in 0..n {
            for (d, &sv) in dpq[i * dm + h * dh..i * dm + (h + 1) * dh].iter_mut().zip(&s) {
                *d = *d + dden[i] * sv;
            }
        }
        gemm(T::one(), pqv.t(), dnv, T::zero(), MatMut::dense(&mut dz, dh, dh));
        let mut ds = vec![T::zero(); dh];
        for (i, row) in pq.chunks(dm).enumerate() {
            for (acc, &x) in ds.iter_mut().zip(&row[h * dh..(h + 1) * dh]) {
                *acc = *acc + dden[i] * x;
            }
        }
        let dzv = MatRef::dense(&dz, dh, dh);
        gemm(T::one(), head_view(v, n, dm, dh, h), dzv.t(), T::one(), head_view_mut(dpk, n, dm, dh, h));
        for row in dpk.chunks_mut(dm) {
            for (d, &x) in row[h * dh..(h + 1) * dh].iter_mut().zip(&ds) {
                *d = *d + x;
            }
        }
        gemm(T::one(), head_view(pk, n, dm, dh, h), dzv, T::one(), head_view_mut(dv, n, dm, dh, h));
    }
}

/// Depthwise 2D cross-correlation with zero padding and stride 1.
/// `ker` is `[c × k²]`, each channel's kernel row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dwconv_fwd<T: Element>(
    x: &[T],
    ker: &[T],
    (hp, wp): (usize, usize),
    c: usize,
    k: usize,
    out: &mut [T],
) {
    let r = (k / 2) as isize;
    let kt = transpose_kernel(ker, c, k);
    for y in 0..hp as isize {
        for xx in 0..wp as isize {
            let o = &mut out[(y as usize * wp + xx as usize) * c..][..c];
            o.iter_mut().for_each(|v| *v = T::zero());
            for dy in 0..k as isize {
                let sy = y + dy - r;
                if sy < 0 || sy >= hp as isize {
                    continue;
                }
                for dx in 0..k as isize {
                    let sx = xx + dx - r;
                    if sx < 0 || sx >= wp as isize {
                        continue;
                    }
                    let tap = &kt[(dy as usize * k + dx as usize) * c..][..c];
                    let src = &x[(sy as usize * wp + sx as usize) * c..][..c];
                    for ((ov, &kv), &sv) in o.iter_mut().zip(tap).zip(src) {
                        *ov = *ov + kv * sv;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dwconv_bwd<T: Element>(
    x: &[T],
    ker: &[T],
    dout: &[T],
    (hp, wp): (usize, usize),
    c: usize,
    k: usize,
    dx_buf: Option<&mut [T]>,
    dker: Option<&mut [T]>,
) {
    let r = (k / 2) as isize;
    let kt = transpose_kernel(ker, c, k);
    let mut dkt = vec![T::zero(); k * k * c];
    let mut dx_buf = dx_buf;
    for y in 0..hp as isize {
        for xx in 0..wp as isize {
            let g = &dout[(y as usize * wp + xx as usize) * c..][..c];
            for dy in 0..k as isize {
                let sy = y + dy - r;
                if sy < 0 || sy >= hp as isize {
                    continue;
                }
                for dx in 0..k as isize {
                    let sx = xx + dx - r;
                    if sx < 0 || sx >= wp as isize {
                        continue;
                    }
                    let t = (dy as usize * k + dx as usize) * c;
                    let s = (sy as usize * wp + sx as usize) * c;
                    if let Some(dxb) = dx_buf.as_deref_mut() {
                        for ((d, &kv), &gv) in dxb[s..s + c].iter_mut().zip(&kt[t..t + c]).zip(g) {
                            *d = *d + kv * gv;
                        }
                    }
                    for ((d, &xv), &gv) in dkt[t..t + c].iter_mut().zip(&x[s..s + c]).zip(g) {
                        *d = *d + xv * gv;
                    }
                }
            }
        }
    }
    if let Some(dk) = dker {
        let kk = k * k;
        for ch in 0..c {
            for t in 0..kk {
                dk[ch * kk + t] = dk[ch * kk + t] + dkt[t * c + ch];
            }
        }
    }
}

/// `[c × k²]` → `[k² × c]` so each tap is contiguous over channels.
fn transpose_kernel<T: Element>(ker: &[T], c: usize, k: usize) -> Vec<T> {
    let kk = k * k;
    let mut kt = vec![T::zero(); kk * c];
    for ch in 0..c {
        for t in 0..kk {
            kt[t * c + ch] = ker[ch * kk + t];
        }
    }
    kt
}

/// Norm-preserving elementwise power on each `seg`-wide segment of a row:
/// `y = (‖x‖ / ‖x∘p‖) · x∘p`. Segments whose power vector is zero pass through.
pub(crate) fn focus_fwd<T: Element>(x: &[T], seg: usize, p: T, out: &mut [T]) {
    for (xs, ys) in x.chunks(seg).zip(out.chunks_mut(seg)) {
        let a = xs.iter().map(|&v| v * v).sum::<T>().sqrt();
        for (y, &v) in ys.iter_mut().zip(xs) {
            *y = v.powf(p);
        }
        let b = ys.iter().map(|&v| v * v).sum::<T>().sqrt();
        if b == T::zero() {
            ys.copy_from_slice(xs);
        } else {
            let r = a / b;
            ys.iter_mut().for_each(|y| *y = *y * r);
        }
    }
}

pub(crate) fn focus_bwd<T: Element>(x: &[T], seg: usize, p: T, dout: &[T], dx: &mut [T]) {
    let mut u = vec![T::zero(); seg];
    for ((xs, gs), ds) in x.chunks(seg).zip(dout.chunks(seg)).zip(dx.chunks_mut(seg)) {
        let a = xs.iter().map(|&v| v * v).sum::<T>().sqrt();
        for (uv, &v) in u.iter_mut().zip(xs) {
            *uv = v.powf(p);
        }
        let b = u.iter().map(|&v| v * v).sum::<T>().sqrt();
        if b == T::zero() {
            for (d, &g) in ds.iter_mut().zip(gs) {
                *d = *d + g;
            }
            continue;
        }
        // G = Σ g_j u_j
        let gdot: T = gs.iter().zip(&u).map(|(&g, &uv)| g * uv).sum();
        let ratio = a / b;
        for j in 0..xs.len() {
            let du = ratio * gs[j] - a / (b * b * b) * gdot * u[j];
            let dpow = if xs[j] == T::zero() {
                T::zero()
            } else {
                p * xs[j].powf(p - T::one())
            };
            let via_norm = if a == T::zero() { T::zero() } else { gdot / b * xs[j] / a };
            ds[j] = ds[j] + du * dpow + via_norm;
        }
    }
}
