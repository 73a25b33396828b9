//! Brute-force reference implementations.
//!
//! Everything here is written with plain index loops in `f64` and shares no
//! code with the kernels it is used to check. The `verify` suites and the
//! unit tests compare against these.

use crate::tensor::Tensor;

pub fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a.data()[i * k + l] * b.data()[l * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// `mask[i*n + j] == true` when token `i` may attend to token `j`:
/// both lie in the same `w×w` window of the `hp×wp` grid.
pub fn window_mask(hp: usize, wp: usize, w: usize) -> Vec<bool> {
    let n = hp * wp;
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let (yi, xi) = (i / wp, i % wp);
            let (yj, xj) = (j / wp, j % wp);
            mask[i * n + j] = yi / w == yj / w && xi / w == xj / w;
        }
    }
    mask
}

/// Dense multi-head softmax attention with an optional boolean mask.
pub fn dense_attention(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    heads: usize,
    mask: Option<&[bool]>,
) -> Tensor<f64> {
    let (n, dm) = (q.shape()[0], q.shape()[1]);
    let dh = dm / heads;
    let at = |t: &Tensor<f64>, r: usize, c: usize| t.data()[r * dm + c];
    let mut out = vec![0.0; n * dm];
    for h in 0..heads {
        for i in 0..n {
            let mut scores = vec![f64::NEG_INFINITY; n];
            for j in 0..n {
                if mask.map_or(true, |m| m[i * n + j]) {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += at(q, i, h * dh + c) * at(k, j, h * dh + c);
                    }
                    scores[j] = s / (dh as f64).sqrt();
                }
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += weights[j] / total * at(v, j, h * dh + c);
                }
                out[i * dm + h * dh + c] = acc;
            }
        }
    }
    Tensor::new(vec![n, dm], out).unwrap()
}

/// Linear attention by materializing `A = φ(Q)φ(K)ᵀ` per head, then
/// `O = A·V / (rowsum(A) + eps)`.
pub fn quadratic_linear_attention(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    heads: usize,
    eps: f64,
) -> Tensor<f64> {
    let (n, dm) = (q.shape()[0], q.shape()[1]);
    let dh = dm / heads;
    let relu = |x: f64| if x > 0.0 { x } else { 0.0 };
    let mut out = vec![0.0; n * dm];
    for h in 0..heads {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for c in 0..dh {
                    s += relu(q.data()[i * dm + h * dh + c]) * relu(k.data()[j * dm + h * dh + c]);
                }
                a[i * n + j] = s;
            }
        }
        for i in 0..n {
            let rowsum: f64 = a[i * n..(i + 1) * n].iter().sum();
            for c in 0..dh {
                let mut s = 0.0;
                for j in 0..n {
                    s += a[i * n + j] * v.data()[j * dm + h * dh + c];
                }
                out[i * dm + h * dh + c] = s / (rowsum + eps);
            }
        }
    }
    Tensor::new(vec![n, dm], out).unwrap()
}

/// Squeeze-conv kernels `[d × k²]` from the token-mean of `v`.
pub fn squeeze_kernels(
    v: &Tensor<f64>,
    w1: &Tensor<f64>,
    b1: &Tensor<f64>,
    w2: &Tensor<f64>,
    b2: &Tensor<f64>,
) -> Tensor<f64> {
    let (n, d) = (v.shape()[0], v.shape()[1]);
    let hidden = w1.shape()[0];
    let out_len = w2.shape()[0];
    let mut pool = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            pool[c] += v.data()[r * d + c] / n as f64;
        }
    }
    let mut hid = vec![0.0; hidden];
    for (j, hv) in hid.iter_mut().enumerate() {
        let mut s = b1.data()[j];
        for c in 0..d {
            s += w1.data()[j * d + c] * pool[c];
        }
        *hv = s / (1.0 + (-s).exp());
    }
    let mut ker = vec![0.0; out_len];
    for (o, kv) in ker.iter_mut().enumerate() {
        let mut s = b2.data()[o];
        for j in 0..hidden {
            s += w2.data()[o * hidden + j] * hid[j];
        }
        *kv = s;
    }
    Tensor::new(vec![d, out_len / d], ker).unwrap()
}

/// Per-position depthwise cross-correlation with zero padding.
pub fn sliding_dwconv(v: &Tensor<f64>, (hp, wp): (usize, usize), ker: &Tensor<f64>, k: usize) -> Tensor<f64> {
    let d = v.shape()[1];
    let r = (k / 2) as i64;
    let mut out = vec![0.0; hp * wp * d];
    for y in 0..hp as i64 {
        for x in 0..wp as i64 {
            for c in 0..d {
                let mut s = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sy, sx) = (y + dy, x + dx);
                        if sy < 0 || sx < 0 || sy >= hp as i64 || sx >= wp as i64 {
                            continue;
                        }
                        let tap = ((dy + r) * k as i64 + (dx + r)) as usize;
                        s += ker.data()[c * k * k + tap] * v.data()[(sy as usize * wp + sx as usize) * d + c];
                    }
                }
                out[(y as usize * wp + x as usize) * d + c] = s;
            }
        }
    }
    Tensor::new(vec![hp * wp, d], out).unwrap()
}

/// Mean over taps of per-tap mean squared error, by double loop.
pub fn naive_distill_loss(student: &[Tensor<f64>], teacher: &[Tensor<f64>]) -> f64 {
    let mut total = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        let (rows, cols) = (s.shape()[0], s.len() / s.shape()[0]);
        let mut acc = 0.0;
        for r in 0..rows {
            for c in 0..cols {
                let d = s.data()[r * cols + c] - t.data()[r * cols + c];
                acc += d * d;
            }
        }
        total += acc / (rows * cols) as f64;
    }
    total / student.len() as f64
}

/// Explicit patch extraction: row `p` holds patch `p` (raster order)
/// flattened as `(dy, dx, channel)`.
pub fn unfold_patches(image: &Tensor<f64>, patch: usize) -> Tensor<f64> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(h * w * c);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..c {
                        out.push(image.data()[((py * patch + dy) * w + px * patch + dx) * c + ch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, patch * patch * c], out).unwrap()
}

/// Majority class per patch from a per-pixel class map; ties go to the
/// lower class id.
pub fn patch_majority(pixels: &[usize], (h, w): (usize, usize), patch: usize, classes: usize) -> Vec<usize> {
    let mut labels = Vec::new();
    for py in 0..h / patch {
        for px in 0..w / patch {
            let mut counts = vec![0usize; classes];
            for y in py * patch..(py + 1) * patch {
                for x in px * patch..(px + 1) * patch {
                    counts[pixels[y * w + x]] += 1;
                }
            }
            let mut best = 0;
            for c in 1..classes {
                if counts[c] > counts[best] {
                    best = c;
                }
            }
            labels.push(best);
        }
    }
    labels
}
