//! Brute-force reference implementations shared by the integration tests.
//! Written directly from the definitions, without any of the library's
//! kernels.

#![allow(dead_code)]

pub mod suites;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secpnet::{Mask, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

pub fn random_mask(rng: &mut ChaCha8Rng, shape: [usize; 3], classes: u8) -> Mask {
    let n = shape.iter().product();
    Mask::new(shape, (0..n).map(|_| rng.random_range(0..classes)).collect()).unwrap()
}

fn at4(t: &Tensor<f64>, n: usize, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[((n * s[1] + c) * s[2] + y) * s[3] + x]
}

/// Cross-correlation with zero padding, by nested loops.
pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for bn in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += at4(x, bn, ci, iy as usize, ix as usize) * at4(w, co, ci, ky, kx);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new([n, cout, oh, ow], out).unwrap()
}

/// 2×2 max by scanning each window; the first maximum in row-major order wins.
pub fn max_pool(x: &Tensor<f64>) -> (Tensor<f64>, Vec<(usize, usize)>) {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let mut out = Vec::new();
    let mut arg = Vec::new();
    for bn in 0..n {
        for ch in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut best = (f64::NEG_INFINITY, (0, 0));
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let v = at4(x, bn, ch, 2 * oy + dy, 2 * ox + dx);
                        if v > best.0 {
                            best = (v, (2 * oy + dy, 2 * ox + dx));
                        }
                    }
                    out.push(best.0);
                    arg.push(best.1);
                }
            }
        }
    }
    (Tensor::new([n, c, h / 2, w / 2], out).unwrap(), arg)
}

/// Bilinear 2× upsampling, half-pixel centres, evaluated per output pixel.
pub fn upsample(x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let tap = |o: usize, len: usize| {
        let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0.min(len - 1), i1, src - i0 as f64)
    };
    Tensor::from_fn([n, c, 2 * h, 2 * w], |i| {
        let ox = i % (2 * w);
        let oy = (i / (2 * w)) % (2 * h);
        let ch = (i / (4 * h * w)) % c;
        let bn = i / (4 * h * w * c);
        let (y0, y1, fy) = tap(oy, h);
        let (x0, x1, fx) = tap(ox, w);
        (1.0 - fy) * ((1.0 - fx) * at4(x, bn, ch, y0, x0) + fx * at4(x, bn, ch, y0, x1))
            + fy * ((1.0 - fx) * at4(x, bn, ch, y1, x0) + fx * at4(x, bn, ch, y1, x1))
    })
}

/// Mean over pixels of `-log softmax(logits)[label]`, per pixel via log-sum-exp.
pub fn cross_entropy(logits: &Tensor<f64>, mask: &Mask) -> f64 {
    let [n, k, h, w] = [logits.shape()[0], logits.shape()[1], logits.shape()[2], logits.shape()[3]];
    let mut total = 0.0;
    for bn in 0..n {
        for y in 0..h {
            for x in 0..w {
                let zs: Vec<f64> = (0..k).map(|c| at4(logits, bn, c, y, x)).collect();
                let m = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + zs.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
                total += lse - zs[mask.get(bn, y, x) as usize];
            }
        }
    }
    total / (n * h * w) as f64
}

/// Per-pixel label of the largest logit; the lowest class wins ties.
pub fn argmax(logits: &Tensor<f64>) -> Vec<u8> {
    let [n, k, h, w] = [logits.shape()[0], logits.shape()[1], logits.shape()[2], logits.shape()[3]];
    let mut out = Vec::new();
    for bn in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                for c in 1..k {
                    if at4(logits, bn, c, y, x) > at4(logits, bn, best, y, x) {
                        best = c;
                    }
                }
                out.push(best as u8);
            }
        }
    }
    out
}

/// `(|A ∩ B|, |A|, |B|)` for the pixel sets of `organ`.
pub fn set_sizes(pred: &Mask, gt: &Mask, organ: u8) -> (usize, usize, usize) {
    let a: std::collections::HashSet<usize> =
        pred.labels().iter().enumerate().filter(|(_, &l)| l == organ).map(|(i, _)| i).collect();
    let b: std::collections::HashSet<usize> =
        gt.labels().iter().enumerate().filter(|(_, &l)| l == organ).map(|(i, _)| i).collect();
    (a.intersection(&b).count(), a.len(), b.len())
}

pub fn dice(pred: &Mask, gt: &Mask, organ: u8) -> Option<f64> {
    let (i, a, b) = set_sizes(pred, gt, organ);
    (a + b > 0).then(|| 2.0 * i as f64 / (a + b) as f64)
}

pub fn jaccard(pred: &Mask, gt: &Mask, organ: u8) -> Option<f64> {
    let (i, a, b) = set_sizes(pred, gt, organ);
    let union = a + b - i;
    (union > 0).then(|| i as f64 / union as f64)
}
