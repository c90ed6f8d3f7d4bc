//! Oracle and gradient suites, returning their worst error so both the
//! regular tests and the acceptance runner can judge them.

use rand::Rng;
use secpnet::networks::{build_variant, NetworkConfig, VariantId};
use secpnet::tensor::{grad_check, GradCheckOptions, GradCheckReport};
use secpnet::{Graph, Mask, Result, Tensor, Var};

use super::{random_mask, random_tensor, rng};

/// Worst error over a batch of random cases.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_err: f64,
}

fn max_abs(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn conv2d(cases: usize, seed: u64) -> SuiteResult {
    let mut r = rng(seed);
    let mut max_err: f64 = 0.0;
    let mut done = 0;
    while done < cases {
        let n = r.random_range(1..=2);
        let cin = r.random_range(1..=4);
        let cout = r.random_range(1..=4);
        let h = r.random_range(1..=9);
        let w = r.random_range(1..=9);
        let k = [1, 3, 5][r.random_range(0..3)];
        let pad = r.random_range(0..=k / 2);
        let stride = r.random_range(1..=2);
        let valid = |len: usize| len + 2 * pad >= k && (len + 2 * pad - k) % stride == 0;
        if !valid(h) || !valid(w) {
            continue;
        }
        let x = random_tensor(&mut r, &[n, cin, h, w]);
        let wt = random_tensor(&mut r, &[cout, cin, k, k]);
        let b = random_tensor(&mut r, &[cout]);
        let mut g = Graph::<f64>::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(wt.clone()), g.input(b.clone()));
        let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
        max_err = max_err.max(max_abs(g.value(y), &super::conv2d(&x, &wt, &b, stride, pad)));
        done += 1;
    }
    SuiteResult { name: "conv2d", cases, max_err }
}

/// Values and the routing of the backward pass both follow the window scan.
/// Half of the cases use values from {-1, 0, 1} to force ties.
pub fn max_pool(cases: usize, seed: u64) -> SuiteResult {
    let mut r = rng(seed);
    let mut max_err: f64 = 0.0;
    for case in 0..cases {
        let shape = [r.random_range(1..=2), r.random_range(1..=4), 2 * r.random_range(1..=4), 2 * r.random_range(1..=4)];
        let mut x = random_tensor(&mut r, &shape);
        if case % 2 == 1 {
            x = x.map(|v| v.round());
        }
        let (want, arg) = super::max_pool(&x);
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x.clone(), true);
        let y = g.max_pool2x2(xv).unwrap();
        max_err = max_err.max(max_abs(g.value(y), &want));
        // distinct weights identify which input each output was routed to
        let weights = Tensor::from_fn(want.shape().to_vec(), |i| (i + 1) as f64);
        let s = g.weighted_sum(y, &weights).unwrap();
        let grad = g.backward(s).unwrap().get(xv).unwrap();
        let (h, w) = (shape[2], shape[3]);
        let mut expect = vec![0.0; x.len()];
        for (o, &(iy, ix)) in arg.iter().enumerate() {
            let plane = o / ((h / 2) * (w / 2));
            expect[plane * h * w + iy * w + ix] += (o + 1) as f64;
        }
        let expect = Tensor::new(shape.to_vec(), expect).unwrap();
        max_err = max_err.max(max_abs(&grad, &expect));
    }
    SuiteResult { name: "max_pool2x2", cases, max_err }
}

pub fn upsample(cases: usize, seed: u64) -> SuiteResult {
    let mut r = rng(seed);
    let mut max_err: f64 = 0.0;
    for _ in 0..cases {
        let shape = [r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=9), r.random_range(1..=9)];
        let x = random_tensor(&mut r, &shape);
        let mut g = Graph::<f64>::new();
        let xv = g.input(x.clone());
        let y = g.upsample_bilinear2x(xv).unwrap();
        max_err = max_err.max(max_abs(g.value(y), &super::upsample(&x)));
    }
    SuiteResult { name: "upsample_bilinear2x", cases, max_err }
}

pub fn softmax_ce(cases: usize, seed: u64) -> SuiteResult {
    let mut r = rng(seed);
    let mut max_err: f64 = 0.0;
    for _ in 0..cases {
        let (n, k, h, w) = (r.random_range(1..=2), r.random_range(2..=14), r.random_range(1..=9), r.random_range(1..=9));
        let logits = random_tensor(&mut r, &[n, k, h, w]).map(|v| 8.0 * v);
        let mask = random_mask(&mut r, [n, h, w], k as u8);
        let mut g = Graph::<f64>::new();
        let lv = g.input(logits.clone());
        let loss = g.softmax_cross_entropy(lv, &mask).unwrap();
        max_err = max_err.max((g.value(loss).data()[0] - super::cross_entropy(&logits, &mask)).abs());
    }
    SuiteResult { name: "softmax_cross_entropy", cases, max_err }
}

/// Dice and Jaccard against set counting on random 16×16 masks; exact.
pub fn overlap_metrics(cases: usize, seed: u64) -> SuiteResult {
    let mut r = rng(seed);
    let mut max_err: f64 = 0.0;
    for _ in 0..cases {
        let classes = r.random_range(2..=14);
        let pred = random_mask(&mut r, [1, 16, 16], classes);
        let gt = random_mask(&mut r, [1, 16, 16], classes);
        for organ in 1..14u8 {
            let pairs = [
                (secpnet::metrics::dice(&pred, &gt, organ).unwrap(), super::dice(&pred, &gt, organ)),
                (secpnet::metrics::jaccard(&pred, &gt, organ).unwrap(), super::jaccard(&pred, &gt, organ)),
            ];
            for (got, want) in pairs {
                max_err = max_err.max(match (got, want) {
                    (Some(a), Some(b)) => (a - b).abs(),
                    (None, None) => 0.0,
                    _ => f64::INFINITY,
                });
            }
        }
    }
    SuiteResult { name: "dice/jaccard", cases, max_err }
}

/// Argmax labels; logits quantized so ties occur. Reports mismatching pixels.
pub fn argmax(cases: usize, seed: u64) -> SuiteResult {
    let mut r = rng(seed);
    let mut mismatches = 0usize;
    for _ in 0..cases {
        let shape = [r.random_range(1..=2), r.random_range(2..=14), r.random_range(1..=9), r.random_range(1..=9)];
        let logits = random_tensor(&mut r, &shape).map(|v| (2.0 * v).round());
        let got = secpnet::networks::argmax_mask(&logits).unwrap();
        mismatches += got.labels().iter().zip(super::argmax(&logits)).filter(|(a, b)| **a != *b).count();
    }
    SuiteResult { name: "argmax", cases, max_err: mismatches as f64 }
}

pub fn opts(seed: u64, sample: Option<usize>) -> GradCheckOptions {
    GradCheckOptions { max_elements_per_input: sample, seed, ..Default::default() }
}

/// Inputs that are not differentiated: the reduction weights and the labels.
pub struct Aux {
    pub weights: Tensor<f64>,
    pub mask: Mask,
}

type OpFn = fn(&mut Graph<f64>, &[Var], &Aux) -> Result<Var>;
type MakeFn = fn(&mut rand_chacha::ChaCha8Rng) -> (Vec<Tensor<f64>>, Aux);

fn weights(r: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Aux {
    Aux { weights: random_tensor(r, shape), mask: Mask::filled([1, 1, 1], 0) }
}

/// Every differentiable op, each reduced to a scalar by a random weighting.
fn op_cases() -> Vec<(&'static str, OpFn, MakeFn)> {
    vec![
        (
            "conv2d",
            |g, v, a| {
                let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
                g.weighted_sum(y, &a.weights)
            },
            |r| {
                let ts = [&[2, 3, 9, 9][..], &[4, 3, 3, 3], &[4]].iter().map(|s| random_tensor(r, s)).collect();
                (ts, weights(r, &[2, 4, 9, 9]))
            },
        ),
        (
            "conv2d_strided",
            |g, v, a| {
                let y = g.conv2d(v[0], v[1], v[2], 2, 0)?;
                g.weighted_sum(y, &a.weights)
            },
            |r| {
                let ts = [&[2, 2, 9, 9][..], &[3, 2, 3, 3], &[3]].iter().map(|s| random_tensor(r, s)).collect();
                (ts, weights(r, &[2, 3, 4, 4]))
            },
        ),
        (
            "conv2d_pointwise",
            |g, v, a| {
                let y = g.conv2d(v[0], v[1], v[2], 1, 0)?;
                g.weighted_sum(y, &a.weights)
            },
            |r| {
                let ts = [&[2, 4, 5, 7][..], &[3, 4, 1, 1], &[3]].iter().map(|s| random_tensor(r, s)).collect();
                (ts, weights(r, &[2, 3, 5, 7]))
            },
        ),
        (
            "max_pool2x2",
            |g, v, a| {
                let y = g.max_pool2x2(v[0])?;
                g.weighted_sum(y, &a.weights)
            },
            |r| (vec![random_tensor(r, &[2, 3, 8, 8])], weights(r, &[2, 3, 4, 4])),
        ),
        (
            "upsample_bilinear2x",
            |g, v, a| {
                let y = g.upsample_bilinear2x(v[0])?;
                g.weighted_sum(y, &a.weights)
            },
            |r| (vec![random_tensor(r, &[2, 4, 9, 9])], weights(r, &[2, 4, 18, 18])),
        ),
        (
            "relu",
            |g, v, a| {
                let y = g.relu(v[0])?;
                g.weighted_sum(y, &a.weights)
            },
            |r| {
                // keep inputs away from the kink
                let x = random_tensor(r, &[2, 4, 9, 9]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
                (vec![x], weights(r, &[2, 4, 9, 9]))
            },
        ),
        (
            "sigmoid",
            |g, v, a| {
                let y = g.sigmoid(v[0])?;
                g.weighted_sum(y, &a.weights)
            },
            |r| (vec![random_tensor(r, &[2, 4, 9, 9]).map(|v| 4.0 * v)], weights(r, &[2, 4, 9, 9])),
        ),
        (
            "global_avg_pool",
            |g, v, a| {
                let y = g.global_avg_pool(v[0])?;
                g.weighted_sum(y, &a.weights)
            },
            |r| (vec![random_tensor(r, &[2, 4, 9, 9])], weights(r, &[2, 4])),
        ),
        (
            "linear",
            |g, v, a| {
                let y = g.linear(v[0], v[1], v[2])?;
                g.weighted_sum(y, &a.weights)
            },
            |r| {
                let ts = [&[2, 6][..], &[3, 6], &[3]].iter().map(|s| random_tensor(r, s)).collect();
                (ts, weights(r, &[2, 3]))
            },
        ),
        (
            "concat_channels",
            |g, v, a| {
                let y = g.concat_channels(v[0], v[1])?;
                g.weighted_sum(y, &a.weights)
            },
            |r| {
                let ts = [&[2, 2, 5, 7][..], &[2, 3, 5, 7]].iter().map(|s| random_tensor(r, s)).collect();
                (ts, weights(r, &[2, 5, 5, 7]))
            },
        ),
        (
            "scale_channels",
            |g, v, a| {
                let y = g.scale_channels(v[0], v[1])?;
                g.weighted_sum(y, &a.weights)
            },
            |r| {
                let ts = [&[2, 4, 6, 6][..], &[2, 4]].iter().map(|s| random_tensor(r, s)).collect();
                (ts, weights(r, &[2, 4, 6, 6]))
            },
        ),
        (
            "softmax_channels",
            |g, v, a| {
                let y = g.softmax_channels(v[0])?;
                g.weighted_sum(y, &a.weights)
            },
            |r| (vec![random_tensor(r, &[2, 5, 6, 6]).map(|v| 3.0 * v)], weights(r, &[2, 5, 6, 6])),
        ),
        (
            "softmax_cross_entropy",
            |g, v, a| g.softmax_cross_entropy(v[0], &a.mask),
            |r| {
                let x = random_tensor(r, &[2, 6, 9, 9]).map(|v| 3.0 * v);
                let mask = random_mask(r, [2, 9, 9], 6);
                (vec![x], Aux { weights: Tensor::zeros([1]), mask })
            },
        ),
    ]
}

/// Names of the op cases, in the order [`op_gradients`] checks them.
pub fn op_names() -> Vec<&'static str> {
    op_cases().into_iter().map(|c| c.0).collect()
}

/// Worst relative error per op over `instances` seeds.
pub fn op_gradients(instances: u64) -> Vec<SuiteResult> {
    op_cases()
        .into_iter()
        .map(|(name, f, make)| {
            let mut max_err: f64 = 0.0;
            for seed in 0..instances {
                let mut r = rng(1000 + seed);
                let (inputs, aux) = make(&mut r);
                let report = grad_check(|g, v| f(g, v, &aux), &inputs, &opts(seed, None)).unwrap();
                max_err = max_err.max(report.max_rel_error);
            }
            SuiteResult { name, cases: instances as usize, max_err }
        })
        .collect()
}

/// End-to-end cross-entropy of `variant` at 8×8, base width 4, gradient
/// checked on a sample of elements from every parameter tensor and the image.
/// Elements sitting on a ReLU or max-pool switch are skipped and counted.
pub fn variant_gradient(variant: VariantId, seed: u64, elements: usize) -> GradCheckReport {
    let depth = if seed % 2 == 0 { 2 } else { 3 };
    let cfg = NetworkConfig { in_channels: 1, num_classes: 4, base_width: 4, depth, se_ratio: 2 };
    let net = build_variant::<f64>(variant, cfg, seed).unwrap();
    let mut r = rng(2000 + seed);
    let image = random_tensor(&mut r, &[1, 1, 8, 8]);
    let mask = random_mask(&mut r, [1, 8, 8], 4);
    let mut inputs: Vec<Tensor<f64>> = net.params.iter().map(|p| p.tensor.clone()).collect();
    // small random biases so no unit sits exactly on a relu kink
    for (t, p) in inputs.iter_mut().zip(net.params.iter()) {
        if p.name.ends_with(".bias") {
            *t = random_tensor(&mut r, t.shape()).map(|v| 0.1 * v);
        }
    }
    inputs.push(image);
    let np = net.params.len();
    grad_check(
        |g, v| {
            let out = net.forward(g, &v[..np], v[np])?;
            g.softmax_cross_entropy(out.last, &mask)
        },
        &inputs,
        &GradCheckOptions { kink_tolerance: Some(1e-4), ..opts(seed, Some(elements)) },
    )
    .unwrap()
}
