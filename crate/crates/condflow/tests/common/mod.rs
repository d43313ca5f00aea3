//! Shared finite-difference gradient harness.
//!
//! Verifies every differentiable tape op against central differences at
//! f64 precision. The numeric side never touches the backward pass: it
//! re-runs the forward closure at perturbed inputs, so agreement means the
//! adjoints match the function the forward pass actually computes.

#![allow(dead_code)]

use std::sync::Arc;

use condflow::autodiff::{Tape, ValueId};
use condflow::ops::RunningStats;
use condflow::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative-error bound every probe must satisfy.
pub const GRAD_TOL: f64 = 1e-4;
/// Probes per leaf tensor; small tensors are probed exhaustively.
const PROBES_PER_LEAF: usize = 8;

/// One differentiability check: a set of leaf tensors and a closure that
/// assembles a scalar loss from them on a fresh tape.
pub struct GradCase {
    pub label: String,
    pub leaves: Vec<Tensor<f64>>,
    pub build: Box<dyn Fn(&mut Tape<f64>, &[ValueId]) -> ValueId>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradSummary {
    pub cases: usize,
    pub probes: usize,
    pub max_rel_err: f64,
}

fn loss_at(case: &GradCase, values: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let ids: Vec<ValueId> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = (case.build)(&mut tape, &ids);
    tape.value(loss).data()[0]
}

/// Check one case; returns probe count and the worst relative error seen.
pub fn check_case(case: &GradCase, rng: &mut ChaCha8Rng) -> Result<(usize, f64), String> {
    let mut tape = Tape::<f64>::new();
    let ids: Vec<ValueId> = case.leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = (case.build)(&mut tape, &ids);
    let grads = tape
        .backward(loss)
        .map_err(|e| format!("{}: backward failed: {e}", case.label))?;

    let mut probes = 0usize;
    let mut worst = 0.0f64;
    for (li, leaf) in case.leaves.iter().enumerate() {
        let analytic = grads.get(ids[li]).cloned();
        let numel = leaf.numel();
        let picks: Vec<usize> = if numel <= PROBES_PER_LEAF {
            (0..numel).collect()
        } else {
            let mut all: Vec<usize> = (0..numel).collect();
            for i in 0..PROBES_PER_LEAF {
                let j = rng.random_range(i..numel);
                all.swap(i, j);
            }
            all.truncate(PROBES_PER_LEAF);
            all
        };
        for idx in picks {
            let x = leaf.data()[idx];
            let h = 1e-5 * (1.0 + x.abs());
            let mut values: Vec<Tensor<f64>> = case.leaves.clone();
            let mut bump = |v: f64| -> Result<f64, String> {
                let mut d = leaf.data().to_vec();
                d[idx] = v;
                values[li] = Tensor::from_vec(leaf.shape().to_vec(), d)
                    .map_err(|e| format!("{}: rebuild: {e}", case.label))?;
                Ok(loss_at(case, &values))
            };
            let fp = bump(x + h)?;
            let fm = bump(x - h)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[idx]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > GRAD_TOL {
                return Err(format!(
                    "{}: leaf {li} index {idx}: analytic {a:e} vs central-difference {numeric:e} (rel {rel:e})",
                    case.label
                ));
            }
            worst = worst.max(rel);
            probes += 1;
        }
    }
    Ok((probes, worst))
}

fn tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn tensor_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Random dot-product coefficients that turn any tensor into a scalar loss.
fn coeffs_for(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    tensor(shape, rng)
}

fn conv_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    // (n, ci, h, w, co, k, stride, pad)
    let shapes = [
        (1, 1, 5, 5, 2, 3, 1, 1),
        (2, 3, 6, 6, 4, 3, 1, 1),
        (1, 2, 7, 9, 3, 3, 2, 1),
        (2, 4, 4, 4, 1, 1, 1, 0),
        (1, 3, 8, 6, 2, 5, 1, 2),
        (3, 2, 5, 7, 2, 3, 2, 1),
    ];
    shapes
        .iter()
        .map(|&(n, ci, h, w, co, k, stride, pad)| {
            let input = tensor(&[n, ci, h, w], rng);
            let weight = tensor(&[co, ci, k, k], rng);
            let bias = tensor(&[co], rng);
            let ho = (h + 2 * pad - k) / stride + 1;
            let wo = (w + 2 * pad - k) / stride + 1;
            let co_shape = [n, co, ho, wo];
            let coeffs = coeffs_for(&co_shape, rng);
            GradCase {
                label: format!("conv2d {n}x{ci}x{h}x{w} k{k} s{stride} p{pad}"),
                leaves: vec![input, weight, bias],
                build: Box::new(move |tape, ids| {
                    let out = tape.conv2d(ids[0], ids[1], ids[2], stride, pad).unwrap();
                    tape.reduce_dot(out, coeffs.clone()).unwrap()
                }),
            }
        })
        .collect()
}

fn deconv_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    // (n, ci, h, w, co, k, stride, pad)
    let shapes = [
        (1, 2, 3, 3, 2, 4, 2, 1),
        (2, 1, 4, 5, 3, 3, 1, 1),
        (1, 3, 2, 4, 2, 2, 2, 0),
        (1, 4, 3, 2, 1, 4, 2, 1),
        (2, 2, 5, 3, 2, 3, 1, 0),
        (1, 1, 6, 4, 3, 4, 2, 1),
    ];
    shapes
        .iter()
        .map(|&(n, ci, h, w, co, k, stride, pad)| {
            let input = tensor(&[n, ci, h, w], rng);
            let weight = tensor(&[ci, co, k, k], rng);
            let bias = tensor(&[co], rng);
            let ho = (h - 1) * stride + k - 2 * pad;
            let wo = (w - 1) * stride + k - 2 * pad;
            let co_shape = [n, co, ho, wo];
            let coeffs = coeffs_for(&co_shape, rng);
            GradCase {
                label: format!("deconv2d {n}x{ci}x{h}x{w} k{k} s{stride} p{pad}"),
                leaves: vec![input, weight, bias],
                build: Box::new(move |tape, ids| {
                    let out = tape.deconv2d(ids[0], ids[1], ids[2], stride, pad).unwrap();
                    tape.reduce_dot(out, coeffs.clone()).unwrap()
                }),
            }
        })
        .collect()
}

fn batch_norm_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let shapes = [
        [2, 3, 4, 4],
        [1, 2, 6, 5],
        [4, 1, 3, 3],
        [2, 4, 2, 2],
        [3, 2, 5, 4],
        [1, 5, 4, 6],
    ];
    shapes
        .iter()
        .map(|&s| {
            let input = tensor(&s, rng);
            let scale = tensor_off_zero(&[s[1]], rng);
            let shift = tensor(&[s[1]], rng);
            let coeffs = coeffs_for(&s, rng);
            let c = s[1];
            GradCase {
                label: format!("batch_norm_train {}x{}x{}x{}", s[0], s[1], s[2], s[3]),
                leaves: vec![input, scale, shift],
                build: Box::new(move |tape, ids| {
                    // fresh running stats each evaluation: they are a side
                    // channel, not part of the differentiated function
                    let mut rs = RunningStats::<f64>::new(c);
                    let out = tape
                        .batch_norm_train(ids[0], ids[1], ids[2], &mut rs, 1e-5, 0.1)
                        .unwrap();
                    tape.reduce_dot(out, coeffs.clone()).unwrap()
                }),
            }
        })
        .collect()
}

fn dropout_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let shapes: [(usize, Vec<usize>); 5] = [
        (1, vec![1, 2, 4, 4]),
        (2, vec![2, 3, 3, 3]),
        (3, vec![1, 1, 6, 5]),
        (4, vec![3, 2, 2, 4]),
        (5, vec![1, 4, 5, 3]),
    ];
    shapes
        .iter()
        .map(|(seed, s)| {
            let input = tensor(s, rng);
            let coeffs = coeffs_for(s, rng);
            let rate = 0.1 + 0.15 * (*seed as f64);
            let seed = *seed as u64;
            GradCase {
                label: format!("dropout rate {rate:.2} seed {seed}"),
                leaves: vec![input],
                build: Box::new(move |tape, ids| {
                    // fixed seed keeps the mask identical across the
                    // perturbed re-evaluations
                    let out = tape.dropout(ids[0], rate, seed).unwrap();
                    tape.reduce_dot(out, coeffs.clone()).unwrap()
                }),
            }
        })
        .collect()
}

fn relu_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let shapes = [
        [1, 1, 4, 4],
        [2, 3, 3, 5],
        [1, 2, 6, 6],
        [3, 1, 2, 3],
        [2, 2, 5, 2],
    ];
    shapes
        .iter()
        .map(|&s| {
            // inputs bounded away from the kink at zero
            let input = tensor_off_zero(&s, rng);
            let coeffs = coeffs_for(&s, rng);
            GradCase {
                label: format!("relu {}x{}x{}x{}", s[0], s[1], s[2], s[3]),
                leaves: vec![input],
                build: Box::new(move |tape, ids| {
                    let out = tape.relu(ids[0]);
                    tape.reduce_dot(out, coeffs.clone()).unwrap()
                }),
            }
        })
        .collect()
}

fn avg_pool_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    // (shape, window); spatial dims divisible by the window
    let shapes: [([usize; 4], usize); 6] = [
        ([1, 2, 4, 4], 2),
        ([2, 1, 6, 6], 3),
        ([1, 3, 4, 6], 2),
        ([2, 2, 8, 4], 4),
        ([1, 1, 6, 9], 3),
        ([2, 3, 2, 2], 2),
    ];
    shapes
        .iter()
        .map(|&(s, window)| {
            let input = tensor(&s, rng);
            let out_shape = [s[0], s[1], s[2] / window, s[3] / window];
            let coeffs = coeffs_for(&out_shape, rng);
            GradCase {
                label: format!("avg_pool {}x{}x{}x{} w{window}", s[0], s[1], s[2], s[3]),
                leaves: vec![input],
                build: Box::new(move |tape, ids| {
                    let out = tape.avg_pool(ids[0], window).unwrap();
                    tape.reduce_dot(out, coeffs.clone()).unwrap()
                }),
            }
        })
        .collect()
}

fn concat_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    // (n, ca, cb, h, w)
    let shapes = [
        (1, 1, 2, 4, 4),
        (2, 3, 1, 3, 5),
        (1, 2, 2, 5, 3),
        (3, 1, 4, 2, 2),
        (1, 4, 3, 3, 6),
    ];
    shapes
        .iter()
        .map(|&(n, ca, cb, h, w)| {
            let a = tensor(&[n, ca, h, w], rng);
            let b = tensor(&[n, cb, h, w], rng);
            let coeffs = coeffs_for(&[n, ca + cb, h, w], rng);
            GradCase {
                label: format!("concat {n}x({ca}+{cb})x{h}x{w}"),
                leaves: vec![a, b],
                build: Box::new(move |tape, ids| {
                    let out = tape.concat(ids[0], ids[1]).unwrap();
                    tape.reduce_dot(out, coeffs.clone()).unwrap()
                }),
            }
        })
        .collect()
}

fn crop_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    // (n, c, h, w, new_h, new_w)
    let shapes = [
        (1, 2, 5, 5, 4, 4),
        (2, 1, 6, 4, 6, 3),
        (1, 3, 4, 7, 2, 5),
        (2, 2, 3, 3, 3, 3),
        (1, 1, 8, 6, 5, 6),
    ];
    shapes
        .iter()
        .map(|&(n, c, h, w, nh, nw)| {
            let input = tensor(&[n, c, h, w], rng);
            let coeffs = coeffs_for(&[n, c, nh, nw], rng);
            GradCase {
                label: format!("crop {n}x{c}x{h}x{w} -> {nh}x{nw}"),
                leaves: vec![input],
                build: Box::new(move |tape, ids| {
                    let out = tape.crop(ids[0], nh, nw);
                    tape.reduce_dot(out, coeffs.clone()).unwrap()
                }),
            }
        })
        .collect()
}

fn softmax_ce_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let shapes = [
        [1, 3, 3, 3],
        [2, 5, 2, 4],
        [1, 2, 4, 5],
        [2, 4, 3, 2],
        [1, 24, 2, 3],
    ];
    shapes
        .iter()
        .map(|&s| {
            let logits = tensor(&s, rng);
            let pixels = s[0] * s[2] * s[3];
            let targets: Arc<Vec<u32>> =
                Arc::new((0..pixels).map(|_| rng.random_range(0..s[1] as u32)).collect());
            // at least one pixel stays valid so the mean is defined
            let mask: Arc<Vec<bool>> = Arc::new(
                (0..pixels)
                    .map(|i| i == 0 || rng.random_bool(0.8))
                    .collect(),
            );
            GradCase {
                label: format!("softmax_cross_entropy {}x{}x{}x{}", s[0], s[1], s[2], s[3]),
                leaves: vec![logits],
                build: Box::new(move |tape, ids| {
                    tape.softmax_cross_entropy(ids[0], targets.clone(), mask.clone()).unwrap()
                }),
            }
        })
        .collect()
}

fn l1_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let shapes = [
        [1, 1, 4, 4],
        [2, 1, 3, 5],
        [1, 1, 6, 2],
        [2, 1, 2, 2],
        [1, 1, 5, 7],
    ];
    shapes
        .iter()
        .map(|&s| {
            let target = tensor(&s, rng);
            // keep |pred - target| away from the kink of |.|
            let offsets = tensor_off_zero(&s, rng);
            let pred_data: Vec<f64> = target
                .data()
                .iter()
                .zip(offsets.data().iter())
                .map(|(t, o)| t + o.signum() * (o.abs() + 0.05))
                .collect();
            let pred = Tensor::from_vec(s.to_vec(), pred_data).unwrap();
            let pixels: usize = s.iter().product();
            let mask: Arc<Vec<bool>> = Arc::new(
                (0..pixels)
                    .map(|i| i == 0 || rng.random_bool(0.8))
                    .collect(),
            );
            GradCase {
                label: format!("l1_loss {}x{}x{}x{}", s[0], s[1], s[2], s[3]),
                leaves: vec![pred],
                build: Box::new(move |tape, ids| {
                    tape.l1_loss(ids[0], target.clone(), mask.clone()).unwrap()
                }),
            }
        })
        .collect()
}

fn reduce_dot_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let shapes: [Vec<usize>; 5] = [
        vec![1, 2, 3, 3],
        vec![4],
        vec![2, 5],
        vec![3, 1, 4],
        vec![2, 2, 2, 2],
    ];
    shapes
        .iter()
        .map(|s| {
            let input = tensor(s, rng);
            let coeffs = coeffs_for(s, rng);
            GradCase {
                label: format!("reduce_dot {s:?}"),
                leaves: vec![input],
                build: Box::new(move |tape, ids| {
                    tape.reduce_dot(ids[0], coeffs.clone()).unwrap()
                }),
            }
        })
        .collect()
}

pub const GRAD_OPS: [&str; 11] = [
    "conv2d",
    "deconv2d",
    "batch_norm_train",
    "dropout",
    "relu",
    "avg_pool",
    "concat",
    "crop",
    "softmax_cross_entropy",
    "l1_loss",
    "reduce_dot",
];

/// All checks for one op, freshly seeded so runs are reproducible.
pub fn cases_for(op: &str) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ op.len() as u64 ^ (op.as_bytes()[0] as u64) << 8);
    match op {
        "conv2d" => conv_cases(&mut rng),
        "deconv2d" => deconv_cases(&mut rng),
        "batch_norm_train" => batch_norm_cases(&mut rng),
        "dropout" => dropout_cases(&mut rng),
        "relu" => relu_cases(&mut rng),
        "avg_pool" => avg_pool_cases(&mut rng),
        "concat" => concat_cases(&mut rng),
        "crop" => crop_cases(&mut rng),
        "softmax_cross_entropy" => softmax_ce_cases(&mut rng),
        "l1_loss" => l1_cases(&mut rng),
        "reduce_dot" => reduce_dot_cases(&mut rng),
        other => panic!("no gradient cases for {other}"),
    }
}

/// Run one op's cases; Err carries the first failing probe.
pub fn check_op(op: &str) -> Result<GradSummary, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xbeef ^ op.len() as u64);
    let mut summary = GradSummary::default();
    for case in cases_for(op) {
        let (probes, worst) = check_case(&case, &mut rng)?;
        summary.cases += 1;
        summary.probes += probes;
        summary.max_rel_err = summary.max_rel_err.max(worst);
    }
    Ok(summary)
}

/// The full suite over every differentiable op.
pub fn run_gradient_suite() -> Result<GradSummary, String> {
    let mut total = GradSummary::default();
    for op in GRAD_OPS {
        let s = check_op(op)?;
        total.cases += s.cases;
        total.probes += s.probes;
        total.max_rel_err = total.max_rel_err.max(s.max_rel_err);
    }
    Ok(total)
}
