//! Finite-difference gradient cases shared by the gradient suite and the
//! acceptance harness. Each case builds a random instance and returns the
//! worst relative error between analytic and numeric derivatives.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use hsdnet::engine::ops::{self, ConvGeometry};
use hsdnet::graph::ChainNet;
use hsdnet::sensitivity::impact_scores;
use hsdnet::trainer::{Dataset, Split};
use hsdnet::{BackwardOptions, Model, OutputGrad, ProbeSet, Tensor};

use super::{random_tensor, random_tree, rel_err, small_chain};

/// Tolerance for layer and network gradients.
pub const LAYER_TOL: f64 = 1e-5;
/// Tolerance for raw Iscv entries.
pub const ISCV_TOL: f64 = 1e-4;

const H: f64 = 1e-4;
/// Relative disagreement between step sizes that marks a non-smooth window.
const KINK: f64 = 1e-7;
/// Absolute disagreement below which step sizes agree regardless of scale;
/// well above the rounding noise of the stencil.
const KINK_FLOOR: f64 = 1e-10;
/// Coordinate draws allowed per check before giving up on smoothness.
const MAX_DRAWS: usize = 100;

static SKIPPED: AtomicUsize = AtomicUsize::new(0);

/// Coordinates redrawn so far because a ReLU or max-pool kink fell inside
/// the stencil window.
pub fn skipped() -> usize {
    SKIPPED.load(Ordering::Relaxed)
}

fn five_point<F: FnMut(f64) -> f64>(f: &mut F, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// Five-point derivative of `f` at 0 along a unit step, or `None` when the
/// estimates at steps `H` and `H / 2` disagree, meaning `f` is not smooth
/// over the window. Truncation error is O(H^4), so smooth functions agree to
/// rounding.
pub fn stencil<F: FnMut(f64) -> f64>(mut f: F) -> Option<f64> {
    let coarse = five_point(&mut f, H);
    let fine = five_point(&mut f, H / 2.0);
    if (coarse - fine).abs() <= (KINK * coarse.abs().max(fine.abs())).max(KINK_FLOOR) {
        Some(coarse)
    } else {
        SKIPPED.fetch_add(1, Ordering::Relaxed);
        None
    }
}

/// Draws coordinates with `draw` until one has a smooth stencil window and
/// returns its relative error against `analytic`.
fn smooth_error<D, F>(rng: &mut ChaCha8Rng, mut draw: D, mut derivative: F) -> f64
where
    D: FnMut(&mut ChaCha8Rng) -> (usize, f64),
    F: FnMut(usize) -> Option<f64>,
{
    for _ in 0..MAX_DRAWS {
        let (i, analytic) = draw(rng);
        if let Some(num) = derivative(i) {
            return rel_err(analytic, num);
        }
    }
    panic!("no smooth coordinate in {MAX_DRAWS} draws");
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks `<r, f(x)>` against an analytic gradient on a few coordinates.
fn check<F: Fn(&Tensor) -> Tensor>(rng: &mut ChaCha8Rng, x: &Tensor, r: &Tensor, f: F, analytic: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..6 {
        let err = smooth_error(
            rng,
            |rng| {
                let i = rng.gen_range(0..x.len());
                (i, analytic[i])
            },
            |i| {
                stencil(|d| {
                    let mut xs = x.clone();
                    xs.data_mut()[i] += d;
                    dot(r, &f(&xs))
                })
            },
        );
        worst = worst.max(err);
    }
    worst
}

/// Moves entries away from zero so ReLU kinks sit outside the probe step.
fn away_from_zero(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(*v);
        }
    }
    t
}

/// 3x3 same-padded and 1x1 convolutions, some strided; input and weight
/// gradients.
pub fn conv_case(rng: &mut ChaCha8Rng, case: usize) -> f64 {
    let (kernel, padding) = if case % 2 == 0 { (3, 1) } else { (1, 0) };
    let g = ConvGeometry { kernel, stride: 1 + (case % 3 == 2) as usize, padding };
    let (n, c, o, h) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(3..=5));
    let x = random_tensor(rng, &[n, c, h, h]);
    let w = random_tensor(rng, &[o, c, kernel, kernel]);
    let b: Vec<f64> = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = ops::conv2d_forward(&x, &w, &b, g);
    let r = random_tensor(rng, y.shape());
    let grads = ops::conv2d_backward(&x, &w, &r, g, true, true);
    let e_in = check(rng, &x, &r, |xx| ops::conv2d_forward(xx, &w, &b, g), grads.input.unwrap().data());
    let e_w = check(rng, &w, &r, |ww| ops::conv2d_forward(&x, ww, &b, g), grads.weight.unwrap().data());
    e_in.max(e_w)
}

/// ReLU, 2x2 max pooling, global average pooling and channel scaling,
/// cycling with `case`.
pub fn pointwise_case(rng: &mut ChaCha8Rng, case: usize) -> f64 {
    let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), 4, 4];
    let x = away_from_zero(random_tensor(rng, &shape));
    match case % 4 {
        0 => {
            let y = ops::relu_forward(&x);
            let r = random_tensor(rng, y.shape());
            let g = ops::relu_backward(&y, &r);
            check(rng, &x, &r, ops::relu_forward, g.data())
        }
        1 => {
            let (y, arg) = ops::maxpool2x2_forward(&x);
            let r = random_tensor(rng, y.shape());
            let g = ops::maxpool2x2_backward(x.shape(), &arg, &r);
            check(rng, &x, &r, |xx| ops::maxpool2x2_forward(xx).0, g.data())
        }
        2 => {
            let y = ops::global_avg_pool_forward(&x);
            let r = random_tensor(rng, y.shape());
            let g = ops::global_avg_pool_backward(x.shape(), &r);
            check(rng, &x, &r, ops::global_avg_pool_forward, g.data())
        }
        _ => {
            let s: Vec<f64> = (0..shape[1]).map(|_| rng.gen_range(0.5..1.5)).collect();
            let y = ops::channel_scale_forward(&x, &s);
            let r = random_tensor(rng, y.shape());
            let (g, _) = ops::channel_scale_backward(&x, &s, &r);
            check(rng, &x, &r, |xx| ops::channel_scale_forward(xx, &s), g.data())
        }
    }
}

/// Dense layer input and weight gradients, then softmax.
pub fn dense_softmax_case(rng: &mut ChaCha8Rng) -> f64 {
    let (n, i, o) = (rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(2..=5));
    let x = random_tensor(rng, &[n, i]);
    let w = random_tensor(rng, &[o, i]);
    let b: Vec<f64> = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = ops::dense_forward(&x, &w, &b);
    let r = random_tensor(rng, y.shape());
    let g = ops::dense_backward(&x, &w, &r, true);
    let e_in = check(rng, &x, &r, |xx| ops::dense_forward(xx, &w, &b), g.input.data());
    let e_w = check(rng, &w, &r, |ww| ops::dense_forward(&x, ww, &b), g.weight.unwrap().data());
    let p = ops::softmax_forward(&y);
    let gs = ops::softmax_backward(&p, &r);
    let e_s = check(rng, &y, &r, ops::softmax_forward, gs.data());
    e_in.max(e_w).max(e_s)
}

/// Mean cross-entropy over softmax, every logit.
pub fn cross_entropy_case(rng: &mut ChaCha8Rng) -> f64 {
    let (n, k) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
    let z = random_tensor(rng, &[n, k]);
    let t: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let loss = |zz: &Tensor| ops::cross_entropy(&ops::softmax_forward(zz), &t).0;
    let (_, g) = ops::cross_entropy(&ops::softmax_forward(&z), &t);
    let mut worst: f64 = 0.0;
    for i in 0..z.len() {
        let num = stencil(|d| {
            let mut zs = z.clone();
            zs.data_mut()[i] += d;
            loss(&zs)
        })
        .expect("cross-entropy over softmax is smooth");
        worst = worst.max(rel_err(g.data()[i], num));
    }
    worst
}

/// One parameter entry and one probe scale of a whole model, through
/// `<r, probs>`.
fn model_case<M: Model>(rng: &mut ChaCha8Rng, model: &mut M, probes: &ProbeSet, classes: usize) -> f64 {
    let [c, h, w] = model.input_shape();
    let x = random_tensor(rng, &[2, c, h, w]);
    let r = random_tensor(rng, &[2, classes]);
    let fwd = model.forward(&x, Some(probes)).unwrap();
    let grads = model
        .backward(&fwd, &OutputGrad::Probabilities(r.clone()), BackwardOptions { param_grads: true })
        .unwrap();
    let objective = |m: &M, p: &ProbeSet| dot(&r, &m.forward(&x, Some(p)).unwrap().probs);

    let names: Vec<String> = model.params().iter().map(|(k, _)| k.clone()).collect();
    let name = &names[rng.gen_range(0..names.len())];
    let len = model.params().get(name).unwrap().weight.len();
    let analytic = grads.params.get(name).unwrap().weight.data();
    let e_param = smooth_error(
        rng,
        |rng| {
            let i = rng.gen_range(0..len);
            (i, analytic[i])
        },
        |i| {
            let base = model.params().get(name).unwrap().weight.data()[i];
            let num = stencil(|d| {
                model.params_mut().get_mut(name).unwrap().weight.data_mut()[i] = base + d;
                objective(model, probes)
            });
            model.params_mut().get_mut(name).unwrap().weight.data_mut()[i] = base;
            num
        },
    );

    let site = *probes.keys().nth(rng.gen_range(0..probes.len())).unwrap();
    let e_probe = smooth_error(
        rng,
        |rng| {
            let k = rng.gen_range(0..probes[&site].len());
            (k, grads.probes[&site][k])
        },
        |k| {
            stencil(|d| {
                let mut ps = probes.clone();
                ps.get_mut(&site).unwrap()[k] += d;
                objective(model, &ps)
            })
        },
    );
    e_param.max(e_probe)
}

/// Whole-chain parameter and probe gradients.
pub fn chain_case(rng: &mut ChaCha8Rng) -> f64 {
    let mut net = small_chain(rng, 3);
    let mut probes = ProbeSet::new();
    for s in net.arch().stages() {
        probes.insert(s.layer, (0..s.conv.out_channels).map(|_| rng.gen_range(0.5..1.5)).collect());
    }
    model_case(rng, &mut net, &probes, 3)
}

/// Branching-tree parameter and probe gradients, where parent activations
/// collect gradient from both children. Also reports whether the tree
/// branched.
pub fn tree_case(rng: &mut ChaCha8Rng, trunk_full_width: bool) -> (f64, bool) {
    let layout = random_tree(rng, 6, trunk_full_width);
    let mut tree = hsdnet::transfer::random_init(&layout, rng.gen()).unwrap();
    let mut probes = ProbeSet::new();
    for n in tree.nodes().filter(|n| n.parent.is_some()) {
        probes.insert(n.id, (0..n.channels.len()).map(|_| rng.gen_range(0.5..1.5)).collect());
    }
    let branching = tree.leaves().len() > 1;
    (model_case(rng, &mut tree, &probes, 6), branching)
}

pub fn random_dataset(rng: &mut ChaCha8Rng, net: &ChainNet, n: usize) -> Dataset {
    let [c, h, w] = net.input_shape();
    let classes = net.arch().num_classes();
    let images = random_tensor(rng, &[n, c, h, w]);
    let labels = (0..n).map(|i| i % classes).collect();
    Dataset::new(images, labels, net.arch().class_labels().to_vec(), Split::Train).unwrap()
}

/// Sum over class-`c` samples of |dp_c/dw_k| by central differences on the
/// probe scale, one sample at a time.
pub fn iscv_oracle(net: &ChainNet, data: &Dataset, layer: usize) -> Vec<Vec<f64>> {
    const EPS: f64 = 1e-5;
    let k = net.arch().width(layer);
    let mut table = vec![vec![0.0; k]; net.arch().num_classes()];
    for i in 0..data.len() {
        let (x, y) = data.gather(&[i]);
        let y = y[0];
        for (ch, entry) in table[y].iter_mut().enumerate() {
            let p = |delta: f64| {
                let mut probes = ProbeSet::new();
                let mut w = vec![1.0; k];
                w[ch] += delta;
                probes.insert(layer, w);
                net.forward(&x, Some(&probes)).unwrap().probs.data()[y]
            };
            *entry += ((p(EPS) - p(-EPS)) / (2.0 * EPS)).abs();
        }
    }
    table
}

/// Raw Iscv entries of one random chain layer against [`iscv_oracle`].
/// Returns the worst relative error and the number of entries compared.
pub fn iscv_case(rng: &mut ChaCha8Rng) -> (f64, usize) {
    let net = small_chain(rng, 3);
    let data = random_dataset(rng, &net, 9);
    let layer = rng.gen_range(1..=net.arch().depth());
    let raw = impact_scores(&net, &data, layer, 4).unwrap();
    let oracle = iscv_oracle(&net, &data, layer);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (c, row) in oracle.iter().enumerate() {
        for (k, &want) in row.iter().enumerate() {
            let got = raw.row(c)[k];
            worst = worst.max((got - want).abs() / want.abs().max(got.abs()).max(1e-8));
            count += 1;
        }
    }
    (worst, count)
}
