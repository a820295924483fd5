//! Oracles shared by the integration tests.
#![allow(dead_code)]

use mobinet::binarize::sign;
use mobinet::conv::{
    binarized_padded_input, binary_conv_backward, float_conv, float_conv_backward, BinaryConvLayer, ConvGeometry,
};
use mobinet::network::{Network, NetworkConfig};
use mobinet::param::{Parameterized, SlotMut};
use mobinet::tensor::FloatTensor;
use mobinet::train::softmax_cross_entropy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> FloatTensor {
    let n = shape.iter().product();
    FloatTensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Integer ±1 dot products by direct loops, −1 outside the image.
pub fn naive_binary_dots(input: &FloatTensor, geom: &ConvGeometry, latent: &FloatTensor) -> Vec<i64> {
    let [n, c, h, w] = input.dims4().unwrap();
    let (k, p) = (geom.kernel as isize, geom.padding as isize);
    let oh = geom.out_extent(h).unwrap();
    let ow = geom.out_extent(w).unwrap();
    let (cpg, og) = (geom.in_per_group(), geom.out_per_group());
    let x = input.data();
    let wt = latent.data();
    let mut out = Vec::with_capacity(n * geom.out_c * oh * ow);
    for b in 0..n {
        for o in 0..geom.out_c {
            let g = o / og;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0i64;
                    for ci in 0..cpg {
                        let ch = g * cpg + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * geom.stride) as isize + ky - p;
                                let ix = (ox * geom.stride) as isize + kx - p;
                                let xs = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    -1
                                } else if x[((b * c + ch) * h + iy as usize) * w + ix as usize] >= 0.0 {
                                    1
                                } else {
                                    -1
                                };
                                let widx = ((o * cpg + ci) * k as usize + ky as usize) * k as usize + kx as usize;
                                let ws = if wt[widx] >= 0.0 { 1 } else { -1 };
                                acc += xs * ws;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// The float oracle: dense convolution of the sign-binarized, −1-padded
/// input with `α·sign(W)`.
pub fn float_oracle(input: &FloatTensor, layer: &BinaryConvLayer) -> FloatTensor {
    let geom = *layer.geometry();
    let padded = binarized_padded_input(input, geom.padding).unwrap();
    let unpadded = ConvGeometry { padding: 0, ..geom };
    float_conv(&padded, &layer.approx_weights(), &unpadded).unwrap()
}

/// Relative error with an absolute floor of `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Values and gradients of every float slot named in `names` (all when empty).
pub fn float_slots(model: &mut dyn Parameterized) -> Vec<(String, Vec<f32>, Vec<f32>)> {
    let mut out = Vec::new();
    model.visit_mut("", &mut |name, slot| {
        if let SlotMut::Float { value, grad, kind, .. } = slot {
            if kind.is_trainable() {
                out.push((name.to_string(), value.data().to_vec(), grad.to_vec()));
            }
        }
    });
    out
}

/// Adds `delta` to element `idx` of the float slot `target`.
pub fn nudge(model: &mut dyn Parameterized, target: &str, idx: usize, delta: f32) {
    model.visit_mut("", &mut |name, slot| {
        if name == target {
            if let SlotMut::Float { value, .. } = slot {
                value.data_mut()[idx] += delta;
            }
        }
    });
}

/// `Σ r·y` accumulated in f64.
pub fn probe(y: &FloatTensor, r: &[f32]) -> f64 {
    y.data().iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Independent evaluation of the latent-weight gradient of one filter:
/// `sign(w_j)·(1/p)·Σ_k g_k·sign(w_k) + g_j·α·1{|w_j| ≤ 1}` in f64.
pub fn scripted_latent_grad(w: &[f32], g: &[f32]) -> Vec<f64> {
    let p = w.len() as f64;
    let alpha = w.iter().map(|v| v.abs() as f64).sum::<f64>() / p;
    let s = |v: f32| if v >= 0.0 { 1.0 } else { -1.0 };
    let proj: f64 = w.iter().zip(g).map(|(&wk, &gk)| gk as f64 * s(wk)).sum();
    w.iter()
        .zip(g)
        .map(|(&wj, &gj)| {
            let ste = if wj.abs() <= 1.0 { 1.0 } else { 0.0 };
            s(wj) * proj / p + gj as f64 * alpha * ste
        })
        .collect()
}

pub fn signs(v: &[f32]) -> Vec<f32> {
    v.iter().map(|&x| sign(x)).collect()
}

/// Sets element `idx` of slot `target` to `v + eps` and returns the
/// perturbation actually stored.
pub fn set_offset(model: &mut dyn Parameterized, target: &str, idx: usize, base: f32, eps: f32) -> f32 {
    let mut actual = 0.0;
    model.visit_mut("", &mut |name, slot| {
        if name == target {
            if let SlotMut::Float { value, .. } = slot {
                let v = base + eps;
                value.data_mut()[idx] = v;
                actual = v - base;
            }
        }
    });
    actual
}

/// Relative tolerance for parameter gradients.
pub const PARAM_TOL: f64 = 1e-4;

/// Input gradients are checked more loosely: batch norm is nonlinear in
/// its input and the step must stay above f32 noise.
pub const INPUT_TOL: f64 = 1e-3;

/// Error floor for one tensor: its largest gradient magnitude.
pub fn slot_scale(grads: &[f32]) -> f64 {
    grads.iter().fold(1e-6f64, |m, &g| m.max(g.abs() as f64))
}

/// Largest relative errors found by [`check_layer`].
#[derive(Debug, Default)]
pub struct FdWorst {
    pub params: f64,
    pub inputs: f64,
    /// Where the worst parameter error occurred.
    pub at: String,
}

/// Central differences of `Σ r·f(x)` against every trainable float
/// parameter element and every input element.
pub fn check_layer<M: Parameterized>(
    layer: &mut M,
    x: &FloatTensor,
    fwd: impl Fn(&mut M, &FloatTensor) -> FloatTensor,
    bwd: impl Fn(&mut M, &FloatTensor) -> FloatTensor,
    eps: f32,
) -> FdWorst {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let y = fwd(layer, x);
    let r: Vec<f32> = (0..y.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    layer.zero_grad();
    let gx = bwd(layer, &FloatTensor::from_vec(y.shape().to_vec(), r.clone()));
    let mut worst = FdWorst::default();
    for (name, values, grads) in float_slots(layer) {
        let floor = slot_scale(&grads);
        for (i, (&v, &g)) in values.iter().zip(&grads).enumerate() {
            let dp = set_offset(layer, &name, i, v, eps);
            let lp = probe(&fwd(layer, x), &r);
            let dm = set_offset(layer, &name, i, v, -eps);
            let lm = probe(&fwd(layer, x), &r);
            set_offset(layer, &name, i, v, 0.0);
            let fd = (lp - lm) / (dp - dm) as f64;
            let e = rel_err(g as f64, fd, floor);
            if e > worst.params {
                worst.params = e;
                worst.at = format!("{name}[{i}]: analytic {g} fd {fd}");
            }
        }
    }
    let floor = slot_scale(gx.data());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let v = x.data()[i];
        xp.data_mut()[i] = v + eps;
        let dp = xp.data()[i] - v;
        let lp = probe(&fwd(layer, &xp), &r);
        xp.data_mut()[i] = v - eps;
        let dm = xp.data()[i] - v;
        let lm = probe(&fwd(layer, &xp), &r);
        xp.data_mut()[i] = v;
        let fd = (lp - lm) / (dp - dm) as f64;
        worst.inputs = worst.inputs.max(rel_err(gx.data()[i] as f64, fd, floor));
    }
    worst
}

/// Central differences of the cross-entropy loss of a small desk network
/// against every third element of the classifier weights and bias.
pub fn classifier_fd() -> FdWorst {
    let cfg = NetworkConfig {
        schedule: vec![(64, false), (128, true)],
        resolution: 16,
        ..NetworkConfig::desk()
    };
    let mut net = Network::new(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[4, 1, 16, 16], -1.0, 1.0);
    let labels = vec![0, 3, 7, 9];
    let loss = |net: &mut Network| {
        let logits = net.forward_train(&x).unwrap();
        softmax_cross_entropy(&logits, &labels).unwrap()
    };
    net.zero_grad();
    let (_, g) = loss(&mut net);
    net.backward(&g).unwrap();
    let slots: Vec<_> = float_slots(&mut net)
        .into_iter()
        .filter(|(n, _, _)| n.starts_with("classifier"))
        .collect();
    assert_eq!(slots.len(), 2);
    let mut worst = FdWorst::default();
    for (name, values, grads) in slots {
        let floor = slot_scale(&grads);
        for (i, (&v, &g)) in values.iter().zip(&grads).enumerate().step_by(3) {
            let eps = 1e-2;
            let dp = set_offset(&mut net, &name, i, v, eps);
            let lp = loss(&mut net).0 as f64;
            let dm = set_offset(&mut net, &name, i, v, -eps);
            let lm = loss(&mut net).0 as f64;
            set_offset(&mut net, &name, i, v, 0.0);
            let fd = (lp - lm) / (dp - dm) as f64;
            let e = rel_err(g as f64, fd, floor);
            if e > worst.params {
                worst.params = e;
                worst.at = format!("{name}[{i}]: analytic {g} fd {fd}");
            }
        }
    }
    worst
}

/// Random binary layers with grouped and dense geometries. Returns the
/// largest error of the cached `∂L/∂ŵ` against the dense oracle (relative
/// to max(|b|, 1)) and of the latent gradient against
/// [`scripted_latent_grad`] (relative to the filter's Σ|∂L/∂ŵ|).
pub fn latent_gradient_cases(cases: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut approx_err, mut latent_err) = (0.0f64, 0.0f64);
    for case in 0..cases {
        let in_c = [2, 4, 8][case % 3];
        let kernel = [1, 3][case % 2];
        let groups = [1, in_c / 2, in_c][case % 3];
        let geom = ConvGeometry::new(in_c, in_c, kernel, 1, kernel / 2, groups).unwrap();
        let x = rand_tensor(&mut rng, &[2, in_c, 4, 4], -1.5, 1.5);
        let latent = rand_tensor(&mut rng, &geom.weight_shape(), -1.4, 1.4);
        let layer = BinaryConvLayer::new(geom, latent.clone()).unwrap();
        let g = rand_tensor(&mut rng, &[2, in_c, 4, 4], -1.0, 1.0);
        let grads = binary_conv_backward(&x, &layer, &g).unwrap();

        let padded = binarized_padded_input(&x, geom.padding).unwrap();
        let unpadded = ConvGeometry { padding: 0, ..geom };
        let (_, gw) = float_conv_backward(&padded, &layer.approx_weights(), &g, &unpadded).unwrap();
        for (&a, &b) in grads.grad_approx.data().iter().zip(gw.data()) {
            approx_err = approx_err.max(((a - b).abs() / b.abs().max(1.0)) as f64);
        }

        let flen = geom.filter_len();
        for ((w, ga), got) in latent
            .data()
            .chunks(flen)
            .zip(grads.grad_approx.data().chunks(flen))
            .zip(grads.grad_latent.data().chunks(flen))
        {
            let want = scripted_latent_grad(w, ga);
            let scale = ga.iter().map(|v| v.abs() as f64).sum::<f64>().max(1e-3);
            for (&a, &b) in got.iter().zip(&want) {
                latent_err = latent_err.max((a as f64 - b).abs() / scale);
            }
        }
    }
    (approx_err, latent_err)
}
