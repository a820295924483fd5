mod common;

use common::{check_layer, classifier_fd, latent_gradient_cases, rand_tensor, INPUT_TOL, PARAM_TOL};
use mobinet::conv::ConvGeometry;
use mobinet::layers::{Activation, ActivationKind, BatchNorm, FloatConv, Linear};
use mobinet::param::Parameterized;
use mobinet::tensor::FloatTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_layer<M: Parameterized>(
    layer: &mut M,
    x: &FloatTensor,
    fwd: impl Fn(&mut M, &FloatTensor) -> FloatTensor,
    bwd: impl Fn(&mut M, &FloatTensor) -> FloatTensor,
    eps: f32,
    label: &str,
) {
    let worst = check_layer(layer, x, fwd, bwd, eps);
    assert!(worst.params <= PARAM_TOL, "{label}: {worst:?}");
    assert!(worst.inputs <= INPUT_TOL, "{label}: {worst:?}");
}

#[test]
fn stem_conv_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let geom = ConvGeometry::new(2, 4, 3, 2, 1, 1).unwrap();
    let mut conv = FloatConv::new(geom, &mut rng);
    let x = rand_tensor(&mut rng, &[2, 2, 6, 6], -1.0, 1.0);
    assert_layer(
        &mut conv,
        &x,
        |l, x| l.forward_train(x).unwrap(),
        |l, g| l.backward(g).unwrap(),
        1e-2,
        "stem",
    );
}

#[test]
fn batch_norm_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bn = BatchNorm::new(3);
    bn.gamma_mut().iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
    bn.beta_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    let x = rand_tensor(&mut rng, &[4, 3, 3, 3], -2.0, 2.0);
    assert_layer(
        &mut bn,
        &x,
        |l, x| l.forward_train(x).unwrap(),
        |l, g| l.backward(g).unwrap(),
        1e-2,
        "bn",
    );
}

#[test]
fn prelu_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut act = Activation::new(ActivationKind::PRelu, 3);
    // Keep inputs away from the kink at zero.
    let x =
        rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0)
            .map(|v| if v.abs() < 0.05 { v + 0.1f32.copysign(v) } else { v });
    assert_layer(
        &mut act,
        &x,
        |l, x| l.forward_train(x).unwrap(),
        |l, g| l.backward(g).unwrap(),
        1e-2,
        "prelu",
    );
}

#[test]
fn linear_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut fc = Linear::new(6, 5, &mut rng);
    let x = rand_tensor(&mut rng, &[3, 6], -1.0, 1.0);
    assert_layer(
        &mut fc,
        &x,
        |l, x| l.forward_train(x).unwrap(),
        |l, g| l.backward(g).unwrap(),
        1e-2,
        "linear",
    );
}

#[test]
fn classifier_gradient_through_network() {
    let worst = classifier_fd();
    assert!(worst.params <= 1e-3, "{worst:?}");
}

#[test]
fn latent_gradient_matches_scripted_formula() {
    let (approx, latent) = latent_gradient_cases(200, 6);
    assert!(approx <= 1e-5, "cached gradient off by {approx}");
    assert!(latent <= 1e-6, "latent gradient off by {latent}");
}
