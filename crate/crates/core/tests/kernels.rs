mod common;

use common::{float_oracle, naive_binary_dots, rand_tensor};
use mobinet::conv::{binary_conv, binary_conv_packed, binary_conv_small, BinaryConvLayer, ConvGeometry, KDependency};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn case() -> impl Strategy<Value = (usize, usize, u32, usize, usize, usize, usize, u64)> {
    (
        1usize..=2,
        0u32..=4,
        0u32..=4,
        prop_oneof![Just(1usize), Just(3)],
        0usize..=1,
        1usize..=6,
        1usize..=6,
        any::<u64>(),
    )
        .prop_filter_map(
            "K must not exceed the channel exponent",
            |(n, ce, k, kernel, pad, h, w, seed)| {
                let in_c = 1usize << ce;
                if k > ce {
                    return None;
                }
                if h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return None;
                }
                Some((n, in_c, k, kernel, pad, h, w, seed))
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn all_paths_match_oracles((n, in_c, k, kernel, pad, h, w, seed) in case(), out_mult in 1usize..=2) {
        let groups = KDependency::new(k, in_c).unwrap().groups();
        let out_c = in_c * out_mult;
        let geom = ConvGeometry::new(in_c, out_c, kernel, 1, pad, groups).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[n, in_c, h, w], -1.0, 1.0);
        let latent = rand_tensor(&mut rng, &geom.weight_shape(), -1.0, 1.0);
        let layer = BinaryConvLayer::new(geom, latent.clone()).unwrap();
        let dots = naive_binary_dots(&x, &geom, &latent);
        let oracle = float_oracle(&x, &layer);
        let p = oracle.len() / (n * out_c);
        for out in [binary_conv(&x, &layer).unwrap(), binary_conv_packed(&x, &layer).unwrap(), binary_conv_small(&x, &layer).unwrap()] {
            prop_assert_eq!(out.shape(), oracle.shape());
            for (i, (&a, &b)) in out.data().iter().zip(oracle.data()).enumerate() {
                let ch = (i / p) % out_c;
                let alpha = layer.scales()[ch];
                prop_assert!((a - b).abs() <= 1e-5 * b.abs().max(alpha));
                prop_assert_eq!((a / alpha).round() as i64, dots[i]);
            }
        }
    }
}

#[test]
fn long_rows_cross_word_boundaries() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // Twelve filters and an odd pixel count exercise both the blocked and
    // the leftover paths.
    for (in_c, kernel) in [(8, 3), (64, 1), (65, 1), (128, 1), (30, 3), (96, 3)] {
        let out_c = 12;
        let geom = ConvGeometry::new(in_c, out_c, kernel, 1, kernel / 2, 1).unwrap();
        let x = rand_tensor(&mut rng, &[2, in_c, 5, 3], -1.0, 1.0);
        let latent = rand_tensor(&mut rng, &geom.weight_shape(), -1.0, 1.0);
        let layer = BinaryConvLayer::new(geom, latent.clone()).unwrap();
        let dots = naive_binary_dots(&x, &geom, &latent);
        let p = 5 * 3;
        for out in [
            binary_conv(&x, &layer).unwrap(),
            binary_conv_packed(&x, &layer).unwrap(),
        ] {
            for (i, &a) in out.data().iter().enumerate() {
                let alpha = layer.scales()[(i / p) % out_c];
                assert_eq!((a / alpha).round() as i64, dots[i], "in_c {in_c} kernel {kernel}");
            }
        }
    }
}
