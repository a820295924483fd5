//! Binarization math: sign, per-filter scaling factors and the latent
//! weight gradient through `ŵ = α · sign(w)`.

use crate::error::{Error, Result};

/// Straight-through window: the surrogate derivative of `sign` is 1 on
/// `|x| <= threshold` and 0 outside. Used for both activations and weights.
pub const STE_THRESHOLD: f32 = 1.0;

/// Per-filter scaling factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterScale {
    pub alpha: f32,
    /// Elements per filter, `k * k * c`.
    pub p: usize,
}

/// `sign` with the tie at zero going to +1.
#[inline(always)]
pub fn sign(a: f32) -> f32 {
    if a >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Checked [`sign`]: NaN is rejected.
pub fn sign_binarize(a: f32) -> Result<f32> {
    if a.is_nan() {
        return Err(Error::NonFinite { index: 0, value: a });
    }
    Ok(sign(a))
}

/// Mean absolute value, the minimizer of `‖w − α·sign(w)‖²` over α.
pub fn optimal_scale(w: &[f32]) -> Result<f32> {
    if w.is_empty() {
        return Err(Error::dim("empty filter"));
    }
    let alpha = mean_abs(w);
    if alpha <= 0.0 {
        return Err(Error::DegenerateFilter { filter: 0 });
    }
    Ok(alpha)
}

#[inline]
pub(crate) fn mean_abs(w: &[f32]) -> f32 {
    (w.iter().map(|&v| v.abs() as f64).sum::<f64>() / w.len() as f64) as f32
}

/// Optimal binary approximation of one filter: `(sign(w), mean|w|)`.
pub fn binarize_filter(w: &[f32]) -> Result<(Vec<f32>, FilterScale)> {
    let alpha = optimal_scale(w)?;
    let signs = w.iter().map(|&v| sign(v)).collect();
    Ok((signs, FilterScale { alpha, p: w.len() }))
}

#[inline(always)]
pub fn ste_grad(x: f32, threshold: f32) -> f32 {
    if x.abs() <= threshold {
        1.0
    } else {
        0.0
    }
}

/// Gradient of the loss w.r.t. latent weights of one filter given the
/// gradient w.r.t. its binary approximation `ŵ = α · sign(w)`:
///
/// `∂L/∂w_j = (1/p) sign(w_j) Σ_k ∂L/∂ŵ_k · sign(w_k) + ∂L/∂ŵ_j · α · ste(w_j)`
pub fn weight_gradient(w: &[f32], grad_approx: &[f32]) -> Result<Vec<f32>> {
    if w.len() != grad_approx.len() {
        return Err(Error::dim(format!(
            "filter has {} weights but gradient has {}",
            w.len(),
            grad_approx.len()
        )));
    }
    let mut out = vec![0.0; w.len()];
    weight_gradient_into(w, grad_approx, STE_THRESHOLD, &mut out);
    Ok(out)
}

/// Slice kernel of [`weight_gradient`]; all three slices share a length.
pub fn weight_gradient_into(w: &[f32], grad_approx: &[f32], threshold: f32, out: &mut [f32]) {
    let p = w.len() as f32;
    let alpha = mean_abs(w);
    let projected: f32 = grad_approx.iter().zip(w).map(|(&g, &wk)| g * sign(wk)).sum();
    for ((o, &wj), &gj) in out.iter_mut().zip(w).zip(grad_approx) {
        *o = sign(wj) * projected / p + gj * alpha * ste_grad(wj, threshold);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Squared reconstruction error of `alpha * signs` against `w`, in f64.
    fn recon_error(w: &[f32], signs: &[f64], alpha: f64) -> f64 {
        w.iter().zip(signs).map(|(&x, &s)| (x as f64 - alpha * s).powi(2)).sum()
    }

    /// Exhaustive search over every sign pattern and an α grid, plus the
    /// per-pattern continuous optimum clipped to α > 0.
    fn exhaustive_best(w: &[f32], grid: &[f64]) -> f64 {
        let p = w.len();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << p) {
            let signs: Vec<f64> = (0..p).map(|i| if mask >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
            for &a in grid {
                best = best.min(recon_error(w, &signs, a));
            }
            let dot: f64 = w.iter().zip(&signs).map(|(&x, s)| x as f64 * s).sum();
            let a = (dot / p as f64).max(1e-12);
            best = best.min(recon_error(w, &signs, a));
        }
        best
    }

    #[test]
    fn sign_examples() {
        assert_eq!(sign_binarize(0.0).unwrap(), 1.0);
        assert_eq!(sign_binarize(-0.3).unwrap(), -1.0);
        assert_eq!(sign_binarize(7.2).unwrap(), 1.0);
        assert!(sign_binarize(f32::NAN).is_err());
        for v in [1.0, -1.0] {
            assert_eq!(sign(sign(v)), sign(v));
        }
    }

    #[test]
    fn scale_examples() {
        let w = [0.5, -1.5, 1.0, -1.0];
        assert_eq!(optimal_scale(&w).unwrap(), 1.0);
        // grid oracle over α ∈ (0, 3] with the fixed sign pattern.
        let signs: Vec<f64> = w.iter().map(|&v| sign(v) as f64).collect();
        let (best_a, _) = (1..=3000)
            .map(|i| i as f64 * 1e-3)
            .map(|a| (a, recon_error(&w, &signs, a)))
            .fold((0.0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        assert!((best_a - 1.0).abs() < 1e-9);

        assert_eq!(optimal_scale(&[0.3; 7]).unwrap(), 0.3);
        assert_eq!(optimal_scale(&[1.0, -1.0]).unwrap(), 1.0);
        assert!(matches!(
            optimal_scale(&[0.0, 0.0]),
            Err(Error::DegenerateFilter { .. })
        ));
    }

    #[test]
    fn binarize_examples() {
        let (b, s) = binarize_filter(&[0.5, -1.5, 1.0, -1.0]).unwrap();
        assert_eq!(b, vec![1.0, -1.0, 1.0, -1.0]);
        assert_eq!(s.alpha, 1.0);
        assert_eq!(s.p, 4);

        let (b, s) = binarize_filter(&[2.0]).unwrap();
        assert_eq!((b, s.alpha), (vec![1.0], 2.0));
    }

    #[test]
    fn closed_form_is_optimal_against_exhaustive_search() {
        let grid: Vec<f64> = (1..=400).map(|i| i as f64 * 0.01).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let p = rng.gen_range(1..=12);
            let w: Vec<f32> = (0..p).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            let (b, s) = binarize_filter(&w).unwrap();
            let b64: Vec<f64> = b.iter().map(|&x| x as f64).collect();
            let closed = recon_error(&w, &b64, s.alpha as f64);
            let best = exhaustive_best(&w, &grid);
            assert!(closed - best <= 1e-9, "closed {closed} vs exhaustive {best} for {w:?}");
        }
    }

    #[test]
    fn ste_examples() {
        assert_eq!(ste_grad(0.5, 1.0), 1.0);
        assert_eq!(ste_grad(1.5, 1.0), 0.0);
        assert_eq!(ste_grad(1.0, 1.0), 1.0);
        assert_eq!(ste_grad(-1.0, 1.0), 1.0);
    }

    #[test]
    fn weight_gradient_hand_example() {
        let g = weight_gradient(&[0.5, -0.5], &[1.0, 0.0]).unwrap();
        assert_eq!(g, vec![1.0, -0.5]);
        assert!(weight_gradient(&[0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn weight_gradient_zero_upstream() {
        let g = weight_gradient(&[0.3, -0.7, 1.2], &[0.0; 3]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    /// Surrogate forward whose exact derivative at `w0` is the latent-weight
    /// rule: the scale follows `mean|w|` through the frozen sign pattern and
    /// the direct path is the straight-through linearization.
    fn surrogate_approx(w: &[f64], w0: &[f32]) -> Vec<f64> {
        let p = w.len() as f64;
        let alpha: f64 = w.iter().map(|v| v.abs()).sum::<f64>() / p;
        let alpha0: f64 = w0.iter().map(|v| (*v as f64).abs()).sum::<f64>() / p;
        w.iter()
            .zip(w0)
            .map(|(&x, &x0)| {
                let s = if x0 >= 0.0 { 1.0 } else { -1.0 };
                let mask = if (x0 as f64).abs() <= 1.0 { 1.0 } else { 0.0 };
                alpha * s + alpha0 * mask * (x - x0 as f64)
            })
            .collect()
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = rng.gen_range(1..=16);
            let w: Vec<f32> = (0..p)
                .map(|_| {
                    let mag = if rng.gen_bool(0.5) {
                        rng.gen_range(0.05f32..0.95)
                    } else {
                        rng.gen_range(1.05f32..1.5)
                    };
                    if rng.gen_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect();
            let c: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d: Vec<f64> = (0..p).map(|_| rng.gen_range(0.1..2.0)).collect();
            let loss = |what: &[f64]| -> f64 {
                what.iter()
                    .zip(&c)
                    .zip(&d)
                    .map(|((x, c), d)| c * x + 0.5 * d * x * x)
                    .sum()
            };
            let what0: Vec<f32> = surrogate_approx(&w.iter().map(|&x| x as f64).collect::<Vec<_>>(), &w)
                .iter()
                .map(|&x| x as f32)
                .collect();
            let upstream: Vec<f32> = what0
                .iter()
                .zip(&c)
                .zip(&d)
                .map(|((&x, c), d)| (c + d * x as f64) as f32)
                .collect();
            let analytic = weight_gradient(&w, &upstream).unwrap();

            let h = 1e-4;
            for j in 0..p {
                let mut plus: Vec<f64> = w.iter().map(|&x| x as f64).collect();
                let mut minus = plus.clone();
                plus[j] += h;
                minus[j] -= h;
                let fd = (loss(&surrogate_approx(&plus, &w)) - loss(&surrogate_approx(&minus, &w))) / (2.0 * h);
                let a = analytic[j] as f64;
                let scale = fd.abs().max(a.abs()).max(1e-3);
                assert!((fd - a).abs() / scale < 1e-4, "j={j} fd={fd} analytic={a}");
            }
        }
    }

    proptest! {
        #[test]
        fn scale_is_homogeneous(
            w in prop::collection::vec(-2.0f32..2.0, 1..20),
            c in 0.1f32..10.0,
        ) {
            prop_assume!(w.iter().any(|&v| v != 0.0));
            let a = optimal_scale(&w).unwrap();
            let scaled: Vec<f32> = w.iter().map(|&v| v * c).collect();
            let ac = optimal_scale(&scaled).unwrap();
            prop_assert!((ac - c * a).abs() <= 1e-5 * (c * a).max(1.0));
            let neg: Vec<f32> = w.iter().map(|&v| -v * c).collect();
            prop_assert!((optimal_scale(&neg).unwrap() - ac).abs() <= 1e-6 * ac.max(1.0));
            for (&x, &y) in w.iter().zip(&scaled) {
                prop_assert_eq!(sign(x), sign(y));
            }
        }

        #[test]
        fn weight_gradient_is_linear(
            (w, g1, g2) in (1usize..16).prop_flat_map(|p| (
                prop::collection::vec(-1.5f32..1.5, p),
                prop::collection::vec(-1.0f32..1.0, p),
                prop::collection::vec(-1.0f32..1.0, p),
            )),
            a in -2.0f32..2.0,
        ) {
            let sum: Vec<f32> = g1.iter().zip(&g2).map(|(x, y)| a * x + y).collect();
            let lhs = weight_gradient(&w, &sum).unwrap();
            let r1 = weight_gradient(&w, &g1).unwrap();
            let r2 = weight_gradient(&w, &g2).unwrap();
            for i in 0..w.len() {
                let rhs = a * r1[i] + r2[i];
                prop_assert!((lhs[i] - rhs).abs() <= 1e-4 * (1.0 + rhs.abs()));
            }
        }
    }
}
