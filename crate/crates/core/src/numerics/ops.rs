use crate::error::{Error, Result};

/// Negative-side slope used when a config does not override it.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Subgradient of [`relu`]; zero at the kink.
#[inline]
pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Derivative of [`leaky_relu`]; the kink takes the positive branch.
#[inline]
pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

/// Max-subtracted softmax over a whole vector.
pub fn softmax_row(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("softmax input contains {bad}")));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    Ok(out)
}

/// Softmax restricted to entries where `allowed` is true.
///
/// Disallowed entries take no part in the max or the normalizer and come
/// back as exactly `0.0`.
pub fn masked_softmax_row(v: &[f64], allowed: &[bool], out: &mut [f64]) -> Result<()> {
    debug_assert_eq!(v.len(), allowed.len());
    debug_assert_eq!(v.len(), out.len());
    let mut max = f64::NEG_INFINITY;
    for (&x, &ok) in v.iter().zip(allowed) {
        if ok && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::Domain("masked softmax with no admissible entry".into()));
    }
    let mut total = 0.0;
    for ((o, &x), &ok) in out.iter_mut().zip(v).zip(allowed) {
        *o = if ok { (x - max).exp() } else { 0.0 };
        total += *o;
    }
    for (o, &ok) in out.iter_mut().zip(allowed) {
        if ok {
            *o /= total;
        }
    }
    Ok(())
}

/// Central-difference gradient `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe);
        probe[i] = orig - eps;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective is not finite around coordinate {i} ({up}, {down})")));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Largest entry-wise relative error `|a−n| / max(|a|, |n|, floor)`.
///
/// `floor` keeps entries that are both essentially zero from dominating.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        assert_eq!(softmax_row(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax_row(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_one_two_three_matches_high_precision_reference() {
        // Evaluated at 40 significant digits and rounded to f64.
        let want = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        let got = softmax_row(&[1.0, 2.0, 3.0]).unwrap();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= 2e-16, "{g} vs {w}");
        }
    }

    #[test]
    fn softmax_rejects_empty_and_nan() {
        assert!(matches!(softmax_row(&[]), Err(Error::Domain(_))));
        assert!(matches!(softmax_row(&[f64::NAN]), Err(Error::Domain(_))));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries_exactly() {
        let mut out = [9.0; 4];
        masked_softmax_row(&[3.0, 100.0, -1.0, 2.0], &[true, false, true, true], &mut out).unwrap();
        assert_eq!(out[1], 0.0);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(masked_softmax_row(&[1.0], &[false], &mut [0.0]).is_err());
    }

    #[test]
    fn activations_follow_definitions() {
        assert_eq!(leaky_relu(5.0, 0.2), 5.0);
        assert_eq!(leaky_relu(-1.0, 0.2), -0.2);
        assert_eq!(relu(-3.0), 0.0);
        assert_eq!(relu(2.5), 2.5);
        assert_eq!(relu_grad(0.0), 0.0);
        assert_eq!(leaky_relu_grad(-0.5, 0.2), 0.2);
    }

    #[test]
    fn finite_difference_of_square_and_constant() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn finite_difference_reports_non_finite_objective() {
        assert!(finite_diff_grad(|x| 1.0 / x[0], &[0.0], 1e-5).is_ok());
        let err = finite_diff_grad(|x| (x[0] - 1e-5).ln(), &[0.0], 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(finite_diff_grad(|x| x[0], &[0.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_ignores_shifts(seed in any::<u64>(), len in 1usize..40, shift in -500.0f64..500.0) {
            let mut rng = SeededRng::new(seed);
            let v: Vec<f64> = (0..len).map(|_| rng.uniform(-30.0, 30.0)).collect();
            let p = softmax_row(&v).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let q = softmax_row(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
