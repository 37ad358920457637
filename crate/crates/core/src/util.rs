//! Small numeric helpers shared across modules.

/// In-place stable softmax with max-shift.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Sample mean and the half-width of a 95% normal confidence interval,
/// `1.96 · s / √n` with the unbiased standard deviation `s`.
pub(crate) fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

/// Dot product.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let mut a = vec![1.0, 2.0, 3.0];
        let mut b = vec![1001.0, 1002.0, 1003.0];
        softmax_in_place(&mut a);
        softmax_in_place(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_ci95_matches_formula() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let (mean, ci) = mean_ci95(&xs);
        assert!((mean - 2.5).abs() < 1e-15);
        // s = sqrt(5/3), ci = 1.96 * s / 2.
        let s = (5.0f64 / 3.0).sqrt();
        assert!((ci - 1.96 * s / 2.0).abs() < 1e-12);
    }
}
