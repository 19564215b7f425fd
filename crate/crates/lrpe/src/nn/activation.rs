//! Pointwise nonlinearity phi(x) = 1/2 log(1 + x^2).
//!
//! Its derivative x / (1 + x^2) is bounded by 1/2 (attained at x = +-1),
//! which is what keeps the per-layer Lipschitz bounds of the residual
//! branches finite.

#[inline]
pub fn activation(x: f64) -> f64 {
    0.5 * (1.0 + x * x).ln()
}

#[inline]
pub fn activation_deriv(x: f64) -> f64 {
    x / (1.0 + x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_point() {
        assert_eq!(activation(0.0), 0.0);
        assert_eq!(activation_deriv(0.0), 0.0);
    }

    #[test]
    fn deriv_at_two() {
        // x / (1 + x^2) at x = 2 is 2/5.
        assert!((activation_deriv(2.0) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn deriv_bound_half_attained_at_one() {
        let mut max = 0.0f64;
        let mut argmax = 0.0f64;
        let mut x = -100.0;
        while x <= 100.0 {
            let d = activation_deriv(x).abs();
            if d > max {
                max = d;
                argmax = x;
            }
            x += 0.001;
        }
        assert!(max <= 0.5 + 1e-12);
        assert!((max - 0.5).abs() < 1e-6);
        assert!((argmax.abs() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.3, 1.9, 11.0] {
            let h = 1e-6;
            let fd = (activation(x + h) - activation(x - h)) / (2.0 * h);
            assert!((fd - activation_deriv(x)).abs() < 1e-8);
        }
    }
}
