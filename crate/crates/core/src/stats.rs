//! Small population statistics helpers.

/// Population mean and population standard deviation (divide by N).
///
/// Two-pass. When every value is identical the deviation is exactly zero,
/// regardless of rounding in the mean.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return (first, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        let (m, s) = mean_std(&[0.0, 1.0, 2.0]);
        assert_eq!(m, 1.0);
        assert!((s - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_is_exactly_zero() {
        let (m, s) = mean_std(&[0.1, 0.1, 0.1]);
        assert_eq!(m, 0.1);
        assert_eq!(s, 0.0);
    }
}
