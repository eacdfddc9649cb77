//! Small sample statistics shared by the estimators.

/// Sample mean and standard error of the mean (`n - 1` denominator).
pub fn mean_and_stderr<I: IntoIterator<Item = f64>>(values: I) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for v in values {
        n += 1;
        let d = v - mean;
        mean += d / n as f64;
        m2 += d * (v - mean);
    }
    match n {
        0 => (f64::NAN, f64::NAN),
        1 => (mean, 0.0),
        _ => (mean, (m2 / (n - 1) as f64 / n as f64).sqrt()),
    }
}

/// Pearson correlation; 1 when both samples are constant and equal up to a shift.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 && sbb == 0.0 {
        return 1.0;
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stderr_of_small_sample() {
        let (m, s) = mean_and_stderr([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn perfect_correlation() {
        let a = [1.0, 2.0, 4.0];
        let b = [3.0, 5.0, 9.0];
        assert!((correlation(&a, &b) - 1.0).abs() < 1e-15);
    }
}
