//! Small summary statistics for result tables.

use statrs::distribution::{ContinuousCDF, StudentsT};

/// Arithmetic mean; NaN for an empty slice.
pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Standard error of the mean; NaN with fewer than two values.
pub fn std_error(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(x);
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Result of a one-sided paired t-test of `H1: mean(a - b) < 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p_value: f64,
}

pub fn paired_t_less(a: &[f64], b: &[f64]) -> Option<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let md = mean(&d);
    let se = std_error(&d);
    let n = d.len();
    let (t, p_value) = if se > 0.0 {
        let t = md / se;
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).ok()?;
        (t, dist.cdf(t))
    } else if md < 0.0 {
        (f64::NEG_INFINITY, 0.0)
    } else {
        (f64::INFINITY, 1.0)
    };
    Some(PairedTest {
        n,
        mean_diff: md,
        t,
        p_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert!((std_error(&[1.0, 2.0, 3.0]) - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(mean(&[]).is_nan());
        assert!(std_error(&[1.0]).is_nan());
    }

    #[test]
    fn paired_test_direction() {
        let a = [1.0, 1.1, 0.9, 1.2, 1.0];
        let b = [2.0, 2.2, 1.8, 2.1, 2.3];
        let r = paired_t_less(&a, &b).unwrap();
        assert!(r.p_value < 1e-3);
        let r = paired_t_less(&b, &a).unwrap();
        assert!(r.p_value > 0.999);
        // t = 1 with 1 degree of freedom has cdf 0.75.
        let r = paired_t_less(&[2.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((r.t - 1.0).abs() < 1e-12);
        assert!((r.p_value - 0.75).abs() < 1e-12);
    }
}
