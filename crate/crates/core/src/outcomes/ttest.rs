//! Welch's unequal-variance t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub mean_a: f64,
    pub mean_b: f64,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (
        m,
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0),
    )
}

/// Two-sided test with Welch-Satterthwaite degrees of freedom.
pub fn ttest_welch(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("each group needs at least two values"));
    }
    let (mean_a, va) = mean_var(a);
    let (mean_b, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        return Err(Error::invalid("both groups have zero variance"));
    }
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let t = (mean_a - mean_b) / (sa + sb).sqrt();
    let df =
        (sa + sb).powi(2) / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let p_value = if t == 0.0 {
        1.0
    } else {
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(TTestResult {
        mean_a,
        mean_b,
        t,
        df,
        p_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_fixture() {
        // means 2 and 3, variances 1 and 1: t = -1 / sqrt(2/3), df = 4
        let r = ttest_welch(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert!((r.t + (1.5f64).sqrt()).abs() < 1e-12);
        assert!((r.df - 4.0).abs() < 1e-12);
        // two-sided p for |t| = 1.2247 on 4 df
        assert!((r.p_value - 0.287864).abs() < 1e-5, "{}", r.p_value);
    }

    #[test]
    fn identical_groups() {
        let r = ttest_welch(&[1.0, 5.0, 2.0], &[1.0, 5.0, 2.0]).unwrap();
        assert_eq!((r.t, r.p_value), (0.0, 1.0));
    }

    #[test]
    fn degenerate_inputs() {
        assert!(ttest_welch(&[1.0], &[1.0, 2.0]).is_err());
        assert!(ttest_welch(&[1.0, 1.0], &[2.0, 2.0]).is_err());
    }
}
